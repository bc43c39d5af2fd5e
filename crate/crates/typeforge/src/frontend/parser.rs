//! Recursive-descent parser.
//!
//! One place needs backtracking: a statement opening with `(` is either a
//! typed assignment `(lvalue :: chain) := expr;` or a parenthesized
//! expression statement. The parser attempts the typed assignment first and
//! rewinds on failure.

use super::ast::*;
use super::lexer::{lex, Tok, Token};
use super::ParseError;

pub fn parse(src: &SourceProgram) -> Result<Program, ParseError> {
    let toks = lex(&src.text, &src.origin)?;
    let mut p = Parser {
        toks,
        pos: 0,
        origin: src.origin.clone(),
        next_id: 1,
    };
    let mut stmts = Vec::new();
    while p.peek() != &Tok::Eof {
        if let Some(s) = p.stmt()? {
            stmts.push(s);
        }
    }
    Ok(Program { stmts })
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
    origin: String,
    next_id: NodeId,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn peek_at(&self, n: usize) -> &Tok {
        let i = (self.pos + n).min(self.toks.len() - 1);
        &self.toks[i].tok
    }

    fn loc(&self) -> Loc {
        self.toks[self.pos].loc
    }

    fn bump(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn id(&mut self) -> NodeId {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    fn err(&self, message: impl Into<String>) -> ParseError {
        ParseError::Syntax {
            origin: self.origin.clone(),
            loc: self.loc(),
            message: message.into(),
        }
    }

    fn expect(&mut self, want: &Tok, what: &str) -> Result<Token, ParseError> {
        if self.peek() == want {
            Ok(self.bump())
        } else {
            Err(self.err(format!(
                "expected {what}, found {}",
                self.peek().describe()
            )))
        }
    }

    fn expect_ident(&mut self, what: &str) -> Result<(String, Loc), ParseError> {
        let loc = self.loc();
        match self.peek().clone() {
            Tok::Ident(name) => {
                self.bump();
                Ok((name, loc))
            }
            other => Err(self.err(format!("expected {what}, found {}", other.describe()))),
        }
    }

    /// Parses one statement; `None` for a tolerated stray `;`.
    fn stmt(&mut self) -> Result<Option<Stmt>, ParseError> {
        let loc = self.loc();
        match self.peek().clone() {
            Tok::Semi => {
                self.bump();
                Ok(None)
            }
            Tok::Var => {
                self.bump();
                let (name, _) = self.expect_ident("variable name after `var`")?;
                let chain = if self.peek() == &Tok::Colon {
                    self.bump();
                    Some(self.type_chain()?)
                } else {
                    None
                };
                let init = if self.peek() == &Tok::Assign {
                    self.bump();
                    Some(self.expr()?)
                } else {
                    None
                };
                self.expect(&Tok::Semi, "`;` after variable declaration")?;
                Ok(Some(Stmt::VarDecl {
                    id: self.id(),
                    loc,
                    name,
                    chain,
                    init,
                }))
            }
            Tok::For => {
                self.bump();
                let (var, _) = self.expect_ident("loop variable after `for`")?;
                self.expect(&Tok::From, "`from`")?;
                let from = self.expr()?;
                self.expect(&Tok::To, "`to`")?;
                let to = self.expr()?;
                let body = self.block()?;
                Ok(Some(Stmt::For {
                    id: self.id(),
                    loc,
                    var,
                    from,
                    to,
                    body,
                }))
            }
            Tok::If => {
                self.bump();
                self.expect(&Tok::LParen, "`(` after `if`")?;
                let cond = self.expr()?;
                self.expect(&Tok::RParen, "`)` after condition")?;
                let then_block = self.block_or_stmt()?;
                let else_block = if self.peek() == &Tok::Else {
                    self.bump();
                    Some(self.block_or_stmt()?)
                } else {
                    None
                };
                Ok(Some(Stmt::If {
                    id: self.id(),
                    loc,
                    cond,
                    then_block,
                    else_block,
                }))
            }
            Tok::Sync => {
                self.bump();
                let (name, _) = self.expect_ident("variable name after `sync`")?;
                self.expect(&Tok::Semi, "`;` after `sync`")?;
                Ok(Some(Stmt::Sync {
                    id: self.id(),
                    loc,
                    name,
                }))
            }
            Tok::Break => {
                self.bump();
                self.expect(&Tok::Semi, "`;` after `break`")?;
                Ok(Some(Stmt::Break { id: self.id(), loc }))
            }
            Tok::LBrace => Ok(Some(Stmt::Block(self.block()?))),
            Tok::LParen => {
                // Try `(lvalue :: chain) := expr;` and rewind on failure.
                let save = self.pos;
                match self.typed_assign(loc) {
                    Ok(s) => Ok(Some(s)),
                    Err(_) => {
                        self.pos = save;
                        self.expr_like_stmt(loc).map(Some)
                    }
                }
            }
            Tok::Ident(_) => {
                // Retype `name : chain ;` needs two tokens of lookahead;
                // everything else starting with an identifier goes through
                // the expression path.
                if self.peek_at(1) == &Tok::Colon {
                    let (name, _) = self.expect_ident("identifier")?;
                    self.bump(); // `:`
                    let chain = self.type_chain()?;
                    self.expect(&Tok::Semi, "`;` after retype")?;
                    Ok(Some(Stmt::Retype {
                        id: self.id(),
                        loc,
                        name,
                        chain,
                    }))
                } else {
                    self.expr_like_stmt(loc).map(Some)
                }
            }
            other => Err(self.err(format!("expected a statement, found {}", other.describe()))),
        }
    }

    /// Assignment or expression statement: parse an expression, then decide
    /// by the trailing token.
    fn expr_like_stmt(&mut self, loc: Loc) -> Result<Stmt, ParseError> {
        let e = self.expr()?;
        if self.peek() == &Tok::Assign {
            let target = match e {
                Expr::Access { lv, .. } => lv,
                _ => return Err(self.err("left side of `:=` must be a variable or array element")),
            };
            self.bump();
            let value = self.expr()?;
            self.expect(&Tok::Semi, "`;` after assignment")?;
            Ok(Stmt::Assign {
                id: self.id(),
                loc,
                target,
                value,
            })
        } else {
            self.expect(&Tok::Semi, "`;` after expression")?;
            Ok(Stmt::ExprStmt {
                id: self.id(),
                loc,
                expr: e,
            })
        }
    }

    fn typed_assign(&mut self, loc: Loc) -> Result<Stmt, ParseError> {
        self.expect(&Tok::LParen, "`(`")?;
        let target = self.lvalue()?;
        self.expect(&Tok::ColonColon, "`::`")?;
        let chain = self.type_chain()?;
        self.expect(&Tok::RParen, "`)`")?;
        self.expect(&Tok::Assign, "`:=`")?;
        let value = self.expr()?;
        self.expect(&Tok::Semi, "`;` after assignment")?;
        Ok(Stmt::TypedAssign {
            id: self.id(),
            loc,
            target,
            chain,
            value,
        })
    }

    fn block(&mut self) -> Result<Block, ParseError> {
        let loc = self.loc();
        self.expect(&Tok::LBrace, "`{`")?;
        let mut stmts = Vec::new();
        while self.peek() != &Tok::RBrace {
            if self.peek() == &Tok::Eof {
                return Err(self.err("unclosed block: expected `}`"));
            }
            if let Some(s) = self.stmt()? {
                stmts.push(s);
            }
        }
        self.bump();
        Ok(Block { stmts, loc })
    }

    /// A brace block, or a single statement wrapped as one (for `if` arms).
    fn block_or_stmt(&mut self) -> Result<Block, ParseError> {
        if self.peek() == &Tok::LBrace {
            self.block()
        } else {
            let loc = self.loc();
            match self.stmt()? {
                Some(s) => Ok(Block {
                    stmts: vec![s],
                    loc,
                }),
                None => Ok(Block {
                    stmts: Vec::new(),
                    loc,
                }),
            }
        }
    }

    fn type_chain(&mut self) -> Result<TypeChainExpr, ParseError> {
        let loc = self.loc();
        let mut links = vec![self.type_instance()?];
        while self.peek() == &Tok::ColonColon {
            self.bump();
            links.push(self.type_instance()?);
        }
        Ok(TypeChainExpr { links, loc })
    }

    fn type_instance(&mut self) -> Result<TypeInstanceExpr, ParseError> {
        let (name, loc) = self.expect_ident("type name")?;
        let mut args = Vec::new();
        if self.peek() == &Tok::LBracket {
            self.bump();
            loop {
                args.push(self.type_arg()?);
                if self.peek() == &Tok::Comma {
                    self.bump();
                } else {
                    break;
                }
            }
            self.expect(&Tok::RBracket, "`]` closing type arguments")?;
        }
        Ok(TypeInstanceExpr { name, args, loc })
    }

    /// A type argument is an integer literal, a nested chain, or a bare
    /// identifier. A bare identifier stays unresolved here: whether it names
    /// a type (`evendist`) or a constant variable (`grid[x,y,z]`) is decided
    /// by the type checker.
    fn type_arg(&mut self) -> Result<TypeArg, ParseError> {
        match self.peek().clone() {
            Tok::Int(v) => {
                self.bump();
                Ok(TypeArg::Int(v))
            }
            Tok::Ident(name) => {
                if matches!(self.peek_at(1), Tok::LBracket | Tok::ColonColon) {
                    Ok(TypeArg::Chain(self.type_chain()?))
                } else {
                    self.bump();
                    Ok(TypeArg::Ident(name))
                }
            }
            other => Err(self.err(format!(
                "expected a type argument, found {}",
                other.describe()
            ))),
        }
    }

    fn lvalue(&mut self) -> Result<LValue, ParseError> {
        let (base, loc) = self.expect_ident("variable name")?;
        self.lvalue_tail(base, loc)
    }

    fn lvalue_tail(&mut self, base: String, loc: Loc) -> Result<LValue, ParseError> {
        let mut indices = Vec::new();
        while self.peek() == &Tok::LBracket {
            self.bump();
            indices.push(self.expr()?);
            self.expect(&Tok::RBracket, "`]` closing index")?;
        }
        let property = if self.peek() == &Tok::Dot {
            self.bump();
            let (prop, ploc) = self.expect_ident("`low` or `high` after `.`")?;
            match prop.as_str() {
                "low" => Some(BoundsProp::Low),
                "high" => Some(BoundsProp::High),
                other => {
                    return Err(ParseError::Syntax {
                        origin: self.origin.clone(),
                        loc: ploc,
                        message: format!("unknown property `.{other}`; expected `.low` or `.high`"),
                    });
                }
            }
        } else {
            None
        };
        Ok(LValue {
            base,
            indices,
            property,
            loc,
        })
    }

    // Expression grammar, loosest to tightest:
    //   expr  := add (cmpop add)*
    //   add   := mul (('+'|'-') mul)*
    //   mul   := atom (('*'|'/') atom)*
    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.add()?;
        loop {
            let op = match self.peek() {
                Tok::Lt => BinOp::Lt,
                Tok::Gt => BinOp::Gt,
                Tok::Le => BinOp::Le,
                Tok::Ge => BinOp::Ge,
                Tok::EqEq => BinOp::Eq,
                Tok::Ne => BinOp::Ne,
                _ => break,
            };
            let loc = self.loc();
            self.bump();
            let rhs = self.add()?;
            lhs = Expr::Binary {
                id: self.id(),
                loc,
                op,
                lhs: Box::new(lhs),
                rhs: Box::new(rhs),
            };
        }
        Ok(lhs)
    }

    fn add(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.mul()?;
        loop {
            let op = match self.peek() {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => break,
            };
            let loc = self.loc();
            self.bump();
            let rhs = self.mul()?;
            lhs = Expr::Binary {
                id: self.id(),
                loc,
                op,
                lhs: Box::new(lhs),
                rhs: Box::new(rhs),
            };
        }
        Ok(lhs)
    }

    fn mul(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.atom()?;
        loop {
            let op = match self.peek() {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                _ => break,
            };
            let loc = self.loc();
            self.bump();
            let rhs = self.atom()?;
            lhs = Expr::Binary {
                id: self.id(),
                loc,
                op,
                lhs: Box::new(lhs),
                rhs: Box::new(rhs),
            };
        }
        Ok(lhs)
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let loc = self.loc();
        match self.peek().clone() {
            Tok::Int(v) => {
                self.bump();
                Ok(Expr::IntLit {
                    id: self.id(),
                    loc,
                    value: v,
                })
            }
            Tok::Float(v) => {
                self.bump();
                Ok(Expr::FloatLit {
                    id: self.id(),
                    loc,
                    value: v,
                })
            }
            Tok::LParen => {
                self.bump();
                let e = self.expr()?;
                self.expect(&Tok::RParen, "`)`")?;
                Ok(e)
            }
            Tok::Ident(name) => {
                self.bump();
                if self.peek() == &Tok::LParen {
                    self.bump();
                    let mut args = Vec::new();
                    if self.peek() != &Tok::RParen {
                        loop {
                            args.push(self.expr()?);
                            if self.peek() == &Tok::Comma {
                                self.bump();
                            } else {
                                break;
                            }
                        }
                    }
                    self.expect(&Tok::RParen, "`)` closing call arguments")?;
                    // A call result can be indexed: `data[pid()][i].low` uses
                    // indices on the lvalue, but `f()[i]` is not supported.
                    Ok(Expr::Call {
                        id: self.id(),
                        loc,
                        name,
                        args,
                    })
                } else {
                    let lv = self.lvalue_tail(name, loc)?;
                    Ok(Expr::Access { id: self.id(), lv })
                }
            }
            other => Err(self.err(format!(
                "expected an expression, found {}",
                other.describe()
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse_ok(src: &str) -> Program {
        parse(&SourceProgram::inline(src)).unwrap()
    }

    fn parse_err(src: &str) -> ParseError {
        parse(&SourceProgram::inline(src)).unwrap_err()
    }

    #[test]
    fn var_decl_forms() {
        let p = parse_ok("var a; var b := 1; var c : Int; var d : Double := 2.5;");
        assert_eq!(p.stmts.len(), 4);
        match &p.stmts[3] {
            Stmt::VarDecl { name, chain, init, .. } => {
                assert_eq!(name, "d");
                assert!(chain.is_some());
                assert!(matches!(init, Some(Expr::FloatLit { value, .. }) if *value == 2.5));
            }
            other => panic!("expected var decl, got {other:?}"),
        }
    }

    #[test]
    fn nested_chain_args() {
        let p = parse_ok("var a : Int :: allocated[single[on[1]]];");
        let Stmt::VarDecl { chain: Some(c), .. } = &p.stmts[0] else {
            panic!()
        };
        assert_eq!(c.links.len(), 2);
        assert_eq!(c.links[1].name, "allocated");
        let TypeArg::Chain(inner) = &c.links[1].args[0] else {
            panic!("expected nested chain")
        };
        assert_eq!(inner.links[0].name, "single");
        let TypeArg::Chain(on) = &inner.links[0].args[0] else {
            panic!("expected nested chain")
        };
        assert_eq!(on.links[0].name, "on");
        assert_eq!(on.links[0].args, vec![TypeArg::Int(1)]);
    }

    #[test]
    fn chain_args_mixing_idents_and_chains() {
        let p = parse_ok("var d : array[Double] :: grid[halo[1]::async, nx, ny, nz];");
        let Stmt::VarDecl { chain: Some(c), .. } = &p.stmts[0] else {
            panic!()
        };
        let g = &c.links[1];
        assert_eq!(g.name, "grid");
        assert_eq!(g.args.len(), 4);
        let TypeArg::Chain(h) = &g.args[0] else {
            panic!("halo[1]::async should parse as a chain")
        };
        assert_eq!(h.links.len(), 2);
        assert_eq!(h.links[1].name, "async");
        assert_eq!(g.args[1], TypeArg::Ident("nx".into()));
    }

    #[test]
    fn typed_assign_vs_paren_expr() {
        let p = parse_ok("(a :: writable) := 9; pid();");
        assert!(matches!(&p.stmts[0], Stmt::TypedAssign { .. }));
        assert!(matches!(&p.stmts[1], Stmt::ExprStmt { .. }));
    }

    #[test]
    fn retype_statement() {
        let p = parse_ok("a : a :: writable;");
        let Stmt::Retype { name, chain, .. } = &p.stmts[0] else {
            panic!("expected retype")
        };
        assert_eq!(name, "a");
        assert_eq!(chain.links.len(), 2);
        assert_eq!(chain.links[0].name, "a");
    }

    #[test]
    fn for_loop_and_stray_semicolons() {
        let p = parse_ok("for i from 1 to 10 { a := i; }; ;");
        assert_eq!(p.stmts.len(), 1);
        let Stmt::For { var, body, .. } = &p.stmts[0] else {
            panic!()
        };
        assert_eq!(var, "i");
        assert_eq!(body.stmts.len(), 1);
    }

    #[test]
    fn if_else_single_statement_arms() {
        let p = parse_ok("if (a < 1) b := 2; else { b := 3; }");
        let Stmt::If {
            then_block,
            else_block,
            ..
        } = &p.stmts[0]
        else {
            panic!()
        };
        assert_eq!(then_block.stmts.len(), 1);
        assert_eq!(else_block.as_ref().unwrap().stmts.len(), 1);
    }

    #[test]
    fn precedence_mul_over_add_over_cmp() {
        let p = parse_ok("var x := 1 + 2 * 3 < 10;");
        let Stmt::VarDecl { init: Some(e), .. } = &p.stmts[0] else {
            panic!()
        };
        let Expr::Binary { op, lhs, .. } = e else { panic!() };
        assert_eq!(*op, BinOp::Lt);
        let Expr::Binary { op, rhs, .. } = lhs.as_ref() else {
            panic!()
        };
        assert_eq!(*op, BinOp::Add);
        assert!(matches!(
            rhs.as_ref(),
            Expr::Binary { op: BinOp::Mul, .. }
        ));
    }

    #[test]
    fn indexing_and_bounds_props() {
        let p = parse_ok("var lo := data[pid()][i].low; u[i][j][k] := 0.0;");
        let Stmt::VarDecl { init: Some(e), .. } = &p.stmts[0] else {
            panic!()
        };
        let Expr::Access { lv, .. } = e else { panic!() };
        assert_eq!(lv.base, "data");
        assert_eq!(lv.indices.len(), 2);
        assert_eq!(lv.property, Some(BoundsProp::Low));
        let Stmt::Assign { target, .. } = &p.stmts[1] else {
            panic!()
        };
        assert_eq!(target.indices.len(), 3);
    }

    #[test]
    fn error_carries_location() {
        let e = parse_err("var a := 1;\nvar b := ;\n");
        let ParseError::Syntax { loc, .. } = e else {
            panic!("expected syntax error, got {e:?}")
        };
        assert_eq!(loc.line, 2);
    }

    #[test]
    fn no_unary_minus() {
        assert!(parse(&SourceProgram::inline("var a := -1;")).is_err());
        // Subtraction still works.
        parse_ok("var a := 0 - 1;");
    }
}
