//! Abstract syntax tree for the type-chain source language.
//!
//! Every node carries a source location and a `NodeId`. Node ids key the
//! side tables produced by the type checker; they are assigned densely by
//! the parser in visit order. Structural equality (used by the round-trip
//! property) ignores both locations and ids — see [`Program::normalized`].

use std::fmt;

/// Source position, 1-based line and column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Loc {
    pub line: u32,
    pub col: u32,
}

impl fmt::Display for Loc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

pub type NodeId = u32;

/// A source program plus its origin (file path or `"<inline>"`).
#[derive(Debug, Clone)]
pub struct SourceProgram {
    pub text: String,
    pub origin: String,
}

impl SourceProgram {
    pub fn new(text: impl Into<String>, origin: impl Into<String>) -> Self {
        SourceProgram {
            text: text.into(),
            origin: origin.into(),
        }
    }

    pub fn inline(text: impl Into<String>) -> Self {
        Self::new(text, "<inline>")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    pub stmts: Vec<Stmt>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub stmts: Vec<Stmt>,
    pub loc: Loc,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stmt {
    /// `var name : chain := init;` — chain and init each optional.
    VarDecl {
        id: NodeId,
        loc: Loc,
        name: String,
        chain: Option<TypeChainExpr>,
        init: Option<Expr>,
    },
    /// `lvalue := expr;`
    Assign {
        id: NodeId,
        loc: Loc,
        target: LValue,
        value: Expr,
    },
    /// `(lvalue :: chain) := expr;` — expression-scoped coercion.
    TypedAssign {
        id: NodeId,
        loc: Loc,
        target: LValue,
        chain: TypeChainExpr,
        value: Expr,
    },
    /// `name : chain;` — persistent retype, scoped to the enclosing block.
    Retype {
        id: NodeId,
        loc: Loc,
        name: String,
        chain: TypeChainExpr,
    },
    /// `for var from a to b { ... }` — upper bound exclusive, bounds
    /// evaluated once at loop entry, loop variable scoped to the body.
    For {
        id: NodeId,
        loc: Loc,
        var: String,
        from: Expr,
        to: Expr,
        body: Block,
    },
    If {
        id: NodeId,
        loc: Loc,
        cond: Expr,
        then_block: Block,
        else_block: Option<Block>,
    },
    /// `sync name;`
    Sync {
        id: NodeId,
        loc: Loc,
        name: String,
    },
    Break {
        id: NodeId,
        loc: Loc,
    },
    ExprStmt {
        id: NodeId,
        loc: Loc,
        expr: Expr,
    },
    Block(Block),
}

impl Stmt {
    pub fn loc(&self) -> Loc {
        match self {
            Stmt::VarDecl { loc, .. }
            | Stmt::Assign { loc, .. }
            | Stmt::TypedAssign { loc, .. }
            | Stmt::Retype { loc, .. }
            | Stmt::For { loc, .. }
            | Stmt::If { loc, .. }
            | Stmt::Sync { loc, .. }
            | Stmt::Break { loc, .. }
            | Stmt::ExprStmt { loc, .. } => *loc,
            Stmt::Block(b) => b.loc,
        }
    }
}

/// One link of a type-chain expression, e.g. `allocated[single[on[1]]]`.
/// Order in `links` is source order; precedence is resolved later.
#[derive(Debug, Clone, PartialEq)]
pub struct TypeChainExpr {
    pub links: Vec<TypeInstanceExpr>,
    pub loc: Loc,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TypeInstanceExpr {
    pub name: String,
    pub args: Vec<TypeArg>,
    pub loc: Loc,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TypeArg {
    Chain(TypeChainExpr),
    Int(i64),
    Ident(String),
}

/// `base[indices...].property` — covers plain variables, array elements,
/// and block-bounds queries like `data[pid()][i].low`.
#[derive(Debug, Clone, PartialEq)]
pub struct LValue {
    pub base: String,
    pub indices: Vec<Expr>,
    pub property: Option<BoundsProp>,
    pub loc: Loc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundsProp {
    Low,
    High,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Lt,
    Gt,
    Le,
    Ge,
    Eq,
    Ne,
}

impl BinOp {
    pub fn symbol(&self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Lt => "<",
            BinOp::Gt => ">",
            BinOp::Le => "<=",
            BinOp::Ge => ">=",
            BinOp::Eq => "==",
            BinOp::Ne => "!=",
        }
    }

    pub fn is_comparison(&self) -> bool {
        matches!(
            self,
            BinOp::Lt | BinOp::Gt | BinOp::Le | BinOp::Ge | BinOp::Eq | BinOp::Ne
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    IntLit {
        id: NodeId,
        loc: Loc,
        value: i64,
    },
    FloatLit {
        id: NodeId,
        loc: Loc,
        value: f64,
    },
    Access {
        id: NodeId,
        lv: LValue,
    },
    Call {
        id: NodeId,
        loc: Loc,
        name: String,
        args: Vec<Expr>,
    },
    Binary {
        id: NodeId,
        loc: Loc,
        op: BinOp,
        lhs: Box<Expr>,
        rhs: Box<Expr>,
    },
}

impl Expr {
    pub fn id(&self) -> NodeId {
        match self {
            Expr::IntLit { id, .. }
            | Expr::FloatLit { id, .. }
            | Expr::Access { id, .. }
            | Expr::Call { id, .. }
            | Expr::Binary { id, .. } => *id,
        }
    }

    pub fn loc(&self) -> Loc {
        match self {
            Expr::IntLit { loc, .. }
            | Expr::FloatLit { loc, .. }
            | Expr::Call { loc, .. }
            | Expr::Binary { loc, .. } => *loc,
            Expr::Access { lv, .. } => lv.loc,
        }
    }
}

impl Program {
    /// Copy with all locations and node ids zeroed, for structural
    /// comparison across reparses.
    pub fn normalized(&self) -> Program {
        let mut p = self.clone();
        for s in &mut p.stmts {
            norm_stmt(s);
        }
        p
    }
}

fn norm_stmt(s: &mut Stmt) {
    match s {
        Stmt::VarDecl {
            id,
            loc,
            chain,
            init,
            ..
        } => {
            *id = 0;
            *loc = Loc::default();
            if let Some(c) = chain {
                norm_chain(c);
            }
            if let Some(e) = init {
                norm_expr(e);
            }
        }
        Stmt::Assign {
            id,
            loc,
            target,
            value,
        } => {
            *id = 0;
            *loc = Loc::default();
            norm_lvalue(target);
            norm_expr(value);
        }
        Stmt::TypedAssign {
            id,
            loc,
            target,
            chain,
            value,
        } => {
            *id = 0;
            *loc = Loc::default();
            norm_lvalue(target);
            norm_chain(chain);
            norm_expr(value);
        }
        Stmt::Retype { id, loc, chain, .. } => {
            *id = 0;
            *loc = Loc::default();
            norm_chain(chain);
        }
        Stmt::For {
            id,
            loc,
            from,
            to,
            body,
            ..
        } => {
            *id = 0;
            *loc = Loc::default();
            norm_expr(from);
            norm_expr(to);
            norm_block(body);
        }
        Stmt::If {
            id,
            loc,
            cond,
            then_block,
            else_block,
        } => {
            *id = 0;
            *loc = Loc::default();
            norm_expr(cond);
            norm_block(then_block);
            if let Some(b) = else_block {
                norm_block(b);
            }
        }
        Stmt::Sync { id, loc, .. } | Stmt::Break { id, loc } => {
            *id = 0;
            *loc = Loc::default();
        }
        Stmt::ExprStmt { id, loc, expr } => {
            *id = 0;
            *loc = Loc::default();
            norm_expr(expr);
        }
        Stmt::Block(b) => norm_block(b),
    }
}

fn norm_block(b: &mut Block) {
    b.loc = Loc::default();
    for s in &mut b.stmts {
        norm_stmt(s);
    }
}

fn norm_chain(c: &mut TypeChainExpr) {
    c.loc = Loc::default();
    for link in &mut c.links {
        link.loc = Loc::default();
        for arg in &mut link.args {
            if let TypeArg::Chain(nested) = arg {
                norm_chain(nested);
            }
        }
    }
}

fn norm_lvalue(lv: &mut LValue) {
    lv.loc = Loc::default();
    for e in &mut lv.indices {
        norm_expr(e);
    }
}

fn norm_expr(e: &mut Expr) {
    match e {
        Expr::IntLit { id, loc, .. } | Expr::FloatLit { id, loc, .. } => {
            *id = 0;
            *loc = Loc::default();
        }
        Expr::Access { id, lv } => {
            *id = 0;
            norm_lvalue(lv);
        }
        Expr::Call { id, loc, args, .. } => {
            *id = 0;
            *loc = Loc::default();
            for a in args {
                norm_expr(a);
            }
        }
        Expr::Binary {
            id, loc, lhs, rhs, ..
        } => {
            *id = 0;
            *loc = Loc::default();
            norm_expr(lhs);
            norm_expr(rhs);
        }
    }
}
