//! Pretty printer. Guarantees that reparsing the output yields a program
//! structurally equal (modulo locations and node ids) to the input.

use super::ast::*;
use std::fmt::Write;

pub fn pretty(program: &Program) -> String {
    let mut out = String::new();
    for s in &program.stmts {
        stmt(&mut out, s, 0);
    }
    out
}

fn indent(out: &mut String, depth: usize) {
    for _ in 0..depth {
        out.push_str("    ");
    }
}

fn stmt(out: &mut String, s: &Stmt, depth: usize) {
    indent(out, depth);
    match s {
        Stmt::VarDecl {
            name, chain, init, ..
        } => {
            write!(out, "var {name}").unwrap();
            if let Some(c) = chain {
                write!(out, " : {}", chain_str(c)).unwrap();
            }
            if let Some(e) = init {
                write!(out, " := {}", expr_str(e, 0)).unwrap();
            }
            out.push_str(";\n");
        }
        Stmt::Assign { target, value, .. } => {
            writeln!(out, "{} := {};", lvalue_str(target), expr_str(value, 0)).unwrap();
        }
        Stmt::TypedAssign {
            target,
            chain,
            value,
            ..
        } => {
            writeln!(
                out,
                "({} :: {}) := {};",
                lvalue_str(target),
                chain_str(chain),
                expr_str(value, 0)
            )
            .unwrap();
        }
        Stmt::Retype { name, chain, .. } => {
            writeln!(out, "{name} : {};", chain_str(chain)).unwrap();
        }
        Stmt::For {
            var,
            from,
            to,
            body,
            ..
        } => {
            writeln!(
                out,
                "for {var} from {} to {} {{",
                expr_str(from, 0),
                expr_str(to, 0)
            )
            .unwrap();
            for s in &body.stmts {
                stmt(out, s, depth + 1);
            }
            indent(out, depth);
            out.push_str("}\n");
        }
        Stmt::If {
            cond,
            then_block,
            else_block,
            ..
        } => {
            writeln!(out, "if ({}) {{", expr_str(cond, 0)).unwrap();
            for s in &then_block.stmts {
                stmt(out, s, depth + 1);
            }
            indent(out, depth);
            out.push('}');
            if let Some(eb) = else_block {
                out.push_str(" else {\n");
                for s in &eb.stmts {
                    stmt(out, s, depth + 1);
                }
                indent(out, depth);
                out.push('}');
            }
            out.push('\n');
        }
        Stmt::Sync { name, .. } => {
            writeln!(out, "sync {name};").unwrap();
        }
        Stmt::Break { .. } => {
            out.push_str("break;\n");
        }
        Stmt::ExprStmt { expr, .. } => {
            writeln!(out, "{};", expr_str(expr, 0)).unwrap();
        }
        Stmt::Block(b) => {
            out.push_str("{\n");
            for s in &b.stmts {
                stmt(out, s, depth + 1);
            }
            indent(out, depth);
            out.push_str("}\n");
        }
    }
}

pub fn chain_str(c: &TypeChainExpr) -> String {
    c.links
        .iter()
        .map(instance_str)
        .collect::<Vec<_>>()
        .join(" :: ")
}

fn instance_str(t: &TypeInstanceExpr) -> String {
    if t.args.is_empty() {
        t.name.clone()
    } else {
        let args = t
            .args
            .iter()
            .map(|a| match a {
                TypeArg::Chain(c) => chain_str(c),
                TypeArg::Int(v) => v.to_string(),
                TypeArg::Ident(s) => s.clone(),
            })
            .collect::<Vec<_>>()
            .join(", ");
        format!("{}[{}]", t.name, args)
    }
}

fn lvalue_str(lv: &LValue) -> String {
    let mut s = lv.base.clone();
    for e in &lv.indices {
        write!(s, "[{}]", expr_str(e, 0)).unwrap();
    }
    match lv.property {
        Some(BoundsProp::Low) => s.push_str(".low"),
        Some(BoundsProp::High) => s.push_str(".high"),
        None => {}
    }
    s
}

fn prec(op: BinOp) -> u8 {
    match op {
        BinOp::Lt | BinOp::Gt | BinOp::Le | BinOp::Ge | BinOp::Eq | BinOp::Ne => 1,
        BinOp::Add | BinOp::Sub => 2,
        BinOp::Mul | BinOp::Div => 3,
    }
}

/// `min_prec` is the binding strength required by the surrounding context;
/// weaker subexpressions get wrapped in parentheses so the output reparses
/// with the same shape.
fn expr_str(e: &Expr, min_prec: u8) -> String {
    match e {
        Expr::IntLit { value, .. } => value.to_string(),
        // `{:?}` keeps a trailing `.0` / exponent so the literal stays a float.
        Expr::FloatLit { value, .. } => format!("{value:?}"),
        Expr::Access { lv, .. } => lvalue_str(lv),
        Expr::Call { name, args, .. } => {
            let args = args
                .iter()
                .map(|a| expr_str(a, 0))
                .collect::<Vec<_>>()
                .join(", ");
            format!("{name}({args})")
        }
        Expr::Binary { op, lhs, rhs, .. } => {
            let p = prec(*op);
            // Left-associative: the right child must bind strictly tighter.
            let s = format!(
                "{} {} {}",
                expr_str(lhs, p),
                op.symbol(),
                expr_str(rhs, p + 1)
            );
            if p < min_prec {
                format!("({s})")
            } else {
                s
            }
        }
    }
}
