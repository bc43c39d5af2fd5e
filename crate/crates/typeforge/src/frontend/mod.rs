//! Source language frontend: lexer, parser, AST, and pretty printer.

pub mod ast;
mod lexer;
mod parser;
pub mod pretty;

pub use ast::{
    BinOp, Block, BoundsProp, Expr, LValue, Loc, NodeId, Program, SourceProgram, Stmt, TypeArg,
    TypeChainExpr, TypeInstanceExpr,
};
pub use parser::parse;
pub use pretty::{chain_str, pretty};

use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ParseError {
    #[error("{origin}:{loc}: error: {message}")]
    Lex {
        origin: String,
        loc: Loc,
        message: String,
    },
    #[error("{origin}:{loc}: error: {message}")]
    Syntax {
        origin: String,
        loc: Loc,
        message: String,
    },
}

impl ParseError {
    pub fn loc(&self) -> Loc {
        match self {
            ParseError::Lex { loc, .. } | ParseError::Syntax { loc, .. } => *loc,
        }
    }
}
