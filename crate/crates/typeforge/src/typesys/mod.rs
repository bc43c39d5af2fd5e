//! Type chains, their resolution into attributes, and program checking.

pub mod chain;
pub mod check;
pub mod env;

pub use chain::{
    build_chain, coerce, resolve, CoercionError, CommMode, ConstLookup, ElemKind, Mutability,
    Placement, ResolvedArg, ResolvedAttributes, TypeChain, TypeInstance, TypeName,
};
pub use check::{check, AssignKind, CheckedProgram, DeclInfo, Diagnostic, Storage};
pub use env::{EnvBinding, TypeEnvironment};

/// Index of a declaration within a checked program.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DeclId(pub u32);
