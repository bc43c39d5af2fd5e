//! Type chains: validation, coercion, and attribute resolution.
//!
//! A chain is an ordered list of type instances (`Int :: allocated[...]`).
//! Attributes are resolved by folding links depth-first, left to right; each
//! link overwrites the attributes it governs, so the rightmost occurrence of
//! a conflicting attribute wins.

use crate::frontend::{Loc, TypeArg, TypeChainExpr};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ElemKind {
    Int,
    Double,
    Char,
    Bool,
}

impl ElemKind {
    pub fn byte_size(&self) -> u64 {
        match self {
            ElemKind::Int => 4,
            ElemKind::Double => 8,
            ElemKind::Char | ElemKind::Bool => 1,
        }
    }
}

impl fmt::Display for ElemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ElemKind::Int => "Int",
            ElemKind::Double => "Double",
            ElemKind::Char => "Char",
            ElemKind::Bool => "Bool",
        };
        f.write_str(s)
    }
}

/// The closed set of library types understood by this implementation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TypeName {
    Int,
    Double,
    Char,
    Bool,
    Array,
    Allocated,
    Single,
    On,
    EvenDist,
    Grid,
    Halo,
    Async,
    Racy,
    Channel,
    Const,
    Writable,
}

impl TypeName {
    pub fn from_str(s: &str) -> Option<TypeName> {
        Some(match s {
            "Int" => TypeName::Int,
            "Double" => TypeName::Double,
            "Char" => TypeName::Char,
            "Bool" => TypeName::Bool,
            "array" => TypeName::Array,
            "allocated" => TypeName::Allocated,
            "single" => TypeName::Single,
            "on" => TypeName::On,
            "evendist" => TypeName::EvenDist,
            "grid" => TypeName::Grid,
            "halo" => TypeName::Halo,
            "async" => TypeName::Async,
            "racy" => TypeName::Racy,
            "channel" => TypeName::Channel,
            "const" => TypeName::Const,
            "writable" => TypeName::Writable,
            _ => return None,
        })
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            TypeName::Int => "Int",
            TypeName::Double => "Double",
            TypeName::Char => "Char",
            TypeName::Bool => "Bool",
            TypeName::Array => "array",
            TypeName::Allocated => "allocated",
            TypeName::Single => "single",
            TypeName::On => "on",
            TypeName::EvenDist => "evendist",
            TypeName::Grid => "grid",
            TypeName::Halo => "halo",
            TypeName::Async => "async",
            TypeName::Racy => "racy",
            TypeName::Channel => "channel",
            TypeName::Const => "const",
            TypeName::Writable => "writable",
        }
    }

    fn base_kind(&self) -> Option<ElemKind> {
        match self {
            TypeName::Int => Some(ElemKind::Int),
            TypeName::Double => Some(ElemKind::Double),
            TypeName::Char => Some(ElemKind::Char),
            TypeName::Bool => Some(ElemKind::Bool),
            _ => None,
        }
    }
}

/// A validated type instance: identifier arguments have been evaluated to
/// integers, nested chains validated recursively.
#[derive(Debug, Clone, PartialEq)]
pub struct TypeInstance {
    pub name: TypeName,
    pub args: Vec<ResolvedArg>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ResolvedArg {
    Chain(TypeChain),
    Int(i64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TypeChain {
    pub links: Vec<TypeInstance>,
}

impl fmt::Display for TypeChain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, link) in self.links.iter().enumerate() {
            if i > 0 {
                f.write_str(" :: ")?;
            }
            f.write_str(link.name.as_str())?;
            if !link.args.is_empty() {
                f.write_str("[")?;
                for (j, a) in link.args.iter().enumerate() {
                    if j > 0 {
                        f.write_str(", ")?;
                    }
                    match a {
                        ResolvedArg::Chain(c) => write!(f, "{c}")?,
                        ResolvedArg::Int(v) => write!(f, "{v}")?,
                    }
                }
                f.write_str("]")?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
#[error("{message}")]
pub struct CoercionError {
    pub message: String,
    pub loc: Loc,
}

impl CoercionError {
    fn new(message: impl Into<String>, loc: Loc) -> Self {
        CoercionError {
            message: message.into(),
            loc,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    Replicated,
    OnProcess(i64),
    Distributed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommMode {
    OneSidedImmediate,
    ChannelP2P { src: i64, dst: i64 },
    HaloSync,
    HaloAsyncSafe,
    HaloAsyncRacy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mutability {
    ReadWrite,
    ReadOnly,
}

/// The flattened meaning of a chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedAttributes {
    pub element: ElemKind,
    /// Extents per dimension; empty for scalars.
    pub shape: Vec<i64>,
    pub placement: Placement,
    /// Block counts per dimension when a grid partition is present.
    pub partition: Option<Vec<i64>>,
    pub evendist: bool,
    pub halo_depth: i64,
    pub comm_mode: CommMode,
    pub mutability: Mutability,
    pub allocated: bool,
}

impl ResolvedAttributes {
    pub fn is_array(&self) -> bool {
        !self.shape.is_empty()
    }
}

/// Lookup for identifier type arguments (`grid[x,y,z]`): returns the
/// compile-time integer value of a constant variable, if known.
pub trait ConstLookup {
    fn lookup(&self, name: &str) -> Option<i64>;
}

impl<F: Fn(&str) -> Option<i64>> ConstLookup for F {
    fn lookup(&self, name: &str) -> Option<i64> {
        self(name)
    }
}

/// Converts a parsed chain expression into a validated `TypeChain`,
/// evaluating identifier arguments through `consts`.
pub fn build_chain(expr: &TypeChainExpr, consts: &dyn ConstLookup) -> Result<TypeChain, CoercionError> {
    let mut links = Vec::with_capacity(expr.links.len());
    for link in &expr.links {
        let name = TypeName::from_str(&link.name).ok_or_else(|| {
            CoercionError::new(format!("unknown type name `{}`", link.name), link.loc)
        })?;
        let mut args = Vec::with_capacity(link.args.len());
        for arg in &link.args {
            args.push(match arg {
                TypeArg::Int(v) => ResolvedArg::Int(*v),
                TypeArg::Chain(c) => ResolvedArg::Chain(build_chain(c, consts)?),
                TypeArg::Ident(id) => match TypeName::from_str(id) {
                    Some(n) => ResolvedArg::Chain(TypeChain {
                        links: vec![TypeInstance {
                            name: n,
                            args: Vec::new(),
                        }],
                    }),
                    None => ResolvedArg::Int(consts.lookup(id).ok_or_else(|| {
                        CoercionError::new(
                            format!(
                                "type argument `{id}` is not a type name or a \
                                 compile-time integer constant"
                            ),
                            link.loc,
                        )
                    })?),
                },
            });
        }
        validate_instance(name, &args, link.loc)?;
        links.push(TypeInstance { name, args });
    }
    Ok(TypeChain { links })
}

/// Per-type argument validation (arity and argument kinds).
fn validate_instance(name: TypeName, args: &[ResolvedArg], loc: Loc) -> Result<(), CoercionError> {
    let fail = |msg: String| Err(CoercionError::new(msg, loc));
    match name {
        TypeName::Int
        | TypeName::Double
        | TypeName::Char
        | TypeName::Bool
        | TypeName::EvenDist
        | TypeName::Async
        | TypeName::Racy
        | TypeName::Const
        | TypeName::Writable => {
            if !args.is_empty() {
                return fail(format!("`{}` takes no arguments", name.as_str()));
            }
        }
        TypeName::Array => {
            // array[elemChain, extent...]
            if args.is_empty() || args.len() > 4 {
                return fail("`array` requires an element type and 1 to 3 extents".into());
            }
            match &args[0] {
                ResolvedArg::Chain(c)
                    if c.links.len() == 1 && c.links[0].name.base_kind().is_some() => {}
                _ => return fail("first argument of `array` must be an element kind".into()),
            }
            if args.len() == 1 {
                return fail("`array` requires at least one extent".into());
            }
            for a in &args[1..] {
                match a {
                    ResolvedArg::Int(v) if *v >= 1 => {}
                    ResolvedArg::Int(v) => {
                        return fail(format!("array extent must be ≥ 1, got {v}"))
                    }
                    ResolvedArg::Chain(_) => {
                        return fail("array extents must be integers".into())
                    }
                }
            }
        }
        TypeName::Allocated => {
            if args.len() > 1 {
                return fail("`allocated` takes at most one placement argument".into());
            }
            if let Some(ResolvedArg::Int(_)) = args.first() {
                return fail("`allocated` argument must be a type chain".into());
            }
        }
        TypeName::Single => {
            if args.len() != 1 {
                return fail("`single` requires exactly one argument".into());
            }
            if let ResolvedArg::Int(_) = args[0] {
                return fail("`single` argument must be a type chain (`on[p]` or `evendist`)".into());
            }
        }
        TypeName::On => match args {
            [ResolvedArg::Int(p)] if *p >= 0 => {}
            _ => return fail("`on` requires one integer process id ≥ 0".into()),
        },
        TypeName::Grid => {
            // grid[haloChain?, d1, d2, ...]
            let dims = match args.first() {
                Some(ResolvedArg::Chain(_)) => &args[1..],
                _ => args,
            };
            if dims.is_empty() || dims.len() > 3 {
                return fail("`grid` requires 1 to 3 block counts".into());
            }
            for d in dims {
                match d {
                    ResolvedArg::Int(v) if *v >= 1 => {}
                    ResolvedArg::Int(v) => {
                        return fail(format!("grid block count must be ≥ 1, got {v}"))
                    }
                    ResolvedArg::Chain(_) => {
                        return fail(
                            "only the first `grid` argument may be a type chain".into(),
                        )
                    }
                }
            }
        }
        TypeName::Halo => match args {
            [ResolvedArg::Int(n)] if *n >= 0 => {}
            _ => return fail("`halo` requires one integer depth ≥ 0".into()),
        },
        TypeName::Channel => match args {
            [ResolvedArg::Int(s), ResolvedArg::Int(d)] if *s >= 0 && *d >= 0 => {}
            _ => return fail("`channel` requires two process ids ≥ 0".into()),
        },
    }
    Ok(())
}

/// Appends `addition`'s links to `chain` and revalidates the result.
pub fn coerce(chain: &TypeChain, addition: &TypeChain) -> Result<TypeChain, CoercionError> {
    let mut links = chain.links.clone();
    links.extend(addition.links.iter().cloned());
    let combined = TypeChain { links };
    resolve(&combined)?;
    Ok(combined)
}

#[derive(Default)]
struct Fold {
    element: Option<ElemKind>,
    shape: Option<Vec<i64>>,
    placement: Option<Placement>,
    partition: Option<Vec<i64>>,
    evendist: bool,
    halo_depth: Option<i64>,
    comm: Option<CommMode>,
    mutability: Option<Mutability>,
    allocated: bool,
    saw_async: bool,
}

/// Folds the chain into its resolved attributes, applying defaults for
/// anything left unset and checking cross-link invariants.
pub fn resolve(chain: &TypeChain) -> Result<ResolvedAttributes, CoercionError> {
    if chain.links.is_empty() {
        return Err(CoercionError::new("empty type chain", Loc::default()));
    }
    let mut f = Fold::default();
    fold_links(&mut f, &chain.links)?;

    let element = f.element.ok_or_else(|| {
        CoercionError::new(
            format!("chain `{chain}` has no base element kind or array type"),
            Loc::default(),
        )
    })?;
    let shape = f.shape.unwrap_or_default();

    if let Some(part) = &f.partition {
        if shape.is_empty() {
            return Err(CoercionError::new(
                "`grid` partition applied to a scalar",
                Loc::default(),
            ));
        }
        if part.len() != shape.len() {
            return Err(CoercionError::new(
                format!(
                    "grid has {} block counts but the array has {} dimensions",
                    part.len(),
                    shape.len()
                ),
                Loc::default(),
            ));
        }
    }
    let halo_depth = f.halo_depth.unwrap_or(0);
    if halo_depth > 0 && f.partition.is_none() {
        return Err(CoercionError::new(
            "`halo` requires a grid partition",
            Loc::default(),
        ));
    }
    let comm_mode = f.comm.unwrap_or(CommMode::OneSidedImmediate);
    if matches!(comm_mode, CommMode::HaloAsyncSafe | CommMode::HaloAsyncRacy) && halo_depth == 0 {
        return Err(CoercionError::new(
            "`async` communication requires `halo[n]` with n > 0",
            Loc::default(),
        ));
    }

    let placement = f.placement.unwrap_or({
        if !shape.is_empty() && f.allocated {
            Placement::Distributed
        } else {
            Placement::Replicated
        }
    });

    Ok(ResolvedAttributes {
        element,
        shape,
        placement,
        partition: f.partition,
        evendist: f.evendist,
        halo_depth,
        comm_mode,
        mutability: f.mutability.unwrap_or(Mutability::ReadWrite),
        allocated: f.allocated,
    })
}

fn fold_links(f: &mut Fold, links: &[TypeInstance]) -> Result<(), CoercionError> {
    for link in links {
        match link.name {
            TypeName::Int | TypeName::Double | TypeName::Char | TypeName::Bool => {
                let kind = link.name.base_kind().unwrap();
                set_element(f, kind)?;
            }
            TypeName::Array => {
                let ResolvedArg::Chain(elem) = &link.args[0] else {
                    unreachable!("validated")
                };
                let kind = elem.links[0].name.base_kind().unwrap();
                set_element(f, kind)?;
                f.shape = Some(
                    link.args[1..]
                        .iter()
                        .map(|a| match a {
                            ResolvedArg::Int(v) => *v,
                            ResolvedArg::Chain(_) => unreachable!("validated"),
                        })
                        .collect(),
                );
            }
            TypeName::Allocated => {
                f.allocated = true;
                if let Some(ResolvedArg::Chain(c)) = link.args.first() {
                    fold_links(f, &c.links)?;
                }
            }
            TypeName::Single => {
                let ResolvedArg::Chain(c) = &link.args[0] else {
                    unreachable!("validated")
                };
                fold_links(f, &c.links)?;
            }
            TypeName::On => {
                let ResolvedArg::Int(p) = link.args[0] else {
                    unreachable!("validated")
                };
                f.placement = Some(Placement::OnProcess(p));
            }
            TypeName::EvenDist => {
                f.evendist = true;
                f.placement = Some(Placement::Distributed);
            }
            TypeName::Grid => {
                let dims_start = match link.args.first() {
                    Some(ResolvedArg::Chain(c)) => {
                        fold_links(f, &c.links)?;
                        1
                    }
                    _ => 0,
                };
                f.partition = Some(
                    link.args[dims_start..]
                        .iter()
                        .map(|a| match a {
                            ResolvedArg::Int(v) => *v,
                            ResolvedArg::Chain(_) => unreachable!("validated"),
                        })
                        .collect(),
                );
            }
            TypeName::Halo => {
                let ResolvedArg::Int(n) = link.args[0] else {
                    unreachable!("validated")
                };
                f.halo_depth = Some(n);
                f.comm = Some(if n > 0 {
                    CommMode::HaloSync
                } else {
                    CommMode::OneSidedImmediate
                });
            }
            TypeName::Async => {
                f.saw_async = true;
                f.comm = Some(CommMode::HaloAsyncSafe);
            }
            TypeName::Racy => {
                if !f.saw_async {
                    return Err(CoercionError::new(
                        "`racy` requires `async` earlier in the chain",
                        Loc::default(),
                    ));
                }
                f.comm = Some(CommMode::HaloAsyncRacy);
            }
            TypeName::Channel => {
                let (ResolvedArg::Int(s), ResolvedArg::Int(d)) = (&link.args[0], &link.args[1])
                else {
                    unreachable!("validated")
                };
                f.comm = Some(CommMode::ChannelP2P { src: *s, dst: *d });
            }
            TypeName::Const => f.mutability = Some(Mutability::ReadOnly),
            TypeName::Writable => f.mutability = Some(Mutability::ReadWrite),
        }
    }
    Ok(())
}

fn set_element(f: &mut Fold, kind: ElemKind) -> Result<(), CoercionError> {
    if let Some(existing) = f.element {
        return Err(CoercionError::new(
            format!(
                "chain already has element kind {existing}; combining it with \
                 {kind} is meaningless"
            ),
            Loc::default(),
        ));
    }
    f.element = Some(kind);
    Ok(())
}
