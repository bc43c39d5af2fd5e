//! Whole-program type checking.
//!
//! Produces dense side tables keyed by AST node id: which declaration each
//! name refers to, how each assignment executes, and the resolved attributes
//! of every declaration. The interpreter consumes these tables directly.

use super::chain::{
    build_chain, coerce, resolve, CoercionError, CommMode, ElemKind, Mutability, Placement,
    ResolvedAttributes, TypeChain,
};
use super::env::TypeEnvironment;
use super::DeclId;
use crate::frontend::{Block, Expr, LValue, Loc, NodeId, Program, Stmt, TypeChainExpr};
use std::collections::HashSet;

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub loc: Loc,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Storage {
    /// Each process holds its own copy.
    Replicated,
    /// One copy in the PGAS window of `owner`.
    SingleSlot { owner: i64 },
    /// Grid-partitioned distributed array.
    DistArray,
}

#[derive(Debug, Clone)]
pub struct DeclInfo {
    pub name: String,
    pub attrs: ResolvedAttributes,
    pub storage: Storage,
    pub loc: Loc,
    /// Compile-time integer value, when the variable qualifies as a constant
    /// (integer initializer, never reassigned).
    pub const_value: Option<i64>,
}

/// How an assignment statement executes at run time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssignKind {
    /// Every process updates its own copy.
    LocalScalar { decl: DeclId },
    /// First assignment to an undeclared name: declares, then as LocalScalar.
    ImplicitDecl { decl: DeclId },
    /// Owner-executes: only the owning process evaluates and stores.
    SingleScalar { decl: DeclId, owner: i64 },
    /// All processes execute; the write routes to the owning block.
    ArrayElement { decl: DeclId },
    /// Whole-array assignment between identically specified arrays.
    BlockCopy { dst: DeclId, src: DeclId },
    /// Expression-scoped `channel[src,dst]` coercion: src evaluates and
    /// sends, dst receives and stores, everyone else skips.
    Channel { decl: DeclId, src: i64, dst: i64 },
}

#[derive(Debug)]
pub struct CheckedProgram {
    pub program: Program,
    pub origin: String,
    pub decls: Vec<DeclInfo>,
    /// NodeId → declaration, for accesses, var/for declarations, and sync.
    pub resolutions: Vec<Option<DeclId>>,
    /// NodeId → assignment classification (Assign / TypedAssign only).
    pub assign_kinds: Vec<Option<AssignKind>>,
    pub warnings: Vec<Diagnostic>,
    /// True when any declaration uses asynchronous halo communication.
    pub uses_async: bool,
}

impl CheckedProgram {
    pub fn decl(&self, id: DeclId) -> &DeclInfo {
        &self.decls[id.0 as usize]
    }

    pub fn resolution(&self, node: NodeId) -> DeclId {
        self.resolutions[node as usize].expect("checked node has a resolution")
    }

    pub fn assign_kind(&self, node: NodeId) -> AssignKind {
        self.assign_kinds[node as usize].expect("checked assignment has a kind")
    }
}

/// Static value category of an expression.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Val(ElemKind),
    /// Whole-array reference.
    Array(DeclId),
    /// No value (builtin procedures).
    Unit,
    /// Error recovery: an error was already reported for this expression.
    Unknown,
}

pub fn check(program: Program, origin: &str) -> Result<CheckedProgram, Vec<Diagnostic>> {
    let node_count = max_node_id(&program) as usize + 1;
    let mut ck = Checker {
        env: TypeEnvironment::new(),
        decls: Vec::new(),
        resolutions: vec![None; node_count],
        assign_kinds: vec![None; node_count],
        errors: Vec::new(),
        warnings: Vec::new(),
        assigned_names: collect_assigned_names(&program),
        loop_depth: 0,
    };
    for stmt in &program.stmts {
        ck.stmt(stmt);
    }
    let by_loc = |d: &Diagnostic| (d.loc.line, d.loc.col);
    if !ck.errors.is_empty() {
        ck.errors.sort_by_key(by_loc);
        return Err(ck.errors);
    }
    ck.warnings.sort_by_key(by_loc);
    let uses_async = ck.decls.iter().any(|d| {
        matches!(
            d.attrs.comm_mode,
            CommMode::HaloAsyncSafe | CommMode::HaloAsyncRacy
        )
    });
    Ok(CheckedProgram {
        program,
        origin: origin.to_string(),
        decls: ck.decls,
        resolutions: ck.resolutions,
        assign_kinds: ck.assign_kinds,
        warnings: ck.warnings,
        uses_async,
    })
}

struct Checker {
    env: TypeEnvironment,
    decls: Vec<DeclInfo>,
    resolutions: Vec<Option<DeclId>>,
    assign_kinds: Vec<Option<AssignKind>>,
    errors: Vec<Diagnostic>,
    warnings: Vec<Diagnostic>,
    /// Names targeted by any assignment anywhere; such variables never
    /// qualify as compile-time constants.
    assigned_names: HashSet<String>,
    loop_depth: u32,
}

impl Checker {
    fn error(&mut self, loc: Loc, message: impl Into<String>) {
        self.errors.push(Diagnostic {
            loc,
            message: message.into(),
        });
    }

    fn warn(&mut self, loc: Loc, message: impl Into<String>) {
        self.warnings.push(Diagnostic {
            loc,
            message: message.into(),
        });
    }

    fn coercion_error(&mut self, fallback: Loc, e: CoercionError) {
        let loc = if e.loc == Loc::default() { fallback } else { e.loc };
        self.error(loc, e.message);
    }

    fn build_chain(&mut self, expr: &TypeChainExpr) -> Option<TypeChain> {
        let env = &self.env;
        let decls = &self.decls;
        let lookup = move |name: &str| -> Option<i64> {
            env.lookup(name)
                .and_then(|b| decls[b.decl.0 as usize].const_value)
        };
        match build_chain(expr, &lookup) {
            Ok(c) => Some(c),
            Err(e) => {
                self.coercion_error(expr.loc, e);
                None
            }
        }
    }

    fn declare(
        &mut self,
        name: &str,
        chain: TypeChain,
        attrs: ResolvedAttributes,
        storage: Storage,
        loc: Loc,
        const_value: Option<i64>,
    ) -> DeclId {
        let id = DeclId(self.decls.len() as u32);
        self.decls.push(DeclInfo {
            name: name.to_string(),
            attrs,
            storage,
            loc,
            const_value,
        });
        self.env.declare(name, id, chain);
        id
    }

    fn scalar_chain(kind: ElemKind) -> TypeChain {
        use super::chain::{TypeInstance, TypeName};
        let name = match kind {
            ElemKind::Int => TypeName::Int,
            ElemKind::Double => TypeName::Double,
            ElemKind::Char => TypeName::Char,
            ElemKind::Bool => TypeName::Bool,
        };
        TypeChain {
            links: vec![TypeInstance {
                name,
                args: Vec::new(),
            }],
        }
    }

    fn stmt(&mut self, s: &Stmt) {
        match s {
            Stmt::VarDecl {
                id,
                loc,
                name,
                chain,
                init,
            } => self.var_decl(*id, *loc, name, chain.as_ref(), init.as_ref()),
            Stmt::Assign {
                id,
                loc,
                target,
                value,
            } => self.assign(*id, *loc, target, value),
            Stmt::TypedAssign {
                id,
                loc,
                target,
                chain,
                value,
            } => self.typed_assign(*id, *loc, target, chain, value),
            Stmt::Retype {
                id,
                loc,
                name,
                chain,
            } => self.retype(*id, *loc, name, chain),
            Stmt::For {
                id,
                loc,
                var,
                from,
                to,
                body,
            } => {
                for bound in [from, to] {
                    match self.expr(bound) {
                        Kind::Val(ElemKind::Int) | Kind::Unknown => {}
                        _ => self.error(bound.loc(), "loop bounds must be integers"),
                    }
                }
                // The loop variable shares a scope with the body.
                self.env.scopes_push();
                let decl = self.declare(
                    var,
                    Self::scalar_chain(ElemKind::Int),
                    scalar_attrs(ElemKind::Int),
                    Storage::Replicated,
                    *loc,
                    None,
                );
                self.resolutions[*id as usize] = Some(decl);
                self.loop_depth += 1;
                for s in &body.stmts {
                    self.stmt(s);
                }
                self.loop_depth -= 1;
                self.env.scopes_pop();
            }
            Stmt::If {
                loc,
                cond,
                then_block,
                else_block,
                ..
            } => {
                match self.expr(cond) {
                    Kind::Val(ElemKind::Bool) | Kind::Unknown => {}
                    _ => self.error(
                        *loc,
                        "if condition must be a comparison or Bool expression",
                    ),
                }
                let divergent = self.divergent_expr(cond);
                for block in [Some(then_block), else_block.as_ref()].into_iter().flatten() {
                    if divergent && contains_loop_break(block) {
                        self.warn(
                            *loc,
                            "break depends on process-divergent state; processes may \
                             exit this loop inconsistently",
                        );
                    }
                    self.block(block);
                }
            }
            Stmt::Sync { id, loc, name } => match self.env.lookup(name) {
                Some(b) => self.resolutions[*id as usize] = Some(b.decl),
                None => self.error(*loc, format!("sync of undeclared variable `{name}`")),
            },
            Stmt::Break { loc, .. } => {
                if self.loop_depth == 0 {
                    self.error(*loc, "`break` outside of a loop");
                }
            }
            Stmt::ExprStmt { expr, .. } => {
                self.expr(expr);
            }
            Stmt::Block(b) => self.block(b),
        }
    }

    fn block(&mut self, b: &Block) {
        self.env.scopes_push();
        for s in &b.stmts {
            self.stmt(s);
        }
        self.env.scopes_pop();
    }

    fn var_decl(
        &mut self,
        id: NodeId,
        loc: Loc,
        name: &str,
        chain: Option<&TypeChainExpr>,
        init: Option<&Expr>,
    ) {
        let init_kind = init.map(|e| self.expr(e));
        let (chain, attrs) = match chain {
            Some(cexpr) => {
                let Some(c) = self.build_chain(cexpr) else {
                    // Recover with an Int scalar so later uses don't cascade.
                    self.declare(
                        name,
                        Self::scalar_chain(ElemKind::Int),
                        scalar_attrs(ElemKind::Int),
                        Storage::Replicated,
                        loc,
                        None,
                    );
                    self.resolutions[id as usize] =
                        Some(DeclId(self.decls.len() as u32 - 1));
                    return;
                };
                match resolve(&c) {
                    Ok(a) => (c, a),
                    Err(e) => {
                        self.coercion_error(cexpr.loc, e);
                        (Self::scalar_chain(ElemKind::Int), scalar_attrs(ElemKind::Int))
                    }
                }
            }
            None => match init_kind {
                Some(Kind::Val(k)) => (Self::scalar_chain(k), scalar_attrs(k)),
                Some(Kind::Unknown) => (Self::scalar_chain(ElemKind::Int), scalar_attrs(ElemKind::Int)),
                Some(Kind::Array(_)) => {
                    self.error(loc, "cannot declare a variable as a copy of an array");
                    (Self::scalar_chain(ElemKind::Int), scalar_attrs(ElemKind::Int))
                }
                Some(Kind::Unit) => {
                    self.error(loc, "initializer has no value");
                    (Self::scalar_chain(ElemKind::Int), scalar_attrs(ElemKind::Int))
                }
                None => {
                    self.error(
                        loc,
                        format!("cannot infer a type for `{name}`: add a type chain or an initializer"),
                    );
                    (Self::scalar_chain(ElemKind::Int), scalar_attrs(ElemKind::Int))
                }
            },
        };

        if matches!(attrs.comm_mode, CommMode::ChannelP2P { .. }) {
            self.error(
                loc,
                "`channel` only applies to a single assignment, e.g. `(a :: channel[3,1]) := b;`",
            );
        }

        let storage = if attrs.is_array() {
            if !attrs.allocated || attrs.partition.is_none() {
                self.error(
                    loc,
                    "arrays must be allocated with a grid partition, e.g. \
                     `array[Double,n,n,n] :: allocated[grid[x,y,z] :: single[evendist]]`",
                );
            }
            if init.is_some() {
                self.error(loc, "array declarations take no initializer; use zeroGrid");
            }
            Storage::DistArray
        } else {
            match attrs.placement {
                Placement::OnProcess(p) => Storage::SingleSlot { owner: p },
                Placement::Distributed => {
                    self.error(loc, "a scalar cannot be distributed; use `single[on[p]]`");
                    Storage::Replicated
                }
                Placement::Replicated => Storage::Replicated,
            }
        };

        if let (Some(Kind::Val(from)), false) = (init_kind, attrs.is_array()) {
            if !assignable(from, attrs.element) {
                self.error(
                    loc,
                    format!("cannot initialize {} `{name}` from {from}", attrs.element),
                );
            }
        }

        let const_value = match (init, storage) {
            (Some(e), Storage::Replicated)
                if attrs.element == ElemKind::Int && !self.assigned_names.contains(name) =>
            {
                self.eval_const(e)
            }
            _ => None,
        };

        let decl = self.declare(name, chain, attrs, storage, loc, const_value);
        self.resolutions[id as usize] = Some(decl);
    }

    fn assign(&mut self, id: NodeId, loc: Loc, target: &LValue, value: &Expr) {
        let value_kind = self.expr(value);
        for ix in &target.indices {
            match self.expr(ix) {
                Kind::Val(ElemKind::Int) | Kind::Unknown => {}
                _ => self.error(ix.loc(), "array indices must be integers"),
            }
        }
        let Some(binding) = self.env.lookup(&target.base) else {
            // Implicit declaration on first assignment.
            if !target.indices.is_empty() || target.property.is_some() {
                self.error(
                    loc,
                    format!("use of undeclared variable `{}`", target.base),
                );
                return;
            }
            let kind = match value_kind {
                Kind::Val(k) => k,
                Kind::Unknown => ElemKind::Int,
                Kind::Array(_) | Kind::Unit => {
                    self.error(
                        loc,
                        "right side of an implicit declaration must be a scalar value",
                    );
                    ElemKind::Int
                }
            };
            let decl = self.declare(
                &target.base,
                Self::scalar_chain(kind),
                scalar_attrs(kind),
                Storage::Replicated,
                loc,
                None,
            );
            self.assign_kinds[id as usize] = Some(AssignKind::ImplicitDecl { decl });
            return;
        };

        let decl = binding.decl;
        let attrs = match resolve(&binding.chain) {
            Ok(a) => a,
            Err(_) => return, // already reported at declaration
        };
        if attrs.mutability == Mutability::ReadOnly {
            self.error(
                loc,
                format!("cannot write to read-only variable `{}`", target.base),
            );
        }
        let kind = self.classify_target(loc, target, decl, &attrs, value_kind);
        self.assign_kinds[id as usize] = kind;
    }

    /// Shared target classification for plain and coerced assignments.
    fn classify_target(
        &mut self,
        loc: Loc,
        target: &LValue,
        decl: DeclId,
        attrs: &ResolvedAttributes,
        value_kind: Kind,
    ) -> Option<AssignKind> {
        if target.property.is_some() {
            self.error(loc, "cannot assign to block bounds");
            return None;
        }
        if !attrs.is_array() {
            if !target.indices.is_empty() {
                self.error(
                    loc,
                    format!("`{}` is a scalar and cannot be indexed", target.base),
                );
                return None;
            }
            self.check_value_kind(loc, value_kind, attrs.element);
            return Some(match self.decls[decl.0 as usize].storage {
                Storage::SingleSlot { owner } => AssignKind::SingleScalar { decl, owner },
                _ => AssignKind::LocalScalar { decl },
            });
        }
        let dims = attrs.shape.len();
        match target.indices.len() {
            0 => {
                // Whole-array assignment: block copy.
                let Kind::Array(src) = value_kind else {
                    self.error(
                        loc,
                        "whole-array assignment requires an array on the right side",
                    );
                    return None;
                };
                let src_attrs = &self.decls[src.0 as usize].attrs;
                if src_attrs.shape != attrs.shape
                    || src_attrs.partition != attrs.partition
                    || src_attrs.element != attrs.element
                {
                    self.error(
                        loc,
                        "arrays in a whole-array assignment must have identical \
                         element kind, extents, and partitioning",
                    );
                    return None;
                }
                Some(AssignKind::BlockCopy { dst: decl, src })
            }
            n if n == dims => {
                self.check_value_kind(loc, value_kind, attrs.element);
                Some(AssignKind::ArrayElement { decl })
            }
            n => {
                self.error(
                    loc,
                    format!("`{}` has {dims} dimensions but {n} indices given", target.base),
                );
                None
            }
        }
    }

    fn check_value_kind(&mut self, loc: Loc, value_kind: Kind, target: ElemKind) {
        match value_kind {
            Kind::Val(from) if assignable(from, target) => {}
            Kind::Val(from) => {
                self.error(loc, format!("cannot assign {from} to {target}"));
            }
            Kind::Unknown => {}
            Kind::Array(_) => self.error(loc, "cannot assign an array to a scalar"),
            Kind::Unit => self.error(loc, "expression has no value"),
        }
    }

    fn typed_assign(
        &mut self,
        id: NodeId,
        loc: Loc,
        target: &LValue,
        chain: &TypeChainExpr,
        value: &Expr,
    ) {
        let value_kind = self.expr(value);
        for ix in &target.indices {
            match self.expr(ix) {
                Kind::Val(ElemKind::Int) | Kind::Unknown => {}
                _ => self.error(ix.loc(), "array indices must be integers"),
            }
        }
        let Some(binding) = self.env.lookup(&target.base) else {
            self.error(
                loc,
                format!("use of undeclared variable `{}`", target.base),
            );
            return;
        };
        let decl = binding.decl;
        let base_chain = binding.chain.clone();
        let Some(addition) = self.build_chain(chain) else {
            return;
        };
        let combined = match coerce(&base_chain, &addition) {
            Ok(c) => c,
            Err(e) => {
                self.coercion_error(loc, e);
                return;
            }
        };
        let base_attrs = match resolve(&base_chain) {
            Ok(a) => a,
            Err(_) => return,
        };
        let attrs = match resolve(&combined) {
            Ok(a) => a,
            Err(e) => {
                self.coercion_error(loc, e);
                return;
            }
        };

        if let CommMode::ChannelP2P { src, dst } = attrs.comm_mode {
            if !matches!(self.decls[decl.0 as usize].storage, Storage::SingleSlot { .. }) {
                self.error(
                    loc,
                    "channel assignment requires a single-placed scalar target",
                );
                return;
            }
            if !target.indices.is_empty() || target.property.is_some() {
                self.error(loc, "channel assignment target must be a bare variable");
                return;
            }
            if src == dst {
                self.error(loc, "channel endpoints must differ");
                return;
            }
            match value_kind {
                Kind::Val(from) => self.check_value_kind(loc, Kind::Val(from), attrs.element),
                Kind::Unknown => {}
                _ => {
                    self.error(loc, "channel assignment requires a scalar value");
                    return;
                }
            }
            self.assign_kinds[id as usize] = Some(AssignKind::Channel { decl, src, dst });
            return;
        }

        // Outside the channel case, an assignment-scoped coercion may only
        // relax or restrict mutability; allocation-shaping attributes are
        // fixed at declaration.
        if !same_but_mutability(&base_attrs, &attrs) {
            self.error(
                loc,
                "assignment-scoped coercion may only change mutability \
                 (`const`/`writable`) or communication (`channel[s,d]`)",
            );
            return;
        }
        if attrs.mutability == Mutability::ReadOnly {
            self.error(
                loc,
                format!("cannot write to read-only variable `{}`", target.base),
            );
        }
        let kind = self.classify_target(loc, target, decl, &attrs, value_kind);
        self.assign_kinds[id as usize] = kind;
    }

    fn retype(&mut self, id: NodeId, loc: Loc, name: &str, chain: &TypeChainExpr) {
        let Some(binding) = self.env.lookup(name) else {
            self.error(loc, format!("retype of undeclared variable `{name}`"));
            return;
        };
        let decl = binding.decl;
        let base_chain = binding.chain.clone();
        if chain.links.is_empty() || chain.links[0].name != name {
            self.error(
                loc,
                format!("a retype must extend the variable's own chain, e.g. `{name} : {name} :: writable;`"),
            );
            return;
        }
        let addition = TypeChainExpr {
            links: chain.links[1..].to_vec(),
            loc: chain.loc,
        };
        if addition.links.is_empty() {
            // `a : a;` — a no-op retype.
            self.resolutions[id as usize] = Some(decl);
            return;
        }
        let Some(add) = self.build_chain(&addition) else {
            return;
        };
        let combined = match coerce(&base_chain, &add) {
            Ok(c) => c,
            Err(e) => {
                self.coercion_error(loc, e);
                return;
            }
        };
        let (Ok(base_attrs), Ok(new_attrs)) = (resolve(&base_chain), resolve(&combined)) else {
            return;
        };
        if !same_but_mutability(&base_attrs, &new_attrs) {
            self.error(
                loc,
                "a retype may only change mutability; allocation attributes are \
                 fixed at declaration",
            );
            return;
        }
        self.env.retype(name, combined);
        self.resolutions[id as usize] = Some(decl);
    }

    fn expr(&mut self, e: &Expr) -> Kind {
        match e {
            Expr::IntLit { .. } => Kind::Val(ElemKind::Int),
            Expr::FloatLit { .. } => Kind::Val(ElemKind::Double),
            Expr::Access { id, lv } => self.access(*id, lv),
            Expr::Call {
                id,
                loc,
                name,
                args,
            } => self.call(*id, *loc, name, args),
            Expr::Binary {
                loc, op, lhs, rhs, ..
            } => {
                let lk = self.expr(lhs);
                let rk = self.expr(rhs);
                let (Kind::Val(a), Kind::Val(b)) = (lk, rk) else {
                    if lk != Kind::Unknown && rk != Kind::Unknown {
                        self.error(*loc, format!("operator `{}` requires scalar operands", op.symbol()));
                    }
                    return Kind::Unknown;
                };
                if op.is_comparison() {
                    match (a, b) {
                        (ElemKind::Bool, ElemKind::Bool)
                            if matches!(op, crate::frontend::BinOp::Eq | crate::frontend::BinOp::Ne) => {}
                        (ElemKind::Bool, _) | (_, ElemKind::Bool) => {
                            self.error(*loc, "cannot order Bool values");
                        }
                        _ => {}
                    }
                    Kind::Val(ElemKind::Bool)
                } else {
                    if a == ElemKind::Bool || b == ElemKind::Bool {
                        self.error(*loc, "arithmetic on Bool values");
                        return Kind::Unknown;
                    }
                    if a == ElemKind::Double || b == ElemKind::Double {
                        Kind::Val(ElemKind::Double)
                    } else {
                        Kind::Val(ElemKind::Int)
                    }
                }
            }
        }
    }

    fn access(&mut self, id: NodeId, lv: &LValue) -> Kind {
        for ix in &lv.indices {
            match self.expr(ix) {
                Kind::Val(ElemKind::Int) | Kind::Unknown => {}
                _ => self.error(ix.loc(), "array indices must be integers"),
            }
        }
        let Some(binding) = self.env.lookup(&lv.base) else {
            self.error(lv.loc, format!("use of undeclared variable `{}`", lv.base));
            return Kind::Unknown;
        };
        let decl = binding.decl;
        self.resolutions[id as usize] = Some(decl);
        let attrs = &self.decls[decl.0 as usize].attrs;
        if !attrs.is_array() {
            if !lv.indices.is_empty() {
                self.error(
                    lv.loc,
                    format!("`{}` is a scalar and cannot be indexed", lv.base),
                );
                return Kind::Unknown;
            }
            if lv.property.is_some() {
                self.error(lv.loc, "block bounds exist only on distributed arrays");
                return Kind::Unknown;
            }
            return Kind::Val(attrs.element);
        }
        let dims = attrs.shape.len();
        let element = attrs.element;
        if lv.property.is_some() {
            // `data[pid()].low`, `data[pid()][i].high`, ...: the index count
            // selects the dimension being queried.
            if lv.indices.is_empty() || lv.indices.len() > dims {
                self.error(
                    lv.loc,
                    "block bounds take a process index and at most one index per dimension",
                );
                return Kind::Unknown;
            }
            return Kind::Val(ElemKind::Int);
        }
        match lv.indices.len() {
            0 => Kind::Array(decl),
            n if n == dims => Kind::Val(element),
            n => {
                self.error(
                    lv.loc,
                    format!("`{}` has {dims} dimensions but {n} indices given", lv.base),
                );
                Kind::Unknown
            }
        }
    }

    fn call(&mut self, _id: NodeId, loc: Loc, name: &str, args: &[Expr]) -> Kind {
        let arg_kinds: Vec<Kind> = args.iter().map(|a| self.expr(a)).collect();
        let expect_one_array = |ck: &mut Self| -> bool {
            if arg_kinds.len() != 1 {
                ck.error(loc, format!("`{name}` takes exactly one argument"));
                return false;
            }
            match arg_kinds[0] {
                Kind::Array(_) | Kind::Unknown => true,
                _ => {
                    ck.error(loc, format!("`{name}` requires a distributed array"));
                    false
                }
            }
        };
        match name {
            "pid" => {
                if !args.is_empty() {
                    self.error(loc, "`pid` takes no arguments");
                }
                Kind::Val(ElemKind::Int)
            }
            "zeroGrid" => {
                expect_one_array(self);
                Kind::Unit
            }
            "fillBoundaryConditions" | "computeResidue" => {
                expect_one_array(self);
                Kind::Val(ElemKind::Double)
            }
            _ => {
                self.error(loc, format!("unknown function `{name}`"));
                Kind::Unknown
            }
        }
    }

    /// Conservative compile-time integer evaluation.
    fn eval_const(&self, e: &Expr) -> Option<i64> {
        match e {
            Expr::IntLit { value, .. } => Some(*value),
            Expr::Access { lv, .. } if lv.indices.is_empty() && lv.property.is_none() => {
                let b = self.env.lookup(&lv.base)?;
                self.decls[b.decl.0 as usize].const_value
            }
            Expr::Binary { op, lhs, rhs, .. } => {
                let a = self.eval_const(lhs)?;
                let b = self.eval_const(rhs)?;
                use crate::frontend::BinOp::*;
                match op {
                    Add => a.checked_add(b),
                    Sub => a.checked_sub(b),
                    Mul => a.checked_mul(b),
                    Div if b != 0 => Some(a / b),
                    _ => None,
                }
            }
            _ => None,
        }
    }

    /// True when the expression reads process-divergent state: pid(), a
    /// single-placed scalar, or distributed-array contents.
    fn divergent_expr(&self, e: &Expr) -> bool {
        match e {
            Expr::IntLit { .. } | Expr::FloatLit { .. } => false,
            Expr::Access { lv, .. } => {
                if lv.indices.iter().any(|ix| self.divergent_expr(ix)) {
                    return true;
                }
                match self.env.lookup(&lv.base) {
                    Some(b) => !matches!(
                        self.decls[b.decl.0 as usize].storage,
                        Storage::Replicated
                    ),
                    None => false,
                }
            }
            Expr::Call { name, .. } => name == "pid",
            Expr::Binary { lhs, rhs, .. } => {
                self.divergent_expr(lhs) || self.divergent_expr(rhs)
            }
        }
    }
}

/// True when a `break` in this block would exit the *enclosing* loop (i.e.
/// it is not nested inside a loop of its own).
fn contains_loop_break(b: &Block) -> bool {
    fn stmt_breaks(s: &Stmt) -> bool {
        match s {
            Stmt::Break { .. } => true,
            Stmt::Block(b) => contains_loop_break(b),
            Stmt::If {
                then_block,
                else_block,
                ..
            } => {
                contains_loop_break(then_block)
                    || else_block.as_ref().is_some_and(contains_loop_break)
            }
            Stmt::For { .. } => false,
            _ => false,
        }
    }
    b.stmts.iter().any(stmt_breaks)
}

fn scalar_attrs(kind: ElemKind) -> ResolvedAttributes {
    ResolvedAttributes {
        element: kind,
        shape: Vec::new(),
        placement: Placement::Replicated,
        partition: None,
        evendist: false,
        halo_depth: 0,
        comm_mode: CommMode::OneSidedImmediate,
        mutability: Mutability::ReadWrite,
        allocated: false,
    }
}

fn assignable(from: ElemKind, to: ElemKind) -> bool {
    use ElemKind::*;
    matches!(
        (from, to),
        (Int, Int)
            | (Int, Double)
            | (Int, Char)
            | (Double, Double)
            | (Char, Char)
            | (Char, Int)
            | (Char, Double)
            | (Bool, Bool)
    )
}

/// Equal in everything except mutability.
fn same_but_mutability(a: &ResolvedAttributes, b: &ResolvedAttributes) -> bool {
    let mut a = a.clone();
    let mut b = b.clone();
    a.mutability = Mutability::ReadWrite;
    b.mutability = Mutability::ReadWrite;
    a == b
}

/// Names that appear as assignment targets anywhere in the program.
fn collect_assigned_names(p: &Program) -> HashSet<String> {
    fn walk_block(b: &Block, out: &mut HashSet<String>) {
        b.stmts.iter().for_each(|s| walk(s, out));
    }
    fn walk(s: &Stmt, out: &mut HashSet<String>) {
        match s {
            Stmt::Assign { target, .. } | Stmt::TypedAssign { target, .. } => {
                out.insert(target.base.clone());
            }
            Stmt::For { body, .. } => walk_block(body, out),
            Stmt::If {
                then_block,
                else_block,
                ..
            } => {
                walk_block(then_block, out);
                if let Some(b) = else_block {
                    walk_block(b, out);
                }
            }
            Stmt::Block(b) => walk_block(b, out),
            _ => {}
        }
    }
    let mut out = HashSet::new();
    p.stmts.iter().for_each(|s| walk(s, &mut out));
    out
}

fn max_node_id(p: &Program) -> NodeId {
    fn expr_max(e: &Expr, m: &mut NodeId) {
        *m = (*m).max(e.id());
        match e {
            Expr::Access { lv, .. } => lvalue_max(lv, m),
            Expr::Call { args, .. } => args.iter().for_each(|a| expr_max(a, m)),
            Expr::Binary { lhs, rhs, .. } => {
                expr_max(lhs, m);
                expr_max(rhs, m);
            }
            _ => {}
        }
    }
    fn lvalue_max(lv: &LValue, m: &mut NodeId) {
        lv.indices.iter().for_each(|ix| expr_max(ix, m));
    }
    fn block_max(b: &Block, m: &mut NodeId) {
        b.stmts.iter().for_each(|s| stmt_max(s, m));
    }
    fn stmt_max(s: &Stmt, m: &mut NodeId) {
        match s {
            Stmt::VarDecl { id, init, .. } => {
                *m = (*m).max(*id);
                if let Some(e) = init {
                    expr_max(e, m);
                }
            }
            Stmt::Assign {
                id, target, value, ..
            }
            | Stmt::TypedAssign {
                id, target, value, ..
            } => {
                *m = (*m).max(*id);
                lvalue_max(target, m);
                expr_max(value, m);
            }
            Stmt::Retype { id, .. } | Stmt::Sync { id, .. } | Stmt::Break { id, .. } => {
                *m = (*m).max(*id);
            }
            Stmt::For {
                id, from, to, body, ..
            } => {
                *m = (*m).max(*id);
                expr_max(from, m);
                expr_max(to, m);
                block_max(body, m);
            }
            Stmt::If {
                id,
                cond,
                then_block,
                else_block,
                ..
            } => {
                *m = (*m).max(*id);
                expr_max(cond, m);
                block_max(then_block, m);
                if let Some(b) = else_block {
                    block_max(b, m);
                }
            }
            Stmt::ExprStmt { id, expr, .. } => {
                *m = (*m).max(*id);
                expr_max(expr, m);
            }
            Stmt::Block(b) => block_max(b, m),
        }
    }
    let mut m = 0;
    p.stmts.iter().for_each(|s| stmt_max(s, &mut m));
    m
}
