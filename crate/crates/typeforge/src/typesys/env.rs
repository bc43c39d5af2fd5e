//! Lexically scoped variable-to-chain environment.
//!
//! Retyping inserts a shadow binding in the innermost scope, so popping a
//! scope restores whatever chain the variable had outside the block.

use super::chain::TypeChain;
use super::DeclId;
use std::collections::HashMap;

#[derive(Debug, Clone)]
pub struct EnvBinding {
    pub decl: DeclId,
    pub chain: TypeChain,
}

#[derive(Debug, Default)]
pub struct TypeEnvironment {
    scopes: Vec<HashMap<String, EnvBinding>>,
}

impl TypeEnvironment {
    pub fn new() -> Self {
        TypeEnvironment {
            scopes: vec![HashMap::new()],
        }
    }

    /// Runs `action` inside a fresh scope; every declaration and retype made
    /// within it is dropped afterwards.
    pub fn with_scope<T>(&mut self, action: impl FnOnce(&mut Self) -> T) -> T {
        self.scopes_push();
        let result = action(self);
        self.scopes_pop();
        result
    }

    /// Explicit scope entry, for callers that cannot use a closure.
    pub fn scopes_push(&mut self) {
        self.scopes.push(HashMap::new());
    }

    pub fn scopes_pop(&mut self) {
        self.scopes.pop();
        debug_assert!(!self.scopes.is_empty(), "root scope must remain");
    }

    /// Innermost-outward lookup.
    pub fn lookup(&self, name: &str) -> Option<&EnvBinding> {
        self.scopes.iter().rev().find_map(|s| s.get(name))
    }

    /// Declares (or shadows) `name` in the innermost scope.
    pub fn declare(&mut self, name: &str, decl: DeclId, chain: TypeChain) {
        self.scopes
            .last_mut()
            .expect("environment always has a scope")
            .insert(name.to_string(), EnvBinding { decl, chain });
    }

    /// Rebinds `name` to a new chain in the innermost scope, keeping its
    /// declaration identity. The rebinding lasts until the scope is popped.
    /// Returns false when the name is unknown.
    pub fn retype(&mut self, name: &str, chain: TypeChain) -> bool {
        let Some(binding) = self.lookup(name) else {
            return false;
        };
        let decl = binding.decl;
        self.declare(name, decl, chain);
        true
    }
}
