//! Runtime scalar values shared by the fabric window and the interpreter.

use std::fmt;

/// A scalar runtime value. Distributed array cells are stored separately as
/// raw numeric blocks; `Value` covers everything that lives in a variable or
/// travels over a channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Value {
    Int(i64),
    Double(f64),
    Bool(bool),
    Char(u8),
}

impl Value {
    /// Wire size in bytes, used for metric accounting.
    /// Doubles are 8 bytes, Ints 4, Bools and Chars 1.
    pub fn byte_size(&self) -> u64 {
        match self {
            Value::Int(_) => 4,
            Value::Double(_) => 8,
            Value::Bool(_) | Value::Char(_) => 1,
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Value::Int(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_double(&self) -> Option<f64> {
        match self {
            Value::Double(v) => Some(*v),
            Value::Int(v) => Some(*v as f64),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Value::Bool(v) => Some(*v),
            _ => None,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Value::Int(_) => "Int",
            Value::Double(_) => "Double",
            Value::Bool(_) => "Bool",
            Value::Char(_) => "Char",
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(v) => write!(f, "{v}"),
            Value::Double(v) => write!(f, "{v:?}"),
            Value::Bool(v) => write!(f, "{v}"),
            Value::Char(v) => write!(f, "{}", *v as char),
        }
    }
}
