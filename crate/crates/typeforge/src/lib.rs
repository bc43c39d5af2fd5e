//! typeforge: interpreter, type checker, and simulated PGAS runtime for a
//! type-oriented parallel language.
//!
//! Programs describe data layout and communication through composable type
//! chains; the runtime simulates the processes of a distributed machine as
//! threads over a shared fabric, counting every message that the real
//! machine would send.

pub mod cli;
pub mod distarray;
pub mod fabric;
pub mod frontend;
pub mod interp;
pub mod programs;
pub mod typesys;
pub mod value;

pub use value::Value;
