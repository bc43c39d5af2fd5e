//! Example programs bundled with the crate.
//!
//! Two scalar-copy programs contrast the default one-sided transfer with a
//! coerced point-to-point channel, and three Jacobi solvers differ only in
//! the distributed array's type chain: immediate one-sided reads, a synchronous
//! halo swap, and an asynchronous halo swap.

/// Cross-process scalar copy using the default one-sided read.
pub const ONE_SIDED_COPY: &str = include_str!("../programs/one_sided_copy.msh");
/// The same copy with a `channel` coerced in for the one assignment.
pub const CHANNEL_COPY: &str = include_str!("../programs/channel_copy.msh");
/// Jacobi solver without a halo: remote neighbours are read one at a time.
pub const JACOBI_SYNC: &str = include_str!("../programs/jacobi_sync.msh");
/// Jacobi solver with a one-deep halo exchanged synchronously at `sync`.
pub const JACOBI_HALO: &str = include_str!("../programs/jacobi_halo.msh");
/// Jacobi solver whose halo swap and residual reduction are non-blocking.
pub const JACOBI_ASYNC: &str = include_str!("../programs/jacobi_async.msh");

/// All bundled programs as `(name, source, processes required)` triples.
pub fn all() -> [(&'static str, &'static str, usize); 5] {
    [
        ("one_sided_copy", ONE_SIDED_COPY, 4),
        ("channel_copy", CHANNEL_COPY, 4),
        ("jacobi_sync", JACOBI_SYNC, 2),
        ("jacobi_halo", JACOBI_HALO, 2),
        ("jacobi_async", JACOBI_ASYNC, 2),
    ]
}
