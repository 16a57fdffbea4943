//! Library side of the `storwin` command: random RMA programs with an
//! oracle, the verify suites, the recovery demo and the argument parser.

pub mod app;
pub mod program;
pub mod recover;
pub mod verify;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    /// I/O failure, including missing or corrupt sidecars.
    pub const IO: i32 = 1;
    /// A validation or verification check failed.
    pub const CHECK: i32 = 2;
    /// Bad arguments or an impossible configuration.
    pub const USAGE: i32 = 64;
}
