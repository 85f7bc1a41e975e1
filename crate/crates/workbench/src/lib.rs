//! Workbench around `moc_core`: synthetic scenes, the verification suite,
//! scaling benchmarks and CSV exports behind the `moc` command.

pub mod analysis;
pub mod bench;
pub mod checks;
pub mod cli;
pub mod export;
pub mod scenes;

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "MOC_THREADS";
