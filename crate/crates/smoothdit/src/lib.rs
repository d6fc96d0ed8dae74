//! File formats, timing, benchmarks and the command line for
//! `smoothdit-core`.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod clock;
pub mod formats;
pub mod fsio;
pub mod runs;

pub use clock::WallClock;
