pub mod envs;
pub mod error;
pub mod eval;
pub mod forest;
pub mod io;
pub mod multibox;
pub mod quantile;
pub mod rng;
pub mod trajband;
