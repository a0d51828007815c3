pub mod dynamics;
pub mod eval;
pub mod geometry;
pub mod policy;
pub mod ppo;
pub mod raster;
pub mod synthesis;
pub mod tasks;
pub mod trace;
