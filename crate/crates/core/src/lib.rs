//! Self-supervised single-view point cloud reconstruction.
pub mod assignment;
pub mod diffcore;
pub mod geometry;
pub mod render;
pub mod ply;
pub mod imageio;
pub mod networks;
pub mod losses;
pub mod dataset;
pub mod trainer;
pub mod evaluator;
pub mod iso;
pub mod cli;
