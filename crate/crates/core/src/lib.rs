pub mod assignment;
pub mod evaluation;
pub mod fi3d;
pub mod geometry;
pub mod losses;
pub mod prototype;
pub mod session;
pub mod synth;
pub mod vlm;
pub mod weighting;
