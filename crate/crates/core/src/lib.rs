pub mod dataset;
pub mod evaluation;
pub mod geometry;
pub mod interp;
pub mod model;
pub mod nn;
pub mod training;
