pub mod corpus;
pub mod distill;
pub mod losses;
pub mod masking;
pub mod model;
pub mod rng;
pub mod synthgen;
pub mod train;
