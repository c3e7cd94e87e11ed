pub mod alignment;
pub mod data;
pub mod diffcore;
pub mod encoders;
pub mod fusion;
pub mod harness;
pub mod nn;
pub mod model;
