pub mod atoms;
pub mod crossencoder;
pub mod embedding;
pub mod encoders;
pub mod error;
pub mod evalreport;
pub mod experiment;
pub mod lexsim;
pub mod pairgen;
pub mod seed;
pub mod siamese;
pub mod synth;
pub mod tokenize;

pub use error::{Error, Result};
