pub mod autograd;
pub mod data;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod label;
pub mod losses;
pub mod nn;
pub mod prompts;
pub mod seed;
pub mod training;
