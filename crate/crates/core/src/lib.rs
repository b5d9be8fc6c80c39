pub mod adversary;
pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod codec;
pub mod context;
pub mod entropy;
pub mod error;
pub mod eval_io;
pub mod losses;
pub mod nn;
pub mod tensor;
pub mod training;
pub mod transforms;
