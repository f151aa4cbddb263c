pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod frm;
pub mod model;
pub mod params;
pub mod pfde;
pub mod training;
pub mod ssm;
pub mod vit;

pub use autodiff::{Tape, Tensor, Var};
pub use error::{Error, Result};
