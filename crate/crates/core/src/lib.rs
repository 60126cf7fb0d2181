pub mod attention;
pub mod autodiff;
pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod iso;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
