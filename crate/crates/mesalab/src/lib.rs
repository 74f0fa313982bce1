pub mod analyze;
pub mod attention;
pub mod autodiff;
pub mod constructions;
pub mod error;
pub mod io;
pub mod numerics;
pub mod model;
pub mod par;
pub mod seqgen;
pub mod train;

pub use error::{Error, Result};
pub use numerics::{Matrix, Rng};
