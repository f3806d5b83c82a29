pub mod error;
pub mod adapter;
pub mod numkit;
pub mod lab;
pub mod nanoformer;
pub mod taskgen;
pub mod trainkit;

pub use error::{LabError, Result};
