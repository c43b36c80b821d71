pub mod checkpoint;
pub mod config;
pub mod detnet;
pub mod error;
pub mod evalkit;
pub mod geometry;
pub mod maskgen;
pub mod milcls;
pub mod nn;
pub mod simnet;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
