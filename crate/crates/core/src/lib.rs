pub mod error;
pub mod numkit;

pub mod analysis;
pub mod attention;
pub mod cachesim;
pub mod checkpoint;
pub mod codec;
pub mod collective;
pub mod config;
pub mod experiment;
pub mod report;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
