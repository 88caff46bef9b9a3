//! Two-branch multi-resolution video re-identification with diverse
//! attention and temporal kernel selection, on a small reverse-mode
//! autodiff engine.

pub mod analysis;
pub mod autodiff;
pub mod backbone;
pub mod bicnet;
pub mod cli;
pub mod config;
pub mod dao;
pub mod error;
pub mod gradsuite;
pub mod params;
pub mod synthdata;
pub mod tensor;
pub mod tks;
pub mod traineval;

pub use error::{Error, Result};
