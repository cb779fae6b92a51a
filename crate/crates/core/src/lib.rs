//! Task- and era-aware mixture of LoRA experts over a frozen backbone,
//! with a small reverse-mode autodiff engine, synthetic multi-task data,
//! training and ablation harnesses, and expert-utilization analysis.

pub mod adapters;
pub mod analysis;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod router;
pub mod seed;
pub mod synthdata;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
