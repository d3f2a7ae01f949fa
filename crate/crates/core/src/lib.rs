//! Random and layerwise token dropping (random-LTD) for transformer training.
//!
//! - [`schedule`]: kept-length trajectory and per-layer random drop plans.
//! - [`budget`]: LayerToken accounting, savings and the LayerToken LR schedule.
//! - [`nn`]: tensors and reverse-mode differentiation, incl. gather/combine.
//! - [`model`]: toy GPT/BERT stacks with baseline, random-LTD and TokenBypass
//!   forward paths.
//! - [`trainer`]: corpora, training loop, metrics and the ablation experiments.

pub mod budget;
pub mod model;
pub mod nn;
pub mod rng;
pub mod schedule;
pub mod trainer;
