//! Desk-scale testbed for prompt-conditioned representation learning:
//! a tensor autodiff core, two glyph-world environments, a small trainable
//! vision-language model, representation extraction, policies, and learners.

pub mod evalkit;
pub mod gridcraft;
pub mod learners;
pub mod navhome;
pub mod rng;
pub mod policy;
pub mod repr;
pub mod tensor;
pub mod vlm;
