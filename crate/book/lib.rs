//! The guide's chapters as doc tests, so every snippet stays in sync with the
//! library.

#[doc = include_str!("src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("src/fidelity.md")]
pub mod fidelity {}
#[doc = include_str!("src/topologies.md")]
pub mod topologies {}
#[doc = include_str!("src/simulator.md")]
pub mod simulator {}
#[doc = include_str!("src/learned.md")]
pub mod learned {}
#[doc = include_str!("src/training.md")]
pub mod training {}
#[doc = include_str!("src/baselines.md")]
pub mod baselines {}
#[doc = include_str!("src/experiments.md")]
pub mod experiments {}
