//! The narrative guide, one module per chapter of the book under `book/`.
//!
//! Each chapter's markdown is included verbatim as the module docs, so
//! `cargo test --doc` compiles and runs every code snippet in the book —
//! the guide cannot drift from the library.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/autodiff.md")]
pub mod tensors_and_tape {}

#[doc = include_str!("../../../book/src/networks.md")]
pub mod layers_and_optimizer {}

#[doc = include_str!("../../../book/src/distributions.md")]
pub mod samplers_and_kl {}

#[doc = include_str!("../../../book/src/shrinkage.md")]
pub mod global_local_shrinkage {}

#[doc = include_str!("../../../book/src/model.md")]
pub mod state_space_model {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training_loop {}

#[doc = include_str!("../../../book/src/forecasting.md")]
pub mod monte_carlo_forecasting {}

#[doc = include_str!("../../../book/src/data.md")]
pub mod data_and_simulation {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation_and_ablations {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod command_line {}
