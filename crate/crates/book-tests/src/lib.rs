//! Each chapter of the guide in `book/src` is included as the docs of a
//! module, so `cargo test --doc -p cvarsam-book` compiles and runs every
//! listing. A failing test names the chapter module it came from.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/feature-banks.md")]
pub mod feature_banks {}
#[doc = include_str!("../../../book/src/classifier-head.md")]
pub mod classifier_head {}
#[doc = include_str!("../../../book/src/cvar.md")]
pub mod cvar {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/distillation.md")]
pub mod distillation {}
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
#[doc = include_str!("../../../book/src/reproducibility.md")]
pub mod reproducibility {}
