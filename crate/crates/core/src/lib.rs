//! Distributionally robust binary classification over precomputed embedding
//! banks.
//!
//! The crate trains a small perceptron head on frozen image embeddings with
//! a conditional value-at-risk (CVaR) objective and a sign-based
//! sharpness-aware update, labels unlabeled data with a trained teacher, and
//! scores models at slice and scan level.
//!
//! | module | contents |
//! |---|---|
//! | [`featurebank`] | embedding banks, `.fbank` files, scan manifests, synthetic data |
//! | [`mlp`] | the head: forward and backward passes, batch-norm, dropout |
//! | [`robust_loss`] | BCE, the CVaR objective, λ search, active-sample weights |
//! | [`optimizer`] | sign-SAM, Adam, cosine schedule, the training loop |
//! | [`model`] | trained models and `.mlpmodel` files |
//! | [`distill`] | pseudo-labeling and teacher → student training |
//! | [`evaluation`] | majority-vote scan diagnosis, macro F1, loss surfaces |
//! | [`experiments`] | α sweeps and the BCE/CVaR × plain/SAM ablation |
//!
//! ```
//! use cvarsam::robust_loss::cvar_lambda_search;
//!
//! // Mean of the worst half of the losses.
//! let s = cvar_lambda_search(&[1.0, 2.0, 3.0, 4.0], 0.5, 1e-12).unwrap();
//! assert!((s.value - 3.5).abs() < 1e-9);
//! ```

pub mod distill;
pub mod evaluation;
pub mod experiments;
pub mod featurebank;
pub mod mlp;
pub mod model;
pub mod optimizer;
pub mod robust_loss;
pub mod seed;

pub use distill::{distill, pseudo_label, DistillReport, PseudoLabelOptions, PseudoLabelStats};
pub use evaluation::{evaluate, EvalReport};
pub use featurebank::{read_bank, write_bank, FeatureBank, ScanManifest, SynthConfig};
pub use model::TrainedModel;
pub use optimizer::{train, TrainConfig};
