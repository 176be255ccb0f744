//! Network building blocks: parameter registry, conv encoder/decoder, MLPs,
//! Gaussian heads, checkpoints and finite-difference gradient checks.

pub mod checkpoint;
pub mod conv;
pub mod fused;
pub mod gaussian;
pub mod gradcheck;
pub mod im2col;
pub mod layers;
pub mod mlp;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use conv::{build_decoder, build_encoder, Decoder, Encoder, EncoderSpec};
pub use gaussian::{kl_diag_gaussian, reparameterize, GaussianPosterior};
pub use gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport};
pub use layers::{Activation, ParamBuilder, ParamSet, Pass};
pub use mlp::{ClubNet, Mlp, MlpSpec};
