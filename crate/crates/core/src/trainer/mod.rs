//! Field fitting, joint diffusion and decoder training, and the
//! interpolation and mixing shape operations.

mod fit;
mod joint;
mod model;
mod ops;
mod skip;

pub use fit::{fit_field, heldout_psnr, FitConfig, FitReport, RayPool, FIELD_CHANNELS};
pub use joint::{
    loss_csv_header, pretrain_autoencoder, reconstruction_psnr, AePretrainConfig, LossReport, TrainConfig, TrainObject, Trainer,
};
pub use model::{Model, ModelConfig, FORMAT_VERSION};
pub use ops::{
    initial_noise, interpolate, mix, parse_assignment, sample_from_noise, sample_shapes, sampler_seed, slerp, Source,
};
pub use skip::{alignment_registry, skip_gradient, Adjoint, GradientAlignment, Normalized};
