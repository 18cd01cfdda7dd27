//! Diagonal-Gaussian latent space and its encoders.

mod encoders;
mod types;

pub use encoders::{
    decode_durations, fit_to_notes, EncoderConfig, PosteriorEncoder, PriorEncoder, PriorOutput,
    PriorVars,
};
pub use types::{
    kl_divergence, kl_var, sample_reparam, sample_reparam_var, AuxPrediction, DiagonalGaussianSeq,
    LatentSeq, NoteSpan, ScoreCondition, LOGVAR_MAX, LOGVAR_MIN,
};
