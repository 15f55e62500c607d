//! Minimal GPT-style decoder: deterministic forward passes, state capture,
//! residual injection, site gradients, tokenization, and weights I/O.

mod backward;
mod config;
mod container;
mod forward;
mod tokenizer;
mod weights;

pub use backward::{backward, grad_at_site, BackwardOptions, LossFn, NllLoss, ParamGrads};
pub use config::{Activation, ModelConfig, TokenizerMode};
pub use container::{load_weights, save_weights};
pub use forward::{
    forward, forward_with, Activations, CaptureMap, Intervention, InterventionAction, Site,
    SiteKind,
};
pub use tokenizer::Tokenizer;
pub use weights::{Block, Model};
