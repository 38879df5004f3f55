//! Model definitions: architectures, latent states, the log-joint and the
//! generative process.

pub mod arch;
pub mod joint;
pub mod simulate;
pub mod state;

pub use arch::{
    DefArchitecture, DefStack, Hyperparameters, LayerKind, LayerSpec, LinkFunction, ObservationSpec,
};
pub use joint::{
    double_def_log_likelihood, expected_activation, log_joint, markov_blanket_w,
    markov_blanket_w_entry, markov_blanket_z, natural_params_for_layer, LatentVar, WeightBlock,
};
pub use simulate::ancestral_sample;
pub use state::{LatentState, StackWeights, WeightMatrix};
