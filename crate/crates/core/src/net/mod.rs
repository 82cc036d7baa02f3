//! Gated graph message-passing denoiser producing `P_θ(x̂_0 | x_t, y)`.

mod features;
mod head;
mod model;
mod params;

pub use features::{
    draw_perturbation, init_graph_features, normalize_symbols, sinusoidal_embed, GraphFeatures, EMBED_TEMPERATURE,
    PERTURBATION_SCALE,
};
pub use head::{bin_centres, bin_width, discretized_logistic, discretized_logistic_backward, LOG_SCALE_MAX, LOG_SCALE_MIN};
pub use model::{backward, forward, predict, ForwardTrace};
pub use params::{Block, NetConfig, NetworkParams, ParamLayout};
