//! Evaluation metrics: perplexity, Distinct-n, persona distance, KL cost,
//! active units and latent export.

mod embedding;
mod keywords;
mod metrics;
mod model;

use thiserror::Error;

pub use embedding::{cosine, EmbeddingTable};
pub use keywords::{is_stop_word, KeywordExtractor};
pub use metrics::{
    active_units_of, dimension_variances, distinct_n, nearest_centroid_accuracy, p_distance,
    principal_components_2, PDistance, SimilarityMatrix,
};
pub use model::{
    active_units, export_latents, kl_cost, latent_params, latent_stats, latents_csv, perplexity,
    response_nll, EvalReport, LatentStats, AU_THRESHOLD,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("embedding file: {0}")]
    Format(String),
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;
