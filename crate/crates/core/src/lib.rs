//! Direction-aware collaborative perception on a synthetic bird's-eye-view
//! world: scenario generation, roadside direction masks, budgeted feature
//! queries, attention fusion, direction-weighted training and evaluation.

pub mod comms;
pub mod config;
pub mod direction;
pub mod eval;
pub mod features;
pub mod fusion;
pub mod geometry;
pub mod grid;
pub mod learn;
pub mod pipeline;
pub mod scenario;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error(transparent)]
    Geometry(#[from] geometry::GeometryError),
    #[error(transparent)]
    Scenario(#[from] scenario::ScenarioError),
    #[error(transparent)]
    Features(#[from] features::FeatureError),
    #[error(transparent)]
    Comms(#[from] comms::CommsError),
    #[error(transparent)]
    Fusion(#[from] fusion::FusionError),
    #[error(transparent)]
    Learn(#[from] learn::LearnError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// True for problems with the user's input rather than the run itself.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
