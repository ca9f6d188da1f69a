pub mod alignment;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod nn;
pub mod optim;
pub mod raster;
pub mod scorers;
pub mod shl;
pub mod synthesis;

pub use backbone::{Backbone, BackboneId};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::ExecProfile;
pub use raster::Image;
pub use scorers::{ScorerConfig, ScorerKind};
