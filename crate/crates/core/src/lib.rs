//! Sparse Markov-switching vector autoregressions.

pub mod artifact;
pub mod config;
pub mod data;
pub mod em;
pub mod error;
pub mod forecast;
pub mod glasso;
pub mod hmm;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod penalties;
pub mod pipeline;
pub mod regression;
pub mod replicate;
pub mod simulate;
pub mod tuning;

pub use error::{Error, Result};
pub use model::{Dataset, ModelSpec, MsVarModel, RegimeParams};

// the guide's listings run as doctests
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/filtering.md")]
    mod filtering {}
    #[doc = include_str!("../../../book/src/penalties.md")]
    mod penalties {}
    #[doc = include_str!("../../../book/src/estimation.md")]
    mod estimation {}
    #[doc = include_str!("../../../book/src/tuning.md")]
    mod tuning {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/forecasting.md")]
    mod forecasting {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
