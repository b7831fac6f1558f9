//! Score functions `s(t, x) = ∇ log p_t(x)`.
//!
//! Linear-additive instances admit exact Gaussian scores ([`AnalyticScore`]).
//! Otherwise a [`ScoreNetwork`] is trained by denoising score matching against
//! conditional-Gaussian targets ([`train_dsm`]).

mod dsm;
mod law;
mod network;
mod spectral;

pub use dsm::{batch_loss, conditional_gaussian_target, train_dsm, DsmBatchTarget, DsmTargets, TimeSampling, TrainerConfig};
pub use law::{
    field_mean, linear_law, pooled_covariance, prior_law, AnalyticScore, GaussianLaw, LinearGaussianFlow, PriorConfig, PRIOR_MODE_CUTOFF,
};
pub use network::{data_statistics, Adam, NetworkConfig, ScoreNetwork};
pub use spectral::{SpectralOperator, MAX_DENSE_PIXELS};

use crate::error::Result;
use crate::grid::Field;

/// A time-dependent vector field approximating `∇ log p_t`.
pub trait ScoreFn: Send + Sync {
    fn score(&self, t: f64, x: &Field) -> Result<Field>;

    /// Scores of many states at the same time. Each output depends only on
    /// its own input.
    fn score_batch(&self, t: f64, xs: &[Field]) -> Result<Vec<Field>> {
        use rayon::prelude::*;
        xs.par_iter().map(|x| self.score(t, x)).collect()
    }
}

impl<F> ScoreFn for F
where
    F: Fn(f64, &Field) -> Result<Field> + Send + Sync,
{
    fn score(&self, t: f64, x: &Field) -> Result<Field> {
        self(t, x)
    }
}
