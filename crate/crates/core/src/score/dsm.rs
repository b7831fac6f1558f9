//! Denoising score matching against conditional-Gaussian targets.
//!
//! A training pair is `(t, x_t, target)` with `x_t ~ p_t(· | x0)` and
//! `target = ∇ log p_t(x_t | x0)`. Linear-additive instances use the exact
//! conditional law `Normal(exp(A(t) L̃) x0, C(t))`; with `C(t) = L Lᵀ` a draw is
//! `x_t = m + L z` and the target is `−L⁻ᵀ z`. Quasilinear-additive instances
//! use the noise-free flow of `x0` as mean and white covariance `w(t) I`,
//! `w(t) = ∫_0^t φ2²`, so the target is `−z / √w`.

use super::law::LinearGaussianFlow;
use super::network::{Adam, ScoreNetwork, T_MIN_FRACTION};
use crate::dynamics::{SdeInstance, SpdeClass};
use crate::error::{Error, Result};
use crate::grid::{Field, Shape};
use crate::integrator::{simulate_until, RngStream, StepperConfig};
use crate::quadrature::SIMPSON_PANELS;
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

/// One denoising example.
#[derive(Clone, Debug, PartialEq)]
pub struct DsmBatchTarget {
    pub t: f64,
    pub x_t: Field,
    pub target_score: Field,
    /// Loss weight `w(t)`.
    pub weight: f64,
}

/// How training times are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TimeSampling {
    /// Uniform over the stepper grid levels in `[t_min, T]`.
    #[default]
    Grid,
    /// Uniform on `[t_min, T]`.
    Continuous,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainerConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// The step size follows a cosine from `learning_rate` down to this
    /// fraction of it at the last iteration.
    pub final_lr_fraction: f64,
    /// Global gradient norm cap; `None` leaves gradients unclipped.
    pub grad_clip: Option<f64>,
    pub time_sampling: TimeSampling,
    /// Grid and taming used for noise-free flows and grid levels.
    pub stepper: StepperConfig,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            iterations: 2000,
            batch_size: 32,
            learning_rate: 1e-3,
            final_lr_fraction: 0.01,
            grad_clip: Some(1.0),
            time_sampling: TimeSampling::Grid,
            stepper: StepperConfig::default(),
            seed: 0,
        }
    }
}

/// Per-level data of the exact linear branch.
struct LinearLevel {
    damping: Vec<f64>,
    chol: DMatrix<f64>,
}

enum Branch {
    Linear {
        flow: LinearGaussianFlow,
        /// Mode coordinates of every dataset image, `channels × pixels`
        /// values per image.
        modes0: Vec<f64>,
        /// Aligned with `levels` in grid mode, empty otherwise.
        cache: Vec<LinearLevel>,
    },
    White {
        /// Noise-free flow of every dataset image at all grid times `k·dt`.
        paths: Vec<Vec<Vec<f32>>>,
        dt: f64,
    },
}

/// Target generator with everything that does not depend on the noise draw
/// precomputed.
pub struct DsmTargets {
    shape: Shape,
    horizon: f64,
    t_min: f64,
    sampling: TimeSampling,
    levels: Vec<f64>,
    level_weights: Vec<f64>,
    instance: SdeInstance,
    branch: Branch,
}

fn check_trainable(instance: &SdeInstance) -> Result<()> {
    if !instance.class().is_additive() {
        return Err(Error::Unsupported(format!(
            "conditional targets need additive noise, got {}",
            instance.class()
        )));
    }
    if !instance.noise_enabled() || instance.schedule().phi2.is_zero() {
        return Err(Error::InvalidConfig("score matching needs a nonzero noise schedule".into()));
    }
    Ok(())
}

fn cholesky_factor(c: DMatrix<f64>) -> Result<DMatrix<f64>> {
    Cholesky::new(c).map(|ch| ch.l()).ok_or(Error::DegenerateVariance(0))
}

/// `(m + L z, −L⁻ᵀ z)` channel by channel.
fn correlated_pair(mean: Field, chol: &DMatrix<f64>, z: &Field) -> (Field, Field) {
    let shape = mean.shape();
    let mut x = mean;
    let mut target = Field::zeros(shape);
    for c in 0..shape.channels {
        let zc = DVector::from_column_slice(z.channel(c));
        let lz = chol * &zc;
        for (o, d) in x.channel_mut(c).iter_mut().zip(lz.iter()) {
            *o += d;
        }
        let s = chol
            .tr_solve_lower_triangular(&zc)
            .expect("Cholesky factor has a positive diagonal");
        for (o, v) in target.channel_mut(c).iter_mut().zip(s.iter()) {
            *o = -v;
        }
    }
    (x, target)
}

fn white_pair(mean: Field, w: f64, z: &Field) -> (Field, Field) {
    let sw = w.sqrt();
    let x = mean.zip_map(z, |m, z| m + sw * z);
    let target = z.map(|z| -z / sw);
    (x, target)
}

/// Noise-free flow of `x0` at `t`, interpolated linearly between grid times.
fn interpolate_path(path: &[Vec<f32>], dt: f64, t: f64, shape: Shape) -> Field {
    let pos = t / dt;
    let k = (pos.floor() as usize).min(path.len() - 1);
    let k1 = (k + 1).min(path.len() - 1);
    let frac = (pos - k as f64).clamp(0.0, 1.0);
    let v = path[k]
        .iter()
        .zip(&path[k1])
        .map(|(&a, &b)| a as f64 * (1.0 - frac) + b as f64 * frac)
        .collect();
    Field::from_vec(shape, v).expect("finite path")
}

fn noise_free_path(instance: &SdeInstance, x0: &Field, stepper: &StepperConfig) -> Result<Vec<Vec<f32>>> {
    let cfg = stepper.with_record_every(1);
    let traj = simulate_until(instance, x0, instance.schedule().horizon, &cfg, None)?;
    Ok(traj
        .states
        .iter()
        .map(|s| s.values().iter().map(|&v| v as f32).collect())
        .collect())
}

/// A single conditional target for `x0` at time `t` and standard normal `z`.
///
/// At `t = 0` the law is degenerate: `x_t = x0`, the target is zero and the
/// weight is zero.
pub fn conditional_gaussian_target(
    instance: &SdeInstance,
    x0: &Field,
    t: f64,
    z: &Field,
    stepper: &StepperConfig,
) -> Result<DsmBatchTarget> {
    check_trainable(instance)?;
    crate::schedules::check_time(t, instance.schedule().horizon)?;
    x0.ensure_same_shape(z)?;
    let w = instance.schedule().accumulated_noise_variance(t);
    if w <= 0.0 {
        return Ok(DsmBatchTarget {
            t,
            x_t: x0.clone(),
            target_score: Field::zeros(x0.shape()),
            weight: 0.0,
        });
    }
    let (x_t, target_score) = if instance.class() == SpdeClass::LinearAdditive {
        let flow = LinearGaussianFlow::new(instance, x0.shape())?;
        let mean = flow.propagate_mean(t, x0)?;
        let chol = cholesky_factor(flow.state_covariance(t, None))?;
        correlated_pair(mean, &chol, z)
    } else {
        let path = noise_free_path(instance, x0, stepper)?;
        let dt = instance.schedule().horizon / (path.len() - 1) as f64;
        white_pair(interpolate_path(&path, dt, t, x0.shape()), w, z)
    };
    Ok(DsmBatchTarget {
        t,
        x_t,
        target_score,
        weight: w,
    })
}

impl DsmTargets {
    /// Precomputes noise-free flows (quasilinear) or per-level Cholesky
    /// factors (linear, grid sampling).
    pub fn new(
        instance: &SdeInstance,
        dataset: &[Field],
        sampling: TimeSampling,
        stepper: &StepperConfig,
    ) -> Result<Self> {
        check_trainable(instance)?;
        let first = dataset.first().ok_or_else(|| Error::EmptyInput("training set".into()))?;
        let shape = first.shape();
        for x in dataset {
            if x.shape() != shape {
                return Err(Error::ShapeMismatch {
                    expected: shape,
                    actual: x.shape(),
                });
            }
        }
        let schedule = instance.schedule();
        let horizon = schedule.horizon;
        let t_min = T_MIN_FRACTION * horizon;
        let steps = stepper.steps(horizon)?;
        let dt = horizon / steps as f64;
        let levels: Vec<f64> = (1..=steps).map(|k| k as f64 * dt).filter(|&t| t >= t_min).collect();
        let level_weights: Vec<f64> = levels.iter().map(|&t| schedule.accumulated_noise_variance(t)).collect();

        let branch = if instance.class() == SpdeClass::LinearAdditive {
            let flow = LinearGaussianFlow::new(instance, shape)?;
            let modes0 = dataset
                .par_iter()
                .flat_map_iter(|x| {
                    (0..shape.channels)
                        .flat_map(|c| flow.operator().to_modes(x.channel(c)).iter().copied().collect::<Vec<f64>>())
                        .collect::<Vec<f64>>()
                })
                .collect();
            let cache = if sampling == TimeSampling::Grid {
                let panels = SIMPSON_PANELS.div_ceil(levels.len()).max(2).next_multiple_of(2);
                let covs = flow.conditional_covariances(&levels, panels);
                levels
                    .par_iter()
                    .zip(covs.into_par_iter())
                    .map(|(&t, c)| {
                        let a = flow.accumulated_diffusivity(t);
                        Ok(LinearLevel {
                            damping: flow.operator().eigenvalues().iter().map(|mu| (a * mu).exp()).collect(),
                            chol: cholesky_factor(c)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            Branch::Linear { flow, modes0, cache }
        } else {
            let paths = dataset
                .par_iter()
                .map(|x| noise_free_path(instance, x, stepper))
                .collect::<Result<Vec<_>>>()?;
            Branch::White { paths, dt }
        };
        Ok(DsmTargets {
            shape,
            horizon,
            t_min,
            sampling,
            levels,
            level_weights,
            instance: instance.clone(),
            branch,
        })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn dataset_len(&self) -> usize {
        match &self.branch {
            Branch::Linear { modes0, .. } => modes0.len() / self.shape.len(),
            Branch::White { paths, .. } => paths.len(),
        }
    }

    /// Training time levels in grid mode.
    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    /// Draws `(image, time)` for one example; `level` is set in grid mode.
    fn draw_time(&self, rng: &mut impl Rng) -> (f64, Option<usize>) {
        match self.sampling {
            TimeSampling::Grid => {
                let k = rng.random_range(0..self.levels.len());
                (self.levels[k], Some(k))
            }
            TimeSampling::Continuous => (rng.random_range(self.t_min..=self.horizon), None),
        }
    }

    /// The example for image `index` at time `t` (grid level `level` when
    /// known) and standard normal `z`.
    pub fn target(&self, index: usize, t: f64, level: Option<usize>, z: &Field) -> Result<DsmBatchTarget> {
        z.ensure_same_shape(&Field::zeros(self.shape))?;
        let w = match level {
            Some(k) => self.level_weights[k],
            None => self.instance.schedule().accumulated_noise_variance(t),
        };
        let (x_t, target_score) = match &self.branch {
            Branch::Linear { flow, modes0, cache } => {
                let op = flow.operator();
                let (damping, chol_owned);
                let (damping, chol) = match level.filter(|_| !cache.is_empty()) {
                    Some(k) => (&cache[k].damping, &cache[k].chol),
                    None => {
                        let a = flow.accumulated_diffusivity(t);
                        damping = op.eigenvalues().iter().map(|mu| (a * mu).exp()).collect::<Vec<_>>();
                        chol_owned = cholesky_factor(flow.state_covariance(t, None))?;
                        (&damping, &chol_owned)
                    }
                };
                let p = self.shape.pixels();
                let mut mean = Field::zeros(self.shape);
                for c in 0..self.shape.channels {
                    let off = (index * self.shape.channels + c) * p;
                    let y = DVector::from_iterator(p, modes0[off..off + p].iter().zip(damping).map(|(y, d)| y * d));
                    mean.channel_mut(c).copy_from_slice(&op.from_modes(&y));
                }
                correlated_pair(mean, chol, z)
            }
            Branch::White { paths, dt } => {
                white_pair(interpolate_path(&paths[index], *dt, t, self.shape), w, z)
            }
        };
        Ok(DsmBatchTarget {
            t,
            x_t,
            target_score,
            weight: w,
        })
    }

    /// A batch drawn from one generator block; targets are built in parallel.
    pub fn batch(&self, size: usize, rng: &mut RngStream) -> Result<Vec<DsmBatchTarget>> {
        let mut block = rng.next_block();
        let draws: Vec<(usize, f64, Option<usize>, Field)> = (0..size)
            .map(|_| {
                let index = block.random_range(0..self.dataset_len());
                let (t, level) = self.draw_time(&mut block);
                let v = (0..self.shape.len()).map(|_| StandardNormal.sample(&mut block)).collect();
                (index, t, level, Field::from_vec(self.shape, v).expect("finite draws"))
            })
            .collect();
        draws
            .par_iter()
            .map(|(index, t, level, z)| self.target(*index, *t, *level, z))
            .collect()
    }
}

/// Mean weighted loss of `model` on a batch.
pub fn batch_loss(model: &ScoreNetwork, batch: &[DsmBatchTarget]) -> Result<f64> {
    let ts: Vec<f64> = batch.iter().map(|b| b.t).collect();
    let xs: Vec<&Field> = batch.iter().map(|b| &b.x_t).collect();
    let tg: Vec<&Field> = batch.iter().map(|b| &b.target_score).collect();
    let ws: Vec<f64> = batch.iter().map(|b| b.weight).collect();
    Ok(model.loss_and_gradient(&ts, &xs, &tg, &ws)?.0)
}

/// Runs Adam on the weighted score matching loss and returns the loss of
/// every iteration. Zero iterations leave `model` untouched.
pub fn train_dsm(model: &mut ScoreNetwork, targets: &DsmTargets, cfg: &TrainerConfig) -> Result<Vec<f64>> {
    if targets.shape() != model.shape() {
        return Err(Error::ShapeMismatch {
            expected: model.shape(),
            actual: targets.shape(),
        });
    }
    if cfg.iterations > 0 && cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be positive".into()));
    }
    let mut rng = RngStream::new(cfg.seed, 0);
    let mut adam = Adam::new(model.num_params(), cfg.learning_rate);
    let mut history = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let progress = it as f64 / cfg.iterations.max(2).saturating_sub(1) as f64;
        let fraction = cfg.final_lr_fraction + (1.0 - cfg.final_lr_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        adam.learning_rate = cfg.learning_rate * fraction;
        let batch = targets.batch(cfg.batch_size, &mut rng)?;
        let ts: Vec<f64> = batch.iter().map(|b| b.t).collect();
        let xs: Vec<&Field> = batch.iter().map(|b| &b.x_t).collect();
        let tg: Vec<&Field> = batch.iter().map(|b| &b.target_score).collect();
        let ws: Vec<f64> = batch.iter().map(|b| b.weight).collect();
        let (loss, mut grad) = model.loss_and_gradient(&ts, &xs, &tg, &ws)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::TrainingDiverged(it));
        }
        if let Some(cap) = cfg.grad_clip {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > cap {
                grad.iter_mut().for_each(|g| *g *= cap / norm);
            }
        }
        adam.update(model.params_mut(), &grad);
        log::debug!("dsm iteration {it}: loss {loss:.5}");
        history.push(loss);
    }
    Ok(history)
}
