//! Gaussian laws of the linear forward process and the calibrated prior.
//!
//! For a linear-additive instance the mode coordinates `y = Uᵀ W^{1/2} x` of
//! each channel follow
//!
//! ```text
//! dy = φ1(t) Λ y dt + φ2(t) Uᵀ W^{1/2} dW,
//! ```
//!
//! so given `x0` the state is Gaussian with mean `exp(A(t) L̃) x0` and mode
//! covariance `K(t) = G ⊙ J(t)`, where `G = Uᵀ W U`, `A(t) = ∫_0^t φ1` and
//!
//! ```text
//! J_kl(t) = ∫_0^t φ2(s)² exp((A(t) − A(s)) (μ_k + μ_l)) ds.
//! ```

use super::spectral::{SpectralOperator, MAX_DENSE_PIXELS};
use super::ScoreFn;
use crate::dynamics::{SdeInstance, SpdeClass};
use crate::error::{Error, Result};
use crate::grid::{load_snapshot, save_snapshot_as, Field, Shape, SnapshotDtype};
use crate::integrator::{simulate_endpoints, RngStream, StepperConfig};
use crate::quadrature::{simpson_nodes, SIMPSON_PANELS};
use crate::schedules::Transition;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex};

/// Modes damped below this factor at `T` carry no prior mean.
pub const PRIOR_MODE_CUTOFF: f64 = 1e-6;

/// A Gaussian on fields whose covariance is shared by all channels:
/// `Cov = Q diag(v) Qᵀ` per channel with orthonormal `Q`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianLaw {
    mean: Field,
    /// `None` stands for the identity basis.
    basis: Option<DMatrix<f64>>,
    variances: Vec<f64>,
}

impl GaussianLaw {
    pub fn new(mean: Field, basis: Option<DMatrix<f64>>, variances: Vec<f64>) -> Result<Self> {
        let p = mean.shape().pixels();
        if variances.len() != p {
            return Err(Error::InvalidArgument(format!(
                "{} mode variances for {p} pixels",
                variances.len()
            )));
        }
        if let Some(q) = &basis {
            if q.nrows() != p || q.ncols() != p {
                return Err(Error::InvalidArgument(format!(
                    "basis is {}x{}, expected {p}x{p}",
                    q.nrows(),
                    q.ncols()
                )));
            }
        }
        if variances.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::NonFinite);
        }
        Ok(GaussianLaw {
            mean,
            basis,
            variances,
        })
    }

    /// `Normal(mean, var·I)`.
    pub fn isotropic(mean: Field, var: f64) -> Result<Self> {
        let p = mean.shape().pixels();
        GaussianLaw::new(mean, None, vec![var; p])
    }

    /// Eigendecomposes a per-channel covariance; eigenvalues below zero from
    /// roundoff are clipped to zero.
    pub fn from_covariance(mean: Field, cov: &DMatrix<f64>) -> Result<Self> {
        let sym = (cov + cov.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let p = eig.eigenvalues.len();
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut basis = DMatrix::zeros(p, p);
        let mut variances = Vec::with_capacity(p);
        for (k, &src) in order.iter().enumerate() {
            basis.set_column(k, &eig.eigenvectors.column(src));
            variances.push(eig.eigenvalues[src].max(0.0));
        }
        GaussianLaw::new(mean, Some(basis), variances)
    }

    pub fn mean(&self) -> &Field {
        &self.mean
    }

    pub fn shape(&self) -> Shape {
        self.mean.shape()
    }

    /// Orthonormal mode basis (columns); identity when `None`.
    pub fn basis(&self) -> Option<&DMatrix<f64>> {
        self.basis.as_ref()
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    /// Per-channel covariance matrix.
    pub fn covariance(&self) -> DMatrix<f64> {
        let p = self.variances.len();
        match &self.basis {
            None => DMatrix::from_diagonal(&DVector::from_column_slice(&self.variances)),
            Some(q) => {
                let mut qv = q.clone();
                for k in 0..p {
                    qv.column_mut(k).scale_mut(self.variances[k]);
                }
                qv * q.transpose()
            }
        }
    }

    fn to_modes(&self, v: &[f64]) -> DVector<f64> {
        let v = DVector::from_column_slice(v);
        match &self.basis {
            None => v,
            Some(q) => q.tr_mul(&v),
        }
    }

    fn from_modes(&self, y: &DVector<f64>) -> DVector<f64> {
        match &self.basis {
            None => y.clone(),
            Some(q) => q * y,
        }
    }

    /// `∇ log p(x) = −Cov⁻¹ (x − m)`.
    pub fn score(&self, x: &Field) -> Result<Field> {
        x.ensure_same_shape(&self.mean)?;
        if let Some(k) = self.variances.iter().position(|v| *v <= 0.0) {
            return Err(Error::DegenerateVariance(k));
        }
        let shape = x.shape();
        let mut out = Field::zeros(shape);
        let mut diff = vec![0.0; shape.pixels()];
        for c in 0..shape.channels {
            for ((d, m), v) in diff.iter_mut().zip(self.mean.channel(c)).zip(x.channel(c)) {
                *d = m - v;
            }
            let mut y = self.to_modes(&diff);
            for (y, v) in y.iter_mut().zip(&self.variances) {
                *y /= v;
            }
            out.channel_mut(c).copy_from_slice(self.from_modes(&y).as_slice());
        }
        Ok(out)
    }

    pub fn log_density(&self, x: &Field) -> Result<f64> {
        x.ensure_same_shape(&self.mean)?;
        if let Some(k) = self.variances.iter().position(|v| *v <= 0.0) {
            return Err(Error::DegenerateVariance(k));
        }
        let shape = x.shape();
        let log_norm: f64 = self
            .variances
            .iter()
            .map(|v| (2.0 * std::f64::consts::PI * v).ln())
            .sum();
        let mut acc = -0.5 * log_norm * shape.channels as f64;
        let mut diff = vec![0.0; shape.pixels()];
        for c in 0..shape.channels {
            for ((d, m), v) in diff.iter_mut().zip(self.mean.channel(c)).zip(x.channel(c)) {
                *d = v - m;
            }
            let y = self.to_modes(&diff);
            acc -= 0.5 * y.iter().zip(&self.variances).map(|(y, v)| y * y / v).sum::<f64>();
        }
        Ok(acc)
    }

    /// `m + Q (√v ⊙ z)` for a standard normal `z` in mode coordinates.
    pub fn transform_standard(&self, z: &Field) -> Result<Field> {
        z.ensure_same_shape(&self.mean)?;
        let mut out = self.mean.clone();
        for c in 0..z.channels() {
            let y = DVector::from_iterator(
                self.variances.len(),
                z.channel(c).iter().zip(&self.variances).map(|(z, v)| z * v.sqrt()),
            );
            for (o, d) in out.channel_mut(c).iter_mut().zip(self.from_modes(&y).iter()) {
                *o += d;
            }
        }
        Ok(out)
    }

    pub fn sample(&self, rng: &mut RngStream) -> Field {
        let z = rng.standard_normal(self.mean.shape());
        self.transform_standard(&z).expect("shapes agree by construction")
    }

    /// Writes `mean.asgm`, `basis.asgm` (if any), `variances.asgm` and
    /// `law.txt` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let p = self.variances.len();
        save_snapshot_as(&self.mean, dir.join("mean.asgm"), SnapshotDtype::F64)?;
        let v = Field::from_vec(Shape::new(1, 1, p), self.variances.clone())?;
        save_snapshot_as(&v, dir.join("variances.asgm"), SnapshotDtype::F64)?;
        if let Some(q) = &self.basis {
            // stored row-major: entry (i, k) at i·p + k
            let q = Field::from_vec(Shape::new(1, p, p), q.transpose().as_slice().to_vec())?;
            save_snapshot_as(&q, dir.join("basis.asgm"), SnapshotDtype::F64)?;
        }
        let mut f = std::fs::File::create(dir.join("law.txt"))?;
        writeln!(f, "shape={}", self.mean.shape())?;
        writeln!(f, "basis={}", if self.basis.is_some() { "basis.asgm" } else { "identity" })?;
        writeln!(f, "min_variance={:e}", self.variances.iter().cloned().fold(f64::INFINITY, f64::min))?;
        writeln!(f, "max_variance={:e}", self.variances.iter().cloned().fold(0.0, f64::max))?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mean = load_snapshot(dir.join("mean.asgm"))?;
        let variances = load_snapshot(dir.join("variances.asgm"))?.into_vec();
        let basis_path = dir.join("basis.asgm");
        let basis = if basis_path.exists() {
            let q = load_snapshot(basis_path)?;
            let p = q.height();
            Some(DMatrix::from_row_slice(p, p, q.values()))
        } else {
            None
        };
        GaussianLaw::new(mean, basis, variances)
    }
}

/// Closed-form laws of a linear-additive instance on one grid shape.
#[derive(Clone, Debug)]
pub struct LinearGaussianFlow {
    phi1: Transition,
    phi2: Transition,
    horizon: f64,
    shape: Shape,
    op: SpectralOperator,
    gram: DMatrix<f64>,
}

impl LinearGaussianFlow {
    pub fn new(instance: &SdeInstance, shape: Shape) -> Result<Self> {
        if instance.class() != SpdeClass::LinearAdditive {
            return Err(Error::NotLinear);
        }
        let p = shape.pixels();
        if p > MAX_DENSE_PIXELS {
            return Err(Error::GridTooLarge(p));
        }
        let s = instance.schedule();
        let phi1 = if instance.drift_enabled() { s.phi1 } else { Transition::Constant(0.0) };
        let phi2 = if instance.noise_enabled() { s.phi2 } else { Transition::Constant(0.0) };
        let op = if phi1.is_zero() {
            SpectralOperator::trivial(shape.height, shape.width)
        } else {
            SpectralOperator::isotropic(shape.height, shape.width)?
        };
        let gram = op.noise_gram();
        Ok(LinearGaussianFlow {
            phi1,
            phi2,
            horizon: s.horizon,
            shape,
            op,
            gram,
        })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn operator(&self) -> &SpectralOperator {
        &self.op
    }

    /// `A(t) = ∫_0^t φ1`.
    pub fn accumulated_diffusivity(&self, t: f64) -> f64 {
        self.phi1.integral(t, self.horizon)
    }

    /// `J(t)` by Simpson quadrature, one integral per distinct `μ_k + μ_l`.
    pub fn mode_integrals(&self, t: f64) -> DMatrix<f64> {
        self.mode_integrals_on(&[t], SIMPSON_PANELS).pop().expect("one time")
    }

    /// `J` at increasing `times`, accumulated interval by interval:
    /// `J(t') = exp((A(t') − A(t)) ν) J(t) + ∫_t^{t'} φ2² exp((A(t') − A(s)) ν) ds`
    /// with `panels` Simpson panels per interval.
    pub fn mode_integrals_on(&self, times: &[f64], panels: usize) -> Vec<DMatrix<f64>> {
        let mu = self.op.eigenvalues();
        let p = mu.len();
        let key = |nu: f64| (nu * 1e10).round() as i64;
        let mut ids = HashMap::new();
        let mut distinct: Vec<f64> = Vec::new();
        let mut index = vec![0usize; p * p];
        for k in 0..p {
            for l in k..p {
                let nu = mu[k] + mu[l];
                let id = *ids.entry(key(nu)).or_insert_with(|| {
                    distinct.push(nu);
                    distinct.len() - 1
                });
                index[k * p + l] = id;
                index[l * p + k] = id;
            }
        }
        let mut j = vec![0.0; distinct.len()];
        let mut prev = 0.0;
        let mut out = Vec::with_capacity(times.len());
        for &t in times {
            let (nodes, weights) = simpson_nodes(prev, t, panels);
            let a_t = self.accumulated_diffusivity(t);
            let a_prev = self.accumulated_diffusivity(prev);
            let gaps: Vec<f64> = nodes.iter().map(|&s| a_t - self.accumulated_diffusivity(s)).collect();
            let g: Vec<f64> = nodes
                .iter()
                .zip(&weights)
                .map(|(&s, w)| {
                    let v = self.phi2.value(s, self.horizon);
                    w * v * v
                })
                .collect();
            j.par_iter_mut().zip(distinct.par_iter()).for_each(|(jv, &nu)| {
                let inc: f64 = g.iter().zip(&gaps).map(|(g, a)| g * (a * nu).exp()).sum();
                *jv = ((a_t - a_prev) * nu).exp() * *jv + inc;
            });
            out.push(DMatrix::from_fn(p, p, |k, l| j[index[k * p + l]]));
            prev = t;
        }
        out
    }

    /// Conditional state covariances `C(t)` at increasing `times`.
    pub fn conditional_covariances(&self, times: &[f64], panels: usize) -> Vec<DMatrix<f64>> {
        self.mode_integrals_on(times, panels)
            .into_iter()
            .map(|j| {
                let c = self.op.state_covariance(&self.gram.component_mul(&j));
                (&c + c.transpose()) * 0.5
            })
            .collect()
    }

    /// Mode covariance `K(t) = e^{AΛ} K0 e^{AΛ} + G ⊙ J(t)`.
    pub fn mode_covariance(&self, t: f64, k0: Option<&DMatrix<f64>>) -> DMatrix<f64> {
        let mut k = self.gram.component_mul(&self.mode_integrals(t));
        if let Some(k0) = k0 {
            let a = self.accumulated_diffusivity(t);
            let e: Vec<f64> = self.op.eigenvalues().iter().map(|mu| (a * mu).exp()).collect();
            k += DMatrix::from_fn(k0.nrows(), k0.ncols(), |i, j| e[i] * k0[(i, j)] * e[j]);
        }
        k
    }

    /// Per-channel state covariance at `t` for initial covariance `cov0`.
    pub fn state_covariance(&self, t: f64, cov0: Option<&DMatrix<f64>>) -> DMatrix<f64> {
        let k0 = cov0.map(|c| self.op.mode_covariance(c));
        let c = self.op.state_covariance(&self.mode_covariance(t, k0.as_ref()));
        (&c + c.transpose()) * 0.5
    }

    /// `exp(A(t) L̃)`.
    pub fn mean_map(&self, t: f64) -> DMatrix<f64> {
        self.op.flow_matrix(self.accumulated_diffusivity(t))
    }

    pub fn propagate_mean(&self, t: f64, x0: &Field) -> Result<Field> {
        self.check_shape(x0)?;
        Ok(apply_channelwise(&self.mean_map(t), x0))
    }

    /// `p_t(· | x0)`.
    pub fn law(&self, t: f64, x0: &Field) -> Result<GaussianLaw> {
        crate::schedules::check_time(t, self.horizon)?;
        let mean = self.propagate_mean(t, x0)?;
        GaussianLaw::from_covariance(mean, &self.state_covariance(t, None))
    }

    /// Law at `t` when `x0 ~ Normal(mean0, cov0)` per channel.
    pub fn marginal_law(&self, t: f64, mean0: &Field, cov0: &DMatrix<f64>) -> Result<GaussianLaw> {
        crate::schedules::check_time(t, self.horizon)?;
        let mean = self.propagate_mean(t, mean0)?;
        GaussianLaw::from_covariance(mean, &self.state_covariance(t, Some(cov0)))
    }

    fn check_shape(&self, x: &Field) -> Result<()> {
        let s = x.shape();
        if s.height != self.shape.height || s.width != self.shape.width {
            return Err(Error::ShapeMismatch {
                expected: self.shape,
                actual: s,
            });
        }
        Ok(())
    }
}

pub(crate) fn apply_channelwise(m: &DMatrix<f64>, x: &Field) -> Field {
    let mut out = Field::zeros(x.shape());
    for c in 0..x.channels() {
        let v = m * DVector::from_column_slice(x.channel(c));
        out.channel_mut(c).copy_from_slice(v.as_slice());
    }
    out
}

/// `p_t(· | x0)` of a linear-additive instance.
pub fn linear_law(instance: &SdeInstance, x0: &Field, t: f64) -> Result<GaussianLaw> {
    LinearGaussianFlow::new(instance, x0.shape())?.law(t, x0)
}

/// `∇ log p_t` for Gaussian initial data pushed through a linear flow; laws
/// are cached per time.
#[derive(Debug)]
pub struct AnalyticScore {
    flow: Arc<LinearGaussianFlow>,
    mean0: Field,
    cov0: Option<DMatrix<f64>>,
    cache: Mutex<HashMap<u64, Arc<GaussianLaw>>>,
}

impl AnalyticScore {
    /// `cov0 = None` conditions on the deterministic start `mean0`.
    pub fn new(flow: Arc<LinearGaussianFlow>, mean0: Field, cov0: Option<DMatrix<f64>>) -> Self {
        AnalyticScore {
            flow,
            mean0,
            cov0,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn law_at(&self, t: f64) -> Result<Arc<GaussianLaw>> {
        let key = t.to_bits();
        if let Some(law) = self.cache.lock().expect("score cache").get(&key) {
            return Ok(law.clone());
        }
        let law = Arc::new(match &self.cov0 {
            Some(c) => self.flow.marginal_law(t, &self.mean0, c)?,
            None => self.flow.law(t, &self.mean0)?,
        });
        self.cache.lock().expect("score cache").insert(key, law.clone());
        Ok(law)
    }

    pub fn flow(&self) -> &LinearGaussianFlow {
        &self.flow
    }
}

impl ScoreFn for AnalyticScore {
    fn score(&self, t: f64, x: &Field) -> Result<Field> {
        self.law_at(t)?.score(x)
    }
}

/// Settings for the simulated prior fit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PriorConfig {
    pub simulations: usize,
    pub stepper: StepperConfig,
    pub seed: u64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            simulations: 256,
            stepper: StepperConfig::default(),
            seed: 0,
        }
    }
}

/// Law used to initialize the backward sampler.
///
/// Linear instances use the closed form: the calibration mean pushed through
/// `exp(A(T) L̃)` with modes damped below [`PRIOR_MODE_CUTOFF`] centered, and
/// covariance `C(T) + M Ĉ0 Mᵀ` where `Ĉ0` is the empirical per-channel
/// covariance of the calibration set (zero with fewer than two images). No
/// simulation is performed. Other instances are fitted to forward
/// simulations: per-pixel mean, and per-mode variances in the eigenbasis of
/// the isotropic operator.
pub fn prior_law(
    instance: &SdeInstance,
    shape: Shape,
    calibration: &[Field],
    cfg: &PriorConfig,
) -> Result<GaussianLaw> {
    for x in calibration {
        if x.shape() != shape {
            return Err(Error::ShapeMismatch {
                expected: shape,
                actual: x.shape(),
            });
        }
    }
    let horizon = instance.schedule().horizon;
    if instance.class() == SpdeClass::LinearAdditive {
        let flow = LinearGaussianFlow::new(instance, shape)?;
        let mean0 = if calibration.is_empty() {
            Field::zeros(shape)
        } else {
            field_mean(calibration)
        };
        let a = flow.accumulated_diffusivity(horizon);
        let damp: Vec<f64> = flow
            .operator()
            .eigenvalues()
            .iter()
            .map(|mu| {
                let e = (a * mu).exp();
                if e < PRIOR_MODE_CUTOFF {
                    0.0
                } else {
                    e
                }
            })
            .collect();
        let mean = apply_channelwise(&flow.operator().conjugate_diagonal(&damp), &mean0);
        let cov0 = (calibration.len() >= 2).then(|| pooled_covariance(calibration, &mean0));
        let cov = flow.state_covariance(horizon, cov0.as_ref());
        return GaussianLaw::from_covariance(mean, &cov);
    }
    if calibration.is_empty() {
        return Err(Error::EmptyInput("prior calibration set".into()));
    }
    let n = cfg.simulations.max(calibration.len());
    let starts: Vec<Field> = (0..n).map(|k| calibration[k % calibration.len()].clone()).collect();
    let ends = simulate_endpoints(instance, &starts, horizon, &cfg.stepper, cfg.seed)?;
    let mean = field_mean(&ends);
    let basis = if shape.height >= 3 && shape.width >= 3 && shape.pixels() <= MAX_DENSE_PIXELS {
        Some(SpectralOperator::isotropic(shape.height, shape.width)?.basis().clone())
    } else {
        None
    };
    let p = shape.pixels();
    let mut variances = vec![0.0; p];
    let mut diff = vec![0.0; p];
    for x in &ends {
        for c in 0..shape.channels {
            for ((d, a), m) in diff.iter_mut().zip(x.channel(c)).zip(mean.channel(c)) {
                *d = a - m;
            }
            let y = match &basis {
                Some(q) => q.tr_mul(&DVector::from_column_slice(&diff)),
                None => DVector::from_column_slice(&diff),
            };
            for (v, y) in variances.iter_mut().zip(y.iter()) {
                *v += y * y;
            }
        }
    }
    let denom = (ends.len() * shape.channels - 1).max(1) as f64;
    for v in variances.iter_mut() {
        *v /= denom;
    }
    GaussianLaw::new(mean, basis, variances)
}

/// Per-entry mean of a nonempty set.
pub fn field_mean(xs: &[Field]) -> Field {
    let mut m = Field::zeros(xs[0].shape());
    for x in xs {
        m.add_scaled(1.0, x);
    }
    m.scale(1.0 / xs.len() as f64);
    m
}

/// Covariance of pixel vectors, pooled over channels, unbiased. Needs at
/// least two fields.
pub fn pooled_covariance(xs: &[Field], mean: &Field) -> DMatrix<f64> {
    let shape = mean.shape();
    let p = shape.pixels();
    let mut cov = DMatrix::zeros(p, p);
    for x in xs {
        for c in 0..shape.channels {
            let d = DVector::from_iterator(p, x.channel(c).iter().zip(mean.channel(c)).map(|(a, b)| a - b));
            cov.ger(1.0, &d, &d, 1.0);
        }
    }
    cov / ((xs.len() - 1) * shape.channels) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::isotropic_operator;
    use crate::integrator::simulate_until;
    use crate::quadrature::simpson;
    use crate::schedules::{Preset, Schedule};

    fn smooth_field(shape: Shape) -> Field {
        Field::from_fn(shape, |c, a, b| ((a as f64 * 0.7 + c as f64).sin() + (b as f64 * 0.4).cos()) * 0.5)
    }

    #[test]
    fn ve_noise_law_is_isotropic() {
        let inst = SdeInstance::from_preset(Preset::VeNoise, 4).unwrap();
        let x0 = smooth_field(Shape::new(1, 1, 2));
        let law = linear_law(&inst, &x0, 2.0).unwrap();
        let s = inst.schedule();
        let w = simpson(|t| s.phi2.value(t, 2.0).powi(2), 0.0, 2.0, 1000);
        assert_eq!(law.mean(), &x0);
        for v in law.variances() {
            assert!((v - w).abs() < 1e-12 * w);
        }
    }

    #[test]
    fn time_zero_law_is_degenerate_at_x0() {
        let inst = SdeInstance::from_preset(Preset::IsoHeat, 5).unwrap();
        let x0 = smooth_field(Shape::new(1, 5, 5));
        let law = linear_law(&inst, &x0, 0.0).unwrap();
        assert!(law.mean().max_abs_diff(&x0) < 1e-12);
        assert!(law.variances().iter().all(|v| v.abs() < 1e-15));
        assert!(matches!(law.score(&x0), Err(Error::DegenerateVariance(_))));
    }

    #[test]
    fn not_linear() {
        let inst = SdeInstance::from_preset(Preset::AnisoHeat, 5).unwrap();
        assert!(matches!(
            linear_law(&inst, &Field::zeros(Shape::new(1, 5, 5)), 1.0),
            Err(Error::NotLinear)
        ));
    }

    #[test]
    fn iso_heat_mean_matches_noise_free_simulation() {
        let inst = SdeInstance::from_preset(Preset::IsoHeat, 8).unwrap();
        let x0 = smooth_field(Shape::new(1, 8, 8));
        let law = linear_law(&inst, &x0, 2.0).unwrap();
        // the taming bias is O(dt ‖b‖), so the tamed flow needs a finer grid
        let sim = simulate_until(&inst.clone().with_noise(false), &x0, 2.0, &StepperConfig::new(1e-3), None).unwrap();
        assert!(law.mean().max_abs_diff(sim.final_state()) < 1e-3);
    }

    #[test]
    fn state_covariance_matches_dense_quadrature() {
        // Oracle: C(t) = ∫ φ2(s)² E(s) E(s)ᵀ ds with E(s) = expm((A(t)−A(s)) L̃).
        let s = Schedule {
            phi1: Transition::Constant(0.8),
            phi2: Transition::Geometric { min: 0.1, max: 0.6 },
            ..Preset::IsoHeat.schedule(4)
        };
        let inst = SdeInstance::new(s).unwrap();
        let flow = LinearGaussianFlow::new(&inst, Shape::new(1, 3, 4)).unwrap();
        let l = isotropic_operator(3, 4).unwrap();
        let t = 1.3;
        let n = 200;
        let (nodes, weights) = simpson_nodes(0.0, t, n);
        let mut oracle = DMatrix::zeros(12, 12);
        for (s_, w) in nodes.iter().zip(&weights) {
            let e = (&l * (0.8 * (t - s_))).exp();
            oracle += (&e * e.transpose()) * (w * s.phi2.value(*s_, 2.0).powi(2));
        }
        let c = flow.state_covariance(t, None);
        assert!((c - oracle).amax() < 1e-8);
    }

    #[test]
    fn recursive_integrals_match_direct_quadrature() {
        let inst = SdeInstance::from_preset(Preset::IsoHeat, 5).unwrap();
        let flow = LinearGaussianFlow::new(&inst, Shape::new(1, 5, 5)).unwrap();
        let times: Vec<f64> = (1..=40).map(|k| k as f64 * 0.05).collect();
        let rec = flow.mode_integrals_on(&times, 26);
        for k in [0, 9, 39] {
            let direct = flow.mode_integrals(times[k]);
            let err = (&rec[k] - &direct).amax() / direct.amax();
            assert!(err < 1e-5, "level {k}: {err}");
        }
    }

    #[test]
    fn marginal_variances_bounded_by_noise_integral() {
        let inst = SdeInstance::from_preset(Preset::IsoHeat, 6).unwrap();
        let flow = LinearGaussianFlow::new(&inst, Shape::new(1, 6, 6)).unwrap();
        let s = inst.schedule();
        let mut prev = 0.0;
        for t in [0.2, 0.6, 1.0, 1.5, 2.0] {
            let w = s.accumulated_noise_variance(t);
            let k = flow.mode_covariance(t, None);
            let j = flow.mode_integrals(t);
            for (kk, mu) in flow.operator().eigenvalues().iter().enumerate() {
                assert!(j[(kk, kk)] <= w * (1.0 + 1e-12));
                if *mu == 0.0 {
                    assert!(j[(kk, kk)] >= prev);
                    prev = j[(kk, kk)];
                }
            }
            assert!(k.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn score_vanishes_at_mean_and_isotropic_case() {
        let m = smooth_field(Shape::new(2, 3, 3));
        let law = GaussianLaw::isotropic(m.clone(), 0.25).unwrap();
        assert_eq!(law.score(&m).unwrap().max_abs(), 0.0);
        let x = m.map(|v| v + 0.5);
        let s = law.score(&x).unwrap();
        assert!(s.values().iter().all(|v| (v + 2.0).abs() < 1e-12));
    }

    #[test]
    fn score_matches_finite_differences_of_log_density() {
        let inst = SdeInstance::from_preset(Preset::IsoHeat, 4).unwrap();
        let shape = Shape::new(1, 4, 4);
        let x0 = smooth_field(shape);
        let law = linear_law(&inst, &x0, 0.9).unwrap();
        let mut rng = RngStream::new(77, 0);
        for _ in 0..5 {
            let x = law.sample(&mut rng);
            let s = law.score(&x).unwrap();
            let h = 1e-4;
            for k in 0..shape.len() {
                let mut xp = x.clone();
                xp.values_mut()[k] += h;
                let mut xm = x.clone();
                xm.values_mut()[k] -= h;
                let fd = (law.log_density(&xp).unwrap() - law.log_density(&xm).unwrap()) / (2.0 * h);
                assert!((fd - s.values()[k]).abs() < 1e-4 * s.values()[k].abs().max(1.0), "{fd} vs {}", s.values()[k]);
            }
        }
    }

    #[test]
    fn save_load_round_trip() {
        let inst = SdeInstance::from_preset(Preset::IsoHeat, 3).unwrap();
        let law = linear_law(&inst, &smooth_field(Shape::new(1, 3, 3)), 1.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        law.save(dir.path()).unwrap();
        assert_eq!(GaussianLaw::load(dir.path()).unwrap(), law);
        let iso = GaussianLaw::isotropic(Field::zeros(Shape::new(1, 2, 2)), 0.5).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        iso.save(dir2.path()).unwrap();
        assert_eq!(GaussianLaw::load(dir2.path()).unwrap(), iso);
    }

    #[test]
    fn prior_for_ve_noise_and_constant_data() {
        let ve = SdeInstance::from_preset(Preset::VeNoise, 4).unwrap();
        let shape = Shape::new(1, 4, 4);
        let xs = vec![smooth_field(shape), smooth_field(shape).scaled(0.5)];
        let prior = prior_law(&ve, shape, &xs[..1], &PriorConfig::default()).unwrap();
        let w = ve.schedule().accumulated_noise_variance(2.0);
        assert!(prior.mean().max_abs_diff(&xs[0]) < 1e-12);
        assert!(prior.variances().iter().all(|v| (v - w).abs() < 1e-12));

        let iso = SdeInstance::from_preset(Preset::IsoHeat, 4).unwrap();
        let constant = Field::filled(shape, 0.3);
        let prior = prior_law(&iso, shape, &[constant.clone()], &PriorConfig::default()).unwrap();
        assert!(prior.mean().max_abs_diff(&constant) < 1e-10);
    }

    #[test]
    fn quasilinear_prior_needs_data_and_is_nonnegative() {
        let inst = SdeInstance::from_preset(Preset::AnisoHeat, 5).unwrap();
        let shape = Shape::new(1, 5, 5);
        assert!(matches!(
            prior_law(&inst, shape, &[], &PriorConfig::default()),
            Err(Error::EmptyInput(_))
        ));
        let cfg = PriorConfig { simulations: 32, ..Default::default() };
        let prior = prior_law(&inst, shape, &[smooth_field(shape)], &cfg).unwrap();
        assert!(prior.variances().iter().all(|v| *v >= 0.0));
        assert_eq!(prior, prior_law(&inst, shape, &[smooth_field(shape)], &cfg).unwrap());
    }
}
