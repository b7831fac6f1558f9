//! Spatially discretized drift `b̃` and diffusion coefficient `σ̃`.
//!
//! The drift is a divergence-form anisotropic heat operator built from
//! forward, backward and central differences with Neumann boundaries. Every
//! pixel falls into one of nine stencil branches (interior, four edges, four
//! corners); see [`PixelClass`]. The diffusion coefficient is diagonal: pixel
//! `i` is scaled by `Ψ2(t, ĝ_i)` where `ĝ_i` is the central gradient with
//! boundary-normal components zeroed.

use crate::error::{Error, Result};
use crate::grid::{central_gradient, Field, PixelClass};
use crate::schedules::{check_time, FrozenPsi, Preset, Schedule};
use nalgebra::DMatrix;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

/// Perturbation used for the finite-difference divergence of `Σ`.
pub const DIVERGENCE_FD_STEP: f64 = 1e-4;

/// Structural class of the forward equation, decided by which anisotropy
/// scales are finite.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SpdeClass {
    LinearAdditive,
    QuasilinearAdditive,
    SemilinearMultiplicative,
    QuasilinearMultiplicative,
}

impl SpdeClass {
    pub fn name(self) -> &'static str {
        match self {
            SpdeClass::LinearAdditive => "linear-additive",
            SpdeClass::QuasilinearAdditive => "quasilinear-additive",
            SpdeClass::SemilinearMultiplicative => "semilinear-multiplicative",
            SpdeClass::QuasilinearMultiplicative => "quasilinear-multiplicative",
        }
    }

    pub fn is_additive(self) -> bool {
        matches!(self, SpdeClass::LinearAdditive | SpdeClass::QuasilinearAdditive)
    }

    pub fn is_linear(self) -> bool {
        self == SpdeClass::LinearAdditive
    }
}

impl std::fmt::Display for SpdeClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub fn classify(schedule: &Schedule) -> SpdeClass {
    match (schedule.lambda1.is_isotropic(), schedule.lambda2.is_isotropic()) {
        (true, true) => SpdeClass::LinearAdditive,
        (false, true) => SpdeClass::QuasilinearAdditive,
        (true, false) => SpdeClass::SemilinearMultiplicative,
        (false, false) => SpdeClass::QuasilinearMultiplicative,
    }
}

/// A forward SDE on fields with diagonal diffusion.
///
/// Implemented by [`SdeInstance`] (the anisotropic SPDE discretization) and
/// by [`OrnsteinUhlenbeck`] (a closed-form reference process).
pub trait ForwardSde: Send + Sync {
    fn horizon(&self) -> f64;

    fn drift(&self, t: f64, x: &Field) -> Result<Field>;

    /// Diagonal entries of `σ̃(t, x)`.
    fn diffusion_diagonal(&self, t: f64, x: &Field) -> Result<Field>;

    /// `(∂Σ_ii/∂x_i)_i` with `Σ = σ̃σ̃ᵀ`.
    fn divergence_term(&self, t: f64, x: &Field) -> Result<Field>;

    /// True when `σ̃` does not depend on the state.
    fn is_additive(&self) -> bool;
}

/// Drift and diffusion operators assembled from a [`Schedule`].
#[derive(Clone, Debug)]
pub struct SdeInstance {
    schedule: Schedule,
    class: SpdeClass,
    drift_enabled: bool,
    noise_enabled: bool,
    fd_evaluations: Arc<AtomicUsize>,
}

impl SdeInstance {
    pub fn new(schedule: Schedule) -> Result<Self> {
        schedule.validate()?;
        if schedule.correlation_length > 0.0 {
            return Err(Error::Unsupported(format!(
                "spatially correlated noise (correlation length {}) is not implemented",
                schedule.correlation_length
            )));
        }
        Ok(SdeInstance {
            class: classify(&schedule),
            schedule,
            drift_enabled: true,
            noise_enabled: true,
            fd_evaluations: Arc::new(AtomicUsize::new(0)),
        })
    }

    pub fn from_preset(preset: Preset, image_size: usize) -> Result<Self> {
        SdeInstance::new(preset.schedule(image_size))
    }

    pub fn with_drift(mut self, enabled: bool) -> Self {
        self.drift_enabled = enabled;
        self
    }

    pub fn with_noise(mut self, enabled: bool) -> Self {
        self.noise_enabled = enabled;
        self
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn class(&self) -> SpdeClass {
        self.class
    }

    pub fn drift_enabled(&self) -> bool {
        self.drift_enabled
    }

    pub fn noise_enabled(&self) -> bool {
        self.noise_enabled
    }

    /// Number of calls that took the finite-difference divergence path.
    pub fn fd_evaluations(&self) -> usize {
        self.fd_evaluations.load(Ordering::Relaxed)
    }

    /// `Ψ1(t, ·)`, identically zero when the drift is disabled.
    pub fn drift_psi(&self, t: f64) -> FrozenPsi {
        if !self.drift_enabled {
            return FrozenPsi::ZERO;
        }
        self.schedule.drift_coefficient().freeze(t, self.schedule.horizon)
    }

    /// `Ψ2(t, ·)`, identically zero when the noise is disabled.
    pub fn noise_psi(&self, t: f64) -> FrozenPsi {
        if !self.noise_enabled {
            return FrozenPsi::ZERO;
        }
        self.schedule.noise_coefficient().freeze(t, self.schedule.horizon)
    }

    /// `b̃(t, x)`, channel by channel.
    pub fn drift(&self, t: f64, x: &Field) -> Result<Field> {
        check_time(t, self.schedule.horizon)?;
        let shape = x.shape();
        let psi = self.drift_psi(t);
        let mut out = Field::zeros(shape);
        if psi.phi == 0.0 {
            return Ok(out);
        }
        shape.require_stencil_grid()?;
        for c in 0..shape.channels {
            drift_channel(psi, x.channel(c), shape.height, shape.width, out.channel_mut(c));
        }
        Ok(out)
    }

    /// Diagonal of `σ̃(t, x)`.
    pub fn diffusion_diagonal(&self, t: f64, x: &Field) -> Result<Field> {
        check_time(t, self.schedule.horizon)?;
        let shape = x.shape();
        let psi = self.noise_psi(t);
        if psi.is_isotropic() {
            return Ok(Field::filled(shape, psi.phi));
        }
        shape.require_stencil_grid()?;
        let (n1, n2) = (shape.height, shape.width);
        let mut out = Field::zeros(shape);
        for c in 0..shape.channels {
            let chan = x.channel(c);
            let dst = out.channel_mut(c);
            for i1 in 0..n1 {
                for i2 in 0..n2 {
                    let (g1, g2) = central_gradient(chan, n1, n2, i1, i2);
                    dst[i1 * n2 + i2] = psi.at(g1, g2);
                }
            }
        }
        Ok(out)
    }

    /// `σ̃(t, x) η`.
    pub fn apply_diffusion(&self, t: f64, x: &Field, eta: &Field) -> Result<Field> {
        x.ensure_same_shape(eta)?;
        let mut d = self.diffusion_diagonal(t, x)?;
        for (d, e) in d.values_mut().iter_mut().zip(eta.values()) {
            *d *= e;
        }
        Ok(d)
    }

    /// `(∂Σ_ii/∂x_i)_i`, zero without evaluation when the noise is additive at
    /// time `t`, otherwise a central difference of `Ψ2(t, ĝ_i)²` in `x_i`.
    pub fn drift_divergence_term(&self, t: f64, x: &Field) -> Result<Field> {
        check_time(t, self.schedule.horizon)?;
        let shape = x.shape();
        let psi = self.noise_psi(t);
        if psi.is_isotropic() {
            return Ok(Field::zeros(shape));
        }
        shape.require_stencil_grid()?;
        self.fd_evaluations.fetch_add(1, Ordering::Relaxed);
        let (n1, n2) = (shape.height, shape.width);
        let h = DIVERGENCE_FD_STEP;
        let mut out = Field::zeros(shape);
        for c in 0..shape.channels {
            let mut chan = x.channel(c).to_vec();
            let dst = out.channel_mut(c);
            for i1 in 0..n1 {
                for i2 in 0..n2 {
                    let k = i1 * n2 + i2;
                    let orig = chan[k];
                    let mut sigma_sq = |v: f64| {
                        chan[k] = v;
                        let (g1, g2) = central_gradient(&chan, n1, n2, i1, i2);
                        let s = psi.at(g1, g2);
                        s * s
                    };
                    let plus = sigma_sq(orig + h);
                    let minus = sigma_sq(orig - h);
                    chan[k] = orig;
                    dst[k] = (plus - minus) / (2.0 * h);
                }
            }
        }
        Ok(out)
    }
}

impl ForwardSde for SdeInstance {
    fn horizon(&self) -> f64 {
        self.schedule.horizon
    }

    fn drift(&self, t: f64, x: &Field) -> Result<Field> {
        SdeInstance::drift(self, t, x)
    }

    fn diffusion_diagonal(&self, t: f64, x: &Field) -> Result<Field> {
        SdeInstance::diffusion_diagonal(self, t, x)
    }

    fn divergence_term(&self, t: f64, x: &Field) -> Result<Field> {
        self.drift_divergence_term(t, x)
    }

    fn is_additive(&self) -> bool {
        self.class.is_additive() || !self.noise_enabled
    }
}

/// `dX = −rate·X dt + sigma dW` on any field shape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrnsteinUhlenbeck {
    pub rate: f64,
    pub sigma: f64,
    pub horizon: f64,
}

impl OrnsteinUhlenbeck {
    /// Mean factor and variance of `X_t` given `X_0 = x0`.
    pub fn transition(&self, t: f64) -> (f64, f64) {
        let decay = (-self.rate * t).exp();
        let var = if self.rate == 0.0 {
            self.sigma * self.sigma * t
        } else {
            self.sigma * self.sigma * -(-2.0 * self.rate * t).exp_m1() / (2.0 * self.rate)
        };
        (decay, var)
    }
}

impl ForwardSde for OrnsteinUhlenbeck {
    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn drift(&self, t: f64, x: &Field) -> Result<Field> {
        check_time(t, self.horizon)?;
        Ok(x.scaled(-self.rate))
    }

    fn diffusion_diagonal(&self, t: f64, x: &Field) -> Result<Field> {
        check_time(t, self.horizon)?;
        Ok(Field::filled(x.shape(), self.sigma))
    }

    fn divergence_term(&self, _t: f64, x: &Field) -> Result<Field> {
        Ok(Field::zeros(x.shape()))
    }

    fn is_additive(&self) -> bool {
        true
    }
}

/// Dense matrix of the single-channel drift with `Ψ1 ≡ 1`.
///
/// Row-major pixel order `k = i1·width + i2`. The matrix is not symmetric:
/// the boundary branches double the inward flux.
pub fn isotropic_operator(height: usize, width: usize) -> Result<DMatrix<f64>> {
    if height < 3 || width < 3 {
        return Err(Error::DimensionTooSmall { height, width });
    }
    let n = height * width;
    let unit = FrozenPsi {
        phi: 1.0,
        inv_lambda_sq: 0.0,
    };
    let mut m = DMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    let mut col = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        drift_channel(unit, &e, height, width, &mut col);
        m.set_column(j, &nalgebra::DVector::from_column_slice(&col));
        e[j] = 0.0;
    }
    Ok(m)
}

/// Drift stencil for one channel of an `n1 × n2` grid (`n1, n2 ≥ 3`).
pub(crate) fn drift_channel(psi: FrozenPsi, x: &[f64], n1: usize, n2: usize, out: &mut [f64]) {
    debug_assert!(n1 >= 3 && n2 >= 3);
    for i1 in 1..n1 - 1 {
        let p1r = (i1 + 2).min(n1 - 1) * n2;
        let m1r = i1.saturating_sub(2) * n2;
        let fr = (i1 + 1) * n2;
        let cr = i1 * n2;
        let br = (i1 - 1) * n2;
        for i2 in 1..n2 - 1 {
            let c = x[cr + i2];
            let fc = x[fr + i2];
            let bc = x[br + i2];
            let cf = x[cr + i2 + 1];
            let cb = x[cr + i2 - 1];
            let ff = x[fr + i2 + 1];
            let fb = x[fr + i2 - 1];
            let bf = x[br + i2 + 1];
            let bb = x[br + i2 - 1];
            let p1 = x[p1r + i2];
            let m1 = x[m1r + i2];
            let p2 = x[cr + (i2 + 2).min(n2 - 1)];
            let m2 = x[cr + i2.saturating_sub(2)];
            out[cr + i2] = psi.at(p1 - c, ff - fb) * (fc - c) - psi.at(c - m1, bf - bb) * (c - bc)
                + psi.at(ff - bf, p2 - c) * (cf - c)
                - psi.at(fb - bb, c - m2) * (c - cb);
        }
    }
    for i2 in 0..n2 {
        out[i2] = boundary_drift(psi, x, n1, n2, 0, i2);
        out[(n1 - 1) * n2 + i2] = boundary_drift(psi, x, n1, n2, n1 - 1, i2);
    }
    for i1 in 1..n1 - 1 {
        out[i1 * n2] = boundary_drift(psi, x, n1, n2, i1, 0);
        out[i1 * n2 + n2 - 1] = boundary_drift(psi, x, n1, n2, i1, n2 - 1);
    }
}

fn boundary_drift(psi: FrozenPsi, x: &[f64], n1: usize, n2: usize, i1: usize, i2: usize) -> f64 {
    let at = |a: usize, b: usize| x[a * n2 + b];
    let c = at(i1, i2);
    let p1 = || at((i1 + 2).min(n1 - 1), i2);
    let m1 = || at(i1.saturating_sub(2), i2);
    let p2 = || at(i1, (i2 + 2).min(n2 - 1));
    let m2 = || at(i1, i2.saturating_sub(2));
    let psi0 = psi.at(0.0, 0.0);
    match PixelClass::of(i1, i2, n1, n2) {
        PixelClass::Interior => unreachable!("interior pixels use the main loop"),
        PixelClass::LeftCorner => {
            let (fc, cf) = (at(i1 + 1, i2), at(i1, i2 + 1));
            (psi.at(p1() - c, 0.0) + psi0) * (fc - c) + (psi.at(0.0, p2() - c) + psi0) * (cf - c)
        }
        PixelClass::LeftEdge => {
            let (fc, cf, cb) = (at(i1 + 1, i2), at(i1, i2 + 1), at(i1, i2 - 1));
            let t = at(i1 + 1, i2 + 1) - at(i1 + 1, i2 - 1);
            (psi.at(p1() - c, t) + psi.at(0.0, t)) * (fc - c) + psi.at(0.0, p2() - c) * (cf - c)
                - psi.at(0.0, c - m2()) * (c - cb)
        }
        PixelClass::TopCorner => {
            // The second transverse argument reads x(i1, max(i2, 0)) = x_i,
            // so its normal component is identically zero.
            let (fc, cb) = (at(i1 + 1, i2), at(i1, i2 - 1));
            (psi.at(p1() - c, 0.0) + psi0) * (fc - c)
                + (psi.at(0.0, c - at(i1, i2.max(0))) + psi0) * (cb - c)
        }
        PixelClass::TopEdge => {
            // The leading flux carries (x_{i1+1,i2} − x_i) as in every other
            // branch; without it constants would not be stationary.
            let (fc, bc, cb) = (at(i1 + 1, i2), at(i1 - 1, i2), at(i1, i2 - 1));
            let t = at(i1 + 1, i2 - 1) - at(i1 - 1, i2 - 1);
            psi.at(p1() - c, 0.0) * (fc - c) - psi.at(c - m1(), 0.0) * (c - bc)
                + (psi.at(t, 0.0) + psi.at(t, c - m2())) * (cb - c)
        }
        PixelClass::RightCorner => {
            // The first flux pairs with the backward neighbour x_{i1−1,i2};
            // the diagonal x_{i1−1,i2+1} lies outside the grid here.
            let (bc, cb) = (at(i1 - 1, i2), at(i1, i2 - 1));
            (psi.at(c - m1(), 0.0) + psi0) * (bc - c) + (psi.at(0.0, c - m2()) + psi0) * (cb - c)
        }
        PixelClass::RightEdge => {
            let (bc, cf, cb) = (at(i1 - 1, i2), at(i1, i2 + 1), at(i1, i2 - 1));
            let t = at(i1 - 1, i2 + 1) - at(i1 - 1, i2 - 1);
            (psi.at(0.0, t) + psi.at(c - m1(), t)) * (bc - c) + psi.at(0.0, p2() - c) * (cf - c)
                - psi.at(0.0, c - m2()) * (c - cb)
        }
        PixelClass::BottomCorner => {
            let (bc, cf) = (at(i1 - 1, i2), at(i1, i2 + 1));
            (psi.at(c - m1(), 0.0) + psi0) * (bc - c) + (psi.at(0.0, p2() - c) + psi0) * (cf - c)
        }
        PixelClass::BottomEdge => {
            let (fc, bc, cf) = (at(i1 + 1, i2), at(i1 - 1, i2), at(i1, i2 + 1));
            let t = at(i1 + 1, i2 + 1) - at(i1 - 1, i2 + 1);
            psi.at(p1() - c, 0.0) * (fc - c) - psi.at(c - m1(), 0.0) * (c - bc)
                + (psi.at(t, p2() - c) + psi.at(t, 0.0)) * (cf - c)
        }
    }
}
