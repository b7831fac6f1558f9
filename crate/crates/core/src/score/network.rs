//! A small fully connected score approximator with hand-written reverse-mode
//! gradients.
//!
//! ```text
//! in  = [ x / sqrt(1 + w(t)),  τ,  sin(f_k τ),  cos(f_k τ) ]      τ = t/T
//! h1  = silu(W1 in + b1)
//! h2  = silu(W2 h1 + b2)
//! out = (W3 h2 + b3) / sqrt(w(t))
//! ```
//!
//! `w(t) = ∫_0^t φ2²` is floored at its value at `t_min`; the input and
//! output scalings are dropped when `noise_scaled` is off. With data
//! statistics `(μ, σ)` configured the scalings follow the denoiser form
//!
//! ```text
//! in  = [ (x − μ) / sqrt(σ² + w), ... ]
//! out = −(x − μ) / (σ² + w) + σ (W3 h2 + b3) / sqrt(w (σ² + w))
//! ```
//!
//! whose first term is the exact score of `Normal(μ, σ² I)` data. All parameters live
//! in one flat vector in the order `W1, b1, W2, b2, W3, b3`, matrices
//! column-major.

use super::ScoreFn;
use crate::error::{Error, Result};
use crate::grid::{load_snapshot, save_snapshot_as, Field, Shape, SnapshotDtype};
use crate::schedules::Transition;
use crate::quadrature::simpson;
use nalgebra::{DMatrix, DMatrixView};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::io::Write;
use std::path::Path;

/// Fraction of the horizon below which `w(t)` is floored.
pub(crate) const T_MIN_FRACTION: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetworkConfig {
    pub hidden: usize,
    pub frequencies: usize,
    pub min_frequency: f64,
    pub max_frequency: f64,
    pub noise_scaled: bool,
    /// Per-pixel mean and standard deviation of the training data.
    pub data_stats: Option<(f64, f64)>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            hidden: 256,
            frequencies: 8,
            min_frequency: 1.0,
            max_frequency: 1000.0,
            noise_scaled: true,
            data_stats: None,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Layout {
    d: usize,
    d_in: usize,
    h: usize,
}

impl Layout {
    fn w1(&self) -> (usize, usize, usize) {
        (0, self.h, self.d_in)
    }
    fn b1(&self) -> usize {
        self.h * self.d_in
    }
    fn w2(&self) -> (usize, usize, usize) {
        (self.b1() + self.h, self.h, self.h)
    }
    fn b2(&self) -> usize {
        self.w2().0 + self.h * self.h
    }
    fn w3(&self) -> (usize, usize, usize) {
        (self.b2() + self.h, self.d, self.h)
    }
    fn b3(&self) -> usize {
        self.w3().0 + self.d * self.h
    }
    fn len(&self) -> usize {
        self.b3() + self.d
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreNetwork {
    shape: Shape,
    cfg: NetworkConfig,
    horizon: f64,
    phi2: Transition,
    frequencies: Vec<f64>,
    /// `w` at `NOISE_TABLE_INTERVALS + 1` uniform times on `[0, T]`.
    noise_table: Vec<f64>,
    params: Vec<f64>,
}

const NOISE_TABLE_INTERVALS: usize = 4000;

/// Activations kept for the backward pass.
struct Tape {
    input: DMatrix<f64>,
    z1: DMatrix<f64>,
    h1: DMatrix<f64>,
    z2: DMatrix<f64>,
    h2: DMatrix<f64>,
    out_scale: Vec<f64>,
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

#[inline]
fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

impl ScoreNetwork {
    /// Random hidden layers (`N(0, 1/fan_in)`), zero output layer.
    pub fn new(shape: Shape, phi2: Transition, horizon: f64, cfg: NetworkConfig, seed: u64) -> Result<Self> {
        if shape.is_empty() || cfg.hidden == 0 {
            return Err(Error::InvalidArgument("network needs nonempty input and hidden layers".into()));
        }
        if let Some((m, sd)) = cfg.data_stats {
            if !(m.is_finite() && sd.is_finite() && sd > 0.0) {
                return Err(Error::InvalidConfig(format!("invalid data statistics ({m}, {sd})")));
            }
        }
        let frequencies = geometric_frequencies(&cfg);
        let mut net = ScoreNetwork {
            shape,
            cfg,
            horizon,
            phi2,
            frequencies,
            noise_table: noise_table(phi2, horizon),
            params: Vec::new(),
        };
        let lay = net.layout();
        let mut params = vec![0.0; lay.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (off, rows, cols) in [lay.w1(), lay.w2()] {
            let std = (1.0 / cols as f64).sqrt();
            for p in &mut params[off..off + rows * cols] {
                let z: f64 = StandardNormal.sample(&mut rng);
                *p = std * z;
            }
        }
        net.params = params;
        Ok(net)
    }

    fn layout(&self) -> Layout {
        let d = self.shape.len();
        Layout {
            d,
            d_in: d + 1 + 2 * self.frequencies.len(),
            h: self.cfg.hidden,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// `w(t)` floored at `w(t_min)`; 1 when no noise is ever injected.
    fn noise_variance(&self, t: f64) -> f64 {
        let w = |t: f64| {
            let pos = (t / self.horizon).clamp(0.0, 1.0) * NOISE_TABLE_INTERVALS as f64;
            let k = (pos.floor() as usize).min(NOISE_TABLE_INTERVALS - 1);
            let frac = pos - k as f64;
            self.noise_table[k] * (1.0 - frac) + self.noise_table[k + 1] * frac
        };
        let floor = w(T_MIN_FRACTION * self.horizon);
        if floor <= 0.0 {
            return 1.0;
        }
        w(t).max(floor)
    }

    fn view(&self, (off, rows, cols): (usize, usize, usize)) -> DMatrixView<'_, f64> {
        DMatrixView::from_slice(&self.params[off..off + rows * cols], rows, cols)
    }

    fn forward(&self, ts: &[f64], xs: &[&Field]) -> Result<(DMatrix<f64>, Tape)> {
        let lay = self.layout();
        let b = xs.len();
        let mut input = DMatrix::zeros(lay.d_in, b);
        let mut out_scale = vec![1.0; b];
        let mut skip = vec![0.0; b];
        let (mu, sigma2) = match self.cfg.data_stats {
            Some((m, sd)) => (m, sd * sd),
            None => (0.0, 1.0),
        };
        for (j, (x, &t)) in xs.iter().zip(ts).enumerate() {
            if x.shape() != self.shape {
                return Err(Error::ShapeMismatch {
                    expected: self.shape,
                    actual: x.shape(),
                });
            }
            let (in_scale, o_scale) = if self.cfg.noise_scaled {
                let w = self.noise_variance(t);
                if self.cfg.data_stats.is_some() {
                    skip[j] = -1.0 / (sigma2 + w);
                    (1.0 / (sigma2 + w).sqrt(), (sigma2 / (w * (sigma2 + w))).sqrt())
                } else {
                    (1.0 / (1.0 + w).sqrt(), 1.0 / w.sqrt())
                }
            } else {
                (1.0, 1.0)
            };
            out_scale[j] = o_scale;
            let mut col = input.column_mut(j);
            for (k, v) in x.values().iter().enumerate() {
                col[k] = (v - mu) * in_scale;
            }
            let tau = t / self.horizon;
            col[lay.d] = tau;
            for (k, f) in self.frequencies.iter().enumerate() {
                col[lay.d + 1 + 2 * k] = (f * tau).sin();
                col[lay.d + 2 + 2 * k] = (f * tau).cos();
            }
        }
        let add_bias = |m: &mut DMatrix<f64>, off: usize| {
            let rows = m.nrows();
            for mut col in m.column_iter_mut() {
                for (v, b) in col.iter_mut().zip(&self.params[off..off + rows]) {
                    *v += b;
                }
            }
        };
        let mut z1 = self.view(lay.w1()) * &input;
        add_bias(&mut z1, lay.b1());
        let h1 = z1.map(silu);
        let mut z2 = self.view(lay.w2()) * &h1;
        add_bias(&mut z2, lay.b2());
        let h2 = z2.map(silu);
        let mut out = self.view(lay.w3()) * &h2;
        add_bias(&mut out, lay.b3());
        for (j, mut col) in out.column_iter_mut().enumerate() {
            col *= out_scale[j];
            if skip[j] != 0.0 {
                for (o, x) in col.iter_mut().zip(xs[j].values()) {
                    *o += skip[j] * (x - mu);
                }
            }
        }
        Ok((
            out,
            Tape {
                input,
                z1,
                h1,
                z2,
                h2,
                out_scale,
            },
        ))
    }

    /// Evaluates the network on states with individual times.
    pub fn evaluate(&self, ts: &[f64], xs: &[&Field]) -> Result<Vec<Field>> {
        if ts.len() != xs.len() {
            return Err(Error::InvalidArgument("one time per state required".into()));
        }
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let (out, _) = self.forward(ts, xs)?;
        out.column_iter()
            .map(|c| Field::from_vec(self.shape, c.iter().copied().collect()))
            .collect()
    }

    /// Batch objective `mean_j weight_j ‖out_j − target_j‖² / npix` and its
    /// gradient with respect to all parameters.
    pub fn loss_and_gradient(
        &self,
        ts: &[f64],
        xs: &[&Field],
        targets: &[&Field],
        weights: &[f64],
    ) -> Result<(f64, Vec<f64>)> {
        let lay = self.layout();
        let b = xs.len();
        if b == 0 || ts.len() != b || targets.len() != b || weights.len() != b {
            return Err(Error::InvalidArgument("batch arrays must be nonempty and aligned".into()));
        }
        let (out, tape) = self.forward(ts, xs)?;
        let npix = lay.d as f64;
        let mut loss = 0.0;
        let mut d_out = DMatrix::zeros(lay.d, b);
        for j in 0..b {
            let tgt = targets[j].values();
            for k in 0..lay.d {
                let r = out[(k, j)] - tgt[k];
                loss += weights[j] * r * r / npix;
                // fold the output scaling into the pre-scale gradient
                d_out[(k, j)] = 2.0 * weights[j] * r / (npix * b as f64) * tape.out_scale[j];
            }
        }
        loss /= b as f64;

        let mut grad = vec![0.0; lay.len()];
        let write = |grad: &mut [f64], (off, rows, cols): (usize, usize, usize), m: &DMatrix<f64>| {
            debug_assert_eq!((m.nrows(), m.ncols()), (rows, cols));
            grad[off..off + rows * cols].copy_from_slice(m.as_slice());
        };
        let row_sums = |m: &DMatrix<f64>| -> Vec<f64> { m.row_iter().map(|r| r.sum()).collect() };

        write(&mut grad, lay.w3(), &(&d_out * tape.h2.transpose()));
        let db3 = row_sums(&d_out);
        grad[lay.b3()..lay.b3() + lay.d].copy_from_slice(&db3);
        let mut dz2 = self.view(lay.w3()).tr_mul(&d_out);
        dz2.zip_apply(&tape.z2, |g, z| *g *= silu_grad(z));

        write(&mut grad, lay.w2(), &(&dz2 * tape.h1.transpose()));
        grad[lay.b2()..lay.b2() + lay.h].copy_from_slice(&row_sums(&dz2));
        let mut dz1 = self.view(lay.w2()).tr_mul(&dz2);
        dz1.zip_apply(&tape.z1, |g, z| *g *= silu_grad(z));

        write(&mut grad, lay.w1(), &(&dz1 * tape.input.transpose()));
        grad[lay.b1()..lay.b1() + lay.h].copy_from_slice(&row_sums(&dz1));
        Ok((loss, grad))
    }

    /// Writes one snapshot per parameter tensor plus `network.txt`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let lay = self.layout();
        for (name, (off, rows, cols)) in self.tensors(&lay) {
            // row-major payload
            let m = DMatrixView::from_slice(&self.params[off..off + rows * cols], rows, cols);
            let f = Field::from_vec(Shape::new(1, rows, cols), m.transpose().as_slice().to_vec())?;
            save_snapshot_as(&f, dir.join(format!("{name}.asgm")), SnapshotDtype::F64)?;
        }
        let mut f = std::fs::File::create(dir.join("network.txt"))?;
        writeln!(f, "channels={}", self.shape.channels)?;
        writeln!(f, "height={}", self.shape.height)?;
        writeln!(f, "width={}", self.shape.width)?;
        writeln!(f, "hidden={}", self.cfg.hidden)?;
        writeln!(f, "frequencies={}", self.cfg.frequencies)?;
        writeln!(f, "min_frequency={}", self.cfg.min_frequency)?;
        writeln!(f, "max_frequency={}", self.cfg.max_frequency)?;
        writeln!(f, "noise_scaled={}", self.cfg.noise_scaled)?;
        if let Some((m, sd)) = self.cfg.data_stats {
            writeln!(f, "data_mean={m}")?;
            writeln!(f, "data_std={sd}")?;
        }
        writeln!(f, "horizon={}", self.horizon)?;
        writeln!(f, "phi2={}", self.phi2)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = std::fs::read_to_string(dir.join("network.txt"))?;
        let mut kv = std::collections::HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("bad manifest line '{line}'")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        fn get<T: std::str::FromStr>(kv: &std::collections::HashMap<String, String>, k: &str) -> Result<T> {
            kv.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::InvalidConfig(format!("manifest key '{k}' missing or invalid")))
        }
        let shape = Shape::new(get(&kv, "channels")?, get(&kv, "height")?, get(&kv, "width")?);
        let cfg = NetworkConfig {
            hidden: get(&kv, "hidden")?,
            frequencies: get(&kv, "frequencies")?,
            min_frequency: get(&kv, "min_frequency")?,
            max_frequency: get(&kv, "max_frequency")?,
            noise_scaled: get(&kv, "noise_scaled")?,
            data_stats: match kv.contains_key("data_mean") {
                true => Some((get(&kv, "data_mean")?, get(&kv, "data_std")?)),
                false => None,
            },
        };
        let phi2: Transition = kv
            .get("phi2")
            .ok_or_else(|| Error::InvalidConfig("manifest key 'phi2' missing".into()))?
            .parse()?;
        let mut net = ScoreNetwork::new(shape, phi2, get(&kv, "horizon")?, cfg, 0)?;
        let lay = net.layout();
        for (name, (off, rows, cols)) in net.tensors(&lay) {
            let f = load_snapshot(dir.join(format!("{name}.asgm")))?;
            if f.height() != rows || f.width() != cols {
                return Err(Error::ShapeMismatch {
                    expected: Shape::new(1, rows, cols),
                    actual: f.shape(),
                });
            }
            let m = DMatrix::from_row_slice(rows, cols, f.values());
            net.params[off..off + rows * cols].copy_from_slice(m.as_slice());
        }
        Ok(net)
    }

    fn tensors(&self, lay: &Layout) -> [(&'static str, (usize, usize, usize)); 6] {
        [
            ("w1", lay.w1()),
            ("b1", (lay.b1(), lay.h, 1)),
            ("w2", lay.w2()),
            ("b2", (lay.b2(), lay.h, 1)),
            ("w3", lay.w3()),
            ("b3", (lay.b3(), lay.d, 1)),
        ]
    }
}

/// Column chunk size for batched evaluation; fixed so results never depend
/// on the caller's batch size.
const EVAL_CHUNK: usize = 64;

impl ScoreFn for ScoreNetwork {
    fn score(&self, t: f64, x: &Field) -> Result<Field> {
        Ok(self.evaluate(&[t], &[x])?.pop().expect("one output"))
    }

    fn score_batch(&self, t: f64, xs: &[Field]) -> Result<Vec<Field>> {
        use rayon::prelude::*;
        let chunks: Vec<Vec<Field>> = xs
            .par_chunks(EVAL_CHUNK)
            .map(|chunk| {
                let refs: Vec<&Field> = chunk.iter().collect();
                self.evaluate(&vec![t; chunk.len()], &refs)
            })
            .collect::<Result<_>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }
}

/// Per-pixel mean and standard deviation over all values of a dataset. The
/// deviation is floored at `1e-3` so constant data stay usable.
pub fn data_statistics(xs: &[Field]) -> Result<(f64, f64)> {
    if xs.is_empty() {
        return Err(Error::EmptyInput("dataset".into()));
    }
    let n: usize = xs.iter().map(|x| x.values().len()).sum();
    let mean = xs.iter().flat_map(|x| x.values()).sum::<f64>() / n as f64;
    let var = xs.iter().flat_map(|x| x.values()).map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    Ok((mean, var.sqrt().max(1e-3)))
}

/// Cumulative `∫_0^t φ2²` on a uniform grid, two Simpson panels per interval.
fn noise_table(phi2: Transition, horizon: f64) -> Vec<f64> {
    let h = horizon / NOISE_TABLE_INTERVALS as f64;
    let mut table = Vec::with_capacity(NOISE_TABLE_INTERVALS + 1);
    let mut acc = 0.0;
    table.push(0.0);
    for k in 0..NOISE_TABLE_INTERVALS {
        let a = k as f64 * h;
        acc += simpson(|s| phi2.value(s, horizon).powi(2), a, a + h, 2);
        table.push(acc);
    }
    table
}

fn geometric_frequencies(cfg: &NetworkConfig) -> Vec<f64> {
    let n = cfg.frequencies;
    (0..n)
        .map(|k| {
            if n == 1 {
                cfg.min_frequency
            } else {
                cfg.min_frequency * (cfg.max_frequency / cfg.min_frequency).powf(k as f64 / (n - 1) as f64)
            }
        })
        .collect()
}

/// Adam optimizer state.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(num_params: usize, learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.learning_rate * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
        }
    }
}
