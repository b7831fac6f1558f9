//! Brownian increments and the tamed Euler–Maruyama stepper.
//!
//! One step reads
//!
//! ```text
//! x' = x + Δt · b / (1 + Δt ‖b‖^γ) + σ̃(t, x) ΔW
//! ```
//!
//! with `‖·‖` the Euclidean norm of one channel of the drift field. Without a
//! taming exponent the step is classical Euler–Maruyama.

use crate::dynamics::ForwardSde;
use crate::error::{Error, Result};
use crate::grid::{save_snapshot, Field, Shape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use std::io::Write;
use std::path::Path;

/// States whose max-abs exceeds this abort the simulation.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

/// Relative tolerance for `T/Δt` to count as an integer.
const GRID_TOLERANCE: f64 = 1e-9;

/// Counter-addressed random stream.
///
/// Each draw of a whole field (or any other block of randomness obtained via
/// [`RngStream::next_block`]) owns a disjoint window of the ChaCha keystream
/// selected by `(seed, stream_id, counter)`, so results never depend on how
/// work is scheduled across threads.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    counter: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        RngStream {
            seed,
            stream_id,
            counter: 0,
        }
    }

    /// A stream positioned at `counter`.
    pub fn at(seed: u64, stream_id: u64, counter: u64) -> Self {
        RngStream {
            seed,
            stream_id,
            counter,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// A generator for the current block; advances the counter.
    pub fn next_block(&mut self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng.set_word_pos((self.counter as u128) << 36);
        self.counter += 1;
        rng
    }

    /// Independent standard normal entries.
    pub fn standard_normal(&mut self, shape: Shape) -> Field {
        let mut rng = self.next_block();
        let values = (0..shape.len())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Field::from_vec(shape, values).expect("normal draws are finite")
    }
}

/// `ΔW ~ Normal(0, dt·I)`.
pub fn brownian_increment(rng: &mut RngStream, shape: Shape, dt: f64) -> Result<Field> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
    }
    let mut z = rng.standard_normal(shape);
    z.scale(dt.sqrt());
    Ok(z)
}

/// Time stepping parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepperConfig {
    pub dt: f64,
    /// Taming exponent `γ`; `None` disables taming.
    pub gamma: Option<f64>,
    /// Record every this many steps; 0 keeps only the initial and final state.
    pub record_every: usize,
}

impl Default for StepperConfig {
    fn default() -> Self {
        StepperConfig {
            dt: crate::schedules::DEFAULT_DT,
            gamma: Some(1.0),
            record_every: 0,
        }
    }
}

impl StepperConfig {
    pub fn new(dt: f64) -> Self {
        StepperConfig {
            dt,
            ..Default::default()
        }
    }

    pub fn untamed(mut self) -> Self {
        self.gamma = None;
        self
    }

    pub fn with_record_every(mut self, every: usize) -> Self {
        self.record_every = every;
        self
    }

    /// Number of uniform steps covering `[0, horizon]`.
    pub fn steps(&self, horizon: f64) -> Result<usize> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidConfig(format!("dt must be positive, got {}", self.dt)));
        }
        if let Some(g) = self.gamma {
            if !(g >= 0.0 && g.is_finite()) {
                return Err(Error::InvalidConfig(format!("taming exponent must be >= 0, got {g}")));
            }
        }
        let n = (horizon / self.dt).round();
        if n < 1.0 || (n * self.dt - horizon).abs() > GRID_TOLERANCE * horizon {
            return Err(Error::InvalidConfig(format!(
                "dt = {} does not divide the horizon {horizon} into whole steps",
                self.dt
            )));
        }
        Ok(n as usize)
    }

    /// Grid index closest to `t`, for a grid of `steps` steps on `[0, horizon]`.
    pub fn grid_index(t: f64, horizon: f64, steps: usize) -> usize {
        ((t / horizon * steps as f64).round() as usize).min(steps)
    }
}

/// Per-channel factors `1 / (1 + dt ‖b_c‖^γ)`; exactly 1 for a zero channel.
pub fn taming_factors(drift: &Field, dt: f64, gamma: Option<f64>) -> Vec<f64> {
    (0..drift.channels())
        .map(|c| match gamma {
            None => 1.0,
            Some(g) => {
                let n = drift.channel_norm(c);
                if n == 0.0 {
                    1.0
                } else {
                    1.0 / (1.0 + dt * n.powf(g))
                }
            }
        })
        .collect()
}

/// `x + dt·tame(b) + sigma ⊙ dw`, with the divergence guard applied at time
/// `t_next`.
pub fn euler_update(
    x: &Field,
    drift: &Field,
    sigma: &Field,
    dw: &Field,
    dt: f64,
    gamma: Option<f64>,
    t_next: f64,
) -> Result<Field> {
    x.ensure_same_shape(drift)?;
    x.ensure_same_shape(sigma)?;
    x.ensure_same_shape(dw)?;
    let factors = taming_factors(drift, dt, gamma);
    let pixels = x.shape().pixels();
    let mut out = x.clone();
    let vals = out.values_mut();
    for (k, v) in vals.iter_mut().enumerate() {
        let f = factors[k / pixels];
        *v += dt * f * drift.values()[k] + sigma.values()[k] * dw.values()[k];
    }
    check_divergence(&out, t_next)?;
    Ok(out)
}

pub(crate) fn check_divergence(x: &Field, t: f64) -> Result<()> {
    let mut max_abs = 0.0f64;
    for &v in x.values() {
        if !v.is_finite() {
            return Err(Error::Divergence { t, max_abs: f64::INFINITY });
        }
        max_abs = max_abs.max(v.abs());
    }
    if max_abs > DIVERGENCE_THRESHOLD {
        return Err(Error::Divergence { t, max_abs });
    }
    Ok(())
}

/// One forward step from `t` to `t + dt`.
pub fn tamed_em_step<S: ForwardSde + ?Sized>(
    sde: &S,
    t: f64,
    x: &Field,
    dw: &Field,
    cfg: &StepperConfig,
) -> Result<Field> {
    let t_next = t + cfg.dt;
    if t < 0.0 || t_next > sde.horizon() * (1.0 + GRID_TOLERANCE) {
        return Err(Error::TimeOutOfRange {
            t: t_next,
            horizon: sde.horizon(),
        });
    }
    let b = sde.drift(t, x)?;
    let sigma = sde.diffusion_diagonal(t, x)?;
    euler_update(x, &b, &sigma, dw, cfg.dt, cfg.gamma, t_next)
}

/// A simulated path.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Field>,
    pub seed: u64,
    pub stream_id: u64,
}

impl Trajectory {
    pub fn final_state(&self) -> &Field {
        self.states.last().expect("trajectory holds the initial state")
    }

    /// Writes one snapshot per state plus `index.txt`.
    pub fn export(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut index = std::fs::File::create(dir.join("index.txt"))?;
        writeln!(index, "# time filename seed stream")?;
        for (k, (t, state)) in self.times.iter().zip(&self.states).enumerate() {
            let name = format!("state_{k:05}.asgm");
            save_snapshot(state, dir.join(&name))?;
            writeln!(index, "{t:.10} {name} {} {}", self.seed, self.stream_id)?;
        }
        Ok(())
    }
}

/// Simulates from 0 to the grid time nearest `t_end` and returns the path.
///
/// Passing `None` for the stream runs the noise-free flow.
pub fn simulate_until<S: ForwardSde + ?Sized>(
    sde: &S,
    x0: &Field,
    t_end: f64,
    cfg: &StepperConfig,
    mut rng: Option<&mut RngStream>,
) -> Result<Trajectory> {
    let horizon = sde.horizon();
    let n_total = cfg.steps(horizon)?;
    let dt = horizon / n_total as f64;
    let n = StepperConfig::grid_index(t_end, horizon, n_total);
    let step_cfg = StepperConfig { dt, ..*cfg };
    let (seed, stream_id) = rng
        .as_ref()
        .map(|r| (r.seed(), r.stream_id()))
        .unwrap_or((0, 0));
    let mut times = vec![0.0];
    let mut states = vec![x0.clone()];
    let mut x = x0.clone();
    let zero = Field::zeros(x0.shape());
    for k in 0..n {
        let t = k as f64 * dt;
        let dw = match rng.as_deref_mut() {
            Some(r) => brownian_increment(r, x.shape(), dt)?,
            None => zero.clone(),
        };
        x = tamed_em_step(sde, t, &x, &dw, &step_cfg)?;
        let k1 = k + 1;
        if k1 == n || (cfg.record_every > 0 && k1 % cfg.record_every == 0) {
            times.push(k1 as f64 * dt);
            states.push(x.clone());
        }
    }
    Ok(Trajectory {
        times,
        states,
        seed,
        stream_id,
    })
}

/// Simulates on the uniform grid over `[0, T]`.
pub fn simulate_forward<S: ForwardSde + ?Sized>(
    sde: &S,
    x0: &Field,
    cfg: &StepperConfig,
    rng: &mut RngStream,
) -> Result<Trajectory> {
    simulate_until(sde, x0, sde.horizon(), cfg, Some(rng))
}

/// Independent trajectories in parallel; path `k` uses stream `k`.
pub fn simulate_many<S: ForwardSde + ?Sized>(
    sde: &S,
    x0s: &[Field],
    cfg: &StepperConfig,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    x0s.par_iter()
        .enumerate()
        .map(|(k, x0)| simulate_forward(sde, x0, cfg, &mut RngStream::new(seed, k as u64)))
        .collect()
}

/// Endpoint `X_t` of many paths; path `k` uses stream `k`.
pub fn simulate_endpoints<S: ForwardSde + ?Sized>(
    sde: &S,
    x0s: &[Field],
    t_end: f64,
    cfg: &StepperConfig,
    seed: u64,
) -> Result<Vec<Field>> {
    let cfg = StepperConfig {
        record_every: 0,
        ..*cfg
    };
    x0s.par_iter()
        .enumerate()
        .map(|(k, x0)| {
            let mut rng = RngStream::new(seed, k as u64);
            let mut tr = simulate_until(sde, x0, t_end, &cfg, Some(&mut rng))?;
            Ok(tr.states.pop().expect("final state"))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{OrnsteinUhlenbeck, SdeInstance};
    use crate::schedules::{Anisotropy, Preset, Schedule, Transition};

    fn scalar(v: f64) -> Field {
        Field::filled(Shape::new(1, 1, 1), v)
    }

    #[test]
    fn brownian_variance() {
        let mut rng = RngStream::new(11, 0);
        let f = brownian_increment(&mut rng, Shape::new(1, 1000, 1000), 0.01).unwrap();
        let mean = f.mean();
        let var = f.values().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (f.values().len() - 1) as f64;
        assert!((0.0097..=0.0103).contains(&var), "{var}");
    }

    #[test]
    fn brownian_determinism_and_zero_dt() {
        let s = Shape::new(2, 3, 4);
        let a = brownian_increment(&mut RngStream::at(5, 2, 7), s, 0.1).unwrap();
        let b = brownian_increment(&mut RngStream::at(5, 2, 7), s, 0.1).unwrap();
        assert_eq!(a, b);
        let c = brownian_increment(&mut RngStream::at(5, 3, 7), s, 0.1).unwrap();
        assert_ne!(a, c);
        assert!(matches!(
            brownian_increment(&mut RngStream::new(0, 0), s, 0.0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn stream_counter_advances() {
        let mut r = RngStream::new(1, 0);
        let a = r.standard_normal(Shape::new(1, 2, 2));
        let b = r.standard_normal(Shape::new(1, 2, 2));
        assert_ne!(a, b);
        assert_eq!(r.counter(), 2);
        assert_eq!(RngStream::at(1, 0, 1).standard_normal(Shape::new(1, 2, 2)), b);
    }

    #[test]
    fn steps_validation() {
        assert_eq!(StepperConfig::new(0.01).steps(2.0).unwrap(), 200);
        assert_eq!(StepperConfig::new(0.005).steps(2.0).unwrap(), 400);
        assert!(StepperConfig::new(0.3).steps(2.0).is_err());
        assert!(StepperConfig::new(0.0).steps(2.0).is_err());
        assert!(StepperConfig::new(3.0).steps(2.0).is_err());
    }

    #[test]
    fn pure_noise_step() {
        let ou = OrnsteinUhlenbeck { rate: 0.0, sigma: 0.5, horizon: 1.0 };
        let x = scalar(0.2);
        let dw = scalar(0.3);
        let y = tamed_em_step(&ou, 0.0, &x, &dw, &StepperConfig::new(0.1)).unwrap();
        assert_eq!(y.values()[0], 0.2 + 0.5 * 0.3);
    }

    #[test]
    fn frozen_constant_state() {
        let s = Schedule {
            phi2: Transition::Constant(0.0),
            ..Preset::IsoHeat.schedule(5)
        };
        let inst = SdeInstance::new(s).unwrap();
        let x = Field::filled(Shape::new(1, 5, 5), -0.4);
        let dw = Field::filled(x.shape(), 0.7);
        assert_eq!(tamed_em_step(&inst, 0.3, &x, &dw, &StepperConfig::default()).unwrap(), x);
    }

    #[test]
    fn tamed_ou_step_matches_formula() {
        let a = 2.0;
        let ou = OrnsteinUhlenbeck { rate: a, sigma: 0.0, horizon: 1.0 };
        let dt = 1e-3;
        let x0 = 0.8;
        let y = tamed_em_step(&ou, 0.0, &scalar(x0), &scalar(0.0), &StepperConfig::new(dt)).unwrap();
        let classical = x0 - a * x0 * dt;
        let tamed = x0 - a * x0 * dt / (1.0 + dt * (a * x0).abs());
        assert!((y.values()[0] - tamed).abs() < 1e-15);
        let ratio = (y.values()[0] - x0) / (classical - x0);
        assert!((ratio - 1.0 / (1.0 + dt * a * x0)).abs() < 1e-12);
    }

    #[test]
    fn divergence_is_reported() {
        let ou = OrnsteinUhlenbeck { rate: 0.0, sigma: 1.0, horizon: 1.0 };
        let err = tamed_em_step(&ou, 0.0, &scalar(0.0), &scalar(2e6), &StepperConfig::new(0.5)).unwrap_err();
        assert!(matches!(err, Error::Divergence { t, .. } if t == 0.5));
    }

    #[test]
    fn frozen_dynamics_trajectory() {
        let s = Schedule {
            phi1: Transition::Constant(0.0),
            phi2: Transition::Constant(0.0),
            lambda1: Anisotropy::Isotropic,
            lambda2: Anisotropy::Isotropic,
            horizon: 1.0,
            correlation_length: 0.0,
        };
        let inst = SdeInstance::new(s).unwrap();
        let x0 = Field::from_fn(Shape::new(1, 4, 4), |_, a, b| (a * 4 + b) as f64 / 16.0);
        let cfg = StepperConfig::new(0.1).with_record_every(3);
        let tr = simulate_forward(&inst, &x0, &cfg, &mut RngStream::new(3, 0)).unwrap();
        assert_eq!(tr.times.len(), tr.states.len());
        assert_eq!(tr.times[0], 0.0);
        assert!((tr.times.last().unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(tr.times.len(), 5);
        assert!(tr.states.iter().all(|s| *s == x0));
    }

    #[test]
    fn untamed_step_is_classical() {
        let ou = OrnsteinUhlenbeck { rate: 3.0, sigma: 0.0, horizon: 1.0 };
        let cfg = StepperConfig::new(0.1).untamed();
        let y = tamed_em_step(&ou, 0.0, &scalar(1.0), &scalar(0.0), &cfg).unwrap();
        assert!((y.values()[0] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn simulate_many_is_thread_independent() {
        let inst = SdeInstance::from_preset(Preset::AnisoHeat, 6).unwrap();
        let x0s: Vec<Field> = (0..6)
            .map(|k| Field::from_fn(Shape::new(1, 6, 6), |_, a, b| ((a * b + k) % 5) as f64 * 0.3 - 0.6))
            .collect();
        let cfg = StepperConfig::new(0.05);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| simulate_many(&inst, &x0s, &cfg, 42)).unwrap();
        let b = four.install(|| simulate_many(&inst, &x0s, &cfg, 42)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[2].stream_id, 2);
    }

    #[test]
    fn export_writes_index() {
        let ou = OrnsteinUhlenbeck { rate: 1.0, sigma: 0.1, horizon: 0.2 };
        let tr = simulate_forward(&ou, &scalar(1.0), &StepperConfig::new(0.1).with_record_every(1), &mut RngStream::new(9, 4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        tr.export(dir.path()).unwrap();
        let index = std::fs::read_to_string(dir.path().join("index.txt")).unwrap();
        let lines: Vec<&str> = index.lines().skip(1).collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("0.1000000000 state_00001.asgm 9 4"));
        let last = crate::grid::load_snapshot(dir.path().join("state_00002.asgm")).unwrap();
        assert!((last.values()[0] - tr.final_state().values()[0]).abs() < 1e-6);
    }
}
