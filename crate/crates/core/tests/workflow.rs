//! Forward simulation, exact laws and backward sampling composed through the
//! public API on a small iso-heat grid.

use asgm_core::grid::{load_snapshot, save_snapshot};
use asgm_core::integrator::simulate_endpoints;
use asgm_core::score::{field_mean, linear_law, AnalyticScore, GaussianLaw, LinearGaussianFlow};
use asgm_core::{BackwardInstance, CorrectorConfig, Field, Preset, SdeInstance, Shape, StepperConfig};
use nalgebra::DMatrix;
use std::sync::Arc;

const SIZE: usize = 4;

fn shape() -> Shape {
    Shape::new(1, SIZE, SIZE)
}

fn ramp() -> Field {
    Field::from_fn(shape(), |_, i, j| (i as f64 - j as f64) / SIZE as f64)
}

#[test]
fn forward_endpoints_match_the_exact_law() {
    let inst = SdeInstance::new(Preset::IsoHeat.schedule(SIZE)).unwrap();
    let horizon = inst.schedule().horizon;
    let x0 = ramp();
    let n = 4000;
    let cfg = StepperConfig::new(0.005).untamed();
    let ends = simulate_endpoints(&inst, &vec![x0.clone(); n], horizon, &cfg, 17).unwrap();
    let law = linear_law(&inst, &x0, horizon).unwrap();
    let mean = field_mean(&ends);
    let cov = law.covariance();
    for p in 0..shape().len() {
        let se = (cov[(p, p)] / n as f64).sqrt();
        let gap = (mean.values()[p] - law.mean().values()[p]).abs();
        assert!(gap < 5.0 * se + 1e-3, "pixel {p}: gap {gap}, standard error {se}");
    }
}

#[test]
fn simulated_endpoint_survives_a_snapshot() {
    let inst = SdeInstance::new(Preset::IsoHeat.schedule(SIZE)).unwrap();
    let ends = simulate_endpoints(&inst, &[ramp()], 0.5, &StepperConfig::new(0.01), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.asgm");
    save_snapshot(&ends[0], &path).unwrap();
    let rounded = ends[0].map(|v| v as f32 as f64);
    assert_eq!(load_snapshot(&path).unwrap(), rounded);
}

#[test]
fn backward_sampling_recovers_the_data_mean() {
    let inst = SdeInstance::new(Preset::IsoHeat.schedule(SIZE)).unwrap();
    let flow = Arc::new(LinearGaussianFlow::new(&inst, shape()).unwrap());
    let mean0 = ramp();
    let var0 = 0.05;
    let cov0 = DMatrix::identity(shape().len(), shape().len()) * var0;
    let score = AnalyticScore::new(flow.clone(), mean0.clone(), Some(cov0.clone()));
    let horizon = flow.horizon();
    let prior: GaussianLaw = flow.marginal_law(horizon, &mean0, &cov0).unwrap();
    let bi = BackwardInstance::new(&inst, &score, StepperConfig::new(0.01).untamed()).unwrap();
    let n = 2000;
    let samples = bi.sample(&prior, n, 41, &CorrectorConfig::disabled()).unwrap();
    let mean = field_mean(&samples);
    let tol = 5.0 * (var0 / n as f64).sqrt() + 0.02;
    assert!(mean.max_abs_diff(&mean0) < tol, "mean error {}", mean.max_abs_diff(&mean0));
    let spread = samples.iter().map(|x| (x.values()[0] - mean.values()[0]).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!((spread / var0 - 1.0).abs() < 0.25, "pixel 0 variance {spread}");
}
