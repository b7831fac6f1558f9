//! The five end-to-end workflows.
//!
//! Each command writes its artifacts and a `manifest-<command>.txt` into the
//! configured output directory. Artifacts depend only on the configuration
//! and seed, never on the worker count.

use crate::config::{DataSource, RunConfig, ScoreSource};
use crate::data::{gaussian_mean, kmeans_quantize, shapes_image, GUIDE_STREAMS};
use crate::error::{CliError, Context, Result};
use asgm_core::evaluation::{
    edge_correlation, mmd_permutation_test, moments, montage, write_metrics_csv, MetricRecord, MontageRow,
};
use asgm_core::grid::{read_image, save_snapshot, write_image};
use asgm_core::integrator::simulate_until;
use asgm_core::schedules::{Anisotropy, Transition};
use asgm_core::score::{
    data_statistics, field_mean, pooled_covariance, prior_law, train_dsm, AnalyticScore, DsmTargets, GaussianLaw,
    LinearGaussianFlow, PriorConfig, ScoreFn, ScoreNetwork,
};
use asgm_core::{BackwardInstance, Error as CoreError, Field, RngStream, SdeInstance, Shape, SpdeClass, StepperConfig, Trajectory};
use nalgebra::DMatrix;
use rayon::prelude::*;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Gradient scale of the anisotropic rows of the forward montage.
pub const MONTAGE_LAMBDA1: f64 = 0.025;
pub const MONTAGE_LAMBDA2: f64 = 0.01;
/// Rate of the rows relaxing to isotropy.
pub const MONTAGE_BLOWUP_RATE: f64 = 0.5;

/// Number of covariance eigenvalues compared in sample metrics.
const COMPARED_EIGENVALUES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Forward,
    Train,
    Sample,
    Sdedit,
    CalibratePrior,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Forward => "forward",
            Command::Train => "train",
            Command::Sample => "sample",
            Command::Sdedit => "sdedit",
            Command::CalibratePrior => "calibrate-prior",
        }
    }
}

pub fn run(cmd: Command, cfg: &RunConfig) -> Result<()> {
    match cmd {
        Command::Forward => forward(cfg).map(drop),
        Command::Train => train(cfg).map(drop),
        Command::Sample => sample(cfg).map(drop),
        Command::Sdedit => sdedit(cfg).map(drop),
        Command::CalibratePrior => calibrate_prior(cfg).map(drop),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Config echo plus run facts; enough to re-run the command bit-identically.
fn write_manifest(cfg: &RunConfig, cmd: Command, facts: &[(&str, String)]) -> Result<PathBuf> {
    let mut text = String::new();
    let _ = writeln!(text, "# asgm {VERSION}");
    let _ = writeln!(text, "command={}", cmd.name());
    let _ = writeln!(text, "version={VERSION}");
    let _ = writeln!(text, "[config]");
    text.push_str(&cfg.echo());
    let _ = writeln!(text, "[run]");
    for (k, v) in facts {
        let _ = writeln!(text, "{k}={v}");
    }
    let path = cfg.out.join(format!("manifest-{}.txt", cmd.name()));
    write_text(&path, &text)?;
    Ok(path)
}

fn image_name(stem: &str, shape: Shape) -> String {
    format!("{stem}.{}", if shape.channels == 1 { "pgm" } else { "ppm" })
}

fn save_field(dir: &Path, stem: &str, x: &Field) -> Result<()> {
    write_image(x, dir.join(image_name(stem, x.shape()))).context(|| format!("writing {stem}"))?;
    save_snapshot(x, dir.join(format!("{stem}.asgm"))).context(|| format!("writing {stem}"))
}

/// One configuration of the forward montage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardRow {
    pub label: &'static str,
    pub lambda1: Anisotropy,
    pub lambda2: Anisotropy,
    pub drift: bool,
    pub noise: bool,
}

/// Drift and noise in isolation and combined, each with isotropic, fixed
/// anisotropic and relaxing-to-isotropic gradient scales.
pub fn forward_rows() -> Vec<ForwardRow> {
    let aniso1 = Anisotropy::Finite(Transition::Constant(MONTAGE_LAMBDA1));
    let aniso2 = Anisotropy::Finite(Transition::Constant(MONTAGE_LAMBDA2));
    let relax1 = Anisotropy::Finite(Transition::ExponentialBlowup {
        min: MONTAGE_LAMBDA1,
        rate: MONTAGE_BLOWUP_RATE,
    });
    let relax2 = Anisotropy::Finite(Transition::ExponentialBlowup {
        min: MONTAGE_LAMBDA2,
        rate: MONTAGE_BLOWUP_RATE,
    });
    let iso = Anisotropy::Isotropic;
    let row = |label, lambda1, lambda2, drift, noise| ForwardRow {
        label,
        lambda1,
        lambda2,
        drift,
        noise,
    };
    vec![
        row("iso-noise", iso, iso, false, true),
        row("aniso-noise", iso, aniso2, false, true),
        row("iso-drift", iso, iso, true, false),
        row("aniso-drift", aniso1, iso, true, false),
        row("aniso-drift-aniso-noise", aniso1, aniso2, true, true),
        row("relaxing-drift", relax1, iso, true, false),
        row("relaxing-noise", iso, relax2, false, true),
        row("relaxing-drift-relaxing-noise", relax1, relax2, true, true),
    ]
}

/// Montage columns as fractions of `T`.
pub const FORWARD_TIMES: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

pub struct ForwardReport {
    pub rows: Vec<MontageRow>,
    pub times: Vec<f64>,
    pub montage: PathBuf,
}

/// Simulates every [`forward_rows`] configuration from the input image (or
/// the checkerboard-with-disk) with stream `row` of the seed.
pub fn forward(cfg: &RunConfig) -> Result<ForwardReport> {
    let x0 = match &cfg.input {
        Some(p) => read_image(p).context(|| format!("reading {}", p.display()))?,
        None => crate::data::checkerboard_with_disk(cfg.image_shape()),
    };
    let shape = x0.shape();
    let base = cfg.schedule(shape);
    let horizon = base.horizon;
    let n = cfg.stepper.steps(horizon).map_err(|e| CliError::Config(e.to_string()))?;
    let every = if n % 4 == 0 { n / 4 } else { 1 };
    let indices: Vec<usize> = FORWARD_TIMES
        .iter()
        .map(|f| StepperConfig::grid_index(f * horizon, horizon, n))
        .collect();
    let times: Vec<f64> = indices.iter().map(|&k| k as f64 * horizon / n as f64).collect();
    let stepper = cfg.stepper.with_record_every(every);
    let paths = forward_rows()
        .into_par_iter()
        .enumerate()
        .map(|(r, row)| {
            let mut s = base;
            s.lambda1 = row.lambda1;
            s.lambda2 = row.lambda2;
            let inst = SdeInstance::new(s)
                .map_err(|e| CliError::Config(format!("row {}: {e}", row.label)))?
                .with_drift(row.drift)
                .with_noise(row.noise);
            let mut rng = RngStream::new(cfg.seed, r as u64);
            let traj = simulate_until(&inst, &x0, horizon, &stepper, Some(&mut rng))
                .context(|| format!("forward row {}", row.label))?;
            let states: Vec<Field> = indices.iter().map(|&k| traj.states[k / every].clone()).collect();
            Ok((row.label, states, traj.seed, traj.stream_id))
        })
        .collect::<Result<Vec<_>>>()?;
    create_dir(&cfg.out)?;
    let traj_dir = cfg.out.join("trajectories");
    let mut rows = Vec::with_capacity(paths.len());
    for (label, states, seed, stream_id) in paths {
        let tr = Trajectory {
            times: times.clone(),
            states: states.clone(),
            seed,
            stream_id,
        };
        tr.export(traj_dir.join(label)).context(|| format!("exporting row {label}"))?;
        rows.push(MontageRow {
            label: label.to_string(),
            tiles: states,
        });
    }
    let montage_path = cfg.out.join("montage.ppm");
    montage(&rows, &montage_path, cfg.out.join("montage.txt")).context(|| "writing montage".into())?;
    let times_text = times.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",");
    write_manifest(
        cfg,
        Command::Forward,
        &[
            ("input", cfg.input.as_ref().map_or("checkerboard-with-disk".into(), |p| p.display().to_string())),
            ("shape", shape.to_string()),
            ("times", times_text),
            ("row_streams", "row r uses stream r of seed".into()),
        ],
    )?;
    Ok(ForwardReport {
        rows,
        times,
        montage: montage_path,
    })
}

pub struct TrainReport {
    pub losses: Vec<f64>,
    pub network: ScoreNetwork,
    pub checkpoint: PathBuf,
}

pub fn train(cfg: &RunConfig) -> Result<TrainReport> {
    let data = cfg.require_training_set()?;
    let shape = data[0].shape();
    let inst = cfg.instance(shape)?;
    let trainer = cfg.trainer();
    let targets = DsmTargets::new(&inst, &data, trainer.time_sampling, &trainer.stepper)
        .context(|| "preparing training targets".into())?;
    let mut net_cfg = cfg.network;
    if cfg.data_stats {
        net_cfg.data_stats = Some(data_statistics(&data).context(|| "data statistics".into())?);
    }
    let s = inst.schedule();
    let mut net = ScoreNetwork::new(shape, s.phi2, s.horizon, net_cfg, cfg.seed).map_err(|e| CliError::Config(e.to_string()))?;
    let losses = train_dsm(&mut net, &targets, &trainer).context(|| "training".into())?;
    create_dir(&cfg.out)?;
    let checkpoint = cfg.out.join("checkpoint");
    net.save(&checkpoint).context(|| "writing checkpoint".into())?;
    let mut csv = String::from("iteration,loss\n");
    for (k, l) in losses.iter().enumerate() {
        let _ = writeln!(csv, "{k},{l:.10e}");
    }
    write_text(&cfg.out.join("loss.csv"), &csv)?;
    write_manifest(
        cfg,
        Command::Train,
        &[
            ("dataset_size", data.len().to_string()),
            ("shape", shape.to_string()),
            ("class", inst.class().to_string()),
            ("parameters", net.num_params().to_string()),
            ("init_seed", cfg.seed.to_string()),
            ("batch_seed", trainer.seed.to_string()),
        ],
    )?;
    Ok(TrainReport {
        losses,
        network: net,
        checkpoint,
    })
}

/// A score usable by the backward sampler.
pub enum ScoreModel {
    Analytic(AnalyticScore),
    Network(Box<ScoreNetwork>),
}

impl ScoreModel {
    pub fn as_score(&self) -> &dyn ScoreFn {
        match self {
            ScoreModel::Analytic(s) => s,
            ScoreModel::Network(n) => n.as_ref(),
        }
    }
}

/// Mean and per-channel covariance of the data law; exact for Gaussian data.
fn data_law(cfg: &RunConfig, data: &[Field]) -> Result<(Field, Option<DMatrix<f64>>)> {
    if let DataSource::Gaussian { variance, .. } = cfg.data {
        let shape = cfg.image_shape();
        return Ok((gaussian_mean(shape), Some(DMatrix::identity(shape.pixels(), shape.pixels()) * variance)));
    }
    if data.is_empty() {
        return Err(CliError::Dataset("the analytic score needs a dataset for the data law".into()));
    }
    let mean = field_mean(data);
    let cov = (data.len() >= 2).then(|| pooled_covariance(data, &mean));
    Ok((mean, cov))
}

pub fn load_score(cfg: &RunConfig, inst: &SdeInstance, shape: Shape, data: &[Field]) -> Result<ScoreModel> {
    match cfg.score {
        ScoreSource::Analytic => {
            let flow = LinearGaussianFlow::new(inst, shape).context(|| "analytic score".into())?;
            let (mean0, cov0) = data_law(cfg, data)?;
            Ok(ScoreModel::Analytic(AnalyticScore::new(Arc::new(flow), mean0, cov0)))
        }
        ScoreSource::Network => {
            let path = cfg
                .checkpoint
                .as_ref()
                .ok_or_else(|| CliError::Config("missing score source: set checkpoint=DIR or score=analytic".into()))?;
            let net = ScoreNetwork::load(path).context(|| format!("loading checkpoint {}", path.display()))?;
            if net.shape() != shape {
                return Err(CliError::Config(format!("checkpoint shape {} does not match data shape {shape}", net.shape())));
            }
            if net.horizon() != inst.schedule().horizon {
                return Err(CliError::Config(format!(
                    "checkpoint horizon {} does not match T = {}",
                    net.horizon(),
                    inst.schedule().horizon
                )));
            }
            Ok(ScoreModel::Network(Box::new(net)))
        }
    }
}

/// Prior from `prior.dir`, the exact marginal of the analytic score, the
/// closed form (linear) or a simulated fit (quasilinear).
fn load_prior(cfg: &RunConfig, inst: &SdeInstance, shape: Shape, data: &[Field], score: &ScoreModel) -> Result<(GaussianLaw, &'static str)> {
    if let Some(dir) = &cfg.prior_dir {
        let law = GaussianLaw::load(dir).context(|| format!("loading prior {}", dir.display()))?;
        if law.shape() != shape {
            return Err(CliError::Config(format!("prior shape {} does not match {shape}", law.shape())));
        }
        return Ok((law, "file"));
    }
    if let ScoreModel::Analytic(s) = score {
        let law = s.law_at(inst.schedule().horizon).context(|| "prior".into())?;
        return Ok(((*law).clone(), "exact-marginal"));
    }
    fit_prior(cfg, inst, shape, data)
}

fn fit_prior(cfg: &RunConfig, inst: &SdeInstance, shape: Shape, data: &[Field]) -> Result<(GaussianLaw, &'static str)> {
    let linear = inst.class() == SpdeClass::LinearAdditive;
    if !linear && data.is_empty() {
        return Err(CliError::Dataset("the simulated prior needs calibration images".into()));
    }
    let pc = PriorConfig {
        simulations: cfg.prior_simulations,
        stepper: StepperConfig {
            record_every: 0,
            ..cfg.stepper
        },
        seed: cfg.seed,
    };
    let law = prior_law(inst, shape, data, &pc).context(|| "prior".into())?;
    Ok((law, if linear { "closed-form" } else { "simulated" }))
}

pub struct SampleReport {
    pub samples: Vec<Field>,
    pub metrics: Vec<MetricRecord>,
}

impl SampleReport {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.metric == name).map(|m| m.value)
    }
}

fn sample_metrics(cfg: &RunConfig, samples: &[Field], reference: &[Field]) -> Result<Vec<MetricRecord>> {
    let n = samples.len();
    let rec = |metric: String, value: f64| MetricRecord {
        metric,
        value,
        n,
        seed: cfg.seed,
    };
    let mut out = Vec::new();
    if n < 2 || reference.len() < 2 {
        return Ok(out);
    }
    let ms = moments(samples).context(|| "sample moments".into())?;
    let mr = moments(reference).context(|| "reference moments".into())?;
    out.push(rec("mean_max_abs_error".into(), ms.mean.max_abs_diff(&mr.mean)));
    if let DataSource::Gaussian { .. } = cfg.data {
        out.push(rec("mean_max_abs_error_truth".into(), ms.mean.max_abs_diff(&gaussian_mean(ms.mean.shape()))));
    }
    for k in 0..COMPARED_EIGENVALUES.min(ms.top_eigenvalues.len()) {
        let (a, b) = (ms.top_eigenvalues[k], mr.top_eigenvalues[k]);
        out.push(rec(format!("eigenvalue_{k}"), a));
        out.push(rec(format!("reference_eigenvalue_{k}"), b));
        out.push(rec(format!("eigenvalue_rel_error_{k}"), if b > 0.0 { (a - b).abs() / b } else { f64::INFINITY }));
    }
    let test = mmd_permutation_test(samples, reference, cfg.permutations, cfg.seed).context(|| "MMD".into())?;
    out.push(rec("mmd2".into(), test.statistic));
    out.push(rec("mmd2_null_q95".into(), test.null_quantile_95));
    out.push(rec("mmd_p_value".into(), test.p_value));
    Ok(out)
}

pub fn sample(cfg: &RunConfig) -> Result<SampleReport> {
    let data = cfg.training_set()?;
    let shape = match (data.first(), &cfg.checkpoint, cfg.score) {
        (Some(x), _, _) => x.shape(),
        (None, Some(p), ScoreSource::Network) => ScoreNetwork::load(p).context(|| format!("loading checkpoint {}", p.display()))?.shape(),
        _ => cfg.image_shape(),
    };
    let inst = cfg.instance(shape)?;
    let score = load_score(cfg, &inst, shape, &data)?;
    let (prior, prior_kind) = load_prior(cfg, &inst, shape, &data, &score)?;
    let bi = BackwardInstance::new(&inst, score.as_score(), cfg.stepper).context(|| "backward sampler".into())?;
    let samples = bi.sample(&prior, cfg.n_samples, cfg.seed, &cfg.corrector).context(|| "sampling".into())?;
    let dir = cfg.out.join("samples");
    create_dir(&dir)?;
    for (j, x) in samples.iter().enumerate() {
        save_field(&dir, &format!("sample_{j:05}"), x)?;
    }
    let reference = cfg.reference_set();
    let metrics = sample_metrics(cfg, &samples, &reference)?;
    write_metrics_csv(&metrics, cfg.out.join("metrics.csv")).context(|| "writing metrics".into())?;
    write_manifest(
        cfg,
        Command::Sample,
        &[
            ("shape", shape.to_string()),
            ("class", inst.class().to_string()),
            ("prior", prior_kind.into()),
            ("predictor_steps", bi.steps().to_string()),
            ("sample_streams", "sample j uses stream j of seed".into()),
            ("reference_size", reference.len().to_string()),
        ],
    )?;
    Ok(SampleReport { samples, metrics })
}

pub struct SdeditReport {
    pub t0: f64,
    pub guides: Vec<Field>,
    pub outputs: Vec<Vec<Field>>,
    /// `edge_correlation(guide, output)` per guide and output; NaN when
    /// undefined.
    pub correlations: Vec<Vec<f64>>,
}

impl SdeditReport {
    /// Mean over all defined correlations.
    pub fn mean_correlation(&self) -> f64 {
        let v: Vec<f64> = self.correlations.iter().flatten().copied().filter(|c| c.is_finite()).collect();
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Seed of guide `i`; outputs of one guide use streams `0..n` of it.
pub fn guide_seed(seed: u64, i: usize) -> u64 {
    seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub fn sdedit(cfg: &RunConfig) -> Result<SdeditReport> {
    let raw: Vec<Field> = match &cfg.input {
        Some(p) => vec![read_image(p).context(|| format!("reading {}", p.display()))?],
        None => (0..cfg.sdedit.guides as u64)
            .map(|i| shapes_image(cfg.image_shape(), cfg.seed, GUIDE_STREAMS + i))
            .collect(),
    };
    if raw.is_empty() {
        return Err(CliError::Config("sdedit needs input=PATH or sdedit.guides > 0".into()));
    }
    let guides: Vec<Field> = raw
        .iter()
        .enumerate()
        .map(|(i, g)| match cfg.sdedit.kmeans {
            0 => g.clone(),
            k => kmeans_quantize(g, k, cfg.sdedit.kmeans_iterations, guide_seed(cfg.seed, i)),
        })
        .collect();
    let shape = guides[0].shape();
    let inst = cfg.instance(shape)?;
    let horizon = inst.schedule().horizon;
    let t0 = cfg.sdedit.t0.unwrap_or(horizon / 2.0);
    if !(t0 > 0.0 && t0 <= horizon) {
        return Err(CliError::Config(format!("sdedit.t0 must lie in (0, {horizon}], got {t0}")));
    }
    let data = match cfg.score {
        ScoreSource::Analytic => cfg.training_set()?,
        ScoreSource::Network => Vec::new(),
    };
    let score = load_score(cfg, &inst, shape, &data)?;
    let bi = BackwardInstance::new(&inst, score.as_score(), cfg.stepper).context(|| "backward sampler".into())?;
    let outputs: Vec<Vec<Field>> = guides
        .par_iter()
        .enumerate()
        .map(|(i, g)| {
            bi.sdedit(g, t0, cfg.n_samples, guide_seed(cfg.seed, i), &cfg.corrector)
                .context(|| format!("sdedit guide {i}"))
        })
        .collect::<Result<_>>()?;
    let correlations: Vec<Vec<f64>> = guides
        .iter()
        .zip(&outputs)
        .map(|(g, outs)| {
            outs.iter()
                .map(|y| match edge_correlation(g, y) {
                    Ok(v) => Ok(v),
                    Err(CoreError::UndefinedCorrelation) => Ok(f64::NAN),
                    Err(e) => Err(e),
                })
                .collect::<asgm_core::Result<Vec<f64>>>()
                .context(|| "edge correlation".into())
        })
        .collect::<Result<_>>()?;
    let dir = cfg.out.join("sdedit");
    create_dir(&dir)?;
    let mut csv = String::from("guide,output,edge_correlation\n");
    for (i, (g, outs)) in guides.iter().zip(&outputs).enumerate() {
        save_field(&dir, &format!("guide_{i:03}"), g)?;
        for (j, y) in outs.iter().enumerate() {
            save_field(&dir, &format!("output_{i:03}_{j:03}"), y)?;
            let _ = writeln!(csv, "{i},{j},{:.10e}", correlations[i][j]);
        }
    }
    write_text(&cfg.out.join("edge_correlation.csv"), &csv)?;
    let report = SdeditReport {
        t0,
        guides,
        outputs,
        correlations,
    };
    let count = report.correlations.iter().flatten().filter(|c| c.is_finite()).count();
    write_metrics_csv(
        &[MetricRecord {
            metric: "mean_edge_correlation".into(),
            value: report.mean_correlation(),
            n: count,
            seed: cfg.seed,
        }],
        cfg.out.join("sdedit_metrics.csv"),
    )
    .context(|| "writing metrics".into())?;
    let mode = if t0 >= horizon { "unconditional (t0 = T)" } else { "guided" };
    write_manifest(
        cfg,
        Command::Sdedit,
        &[
            ("t0", t0.to_string()),
            ("mode", mode.into()),
            ("guides", report.guides.len().to_string()),
            ("class", inst.class().to_string()),
            ("guide_seeds", "guide i uses seed ^ (i + 1)·0x9E3779B97F4A7C15".into()),
            ("edge_metric", "Pearson correlation of central-difference gradient magnitudes".into()),
        ],
    )?;
    Ok(report)
}

pub struct PriorReport {
    pub law: GaussianLaw,
    /// `closed-form` or `simulated`.
    pub branch: &'static str,
    pub dir: PathBuf,
}

pub fn calibrate_prior(cfg: &RunConfig) -> Result<PriorReport> {
    let data = cfg.training_set()?;
    let shape = data.first().map_or(cfg.image_shape(), Field::shape);
    let inst = cfg.instance(shape)?;
    let (law, branch) = fit_prior(cfg, &inst, shape, &data)?;
    create_dir(&cfg.out)?;
    let dir = cfg.out.join("prior");
    law.save(&dir).context(|| "writing prior".into())?;
    write_manifest(
        cfg,
        Command::CalibratePrior,
        &[
            ("branch", branch.into()),
            ("shape", shape.to_string()),
            ("calibration_images", data.len().to_string()),
            ("class", inst.class().to_string()),
        ],
    )?;
    Ok(PriorReport { law, branch, dir })
}
