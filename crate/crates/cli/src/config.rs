//! Strict `key=value` run configuration.
//!
//! Lines are `key=value`; blank lines and lines starting with `#` are
//! ignored. Keys are dotted (`phi1.kind=geometric`). Any unknown or repeated
//! key is an error. [`RunConfig::echo`] writes every resolved key, and parsing
//! the echo gives back an equal configuration.

use crate::error::{CliError, Result};
use asgm_core::reversal::CorrectorConfig;
use asgm_core::schedules::{Anisotropy, Preset, Schedule, Transition, DEFAULT_DT};
use asgm_core::score::{NetworkConfig, TimeSampling, TrainerConfig};
use asgm_core::{SdeInstance, Shape, StepperConfig};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

const SCALAR_KEYS: &[&str] = &[
    "preset",
    "T",
    "dt",
    "gamma",
    "record_every",
    "drift",
    "noise",
    "seed",
    "n_samples",
    "corrector.steps",
    "corrector.snr",
    "corrector.step",
    "image.size",
    "image.channels",
    "data.kind",
    "data.dir",
    "data.count",
    "data.variance",
    "input",
    "out",
    "checkpoint",
    "score",
    "prior.dir",
    "prior.simulations",
    "reference.count",
    "mmd.permutations",
    "train.iterations",
    "train.batch",
    "train.lr",
    "train.final_lr_fraction",
    "train.clip",
    "train.sampling",
    "net.hidden",
    "net.frequencies",
    "net.min_frequency",
    "net.max_frequency",
    "net.noise_scaled",
    "net.data_stats",
    "sdedit.t0",
    "sdedit.kmeans",
    "sdedit.kmeans_iterations",
    "sdedit.guides",
];

const COEFFICIENTS: [&str; 4] = ["phi1", "phi2", "lambda1", "lambda2"];
const COEFFICIENT_FIELDS: [&str; 6] = ["kind", "value", "min", "max", "exponent", "rate"];

/// Where training, calibration and reference images come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    None,
    /// All `.pgm`/`.ppm` files of a directory, in name order.
    Dir(PathBuf),
    /// Seeded synthetic shapes of `image.size` and `image.channels`.
    Shapes { count: usize },
    /// Draws from `Normal(m0, variance·I)` around a fixed smooth mean.
    Gaussian { count: usize, variance: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreSource {
    /// Exact Gaussian score of a linear instance started from the data law.
    Analytic,
    /// Trained network loaded from `checkpoint`.
    Network,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SdeditConfig {
    /// Defaults to `T/2`.
    pub t0: Option<f64>,
    /// Clusters of the stroke guide; 0 uses the guide image as is.
    pub kmeans: usize,
    pub kmeans_iterations: usize,
    /// Synthetic guides when no `input` is given.
    pub guides: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub phi1: Option<Transition>,
    pub phi2: Option<Transition>,
    pub lambda1: Option<Anisotropy>,
    pub lambda2: Option<Anisotropy>,
    pub horizon: Option<f64>,
    pub drift: bool,
    pub noise: bool,
    pub stepper: StepperConfig,
    pub seed: u64,
    pub n_samples: usize,
    pub corrector: CorrectorConfig,
    pub image_size: usize,
    pub image_channels: usize,
    pub data: DataSource,
    pub input: Option<PathBuf>,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub score: ScoreSource,
    pub prior_dir: Option<PathBuf>,
    pub prior_simulations: usize,
    pub reference_count: usize,
    pub permutations: usize,
    pub trainer: TrainerConfig,
    pub network: NetworkConfig,
    pub data_stats: bool,
    pub sdedit: SdeditConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: Preset::IsoHeat,
            phi1: None,
            phi2: None,
            lambda1: None,
            lambda2: None,
            horizon: None,
            drift: true,
            noise: true,
            stepper: StepperConfig::new(DEFAULT_DT),
            seed: 0,
            n_samples: 16,
            corrector: CorrectorConfig::default(),
            image_size: 32,
            image_channels: 1,
            data: DataSource::Shapes { count: 200 },
            input: None,
            out: PathBuf::from("out"),
            checkpoint: None,
            score: ScoreSource::Network,
            prior_dir: None,
            prior_simulations: 256,
            reference_count: 0,
            permutations: 200,
            trainer: TrainerConfig::default(),
            network: NetworkConfig::default(),
            data_stats: true,
            sdedit: SdeditConfig {
                t0: None,
                kmeans: 8,
                kmeans_iterations: 25,
                guides: 32,
            },
        }
    }
}

fn bad(key: &str, value: &str, why: &str) -> CliError {
    CliError::Config(format!("{key}={value}: {why}"))
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value, "not a valid number"))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, value, "expected true or false")),
    }
}

fn optional_num(key: &str, value: &str) -> Result<Option<f64>> {
    match value {
        "none" => Ok(None),
        _ => num(key, value).map(Some),
    }
}

fn fmt_optional(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |x| x.to_string())
}

/// Builds the coefficient named `prefix` from its dotted keys, if any are set.
fn coefficient(map: &BTreeMap<String, String>, prefix: &str) -> Result<Option<Anisotropy>> {
    let field = |f: &str| map.get(&format!("{prefix}.{f}"));
    if COEFFICIENT_FIELDS.iter().all(|f| field(f).is_none()) {
        return Ok(None);
    }
    let kind_key = format!("{prefix}.kind");
    let kind = field("kind").ok_or_else(|| CliError::Config(format!("{kind_key} is required when other {prefix}.* keys are set")))?;
    let allowed: &[&str] = match kind.as_str() {
        "isotropic" if prefix.starts_with("lambda") => &[],
        "constant" => &["value"],
        "geometric" => &["min", "max"],
        "power" => &["min", "max", "exponent"],
        "blowup" => &["min", "rate"],
        _ => return Err(bad(&kind_key, kind, "unknown transition kind")),
    };
    for f in COEFFICIENT_FIELDS.iter().skip(1) {
        if field(f).is_some() && !allowed.contains(f) {
            return Err(CliError::Config(format!("{prefix}.{f} does not apply to kind {kind}")));
        }
    }
    let get = |f: &str| -> Result<f64> {
        let key = format!("{prefix}.{f}");
        let v = map.get(&key).ok_or_else(|| CliError::Config(format!("{key} is required for kind {kind}")))?;
        num(&key, v)
    };
    let tr = match kind.as_str() {
        "isotropic" => return Ok(Some(Anisotropy::Isotropic)),
        "constant" => Transition::Constant(get("value")?),
        "geometric" => Transition::Geometric {
            min: get("min")?,
            max: get("max")?,
        },
        "power" => Transition::Power {
            min: get("min")?,
            max: get("max")?,
            exponent: get("exponent")?,
        },
        _ => Transition::ExponentialBlowup {
            min: get("min")?,
            rate: get("rate")?,
        },
    };
    tr.validate().map_err(|e| CliError::Config(format!("{prefix}: {e}")))?;
    Ok(Some(Anisotropy::Finite(tr)))
}

fn echo_transition(out: &mut String, prefix: &str, tr: &Transition) {
    let lines: Vec<(&str, f64)> = match *tr {
        Transition::Constant(v) => {
            let _ = writeln!(out, "{prefix}.kind=constant");
            vec![("value", v)]
        }
        Transition::Geometric { min, max } => {
            let _ = writeln!(out, "{prefix}.kind=geometric");
            vec![("min", min), ("max", max)]
        }
        Transition::Power { min, max, exponent } => {
            let _ = writeln!(out, "{prefix}.kind=power");
            vec![("min", min), ("max", max), ("exponent", exponent)]
        }
        Transition::ExponentialBlowup { min, rate } => {
            let _ = writeln!(out, "{prefix}.kind=blowup");
            vec![("min", min), ("rate", rate)]
        }
    };
    for (k, v) in lines {
        let _ = writeln!(out, "{prefix}.{k}={v}");
    }
}

impl FromStr for RunConfig {
    type Err = CliError;

    fn from_str(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key=value, got '{line}'", lineno + 1)))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            let known = SCALAR_KEYS.contains(&k.as_str())
                || k.split_once('.')
                    .is_some_and(|(p, f)| COEFFICIENTS.contains(&p) && COEFFICIENT_FIELDS.contains(&f));
            if !known {
                return Err(CliError::Config(format!("line {}: unknown key '{k}'", lineno + 1)));
            }
            if map.insert(k.clone(), v).is_some() {
                return Err(CliError::Config(format!("line {}: repeated key '{k}'", lineno + 1)));
            }
        }
        RunConfig::from_map(&map)
    }
}

impl RunConfig {
    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        text.parse()
    }

    fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        fn lookup<'a>(map: &'a BTreeMap<String, String>, k: &'a str) -> Option<(&'a str, &'a str)> {
            map.get(k).map(|v| (k, v.as_str()))
        }
        let get = |k: &'static str| lookup(map, k);
        if let Some((k, v)) = get("preset") {
            cfg.preset = v.parse().map_err(|_| bad(k, v, "unknown preset"))?;
        }
        cfg.phi1 = coefficient(map, "phi1")?.map(|a| finite_only("phi1", a)).transpose()?;
        cfg.phi2 = coefficient(map, "phi2")?.map(|a| finite_only("phi2", a)).transpose()?;
        cfg.lambda1 = coefficient(map, "lambda1")?;
        cfg.lambda2 = coefficient(map, "lambda2")?;
        if let Some((k, v)) = get("T") {
            cfg.horizon = Some(num(k, v)?);
        }
        if let Some((k, v)) = get("dt") {
            cfg.stepper.dt = num(k, v)?;
        }
        if let Some((k, v)) = get("gamma") {
            cfg.stepper.gamma = optional_num(k, v)?;
        }
        if let Some((k, v)) = get("record_every") {
            cfg.stepper.record_every = num(k, v)?;
        }
        if let Some((k, v)) = get("drift") {
            cfg.drift = flag(k, v)?;
        }
        if let Some((k, v)) = get("noise") {
            cfg.noise = flag(k, v)?;
        }
        if let Some((k, v)) = get("seed") {
            cfg.seed = num(k, v)?;
        }
        if let Some((k, v)) = get("n_samples") {
            cfg.n_samples = num(k, v)?;
        }
        if let Some((k, v)) = get("corrector.steps") {
            cfg.corrector.steps_per_iteration = num(k, v)?;
        }
        if let Some((k, v)) = get("corrector.snr") {
            cfg.corrector.snr = num(k, v)?;
        }
        if let Some((k, v)) = get("corrector.step") {
            cfg.corrector.fixed_step = optional_num(k, v)?;
        }
        if let Some((k, v)) = get("image.size") {
            cfg.image_size = num(k, v)?;
        }
        if let Some((k, v)) = get("image.channels") {
            cfg.image_channels = num(k, v)?;
        }
        let count = |default: usize| -> Result<usize> {
            match get("data.count") {
                Some((k, v)) => num(k, v),
                None => Ok(default),
            }
        };
        let kind = get("data.kind").map(|(_, v)| v).unwrap_or("shapes");
        cfg.data = match kind {
            "none" => DataSource::None,
            "dir" => DataSource::Dir(
                get("data.dir")
                    .map(|(_, v)| PathBuf::from(v))
                    .ok_or_else(|| CliError::Config("data.kind=dir needs data.dir".into()))?,
            ),
            "shapes" => DataSource::Shapes { count: count(200)? },
            "gaussian" => DataSource::Gaussian {
                count: count(2000)?,
                variance: match get("data.variance") {
                    Some((k, v)) => num(k, v)?,
                    None => 0.1,
                },
            },
            other => return Err(bad("data.kind", other, "expected none, dir, shapes or gaussian")),
        };
        for (key, applies) in [
            ("data.dir", kind == "dir"),
            ("data.count", kind == "shapes" || kind == "gaussian"),
            ("data.variance", kind == "gaussian"),
        ] {
            if map.contains_key(key) && !applies {
                return Err(CliError::Config(format!("{key} does not apply to data.kind={kind}")));
            }
        }
        cfg.input = get("input").map(|(_, v)| PathBuf::from(v));
        if let Some((_, v)) = get("out") {
            cfg.out = PathBuf::from(v);
        }
        cfg.checkpoint = get("checkpoint").map(|(_, v)| PathBuf::from(v));
        if let Some((k, v)) = get("score") {
            cfg.score = match v {
                "analytic" => ScoreSource::Analytic,
                "network" => ScoreSource::Network,
                _ => return Err(bad(k, v, "expected analytic or network")),
            };
        }
        cfg.prior_dir = get("prior.dir").map(|(_, v)| PathBuf::from(v));
        if let Some((k, v)) = get("prior.simulations") {
            cfg.prior_simulations = num(k, v)?;
        }
        if let Some((k, v)) = get("reference.count") {
            cfg.reference_count = num(k, v)?;
        }
        if let Some((k, v)) = get("mmd.permutations") {
            cfg.permutations = num(k, v)?;
        }
        let t = &mut cfg.trainer;
        if let Some((k, v)) = get("train.iterations") {
            t.iterations = num(k, v)?;
        }
        if let Some((k, v)) = get("train.batch") {
            t.batch_size = num(k, v)?;
        }
        if let Some((k, v)) = get("train.lr") {
            t.learning_rate = num(k, v)?;
        }
        if let Some((k, v)) = get("train.final_lr_fraction") {
            t.final_lr_fraction = num(k, v)?;
        }
        if let Some((k, v)) = get("train.clip") {
            t.grad_clip = optional_num(k, v)?;
        }
        if let Some((k, v)) = get("train.sampling") {
            t.time_sampling = match v {
                "grid" => TimeSampling::Grid,
                "continuous" => TimeSampling::Continuous,
                _ => return Err(bad(k, v, "expected grid or continuous")),
            };
        }
        let n = &mut cfg.network;
        if let Some((k, v)) = get("net.hidden") {
            n.hidden = num(k, v)?;
        }
        if let Some((k, v)) = get("net.frequencies") {
            n.frequencies = num(k, v)?;
        }
        if let Some((k, v)) = get("net.min_frequency") {
            n.min_frequency = num(k, v)?;
        }
        if let Some((k, v)) = get("net.max_frequency") {
            n.max_frequency = num(k, v)?;
        }
        if let Some((k, v)) = get("net.noise_scaled") {
            n.noise_scaled = flag(k, v)?;
        }
        if let Some((k, v)) = get("net.data_stats") {
            cfg.data_stats = flag(k, v)?;
        }
        if let Some((k, v)) = get("sdedit.t0") {
            cfg.sdedit.t0 = optional_num(k, v)?;
        }
        if let Some((k, v)) = get("sdedit.kmeans") {
            cfg.sdedit.kmeans = num(k, v)?;
        }
        if let Some((k, v)) = get("sdedit.kmeans_iterations") {
            cfg.sdedit.kmeans_iterations = num(k, v)?;
        }
        if let Some((k, v)) = get("sdedit.guides") {
            cfg.sdedit.guides = num(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks everything that does not depend on the data.
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: asgm_core::Error| CliError::Config(e.to_string());
        if !(self.stepper.dt > 0.0 && self.stepper.dt.is_finite()) {
            return Err(CliError::Config(format!("dt must be positive, got {}", self.stepper.dt)));
        }
        if let Some(g) = self.stepper.gamma {
            if !(g > 0.0 && g.is_finite()) {
                return Err(CliError::Config(format!("gamma must be positive or none, got {g}")));
            }
        }
        self.corrector.validate().map_err(cfg_err)?;
        if self.image_size < 3 {
            return Err(CliError::Config(format!("image.size must be at least 3, got {}", self.image_size)));
        }
        if self.image_channels != 1 && self.image_channels != 3 {
            return Err(CliError::Config(format!("image.channels must be 1 or 3, got {}", self.image_channels)));
        }
        if let DataSource::Gaussian { variance, .. } = self.data {
            if !(variance > 0.0 && variance.is_finite()) {
                return Err(CliError::Config(format!("data.variance must be positive, got {variance}")));
            }
        }
        if self.trainer.batch_size == 0 {
            return Err(CliError::Config("train.batch must be positive".into()));
        }
        if !(self.trainer.learning_rate > 0.0) {
            return Err(CliError::Config("train.lr must be positive".into()));
        }
        if self.sdedit.kmeans_iterations == 0 && self.sdedit.kmeans > 0 {
            return Err(CliError::Config("sdedit.kmeans_iterations must be positive".into()));
        }
        let probe = Shape::new(self.image_channels, self.image_size, self.image_size);
        self.schedule(probe).validate().map_err(cfg_err)?;
        Ok(())
    }

    /// The preset for `shape` with every explicit coefficient applied.
    pub fn schedule(&self, shape: Shape) -> Schedule {
        let mut s = self.preset.schedule(shape.height.max(shape.width));
        if let Some(p) = self.phi1 {
            s.phi1 = p;
        }
        if let Some(p) = self.phi2 {
            s.phi2 = p;
        }
        if let Some(l) = self.lambda1 {
            s.lambda1 = l;
        }
        if let Some(l) = self.lambda2 {
            s.lambda2 = l;
        }
        if let Some(h) = self.horizon {
            s.horizon = h;
        }
        s
    }

    pub fn instance(&self, shape: Shape) -> Result<SdeInstance> {
        let inst = SdeInstance::new(self.schedule(shape)).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(inst.with_drift(self.drift).with_noise(self.noise))
    }

    pub fn trainer(&self) -> TrainerConfig {
        TrainerConfig {
            stepper: self.stepper,
            seed: self.seed,
            ..self.trainer
        }
    }

    /// Every resolved key, one per line, in a fixed order.
    pub fn echo(&self) -> String {
        let mut o = String::new();
        let _ = writeln!(o, "preset={}", self.preset);
        for (name, tr) in [("phi1", self.phi1), ("phi2", self.phi2)] {
            if let Some(tr) = tr {
                echo_transition(&mut o, name, &tr);
            }
        }
        for (name, l) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            match l {
                Some(Anisotropy::Isotropic) => {
                    let _ = writeln!(o, "{name}.kind=isotropic");
                }
                Some(Anisotropy::Finite(tr)) => echo_transition(&mut o, name, &tr),
                None => {}
            }
        }
        if let Some(h) = self.horizon {
            let _ = writeln!(o, "T={h}");
        }
        let _ = writeln!(o, "dt={}", self.stepper.dt);
        let _ = writeln!(o, "gamma={}", fmt_optional(self.stepper.gamma));
        let _ = writeln!(o, "record_every={}", self.stepper.record_every);
        let _ = writeln!(o, "drift={}", self.drift);
        let _ = writeln!(o, "noise={}", self.noise);
        let _ = writeln!(o, "seed={}", self.seed);
        let _ = writeln!(o, "n_samples={}", self.n_samples);
        let _ = writeln!(o, "corrector.steps={}", self.corrector.steps_per_iteration);
        let _ = writeln!(o, "corrector.snr={}", self.corrector.snr);
        let _ = writeln!(o, "corrector.step={}", fmt_optional(self.corrector.fixed_step));
        let _ = writeln!(o, "image.size={}", self.image_size);
        let _ = writeln!(o, "image.channels={}", self.image_channels);
        match &self.data {
            DataSource::None => {
                let _ = writeln!(o, "data.kind=none");
            }
            DataSource::Dir(p) => {
                let _ = writeln!(o, "data.kind=dir\ndata.dir={}", p.display());
            }
            DataSource::Shapes { count } => {
                let _ = writeln!(o, "data.kind=shapes\ndata.count={count}");
            }
            DataSource::Gaussian { count, variance } => {
                let _ = writeln!(o, "data.kind=gaussian\ndata.count={count}\ndata.variance={variance}");
            }
        }
        if let Some(p) = &self.input {
            let _ = writeln!(o, "input={}", p.display());
        }
        let _ = writeln!(o, "out={}", self.out.display());
        if let Some(p) = &self.checkpoint {
            let _ = writeln!(o, "checkpoint={}", p.display());
        }
        let score = match self.score {
            ScoreSource::Analytic => "analytic",
            ScoreSource::Network => "network",
        };
        let _ = writeln!(o, "score={score}");
        if let Some(p) = &self.prior_dir {
            let _ = writeln!(o, "prior.dir={}", p.display());
        }
        let _ = writeln!(o, "prior.simulations={}", self.prior_simulations);
        let _ = writeln!(o, "reference.count={}", self.reference_count);
        let _ = writeln!(o, "mmd.permutations={}", self.permutations);
        let t = &self.trainer;
        let _ = writeln!(o, "train.iterations={}", t.iterations);
        let _ = writeln!(o, "train.batch={}", t.batch_size);
        let _ = writeln!(o, "train.lr={}", t.learning_rate);
        let _ = writeln!(o, "train.final_lr_fraction={}", t.final_lr_fraction);
        let _ = writeln!(o, "train.clip={}", fmt_optional(t.grad_clip));
        let sampling = match t.time_sampling {
            TimeSampling::Grid => "grid",
            TimeSampling::Continuous => "continuous",
        };
        let _ = writeln!(o, "train.sampling={sampling}");
        let n = &self.network;
        let _ = writeln!(o, "net.hidden={}", n.hidden);
        let _ = writeln!(o, "net.frequencies={}", n.frequencies);
        let _ = writeln!(o, "net.min_frequency={}", n.min_frequency);
        let _ = writeln!(o, "net.max_frequency={}", n.max_frequency);
        let _ = writeln!(o, "net.noise_scaled={}", n.noise_scaled);
        let _ = writeln!(o, "net.data_stats={}", self.data_stats);
        let _ = writeln!(o, "sdedit.t0={}", fmt_optional(self.sdedit.t0));
        let _ = writeln!(o, "sdedit.kmeans={}", self.sdedit.kmeans);
        let _ = writeln!(o, "sdedit.kmeans_iterations={}", self.sdedit.kmeans_iterations);
        let _ = writeln!(o, "sdedit.guides={}", self.sdedit.guides);
        o
    }
}

fn finite_only(prefix: &str, a: Anisotropy) -> Result<Transition> {
    match a {
        Anisotropy::Finite(tr) => Ok(tr),
        Anisotropy::Isotropic => Err(CliError::Config(format!("{prefix}.kind=isotropic is only valid for lambda"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!("".parse::<RunConfig>().unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_key_is_rejected() {
        let e = "seed=1\nphi1.colour=3".parse::<RunConfig>().unwrap_err();
        assert!(matches!(e, CliError::Config(ref m) if m.contains("phi1.colour")), "{e}");
        assert!("bogus=1".parse::<RunConfig>().is_err());
    }

    #[test]
    fn repeated_key_is_rejected() {
        assert!("seed=1\nseed=2".parse::<RunConfig>().is_err());
    }

    #[test]
    fn dotted_schedule_keys() {
        let cfg: RunConfig = "preset=aniso-heat\nphi1.kind=geometric\nphi1.min=0.25\nphi1.max=8\nlambda1.kind=constant\nlambda1.value=0.05\nT=1.5"
            .parse()
            .unwrap();
        let s = cfg.schedule(Shape::new(1, 8, 8));
        assert_eq!(s.phi1, Transition::Geometric { min: 0.25, max: 8.0 });
        assert_eq!(s.lambda1, Anisotropy::Finite(Transition::Constant(0.05)));
        assert_eq!(s.horizon, 1.5);
        assert_eq!(s.phi2, Preset::AnisoHeat.schedule(8).phi2);
    }

    #[test]
    fn incomplete_or_mismatched_coefficients_fail() {
        assert!("phi1.min=0.5".parse::<RunConfig>().is_err());
        assert!("phi1.kind=geometric\nphi1.min=0.5".parse::<RunConfig>().is_err());
        assert!("phi1.kind=constant\nphi1.value=1\nphi1.rate=2".parse::<RunConfig>().is_err());
        assert!("phi1.kind=isotropic".parse::<RunConfig>().is_err());
        assert!("phi1.kind=geometric\nphi1.min=2\nphi1.max=1".parse::<RunConfig>().is_err());
        assert!("lambda2.kind=isotropic".parse::<RunConfig>().is_ok());
    }

    #[test]
    fn invalid_values_fail() {
        for text in [
            "dt=0",
            "dt=abc",
            "drift=yes",
            "image.channels=2",
            "data.kind=dir",
            "data.kind=none\ndata.count=3",
            "corrector.snr=-1",
            "score=exact",
            "preset=unknown",
            "no equals sign",
        ] {
            assert!(text.parse::<RunConfig>().is_err(), "{text}");
        }
    }

    #[test]
    fn echo_round_trips() {
        let text = "preset=ve-noise\nphi2.kind=power\nphi2.min=0\nphi2.max=1.5\nphi2.exponent=2\nlambda2.kind=blowup\nlambda2.min=0.01\nlambda2.rate=0.5\n\
                    gamma=none\nseed=7\ndata.kind=gaussian\ndata.variance=0.2\ncorrector.step=0.001\ntrain.clip=none\nsdedit.t0=0.3\ninput=a b.pgm";
        let cfg: RunConfig = text.parse().unwrap();
        let again: RunConfig = cfg.echo().parse().unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.echo(), again.echo());
        let d: RunConfig = RunConfig::default().echo().parse().unwrap();
        assert_eq!(d, RunConfig::default());
    }
}
