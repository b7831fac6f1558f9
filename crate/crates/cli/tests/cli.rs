//! End-to-end runs of the `asgm` binary and the workflow functions on tiny
//! configurations.

use asgm_cli::{pipelines, RunConfig};
use asgm_core::score::ScoreNetwork;
use std::path::Path;
use std::process::Command;

fn asgm(dir: &Path, cmd: &str, config: &str) -> std::process::Output {
    let cfg = dir.join(format!("{cmd}.cfg"));
    std::fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_asgm"))
        .arg(cmd)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap()
}

fn config(text: &str) -> RunConfig {
    text.parse().unwrap()
}

#[test]
fn unknown_key_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = asgm(dir.path(), "forward", "image.size=8\nnot.a.key=1\n");
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not.a.key"));
}

#[test]
fn missing_data_dir_exits_with_io_code() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let out = asgm(
        dir.path(),
        "train",
        &format!("image.size=8\ndata.kind=dir\ndata.dir={}\ntrain.iterations=1\n", missing.display()),
    );
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn forward_writes_montage_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = asgm(dir.path(), "forward", "image.size=8\ndt=0.05\nseed=3\n");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let root = dir.path().join("out");
    assert!(root.join("montage.ppm").is_file());
    assert!(root.join("manifest-forward.txt").is_file());
    assert!(root.join("trajectories").is_dir());
}

#[test]
fn frozen_dynamics_give_identical_tiles() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(&format!(
        "image.size=8\ndt=0.05\nphi1.kind=constant\nphi1.value=0\nphi2.kind=constant\nphi2.value=0\nout={}\n",
        dir.path().display()
    ));
    let report = pipelines::forward(&cfg).unwrap();
    let x0 = asgm_cli::data::checkerboard_with_disk(cfg.image_shape());
    for row in &report.rows {
        for tile in &row.tiles {
            assert_eq!(tile, &x0, "row {}", row.label);
        }
    }
}

#[test]
fn zero_iterations_save_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(&format!(
        "image.size=8\ndata.count=8\ntrain.iterations=0\nnet.hidden=8\nseed=12\nout={}\n",
        dir.path().display()
    ));
    let report = pipelines::train(&cfg).unwrap();
    assert!(report.losses.is_empty());
    let loaded = ScoreNetwork::load(&report.checkpoint).unwrap();
    assert_eq!(loaded.params(), report.network.params());

    let shape = loaded.shape();
    let inst = cfg.instance(shape).unwrap();
    let s = inst.schedule();
    let mut net_cfg = cfg.network;
    let data = cfg.training_set().unwrap();
    net_cfg.data_stats = Some(asgm_core::score::data_statistics(&data).unwrap());
    let fresh = ScoreNetwork::new(shape, s.phi2, s.horizon, net_cfg, 12).unwrap();
    assert_eq!(fresh.params(), loaded.params());
}

#[test]
fn train_then_sample_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let train = asgm(
        dir.path(),
        "train",
        "image.size=8\ndata.count=16\ntrain.iterations=20\ntrain.batch=4\nnet.hidden=16\nseed=4\n",
    );
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    let root = dir.path().join("out");
    let loss = std::fs::read_to_string(root.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 21);

    let checkpoint = dir.path().join("checkpoint");
    std::fs::rename(root.join("checkpoint"), &checkpoint).unwrap();
    let sample = asgm(
        dir.path(),
        "sample",
        &format!(
            "image.size=8\ndata.count=16\ndt=0.05\nn_samples=3\ncorrector.steps=0\ncheckpoint={}\nseed=4\n",
            checkpoint.display()
        ),
    );
    assert!(sample.status.success(), "{}", String::from_utf8_lossy(&sample.stderr));
    let files = std::fs::read_dir(root.join("samples")).unwrap().count();
    assert!(files >= 3);
}

#[test]
fn analytic_sampling_without_corrector_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "image.size=4\ndata.kind=gaussian\ndata.count=1\nscore=analytic\ndt=0.05\nn_samples=4\ncorrector.steps=0\nseed=9\nout={}\n",
        dir.path().display()
    );
    let a = pipelines::sample(&config(&text)).unwrap();
    let b = pipelines::sample(&config(&text)).unwrap();
    assert_eq!(a.samples.len(), 4);
    assert_eq!(a.samples, b.samples);
    assert!(a.samples.iter().all(|x| x.values().iter().all(|v| v.is_finite())));
}

#[test]
fn sdedit_with_single_cluster_guide() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(&format!(
        "preset=iso-heat\nimage.size=8\ndata.kind=gaussian\ndata.count=1\nscore=analytic\ndt=0.05\n\
         sdedit.guides=2\nsdedit.kmeans=1\nn_samples=2\nseed=21\nout={}\n",
        dir.path().display()
    ));
    let report = pipelines::sdedit(&cfg).unwrap();
    assert_eq!(report.guides.len(), 2);
    for guide in &report.guides {
        let first = guide.values()[0];
        assert!(guide.values().iter().all(|&v| v == first), "k=1 guide is constant");
    }
    assert_eq!(report.outputs.len(), 2);
    assert!(report.outputs.iter().all(|o| o.len() == 2));
    assert!((report.t0 - cfg.schedule(report.guides[0].shape()).horizon / 2.0).abs() < 1e-12);
}

#[test]
fn analytic_score_needs_a_linear_instance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(&format!(
        "preset=aniso-heat\nimage.size=4\ndata.kind=gaussian\ndata.count=1\nscore=analytic\ndt=0.05\nn_samples=1\nout={}\n",
        dir.path().display()
    ));
    let err = pipelines::sample(&cfg).err().expect("aniso-heat is not linear");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn linear_prior_uses_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(&format!(
        "image.size=4\ndata.kind=gaussian\ndata.count=8\nseed=2\nout={}\n",
        dir.path().display()
    ));
    let report = pipelines::calibrate_prior(&cfg).unwrap();
    assert_eq!(report.branch, "closed-form");
    assert!(report.dir.is_dir());
    let quasi = config(&format!(
        "preset=aniso-heat\nimage.size=4\ndata.count=4\nprior.simulations=256\ndt=0.05\nseed=2\nout={}\n",
        dir.path().join("q").display()
    ));
    assert_eq!(pipelines::calibrate_prior(&quasi).unwrap().branch, "simulated");
}
