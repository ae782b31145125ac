mod common;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{rows, trained};
use tempflow::autodiff::{load_checkpoint, load_for, save_checkpoint, Activation, Network};
use tempflow::flowmodel::ode_batch;
use tempflow::grpo::METRICS_HEADER;
use tempflow::harness::{
    cmd_analyze, cmd_pretrain, cmd_train, expand_presets, AnalysisKind, ExperimentConfig, RunManifest, MANIFEST_FILE,
};
use tempflow::rng::normal_mat;
use tempflow::Error;

fn small(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml_str(&format!(
        r#"
seed = {seed}
data.kind = "two_gaussians"
reward.kind = "mode_density"
reward.mean = [3.0, 0.0]
net.hidden = [16, 16]
pretrain.steps = 60
pretrain.batch = 64
run.iterations = 4
grpo.eval_samples = 64
grpo.num_groups = 3
analysis.conditions = 4
analysis.seeds = 2
analysis.samples = 1000
"#
    ))
    .unwrap();
    cfg.run.checkpoint_every = 2;
    cfg
}

/// Every file under `dir` except the manifest itself.
fn listing(dir: &Path) -> BTreeSet<String> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n != MANIFEST_FILE)
        .collect()
}

fn manifest(dir: &Path) -> RunManifest {
    serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE)).unwrap()).unwrap()
}

fn assert_manifest_complete(dir: &Path, cfg: &ExperimentConfig) {
    let man = manifest(dir);
    assert_eq!(man.config_hash, cfg.hash());
    let listed: BTreeSet<String> = man.files.iter().map(|f| f.path.clone()).collect();
    assert_eq!(listed, listing(dir));
    for f in &man.files {
        assert_eq!(fs::metadata(dir.join(&f.path)).unwrap().len(), f.bytes);
    }
}

#[test]
fn default_pretrain_is_reproducible_and_bimodal() {
    let m = trained();
    let dir = tempfile::tempdir().unwrap();
    let out = cmd_pretrain(&m.cfg, dir.path()).unwrap();
    let (net, params) = load_checkpoint(&out.checkpoint).unwrap();
    assert_eq!(net, m.net);
    assert_eq!(params, m.params);
    assert_manifest_complete(dir.path(), &m.cfg);

    let x_t = normal_mat(&mut ChaCha8Rng::seed_from_u64(31), 10_000, 2);
    let xs = rows(&ode_batch(&net, &params, &x_t, &m.cfg.schedule().unwrap(), 0).unwrap());
    let right = xs
        .iter()
        .filter(|x| m.cfg.data.assign_mode(x) == m.cfg.data.assign_mode(&[3.0, 0.0]))
        .count();
    assert!((right as f64 / 1e4 - 0.5).abs() <= 0.05);
}

#[test]
fn same_seed_gives_identical_outputs() {
    let cfg = small(5);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let pa = cmd_pretrain(&cfg, a.path()).unwrap();
    let pb = cmd_pretrain(&cfg, b.path()).unwrap();
    assert_eq!(fs::read(&pa.loss_csv).unwrap(), fs::read(&pb.loss_csv).unwrap());
    let loss = fs::read_to_string(&pa.loss_csv).unwrap();
    assert!(loss.starts_with("step,loss\n"));
    assert_eq!(loss.lines().count(), 61);

    let ta = cmd_train(&cfg, &pa.checkpoint, &a.path().join("train")).unwrap();
    let tb = cmd_train(&cfg, &pa.checkpoint, &b.path().join("train")).unwrap();
    assert_eq!(fs::read(&ta.metrics_csv).unwrap(), fs::read(&tb.metrics_csv).unwrap());
    assert_eq!(
        fs::read(&ta.final_checkpoint).unwrap(),
        fs::read(&tb.final_checkpoint).unwrap()
    );
    assert_manifest_complete(&a.path().join("train"), &cfg);
    let names = listing(&a.path().join("train"));
    assert!(names.contains("iter_00002.ckpt") && names.contains("iter_00004.ckpt"));

    let other = cmd_pretrain(&small(6), &a.path().join("other")).unwrap();
    assert_ne!(fs::read(&other.loss_csv).unwrap(), fs::read(&pa.loss_csv).unwrap());
}

#[test]
fn zero_iterations_leave_params_unchanged() {
    let mut cfg = small(7);
    cfg.run.iterations = 0;
    let dir = tempfile::tempdir().unwrap();
    let pre = cmd_pretrain(&cfg, dir.path()).unwrap();
    let out = cmd_train(&cfg, &pre.checkpoint, &dir.path().join("t")).unwrap();
    assert_eq!(
        fs::read_to_string(&out.metrics_csv).unwrap(),
        format!("{METRICS_HEADER}\n")
    );
    let net = cfg.network().unwrap();
    assert_eq!(
        load_for(&out.final_checkpoint, &net).unwrap(),
        load_for(&pre.checkpoint, &net).unwrap()
    );
    assert_eq!(out.initial_reward, out.final_reward);
    let summary = fs::read_to_string(&out.summary).unwrap();
    assert!(summary.contains("mean_reward_before") && summary.contains("mean_reward_after"));
}

#[test]
fn incompatible_checkpoint_is_a_load_error() {
    let cfg = small(8);
    let dir = tempfile::tempdir().unwrap();
    let other = Network::new(2, vec![5], Activation::Tanh, 1).unwrap();
    let path = dir.path().join("other.ckpt");
    save_checkpoint(&path, &other, &other.zero_params()).unwrap();
    let err = cmd_train(&cfg, &path, &dir.path().join("t")).err().unwrap();
    assert!(matches!(err, Error::Load(_)));
    assert_eq!(err.exit_code(), 4);
    let err = cmd_analyze(
        &cfg,
        &dir.path().join("missing.ckpt"),
        AnalysisKind::StdVsNoise,
        dir.path(),
    )
    .err()
    .unwrap();
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn presets_differ_only_in_grpo_modes() {
    let base = small(9);
    let a = expand_presets(&base).unwrap();
    let b = expand_presets(&base).unwrap();
    assert_eq!(a, b);
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["flow-grpo", "flow-grpo-fixed", "branch", "tempflow"]);
    for (_, c) in &a {
        let mut g = c.grpo.clone();
        g.adv_mode = base.grpo.adv_mode;
        g.weight_mode = base.grpo.weight_mode;
        g.rollout_mode = base.grpo.rollout_mode;
        assert_eq!(g, base.grpo);
        assert_eq!(
            ExperimentConfig {
                grpo: base.grpo.clone(),
                ..c.clone()
            },
            base
        );
    }
    let hashes: BTreeSet<String> = a.iter().map(|(_, c)| c.hash()).collect();
    assert_eq!(hashes.len(), 4);
}

#[test]
fn analyses_write_reports() {
    let m = trained();
    let mut cfg = m.cfg.clone();
    cfg.analysis.conditions = 10;
    cfg.analysis.seeds = 2;
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.ckpt");
    save_checkpoint(&ckpt, &m.net, &m.params).unwrap();

    let out = dir.path().join("variance");
    let rep = cmd_analyze(&cfg, &ckpt, AnalysisKind::VarianceProfile, &out).unwrap();
    let csv = fs::read_to_string(out.join("variance_profile.csv")).unwrap();
    assert_eq!(csv.lines().count(), 9);
    let std: Vec<f64> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(3).unwrap().parse().unwrap())
        .collect();
    assert!(std[0] > std[7]);
    assert!(rep.checks.iter().all(|c| c.pass));
    assert!(fs::read_to_string(out.join("summary.txt")).unwrap().contains("PASS"));
    assert_manifest_complete(&out, &cfg);

    let out = dir.path().join("scale");
    cmd_analyze(&cfg, &ckpt, AnalysisKind::ScaleTerms, &out).unwrap();
    for shift in ["1", "3"] {
        let csv = fs::read_to_string(out.join(format!("scale_terms_shift_{shift}.csv"))).unwrap();
        assert_eq!(csv.lines().count(), 9);
        let rew: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(4).unwrap()).collect();
        if shift == "1" {
            assert!(rew.iter().all(|v| *v == rew[0]));
        } else {
            assert!(rew.iter().any(|v| *v != rew[0]));
        }
    }

    let out = dir.path().join("direction");
    let rep = cmd_analyze(&cfg, &ckpt, AnalysisKind::DirectionCheck, &out).unwrap();
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.contains("cosine_step_0") && summary.contains("norm_step_0"));
    assert!(rep.checks.iter().all(|c| c.pass));

    let out = dir.path().join("std");
    let rep = cmd_analyze(&cfg, &ckpt, AnalysisKind::StdVsNoise, &out).unwrap();
    assert!(rep.checks[0].value > 0.8);
}

#[test]
fn config_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    fs::write(&path, "seed = 1\ndata.kind = \"two_gaussians\"\n").unwrap();
    match ExperimentConfig::load(&path) {
        Err(Error::Config { key, .. }) => assert_eq!(key, "reward.kind"),
        other => panic!("{other:?}"),
    }
    let err = ExperimentConfig::load(&dir.path().join("nope.toml")).unwrap_err();
    assert_eq!(err.exit_code(), 4);
}
