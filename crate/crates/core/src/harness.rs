//! Experiment configuration, run manifests and the pretrain / train /
//! analyze entry points behind the command-line tool.
//!
//! Configs are flat TOML with dotted keys (`grpo.group_size = 8`); table
//! headers are accepted and flattened the same way. Unknown keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{
    coefficient_of_variation, direction_check, early_late_ratio, seed_averaged_scales, std_vs_noise_report,
    summary_text, Check, ScaleProfile, DIRECTION_NOISE_FACTOR,
};
use crate::autodiff::{load_for, save_checkpoint, Activation, Network, ParamSet};
use crate::branching::reward_std_profile;
use crate::error::{Error, Result};
use crate::flowmodel::{cfm_pretrain, fmt_f64, ode_sample, DataSpec, PretrainConfig, PretrainResult};
use crate::grpo::{metrics_csv, train_with_callback, AdvMode, GrpoConfig, RolloutMode, WeightMode, PRESETS};
use crate::rewards::{Reward, RewardSpec};
use crate::rng::{normal_vec, SeedTree};
use crate::stats::pearson;
use crate::stochastic::{NoiseSchedule, ScheduleConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub time_freqs: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            hidden: vec![64, 64],
            activation: Activation::Silu,
            time_freqs: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub iterations: usize,
    /// 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            iterations: 300,
            checkpoint_every: 0,
            output_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub conditions: usize,
    pub group_size: usize,
    pub samples: usize,
    pub noise_factor: f64,
    pub seeds: usize,
    pub shifts: Vec<f64>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            conditions: 50,
            group_size: 24,
            samples: 10_000,
            noise_factor: DIRECTION_NOISE_FACTOR,
            seeds: 20,
            shifts: vec![1.0, 3.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataSpec,
    pub net: NetConfig,
    pub schedule: ScheduleConfig,
    pub pretrain: PretrainConfig,
    pub grpo: GrpoConfig,
    pub reward: RewardSpec,
    pub run: RunConfig,
    pub analysis: AnalysisConfig,
}

pub const REQUIRED_KEYS: [&str; 3] = ["seed", "data.kind", "reward.kind"];

/// Two Gaussians at `(+-3, 0)` with std 0.3, density reward on the right mode.
impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            data: DataSpec::two_gaussians(3.0, 0.3),
            net: NetConfig::default(),
            schedule: ScheduleConfig::default(),
            pretrain: PretrainConfig::default(),
            grpo: GrpoConfig::default(),
            reward: RewardSpec::ModeDensity {
                mean: vec![3.0, 0.0],
                cov: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            },
            run: RunConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, toml::Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

fn as_f64(key: &str, v: &toml::Value) -> Result<f64> {
    match v {
        toml::Value::Float(f) => Ok(*f),
        toml::Value::Integer(i) => Ok(*i as f64),
        _ => Err(Error::config(key, "expected a number")),
    }
}

fn as_usize(key: &str, v: &toml::Value) -> Result<usize> {
    match v {
        toml::Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        _ => Err(Error::config(key, "expected a non-negative integer")),
    }
}

fn as_str<'a>(key: &str, v: &'a toml::Value) -> Result<&'a str> {
    v.as_str().ok_or_else(|| Error::config(key, "expected a string"))
}

fn as_bool(key: &str, v: &toml::Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| Error::config(key, "expected true or false"))
}

fn as_vec(key: &str, v: &toml::Value) -> Result<Vec<f64>> {
    v.as_array()
        .ok_or_else(|| Error::config(key, "expected an array"))?
        .iter()
        .map(|x| as_f64(key, x))
        .collect()
}

fn as_matrix(key: &str, v: &toml::Value) -> Result<Vec<Vec<f64>>> {
    v.as_array()
        .ok_or_else(|| Error::config(key, "expected an array of arrays"))?
        .iter()
        .map(|row| as_vec(key, row))
        .collect()
}

fn enum_value<T: for<'de> Deserialize<'de>>(key: &str, v: &toml::Value) -> Result<T> {
    let s = as_str(key, v)?;
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| Error::config(key, format!("unknown value `{s}`")))
}

fn get<'a>(map: &'a BTreeMap<String, toml::Value>, key: &str) -> Option<&'a toml::Value> {
    map.get(key)
}

fn build_data(map: &BTreeMap<String, toml::Value>, used: &mut Vec<&'static str>) -> Result<DataSpec> {
    let kind = as_str("data.kind", get(map, "data.kind").unwrap())?;
    let num = |key: &'static str, default: f64, used: &mut Vec<&'static str>| -> Result<f64> {
        used.push(key);
        get(map, key).map_or(Ok(default), |v| as_f64(key, v))
    };
    let int = |key: &'static str, default: usize, used: &mut Vec<&'static str>| -> Result<usize> {
        used.push(key);
        get(map, key).map_or(Ok(default), |v| as_usize(key, v))
    };
    let data = match kind {
        "two_gaussians" => {
            let sep = num("data.separation", 3.0, used)?;
            let std = num("data.std", 0.3, used)?;
            DataSpec::two_gaussians(sep, std)
        }
        "checkerboard" => DataSpec::Checkerboard {
            grid: int("data.grid", 4, used)?,
            cell: num("data.cell", 1.0, used)?,
        },
        "ring" => DataSpec::Ring {
            modes: int("data.modes", 8, used)?,
            radius: num("data.radius", 3.0, used)?,
            std: num("data.std", 0.2, used)?,
        },
        other => {
            return Err(Error::config(
                "data.kind",
                format!("unknown data kind `{other}` (two_gaussians, checkerboard, ring)"),
            ))
        }
    };
    data.validate()?;
    Ok(data)
}

fn build_reward(map: &BTreeMap<String, toml::Value>, used: &mut Vec<&'static str>) -> Result<RewardSpec> {
    let kind = as_str("reward.kind", get(map, "reward.kind").unwrap())?;
    let need = |key: &'static str, used: &mut Vec<&'static str>| -> Result<&toml::Value> {
        used.push(key);
        get(map, key).ok_or_else(|| Error::config(key, "missing required key"))
    };
    let spec = match kind {
        "mode_density" => {
            used.push("reward.cov");
            let mean = as_vec("reward.mean", need("reward.mean", used)?)?;
            let cov = match get(map, "reward.cov") {
                Some(v) => as_matrix("reward.cov", v)?,
                None => (0..mean.len())
                    .map(|i| (0..mean.len()).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                    .collect(),
            };
            RewardSpec::ModeDensity { mean, cov }
        }
        "linear" => RewardSpec::Linear {
            u: as_vec("reward.u", need("reward.u", used)?)?,
        },
        "region" => RewardSpec::Region {
            lo: as_vec("reward.lo", need("reward.lo", used)?)?,
            hi: as_vec("reward.hi", need("reward.hi", used)?)?,
            width: as_f64("reward.width", need("reward.width", used)?)?,
        },
        "constant" => RewardSpec::Constant {
            value: as_f64("reward.value", need("reward.value", used)?)?,
        },
        other => {
            return Err(Error::config(
                "reward.kind",
                format!("unknown reward kind `{other}` (mode_density, linear, region, constant)"),
            ))
        }
    };
    Reward::new(spec.clone())?;
    Ok(spec)
}

const SCALAR_KEYS: &[&str] = &[
    "seed",
    "data.kind",
    "reward.kind",
    "net.hidden",
    "net.activation",
    "net.time_freqs",
    "schedule.num_steps",
    "schedule.noise_scale",
    "schedule.shift",
    "schedule.delta_clamp",
    "pretrain.steps",
    "pretrain.batch",
    "pretrain.lr",
    "grpo.preset",
    "grpo.group_size",
    "grpo.num_groups",
    "grpo.clip_eps",
    "grpo.beta",
    "grpo.adv_mode",
    "grpo.weight_mode",
    "grpo.rollout_mode",
    "grpo.branch_bias_early",
    "grpo.branch_reward_stride",
    "grpo.lr",
    "grpo.inner_epochs",
    "grpo.adv_guard",
    "grpo.eval_samples",
    "run.iterations",
    "run.checkpoint_every",
    "run.output_dir",
    "analysis.conditions",
    "analysis.group_size",
    "analysis.samples",
    "analysis.noise_factor",
    "analysis.seeds",
    "analysis.shifts",
];

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<file>", e.message().to_string()))?;
        let mut map = BTreeMap::new();
        flatten("", &table, &mut map);
        for key in REQUIRED_KEYS {
            if !map.contains_key(key) {
                return Err(Error::config(key, "missing required key"));
            }
        }
        let mut used: Vec<&'static str> = Vec::new();
        let data = build_data(&map, &mut used)?;
        let reward = build_reward(&map, &mut used)?;
        if let Some(k) = map
            .keys()
            .find(|k| !SCALAR_KEYS.contains(&k.as_str()) && !used.contains(&k.as_str()))
        {
            return Err(Error::config(k.clone(), "unknown key"));
        }

        let mut cfg = ExperimentConfig {
            data,
            reward,
            ..Default::default()
        };
        // the preset goes first so explicit grpo keys can override it
        if let Some(v) = map.get("grpo.preset") {
            cfg.grpo = cfg.grpo.with_preset(as_str("grpo.preset", v)?)?;
        }
        for (key, v) in &map {
            let k = key.as_str();
            match k {
                "seed" => {
                    cfg.seed = match v {
                        toml::Value::Integer(i) if *i >= 0 => *i as u64,
                        _ => return Err(Error::config(k, "expected a non-negative integer")),
                    }
                }
                "net.hidden" => {
                    cfg.net.hidden = v
                        .as_array()
                        .ok_or_else(|| Error::config(k, "expected an array of layer widths"))?
                        .iter()
                        .map(|x| as_usize(k, x))
                        .collect::<Result<_>>()?
                }
                "net.activation" => {
                    cfg.net.activation = as_str(k, v)?
                        .parse()
                        .map_err(|_| Error::config(k, "expected tanh or silu"))?
                }
                "net.time_freqs" => cfg.net.time_freqs = as_usize(k, v)?,
                "schedule.num_steps" => cfg.schedule.num_steps = as_usize(k, v)?,
                "schedule.noise_scale" => cfg.schedule.a = as_f64(k, v)?,
                "schedule.shift" => cfg.schedule.shift = as_f64(k, v)?,
                "schedule.delta_clamp" => cfg.schedule.delta_clamp = as_f64(k, v)?,
                "pretrain.steps" => cfg.pretrain.steps = as_usize(k, v)?,
                "pretrain.batch" => cfg.pretrain.batch = as_usize(k, v)?,
                "pretrain.lr" => cfg.pretrain.lr = as_f64(k, v)?,
                "grpo.group_size" => cfg.grpo.group_size = as_usize(k, v)?,
                "grpo.num_groups" => cfg.grpo.num_groups = as_usize(k, v)?,
                "grpo.clip_eps" => cfg.grpo.clip_eps = as_f64(k, v)?,
                "grpo.beta" => cfg.grpo.beta = as_f64(k, v)?,
                "grpo.adv_mode" => cfg.grpo.adv_mode = enum_value::<AdvMode>(k, v)?,
                "grpo.weight_mode" => cfg.grpo.weight_mode = enum_value::<WeightMode>(k, v)?,
                "grpo.rollout_mode" => cfg.grpo.rollout_mode = enum_value::<RolloutMode>(k, v)?,
                "grpo.branch_bias_early" => cfg.grpo.branch_bias_early = as_bool(k, v)?,
                "grpo.branch_reward_stride" => cfg.grpo.branch_reward_stride = as_usize(k, v)?,
                "grpo.lr" => cfg.grpo.lr = as_f64(k, v)?,
                "grpo.inner_epochs" => cfg.grpo.inner_epochs = as_usize(k, v)?,
                "grpo.adv_guard" => cfg.grpo.adv_guard = as_f64(k, v)?,
                "grpo.eval_samples" => cfg.grpo.eval_samples = as_usize(k, v)?,
                "run.iterations" => cfg.run.iterations = as_usize(k, v)?,
                "run.checkpoint_every" => cfg.run.checkpoint_every = as_usize(k, v)?,
                "run.output_dir" => cfg.run.output_dir = PathBuf::from(as_str(k, v)?),
                "analysis.conditions" => cfg.analysis.conditions = as_usize(k, v)?,
                "analysis.group_size" => cfg.analysis.group_size = as_usize(k, v)?,
                "analysis.samples" => cfg.analysis.samples = as_usize(k, v)?,
                "analysis.noise_factor" => cfg.analysis.noise_factor = as_f64(k, v)?,
                "analysis.seeds" => cfg.analysis.seeds = as_usize(k, v)?,
                "analysis.shifts" => cfg.analysis.shifts = as_vec(k, v)?,
                _ => {}
            }
        }
        cfg.grpo.iterations = cfg.run.iterations;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        Reward::new(self.reward.clone())?;
        self.network()?;
        NoiseSchedule::new(self.schedule).map_err(|e| Error::config("schedule", e.to_string()))?;
        self.grpo.validate()?;
        if self.pretrain.batch == 0 {
            return Err(Error::config("pretrain.batch", "must be positive"));
        }
        if !(self.pretrain.lr > 0.0) {
            return Err(Error::config("pretrain.lr", "must be positive"));
        }
        if self.analysis.group_size < 2 || self.analysis.conditions == 0 || self.analysis.seeds == 0 {
            return Err(Error::config(
                "analysis",
                "group_size >= 2, conditions >= 1 and seeds >= 1 required",
            ));
        }
        if self.analysis.samples < 1000 {
            return Err(Error::config("analysis.samples", "must be at least 1000"));
        }
        Ok(())
    }

    pub fn network(&self) -> Result<Network> {
        Network::new(
            self.data.dim(),
            self.net.hidden.clone(),
            self.net.activation,
            self.net.time_freqs,
        )
        .map_err(|e| Error::config("net.hidden", e.to_string()))
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.schedule)
    }

    pub fn reward_fn(&self) -> Result<Reward> {
        Reward::new(self.reward.clone())
    }

    pub fn seeds(&self) -> SeedTree {
        SeedTree::new(self.seed)
    }

    /// Config with one of the named presets applied.
    pub fn with_preset(&self, name: &str) -> Result<Self> {
        Ok(ExperimentConfig {
            grpo: self.grpo.with_preset(name)?,
            ..self.clone()
        })
    }

    /// Canonical flat rendering; parses back to an equal config.
    pub fn to_flat_toml(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        let arr = |xs: &[f64]| {
            format!(
                "[{}]",
                xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ")
            )
        };
        let q = |s: &str| format!("\"{s}\"");
        let enum_str = |v: serde_json::Value| q(v.as_str().unwrap_or_default());
        line("seed", self.seed.to_string());
        match &self.data {
            DataSpec::GaussianMixture { means, covs, .. } => {
                line("data.kind", q("two_gaussians"));
                line("data.separation", format!("{:?}", means[0][0]));
                line("data.std", format!("{:?}", covs[0][0][0].sqrt()));
            }
            DataSpec::Checkerboard { grid, cell } => {
                line("data.kind", q("checkerboard"));
                line("data.grid", grid.to_string());
                line("data.cell", format!("{cell:?}"));
            }
            DataSpec::Ring { modes, radius, std } => {
                line("data.kind", q("ring"));
                line("data.modes", modes.to_string());
                line("data.radius", format!("{radius:?}"));
                line("data.std", format!("{std:?}"));
            }
        }
        line(
            "net.hidden",
            format!(
                "[{}]",
                self.net
                    .hidden
                    .iter()
                    .map(|h| h.to_string())
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
        );
        line(
            "net.activation",
            q(match self.net.activation {
                Activation::Tanh => "tanh",
                Activation::Silu => "silu",
            }),
        );
        line("net.time_freqs", self.net.time_freqs.to_string());
        line("schedule.num_steps", self.schedule.num_steps.to_string());
        line("schedule.noise_scale", format!("{:?}", self.schedule.a));
        line("schedule.shift", format!("{:?}", self.schedule.shift));
        line("schedule.delta_clamp", format!("{:?}", self.schedule.delta_clamp));
        line("pretrain.steps", self.pretrain.steps.to_string());
        line("pretrain.batch", self.pretrain.batch.to_string());
        line("pretrain.lr", format!("{:?}", self.pretrain.lr));
        let g = &self.grpo;
        line("grpo.group_size", g.group_size.to_string());
        line("grpo.num_groups", g.num_groups.to_string());
        line("grpo.clip_eps", format!("{:?}", g.clip_eps));
        line("grpo.beta", format!("{:?}", g.beta));
        line("grpo.adv_mode", enum_str(serde_json::to_value(g.adv_mode).unwrap()));
        line(
            "grpo.weight_mode",
            enum_str(serde_json::to_value(g.weight_mode).unwrap()),
        );
        line(
            "grpo.rollout_mode",
            enum_str(serde_json::to_value(g.rollout_mode).unwrap()),
        );
        line("grpo.branch_bias_early", g.branch_bias_early.to_string());
        line("grpo.branch_reward_stride", g.branch_reward_stride.to_string());
        line("grpo.lr", format!("{:?}", g.lr));
        line("grpo.inner_epochs", g.inner_epochs.to_string());
        line("grpo.adv_guard", format!("{:?}", g.adv_guard));
        line("grpo.eval_samples", g.eval_samples.to_string());
        match &self.reward {
            RewardSpec::ModeDensity { mean, cov } => {
                line("reward.kind", q("mode_density"));
                line("reward.mean", arr(mean));
                line(
                    "reward.cov",
                    format!("[{}]", cov.iter().map(|r| arr(r)).collect::<Vec<_>>().join(", ")),
                );
            }
            RewardSpec::Linear { u } => {
                line("reward.kind", q("linear"));
                line("reward.u", arr(u));
            }
            RewardSpec::Region { lo, hi, width } => {
                line("reward.kind", q("region"));
                line("reward.lo", arr(lo));
                line("reward.hi", arr(hi));
                line("reward.width", format!("{width:?}"));
            }
            RewardSpec::Constant { value } => {
                line("reward.kind", q("constant"));
                line("reward.value", format!("{value:?}"));
            }
        }
        line("run.iterations", self.run.iterations.to_string());
        line("run.checkpoint_every", self.run.checkpoint_every.to_string());
        line(
            "run.output_dir",
            format!("{:?}", self.run.output_dir.display().to_string()),
        );
        let a = &self.analysis;
        line("analysis.conditions", a.conditions.to_string());
        line("analysis.group_size", a.group_size.to_string());
        line("analysis.samples", a.samples.to_string());
        line("analysis.noise_factor", format!("{:?}", a.noise_factor));
        line("analysis.seeds", a.seeds.to_string());
        line("analysis.shifts", arr(&a.shifts));
        out
    }

    /// SHA-256 of the canonical rendering.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_flat_toml().as_bytes()))
    }
}

/// Every preset expanded over `base`, in a fixed order.
pub fn expand_presets(base: &ExperimentConfig) -> Result<Vec<(String, ExperimentConfig)>> {
    PRESETS
        .iter()
        .map(|p| Ok((p.to_string(), base.with_preset(p)?)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Record of one command invocation and everything it wrote.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub start_time_unix: u64,
    pub versions: BTreeMap<String, String>,
    pub files: Vec<FileEntry>,
}

pub const MANIFEST_FILE: &str = "run_manifest.json";

impl RunManifest {
    fn start(command: &str, cfg: &ExperimentConfig) -> Self {
        let mut versions = BTreeMap::new();
        versions.insert("tempflow".to_string(), env!("CARGO_PKG_VERSION").to_string());
        versions.insert(
            "checkpoint_format".to_string(),
            crate::autodiff::checkpoint::VERSION.to_string(),
        );
        RunManifest {
            command: command.to_string(),
            config_hash: cfg.hash(),
            start_time_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            versions,
            files: Vec::new(),
        }
    }

    fn record(&mut self, out_dir: &Path, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let rel = path.strip_prefix(out_dir).unwrap_or(path);
        self.files.push(FileEntry {
            path: rel.display().to_string(),
            bytes: bytes.len() as u64,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        Ok(())
    }

    fn finish(mut self, out_dir: &Path) -> Result<PathBuf> {
        self.files.sort_by(|a, b| a.path.cmp(&b.path));
        let path = out_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self).expect("manifest serialises");
        write_file(&path, &text)?;
        Ok(path)
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn prepare_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes `text` under `out_dir` and records it in the manifest.
fn emit(manifest: &mut RunManifest, out_dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    let p = out_dir.join(name);
    write_file(&p, text)?;
    manifest.record(out_dir, &p)?;
    Ok(p)
}

fn emit_checkpoint(
    manifest: &mut RunManifest,
    out_dir: &Path,
    name: &str,
    net: &Network,
    params: &ParamSet,
) -> Result<PathBuf> {
    let (ckpt, side) = save_checkpoint(&out_dir.join(name), net, params)?;
    manifest.record(out_dir, &ckpt)?;
    manifest.record(out_dir, &side)?;
    Ok(ckpt)
}

/// Pretrained model for `cfg`, without touching the filesystem.
pub fn pretrain_model(cfg: &ExperimentConfig) -> Result<(Network, PretrainResult)> {
    let net = cfg.network()?;
    let seeds = cfg.seeds();
    let init = net.init_params(&mut seeds.stream("init"));
    let res = cfm_pretrain(&net, init, &cfg.data, &cfg.pretrain, &seeds.child("pretrain"))?;
    Ok((net, res))
}

pub struct PretrainOutputs {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub manifest: PathBuf,
}

pub fn cmd_pretrain(cfg: &ExperimentConfig, out_dir: &Path) -> Result<PretrainOutputs> {
    prepare_dir(out_dir)?;
    let mut manifest = RunManifest::start("pretrain", cfg);
    emit(&mut manifest, out_dir, "config.toml", &cfg.to_flat_toml())?;
    let (net, res) = pretrain_model(cfg)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in res.losses.iter().enumerate() {
        let _ = writeln!(csv, "{i},{}", fmt_f64(*l));
    }
    let loss_csv = emit(&mut manifest, out_dir, "pretrain_loss.csv", &csv)?;
    let checkpoint = emit_checkpoint(&mut manifest, out_dir, "pretrained.ckpt", &net, &res.params)?;
    let manifest = manifest.finish(out_dir)?;
    Ok(PretrainOutputs {
        checkpoint,
        loss_csv,
        manifest,
    })
}

pub struct TrainOutputs {
    pub metrics_csv: PathBuf,
    pub final_checkpoint: PathBuf,
    pub summary: PathBuf,
    pub manifest: PathBuf,
    pub initial_reward: f64,
    pub final_reward: f64,
}

pub fn cmd_train(cfg: &ExperimentConfig, checkpoint: &Path, out_dir: &Path) -> Result<TrainOutputs> {
    let net = cfg.network()?;
    let init = load_for(checkpoint, &net)?;
    prepare_dir(out_dir)?;
    let mut manifest = RunManifest::start("train", cfg);
    emit(&mut manifest, out_dir, "config.toml", &cfg.to_flat_toml())?;
    let schedule = cfg.schedule()?;
    let reward = cfg.reward_fn()?;
    let grpo = GrpoConfig {
        iterations: cfg.run.iterations,
        ..cfg.grpo.clone()
    };
    let every = cfg.run.checkpoint_every;
    let mut saved = Vec::new();
    let res = train_with_callback(
        &net,
        &init,
        &grpo,
        &schedule,
        &reward,
        &cfg.data,
        &cfg.seeds().child("train"),
        &mut |m, p| {
            if every > 0 && (m.iter + 1) % every == 0 {
                let name = format!("iter_{:05}.ckpt", m.iter + 1);
                save_checkpoint(&out_dir.join(&name), &net, p)?;
                saved.push(name);
            }
            Ok(())
        },
    )?;
    for name in &saved {
        let p = out_dir.join(name);
        manifest.record(out_dir, &p)?;
        manifest.record(out_dir, &crate::autodiff::checkpoint::manifest_path(&p))?;
    }
    let metrics_path = emit(&mut manifest, out_dir, "metrics.csv", &metrics_csv(&res.metrics))?;
    let final_checkpoint = emit_checkpoint(&mut manifest, out_dir, "final.ckpt", &net, &res.params)?;
    let initial_reward = res.initial_eval.mean_reward;
    let final_reward = res.metrics.last().map_or(initial_reward, |m| m.eval_reward);
    let final_occ = res
        .metrics
        .last()
        .map_or(res.initial_eval.occupancy, |m| m.mode_occupancy);
    let summary = format!(
        "iterations {}\nmean_reward_before {}\nmean_reward_after {}\noccupancy_before {}\noccupancy_after {}\n",
        res.metrics.len(),
        fmt_f64(initial_reward),
        fmt_f64(final_reward),
        fmt_f64(res.initial_eval.occupancy),
        fmt_f64(final_occ)
    );
    let summary_path = emit(&mut manifest, out_dir, "summary.txt", &summary)?;
    let manifest = manifest.finish(out_dir)?;
    Ok(TrainOutputs {
        metrics_csv: metrics_path,
        final_checkpoint,
        summary: summary_path,
        manifest,
        initial_reward,
        final_reward,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnalysisKind {
    VarianceProfile,
    ScaleTerms,
    DirectionCheck,
    StdVsNoise,
}

pub const ANALYSES: [&str; 4] = ["variance_profile", "scale_terms", "direction_check", "std_vs_noise"];

impl std::str::FromStr for AnalysisKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "variance_profile" => Ok(AnalysisKind::VarianceProfile),
            "scale_terms" => Ok(AnalysisKind::ScaleTerms),
            "direction_check" => Ok(AnalysisKind::DirectionCheck),
            "std_vs_noise" => Ok(AnalysisKind::StdVsNoise),
            other => Err(Error::config(
                "which",
                format!("unknown analysis `{other}`, expected one of {}", ANALYSES.join(", ")),
            )),
        }
    }
}

pub struct AnalysisOutputs {
    pub files: Vec<PathBuf>,
    pub checks: Vec<Check>,
    pub manifest: PathBuf,
}

/// A start state for the direction check: the deterministic rollout of a
/// fixed `x_T` up to step `k`.
fn state_at(
    net: &Network,
    params: &ParamSet,
    schedule: &NoiseSchedule,
    seeds: &SeedTree,
    k: usize,
) -> Result<Vec<f64>> {
    let x_t = normal_vec(&mut seeds.stream("direction-x_T"), net.state_dim);
    Ok(ode_sample(net, params, &x_t, schedule)?.states[k].clone())
}

pub fn cmd_analyze(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    which: AnalysisKind,
    out_dir: &Path,
) -> Result<AnalysisOutputs> {
    let net = cfg.network()?;
    let params = load_for(checkpoint, &net)?;
    prepare_dir(out_dir)?;
    let mut manifest = RunManifest::start("analyze", cfg);
    let schedule = cfg.schedule()?;
    let reward = cfg.reward_fn()?;
    let seeds = cfg.seeds().child("analysis");
    let a = &cfg.analysis;
    let conditions: Vec<usize> = (0..a.conditions).collect();
    let mut files = vec![emit(&mut manifest, out_dir, "config.toml", &cfg.to_flat_toml())?];
    let mut checks = Vec::new();
    match which {
        AnalysisKind::VarianceProfile | AnalysisKind::StdVsNoise => {
            let prof = reward_std_profile(&net, &params, &conditions, a.group_size, &seeds, &schedule, &reward)?;
            if which == AnalysisKind::VarianceProfile {
                files.push(emit(&mut manifest, out_dir, "variance_profile.csv", &prof.to_csv())?);
                let ratio = early_late_ratio(&prof);
                checks.push(Check::new("early_late_std_ratio", ratio, ">= 2", ratio >= 2.0));
            } else {
                let rep = std_vs_noise_report(&prof.reward_std, &schedule)?;
                files.push(emit(&mut manifest, out_dir, "std_vs_noise.csv", &rep.to_csv())?);
                checks.push(Check::new(
                    "std_noise_correlation",
                    rep.correlation,
                    "> 0.8",
                    rep.correlation > 0.8,
                ));
            }
        }
        AnalysisKind::ScaleTerms => {
            for &shift in &a.shifts {
                let sched = NoiseSchedule::new(ScheduleConfig { shift, ..cfg.schedule })?;
                let mut prof = ScaleProfile::new(&sched)?;
                let g = a.group_size.max(8);
                let emp =
                    seed_averaged_scales(&net, &params, &reward, g, cfg.grpo.num_groups, &sched, &seeds, a.seeds)?;
                let r = pearson(&emp.uniform_output(), &prof.raw)?;
                let r_param = pearson(&emp.uniform_param(), &prof.raw)?;
                let cv = coefficient_of_variation(&emp.weighted_output());
                let cv_param = coefficient_of_variation(&emp.weighted_param());
                let reweighted_cv = coefficient_of_variation(&prof.reweighted);
                prof.empirical = Some(emp);
                files.push(emit(
                    &mut manifest,
                    out_dir,
                    &format!("scale_terms_shift_{shift}.csv"),
                    &prof.to_csv(),
                )?);
                checks.push(Check::new(
                    format!("raw_scale_pearson_shift_{shift}"),
                    r,
                    "> 0.9",
                    r > 0.9,
                ));
                checks.push(Check::diagnostic(format!("param_norm_pearson_shift_{shift}"), r_param));
                if shift == 1.0 {
                    checks.push(Check::new("weighted_norm_cv_shift_1", cv, "< 0.15", cv < 0.15));
                    checks.push(Check::diagnostic("weighted_param_norm_cv_shift_1", cv_param));
                    checks.push(Check::new(
                        "reweighted_scale_cv_shift_1",
                        reweighted_cv,
                        "< 1e-12",
                        reweighted_cv < 1e-12,
                    ));
                }
            }
        }
        AnalysisKind::DirectionCheck => {
            let linear = Reward::new(RewardSpec::Linear {
                u: (0..net.state_dim).map(|j| if j == 0 { 1.0 } else { 0.5 }).collect(),
            })?;
            let mut csv = String::from("step_index,cosine,norm,samples\n");
            let mut norms = Vec::new();
            for k in 0..schedule.num_transitions() {
                let x_k = state_at(&net, &params, &schedule, &seeds, k)?;
                let dc = direction_check(
                    &net,
                    &params,
                    &linear,
                    &x_k,
                    k,
                    &schedule,
                    a.samples,
                    a.noise_factor,
                    &seeds,
                )?;
                let _ = writeln!(csv, "{k},{},{},{}", fmt_f64(dc.cosine), fmt_f64(dc.norm), dc.samples);
                checks.push(Check::new(
                    format!("cosine_step_{k}"),
                    dc.cosine,
                    "> 0.95",
                    dc.cosine > 0.95,
                ));
                checks.push(Check::new(
                    format!("norm_step_{k}"),
                    dc.norm,
                    "[0.9, 1.1]",
                    (0.9..=1.1).contains(&dc.norm),
                ));
                norms.push(dc.norm);
            }
            let spread =
                norms.iter().cloned().fold(f64::MIN, f64::max) - norms.iter().cloned().fold(f64::MAX, f64::min);
            checks.push(Check::new("norm_spread_across_steps", spread, "< 0.15", spread < 0.15));
            files.push(emit(&mut manifest, out_dir, "direction_check.csv", &csv)?);
        }
    }
    files.push(emit(&mut manifest, out_dir, "summary.txt", &summary_text(&checks))?);
    let manifest = manifest.finish(out_dir)?;
    Ok(AnalysisOutputs {
        files,
        checks,
        manifest,
    })
}
