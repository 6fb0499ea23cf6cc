//! Experiment configuration: TOML schema, profiles, and resolution.
//!
//! Configs are sectioned key-value files. Unknown keys are rejected. Every
//! field has a profile default: `desk` (CPU-sized, the validated default) or
//! `paper` (the full-protocol values; compute-heavy and unvalidated here).
//! The resolved configuration hashes stably, and that hash names artifacts.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

use statetrack_core::error::{Error, Result};
use statetrack_core::groups::TokenSampling;
use statetrack_core::network::{ModelKind, RecurrentLayerConfig, StackConfig};
use statetrack_core::operators::{ActivationKind, GateKind, InjectionKind, TransitionKind};
use statetrack_core::training::{GridAxes, SchedulerKind, TrainConfig};

pub const OUT_ROOT_ENV: &str = "STATETRACK_OUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Desk,
    Paper,
}

// ── raw schema (what the TOML file may contain) ─────────────────────

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub profile: Option<Profile>,
    pub task: Option<RawTask>,
    pub model: Option<RawModel>,
    pub train: Option<RawTrain>,
    pub probe: Option<RawProbe>,
    pub grid: Option<RawGrid>,
    pub output: Option<RawOutput>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawTask {
    pub group: Option<String>,
    pub sampling: Option<TokenSampling>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawModel {
    pub kind: Option<ModelKind>,
    pub name: Option<String>,
    pub d_model: Option<usize>,
    pub d_state: Option<usize>,
    pub depth: Option<usize>,
    /// Component overrides (the nonlinearity probe swaps the activation on a
    /// fixed skeleton; the other overrides exist for completeness).
    pub activation: Option<ActivationKind>,
    pub gate: Option<GateKind>,
    pub transition: Option<TransitionKind>,
    pub injection: Option<InjectionKind>,
    pub readout_bias: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawTrain {
    pub lr: Option<f64>,
    pub scheduler: Option<SchedulerKind>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub start_len: Option<usize>,
    pub l_max: Option<usize>,
    pub promote_threshold: Option<f64>,
    pub promote_patience: Option<usize>,
    pub max_total_epochs: Option<usize>,
    pub eval_lengths: Option<Vec<usize>>,
    pub pass_threshold: Option<f64>,
    pub train_seqs_per_stage: Option<usize>,
    pub test_seqs_per_stage: Option<usize>,
    pub eval_seqs_per_length: Option<usize>,
    pub grad_clip: Option<f64>,
    pub early_stop_chance_epochs: Option<usize>,
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawProbe {
    pub sigma: Option<f64>,
    pub t0: Option<usize>,
    pub n: Option<usize>,
    pub t_len: Option<usize>,
    pub t_max: Option<usize>,
    pub min_count: Option<usize>,
    pub gain_max_word_len: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawGrid {
    pub d_state: Option<Vec<usize>>,
    pub lr: Option<Vec<f64>>,
    pub scheduler: Option<Vec<SchedulerKind>>,
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawOutput {
    pub dir: Option<PathBuf>,
    pub formats: Option<Vec<String>>,
}

// ── resolved configuration ──────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct TaskConfig {
    pub group: String,
    pub sampling: TokenSampling,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelSection {
    pub name: String,
    pub kind: ModelKind,
    pub stack: StackConfig,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeConfig {
    pub sigma: f64,
    pub t0: usize,
    pub n: usize,
    /// Rollout length for the perturbation probe.
    pub t_len: usize,
    /// Rollout length for separation/subspace probes.
    pub t_max: usize,
    pub min_count: usize,
    pub gain_max_word_len: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub formats: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub task: TaskConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub probe: ProbeConfig,
    pub grid: GridAxes,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<ExperimentConfig> {
        let raw: RawConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("config schema: {e}")))?;
        resolve(raw)
    }

    /// Stable hash of the resolved configuration (16 hex chars).
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Group order drives the vocabulary and readout rows.
    pub fn build_group(&self) -> Result<statetrack_core::groups::GroupSpec> {
        statetrack_core::groups::build_group(&self.task.group)
    }
}

pub fn default_out_root() -> PathBuf {
    match std::env::var(OUT_ROOT_ENV) {
        Ok(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => PathBuf::from("runs"),
    }
}

fn resolve(raw: RawConfig) -> Result<ExperimentConfig> {
    let profile = raw.profile.unwrap_or(Profile::Desk);

    let task = {
        let t = raw.task.unwrap_or_default();
        TaskConfig {
            group: t.group.unwrap_or_else(|| "S3".into()),
            sampling: t.sampling.unwrap_or(TokenSampling::UniformAll),
        }
    };
    let group = statetrack_core::groups::build_group(&task.group)?;

    let m = raw.model.unwrap_or_default();
    let kind = m.kind.unwrap_or(ModelKind::TanhRnn);
    let mut layer: RecurrentLayerConfig = kind.layer_config();
    let mut overridden = Vec::new();
    if let Some(t) = m.transition {
        layer.transition = t;
        overridden.push(format!("{t:?}"));
    }
    if let Some(g) = m.gate {
        layer.gate = g;
        overridden.push(format!("{g:?}"));
    }
    if let Some(a) = m.activation {
        layer.activation = a;
        overridden.push(format!("{a:?}"));
    }
    if let Some(i) = m.injection {
        layer.injection = i;
        overridden.push(format!("{i:?}"));
    }
    let (default_d_model, default_d_state) = match profile {
        Profile::Desk => (64, 32),
        Profile::Paper => (698, 128),
    };
    let stack = StackConfig {
        vocab: group.order,
        d_model: m.d_model.unwrap_or(default_d_model),
        d_state: m.d_state.unwrap_or(default_d_state),
        depth: m.depth.unwrap_or(1),
        layer,
        readout_bias: m.readout_bias.unwrap_or(false),
    };
    let name = m.name.unwrap_or_else(|| {
        let mut n = serde_variant_name(&kind);
        if !overridden.is_empty() {
            n = format!("{n}+{}", overridden.join("+").to_lowercase());
        }
        n
    });
    let model = ModelSection { name, kind, stack };

    let base = match profile {
        Profile::Desk => {
            let mut t = TrainConfig::desk();
            t.lr = 1e-2;
            t
        }
        Profile::Paper => TrainConfig::paper(),
    };
    let t = raw.train.unwrap_or_default();
    let mut train = base;
    if let Some(v) = t.lr {
        train.lr = v;
    }
    if let Some(v) = t.scheduler {
        train.scheduler = v;
    }
    if let Some(v) = t.weight_decay {
        train.weight_decay = v;
    }
    if let Some(v) = t.batch_size {
        train.batch_size = v;
    }
    if let Some(v) = t.start_len {
        train.curriculum.start_len = v;
    }
    if let Some(v) = t.l_max {
        train.curriculum.l_max = v;
    }
    if let Some(v) = t.promote_threshold {
        train.curriculum.promote_threshold = v;
    }
    if let Some(v) = t.promote_patience {
        train.curriculum.promote_patience = v;
    }
    if let Some(v) = t.max_total_epochs {
        train.max_total_epochs = v;
    }
    if let Some(v) = t.eval_lengths {
        train.eval_lengths = v;
    }
    if let Some(v) = t.pass_threshold {
        train.pass_threshold = v;
    }
    if let Some(v) = t.train_seqs_per_stage {
        train.train_seqs_per_stage = v;
    }
    if let Some(v) = t.test_seqs_per_stage {
        train.test_seqs_per_stage = v;
    }
    if let Some(v) = t.eval_seqs_per_length {
        train.eval_seqs_per_length = v;
    }
    if let Some(v) = t.grad_clip {
        train.grad_clip = if v > 0.0 { Some(v) } else { None };
    }
    if let Some(v) = t.early_stop_chance_epochs {
        train.early_stop_chance_epochs = v;
    }
    train.sampling = task.sampling;
    train.validate()?;
    let seeds = t.seeds.unwrap_or_else(|| vec![0, 1, 2]);
    if seeds.is_empty() {
        return Err(Error::config("train.seeds must not be empty"));
    }

    let p = raw.probe.unwrap_or_default();
    let probe = ProbeConfig {
        sigma: p.sigma.unwrap_or(1e-2),
        t0: p.t0.unwrap_or(20),
        n: p.n.unwrap_or(200),
        t_len: p.t_len.unwrap_or(200),
        t_max: p.t_max.unwrap_or(match profile {
            Profile::Desk => 600,
            Profile::Paper => 1500,
        }),
        min_count: p.min_count.unwrap_or(5),
        gain_max_word_len: p.gain_max_word_len.unwrap_or(3),
    };
    if probe.sigma <= 0.0 {
        return Err(Error::config("probe.sigma must be positive"));
    }
    if probe.t0 == 0 || probe.t0 >= probe.t_len {
        return Err(Error::config("probe.t0 must satisfy 0 < t0 < t_len"));
    }

    let g = raw.grid.unwrap_or_default();
    let grid = match profile {
        Profile::Desk => GridAxes {
            d_state: g.d_state.unwrap_or_else(|| vec![16, 32]),
            lr: g.lr.unwrap_or_else(|| vec![1e-3, 1e-2]),
            scheduler: g.scheduler.unwrap_or_else(|| vec![SchedulerKind::Fixed]),
            seeds: g.seeds.unwrap_or_else(|| seeds.clone()),
        },
        Profile::Paper => GridAxes {
            d_state: g.d_state.unwrap_or_else(|| vec![32, 64, 128]),
            lr: g.lr.unwrap_or_else(|| vec![1e-4, 5e-4, 1e-3]),
            scheduler: g.scheduler.unwrap_or_else(|| {
                vec![SchedulerKind::Fixed, SchedulerKind::Cosine, SchedulerKind::Plateau]
            }),
            seeds: g.seeds.unwrap_or_else(|| seeds.clone()),
        },
    };

    let o = raw.output.unwrap_or_default();
    let output = OutputConfig {
        dir: o.dir.unwrap_or_else(default_out_root),
        formats: o.formats.unwrap_or_else(|| vec!["csv".into(), "json".into(), "svg".into()]),
    };
    for f in &output.formats {
        if !matches!(f.as_str(), "csv" | "json" | "svg") {
            return Err(Error::config(format!("unknown output format '{f}'")));
        }
    }

    Ok(ExperimentConfig { profile, task, model, train, seeds, probe, grid, output })
}

fn serde_variant_name(kind: &ModelKind) -> String {
    serde_json::to_string(kind).expect("kind serializes").trim_matches('"').to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_resolves_with_desk_defaults() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg.profile, Profile::Desk);
        assert_eq!(cfg.task.group, "S3");
        assert_eq!(cfg.model.stack.d_model, 64);
        assert_eq!(cfg.model.stack.d_state, 32);
        assert_eq!(cfg.train.curriculum.l_max, 32);
        assert_eq!(cfg.train.eval_lengths, vec![64, 128, 256, 512]);
        assert_eq!(cfg.seeds, vec![0, 1, 2]);
    }

    #[test]
    fn paper_profile_loads_table_values() {
        let cfg = ExperimentConfig::from_toml("profile = \"paper\"").unwrap();
        assert_eq!(cfg.model.stack.d_model, 698);
        assert_eq!(cfg.train.batch_size, 256);
        assert_eq!(cfg.train.weight_decay, 0.01);
        assert_eq!(cfg.train.curriculum.l_max, 60);
        assert_eq!(cfg.train.curriculum.start_len, 2);
        assert_eq!(cfg.train.max_total_epochs, 500);
        assert_eq!(cfg.train.train_seqs_per_stage, 10_000);
        assert_eq!(cfg.train.test_seqs_per_stage, 2_000);
        assert_eq!(cfg.train.eval_lengths, (1..=10).map(|k| 100 * k).collect::<Vec<_>>());
        assert_eq!(cfg.grid.d_state, vec![32, 64, 128]);
        assert_eq!(cfg.grid.lr, vec![1e-4, 5e-4, 1e-3]);
        assert_eq!(cfg.grid.scheduler.len(), 3);
    }

    #[test]
    fn unknown_keys_are_rejected_with_field_report() {
        let err = ExperimentConfig::from_toml("[train]\nlearning_rate = 0.1").unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("learning_rate"), "{msg}");
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(ExperimentConfig::from_toml("[train]\npass_threshold = 1.5").is_err());
        assert!(ExperimentConfig::from_toml("[task]\ngroup = \"Q8\"").is_err());
        assert!(ExperimentConfig::from_toml("[probe]\nsigma = 0.0").is_err());
        assert!(ExperimentConfig::from_toml("[output]\nformats = [\"pdf\"]").is_err());
    }

    #[test]
    fn activation_override_renames_model() {
        let cfg = ExperimentConfig::from_toml(
            "[model]\nkind = \"linear_rnn\"\nactivation = \"groupsort2\"",
        )
        .unwrap();
        assert_eq!(cfg.model.stack.layer.activation, ActivationKind::Groupsort2);
        assert!(cfg.model.name.contains("linear_rnn"));
        assert!(cfg.model.name.contains("groupsort2"));
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::from_toml("[task]\ngroup = \"C2\"").unwrap();
        let b = ExperimentConfig::from_toml("[task]\ngroup = \"C2\"").unwrap();
        let c = ExperimentConfig::from_toml("[task]\ngroup = \"C3\"").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 16);
    }
}
