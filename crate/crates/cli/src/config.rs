//! Run configuration: one TOML file fully determines a run.
//!
//! ```toml
//! seed = 7
//! out = "runs/parity"
//!
//! [encoder]
//! layers = 4
//! width = 64
//! heads = 4
//! ff_width = 64
//! vocab = 16
//! max_seq = 64
//! classes = 2
//!
//! [adapter]
//! rank = 8
//!
//! [plan]
//! kind = "alternating"
//!
//! [task]
//! kind = "parity"
//! seq_len = 64
//! n_train = 2048
//! n_eval = 512
//! vocab = 2
//!
//! [train]
//! lr = 0.01
//! batch_size = 32
//! max_epochs = 20
//! patience = 5
//! ```
//!
//! Sections `[budget]`, `[gradcheck]` and `[bench]` configure the
//! corresponding subcommands. Every stochastic component draws from a
//! seed derived from the top-level `seed` (mixed with the section's own
//! `seed`, where it has one).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ssmlora::planner::{plan_alternating, plan_dense, plan_skip_one};
use ssmlora::seed::derive_seed;
use ssmlora::{AdapterConfig, EncoderConfig, InsertionPlan, MatrixKind, Method, ModelDims, TaskSpec, TrainOptions};

use crate::error::{CliError, CliResult};

/// Version stamped into every report and checkpoint manifest.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanKind {
    /// No adapters.
    None,
    /// SSMLoRA, query on even layers and value on odd layers.
    Alternating,
    /// SSMLoRA on the fused attention projection of every other layer.
    SkipOne,
    /// Plain LoRA on every listed kind of every layer.
    DenseLora,
    /// SSMLoRA on every listed kind of every layer.
    DenseSsmlora,
}

impl PlanKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PlanKind::None => "none",
            PlanKind::Alternating => "alternating",
            PlanKind::SkipOne => "skip-one",
            PlanKind::DenseLora => "dense-lora",
            PlanKind::DenseSsmlora => "dense-ssmlora",
        }
    }
}

fn default_dense_kinds() -> Vec<MatrixKind> {
    vec![MatrixKind::Query, MatrixKind::Value]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanConfig {
    pub kind: PlanKind,
    /// Matrix kinds covered by the dense plans.
    #[serde(default = "default_dense_kinds")]
    pub kinds: Vec<MatrixKind>,
    /// Label used in reports; defaults to the kind.
    #[serde(default)]
    pub name: Option<String>,
}

impl PlanConfig {
    pub fn of(kind: PlanKind) -> Self {
        Self {
            kind,
            kinds: default_dense_kinds(),
            name: None,
        }
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.kind.as_str().to_string())
    }

    pub fn method(&self) -> Method {
        match self.kind {
            PlanKind::DenseLora => Method::Lora,
            _ => Method::Ssmlora,
        }
    }

    pub fn build(&self, layers: usize) -> InsertionPlan {
        match self.kind {
            PlanKind::None => InsertionPlan::default(),
            PlanKind::Alternating => plan_alternating(layers),
            PlanKind::SkipOne => plan_skip_one(layers),
            PlanKind::DenseLora => plan_dense(layers, &self.kinds),
            PlanKind::DenseSsmlora => plan_dense(layers, &self.kinds).with_method(Method::Ssmlora),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetConfig {
    pub layers: usize,
    pub width: usize,
    #[serde(default)]
    pub ff_width: Option<usize>,
    #[serde(default)]
    pub fused_qkv_out: Option<usize>,
    pub ranks: Vec<usize>,
    /// The first plan is the baseline for the ratio column.
    pub plans: Vec<PlanConfig>,
}

impl BudgetConfig {
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            layers: self.layers,
            width: self.width,
            fused_qkv_out: self.fused_qkv_out,
            ff_width: self.ff_width,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// Fresh adapters (`w_b`, `w_c`, `w_d` zero).
    Zero,
    /// Fresh adapters plus Gaussian noise on `w_b`, `w_c`, `w_d`.
    #[default]
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckConfig {
    #[serde(default = "default_gc_batch")]
    pub batch: usize,
    /// Sequence length of the checked sample; defaults to the task's
    /// `seq_len`, else `encoder.max_seq`.
    #[serde(default)]
    pub seq: Option<usize>,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub init: InitMode,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default = "default_coords")]
    pub coords_per_matrix: usize,
    #[serde(default = "default_floor")]
    pub floor: f64,
    #[serde(default)]
    pub include_head: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_gc_batch() -> usize {
    4
}
fn default_tolerance() -> f64 {
    1e-5
}
fn default_init_std() -> f64 {
    0.1
}
fn default_step() -> f64 {
    1e-5
}
fn default_coords() -> usize {
    64
}
fn default_floor() -> f64 {
    1e-8
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            batch: default_gc_batch(),
            seq: None,
            tolerance: default_tolerance(),
            init: InitMode::default(),
            init_std: default_init_std(),
            step: default_step(),
            coords_per_matrix: default_coords(),
            floor: default_floor(),
            include_head: false,
            seed: 0,
        }
    }
}

fn default_bench_plans() -> Vec<PlanConfig> {
    vec![
        PlanConfig::of(PlanKind::None),
        PlanConfig::of(PlanKind::Alternating),
        PlanConfig::of(PlanKind::DenseLora),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub seq_lens: Vec<usize>,
    #[serde(default = "default_bench_batch")]
    pub batch: usize,
    /// Timed repetitions per cell; the minimum is reported.
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_bench_plans")]
    pub plans: Vec<PlanConfig>,
}

fn default_bench_batch() -> usize {
    8
}
fn default_repeats() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Output directory; `--out` takes precedence.
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub encoder: Option<EncoderConfig>,
    #[serde(default)]
    pub adapter: AdapterConfig,
    #[serde(default)]
    pub plan: Option<PlanConfig>,
    #[serde(default)]
    pub task: Option<TaskSpec>,
    #[serde(default)]
    pub train: Option<TrainOptions>,
    #[serde(default)]
    pub budget: Option<BudgetConfig>,
    #[serde(default)]
    pub gradcheck: Option<GradcheckConfig>,
    #[serde(default)]
    pub bench: Option<BenchConfig>,
}

/// Seeds of the independent random streams of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub run: u64,
    pub base: u64,
    pub adapters: u64,
    pub task: u64,
    pub train: u64,
    pub gradcheck: u64,
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| CliError::Config(e.to_string()))?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let msg = inner.message().trim().to_string();
            if path == "." || path.is_empty() {
                CliError::Config(msg)
            } else {
                CliError::Config(format!("key `{path}`: {msg}"))
            }
        })
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn seeds(&self) -> Seeds {
        let s = self.seed;
        Seeds {
            run: s,
            base: derive_seed(s, &[1]),
            adapters: derive_seed(s, &[2]),
            task: derive_seed(s, &[3, self.task.as_ref().map_or(0, |t| t.seed)]),
            train: derive_seed(s, &[4, self.train.as_ref().map_or(0, |t| t.seed)]),
            gradcheck: derive_seed(s, &[5, self.gradcheck.as_ref().map_or(0, |g| g.seed)]),
        }
    }

    pub fn encoder(&self) -> CliResult<&EncoderConfig> {
        self.encoder.as_ref().ok_or_else(|| missing("encoder"))
    }

    pub fn plan(&self) -> CliResult<&PlanConfig> {
        self.plan.as_ref().ok_or_else(|| missing("plan"))
    }

    pub fn train_options(&self) -> CliResult<TrainOptions> {
        let mut t = self.train.clone().ok_or_else(|| missing("train"))?;
        t.seed = self.seeds().train;
        Ok(t)
    }

    /// The task with its effective seed.
    pub fn task(&self) -> CliResult<TaskSpec> {
        let mut t = self.task.clone().ok_or_else(|| missing("task"))?;
        t.seed = self.seeds().task;
        Ok(t)
    }

    /// Cross-section checks for a command that builds a model and, when
    /// `needs_task`, trains or evaluates it on the configured task.
    pub fn check_model(&self, needs_task: bool) -> CliResult<()> {
        let enc = self.encoder()?;
        enc.validate()?;
        let plan = self.plan()?;
        if self.adapter.rank > enc.width {
            return Err(CliError::Config(format!(
                "key `adapter.rank`: {} exceeds encoder.width {}",
                self.adapter.rank, enc.width
            )));
        }
        if plan.kind == PlanKind::SkipOne && !enc.fused_qkv {
            return Err(CliError::Config(
                "key `plan.kind`: skip-one needs encoder.fused_qkv = true".into(),
            ));
        }
        if needs_task {
            let task = self.task()?;
            task.validate()?;
            if task.max_len() > enc.max_seq {
                return Err(CliError::Config(format!(
                    "key `task.seq_len`: length {} exceeds encoder.max_seq {}",
                    task.max_len(),
                    enc.max_seq
                )));
            }
            if task.vocab > enc.vocab {
                return Err(CliError::Config(format!(
                    "key `task.vocab`: {} exceeds encoder.vocab {}",
                    task.vocab, enc.vocab
                )));
            }
            if task.num_classes() != enc.classes {
                return Err(CliError::Config(format!(
                    "key `encoder.classes`: {} but the task has {} classes",
                    enc.classes,
                    task.num_classes()
                )));
            }
        }
        Ok(())
    }
}

fn missing(section: &str) -> CliError {
    CliError::Config(format!("missing section [{section}]"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse("[adapter]\nrank = 4\nalhpa = 2.0\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("alhpa"), "{msg}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn wrong_type_names_path() {
        let err = RunConfig::parse("[train]\nlr = \"fast\"\nbatch_size = 1\nmax_epochs = 1\npatience = 1\n").unwrap_err();
        assert!(err.to_string().contains("train.lr"), "{err}");
    }

    #[test]
    fn missing_key_is_named() {
        let err = RunConfig::parse("[adapter]\nalpha = 2.0\n").unwrap_err();
        assert!(err.to_string().contains("rank"), "{err}");
    }

    #[test]
    fn seeds_are_distinct_and_stable() {
        let c = RunConfig::parse("seed = 5").unwrap();
        let s = c.seeds();
        assert_eq!(s, RunConfig::parse("seed = 5").unwrap().seeds());
        let all = [s.base, s.adapters, s.task, s.train, s.gradcheck];
        for i in 0..all.len() {
            for j in 0..i {
                assert_ne!(all[i], all[j]);
            }
        }
    }

    #[test]
    fn plan_kinds_build() {
        assert!(PlanConfig::of(PlanKind::None).build(4).is_empty());
        assert_eq!(PlanConfig::of(PlanKind::Alternating).build(4).len(), 4);
        assert_eq!(PlanConfig::of(PlanKind::DenseLora).build(4).len(), 8);
        assert_eq!(PlanConfig::of(PlanKind::SkipOne).build(4).len(), 2);
    }
}
