//! Subcommand implementations.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use ssmlora::encoder::Bound;
use ssmlora::gradcheck::gradcheck;
use ssmlora::planner::NamedPlan;
use ssmlora::{
    attach_adapters, budget_report, build_encoder, evaluate, gen_task, train, EncoderConfig, ForwardOptions,
    FrozenEncoder, GradcheckOptions, ModelDims, Tape, TokenBatch,
};

use crate::checkpoint::{self, Manifest};
use crate::config::{GradcheckConfig, InitMode, PlanConfig, RunConfig, Seeds, SCHEMA_VERSION};
use crate::error::{CliError, CliResult};
use crate::report::{
    BenchRecord, BenchTimingRecord, BudgetRecord, CoordRecord, EpochLine, EvalRecord, Format, GradcheckSummary,
    JsonLines, Sink, SummaryRecord, TimingRecord,
};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

#[derive(Debug, Parser)]
#[command(name = "ssmlora", version, about = "State-space-chained low-rank adapters on a frozen toy encoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `out` in the config (default `out`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the top-level `seed` of the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Emit only this rendering of tabular reports (default: both).
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Trainable-parameter budget per plan and rank.
    Plan(Common),
    /// Train adapters on the configured task; writes a checkpoint and metrics.
    Train(Common),
    /// Evaluate a checkpoint on the configured task's eval split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to load (default `<out>/checkpoint.bin`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare backward gradients against finite differences.
    Gradcheck(Common),
    /// Forward/backward wallclock and memory estimates per plan and length.
    Bench(Common),
}

/// What a command wrote, for the caller to print.
#[derive(Debug, Default)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub message: String,
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    format: Option<Format>,
}

impl Ctx {
    fn new(c: &Common) -> CliResult<Self> {
        let mut cfg = RunConfig::load(&c.config)?;
        if let Some(s) = c.seed {
            cfg.seed = s;
        }
        let out = c
            .out
            .clone()
            .or_else(|| cfg.out.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        std::fs::create_dir_all(&out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
        Ok(Self {
            cfg,
            out,
            format: c.format,
        })
    }

    fn sink(&self) -> Sink<'_> {
        Sink {
            dir: &self.out,
            format: self.format,
        }
    }
}

pub fn run(cli: Cli) -> CliResult<Outcome> {
    match cli.command {
        Command::Plan(c) => cmd_plan(&Ctx::new(&c)?),
        Command::Train(c) => cmd_train(&Ctx::new(&c)?),
        Command::Eval { common, checkpoint } => cmd_eval(&Ctx::new(&common)?, checkpoint),
        Command::Gradcheck(c) => cmd_gradcheck(&Ctx::new(&c)?),
        Command::Bench(c) => cmd_bench(&Ctx::new(&c)?),
    }
}

fn build_model(enc: &EncoderConfig, cfg: &RunConfig, plan: &PlanConfig, seeds: &Seeds) -> CliResult<FrozenEncoder> {
    let base = build_encoder(enc, seeds.base)?;
    Ok(attach_adapters(base, &plan.build(enc.layers), &cfg.adapter, seeds.adapters)?)
}

fn cmd_plan(ctx: &Ctx) -> CliResult<Outcome> {
    let cfg = &ctx.cfg;
    let (dims, ranks, plans): (ModelDims, Vec<usize>, Vec<PlanConfig>) = match (&cfg.budget, &cfg.encoder, &cfg.plan) {
        (Some(b), _, _) => (b.dims(), b.ranks.clone(), b.plans.clone()),
        (None, Some(enc), Some(p)) => (enc.dims(), vec![cfg.adapter.rank], vec![p.clone()]),
        _ => {
            return Err(CliError::Config(
                "plan needs a [budget] section, or [encoder] and [plan]".into(),
            ))
        }
    };
    let named: Vec<NamedPlan> = plans
        .iter()
        .map(|p| NamedPlan {
            name: p.label(),
            plan: p.build(dims.layers),
            method: p.method(),
        })
        .collect();
    let report = budget_report(&named, &dims, &ranks)?;
    let rows: Vec<BudgetRecord> = report
        .rows
        .iter()
        .map(|r| BudgetRecord {
            schema_version: SCHEMA_VERSION,
            plan: r.plan.clone(),
            method: r.method.to_string(),
            layers: dims.layers,
            width: dims.width,
            r: r.r,
            entries: r.entries,
            params: r.params,
            ratio_to_baseline: r.ratio_to_baseline,
        })
        .collect();
    let files = ctx.sink().emit("budget", &rows, None::<()>)?;
    let mut message = String::new();
    for r in &rows {
        message.push_str(&format!("{:<16} {:<8} r={:<3} params={}\n", r.plan, r.method, r.r, r.params));
    }
    Ok(Outcome { files, message })
}

fn cmd_train(ctx: &Ctx) -> CliResult<Outcome> {
    let cfg = &ctx.cfg;
    cfg.check_model(true)?;
    let enc = cfg.encoder()?;
    let plan_cfg = cfg.plan()?;
    let seeds = cfg.seeds();
    let task = cfg.task()?;
    let opts = cfg.train_options()?;
    opts.validate()?;
    let (train_set, eval_set) = gen_task(&task)?;
    let mut model = build_model(enc, cfg, plan_cfg, &seeds)?;

    let metrics_path = ctx.out.join("metrics.jsonl");
    let mut lines = JsonLines::create(&metrics_path)?;
    let mut sink_err = None;
    let result = train(&mut model, &train_set, &eval_set, &opts, |e| {
        let line = EpochLine {
            schema_version: SCHEMA_VERSION,
            epoch: e.epoch,
            train_loss: e.train_loss,
            train_acc: e.train_acc,
            eval_loss: e.eval_loss,
            eval_acc: e.eval_acc,
        };
        if let Err(err) = lines.push(&line) {
            sink_err.get_or_insert(err);
        }
    });
    if let Some(e) = sink_err {
        return Err(e);
    }
    let metrics = result?;

    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        encoder: enc.clone(),
        adapter: cfg.adapter,
        plan_config: plan_cfg.clone(),
        plan: model.adapters.plan.clone(),
        rank: cfg.adapter.rank,
        seeds,
        base_fingerprint: metrics.base_fingerprint.clone(),
        adapter_params: metrics.adapter_params,
        head_params: metrics.head_params,
    };
    let ckpt = ctx.out.join(CHECKPOINT_FILE);
    let tensors: Vec<(String, &ssmlora::Tensor)> = model.trainable();
    checkpoint::save(&ckpt, &manifest, &tensors)?;

    let summary = SummaryRecord {
        schema_version: SCHEMA_VERSION,
        task: task.kind.as_str().into(),
        plan: plan_cfg.label(),
        method: plan_cfg.method().to_string(),
        r: cfg.adapter.rank,
        adapter_params: metrics.adapter_params,
        head_params: metrics.head_params,
        epochs_run: metrics.epochs.len(),
        best_epoch: metrics.best_epoch,
        best_eval_acc: metrics.best_eval_acc,
        final_eval_acc: metrics.final_eval.accuracy,
        final_eval_loss: metrics.final_eval.loss,
        stopped_early: metrics.stopped_early,
        base_fingerprint: metrics.base_fingerprint.clone(),
    };
    let mut files = vec![metrics_path, ckpt];
    files.extend(ctx.sink().emit("summary", std::slice::from_ref(&summary), None::<()>)?);
    let timing: Vec<TimingRecord> = metrics
        .epochs
        .iter()
        .map(|e| TimingRecord {
            schema_version: SCHEMA_VERSION,
            epoch: e.epoch,
            seconds: e.seconds,
        })
        .collect();
    files.extend(ctx.sink().emit("timing", &timing, None::<()>)?);
    let message = format!(
        "{} epochs, best eval acc {:.4} at epoch {}, adapter params {}, mean epoch {:.2}s\n",
        metrics.epochs.len(),
        metrics.best_eval_acc,
        metrics.best_epoch,
        metrics.adapter_params,
        metrics.mean_epoch_seconds()
    );
    Ok(Outcome { files, message })
}

/// Rebuilds the model recorded in a checkpoint and checks its base.
pub fn restore(path: &Path) -> CliResult<(Manifest, FrozenEncoder)> {
    let (manifest, tensors) = checkpoint::load(path)?;
    let base = build_encoder(&manifest.encoder, manifest.seeds.base)?;
    let mut model = attach_adapters(base, &manifest.plan, &manifest.adapter, manifest.seeds.adapters)?;
    if model.base_fingerprint() != manifest.base_fingerprint {
        return Err(CliError::Io(format!(
            "{}: rebuilt base does not match the recorded fingerprint",
            path.display()
        )));
    }
    model.load_trainable(&tensors)?;
    Ok((manifest, model))
}

fn cmd_eval(ctx: &Ctx, checkpoint: Option<PathBuf>) -> CliResult<Outcome> {
    let cfg = &ctx.cfg;
    let path = checkpoint.unwrap_or_else(|| ctx.out.join(CHECKPOINT_FILE));
    let (manifest, model) = restore(&path)?;
    let task = cfg.task()?;
    task.validate()?;
    if task.max_len() > manifest.encoder.max_seq || task.num_classes() != manifest.encoder.classes {
        return Err(CliError::Config(format!(
            "key `task`: lengths or classes do not fit the checkpoint's encoder ({})",
            path.display()
        )));
    }
    let (_, eval_set) = gen_task(&task)?;
    let (bin_width, batch) = cfg.train.as_ref().map_or((16, 32), |t| (t.bin_width, t.batch_size));
    let report = evaluate(&model, &eval_set, bin_width, batch)?;
    let mut rows = vec![EvalRecord {
        schema_version: SCHEMA_VERSION,
        scope: "overall".into(),
        min_len: eval_set.examples.iter().map(|e| e.tokens.len()).min().unwrap_or(0),
        max_len: eval_set.examples.iter().map(|e| e.tokens.len()).max().unwrap_or(0),
        count: report.count,
        correct: report.correct,
        accuracy: report.accuracy,
    }];
    rows.extend(report.bins.iter().map(|b| EvalRecord {
        schema_version: SCHEMA_VERSION,
        scope: "bin".into(),
        min_len: b.min_len,
        max_len: b.max_len,
        count: b.count,
        correct: b.correct,
        accuracy: b.accuracy,
    }));
    let files = ctx.sink().emit("eval", &rows, None::<()>)?;
    Ok(Outcome {
        files,
        message: format!("eval accuracy {:.4} over {} examples\n", report.accuracy, report.count),
    })
}

/// The sample a gradient check runs on: the first `batch` training
/// examples of the configured task, or seeded uniform ids without one.
fn gradcheck_sample(cfg: &RunConfig, gc: &GradcheckConfig, enc: &EncoderConfig) -> CliResult<(TokenBatch, Vec<usize>)> {
    if let Some(mut task) = cfg.task.clone() {
        task.seed = cfg.seeds().task;
        if let Some(s) = gc.seq {
            task.seq_len = s;
        }
        task.n_train = gc.batch;
        task.n_eval = 0;
        let (tr, _) = gen_task(&task)?;
        let rows: Vec<&[usize]> = tr.examples.iter().map(|e| e.tokens.as_slice()).collect();
        let labels = tr.examples.iter().map(|e| e.label % enc.classes).collect();
        return Ok((TokenBatch::from_rows(&rows)?, labels));
    }
    use rand::Rng;
    let seq = gc.seq.unwrap_or(enc.max_seq);
    let mut rng = ssmlora::seed::rng_for(cfg.seeds().gradcheck, &[0x5a]);
    let ids = (0..gc.batch * seq).map(|_| rng.random_range(0..enc.vocab)).collect();
    let labels = (0..gc.batch).map(|_| rng.random_range(0..enc.classes)).collect();
    Ok((TokenBatch::new(gc.batch, seq, ids)?, labels))
}

fn cmd_gradcheck(ctx: &Ctx) -> CliResult<Outcome> {
    let cfg = &ctx.cfg;
    cfg.check_model(false)?;
    let enc = cfg.encoder()?;
    let gc = cfg.gradcheck.clone().unwrap_or_default();
    if !(gc.tolerance > 0.0) || !(gc.step > 0.0) || gc.batch == 0 {
        return Err(CliError::Config(
            "key `gradcheck`: tolerance and step must be > 0, batch >= 1".into(),
        ));
    }
    let seeds = cfg.seeds();
    let mut model = build_model(enc, cfg, cfg.plan()?, &seeds)?;
    if gc.init == InitMode::Random {
        model.perturb_adapters(gc.init_std, seeds.gradcheck);
    }
    let (tokens, labels) = gradcheck_sample(cfg, &gc, enc)?;
    let opts = GradcheckOptions {
        step: gc.step,
        coords_per_matrix: gc.coords_per_matrix,
        floor: gc.floor,
        seed: seeds.gradcheck,
        include_head: gc.include_head,
        pin_states: true,
    };
    let report = gradcheck(&model, &tokens, &labels, &opts)?;
    let passed = report.passes(gc.tolerance);
    let rows: Vec<CoordRecord> = report
        .checks
        .iter()
        .map(|c| CoordRecord {
            schema_version: SCHEMA_VERSION,
            tensor: c.tensor.clone(),
            index: c.index,
            analytic: c.analytic,
            numeric: c.numeric,
            rel_err: c.rel_err,
        })
        .collect();
    let summary = GradcheckSummary {
        passed,
        tolerance: gc.tolerance,
        step: gc.step,
        max_rel_err: report.max_rel_err,
        worst_tensor: report.worst.as_ref().map(|w| w.tensor.clone()),
        worst_index: report.worst.as_ref().map(|w| w.index),
        loss: report.loss,
        coords: rows.len(),
    };
    let files = ctx.sink().emit("gradcheck", &rows, Some(&summary))?;
    let worst = report
        .worst
        .as_ref()
        .map_or("none".to_string(), |w| format!("{}[{}] analytic {:e} numeric {:e}", w.tensor, w.index, w.analytic, w.numeric));
    let message = format!(
        "{} coordinates, max relative error {:e} (tolerance {:e}), worst {worst}\n",
        rows.len(),
        report.max_rel_err,
        gc.tolerance
    );
    if !passed {
        return Err(CliError::Acceptance(message.trim_end().to_string()));
    }
    Ok(Outcome { files, message })
}

fn cmd_bench(ctx: &Ctx) -> CliResult<Outcome> {
    let cfg = &ctx.cfg;
    let enc = cfg.encoder()?;
    enc.validate()?;
    let bench = cfg.bench.clone().ok_or_else(|| CliError::Config("missing section [bench]".into()))?;
    if bench.seq_lens.is_empty() || bench.batch == 0 || bench.repeats == 0 || bench.plans.is_empty() {
        return Err(CliError::Config(
            "key `bench`: seq_lens and plans must be nonempty, batch and repeats >= 1".into(),
        ));
    }
    if let Some(&s) = bench.seq_lens.iter().find(|&&s| s == 0 || s > enc.max_seq) {
        return Err(CliError::Config(format!(
            "key `bench.seq_lens`: {s} outside 1..={}",
            enc.max_seq
        )));
    }
    let seeds = cfg.seeds();
    let mut rows = Vec::new();
    let mut timing = Vec::new();
    for plan in &bench.plans {
        let model = build_model(enc, cfg, plan, &seeds)?;
        for &seq in &bench.seq_lens {
            let ids: Vec<usize> = (0..bench.batch * seq).map(|i| (i * 7 + 3) % enc.vocab).collect();
            let tokens = TokenBatch::new(bench.batch, seq, ids)?;
            let labels: Vec<usize> = (0..bench.batch).map(|i| i % enc.classes).collect();
            let (mut fwd, mut bwd) = (f64::INFINITY, f64::INFINITY);
            let mut tape_bytes = 0;
            for _ in 0..bench.repeats {
                let tape = Tape::new();
                let bound: Bound<'_> = model.bind(&tape);
                let t0 = Instant::now();
                let out = model.forward(&tape, &bound, &tokens, &ForwardOptions::eval())?;
                let loss = out.logits.cross_entropy(&labels)?;
                let t1 = Instant::now();
                tape.backward(loss)?;
                let t2 = Instant::now();
                fwd = fwd.min((t1 - t0).as_secs_f64() * 1e3);
                bwd = bwd.min((t2 - t1).as_secs_f64() * 1e3);
                tape_bytes = tape.value_bytes();
            }
            let params = model.adapter_param_count();
            rows.push(BenchRecord {
                schema_version: SCHEMA_VERSION,
                plan: plan.label(),
                method: plan.method().to_string(),
                seq_len: seq,
                batch: bench.batch,
                adapter_params: params,
                adapter_bytes: params * std::mem::size_of::<f64>(),
                tape_bytes,
            });
            timing.push(BenchTimingRecord {
                schema_version: SCHEMA_VERSION,
                plan: plan.label(),
                seq_len: seq,
                forward_ms: fwd,
                backward_ms: bwd,
            });
        }
    }
    let mut files = ctx.sink().emit("bench", &rows, None::<()>)?;
    files.extend(ctx.sink().emit("bench_timing", &timing, None::<()>)?);
    let mut message = String::new();
    for (r, t) in rows.iter().zip(&timing) {
        message.push_str(&format!(
            "{:<14} seq={:<4} fwd {:>9.3} ms  bwd {:>9.3} ms  adapter bytes {}\n",
            r.plan, r.seq_len, t.forward_ms, t.backward_ms, r.adapter_bytes
        ));
    }
    Ok(Outcome { files, message })
}
