//! The three-phase training loop.
//!
//! Phase I trains every expert bank on task loss plus `λ·L_aux` while the
//! routing ledger accumulates discrete top-k counts. At the prune step the
//! ledger is turned into a plan and applied once. Phase III keeps training
//! only the survivors, with `λ = 0`.
//!
//! The loop itself is single-threaded; only held-out evaluation fans out.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{init_backbone, AdapterConfig, BackboneConfig, GateMasks, Graph, Model, ModuleId, ProjKind};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::moe_adapter::{aux_loss_on_tape, BankPart, BlockId, ExpertBank, RoutingDecision};
use crate::numerics::{Matrix, Probe, Tape, Var};
use crate::optimizer::{schedule_lr, AdamWConfig, OptimizerState};
use crate::pruner::{apply_plan, build_pruning_plan, PruneReport, PruningPlan};
use crate::routing_ledger::{mean_drift, RoutingLedger};
use crate::synthetic_tasks::{batch_iter, gen_cluster_task, Batch, Dataset, Example, TaskSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub prune: bool,
    /// Overrides the end-of-warm-up prune step.
    #[serde(default)]
    pub prune_at_step: Option<usize>,
    pub tau: f64,
    pub k_min: usize,
    pub lambda: f64,
    pub k: usize,
    /// Mean drift that must be reached before pruning is allowed.
    #[serde(default)]
    pub drift_gate: Option<f64>,
    /// Steps past the planned prune step to wait for the drift gate.
    pub drift_grace_steps: usize,
    pub delta_t: usize,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            warmup_epochs: 1,
            prune: true,
            prune_at_step: None,
            tau: 0.10,
            k_min: 2,
            lambda: 0.01,
            k: 2,
            drift_gate: None,
            drift_grace_steps: 40,
            delta_t: 10,
        }
    }
}

impl PhaseConfig {
    pub fn validate(&self, steps_per_epoch: usize) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be positive".into()));
        }
        if self.k_min < self.k {
            return Err(Error::Config(format!("k_min {} must be >= k {}", self.k_min, self.k)));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.delta_t == 0 {
            return Err(Error::Config("delta_t must be positive".into()));
        }
        if let Some(g) = self.drift_gate {
            if !(g.is_finite() && g >= 0.0) {
                return Err(Error::Config(format!("drift_gate must be finite and >= 0, got {g}")));
            }
        }
        if self.prune {
            let total = self.epochs * steps_per_epoch;
            match self.prune_at_step {
                Some(p) if p == 0 || p > total => {
                    return Err(Error::Config(format!("prune_at_step {p} must be in 1..={total}")));
                }
                Some(_) => {}
                None if self.warmup_epochs == 0 || self.warmup_epochs >= self.epochs => {
                    return Err(Error::Config(format!(
                        "warmup_epochs {} must be in 1..{}",
                        self.warmup_epochs, self.epochs
                    )));
                }
                None => {}
            }
        }
        Ok(())
    }

    /// Planned prune step (1-based, pruning happens after it), if any.
    pub fn prune_step(&self, steps_per_epoch: usize) -> Option<usize> {
        self.prune
            .then(|| self.prune_at_step.unwrap_or(self.warmup_epochs * steps_per_epoch))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let a = AdamWConfig::default();
        Self {
            lr: 3e-4,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            weight_decay: a.weight_decay,
            warmup_frac: 0.1,
            batch_size: 32,
        }
    }
}

impl OptimConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("eps must be > 0 and weight_decay >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!("warmup_frac must lie in [0, 1], got {}", self.warmup_frac)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogConfig {
    /// Fill the `step_wall_seconds` column of metrics.csv. Off by default
    /// so the file stays byte-identical across runs.
    pub wall_clock_in_metrics: bool,
    /// Steps skipped at the start of each throughput window.
    pub warmup_skip: usize,
    pub eval_exec: Exec,
}

impl Default for LogConfig {
    fn default() -> Self {
        Self {
            wall_clock_in_metrics: false,
            warmup_skip: 2,
            eval_exec: Exec::Auto,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Seeds backbone and adapter initialization.
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub adapter: AdapterConfig,
    /// `task.seed` is the data seed: generation and batch order.
    pub task: TaskSpec,
    pub phase: PhaseConfig,
    pub optim: OptimConfig,
    pub log: LogConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            backbone: BackboneConfig::default(),
            adapter: AdapterConfig::default(),
            task: TaskSpec::default(),
            phase: PhaseConfig::default(),
            optim: OptimConfig::default(),
            log: LogConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn steps_per_epoch(&self) -> usize {
        self.task.n_train.div_ceil(self.optim.batch_size.max(1))
    }

    pub fn total_steps(&self) -> usize {
        self.phase.epochs * self.steps_per_epoch()
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.task.validate()?;
        self.optim.validate()?;
        self.phase.validate(self.steps_per_epoch())?;
        if self.task.vocab_size > self.backbone.vocab_size {
            return Err(Error::Config(format!(
                "task.vocab_size {} exceeds backbone.vocab_size {}",
                self.task.vocab_size, self.backbone.vocab_size
            )));
        }
        let n = self.adapter.n_experts;
        if n == 0 || self.phase.k > n || self.phase.k_min > n {
            return Err(Error::Config(format!(
                "need 1 <= k {} <= k_min {} <= n_experts {n}",
                self.phase.k, self.phase.k_min
            )));
        }
        if !(self.adapter.alpha.is_finite() && self.adapter.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.adapter.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Explore,
    Specialize,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Explore => "explore",
            Phase::Specialize => "specialize",
        })
    }
}

/// `lambda` up to and including the prune step, 0 after it.
pub fn phase_lambda(step: usize, pruned_at: Option<usize>, lambda: f64) -> f64 {
    match pruned_at {
        Some(p) if step > p => 0.0,
        _ => lambda,
    }
}

/// One metrics.csv row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub phase: Phase,
    pub lambda: f64,
    pub task_loss: f64,
    pub aux_loss: f64,
    pub total_loss: f64,
    pub tokens: usize,
    pub step_wall_seconds: f64,
    pub mean_gini: Option<f64>,
    pub mean_entropy: Option<f64>,
    pub mean_drift: Option<f64>,
    pub trainable_params: usize,
}

pub const METRICS_HEADER: &str = "step,epoch,phase,lambda,task_loss,aux_loss,total_loss,tokens,step_wall_seconds,mean_gini,mean_entropy,mean_drift,trainable_params";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_csv(records: &[StepRecord], wall_clock: bool) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        let wall = if wall_clock { r.step_wall_seconds.to_string() } else { String::new() };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.step,
            r.epoch,
            r.phase,
            r.lambda,
            r.task_loss,
            r.aux_loss,
            r.total_loss,
            r.tokens,
            wall,
            opt(r.mean_gini),
            opt(r.mean_entropy),
            opt(r.mean_drift),
            r.trainable_params
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTiming {
    pub step: usize,
    pub phase: Phase,
    pub tokens: usize,
    pub seconds: f64,
}

pub fn timing_csv(log: &[StepTiming]) -> String {
    let mut out = String::from("step,phase,tokens,step_wall_seconds\n");
    for t in log {
        let _ = writeln!(out, "{},{},{},{}", t.step, t.phase, t.tokens, t.seconds);
    }
    out
}

pub fn parse_timing_csv(text: &str) -> Result<Vec<StepTiming>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = || Error::Config(format!("timing.csv line {}: malformed row {line:?}", i + 1));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad());
        }
        let phase = match f[1] {
            "explore" => Phase::Explore,
            "specialize" => Phase::Specialize,
            _ => return Err(bad()),
        };
        out.push(StepTiming {
            step: f[0].parse().map_err(|_| bad())?,
            phase,
            tokens: f[2].parse().map_err(|_| bad())?,
            seconds: f[3].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    pub steps: usize,
    pub tokens_per_second: f64,
    pub median_step_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub pre: Option<WindowStats>,
    pub post: Option<WindowStats>,
    /// post / pre tokens per second.
    pub ratio: Option<f64>,
    pub flags: Vec<String>,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn window_stats(steps: &[&StepTiming], warmup_skip: usize) -> Result<WindowStats> {
    if steps.len() <= warmup_skip {
        return Err(Error::invalid(format!(
            "throughput window of {} steps is not longer than warmup_skip {warmup_skip}",
            steps.len()
        )));
    }
    let kept = &steps[warmup_skip..];
    if let Some(t) = kept.iter().find(|t| !(t.seconds > 0.0 && t.seconds.is_finite())) {
        return Err(Error::NonFinite(format!("step {} took {} s", t.step, t.seconds)));
    }
    Ok(WindowStats {
        steps: kept.len(),
        tokens_per_second: median(kept.iter().map(|t| t.tokens as f64 / t.seconds).collect()),
        median_step_seconds: median(kept.iter().map(|t| t.seconds).collect()),
    })
}

/// Median tokens per second for the pre- and post-prune windows, each
/// skipping its first `warmup_skip` steps.
pub fn measure_throughput(log: &[StepTiming], warmup_skip: usize) -> Result<Throughput> {
    let mut flags = Vec::new();
    let mut stats = |phase: Phase| -> Result<Option<WindowStats>> {
        let steps: Vec<&StepTiming> = log.iter().filter(|t| t.phase == phase).collect();
        if steps.is_empty() {
            flags.push(format!("{phase} window is empty"));
            return Ok(None);
        }
        window_stats(&steps, warmup_skip).map(Some)
    };
    let pre = stats(Phase::Explore)?;
    let post = stats(Phase::Specialize)?;
    let ratio = match (&pre, &post) {
        (Some(a), Some(b)) => Some(b.tokens_per_second / a.tokens_per_second),
        _ => None,
    };
    Ok(Throughput { pre, post, ratio, flags })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleParams {
    pub layer: usize,
    pub kind: ProjKind,
    pub n_experts: usize,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub total: usize,
    pub per_module: Vec<ModuleParams>,
    pub mean_retained: f64,
}

pub fn param_report(adapters: &BTreeMap<ModuleId, ExpertBank>) -> ParamReport {
    let per_module: Vec<ModuleParams> = adapters
        .iter()
        .map(|(m, b)| ModuleParams {
            layer: m.layer,
            kind: m.kind,
            n_experts: b.n_experts(),
            params: b.trainable_param_count(),
        })
        .collect();
    let mean_retained = if per_module.is_empty() {
        0.0
    } else {
        per_module.iter().map(|m| m.n_experts as f64).sum::<f64>() / per_module.len() as f64
    };
    ParamReport {
        total: per_module.iter().map(|m| m.params).sum(),
        per_module,
        mean_retained,
    }
}

/// Candidate with the highest logit; ties go to the earlier candidate.
fn argmax_over(row: &[f64], candidates: &[usize]) -> usize {
    let mut best = candidates[0];
    for &c in candidates {
        if row[c] > row[best] {
            best = c;
        }
    }
    best
}

const EVAL_CHUNK: usize = 50;

/// Exact-match accuracy of the greedy final-position prediction, taken
/// over the `candidates` token ids (the task's label tokens).
pub fn evaluate(model: &Model, examples: &[Example], candidates: &[usize], exec: Exec) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::invalid("evaluation over an empty split"));
    }
    let vocab = model.backbone.config.vocab_size;
    if candidates.is_empty() || candidates.iter().any(|&c| c >= vocab) {
        return Err(Error::invalid(format!("candidates {candidates:?} must be non-empty ids below {vocab}")));
    }
    let chunks: Vec<&[Example]> = examples.chunks(EVAL_CHUNK).collect();
    let hits = exec.map(chunks.len(), |i| -> Result<usize> {
        let batch = Batch::from_examples(&chunks[i].iter().collect::<Vec<_>>())?;
        let logits = model.forward(&batch.tokens, None)?;
        Ok(batch
            .tokens
            .last_rows()
            .iter()
            .zip(&batch.targets)
            .filter(|(&r, &t)| argmax_over(logits.row(r), candidates) == t)
            .count())
    });
    let mut correct = 0;
    for h in hits {
        correct += h?;
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Handles for one step's objective.
pub struct LossGraph {
    pub graph: Graph,
    pub task: Var,
    pub aux: Option<Var>,
    pub total: Var,
}

/// Records `L_task + λ·L_aux` on `tape`. The aux term is only built for
/// `λ > 0`.
pub fn build_loss(
    tape: &mut Tape,
    model: &Model,
    batch: &Batch,
    lambda: f64,
    masks: Option<&GateMasks>,
) -> Result<LossGraph> {
    let graph = model.build(tape, &batch.tokens, masks)?;
    let last = tape.gather_rows(graph.logits, batch.tokens.last_rows())?;
    let task = tape.cross_entropy(last, batch.targets.clone())?;
    if lambda > 0.0 {
        let traces: Vec<(Var, &RoutingDecision)> = graph.traces.values().map(|t| (t.probs, &t.decision)).collect();
        let aux = aux_loss_on_tape(tape, &traces)?;
        let scaled = tape.scale(aux, lambda)?;
        let total = tape.add(task, scaled)?;
        Ok(LossGraph {
            graph,
            task,
            aux: Some(aux),
            total,
        })
    } else {
        Ok(LossGraph {
            graph,
            task,
            aux: None,
            total: task,
        })
    }
}

/// Trainable blocks in module order, A, B, gate within a module.
pub fn param_blocks(model: &Model) -> Vec<(BlockId, Matrix)> {
    model
        .adapters
        .iter()
        .flat_map(|(m, bank)| {
            BankPart::ALL
                .into_iter()
                .map(move |part| (BlockId { module: *m, part }, bank.block(part).clone()))
        })
        .collect()
}

/// Copy of `model` with its trainable blocks replaced, in [`param_blocks`] order.
pub fn with_params(model: &Model, params: &[Matrix]) -> Result<Model> {
    let mut out = model.clone();
    let mut it = params.iter();
    for bank in out.adapters.values_mut() {
        for part in BankPart::ALL {
            let p = it.next().ok_or_else(|| Error::invalid("too few parameter blocks"))?;
            if p.shape() != bank.block(part).shape() {
                return Err(Error::shape("with_params", bank.block(part).shape_str(), p.shape_str()));
            }
            *bank.block_mut(part) = p.clone();
        }
    }
    if it.next().is_some() {
        return Err(Error::invalid("too many parameter blocks"));
    }
    Ok(out)
}

/// Top-k selections of every module, in module order.
pub type RoutingSignature = Vec<Vec<Vec<usize>>>;

/// Objective value and gradients in [`param_blocks`] order.
pub fn loss_and_grads(model: &Model, batch: &Batch, lambda: f64) -> Result<(f64, Vec<Matrix>)> {
    let mut tape = Tape::new();
    let lg = build_loss(&mut tape, model, batch, lambda, None)?;
    let mut grads = tape.backward(lg.total)?;
    let loss = tape.value(lg.total).item()?;
    let mut out = Vec::new();
    for vars in lg.graph.params.values() {
        for part in BankPart::ALL {
            out.push(grads.take(vars.get(part)));
        }
    }
    Ok((loss, out))
}

/// Objective as a function of the flat parameter list, with the routing
/// decisions as signature so finite differences can skip routing flips.
pub fn loss_probe(model: &Model, batch: &Batch, lambda: f64, params: &[Matrix]) -> Result<Probe<RoutingSignature>> {
    let m = with_params(model, params)?;
    let mut tape = Tape::new();
    let lg = build_loss(&mut tape, &m, batch, lambda, None)?;
    Ok(Probe {
        loss: tape.value(lg.total).item()?,
        signature: lg.graph.traces.values().map(|t| t.decision.selected.clone()).collect(),
    })
}

/// Optimizer moments have the shape of their block everywhere.
pub fn check_state_lockstep(model: &Model, optimizer: &OptimizerState) -> Result<()> {
    for (module, bank) in &model.adapters {
        for part in BankPart::ALL {
            let block = BlockId { module: *module, part };
            if let Some(mo) = optimizer.moments(block) {
                let want = bank.block(part).shape();
                if mo.m.shape() != want || mo.v.shape() != want {
                    return Err(Error::shape("state_lockstep", mo.m.shape_str(), bank.block(part).shape_str()));
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub config: TrainConfig,
    pub metrics: Vec<StepRecord>,
    pub timing: Vec<StepTiming>,
    /// Ledger at the end of the run.
    pub ledger: RoutingLedger,
    /// Ledger the plan was built from.
    pub ledger_at_prune: Option<RoutingLedger>,
    pub plan: Option<PruningPlan>,
    pub prune_report: Option<PruneReport>,
    pub model: Model,
    pub optimizer: OptimizerState,
    pub throughput: Throughput,
    pub params_before: ParamReport,
    pub params: ParamReport,
    pub eval_accuracy: f64,
    pub final_param_checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub params_before: usize,
    pub params_after: usize,
    pub reduction_pct: f64,
    pub prune_step: Option<usize>,
    pub eval_accuracy: f64,
    pub mean_retained: f64,
    pub throughput: Throughput,
    pub final_param_checksum: String,
}

impl RunArtifacts {
    pub fn prune_step(&self) -> Option<usize> {
        self.plan.as_ref().map(|p| p.step)
    }

    pub fn summary(&self) -> RunSummary {
        let before = self.params_before.total;
        let after = self.params.total;
        RunSummary {
            params_before: before,
            params_after: after,
            reduction_pct: reduction_pct(before, after),
            prune_step: self.prune_step(),
            eval_accuracy: self.eval_accuracy,
            mean_retained: self.params.mean_retained,
            throughput: self.throughput.clone(),
            final_param_checksum: self.final_param_checksum.clone(),
        }
    }

    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.metrics, self.config.log.wall_clock_in_metrics)
    }

    /// metrics.csv, timing.csv, ledger.json, plan.json (if pruned),
    /// report.json and model.json.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.csv"), self.metrics_csv())?;
        std::fs::write(dir.join("timing.csv"), timing_csv(&self.timing))?;
        std::fs::write(dir.join("ledger.json"), self.ledger_at_prune.as_ref().unwrap_or(&self.ledger).to_json()?)?;
        if let Some(plan) = &self.plan {
            std::fs::write(dir.join("plan.json"), plan.to_json()?)?;
        }
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&self.summary())?)?;
        let model = serde_json::json!({ "model": self.model, "optimizer": self.optimizer });
        std::fs::write(dir.join("model.json"), serde_json::to_string(&model)?)?;
        Ok(())
    }
}

pub fn reduction_pct(before: usize, after: usize) -> f64 {
    if before == 0 {
        0.0
    } else {
        100.0 * (1.0 - after as f64 / before as f64)
    }
}

fn mean_of(vals: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = vals.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Runs all three phases on a freshly generated dataset.
pub fn train(config: &TrainConfig) -> Result<RunArtifacts> {
    config.validate()?;
    let data = gen_cluster_task(&config.task)?;
    train_on(config, &data)
}

/// Runs all three phases on `data`.
pub fn train_on(config: &TrainConfig, data: &Dataset) -> Result<RunArtifacts> {
    config.validate()?;
    let phase_cfg = &config.phase;
    let backbone = init_backbone(&config.backbone, config.seed)?;
    let mut model = Model::new(backbone, &config.adapter, phase_cfg.k, config.seed)?;
    let mut optimizer = OptimizerState::new(config.optim.adamw());
    let mut ledger = RoutingLedger::for_model(&model, phase_cfg.delta_t);
    let params_before = param_report(&model.adapters);

    let spe = config.steps_per_epoch();
    let total = config.total_steps();
    let planned = phase_cfg.prune_step(spe);
    let mut pruned_at: Option<usize> = None;
    let mut last_drift: Option<f64> = None;
    let mut plan = None;
    let mut prune_report = None;
    let mut ledger_at_prune = None;
    let mut metrics = Vec::with_capacity(total);
    let mut timing = Vec::with_capacity(total);

    let mut step = 0;
    for epoch in 0..phase_cfg.epochs {
        for batch in batch_iter(&data.train, config.optim.batch_size, config.task.seed, epoch)? {
            step += 1;
            let lambda = phase_lambda(step, pruned_at, phase_cfg.lambda);
            let phase = if pruned_at.is_some() { Phase::Specialize } else { Phase::Explore };
            let lr = schedule_lr(step, total, config.optim.lr, config.optim.warmup_frac);
            let tokens = batch.tokens.n_tokens();

            let started = Instant::now();
            let mut tape = Tape::new();
            let lg = build_loss(&mut tape, &model, &batch, lambda, None)?;
            let mut grads = tape.backward(lg.total)?;
            let mut grad_map: BTreeMap<BlockId, Matrix> = BTreeMap::new();
            for (module, vars) in &lg.graph.params {
                for part in BankPart::ALL {
                    grad_map.insert(BlockId { module: *module, part }, grads.take(vars.get(part)));
                }
            }
            let mut updates = Vec::with_capacity(grad_map.len());
            for (module, bank) in model.adapters.iter_mut() {
                let ExpertBank { a_stack, b_stack, gate, .. } = bank;
                for (part, block) in [(BankPart::A, a_stack), (BankPart::B, b_stack), (BankPart::Gate, gate)] {
                    let id = BlockId { module: *module, part };
                    let g = grad_map
                        .get(&id)
                        .ok_or_else(|| Error::invalid(format!("no gradient for {module}/{part:?}")))?;
                    updates.push((id, block, g));
                }
            }
            optimizer.step(updates, lr)?;
            for (module, trace) in &lg.graph.traces {
                ledger.record(*module, &trace.decision.selected)?;
            }
            let seconds = started.elapsed().as_secs_f64();

            let task_loss = tape.value(lg.task).item()?;
            let aux_loss = match lg.aux {
                Some(a) => tape.value(a).item()?,
                None => 0.0,
            };
            let total_loss = tape.value(lg.total).item()?;
            if !total_loss.is_finite() {
                return Err(Error::NonFinite(format!("loss at step {step}")));
            }
            let current = ledger.current_metrics();
            let mean_gini = mean_of(current.values().flatten().map(|m| m.0));
            let mean_entropy = mean_of(current.values().flatten().map(|m| m.1));
            let mean_drift_now = if step % phase_cfg.delta_t == 0 {
                let rows = ledger.snapshot_and_report(step);
                let d = mean_drift(&rows);
                if d.is_some() {
                    last_drift = d;
                }
                d
            } else {
                None
            };
            metrics.push(StepRecord {
                step,
                epoch: epoch + 1,
                phase,
                lambda,
                task_loss,
                aux_loss,
                total_loss,
                tokens,
                step_wall_seconds: seconds,
                mean_gini,
                mean_entropy,
                mean_drift: mean_drift_now,
                trainable_params: model.trainable_params(),
            });
            timing.push(StepTiming {
                step,
                phase,
                tokens,
                seconds,
            });

            if let (Some(target), None) = (planned, pruned_at) {
                if step >= target && prune_ready(phase_cfg, step, target, total, last_drift) {
                    let p = build_pruning_plan(&ledger, &model.adapters, phase_cfg.tau, phase_cfg.k_min, step)?;
                    ledger_at_prune = Some(ledger.clone());
                    let report = apply_plan(&mut model, &mut optimizer, Some(&mut ledger), &p)?;
                    check_state_lockstep(&model, &optimizer)?;
                    log::info!(
                        "pruned at step {step}: {} -> {} trainable parameters",
                        report.params_before,
                        report.params_after
                    );
                    prune_report = Some(report);
                    plan = Some(p);
                    pruned_at = Some(step);
                }
            }
        }
        log::info!(
            "epoch {} done: task loss {:.4}",
            epoch + 1,
            metrics.last().map(|r| r.task_loss).unwrap_or(f64::NAN)
        );
    }

    let throughput = match measure_throughput(&timing, config.log.warmup_skip) {
        Ok(t) => t,
        Err(e) => {
            log::warn!("throughput not measured: {e}");
            Throughput {
                pre: None,
                post: None,
                ratio: None,
                flags: vec![e.to_string()],
            }
        }
    };
    let eval_accuracy = evaluate(&model, &data.eval, &data.spec.label_tokens(), config.log.eval_exec)?;
    Ok(RunArtifacts {
        config: config.clone(),
        metrics,
        timing,
        ledger,
        ledger_at_prune,
        plan,
        prune_report,
        params: param_report(&model.adapters),
        params_before,
        final_param_checksum: model.adapter_checksum(),
        model,
        optimizer,
        throughput,
        eval_accuracy,
    })
}

fn prune_ready(cfg: &PhaseConfig, step: usize, target: usize, total: usize, last_drift: Option<f64>) -> bool {
    let Some(gate) = cfg.drift_gate else {
        return true;
    };
    if matches!(last_drift, Some(d) if d <= gate) {
        return true;
    }
    if step >= target + cfg.drift_grace_steps || step == total {
        log::warn!("drift gate {gate} not reached by step {step} (last drift {last_drift:?}); pruning anyway");
        return true;
    }
    false
}
