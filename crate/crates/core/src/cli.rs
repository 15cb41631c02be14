//! Command-line surface: `train`, `plan`, `report`, `data` and `config`.
//!
//! Exit codes: 0 on success, 1 for configuration or input errors, 2 for
//! runtime failures.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::{AdapterConfig, BackboneConfig, ProjKind};
use crate::error::{Error, Result};
use crate::pruner::{heatmap_csv, plan_from_ledger, PruningPlan, RetainedCount};
use crate::routing_ledger::RoutingLedger;
use crate::synthetic_tasks::{dump_jsonl, gen_cluster_task, TaskSpec};
use crate::trainer::{
    measure_throughput, parse_timing_csv, reduction_pct, train, LogConfig, OptimConfig, PhaseConfig, Throughput,
    TrainConfig, METRICS_HEADER,
};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "DMEP_OUT";

/// Everything a run needs, as written to `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: Option<PathBuf>,
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub adapter: AdapterConfig,
    pub task: TaskSpec,
    pub phase: PhaseConfig,
    pub optim: OptimConfig,
    pub log: LogConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_train(TrainConfig::default(), None)
    }
}

impl RunConfig {
    pub fn from_train(t: TrainConfig, output_dir: Option<PathBuf>) -> Self {
        Self {
            output_dir,
            seed: t.seed,
            backbone: t.backbone,
            adapter: t.adapter,
            task: t.task,
            phase: t.phase,
            optim: t.optim,
            log: t.log,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            backbone: self.backbone.clone(),
            adapter: self.adapter.clone(),
            task: self.task.clone(),
            phase: self.phase.clone(),
            optim: self.optim.clone(),
            log: self.log.clone(),
        }
    }

    /// `--out`, else `output_dir`, else `$DMEP_OUT/seed<seed>`, else
    /// `runs/seed<seed>`.
    pub fn resolve_output_dir(&self, out: Option<&Path>) -> PathBuf {
        if let Some(o) = out {
            return o.to_path_buf();
        }
        if let Some(o) = &self.output_dir {
            return o.clone();
        }
        let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
        root.join(format!("seed{}", self.seed))
    }
}

fn leaf_paths(v: &Value, prefix: &str, out: &mut Vec<String>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                if child.is_object() {
                    leaf_paths(child, &p, out);
                } else {
                    out.push(p);
                }
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

fn lookup_mut<'a>(v: &'a mut Value, path: &str) -> Option<&'a mut Value> {
    path.split('.').try_fold(v, |cur, k| cur.as_object_mut()?.get_mut(k))
}

/// Applies one `key=value` override. Dotted keys address a field
/// directly; a bare key must name exactly one leaf anywhere in the config.
pub fn apply_override(config: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    let mut leaves = Vec::new();
    leaf_paths(config, "", &mut leaves);
    let path = if leaves.iter().any(|l| l == key) {
        key.to_string()
    } else {
        let hits: Vec<&String> = leaves
            .iter()
            .filter(|l| l.rsplit('.').next() == Some(key))
            .collect();
        match hits.as_slice() {
            [one] => (*one).clone(),
            [] => return Err(Error::Config(format!("unknown config key {key:?}"))),
            many => {
                return Err(Error::Config(format!(
                    "ambiguous config key {key:?}: {}",
                    many.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
                )))
            }
        }
    };
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    let slot = lookup_mut(config, &path).ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
    *slot = value;
    Ok(())
}

/// Reads `path` (or defaults), applies overrides and validates.
pub fn resolve_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let base: RunConfig = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    let mut value = serde_json::to_value(&base)?;
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let cfg: RunConfig =
        serde_json::from_value(value).map_err(|e| Error::Config(format!("after overrides: {e}")))?;
    cfg.train_config().validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub dir: PathBuf,
    pub final_param_checksum: String,
    pub eval_accuracy: f64,
}

/// Resolves the config, writes it to the output directory, trains and
/// writes every artifact there.
pub fn cmd_train(config_path: Option<&Path>, overrides: &[String], out: Option<&Path>) -> Result<TrainOutcome> {
    let cfg = resolve_config(config_path, overrides)?;
    let dir = cfg.resolve_output_dir(out);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    log::info!("training into {}", dir.display());
    let artifacts = train(&cfg.train_config())?;
    artifacts.write_to(&dir)?;
    let retained: Vec<RetainedCount> = artifacts
        .params
        .per_module
        .iter()
        .map(|m| RetainedCount {
            layer: m.layer,
            kind: m.kind,
            retained: m.n_experts,
        })
        .collect();
    std::fs::write(dir.join("heatmap.csv"), heatmap_csv(&retained))?;
    Ok(TrainOutcome {
        dir,
        final_param_checksum: artifacts.final_param_checksum,
        eval_accuracy: artifacts.eval_accuracy,
    })
}

/// Dry-run plan from a dumped ledger.
pub fn cmd_plan(ledger_path: &Path, tau: f64, k_min: usize) -> Result<PruningPlan> {
    let text = std::fs::read_to_string(ledger_path)
        .map_err(|e| Error::Config(format!("{}: {e}", ledger_path.display())))?;
    let ledger = RoutingLedger::from_json(&text)
        .map_err(|e| Error::Config(format!("{}: not a valid ledger: {e}", ledger_path.display())))?;
    let step = ledger.history.last().map(|r| r.step).unwrap_or(0);
    plan_from_ledger(&ledger, tau, k_min, step)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub params_before: usize,
    pub params_after: usize,
    pub reduction_pct: f64,
    pub throughput: Option<Throughput>,
    pub mean_retained: f64,
    pub mean_retained_by_kind: BTreeMap<ProjKind, f64>,
    pub mean_retained_attention: f64,
    pub mean_retained_mlp: f64,
    pub retained: Vec<RetainedCount>,
}

/// First and last `trainable_params` of metrics.csv.
fn metrics_param_range(text: &str) -> Result<(usize, usize)> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Config("metrics.csv: unexpected header".into()));
    }
    let params: Vec<usize> = lines
        .map(|l| l.rsplit(',').next().and_then(|x| x.parse().ok()))
        .collect::<Option<_>>()
        .ok_or_else(|| Error::Config("metrics.csv: malformed trainable_params column".into()))?;
    match (params.first(), params.last()) {
        (Some(&a), Some(&b)) => Ok((a, b)),
        _ => Err(Error::Config("metrics.csv has no rows".into())),
    }
}

fn mean(xs: &[usize]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<usize>() as f64 / xs.len() as f64
    }
}

/// Recomputes the run summary from plan.json, metrics.csv, timing.csv and
/// config.json, and writes heatmap.csv.
pub fn cmd_report(run_dir: &Path) -> Result<RunReport> {
    let read = |name: &str| {
        std::fs::read_to_string(run_dir.join(name))
            .map_err(|e| Error::Config(format!("{}: {e}", run_dir.join(name).display())))
    };
    let (first, last) = metrics_param_range(&read("metrics.csv")?)?;
    let plan_path = run_dir.join("plan.json");
    let plan = if plan_path.exists() {
        Some(PruningPlan::from_json(&read("plan.json")?)?)
    } else {
        None
    };
    let (params_before, params_after, retained) = match &plan {
        Some(p) => {
            if p.params_before != first || p.params_after != last || p.recomputed_params_after() != p.params_after {
                return Err(Error::invalid(format!(
                    "plan.json ({} -> {}) disagrees with metrics.csv ({first} -> {last})",
                    p.params_before, p.params_after
                )));
            }
            (p.params_before, p.params_after, p.retained_counts())
        }
        None => {
            let cfg: RunConfig = serde_json::from_str(&read("config.json")?)?;
            let retained = cfg
                .backbone
                .module_ids()
                .into_iter()
                .map(|m| RetainedCount {
                    layer: m.layer,
                    kind: m.kind,
                    retained: cfg.adapter.n_experts,
                })
                .collect();
            (first, last, retained)
        }
    };
    let throughput = match read("timing.csv") {
        Ok(text) => {
            let skip = serde_json::from_str::<RunConfig>(&read("config.json")?)
                .map(|c| c.log.warmup_skip)
                .unwrap_or(LogConfig::default().warmup_skip);
            Some(measure_throughput(&parse_timing_csv(&text)?, skip)?)
        }
        Err(_) => None,
    };
    let by_kind: BTreeMap<ProjKind, f64> = ProjKind::ALL
        .into_iter()
        .map(|k| {
            let xs: Vec<usize> = retained.iter().filter(|r| r.kind == k).map(|r| r.retained).collect();
            (k, mean(&xs))
        })
        .collect();
    let pick = |attn: bool| -> Vec<usize> {
        retained
            .iter()
            .filter(|r| r.kind.is_attention() == attn)
            .map(|r| r.retained)
            .collect()
    };
    std::fs::write(run_dir.join("heatmap.csv"), heatmap_csv(&retained))?;
    Ok(RunReport {
        params_before,
        params_after,
        reduction_pct: reduction_pct(params_before, params_after),
        throughput,
        mean_retained: mean(&retained.iter().map(|r| r.retained).collect::<Vec<_>>()),
        mean_retained_by_kind: by_kind,
        mean_retained_attention: pick(true).iter().sum::<usize>() as f64 / pick(true).len().max(1) as f64,
        mean_retained_mlp: pick(false).iter().sum::<usize>() as f64 / pick(false).len().max(1) as f64,
        retained,
    })
}

pub fn render_report(r: &RunReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "params before      {}", r.params_before);
    let _ = writeln!(s, "params after       {}", r.params_after);
    let _ = writeln!(s, "reduction          {:.2}%", r.reduction_pct);
    let tps = |w: Option<&crate::trainer::WindowStats>| {
        w.map(|w| format!("{:.1}", w.tokens_per_second)).unwrap_or_else(|| "n/a".into())
    };
    match &r.throughput {
        Some(t) => {
            let _ = writeln!(s, "pre-prune tok/s    {}", tps(t.pre.as_ref()));
            let _ = writeln!(s, "post-prune tok/s   {}", tps(t.post.as_ref()));
            for f in &t.flags {
                let _ = writeln!(s, "note               {f}");
            }
        }
        None => {
            let _ = writeln!(s, "throughput         n/a (no timing.csv)");
        }
    }
    let _ = writeln!(s, "mean retained      {:.3}", r.mean_retained);
    let _ = writeln!(s, "  attention        {:.3}", r.mean_retained_attention);
    let _ = writeln!(s, "  mlp              {:.3}", r.mean_retained_mlp);
    for (k, v) in &r.mean_retained_by_kind {
        let _ = writeln!(s, "  {:<16} {v:.3}", k.name());
    }
    s
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Json(_) => 1,
        _ => 2,
    }
}

#[derive(Debug, Parser)]
#[command(name = "dmep", version, about = "Module-wise expert pruning for LoRA mixture-of-experts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write run artifacts.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config key, e.g. `--set tau=0.15` or `--set phase.lambda=0`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Output directory (overrides `output_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute survivor sets from a dumped ledger without touching a model.
    Plan {
        #[arg(long)]
        ledger: PathBuf,
        #[arg(long, default_value_t = 0.10)]
        tau: f64,
        #[arg(long, default_value_t = 2)]
        k_min: usize,
        /// Write the plan here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a run directory and write heatmap.csv.
    Report {
        run_dir: PathBuf,
        /// Print JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Dump the generated dataset as JSON lines.
    Data {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the resolved configuration.
    Config {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

fn dispatch(cmd: Command) -> Result<()> {
    let text = match cmd {
        Command::Train { config, set, out } => {
            let o = cmd_train(config.as_deref(), &set, out.as_deref())?;
            format!(
                "run written to {}\neval accuracy {:.4}\nfinal parameter checksum {}\n",
                o.dir.display(),
                o.eval_accuracy,
                o.final_param_checksum
            )
        }
        Command::Plan { ledger, tau, k_min, out } => {
            let json = cmd_plan(&ledger, tau, k_min)?.to_json()?;
            match out {
                Some(p) => {
                    std::fs::write(p, json)?;
                    String::new()
                }
                None => json + "\n",
            }
        }
        Command::Report { run_dir, json } => {
            let r = cmd_report(&run_dir)?;
            if json {
                serde_json::to_string_pretty(&r)? + "\n"
            } else {
                render_report(&r)
            }
        }
        Command::Data { config, set, out } => {
            let cfg = resolve_config(config.as_deref(), &set)?;
            dump_jsonl(&gen_cluster_task(&cfg.task)?, &out)?;
            String::new()
        }
        Command::Config { config, set } => {
            let cfg = resolve_config(config.as_deref(), &set)?;
            serde_json::to_string_pretty(&cfg)? + "\n"
        }
    };
    let mut stdout = std::io::stdout().lock();
    match stdout.write_all(text.as_bytes()).and_then(|()| stdout.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_value() -> Value {
        serde_json::to_value(RunConfig::default()).unwrap()
    }

    #[test]
    fn bare_and_dotted_overrides() {
        let mut v = default_value();
        apply_override(&mut v, "tau=0.15").unwrap();
        apply_override(&mut v, "phase.lambda=0").unwrap();
        apply_override(&mut v, "seed=7").unwrap();
        apply_override(&mut v, "drift_gate=0.05").unwrap();
        let cfg: RunConfig = serde_json::from_value(v).unwrap();
        assert_eq!(cfg.phase.tau, 0.15);
        assert_eq!(cfg.phase.lambda, 0.0);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.task.seed, TaskSpec::default().seed);
        assert_eq!(cfg.phase.drift_gate, Some(0.05));
    }

    #[test]
    fn bad_overrides_rejected() {
        let mut v = default_value();
        assert!(apply_override(&mut v, "nonsense=1").is_err());
        assert!(apply_override(&mut v, "tau").is_err());
        assert!(apply_override(&mut v, "beta1=0.8").is_ok());
        assert!(resolve_config(None, &["tau=abc".into()]).is_err());
        assert!(resolve_config(None, &["k_min=1".into()]).is_err());
    }

    #[test]
    fn unknown_file_keys_rejected_with_location() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, "{\n  \"phase\": {\n    \"tua\": 0.1\n  }\n}").unwrap();
        let err = resolve_config(Some(&p), &[]).unwrap_err();
        assert_eq!(exit_code(&err), 1);
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn partial_config_fills_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"phase": {"tau": 0.2}}"#).unwrap();
        let cfg = resolve_config(Some(&p), &[]).unwrap();
        assert_eq!(cfg.phase.tau, 0.2);
        assert_eq!(cfg.phase.k_min, 2);
        assert_eq!(cfg.adapter.n_experts, 8);
    }

    #[test]
    fn output_dir_precedence() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.resolve_output_dir(Some(Path::new("x"))), PathBuf::from("x"));
        cfg.output_dir = Some("y".into());
        assert_eq!(cfg.resolve_output_dir(None), PathBuf::from("y"));
    }

    #[test]
    fn help_exits_zero_and_bad_args_one() {
        assert_eq!(run(["dmep", "--help"]), 0);
        assert_eq!(run(["dmep", "frobnicate"]), 1);
        assert_eq!(run(["dmep", "train", "--set", "bogus=1"]), 1);
    }
}
