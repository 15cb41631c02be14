use std::path::Path;

use dmep::backbone::{ModuleId, ProjKind};
use dmep::cli::{cmd_plan, cmd_report, cmd_train, run};
use dmep::moe_adapter::ModuleDims;
use dmep::pruner::PruningPlan;
use dmep::routing_ledger::RoutingLedger;

fn short(extra: &[&str]) -> Vec<String> {
    let mut v: Vec<String> = ["n_train=256", "n_eval=64", "batch_size=32", "epochs=2"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    v.extend(extra.iter().map(|s| s.to_string()));
    v
}

fn column(dir: &Path, name: &str) -> Vec<String> {
    let text = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let idx = header.iter().position(|h| *h == name).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().to_string()).collect()
}

#[test]
fn train_writes_artifacts_and_report_is_consistent() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cmd_train(None, &short(&["tau=0.15"]), Some(&tmp.path().join("run"))).unwrap();
    for f in ["config.json", "metrics.csv", "timing.csv", "plan.json", "ledger.json", "report.json", "model.json", "heatmap.csv"] {
        assert!(out.dir.join(f).exists(), "missing {f}");
    }
    let plan = PruningPlan::from_json(&std::fs::read_to_string(out.dir.join("plan.json")).unwrap()).unwrap();
    assert_eq!(plan.tau, 0.15);

    let report = cmd_report(&out.dir).unwrap();
    let expected = 100.0 * (1.0 - plan.params_after as f64 / plan.params_before as f64);
    assert_eq!(report.reduction_pct, expected);
    assert_eq!(report.params_before, plan.params_before);

    let heat = std::fs::read_to_string(out.dir.join("heatmap.csv")).unwrap();
    let o_row = heat.lines().find(|l| l.starts_with("O,")).unwrap();
    let cell: usize = o_row.split(',').nth(1).unwrap().parse().unwrap();
    let o0 = plan.module(ModuleId::new(0, ProjKind::O)).unwrap();
    assert_eq!(cell, o0.survivors.len());

    // Offline replan from the dumped ledger reproduces the run's plan.
    let replanned = cmd_plan(&out.dir.join("ledger.json"), 0.15, 2).unwrap();
    assert_eq!(
        replanned.modules.iter().map(|m| &m.survivors).collect::<Vec<_>>(),
        plan.modules.iter().map(|m| &m.survivors).collect::<Vec<_>>()
    );

    // The frozen config reproduces the run.
    let again = cmd_train(Some(&out.dir.join("config.json")), &[], Some(&tmp.path().join("again"))).unwrap();
    assert_eq!(
        std::fs::read(out.dir.join("metrics.csv")).unwrap(),
        std::fs::read(again.dir.join("metrics.csv")).unwrap()
    );
    assert_eq!(out.final_param_checksum, again.final_param_checksum);
}

#[test]
fn lambda_zero_gives_zero_aux_column() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cmd_train(None, &short(&["lambda=0"]), Some(tmp.path())).unwrap();
    assert!(column(&out.dir, "aux_loss").iter().all(|v| v == "0"));
    assert!(column(&out.dir, "lambda").iter().all(|v| v == "0"));
}

#[test]
fn no_prune_run_reports_zero_reduction() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cmd_train(None, &short(&["prune=false"]), Some(tmp.path())).unwrap();
    assert!(!out.dir.join("plan.json").exists());
    let report = cmd_report(&out.dir).unwrap();
    assert_eq!(report.reduction_pct, 0.0);
    assert_eq!(report.mean_retained, 8.0);
    assert!(column(&out.dir, "phase").iter().all(|p| p == "explore"));
}

#[test]
fn dense_lora_degenerate_run_trains() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cmd_train(
        None,
        &short(&["n_experts=1", "k=1", "k_min=1", "prune=false"]),
        Some(tmp.path()),
    )
    .unwrap();
    let params: Vec<String> = column(&out.dir, "trainable_params");
    assert!(params.iter().all(|p| p == &params[0]));
}

fn uniform_ledger(path: &Path) {
    let dims = ModuleDims { d_in: 32, d_out: 32, rank: 4 };
    let mut ledger = RoutingLedger::new(
        [ProjKind::Q, ProjKind::O].map(|k| (ModuleId::new(0, k), 8)),
        10,
    );
    let modules: Vec<ModuleId> = ledger.modules().map(|m| m.module).collect();
    for m in modules {
        ledger.record(m, &[vec![0, 1], vec![2, 3], vec![4, 5], vec![6, 7]]).unwrap();
    }
    let mut json: serde_json::Value = serde_json::from_str(&ledger.to_json().unwrap()).unwrap();
    for m in json["modules"].as_array_mut().unwrap() {
        m["dims"] = serde_json::to_value(dims).unwrap();
    }
    std::fs::write(path, json.to_string()).unwrap();
}

#[test]
fn plan_on_uniform_ledger() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("ledger.json");
    uniform_ledger(&path);
    let all = cmd_plan(&path, 0.10, 2).unwrap();
    assert!(all.modules.iter().all(|m| m.survivors.len() == 8));
    assert_eq!(all.params_after, all.params_before);
    let fallback = cmd_plan(&path, 0.20, 2).unwrap();
    assert!(fallback.modules.iter().all(|m| m.survivors == vec![0, 1] && m.fallback));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, "{\"schema_version\": 1, \"delta_t\": 10}").unwrap();
    assert_eq!(run(["dmep", "plan", "--ledger", bad.to_str().unwrap()]), 1);
    let missing = tmp.path().join("none.json");
    assert_eq!(run(["dmep", "plan", "--ledger", missing.to_str().unwrap()]), 1);

    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, "{\"phase\": {\"epochs\": 2, \"bogus\": true}}").unwrap();
    assert_eq!(run(["dmep", "train", "--config", cfg.to_str().unwrap()]), 1);
    assert_eq!(run(["dmep", "report", tmp.path().to_str().unwrap()]), 1);

    let good = tmp.path().join("ledger.json");
    uniform_ledger(&good);
    let out = tmp.path().join("plan.json");
    assert_eq!(
        run(["dmep", "plan", "--ledger", good.to_str().unwrap(), "--tau", "0.2", "--out", out.to_str().unwrap()]),
        0
    );
    assert!(out.exists());
}

#[test]
fn data_dump_and_config_print() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d.jsonl");
    assert_eq!(
        run(["dmep", "data", "--set", "n_train=4", "--set", "n_eval=2", "--out", out.to_str().unwrap()]),
        0
    );
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 6);
    assert_eq!(run(["dmep", "config", "--set", "tau=0.3"]), 0);
}
