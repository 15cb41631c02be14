//! One-shot module-wise expert pruning with physical slicing.
//!
//! Survivors are chosen per module from cumulative routing shares: every
//! expert whose share is at least `tau`, unless fewer than `k_min` qualify,
//! in which case the `k_min` highest-share experts. Pruned experts are then
//! removed from the A/B stacks, the gate rows and the optimizer moments by
//! row selection, so nothing downstream ever sees them again.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::backbone::{GateMasks, Model, ModuleId, ProjKind};
use crate::error::{Error, Result};
use crate::moe_adapter::{BankPart, BlockId, ExpertBank, ModuleDims};
use crate::numerics::topk_indices;
use crate::optimizer::OptimizerState;
use crate::routing_ledger::RoutingLedger;

/// Survivor indices for one module, ascending.
pub fn survivor_set(scores: &[f64], tau: f64, k_min: usize) -> Result<Vec<usize>> {
    let n = scores.len();
    if k_min == 0 || k_min > n {
        return Err(Error::invalid(format!("k_min {k_min} must be in 1..={n}")));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid(format!("tau must lie in (0, 1), got {tau}")));
    }
    let total: f64 = scores.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("scores sum to {total}, not 1")));
    }
    let above: Vec<usize> = (0..n).filter(|&i| scores[i] >= tau).collect();
    if above.len() >= k_min {
        Ok(above)
    } else {
        topk_indices(scores, k_min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModulePlan {
    pub layer: usize,
    pub kind: ProjKind,
    pub scores: Vec<f64>,
    pub survivors: Vec<usize>,
    pub n_before: usize,
    pub dims: ModuleDims,
    /// Fewer than `k_min` experts cleared `tau`.
    pub fallback: bool,
    /// No token was ever routed here.
    pub empty: bool,
}

impl ModulePlan {
    pub fn module(&self) -> ModuleId {
        ModuleId::new(self.layer, self.kind)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    pub step: usize,
    pub tau: f64,
    pub k_min: usize,
    pub modules: Vec<ModulePlan>,
    pub params_before: usize,
    pub params_after: usize,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl PruningPlan {
    /// Builds a plan from raw per-module counts.
    pub fn from_counts<'a>(
        entries: impl IntoIterator<Item = (ModuleId, &'a [u64], ModuleDims)>,
        tau: f64,
        k_min: usize,
        step: usize,
    ) -> Result<Self> {
        let mut modules = Vec::new();
        let mut warnings = Vec::new();
        for (module, counts, dims) in entries {
            let n = counts.len();
            let total: u64 = counts.iter().sum();
            let (scores, survivors, empty) = if total == 0 {
                if k_min == 0 || k_min > n {
                    return Err(Error::invalid(format!("k_min {k_min} must be in 1..={n}")));
                }
                let msg = format!("module {module} never routed a token; keeping experts 0..{k_min}");
                log::warn!("{msg}");
                warnings.push(msg);
                (vec![0.0; n], (0..k_min).collect(), true)
            } else {
                let scores: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
                let survivors = survivor_set(&scores, tau, k_min)?;
                (scores, survivors, false)
            };
            let fallback = !empty && scores.iter().filter(|&&s| s >= tau).count() < k_min;
            modules.push(ModulePlan {
                layer: module.layer,
                kind: module.kind,
                scores,
                survivors,
                n_before: n,
                dims,
                fallback,
                empty,
            });
        }
        let params_before = modules.iter().map(|m| m.dims.params(m.n_before)).sum();
        let params_after = modules.iter().map(|m| m.dims.params(m.survivors.len())).sum();
        Ok(Self {
            step,
            tau,
            k_min,
            modules,
            params_before,
            params_after,
            warnings,
        })
    }

    /// Recomputes `Σ_m |A_m|·(r(d_in+d_out)+d_in)` from the module entries.
    pub fn recomputed_params_after(&self) -> usize {
        self.modules
            .iter()
            .map(|m| m.survivors.len() * (m.dims.rank * (m.dims.d_in + m.dims.d_out) + m.dims.d_in))
            .sum()
    }

    pub fn module(&self, module: ModuleId) -> Option<&ModulePlan> {
        self.modules.iter().find(|m| m.module() == module)
    }

    /// Gate masks that reproduce this plan on the unpruned model.
    pub fn gate_masks(&self) -> GateMasks {
        self.modules
            .iter()
            .map(|m| {
                let mut allowed = vec![false; m.n_before];
                for &i in &m.survivors {
                    allowed[i] = true;
                }
                (m.module(), allowed)
            })
            .collect()
    }

    pub fn mean_retained(&self) -> f64 {
        if self.modules.is_empty() {
            return 0.0;
        }
        self.modules.iter().map(|m| m.survivors.len() as f64).sum::<f64>() / self.modules.len() as f64
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Plan against the model's current banks using the ledger's cumulative counts.
pub fn build_pruning_plan(
    ledger: &RoutingLedger,
    banks: &BTreeMap<ModuleId, ExpertBank>,
    tau: f64,
    k_min: usize,
    step: usize,
) -> Result<PruningPlan> {
    let mut entries = Vec::with_capacity(banks.len());
    for (module, bank) in banks {
        let counts = ledger.counts(*module)?;
        if counts.len() != bank.n_experts() {
            return Err(Error::shape(
                "build_pruning_plan",
                format!("ledger {} experts", counts.len()),
                format!("bank {} experts", bank.n_experts()),
            ));
        }
        entries.push((*module, counts, ModuleDims::of(bank)));
    }
    PruningPlan::from_counts(entries, tau, k_min, step)
}

/// Dry-run plan from a ledger alone, using the bank shapes it carries.
pub fn plan_from_ledger(ledger: &RoutingLedger, tau: f64, k_min: usize, step: usize) -> Result<PruningPlan> {
    let mut entries = Vec::new();
    for loads in ledger.modules() {
        let dims = loads
            .dims
            .ok_or_else(|| Error::Config(format!("ledger module {} carries no bank shape", loads.module)))?;
        entries.push((loads.module, loads.counts.as_slice(), dims));
    }
    PruningPlan::from_counts(entries, tau, k_min, step)
}

fn check_survivors(survivors: &[usize], n: usize) -> Result<()> {
    if survivors.is_empty() {
        return Err(Error::invalid("empty survivor set"));
    }
    if survivors.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid(format!("survivors not strictly ascending: {survivors:?}")));
    }
    if let Some(&bad) = survivors.iter().find(|&&i| i >= n) {
        return Err(Error::IndexOutOfRange { index: bad, len: n });
    }
    Ok(())
}

/// New bank holding only the survivor experts, in order.
pub fn slice_bank(bank: &ExpertBank, survivors: &[usize]) -> Result<ExpertBank> {
    check_survivors(survivors, bank.n_experts())?;
    Ok(ExpertBank {
        a_stack: bank.a_stack.select_rows(survivors)?,
        b_stack: bank.b_stack.select_rows(survivors)?,
        gate: bank.gate.select_rows(survivors)?,
        ..bank.clone()
    })
}

/// Slices the moments of one stacked block. `n_before` is the block's
/// current leading dimension and must match the stored state.
pub fn slice_optimizer_state(
    state: &mut OptimizerState,
    block: BlockId,
    n_before: usize,
    survivors: &[usize],
) -> Result<()> {
    check_survivors(survivors, n_before)?;
    if let Some(mo) = state.moments(block) {
        if mo.m.rows() != n_before || mo.v.rows() != n_before {
            return Err(Error::shape(
                "slice_optimizer_state",
                mo.m.shape_str(),
                format!("{n_before} expert rows"),
            ));
        }
    }
    state.slice_block(block, survivors)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetainedCount {
    pub layer: usize,
    pub kind: ProjKind,
    pub retained: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub params_before: usize,
    pub params_after: usize,
    pub retained: Vec<RetainedCount>,
}

/// Slices every bank, its optimizer blocks and its ledger entry. All checks
/// run before anything is mutated.
pub fn apply_plan(
    model: &mut Model,
    optimizer: &mut OptimizerState,
    ledger: Option<&mut RoutingLedger>,
    plan: &PruningPlan,
) -> Result<PruneReport> {
    let params_before = model.trainable_params();
    let mut new_banks = Vec::with_capacity(plan.modules.len());
    let mut new_state = optimizer.clone();
    for mp in &plan.modules {
        let module = mp.module();
        let bank = model
            .adapters
            .get(&module)
            .ok_or_else(|| Error::invalid(format!("plan names unknown module {module}")))?;
        if bank.n_experts() != mp.n_before || ModuleDims::of(bank) != mp.dims {
            return Err(Error::shape(
                "apply_plan",
                format!("{module} has {} experts", bank.n_experts()),
                format!("plan expects {}", mp.n_before),
            ));
        }
        if mp.survivors.len() < model.top_k {
            return Err(Error::invalid(format!(
                "{module} would keep {} experts, fewer than top_k {}",
                mp.survivors.len(),
                model.top_k
            )));
        }
        new_banks.push((module, slice_bank(bank, &mp.survivors)?));
        for part in BankPart::ALL {
            slice_optimizer_state(&mut new_state, BlockId { module, part }, mp.n_before, &mp.survivors)?;
        }
    }
    let mut new_ledger = ledger.as_deref().cloned();
    if let Some(l) = new_ledger.as_mut() {
        for mp in &plan.modules {
            l.redimension(mp.module(), &mp.survivors)?;
        }
    }

    for (module, bank) in new_banks {
        model.adapters.insert(module, bank);
    }
    *optimizer = new_state;
    if let (Some(dst), Some(src)) = (ledger, new_ledger) {
        *dst = src;
    }
    Ok(PruneReport {
        params_before,
        params_after: model.trainable_params(),
        retained: model
            .adapters
            .iter()
            .map(|(m, b)| RetainedCount {
                layer: m.layer,
                kind: m.kind,
                retained: b.n_experts(),
            })
            .collect(),
    })
}

/// Retained-expert grid: one row per projection kind, one column per layer.
pub fn heatmap_csv(retained: &[RetainedCount]) -> String {
    let n_layers = retained.iter().map(|r| r.layer + 1).max().unwrap_or(0);
    let mut out = String::from("kind");
    for l in 0..n_layers {
        let _ = write!(out, ",layer_{l}");
    }
    out.push('\n');
    for kind in ProjKind::ALL {
        out.push_str(kind.name());
        for l in 0..n_layers {
            let cell = retained
                .iter()
                .find(|r| r.layer == l && r.kind == kind)
                .map(|r| r.retained.to_string())
                .unwrap_or_default();
            let _ = write!(out, ",{cell}");
        }
        out.push('\n');
    }
    out
}

impl PruningPlan {
    pub fn retained_counts(&self) -> Vec<RetainedCount> {
        self.modules
            .iter()
            .map(|m| RetainedCount {
                layer: m.layer,
                kind: m.kind,
                retained: m.survivors.len(),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{init_backbone, AdapterConfig, BackboneConfig};
    use crate::numerics::{normal_matrix, stream_rng, Matrix};

    #[test]
    fn survivor_examples() {
        assert_eq!(survivor_set(&[0.3, 0.3, 0.2, 0.2], 0.10, 2).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(survivor_set(&[0.05, 0.05, 0.45, 0.45], 0.10, 2).unwrap(), vec![2, 3]);
        assert_eq!(survivor_set(&[0.02, 0.03, 0.05, 0.90], 0.10, 2).unwrap(), vec![2, 3]);
        assert_eq!(survivor_set(&[0.125; 8], 0.20, 2).unwrap(), vec![0, 1]);
        assert!(survivor_set(&[0.5, 0.5], 0.1, 3).is_err());
        assert!(survivor_set(&[0.5, 0.4], 0.1, 1).is_err());
        assert!(survivor_set(&[0.5, 0.5], 1.0, 1).is_err());
    }

    fn dims() -> ModuleDims {
        ModuleDims {
            d_in: 32,
            d_out: 32,
            rank: 4,
        }
    }

    #[test]
    fn plan_accounting_and_fallbacks() {
        let uniform = [10u64; 8];
        let collapsed = [80u64, 0, 0, 0, 0, 0, 0, 0];
        let zero = [0u64; 8];
        let q = ModuleId::new(0, ProjKind::Q);
        let k = ModuleId::new(0, ProjKind::K);
        let v = ModuleId::new(0, ProjKind::V);
        let plan = PruningPlan::from_counts(
            [(q, &uniform[..], dims()), (k, &collapsed[..], dims()), (v, &zero[..], dims())],
            0.10,
            2,
            40,
        )
        .unwrap();
        assert_eq!(plan.module(q).unwrap().survivors.len(), 8);
        let kp = plan.module(k).unwrap();
        assert_eq!(kp.survivors, vec![0, 1]);
        assert!(kp.fallback);
        let vp = plan.module(v).unwrap();
        assert!(vp.empty);
        assert_eq!(vp.survivors, vec![0, 1]);
        assert_eq!(plan.warnings.len(), 1);
        assert_eq!(plan.params_before, 3 * 2304);
        assert_eq!(plan.params_after, 2304 + 2 * 576);
        assert_eq!(plan.params_after, plan.recomputed_params_after());
    }

    #[test]
    fn slice_bank_is_row_selection() {
        let m = ModuleId::new(0, ProjKind::O);
        let mut bank = crate::moe_adapter::init_expert_bank(m, 32, 32, 4, 8, 8.0, 3).unwrap();
        bank.b_stack = normal_matrix(&mut stream_rng(1, &[]), 8, 128, 1.0);
        let sliced = slice_bank(&bank, &[0, 2, 5]).unwrap();
        assert_eq!(sliced.n_experts(), 3);
        assert_eq!(sliced.a_stack.row(1), bank.a_stack.row(2));
        assert_eq!(sliced.b_stack.row(2), bank.b_stack.row(5));
        assert_eq!(sliced.gate.row(1), bank.gate.row(2));
        assert_eq!(sliced.trainable_param_count(), 864);
        let all: Vec<usize> = (0..8).collect();
        assert_eq!(slice_bank(&bank, &all).unwrap().checksum(), bank.checksum());
        assert!(slice_bank(&bank, &[]).is_err());
        assert!(slice_bank(&bank, &[2, 1]).is_err());
        assert!(slice_bank(&bank, &[8]).is_err());
    }

    #[test]
    fn slice_optimizer_state_checks_shape() {
        let block = BlockId {
            module: ModuleId::new(0, ProjKind::Q),
            part: BankPart::Gate,
        };
        let mut st = OptimizerState::new(Default::default());
        st.register(block, (8, 32));
        assert!(slice_optimizer_state(&mut st, block, 4, &[0, 1]).is_err());
        let before = st.clone();
        let all: Vec<usize> = (0..8).collect();
        slice_optimizer_state(&mut st, block, 8, &all).unwrap();
        assert_eq!(st, before);
        slice_optimizer_state(&mut st, block, 8, &[1, 4, 7]).unwrap();
        assert_eq!(st.moments(block).unwrap().m, Matrix::zeros(3, 32));
    }

    #[test]
    fn apply_plan_rejects_drift_without_partial_application() {
        let cfg = BackboneConfig {
            vocab_size: 16,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 8,
        };
        let bb = init_backbone(&cfg, 0).unwrap();
        let adapter = AdapterConfig {
            n_experts: 4,
            rank: 2,
            alpha: 4.0,
        };
        let mut model = Model::new(bb, &adapter, 2, 0).unwrap();
        let mut opt = OptimizerState::new(Default::default());
        let entries: Vec<(ModuleId, Vec<u64>, ModuleDims)> = model
            .adapters
            .iter()
            .map(|(m, b)| (*m, vec![5, 0, 3, 2], ModuleDims::of(b)))
            .collect();
        let mut plan = PruningPlan::from_counts(
            entries.iter().map(|(m, c, d)| (*m, c.as_slice(), *d)),
            0.25,
            2,
            1,
        )
        .unwrap();
        plan.modules.last_mut().unwrap().n_before = 5;
        let snapshot = model.clone();
        assert!(apply_plan(&mut model, &mut opt, None, &plan).is_err());
        assert_eq!(model, snapshot);
    }

    #[test]
    fn heatmap_layout() {
        let retained = vec![
            RetainedCount { layer: 0, kind: ProjKind::O, retained: 3 },
            RetainedCount { layer: 1, kind: ProjKind::O, retained: 5 },
            RetainedCount { layer: 1, kind: ProjKind::Q, retained: 2 },
        ];
        let csv = heatmap_csv(&retained);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "kind,layer_0,layer_1");
        assert_eq!(lines[1], "Q,,2");
        assert_eq!(lines[4], "O,3,5");
        assert_eq!(lines.len(), 8);
    }
}
