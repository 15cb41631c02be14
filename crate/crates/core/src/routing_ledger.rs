//! Discrete routing counts per module and the three load metrics derived
//! from them: Gini coefficient, normalized entropy and snapshot-to-snapshot
//! drift.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::{Model, ModuleId};
use crate::error::{Error, Result};
use crate::moe_adapter::ModuleDims;

pub const LEDGER_SCHEMA_VERSION: u32 = 1;

/// Default snapshot interval in optimizer steps.
pub const DEFAULT_DELTA_T: usize = 10;

/// Gini coefficient of nonnegative loads. All-zero input gives 0.
pub fn gini(counts: &[f64]) -> f64 {
    let n = counts.len();
    let total: f64 = counts.iter().sum();
    if n == 0 || total <= 0.0 {
        return 0.0;
    }
    let mut sorted = counts.to_vec();
    sorted.sort_by(f64::total_cmp);
    let nf = n as f64;
    let weighted: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, c)| (2.0 * (i + 1) as f64 - nf - 1.0) * c)
        .sum();
    weighted / (nf * total)
}

/// Shannon entropy of the normalized loads divided by `ln N`; `0 ln 0 = 0`.
/// A single expert has entropy 0.
pub fn entropy(counts: &[f64]) -> Result<f64> {
    let total: f64 = counts.iter().sum();
    if counts.is_empty() || total <= 0.0 {
        return Err(Error::EmptyModule("entropy of all-zero loads".into()));
    }
    if counts.len() == 1 {
        return Ok(0.0);
    }
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| {
            let p = c / total;
            -p * p.ln()
        })
        .sum();
    Ok(h / (counts.len() as f64).ln())
}

/// L1 distance between two distributions over the same experts.
pub fn drift(now: &[f64], prev: &[f64]) -> Result<f64> {
    if now.len() != prev.len() {
        return Err(Error::shape(
            "drift",
            format!("{} experts", now.len()),
            format!("{} experts", prev.len()),
        ));
    }
    for p in [now, prev] {
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("distribution sums to {s}, not 1")));
        }
    }
    Ok(now.iter().zip(prev).map(|(a, b)| (a - b).abs()).sum())
}

fn normalize(counts: &[u64]) -> Option<Vec<f64>> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return None;
    }
    Some(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: usize,
    /// `None` when nothing had been routed yet.
    pub distribution: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleLoads {
    pub module: ModuleId,
    pub counts: Vec<u64>,
    /// Original expert index of each current slot.
    pub origin: Vec<usize>,
    /// Bank shape, when the ledger was created from a model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<ModuleDims>,
    pub snapshots: Vec<Snapshot>,
}

/// One metrics row per module per snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub module: ModuleId,
    pub n_experts: usize,
    pub empty: bool,
    pub gini: Option<f64>,
    pub entropy: Option<f64>,
    pub drift: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingLedger {
    pub schema_version: u32,
    pub delta_t: usize,
    #[serde(with = "loads_list")]
    modules: BTreeMap<ModuleId, ModuleLoads>,
    pub history: Vec<MetricRow>,
}

mod loads_list {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(map: &BTreeMap<ModuleId, ModuleLoads>, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(map.values())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<BTreeMap<ModuleId, ModuleLoads>, D::Error> {
        let v: Vec<ModuleLoads> = Vec::deserialize(d)?;
        Ok(v.into_iter().map(|m| (m.module, m)).collect())
    }
}

impl RoutingLedger {
    pub fn new(modules: impl IntoIterator<Item = (ModuleId, usize)>, delta_t: usize) -> Self {
        let modules = modules
            .into_iter()
            .map(|(m, n)| {
                (
                    m,
                    ModuleLoads {
                        module: m,
                        counts: vec![0; n],
                        origin: (0..n).collect(),
                        dims: None,
                        snapshots: Vec::new(),
                    },
                )
            })
            .collect();
        Self {
            schema_version: LEDGER_SCHEMA_VERSION,
            delta_t: delta_t.max(1),
            modules,
            history: Vec::new(),
        }
    }

    pub fn for_model(model: &Model, delta_t: usize) -> Self {
        let mut ledger = Self::new(
            model.adapters.iter().map(|(m, b)| (*m, b.n_experts())),
            delta_t,
        );
        for (m, loads) in ledger.modules.iter_mut() {
            loads.dims = Some(ModuleDims::of(&model.adapters[m]));
        }
        ledger
    }

    pub fn modules(&self) -> impl Iterator<Item = &ModuleLoads> {
        self.modules.values()
    }

    pub fn module(&self, module: ModuleId) -> Result<&ModuleLoads> {
        self.modules
            .get(&module)
            .ok_or_else(|| Error::invalid(format!("ledger has no module {module}")))
    }

    pub fn counts(&self, module: ModuleId) -> Result<&[u64]> {
        Ok(&self.module(module)?.counts)
    }

    /// Adds one count per (token, selected expert).
    pub fn record(&mut self, module: ModuleId, selected: &[Vec<usize>]) -> Result<()> {
        let loads = self
            .modules
            .get_mut(&module)
            .ok_or_else(|| Error::invalid(format!("ledger has no module {module}")))?;
        let n = loads.counts.len();
        if let Some(&bad) = selected.iter().flatten().find(|&&i| i >= n) {
            return Err(Error::IndexOutOfRange { index: bad, len: n });
        }
        for &i in selected.iter().flatten() {
            loads.counts[i] += 1;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.modules.values().flat_map(|m| m.counts.iter()).sum()
    }

    /// `s_i = U_i / Σ_j U_j`.
    pub fn utilization_scores(&self, module: ModuleId) -> Result<Vec<f64>> {
        normalize(self.counts(module)?).ok_or_else(|| Error::EmptyModule(module.to_string()))
    }

    /// Current (gini, entropy) per module from cumulative counts; `None`
    /// for modules with no routed tokens.
    pub fn current_metrics(&self) -> BTreeMap<ModuleId, Option<(f64, f64)>> {
        self.modules
            .iter()
            .map(|(m, loads)| {
                let c: Vec<f64> = loads.counts.iter().map(|&x| x as f64).collect();
                let metrics = entropy(&c).ok().map(|h| (gini(&c), h));
                (*m, metrics)
            })
            .collect()
    }

    /// Takes a snapshot of every module's cumulative distribution and
    /// reports metrics, with drift against the previous snapshot.
    pub fn snapshot_and_report(&mut self, step: usize) -> Vec<MetricRow> {
        let mut rows = Vec::with_capacity(self.modules.len());
        for (m, loads) in self.modules.iter_mut() {
            let dist = normalize(&loads.counts);
            let prev = loads.snapshots.last().and_then(|s| s.distribution.as_ref());
            let row = match &dist {
                None => MetricRow {
                    step,
                    module: *m,
                    n_experts: loads.counts.len(),
                    empty: true,
                    gini: None,
                    entropy: None,
                    drift: None,
                },
                Some(p) => {
                    let c: Vec<f64> = loads.counts.iter().map(|&x| x as f64).collect();
                    MetricRow {
                        step,
                        module: *m,
                        n_experts: loads.counts.len(),
                        empty: false,
                        gini: Some(gini(&c)),
                        entropy: entropy(&c).ok(),
                        drift: prev.and_then(|q| drift(p, q).ok()),
                    }
                }
            };
            loads.snapshots.push(Snapshot {
                step,
                distribution: dist,
            });
            rows.push(row);
        }
        self.history.extend(rows.iter().cloned());
        rows
    }

    /// Shrinks a module to the given survivors (indices into its current
    /// slots). Counts restart at zero and snapshot history is dropped since
    /// distributions of different length are not comparable.
    pub fn redimension(&mut self, module: ModuleId, survivors: &[usize]) -> Result<()> {
        let loads = self
            .modules
            .get_mut(&module)
            .ok_or_else(|| Error::invalid(format!("ledger has no module {module}")))?;
        let n = loads.counts.len();
        if let Some(&bad) = survivors.iter().find(|&&i| i >= n) {
            return Err(Error::IndexOutOfRange { index: bad, len: n });
        }
        loads.origin = survivors.iter().map(|&i| loads.origin[i]).collect();
        loads.counts = vec![0; survivors.len()];
        loads.snapshots.clear();
        Ok(())
    }

    pub fn reset(&mut self) {
        for loads in self.modules.values_mut() {
            loads.counts.iter_mut().for_each(|c| *c = 0);
            loads.snapshots.clear();
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ledger: RoutingLedger = serde_json::from_str(text)?;
        if ledger.schema_version != LEDGER_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported ledger schema version {} (expected {LEDGER_SCHEMA_VERSION})",
                ledger.schema_version
            )));
        }
        for loads in ledger.modules.values() {
            if loads.origin.len() != loads.counts.len() {
                return Err(Error::Config(format!(
                    "ledger module {} has {} counts but {} origin entries",
                    loads.module,
                    loads.counts.len(),
                    loads.origin.len()
                )));
            }
        }
        Ok(ledger)
    }
}

/// Mean over modules of the rows' drift values, if any module has one.
pub fn mean_drift(rows: &[MetricRow]) -> Option<f64> {
    let vals: Vec<f64> = rows.iter().filter_map(|r| r.drift).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ProjKind;

    fn m(kind: ProjKind) -> ModuleId {
        ModuleId::new(0, kind)
    }

    #[test]
    fn record_counts_tokens_times_k() {
        let mut ledger = RoutingLedger::new([(m(ProjKind::Q), 4)], 10);
        let sel: Vec<Vec<usize>> = (0..10).map(|t| vec![t % 4, (t + 1) % 4]).collect();
        ledger.record(m(ProjKind::Q), &sel).unwrap();
        assert_eq!(ledger.total(), 20);
        ledger.record(m(ProjKind::Q), &[]).unwrap();
        assert_eq!(ledger.total(), 20);
        assert!(ledger.record(m(ProjKind::Q), &[vec![4]]).is_err());
    }

    #[test]
    fn untouched_experts_stay_zero() {
        let mut ledger = RoutingLedger::new([(m(ProjKind::K), 4)], 10);
        ledger.record(m(ProjKind::K), &vec![vec![0, 1]; 7]).unwrap();
        assert_eq!(ledger.counts(m(ProjKind::K)).unwrap(), &[7, 7, 0, 0]);
    }

    #[test]
    fn utilization_scores_examples() {
        let q = m(ProjKind::Q);
        let mut ledger = RoutingLedger::new([(q, 4)], 10);
        assert!(matches!(ledger.utilization_scores(q), Err(Error::EmptyModule(_))));
        ledger.record(q, &[vec![0], vec![1], vec![2], vec![3]]).unwrap();
        assert_eq!(ledger.utilization_scores(q).unwrap(), vec![0.25; 4]);

        let mut ledger = RoutingLedger::new([(q, 4)], 10);
        let mut sel = vec![vec![0]; 9];
        sel.push(vec![1]);
        ledger.record(q, &sel).unwrap();
        let s = ledger.utilization_scores(q).unwrap();
        assert_eq!(s, vec![0.9, 0.1, 0.0, 0.0]);

        let mut ledger = RoutingLedger::new([(q, 1)], 10);
        ledger.record(q, &vec![vec![0]; 5]).unwrap();
        assert_eq!(ledger.utilization_scores(q).unwrap(), vec![1.0]);
    }

    #[test]
    fn gini_examples() {
        assert_eq!(gini(&[3.0; 5]), 0.0);
        assert!((gini(&[0.0, 0.0, 0.0, 1.0]) - 0.75).abs() < 1e-15);
        let mut one_hot = [0.0; 8];
        one_hot[5] = 12.0;
        assert!((gini(&one_hot) - 0.875).abs() < 1e-15);
        assert_eq!(gini(&[0.0; 4]), 0.0);
    }

    #[test]
    fn entropy_examples() {
        assert!((entropy(&[2.0; 6]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(entropy(&[0.0, 5.0, 0.0]).unwrap(), 0.0);
        assert!((entropy(&[1.0, 1.0, 0.0, 0.0]).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(entropy(&[4.0]).unwrap(), 0.0);
        assert!(entropy(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn drift_examples() {
        assert_eq!(drift(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(drift(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 2.0);
        assert!((drift(&[0.6, 0.4], &[0.5, 0.5]).unwrap() - 0.2).abs() < 1e-15);
        assert!(drift(&[1.0], &[0.5, 0.5]).is_err());
        assert!(drift(&[0.5, 0.6], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn snapshots_emit_drift_for_consecutive_pairs() {
        let q = m(ProjKind::Q);
        let mut ledger = RoutingLedger::new([(q, 2), (m(ProjKind::V), 2)], 10);
        let mut drifts = 0;
        for step in [10, 20, 30] {
            ledger.record(q, &[vec![step / 10 % 2]]).unwrap();
            let rows = ledger.snapshot_and_report(step);
            drifts += rows.iter().filter(|r| r.module == q && r.drift.is_some()).count();
            let v = rows.iter().find(|r| r.module == m(ProjKind::V)).unwrap();
            assert!(v.empty && v.gini.is_none());
        }
        assert_eq!(drifts, 2);
    }

    #[test]
    fn identical_snapshots_have_zero_drift() {
        let q = m(ProjKind::Q);
        let mut ledger = RoutingLedger::new([(q, 3)], 10);
        ledger.record(q, &[vec![0, 2]]).unwrap();
        ledger.snapshot_and_report(10);
        let rows = ledger.snapshot_and_report(20);
        assert_eq!(rows[0].drift, Some(0.0));
    }

    #[test]
    fn redimension_keeps_identity_and_resets() {
        let q = m(ProjKind::Q);
        let mut ledger = RoutingLedger::new([(q, 5)], 10);
        ledger.record(q, &[vec![1, 3]]).unwrap();
        ledger.snapshot_and_report(10);
        ledger.redimension(q, &[1, 3, 4]).unwrap();
        let loads = ledger.module(q).unwrap();
        assert_eq!(loads.counts, vec![0, 0, 0]);
        assert_eq!(loads.origin, vec![1, 3, 4]);
        ledger.redimension(q, &[0, 2]).unwrap();
        assert_eq!(ledger.module(q).unwrap().origin, vec![1, 4]);
    }

    #[test]
    fn json_round_trip_and_schema_check() {
        let q = m(ProjKind::Q);
        let mut ledger = RoutingLedger::new([(q, 3)], 10);
        ledger.record(q, &[vec![0, 2]]).unwrap();
        ledger.snapshot_and_report(10);
        let text = ledger.to_json().unwrap();
        assert_eq!(RoutingLedger::from_json(&text).unwrap(), ledger);
        let bumped = text.replace("\"schema_version\": 1", "\"schema_version\": 7");
        assert!(RoutingLedger::from_json(&bumped).is_err());
        assert!(RoutingLedger::from_json("{\"nope\": 1}").is_err());
    }
}
