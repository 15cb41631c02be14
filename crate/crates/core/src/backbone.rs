//! Tiny frozen transformer with seven adapter-targeted projections per layer.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::moe_adapter::{BankVars, ExpertBank, RoutingDecision};
use crate::numerics::{hex, normal_matrix, stream_rng, Matrix, Tape, Var};
use crate::routing_ledger::RoutingLedger;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ProjKind {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl ProjKind {
    pub const ALL: [ProjKind; 7] = [
        ProjKind::Q,
        ProjKind::K,
        ProjKind::V,
        ProjKind::O,
        ProjKind::Gate,
        ProjKind::Up,
        ProjKind::Down,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProjKind::Q => "Q",
            ProjKind::K => "K",
            ProjKind::V => "V",
            ProjKind::O => "O",
            ProjKind::Gate => "GATE",
            ProjKind::Up => "UP",
            ProjKind::Down => "DOWN",
        }
    }

    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn is_attention(self) -> bool {
        matches!(self, ProjKind::Q | ProjKind::K | ProjKind::V | ProjKind::O)
    }

    pub fn parse(s: &str) -> Option<ProjKind> {
        ProjKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for ProjKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One targeted projection: `(layer, kind)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModuleId {
    pub layer: usize,
    pub kind: ProjKind,
}

impl ModuleId {
    pub fn new(layer: usize, kind: ProjKind) -> Self {
        Self { layer, kind }
    }

    pub fn ordinal(self) -> usize {
        self.layer * ProjKind::ALL.len() + self.kind.ordinal()
    }
}

impl fmt::Display for ModuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}.{}", self.layer, self.kind)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            d_ff: 64,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0
            || self.d_model == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.d_ff == 0
        {
            return Err(Error::invalid(format!(
                "backbone dimensions must be positive: {self:?}"
            )));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::invalid(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// `(d_in, d_out)` of a projection kind.
    pub fn dims(&self, kind: ProjKind) -> (usize, usize) {
        match kind {
            ProjKind::Q | ProjKind::K | ProjKind::V | ProjKind::O => (self.d_model, self.d_model),
            ProjKind::Gate | ProjKind::Up => (self.d_model, self.d_ff),
            ProjKind::Down => (self.d_ff, self.d_model),
        }
    }

    /// All targeted modules, layer-major, in `ProjKind::ALL` order.
    pub fn module_ids(&self) -> Vec<ModuleId> {
        (0..self.n_layers)
            .flat_map(|l| ProjKind::ALL.into_iter().map(move |k| ModuleId::new(l, k)))
            .collect()
    }
}

/// Frozen weights. Nothing here is ever handed to the optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub seed: u64,
    /// `vocab x d_model`
    pub embedding: Matrix,
    /// `vocab x d_model`; logits are `h · headᵀ`.
    pub head: Matrix,
    /// Per layer: pre-attention and pre-MLP RMSNorm gains (`1 x d_model`).
    pub norms: Vec<[Matrix; 2]>,
    pub final_norm: Matrix,
    /// `W0` per module, indexed by [`ModuleId::ordinal`], shape `d_out x d_in`.
    pub weights: Vec<Matrix>,
}

const TAG_EMBED: u64 = 1;
const TAG_HEAD: u64 = 2;
const TAG_PROJ: u64 = 3;

pub fn init_backbone(config: &BackboneConfig, seed: u64) -> Result<Backbone> {
    config.validate()?;
    let d = config.d_model;
    let std = 1.0 / (d as f64).sqrt();
    let embedding = normal_matrix(&mut stream_rng(seed, &[TAG_EMBED]), config.vocab_size, d, std);
    let head = normal_matrix(&mut stream_rng(seed, &[TAG_HEAD]), config.vocab_size, d, std);
    let weights = config
        .module_ids()
        .into_iter()
        .map(|m| {
            let (d_in, d_out) = config.dims(m.kind);
            let mut rng = stream_rng(seed, &[TAG_PROJ, m.layer as u64, m.kind.ordinal() as u64]);
            normal_matrix(&mut rng, d_out, d_in, std)
        })
        .collect();
    Ok(Backbone {
        config: config.clone(),
        seed,
        embedding,
        head,
        norms: (0..config.n_layers)
            .map(|_| [Matrix::filled(1, d, 1.0), Matrix::filled(1, d, 1.0)])
            .collect(),
        final_norm: Matrix::filled(1, d, 1.0),
        weights,
    })
}

impl Backbone {
    pub fn weight(&self, module: ModuleId) -> &Matrix {
        &self.weights[module.ordinal()]
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        self.embedding.feed(&mut h);
        self.head.feed(&mut h);
        for [a, b] in &self.norms {
            a.feed(&mut h);
            b.feed(&mut h);
        }
        self.final_norm.feed(&mut h);
        for w in &self.weights {
            w.feed(&mut h);
        }
        hex(&h.finalize())
    }
}

/// Equal-length token sequences; row `b * seq_len + t` of every activation
/// belongs to sequence `b`, position `t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    seqs: Vec<Vec<usize>>,
}

impl TokenBatch {
    pub fn new(seqs: Vec<Vec<usize>>) -> Result<Self> {
        let Some(first) = seqs.first() else {
            return Err(Error::invalid("empty token batch"));
        };
        let len = first.len();
        if len == 0 || seqs.iter().any(|s| s.len() != len) {
            return Err(Error::invalid("token sequences must be non-empty and equal length"));
        }
        Ok(Self { seqs })
    }

    pub fn batch(&self) -> usize {
        self.seqs.len()
    }

    pub fn seq_len(&self) -> usize {
        self.seqs[0].len()
    }

    pub fn n_tokens(&self) -> usize {
        self.batch() * self.seq_len()
    }

    pub fn flat(&self) -> Vec<usize> {
        self.seqs.iter().flatten().copied().collect()
    }

    /// Row index of the final position of each sequence.
    pub fn last_rows(&self) -> Vec<usize> {
        let t = self.seq_len();
        (0..self.batch()).map(|b| b * t + t - 1).collect()
    }

    pub fn seqs(&self) -> &[Vec<usize>] {
        &self.seqs
    }
}

/// Per-module gate masks: `false` forces that expert's gate logit to `-inf`.
pub type GateMasks = BTreeMap<ModuleId, Vec<bool>>;

#[derive(Debug, Clone)]
pub struct ModuleTrace {
    pub probs: Var,
    pub decision: RoutingDecision,
}

/// Handles produced by one forward pass on a tape.
#[derive(Debug, Clone)]
pub struct Graph {
    pub logits: Var,
    pub traces: BTreeMap<ModuleId, ModuleTrace>,
    pub params: BTreeMap<ModuleId, BankVars>,
}

struct Builder<'a> {
    backbone: &'a Backbone,
    adapters: Option<&'a BTreeMap<ModuleId, ExpertBank>>,
    k: usize,
    masks: Option<&'a GateMasks>,
    traces: BTreeMap<ModuleId, ModuleTrace>,
    params: BTreeMap<ModuleId, BankVars>,
}

impl Builder<'_> {
    fn proj(&mut self, tape: &mut Tape, x: Var, module: ModuleId) -> Result<Var> {
        let w0 = tape.constant(self.backbone.weight(module).clone());
        let base = tape.matmul_nt(x, w0)?;
        let Some(adapters) = self.adapters else {
            return Ok(base);
        };
        let bank = adapters
            .get(&module)
            .ok_or_else(|| Error::invalid(format!("no adapter for targeted module {module}")))?;
        let vars = bank.bind(tape);
        let mask = self.masks.and_then(|m| m.get(&module)).map(Vec::as_slice);
        let (probs, decision) = bank.route_on_tape(tape, &vars, x, self.k, mask)?;
        let delta = bank.delta_on_tape(tape, &vars, x, probs, &decision)?;
        self.traces.insert(module, ModuleTrace { probs, decision });
        self.params.insert(module, vars);
        tape.add(base, delta)
    }
}

fn build_graph(
    tape: &mut Tape,
    backbone: &Backbone,
    adapters: Option<&BTreeMap<ModuleId, ExpertBank>>,
    k: usize,
    batch: &TokenBatch,
    masks: Option<&GateMasks>,
) -> Result<Graph> {
    let cfg = &backbone.config;
    let ids = batch.flat();
    if let Some(&bad) = ids.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            len: cfg.vocab_size,
        });
    }
    let mut b = Builder {
        backbone,
        adapters,
        k,
        masks,
        traces: BTreeMap::new(),
        params: BTreeMap::new(),
    };
    let emb = tape.constant(backbone.embedding.clone());
    let mut x = tape.gather_rows(emb, ids)?;
    for layer in 0..cfg.n_layers {
        let m = |kind| ModuleId::new(layer, kind);
        let g_attn = tape.constant(backbone.norms[layer][0].clone());
        let h = tape.rmsnorm(x, g_attn)?;
        let q = b.proj(tape, h, m(ProjKind::Q))?;
        let kk = b.proj(tape, h, m(ProjKind::K))?;
        let v = b.proj(tape, h, m(ProjKind::V))?;
        let att = tape.causal_attention(q, kk, v, batch.batch(), batch.seq_len(), cfg.n_heads)?;
        let o = b.proj(tape, att, m(ProjKind::O))?;
        x = tape.add(x, o)?;

        let g_mlp = tape.constant(backbone.norms[layer][1].clone());
        let h2 = tape.rmsnorm(x, g_mlp)?;
        let gate = b.proj(tape, h2, m(ProjKind::Gate))?;
        let up = b.proj(tape, h2, m(ProjKind::Up))?;
        let act = tape.silu(gate)?;
        let act = tape.mul(act, up)?;
        let down = b.proj(tape, act, m(ProjKind::Down))?;
        x = tape.add(x, down)?;
    }
    let g_final = tape.constant(backbone.final_norm.clone());
    let h = tape.rmsnorm(x, g_final)?;
    let head = tape.constant(backbone.head.clone());
    let logits = tape.matmul_nt(h, head)?;
    Ok(Graph {
        logits,
        traces: b.traces,
        params: b.params,
    })
}

/// Forward pass through backbone and adapters. Records every module's
/// top-k selections into `ledger` when one is supplied.
pub fn forward(
    backbone: &Backbone,
    adapters: &BTreeMap<ModuleId, ExpertBank>,
    k: usize,
    batch: &TokenBatch,
    ledger: Option<&mut RoutingLedger>,
) -> Result<Matrix> {
    let mut tape = Tape::new();
    let graph = build_graph(&mut tape, backbone, Some(adapters), k, batch, None)?;
    if let Some(ledger) = ledger {
        for (module, trace) in &graph.traces {
            ledger.record(*module, &trace.decision.selected)?;
        }
    }
    Ok(tape.value(graph.logits).clone())
}

/// Backbone alone, no adapters.
pub fn forward_plain(backbone: &Backbone, batch: &TokenBatch) -> Result<Matrix> {
    let mut tape = Tape::new();
    let graph = build_graph(&mut tape, backbone, None, 0, batch, None)?;
    Ok(tape.value(graph.logits).clone())
}

/// Backbone plus one expert bank per targeted module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub backbone: Backbone,
    #[serde(with = "bank_list")]
    pub adapters: BTreeMap<ModuleId, ExpertBank>,
    pub top_k: usize,
}

mod bank_list {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(map: &BTreeMap<ModuleId, ExpertBank>, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(map.values())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<BTreeMap<ModuleId, ExpertBank>, D::Error> {
        let banks: Vec<ExpertBank> = Vec::deserialize(d)?;
        Ok(banks.into_iter().map(|b| (b.module, b)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub n_experts: usize,
    pub rank: usize,
    pub alpha: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            n_experts: 8,
            rank: 4,
            alpha: 8.0,
        }
    }
}

impl Model {
    /// Fresh uniform architecture: `n_experts` experts on every module.
    pub fn new(backbone: Backbone, adapter: &AdapterConfig, top_k: usize, seed: u64) -> Result<Self> {
        if top_k == 0 || top_k > adapter.n_experts {
            return Err(Error::invalid(format!(
                "top_k {top_k} must be in 1..={}",
                adapter.n_experts
            )));
        }
        let mut adapters = BTreeMap::new();
        for module in backbone.config.module_ids() {
            let (d_in, d_out) = backbone.config.dims(module.kind);
            let bank = crate::moe_adapter::init_expert_bank(
                module,
                d_in,
                d_out,
                adapter.rank,
                adapter.n_experts,
                adapter.alpha,
                seed,
            )?;
            adapters.insert(module, bank);
        }
        Ok(Self {
            backbone,
            adapters,
            top_k,
        })
    }

    /// Records the forward pass on `tape`. `masks` forces the gate logits of
    /// masked-out experts to `-inf`.
    pub fn build(&self, tape: &mut Tape, batch: &TokenBatch, masks: Option<&GateMasks>) -> Result<Graph> {
        build_graph(tape, &self.backbone, Some(&self.adapters), self.top_k, batch, masks)
    }

    pub fn forward(&self, batch: &TokenBatch, ledger: Option<&mut RoutingLedger>) -> Result<Matrix> {
        forward(&self.backbone, &self.adapters, self.top_k, batch, ledger)
    }

    pub fn forward_masked(&self, batch: &TokenBatch, masks: &GateMasks) -> Result<Matrix> {
        let mut tape = Tape::new();
        let graph = self.build(&mut tape, batch, Some(masks))?;
        Ok(tape.value(graph.logits).clone())
    }

    pub fn trainable_params(&self) -> usize {
        self.adapters.values().map(ExpertBank::trainable_param_count).sum()
    }

    /// Digest of all adapter parameters in module order.
    pub fn adapter_checksum(&self) -> String {
        let mut h = Sha256::new();
        for bank in self.adapters.values() {
            bank.a_stack.feed(&mut h);
            bank.b_stack.feed(&mut h);
            bank.gate.feed(&mut h);
        }
        hex(&h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            vocab_size: 20,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 12,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = BackboneConfig::default();
        let a = init_backbone(&cfg, 42).unwrap();
        let b = init_backbone(&cfg, 42).unwrap();
        let c = init_backbone(&cfg, 43).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn config_arithmetic() {
        let cfg = BackboneConfig::default();
        assert_eq!(cfg.head_dim(), 8);
        assert_eq!(cfg.module_ids().len(), 14);
        let bad = BackboneConfig {
            n_heads: 5,
            ..cfg.clone()
        };
        assert!(init_backbone(&bad, 0).is_err());
        let zero = BackboneConfig { d_ff: 0, ..cfg };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn single_token_logits_shape() {
        let bb = init_backbone(&tiny(), 1).unwrap();
        let model = Model::new(bb, &AdapterConfig::default(), 2, 1).unwrap();
        let batch = TokenBatch::new(vec![vec![3]]).unwrap();
        let logits = model.forward(&batch, None).unwrap();
        assert_eq!(logits.shape(), (1, 20));
    }

    #[test]
    fn zero_adapters_match_plain_forward() {
        let bb = init_backbone(&tiny(), 5).unwrap();
        let model = Model::new(bb.clone(), &AdapterConfig::default(), 2, 9).unwrap();
        let batch = TokenBatch::new(vec![vec![1, 2, 3, 4], vec![5, 6, 7, 8]]).unwrap();
        assert_eq!(model.forward(&batch, None).unwrap(), forward_plain(&bb, &batch).unwrap());
    }

    #[test]
    fn rejects_bad_tokens_and_missing_adapters() {
        let bb = init_backbone(&tiny(), 5).unwrap();
        let mut model = Model::new(bb, &AdapterConfig::default(), 2, 9).unwrap();
        let bad = TokenBatch::new(vec![vec![1, 99]]).unwrap();
        assert!(matches!(model.forward(&bad, None), Err(Error::IndexOutOfRange { .. })));
        model.adapters.remove(&ModuleId::new(0, ProjKind::Up));
        let ok = TokenBatch::new(vec![vec![1, 2]]).unwrap();
        assert!(model.forward(&ok, None).is_err());
    }

    #[test]
    fn ledger_counts_every_selection() {
        let bb = init_backbone(&tiny(), 5).unwrap();
        let model = Model::new(bb, &AdapterConfig::default(), 2, 9).unwrap();
        let mut ledger = RoutingLedger::for_model(&model, 10);
        let batch = TokenBatch::new(vec![vec![1, 2, 3], vec![4, 5, 6]]).unwrap();
        model.forward(&batch, Some(&mut ledger)).unwrap();
        assert_eq!(ledger.total(), 6 * 2 * 7);
    }

    #[test]
    fn causal_logits() {
        let bb = init_backbone(&tiny(), 5).unwrap();
        let mut model = Model::new(bb, &AdapterConfig::default(), 2, 9).unwrap();
        // Non-zero B so adapters participate.
        for (i, bank) in model.adapters.values_mut().enumerate() {
            let mut rng = stream_rng(77, &[i as u64]);
            bank.b_stack = normal_matrix(&mut rng, bank.b_stack.rows(), bank.b_stack.cols(), 0.3);
        }
        let a = TokenBatch::new(vec![vec![1, 2, 3, 4]]).unwrap();
        let b = TokenBatch::new(vec![vec![1, 2, 3, 17]]).unwrap();
        let la = model.forward(&a, None).unwrap();
        let lb = model.forward(&b, None).unwrap();
        for t in 0..3 {
            assert_eq!(la.row(t), lb.row(t));
        }
        assert_ne!(la.row(3), lb.row(3));
    }
}
