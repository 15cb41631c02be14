//! LoRA expert banks with softmax gating and top-k routing.
//!
//! A bank holds `N` experts for one projection as three stacked tensors
//! whose leading dimension is the expert index:
//!
//! * `a_stack`: `N x (r * d_in)`, row `i` is `A_i` (`r x d_in`) flattened
//! * `b_stack`: `N x (d_out * r)`, row `i` is `B_i` (`d_out x r`) flattened
//! * `gate`:    `N x d_in`, so gate logits for a token are `gate · x`
//!
//! Pruning an expert is then a row selection on all three.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::ModuleId;
use crate::error::{Error, Result};
use crate::numerics::{hex, normal_matrix, stream_rng, topk_indices, Matrix, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertBank {
    pub module: ModuleId,
    pub d_in: usize,
    pub d_out: usize,
    pub rank: usize,
    pub alpha: f64,
    pub a_stack: Matrix,
    pub b_stack: Matrix,
    pub gate: Matrix,
}

/// Which stacked tensor of a bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BankPart {
    A,
    B,
    Gate,
}

impl BankPart {
    pub const ALL: [BankPart; 3] = [BankPart::A, BankPart::B, BankPart::Gate];
}

/// Identity of one trainable parameter block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockId {
    pub module: ModuleId,
    pub part: BankPart,
}

/// Full softmax over experts plus the hard top-k choice per token.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    /// `tokens x N`
    pub probs: Matrix,
    /// Per token, ascending expert indices of size `k`.
    pub selected: Vec<Vec<usize>>,
    pub k: usize,
}

impl RoutingDecision {
    pub fn n_experts(&self) -> usize {
        self.probs.cols()
    }

    pub fn n_tokens(&self) -> usize {
        self.probs.rows()
    }

    /// `f_i`: share of the `tokens * k` assignments that went to expert `i`.
    pub fn load_fractions(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.n_experts()];
        for sel in &self.selected {
            for &i in sel {
                counts[i] += 1;
            }
        }
        let total = (self.n_tokens() * self.k) as f64;
        counts.into_iter().map(|c| c as f64 / total).collect()
    }

    /// `P_i`: mean routing probability of expert `i` over tokens.
    pub fn mean_probs(&self) -> Vec<f64> {
        let n = self.n_tokens() as f64;
        (0..self.n_experts())
            .map(|i| (0..self.n_tokens()).map(|t| self.probs.get(t, i)).sum::<f64>() / n)
            .collect()
    }

    /// Tokens routed to each expert, ascending.
    pub fn tokens_per_expert(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_experts()];
        for (t, sel) in self.selected.iter().enumerate() {
            for &i in sel {
                out[i].push(t);
            }
        }
        out
    }
}

/// Tape handles for a bank's three parameter blocks.
#[derive(Debug, Clone, Copy)]
pub struct BankVars {
    pub a: Var,
    pub b: Var,
    pub gate: Var,
}

impl BankVars {
    pub fn get(&self, part: BankPart) -> Var {
        match part {
            BankPart::A => self.a,
            BankPart::B => self.b,
            BankPart::Gate => self.gate,
        }
    }
}

const TAG_A: u64 = 11;
const TAG_GATE: u64 = 12;

/// Uniform initialization: `A` and gate from N(0, 1/d_in), `B` exactly zero.
pub fn init_expert_bank(
    module: ModuleId,
    d_in: usize,
    d_out: usize,
    rank: usize,
    n_experts: usize,
    alpha: f64,
    seed: u64,
) -> Result<ExpertBank> {
    if d_in == 0 || d_out == 0 || rank == 0 || n_experts == 0 {
        return Err(Error::invalid("expert bank dimensions must be positive"));
    }
    if rank > d_in.min(d_out) {
        return Err(Error::invalid(format!(
            "rank {rank} exceeds min(d_in={d_in}, d_out={d_out})"
        )));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
    }
    let std = 1.0 / (d_in as f64).sqrt();
    let tags = |t: u64| [t, module.layer as u64, module.kind.ordinal() as u64];
    let a_stack = normal_matrix(&mut stream_rng(seed, &tags(TAG_A)), n_experts, rank * d_in, std);
    let gate = normal_matrix(&mut stream_rng(seed, &tags(TAG_GATE)), n_experts, d_in, std);
    Ok(ExpertBank {
        module,
        d_in,
        d_out,
        rank,
        alpha,
        a_stack,
        b_stack: Matrix::zeros(n_experts, d_out * rank),
        gate,
    })
}

impl ExpertBank {
    pub fn n_experts(&self) -> usize {
        self.gate.rows()
    }

    /// `alpha / r`, applied to every expert's contribution.
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn block(&self, part: BankPart) -> &Matrix {
        match part {
            BankPart::A => &self.a_stack,
            BankPart::B => &self.b_stack,
            BankPart::Gate => &self.gate,
        }
    }

    pub fn block_mut(&mut self, part: BankPart) -> &mut Matrix {
        match part {
            BankPart::A => &mut self.a_stack,
            BankPart::B => &mut self.b_stack,
            BankPart::Gate => &mut self.gate,
        }
    }

    pub fn expert_a(&self, i: usize) -> Matrix {
        Matrix::from_vec(self.rank, self.d_in, self.a_stack.row(i).to_vec()).expect("stack row")
    }

    pub fn expert_b(&self, i: usize) -> Matrix {
        Matrix::from_vec(self.d_out, self.rank, self.b_stack.row(i).to_vec()).expect("stack row")
    }

    /// Checks stack shapes against the declared dimensions.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_experts();
        let want = [
            (self.a_stack.shape(), (n, self.rank * self.d_in)),
            (self.b_stack.shape(), (n, self.d_out * self.rank)),
            (self.gate.shape(), (n, self.d_in)),
        ];
        for (have, want) in want {
            if have != want {
                return Err(Error::shape(
                    "expert_bank",
                    format!("{}x{}", have.0, have.1),
                    format!("{}x{}", want.0, want.1),
                ));
            }
        }
        if n == 0 {
            return Err(Error::invalid(format!("bank {} has no experts", self.module)));
        }
        Ok(())
    }

    pub fn trainable_param_count(&self) -> usize {
        trainable_param_count(self.n_experts(), self.rank, self.d_in, self.d_out)
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.alpha.to_bits().to_le_bytes());
        h.update((self.rank as u64).to_le_bytes());
        self.a_stack.feed(&mut h);
        self.b_stack.feed(&mut h);
        self.gate.feed(&mut h);
        hex(&h.finalize())
    }

    /// Registers the three blocks as trainable leaves.
    pub fn bind(&self, tape: &mut Tape) -> BankVars {
        BankVars {
            a: tape.param(self.a_stack.clone()),
            b: tape.param(self.b_stack.clone()),
            gate: tape.param(self.gate.clone()),
        }
    }

    /// Gate softmax and top-k selection. With `allowed`, experts marked
    /// `false` get a `-inf` logit before the softmax.
    pub fn route_on_tape(
        &self,
        tape: &mut Tape,
        vars: &BankVars,
        x: Var,
        k: usize,
        allowed: Option<&[bool]>,
    ) -> Result<(Var, RoutingDecision)> {
        let n = self.n_experts();
        if k == 0 || k > n {
            return Err(Error::invalid(format!(
                "top-k {k} invalid for {n} experts in {}",
                self.module
            )));
        }
        let xv = tape.value(x);
        if xv.cols() != self.d_in {
            return Err(Error::shape("route", xv.shape_str(), format!("tokens x {}", self.d_in)));
        }
        let mut logits = tape.matmul_nt(x, vars.gate)?;
        if let Some(allowed) = allowed {
            if allowed.len() != n {
                return Err(Error::shape("route_mask", format!("{n} experts"), format!("{} flags", allowed.len())));
            }
            if allowed.iter().filter(|&&a| a).count() < k {
                return Err(Error::invalid("mask leaves fewer than k experts"));
            }
            let tokens = tape.value(logits).rows();
            let mut mask = Matrix::zeros(tokens, n);
            for t in 0..tokens {
                for (i, &ok) in allowed.iter().enumerate() {
                    if !ok {
                        mask.set(t, i, f64::NEG_INFINITY);
                    }
                }
            }
            let mask = tape.constant(mask);
            logits = tape.add(logits, mask)?;
        }
        let probs = tape.softmax_rows(logits)?;
        let pv = tape.value(probs);
        let selected = (0..pv.rows())
            .map(|t| topk_indices(pv.row(t), k))
            .collect::<Result<Vec<_>>>()?;
        let decision = RoutingDecision {
            probs: pv.clone(),
            selected,
            k,
        };
        Ok((probs, decision))
    }

    /// `(alpha/r) · Σ_{i ∈ selected} p_i · B_i A_i x` per token. Each expert
    /// only sees the tokens that selected it.
    pub fn delta_on_tape(
        &self,
        tape: &mut Tape,
        vars: &BankVars,
        x: Var,
        probs: Var,
        decision: &RoutingDecision,
    ) -> Result<Var> {
        let tokens = tape.value(x).rows();
        if decision.n_tokens() != tokens || decision.n_experts() != self.n_experts() {
            return Err(Error::shape(
                "adapter_forward",
                decision.probs.shape_str(),
                format!("{tokens}x{}", self.n_experts()),
            ));
        }
        let mut acc: Option<Var> = None;
        for (i, rows) in decision.tokens_per_expert().into_iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let a_i = tape.row_as_matrix(vars.a, i, self.rank, self.d_in)?;
            let b_i = tape.row_as_matrix(vars.b, i, self.d_out, self.rank)?;
            let xs = tape.gather_rows(x, rows.clone())?;
            let u = tape.matmul_nt(xs, a_i)?;
            let y = tape.matmul_nt(u, b_i)?;
            let w = tape.pick(probs, rows.iter().map(|&t| (t, i)).collect())?;
            let yw = tape.mul_col(y, w)?;
            let back = tape.scatter_add_rows(yw, rows, tokens)?;
            acc = Some(match acc {
                Some(prev) => tape.add(prev, back)?,
                None => back,
            });
        }
        let sum = match acc {
            Some(v) => v,
            None => tape.constant(Matrix::zeros(tokens, self.d_out)),
        };
        tape.scale(sum, self.scaling())
    }

    pub fn route(&self, x: &Matrix, k: usize) -> Result<RoutingDecision> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let xv = tape.constant(x.clone());
        Ok(self.route_on_tape(&mut tape, &vars, xv, k, None)?.1)
    }

    pub fn route_masked(&self, x: &Matrix, k: usize, allowed: &[bool]) -> Result<RoutingDecision> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let xv = tape.constant(x.clone());
        Ok(self.route_on_tape(&mut tape, &vars, xv, k, Some(allowed))?.1)
    }

    /// Adapter delta (`tokens x d_out`) for a decision produced by [`route`](Self::route).
    pub fn adapter_forward(&self, x: &Matrix, decision: &RoutingDecision) -> Result<Matrix> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let probs = tape.constant(decision.probs.clone());
        let delta = self.delta_on_tape(&mut tape, &vars, xv, probs, decision)?;
        Ok(tape.value(delta).clone())
    }
}

/// Shape of one module's bank, enough for parameter accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleDims {
    pub d_in: usize,
    pub d_out: usize,
    pub rank: usize,
}

impl ModuleDims {
    pub fn of(bank: &ExpertBank) -> Self {
        Self {
            d_in: bank.d_in,
            d_out: bank.d_out,
            rank: bank.rank,
        }
    }

    pub fn params(&self, n_experts: usize) -> usize {
        trainable_param_count(n_experts, self.rank, self.d_in, self.d_out)
    }
}

/// `N·r·(d_in + d_out) + N·d_in`: LoRA stacks plus gate rows.
pub fn trainable_param_count(n_experts: usize, rank: usize, d_in: usize, d_out: usize) -> usize {
    n_experts * (rank * (d_in + d_out) + d_in)
}

/// Load-balancing loss `N · Σ f_i P_i` per decision, averaged over decisions
/// (one decision per module).
pub fn aux_loss(decisions: &[&RoutingDecision]) -> Result<f64> {
    if decisions.is_empty() {
        return Err(Error::invalid("aux loss over no decisions"));
    }
    let mut total = 0.0;
    for d in decisions {
        if d.n_tokens() == 0 {
            return Err(Error::invalid("aux loss over an empty batch"));
        }
        let n = d.n_experts() as f64;
        let f = d.load_fractions();
        let p = d.mean_probs();
        total += n * f.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(total / decisions.len() as f64)
}

/// Differentiable counterpart of [`aux_loss`]: `f` is held constant and the
/// gradient flows through `P` into the gate.
pub fn aux_loss_on_tape(tape: &mut Tape, traces: &[(Var, &RoutingDecision)]) -> Result<Var> {
    if traces.is_empty() {
        return Err(Error::invalid("aux loss over no decisions"));
    }
    let mut acc: Option<Var> = None;
    for (probs, decision) in traces {
        if decision.n_tokens() == 0 {
            return Err(Error::invalid("aux loss over an empty batch"));
        }
        let n = decision.n_experts() as f64;
        let weights: Vec<f64> = decision.load_fractions().iter().map(|f| f * n).collect();
        let mean = tape.mean_rows(*probs)?;
        let w = tape.constant(Matrix::row_vector(&weights));
        let prod = tape.mul(mean, w)?;
        let term = tape.sum(prod)?;
        acc = Some(match acc {
            Some(prev) => tape.add(prev, term)?,
            None => term,
        });
    }
    tape.scale(acc.expect("non-empty"), 1.0 / traces.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ProjKind;

    fn module() -> ModuleId {
        ModuleId::new(0, ProjKind::Q)
    }

    fn random_x(seed: u64, tokens: usize, d: usize) -> Matrix {
        normal_matrix(&mut stream_rng(seed, &[99]), tokens, d, 1.0)
    }

    #[test]
    fn fresh_bank_has_zero_delta() {
        let bank = init_expert_bank(module(), 8, 6, 2, 4, 4.0, 3).unwrap();
        let x = random_x(1, 5, 8);
        let d = bank.route(&x, 2).unwrap();
        assert_eq!(bank.adapter_forward(&x, &d).unwrap(), Matrix::zeros(5, 6));
    }

    #[test]
    fn init_is_deterministic_and_validated() {
        let a = init_expert_bank(module(), 32, 32, 8, 8, 16.0, 42).unwrap();
        let b = init_expert_bank(module(), 32, 32, 8, 8, 16.0, 42).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(a.n_experts(), 8);
        assert_eq!(a.scaling(), 2.0);
        assert!(a.b_stack.data().iter().all(|&v| v == 0.0));
        assert!(init_expert_bank(module(), 4, 16, 5, 2, 1.0, 0).is_err());
    }

    #[test]
    fn zero_gate_routes_uniformly_with_low_index_ties() {
        let mut bank = init_expert_bank(module(), 4, 4, 2, 4, 2.0, 0).unwrap();
        bank.gate = Matrix::zeros(4, 4);
        let d = bank.route(&random_x(2, 3, 4), 2).unwrap();
        for t in 0..3 {
            assert_eq!(d.probs.row(t), &[0.25; 4]);
            assert_eq!(d.selected[t], vec![0, 1]);
        }
    }

    #[test]
    fn route_softmax_arithmetic() {
        // logits [0, ln 3] from gate rows [0], [ln 3] applied to x = [1]
        let mut bank = init_expert_bank(module(), 1, 1, 1, 2, 1.0, 0).unwrap();
        bank.gate = Matrix::from_rows(&[[0.0], [3f64.ln()]]);
        let d = bank.route(&Matrix::from_rows(&[[1.0]]), 1).unwrap();
        assert!((d.probs.get(0, 0) - 0.25).abs() < 1e-15);
        assert!((d.probs.get(0, 1) - 0.75).abs() < 1e-15);
        assert_eq!(d.selected[0], vec![1]);
        assert!(bank.route(&Matrix::from_rows(&[[1.0]]), 3).is_err());
    }

    #[test]
    fn dominant_expert_always_selected() {
        let mut bank = init_expert_bank(module(), 4, 4, 2, 4, 2.0, 0).unwrap();
        bank.gate = Matrix::zeros(4, 4);
        bank.gate.row_mut(2).copy_from_slice(&[10.0, 0.0, 0.0, 0.0]);
        let mut x = random_x(3, 20, 4);
        for t in 0..20 {
            x.set(t, 0, 1.0 + x.get(t, 0).abs());
        }
        let d = bank.route(&x, 2).unwrap();
        assert!(d.selected.iter().all(|s| s.contains(&2)));
    }

    #[test]
    fn single_expert_reduces_to_dense_lora() {
        let mut bank = init_expert_bank(module(), 6, 5, 2, 1, 4.0, 8).unwrap();
        bank.b_stack = normal_matrix(&mut stream_rng(5, &[]), 1, 10, 1.0);
        let x = random_x(4, 7, 6);
        let d = bank.route(&x, 1).unwrap();
        let delta = bank.adapter_forward(&x, &d).unwrap();
        let (a, b) = (bank.expert_a(0), bank.expert_b(0));
        // (alpha/r) · x Aᵀ Bᵀ
        let reference = x.matmul(&a.transpose()).unwrap().matmul(&b.transpose()).unwrap().scale(2.0);
        for (p, q) in delta.data().iter().zip(reference.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn opposite_experts_cancel_under_equal_weights() {
        let mut bank = init_expert_bank(module(), 3, 3, 1, 2, 1.0, 0).unwrap();
        bank.gate = Matrix::zeros(2, 3);
        bank.a_stack = Matrix::from_rows(&[[1.0, 2.0, -1.0], [1.0, 2.0, -1.0]]);
        bank.b_stack = Matrix::from_rows(&[[0.5, -1.0, 2.0], [-0.5, 1.0, -2.0]]);
        let x = random_x(5, 4, 3);
        let d = bank.route(&x, 2).unwrap();
        let delta = bank.adapter_forward(&x, &d).unwrap();
        assert!(delta.data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn unselected_experts_contribute_nothing() {
        let mut bank = init_expert_bank(module(), 4, 4, 2, 4, 2.0, 1).unwrap();
        bank.b_stack = normal_matrix(&mut stream_rng(9, &[]), 4, 8, 1.0);
        let x = random_x(6, 6, 4);
        let d = bank.route(&x, 2).unwrap();
        let used: Vec<bool> = (0..4).map(|i| d.selected.iter().any(|s| s.contains(&i))).collect();
        let before = bank.adapter_forward(&x, &d).unwrap();
        for (i, &u) in used.iter().enumerate() {
            if !u {
                bank.a_stack.row_mut(i).iter_mut().for_each(|v| *v = 1e6);
                bank.b_stack.row_mut(i).iter_mut().for_each(|v| *v = -1e6);
            }
        }
        assert_eq!(before, bank.adapter_forward(&x, &d).unwrap());
    }

    fn decision(probs: Vec<Vec<f64>>, selected: Vec<Vec<usize>>, k: usize) -> RoutingDecision {
        RoutingDecision {
            probs: Matrix::from_rows(&probs),
            selected,
            k,
        }
    }

    #[test]
    fn aux_loss_bounds() {
        let uniform = decision(
            vec![vec![0.25; 4]; 4],
            vec![vec![0], vec![1], vec![2], vec![3]],
            1,
        );
        assert!((aux_loss(&[&uniform]).unwrap() - 1.0).abs() < 1e-15);

        let collapsed = decision(vec![vec![1.0, 0.0, 0.0, 0.0]; 3], vec![vec![0]; 3], 1);
        assert!((aux_loss(&[&collapsed]).unwrap() - 4.0).abs() < 1e-15);

        let single = decision(vec![vec![1.0]; 5], vec![vec![0]; 5], 1);
        assert_eq!(aux_loss(&[&single]).unwrap(), 1.0);

        assert!(aux_loss(&[]).is_err());
    }

    #[test]
    fn aux_loss_on_tape_matches_value() {
        let mut bank = init_expert_bank(module(), 4, 4, 2, 4, 2.0, 1).unwrap();
        bank.gate = normal_matrix(&mut stream_rng(4, &[]), 4, 4, 2.0);
        let x = random_x(7, 9, 4);
        let mut tape = Tape::new();
        let vars = bank.bind(&mut tape);
        let xv = tape.constant(x);
        let (probs, d) = bank.route_on_tape(&mut tape, &vars, xv, 2, None).unwrap();
        let loss = aux_loss_on_tape(&mut tape, &[(probs, &d)]).unwrap();
        let direct = aux_loss(&[&d]).unwrap();
        assert!((tape.value(loss).item().unwrap() - direct).abs() < 1e-14);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(vars.gate).data().iter().any(|&g| g != 0.0));
        assert_eq!(grads.get(vars.a), Matrix::zeros(4, 8));
    }

    #[test]
    fn param_count_arithmetic() {
        assert_eq!(trainable_param_count(8, 4, 32, 32), 2304);
        assert_eq!(trainable_param_count(3, 4, 32, 32), 864);
        let bank = init_expert_bank(module(), 32, 32, 4, 8, 8.0, 0).unwrap();
        assert_eq!(bank.trainable_param_count(), 2304);
    }
}
