use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::exec::Exec;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

#[test]
fn linear_map_gradient_is_input_broadcast() {
    // loss = sum(W x) with x a column: dW[i][j] = x[j]
    let mut tape = Tape::new();
    let w = tape.param(Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]));
    let x = tape.constant(Matrix::from_rows(&[[0.5], [-1.0], [2.0]]));
    let y = tape.matmul(w, x).unwrap();
    let loss = tape.sum(y).unwrap();
    let g = tape.backward(loss).unwrap().get(w);
    assert_eq!(g, Matrix::from_rows(&[[0.5, -1.0, 2.0], [0.5, -1.0, 2.0]]));
}

#[test]
fn unused_leaf_gets_zero_gradient() {
    let mut tape = Tape::new();
    let a = tape.param(Matrix::from_rows(&[[1.0, 2.0]]));
    let unused = tape.param(Matrix::from_rows(&[[3.0, 4.0, 5.0]]));
    let loss = tape.sum(a).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(unused), Matrix::zeros(1, 3));
}

#[test]
fn softmax_cross_entropy_gradient_at_uniform_logits() {
    let mut tape = Tape::new();
    let logits = tape.param(Matrix::from_rows(&[[0.0, 0.0]]));
    let loss = tape.cross_entropy(logits, vec![0]).unwrap();
    assert!((tape.value(loss).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    let g = tape.backward(loss).unwrap().get(logits);
    assert_eq!(g, Matrix::from_rows(&[[-0.5, 0.5]]));
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let a = tape.param(Matrix::zeros(2, 2));
    assert!(tape.backward(a).is_err());
}

#[test]
fn silu_and_rmsnorm_basics() {
    let mut tape = Tape::new();
    let x = tape.constant(Matrix::from_rows(&[[0.0, 1.0]]));
    let s = tape.silu(x).unwrap();
    assert_eq!(tape.value(s).get(0, 0), 0.0);

    let x = tape.constant(Matrix::from_rows(&[[3.0, 3.0, 3.0, 3.0]]));
    let g = tape.constant(Matrix::filled(1, 4, 1.0));
    let y = tape.rmsnorm(x, g).unwrap();
    let row = tape.value(y).row(0).to_vec();
    assert!(row.iter().all(|&v| v == row[0]));
    assert!((row[0] - 1.0).abs() < 1e-6);
}

#[test]
fn shape_errors_are_reported() {
    let mut tape = Tape::new();
    let a = tape.constant(Matrix::zeros(2, 3));
    let b = tape.constant(Matrix::zeros(2, 2));
    assert!(tape.add(a, b).is_err());
    assert!(tape.matmul(a, a).is_err());
    assert!(tape.cross_entropy(a, vec![0]).is_err());
    assert!(tape.cross_entropy(a, vec![0, 3]).is_err());
}

/// Builds a graph touching every primitive and returns (loss, params).
fn build_graph(tape: &mut Tape, params: &[Matrix], sel: &[usize]) -> (Var, Vec<Var>) {
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let (x, w, gain, stack, gate) = (vars[0], vars[1], vars[2], vars[3], vars[4]);
    // x: 6x4 (batch 2, seq 3), w: 4x4, gain: 1x4, stack: 2x8 (two 2x4), gate: 2x4
    let h = tape.rmsnorm(x, gain).unwrap();
    let q = tape.matmul(h, w).unwrap();
    let att = tape.causal_attention(q, h, x, 2, 3, 2).unwrap();
    let act = tape.silu(att).unwrap();
    let logits = tape.matmul_nt(act, gate).unwrap();
    let probs = tape.softmax_rows(logits).unwrap();
    let a0 = tape.row_as_matrix(stack, sel[0], 2, 4).unwrap();
    let rows = vec![0, 2, 3, 5];
    let xs = tape.gather_rows(act, rows.clone()).unwrap();
    let u = tape.matmul_nt(xs, a0).unwrap();
    let wts = tape
        .pick(probs, rows.iter().map(|&r| (r, sel[0])).collect())
        .unwrap();
    let uw = tape.mul_col(u, wts).unwrap();
    let back = tape.scatter_add_rows(uw, rows, 6).unwrap();
    let sq = tape.mul(back, back).unwrap();
    let sc = tape.scale(sq, 0.7).unwrap();
    let m = tape.mean_rows(probs).unwrap();
    let ms = tape.sum(m).unwrap();
    let s = tape.sum(sc).unwrap();
    let ce = tape.cross_entropy(logits, vec![0, 1, 1, 0, 1, 0]).unwrap();
    let t = tape.add(s, ce).unwrap();
    let loss = tape.add(t, ms).unwrap();
    (loss, vars)
}

fn shapes() -> [(usize, usize); 5] {
    [(6, 4), (4, 4), (1, 4), (2, 8), (2, 4)]
}

#[test]
fn backward_matches_finite_differences_on_random_graphs() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params: Vec<Matrix> = shapes()
            .iter()
            .map(|&(r, c)| random(&mut rng, r, c))
            .collect();
        let sel = [rng.random_range(0..2usize)];
        let mut tape = Tape::new();
        let (loss, vars) = build_graph(&mut tape, &params, &sel);
        let mut grads = tape.backward(loss).unwrap();
        let analytic: Vec<Matrix> = vars.iter().map(|&v| grads.take(v)).collect();
        let report = grad_check(
            |p: &[Matrix]| {
                let mut t = Tape::new();
                let (l, _) = build_graph(&mut t, p, &sel);
                Ok(Probe {
                    loss: t.value(l).item()?,
                    signature: (),
                })
            },
            &params,
            &analytic,
            DEFAULT_STEP,
            Exec::Sequential,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "seed {seed}: {report:?}");
    }
}

#[test]
fn replay_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params: Vec<Matrix> = shapes()
        .iter()
        .map(|&(r, c)| random(&mut rng, r, c))
        .collect();
    let mut tape = Tape::new();
    build_graph(&mut tape, &params, &[1]);
    let replayed = tape.replay().unwrap();
    assert_eq!(replayed.len(), tape.len());
    for (i, v) in replayed.iter().enumerate() {
        let recorded = tape.value(Var(i));
        assert_eq!(
            v.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            recorded.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            "entry {i} ({})",
            tape.op_name(Var(i))
        );
    }
}

#[test]
fn causal_attention_ignores_future_positions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let q = random(&mut rng, 4, 4);
    let k = random(&mut rng, 4, 4);
    let v = random(&mut rng, 4, 4);
    let run = |k: &Matrix, v: &Matrix| {
        let mut tape = Tape::new();
        let (qv, kv, vv) = (
            tape.constant(q.clone()),
            tape.constant(k.clone()),
            tape.constant(v.clone()),
        );
        let o = tape.causal_attention(qv, kv, vv, 1, 4, 2).unwrap();
        tape.value(o).clone()
    };
    let base = run(&k, &v);
    let mut k2 = k.clone();
    let mut v2 = v.clone();
    k2.row_mut(3).iter_mut().for_each(|x| *x += 1.0);
    v2.row_mut(3).iter_mut().for_each(|x| *x -= 2.0);
    let changed = run(&k2, &v2);
    for t in 0..3 {
        assert_eq!(base.row(t), changed.row(t));
    }
    assert_ne!(base.row(3), changed.row(3));
}

fn brute_topk(v: &[f64], k: usize) -> Vec<usize> {
    // Pick repeatedly: the max value, lowest index among equals.
    let mut taken = vec![false; v.len()];
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for i in 0..v.len() {
            if taken[i] {
                continue;
            }
            best = match best {
                Some(b) if v[b] >= v[i] => Some(b),
                _ => Some(i),
            };
        }
        taken[best.unwrap()] = true;
    }
    (0..v.len()).filter(|&i| taken[i]).collect()
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(row in prop::collection::vec(-1e3f64..1e3, 1..16), shift in -1e6f64..1e6) {
        let shifted: Vec<f64> = row.iter().map(|x| x + shift).collect();
        let p = Matrix::row_vector(&shifted).softmax_rows();
        prop_assert!(p.data().iter().all(|&x| x >= 0.0 && x.is_finite()));
        prop_assert!((p.sum() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn topk_matches_brute_force(v in prop::collection::vec(0u8..6, 1..12), k_raw in 1usize..12) {
        // Small integer values force many ties.
        let vals: Vec<f64> = v.iter().map(|&x| x as f64 / 4.0).collect();
        let k = 1 + (k_raw - 1) % vals.len();
        prop_assert_eq!(topk_indices(&vals, k).unwrap(), brute_topk(&vals, k));
    }
}
