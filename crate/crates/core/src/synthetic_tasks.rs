//! Seeded cluster-structured classification tasks.
//!
//! Vocabulary layout: token 0 is the query marker at the answer position,
//! tokens `1..=n_clusters` are cluster markers, the next `label_arity`
//! tokens are label tokens and everything above is content. An example is
//! `[marker, content…, query]` and its label is the argmax of a
//! cluster-specific random linear score over the content tokens, so every
//! cluster needs its own mapping.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::TokenBatch;
use crate::error::{Error, Result};
use crate::numerics::{normal_matrix, stream_rng, Matrix};

pub const QUERY_TOKEN: usize = 0;

const MAX_TRIES: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub n_clusters: usize,
    pub vocab_size: usize,
    /// Full sequence length including marker and query token.
    pub seq_len: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub label_arity: usize,
    pub seed: u64,
    /// Per-cluster sampling weights; `None` is round-robin uniform.
    #[serde(default)]
    pub skew: Option<Vec<f64>>,
    /// Minimum gap between best and runner-up label score.
    pub margin: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            n_clusters: 4,
            vocab_size: 24,
            seq_len: 8,
            n_train: 1280,
            n_eval: 400,
            label_arity: 4,
            seed: 7,
            skew: None,
            margin: 1.0,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_clusters < 2 {
            return Err(Error::Config(format!("n_clusters must be >= 2, got {}", self.n_clusters)));
        }
        if self.label_arity < 2 || self.label_arity > self.vocab_size {
            return Err(Error::Config(format!(
                "label_arity {} must be in 2..={}",
                self.label_arity, self.vocab_size
            )));
        }
        if self.n_content() < self.label_arity {
            return Err(Error::Config(format!(
                "vocab_size {} leaves {} content tokens; need at least {}",
                self.vocab_size,
                self.n_content(),
                self.label_arity
            )));
        }
        if self.seq_len < 3 {
            return Err(Error::Config(format!("seq_len must be >= 3, got {}", self.seq_len)));
        }
        if self.n_train == 0 || self.n_eval == 0 {
            return Err(Error::Config("n_train and n_eval must be positive".into()));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::Config(format!("margin must be >= 0, got {}", self.margin)));
        }
        if let Some(w) = &self.skew {
            if w.len() != self.n_clusters || w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::Config(format!(
                    "skew needs {} nonnegative weights with positive sum",
                    self.n_clusters
                )));
            }
        }
        Ok(())
    }

    pub fn marker_token(&self, cluster: usize) -> usize {
        1 + cluster
    }

    pub fn label_token(&self, label: usize) -> usize {
        1 + self.n_clusters + label
    }

    pub fn label_tokens(&self) -> Vec<usize> {
        (0..self.label_arity).map(|l| self.label_token(l)).collect()
    }

    pub fn first_content_token(&self) -> usize {
        1 + self.n_clusters + self.label_arity
    }

    pub fn n_content(&self) -> usize {
        self.vocab_size.saturating_sub(self.first_content_token())
    }

    pub fn content_len(&self) -> usize {
        self.seq_len - 2
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub cluster: usize,
    pub tokens: Vec<usize>,
    pub label: usize,
    /// Token id the model must emit at the final position.
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub spec: TaskSpec,
    /// One `label_arity × n_content` score table per cluster.
    pub label_fns: Vec<Matrix>,
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
}

fn label_scores(spec: &TaskSpec, table: &Matrix, content: &[usize]) -> Vec<f64> {
    let first = spec.first_content_token();
    (0..spec.label_arity)
        .map(|l| content.iter().map(|&t| table.get(l, t - first)).sum())
        .collect()
}

/// Label and the gap to the runner-up.
fn classify(scores: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    let runner = scores
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != best)
        .map(|(_, &s)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    (best, scores[best] - runner)
}

fn pick_cluster(spec: &TaskSpec, i: usize, rng: &mut impl Rng) -> usize {
    match &spec.skew {
        None => i % spec.n_clusters,
        Some(w) => {
            let total: f64 = w.iter().sum();
            let mut u = rng.random::<f64>() * total;
            for (c, &wc) in w.iter().enumerate() {
                if u < wc {
                    return c;
                }
                u -= wc;
            }
            w.len() - 1
        }
    }
}

fn gen_split(spec: &TaskSpec, tables: &[Matrix], n: usize, stream: u64) -> Result<Vec<Example>> {
    let mut rng = stream_rng(spec.seed, &[stream]);
    let first = spec.first_content_token();
    let mut per_cluster = vec![0usize; spec.n_clusters];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let cluster = pick_cluster(spec, i, &mut rng);
        let want = per_cluster[cluster] % spec.label_arity;
        per_cluster[cluster] += 1;
        let mut found = None;
        for _ in 0..MAX_TRIES {
            let content: Vec<usize> = (0..spec.content_len())
                .map(|_| first + rng.random_range(0..spec.n_content()))
                .collect();
            let (label, gap) = classify(&label_scores(spec, &tables[cluster], &content));
            if label == want && gap >= spec.margin {
                found = Some(content);
                break;
            }
        }
        let content = found.ok_or_else(|| {
            Error::Config(format!(
                "could not sample label {want} for cluster {cluster} with margin {}",
                spec.margin
            ))
        })?;
        let mut tokens = Vec::with_capacity(spec.seq_len);
        tokens.push(spec.marker_token(cluster));
        tokens.extend(content);
        tokens.push(QUERY_TOKEN);
        out.push(Example {
            cluster,
            tokens,
            label: want,
            target: spec.label_token(want),
        });
    }
    Ok(out)
}

/// Train and eval splits, deterministic in `spec.seed`. Labels are balanced
/// within each cluster.
pub fn gen_cluster_task(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let tables: Vec<Matrix> = (0..spec.n_clusters)
        .map(|c| normal_matrix(&mut stream_rng(spec.seed, &[0, c as u64]), spec.label_arity, spec.n_content(), 1.0))
        .collect();
    let train = gen_split(spec, &tables, spec.n_train, 1)?;
    let eval = gen_split(spec, &tables, spec.n_eval, 2)?;
    Ok(Dataset {
        spec: spec.clone(),
        label_fns: tables,
        train,
        eval,
    })
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub tokens: TokenBatch,
    pub targets: Vec<usize>,
}

impl Batch {
    pub fn from_examples(examples: &[&Example]) -> Result<Self> {
        Ok(Self {
            tokens: TokenBatch::new(examples.iter().map(|e| e.tokens.clone()).collect())?,
            targets: examples.iter().map(|e| e.target).collect(),
        })
    }
}

/// Seeded shuffle of `split` for `epoch`, cut into batches; the final
/// partial batch is kept.
pub fn batch_iter(split: &[Example], batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..split.len()).collect();
    order.shuffle(&mut stream_rng(seed, &[3, epoch as u64]));
    order
        .chunks(batch_size)
        .map(|idx| Batch::from_examples(&idx.iter().map(|&i| &split[i]).collect::<Vec<_>>()))
        .collect()
}

/// Fits one multiclass perceptron per cluster on bag-of-token counts of the
/// train split and returns its accuracy on the eval split.
pub fn linear_probe_accuracy(ds: &Dataset, epochs: usize) -> f64 {
    let spec = &ds.spec;
    let first = spec.first_content_token();
    let features = |e: &Example| {
        let mut f = vec![0.0; spec.n_content()];
        for &t in &e.tokens[1..e.tokens.len() - 1] {
            f[t - first] += 1.0;
        }
        f
    };
    let mut weights = vec![Matrix::zeros(spec.label_arity, spec.n_content()); spec.n_clusters];
    let score = |w: &Matrix, f: &[f64]| -> usize {
        let s: Vec<f64> = (0..spec.label_arity)
            .map(|l| w.row(l).iter().zip(f).map(|(a, b)| a * b).sum())
            .collect();
        classify(&s).0
    };
    for _ in 0..epochs {
        for e in &ds.train {
            let f = features(e);
            let w = &mut weights[e.cluster];
            let guess = score(w, &f);
            if guess != e.label {
                for (j, &x) in f.iter().enumerate() {
                    let up = w.get(e.label, j) + x;
                    w.set(e.label, j, up);
                    let down = w.get(guess, j) - x;
                    w.set(guess, j, down);
                }
            }
        }
    }
    let correct = ds
        .eval
        .iter()
        .filter(|e| score(&weights[e.cluster], &features(e)) == e.label)
        .count();
    correct as f64 / ds.eval.len() as f64
}

/// One JSON object per example, train split first.
pub fn dump_jsonl(ds: &Dataset, path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (split, examples) in [("train", &ds.train), ("eval", &ds.eval)] {
        for e in examples {
            let line = serde_json::json!({
                "split": split,
                "cluster": e.cluster,
                "tokens": e.tokens,
                "label": e.label,
                "target": e.target,
            });
            writeln!(file, "{line}")?;
        }
    }
    file.flush()?;
    Ok(())
}
