//! AdamW with decoupled weight decay. State is kept per parameter block and
//! has exactly the block's shape, so slicing experts out of a block slices
//! the same rows out of its moments.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe_adapter::BlockId;
use crate::numerics::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub block: BlockId,
    pub m: Matrix,
    pub v: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    /// Number of completed update steps.
    pub t: u64,
    #[serde(with = "moments_list")]
    blocks: BTreeMap<BlockId, Moments>,
}

pub type AdamW = OptimizerState;

mod moments_list {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(map: &BTreeMap<BlockId, Moments>, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(map.values())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<BTreeMap<BlockId, Moments>, D::Error> {
        let v: Vec<Moments> = Vec::deserialize(d)?;
        Ok(v.into_iter().map(|m| (m.block, m)).collect())
    }
}

impl OptimizerState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            t: 0,
            blocks: BTreeMap::new(),
        }
    }

    pub fn moments(&self, block: BlockId) -> Option<&Moments> {
        self.blocks.get(&block)
    }

    pub fn blocks(&self) -> impl Iterator<Item = &Moments> {
        self.blocks.values()
    }

    /// Zero moments for a block that has not been stepped yet.
    pub fn register(&mut self, block: BlockId, shape: (usize, usize)) {
        self.blocks.entry(block).or_insert_with(|| Moments {
            block,
            m: Matrix::zeros(shape.0, shape.1),
            v: Matrix::zeros(shape.0, shape.1),
        });
    }

    /// One AdamW update over every `(block, param, grad)` triple; the step
    /// counter advances once. Nothing is modified if any gradient is
    /// non-finite or any shape disagrees.
    pub fn step<'a>(
        &mut self,
        updates: impl IntoIterator<Item = (BlockId, &'a mut Matrix, &'a Matrix)>,
        lr: f64,
    ) -> Result<()> {
        if !(lr >= 0.0) {
            return Err(Error::invalid(format!("learning rate must be >= 0, got {lr}")));
        }
        let updates: Vec<_> = updates.into_iter().collect();
        for (block, param, grad) in &updates {
            if param.shape() != grad.shape() {
                return Err(Error::shape("adamw", param.shape_str(), grad.shape_str()));
            }
            if !grad.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of {}/{:?}",
                    block.module, block.part
                )));
            }
            if let Some(mo) = self.blocks.get(block) {
                if mo.m.shape() != param.shape() {
                    return Err(Error::shape("adamw_state", mo.m.shape_str(), param.shape_str()));
                }
            }
        }
        self.t += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (block, param, grad) in updates {
            self.register(block, param.shape());
            let mo = self.blocks.get_mut(&block).expect("registered");
            let p = param.data_mut();
            let m = mo.m.data_mut();
            let v = mo.v.data_mut();
            for (j, &g) in grad.data().iter().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * p[j]);
            }
        }
        Ok(())
    }

    /// Keeps only the survivor rows of a block's moments. Step counter is
    /// left alone.
    pub fn slice_block(&mut self, block: BlockId, survivors: &[usize]) -> Result<()> {
        let Some(mo) = self.blocks.get_mut(&block) else {
            return Ok(());
        };
        let m = mo.m.select_rows(survivors)?;
        let v = mo.v.select_rows(survivors)?;
        mo.m = m;
        mo.v = v;
        Ok(())
    }

    /// `2 ×` total elements over all blocks.
    pub fn state_element_count(&self) -> usize {
        self.blocks.values().map(|mo| mo.m.len() + mo.v.len()).sum()
    }
}

/// Linear warm-up from 0 to `peak` over `warmup_frac · total` steps, then
/// cosine decay to 0 at `total`.
pub fn schedule_lr(step: usize, total_steps: usize, peak: f64, warmup_frac: f64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let step = step.min(total_steps) as f64;
    let total = total_steps as f64;
    let warm = (warmup_frac.clamp(0.0, 1.0) * total).round();
    if step < warm {
        return peak * step / warm;
    }
    if total <= warm {
        return peak;
    }
    let progress = (step - warm) / (total - warm);
    peak * 0.5 * (1.0 + (PI * progress).cos())
}
