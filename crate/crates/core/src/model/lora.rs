//! Low-rank adapters: `W_eff = W + (alpha / r) · B · A` with `A: [r, in]`,
//! `B: [out, r]`. `B` starts at zero so a fresh adapter is a no-op.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Base parameter names the adapters attach to.
    pub targets: Vec<String>,
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn a_name(target: &str) -> String {
        format!("{target}.lora_a")
    }

    pub fn b_name(target: &str) -> String {
        format!("{target}.lora_b")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapters {
    cfg: LoraConfig,
    params: ParamSet,
}

impl LoraAdapters {
    /// Fresh adapters for every target in `cfg`: `A ~ N(0, 1/in)`, `B = 0`.
    pub fn new(cfg: LoraConfig, base: &ParamSet, seed: u64) -> Result<Self> {
        if cfg.rank == 0 {
            return Err(Error::config("LoRA rank must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for target in &cfg.targets {
            let w = base.require(target)?;
            let [out, inp] = matrix_dims(target, w)?;
            params.insert(LoraConfig::a_name(target), Tensor::randn(&[cfg.rank, inp], 1.0 / (inp as f64).sqrt(), &mut rng));
            params.insert(LoraConfig::b_name(target), Tensor::zeros(&[out, cfg.rank]));
        }
        Ok(Self { cfg, params })
    }

    pub fn from_parts(cfg: LoraConfig, params: ParamSet) -> Result<Self> {
        for t in &cfg.targets {
            params.require(&LoraConfig::a_name(t))?;
            params.require(&LoraConfig::b_name(t))?;
        }
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &LoraConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Every target must name a base matrix whose shape matches `B · A`.
    pub fn check_targets(&self, base: &ParamSet) -> Result<()> {
        for t in &self.cfg.targets {
            let w = base.require(t)?;
            let a = self.params.require(&LoraConfig::a_name(t))?;
            let b = self.params.require(&LoraConfig::b_name(t))?;
            let [out, inp] = matrix_dims(t, w)?;
            if a.shape() != [self.cfg.rank, inp] || b.shape() != [out, self.cfg.rank] {
                return Err(Error::ShapeMismatch {
                    op: "lora",
                    lhs: w.shape().to_vec(),
                    rhs: vec![b.shape()[0], a.shape()[1]],
                });
            }
        }
        Ok(())
    }

    /// `(alpha / r) · B · A` for `target`.
    pub fn delta(&self, target: &str) -> Result<Tensor> {
        let a = self.params.require(&LoraConfig::a_name(target))?;
        let b = self.params.require(&LoraConfig::b_name(target))?;
        Ok(b.matmul(a)?.scale(self.cfg.scale()))
    }
}

fn matrix_dims(name: &str, w: &Tensor) -> Result<[usize; 2]> {
    match w.shape() {
        &[o, i] => Ok([o, i]),
        other => Err(Error::config(format!("LoRA target `{name}` has non-matrix shape {other:?}"))),
    }
}

/// Bakes every adapter delta into a copy of `base`.
pub fn merge_lora(base: &ParamSet, adapters: &LoraAdapters) -> Result<ParamSet> {
    adapters.check_targets(base)?;
    let mut out = base.clone();
    for t in &adapters.cfg.targets {
        let delta = adapters.delta(t)?;
        out.get_mut(t).ok_or_else(|| Error::UnknownParam(t.clone()))?.axpy(1.0, &delta);
    }
    Ok(out)
}
