//! Toy dual-stream (MMDiT-style) diffusion transformer.
//!
//! Video and text tokens keep separate projections, norms and FFNs but share
//! one joint attention per block. Rotary embeddings are applied to video
//! queries and keys only. In MSWA layers text tokens stay globally visible:
//! a video query sees every text key plus its band of video keys, and text
//! queries see everything.

mod checkpoint;
mod lora;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use lora::{merge_lora, LoraAdapters, LoraConfig};

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self, build_schedule, GridDims, HybridSchedule, LayerKind, Placement, WindowSpec, DIRECTION_GROUPS};
use crate::error::{Error, Result};
use crate::numerics::{BoundParams, Graph, Mask, ParamSet, Tensor, Var};
use crate::rope3d::{rope_tables, RopeConfig, RopeTables};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub text_len: usize,
    pub text_dim: usize,
    pub dims: GridDims,
    pub schedule: HybridSchedule,
    pub rope: RopeConfig,
    pub ffn_mult: usize,
    pub time_dim: usize,
    /// RMSNorm epsilon for the text conditioning path.
    pub text_eps: f64,
    pub norm_eps: f64,
}

impl ModelConfig {
    /// A small config with MSWA in the middle layers and window `h·w`.
    pub fn toy(dims: GridDims, heads: usize, head_dim: usize, n_layers: usize, text_len: usize, text_dim: usize) -> Result<Self> {
        let window = WindowSpec::new(dims.h * dims.w)?;
        let placement = if heads % DIRECTION_GROUPS == 0 { Placement::Middle } else { Placement::None };
        let cfg = Self {
            n_layers,
            heads,
            head_dim,
            text_len,
            text_dim,
            dims,
            schedule: build_schedule(n_layers, placement, window)?,
            rope: RopeConfig::new(head_dim)?,
            ffn_mult: 4,
            time_dim: 16,
            text_eps: 1e-6,
            norm_eps: 1e-6,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn hidden(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.heads == 0 || self.head_dim == 0 || self.ffn_mult == 0 {
            return Err(Error::config("layers, heads, head_dim and ffn_mult must be >= 1"));
        }
        if self.schedule.len() != self.n_layers {
            return Err(Error::config(format!(
                "schedule has {} layers, model has {}",
                self.schedule.len(),
                self.n_layers
            )));
        }
        self.schedule.check_heads(self.heads)?;
        if self.rope.head_dim() != self.head_dim {
            return Err(Error::config("rope head_dim differs from model head_dim"));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::config("time_dim must be even and >= 2"));
        }
        if self.text_len > 0 && self.text_dim == 0 {
            return Err(Error::config("text_dim must be >= 1 when text_len > 0"));
        }
        Ok(())
    }

    /// Parameter names and shapes, in the order they are initialized.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let hd = self.hidden();
        let ff = hd * self.ffn_mult;
        let mut out = vec![];
        if self.text_dim > 0 {
            out.push(("text.norm.gain".to_string(), vec![self.text_dim]));
            out.push(("text.proj".to_string(), vec![hd, self.text_dim]));
        }
        out.push(("time.proj".to_string(), vec![hd, self.time_dim]));
        for l in 0..self.n_layers {
            for stream in ["video", "text"] {
                let p = |s: &str| format!("blocks.{l:02}.{stream}.{s}");
                out.push((p("norm1.gain"), vec![hd]));
                for w in ["q", "k", "v", "o"] {
                    out.push((p(w), vec![hd, hd]));
                }
                out.push((p("norm2.gain"), vec![hd]));
                out.push((p("ffn.up"), vec![ff, hd]));
                out.push((p("ffn.down"), vec![hd, ff]));
            }
        }
        out.push(("final.norm.gain".to_string(), vec![hd]));
        out.push(("final.proj".to_string(), vec![hd, hd]));
        out
    }

    /// Names of the attention projections (LoRA targets).
    pub fn attention_projections(&self) -> Vec<String> {
        self.param_shapes()
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| [".q", ".k", ".v", ".o"].iter().any(|s| n.ends_with(s)))
            .collect()
    }
}

/// Synthetic stand-in for encoder features, `[text_len, text_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextFeatures {
    tokens: Option<Tensor>,
}

impl TextFeatures {
    pub fn new(tokens: Tensor) -> Result<Self> {
        if tokens.rank() != 2 || !tokens.is_finite() {
            return Err(Error::config("text features must be a finite [len, dim] tensor"));
        }
        Ok(Self { tokens: Some(tokens) })
    }

    pub fn empty() -> Self {
        Self { tokens: None }
    }

    /// Gaussian features scaled by `scale` (encoder outputs are often large).
    pub fn random(len: usize, dim: usize, scale: f64, seed: u64) -> Result<Self> {
        if len == 0 {
            return Ok(Self::empty());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::new(Tensor::randn(&[len, dim], scale, &mut rng))
    }

    pub fn tokens(&self) -> Option<&Tensor> {
        self.tokens.as_ref()
    }

    pub fn len(&self) -> usize {
        self.tokens.as_ref().map_or(0, |t| t.shape()[0])
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Sinusoidal embedding of `t ∈ [0, 1]`, `[1, dim]`.
pub fn timestep_embedding(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut v = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let (s, c) = (1000.0 * t * freq).sin_cos();
        v[i] = s;
        v[half + i] = c;
    }
    Tensor::from_parts(vec![1, dim], v)
}

/// Weight lookup: base parameters plus optional low-rank deltas.
pub struct Weights<'a> {
    pub base: &'a BoundParams,
    pub lora: Option<(&'a BoundParams, &'a LoraConfig)>,
}

impl<'a> Weights<'a> {
    pub fn base(base: &'a BoundParams) -> Self {
        Self { base, lora: None }
    }

    pub fn get(&self, g: &Graph, name: &str) -> Result<Var> {
        let w = self.base.get(name)?;
        match self.lora {
            Some((ad, cfg)) if cfg.targets.iter().any(|t| t == name) => {
                let a = ad.get(&LoraConfig::a_name(name))?;
                let b = ad.get(&LoraConfig::b_name(name))?;
                let delta = g.scale(g.matmul(b, a)?, cfg.scale())?;
                g.add(w, delta)
            }
            _ => Ok(w),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    cfg: ModelConfig,
    params: ParamSet,
}

impl Model {
    /// Seeded init: gains 1, attention-output and FFN-down projections zero
    /// (each block starts as the identity), other weights `N(0, 0.02²)`.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, shape) in cfg.param_shapes() {
            let t = if name.ends_with(".gain") {
                Tensor::ones(&shape)
            } else if name.starts_with("blocks.") && (name.ends_with(".o") || name.ends_with(".ffn.down")) {
                Tensor::zeros(&shape)
            } else {
                Tensor::randn(&shape, INIT_STD, &mut rng)
            };
            params.insert(name, t);
        }
        Ok(Self { cfg, params })
    }

    /// Every weight random with standard deviation `std` (gains around 1);
    /// used where a zero-initialized projection would hide gradient paths.
    pub fn randomized(cfg: ModelConfig, seed: u64, std: f64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, shape) in cfg.param_shapes() {
            let mut t = Tensor::randn(&shape, std, &mut rng);
            if name.ends_with(".gain") {
                t = t.map(|x| 1.0 + x);
            }
            params.insert(name, t);
        }
        Ok(Self { cfg, params })
    }

    pub fn from_parts(cfg: ModelConfig, params: ParamSet) -> Result<Self> {
        cfg.validate()?;
        for (name, shape) in cfg.param_shapes() {
            let t = params.require(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "model params",
                    lhs: shape,
                    rhs: t.shape().to_vec(),
                });
            }
        }
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// RMSNorm over the feature axis with learned gain, then a linear map to
    /// the hidden width.
    pub fn prepare_text_graph(&self, g: &Graph, w: &Weights, text: Var) -> Result<Var> {
        let normed = g.rmsnorm(text, self.cfg.text_eps)?;
        let scaled = g.mul(normed, w.get(g, "text.norm.gain")?)?;
        g.linear(scaled, w.get(g, "text.proj")?)
    }

    pub fn prepare_text(&self, text: &TextFeatures) -> Result<Option<Tensor>> {
        let Some(tokens) = text.tokens() else { return Ok(None) };
        let g = Graph::new();
        let bound = g.bind_frozen(&self.params);
        let x = g.constant(tokens.clone());
        let y = self.prepare_text_graph(&g, &Weights::base(&bound), x)?;
        Ok(Some((*g.value(y)).clone()))
    }

    /// Records a forward pass on `g` and returns the velocity prediction
    /// `[seq, hidden]`.
    pub fn forward_graph(&self, g: &Graph, w: &Weights, x_t: Var, text: &TextFeatures, t: f64) -> Result<Var> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::OutOfRange {
                what: "timestep",
                value: t,
                expected: "[0, 1]",
            });
        }
        let cfg = &self.cfg;
        let (seq, hd) = (cfg.dims.seq(), cfg.hidden());
        if g.shape(x_t) != [seq, hd] {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: g.shape(x_t),
                rhs: vec![seq, hd],
            });
        }
        if let Some(tok) = text.tokens() {
            if tok.shape()[1] != cfg.text_dim {
                return Err(Error::ShapeMismatch {
                    op: "forward text",
                    lhs: tok.shape().to_vec(),
                    rhs: vec![tok.shape()[0], cfg.text_dim],
                });
            }
        }

        let emb = g.constant(timestep_embedding(t, cfg.time_dim));
        let temb = g.linear(emb, w.get(g, "time.proj")?)?;
        let mut video = g.add(x_t, temb)?;
        let mut txt = match text.tokens() {
            Some(tok) => {
                let raw = g.constant(tok.clone());
                let prepared = self.prepare_text_graph(g, w, raw)?;
                Some(g.add(prepared, temb)?)
            }
            None => None,
        };

        let rope = rope_tables(cfg.dims, &cfg.rope)?;
        let text_len = text.len();
        let mut mswa_mask = None;
        for (l, &kind) in cfg.schedule.kinds().iter().enumerate() {
            let mask = match kind {
                LayerKind::Full => None,
                LayerKind::Mswa => {
                    if mswa_mask.is_none() {
                        mswa_mask = Some(Rc::new(joint_mswa_mask(cfg, text_len)?));
                    }
                    mswa_mask.clone()
                }
            };
            let (v, t2) = self.block_graph(g, w, l, video, txt, &rope, mask)?;
            video = v;
            txt = t2;
        }
        let normed = g.rmsnorm(video, cfg.norm_eps)?;
        let normed = g.mul(normed, w.get(g, "final.norm.gain")?)?;
        g.linear(normed, w.get(g, "final.proj")?)
    }

    /// One dual-stream block. `mask` is `None` for full attention.
    #[allow(clippy::too_many_arguments)]
    pub fn block_graph(
        &self,
        g: &Graph,
        w: &Weights,
        layer: usize,
        video: Var,
        text: Option<Var>,
        rope: &RopeTables,
        mask: Option<Rc<Mask>>,
    ) -> Result<(Var, Option<Var>)> {
        let cfg = &self.cfg;
        let (heads, hdim) = (cfg.heads, cfg.head_dim);
        let name = |stream: &str, s: &str| format!("blocks.{layer:02}.{stream}.{s}");

        let project = |x: Var, stream: &str| -> Result<[Var; 3]> {
            let n = g.rmsnorm(x, cfg.norm_eps)?;
            let n = g.mul(n, w.get(g, &name(stream, "norm1.gain"))?)?;
            let rows = g.shape(x)[0];
            let mut out = [n; 3];
            for (slot, p) in out.iter_mut().zip(["q", "k", "v"]) {
                let y = g.linear(n, w.get(g, &name(stream, p))?)?;
                let y = g.reshape(y, &[rows, heads, hdim])?;
                *slot = g.permute(y, &[1, 0, 2])?;
            }
            Ok(out)
        };

        let [mut qv, mut kv, vv] = project(video, "video")?;
        let cos = g.constant(rope.cos.clone());
        let sin = g.constant(rope.signed_sin.clone());
        let swap = Rc::new(rope.swap.clone());
        let rotate = |x: Var| -> Result<Var> {
            let a = g.mul(x, cos)?;
            let b = g.mul(g.gather(x, 2, swap.clone())?, sin)?;
            g.add(a, b)
        };
        qv = rotate(qv)?;
        kv = rotate(kv)?;

        let text_len = text.map_or(0, |t| g.shape(t)[0]);
        let (q, k, v) = match text {
            Some(t) => {
                let [qt, kt, vt] = project(t, "text")?;
                (g.concat(&[qt, qv], 1)?, g.concat(&[kt, kv], 1)?, g.concat(&[vt, vv], 1)?)
            }
            None => (qv, kv, vv),
        };

        let scores = g.scale(g.matmul(q, g.transpose_last(k)?)?, 1.0 / (hdim as f64).sqrt())?;
        let probs = match mask {
            Some(m) => g.masked_softmax(scores, m)?,
            None => g.softmax(scores)?,
        };
        let att = g.matmul(probs, v)?;
        let rows = g.shape(att)[1];
        let att = g.reshape(g.permute(att, &[1, 0, 2])?, &[rows, cfg.hidden()])?;

        let finish = |x: Var, a: Var, stream: &str| -> Result<Var> {
            let x = g.add(x, g.linear(a, w.get(g, &name(stream, "o"))?)?)?;
            let n = g.rmsnorm(x, cfg.norm_eps)?;
            let n = g.mul(n, w.get(g, &name(stream, "norm2.gain"))?)?;
            let hmid = g.silu(g.linear(n, w.get(g, &name(stream, "ffn.up"))?)?)?;
            g.add(x, g.linear(hmid, w.get(g, &name(stream, "ffn.down"))?)?)
        };

        match text {
            Some(t) => {
                let at = g.narrow(att, 0, 0, text_len)?;
                let av = g.narrow(att, 0, text_len, rows)?;
                Ok((finish(video, av, "video")?, Some(finish(t, at, "text")?)))
            }
            None => Ok((finish(video, att, "video")?, None)),
        }
    }

    /// Velocity prediction with frozen parameters.
    pub fn forward(&self, x_t: &Tensor, text: &TextFeatures, t: f64) -> Result<Tensor> {
        self.forward_with(x_t, text, t, None)
    }

    pub fn forward_with(&self, x_t: &Tensor, text: &TextFeatures, t: f64, adapters: Option<&LoraAdapters>) -> Result<Tensor> {
        let g = Graph::new();
        let base = g.bind_frozen(&self.params);
        let bound_ad = adapters.map(|a| (g.bind_frozen(a.params()), a.config()));
        let w = Weights {
            base: &base,
            lora: bound_ad.as_ref().map(|(b, c)| (b, *c)),
        };
        if let Some(ad) = adapters {
            ad.check_targets(&self.params)?;
        }
        let x = g.constant(x_t.clone());
        let y = self.forward_graph(&g, &w, x, text, t)?;
        Ok((*g.value(y)).clone())
    }
}

/// `[heads, text+seq, text+seq]` mask for a joint MSWA layer.
pub fn joint_mswa_mask(cfg: &ModelConfig, text_len: usize) -> Result<Mask> {
    let seq = cfg.dims.seq();
    let n = text_len + seq;
    let group = cfg.heads / DIRECTION_GROUPS;
    let mut data = Vec::with_capacity(cfg.heads * n * n);
    for gi in 0..DIRECTION_GROUPS {
        let band = attention::mswa_mask_oracle(cfg.dims, cfg.schedule.window(), gi)?;
        let one = Mask::from_fn(n, n, |r, c| r < text_len || c < text_len || band.get((r - text_len) * seq + (c - text_len)));
        for _ in 0..group {
            data.extend_from_slice(one.data());
        }
    }
    Mask::new(vec![cfg.heads, n, n], data)
}
