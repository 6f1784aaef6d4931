//! 3D rotary positional embedding.
//!
//! Each head's channels are split into three slices laid out as
//! `[height | width | frame]`. Every slice is rotated pairwise, channels
//! `(2k, 2k+1)`, by angle `p * base^(-2k / d_axis)`, where `p` is the token's
//! coordinate along that slice's axis.

use serde::{Deserialize, Serialize};

use crate::attention::GridDims;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DEFAULT_BASE: f64 = 10_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    head_dim: usize,
    h_dim: usize,
    w_dim: usize,
    f_dim: usize,
    base: f64,
}

impl RopeConfig {
    /// Standard 3/8 (height), 3/8 (width), 2/8 (frame) split.
    ///
    /// When `3/8 · head_dim` is not even the spatial slices are rounded down
    /// to the nearest even width and the frame slice takes the remainder.
    pub fn new(head_dim: usize) -> Result<Self> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(Error::config(format!("rope head_dim {head_dim} must be even and positive")));
        }
        let spatial = 2 * (3 * head_dim / 16);
        Self::with_slices(head_dim, spatial, spatial, head_dim - 2 * spatial, DEFAULT_BASE)
    }

    pub fn with_slices(head_dim: usize, h_dim: usize, w_dim: usize, f_dim: usize, base: f64) -> Result<Self> {
        if [h_dim, w_dim, f_dim].iter().any(|d| d % 2 != 0) || h_dim + w_dim + f_dim != head_dim {
            return Err(Error::config(format!(
                "rope slices ({h_dim},{w_dim},{f_dim}) must be even and sum to {head_dim}"
            )));
        }
        if !(base.is_finite() && base > 0.0) {
            return Err(Error::OutOfRange {
                what: "rope base",
                value: base,
                expected: "> 0",
            });
        }
        Ok(Self {
            head_dim,
            h_dim,
            w_dim,
            f_dim,
            base,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    /// `(offset, width, axis)` for each slice; axis indexes `[f, h, w]` coordinates.
    pub fn slices(&self) -> [(usize, usize, usize); 3] {
        [
            (0, self.h_dim, 1),
            (self.h_dim, self.w_dim, 2),
            (self.h_dim + self.w_dim, self.f_dim, 0),
        ]
    }
}

/// `table[p][k] = p · base^(-2k / d_axis)`, shape `[axis_len, d_axis / 2]`.
pub fn rope_angles(axis_len: usize, d_axis: usize, base: f64) -> Result<Tensor> {
    if d_axis == 0 || d_axis % 2 != 0 || axis_len == 0 {
        return Err(Error::config(format!("rope_angles needs even d_axis > 0, got {d_axis}")));
    }
    let half = d_axis / 2;
    let inv: Vec<f64> = (0..half).map(|k| base.powf(-2.0 * k as f64 / d_axis as f64)).collect();
    Ok(Tensor::from_fn(&[axis_len, half], |i| (i / half) as f64 * inv[i % half]))
}

/// `(f, h, w)` lattice coordinates of every token in `fhw` order.
pub fn lattice_positions(dims: GridDims) -> Vec<[f64; 3]> {
    (0..dims.seq())
        .map(|i| {
            let [f, h, w] = dims.coords(i);
            [f as f64, h as f64, w as f64]
        })
        .collect()
}

/// Rotates `x: [heads, seq, head_dim]` for arbitrary (possibly fractional or
/// negative) per-token positions `(f, h, w)`.
pub fn apply_rope_at(x: &Tensor, positions: &[[f64; 3]], cfg: &RopeConfig) -> Result<Tensor> {
    if x.rank() != 3 || x.shape()[2] != cfg.head_dim || x.shape()[1] != positions.len() {
        return Err(Error::ShapeMismatch {
            op: "rope3d",
            lhs: x.shape().to_vec(),
            rhs: vec![positions.len(), cfg.head_dim],
        });
    }
    let (heads, seq, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = x.clone();
    let data = out.data_mut();
    for (offset, width, axis) in cfg.slices() {
        for k in 0..width / 2 {
            let freq = cfg.base.powf(-2.0 * k as f64 / width as f64);
            for (t, pos) in positions.iter().enumerate() {
                let (s, c) = (pos[axis] * freq).sin_cos();
                for h in 0..heads {
                    let i = (h * seq + t) * d + offset + 2 * k;
                    let (a, b) = (data[i], data[i + 1]);
                    data[i] = a * c - b * s;
                    data[i + 1] = a * s + b * c;
                }
            }
        }
    }
    Ok(out)
}

pub fn apply_rope3d(x: &Tensor, dims: GridDims, cfg: &RopeConfig) -> Result<Tensor> {
    if x.rank() == 3 && x.shape()[1] != dims.seq() {
        return Err(Error::ShapeMismatch {
            op: "rope3d",
            lhs: x.shape().to_vec(),
            rhs: vec![dims.f, dims.h, dims.w],
        });
    }
    apply_rope_at(x, &lattice_positions(dims), cfg)
}

/// Precomputed tables expressing the rotation as
/// `x ⊙ cos + x[swap] ⊙ signed_sin`, for use inside a differentiable graph.
#[derive(Clone, Debug)]
pub struct RopeTables {
    pub cos: Tensor,
    pub signed_sin: Tensor,
    pub swap: Vec<usize>,
}

pub fn rope_tables(dims: GridDims, cfg: &RopeConfig) -> Result<RopeTables> {
    let seq = dims.seq();
    let d = cfg.head_dim;
    let mut cos = vec![1.0; seq * d];
    let mut sin = vec![0.0; seq * d];
    for (offset, width, axis) in cfg.slices() {
        if width == 0 {
            continue;
        }
        let len = [dims.f, dims.h, dims.w][axis];
        let table = rope_angles(len, width, cfg.base)?;
        for t in 0..seq {
            let p = dims.coords(t)[axis];
            for k in 0..width / 2 {
                let (s, c) = table.data()[p * (width / 2) + k].sin_cos();
                let i = t * d + offset + 2 * k;
                cos[i] = c;
                cos[i + 1] = c;
                sin[i] = -s;
                sin[i + 1] = s;
            }
        }
    }
    let swap = (0..d).map(|c| c ^ 1).collect();
    Ok(RopeTables {
        cos: Tensor::new(vec![seq, d], cos)?,
        signed_sin: Tensor::new(vec![seq, d], sin)?,
        swap,
    })
}
