//! Full, banded and multidirectional sliding window attention (MSWA) over a
//! `(frames, height, width)` token lattice, plus the hybrid layer schedule.
//!
//! Tokens are flattened in `fhw` order (frame slowest, width fastest). A
//! [`Direction`] names another axis order; MSWA splits heads into six
//! contiguous groups and runs banded attention for group `i` on the tokens
//! rearranged into `Direction::ALL[i]` order.
//!
//! The window is symmetric and non-causal: in the rearranged order a query at
//! position `i` sees keys `j` with `|i - j| <= S / 2`. Tokens near either end
//! of the sequence simply see fewer keys.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Mask, Tensor};

/// Number of head groups / sliding directions in MSWA.
pub const DIRECTION_GROUPS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridDims {
    pub f: usize,
    pub h: usize,
    pub w: usize,
}

impl GridDims {
    pub fn new(f: usize, h: usize, w: usize) -> Result<Self> {
        if f == 0 || h == 0 || w == 0 {
            return Err(Error::config(format!("grid dims ({f},{h},{w}) must all be >= 1")));
        }
        Ok(Self { f, h, w })
    }

    pub fn seq(&self) -> usize {
        self.f * self.h * self.w
    }

    /// `(f, h, w)` coordinates of the token at flat `fhw` index `i`.
    pub fn coords(&self, i: usize) -> [usize; 3] {
        [i / (self.h * self.w), (i / self.w) % self.h, i % self.w]
    }

    fn extent(&self, axis: Axis) -> usize {
        match axis {
            Axis::F => self.f,
            Axis::H => self.h,
            Axis::W => self.w,
        }
    }
}

impl fmt::Display for GridDims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.f, self.h, self.w)
    }
}

impl FromStr for GridDims {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::config(format!("invalid dims `{s}`, expected f,h,w")))?;
        match parts[..] {
            [f, h, w] => GridDims::new(f, h, w),
            _ => Err(Error::config(format!("invalid dims `{s}`, expected f,h,w"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Axis {
    F,
    H,
    W,
}

/// Axis order used to flatten the lattice, slowest axis first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Fhw,
    Fwh,
    Hfw,
    Hwf,
    Wfh,
    Whf,
}

impl Direction {
    /// Head-group order used by MSWA.
    pub const ALL: [Direction; DIRECTION_GROUPS] = [
        Direction::Fhw,
        Direction::Fwh,
        Direction::Hfw,
        Direction::Hwf,
        Direction::Wfh,
        Direction::Whf,
    ];

    fn axes(self) -> [Axis; 3] {
        use Axis::*;
        match self {
            Direction::Fhw => [F, H, W],
            Direction::Fwh => [F, W, H],
            Direction::Hfw => [H, F, W],
            Direction::Hwf => [H, W, F],
            Direction::Wfh => [W, F, H],
            Direction::Whf => [W, H, F],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Fhw => "fhw",
            Direction::Fwh => "fwh",
            Direction::Hfw => "hfw",
            Direction::Hwf => "hwf",
            Direction::Wfh => "wfh",
            Direction::Whf => "whf",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Direction::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown direction `{s}`")))
    }
}

/// Total window size `S` in tokens; half-width is `S / 2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    size: usize,
}

impl WindowSpec {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::OutOfRange {
                what: "window size",
                value: 0.0,
                expected: ">= 1",
            });
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn half_width(&self) -> usize {
        self.size / 2
    }

    /// True when the band reaches every key of a length-`seq` sequence.
    pub fn covers(&self, seq: usize) -> bool {
        self.half_width() + 1 >= seq
    }

    /// Keys per query row ignoring edge truncation, capped at `seq`.
    pub fn band_width(&self, seq: usize) -> usize {
        (2 * self.half_width() + 1).min(seq)
    }

    fn allows(&self, i: usize, j: usize) -> bool {
        i.abs_diff(j) <= self.half_width()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Full,
    Mswa,
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerKind::Full => "full",
            LayerKind::Mswa => "mswa",
        })
    }
}

/// Where the MSWA layers go in an `L`-layer stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    /// No MSWA layers.
    None,
    /// `[0, L/2)`
    Shallow,
    /// `[L/4, 3L/4)`
    Middle,
    /// `[L/2, L)`
    Deep,
    /// `[start, end)`
    Custom { start: usize, end: usize },
}

impl Placement {
    pub fn band(self, n_layers: usize) -> (usize, usize) {
        match self {
            Placement::None => (0, 0),
            Placement::Shallow => (0, n_layers / 2),
            Placement::Middle => (n_layers / 4, 3 * n_layers / 4),
            Placement::Deep => (n_layers / 2, n_layers),
            Placement::Custom { start, end } => (start, end),
        }
    }
}

impl FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Placement::None),
            "shallow" => Ok(Placement::Shallow),
            "middle" => Ok(Placement::Middle),
            "deep" => Ok(Placement::Deep),
            other => {
                let bad = || Error::config(format!("unknown placement `{other}`"));
                let (a, b) = other.split_once("..").ok_or_else(bad)?;
                Ok(Placement::Custom {
                    start: a.parse().map_err(|_| bad())?,
                    end: b.parse().map_err(|_| bad())?,
                })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HybridSchedule {
    kinds: Vec<LayerKind>,
    window: WindowSpec,
}

impl HybridSchedule {
    pub fn new(kinds: Vec<LayerKind>, window: WindowSpec) -> Result<Self> {
        if kinds.is_empty() {
            return Err(Error::config("schedule needs at least one layer"));
        }
        Ok(Self { kinds, window })
    }

    pub fn all_full(n_layers: usize, window: WindowSpec) -> Result<Self> {
        Self::new(vec![LayerKind::Full; n_layers], window)
    }

    pub fn kinds(&self) -> &[LayerKind] {
        &self.kinds
    }

    pub fn window(&self) -> WindowSpec {
        self.window
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn has_mswa(&self) -> bool {
        self.kinds.contains(&LayerKind::Mswa)
    }

    pub fn check_heads(&self, heads: usize) -> Result<()> {
        if self.has_mswa() && heads % DIRECTION_GROUPS != 0 {
            return Err(Error::HeadsNotDivisible {
                heads,
                groups: DIRECTION_GROUPS,
            });
        }
        Ok(())
    }
}

/// MSWA on the placement's band, full attention elsewhere.
pub fn build_schedule(n_layers: usize, placement: Placement, window: WindowSpec) -> Result<HybridSchedule> {
    let (start, end) = placement.band(n_layers);
    if start > end || end > n_layers {
        return Err(Error::config(format!(
            "MSWA band {start}..{end} not within 0..{n_layers}"
        )));
    }
    let kinds = (0..n_layers)
        .map(|l| if (start..end).contains(&l) { LayerKind::Mswa } else { LayerKind::Full })
        .collect();
    HybridSchedule::new(kinds, window)
}

/// `perm[p]` is the `fhw` flat index of the token at position `p` when the
/// lattice is flattened in `dir` order.
pub fn permutation_for(dir: Direction, dims: GridDims) -> Vec<usize> {
    let [a0, a1, a2] = dir.axes();
    let (n0, n1, n2) = (dims.extent(a0), dims.extent(a1), dims.extent(a2));
    let mut perm = Vec::with_capacity(dims.seq());
    for i0 in 0..n0 {
        for i1 in 0..n1 {
            for i2 in 0..n2 {
                let mut c = [0usize; 3];
                for (axis, v) in [(a0, i0), (a1, i1), (a2, i2)] {
                    c[axis as usize] = v;
                }
                perm.push((c[0] * dims.h + c[1]) * dims.w + c[2]);
            }
        }
    }
    perm
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (p, &i) in perm.iter().enumerate() {
        inv[i] = p;
    }
    inv
}

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(usize, usize, usize)> {
    for other in [k, v] {
        if q.rank() != 3 || other.shape() != q.shape() {
            return Err(Error::ShapeMismatch {
                op: "attention",
                lhs: q.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
    }
    Ok((q.shape()[0], q.shape()[1], q.shape()[2]))
}

/// Attention for one query row over keys `lo..hi` of a single head.
fn attend_row(q: &[f64], keys: &[f64], vals: &[f64], d: usize, lo: usize, hi: usize, scores: &mut Vec<f64>, out: &mut [f64]) {
    let scale = 1.0 / (d as f64).sqrt();
    scores.clear();
    let mut mx = f64::NEG_INFINITY;
    for j in lo..hi {
        let kj = &keys[j * d..(j + 1) * d];
        let s = q.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
        mx = mx.max(s);
        scores.push(s);
    }
    let mut z = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - mx).exp();
        z += *s;
    }
    out.fill(0.0);
    for (j, &p) in (lo..hi).zip(scores.iter()) {
        let w = p / z;
        for (o, &vv) in out.iter_mut().zip(&vals[j * d..(j + 1) * d]) {
            *o += w * vv;
        }
    }
}

fn band_kernel(q: &Tensor, k: &Tensor, v: &Tensor, half: Option<usize>) -> Result<Tensor> {
    let (heads, seq, d) = check_qkv(q, k, v)?;
    let mut out = vec![0.0; heads * seq * d];
    let mut scores = Vec::with_capacity(seq);
    for h in 0..heads {
        let base = h * seq * d;
        let (qh, kh, vh) = (
            &q.data()[base..base + seq * d],
            &k.data()[base..base + seq * d],
            &v.data()[base..base + seq * d],
        );
        for i in 0..seq {
            let (lo, hi) = match half {
                Some(hw) => (i.saturating_sub(hw), (i + hw + 1).min(seq)),
                None => (0, seq),
            };
            let o = &mut out[base + i * d..base + (i + 1) * d];
            attend_row(&qh[i * d..(i + 1) * d], kh, vh, d, lo, hi, &mut scores, o);
        }
    }
    Tensor::new(vec![heads, seq, d], out)
}

/// `softmax(Q Kᵀ / √d) V` per head; inputs are `[heads, seq, d]`.
pub fn full_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    band_kernel(q, k, v, None)
}

/// Attention restricted to keys within `S / 2` positions of each query.
/// Cost is proportional to `seq * band` rather than `seq²`.
pub fn banded_attention(q: &Tensor, k: &Tensor, v: &Tensor, win: WindowSpec) -> Result<Tensor> {
    band_kernel(q, k, v, Some(win.half_width()))
}

/// Multidirectional sliding window attention.
///
/// Heads are split into six contiguous groups; group `i` is rearranged from
/// `fhw` into `Direction::ALL[i]` order, run through [`banded_attention`],
/// and rearranged back.
pub fn mswa(q: &Tensor, k: &Tensor, v: &Tensor, dims: GridDims, win: WindowSpec) -> Result<Tensor> {
    mswa_with_directions(q, k, v, dims, win, &Direction::ALL)
}

/// [`mswa`] with an arbitrary list of directions, one contiguous head group each.
pub fn mswa_with_directions(q: &Tensor, k: &Tensor, v: &Tensor, dims: GridDims, win: WindowSpec, dirs: &[Direction]) -> Result<Tensor> {
    let (heads, seq, d) = check_qkv(q, k, v)?;
    if dirs.is_empty() || heads % dirs.len() != 0 {
        return Err(Error::HeadsNotDivisible {
            heads,
            groups: dirs.len(),
        });
    }
    if seq != dims.seq() {
        return Err(Error::ShapeMismatch {
            op: "mswa",
            lhs: q.shape().to_vec(),
            rhs: vec![dims.f, dims.h, dims.w],
        });
    }
    let group = heads / dirs.len();
    let mut out = Vec::with_capacity(heads * seq * d);
    for (g, &dir) in dirs.iter().enumerate() {
        let perm = permutation_for(dir, dims);
        let inv = invert_permutation(&perm);
        let heads_idx: Vec<usize> = (g * group..(g + 1) * group).collect();
        let rearrange = |t: &Tensor| t.gather(0, &heads_idx).and_then(|t| t.gather(1, &perm));
        let o = banded_attention(&rearrange(q)?, &rearrange(k)?, &rearrange(v)?, win)?;
        out.extend(o.gather(1, &inv)?.into_data());
    }
    Tensor::new(vec![heads, seq, d], out)
}

/// Boolean `seq × seq` mask of the keys head group `group` may attend to,
/// expressed in the original `fhw` token order.
pub fn mswa_mask_oracle(dims: GridDims, win: WindowSpec, group: usize) -> Result<Mask> {
    if group >= DIRECTION_GROUPS {
        return Err(Error::OutOfRange {
            what: "head group",
            value: group as f64,
            expected: "0..6",
        });
    }
    let pos = invert_permutation(&permutation_for(Direction::ALL[group], dims));
    let seq = dims.seq();
    Ok(Mask::from_fn(seq, seq, |p, q| win.allows(pos[p], pos[q])))
}

/// Adjacency of one direction's band in `fhw` order, as bitsets.
fn band_adjacency(dims: GridDims, win: WindowSpec, dir: Direction, adj: &mut [Vec<u64>]) {
    let perm = permutation_for(dir, dims);
    let seq = dims.seq();
    let hw = win.half_width();
    for (p, &tok) in perm.iter().enumerate() {
        for &other in &perm[p.saturating_sub(hw)..(p + hw + 1).min(seq)] {
            adj[tok][other / 64] |= 1 << (other % 64);
        }
    }
}

/// Size of every token's receptive field after `n_layers` attention layers
/// whose masks are the union of `directions`' bands.
pub fn receptive_field(dims: GridDims, win: WindowSpec, n_layers: usize, directions: &[Direction]) -> Result<Vec<usize>> {
    if directions.is_empty() {
        return Err(Error::config("receptive_field needs at least one direction"));
    }
    if n_layers == 0 {
        return Err(Error::config("receptive_field needs n_layers >= 1"));
    }
    let seq = dims.seq();
    let words = seq.div_ceil(64);
    let mut adj = vec![vec![0u64; words]; seq];
    for &dir in directions {
        band_adjacency(dims, win, dir, &mut adj);
    }
    let mut reach = adj.clone();
    for _ in 1..n_layers {
        let next: Vec<Vec<u64>> = reach
            .iter()
            .map(|set| {
                let mut acc = set.clone();
                for (wi, &word) in set.iter().enumerate() {
                    let mut bits = word;
                    while bits != 0 {
                        let s = wi * 64 + bits.trailing_zeros() as usize;
                        bits &= bits - 1;
                        for (a, b) in acc.iter_mut().zip(&adj[s]) {
                            *a |= b;
                        }
                    }
                }
                acc
            })
            .collect();
        if next == reach {
            break;
        }
        reach = next;
    }
    Ok(reach.iter().map(|s| s.iter().map(|w| w.count_ones() as usize).sum()).collect())
}

/// Attention FLOPs for one layer (score + weighted sum, multiply-add = 2).
pub fn flop_count(kind: LayerKind, dims: GridDims, win: WindowSpec, heads: usize, d: usize) -> f64 {
    let seq = dims.seq() as f64;
    let keys = match kind {
        LayerKind::Full => seq,
        LayerKind::Mswa => win.band_width(dims.seq()) as f64,
    };
    4.0 * heads as f64 * seq * keys * d as f64
}

/// Attention-only layer stack used for latency measurements: each layer
/// projects its input to Q, K, V, attends according to the schedule, projects
/// back and adds a residual.
pub struct AttentionStack {
    dims: GridDims,
    heads: usize,
    head_dim: usize,
    schedule: HybridSchedule,
    directions: Vec<Direction>,
    layers: Vec<[Tensor; 4]>,
}

impl AttentionStack {
    pub fn new<R: rand::Rng + ?Sized>(
        dims: GridDims,
        heads: usize,
        head_dim: usize,
        schedule: HybridSchedule,
        rng: &mut R,
    ) -> Result<Self> {
        schedule.check_heads(heads)?;
        let hidden = heads * head_dim;
        let std = 1.0 / (hidden as f64).sqrt();
        let layers = (0..schedule.len())
            .map(|_| std::array::from_fn(|_| Tensor::randn(&[hidden, hidden], std, rng)))
            .collect();
        Ok(Self {
            dims,
            heads,
            head_dim,
            schedule,
            directions: Direction::ALL.to_vec(),
            layers,
        })
    }

    /// Replaces the six MSWA directions with `dirs`, one head group each.
    pub fn with_directions(mut self, dirs: &[Direction]) -> Result<Self> {
        if dirs.is_empty() || self.heads % dirs.len() != 0 {
            return Err(Error::HeadsNotDivisible {
                heads: self.heads,
                groups: dirs.len(),
            });
        }
        self.directions = dirs.to_vec();
        Ok(self)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let seq = self.dims.seq();
        let hidden = self.heads * self.head_dim;
        let split = |t: Tensor| t.reshape(&[seq, self.heads, self.head_dim])?.permute(&[1, 0, 2]);
        let mut x = x.clone();
        for (kind, [wq, wk, wv, wo]) in self.schedule.kinds().iter().zip(&self.layers) {
            let q = split(x.matmul(wq)?)?;
            let k = split(x.matmul(wk)?)?;
            let v = split(x.matmul(wv)?)?;
            let a = match kind {
                LayerKind::Full => full_attention(&q, &k, &v)?,
                LayerKind::Mswa => mswa_with_directions(&q, &k, &v, self.dims, self.schedule.window(), &self.directions)?,
            };
            let merged = a.permute(&[1, 0, 2])?.reshape(&[seq, hidden])?;
            let o = merged.matmul(wo)?;
            x = x.zip_with(&o, "residual", |a, b| a + b)?;
        }
        Ok(x)
    }
}
