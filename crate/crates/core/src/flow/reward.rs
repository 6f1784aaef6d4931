//! Differentiable synthetic rewards and a causal linear decoder stub.
//!
//! The rewards stand in for learned preference models: each is a smooth
//! scalar functional of decoded frames `[F, H, W]`, maximal at zero.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::GridDims;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardKind {
    /// `-(mean(frames) - target)²`
    Brightness { target: f64 },
    /// `-mean` of squared forward differences along both spatial axes.
    Smoothness,
    /// `-|centroid - target|²` with the centroid in pixel coordinates
    /// `(x = column, y = row)`; `None` targets the frame center.
    CenterMass { target: Option<(f64, f64)> },
}

impl RewardKind {
    /// Kind for a reward name with its default settings.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "brightness" => Ok(RewardKind::Brightness { target: 0.5 }),
            "smoothness" => Ok(RewardKind::Smoothness),
            "center_mass" => Ok(RewardKind::CenterMass { target: None }),
            other => Err(Error::UnknownReward(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub name: String,
    pub weight: f64,
    pub kind: RewardKind,
}

impl RewardSpec {
    pub fn new(name: impl Into<String>, weight: f64, kind: RewardKind) -> Result<Self> {
        if !(weight.is_finite() && weight >= 0.0) {
            return Err(Error::OutOfRange {
                what: "reward weight",
                value: weight,
                expected: ">= 0",
            });
        }
        Ok(Self {
            name: name.into(),
            weight,
            kind,
        })
    }

    /// Parses `name:weight[,name:weight…]`.
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        s.split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|part| {
                let (name, weight) = part.split_once(':').unwrap_or((part, "1"));
                let name = name.trim();
                let weight: f64 = weight
                    .trim()
                    .parse()
                    .map_err(|_| Error::config(format!("bad reward weight in `{part}`")))?;
                RewardSpec::new(name, weight, RewardKind::from_name(name)?)
            })
            .collect()
    }

    /// Records this reward (unweighted) of `frames: [F, H, W]`.
    pub fn graph(&self, g: &Graph, frames: Var) -> Result<Var> {
        let shape = g.shape(frames);
        if shape.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "reward",
                lhs: shape,
                rhs: vec![0, 0, 0],
            });
        }
        match self.kind {
            RewardKind::Brightness { target } => {
                let d = g.offset(g.mean(frames)?, -target)?;
                g.scale(g.square(d)?, -1.0)
            }
            RewardKind::Smoothness => smoothness_graph(g, frames, &shape),
            RewardKind::CenterMass { target } => {
                let (h, w) = (shape[1], shape[2]);
                let target = target.unwrap_or(((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0));
                center_mass_graph(g, frames, h, w, target)
            }
        }
    }

    pub fn evaluate(&self, frames: &Tensor) -> Result<f64> {
        let g = Graph::new();
        let x = g.constant(frames.clone());
        let r = self.graph(&g, x)?;
        Ok(g.value(r).item())
    }
}

fn smoothness_graph(g: &Graph, frames: Var, shape: &[usize]) -> Result<Var> {
    let mut total = None;
    let mut count = 0usize;
    for axis in [1, 2] {
        let n = shape[axis];
        if n < 2 {
            continue;
        }
        let hi = g.narrow(frames, axis, 1, n)?;
        let lo = g.narrow(frames, axis, 0, n - 1)?;
        let s = g.sum(g.square(g.sub(hi, lo)?)?)?;
        count += shape.iter().product::<usize>() / n * (n - 1);
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    match total {
        Some(t) => g.scale(t, -1.0 / count as f64),
        None => Ok(g.constant(Tensor::scalar(0.0))),
    }
}

fn center_mass_graph(g: &Graph, frames: Var, h: usize, w: usize, target: (f64, f64)) -> Result<Var> {
    let xs = g.constant(Tensor::from_fn(&[h, w], |i| (i % w) as f64));
    let ys = g.constant(Tensor::from_fn(&[h, w], |i| (i / w) as f64));
    let mass = g.sum(frames)?;
    let cx = g.div(g.sum(g.mul(frames, xs)?)?, mass)?;
    let cy = g.div(g.sum(g.mul(frames, ys)?)?, mass)?;
    let dx = g.square(g.offset(cx, -target.0)?)?;
    let dy = g.square(g.offset(cy, -target.1)?)?;
    g.scale(g.add(dx, dy)?, -1.0)
}

pub fn brightness_target(frames: &Tensor, target: f64) -> Result<f64> {
    RewardSpec::new("brightness", 1.0, RewardKind::Brightness { target })?.evaluate(frames)
}

pub fn smoothness(frames: &Tensor) -> Result<f64> {
    RewardSpec::new("smoothness", 1.0, RewardKind::Smoothness)?.evaluate(frames)
}

pub fn center_mass(frames: &Tensor, target_xy: (f64, f64)) -> Result<f64> {
    RewardSpec::new("center_mass", 1.0, RewardKind::CenterMass { target: Some(target_xy) })?.evaluate(frames)
}

/// `Σ weight · value`, matching values to specs by name.
pub fn combine_rewards(values: &[(String, f64)], specs: &[RewardSpec]) -> Result<f64> {
    specs.iter().try_fold(0.0, |acc, spec| {
        let v = values
            .iter()
            .find(|(n, _)| *n == spec.name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::UnknownReward(spec.name.clone()))?;
        Ok(acc + spec.weight * v)
    })
}

/// Fixed linear decoder: every latent token becomes a `patch × patch` pixel
/// block. Frame `i` is decoded from latent frame `i` alone.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderStub {
    patch: usize,
    weight: Tensor,
}

impl DecoderStub {
    pub fn new(hidden: usize, patch: usize, seed: u64) -> Result<Self> {
        if hidden == 0 || patch == 0 {
            return Err(Error::config("decoder needs hidden >= 1 and patch >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weight = Tensor::randn(&[patch * patch, hidden], 1.0 / (hidden as f64).sqrt(), &mut rng);
        Ok(Self { patch, weight })
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    /// Decodes the first `frames` latent frames of `latent: [seq, hidden]`
    /// into `[frames, h·patch, w·patch]`.
    pub fn decode_graph(&self, g: &Graph, latent: Var, dims: GridDims, frames: usize) -> Result<Var> {
        if frames == 0 || frames > dims.f {
            return Err(Error::OutOfRange {
                what: "decoded frames",
                value: frames as f64,
                expected: "1..=f",
            });
        }
        let hw = dims.h * dims.w;
        let p = self.patch;
        let z = g.gather(latent, 0, Rc::new((0..frames * hw).collect()))?;
        let pix = g.linear(z, g.constant(self.weight.clone()))?;
        let pix = g.reshape(pix, &[frames, dims.h, dims.w, p, p])?;
        let pix = g.permute(pix, &[0, 1, 3, 2, 4])?;
        g.reshape(pix, &[frames, dims.h * p, dims.w * p])
    }

    pub fn decode(&self, latent: &Tensor, dims: GridDims, frames: usize) -> Result<Tensor> {
        let g = Graph::new();
        let x = g.constant(latent.clone());
        let y = self.decode_graph(&g, x, dims, frames)?;
        Ok((*g.value(y)).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(h: usize, w: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![1, h, w], data).unwrap()
    }

    #[test]
    fn brightness_is_maximal_at_target() {
        let f = Tensor::full(&[2, 3, 4], 0.75);
        assert_eq!(brightness_target(&f, 0.75).unwrap(), 0.0);
        assert!((brightness_target(&f, 0.25).unwrap() + 0.25).abs() < 1e-15);
    }

    #[test]
    fn constant_frames_are_perfectly_smooth() {
        assert_eq!(smoothness(&Tensor::full(&[2, 4, 5], 3.0)).unwrap(), 0.0);
        let f = frame(1, 3, vec![0.0, 1.0, 3.0]);
        assert!((smoothness(&f).unwrap() + 2.5).abs() < 1e-15);
        assert_eq!(smoothness(&frame(1, 1, vec![2.0])).unwrap(), 0.0);
    }

    #[test]
    fn centroid_hand_value() {
        let f = frame(1, 2, vec![0.0, 1.0]);
        assert_eq!(center_mass(&f, (1.0, 0.0)).unwrap(), 0.0);
        assert!((center_mass(&f, (0.0, 0.0)).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn combination() {
        let specs = vec![
            RewardSpec::new("a", 0.5, RewardKind::Smoothness).unwrap(),
            RewardSpec::new("b", 0.5, RewardKind::Smoothness).unwrap(),
        ];
        let vals = vec![("a".to_string(), 2.0), ("b".to_string(), 4.0)];
        assert_eq!(combine_rewards(&vals, &specs).unwrap(), 3.0);
        assert_eq!(combine_rewards(&vals, &specs[..1]).unwrap(), 1.0);
        assert_eq!(combine_rewards(&vals, &[]).unwrap(), 0.0);
        let single = [RewardSpec::new("b", 1.0, RewardKind::Smoothness).unwrap()];
        assert_eq!(combine_rewards(&vals, &single).unwrap(), 4.0);
        assert!(matches!(combine_rewards(&vals[..1], &specs), Err(Error::UnknownReward(_))));
    }

    #[test]
    fn parse_reward_list() {
        let specs = RewardSpec::parse_list("brightness:1.0,smoothness:0.25").unwrap();
        assert_eq!(specs.len(), 2);
        assert_eq!(specs[1].weight, 0.25);
        assert!(matches!(RewardSpec::parse_list("hps:1"), Err(Error::UnknownReward(_))));
        assert!(RewardSpec::parse_list("brightness:-1").is_err());
    }

    #[test]
    fn decoder_layout() {
        let dims = GridDims::new(2, 1, 2).unwrap();
        let dec = DecoderStub::new(3, 2, 0).unwrap();
        let latent = Tensor::from_fn(&[4, 3], |i| i as f64 * 0.1);
        let out = dec.decode(&latent, dims, 1).unwrap();
        assert_eq!(out.shape(), &[1, 2, 4]);
        let tok0 = latent.gather(0, &[0]).unwrap().matmul(&dec.weight.transpose_last().unwrap()).unwrap();
        // token 0 fills the 2x2 block at columns 0..2
        assert!((out.data()[0] - tok0.data()[0]).abs() < 1e-15);
        assert!((out.data()[1] - tok0.data()[1]).abs() < 1e-15);
        assert!((out.data()[4] - tok0.data()[2]).abs() < 1e-15);
        assert!((out.data()[5] - tok0.data()[3]).abs() < 1e-15);
        assert!(dec.decode(&latent, dims, 3).is_err());
    }
}
