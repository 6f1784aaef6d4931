use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::ParamSet;

pub trait Optimizer {
    /// Applies one update in place and returns the update's L2 norm.
    fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<f64>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam,
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Sgd { momentum: 0.0 }
    }
}

impl OptimizerKind {
    pub fn build(self, lr: f64) -> Box<dyn Optimizer> {
        match self {
            OptimizerKind::Sgd { momentum } => Box::new(Sgd::new(lr, momentum)),
            OptimizerKind::Adam => Box::new(Adam::new(lr)),
        }
    }
}

/// Gradient descent, optionally with heavy-ball momentum.
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Option<ParamSet>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: None,
        }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<f64> {
        if self.momentum == 0.0 {
            params.axpy(-self.lr, grads)?;
            return Ok(self.lr * grads.global_norm());
        }
        let vel = self.velocity.get_or_insert_with(|| grads.zeros_like());
        for (name, g) in grads.iter() {
            let v = vel.get_mut(name).expect("velocity tracks grads");
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = self.momentum * *vi + gi;
            }
        }
        params.axpy(-self.lr, vel)?;
        Ok(self.lr * vel.global_norm())
    }
}

pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Option<ParamSet>,
    v: Option<ParamSet>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: None,
            v: None,
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<f64> {
        self.t += 1;
        let m = self.m.get_or_insert_with(|| grads.zeros_like());
        let v = self.v.get_or_insert_with(|| grads.zeros_like());
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let mut update = grads.zeros_like();
        for (name, g) in grads.iter() {
            let (mt, vt) = (m.get_mut(name).unwrap(), v.get_mut(name).unwrap());
            let u = update.get_mut(name).unwrap();
            for (((mi, vi), gi), ui) in mt.data_mut().iter_mut().zip(vt.data_mut()).zip(g.data()).zip(u.data_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *ui = -self.lr * (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
            }
        }
        params.axpy(1.0, &update)?;
        Ok(update.global_norm())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn quad(x: &ParamSet) -> ParamSet {
        let mut g = ParamSet::new();
        g.insert("x", x.get("x").unwrap().scale(2.0));
        g
    }

    #[test]
    fn optimizers_descend_a_quadratic() {
        for mut opt in [OptimizerKind::default().build(0.1), OptimizerKind::Sgd { momentum: 0.5 }.build(0.05), OptimizerKind::Adam.build(0.1)] {
            let mut p = ParamSet::new();
            p.insert("x", Tensor::from_vec(vec![3.0, -2.0]));
            for _ in 0..200 {
                let g = quad(&p);
                opt.step(&mut p, &g).unwrap();
            }
            assert!(p.global_norm() < 1e-2, "{:?}", p);
        }
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::from_vec(vec![3.0]));
        let before = p.clone();
        let norm = Sgd::new(0.0, 0.0).step(&mut p, &quad(&before)).unwrap();
        assert_eq!(p, before);
        assert_eq!(norm, 0.0);
    }
}
