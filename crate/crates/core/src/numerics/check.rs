//! Central finite differences, used as the correctness oracle for every
//! reverse-mode gradient in the crate.

use super::{ParamSet, Tensor};
use crate::error::Result;

/// Central-difference gradient of `f` at `params` with step `h`.
pub fn finite_difference(params: &ParamSet, h: f64, mut f: impl FnMut(&ParamSet) -> Result<f64>) -> Result<ParamSet> {
    let mut work = params.clone();
    let mut out = ParamSet::new();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.get(&name).map_or(0, Tensor::numel);
        let mut g = vec![0.0; n];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = work.get(&name).unwrap().data()[i];
            work.get_mut(&name).unwrap().data_mut()[i] = orig + h;
            let fp = f(&work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig - h;
            let fm = f(&work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig;
            *gi = (fp - fm) / (2.0 * h);
        }
        let shape = params.get(&name).unwrap().shape().to_vec();
        out.insert(name, Tensor::new(shape, g)?);
    }
    Ok(out)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)` over all entries of both sets (0 when both vanish).
pub fn relative_error(a: &ParamSet, b: &ParamSet) -> f64 {
    let mut diff = 0.0;
    for (name, ta) in a.iter() {
        if let Some(tb) = b.get(name) {
            diff += ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        }
    }
    let scale = a.global_norm().max(b.global_norm());
    if scale == 0.0 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}
