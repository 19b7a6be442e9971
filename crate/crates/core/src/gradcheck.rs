//! Central finite-difference gradient checking.
//!
//! The finite-difference side only ever calls the supplied loss closure on
//! perturbed parameter copies; it never touches the tape.

use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Largest relative error over every probed coordinate.
    pub max_rel_err: f64,
    pub probes: usize,
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compare `analytic` gradients against central differences of `loss` with
/// step `h`. At most `max_per_param` evenly spaced coordinates are probed in
/// each parameter tensor.
pub fn check<F>(store: &ParamStore, analytic: &ParamStore, loss: F, h: f64, max_per_param: usize) -> GradCheck
where
    F: Fn(&ParamStore) -> f64,
{
    let mut worst = 0.0f64;
    let mut probes = 0;
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let n = store.value(id).len();
        let stride = n.div_ceil(max_per_param.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let mut plus = store.clone();
            let mut minus = store.clone();
            let mut vp = plus.value(id).clone();
            vp.data_mut()[i] += h;
            plus.set_value(id, vp).expect("same shape");
            let mut vm = minus.value(id).clone();
            vm.data_mut()[i] -= h;
            minus.set_value(id, vm).expect("same shape");
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let a = analytic.grad(id).data()[i];
            worst = worst.max(rel_err(a, fd, 1e-6));
            probes += 1;
        }
    }
    GradCheck {
        max_rel_err: worst,
        probes,
    }
}
