#![allow(dead_code)]

use afgm_core::afgssm::{ScanParams, Spectral};
use afgm_core::model::ParamSet;
use afgm_core::numerics::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Overwrites every trainable tensor with uniform noise so no path sits at
/// its zero init.
pub fn randomize(set: &mut ParamSet, scale: f64, seed: u64) {
    let mut r = rng(seed);
    for (_, _, t) in set.params.visit_mut() {
        let shape = t.shape().to_vec();
        *t = uniform(&shape, scale, &mut r);
    }
}

/// `[rows][cols]` view of a rank-2 tensor.
pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let c = t.shape()[1];
    t.data().chunks(c).map(<[f64]>::to_vec).collect()
}

/// Random scan parameters with `|D_y|_inf, |W_y|_inf < scale`, so the output
/// recurrence does not expand and long scans stay O(1). The `z` feedback into
/// the forgetting gates is damped by `1/(S V)` so gate pre-activations stay
/// well inside the range where an f64 sigmoid is not rounded to 0 or 1.
pub fn stable_scan(s: usize, v: usize, scale: f64, rng: &mut impl Rng) -> ScanParams {
    let mut p = ScanParams::random(s, v, Spectral::AmpOnly, scale, rng);
    p.d_y.scale_in_place(1.0 / s as f64);
    p.wg_y.scale_in_place(1.0 / s as f64);
    p.m_time_z.scale_in_place(1.0 / (s * v) as f64);
    p.m_fre_z.scale_in_place(1.0 / (s * v) as f64);
    p
}
