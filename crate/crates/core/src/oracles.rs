//! Reference implementations for tests and acceptance runs.
//!
//! Everything here works on plain `Vec<f64>` with its own index arithmetic
//! and never calls into the tensor, tape, encoder, scan or model code, so a
//! bug shared with the production path cannot hide. Tensors are only read
//! through their raw `data()`/`shape()`.

use std::collections::HashMap;

use crate::afgssm::ScanParams;
use crate::model::{ModelConfig, ParamSet};

/// Complex number as an explicit `(re, im)` pair.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct C64 {
    pub re: f64,
    pub im: f64,
}

impl C64 {
    pub fn new(re: f64, im: f64) -> Self {
        C64 { re, im }
    }
    /// `e^{j theta}`
    pub fn cis(theta: f64) -> Self {
        C64::new(theta.cos(), theta.sin())
    }
    pub fn add(self, o: C64) -> C64 {
        C64::new(self.re + o.re, self.im + o.im)
    }
    pub fn scale(self, k: f64) -> C64 {
        C64::new(self.re * k, self.im * k)
    }
    pub fn abs_sq(self) -> f64 {
        self.re * self.re + self.im * self.im
    }
}

/// Row-major matrix-vector product.
fn matvec(a: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|r| (0..cols).map(|c| a[r * cols + c] * x[c]).sum())
        .collect()
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Complex frequency state `[S][V]` after one step.
pub type ComplexState = Vec<Vec<C64>>;

#[derive(Clone, Debug)]
pub struct ComplexTrajectory {
    pub states: Vec<ComplexState>,
    /// `z_m` per step.
    pub z: Vec<Vec<f64>>,
}

/// The recurrence `f_m = A_m * f_{m-1} + B_m e^{j omega m}` evaluated in
/// complex form, with the amplitude-only output and gates. `u[m]` has `V`
/// entries; `omega` has `V`.
pub fn complex_scan(u: &[Vec<f64>], p: &ScanParams, omega: &[f64]) -> ComplexTrajectory {
    let s = p.w_b.shape()[0];
    let v = p.w_b.shape()[1];
    let c = p.c.as_ref().expect("complex oracle covers the amplitude output").data();
    let mut f = vec![vec![C64::default(); v]; s];
    let mut y_prev = vec![vec![0.0; v]; s];
    let mut z_prev = vec![0.0; v];
    let mut out = ComplexTrajectory {
        states: Vec::new(),
        z: Vec::new(),
    };
    for (mi, um) in u.iter().enumerate() {
        let m = (mi + 1) as f64;
        let tu = matvec(p.m_time_u.data(), v, v, um);
        let tz = matvec(p.m_time_z.data(), v, v, &z_prev);
        let a_time: Vec<f64> = (0..v).map(|k| sig(tu[k] + tz[k])).collect();
        let fu = matvec(p.m_fre_u.data(), s, v, um);
        let fz = matvec(p.m_fre_z.data(), s, v, &z_prev);
        let a_fre: Vec<f64> = (0..s).map(|i| sig(fu[i] + fz[i])).collect();
        let b = matvec(p.w_b.data(), s, v, um);
        for i in 0..s {
            for k in 0..v {
                f[i][k] = f[i][k]
                    .scale(a_fre[i] * a_time[k])
                    .add(C64::cis(omega[k] * m).scale(b[i]));
            }
        }
        let amp: Vec<Vec<f64>> = f
            .iter()
            .map(|row| row.iter().map(|x| (x.abs_sq() + 1e-12).sqrt()).collect())
            .collect();
        let mut y = vec![vec![0.0; v]; s];
        let mut z = vec![0.0; v];
        for i in 0..s {
            for k in 0..v {
                let mut acc = p.d_u.data()[i] * um[k];
                let mut g = p.wg_u.data()[i] * um[k];
                for j in 0..s {
                    acc += c[i * s + j] * amp[j][k] + p.d_y.data()[i * s + j] * y_prev[j][k];
                    g += p.wg_amp.data()[i * s + j] * amp[j][k] + p.wg_y.data()[i * s + j] * y_prev[j][k];
                }
                y[i][k] = acc;
                z[k] += sig(g) * acc;
            }
        }
        out.states.push(f.clone());
        out.z.push(z.clone());
        y_prev = y;
        z_prev = z;
    }
    out
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Amplitude `sqrt(re^2 + im^2)`.
pub fn amplitude(re: f64, im: f64) -> f64 {
    (re * re + im * im).sqrt()
}

/// Every horizon step copies the last input row. `input` is `[T][D]`.
pub fn repeat_last(input: &[Vec<f64>], horizon: usize) -> Vec<Vec<f64>> {
    let last = input.last().expect("non-empty window").clone();
    vec![last; horizon]
}

/// Step `h` (0-based) is the input row at `T - p + (h mod p)`.
pub fn seasonal_naive(input: &[Vec<f64>], horizon: usize, period: usize) -> Vec<Vec<f64>> {
    let t = input.len();
    assert!(period >= 1 && period <= t, "period {period} outside 1..={t}");
    (0..horizon).map(|h| input[t - period + h % period].clone()).collect()
}

/// Multiply-add counts of one channel's scan.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OpCountModel {
    pub adapter: f64,
    pub trig: f64,
    pub gates: f64,
    pub state_update: f64,
    pub output: f64,
}

impl OpCountModel {
    /// `adapter_hidden` is the bottleneck width.
    pub fn new(m: usize, s: usize, v: usize, adapter_hidden: usize) -> Self {
        let (m, s, v, vh) = (m as f64, s as f64, v as f64, adapter_hidden as f64);
        OpCountModel {
            // mean pool plus two dense layers
            adapter: m * v + 2.0 * v * vh,
            // cos and sin of omega * m
            trig: 2.0 * m * v,
            // two V x V and two S x V products, then the S x V outer product
            gates: m * (2.0 * v * v + 3.0 * s * v),
            // W_B u, then decay and drive for both parts
            state_update: m * (s * v + 4.0 * s * v),
            // C E, D_y y, W_amp E, W_y y are S x S times S x V; plus the
            // amplitude, D_u/W_u outer products, gating and the sum over S
            output: m * (4.0 * s * s * v + 6.0 * s * v),
        }
    }

    pub fn total(&self) -> f64 {
        self.adapter + self.trig + self.gates + self.state_update + self.output
    }

    /// Coefficients of `M S^2 V`, `M S V`, `M V`, `M V^2`, `V V_h`.
    pub const COEFFS: [f64; 5] = [4.0, 14.0, 3.0, 2.0, 2.0];
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares `y = intercept + slope * x` with its R^2.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> LinearFit {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    LinearFit { slope, intercept, r2 }
}

/// Median of a non-empty sample.
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

// ---------------------------------------------------------------------------
// Straight-line model
// ---------------------------------------------------------------------------

/// Named raw arrays taken from a parameter set.
pub struct RawParams {
    map: HashMap<String, (Vec<usize>, Vec<f64>)>,
}

impl RawParams {
    pub fn from_set(set: &ParamSet) -> Self {
        RawParams {
            map: set
                .inventory()
                .into_iter()
                .map(|(n, _, t)| (n, (t.shape().to_vec(), t.data().to_vec())))
                .collect(),
        }
    }

    fn get(&self, name: &str) -> &[f64] {
        &self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("oracle needs tensor {name}"))
            .1
    }

    fn shape(&self, name: &str) -> &[usize] {
        &self.map[name].0
    }
}

/// Forecast `[H][D]` on the raw scale for the interactive encoder with
/// amplitude-only, adaptive-frequency blocks. `x` is `[T][D]`.
pub fn model_forward(raw: &RawParams, cfg: &ModelConfig, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (t_len, d, v, h) = (cfg.input_len, cfg.n_vars, cfg.hidden, cfg.horizon);
    let mean = raw.get("norm.mean");
    let std = raw.get("norm.std");
    let xn: Vec<Vec<f64>> = x
        .iter()
        .map(|row| (0..d).map(|c| (row[c] - mean[c]) / std[c]).collect())
        .collect();

    // channel-mixing convolution with replicate padding, then the blend
    let kern = raw.get("encoder.conv_kernel");
    let k = raw.shape("encoder.conv_kernel")[0];
    let alpha = sig(raw.get("encoder.alpha_raw")[0]);
    let mut enc = vec![vec![0.0; d]; t_len];
    for (t, row) in enc.iter_mut().enumerate() {
        for (o, cell) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for j in 0..k {
                let src = (t as isize + j as isize - (k / 2) as isize).clamp(0, t_len as isize - 1) as usize;
                for e in 0..d {
                    acc += kern[(j * d + e) * d + o] * xn[src][e];
                }
            }
            *cell = alpha * acc + (1.0 - alpha) * xn[t][o];
        }
    }

    // patch lengths that fit, in configured order
    let scales: Vec<usize> = cfg.patch_lengths.iter().copied().filter(|&p| p <= t_len).collect();
    let mut pred = vec![vec![0.0; d]; h];
    for ch in 0..d {
        let series: Vec<f64> = enc.iter().map(|r| r[ch]).collect();
        let mut u: Vec<Vec<f64>> = Vec::new();
        for (si, &p) in scales.iter().enumerate() {
            let count = t_len.div_ceil(p);
            let pad = count * p - t_len;
            let w = raw.get(&format!("encoder.proj{si}.weight"));
            let b = raw.get(&format!("encoder.proj{si}.bias"));
            for j in 0..count {
                let patch: Vec<f64> = (0..p)
                    .map(|q| series[(j * p + q).saturating_sub(pad)])
                    .collect();
                u.push((0..v).map(|o| b[o] + (0..p).map(|q| patch[q] * w[q * v + o]).sum::<f64>()).collect());
            }
        }
        for blk in 0..cfg.blocks {
            let z = block_forward(raw, &format!("block{blk}"), &u, v);
            for (row, zr) in u.iter_mut().zip(&z) {
                row.iter_mut().zip(zr).for_each(|(a, b)| *a += b);
            }
        }
        let flat: Vec<f64> = u.concat();
        let hw = raw.get("head.weight");
        let hb = raw.get("head.bias");
        for (step, out) in pred.iter_mut().enumerate() {
            let y: f64 = hb[step] + flat.iter().enumerate().map(|(i, f)| f * hw[i * h + step]).sum::<f64>();
            out[ch] = y * std[ch] + mean[ch];
        }
    }
    pred
}

fn block_forward(raw: &RawParams, prefix: &str, u: &[Vec<f64>], v: usize) -> Vec<Vec<f64>> {
    let m = u.len();
    let g = |n: &str| raw.get(&format!("{prefix}.{n}"));
    let w1 = g("adapter.w1");
    let b1 = g("adapter.b1");
    let w2 = g("adapter.w2");
    let b2 = g("adapter.b2");
    let vh = b1.len();
    let pooled: Vec<f64> = (0..v).map(|k| u.iter().map(|r| r[k]).sum::<f64>() / m as f64).collect();
    let hidden: Vec<f64> = (0..vh)
        .map(|j| (b1[j] + (0..v).map(|k| pooled[k] * w1[k * vh + j]).sum::<f64>()).max(0.0))
        .collect();
    let omega: Vec<f64> = (0..v)
        .map(|k| {
            2.0 * std::f64::consts::PI * k as f64 / v as f64
                + b2[k]
                + (0..vh).map(|j| hidden[j] * w2[j * v + k]).sum::<f64>()
        })
        .collect();

    let s = g("scan.d_u").len();
    let w_b = g("scan.w_b");
    let c = g("scan.c");
    let d_u = g("scan.d_u");
    let d_y = g("scan.d_y");
    let wa = g("scan.wg_amp");
    let wu = g("scan.wg_u");
    let wy = g("scan.wg_y");
    let mtu = g("scan.m_time_u");
    let mtz = g("scan.m_time_z");
    let mfu = g("scan.m_fre_u");
    let mfz = g("scan.m_fre_z");
    let mut f = vec![vec![C64::default(); v]; s];
    let mut y_prev = vec![vec![0.0; v]; s];
    let mut z_prev = vec![0.0; v];
    let mut out = Vec::with_capacity(m);
    for (mi, um) in u.iter().enumerate() {
        let step = (mi + 1) as f64;
        let at: Vec<f64> = (0..v)
            .map(|k| sig((0..v).map(|e| mtu[k * v + e] * um[e] + mtz[k * v + e] * z_prev[e]).sum()))
            .collect();
        let af: Vec<f64> = (0..s)
            .map(|i| sig((0..v).map(|e| mfu[i * v + e] * um[e] + mfz[i * v + e] * z_prev[e]).sum()))
            .collect();
        for i in 0..s {
            let bi: f64 = (0..v).map(|e| w_b[i * v + e] * um[e]).sum();
            for k in 0..v {
                f[i][k] = f[i][k].scale(af[i] * at[k]).add(C64::cis(omega[k] * step).scale(bi));
            }
        }
        let mut y = vec![vec![0.0; v]; s];
        let mut z = vec![0.0; v];
        for i in 0..s {
            for k in 0..v {
                let mut acc = d_u[i] * um[k];
                let mut gate = wu[i] * um[k];
                for j in 0..s {
                    let amp = (f[j][k].abs_sq() + 1e-12).sqrt();
                    acc += c[i * s + j] * amp + d_y[i * s + j] * y_prev[j][k];
                    gate += wa[i * s + j] * amp + wy[i * s + j] * y_prev[j][k];
                }
                y[i][k] = acc;
                z[k] += sig(gate) * acc;
            }
        }
        out.push(z.clone());
        y_prev = y;
        z_prev = z;
    }
    out
}
