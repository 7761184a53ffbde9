//! Interaction encoding and multiscale patch embedding.
//!
//! The input window `x: [T,D]` is first blended with a channel-mixing
//! convolution, `alpha * conv1d(x) + (1 - alpha) * x` with
//! `alpha = sigmoid(alpha_raw)`. Each channel is then cut into
//! non-overlapping patches at every configured length, each patch is
//! projected to `V` values, and all scales are concatenated along the patch
//! axis into `U: [D, M, V]`.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Backend, Eager, Tensor};
use crate::params::{Role, Visit, VisitMut};

/// Patch geometry for one scale.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScaleSpec {
    pub patch_len: usize,
    pub stride: usize,
    /// Length after left-replicate padding, a multiple of `patch_len`.
    pub padded_len: usize,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchPlan {
    input_len: usize,
    scales: Vec<ScaleSpec>,
}

impl PatchPlan {
    /// Builds the plan for windows of `input_len` steps. Patch lengths longer
    /// than the window are dropped with a warning; if none remain the plan is
    /// a config error.
    pub fn new(input_len: usize, patch_lengths: &[usize]) -> Result<Self> {
        if input_len == 0 {
            return Err(Error::Config("input length must be positive".into()));
        }
        let mut scales = Vec::new();
        for &p in patch_lengths {
            if p == 0 {
                return Err(Error::Config("patch length 0".into()));
            }
            if p > input_len {
                log::warn!("dropping patch length {p}: longer than input length {input_len}");
                continue;
            }
            let padded_len = input_len.div_ceil(p) * p;
            scales.push(ScaleSpec {
                patch_len: p,
                stride: p,
                padded_len,
                count: (padded_len - p) / p + 1,
            });
        }
        if scales.is_empty() {
            return Err(Error::Config(format!(
                "no patch length in {patch_lengths:?} fits input length {input_len}"
            )));
        }
        Ok(PatchPlan { input_len, scales })
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn scales(&self) -> &[ScaleSpec] {
        &self.scales
    }

    /// `M`, the total patch count across scales.
    pub fn total_patches(&self) -> usize {
        self.scales.iter().map(|s| s.count).sum()
    }

    /// Time index in the unpadded window read by position `pos` of patch `j`.
    pub fn source_time(&self, scale: usize, j: usize, pos: usize) -> usize {
        let s = &self.scales[scale];
        let pad = s.padded_len - self.input_len;
        (j * s.stride + pos).saturating_sub(pad)
    }

    /// Flat indices into `x: [T, n_vars]` gathering channel `d`'s patches for one
    /// scale as a `[count, patch_len]` block.
    pub fn channel_index(&self, scale: usize, d: usize, n_vars: usize) -> Arc<[usize]> {
        let s = &self.scales[scale];
        let mut idx = Vec::with_capacity(s.count * s.patch_len);
        for j in 0..s.count {
            for pos in 0..s.patch_len {
                idx.push(self.source_time(scale, j, pos) * n_vars + d);
            }
        }
        idx.into()
    }
}

/// Learnable parameters of the interactive encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T = Tensor> {
    /// `[k, D, D]`
    pub conv_kernel: T,
    /// Scalar; the blend weight is `sigmoid(alpha_raw)`.
    pub alpha_raw: T,
    /// One `(W_i: [P_i, V], b_i: [V])` pair per scale, in plan order.
    pub proj: Vec<(T, T)>,
}

impl<T> EncoderParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> EncoderParams<U> {
        EncoderParams {
            conv_kernel: f(&self.conv_kernel),
            alpha_raw: f(&self.alpha_raw),
            proj: self.proj.iter().map(|(w, b)| (f(w), f(b))).collect(),
        }
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, out: &mut Visit<'a, T>) {
        out.push((format!("{prefix}.conv_kernel"), Role::Encoder, &self.conv_kernel));
        out.push((format!("{prefix}.alpha_raw"), Role::Encoder, &self.alpha_raw));
        for (i, (w, b)) in self.proj.iter().enumerate() {
            out.push((format!("{prefix}.proj{i}.weight"), Role::Encoder, w));
            out.push((format!("{prefix}.proj{i}.bias"), Role::Encoder, b));
        }
    }

    pub(crate) fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut VisitMut<'a, T>) {
        out.push((format!("{prefix}.conv_kernel"), Role::Encoder, &mut self.conv_kernel));
        out.push((format!("{prefix}.alpha_raw"), Role::Encoder, &mut self.alpha_raw));
        for (i, (w, b)) in self.proj.iter_mut().enumerate() {
            out.push((format!("{prefix}.proj{i}.weight"), Role::Encoder, w));
            out.push((format!("{prefix}.proj{i}.bias"), Role::Encoder, b));
        }
    }
}

impl EncoderParams<Tensor> {
    /// Kernel starts as the identity tap plus small uniform noise, `alpha_raw = 0`,
    /// projections uniform in `±sqrt(1/P_i)` with zero bias.
    pub fn init(plan: &PatchPlan, n_vars: usize, hidden: usize, kernel: usize, rng: &mut impl Rng) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("conv kernel size {kernel} must be odd")));
        }
        let d = n_vars;
        let noise = (1.0 / (kernel * d) as f64).sqrt() * 0.1;
        let conv_kernel = Tensor::from_fn(&[kernel, d, d], |i| {
            let j = i / (d * d);
            let e = (i / d) % d;
            let o = i % d;
            let eye = if j == kernel / 2 && e == o { 1.0 } else { 0.0 };
            eye + rng.random_range(-noise..noise)
        });
        let proj = plan
            .scales()
            .iter()
            .map(|s| {
                let bound = (1.0 / s.patch_len as f64).sqrt();
                let w = Tensor::from_fn(&[s.patch_len, hidden], |_| rng.random_range(-bound..bound));
                (w, Tensor::zeros(&[hidden]))
            })
            .collect();
        Ok(EncoderParams {
            conv_kernel,
            alpha_raw: Tensor::scalar(0.0),
            proj,
        })
    }

    pub fn alpha(&self) -> f64 {
        crate::numerics::tensor::sigmoid_scalar(self.alpha_raw.item())
    }
}

/// `alpha * conv1d(x) + (1 - alpha) * x` for `x: [T, D]`.
pub fn interaction_encode_on<B: Backend>(
    b: &mut B,
    x: &B::Var,
    conv_kernel: &B::Var,
    alpha_raw: &B::Var,
) -> Result<B::Var> {
    let t_len = b.value(x).shape()[0];
    let k = b.value(conv_kernel).shape()[0];
    if t_len < k {
        return Err(Error::Config(format!(
            "input length {t_len} shorter than conv kernel {k}"
        )));
    }
    let mixed = b.conv1d(x, conv_kernel)?;
    let alpha = b.sigmoid(alpha_raw);
    let one = b.constant(Tensor::scalar(1.0));
    let keep = b.sub(&one, &alpha)?;
    let lhs = b.mul(&alpha, &mixed)?;
    let rhs = b.mul(&keep, x)?;
    b.add(&lhs, &rhs)
}

/// Projects channel `d` of the encoded window to `U_d: [M, V]`.
pub fn embed_channel_on<B: Backend>(
    b: &mut B,
    x: &B::Var,
    plan: &PatchPlan,
    index: &[Arc<[usize]>],
    proj: &[(B::Var, B::Var)],
) -> Result<B::Var> {
    if proj.len() != plan.scales().len() {
        return Err(Error::Config(format!(
            "encoder has {} projections for {} patch scales",
            proj.len(),
            plan.scales().len()
        )));
    }
    let mut parts = Vec::with_capacity(proj.len());
    let mut hidden = 0;
    for ((s, idx), (w, bias)) in plan.scales().iter().zip(index).zip(proj) {
        let wshape = b.value(w).shape();
        if wshape[0] != s.patch_len {
            return Err(Error::Config(format!(
                "projection {:?} does not match patch length {}",
                wshape, s.patch_len
            )));
        }
        hidden = wshape[1];
        let patches = b.gather(x, idx.clone(), &[s.count, s.patch_len])?;
        let lin = b.matmul(&patches, w)?;
        parts.push(b.add(&lin, bias)?);
    }
    b.concat(&parts, &[plan.total_patches(), hidden])
}

pub fn interaction_encode(x: &Tensor, params: &EncoderParams) -> Result<Tensor> {
    interaction_encode_on(&mut Eager, x, &params.conv_kernel, &params.alpha_raw)
}

/// Patches of one scale, each `[D, P_i]` (channel-major), from `x: [T, D]`.
pub fn partition(x: &Tensor, plan: &PatchPlan, scale: usize) -> Result<Vec<Tensor>> {
    let [t_len, d] = x.shape()[..] else {
        return Err(Error::Dimension(format!("expected [T,D], got {:?}", x.shape())));
    };
    if t_len != plan.input_len() {
        return Err(Error::Config(format!(
            "plan built for length {}, window has {t_len}",
            plan.input_len()
        )));
    }
    let s = plan
        .scales()
        .get(scale)
        .ok_or_else(|| Error::Config(format!("no scale {scale} in plan")))?;
    (0..s.count)
        .map(|j| {
            Tensor::new(
                vec![d, s.patch_len],
                (0..d)
                    .flat_map(|c| (0..s.patch_len).map(move |p| (c, p)))
                    .map(|(c, p)| x.data()[plan.source_time(scale, j, p) * d + c])
                    .collect(),
            )
        })
        .collect()
}

/// Patch embedding of an (already interaction-encoded) window into `[D, M, V]`.
pub fn embed(x: &Tensor, params: &EncoderParams, plan: &PatchPlan) -> Result<Tensor> {
    let [t_len, d] = x.shape()[..] else {
        return Err(Error::Dimension(format!("expected [T,D], got {:?}", x.shape())));
    };
    if t_len != plan.input_len() {
        return Err(Error::Config(format!(
            "plan built for length {}, window has {t_len}",
            plan.input_len()
        )));
    }
    let mut channels = Vec::with_capacity(d);
    for c in 0..d {
        let index: Vec<_> = (0..plan.scales().len())
            .map(|i| plan.channel_index(i, c, d))
            .collect();
        channels.push(embed_channel_on(&mut Eager, x, plan, &index, &params.proj)?);
    }
    let m = plan.total_patches();
    let v = channels[0].shape()[1];
    let refs: Vec<&Tensor> = channels.iter().collect();
    crate::numerics::tensor::concat(&refs, &[d, m, v])
}
