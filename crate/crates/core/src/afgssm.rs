//! Adaptive frequency-gated state-space scan.
//!
//! Per channel `U_d: [M, V]`:
//!
//! 1. Frequencies `omega = omega_base + delta_omega`, with
//!    `omega_base[k] = 2*pi*k/V` and `delta_omega` produced by a two-layer
//!    adapter from the patch-mean of `U_d` (or a learned constant in the
//!    fixed-frequency variant).
//! 2. For `m = 1..=M`, with `u = U_d[m-1]`:
//!
//! ```text
//! A_time = sigmoid(M_time_u u + M_time_z z_prev)            [V]
//! A_fre  = sigmoid(M_fre_u u + M_fre_z z_prev)              [S]
//! A      = A_fre (x) A_time                                  [S,V]
//! B      = W_B u                                             [S]
//! f_re   = A * f_re + B (x) cos(omega m)
//! f_im   = A * f_im + B (x) sin(omega m)
//! E      = sqrt(f_re^2 + f_im^2 + eps)
//! y      = C E + D_u (x) u + D_y y_prev
//! g      = sigmoid(W_g_amp E + W_g_u (x) u + W_g_y y_prev)
//! z      = sum over s of (g * y)                             [V]
//! ```
//!
//! The gates read the previous step's `z`, so the recurrence is evaluated
//! strictly in order; cost is linear in `M`.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Backend, Eager, Tensor};
use crate::params::{Role, Visit, VisitMut};

/// Which spectral statistic feeds the output equation and output gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Spectral {
    #[default]
    AmpOnly,
    AmpPhase,
    PhaseOnly,
}

impl Spectral {
    pub fn uses_amp(self) -> bool {
        !matches!(self, Spectral::PhaseOnly)
    }
    pub fn uses_phase(self) -> bool {
        !matches!(self, Spectral::AmpOnly)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams<T = Tensor> {
    /// `[V, V_h]`
    pub w1: T,
    /// `[V_h]`
    pub b1: T,
    /// `[V_h, V]`
    pub w2: T,
    /// `[V]`
    pub b2: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanParams<T = Tensor> {
    /// `[S, V]`, generates `B_m = W_B u_m`.
    pub w_b: T,
    /// `[S, S]` coefficient on the amplitude; absent in the phase-only variant.
    pub c: Option<T>,
    /// `[S, S]` coefficient on the phase; present only in phase variants.
    pub c_phase: Option<T>,
    /// `[S]`
    pub d_u: T,
    /// `[S, S]`
    pub d_y: T,
    /// `[S, S]`
    pub wg_amp: T,
    /// `[S]`
    pub wg_u: T,
    /// `[S, S]`
    pub wg_y: T,
    /// `[V, V]`
    pub m_time_u: T,
    /// `[V, V]`
    pub m_time_z: T,
    /// `[S, V]`
    pub m_fre_u: T,
    /// `[S, V]`
    pub m_fre_z: T,
}

#[derive(Clone, Debug, PartialEq)]
pub enum FreqSource<T = Tensor> {
    Adaptive(AdapterParams<T>),
    /// `[V]` offset learned once, independent of the input.
    Fixed { delta_omega: T },
}

#[derive(Clone, Debug, PartialEq)]
pub struct AfgssmParams<T = Tensor> {
    pub freq: FreqSource<T>,
    pub scan: ScanParams<T>,
}

/// Frequencies used for one channel's scan.
#[derive(Clone, Debug, PartialEq)]
pub struct FreqBasis {
    pub omega_base: Tensor,
    pub delta_omega: Tensor,
    pub omega: Tensor,
}

/// Carried state between steps, all zeros at the start of a scan.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeFreqState {
    pub f_re: Tensor,
    pub f_im: Tensor,
    pub y_prev: Tensor,
    pub z_prev: Tensor,
}

impl TimeFreqState {
    pub fn zeros(s: usize, v: usize) -> Self {
        TimeFreqState {
            f_re: Tensor::zeros(&[s, v]),
            f_im: Tensor::zeros(&[s, v]),
            y_prev: Tensor::zeros(&[s, v]),
            z_prev: Tensor::zeros(&[v]),
        }
    }
}

/// Output of one [`scan_step`].
#[derive(Clone, Debug)]
pub struct StepResult {
    pub y: Tensor,
    pub z: Tensor,
    pub a_time: Tensor,
    pub a_fre: Tensor,
    pub a: Tensor,
    pub gate: Tensor,
    pub e_amp: Tensor,
    pub next: TimeFreqState,
}

/// `omega_base[k] = 2*pi*k/V`.
pub fn omega_base(v: usize) -> Tensor {
    Tensor::from_fn(&[v], |k| 2.0 * PI * k as f64 / v as f64)
}

/// Default adapter bottleneck width, `max(V/4, 4)`.
pub fn default_adapter_hidden(v: usize) -> usize {
    (v / 4).max(4)
}

// ---------------------------------------------------------------------------
// Parameter plumbing
// ---------------------------------------------------------------------------

impl<T> AdapterParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> AdapterParams<U> {
        AdapterParams {
            w1: f(&self.w1),
            b1: f(&self.b1),
            w2: f(&self.w2),
            b2: f(&self.b2),
        }
    }
}

macro_rules! scan_fields {
    ($mac:ident) => {
        $mac!(w_b, d_u, d_y, wg_amp, wg_u, wg_y, m_time_u, m_time_z, m_fre_u, m_fre_z)
    };
}

impl<T> ScanParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ScanParams<U> {
        macro_rules! build {
            ($($name:ident),*) => {
                ScanParams {
                    c: self.c.as_ref().map(&mut *f),
                    c_phase: self.c_phase.as_ref().map(&mut *f),
                    $($name: f(&self.$name),)*
                }
            };
        }
        scan_fields!(build)
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, out: &mut Visit<'a, T>) {
        macro_rules! push {
            ($($name:ident),*) => {
                $(out.push((format!("{prefix}.{}", stringify!($name)), Role::Scan, &self.$name));)*
            };
        }
        scan_fields!(push);
        if let Some(c) = &self.c {
            out.push((format!("{prefix}.c"), Role::Scan, c));
        }
        if let Some(c) = &self.c_phase {
            out.push((format!("{prefix}.c_phase"), Role::Variant, c));
        }
    }

    pub(crate) fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut VisitMut<'a, T>) {
        macro_rules! push {
            ($($name:ident),*) => {
                $(out.push((format!("{prefix}.{}", stringify!($name)), Role::Scan, &mut self.$name));)*
            };
        }
        scan_fields!(push);
        if let Some(c) = &mut self.c {
            out.push((format!("{prefix}.c"), Role::Scan, c));
        }
        if let Some(c) = &mut self.c_phase {
            out.push((format!("{prefix}.c_phase"), Role::Variant, c));
        }
    }
}

impl<T> AfgssmParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> AfgssmParams<U> {
        AfgssmParams {
            freq: match &self.freq {
                FreqSource::Adaptive(a) => FreqSource::Adaptive(a.map(f)),
                FreqSource::Fixed { delta_omega } => FreqSource::Fixed {
                    delta_omega: f(delta_omega),
                },
            },
            scan: self.scan.map(f),
        }
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, out: &mut Visit<'a, T>) {
        match &self.freq {
            FreqSource::Adaptive(a) => {
                out.push((format!("{prefix}.adapter.w1"), Role::Adapter, &a.w1));
                out.push((format!("{prefix}.adapter.b1"), Role::Adapter, &a.b1));
                out.push((format!("{prefix}.adapter.w2"), Role::Adapter, &a.w2));
                out.push((format!("{prefix}.adapter.b2"), Role::Adapter, &a.b2));
            }
            FreqSource::Fixed { delta_omega } => {
                out.push((format!("{prefix}.delta_omega"), Role::Variant, delta_omega));
            }
        }
        self.scan.visit(&format!("{prefix}.scan"), out);
    }

    pub(crate) fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut VisitMut<'a, T>) {
        match &mut self.freq {
            FreqSource::Adaptive(a) => {
                out.push((format!("{prefix}.adapter.w1"), Role::Adapter, &mut a.w1));
                out.push((format!("{prefix}.adapter.b1"), Role::Adapter, &mut a.b1));
                out.push((format!("{prefix}.adapter.w2"), Role::Adapter, &mut a.w2));
                out.push((format!("{prefix}.adapter.b2"), Role::Adapter, &mut a.b2));
            }
            FreqSource::Fixed { delta_omega } => {
                out.push((format!("{prefix}.delta_omega"), Role::Variant, delta_omega));
            }
        }
        self.scan.visit_mut(&format!("{prefix}.scan"), out);
    }
}

fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

impl AdapterParams<Tensor> {
    /// First layer uniform in `±sqrt(1/V)`, second layer and biases zero, so
    /// `omega` starts at `omega_base`.
    pub fn init(v: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        AdapterParams {
            w1: uniform(&[v, hidden], (1.0 / v as f64).sqrt(), rng),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, v]),
            b2: Tensor::zeros(&[v]),
        }
    }

    pub fn zeros(v: usize, hidden: usize) -> Self {
        AdapterParams {
            w1: Tensor::zeros(&[v, hidden]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, v]),
            b2: Tensor::zeros(&[v]),
        }
    }
}

impl ScanParams<Tensor> {
    /// Gate matrices start at zero (every gate at 0.5); `W_B`, `C`, `C_phase`,
    /// `D_u`, `D_y` uniform in `±sqrt(1/fan_in)`.
    pub fn init(s: usize, v: usize, spectral: Spectral, rng: &mut impl Rng) -> Self {
        let bv = (1.0 / v as f64).sqrt();
        let bs = (1.0 / s as f64).sqrt();
        let w_b = uniform(&[s, v], bv, rng);
        let c = spectral.uses_amp().then(|| uniform(&[s, s], bs, rng));
        let c_phase = spectral.uses_phase().then(|| uniform(&[s, s], bs, rng));
        ScanParams {
            w_b,
            c,
            c_phase,
            d_u: uniform(&[s], 1.0, rng),
            d_y: uniform(&[s, s], bs, rng),
            wg_amp: Tensor::zeros(&[s, s]),
            wg_u: Tensor::zeros(&[s]),
            wg_y: Tensor::zeros(&[s, s]),
            m_time_u: Tensor::zeros(&[v, v]),
            m_time_z: Tensor::zeros(&[v, v]),
            m_fre_u: Tensor::zeros(&[s, v]),
            m_fre_z: Tensor::zeros(&[s, v]),
        }
    }

    pub fn zeros(s: usize, v: usize, spectral: Spectral) -> Self {
        ScanParams {
            w_b: Tensor::zeros(&[s, v]),
            c: spectral.uses_amp().then(|| Tensor::zeros(&[s, s])),
            c_phase: spectral.uses_phase().then(|| Tensor::zeros(&[s, s])),
            d_u: Tensor::zeros(&[s]),
            d_y: Tensor::zeros(&[s, s]),
            wg_amp: Tensor::zeros(&[s, s]),
            wg_u: Tensor::zeros(&[s]),
            wg_y: Tensor::zeros(&[s, s]),
            m_time_u: Tensor::zeros(&[v, v]),
            m_time_z: Tensor::zeros(&[v, v]),
            m_fre_u: Tensor::zeros(&[s, v]),
            m_fre_z: Tensor::zeros(&[s, v]),
        }
    }

    /// Every tensor drawn uniformly from `±scale`; used by oracle tests and
    /// gradient checks to exercise all paths away from the zero init.
    pub fn random(s: usize, v: usize, spectral: Spectral, scale: f64, rng: &mut impl Rng) -> Self {
        let mut p = ScanParams::zeros(s, v, spectral);
        let mut slots = Vec::new();
        p.visit_mut("", &mut slots);
        for (_, _, t) in slots {
            let shape = t.shape().to_vec();
            *t = uniform(&shape, scale, rng);
        }
        p
    }

    /// Frequency dimension `S` and hidden dimension `V`.
    pub fn dims(&self) -> (usize, usize) {
        (self.w_b.shape()[0], self.w_b.shape()[1])
    }

    fn check(&self) -> Result<()> {
        let (s, v) = self.dims();
        let want = |t: &Tensor, shape: &[usize], name: &str| -> Result<()> {
            if t.shape() == shape {
                Ok(())
            } else {
                Err(Error::Dimension(format!(
                    "scan parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )))
            }
        };
        if let Some(c) = &self.c {
            want(c, &[s, s], "c")?;
        }
        if let Some(c) = &self.c_phase {
            want(c, &[s, s], "c_phase")?;
        }
        want(&self.d_u, &[s], "d_u")?;
        want(&self.d_y, &[s, s], "d_y")?;
        want(&self.wg_amp, &[s, s], "wg_amp")?;
        want(&self.wg_u, &[s], "wg_u")?;
        want(&self.wg_y, &[s, s], "wg_y")?;
        want(&self.m_time_u, &[v, v], "m_time_u")?;
        want(&self.m_time_z, &[v, v], "m_time_z")?;
        want(&self.m_fre_u, &[s, v], "m_fre_u")?;
        want(&self.m_fre_z, &[s, v], "m_fre_z")
    }
}

// ---------------------------------------------------------------------------
// Backend-generic core
// ---------------------------------------------------------------------------

/// Carried state; `None` stands for the all-zero initial value.
pub struct CarriedState<V> {
    pub f_re: Option<V>,
    pub f_im: Option<V>,
    pub y_prev: Option<V>,
    pub z_prev: Option<V>,
}

impl<V> Default for CarriedState<V> {
    fn default() -> Self {
        CarriedState {
            f_re: None,
            f_im: None,
            y_prev: None,
            z_prev: None,
        }
    }
}

/// Per-step intermediate values exposed for diagnostics.
pub struct StepVars<V> {
    pub a_time: V,
    pub a_fre: V,
    pub a: V,
    pub e_amp: Option<V>,
    pub gate: V,
    pub y: V,
    pub z: V,
}

fn add_opt<B: Backend>(b: &mut B, acc: B::Var, term: Option<B::Var>) -> Result<B::Var> {
    match term {
        Some(t) => b.add(&acc, &t),
        None => Ok(acc),
    }
}

/// `omega` for one channel from its patch matrix.
pub fn adapt_frequency_on<B: Backend>(
    b: &mut B,
    u_d: &B::Var,
    freq: &FreqSource<B::Var>,
) -> Result<B::Var> {
    let [m, v] = b.value(u_d).shape()[..] else {
        return Err(Error::Dimension(format!(
            "channel input must be [M,V], got {:?}",
            b.value(u_d).shape()
        )));
    };
    let base = b.constant(omega_base(v));
    let delta = match freq {
        FreqSource::Adaptive(a) => {
            let pooled_sum = b.reduce_sum(u_d, 0)?;
            let pooled = b.scale(&pooled_sum, 1.0 / m as f64);
            let h = b.matmul(&pooled, &a.w1)?;
            let h = b.add(&h, &a.b1)?;
            let h = b.relu(&h);
            let out = b.matmul(&h, &a.w2)?;
            b.add(&out, &a.b2)?
        }
        FreqSource::Fixed { delta_omega } => delta_omega.clone(),
    };
    b.add(&base, &delta)
}

/// One recurrence step. `m` is the 1-based step index.
pub fn scan_step_on<B: Backend>(
    b: &mut B,
    u: &B::Var,
    m: usize,
    omega: &B::Var,
    state: CarriedState<B::Var>,
    p: &ScanParams<B::Var>,
) -> Result<(StepVars<B::Var>, CarriedState<B::Var>)> {
    // forgetting gates from u_m and z_{m-1}
    let t_pre = b.matmul(&p.m_time_u, u)?;
    let t_pre = match &state.z_prev {
        Some(z) => {
            let tz = b.matmul(&p.m_time_z, z)?;
            b.add(&t_pre, &tz)?
        }
        None => t_pre,
    };
    let a_time = b.sigmoid(&t_pre);
    let f_pre = b.matmul(&p.m_fre_u, u)?;
    let f_pre = match &state.z_prev {
        Some(z) => {
            let fz = b.matmul(&p.m_fre_z, z)?;
            b.add(&f_pre, &fz)?
        }
        None => f_pre,
    };
    let a_fre = b.sigmoid(&f_pre);
    let a = b.outer(&a_fre, &a_time)?;

    // state update
    let bm = b.matmul(&p.w_b, u)?;
    let angle = b.scale(omega, m as f64);
    let cos = b.cos(&angle);
    let sin = b.sin(&angle);
    let drive_re = b.outer(&bm, &cos)?;
    let drive_im = b.outer(&bm, &sin)?;
    let f_re = match &state.f_re {
        Some(prev) => {
            let kept = b.mul(&a, prev)?;
            b.add(&kept, &drive_re)?
        }
        None => drive_re,
    };
    let f_im = match &state.f_im {
        Some(prev) => {
            let kept = b.mul(&a, prev)?;
            b.add(&kept, &drive_im)?
        }
        None => drive_im,
    };

    // spectral statistics
    let e_amp = if p.c.is_some() {
        let re2 = b.square(&f_re);
        let im2 = b.square(&f_im);
        let sum = b.add(&re2, &im2)?;
        Some(b.sqrt_eps(&sum)?)
    } else {
        None
    };
    let e_phase = if p.c_phase.is_some() {
        Some(b.phase(&f_re, &f_im)?)
    } else {
        None
    };

    // output equation
    let mut spectral_term = None;
    if let (Some(c), Some(e)) = (&p.c, &e_amp) {
        spectral_term = Some(b.matmul(c, e)?);
    }
    if let (Some(cp), Some(e)) = (&p.c_phase, &e_phase) {
        let t = b.matmul(cp, e)?;
        spectral_term = Some(match spectral_term {
            Some(acc) => b.add(&acc, &t)?,
            None => t,
        });
    }
    let spectral_term = spectral_term.ok_or_else(|| {
        Error::Config("scan parameters have neither amplitude nor phase coefficient".into())
    })?;
    let du = b.outer(&p.d_u, u)?;
    let y = b.add(&spectral_term, &du)?;
    let dy = match &state.y_prev {
        Some(yp) => Some(b.matmul(&p.d_y, yp)?),
        None => None,
    };
    let y = add_opt(b, y, dy)?;

    // output gate; the phase-only variant gates on the phase statistic
    let gate_feature = e_amp.as_ref().or(e_phase.as_ref()).expect("checked above");
    let g_pre = b.matmul(&p.wg_amp, gate_feature)?;
    let gu = b.outer(&p.wg_u, u)?;
    let g_pre = b.add(&g_pre, &gu)?;
    let gy = match &state.y_prev {
        Some(yp) => Some(b.matmul(&p.wg_y, yp)?),
        None => None,
    };
    let g_pre = add_opt(b, g_pre, gy)?;
    let gate = b.sigmoid(&g_pre);
    let gy = b.mul(&gate, &y)?;
    let z = b.reduce_sum(&gy, 0)?;

    let next = CarriedState {
        f_re: Some(f_re),
        f_im: Some(f_im),
        y_prev: Some(y.clone()),
        z_prev: Some(z.clone()),
    };
    Ok((
        StepVars {
            a_time,
            a_fre,
            a,
            e_amp,
            gate,
            y,
            z,
        },
        next,
    ))
}

/// Runs the full scan over `U_d: [M, V]` and stacks the `z_m` rows into `[M, V]`.
/// `on_step` sees every step's intermediates.
pub fn scan_channel_on<B: Backend>(
    b: &mut B,
    u_d: &B::Var,
    params: &AfgssmParams<B::Var>,
    mut on_step: impl FnMut(&B, usize, &StepVars<B::Var>),
) -> Result<(B::Var, B::Var)> {
    let [m_len, v] = b.value(u_d).shape()[..] else {
        return Err(Error::Dimension(format!(
            "channel input must be [M,V], got {:?}",
            b.value(u_d).shape()
        )));
    };
    if m_len == 0 {
        return Err(Error::Config("scan needs at least one patch".into()));
    }
    let omega = adapt_frequency_on(b, u_d, &params.freq)?;
    let mut state = CarriedState::default();
    let mut rows = Vec::with_capacity(m_len);
    for m in 1..=m_len {
        let u = b.row(u_d, m - 1)?;
        let (vars, next) = scan_step_on(b, &u, m, &omega, state, &params.scan)?;
        on_step(b, m, &vars);
        rows.push(vars.z);
        state = next;
    }
    let z = b.concat(&rows, &[m_len, v])?;
    Ok((z, omega))
}

// ---------------------------------------------------------------------------
// Tensor-level API
// ---------------------------------------------------------------------------

pub fn adapt_frequency(u_d: &Tensor, adapter: &AdapterParams) -> Result<FreqBasis> {
    let freq = FreqSource::Adaptive(adapter.clone());
    let omega = adapt_frequency_on(&mut Eager, u_d, &freq)?;
    let v = omega.numel();
    let base = omega_base(v);
    let delta = crate::numerics::tensor::sub(&omega, &base)?;
    Ok(FreqBasis {
        omega_base: base,
        delta_omega: delta,
        omega,
    })
}

/// Single step from an explicit state.
pub fn scan_step(
    u: &Tensor,
    m: usize,
    omega: &Tensor,
    state: &TimeFreqState,
    params: &ScanParams,
) -> Result<StepResult> {
    params.check()?;
    let (s, v) = params.dims();
    for (t, shape, name) in [
        (&state.f_re, vec![s, v], "f_re"),
        (&state.f_im, vec![s, v], "f_im"),
        (&state.y_prev, vec![s, v], "y_prev"),
        (&state.z_prev, vec![v], "z_prev"),
        (u, vec![v], "u"),
        (omega, vec![v], "omega"),
    ] {
        if t.shape() != shape.as_slice() {
            return Err(Error::Dimension(format!(
                "{name} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
    }
    let carried = CarriedState {
        f_re: Some(state.f_re.clone()),
        f_im: Some(state.f_im.clone()),
        y_prev: Some(state.y_prev.clone()),
        z_prev: Some(state.z_prev.clone()),
    };
    let (vars, next) = scan_step_on(&mut Eager, u, m, omega, carried, params)?;
    Ok(StepResult {
        e_amp: vars.e_amp.unwrap_or_else(|| Tensor::zeros(&[s, v])),
        y: vars.y,
        z: vars.z,
        a_time: vars.a_time,
        a_fre: vars.a_fre,
        a: vars.a,
        gate: vars.gate,
        next: TimeFreqState {
            f_re: next.f_re.expect("set by step"),
            f_im: next.f_im.expect("set by step"),
            y_prev: next.y_prev.expect("set by step"),
            z_prev: next.z_prev.expect("set by step"),
        },
    })
}

/// `Z_d: [M, V]` for one channel.
pub fn scan_channel(u_d: &Tensor, params: &AfgssmParams) -> Result<Tensor> {
    params.scan.check()?;
    Ok(scan_channel_on(&mut Eager, u_d, params, |_, _, _| {})?.0)
}

/// Per-step record of one scan for diagnostics.
#[derive(Clone, Debug)]
pub struct ScanTrace {
    pub omega: Tensor,
    pub a: Vec<Tensor>,
    pub e_amp: Vec<Tensor>,
    pub a_time: Vec<Tensor>,
    pub a_fre: Vec<Tensor>,
    pub gate: Vec<Tensor>,
    pub z: Tensor,
}

pub fn scan_channel_traced(u_d: &Tensor, params: &AfgssmParams) -> Result<ScanTrace> {
    params.scan.check()?;
    let mut a = Vec::new();
    let mut e_amp = Vec::new();
    let mut a_time = Vec::new();
    let mut a_fre = Vec::new();
    let mut gate = Vec::new();
    let (z, omega) = scan_channel_on(&mut Eager, u_d, params, |_, _, vars| {
        a.push(vars.a.clone());
        if let Some(e) = &vars.e_amp {
            e_amp.push(e.clone());
        }
        a_time.push(vars.a_time.clone());
        a_fre.push(vars.a_fre.clone());
        gate.push(vars.gate.clone());
    })?;
    Ok(ScanTrace {
        omega,
        a,
        e_amp,
        a_time,
        a_fre,
        gate,
        z,
    })
}

/// Elementwise phase `arctan(f_im / f_re)` with the real part guarded away from zero.
pub fn compute_phase(f_re: &Tensor, f_im: &Tensor) -> Result<Tensor> {
    crate::numerics::tensor::phase(f_re, f_im)
}

/// Writes `(step, s, v, value)` rows for a sequence of `[S, V]` tensors.
pub fn write_step_grid_csv<W: std::io::Write>(out: &mut W, steps: &[Tensor]) -> std::io::Result<()> {
    writeln!(out, "step,s,v,value")?;
    for (m, t) in steps.iter().enumerate() {
        let cols = t.shape()[1];
        for (i, val) in t.data().iter().enumerate() {
            writeln!(out, "{},{},{},{:.17e}", m + 1, i / cols, i % cols, val)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Time-only baseline block
// ---------------------------------------------------------------------------

/// Parameters of the time-only selective recurrence used by the ablation:
/// `h = sigmoid(M_u u + M_z z_prev) * h_prev + W_B u`, `z = C h + d_u * u`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlainSsmParams<T = Tensor> {
    /// `[V, V]`
    pub w_b: T,
    /// `[V, V]`
    pub m_time_u: T,
    /// `[V, V]`
    pub m_time_z: T,
    /// `[V, V]`
    pub c: T,
    /// `[V]`
    pub d_u: T,
}

impl<T> PlainSsmParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> PlainSsmParams<U> {
        PlainSsmParams {
            w_b: f(&self.w_b),
            m_time_u: f(&self.m_time_u),
            m_time_z: f(&self.m_time_z),
            c: f(&self.c),
            d_u: f(&self.d_u),
        }
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, out: &mut Visit<'a, T>) {
        out.push((format!("{prefix}.plain.w_b"), Role::Scan, &self.w_b));
        out.push((format!("{prefix}.plain.m_time_u"), Role::Scan, &self.m_time_u));
        out.push((format!("{prefix}.plain.m_time_z"), Role::Scan, &self.m_time_z));
        out.push((format!("{prefix}.plain.c"), Role::Scan, &self.c));
        out.push((format!("{prefix}.plain.d_u"), Role::Scan, &self.d_u));
    }

    pub(crate) fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut VisitMut<'a, T>) {
        out.push((format!("{prefix}.plain.w_b"), Role::Scan, &mut self.w_b));
        out.push((format!("{prefix}.plain.m_time_u"), Role::Scan, &mut self.m_time_u));
        out.push((format!("{prefix}.plain.m_time_z"), Role::Scan, &mut self.m_time_z));
        out.push((format!("{prefix}.plain.c"), Role::Scan, &mut self.c));
        out.push((format!("{prefix}.plain.d_u"), Role::Scan, &mut self.d_u));
    }
}

impl PlainSsmParams<Tensor> {
    pub fn init(v: usize, rng: &mut impl Rng) -> Self {
        let bv = (1.0 / v as f64).sqrt();
        PlainSsmParams {
            w_b: uniform(&[v, v], bv, rng),
            m_time_u: Tensor::zeros(&[v, v]),
            m_time_z: Tensor::zeros(&[v, v]),
            c: uniform(&[v, v], bv, rng),
            d_u: uniform(&[v], 1.0, rng),
        }
    }
}

pub fn plain_scan_channel_on<B: Backend>(
    b: &mut B,
    u_d: &B::Var,
    p: &PlainSsmParams<B::Var>,
) -> Result<B::Var> {
    let [m_len, v] = b.value(u_d).shape()[..] else {
        return Err(Error::Dimension(format!(
            "channel input must be [M,V], got {:?}",
            b.value(u_d).shape()
        )));
    };
    let mut h: Option<B::Var> = None;
    let mut z_prev: Option<B::Var> = None;
    let mut rows = Vec::with_capacity(m_len);
    for m in 0..m_len {
        let u = b.row(u_d, m)?;
        let pre = b.matmul(&p.m_time_u, &u)?;
        let pre = match &z_prev {
            Some(z) => {
                let t = b.matmul(&p.m_time_z, z)?;
                b.add(&pre, &t)?
            }
            None => pre,
        };
        let a_time = b.sigmoid(&pre);
        let drive = b.matmul(&p.w_b, &u)?;
        let h_new = match &h {
            Some(prev) => {
                let kept = b.mul(&a_time, prev)?;
                b.add(&kept, &drive)?
            }
            None => drive,
        };
        let ch = b.matmul(&p.c, &h_new)?;
        let du = b.mul(&p.d_u, &u)?;
        let z = b.add(&ch, &du)?;
        rows.push(z.clone());
        z_prev = Some(z);
        h = Some(h_new);
    }
    b.concat(&rows, &[m_len, v])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn omega_base_values() {
        let w = omega_base(4);
        let want = [0.0, PI / 2.0, PI, 3.0 * PI / 2.0];
        for (a, b) in w.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_adapter_keeps_base() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = Tensor::from_fn(&[5, 4], |_| rng.random_range(-3.0..3.0));
        let basis = adapt_frequency(&u, &AdapterParams::zeros(4, 4)).unwrap();
        assert_eq!(basis.omega, omega_base(4));
        assert!(basis.delta_omega.data().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn zero_params_fixed_point() {
        let (s, v) = (3, 3);
        let p = ScanParams::zeros(s, v, Spectral::AmpOnly);
        let u = Tensor::vector(vec![0.3, -1.0, 2.0]);
        let r = scan_step(&u, 1, &omega_base(v), &TimeFreqState::zeros(s, v), &p).unwrap();
        assert!(r.a.data().iter().all(|&x| x == 0.25));
        assert!(r.next.f_re.data().iter().all(|&x| x == 0.0));
        assert!(r.e_amp.data().iter().all(|&x| (x - 1e-6).abs() < 1e-18));
        assert!(r.z.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn shut_gate_gives_pure_drive_amplitude() {
        let (s, v) = (2, 3);
        let mut p = ScanParams::zeros(s, v, Spectral::AmpOnly);
        p.w_b = Tensor::from_rows(&[vec![1.0, 0.5, 0.0], vec![-2.0, 0.0, 1.0]]).unwrap();
        p.m_time_u = Tensor::full(&[v, v], -1e4);
        p.m_fre_u = Tensor::full(&[s, v], -1e4);
        let u = Tensor::vector(vec![1.0, 1.0, 1.0]);
        let mut state = TimeFreqState::zeros(s, v);
        state.f_re = Tensor::full(&[s, v], 7.0);
        state.f_im = Tensor::full(&[s, v], -3.0);
        let omega = Tensor::vector(vec![0.3, 1.1, 2.0]);
        let r = scan_step(&u, 1, &omega, &state, &p).unwrap();
        assert!(r.a.data().iter().all(|&x| x < 1e-300));
        let b = [1.5, -1.0];
        for si in 0..s {
            for vi in 0..v {
                assert!((r.e_amp.at2(si, vi) - f64::abs(b[si])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn step_rejects_bad_state_shape() {
        let p = ScanParams::zeros(2, 2, Spectral::AmpOnly);
        let mut st = TimeFreqState::zeros(2, 2);
        st.z_prev = Tensor::zeros(&[3]);
        let err = scan_step(&Tensor::zeros(&[2]), 1, &omega_base(2), &st, &p).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn single_patch_equals_single_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let scan = ScanParams::random(3, 3, Spectral::AmpOnly, 0.5, &mut rng);
        let adapter = AdapterParams {
            w1: Tensor::from_fn(&[3, 4], |_| rng.random_range(-0.5..0.5)),
            b1: Tensor::zeros(&[4]),
            w2: Tensor::from_fn(&[4, 3], |_| rng.random_range(-0.5..0.5)),
            b2: Tensor::zeros(&[3]),
        };
        let u_d = Tensor::from_fn(&[1, 3], |_| rng.random_range(-1.0..1.0));
        let params = AfgssmParams {
            freq: FreqSource::Adaptive(adapter.clone()),
            scan: scan.clone(),
        };
        let z = scan_channel(&u_d, &params).unwrap();
        let basis = adapt_frequency(&u_d, &adapter).unwrap();
        let u = Tensor::vector(u_d.data().to_vec());
        let r = scan_step(&u, 1, &basis.omega, &TimeFreqState::zeros(3, 3), &scan).unwrap();
        assert_eq!(z.data(), r.z.data());
    }

    #[test]
    fn zero_input_zero_params_gives_zero_output() {
        let params = AfgssmParams {
            freq: FreqSource::Adaptive(AdapterParams::zeros(4, 4)),
            scan: ScanParams::zeros(4, 4, Spectral::AmpOnly),
        };
        let z = scan_channel(&Tensor::zeros(&[6, 4]), &params).unwrap();
        assert!(z.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn phase_values() {
        let p = compute_phase(&Tensor::scalar(3.0), &Tensor::scalar(4.0)).unwrap();
        assert!((p.item() - 0.927295).abs() < 1e-6);
        assert_eq!(compute_phase(&Tensor::scalar(-2.0), &Tensor::scalar(0.0)).unwrap().item(), 0.0);
    }

    #[test]
    fn trace_csv_row_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = AfgssmParams {
            freq: FreqSource::Adaptive(AdapterParams::init(4, 4, &mut rng)),
            scan: ScanParams::init(4, 4, Spectral::AmpOnly, &mut rng),
        };
        let u = Tensor::from_fn(&[5, 4], |_| rng.random_range(-1.0..1.0));
        let trace = scan_channel_traced(&u, &params).unwrap();
        let mut buf = Vec::new();
        write_step_grid_csv(&mut buf, &trace.a).unwrap();
        let lines = String::from_utf8(buf).unwrap().lines().count();
        assert_eq!(lines, 1 + 5 * 4 * 4);
    }
}
