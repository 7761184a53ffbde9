//! Full forecaster: encoder, stacked scan blocks with residuals, shared
//! per-channel linear head, plus the variant switchboard and checkpoint I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::afgssm::{
    default_adapter_hidden, plain_scan_channel_on, scan_channel_on, AdapterParams, AfgssmParams,
    FreqSource, PlainSsmParams, ScanParams, Spectral,
};
use crate::error::{Error, Result};
use crate::numerics::{Backend, Eager, Graph, Tensor};
use crate::params::{Role, Visit, VisitMut};
use crate::patch_encoder::{embed_channel_on, interaction_encode_on, EncoderParams, PatchPlan};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum EncoderKind {
    #[default]
    Interactive,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CoreKind {
    #[default]
    Afgssm,
    PlainSsm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum OmegaMode {
    #[default]
    Dynamic,
    Fixed,
}

/// Named ablation settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Case {
    I,
    II,
    III,
    IV,
}

impl std::str::FromStr for Case {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "I" | "1" => Ok(Case::I),
            "II" | "2" => Ok(Case::II),
            "III" | "3" => Ok(Case::III),
            "IV" | "4" => Ok(Case::IV),
            other => Err(Error::Config(format!("unknown ablation case {other:?}"))),
        }
    }
}

impl std::fmt::Display for Case {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Case::I => "I",
            Case::II => "II",
            Case::III => "III",
            Case::IV => "IV",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_len: usize,
    pub horizon: usize,
    pub n_vars: usize,
    pub hidden: usize,
    pub freq_dim: usize,
    pub blocks: usize,
    pub patch_lengths: Vec<usize>,
    pub conv_kernel: usize,
    /// Adapter bottleneck width; `None` means `max(V/4, 4)`.
    pub adapter_hidden: Option<usize>,
    pub encoder: EncoderKind,
    pub core: CoreKind,
    pub spectral: Spectral,
    pub omega_mode: OmegaMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_len: 96,
            horizon: 96,
            n_vars: 7,
            hidden: 16,
            freq_dim: 16,
            blocks: 1,
            patch_lengths: vec![48, 24],
            conv_kernel: 3,
            adapter_hidden: None,
            encoder: EncoderKind::Interactive,
            core: CoreKind::Afgssm,
            spectral: Spectral::AmpOnly,
            omega_mode: OmegaMode::Dynamic,
        }
    }
}

impl ModelConfig {
    /// The small configuration used by gradient checks and oracle tests.
    pub fn toy() -> Self {
        ModelConfig {
            input_len: 24,
            horizon: 6,
            n_vars: 2,
            hidden: 4,
            freq_dim: 4,
            blocks: 1,
            patch_lengths: vec![12],
            ..ModelConfig::default()
        }
    }

    pub fn adapter_width(&self) -> usize {
        self.adapter_hidden.unwrap_or_else(|| default_adapter_hidden(self.hidden))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_len == 0 || self.horizon == 0 || self.n_vars == 0 || self.hidden == 0 {
            return bad("input_len, horizon, n_vars and hidden must all be positive".into());
        }
        if self.freq_dim != self.hidden {
            return bad(format!(
                "freq_dim ({}) must equal hidden ({})",
                self.freq_dim, self.hidden
            ));
        }
        if !(1..=6).contains(&self.blocks) {
            return bad(format!("blocks must be in 1..=6, got {}", self.blocks));
        }
        if self.patch_lengths.is_empty() {
            return bad("at least one patch length is required".into());
        }
        if self.adapter_width() == 0 {
            return bad("adapter_hidden must be positive".into());
        }
        if self.encoder == EncoderKind::Interactive {
            if self.conv_kernel % 2 == 0 {
                return bad(format!("conv_kernel {} must be odd", self.conv_kernel));
            }
            if self.input_len < self.conv_kernel {
                return bad(format!(
                    "input_len {} shorter than conv_kernel {}",
                    self.input_len, self.conv_kernel
                ));
            }
        }
        if self.core == CoreKind::PlainSsm
            && (self.spectral != Spectral::AmpOnly || self.omega_mode != OmegaMode::Dynamic)
        {
            return bad("spectral and omega_mode flags only apply to the afgssm core".into());
        }
        PatchPlan::new(self.input_len, &self.patch_lengths)?;
        Ok(())
    }
}

/// Returns `base` rewired for an ablation case.
pub fn apply_variant(base: &ModelConfig, case: Case) -> Result<ModelConfig> {
    let mut c = base.clone();
    match case {
        Case::I => {
            c.encoder = EncoderKind::Interactive;
            c.core = CoreKind::Afgssm;
            c.spectral = Spectral::AmpOnly;
            c.omega_mode = OmegaMode::Dynamic;
        }
        Case::II => {
            c.encoder = EncoderKind::Linear;
            c.core = CoreKind::Afgssm;
            c.spectral = Spectral::AmpOnly;
            c.omega_mode = OmegaMode::Dynamic;
        }
        Case::III => {
            return Err(Error::Config(
                "case III needs an external frequency-enhanced block that is not implemented".into(),
            ))
        }
        Case::IV => {
            c.encoder = EncoderKind::Linear;
            c.core = CoreKind::PlainSsm;
            c.spectral = Spectral::AmpOnly;
            c.omega_mode = OmegaMode::Dynamic;
        }
    }
    c.validate()?;
    Ok(c)
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub enum EncoderSlot<T = Tensor> {
    Interactive(EncoderParams<T>),
    /// `weight: [T, M*V]`, `bias: [M*V]`, shared across channels.
    Linear { weight: T, bias: T },
}

#[derive(Clone, Debug, PartialEq)]
pub enum BlockParams<T = Tensor> {
    Afgssm(AfgssmParams<T>),
    Plain(PlainSsmParams<T>),
}

/// Every trainable tensor of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = Tensor> {
    pub encoder: EncoderSlot<T>,
    pub blocks: Vec<BlockParams<T>>,
    /// `[M*V, H]`
    pub head_w: T,
    /// `[H]`
    pub head_b: T,
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            encoder: match &self.encoder {
                EncoderSlot::Interactive(e) => EncoderSlot::Interactive(e.map(f)),
                EncoderSlot::Linear { weight, bias } => EncoderSlot::Linear {
                    weight: f(weight),
                    bias: f(bias),
                },
            },
            blocks: self
                .blocks
                .iter()
                .map(|b| match b {
                    BlockParams::Afgssm(p) => BlockParams::Afgssm(p.map(f)),
                    BlockParams::Plain(p) => BlockParams::Plain(p.map(f)),
                })
                .collect(),
            head_w: f(&self.head_w),
            head_b: f(&self.head_b),
        }
    }

    /// `(name, role, tensor)` in a fixed order; this order is the checkpoint
    /// order and the order of gradient vectors.
    pub fn visit(&self) -> Vec<(String, Role, &T)> {
        let mut out: Visit<'_, T> = Vec::new();
        match &self.encoder {
            EncoderSlot::Interactive(e) => e.visit("encoder", &mut out),
            EncoderSlot::Linear { weight, bias } => {
                out.push(("encoder.linear.weight".into(), Role::Encoder, weight));
                out.push(("encoder.linear.bias".into(), Role::Encoder, bias));
            }
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let prefix = format!("block{i}");
            match b {
                BlockParams::Afgssm(p) => p.visit(&prefix, &mut out),
                BlockParams::Plain(p) => p.visit(&prefix, &mut out),
            }
        }
        out.push(("head.weight".into(), Role::Head, &self.head_w));
        out.push(("head.bias".into(), Role::Head, &self.head_b));
        out
    }

    pub fn visit_mut(&mut self) -> Vec<(String, Role, &mut T)> {
        let mut out: VisitMut<'_, T> = Vec::new();
        match &mut self.encoder {
            EncoderSlot::Interactive(e) => e.visit_mut("encoder", &mut out),
            EncoderSlot::Linear { weight, bias } => {
                out.push(("encoder.linear.weight".into(), Role::Encoder, weight));
                out.push(("encoder.linear.bias".into(), Role::Encoder, bias));
            }
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let prefix = format!("block{i}");
            match b {
                BlockParams::Afgssm(p) => p.visit_mut(&prefix, &mut out),
                BlockParams::Plain(p) => p.visit_mut(&prefix, &mut out),
            }
        }
        out.push(("head.weight".into(), Role::Head, &mut self.head_w));
        out.push(("head.bias".into(), Role::Head, &mut self.head_b));
        out
    }

    pub fn tensors(&self) -> Vec<&T> {
        self.visit().into_iter().map(|(_, _, t)| t).collect()
    }
}

/// Trainable parameters plus the per-variable normalization statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    pub params: ModelParams,
    /// `[D]`
    pub norm_mean: Tensor,
    /// `[D]`
    pub norm_std: Tensor,
}

impl ParamSet {
    pub fn inventory(&self) -> Vec<(String, Role, &Tensor)> {
        let mut v = self.params.visit();
        v.push(("norm.mean".into(), Role::Norm, &self.norm_mean));
        v.push(("norm.std".into(), Role::Norm, &self.norm_std));
        v
    }

    pub fn inventory_mut(&mut self) -> Vec<(String, Role, &mut Tensor)> {
        let mut v = self.params.visit_mut();
        v.push(("norm.mean".into(), Role::Norm, &mut self.norm_mean));
        v.push(("norm.std".into(), Role::Norm, &mut self.norm_std));
        v
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.inventory())
    }

    /// Loads into the inventory implied by `model`; any difference in names,
    /// roles, order or shapes is an error.
    pub fn load(path: &Path, model: &Model) -> Result<ParamSet> {
        let mut set = model.zero_params();
        let stored = read_checkpoint(path)?;
        fill_inventory(set.inventory_mut(), stored, path)?;
        Ok(set)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params.tensors().iter().map(|t| t.numel()).sum()
    }
}

pub(crate) fn fill_inventory(
    slots: Vec<(String, Role, &mut Tensor)>,
    stored: Vec<NamedTensor>,
    path: &Path,
) -> Result<()> {
    if slots.len() != stored.len() {
        return Err(Error::Checkpoint(format!(
            "{}: holds {} tensors, model expects {}",
            path.display(),
            stored.len(),
            slots.len()
        )));
    }
    for ((name, role, slot), got) in slots.into_iter().zip(stored) {
        if got.name != name || got.role != role || got.tensor.shape() != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "{}: expected {name} ({role}) {:?}, found {} ({}) {:?}",
                path.display(),
                slot.shape(),
                got.name,
                got.role,
                got.tensor.shape()
            )));
        }
        *slot = got.tensor;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoint format
// ---------------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AFGM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub role: Role,
    pub tensor: Tensor,
}

/// Magic, version, manifest (count, then per tensor: name, rank, extents,
/// role), then every payload as little-endian f64 in manifest order.
pub fn write_checkpoint(path: &Path, tensors: &[(String, Role, &Tensor)]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    encode_checkpoint(&mut w, tensors).map_err(io)?;
    w.flush().map_err(io)
}

pub fn encode_checkpoint<W: Write>(w: &mut W, tensors: &[(String, Role, &Tensor)]) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for (name, role, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        w.write_all(&[*role as u8])?;
    }
    for (_, _, t) in tensors {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<NamedTensor>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&mut BufReader::new(f)).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn decode_checkpoint<R: Read>(r: &mut R) -> Result<Vec<NamedTensor>> {
    fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        r.read_exact(&mut b)
            .map_err(|e| Error::Checkpoint(format!("truncated file ({e})")))?;
        Ok(b)
    }
    if &take::<4>(r)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(take(r)?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(take(r)?);
    if count > 1 << 20 {
        return Err(Error::Checkpoint(format!("implausible tensor count {count}")));
    }
    let mut manifest = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u32::from_le_bytes(take(r)?) as usize;
        if len > 4096 {
            return Err(Error::Checkpoint(format!("implausible name length {len}")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Checkpoint(format!("truncated name ({e})")))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = u32::from_le_bytes(take(r)?) as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("{name}: implausible rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| Ok(u64::from_le_bytes(take(r)?) as usize))
            .collect::<Result<Vec<_>>>()?;
        let [tag] = take::<1>(r)?;
        let role = Role::from_tag(tag)
            .ok_or_else(|| Error::Checkpoint(format!("{name}: unknown role tag {tag}")))?;
        manifest.push((name, shape, role));
    }
    let mut out = Vec::with_capacity(manifest.len());
    for (name, shape, role) in manifest {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| Ok(f64::from_le_bytes(take(r)?)))
            .collect::<Result<Vec<_>>>()?;
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        out.push(NamedTensor { name, role, tensor });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).unwrap_or(0) != 0 {
        return Err(Error::Checkpoint("trailing bytes after payload".into()));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// A validated configuration plus precomputed index maps.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    plan: PatchPlan,
    /// `[d][scale]` gather indices into the encoded window.
    patch_index: Vec<Vec<Arc<[usize]>>>,
    /// `[d]` indices of channel `d` in a `[T, D]` window.
    column_index: Vec<Arc<[usize]>>,
    /// Maps `[D, H]` to `[H, D]`.
    transpose_index: Arc<[usize]>,
}

fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let plan = PatchPlan::new(config.input_len, &config.patch_lengths)?;
        let d = config.n_vars;
        let t = config.input_len;
        let h = config.horizon;
        let patch_index = (0..d)
            .map(|c| (0..plan.scales().len()).map(|s| plan.channel_index(s, c, d)).collect())
            .collect();
        let column_index = (0..d)
            .map(|c| (0..t).map(|i| i * d + c).collect::<Vec<_>>().into())
            .collect();
        let transpose_index = (0..h * d).map(|i| (i % d) * h + i / d).collect::<Vec<_>>().into();
        Ok(Model {
            config,
            plan,
            patch_index,
            column_index,
            transpose_index,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn plan(&self) -> &PatchPlan {
        &self.plan
    }

    /// Total patch count `M`.
    pub fn patches(&self) -> usize {
        self.plan.total_patches()
    }

    /// Parameters with the right inventory and every value zero (norm std 1).
    pub fn zero_params(&self) -> ParamSet {
        let mut set = self.init_params(0, None);
        for (_, _, t) in set.inventory_mut() {
            t.data_mut().fill(0.0);
        }
        set.norm_std.data_mut().fill(1.0);
        set
    }

    /// Seeded initialization. `norm` is the per-variable `(mean, std)`; `None`
    /// gives the identity normalization.
    pub fn init_params(&self, seed: u64, norm: Option<(Tensor, Tensor)>) -> ParamSet {
        let c = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, s, m) = (c.hidden, c.freq_dim, self.patches());
        let encoder = match c.encoder {
            EncoderKind::Interactive => EncoderSlot::Interactive(
                EncoderParams::init(&self.plan, c.n_vars, v, c.conv_kernel, &mut rng)
                    .expect("validated config"),
            ),
            EncoderKind::Linear => EncoderSlot::Linear {
                weight: uniform(&[c.input_len, m * v], (1.0 / c.input_len as f64).sqrt(), &mut rng),
                bias: Tensor::zeros(&[m * v]),
            },
        };
        let blocks = (0..c.blocks)
            .map(|_| match c.core {
                CoreKind::Afgssm => {
                    let freq = match c.omega_mode {
                        OmegaMode::Dynamic => {
                            FreqSource::Adaptive(AdapterParams::init(v, c.adapter_width(), &mut rng))
                        }
                        OmegaMode::Fixed => FreqSource::Fixed {
                            delta_omega: Tensor::zeros(&[v]),
                        },
                    };
                    BlockParams::Afgssm(AfgssmParams {
                        freq,
                        scan: ScanParams::init(s, v, c.spectral, &mut rng),
                    })
                }
                CoreKind::PlainSsm => BlockParams::Plain(PlainSsmParams::init(v, &mut rng)),
            })
            .collect();
        let fan_in = m * v;
        let head_w = uniform(&[fan_in, c.horizon], (1.0 / fan_in as f64).sqrt(), &mut rng);
        let (norm_mean, norm_std) = norm.unwrap_or_else(|| {
            (Tensor::zeros(&[c.n_vars]), Tensor::full(&[c.n_vars], 1.0))
        });
        ParamSet {
            params: ModelParams {
                encoder,
                blocks,
                head_w,
                head_b: Tensor::zeros(&[c.horizon]),
            },
            norm_mean,
            norm_std,
        }
    }

    fn check_window(&self, x: &Tensor, rows: usize, what: &str) -> Result<()> {
        let want = [rows, self.config.n_vars];
        if x.shape() != want {
            return Err(Error::Dimension(format!(
                "{what} has shape {:?}, expected {want:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    fn encode_on<B: Backend>(&self, b: &mut B, x: &B::Var, p: &ModelParams<B::Var>) -> Result<Option<B::Var>> {
        match &p.encoder {
            EncoderSlot::Interactive(e) => {
                let enc = interaction_encode_on(b, x, &e.conv_kernel, &e.alpha_raw)?;
                b.value(&enc).check_finite("interaction encoder output")?;
                Ok(Some(enc))
            }
            EncoderSlot::Linear { .. } => Ok(None),
        }
    }

    /// `U_d: [M, V]` for channel `ch`; `encoded` is the interaction output when present.
    fn embed_on<B: Backend>(
        &self,
        b: &mut B,
        x: &B::Var,
        encoded: Option<&B::Var>,
        p: &ModelParams<B::Var>,
        ch: usize,
    ) -> Result<B::Var> {
        let c = &self.config;
        let u = match (&p.encoder, encoded) {
            (EncoderSlot::Interactive(e), Some(enc)) => {
                embed_channel_on(b, enc, &self.plan, &self.patch_index[ch], &e.proj)?
            }
            (EncoderSlot::Linear { weight, bias }, _) => {
                let col = b.gather(x, self.column_index[ch].clone(), &[1, c.input_len])?;
                let lin = b.matmul(&col, weight)?;
                let lin = b.add(&lin, bias)?;
                b.reshape(&lin, &[self.patches(), c.hidden])?
            }
            (EncoderSlot::Interactive(_), None) => {
                return Err(Error::Contract("interactive encoder output missing".into()))
            }
        };
        b.value(&u)
            .check_finite(&format!("patch embedding of channel {ch}"))?;
        Ok(u)
    }

    /// `U + block(U)`.
    fn block_on<B: Backend>(&self, b: &mut B, u: &B::Var, block: &BlockParams<B::Var>) -> Result<B::Var> {
        let z = match block {
            BlockParams::Afgssm(bp) => scan_channel_on(b, u, bp, |_, _, _| {})?.0,
            BlockParams::Plain(bp) => plain_scan_channel_on(b, u, bp)?,
        };
        b.add(u, &z)
    }

    /// Forecast `[H, D]` on the normalized scale from a normalized `[T, D]` window.
    pub fn forward_normalized_on<B: Backend>(
        &self,
        b: &mut B,
        x: &B::Var,
        p: &ModelParams<B::Var>,
    ) -> Result<B::Var> {
        let c = &self.config;
        let (m, v, h, d) = (self.patches(), c.hidden, c.horizon, c.n_vars);
        let encoded = self.encode_on(b, x, p)?;
        let mut rows = Vec::with_capacity(d);
        for ch in 0..d {
            let mut u = self.embed_on(b, x, encoded.as_ref(), p, ch)?;
            for (i, block) in p.blocks.iter().enumerate() {
                u = self.block_on(b, &u, block)?;
                b.value(&u)
                    .check_finite(&format!("block {i} output of channel {ch}"))?;
            }
            let flat = b.reshape(&u, &[1, m * v])?;
            let out = b.matmul(&flat, &p.head_w)?;
            rows.push(b.add(&out, &p.head_b)?);
        }
        let stacked = b.concat(&rows, &[d, h])?;
        let pred = b.gather(&stacked, self.transpose_index.clone(), &[h, d])?;
        b.value(&pred).check_finite("prediction")?;
        Ok(pred)
    }

    /// The `[M, V]` input of every block for channel `ch` of a normalized window.
    pub fn block_inputs(&self, set: &ParamSet, x_norm: &Tensor, ch: usize) -> Result<Vec<Tensor>> {
        self.check_window(x_norm, self.config.input_len, "input window")?;
        if ch >= self.config.n_vars {
            return Err(Error::Config(format!(
                "channel {ch} out of range for {} variables",
                self.config.n_vars
            )));
        }
        let p = &set.params;
        let encoded = self.encode_on(&mut Eager, x_norm, p)?;
        let mut u = self.embed_on(&mut Eager, x_norm, encoded.as_ref(), p, ch)?;
        let mut out = Vec::with_capacity(p.blocks.len());
        for block in &p.blocks {
            out.push(u.clone());
            u = self.block_on(&mut Eager, &u, block)?;
        }
        Ok(out)
    }

    pub fn normalize(&self, set: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let centered = crate::numerics::tensor::sub(x, &set.norm_mean)?;
        crate::numerics::tensor::zip_broadcast(&centered, &set.norm_std, |a, s| a / s)
    }

    pub fn denormalize(&self, set: &ParamSet, y: &Tensor) -> Result<Tensor> {
        let scaled = crate::numerics::tensor::mul(y, &set.norm_std)?;
        crate::numerics::tensor::add(&scaled, &set.norm_mean)
    }

    /// Forecast on the normalized scale.
    pub fn forward_normalized(&self, set: &ParamSet, x_norm: &Tensor) -> Result<Tensor> {
        self.check_window(x_norm, self.config.input_len, "input window")?;
        x_norm.check_finite("input window")?;
        self.forward_normalized_on(&mut Eager, x_norm, &set.params)
    }

    /// Forecast `[H, D]` on the raw scale from a raw `[T, D]` window.
    pub fn forward(&self, set: &ParamSet, x: &Tensor) -> Result<Tensor> {
        self.check_window(x, self.config.input_len, "input window")?;
        x.check_finite("input window")?;
        let xn = self.normalize(set, x)?;
        let y = self.forward_normalized_on(&mut Eager, &xn, &set.params)?;
        self.denormalize(set, &y)
    }

    /// Loss and gradient (in [`ModelParams::visit`] order) for one normalized window.
    pub fn loss_and_grad(
        &self,
        params: &ModelParams,
        x_norm: &Tensor,
        y_norm: &Tensor,
    ) -> Result<(f64, Vec<Tensor>)> {
        self.check_window(x_norm, self.config.input_len, "input window")?;
        self.check_window(y_norm, self.config.horizon, "target window")?;
        let mut g = Graph::new();
        let nodes = params.map(&mut |t| g.param(t.clone()));
        let x = g.constant(x_norm.clone());
        let pred = self.forward_normalized_on(&mut g, &x, &nodes)?;
        let target = g.constant(y_norm.clone());
        let loss = mse_on(&mut g, &pred, &target)?;
        let value = g.value(&loss).item();
        let mut grads = g.backward(loss)?;
        let out = nodes.tensors().into_iter().map(|id| grads.take(*id)).collect();
        Ok((value, out))
    }

    pub fn loss(&self, params: &ModelParams, x_norm: &Tensor, y_norm: &Tensor) -> Result<f64> {
        self.check_window(x_norm, self.config.input_len, "input window")?;
        let pred = self.forward_normalized_on(&mut Eager, x_norm, params)?;
        mse(&pred, y_norm)
    }
}

/// Mean squared error over all entries.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    mse_on(&mut Eager, pred, target).map(|t| t.item())
}

pub fn mse_on<B: Backend>(b: &mut B, pred: &B::Var, target: &B::Var) -> Result<B::Var> {
    let (ps, ts) = (b.value(pred).shape(), b.value(target).shape());
    if ps != ts {
        return Err(Error::Dimension(format!(
            "prediction {ps:?} and target {ts:?} differ"
        )));
    }
    let n = b.value(pred).numel();
    let diff = b.sub(pred, target)?;
    let sq = b.square(&diff);
    let total = b.sum_all(&sq);
    Ok(b.scale(&total, 1.0 / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn config_rejects_mismatched_freq_dim_and_block_count() {
        let mut c = ModelConfig::toy();
        c.freq_dim = 8;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::toy();
        c.blocks = 7;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::toy();
        c.horizon = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn variant_wiring() {
        let base = ModelConfig::toy();
        let four = apply_variant(&base, Case::IV).unwrap();
        assert_eq!((four.encoder, four.core), (EncoderKind::Linear, CoreKind::PlainSsm));
        let one = apply_variant(&base, Case::I).unwrap();
        assert_eq!(
            (one.encoder, one.core, one.spectral, one.omega_mode),
            (EncoderKind::Interactive, CoreKind::Afgssm, Spectral::AmpOnly, OmegaMode::Dynamic)
        );
        assert!(matches!(apply_variant(&base, Case::III), Err(Error::Config(_))));
    }

    #[test]
    fn cases_one_and_two_share_core_shapes() {
        let base = ModelConfig::toy();
        let a = Model::new(apply_variant(&base, Case::I).unwrap()).unwrap().init_params(1, None);
        let b = Model::new(apply_variant(&base, Case::II).unwrap()).unwrap().init_params(1, None);
        let core = |s: &ParamSet| -> Vec<(String, Vec<usize>)> {
            s.params
                .visit()
                .into_iter()
                .filter(|(n, _, _)| n.starts_with("block"))
                .map(|(n, _, t)| (n, t.shape().to_vec()))
                .collect()
        };
        assert_eq!(core(&a), core(&b));
    }

    #[test]
    fn zero_head_predicts_training_mean() {
        let model = Model::new(ModelConfig::toy()).unwrap();
        let mut set = model.init_params(3, Some((Tensor::vector(vec![5.0, -2.0]), Tensor::vector(vec![2.0, 0.5]))));
        set.params.head_w.data_mut().fill(0.0);
        let y = model.forward(&set, &random(&[24, 2], 4)).unwrap();
        assert_eq!(y.shape(), &[6, 2]);
        for row in 0..6 {
            assert_eq!(y.at2(row, 0), 5.0);
            assert_eq!(y.at2(row, 1), -2.0);
        }
    }

    #[test]
    fn output_shape_single_step_single_var() {
        let cfg = ModelConfig {
            input_len: 8,
            horizon: 1,
            n_vars: 1,
            hidden: 4,
            freq_dim: 4,
            patch_lengths: vec![4],
            ..ModelConfig::default()
        };
        let model = Model::new(cfg).unwrap();
        let set = model.init_params(0, None);
        assert_eq!(model.forward(&set, &random(&[8, 1], 1)).unwrap().shape(), &[1, 1]);
    }

    #[test]
    fn loss_examples() {
        let a = random(&[3, 2], 2);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        let b = a.map(|x| x + 1.0);
        assert!((mse(&b, &a).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(mse(&a, &random(&[2, 3], 2)), Err(Error::Dimension(_))));
    }

    #[test]
    fn nan_input_is_numeric_fault() {
        let model = Model::new(ModelConfig::toy()).unwrap();
        let set = model.init_params(0, None);
        let mut x = random(&[24, 2], 1);
        x.data_mut()[5] = f64::NAN;
        let err = model.forward(&set, &x).unwrap_err();
        assert!(matches!(err, Error::Numeric(ref m) if m.contains("input")));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let model = Model::new(ModelConfig::toy()).unwrap();
        let set = model.init_params(9, None);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        set.save(&path).unwrap();
        let back = ParamSet::load(&path, &model).unwrap();
        for ((_, _, a), (_, _, b)) in set.inventory().iter().zip(back.inventory()) {
            let ab: Vec<u64> = a.data().iter().map(|x| x.to_bits()).collect();
            let bb: Vec<u64> = b.data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn checkpoint_inventory_mismatch_fails() {
        let model = Model::new(ModelConfig::toy()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.init_params(1, None).save(&path).unwrap();
        let mut other = ModelConfig::toy();
        other.hidden = 8;
        other.freq_dim = 8;
        let err = ParamSet::load(&path, &Model::new(other).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(ParamSet::load(&path, &model), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn graph_and_eager_losses_agree() {
        let model = Model::new(ModelConfig::toy()).unwrap();
        let set = model.init_params(5, None);
        let x = random(&[24, 2], 6);
        let y = random(&[6, 2], 7);
        let (l, grads) = model.loss_and_grad(&set.params, &x, &y).unwrap();
        assert_eq!(l, model.loss(&set.params, &x, &y).unwrap());
        assert_eq!(grads.len(), set.params.tensors().len());
    }
}
