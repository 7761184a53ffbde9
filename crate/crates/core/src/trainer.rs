//! Mini-batch Adam training with clipping, early stopping and gradient checks.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data_io::{Dataset, MetricAccumulator, SplitName, Splits, WindowSet};
use crate::error::{Error, Result};
use crate::model::{fill_inventory, read_checkpoint, write_checkpoint, Model, ModelParams, ParamSet};
use crate::numerics::Tensor;
use crate::parallel::{par_map, seq_map};
use crate::params::Role;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Maximum global L2 norm of the gradient.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 24,
            max_epochs: 10,
            patience: 5,
            seed: 0,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1e-6..=1e-1).contains(&self.lr) {
            return Err(Error::Config(format!("lr {} outside [1e-6, 1e-1]", self.lr)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be positive".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config(format!("grad_clip {} must be positive", self.grad_clip)));
        }
        Ok(())
    }
}

/// Adam moments, one pair per trainable tensor in [`ModelParams::visit`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        OptimizerState {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    /// Zero moments for tensors of the given shapes.
    pub fn for_shapes(shapes: &[&[usize]]) -> Self {
        let zeros: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
        OptimizerState {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    /// One Adam update of the model's trainable tensors.
    pub fn update(&mut self, params: &mut ModelParams, grads: &[Tensor], lr: f64) -> Result<()> {
        let slots = params.visit_mut().into_iter().map(|(_, _, t)| t).collect();
        self.update_slots(slots, grads, lr)
    }

    /// One Adam update with bias correction; `slots[i]` pairs with `grads[i]`.
    pub fn update_slots(&mut self, mut slots: Vec<&mut Tensor>, grads: &[Tensor], lr: f64) -> Result<()> {
        if slots.len() != grads.len() || grads.len() != self.first.len() {
            return Err(Error::Contract(format!(
                "{} parameters, {} gradients, {} moment slots",
                slots.len(),
                grads.len(),
                self.first.len()
            )));
        }
        self.step += 1;
        let b1t = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let b2t = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for (i, p) in slots.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.first[i].data_mut();
            for (mj, gj) in m.iter_mut().zip(g) {
                *mj = ADAM_BETA1 * *mj + (1.0 - ADAM_BETA1) * gj;
            }
            let v = self.second[i].data_mut();
            for (vj, gj) in v.iter_mut().zip(g) {
                *vj = ADAM_BETA2 * *vj + (1.0 - ADAM_BETA2) * gj * gj;
            }
            let (m, v) = (self.first[i].data(), self.second[i].data());
            for ((pj, mj), vj) in p.data_mut().iter_mut().zip(m).zip(v) {
                *pj -= lr * (mj / b1t) / ((vj / b2t).sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, params: &ModelParams) -> Result<()> {
        let names: Vec<String> = params.visit().into_iter().map(|(n, _, _)| n).collect();
        let step = Tensor::scalar(self.step as f64);
        let mut list: Vec<(String, Role, &Tensor)> = Vec::new();
        for (n, t) in names.iter().zip(&self.first) {
            list.push((format!("{n}.adam_m"), Role::AdamFirst, t));
        }
        for (n, t) in names.iter().zip(&self.second) {
            list.push((format!("{n}.adam_v"), Role::AdamSecond, t));
        }
        list.push(("adam.step".into(), Role::AdamStep, &step));
        write_checkpoint(path, &list)
    }

    pub fn load(path: &Path, params: &ModelParams) -> Result<Self> {
        let mut state = OptimizerState::new(params);
        let names: Vec<String> = params.visit().into_iter().map(|(n, _, _)| n).collect();
        let mut step = Tensor::scalar(0.0);
        let mut slots: Vec<(String, Role, &mut Tensor)> = Vec::new();
        for (n, t) in names.iter().zip(state.first.iter_mut()) {
            slots.push((format!("{n}.adam_m"), Role::AdamFirst, t));
        }
        for (n, t) in names.iter().zip(state.second.iter_mut()) {
            slots.push((format!("{n}.adam_v"), Role::AdamSecond, t));
        }
        slots.push(("adam.step".into(), Role::AdamStep, &mut step));
        fill_inventory(slots, read_checkpoint(path)?, path)?;
        state.step = step.item() as u64;
        Ok(state)
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale_in_place(s));
    }
    norm
}

/// Train and validation windows with the statistics used to standardize them.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: WindowSet,
    pub val: WindowSet,
    pub test: WindowSet,
    pub mean: Tensor,
    pub std: Tensor,
}

impl TrainData {
    pub fn new(ds: &Dataset, splits: &Splits, input_len: usize, horizon: usize) -> Result<Self> {
        let (mean, std) = ds.stats(splits.train.clone())?;
        let data = Arc::new(ds.standardized(&mean, &std)?);
        let set = |w: SplitName| WindowSet::new(data.clone(), splits.get(w), input_len, horizon);
        Ok(TrainData {
            train: set(SplitName::Train)?,
            val: set(SplitName::Val)?,
            test: set(SplitName::Test)?,
            mean,
            std,
        })
    }

    pub fn split(&self, which: SplitName) -> &WindowSet {
        match which {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    /// Best validation MSE so far, including this epoch.
    pub best_val_mse: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: ParamSet,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub history: Vec<EpochRecord>,
    pub optimizer: OptimizerState,
    pub stopped_early: bool,
}

/// Mean loss and mean gradient over a batch; summed in batch order.
pub fn batch_loss_and_grad(
    model: &Model,
    params: &ModelParams,
    windows: &WindowSet,
    batch: &[usize],
) -> Result<(f64, Vec<Tensor>)> {
    let results = par_map(batch, |&i| {
        let w = windows.get(i);
        model.loss_and_grad(params, &w.input, &w.target)
    });
    reduce_batch(results)
}

/// Single-threaded [`batch_loss_and_grad`]; the result is bit-identical.
pub fn batch_loss_and_grad_seq(
    model: &Model,
    params: &ModelParams,
    windows: &WindowSet,
    batch: &[usize],
) -> Result<(f64, Vec<Tensor>)> {
    let results = seq_map(batch, |&i| {
        let w = windows.get(i);
        model.loss_and_grad(params, &w.input, &w.target)
    });
    reduce_batch(results)
}

fn reduce_batch(results: Vec<Result<(f64, Vec<Tensor>)>>) -> Result<(f64, Vec<Tensor>)> {
    let n = results.len() as f64;
    let mut loss = 0.0;
    let mut total: Option<Vec<Tensor>> = None;
    for r in results {
        let (l, g) = r?;
        loss += l;
        match &mut total {
            None => total = Some(g),
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
        }
    }
    let mut grads = total.ok_or_else(|| Error::Contract("empty batch".into()))?;
    grads.iter_mut().for_each(|g| g.scale_in_place(1.0 / n));
    Ok((loss / n, grads))
}

/// `(MSE, MAE)` on the normalized scale over every window of `windows`.
pub fn evaluate(model: &Model, set: &ParamSet, windows: &WindowSet) -> Result<(f64, f64)> {
    let idx: Vec<usize> = (0..windows.len()).collect();
    let mut acc = MetricAccumulator::default();
    for chunk in idx.chunks(256) {
        let preds = par_map(chunk, |&i| {
            let w = windows.get(i);
            model.forward_normalized(set, &w.input).map(|p| (p, w.target))
        });
        for r in preds {
            let (p, t) = r?;
            acc.add(&p, &t)?;
        }
    }
    acc.finish()
}

/// Trains from `init` and returns the parameters with the best validation MSE.
/// `on_epoch` sees each epoch's record, the current parameters, and whether
/// they are the new best.
pub fn train(
    model: &Model,
    init: ParamSet,
    data: &TrainData,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &ParamSet, bool) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut current = init;
    let mut opt = OptimizerState::new(&current.params);
    // shuffling draws from a stream separate from parameter init
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed_5eed_5eed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut history = Vec::new();
    let mut best = current.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut stopped_early = false;
    for epoch in 0..cfg.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (loss, mut grads) = batch_loss_and_grad(model, &current.params, &data.train, batch)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite training loss at epoch {epoch}, batch {bi}"
                )));
            }
            if let Some(pos) = grads.iter().position(|g| !g.is_finite()) {
                let name = &current.params.visit()[pos].0;
                return Err(Error::Numeric(format!(
                    "non-finite gradient for {name} at epoch {epoch}, batch {bi}"
                )));
            }
            clip_global_norm(&mut grads, cfg.grad_clip);
            opt.update(&mut current.params, &grads, cfg.lr)?;
            loss_sum += loss * batch.len() as f64;
        }
        let train_mse = loss_sum / order.len() as f64;
        let (val_mse, _) = evaluate(model, &current, &data.val)?;
        if !val_mse.is_finite() {
            return Err(Error::Numeric(format!("non-finite validation MSE at epoch {epoch}")));
        }
        let improved = val_mse < best_val;
        if improved {
            best_val = val_mse;
            best = current.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
        }
        let rec = EpochRecord {
            epoch,
            train_mse,
            val_mse,
            best_val_mse: best_val,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train {train_mse:.6} val {val_mse:.6} best {best_val:.6} ({:.1}s)",
            rec.seconds
        );
        on_epoch(&rec, &current, improved)?;
        history.push(rec);
        if since_best >= cfg.patience {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val_mse: best_val,
        history,
        optimizer: opt,
        stopped_early,
    })
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub numel: usize,
    /// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)` with L2 norms over the tensor.
    pub rel_err: f64,
    pub max_abs_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tol: f64,
    pub h: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.entries.iter().filter(|e| !e.passed).map(|e| e.name.as_str()).collect()
    }

    pub fn worst(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_err).fold(0.0, f64::max)
    }
}

fn flatten(params: &ModelParams) -> Vec<f64> {
    params.tensors().iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn unflatten(params: &mut ModelParams, flat: &[f64]) {
    let mut at = 0;
    for (_, _, t) in params.visit_mut() {
        let n = t.numel();
        t.data_mut().copy_from_slice(&flat[at..at + n]);
        at += n;
    }
}

/// Compares `analytic` (one tensor per parameter, visit order) with central
/// differences of `loss`.
pub fn compare_gradients(
    params: &ModelParams,
    analytic: &[Tensor],
    loss: impl Fn(&ModelParams) -> f64 + Sync,
    h: f64,
    tol: f64,
) -> GradCheckReport {
    let base = flatten(params);
    let numeric = crate::oracles::fd_gradient(
        |x| {
            let mut p = params.clone();
            unflatten(&mut p, x);
            loss(&p)
        },
        &base,
        h,
    );
    let mut entries = Vec::new();
    let mut at = 0;
    for ((name, _, t), a) in params.visit().into_iter().zip(analytic) {
        let n = t.numel();
        let num = &numeric[at..at + n];
        at += n;
        let (mut diff, mut an, mut nn, mut max_abs) = (0.0, 0.0, 0.0, 0.0f64);
        for (x, y) in a.data().iter().zip(num) {
            diff += (x - y) * (x - y);
            an += x * x;
            nn += y * y;
            max_abs = max_abs.max((x - y).abs());
        }
        let rel = diff.sqrt() / an.sqrt().max(nn.sqrt()).max(1e-8);
        entries.push(GradCheckEntry {
            name,
            numel: n,
            rel_err: rel,
            max_abs_err: max_abs,
            passed: rel < tol,
        });
    }
    GradCheckReport { entries, tol, h }
}

/// Full-model gradient check on one normalized window.
pub fn grad_check(
    model: &Model,
    params: &ModelParams,
    x_norm: &Tensor,
    y_norm: &Tensor,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let (_, analytic) = model.loss_and_grad(params, x_norm, y_norm)?;
    // surface shape or config errors before running thousands of evaluations
    model.loss(params, x_norm, y_norm)?;
    Ok(compare_gradients(
        params,
        &analytic,
        |p| model.loss(p, x_norm, y_norm).unwrap_or(f64::NAN),
        h,
        tol,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::Rng;

    fn toy() -> (Model, ParamSet, Tensor, Tensor) {
        let model = Model::new(ModelConfig::toy()).unwrap();
        let set = model.init_params(1, None);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::from_fn(&[24, 2], |_| rng.random_range(-1.0..1.0));
        let y = Tensor::from_fn(&[6, 2], |_| rng.random_range(-1.0..1.0));
        (model, set, x, y)
    }

    #[test]
    fn zero_lr_leaves_params() {
        let (model, set, x, y) = toy();
        let mut p = set.params.clone();
        let mut opt = OptimizerState::new(&p);
        for _ in 0..5 {
            let (_, g) = model.loss_and_grad(&p, &x, &y).unwrap();
            opt.update(&mut p, &g, 0.0).unwrap();
        }
        assert_eq!(p, set.params);
    }

    #[test]
    fn adam_solves_scalar_quadratic() {
        let mut p = Tensor::scalar(0.0);
        let mut opt = OptimizerState::for_shapes(&[&[]]);
        for _ in 0..500 {
            let g = Tensor::scalar(2.0 * (p.item() - 3.0));
            opt.update_slots(vec![&mut p], &[g], 0.1).unwrap();
        }
        // hand-rolled scalar Adam with the same constants
        let (mut q, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=500 {
            let g = 2.0 * (q - 3.0);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            q -= 0.1 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        }
        assert!((p.item() - 3.0).abs() < 1e-3, "{}", p.item());
        assert_eq!(p.item(), q);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Tensor::vector(vec![3.0, 4.0]), Tensor::vector(vec![12.0])];
        let before = clip_global_norm(&mut g, 1.0);
        assert_eq!(before, 13.0);
        let after: f64 = g.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
        assert!(after <= 1.0 + 1e-9);
    }

    #[test]
    fn config_bounds() {
        assert!(TrainConfig { lr: 0.5, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { patience: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn toy_gradcheck_passes() {
        let (model, set, x, y) = toy();
        let r = grad_check(&model, &set.params, &x, &y, 1e-5, 1e-4).unwrap();
        assert!(r.passed(), "{:?}", r.entries.iter().filter(|e| !e.passed).collect::<Vec<_>>());
    }

    #[test]
    fn corrupted_adjoint_flagged() {
        let (model, set, x, y) = toy();
        let (_, mut g) = model.loss_and_grad(&set.params, &x, &y).unwrap();
        let victim = 3;
        g[victim].data_mut()[0] += 0.5;
        let r = compare_gradients(&set.params, &g, |p| model.loss(p, &x, &y).unwrap(), 1e-5, 1e-4);
        assert_eq!(r.failures(), vec![r.entries[victim].name.as_str()]);
    }

    #[test]
    fn optimizer_state_round_trip() {
        let (model, set, x, y) = toy();
        let mut p = set.params.clone();
        let mut opt = OptimizerState::new(&p);
        let (_, g) = model.loss_and_grad(&p, &x, &y).unwrap();
        opt.update(&mut p, &g, 1e-3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("opt.ckpt");
        opt.save(&path, &p).unwrap();
        assert_eq!(OptimizerState::load(&path, &p).unwrap(), opt);
    }
}
