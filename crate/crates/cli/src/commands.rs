use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use afgm_core::afgssm::{scan_channel_traced, write_step_grid_csv};
use afgm_core::bench_harness::time_scan;
use afgm_core::data_io::{load_csv, split, synthetic_ett, write_csv, write_predictions, Dataset, SplitName, SplitScheme};
use afgm_core::model::{BlockParams, Model, ModelConfig, ParamSet};
use afgm_core::numerics::Tensor;
use afgm_core::oracles::{linear_fit, median};
use afgm_core::trainer::{evaluate, grad_check, train, EpochRecord, TrainData};
use afgm_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{expand_grid, DataSource, RunConfig};

pub const RUNS_ENV: &str = "AFGM_RUNS_DIR";

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.display().to_string(),
        source: e,
    }
}

pub fn runs_root(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(RUNS_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Creates a fresh directory `{root}/{stem}-s{seed}-{timestamp}[-n]`; never reuses one.
pub fn create_run_dir(root: &Path, stem: &str, seed: u64) -> Result<PathBuf> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    let base = format!("{stem}-s{seed}-{}", chrono::Local::now().format("%Y%m%d-%H%M%S"));
    for n in 0.. {
        let name = if n == 0 { base.clone() } else { format!("{base}-{n}") };
        let path = root.join(name);
        match fs::create_dir(&path) {
            Ok(()) => return Ok(path),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(io_err(&path)(e)),
        }
    }
    unreachable!()
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(io_err(path))
}

pub struct Prepared {
    pub dataset: Dataset,
    pub scheme: SplitScheme,
    pub label: String,
    pub model: Model,
    pub data: TrainData,
}

pub fn load_dataset(cfg: &RunConfig) -> Result<(Dataset, String)> {
    match cfg.data() {
        DataSource::Synthetic => {
            let (rows, seed) = cfg.synthetic()?;
            Ok((
                synthetic_ett(rows, seed),
                format!("synthetic ETT-like surrogate ({rows} rows, seed {seed})"),
            ))
        }
        DataSource::File(p) => {
            if !p.is_file() {
                return Err(Error::Config(format!("data file {} not found", p.display())));
            }
            Ok((load_csv(&p)?, p.display().to_string()))
        }
    }
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let (dataset, label) = load_dataset(cfg)?;
    let model_cfg = cfg.model(dataset.vars())?;
    let scheme = match cfg.split_scheme()? {
        Some(s) => s,
        None => {
            let ett_name = match cfg.data() {
                DataSource::Synthetic => true,
                DataSource::File(p) => p
                    .file_name()
                    .map(|n| n.to_string_lossy().starts_with("ETTh"))
                    .unwrap_or(false),
            };
            if ett_name && dataset.rows() >= 14400 {
                SplitScheme::EttStandard
            } else {
                SplitScheme::Ratio
            }
        }
    };
    let splits = split(dataset.rows(), scheme, model_cfg.input_len, model_cfg.horizon)?;
    let data = TrainData::new(&dataset, &splits, model_cfg.input_len, model_cfg.horizon)?;
    Ok(Prepared {
        dataset,
        scheme,
        label,
        model: Model::new(model_cfg)?,
        data,
    })
}

fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_mse,val_mse,seconds\n");
    for r in history {
        s.push_str(&format!("{},{},{},{:.3}\n", r.epoch, r.train_mse, r.val_mse, r.seconds));
    }
    s
}

fn append_metrics(dir: &Path, split: &str, checkpoint: &str, mse: f64, mae: f64, windows: usize) -> Result<()> {
    let path = dir.join("metrics.csv");
    let fresh = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(io_err(&path))?;
    if fresh {
        writeln!(f, "split,checkpoint,mse,mae,windows").map_err(io_err(&path))?;
    }
    writeln!(f, "{split},{checkpoint},{mse},{mae},{windows}").map_err(io_err(&path))
}

pub struct RunSummary {
    pub dir: PathBuf,
    pub test_mse: f64,
    pub test_mae: f64,
    pub val_mse: f64,
    pub epochs: usize,
}

/// Trains one configuration into `dir` (which must already exist).
pub fn run_training(cfg: &RunConfig, dir: &Path) -> Result<RunSummary> {
    write_file(&dir.join("resolved.cfg"), &cfg.render())?;
    let tc = cfg.train()?;
    let p = prepare(cfg)?;
    log::info!(
        "training on {} ({:?} split, {} train / {} val / {} test windows) into {}",
        p.label,
        p.scheme,
        p.data.train.len(),
        p.data.val.len(),
        p.data.test.len(),
        dir.display()
    );
    let init = p
        .model
        .init_params(tc.seed, Some((p.data.mean.clone(), p.data.std.clone())));
    let mut history = Vec::new();
    let outcome = train(&p.model, init, &p.data, &tc, |rec, current, best| {
        history.push(rec.clone());
        write_file(&dir.join("history.csv"), &history_csv(&history))?;
        current.save(&dir.join("last.ckpt"))?;
        if best {
            current.save(&dir.join("best.ckpt"))?;
        }
        Ok(())
    })?;
    outcome
        .optimizer
        .save(&dir.join("optimizer.ckpt"), &outcome.best.params)?;
    let (val_mse, val_mae) = evaluate(&p.model, &outcome.best, &p.data.val)?;
    let (test_mse, test_mae) = evaluate(&p.model, &outcome.best, &p.data.test)?;
    append_metrics(dir, "val", "best.ckpt", val_mse, val_mae, p.data.val.len())?;
    append_metrics(dir, "test", "best.ckpt", test_mse, test_mae, p.data.test.len())?;
    Ok(RunSummary {
        dir: dir.to_path_buf(),
        test_mse,
        test_mae,
        val_mse,
        epochs: outcome.history.len(),
    })
}

pub fn cmd_train(cfg: RunConfig, grid: &[String], root: &Path) -> Result<()> {
    for (run_cfg, tag) in expand_grid(&cfg, grid)? {
        let stem = if tag.is_empty() {
            run_cfg.name().to_string()
        } else {
            format!("{}-{tag}", run_cfg.name())
        };
        // validate before creating anything on disk
        run_cfg.train()?;
        run_cfg.model(1)?;
        let dir = create_run_dir(root, &stem, run_cfg.seed()?)?;
        let s = run_training(&run_cfg, &dir)?;
        println!(
            "{}: test mse {:.6} mae {:.6} (best val {:.6}, {} epochs)",
            s.dir.display(),
            s.test_mse,
            s.test_mae,
            s.val_mse,
            s.epochs
        );
    }
    Ok(())
}

struct Loaded {
    prepared: Prepared,
    set: ParamSet,
    checkpoint: PathBuf,
}

fn load_run(run: &Path, checkpoint: Option<PathBuf>) -> Result<Loaded> {
    let cfg = RunConfig::load(&run.join("resolved.cfg"))?;
    let prepared = prepare(&cfg)?;
    let checkpoint = checkpoint.unwrap_or_else(|| run.join("best.ckpt"));
    if !checkpoint.is_file() {
        return Err(Error::Config(format!("checkpoint {} not found", checkpoint.display())));
    }
    let set = ParamSet::load(&checkpoint, &prepared.model)?;
    Ok(Loaded {
        prepared,
        set,
        checkpoint,
    })
}

pub fn cmd_eval(run: &Path, checkpoint: Option<PathBuf>, which: SplitName) -> Result<()> {
    let l = load_run(run, checkpoint)?;
    let windows = l.prepared.data.split(which);
    let (mse, mae) = evaluate(&l.prepared.model, &l.set, windows)?;
    let name = format!("{which:?}").to_lowercase();
    append_metrics(run, &name, &l.checkpoint.display().to_string(), mse, mae, windows.len())?;
    println!("{name}: mse {mse:.6} mae {mae:.6} over {} windows", windows.len());
    Ok(())
}

pub fn cmd_predict(run: &Path, checkpoint: Option<PathBuf>, which: SplitName, limit: Option<usize>, out: Option<PathBuf>) -> Result<()> {
    let l = load_run(run, checkpoint)?;
    let windows = l.prepared.data.split(which);
    let n = limit.unwrap_or(windows.len()).min(windows.len());
    let model = &l.prepared.model;
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let w = windows.get(i);
        let pred = model.denormalize(&l.set, &model.forward_normalized(&l.set, &w.input)?)?;
        let target = model.denormalize(&l.set, &w.target)?;
        rows.push((w.origin, pred, target));
    }
    let path = out.unwrap_or_else(|| run.join("predictions.csv"));
    write_predictions(&path, &l.prepared.dataset.names, rows.iter().map(|(o, p, t)| (*o, p, t)))?;
    println!("wrote {} windows to {}", n, path.display());
    Ok(())
}

pub fn toy_config() -> RunConfig {
    let mut c = RunConfig::default();
    for (k, v) in [("input_len", "24"), ("horizon", "6"), ("hidden", "4"), ("freq_dim", "4"), ("patch_lengths", "12")] {
        c.set(k, v).expect("known key");
    }
    c
}

pub fn cmd_gradcheck(cfg: RunConfig, n_vars: usize, h: f64, tol: f64) -> Result<bool> {
    let model_cfg: ModelConfig = cfg.model(n_vars)?;
    let seed = cfg.seed()?;
    let model = Model::new(model_cfg.clone())?;
    let set = model.init_params(seed, None);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::from_fn(&[model_cfg.input_len, n_vars], |_| rng.random_range(-1.0..1.0));
    let y = Tensor::from_fn(&[model_cfg.horizon, n_vars], |_| rng.random_range(-1.0..1.0));
    let report = grad_check(&model, &set.params, &x, &y, h, tol)?;
    for e in &report.entries {
        println!(
            "{} {:<32} rel {:.3e} max_abs {:.3e} ({} values)",
            if e.passed { "PASS" } else { "FAIL" },
            e.name,
            e.rel_err,
            e.max_abs_err,
            e.numel
        );
    }
    let ok = report.passed();
    println!("{} worst relative error {:.3e} (tol {tol:.1e}, h {h:.1e})", if ok { "PASS" } else { "FAIL" }, report.worst());
    Ok(ok)
}

pub fn cmd_bench(ms: &[usize], ss: &[usize], vs: &[usize], reps: usize, seed: u64, out: Option<PathBuf>) -> Result<()> {
    let mut body = String::from("M,S,V,median_seconds\n");
    let mut per_sv: Vec<(usize, usize, Vec<(f64, f64)>)> = Vec::new();
    for &s in ss {
        for &v in vs {
            let mut pts = Vec::new();
            for &m in ms {
                let med = median(&time_scan(m, s, v, reps, seed)?);
                body.push_str(&format!("{m},{s},{v},{med:.9}\n"));
                pts.push((m as f64, med));
            }
            per_sv.push((s, v, pts));
        }
    }
    match out {
        Some(p) => write_file(&p, &body)?,
        None => print!("{body}"),
    }
    for (s, v, pts) in per_sv {
        if pts.len() >= 2 {
            let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
            let fit = linear_fit(&x, &y);
            eprintln!("S={s} V={v}: {:.3e} s per patch, R^2 {:.4}", fit.slope, fit.r2);
        }
    }
    Ok(())
}

pub struct AblationRow {
    pub label: String,
    pub summary: RunSummary,
}

pub fn cmd_ablate(cfg: RunConfig, cases: &[String], variants: &[String], root: &Path) -> Result<Vec<AblationRow>> {
    let mut plan: Vec<(String, RunConfig)> = Vec::new();
    for case in cases {
        let mut c = cfg.clone();
        c.set("case", case)?;
        // n_vars is only known after loading data; any count validates the rest
        c.model(1)?;
        plan.push((case.clone(), c));
    }
    for variant in variants {
        let mut c = cfg.clone();
        c.set("case", "none")?;
        match variant.as_str() {
            "amp_phase" | "phase_only" | "amp_only" => c.set("spectral", variant)?,
            "fixed_omega" => c.set("omega_mode", "fixed")?,
            other => {
                return Err(Error::Config(format!(
                    "unknown variant {other:?}; use amp_only, amp_phase, phase_only or fixed_omega"
                )))
            }
        }
        plan.push((variant.clone(), c));
    }
    if plan.is_empty() {
        return Err(Error::Config("nothing to run: give --cases and/or --variants".into()));
    }
    let parent = create_run_dir(root, &format!("{}-ablate", cfg.name()), cfg.seed()?)?;
    write_file(&parent.join("resolved.cfg"), &cfg.render())?;
    let mut rows = Vec::new();
    for (label, c) in plan {
        let dir = parent.join(format!("case-{label}"));
        fs::create_dir(&dir).map_err(io_err(&dir))?;
        let summary = run_training(&c, &dir)?;
        println!("{label}: test mse {:.6} mae {:.6}", summary.test_mse, summary.test_mae);
        rows.push(AblationRow { label, summary });
    }
    let mut body = String::from("case,mse,mae,val_mse,epochs\n");
    for r in &rows {
        body.push_str(&format!(
            "{},{},{},{},{}\n",
            r.label, r.summary.test_mse, r.summary.test_mae, r.summary.val_mse, r.summary.epochs
        ));
    }
    write_file(&parent.join("summary.csv"), &body)?;
    println!("summary: {}", parent.join("summary.csv").display());
    Ok(rows)
}

pub struct InspectArgs {
    pub run: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub split: SplitName,
    pub window: usize,
    pub channel: usize,
    pub block: usize,
    pub out: Option<PathBuf>,
}

pub fn cmd_inspect_freq(a: InspectArgs) -> Result<()> {
    let l = load_run(&a.run, a.checkpoint)?;
    let windows = l.prepared.data.split(a.split);
    if a.window >= windows.len() {
        return Err(Error::Config(format!("window {} out of {} windows", a.window, windows.len())));
    }
    let w = windows.get(a.window);
    let inputs = l.prepared.model.block_inputs(&l.set, &w.input, a.channel)?;
    let (u, block) = match (inputs.get(a.block), l.set.params.blocks.get(a.block)) {
        (Some(u), Some(BlockParams::Afgssm(p))) => (u, p),
        (Some(_), Some(BlockParams::Plain(_))) => {
            return Err(Error::Config("inspect-freq needs the afgssm core".into()))
        }
        _ => return Err(Error::Config(format!("no block {}", a.block))),
    };
    let trace = scan_channel_traced(u, block)?;
    let out = a.out.unwrap_or_else(|| a.run.clone());
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let dump = |name: &str, steps: &[Tensor]| -> Result<()> {
        let path = out.join(name);
        let mut f = std::io::BufWriter::new(File::create(&path).map_err(io_err(&path))?);
        write_step_grid_csv(&mut f, steps).map_err(io_err(&path))?;
        f.flush().map_err(io_err(&path))
    };
    dump("freq_transition.csv", &trace.a)?;
    dump("freq_amplitude.csv", &trace.e_amp)?;
    let v = trace.omega.numel();
    let mut body = String::from("k,omega_base,delta_omega,omega\n");
    for k in 0..v {
        let base = 2.0 * std::f64::consts::PI * k as f64 / v as f64;
        let om = trace.omega.data()[k];
        body.push_str(&format!("{k},{base},{},{om}\n", om - base));
    }
    write_file(&out.join("freq_omega.csv"), &body)?;
    println!(
        "wrote freq_transition.csv, freq_amplitude.csv ({} steps), freq_omega.csv to {}",
        trace.a.len(),
        out.display()
    );
    Ok(())
}

pub fn cmd_synth(rows: usize, seed: u64, out: &Path) -> Result<()> {
    let ds = synthetic_ett(rows, seed);
    write_csv(&ds, out)?;
    println!("wrote {rows} rows of the synthetic ETT-like surrogate to {}", out.display());
    Ok(())
}
