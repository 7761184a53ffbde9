//! CSV ingestion, chronological splits, standardization, sliding windows and metrics.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Rows of the 12/4/4-month hourly ETT split.
pub const ETT_TRAIN_ROWS: usize = 12 * 30 * 24;
pub const ETT_VAL_ROWS: usize = 4 * 30 * 24;
pub const ETT_TEST_ROWS: usize = 4 * 30 * 24;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub timestamps: Vec<String>,
    /// `[N, D]`, raw values.
    pub values: Tensor,
    pub names: Vec<String>,
}

impl Dataset {
    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn vars(&self) -> usize {
        self.values.shape()[1]
    }

    /// Per-variable population mean and standard deviation over `rows`.
    pub fn stats(&self, rows: Range<usize>) -> Result<(Tensor, Tensor)> {
        let d = self.vars();
        if rows.is_empty() || rows.end > self.rows() {
            return Err(Error::Config(format!(
                "statistics range {rows:?} invalid for {} rows",
                self.rows()
            )));
        }
        let n = rows.len() as f64;
        let data = self.values.data();
        let mut mean = vec![0.0; d];
        for r in rows.clone() {
            for (c, m) in mean.iter_mut().enumerate() {
                *m += data[r * d + c];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in rows {
            for c in 0..d {
                let e = data[r * d + c] - mean[c];
                var[c] += e * e;
            }
        }
        let mut std = Vec::with_capacity(d);
        for (c, v) in var.into_iter().enumerate() {
            let s = (v / n).sqrt();
            if !(s > 1e-12) {
                return Err(Error::Config(format!(
                    "column {:?} is constant over the training split",
                    self.names[c]
                )));
            }
            std.push(s);
        }
        Ok((Tensor::vector(mean), Tensor::vector(std)))
    }

    /// A standardized copy; the stored raw values are untouched.
    pub fn standardized(&self, mean: &Tensor, std: &Tensor) -> Result<Tensor> {
        let centered = crate::numerics::tensor::sub(&self.values, mean)?;
        crate::numerics::tensor::zip_broadcast(&centered, std, |a, s| a / s)
    }
}

/// Reads a header-first CSV whose first column is a timestamp and the rest numeric.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let where_ = path.display();
    let header = reader
        .headers()
        .map_err(|e| Error::Ingest(format!("{where_}: cannot read header: {e}")))?
        .clone();
    if header.len() < 2 {
        return Err(Error::Ingest(format!(
            "{where_}: need a timestamp column and at least one variable"
        )));
    }
    let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let d = names.len();
    let mut timestamps = Vec::new();
    let mut data = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        // data rows are numbered from 1, the header is row 0
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Ingest(format!("{where_}: row {row}: {e}")))?;
        if rec.len() != d + 1 {
            return Err(Error::Ingest(format!(
                "{where_}: row {row} has {} fields, header has {}",
                rec.len(),
                d + 1
            )));
        }
        timestamps.push(rec[0].to_string());
        for (c, cell) in rec.iter().skip(1).enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                Error::Ingest(format!(
                    "{where_}: row {row}, column {} ({:?}): not a number: {cell:?}",
                    c + 2,
                    names[c]
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Ingest(format!(
                    "{where_}: row {row}, column {} ({:?}): non-finite value",
                    c + 2,
                    names[c]
                )));
            }
            data.push(v);
        }
    }
    if timestamps.is_empty() {
        return Err(Error::Ingest(format!("{where_}: no data rows")));
    }
    let values = Tensor::new(vec![timestamps.len(), d], data)?;
    Ok(Dataset {
        timestamps,
        values,
        names,
    })
}

pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    write!(w, "date").map_err(io)?;
    for n in &ds.names {
        write!(w, ",{n}").map_err(io)?;
    }
    writeln!(w).map_err(io)?;
    let d = ds.vars();
    for (r, ts) in ds.timestamps.iter().enumerate() {
        write!(w, "{ts}").map_err(io)?;
        for v in &ds.values.data()[r * d..(r + 1) * d] {
            write!(w, ",{v}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitScheme {
    /// 8640 / 2880 / 2880 hourly rows.
    EttStandard,
    /// 0.7 / 0.1 / 0.2 of the rows.
    Ratio,
}

impl std::str::FromStr for SplitScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ett_standard" => Ok(SplitScheme::EttStandard),
            "ratio" => Ok(SplitScheme::Ratio),
            other => Err(Error::Config(format!("unknown split scheme {other:?}"))),
        }
    }
}

/// Row ranges for each split. `val` and `test` start `T` rows early so their
/// first window's input reaches back into the previous split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

impl Splits {
    pub fn get(&self, which: SplitName) -> Range<usize> {
        match which {
            SplitName::Train => self.train.clone(),
            SplitName::Val => self.val.clone(),
            SplitName::Test => self.test.clone(),
        }
    }
}

pub fn split(n_rows: usize, scheme: SplitScheme, input_len: usize, horizon: usize) -> Result<Splits> {
    let (train_end, val_end, test_end) = match scheme {
        SplitScheme::EttStandard => {
            let end = ETT_TRAIN_ROWS + ETT_VAL_ROWS + ETT_TEST_ROWS;
            if n_rows < end {
                return Err(Error::Config(format!(
                    "ett_standard split needs {end} rows, dataset has {n_rows}"
                )));
            }
            (ETT_TRAIN_ROWS, ETT_TRAIN_ROWS + ETT_VAL_ROWS, end)
        }
        SplitScheme::Ratio => {
            // integer arithmetic keeps 0.7 * 100 at exactly 70
            let train = n_rows * 7 / 10;
            let test = n_rows * 2 / 10;
            (train, n_rows - test, n_rows)
        }
    };
    let need = input_len + horizon;
    let splits = Splits {
        train: 0..train_end,
        val: train_end.saturating_sub(input_len)..val_end,
        test: val_end.saturating_sub(input_len)..test_end,
    };
    for (name, r) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        if r.len() < need {
            return Err(Error::Config(format!(
                "{name} split has {} rows, needs at least input_len + horizon = {need} ({n_rows} rows total)",
                r.len()
            )));
        }
    }
    Ok(splits)
}

/// One `(input, target)` pair on the standardized scale.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesWindow {
    pub input: Tensor,
    pub target: Tensor,
    /// Dataset row of the first input step.
    pub origin: usize,
}

/// Stride-1 windows over one row range of a standardized matrix.
#[derive(Clone, Debug)]
pub struct WindowSet {
    data: Arc<Tensor>,
    rows: Range<usize>,
    input_len: usize,
    horizon: usize,
}

impl WindowSet {
    pub fn new(data: Arc<Tensor>, rows: Range<usize>, input_len: usize, horizon: usize) -> Result<Self> {
        if rows.end > data.shape()[0] {
            return Err(Error::Config(format!(
                "window range {rows:?} exceeds {} rows",
                data.shape()[0]
            )));
        }
        if rows.len() < input_len + horizon {
            return Err(Error::Config(format!(
                "range of {} rows cannot hold input_len {input_len} + horizon {horizon}",
                rows.len()
            )));
        }
        Ok(WindowSet {
            data,
            rows,
            input_len,
            horizon,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len() - self.input_len - self.horizon + 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows(&self) -> Range<usize> {
        self.rows.clone()
    }

    pub fn get(&self, i: usize) -> SeriesWindow {
        assert!(i < self.len(), "window {i} out of {}", self.len());
        let d = self.data.shape()[1];
        let origin = self.rows.start + i;
        let slice = |from: usize, n: usize| {
            Tensor::new(vec![n, d], self.data.data()[from * d..(from + n) * d].to_vec())
                .expect("slice within bounds")
        };
        SeriesWindow {
            input: slice(origin, self.input_len),
            target: slice(origin + self.input_len, self.horizon),
            origin,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = SeriesWindow> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }
}

/// Standardizes with training statistics and returns the windows of one split.
pub fn windows(
    ds: &Dataset,
    splits: &Splits,
    which: SplitName,
    input_len: usize,
    horizon: usize,
) -> Result<WindowSet> {
    let (mean, std) = ds.stats(splits.train.clone())?;
    let data = Arc::new(ds.standardized(&mean, &std)?);
    WindowSet::new(data, splits.get(which), input_len, horizon)
}

/// `(MSE, MAE)` over every entry of every pair.
pub fn metrics(preds: &[Tensor], targets: &[Tensor]) -> Result<(f64, f64)> {
    if preds.len() != targets.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let mut acc = MetricAccumulator::default();
    for (p, t) in preds.iter().zip(targets) {
        acc.add(p, t)?;
    }
    acc.finish()
}

/// Running sums for [`metrics`] without holding every prediction.
#[derive(Clone, Debug, Default)]
pub struct MetricAccumulator {
    sq: f64,
    abs: f64,
    n: usize,
}

impl MetricAccumulator {
    pub fn add(&mut self, pred: &Tensor, target: &Tensor) -> Result<()> {
        if pred.shape() != target.shape() {
            return Err(Error::Dimension(format!(
                "prediction {:?} and target {:?} differ",
                pred.shape(),
                target.shape()
            )));
        }
        for (p, t) in pred.data().iter().zip(target.data()) {
            let e = p - t;
            self.sq += e * e;
            self.abs += e.abs();
        }
        self.n += pred.numel();
        Ok(())
    }

    pub fn finish(&self) -> Result<(f64, f64)> {
        if self.n == 0 {
            return Err(Error::Config("metrics over zero entries".into()));
        }
        Ok((self.sq / self.n as f64, self.abs / self.n as f64))
    }
}

/// Writes `window_origin, step, variable, prediction, target` rows.
pub fn write_predictions<'a>(
    path: &Path,
    names: &[String],
    rows: impl IntoIterator<Item = (usize, &'a Tensor, &'a Tensor)>,
) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(w, "window_origin,step,variable,prediction,target").map_err(io)?;
    for (origin, pred, target) in rows {
        let [h, d] = pred.shape()[..] else {
            return Err(Error::Dimension(format!("prediction shape {:?}", pred.shape())));
        };
        for step in 0..h {
            for (c, name) in names.iter().enumerate().take(d) {
                writeln!(
                    w,
                    "{origin},{},{name},{:.17e},{:.17e}",
                    step + 1,
                    pred.at2(step, c),
                    target.at2(step, c)
                )
                .map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

/// Column names of the ETT hourly files.
pub const ETT_COLUMNS: [&str; 7] = ["HUFL", "HULL", "MUFL", "MULL", "LUFL", "LULL", "OT"];

/// Seeded ETT-like surrogate: six load series with daily and weekly cycles,
/// slowly drifting levels and AR(1) noise, plus an oil-temperature column
/// driven by a yearly cycle and the lagged load. Hourly timestamps from
/// 2016-07-01.
pub fn synthetic_ett(n_rows: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = move || -> f64 { StandardNormal.sample(&mut rng) };
    let d = ETT_COLUMNS.len();
    // per-load (level, daily amp, daily phase, weekly amp, noise)
    let loads = [
        (7.0, 2.5, 0.3, 0.8, 0.35),
        (2.0, 0.8, 0.9, 0.3, 0.20),
        (4.5, 2.0, 0.4, 0.7, 0.30),
        (1.0, 0.6, 1.1, 0.2, 0.18),
        (3.0, 1.0, 0.1, 0.4, 0.15),
        (1.0, 0.3, 0.6, 0.1, 0.08),
    ];
    let mut ar = [0.0; 7];
    let mut drift = [0.0; 6];
    let mut load_mean_lag = 0.0;
    let mut values = Vec::with_capacity(n_rows * d);
    let start = chrono::NaiveDate::from_ymd_opt(2016, 7, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid date");
    let mut timestamps = Vec::with_capacity(n_rows);
    for t in 0..n_rows {
        let tf = t as f64;
        let day = 2.0 * PI * tf / 24.0;
        let week = 2.0 * PI * tf / 168.0;
        let mut load_sum = 0.0;
        for (k, &(level, amp, phase, wamp, noise)) in loads.iter().enumerate() {
            drift[k] = 0.999 * drift[k] + 0.02 * normal();
            ar[k] = 0.8 * ar[k] + noise * normal();
            let v = level
                + amp * (day + phase).sin()
                + 0.4 * amp * (2.0 * day + phase).cos()
                + wamp * week.sin()
                + drift[k]
                + ar[k];
            load_sum += v;
            values.push(v);
        }
        ar[6] = 0.95 * ar[6] + 0.25 * normal();
        let year = 2.0 * PI * tf / 8766.0;
        load_mean_lag = 0.97 * load_mean_lag + 0.03 * (load_sum / 6.0);
        let ot = 15.0 + 8.0 * year.cos() + 1.5 * (day - 0.8).sin() + 0.6 * load_mean_lag + ar[6];
        values.push(ot);
        let ts = start + chrono::Duration::hours(t as i64);
        timestamps.push(ts.format("%Y-%m-%d %H:%M:%S").to_string());
    }
    Dataset {
        timestamps,
        values: Tensor::new(vec![n_rows, d], values).expect("row-major fill"),
        names: ETT_COLUMNS.iter().map(|s| s.to_string()).collect(),
    }
}
