//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use afgm_core::afgssm::Spectral;
use afgm_core::data_io::SplitScheme;
use afgm_core::model::{apply_variant, Case, CoreKind, EncoderKind, ModelConfig, OmegaMode};
use afgm_core::trainer::TrainConfig;
use afgm_core::{Error, Result};

/// Every accepted key with its default, in the order written to `resolved.cfg`.
const KEYS: &[(&str, &str)] = &[
    ("name", "run"),
    ("data", "synthetic"),
    ("split", "auto"),
    ("synthetic_rows", "17420"),
    ("synthetic_seed", "7"),
    ("input_len", "96"),
    ("horizon", "96"),
    ("hidden", "16"),
    ("freq_dim", "16"),
    ("blocks", "1"),
    ("patch_lengths", "48/24"),
    ("conv_kernel", "3"),
    ("adapter_hidden", "auto"),
    ("case", "none"),
    ("encoder", "interactive"),
    ("core", "afgssm"),
    ("spectral", "amp_only"),
    ("omega_mode", "dynamic"),
    ("lr", "0.0001"),
    ("batch_size", "24"),
    ("max_epochs", "10"),
    ("patience", "5"),
    ("seed", "1"),
    ("grad_clip", "1"),
];

/// Short names from the hyperparameter grid.
fn alias(key: &str) -> &[&'static str] {
    match key {
        "F_n" => &["blocks"],
        "S" | "V" => &["hidden", "freq_dim"],
        "T" => &["input_len"],
        "H" => &["horizon"],
        "P" => &["patch_lengths"],
        _ => &[],
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = RunConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected key = value", path.display(), i + 1))
            })?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let targets: Vec<&str> = match alias(key) {
            [] => vec![key],
            many => many.to_vec(),
        };
        for k in targets {
            match self.values.get_mut(k) {
                Some(slot) => *slot = value.to_string(),
                None => return Err(Error::Config(format!("unknown config key {key:?}"))),
            }
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {pair:?}")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn get(&self, key: &str) -> &str {
        &self.values[key]
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Config(format!("{key} = {:?} is not valid", self.get(key))))
    }

    pub fn name(&self) -> &str {
        self.get("name")
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse("seed")
    }

    pub fn data(&self) -> DataSource {
        match self.get("data") {
            "synthetic" => DataSource::Synthetic,
            path => DataSource::File(PathBuf::from(path)),
        }
    }

    pub fn synthetic(&self) -> Result<(usize, u64)> {
        Ok((self.parse("synthetic_rows")?, self.parse("synthetic_seed")?))
    }

    /// `None` means pick by file name and length.
    pub fn split_scheme(&self) -> Result<Option<SplitScheme>> {
        match self.get("split") {
            "auto" => Ok(None),
            s => s.parse().map(Some),
        }
    }

    /// Model configuration for a dataset with `n_vars` columns.
    pub fn model(&self, n_vars: usize) -> Result<ModelConfig> {
        let patch_lengths = self
            .get("patch_lengths")
            .split(|c: char| c == '/' || c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::Config(format!("bad patch length {s:?}")))
            })
            .collect::<Result<Vec<usize>>>()?;
        let adapter_hidden = match self.get("adapter_hidden") {
            "auto" => None,
            _ => Some(self.parse("adapter_hidden")?),
        };
        let base = ModelConfig {
            input_len: self.parse("input_len")?,
            horizon: self.parse("horizon")?,
            n_vars,
            hidden: self.parse("hidden")?,
            freq_dim: self.parse("freq_dim")?,
            blocks: self.parse("blocks")?,
            patch_lengths,
            conv_kernel: self.parse("conv_kernel")?,
            adapter_hidden,
            encoder: match self.get("encoder") {
                "interactive" => EncoderKind::Interactive,
                "linear" => EncoderKind::Linear,
                o => return Err(Error::Config(format!("encoder = {o:?}; use interactive or linear"))),
            },
            core: match self.get("core") {
                "afgssm" => CoreKind::Afgssm,
                "plain_ssm" => CoreKind::PlainSsm,
                o => return Err(Error::Config(format!("core = {o:?}; use afgssm or plain_ssm"))),
            },
            spectral: match self.get("spectral") {
                "amp_only" => Spectral::AmpOnly,
                "amp_phase" => Spectral::AmpPhase,
                "phase_only" => Spectral::PhaseOnly,
                o => {
                    return Err(Error::Config(format!(
                        "spectral = {o:?}; use amp_only, amp_phase or phase_only"
                    )))
                }
            },
            omega_mode: match self.get("omega_mode") {
                "dynamic" => OmegaMode::Dynamic,
                "fixed" => OmegaMode::Fixed,
                o => return Err(Error::Config(format!("omega_mode = {o:?}; use dynamic or fixed"))),
            },
        };
        let cfg = match self.get("case") {
            "none" => base,
            c => apply_variant(&base, c.parse::<Case>()?)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            lr: self.parse("lr")?,
            batch_size: self.parse("batch_size")?,
            max_epochs: self.parse("max_epochs")?,
            patience: self.parse("patience")?,
            seed: self.seed()?,
            grad_clip: self.parse("grad_clip")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, _) in KEYS {
            let _ = writeln!(out, "{k} = {}", self.values[*k]);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic,
    File(PathBuf),
}

/// Expands `key=v1,v2` grid specs into one config per combination, in
/// row-major order over the specs as given.
pub fn expand_grid(base: &RunConfig, grid: &[String]) -> Result<Vec<(RunConfig, String)>> {
    let mut runs = vec![(base.clone(), String::new())];
    for spec in grid {
        let (k, vs) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("grid spec {spec:?} must be key=v1,v2,...")))?;
        let values: Vec<&str> = vs.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(Error::Config(format!("grid spec {spec:?} has no values")));
        }
        let mut next = Vec::new();
        for (cfg, tag) in &runs {
            for v in &values {
                let mut c = cfg.clone();
                c.set(k.trim(), v)?;
                let label = format!("{}{}{}", k.trim(), v.replace('/', "x"), if tag.is_empty() { "" } else { "-" });
                next.push((c, format!("{label}{tag}")));
            }
        }
        runs = next;
    }
    Ok(runs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_rejected() {
        let mut c = RunConfig::default();
        assert!(c.set("hiden", "3").is_err());
        c.set("F_n", "2").unwrap();
        assert_eq!(c.get("blocks"), "2");
        c.set("S", "8").unwrap();
        assert_eq!((c.get("hidden"), c.get("freq_dim")), ("8", "8"));
    }

    #[test]
    fn render_round_trips() {
        let mut c = RunConfig::default();
        c.set("lr", "0.001").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.cfg");
        std::fs::write(&p, c.render()).unwrap();
        assert_eq!(RunConfig::load(&p).unwrap(), c);
    }

    #[test]
    fn grid_expansion() {
        let runs = expand_grid(&RunConfig::default(), &["F_n=1,2,3".into(), "lr=0.001,0.01".into()]).unwrap();
        assert_eq!(runs.len(), 6);
        assert_eq!(runs[5].0.get("blocks"), "3");
        assert_eq!(runs[5].0.get("lr"), "0.01");
    }

    #[test]
    fn defaults_build() {
        let c = RunConfig::default();
        assert_eq!(c.model(7).unwrap().patch_lengths, vec![48, 24]);
        c.train().unwrap();
    }
}
