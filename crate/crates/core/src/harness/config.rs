//! Plain-text run configuration: `[section]` headers and `key = value` lines.
//!
//! ```text
//! [model]
//! preset = kd4          # optional starting point
//! n_d = 2
//! [data]
//! source = synthetic    # or a directory of .png / .ktns images
//! count = 200
//! [mask]
//! r = 4
//! [train]
//! epochs = 30
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::denoiser::BlockKind;
use crate::error::{config_err, Error, Result};
use crate::harness::dataset::DEFAULT_SPLIT;
use crate::harness::train::TrainConfig;
use crate::recon::{ArchConfig, DcConfig, LambdaMode};

const KEYS: &[(&str, &[&str])] = &[
    (
        "model",
        &["preset", "n_d", "kinds", "lambda", "token_size", "d_model", "axial_d_model", "n_layers", "n_heads", "ff_mult"],
    ),
    ("data", &["source", "count", "height", "width", "seed", "split"]),
    ("mask", &["r", "center_fraction", "seed", "per_image"]),
    ("train", &["epochs", "batch_size", "lr", "seed", "out"]),
];

fn check_key(section: &str, key: &str) -> Result<()> {
    match KEYS.iter().find(|(s, _)| *s == section) {
        None => Err(config_err!("unknown section [{section}]")),
        Some((_, keys)) if !keys.contains(&key) => Err(config_err!("unknown key {key:?} in [{section}]")),
        Some(_) => Ok(()),
    }
}

/// Unresolved `section.key -> value` entries.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawConfig {
    entries: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut raw = Self::default();
        let mut section: Option<String> = None;
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !KEYS.iter().any(|(s, _)| *s == name) {
                    return Err(config_err!("line {}: unknown section [{name}]", n + 1));
                }
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| config_err!("line {}: expected key = value", n + 1))?;
            let s = section.as_deref().ok_or_else(|| config_err!("line {}: key outside a section", n + 1))?;
            raw.set(&format!("{s}.{}", k.trim()), v.trim())
                .map_err(|e| config_err!("line {}: {e}", n + 1))?;
        }
        Ok(raw)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err!("cannot read config {}: {e}", path.display()))?;
        Self::parse(&text)
    }

    /// Sets `section.key`, rejecting unknown keys.
    pub fn set(&mut self, dotted: &str, value: &str) -> Result<()> {
        let (s, k) = dotted.split_once('.').ok_or_else(|| config_err!("expected section.key, got {dotted:?}"))?;
        check_key(s, k)?;
        self.entries.insert(dotted.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, dotted: &str) -> Option<&str> {
        self.entries.get(dotted).map(String::as_str)
    }

    fn parsed<T: FromStr>(&self, dotted: &str) -> Result<Option<T>> {
        self.get(dotted)
            .map(|v| v.parse::<T>().map_err(|_| config_err!("{dotted}: cannot parse {v:?}")))
            .transpose()
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        let height = self.parsed("data.height")?.unwrap_or(64);
        let width = self.parsed("data.width")?.unwrap_or(height);
        let mut model = match self.get("model.preset") {
            Some(p) => DcConfig::preset(p, height, width)?,
            None => DcConfig {
                n_d: 2,
                kinds: vec![BlockKind::Kaleidoscope],
                lambda_mode: LambdaMode::Learnable { init: 1.0 },
                arch: ArchConfig { token_size: 8, d_model: 64, axial_d_model: 64, n_layers: 1, n_heads: 8, ff_mult: 4 },
                height,
                width,
            },
        };
        if let Some(v) = self.parsed("model.n_d")? {
            model.n_d = v;
        }
        if let Some(v) = self.get("model.kinds") {
            model.kinds = v.split(',').map(BlockKind::parse).collect::<Result<_>>()?;
        }
        if let Some(v) = self.get("model.lambda") {
            model.lambda_mode = LambdaMode::parse(v)?;
        }
        let a = &mut model.arch;
        for (key, slot) in [
            ("model.token_size", &mut a.token_size),
            ("model.d_model", &mut a.d_model),
            ("model.axial_d_model", &mut a.axial_d_model),
            ("model.n_layers", &mut a.n_layers),
            ("model.n_heads", &mut a.n_heads),
            ("model.ff_mult", &mut a.ff_mult),
        ] {
            if let Some(v) = self.parsed(key)? {
                *slot = v;
            }
        }

        let mut train = TrainConfig::new(model);
        if let Some(v) = self.parsed("mask.r")? {
            train.reduction = v;
        }
        if let Some(v) = self.parsed("mask.center_fraction")? {
            train.center_fraction = v;
        }
        if let Some(v) = self.parsed("mask.seed")? {
            train.mask_seed = v;
        }
        if let Some(v) = self.parsed("mask.per_image")? {
            train.per_image_masks = v;
        }
        if let Some(v) = self.parsed("train.epochs")? {
            train.epochs = v;
        }
        if let Some(v) = self.parsed("train.batch_size")? {
            train.batch_size = v;
        }
        if let Some(v) = self.parsed("train.lr")? {
            train.learning_rate = v;
        }
        if let Some(v) = self.parsed("train.seed")? {
            train.seed = v;
        }
        train.validate()?;

        let data_seed = self.parsed("data.seed")?.unwrap_or(0);
        let source = match self.get("data.source").unwrap_or("synthetic") {
            "synthetic" => DataSource::Synthetic { count: self.parsed("data.count")?.unwrap_or(200), seed: data_seed },
            dir => DataSource::Directory(PathBuf::from(dir)),
        };
        let split = match self.get("data.split") {
            None => DEFAULT_SPLIT,
            Some(v) => {
                let parts: Vec<f64> = v
                    .split(',')
                    .map(|p| p.trim().parse().map_err(|_| config_err!("data.split: cannot parse {v:?}")))
                    .collect::<Result<_>>()?;
                <[f64; 3]>::try_from(parts).map_err(|_| config_err!("data.split needs three fractions"))?
            }
        };
        crate::harness::dataset::split_sizes(10, split)?;
        Ok(RunConfig { train, source, split, out: self.get("train.out").map(PathBuf::from) })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic { count: usize, seed: u64 },
    Directory(PathBuf),
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub source: DataSource,
    pub split: [f64; 3],
    /// Output directory; callers fall back to their own default when absent.
    pub out: Option<PathBuf>,
}

impl RunConfig {
    /// Fails early when the dataset directory is missing or `out` cannot be created.
    pub fn check_paths(&self, out: &Path) -> Result<()> {
        if let DataSource::Directory(d) = &self.source {
            crate::harness::dataset::list_dir(d)?;
        }
        std::fs::create_dir_all(out)
            .map_err(|e| Error::Config(format!("cannot create output directory {}: {e}", out.display())))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_comments() {
        let raw = RawConfig::parse(
            "# run\n[model]\nkinds = kd,patch  # cycle\nd_model = 32\n[mask]\nr = 6\n[train]\nepochs = 3\nout = /tmp/x\n",
        )
        .unwrap();
        let run = raw.resolve().unwrap();
        assert_eq!(run.train.model.kinds, vec![BlockKind::Kaleidoscope, BlockKind::Patch]);
        assert_eq!(run.train.model.arch.d_model, 32);
        assert_eq!(run.train.reduction, 6.0);
        assert_eq!(run.train.epochs, 3);
        assert_eq!(run.out, Some(PathBuf::from("/tmp/x")));
        assert_eq!(run.source, DataSource::Synthetic { count: 200, seed: 0 });
        assert_eq!(run.split, DEFAULT_SPLIT);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RawConfig::parse("[model]\nwidth = 3\n").is_err());
        assert!(RawConfig::parse("[extra]\n").is_err());
        assert!(RawConfig::parse("n_d = 2\n").is_err());
        assert!(RawConfig::default().set("train.momentum", "0.9").is_err());
    }

    #[test]
    fn overrides_and_bad_values() {
        let mut raw = RawConfig::parse("[train]\nepochs = 3\n").unwrap();
        raw.set("train.epochs", "0").unwrap();
        assert_eq!(raw.resolve().unwrap().train.epochs, 0);
        raw.set("train.lr", "fast").unwrap();
        assert!(raw.resolve().is_err());
        let raw = RawConfig::parse("[data]\nsplit = 0.5,0.5,0.5\n").unwrap();
        assert!(raw.resolve().is_err());
        let raw = RawConfig::parse("[mask]\nr = 0.5\n").unwrap();
        assert!(raw.resolve().is_err());
    }

    #[test]
    fn missing_dataset_dir_detected() {
        let raw = RawConfig::parse("[data]\nsource = /definitely/not/here\n").unwrap();
        let run = raw.resolve().unwrap();
        let out = tempfile::tempdir().unwrap();
        assert!(run.check_paths(out.path()).is_err());
    }
}
