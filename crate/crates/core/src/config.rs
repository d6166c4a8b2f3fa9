//! Flat `key = value` run configuration.
//!
//! Lines are UTF-8, `#` starts a comment, blank lines are ignored. Later
//! assignments override earlier ones, so command-line overrides are simply
//! appended to the file's pairs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;

use crate::cross_scan::{CorrectionMode, DirectionMask};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Parses `key = value` lines, keeping the last value of repeated keys.
pub fn parse_pairs(text: &str) -> Result<IndexMap<String, String>> {
    let mut pairs = IndexMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{raw}`", no + 1)))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", no + 1)));
        }
        pairs.insert(key.to_string(), value.trim().to_string());
    }
    Ok(pairs)
}

/// Everything a `train` or `eval` run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/desk"),
        }
    }
}

fn value<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| Error::Config(format!("invalid value `{raw}` for `{key}`")))
}

fn flag(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{raw}` for `{key}`"))),
    }
}

fn pair(key: &str, raw: &str) -> Result<(usize, usize)> {
    let (a, b) = raw
        .split_once('x')
        .ok_or_else(|| Error::Config(format!("`{key}` must look like `8x8`, got `{raw}`")))?;
    Ok((value(key, a.trim())?, value(key, b.trim())?))
}

impl RunConfig {
    pub fn from_pairs(pairs: &IndexMap<String, String>) -> Result<Self> {
        let mut cfg = Self::default();
        let (mut correction, mut mask, mut init) = ("fixed".to_string(), "0011".to_string(), 0.5);
        for (key, raw) in pairs {
            let (m, t) = (&mut cfg.model, &mut cfg.train);
            match key.as_str() {
                "depth" => m.depth = value(key, raw)?,
                "embed_dim" => m.embed_dim = value(key, raw)?,
                "n_dstates" => m.n_dstates = value(key, raw)?,
                "out_channels" => m.out_channels = value(key, raw)?,
                "grid" => m.grid = pair(key, raw)?,
                "patches" => m.patches = pair(key, raw)?,
                "positional_encoding" => m.positional_encoding = flag(key, raw)?,
                "ssm_mode" => m.ssm_mode = raw.parse()?,
                "correction" => correction = raw.clone(),
                "mask" => mask = raw.clone(),
                "correction_init" => init = value(key, raw)?,
                "correction_form" => m.correction_form = raw.parse()?,
                "discretization" => m.discretization = raw.parse()?,
                "expand" => m.expand = value(key, raw)?,
                "conv_kernel" => m.conv_kernel = value(key, raw)?,
                "ln_eps" => m.ln_eps = value(key, raw)?,
                "epochs" => t.epochs = value(key, raw)?,
                "batch_size" => t.batch_size = value(key, raw)?,
                "lr" => t.lr = value(key, raw)?,
                "weight_decay" => t.weight_decay = value(key, raw)?,
                "warmup_fraction" => t.warmup_fraction = value(key, raw)?,
                "start_factor" => t.start_factor = value(key, raw)?,
                "final_factor" => t.final_factor = value(key, raw)?,
                "lambda_g" => t.lambda_g = value(key, raw)?,
                "clip_norm" => t.clip_norm = value(key, raw)?,
                "seed" => t.seed = value(key, raw)?,
                "data_dir" => cfg.data_dir = PathBuf::from(raw),
                "out_dir" => cfg.out_dir = PathBuf::from(raw),
                _ => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
            }
        }
        cfg.model.correction = CorrectionMode::parse(&correction, Some(&mask), init)?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Text that [`RunConfig::parse`] maps back to `self`.
    pub fn to_text(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        let (mask, init) = match m.correction {
            CorrectionMode::Fixed(mask) => (mask, 0.5),
            CorrectionMode::Learnable(init) => (DirectionMask([false, false, true, true]), init),
            CorrectionMode::None => (DirectionMask([false, false, true, true]), 0.5),
        };
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        put("depth", m.depth.to_string());
        put("embed_dim", m.embed_dim.to_string());
        put("n_dstates", m.n_dstates.to_string());
        put("out_channels", m.out_channels.to_string());
        put("grid", format!("{}x{}", m.grid.0, m.grid.1));
        put("patches", format!("{}x{}", m.patches.0, m.patches.1));
        put("positional_encoding", m.positional_encoding.to_string());
        put("ssm_mode", m.ssm_mode.to_string());
        put("correction", m.correction.name().into());
        put("mask", mask.to_string());
        put("correction_init", format!("{init:?}"));
        put("correction_form", m.correction_form.to_string());
        put("discretization", m.discretization.to_string());
        put("expand", m.expand.to_string());
        put("conv_kernel", m.conv_kernel.to_string());
        put("ln_eps", format!("{:?}", m.ln_eps));
        put("epochs", t.epochs.to_string());
        put("batch_size", t.batch_size.to_string());
        put("lr", format!("{:?}", t.lr));
        put("weight_decay", format!("{:?}", t.weight_decay));
        put("warmup_fraction", format!("{:?}", t.warmup_fraction));
        put("start_factor", format!("{:?}", t.start_factor));
        put("final_factor", format!("{:?}", t.final_factor));
        put("lambda_g", format!("{:?}", t.lambda_g));
        put("clip_norm", format!("{:?}", t.clip_norm));
        put("seed", t.seed.to_string());
        put("data_dir", self.data_dir.display().to_string());
        put("out_dir", self.out_dir.display().to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cross_scan::ScanMode;

    #[test]
    fn comments_and_overrides() {
        let pairs = parse_pairs("# header\nlr = 1e-3 # peak\n\nlr=2e-3\n").unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs["lr"], "2e-3");
        assert!(parse_pairs("no equals sign").is_err());
        assert!(parse_pairs(" = 3").is_err());
    }

    #[test]
    fn builds_configs() {
        let cfg = RunConfig::parse("ssm_mode = 1d\ncorrection = none\npatches = 4x2\nepochs = 3\n").unwrap();
        assert_eq!(cfg.model.ssm_mode, ScanMode::Ssm1d);
        assert_eq!(cfg.model.correction, CorrectionMode::None);
        assert_eq!(cfg.model.patches, (4, 2));
        assert_eq!(cfg.train.epochs, 3);
        let fixed = RunConfig::parse("mask = 0111").unwrap();
        assert_eq!(fixed.model.correction, CorrectionMode::Fixed("0111".parse().unwrap()));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::parse("colour = blue").is_err());
        assert!(RunConfig::parse("lr = fast").is_err());
        assert!(RunConfig::parse("lr = -1").is_err());
        assert!(RunConfig::parse("warmup_fraction = 1").is_err());
        assert!(RunConfig::parse("mask = 01").is_err());
    }

    #[test]
    fn text_round_trip() {
        let cfg = RunConfig::parse("correction = learnable\ncorrection_init = 0.25\nlr = 3e-4\nseed = 9").unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(RunConfig::parse(&RunConfig::default().to_text()).unwrap(), RunConfig::default());
    }
}
