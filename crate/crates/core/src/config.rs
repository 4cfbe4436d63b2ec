//! Text run configuration: `[section]` headers followed by `key = value`
//! lines. Unknown sections and keys are errors; `#` starts a comment.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::Split;
use crate::error::{Error, Result};
use crate::model::{CairConfig, Variant};
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetKind {
    Cair,
    Ensemble,
}

impl FromStr for NetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cair" => Ok(NetKind::Cair),
            "ensemble" => Ok(NetKind::Ensemble),
            _ => Err(Error::contract(
                "net",
                format!("unknown network `{s}` (expected cair or ensemble)"),
            )),
        }
    }
}

impl std::fmt::Display for NetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NetKind::Cair => "cair",
            NetKind::Ensemble => "ensemble",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSection {
    pub net: NetKind,
    pub cair: CairConfig,
    pub ensemble_inputs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSection {
    /// Corpus index; relative paths resolve against the config file.
    pub index: Option<PathBuf>,
    pub train_split: Split,
    pub eval_split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferSection {
    pub tta: bool,
    pub tlsc_window: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub data: DataSection,
    pub infer: InferSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelSection {
                net: NetKind::Cair,
                cair: CairConfig::default(),
                ensemble_inputs: 2,
            },
            train: TrainConfig::default(),
            data: DataSection {
                index: None,
                train_split: Split::Train,
                eval_split: Split::Test,
            },
            infer: InferSection {
                tta: false,
                tlsc_window: None,
            },
        }
    }
}

fn opt_to_string<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

fn parse_value<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config {
        line,
        msg: format!("invalid value `{v}` for `{key}`"),
    })
}

fn parse_opt<T: FromStr>(line: usize, key: &str, v: &str) -> Result<Option<T>> {
    if v == "none" {
        Ok(None)
    } else {
        parse_value(line, key, v).map(Some)
    }
}

fn parse_list(line: usize, key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|p| parse_value(line, key, p.trim()))
        .collect()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(name) = content.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                let name = name.trim();
                if !matches!(name, "model" | "train" | "data" | "infer") {
                    return Err(Error::Config {
                        line,
                        msg: format!("unknown section [{name}]"),
                    });
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
                line,
                msg: format!("expected `key = value`, found `{content}`"),
            })?;
            let (key, v) = (key.trim(), value.trim());
            let sec = section.as_deref().ok_or_else(|| Error::Config {
                line,
                msg: format!("`{key}` appears before any section"),
            })?;
            cfg.set(sec, key, v, line)?;
        }
        cfg.model.cair.validate().map_err(|e| Error::Config {
            line: 0,
            msg: e.to_string(),
        })?;
        cfg.train.validate().map_err(|e| Error::Config {
            line: 0,
            msg: e.to_string(),
        })?;
        Ok(cfg)
    }

    fn set(&mut self, sec: &str, key: &str, v: &str, line: usize) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match (sec, key) {
            ("model", "net") => m.net = parse_value(line, key, v)?,
            ("model", "levels") => m.cair.levels = parse_value(line, key, v)?,
            ("model", "base_width") => m.cair.base_width = parse_value(line, key, v)?,
            ("model", "block_counts") => m.cair.block_counts = parse_list(line, key, v)?,
            ("model", "variant") => m.cair.variant = parse_value::<Variant>(line, key, v)?,
            ("model", "tlsc_window") => m.cair.tlsc_window = parse_opt(line, key, v)?,
            ("model", "ca_width") => m.cair.ca_width = parse_value(line, key, v)?,
            ("model", "blur_sigma") => m.cair.blur_sigma = parse_value(line, key, v)?,
            ("model", "ensemble_inputs") => m.ensemble_inputs = parse_value(line, key, v)?,
            ("train", "lr_init") => t.lr_init = parse_value(line, key, v)?,
            ("train", "lr_final") => t.lr_final = parse_value(line, key, v)?,
            ("train", "total_iters") => t.total_iters = parse_value(line, key, v)?,
            ("train", "beta1") => t.beta1 = parse_value(line, key, v)?,
            ("train", "beta2") => t.beta2 = parse_value(line, key, v)?,
            ("train", "weight_decay") => t.weight_decay = parse_value(line, key, v)?,
            ("train", "eps") => t.eps = parse_value(line, key, v)?,
            ("train", "batch_size") => t.batch_size = parse_value(line, key, v)?,
            ("train", "patch_size") => t.patch_size = parse_value(line, key, v)?,
            ("train", "aug_prob") => t.aug_prob = parse_value(line, key, v)?,
            ("train", "seed") => t.seed = parse_value(line, key, v)?,
            ("train", "log_every") => t.log_every = parse_value(line, key, v)?,
            ("train", "checkpoint_every") => t.checkpoint_every = parse_value(line, key, v)?,
            ("data", "index") => self.data.index = parse_opt(line, key, v)?,
            ("data", "train_split") => self.data.train_split = parse_value(line, key, v)?,
            ("data", "eval_split") => self.data.eval_split = parse_value(line, key, v)?,
            ("infer", "tta") => self.infer.tta = parse_value(line, key, v)?,
            ("infer", "tlsc_window") => self.infer.tlsc_window = parse_opt(line, key, v)?,
            _ => {
                return Err(Error::Config {
                    line,
                    msg: format!("unknown key `{key}` in [{sec}]"),
                })
            }
        }
        Ok(())
    }

    /// Canonical text with every key in fixed order.
    pub fn serialize(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let blocks: Vec<String> = m.cair.block_counts.iter().map(usize::to_string).collect();
        let mut s = String::new();
        let _ = writeln!(s, "[model]");
        let _ = writeln!(s, "net = {}", m.net);
        let _ = writeln!(s, "levels = {}", m.cair.levels);
        let _ = writeln!(s, "base_width = {}", m.cair.base_width);
        let _ = writeln!(s, "block_counts = {}", blocks.join(","));
        let _ = writeln!(s, "variant = {}", m.cair.variant);
        let _ = writeln!(s, "tlsc_window = {}", opt_to_string(&m.cair.tlsc_window));
        let _ = writeln!(s, "ca_width = {}", m.cair.ca_width);
        let _ = writeln!(s, "blur_sigma = {}", m.cair.blur_sigma);
        let _ = writeln!(s, "ensemble_inputs = {}", m.ensemble_inputs);
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "lr_init = {}", t.lr_init);
        let _ = writeln!(s, "lr_final = {}", t.lr_final);
        let _ = writeln!(s, "total_iters = {}", t.total_iters);
        let _ = writeln!(s, "beta1 = {}", t.beta1);
        let _ = writeln!(s, "beta2 = {}", t.beta2);
        let _ = writeln!(s, "weight_decay = {}", t.weight_decay);
        let _ = writeln!(s, "eps = {}", t.eps);
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "patch_size = {}", t.patch_size);
        let _ = writeln!(s, "aug_prob = {}", t.aug_prob);
        let _ = writeln!(s, "seed = {}", t.seed);
        let _ = writeln!(s, "log_every = {}", t.log_every);
        let _ = writeln!(s, "checkpoint_every = {}", t.checkpoint_every);
        let _ = writeln!(s, "\n[data]");
        let _ = writeln!(
            s,
            "index = {}",
            self.data
                .index
                .as_ref()
                .map_or("none".into(), |p| p.display().to_string())
        );
        let _ = writeln!(s, "train_split = {}", self.data.train_split);
        let _ = writeln!(s, "eval_split = {}", self.data.eval_split);
        let _ = writeln!(s, "\n[infer]");
        let _ = writeln!(s, "tta = {}", self.infer.tta);
        let _ = writeln!(
            s,
            "tlsc_window = {}",
            opt_to_string(&self.infer.tlsc_window)
        );
        s
    }

    /// Read a file; a relative `index` resolves against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        if let (Some(idx), Some(dir)) = (&cfg.data.index, path.parent()) {
            if idx.is_relative() {
                cfg.data.index = Some(dir.join(idx));
            }
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = RunConfig::default();
        let text = c.serialize();
        assert_eq!(RunConfig::parse(&text).unwrap(), c);
        assert_eq!(RunConfig::parse(&text).unwrap().serialize(), text);
    }

    #[test]
    fn partial_file_serializes_canonically() {
        let text = "# tiny\n[model]\nbase_width=16\nblock_counts = 1,1,1,2,1,1,1\nvariant = plain\n\n[train]\nlr_init = 0.002 # faster\nseed = 7\n[infer]\ntlsc_window = 64\n";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.model.cair.base_width, 16);
        assert_eq!(c.model.cair.variant, Variant::Plain);
        assert_eq!(c.train.lr_init, 0.002);
        assert_eq!(c.infer.tlsc_window, Some(64));
        let canon = c.serialize();
        assert_eq!(RunConfig::parse(&canon).unwrap(), c);
        assert!(canon.contains("lr_init = 0.002\n"));
    }

    #[test]
    fn unknown_keys_and_sections_fail_with_line() {
        let e = RunConfig::parse("[model]\nwidth = 3\n").unwrap_err();
        assert!(matches!(e, Error::Config { line: 2, .. }), "{e}");
        let e = RunConfig::parse("[optim]\n").unwrap_err();
        assert!(matches!(e, Error::Config { line: 1, .. }));
        assert!(RunConfig::parse("seed = 1\n").is_err());
        assert!(RunConfig::parse("[train]\nseed = x\n").is_err());
        assert!(RunConfig::parse("[model]\nblock_counts = 1,2\n").is_err());
    }
}
