//! Run manifests: the fully resolved configuration of a training run plus
//! `run.*` keys naming the stage, teacher and artifact paths.
//!
//! A manifest is itself a valid config file for every command, because
//! `run.*` lines are set aside before the configuration is parsed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{Context, Result};
use w3_core::config::RunConfig;

use crate::Exit;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const FILE_NAME: &str = "manifest.txt";
pub const CHECKPOINT_NAME: &str = "model.ckpt";
pub const METRICS_NAME: &str = "metrics.csv";

/// Components that `--ablate` can switch off.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    /// Feature mimicking in stage 2 (sets its weight to zero).
    Mfr,
    Afr,
    Sa,
    Ta,
    /// The attention modules themselves.
    W3,
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Mfr => "mfr",
            Ablation::Afr => "afr",
            Ablation::Sa => "sa",
            Ablation::Ta => "ta",
            Ablation::W3 => "w3",
        }
    }

    pub fn apply(self, cfg: &mut RunConfig) {
        match self {
            Ablation::Mfr => cfg.train.lambda_fm = 0.0,
            Ablation::Afr => cfg.flags.afr = false,
            Ablation::Sa => cfg.flags.spatial = false,
            Ablation::Ta => cfg.flags.temporal = false,
            Ablation::W3 => cfg.flags.w3 = false,
        }
    }
}

impl FromStr for Ablation {
    type Err = Exit;

    fn from_str(s: &str) -> std::result::Result<Self, Exit> {
        match s.trim() {
            "mfr" => Ok(Ablation::Mfr),
            "afr" => Ok(Ablation::Afr),
            "sa" => Ok(Ablation::Sa),
            "ta" => Ok(Ablation::Ta),
            "w3" => Ok(Ablation::W3),
            other => Err(Exit::usage(format!(
                "unknown ablation {other:?} (expected mfr, afr, sa, ta or w3)"
            ))),
        }
    }
}

pub fn parse_ablations(list: &str) -> std::result::Result<Vec<Ablation>, Exit> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(Ablation::from_str)
        .collect()
}

/// Separates `run.*` lines from configuration lines.
fn split(text: &str) -> std::result::Result<(String, BTreeMap<String, String>), Exit> {
    let mut config = String::new();
    let mut run = BTreeMap::new();
    for line in text.lines() {
        let body = line.split('#').next().unwrap_or("").trim();
        match body.strip_prefix("run.") {
            Some(rest) => {
                let (k, v) = rest
                    .split_once('=')
                    .ok_or_else(|| Exit::usage(format!("malformed manifest line {line:?}")))?;
                run.insert(k.trim().to_string(), v.trim().to_string());
            }
            None => {
                config.push_str(line);
                config.push('\n');
            }
        }
    }
    Ok((config, run))
}

/// Reads a config file or manifest, ignoring any `run.*` keys.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    let (config, _) = split(&text)?;
    RunConfig::parse(&config).with_context(|| format!("in {}", path.display()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub config: RunConfig,
    pub stage: u8,
    pub teacher: Option<PathBuf>,
    /// Ablations already folded into `config`, kept for the record.
    pub ablate: Vec<Ablation>,
    pub out_dir: PathBuf,
}

impl Manifest {
    pub fn checkpoint(&self) -> PathBuf {
        self.out_dir.join(CHECKPOINT_NAME)
    }

    pub fn metrics(&self) -> PathBuf {
        self.out_dir.join(METRICS_NAME)
    }

    pub fn path(&self) -> PathBuf {
        self.out_dir.join(FILE_NAME)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# w3 run manifest\n");
        let ablate: Vec<&str> = self.ablate.iter().map(|a| a.as_str()).collect();
        let _ = writeln!(s, "run.tool_version = {TOOL_VERSION}");
        let _ = writeln!(s, "run.command = train");
        let _ = writeln!(s, "run.stage = {}", self.stage);
        let _ = writeln!(s, "run.ablate = {}", ablate.join(","));
        if let Some(t) = &self.teacher {
            let _ = writeln!(s, "run.teacher = {}", t.display());
        }
        let _ = writeln!(s, "run.seed = {}", self.config.train.seed);
        let _ = writeln!(s, "run.out_dir = {}", self.out_dir.display());
        let _ = writeln!(s, "run.checkpoint = {}", self.checkpoint().display());
        let _ = writeln!(s, "run.metrics = {}", self.metrics().display());
        s.push_str(&self.config.to_text());
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let (config, run) = split(text)?;
        let config = RunConfig::parse(&config)?;
        let get = |k: &str| run.get(k).map(String::as_str);
        let stage = match get("stage") {
            Some("1") | None => 1,
            Some("2") => 2,
            Some(other) => return Err(Exit::usage(format!("manifest: bad run.stage {other:?}")).into()),
        };
        Ok(Self {
            config,
            stage,
            teacher: get("teacher").map(PathBuf::from),
            ablate: parse_ablations(get("ablate").unwrap_or(""))?,
            out_dir: PathBuf::from(get("out_dir").unwrap_or(crate::DEFAULT_OUT_DIR)),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read manifest {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_text_round_trips() {
        let mut config = RunConfig::default();
        Ablation::Ta.apply(&mut config);
        let m = Manifest {
            config,
            stage: 2,
            teacher: Some(PathBuf::from("t/model.ckpt")),
            ablate: vec![Ablation::Ta],
            out_dir: PathBuf::from("out"),
        };
        assert_eq!(Manifest::parse(&m.to_text()).unwrap(), m);
    }

    #[test]
    fn ablations_switch_components() {
        let mut c = RunConfig::default();
        for a in parse_ablations("afr,sa,ta").unwrap() {
            a.apply(&mut c);
        }
        assert!(c.flags.w3 && !c.flags.afr && !c.flags.spatial && !c.flags.temporal);
        assert_eq!(parse_ablations("").unwrap(), vec![]);
        assert!(parse_ablations("afr,xyz").is_err());
    }
}
