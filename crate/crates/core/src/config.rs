//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key has a default;
//! unknown or repeated keys are errors. [`RunConfig::to_text`] writes every
//! key, and parsing that text gives back an identical configuration.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::attention::{AttentionInit, TemporalMixing};
use crate::backbone::{AttentionFlags, BackboneConfig, StageSpec, W3Placement};
use crate::data::DataConfig;
use crate::error::{config_err, Result};
use crate::train::{MimicNorm, StudentInit, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct DataSettings {
    pub noise_sigma: f64,
    pub n_train_per_class: usize,
    pub n_val_per_class: usize,
    pub seed: u64,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self {
            noise_sigma: 0.1,
            n_train_per_class: 64,
            n_val_per_class: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub flags: AttentionFlags,
    pub train: TrainConfig,
    pub data: DataSettings,
}

pub const KEYS: &[&str] = &[
    "frames",
    "height",
    "width",
    "num_classes",
    "stage_channels",
    "stage_blocks",
    "stage_strides",
    "reduction",
    "fold_div",
    "temporal_mixing",
    "placement",
    "w3",
    "afr",
    "spatial_attention",
    "temporal_attention",
    "attention_init",
    "residual_gain",
    "epochs",
    "batch_size",
    "lr",
    "lr_decay",
    "decay_at",
    "momentum",
    "weight_decay",
    "lambda_fm",
    "mimic_norm",
    "student_init",
    "seed",
    "noise_sigma",
    "n_train_per_class",
    "n_val_per_class",
    "data_seed",
];

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| config_err!("{key}: cannot parse {v:?}"))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|x| num(key, x.trim())).collect()
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(config_err!("{key}: expected true or false, got {v:?}")),
    }
}

fn join<T: ToString>(xs: impl IntoIterator<Item = T>) -> String {
    xs.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn fmt_f64(x: f64) -> String {
    // Debug output is the shortest text that parses back to the same bits.
    format!("{x:?}")
}

impl RunConfig {
    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            frames: self.backbone.frames,
            height: self.backbone.height,
            width: self.backbone.width,
            noise_sigma: self.data.noise_sigma,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        let mut stage = (None, None, None);
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config_err!("line {}: expected key = value", lineno + 1))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(config_err!("line {}: key {key:?} given twice", lineno + 1));
            }
            match key {
                "stage_channels" => stage.0 = Some(list::<usize>(key, value)?),
                "stage_blocks" => stage.1 = Some(list::<usize>(key, value)?),
                "stage_strides" => stage.2 = Some(list::<usize>(key, value)?),
                _ => cfg
                    .set(key, value)
                    .map_err(|e| config_err!("line {}: {e}", lineno + 1))?,
            }
        }
        if stage != (None, None, None) {
            let old = &cfg.backbone.stages;
            let ch = stage.0.unwrap_or_else(|| old.iter().map(|s| s.channels).collect());
            let bl = stage.1.unwrap_or_else(|| old.iter().map(|s| s.blocks).collect());
            let st = stage.2.unwrap_or_else(|| old.iter().map(|s| s.stride).collect());
            if ch.len() != bl.len() || ch.len() != st.len() {
                return Err(config_err!(
                    "stage_channels, stage_blocks and stage_strides need equal lengths ({}, {}, {})",
                    ch.len(),
                    bl.len(),
                    st.len()
                ));
            }
            cfg.backbone.stages = ch
                .into_iter()
                .zip(bl)
                .zip(st)
                .map(|((channels, blocks), stride)| StageSpec {
                    channels,
                    blocks,
                    stride,
                })
                .collect();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| config_err!("cannot read {}: {e}", path.display()))?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let b = &mut self.backbone;
        let t = &mut self.train;
        match key {
            "frames" => b.frames = num(key, v)?,
            "height" => b.height = num(key, v)?,
            "width" => b.width = num(key, v)?,
            "num_classes" => b.num_classes = num(key, v)?,
            "reduction" => b.reduction = num(key, v)?,
            "fold_div" => b.fold_div = num(key, v)?,
            "temporal_mixing" => b.temporal_mixing = TemporalMixing::from_str(v)?,
            "placement" => b.placement = W3Placement::from_str(v)?,
            "w3" => self.flags.w3 = flag(key, v)?,
            "afr" => self.flags.afr = flag(key, v)?,
            "spatial_attention" => self.flags.spatial = flag(key, v)?,
            "temporal_attention" => self.flags.temporal = flag(key, v)?,
            "attention_init" => {
                t.init.attention = match v {
                    "random" => AttentionInit::Random,
                    "zero" => AttentionInit::Zero,
                    _ => return Err(config_err!("{key}: expected random or zero, got {v:?}")),
                }
            }
            "residual_gain" => t.init.residual_gain = num(key, v)?,
            "epochs" => t.epochs = num(key, v)?,
            "batch_size" => t.batch_size = num(key, v)?,
            "lr" => t.lr = num(key, v)?,
            "lr_decay" => t.lr_decay = num(key, v)?,
            "decay_at" => t.decay_at = if v.is_empty() { vec![] } else { list(key, v)? },
            "momentum" => t.momentum = num(key, v)?,
            "weight_decay" => t.weight_decay = num(key, v)?,
            "lambda_fm" => t.lambda_fm = num(key, v)?,
            "mimic_norm" => t.mimic_norm = MimicNorm::from_str(v)?,
            "student_init" => t.student_init = StudentInit::from_str(v)?,
            "seed" => t.seed = num(key, v)?,
            "noise_sigma" => self.data.noise_sigma = num(key, v)?,
            "n_train_per_class" => self.data.n_train_per_class = num(key, v)?,
            "n_val_per_class" => self.data.n_val_per_class = num(key, v)?,
            "data_seed" => self.data.seed = num(key, v)?,
            _ => return Err(config_err!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.train.validate()?;
        if self.data.n_train_per_class == 0 || self.data.n_val_per_class == 0 {
            return Err(config_err!("datasets need at least one clip per class"));
        }
        if !(self.data.noise_sigma >= 0.0 && self.data.noise_sigma.is_finite()) {
            return Err(config_err!("noise_sigma must be finite and >= 0"));
        }
        Ok(())
    }

    /// Every key with its current value, in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let b = &self.backbone;
        let t = &self.train;
        let f = &self.flags;
        let d = &self.data;
        let v: Vec<String> = vec![
            b.frames.to_string(),
            b.height.to_string(),
            b.width.to_string(),
            b.num_classes.to_string(),
            join(b.stages.iter().map(|s| s.channels)),
            join(b.stages.iter().map(|s| s.blocks)),
            join(b.stages.iter().map(|s| s.stride)),
            b.reduction.to_string(),
            b.fold_div.to_string(),
            b.temporal_mixing.as_str().into(),
            b.placement.as_str().into(),
            f.w3.to_string(),
            f.afr.to_string(),
            f.spatial.to_string(),
            f.temporal.to_string(),
            match t.init.attention {
                AttentionInit::Random => "random".into(),
                AttentionInit::Zero => "zero".into(),
            },
            fmt_f64(t.init.residual_gain),
            t.epochs.to_string(),
            t.batch_size.to_string(),
            fmt_f64(t.lr),
            fmt_f64(t.lr_decay),
            t.decay_at.iter().map(|&x| fmt_f64(x)).collect::<Vec<_>>().join(","),
            fmt_f64(t.momentum),
            fmt_f64(t.weight_decay),
            fmt_f64(t.lambda_fm),
            t.mimic_norm.as_str().into(),
            t.student_init.as_str().into(),
            t.seed.to_string(),
            fmt_f64(d.noise_sigma),
            d.n_train_per_class.to_string(),
            d.n_val_per_class.to_string(),
            d.seed.to_string(),
        ];
        KEYS.iter().copied().zip(v).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;
    use proptest::prelude::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::parse("# nothing\n\n").unwrap(), RunConfig::default());
        let d = RunConfig::default();
        assert_eq!(d.train.epochs, 60);
        assert_eq!(d.train.lambda_fm, 1.0);
        assert_eq!((d.data.n_train_per_class, d.data.n_val_per_class), (64, 16));
        assert_eq!(d.backbone.frames, 8);
    }

    #[test]
    fn parses_values_and_comments() {
        let c = RunConfig::parse(
            "frames = 4  # short clips\nstage_channels = 8,16\nstage_blocks=1,1\nstage_strides=1,2\nafr=false\nlr=0.1\ndecay_at=\n",
        )
        .unwrap();
        assert_eq!(c.backbone.frames, 4);
        assert_eq!(c.backbone.stages.len(), 2);
        assert_eq!(c.backbone.stages[1].stride, 2);
        assert!(!c.flags.afr);
        assert_eq!(c.train.lr, 0.1);
        assert!(c.train.decay_at.is_empty());
    }

    #[test]
    fn rejects_typos_duplicates_and_bad_values() {
        for bad in [
            "epoch = 3",
            "lr = 1\nlr = 2",
            "w3 = maybe",
            "frames",
            "stage_channels = 8,16",
        ] {
            assert!(matches!(RunConfig::parse(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn every_key_is_written() {
        let text = RunConfig::default().to_text();
        assert_eq!(text.lines().count(), KEYS.len());
    }

    proptest! {
        #[test]
        fn text_round_trips(lr in 1e-6f64..1.0, sigma in 0.0f64..0.5, seed: u64, afr: bool, epochs in 1usize..100) {
            let mut c = RunConfig::default();
            c.train.lr = lr;
            c.data.noise_sigma = sigma;
            c.train.seed = seed;
            c.flags.afr = afr;
            c.train.epochs = epochs;
            prop_assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        }
    }
}
