//! The `train` command: dataset generation, stage-1 or stage-2 training and
//! artifact output.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use w3_core::backbone::{AttentionFlags, Backbone, BackboneConfig, InitOptions};
use w3_core::checkpoint;
use w3_core::config::RunConfig;
use w3_core::data::{generate_dataset, Dataset, Split};
use w3_core::train::{train_stage1, train_stage2_mfr, Model, TeacherSnapshot, TrainOutcome};

use crate::manifest::Manifest;
use crate::Exit;

/// Loads a checkpoint as a model of the given architecture.
pub fn load_model(path: &Path, config: &BackboneConfig, flags: AttentionFlags) -> Result<Model> {
    let params = checkpoint::load(path).with_context(|| format!("cannot load {}", path.display()))?;
    let (net, layout) = Backbone::init(config.clone(), 0, InitOptions::default())?;
    if !layout.same_layout(&params) {
        return Err(Exit::usage(format!(
            "checkpoint {} does not match the configured architecture",
            path.display()
        ))
        .into());
    }
    Ok(Model { net, flags, params })
}

pub fn datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let dc = cfg.data_config();
    let train = generate_dataset(&dc, cfg.data.n_train_per_class, cfg.data.seed, Split::Train)?;
    let val = generate_dataset(&dc, cfg.data.n_val_per_class, cfg.data.seed, Split::Val)?;
    Ok((train, val))
}

/// Writes the manifest, trains, then writes the checkpoint and metrics.
pub fn execute(m: &Manifest) -> Result<TrainOutcome> {
    if m.stage == 2 && m.teacher.is_none() {
        return Err(Exit::usage("stage 2 needs --teacher").into());
    }
    std::fs::create_dir_all(&m.out_dir).with_context(|| format!("cannot create {}", m.out_dir.display()))?;
    std::fs::write(m.path(), m.to_text()).with_context(|| format!("cannot write {}", m.path().display()))?;

    let cfg = &m.config;
    let (train, val) = datasets(cfg)?;
    let outcome = match &m.teacher {
        Some(t) if m.stage == 2 => {
            let teacher = TeacherSnapshot::new(load_model(t, &cfg.backbone, cfg.flags)?);
            train_stage2_mfr(&cfg.backbone, cfg.flags, &train, &val, &teacher, &cfg.train)?
        }
        _ => train_stage1(&cfg.backbone, cfg.flags, &train, &val, &cfg.train)?,
    };
    checkpoint::save(&outcome.model.params, m.checkpoint())?;
    outcome.log.append_csv(m.metrics())?;
    Ok(outcome)
}

pub fn manifest_for(
    config: RunConfig,
    stage: u8,
    teacher: Option<PathBuf>,
    ablate: Vec<crate::manifest::Ablation>,
    out_dir: PathBuf,
) -> Manifest {
    let mut config = config;
    for a in &ablate {
        a.apply(&mut config);
    }
    Manifest {
        config,
        stage,
        teacher,
        ablate,
        out_dir,
    }
}
