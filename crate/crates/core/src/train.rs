//! Losses, momentum SGD, the two-stage teacher/student protocol and
//! evaluation.
//!
//! Every sample gets its own tape; per-sample gradients are summed in sample
//! order so a run is bitwise reproducible from its seed.

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::autodiff::{PoolMode, Tape, Var};
use crate::backbone::{forward_backbone, AttentionFlags, Backbone, BackboneConfig, InitOptions};
use crate::data::Dataset;
use crate::error::{config_err, contract, Error, Result};
use crate::param::ParamStore;
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

const SHUFFLE_TAG: u64 = 0x7368_7566;

/// How the mimic term measures the distance between frame features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MimicNorm {
    Euclidean,
    Squared,
}

impl MimicNorm {
    pub fn as_str(self) -> &'static str {
        match self {
            MimicNorm::Euclidean => "l2",
            MimicNorm::Squared => "squared",
        }
    }
}

impl FromStr for MimicNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(MimicNorm::Euclidean),
            "squared" => Ok(MimicNorm::Squared),
            _ => Err(config_err!("unknown mimic norm {s:?} (expected l2 or squared)")),
        }
    }
}

/// Starting point of the stage-2 student.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StudentInit {
    /// Fresh random parameters drawn from `seed + 1`.
    Fresh,
    /// An exact copy of the teacher.
    Teacher,
}

impl StudentInit {
    pub fn as_str(self) -> &'static str {
        match self {
            StudentInit::Fresh => "fresh",
            StudentInit::Teacher => "teacher",
        }
    }
}

impl FromStr for StudentInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fresh" => Ok(StudentInit::Fresh),
            "teacher" => Ok(StudentInit::Teacher),
            _ => Err(config_err!("unknown student init {s:?} (expected fresh or teacher)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Epochs per stage.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplier applied at each decay epoch.
    pub lr_decay: f64,
    /// Fractions of the budget at which the rate decays.
    pub decay_at: Vec<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda_fm: f64,
    pub mimic_norm: MimicNorm,
    pub seed: u64,
    pub student_init: StudentInit,
    pub init: InitOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 8,
            lr: 0.05,
            lr_decay: 0.1,
            decay_at: vec![0.6, 0.85],
            momentum: 0.9,
            weight_decay: 1e-4,
            lambda_fm: 1.0,
            mimic_norm: MimicNorm::Euclidean,
            seed: 0,
            student_init: StudentInit::Fresh,
            init: InitOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(config_err!("epochs and batch_size must be positive"));
        }
        if !(self.lambda_fm >= 0.0 && self.lambda_fm.is_finite()) {
            return Err(config_err!("lambda_fm must be finite and >= 0, got {}", self.lambda_fm));
        }
        if ![self.lr, self.momentum, self.weight_decay].iter().all(|&x| x >= 0.0) {
            return Err(config_err!("lr, momentum and weight decay must be >= 0"));
        }
        if self.decay_at.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(config_err!("decay fractions must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Epochs (0-based) from which each decay applies.
    pub fn decay_epochs(&self) -> Vec<usize> {
        self.decay_at
            .iter()
            .map(|f| (f * self.epochs as f64).round() as usize)
            .collect()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let n = self.decay_epochs().iter().filter(|&&e| epoch >= e).count();
        self.lr * self.lr_decay.powi(n as i32)
    }
}

/// Network layout, active components and parameter values.
#[derive(Clone, Debug)]
pub struct Model {
    pub net: Backbone,
    pub flags: AttentionFlags,
    pub params: ParamStore,
}

impl Model {
    pub fn init(config: BackboneConfig, flags: AttentionFlags, seed: u64, opts: InitOptions) -> Result<Self> {
        let (net, params) = Backbone::init(config, seed, opts)?;
        Ok(Self { net, flags, params })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.net.config
    }

    /// Mean-over-frames logits of one clip.
    pub fn predict(&self, clip: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let x = tape.constant(clip.clone());
        let trace = forward_backbone(&mut tape, &b, &self.net, x, &self.flags)?;
        let mean = tape.pool(trace.logits, PoolMode::Avg, &[0])?;
        Ok(tape.value(mean).data().to_vec())
    }

    /// Refined final-stage features of one clip, `(T, C_l, H_l, W_l)`.
    pub fn refined_features(&self, clip: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let x = tape.constant(clip.clone());
        let trace = forward_backbone(&mut tape, &b, &self.net, x, &self.flags)?;
        Ok(tape.value(trace.refined).clone())
    }
}

/// The converged stage-1 model, frozen for stage 2.
#[derive(Clone, Debug)]
pub struct TeacherSnapshot {
    model: Model,
}

impl TeacherSnapshot {
    pub fn new(model: Model) -> Self {
        Self { model }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }
}

/// Cross-entropy of the frame-averaged logits.
pub fn video_classification_loss(tape: &mut Tape, frame_logits: Var, label: usize) -> Result<Var> {
    if tape.shape(frame_logits).len() != 2 {
        return Err(Error::dim(
            "video_classification_loss",
            tape.shape(frame_logits),
            &[0, 0],
        ));
    }
    let mean = tape.pool(frame_logits, PoolMode::Avg, &[0])?;
    tape.softmax_cross_entropy(mean, &[label])
}

/// Mean over frames of the distance between `y_q` and `y_p`; `y_p` should be
/// recorded as a constant.
pub fn feature_mimic_loss(tape: &mut Tape, y_q: Var, y_p: Var, norm: MimicNorm) -> Result<Var> {
    if tape.shape(y_q) != tape.shape(y_p) {
        return Err(Error::dim("feature_mimic_loss", tape.shape(y_q), tape.shape(y_p)));
    }
    let t = tape.shape(y_q)[0];
    let diff = tape.sub(y_q, y_p)?;
    let per_frame = match norm {
        MimicNorm::Euclidean => tape.row_norm(diff),
        MimicNorm::Squared => {
            let sq = tape.mul(diff, diff)?;
            let flat = tape.reshape(sq, &[t, tape.value(sq).len() / t])?;
            let s = tape.pool(flat, PoolMode::Sum, &[1])?;
            tape.reshape(s, &[t])?
        }
    };
    tape.mean(per_frame)
}

/// Momentum buffers, one per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<Tensor>,
}

impl SgdState {
    pub fn new(params: &ParamStore) -> Self {
        Self {
            velocity: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdParams {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// `v ← μv + g + wd·θ;  θ ← θ − lr·v`.
pub fn sgd_step(params: &mut ParamStore, grads: &[Tensor], state: &mut SgdState, p: SgdParams) -> Result<()> {
    if grads.len() != params.len() || state.velocity.len() != params.len() {
        return Err(contract!(
            "{} gradients and {} momentum buffers for {} parameters",
            grads.len(),
            state.velocity.len(),
            params.len()
        ));
    }
    for ((theta, g), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut state.velocity) {
        if theta.shape() != g.shape() {
            return Err(Error::dim("sgd_step", theta.shape(), g.shape()));
        }
        for ((th, &gi), vi) in theta.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = p.momentum * *vi + gi + p.weight_decay * *th;
            *th -= p.lr * *vi;
        }
    }
    Ok(())
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub stage: u8,
    pub epoch: usize,
    pub split: &'static str,
    pub lr: f64,
    pub ce: f64,
    /// Mimic term before weighting; zero in stage 1.
    pub fm: f64,
    pub total: f64,
    pub top1: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricRow>,
}

impl MetricsLog {
    pub const HEADER: &'static str = "stage,epoch,split,lr,ce,fm,total,top1";

    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{:e},{:e},{:e},{:e},{:e}",
                r.stage, r.epoch, r.split, r.lr, r.ce, r.fm, r.total, r.top1
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}", Self::HEADER, self.csv_rows())
    }

    /// Appends the rows to `path`, writing the header first if the file is new.
    pub fn append_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(f, "{}", Self::HEADER)?;
        }
        f.write_all(self.csv_rows().as_bytes())?;
        Ok(())
    }

    /// One column of the rows of `split`, in epoch order.
    pub fn series(&self, split: &str, f: impl Fn(&MetricRow) -> f64) -> Vec<f64> {
        self.rows.iter().filter(|r| r.split == split).map(f).collect()
    }
}

/// Least-squares slope of `ys` against their index.
pub fn trend_slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    if ys.len() < 2 {
        return 0.0;
    }
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (y - my);
        sxx += dx * dx;
    }
    sxy / sxx
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub top1: f64,
    pub per_class: Vec<f64>,
    pub loss: f64,
    pub predictions: Vec<usize>,
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate(model: &Model, data: &Dataset) -> Result<Evaluation> {
    let k = model.config().num_classes;
    let mut hits = vec![0usize; k];
    let mut counts = vec![0usize; k];
    let mut loss = 0.0;
    let mut predictions = Vec::with_capacity(data.len());
    for s in &data.samples {
        if s.label >= k {
            return Err(contract!("label {} out of range for {k} classes", s.label));
        }
        let logits = model.predict(&s.clip)?;
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        loss += lse - logits[s.label];
        let p = argmax(&logits);
        predictions.push(p);
        counts[s.label] += 1;
        hits[s.label] += usize::from(p == s.label);
    }
    let n = data.len().max(1) as f64;
    Ok(Evaluation {
        top1: hits.iter().sum::<usize>() as f64 / n,
        per_class: hits
            .iter()
            .zip(&counts)
            .map(|(&h, &c)| if c == 0 { 0.0 } else { h as f64 / c as f64 })
            .collect(),
        loss: loss / n,
        predictions,
    })
}

/// Result of one training stage.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best-validation snapshot.
    pub model: Model,
    /// Parameters after the last epoch.
    pub last_params: ParamStore,
    pub best_epoch: usize,
    pub best_val_top1: f64,
    pub log: MetricsLog,
}

struct Mimic<'a> {
    targets: &'a [Tensor],
    lambda: f64,
    norm: MimicNorm,
}

/// Loss terms and gradients of one sample.
struct SampleStep {
    ce: f64,
    fm: f64,
    correct: bool,
    grads: Vec<Tensor>,
}

fn sample_step(model: &Model, clip: &Tensor, label: usize, target: Option<(&Tensor, &Mimic)>) -> Result<SampleStep> {
    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape, true);
    let x = tape.constant(clip.clone());
    let trace = forward_backbone(&mut tape, &b, &model.net, x, &model.flags)?;
    let ce = video_classification_loss(&mut tape, trace.logits, label)?;
    let mean = tape.pool(trace.logits, PoolMode::Avg, &[0])?;
    let correct = argmax(tape.value(mean).data()) == label;
    let mut loss = ce;
    let mut fm = 0.0;
    if let Some((y_p, m)) = target {
        let y_p = tape.constant(y_p.clone());
        let l = feature_mimic_loss(&mut tape, trace.refined, y_p, m.norm)?;
        fm = tape.value(l).item();
        // Leaving the term off the graph at zero weight keeps that run
        // bitwise equal to plain stage-1 training.
        if m.lambda != 0.0 {
            let weighted = tape.scale(l, m.lambda);
            loss = tape.add(ce, weighted)?;
        }
    }
    let ce = tape.value(ce).item();
    let grads = tape.backward(loss)?;
    Ok(SampleStep {
        ce,
        fm,
        correct,
        grads: b.collect_grads(&grads, &model.params),
    })
}

fn fit(
    mut model: Model,
    stage: u8,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    mimic: Option<Mimic>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(contract!("empty training set"));
    }
    let mut state = SgdState::new(&model.params);
    let mut shuffle = Rng::new(derive_seed(seed, SHUFFLE_TAG));
    let mut log = MetricsLog::default();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let n = train.len();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let order = shuffle.permutation(n);
        let (mut ce_sum, mut fm_sum, mut hits) = (0.0, 0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<Vec<Tensor>> = None;
            for &i in batch {
                let s = &train.samples[i];
                let target = mimic.as_ref().map(|m| (&m.targets[i], m));
                let step = sample_step(&model, &s.clip, s.label, target)?;
                if !(step.ce.is_finite() && step.fm.is_finite()) {
                    return Err(Error::Diverged {
                        epoch,
                        message: format!("non-finite loss (ce {}, fm {})", step.ce, step.fm),
                    });
                }
                ce_sum += step.ce;
                fm_sum += step.fm;
                hits += usize::from(step.correct);
                match &mut acc {
                    None => acc = Some(step.grads),
                    Some(a) => {
                        for (x, g) in a.iter_mut().zip(&step.grads) {
                            for (xv, gv) in x.data_mut().iter_mut().zip(g.data()) {
                                *xv += gv;
                            }
                        }
                    }
                }
            }
            let mut grads = acc.expect("non-empty batch");
            let inv = 1.0 / batch.len() as f64;
            for g in &mut grads {
                for v in g.data_mut() {
                    *v *= inv;
                }
            }
            sgd_step(
                &mut model.params,
                &grads,
                &mut state,
                SgdParams {
                    lr,
                    momentum: cfg.momentum,
                    weight_decay: cfg.weight_decay,
                },
            )?;
        }
        let lambda = mimic.as_ref().map_or(0.0, |m| m.lambda);
        let (ce, fm) = (ce_sum / n as f64, fm_sum / n as f64);
        log.rows.push(MetricRow {
            stage,
            epoch,
            split: "train",
            lr,
            ce,
            fm,
            total: ce + lambda * fm,
            top1: hits as f64 / n as f64,
        });
        let ev = evaluate(&model, val)?;
        if !ev.loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                message: format!("non-finite validation loss {}", ev.loss),
            });
        }
        log.rows.push(MetricRow {
            stage,
            epoch,
            split: "val",
            lr,
            ce: ev.loss,
            fm: 0.0,
            total: ev.loss,
            top1: ev.top1,
        });
        if best.as_ref().is_none_or(|(b, _, _)| ev.top1 > *b) {
            best = Some((ev.top1, epoch, model.params.clone()));
        }
    }
    let (best_val_top1, best_epoch, best_params) = best.expect("at least one epoch");
    let last_params = std::mem::replace(&mut model.params, best_params);
    Ok(TrainOutcome {
        model,
        last_params,
        best_epoch,
        best_val_top1,
        log,
    })
}

/// Trains a fresh model from `cfg.seed` on cross-entropy alone.
pub fn train_stage1(
    config: &BackboneConfig,
    flags: AttentionFlags,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let model = Model::init(config.clone(), flags, cfg.seed, cfg.init)?;
    fit(model, 1, train, val, cfg, cfg.seed, None)
}

/// Trains a student of the teacher's architecture on cross-entropy plus
/// `lambda_fm` times the mimic distance to the teacher's refined features.
/// The student draws its parameters and shuffles from `cfg.seed + 1`.
pub fn train_stage2_mfr(
    config: &BackboneConfig,
    flags: AttentionFlags,
    train: &Dataset,
    val: &Dataset,
    teacher: &TeacherSnapshot,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let t = teacher.model();
    if t.config() != config {
        return Err(config_err!(
            "teacher architecture differs from the student configuration"
        ));
    }
    if t.flags != flags {
        return Err(config_err!(
            "teacher components {:?} differ from the student's {:?}",
            t.flags,
            flags
        ));
    }
    let seed = cfg.seed.wrapping_add(1);
    let student = match cfg.student_init {
        StudentInit::Fresh => Model::init(config.clone(), flags, seed, cfg.init)?,
        StudentInit::Teacher => t.clone(),
    };
    // The teacher is frozen and the clips are fixed, so its features are
    // computed once.
    let targets = train
        .samples
        .iter()
        .map(|s| t.refined_features(&s.clip))
        .collect::<Result<Vec<_>>>()?;
    let mimic = Mimic {
        targets: &targets,
        lambda: cfg.lambda_fm,
        norm: cfg.mimic_norm,
    };
    fit(student, 2, train, val, cfg, seed, Some(mimic))
}
