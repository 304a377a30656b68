//! Central finite-difference gradient checks.
//!
//! The error of a parameter group is the norm-wise relative error
//! `‖g_analytic − g_numeric‖ / max(‖g_analytic‖, ‖g_numeric‖)`, which stays
//! meaningful when individual entries are near zero.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GroupError {
    pub name: String,
    pub rel_error: f64,
    pub coords_checked: usize,
}

/// A differentiable scalar function of a list of input tensors.
pub trait Objective {
    fn eval(&self, tape: &mut Tape, inputs: &[Var]) -> Result<Var>;
}

impl<F> Objective for F
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    fn eval(&self, tape: &mut Tape, inputs: &[Var]) -> Result<Var> {
        self(tape, inputs)
    }
}

fn scalar_at(f: &dyn Objective, inputs: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f.eval(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom < 1e-12 {
        diff
    } else {
        diff / denom
    }
}

/// Checks the gradient of `f` with respect to every named input.
///
/// `max_coords` limits how many coordinates per input are perturbed; when a
/// tensor is larger, a seeded random subset is used.
pub fn check(
    inputs: &[(String, Tensor)],
    f: &dyn Objective,
    step: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<Vec<GroupError>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let loss = f.eval(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut rng = Rng::new(seed);
    let mut values: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut report = Vec::with_capacity(inputs.len());
    for (i, (name, t)) in inputs.iter().enumerate() {
        let analytic_full = grads.get_or_zeros(vars[i], t.shape());
        let coords: Vec<usize> = match max_coords {
            Some(m) if m < t.len() => {
                let mut p = rng.permutation(t.len());
                p.truncate(m);
                p.sort_unstable();
                p
            }
            _ => (0..t.len()).collect(),
        };
        let mut analytic = Vec::with_capacity(coords.len());
        let mut numeric = Vec::with_capacity(coords.len());
        for &j in &coords {
            let orig = values[i].data()[j];
            values[i].data_mut()[j] = orig + step;
            let up = scalar_at(f, &values)?;
            values[i].data_mut()[j] = orig - step;
            let down = scalar_at(f, &values)?;
            values[i].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * step));
            analytic.push(analytic_full.data()[j]);
        }
        report.push(GroupError {
            name: name.clone(),
            rel_error: rel_error(&analytic, &numeric),
            coords_checked: coords.len(),
        });
    }
    Ok(report)
}

pub fn worst(report: &[GroupError]) -> f64 {
    report.iter().map(|g| g.rel_error).fold(0.0, f64::max)
}

/// Random tensor with entries uniform in `[-1, 1)`.
pub fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.uniform_in(-1.0, 1.0))
}

/// Which layer of the stack a suite exercises.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    /// Every differentiable tape operation on its own.
    Op,
    /// The composed attention module.
    W3,
    /// The micro backbone end to end.
    Model,
}

impl Scope {
    /// Largest acceptable relative error.
    pub fn tolerance(self) -> f64 {
        match self {
            Scope::Op | Scope::W3 => 1e-4,
            Scope::Model => 1e-3,
        }
    }
}

impl std::str::FromStr for Scope {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "op" => Ok(Scope::Op),
            "w3" => Ok(Scope::W3),
            "model" => Ok(Scope::Model),
            _ => Err(crate::error::config_err!(
                "unknown scope {s:?} (expected op, w3 or model)"
            )),
        }
    }
}

/// Outcome of one named case of a suite.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseReport {
    pub case: String,
    pub groups: Vec<GroupError>,
}

impl CaseReport {
    pub fn worst(&self) -> f64 {
        worst(&self.groups)
    }
}

/// `Σ y ⊙ R` for a fixed random `R`, so every output entry gets a distinct
/// upstream gradient.
fn probe(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let r = random_tensor(&mut Rng::new(seed), tape.shape(y));
    let r = tape.constant(r);
    let p = tape.mul(y, r)?;
    tape.sum(p)
}

type Forward = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;
type Case = (String, Vec<(String, Tensor)>, Forward);

fn named(shapes: &[(&str, &[usize])], rng: &mut Rng) -> Vec<(String, Tensor)> {
    shapes
        .iter()
        .map(|(n, s)| (n.to_string(), random_tensor(rng, s)))
        .collect()
}

fn op_cases(rng: &mut Rng) -> Vec<Case> {
    use crate::autodiff::{Activation, Elementwise, PoolMode};
    use crate::conv::ConvSpec;
    use crate::train::{feature_mimic_loss, video_classification_loss, MimicNorm};
    let mut cases: Vec<Case> = vec![];
    let mut add = |name: &str, inputs: Vec<(String, Tensor)>, f: Forward| {
        cases.push((name.to_string(), inputs, f));
    };
    add(
        "dense",
        named(&[("x", &[3, 4]), ("w", &[4, 5]), ("b", &[5])], rng),
        Box::new(|t, v| {
            let y = t.dense(v[0], v[1], Some(v[2]))?;
            probe(t, y, 1)
        }),
    );
    let convs: [(&str, Vec<usize>, Vec<usize>, ConvSpec); 5] = [
        ("conv1d", vec![2, 3, 7], vec![4, 3, 3], ConvSpec::same(1, &[1])),
        (
            "conv1d_depthwise",
            vec![1, 4, 6],
            vec![4, 1, 3],
            ConvSpec::same(1, &[1]).with_groups(4),
        ),
        (
            "conv2d_strided",
            vec![2, 2, 7, 6],
            vec![3, 2, 3, 3],
            ConvSpec::same(2, &[1, 1]).with_stride(&[2, 2]),
        ),
        (
            "conv2d_wide_pad",
            vec![2, 2, 3, 2],
            vec![1, 2, 7, 7],
            ConvSpec::same(2, &[3, 3]),
        ),
        (
            "conv3d",
            vec![1, 2, 3, 4, 4],
            vec![2, 2, 3, 3, 3],
            ConvSpec::same(3, &[1, 1, 1]),
        ),
    ];
    for (name, xs, ws, spec) in convs {
        let b = vec![ws[0]];
        add(
            name,
            named(&[("x", &xs), ("w", &ws), ("b", &b)], rng),
            Box::new(move |t, v| {
                let y = t.conv(v[0], v[1], Some(v[2]), &spec)?;
                probe(t, y, 2)
            }),
        );
    }
    for (name, mode) in [
        ("pool_avg", PoolMode::Avg),
        ("pool_max", PoolMode::Max),
        ("pool_sum", PoolMode::Sum),
    ] {
        add(
            name,
            named(&[("x", &[2, 3, 4, 5])], rng),
            Box::new(move |t, v| {
                let y = t.pool(v[0], mode, &[1, 3])?;
                probe(t, y, 3)
            }),
        );
    }
    add(
        "adaptive_avg_pool",
        named(&[("x", &[2, 3, 7, 5])], rng),
        Box::new(|t, v| {
            let y = t.adaptive_avg_pool(v[0], 3, 2)?;
            probe(t, y, 4)
        }),
    );
    for (name, act) in [("sigmoid", Activation::Sigmoid), ("relu", Activation::Relu)] {
        add(
            name,
            named(&[("x", &[4, 6])], rng),
            Box::new(move |t, v| {
                let y = t.activation(v[0], act);
                probe(t, y, 5)
            }),
        );
    }
    for (name, kind) in [("mul_broadcast", Elementwise::Mul), ("add_broadcast", Elementwise::Add)] {
        add(
            name,
            named(&[("a", &[2, 3, 4]), ("b", &[2, 1, 4])], rng),
            Box::new(move |t, v| {
                let y = t.elementwise(v[0], v[1], kind, &[1])?;
                probe(t, y, 6)
            }),
        );
    }
    add(
        "sub_scale",
        named(&[("a", &[3, 4]), ("b", &[3, 4])], rng),
        Box::new(|t, v| {
            let y = t.sub(v[0], v[1])?;
            let y = t.scale(y, -1.7);
            probe(t, y, 7)
        }),
    );
    add(
        "concat_slice",
        named(&[("a", &[2, 3, 2]), ("b", &[2, 1, 2])], rng),
        Box::new(|t, v| {
            let y = t.concat(&[v[0], v[1]], 1)?;
            let y = t.slice(y, 1, 1, 3)?;
            probe(t, y, 8)
        }),
    );
    add(
        "reshape_permute",
        named(&[("x", &[2, 3, 4])], rng),
        Box::new(|t, v| {
            let y = t.permute(v[0], &[2, 0, 1])?;
            let y = t.reshape(y, &[8, 3])?;
            probe(t, y, 9)
        }),
    );
    add(
        "time_shift",
        named(&[("x", &[4, 8, 2, 2])], rng),
        Box::new(|t, v| {
            let y = t.time_shift(v[0], 4)?;
            probe(t, y, 10)
        }),
    );
    add(
        "softmax_cross_entropy",
        named(&[("z", &[3, 5])], rng),
        Box::new(|t, v| t.softmax_cross_entropy(v[0], &[4, 0, 2])),
    );
    add(
        "row_norm_mean",
        named(&[("x", &[3, 2, 3])], rng),
        Box::new(|t, v| {
            let y = t.row_norm(v[0]);
            let y = t.scale(y, 2.0);
            let m = t.mean(y)?;
            let s = t.sum(v[0])?;
            t.add(m, s)
        }),
    );
    add(
        "video_classification_loss",
        named(&[("z", &[4, 6])], rng),
        Box::new(|t, v| video_classification_loss(t, v[0], 5)),
    );
    for (name, norm) in [
        ("feature_mimic_l2", MimicNorm::Euclidean),
        ("feature_mimic_squared", MimicNorm::Squared),
    ] {
        add(
            name,
            named(&[("q", &[2, 3, 2, 2]), ("p", &[2, 3, 2, 2])], rng),
            Box::new(move |t, v| feature_mimic_loss(t, v[0], v[1], norm)),
        );
    }
    cases
}

fn run_cases(cases: Vec<Case>, max_coords: Option<usize>, seed: u64) -> Result<Vec<CaseReport>> {
    cases
        .into_iter()
        .map(|(case, inputs, f)| {
            let groups = check(&inputs, &f, DEFAULT_STEP, max_coords, seed)?;
            Ok(CaseReport { case, groups })
        })
        .collect()
}

/// Every differentiable tape operation, each on random inputs in `[-1, 1)`.
pub fn op_suite(seed: u64) -> Result<Vec<CaseReport>> {
    let mut rng = Rng::new(seed);
    run_cases(op_cases(&mut rng), None, seed)
}

/// The attention module under every switch setting and both temporal
/// mixings; inputs are the feature map and all module parameters.
pub fn w3_suite(seed: u64) -> Result<Vec<CaseReport>> {
    use crate::attention::{apply_w3, AttentionInit, TemporalMixing, W3Config, W3Params, W3Switches};
    use crate::param::{Bound, ParamStore};
    let mut rng = Rng::new(seed);
    let mut cases: Vec<Case> = vec![];
    let settings = [
        (TemporalMixing::Dense, true, true),
        (TemporalMixing::Depthwise, true, true),
        (TemporalMixing::Dense, false, true),
        (TemporalMixing::Dense, true, false),
    ];
    for (mixing, spatial, temporal) in settings {
        let mut store = ParamStore::new();
        let cfg = W3Config::new(8, 4, mixing)?;
        let p = W3Params::init(&mut store, "w3", cfg, &mut rng, AttentionInit::Random)?;
        // random biases too, so no gradient is checked at an all-zero point
        for t in store.tensors_mut() {
            for v in t.data_mut() {
                *v += 0.1 * rng.uniform_in(-1.0, 1.0);
            }
        }
        let mut inputs = vec![("F".to_string(), random_tensor(&mut rng, &[3, 8, 5, 4]))];
        inputs.extend(store.iter().map(|(n, t)| (n.to_string(), t.clone())));
        let switches = W3Switches { spatial, temporal };
        let name = format!(
            "w3_{}{}{}",
            mixing.as_str(),
            if spatial { "" } else { "_no_spatial" },
            if temporal { "" } else { "_no_temporal" }
        );
        cases.push((
            name,
            inputs,
            Box::new(move |t, v| {
                let b = Bound::from_vars(v[1..].to_vec());
                let o = apply_w3(t, &b, &p, v[0], switches)?;
                let y = probe(t, o.features, 11)?;
                let mc = probe(t, o.channel.0, 12)?;
                let y = t.add(y, mc)?;
                match o.spatial {
                    Some(ms) => {
                        let ms = probe(t, ms.0, 13)?;
                        t.add(y, ms)
                    }
                    None => Ok(y),
                }
            }),
        ));
    }
    run_cases(cases, None, seed)
}

/// The smallest backbone that still has every component: two stages of
/// eight channels, two frames at 8×8.
pub fn micro_backbone_config() -> crate::backbone::BackboneConfig {
    use crate::backbone::{BackboneConfig, StageSpec};
    BackboneConfig {
        frames: 2,
        height: 8,
        width: 8,
        num_classes: 3,
        stages: vec![
            StageSpec {
                channels: 8,
                blocks: 1,
                stride: 1,
            },
            StageSpec {
                channels: 8,
                blocks: 1,
                stride: 2,
            },
        ],
        reduction: 4,
        ..BackboneConfig::default()
    }
}

/// Coordinates perturbed per parameter tensor in the model suite.
pub const MODEL_COORDS: usize = 12;

/// The micro backbone with every component active, checked with respect to
/// all parameters on a classification loss.
pub fn model_suite(seed: u64) -> Result<Vec<CaseReport>> {
    use crate::backbone::{forward_backbone, AttentionFlags, Backbone, InitOptions};
    use crate::param::Bound;
    use crate::train::video_classification_loss;
    let cfg = micro_backbone_config();
    let (net, mut store) = Backbone::init(cfg.clone(), seed, InitOptions::default())?;
    let mut rng = Rng::new(crate::rng::derive_seed(seed, 1));
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.05 * rng.uniform_in(-1.0, 1.0);
        }
    }
    let clip = Tensor::from_fn(vec![cfg.frames, cfg.in_channels, cfg.height, cfg.width], |_| {
        rng.uniform()
    });
    let inputs: Vec<(String, Tensor)> = store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    let label = (seed % cfg.num_classes as u64) as usize;
    let f = move |t: &mut Tape, v: &[Var]| {
        let b = Bound::from_vars(v.to_vec());
        let x = t.constant(clip.clone());
        let tr = forward_backbone(t, &b, &net, x, &AttentionFlags::full())?;
        video_classification_loss(t, tr.logits, label)
    };
    let cases: Vec<Case> = vec![("micro_backbone".into(), inputs, Box::new(f))];
    run_cases(cases, Some(MODEL_COORDS), seed)
}

pub fn suite(scope: Scope, seed: u64) -> Result<Vec<CaseReport>> {
    match scope {
        Scope::Op => op_suite(seed),
        Scope::W3 => w3_suite(seed),
        Scope::Model => model_suite(seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_passes_and_mismatch_is_flagged() {
        let x = Tensor::new(vec![3], vec![0.3, -0.7, 1.1]).unwrap();
        let f = |tape: &mut Tape, v: &[Var]| {
            let y = tape.mul(v[0], v[0])?;
            tape.sum(y)
        };
        let r = check(&[("x".into(), x)], &f, DEFAULT_STEP, None, 0).unwrap();
        assert!(r[0].rel_error < 1e-8, "{r:?}");

        assert!(rel_error(&[1.0, 2.0], &[1.0, 2.5]) > 0.1);
        assert_eq!(rel_error(&[0.0], &[0.0]), 0.0);
    }
}
