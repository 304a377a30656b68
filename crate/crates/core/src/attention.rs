//! The what-where-when attention module.
//!
//! A `(T, C, H, W)` feature map is attended in two sequential steps. The
//! channel-temporal step pools each frame spatially, runs a shared
//! bottleneck MLP over the average and max descriptors, and refines the
//! resulting per-frame channel masks with a two-layer temporal 1D CNN. The
//! spatio-temporal step pools the channel-attended map over channels, runs a
//! 7×7 convolution per frame, and refines the stacked frame masks with a
//! two-layer 3×3×3 volume CNN. Each step ends in a sigmoid, so the module
//! stores `T·(C + H·W)` mask values instead of `T·C·H·W`.

use crate::autodiff::{PoolMode, Tape, Var};
use crate::conv::ConvSpec;
use crate::error::{config_err, Error, Result};
use crate::param::{fan_in_uniform, Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DEFAULT_REDUCTION: usize = 16;
pub const TEMPORAL_KERNEL: usize = 3;
pub const SPATIAL_KERNEL: usize = 7;
pub const VOLUME_KERNEL: usize = 3;
pub const VOLUME_HIDDEN: usize = 4;

/// How the temporal CNN of the channel branch mixes channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TemporalMixing {
    /// Full `C → C` 1D convolutions over time.
    Dense,
    /// One temporal kernel per channel (`groups = C`).
    Depthwise,
}

impl TemporalMixing {
    pub fn groups(self, channels: usize) -> usize {
        match self {
            TemporalMixing::Dense => 1,
            TemporalMixing::Depthwise => channels,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TemporalMixing::Dense => "dense",
            TemporalMixing::Depthwise => "depthwise",
        }
    }
}

impl std::str::FromStr for TemporalMixing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(TemporalMixing::Dense),
            "depthwise" => Ok(TemporalMixing::Depthwise),
            other => Err(config_err!("unknown temporal mixing {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct W3Config {
    pub channels: usize,
    /// Effective reduction ratio, already clamped to `channels`.
    pub reduction: usize,
    pub temporal_mixing: TemporalMixing,
}

impl W3Config {
    /// Uses `min(reduction, channels)` as the effective ratio, which must
    /// divide `channels`.
    pub fn new(channels: usize, reduction: usize, temporal_mixing: TemporalMixing) -> Result<Self> {
        if channels == 0 || reduction == 0 {
            return Err(config_err!("channels and reduction ratio must be positive"));
        }
        let r = reduction.min(channels);
        if !channels.is_multiple_of(r) {
            return Err(config_err!("reduction ratio {r} does not divide {channels} channels"));
        }
        Ok(Self {
            channels,
            reduction: r,
            temporal_mixing,
        })
    }

    pub fn hidden(&self) -> usize {
        self.channels / self.reduction
    }
}

/// Which parts of the module run. The channel frame-level step always runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct W3Switches {
    pub spatial: bool,
    pub temporal: bool,
}

impl Default for W3Switches {
    fn default() -> Self {
        Self {
            spatial: true,
            temporal: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionInit {
    /// Fan-in scaled uniform weights, zero biases.
    Random,
    /// Everything zero: both masks come out as exactly 0.5.
    Zero,
}

/// Parameter handles of one attention module.
#[derive(Clone, Debug, PartialEq)]
pub struct W3Params {
    pub config: W3Config,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
    pub temporal_w1: ParamId,
    pub temporal_b1: ParamId,
    pub temporal_w2: ParamId,
    pub temporal_b2: ParamId,
    pub spatial_w: ParamId,
    pub spatial_b: ParamId,
    pub volume_w1: ParamId,
    pub volume_b1: ParamId,
    pub volume_w2: ParamId,
    pub volume_b2: ParamId,
}

impl W3Params {
    /// Registers the module's tensors under `"<prefix>.<tensor>"`.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        config: W3Config,
        rng: &mut Rng,
        init: AttentionInit,
    ) -> Result<Self> {
        let c = config.channels;
        let h = config.hidden();
        let cg = c / config.temporal_mixing.groups(c);
        let tk = TEMPORAL_KERNEL;
        let sk = SPATIAL_KERNEL;
        let vk = VOLUME_KERNEL;
        let vh = VOLUME_HIDDEN;
        let relu_gain = std::f64::consts::SQRT_2;
        let mut weight = |shape: &[usize], fan_in: usize, gain: f64| match init {
            AttentionInit::Random => fan_in_uniform(rng, shape, fan_in, gain),
            AttentionInit::Zero => Tensor::zeros(shape.to_vec()),
        };
        let w1 = weight(&[c, h], c, relu_gain);
        let w2 = weight(&[h, c], h, 1.0);
        let tw1 = weight(&[c, cg, tk], cg * tk, relu_gain);
        let tw2 = weight(&[c, cg, tk], cg * tk, 1.0);
        let sw = weight(&[1, 2, sk, sk], 2 * sk * sk, 1.0);
        let vw1 = weight(&[vh, 1, vk, vk, vk], vk * vk * vk, relu_gain);
        let vw2 = weight(&[1, vh, vk, vk, vk], vh * vk * vk * vk, 1.0);
        let mut add = |name: &str, t: Tensor| store.add(format!("{prefix}.{name}"), t);
        Ok(Self {
            mlp_w1: add("mlp.w1", w1)?,
            mlp_b1: add("mlp.b1", Tensor::zeros(vec![h]))?,
            mlp_w2: add("mlp.w2", w2)?,
            mlp_b2: add("mlp.b2", Tensor::zeros(vec![c]))?,
            temporal_w1: add("temporal.w1", tw1)?,
            temporal_b1: add("temporal.b1", Tensor::zeros(vec![c]))?,
            temporal_w2: add("temporal.w2", tw2)?,
            temporal_b2: add("temporal.b2", Tensor::zeros(vec![c]))?,
            spatial_w: add("spatial.w", sw)?,
            spatial_b: add("spatial.b", Tensor::zeros(vec![1]))?,
            volume_w1: add("volume.w1", vw1)?,
            volume_b1: add("volume.b1", Tensor::zeros(vec![vh]))?,
            volume_w2: add("volume.w2", vw2)?,
            volume_b2: add("volume.b2", Tensor::zeros(vec![1]))?,
            config,
        })
    }

    /// All parameter handles in registration order.
    pub fn ids(&self) -> [ParamId; 14] {
        [
            self.mlp_w1,
            self.mlp_b1,
            self.mlp_w2,
            self.mlp_b2,
            self.temporal_w1,
            self.temporal_b1,
            self.temporal_w2,
            self.temporal_b2,
            self.spatial_w,
            self.spatial_b,
            self.volume_w1,
            self.volume_b1,
            self.volume_w2,
            self.volume_b2,
        ]
    }
}

/// Channel-temporal mask `M^c`, shape `(T, C)`, values in `(0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelAttention(pub Var);

/// Spatio-temporal mask `M^s`, shape `(T, H, W)`, values in `(0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpatialAttention(pub Var);

#[derive(Clone, Copy, Debug)]
pub struct W3Output {
    pub features: Var,
    pub channel: ChannelAttention,
    /// `None` when the spatial step is switched off.
    pub spatial: Option<SpatialAttention>,
}

fn expect_rank4(tape: &Tape, f: Var, op: &'static str) -> Result<[usize; 4]> {
    let s = tape.shape(f);
    if s.len() != 4 {
        return Err(Error::dim(op, s, &[0, 0, 0, 0]));
    }
    Ok([s[0], s[1], s[2], s[3]])
}

/// Per-frame spatial average and max: two `(T, C)` descriptors.
pub fn squeeze_spatial_descriptors(tape: &mut Tape, f: Var) -> Result<(Var, Var)> {
    let [t, c, _, _] = expect_rank4(tape, f, "squeeze_spatial_descriptors")?;
    let avg = tape.pool(f, PoolMode::Avg, &[2, 3])?;
    let max = tape.pool(f, PoolMode::Max, &[2, 3])?;
    Ok((tape.reshape(avg, &[t, c])?, tape.reshape(max, &[t, c])?))
}

fn shared_mlp(tape: &mut Tape, b: &Bound, p: &W3Params, x: Var) -> Result<Var> {
    let h = tape.dense(x, b[p.mlp_w1], Some(b[p.mlp_b1]))?;
    let h = tape.relu(h);
    tape.dense(h, b[p.mlp_w2], Some(b[p.mlp_b2]))
}

/// `σ(MLP(d_avg) + MLP(d_max))` with one set of MLP weights, per frame.
pub fn channel_frame_attention(tape: &mut Tape, b: &Bound, p: &W3Params, d_avg: Var, d_max: Var) -> Result<Var> {
    let c = p.config.channels;
    for d in [d_avg, d_max] {
        let s = tape.shape(d);
        if s.len() != 2 || s[1] != c {
            return Err(Error::dim("channel_frame_attention", s, &[0, c]));
        }
    }
    let a = shared_mlp(tape, b, p, d_avg)?;
    let m = shared_mlp(tape, b, p, d_max)?;
    let s = tape.add(a, m)?;
    Ok(tape.sigmoid(s))
}

/// Refines `(T, C)` frame masks with two kernel-3 1D convolutions over time
/// (ReLU between), then a sigmoid.
pub fn channel_temporal_attention(
    tape: &mut Tape,
    b: &Bound,
    p: &W3Params,
    frame_masks: Var,
) -> Result<ChannelAttention> {
    let s = tape.shape(frame_masks).to_vec();
    let c = p.config.channels;
    if s.len() != 2 || s[1] != c {
        return Err(Error::dim("channel_temporal_attention", &s, &[0, c]));
    }
    let t = s[0];
    let spec = ConvSpec::same(1, &[TEMPORAL_KERNEL / 2]).with_groups(p.config.temporal_mixing.groups(c));
    let x = tape.permute(frame_masks, &[1, 0])?;
    let x = tape.reshape(x, &[1, c, t])?;
    let x = tape.conv(x, b[p.temporal_w1], Some(b[p.temporal_b1]), &spec)?;
    let x = tape.relu(x);
    let x = tape.conv(x, b[p.temporal_w2], Some(b[p.temporal_b2]), &spec)?;
    let x = tape.sigmoid(x);
    let x = tape.reshape(x, &[c, t])?;
    Ok(ChannelAttention(tape.permute(x, &[1, 0])?))
}

/// Per-position channel average and max: two `(T, 1, H, W)` maps.
pub fn squeeze_channel_descriptors(tape: &mut Tape, f: Var) -> Result<(Var, Var)> {
    expect_rank4(tape, f, "squeeze_channel_descriptors")?;
    let avg = tape.pool(f, PoolMode::Avg, &[1])?;
    let max = tape.pool(f, PoolMode::Max, &[1])?;
    Ok((avg, max))
}

/// `σ(conv7×7([d_avg, d_max]))` per frame, giving `(T, 1, H, W)`.
pub fn spatial_frame_attention(tape: &mut Tape, b: &Bound, p: &W3Params, d_avg: Var, d_max: Var) -> Result<Var> {
    let x = tape.concat(&[d_avg, d_max], 1)?;
    let pad = SPATIAL_KERNEL / 2;
    let spec = ConvSpec::same(2, &[pad, pad]);
    let x = tape.conv(x, b[p.spatial_w], Some(b[p.spatial_b]), &spec)?;
    Ok(tape.sigmoid(x))
}

/// Stacks `(T, 1, H, W)` frame masks into one `(T, H, W)` volume and refines
/// it with two 3×3×3 convolutions (1 → 4 → 1 channels, ReLU between), then
/// a sigmoid.
pub fn spatio_temporal_attention(
    tape: &mut Tape,
    b: &Bound,
    p: &W3Params,
    frame_masks: Var,
) -> Result<SpatialAttention> {
    let [t, one, h, w] = expect_rank4(tape, frame_masks, "spatio_temporal_attention")?;
    if one != 1 {
        return Err(Error::dim(
            "spatio_temporal_attention",
            tape.shape(frame_masks),
            &[t, 1, h, w],
        ));
    }
    let pad = VOLUME_KERNEL / 2;
    let spec = ConvSpec::same(3, &[pad, pad, pad]);
    let x = tape.reshape(frame_masks, &[1, 1, t, h, w])?;
    let x = tape.conv(x, b[p.volume_w1], Some(b[p.volume_b1]), &spec)?;
    let x = tape.relu(x);
    let x = tape.conv(x, b[p.volume_w2], Some(b[p.volume_b2]), &spec)?;
    let x = tape.sigmoid(x);
    Ok(SpatialAttention(tape.reshape(x, &[t, h, w])?))
}

/// Full module: `F^c = M^c ⊗ F` over `(H, W)`, then `F^s = M^s ⊗ F^c` over
/// `C`, with `M^s` computed from `F^c`.
pub fn apply_w3(tape: &mut Tape, b: &Bound, p: &W3Params, f: Var, switches: W3Switches) -> Result<W3Output> {
    let [t, c, h, w] = expect_rank4(tape, f, "apply_w3")?;
    if c != p.config.channels {
        return Err(Error::dim("apply_w3", tape.shape(f), &[t, p.config.channels, h, w]));
    }
    let (d_avg, d_max) = squeeze_spatial_descriptors(tape, f)?;
    let frame = channel_frame_attention(tape, b, p, d_avg, d_max)?;
    let channel = if switches.temporal {
        channel_temporal_attention(tape, b, p, frame)?
    } else {
        ChannelAttention(frame)
    };
    let mc = tape.reshape(channel.0, &[t, c, 1, 1])?;
    let fc = tape.elementwise(f, mc, crate::Elementwise::Mul, &[2, 3])?;
    if !switches.spatial {
        return Ok(W3Output {
            features: fc,
            channel,
            spatial: None,
        });
    }
    let (s_avg, s_max) = squeeze_channel_descriptors(tape, fc)?;
    let frame = spatial_frame_attention(tape, b, p, s_avg, s_max)?;
    let spatial = if switches.temporal {
        spatio_temporal_attention(tape, b, p, frame)?
    } else {
        SpatialAttention(tape.reshape(frame, &[t, h, w])?)
    };
    let ms = tape.reshape(spatial.0, &[t, 1, h, w])?;
    let fs = tape.elementwise(fc, ms, crate::Elementwise::Mul, &[1])?;
    Ok(W3Output {
        features: fs,
        channel,
        spatial: Some(spatial),
    })
}

/// Number of stored mask values for a `(T, C, H, W)` input.
pub fn mask_elements(t: usize, c: usize, h: usize, w: usize) -> usize {
    t * (c + h * w)
}

/// Convenience forward pass on plain tensors: returns `(F_out, M^c, M^s)`.
pub fn apply_w3_tensors(
    store: &ParamStore,
    p: &W3Params,
    f: &Tensor,
    switches: W3Switches,
) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    let mut tape = Tape::new();
    let b = store.bind(&mut tape, false);
    let x = tape.constant(f.clone());
    let out = apply_w3(&mut tape, &b, p, x, switches)?;
    Ok((
        tape.value(out.features).clone(),
        tape.value(out.channel.0).clone(),
        out.spatial.map(|s| tape.value(s.0).clone()),
    ))
}
