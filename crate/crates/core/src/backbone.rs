//! Toy staged residual video backbone.
//!
//! A stem convolution is followed by `N` stages of residual blocks. Each
//! block temporally shifts its input, runs two 3×3 convolutions, optionally
//! passes the result through a W3 module, and adds the shortcut. After the
//! last stage, the spatial masks of every stage (last block of each) are
//! pooled to the final resolution, concatenated, mapped by a 1×1
//! convolution with ReLU and added to the final features. Per-frame logits
//! come from global average pooling and a linear classifier.

use crate::attention::{
    apply_w3, AttentionInit, ChannelAttention, SpatialAttention, TemporalMixing, W3Config, W3Params, W3Switches,
    DEFAULT_REDUCTION,
};
use crate::autodiff::{PoolMode, Tape, Var};
use crate::conv::ConvSpec;
use crate::error::{config_err, Error, Result};
use crate::param::{fan_in_uniform, Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DEFAULT_FOLD_DIV: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub channels: usize,
    pub blocks: usize,
    /// Spatial stride applied by the first block of the stage.
    pub stride: usize,
}

/// Where the attention module sits inside a residual block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum W3Placement {
    /// Wraps the convolution path before the residual addition.
    PreAdd,
    /// Wraps the block output after the addition.
    PostAdd,
}

impl W3Placement {
    pub fn as_str(self) -> &'static str {
        match self {
            W3Placement::PreAdd => "pre_add",
            W3Placement::PostAdd => "post_add",
        }
    }
}

impl std::str::FromStr for W3Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre_add" => Ok(W3Placement::PreAdd),
            "post_add" => Ok(W3Placement::PostAdd),
            other => Err(config_err!("unknown attention placement {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub stages: Vec<StageSpec>,
    pub reduction: usize,
    pub fold_div: usize,
    pub temporal_mixing: TemporalMixing,
    pub placement: W3Placement,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            height: 32,
            width: 32,
            in_channels: 3,
            num_classes: 8,
            stages: [8, 16, 32, 64]
                .iter()
                .zip([1, 2, 2, 2])
                .map(|(&channels, stride)| StageSpec {
                    channels,
                    blocks: 2,
                    stride,
                })
                .collect(),
            reduction: DEFAULT_REDUCTION,
            fold_div: DEFAULT_FOLD_DIV,
            temporal_mixing: TemporalMixing::Dense,
            placement: W3Placement::PreAdd,
        }
    }
}

impl BackboneConfig {
    pub fn total_stride(&self) -> usize {
        self.stages.iter().map(|s| s.stride).product()
    }

    /// Spatial size of the last stage's feature map.
    pub fn final_size(&self) -> (usize, usize) {
        let s = self.total_stride();
        (self.height / s, self.width / s)
    }

    pub fn final_channels(&self) -> usize {
        self.stages.last().map_or(0, |s| s.channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() < 2 {
            return Err(config_err!(
                "need at least 2 stages for multi-scale refinement, got {}",
                self.stages.len()
            ));
        }
        if self.frames == 0 || self.num_classes == 0 || self.in_channels == 0 {
            return Err(config_err!("frames, classes and input channels must be positive"));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.blocks == 0 || s.channels == 0 {
                return Err(config_err!("stage {} needs positive channels and blocks", i + 1));
            }
            if !matches!(s.stride, 1 | 2) {
                return Err(config_err!("stage {} stride must be 1 or 2, got {}", i + 1, s.stride));
            }
            if s.channels % self.fold_div != 0 {
                return Err(config_err!(
                    "fold divisor {} does not divide stage {} width {}",
                    self.fold_div,
                    i + 1,
                    s.channels
                ));
            }
            W3Config::new(s.channels, self.reduction, self.temporal_mixing)?;
        }
        let total = self.total_stride();
        if !self.height.is_multiple_of(total) || !self.width.is_multiple_of(total) {
            return Err(config_err!(
                "input {}x{} not divisible by cumulative stride {total}",
                self.height,
                self.width
            ));
        }
        Ok(())
    }
}

/// Which model components are active (the ablation axes).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionFlags {
    /// Attention modules inside residual blocks.
    pub w3: bool,
    /// Attention-guided feature refinement.
    pub afr: bool,
    /// Spatio-temporal sub-module.
    pub spatial: bool,
    /// Both temporal CNNs.
    pub temporal: bool,
}

impl AttentionFlags {
    pub fn full() -> Self {
        Self {
            w3: true,
            afr: true,
            spatial: true,
            temporal: true,
        }
    }

    /// Plain time-shift residual network.
    pub fn baseline() -> Self {
        Self {
            w3: false,
            afr: false,
            spatial: false,
            temporal: false,
        }
    }

    /// Refinement needs spatial masks, so it only runs when they exist.
    pub fn refinement_active(&self) -> bool {
        self.afr && self.w3 && self.spatial
    }

    fn switches(&self) -> W3Switches {
        W3Switches {
            spatial: self.spatial,
            temporal: self.temporal,
        }
    }
}

impl Default for AttentionFlags {
    fn default() -> Self {
        Self::full()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub conv1_w: ParamId,
    pub conv1_b: ParamId,
    pub conv2_w: ParamId,
    pub conv2_b: ParamId,
    /// 1×1 projection shortcut, present when shape changes.
    pub proj: Option<(ParamId, ParamId)>,
    pub w3: W3Params,
}

/// Parameter layout of the whole network. The tensors live in a separate
/// [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub stem_w: ParamId,
    pub stem_b: ParamId,
    pub stages: Vec<Vec<BlockParams>>,
    pub refine_w: ParamId,
    pub refine_b: ParamId,
    pub classifier_w: ParamId,
    pub classifier_b: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitOptions {
    pub attention: AttentionInit,
    /// Gain of the second convolution of each residual path.
    pub residual_gain: f64,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self {
            attention: AttentionInit::Random,
            residual_gain: 1.0,
        }
    }
}

impl Backbone {
    /// Builds the layout and a freshly initialised parameter store.
    pub fn init(config: BackboneConfig, seed: u64, opts: InitOptions) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let relu = std::f64::consts::SQRT_2;
        let c0 = config.stages[0].channels;
        let cin = config.in_channels;
        let stem_w = store.add(
            "backbone.stem.w",
            fan_in_uniform(&mut rng, &[c0, cin, 3, 3], cin * 9, relu),
        )?;
        let stem_b = store.add("backbone.stem.b", Tensor::zeros(vec![c0]))?;

        let mut stages = Vec::with_capacity(config.stages.len());
        let mut prev = c0;
        for (si, stage) in config.stages.iter().enumerate() {
            let mut blocks = Vec::with_capacity(stage.blocks);
            for bi in 0..stage.blocks {
                let stride = if bi == 0 { stage.stride } else { 1 };
                let (ci, co) = (prev, stage.channels);
                let name = |t: &str| format!("backbone.stage{}.block{}.{t}", si + 1, bi + 1);
                let conv1_w = store.add(name("conv1.w"), fan_in_uniform(&mut rng, &[co, ci, 3, 3], ci * 9, relu))?;
                let conv1_b = store.add(name("conv1.b"), Tensor::zeros(vec![co]))?;
                let conv2_w = store.add(
                    name("conv2.w"),
                    fan_in_uniform(&mut rng, &[co, co, 3, 3], co * 9, opts.residual_gain),
                )?;
                let conv2_b = store.add(name("conv2.b"), Tensor::zeros(vec![co]))?;
                let proj = if stride != 1 || ci != co {
                    let w = store.add(name("proj.w"), fan_in_uniform(&mut rng, &[co, ci, 1, 1], ci, 1.0))?;
                    let b = store.add(name("proj.b"), Tensor::zeros(vec![co]))?;
                    Some((w, b))
                } else {
                    None
                };
                let w3cfg = W3Config::new(co, config.reduction, config.temporal_mixing)?;
                let w3 = W3Params::init(
                    &mut store,
                    &format!("w3.{}.{}", si + 1, bi + 1),
                    w3cfg,
                    &mut rng,
                    opts.attention,
                )?;
                blocks.push(BlockParams {
                    in_channels: ci,
                    out_channels: co,
                    stride,
                    conv1_w,
                    conv1_b,
                    conv2_w,
                    conv2_b,
                    proj,
                    w3,
                });
                prev = co;
            }
            stages.push(blocks);
        }

        let n = config.stages.len();
        let cl = config.final_channels();
        let refine_w = store.add("backbone.refine.w", fan_in_uniform(&mut rng, &[cl, n, 1, 1], n, relu))?;
        let refine_b = store.add("backbone.refine.b", Tensor::zeros(vec![cl]))?;
        let k = config.num_classes;
        let classifier_w = store.add("backbone.classifier.w", fan_in_uniform(&mut rng, &[cl, k], cl, 1.0))?;
        let classifier_b = store.add("backbone.classifier.b", Tensor::zeros(vec![k]))?;
        Ok((
            Self {
                config,
                stem_w,
                stem_b,
                stages,
                refine_w,
                refine_b,
                classifier_w,
                classifier_b,
            },
            store,
        ))
    }

    /// Every attention parameter of the given 0-based stage.
    pub fn stage_attention_params(&self, stage: usize) -> Vec<ParamId> {
        self.stages[stage].iter().flat_map(|b| b.w3.ids()).collect()
    }
}

/// Masks and intermediate features recorded during a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `[stage][block]` spatial masks, `None` where none was computed.
    pub spatial_masks: Vec<Vec<Option<SpatialAttention>>>,
    pub channel_masks: Vec<Vec<Option<ChannelAttention>>>,
    /// Final-stage features before refinement, `(T, C_l, H_l, W_l)`.
    pub features: Var,
    /// Features after refinement (equal to `features` without refinement).
    pub refined: Var,
    /// Per-frame logits `(T, K)`.
    pub logits: Var,
}

impl ForwardTrace {
    /// The last block's spatial mask of every stage.
    pub fn stage_summary_masks(&self) -> Vec<Option<SpatialAttention>> {
        trace_summary(&self.spatial_masks)
    }
}

fn trace_summary(masks: &[Vec<Option<SpatialAttention>>]) -> Vec<Option<SpatialAttention>> {
    masks.iter().map(|blocks| blocks.last().copied().flatten()).collect()
}

pub fn time_shift(tape: &mut Tape, f: Var, fold_div: usize) -> Result<Var> {
    tape.time_shift(f, fold_div)
}

/// One residual block:
/// `F_out = shortcut(F) + W3(conv(relu(conv(shift(F)))))`.
pub fn residual_block_forward(
    tape: &mut Tape,
    b: &Bound,
    block: &BlockParams,
    fold_div: usize,
    placement: W3Placement,
    flags: &AttentionFlags,
    f: Var,
) -> Result<(Var, Option<crate::attention::W3Output>)> {
    let s = block.stride;
    let conv3 = ConvSpec::same(2, &[1, 1]).with_stride(&[s, s]);
    let shifted = tape.time_shift(f, fold_div)?;
    let path = tape.conv(shifted, b[block.conv1_w], Some(b[block.conv1_b]), &conv3)?;
    let path = tape.relu(path);
    let path = tape.conv(
        path,
        b[block.conv2_w],
        Some(b[block.conv2_b]),
        &ConvSpec::same(2, &[1, 1]),
    )?;
    let mut attn = None;
    let path = if flags.w3 && placement == W3Placement::PreAdd {
        let o = apply_w3(tape, b, &block.w3, path, flags.switches())?;
        attn = Some(o);
        o.features
    } else {
        path
    };
    let shortcut = match block.proj {
        Some((w, bias)) => {
            let spec = ConvSpec::same(2, &[0, 0]).with_stride(&[s, s]);
            tape.conv(f, b[w], Some(b[bias]), &spec)?
        }
        None => f,
    };
    let out = tape.add(shortcut, path)?;
    if flags.w3 && placement == W3Placement::PostAdd {
        let o = apply_w3(tape, b, &block.w3, out, flags.switches())?;
        return Ok((o.features, Some(o)));
    }
    Ok((out, attn))
}

/// Pools one spatial mask per stage to `target` and concatenates them along
/// a new channel axis: `(T, N, H_l, W_l)`.
pub fn aggregate_stage_attentions(
    tape: &mut Tape,
    stage_masks: &[Option<SpatialAttention>],
    target: (usize, usize),
) -> Result<Var> {
    let mut pooled = Vec::with_capacity(stage_masks.len());
    for (i, m) in stage_masks.iter().enumerate() {
        let m = m.ok_or_else(|| config_err!("stage {} has no spatial attention mask to aggregate", i + 1))?;
        let s = tape.shape(m.0).to_vec();
        let x = tape.reshape(m.0, &[s[0], 1, s[1], s[2]])?;
        pooled.push(tape.adaptive_avg_pool(x, target.0, target.1)?);
    }
    tape.concat(&pooled, 1)
}

/// `y = x + relu(conv1×1(m_ms))`.
pub fn refine_features(tape: &mut Tape, x: Var, m_ms: Var, weight: Var, bias: Var) -> Result<Var> {
    let r = tape.conv(m_ms, weight, Some(bias), &ConvSpec::same(2, &[0, 0]))?;
    let r = tape.relu(r);
    tape.add(x, r)
}

pub fn forward_backbone(
    tape: &mut Tape,
    b: &Bound,
    net: &Backbone,
    clip: Var,
    flags: &AttentionFlags,
) -> Result<ForwardTrace> {
    let cfg = &net.config;
    let want = [cfg.frames, cfg.in_channels, cfg.height, cfg.width];
    if tape.shape(clip) != want {
        return Err(Error::dim("forward_backbone", tape.shape(clip), &want));
    }
    cfg.validate()?;
    let x = tape.conv(clip, b[net.stem_w], Some(b[net.stem_b]), &ConvSpec::same(2, &[1, 1]))?;
    let mut f = tape.relu(x);

    let mut spatial_masks = Vec::with_capacity(net.stages.len());
    let mut channel_masks = Vec::with_capacity(net.stages.len());
    for stage in &net.stages {
        let mut sm = Vec::with_capacity(stage.len());
        let mut cm = Vec::with_capacity(stage.len());
        for block in stage {
            let (out, attn) = residual_block_forward(tape, b, block, cfg.fold_div, cfg.placement, flags, f)?;
            sm.push(attn.and_then(|a| a.spatial));
            cm.push(attn.map(|a| a.channel));
            f = out;
        }
        spatial_masks.push(sm);
        channel_masks.push(cm);
    }

    let features = f;
    let refined = if flags.refinement_active() {
        let m_ms = aggregate_stage_attentions(tape, &trace_summary(&spatial_masks), cfg.final_size())?;
        refine_features(tape, features, m_ms, b[net.refine_w], b[net.refine_b])?
    } else {
        features
    };

    let [t, c] = [cfg.frames, cfg.final_channels()];
    let pooled = tape.pool(refined, PoolMode::Avg, &[2, 3])?;
    let pooled = tape.reshape(pooled, &[t, c])?;
    let logits = tape.dense(pooled, b[net.classifier_w], Some(b[net.classifier_b]))?;
    Ok(ForwardTrace {
        spatial_masks,
        channel_masks,
        features,
        refined,
        logits,
    })
}
