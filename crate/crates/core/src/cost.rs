//! Analytic FLOP and parameter accounting.
//!
//! Convention: one multiply-accumulate counts as one FLOP. Headline totals
//! include convolutions, dense layers and the pairwise products of
//! non-local blocks. Pooling, activations, normalisation and elementwise
//! products go to a separate auxiliary column. All counts are exact
//! integers.

use std::fmt::Write as _;

use crate::attention::{
    TemporalMixing, W3Config, DEFAULT_REDUCTION, SPATIAL_KERNEL, TEMPORAL_KERNEL, VOLUME_HIDDEN, VOLUME_KERNEL,
};
use crate::backbone::{AttentionFlags, BackboneConfig};
use crate::error::{config_err, contract, Result};

pub const CONVENTION: &str = "1 multiply-accumulate = 1 FLOP; headline counts conv, dense and pairwise products; \
pooling, activations, normalisation and elementwise ops are in the aux column";

/// Output classes of the ResNet-50 head used for the reference counts.
pub const DEFAULT_CLASSES: usize = 174;
pub const DEFAULT_RESOLUTION: usize = 224;
/// Non-local blocks needed to land on the reference cost (all in res4).
pub const DEFAULT_NONLOCAL_BLOCKS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// Input `[C_in, spatial..]`, kernel `[k..]`, output `[C_out, spatial..]`.
    Conv,
    /// Input `[rows, D_in]`, output `[D_out]`.
    Dense,
    /// Reads every input element once.
    Pool,
    /// One operation per input element.
    Elementwise,
    /// Affinity and aggregation products over all positions: input
    /// `[positions, channels]`.
    Pairwise,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Dense => "dense",
            LayerKind::Pool => "pool",
            LayerKind::Elementwise => "elementwise",
            LayerKind::Pairwise => "pairwise",
        }
    }

    pub fn is_headline(self) -> bool {
        matches!(self, LayerKind::Conv | LayerKind::Dense | LayerKind::Pairwise)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerDesc {
    pub name: String,
    /// Reporting group, e.g. `res3`.
    pub stage: String,
    pub kind: LayerKind,
    pub input: Vec<usize>,
    pub kernel: Vec<usize>,
    pub output: Vec<usize>,
    pub groups: usize,
    pub bias: bool,
    /// Independent applications, e.g. one per frame.
    pub count: u64,
}

impl LayerDesc {
    fn base(name: String, stage: &str, kind: LayerKind, input: Vec<usize>, count: u64) -> Self {
        Self {
            name,
            stage: stage.to_string(),
            kind,
            input,
            kernel: vec![],
            output: vec![],
            groups: 1,
            bias: false,
            count,
        }
    }

    /// Convolution over `input = [C_in, spatial..]` producing
    /// `output = [C_out, spatial..]`.
    pub fn conv(
        name: impl Into<String>,
        stage: &str,
        input: Vec<usize>,
        kernel: Vec<usize>,
        output: Vec<usize>,
        count: u64,
    ) -> Self {
        Self {
            kernel,
            output,
            ..Self::base(name.into(), stage, LayerKind::Conv, input, count)
        }
    }

    pub fn dense(name: impl Into<String>, stage: &str, rows: usize, din: usize, dout: usize, count: u64) -> Self {
        Self {
            output: vec![dout],
            bias: true,
            ..Self::base(name.into(), stage, LayerKind::Dense, vec![rows, din], count)
        }
    }

    pub fn pool(name: impl Into<String>, stage: &str, input: Vec<usize>, count: u64) -> Self {
        Self::base(name.into(), stage, LayerKind::Pool, input, count)
    }

    pub fn elementwise(name: impl Into<String>, stage: &str, input: Vec<usize>, count: u64) -> Self {
        Self::base(name.into(), stage, LayerKind::Elementwise, input, count)
    }

    pub fn pairwise(name: impl Into<String>, stage: &str, positions: usize, channels: usize, count: u64) -> Self {
        Self::base(
            name.into(),
            stage,
            LayerKind::Pairwise,
            vec![positions, channels],
            count,
        )
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    fn validate(&self) -> Result<()> {
        let all = self.input.iter().chain(&self.kernel).chain(&self.output);
        if self.input.is_empty() || self.count == 0 || self.groups == 0 || all.clone().any(|&e| e == 0) {
            return Err(contract!("layer {}: extents must be positive", self.name));
        }
        match self.kind {
            LayerKind::Conv => {
                if self.output.len() != self.kernel.len() + 1 || self.input.len() != self.output.len() {
                    return Err(contract!("layer {}: conv ranks disagree", self.name));
                }
                if !self.input[0].is_multiple_of(self.groups) || !self.output[0].is_multiple_of(self.groups) {
                    return Err(contract!("layer {}: groups must divide both channel counts", self.name));
                }
            }
            LayerKind::Dense | LayerKind::Pairwise if self.input.len() != 2 => {
                return Err(contract!("layer {}: expects a 2-D input", self.name));
            }
            LayerKind::Dense if self.output.len() != 1 => {
                return Err(contract!("layer {}: dense output is one extent", self.name));
            }
            _ => {}
        }
        Ok(())
    }
}

fn prod(xs: &[usize]) -> u64 {
    xs.iter().map(|&x| x as u64).product()
}

/// FLOPs of one layer under the module convention (headline or auxiliary
/// depending on its kind).
pub fn layer_flops(d: &LayerDesc) -> Result<u64> {
    d.validate()?;
    let one = match d.kind {
        LayerKind::Conv => {
            let cin = d.input[0] as u64 / d.groups as u64;
            d.output[0] as u64 * cin * prod(&d.kernel) * prod(&d.output[1..])
        }
        LayerKind::Dense => prod(&d.input) * d.output[0] as u64,
        LayerKind::Pool | LayerKind::Elementwise => prod(&d.input),
        LayerKind::Pairwise => {
            let (p, c) = (d.input[0] as u64, d.input[1] as u64);
            2 * p * p * c
        }
    };
    Ok(one * d.count)
}

pub fn layer_params(d: &LayerDesc) -> u64 {
    match d.kind {
        LayerKind::Conv => {
            let w = d.output[0] as u64 * (d.input[0] / d.groups) as u64 * prod(&d.kernel);
            w + if d.bias { d.output[0] as u64 } else { 0 }
        }
        LayerKind::Dense => {
            let w = d.input[1] as u64 * d.output[0] as u64;
            w + if d.bias { d.output[0] as u64 } else { 0 }
        }
        _ => 0,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerCost {
    pub desc: LayerDesc,
    pub flops: u64,
    pub aux: u64,
    pub params: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageCost {
    pub stage: String,
    pub flops: u64,
    pub aux: u64,
    pub params: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub title: String,
    pub frames: usize,
    pub layers: Vec<LayerCost>,
    /// Headline total of the reference network, when there is one.
    pub base_flops: Option<u64>,
    /// Free choices that shape the count, printed with the report.
    pub notes: Vec<String>,
}

impl CostReport {
    pub fn from_layers(title: impl Into<String>, frames: usize, descs: Vec<LayerDesc>) -> Result<Self> {
        let layers = descs
            .into_iter()
            .map(|desc| {
                let f = layer_flops(&desc)?;
                let headline = desc.kind.is_headline();
                Ok(LayerCost {
                    flops: if headline { f } else { 0 },
                    aux: if headline { 0 } else { f },
                    params: layer_params(&desc),
                    desc,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            title: title.into(),
            frames,
            layers,
            base_flops: None,
            notes: vec![],
        })
    }

    pub fn total_flops(&self) -> u64 {
        self.layers.iter().map(|l| l.flops).sum()
    }

    pub fn aux_flops(&self) -> u64 {
        self.layers.iter().map(|l| l.aux).sum()
    }

    pub fn params(&self) -> u64 {
        self.layers.iter().map(|l| l.params).sum()
    }

    pub fn gflops(&self) -> f64 {
        self.total_flops() as f64 / 1e9
    }

    /// Subtotals in first-appearance order of the stages.
    pub fn stages(&self) -> Vec<StageCost> {
        let mut out: Vec<StageCost> = Vec::new();
        for l in &self.layers {
            let i = match out.iter().position(|s| s.stage == l.desc.stage) {
                Some(i) => i,
                None => {
                    out.push(StageCost {
                        stage: l.desc.stage.clone(),
                        flops: 0,
                        aux: 0,
                        params: 0,
                    });
                    out.len() - 1
                }
            };
            out[i].flops += l.flops;
            out[i].aux += l.aux;
            out[i].params += l.params;
        }
        out
    }

    /// Headline FLOPs added on top of the reference network.
    pub fn overhead_flops(&self) -> Option<u64> {
        self.base_flops.map(|b| self.total_flops() - b)
    }

    /// Added headline cost as a percentage of the reference network.
    pub fn overhead_pct(&self) -> Option<f64> {
        self.base_flops
            .map(|b| 100.0 * (self.total_flops() - b) as f64 / b as f64)
    }

    fn summary(&self) -> Vec<(String, String)> {
        let mut rows = vec![
            ("frames".to_string(), self.frames.to_string()),
            ("total_flops".to_string(), self.total_flops().to_string()),
            ("total_gflops".to_string(), format!("{:.3}", self.gflops())),
            ("aux_flops".to_string(), self.aux_flops().to_string()),
            ("params".to_string(), self.params().to_string()),
        ];
        if let (Some(b), Some(o), Some(p)) = (self.base_flops, self.overhead_flops(), self.overhead_pct()) {
            rows.push(("base_flops".into(), b.to_string()));
            rows.push(("overhead_flops".into(), o.to_string()));
            rows.push(("overhead_gflops".into(), format!("{:.3}", o as f64 / 1e9)));
            rows.push(("overhead_pct".into(), format!("{p:.3}")));
        }
        rows
    }

    /// CSV with one `layer`, `stage` or `summary` record per line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("record,name,stage,kind,count,flops,aux_flops,params\n");
        for l in &self.layers {
            let d = &l.desc;
            let _ = writeln!(
                s,
                "layer,{},{},{},{},{},{},{}",
                d.name,
                d.stage,
                d.kind.as_str(),
                d.count,
                l.flops,
                l.aux,
                l.params
            );
        }
        for st in self.stages() {
            let _ = writeln!(
                s,
                "stage,{},{},,,{},{},{}",
                st.stage, st.stage, st.flops, st.aux, st.params
            );
        }
        for (k, v) in self.summary() {
            let _ = writeln!(s, "summary,{k},,,,{v},,");
        }
        s
    }

    /// Aligned plain-text table with the same numbers as [`CostReport::to_csv`].
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}", self.title);
        let _ = writeln!(s, "convention: {CONVENTION}");
        for n in &self.notes {
            let _ = writeln!(s, "note: {n}");
        }
        let w = self.layers.iter().map(|l| l.desc.name.len()).max().unwrap_or(4).max(6);
        let _ = writeln!(
            s,
            "{:<w$}  {:<6}  {:<11}  {:>5}  {:>14}  {:>12}  {:>10}",
            "layer", "stage", "kind", "count", "flops", "aux_flops", "params"
        );
        for l in &self.layers {
            let d = &l.desc;
            let _ = writeln!(
                s,
                "{:<w$}  {:<6}  {:<11}  {:>5}  {:>14}  {:>12}  {:>10}",
                d.name,
                d.stage,
                d.kind.as_str(),
                d.count,
                l.flops,
                l.aux,
                l.params
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<8}  {:>14}  {:>12}  {:>10}",
            "stage", "flops", "aux_flops", "params"
        );
        for st in self.stages() {
            let _ = writeln!(
                s,
                "{:<8}  {:>14}  {:>12}  {:>10}",
                st.stage, st.flops, st.aux, st.params
            );
        }
        let _ = writeln!(s);
        for (k, v) in self.summary() {
            let _ = writeln!(s, "{k:<16} {v}");
        }
        s
    }
}

/// Feature-map geometry of one ResNet-50 residual block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockGeometry {
    pub stage: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl BlockGeometry {
    pub fn stage_name(&self) -> String {
        format!("res{}", self.stage + 2)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Resnet50Spec {
    pub frames: usize,
    pub resolution: usize,
    pub num_classes: usize,
}

impl Resnet50Spec {
    pub fn new(frames: usize) -> Self {
        Self {
            frames,
            resolution: DEFAULT_RESOLUTION,
            num_classes: DEFAULT_CLASSES,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.num_classes == 0 {
            return Err(config_err!("frames and classes must be positive"));
        }
        if self.resolution < 32 || !self.resolution.is_multiple_of(32) {
            return Err(config_err!(
                "unsupported resolution {} (must be a positive multiple of 32)",
                self.resolution
            ));
        }
        Ok(())
    }

    /// Output geometry of the 16 bottleneck blocks in order.
    pub fn blocks(&self) -> Vec<BlockGeometry> {
        let mut out = vec![];
        for (stage, &(blocks, ch)) in RESNET50_STAGES.iter().enumerate() {
            let s = self.resolution / (4 << stage);
            for _ in 0..blocks {
                out.push(BlockGeometry {
                    stage,
                    channels: ch * 4,
                    height: s,
                    width: s,
                });
            }
        }
        out
    }
}

/// `(blocks, bottleneck width)` of res2..res5.
const RESNET50_STAGES: [(usize, usize); 4] = [(3, 64), (4, 128), (6, 256), (3, 512)];

/// ResNet-50 (stride on the 3×3 convolution) applied to every frame; the
/// time shift itself costs nothing.
pub fn resnet50_layers(spec: &Resnet50Spec) -> Result<Vec<LayerDesc>> {
    spec.validate()?;
    let t = spec.frames as u64;
    let r = spec.resolution;
    let mut v = vec![];
    let s1 = r / 2;
    v.push(LayerDesc::conv(
        "conv1",
        "stem",
        vec![3, r, r],
        vec![7, 7],
        vec![64, s1, s1],
        t,
    ));
    v.push(LayerDesc::elementwise("conv1.bn_relu", "stem", vec![64, s1, s1], 2 * t));
    v.push(LayerDesc::pool("maxpool", "stem", vec![64, s1, s1], t));
    let mut cin = 64;
    let mut size = r / 4;
    for (si, &(blocks, mid)) in RESNET50_STAGES.iter().enumerate() {
        let stage = format!("res{}", si + 2);
        let cout = mid * 4;
        for bi in 0..blocks {
            let stride = if bi == 0 && si > 0 { 2 } else { 1 };
            let (hin, hout) = (size, size / stride);
            let n = |x: &str| format!("{stage}.{bi}.{x}");
            v.push(LayerDesc::conv(
                n("conv_a"),
                &stage,
                vec![cin, hin, hin],
                vec![1, 1],
                vec![mid, hin, hin],
                t,
            ));
            v.push(LayerDesc::conv(
                n("conv_b"),
                &stage,
                vec![mid, hin, hin],
                vec![3, 3],
                vec![mid, hout, hout],
                t,
            ));
            v.push(LayerDesc::conv(
                n("conv_c"),
                &stage,
                vec![mid, hout, hout],
                vec![1, 1],
                vec![cout, hout, hout],
                t,
            ));
            if bi == 0 {
                v.push(LayerDesc::conv(
                    n("downsample"),
                    &stage,
                    vec![cin, hin, hin],
                    vec![1, 1],
                    vec![cout, hout, hout],
                    t,
                ));
            }
            // batch norm and ReLU after a and b, batch norm after c (and the
            // shortcut), then the residual add and its ReLU
            let bn_relu = 2 * (mid * hin * hin + mid * hout * hout) + cout * hout * hout;
            let shortcut_bn = if bi == 0 { cout * hout * hout } else { 0 };
            v.push(LayerDesc::elementwise(
                n("bn_relu"),
                &stage,
                vec![bn_relu + shortcut_bn],
                t,
            ));
            v.push(LayerDesc::elementwise(
                n("add_relu"),
                &stage,
                vec![2, cout, hout, hout],
                t,
            ));
            cin = cout;
            size = hout;
        }
    }
    v.push(LayerDesc::pool("avgpool", "head", vec![2048, size, size], t));
    v.push(LayerDesc::dense("fc", "head", 1, 2048, spec.num_classes, t));
    v.push(LayerDesc::elementwise(
        "frame_average",
        "head",
        vec![spec.num_classes],
        t,
    ));
    Ok(v)
}

pub fn resnet50_tsm_cost(frames: usize) -> Result<CostReport> {
    resnet50_report(&Resnet50Spec::new(frames))
}

pub fn resnet50_report(spec: &Resnet50Spec) -> Result<CostReport> {
    let mut r = CostReport::from_layers(
        format!(
            "TSM ResNet-50, {} frames at {}x{}",
            spec.frames, spec.resolution, spec.resolution
        ),
        spec.frames,
        resnet50_layers(spec)?,
    )?;
    r.notes.push(format!("classifier over {} classes", spec.num_classes));
    Ok(r)
}

/// Which attention layers are counted for one block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionParts {
    pub spatial: bool,
    pub temporal: bool,
}

/// Layers of one attention module on a `(T, C, H, W)` map.
#[allow(clippy::too_many_arguments)]
pub fn attention_block_layers(
    prefix: &str,
    stage: &str,
    frames: usize,
    channels: usize,
    (h, w): (usize, usize),
    reduction: usize,
    mixing: TemporalMixing,
    parts: AttentionParts,
) -> Result<Vec<LayerDesc>> {
    let t = frames as u64;
    let c = channels;
    let hidden = W3Config::new(c, reduction, mixing)?.hidden();
    let n = |x: &str| format!("{prefix}.{x}");
    let mut v = vec![
        LayerDesc::pool(n("spatial_pool"), stage, vec![2, c, h, w], t),
        LayerDesc::dense(n("mlp1"), stage, 2, c, hidden, t),
        LayerDesc::elementwise(n("mlp_relu"), stage, vec![2, hidden], t),
        LayerDesc::dense(n("mlp2"), stage, 2, hidden, c, t),
        LayerDesc::elementwise(n("mlp_sum_sigmoid"), stage, vec![2, c], t),
    ];
    if parts.temporal {
        let g = mixing.groups(c);
        let k = TEMPORAL_KERNEL;
        v.push(
            LayerDesc::conv(n("temporal1"), stage, vec![c, frames], vec![k], vec![c, frames], 1)
                .with_groups(g)
                .with_bias(true),
        );
        v.push(LayerDesc::elementwise(n("temporal_relu"), stage, vec![c, frames], 1));
        v.push(
            LayerDesc::conv(n("temporal2"), stage, vec![c, frames], vec![k], vec![c, frames], 1)
                .with_groups(g)
                .with_bias(true),
        );
        v.push(LayerDesc::elementwise(n("temporal_sigmoid"), stage, vec![c, frames], 1));
    }
    v.push(LayerDesc::elementwise(n("channel_mul"), stage, vec![c, h, w], t));
    if parts.spatial {
        let k = SPATIAL_KERNEL;
        v.push(LayerDesc::pool(n("channel_pool"), stage, vec![2, c, h, w], t));
        v.push(LayerDesc::conv(n("spatial"), stage, vec![2, h, w], vec![k, k], vec![1, h, w], t).with_bias(true));
        v.push(LayerDesc::elementwise(n("spatial_sigmoid"), stage, vec![h, w], t));
        if parts.temporal {
            let (k, m) = (VOLUME_KERNEL, VOLUME_HIDDEN);
            v.push(
                LayerDesc::conv(
                    n("volume1"),
                    stage,
                    vec![1, frames, h, w],
                    vec![k, k, k],
                    vec![m, frames, h, w],
                    1,
                )
                .with_bias(true),
            );
            v.push(LayerDesc::elementwise(
                n("volume_relu"),
                stage,
                vec![m, frames, h, w],
                1,
            ));
            v.push(
                LayerDesc::conv(
                    n("volume2"),
                    stage,
                    vec![m, frames, h, w],
                    vec![k, k, k],
                    vec![1, frames, h, w],
                    1,
                )
                .with_bias(true),
            );
            v.push(LayerDesc::elementwise(
                n("volume_sigmoid"),
                stage,
                vec![frames, h, w],
                1,
            ));
        }
        v.push(LayerDesc::elementwise(n("spatial_mul"), stage, vec![c, h, w], t));
    }
    Ok(v)
}

/// Refinement head: pool `n` stage masks to `(h, w)`, map them with a 1×1
/// convolution to `c` channels, ReLU and add.
pub fn refinement_layers(
    frames: usize,
    stage_masks: &[(usize, usize)],
    c: usize,
    (h, w): (usize, usize),
) -> Vec<LayerDesc> {
    let t = frames as u64;
    let n = stage_masks.len();
    let read: usize = stage_masks.iter().map(|(a, b)| a * b).sum();
    vec![
        LayerDesc::pool("afr.pool", "afr", vec![read], t),
        LayerDesc::conv("afr.conv", "afr", vec![n, h, w], vec![1, 1], vec![c, h, w], t).with_bias(true),
        LayerDesc::elementwise("afr.relu_add", "afr", vec![2, c, h, w], t),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct W3CostSpec {
    pub backbone: Resnet50Spec,
    pub reduction: usize,
    pub temporal_mixing: TemporalMixing,
    /// Leading residual blocks that carry a module, 0..=16.
    pub blocks: usize,
    pub parts: AttentionParts,
    pub refinement: bool,
}

impl W3CostSpec {
    pub fn new(frames: usize) -> Self {
        Self {
            backbone: Resnet50Spec::new(frames),
            reduction: DEFAULT_REDUCTION,
            temporal_mixing: TemporalMixing::Dense,
            blocks: 16,
            parts: AttentionParts {
                spatial: true,
                temporal: true,
            },
            refinement: true,
        }
    }
}

/// ResNet-50 with attention modules after the leading `spec.blocks` residual
/// blocks, plus the refinement head when every stage has a mask.
pub fn w3_cost(spec: &W3CostSpec) -> Result<CostReport> {
    let base = resnet50_layers(&spec.backbone)?;
    let base_flops = CostReport::from_layers("", spec.backbone.frames, base.clone())?.total_flops();
    let geo = spec.backbone.blocks();
    if spec.blocks > geo.len() {
        return Err(config_err!("only {} residual blocks can carry attention", geo.len()));
    }
    let frames = spec.backbone.frames;
    let mut layers = base;
    let head = layers.len() - 3;
    let mut extra = vec![];
    for (i, g) in geo.iter().take(spec.blocks).enumerate() {
        extra.extend(attention_block_layers(
            &format!("w3.{i}"),
            &g.stage_name(),
            frames,
            g.channels,
            (g.height, g.width),
            spec.reduction,
            spec.temporal_mixing,
            spec.parts,
        )?);
    }
    let last_of_stage: Vec<&BlockGeometry> = (0..4)
        .filter_map(|s| geo.iter().take(spec.blocks).rfind(|g| g.stage == s))
        .collect();
    let afr = spec.refinement && spec.parts.spatial && last_of_stage.len() == 4;
    if afr {
        let last = geo.last().expect("blocks");
        let masks: Vec<(usize, usize)> = last_of_stage.iter().map(|g| (g.height, g.width)).collect();
        extra.extend(refinement_layers(
            frames,
            &masks,
            last.channels,
            (last.height, last.width),
        ));
    }
    layers.splice(head..head, extra);
    let mut r = CostReport::from_layers(format!("TSM ResNet-50 + W3, {frames} frames"), frames, layers)?;
    r.base_flops = Some(base_flops);
    r.notes.push(format!(
        "attention in {} blocks, r={}, {} temporal convolutions, refinement {}",
        spec.blocks,
        spec.reduction,
        spec.temporal_mixing.as_str(),
        if afr { "on" } else { "off" }
    ));
    Ok(r)
}

pub fn w3_overhead(frames: usize) -> Result<CostReport> {
    w3_cost(&W3CostSpec::new(frames))
}

/// Per-frame channel and spatial attention in every block, without the
/// temporal CNNs or the refinement head.
pub fn cbam_cost(frames: usize) -> Result<CostReport> {
    let mut spec = W3CostSpec::new(frames);
    spec.parts.temporal = false;
    spec.refinement = false;
    let mut r = w3_cost(&spec)?;
    r.title = format!("TSM ResNet-50 + CBAM, {frames} frames");
    r.notes = vec!["CBAM in all 16 blocks, r=16, 7x7 spatial kernel".into()];
    for l in &mut r.layers {
        if let Some(rest) = l.desc.name.strip_prefix("w3.") {
            l.desc.name = format!("cbam.{rest}");
        }
    }
    Ok(r)
}

/// Embedded-Gaussian non-local blocks after the last `n_blocks` blocks of
/// res4 (wrapping into res3 beyond six).
pub fn nonlocal_cost(frames: usize, n_blocks: usize) -> Result<CostReport> {
    let spec = Resnet50Spec::new(frames);
    let base = resnet50_layers(&spec)?;
    let base_flops = CostReport::from_layers("", frames, base.clone())?.total_flops();
    let geo = spec.blocks();
    let hosts: Vec<&BlockGeometry> = geo
        .iter()
        .filter(|g| g.stage == 2)
        .rev()
        .chain(geo.iter().filter(|g| g.stage == 1).rev())
        .take(n_blocks)
        .collect();
    if hosts.len() < n_blocks {
        return Err(config_err!(
            "at most {} non-local blocks fit res3 and res4",
            hosts.len()
        ));
    }
    let mut layers = base;
    let head = layers.len() - 3;
    let mut extra = vec![];
    for (i, g) in hosts.iter().enumerate() {
        let stage = g.stage_name();
        let (c, ci) = (g.channels, g.channels / 2);
        let hw = [g.height, g.width];
        let thw = frames * g.height * g.width;
        let t = frames as u64;
        let n = |x: &str| format!("nl.{i}.{x}");
        for name in ["theta", "phi", "g"] {
            extra.push(
                LayerDesc::conv(
                    n(name),
                    &stage,
                    vec![c, hw[0], hw[1]],
                    vec![1, 1],
                    vec![ci, hw[0], hw[1]],
                    t,
                )
                .with_bias(true),
            );
        }
        extra.push(LayerDesc::pairwise(n("affinity_aggregate"), &stage, thw, ci, 1));
        extra.push(LayerDesc::elementwise(n("softmax"), &stage, vec![thw, thw], 1));
        extra.push(
            LayerDesc::conv(
                n("out"),
                &stage,
                vec![ci, hw[0], hw[1]],
                vec![1, 1],
                vec![c, hw[0], hw[1]],
                t,
            )
            .with_bias(true),
        );
        extra.push(LayerDesc::elementwise(n("bn_add"), &stage, vec![2, c, hw[0], hw[1]], t));
    }
    layers.splice(head..head, extra);
    let mut r = CostReport::from_layers(format!("TSM ResNet-50 + non-local, {frames} frames"), frames, layers)?;
    r.base_flops = Some(base_flops);
    r.notes.push(format!(
        "{n_blocks} non-local blocks (inner width C/2), placed from the end of res4; the count is a free calibration choice"
    ));
    Ok(r)
}

/// Layers of the trainable backbone, matching what a forward pass records.
pub fn toy_backbone_layers(cfg: &BackboneConfig, flags: &AttentionFlags) -> Result<Vec<LayerDesc>> {
    cfg.validate()?;
    let t = cfg.frames as u64;
    let mut v = vec![];
    let c0 = cfg.stages[0].channels;
    let (mut h, mut w) = (cfg.height, cfg.width);
    v.push(
        LayerDesc::conv(
            "stem",
            "stem",
            vec![cfg.in_channels, h, w],
            vec![3, 3],
            vec![c0, h, w],
            t,
        )
        .with_bias(true),
    );
    let mut cin = c0;
    let mut masks = vec![];
    for (si, st) in cfg.stages.iter().enumerate() {
        let stage = format!("stage{}", si + 1);
        for bi in 0..st.blocks {
            let s = if bi == 0 { st.stride } else { 1 };
            let (ho, wo) = ((h + 2 - 3) / s + 1, (w + 2 - 3) / s + 1);
            let co = st.channels;
            let n = |x: &str| format!("{stage}.block{}.{x}", bi + 1);
            v.push(
                LayerDesc::conv(n("conv1"), &stage, vec![cin, h, w], vec![3, 3], vec![co, ho, wo], t).with_bias(true),
            );
            v.push(
                LayerDesc::conv(n("conv2"), &stage, vec![co, ho, wo], vec![3, 3], vec![co, ho, wo], t).with_bias(true),
            );
            if s != 1 || cin != co {
                v.push(
                    LayerDesc::conv(n("proj"), &stage, vec![cin, h, w], vec![1, 1], vec![co, ho, wo], t)
                        .with_bias(true),
                );
            }
            if flags.w3 {
                let parts = AttentionParts {
                    spatial: flags.spatial,
                    temporal: flags.temporal,
                };
                v.extend(attention_block_layers(
                    &n("w3"),
                    &stage,
                    cfg.frames,
                    co,
                    (ho, wo),
                    cfg.reduction,
                    cfg.temporal_mixing,
                    parts,
                )?);
            }
            cin = co;
            h = ho;
            w = wo;
        }
        masks.push((h, w));
    }
    if flags.refinement_active() {
        v.extend(refinement_layers(cfg.frames, &masks, cin, (h, w)));
    }
    v.push(LayerDesc::pool("avgpool", "head", vec![cin, h, w], t));
    v.push(LayerDesc::dense("classifier", "head", 1, cin, cfg.num_classes, t));
    Ok(v)
}

pub fn toy_backbone_cost(cfg: &BackboneConfig, flags: &AttentionFlags) -> Result<CostReport> {
    CostReport::from_layers(
        format!("toy backbone, {} frames at {}x{}", cfg.frames, cfg.height, cfg.width),
        cfg.frames,
        toy_backbone_layers(cfg, flags)?,
    )
}

/// One comparison against a calibration target.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationCheck {
    pub name: String,
    pub value: f64,
    pub lo: f64,
    pub hi: f64,
}

impl CalibrationCheck {
    fn relative(name: impl Into<String>, value: f64, target: f64, tol: f64) -> Self {
        Self {
            name: name.into(),
            value,
            lo: target * (1.0 - tol),
            hi: target * (1.0 + tol),
        }
    }

    pub fn passed(&self) -> bool {
        self.value >= self.lo && self.value <= self.hi
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Tsm,
    Cbam,
    NonLocal,
    W3,
}

impl std::str::FromStr for Variant {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsm" => Ok(Variant::Tsm),
            "cbam" => Ok(Variant::Cbam),
            "nl" => Ok(Variant::NonLocal),
            "w3" => Ok(Variant::W3),
            _ => Err(config_err!("unknown variant {s:?} (expected tsm, cbam, nl or w3)")),
        }
    }
}

pub fn variant_cost(variant: Variant, frames: usize, nl_blocks: usize) -> Result<CostReport> {
    match variant {
        Variant::Tsm => resnet50_tsm_cost(frames),
        Variant::Cbam => cbam_cost(frames),
        Variant::NonLocal => nonlocal_cost(frames, nl_blocks),
        Variant::W3 => w3_overhead(frames),
    }
}

/// Published reference totals in GFLOPs by `(variant, frames)`.
const REFERENCE_GFLOPS: [(Variant, usize, f64, f64); 5] = [
    (Variant::Tsm, 8, 33.0, 0.05),
    (Variant::Tsm, 16, 65.0, 0.05),
    (Variant::W3, 16, 67.1, 0.05),
    (Variant::Cbam, 16, 66.5, 0.05),
    (Variant::NonLocal, 16, 115.0, 0.10),
];

/// Reference added cost of the attention modules in GFLOPs.
const REFERENCE_OVERHEAD_GFLOPS: [(usize, f64); 2] = [(8, 0.5), (16, 2.1)];
const OVERHEAD_PCT_RANGE: (f64, f64) = (1.5, 3.2);
const OVERHEAD_TOL: f64 = 0.25;

/// Every calibration target that applies to `report`.
pub fn calibration_checks(variant: Variant, report: &CostReport) -> Vec<CalibrationCheck> {
    let f = report.frames;
    let mut out = vec![];
    for &(v, frames, target, tol) in &REFERENCE_GFLOPS {
        if v == variant && frames == f {
            out.push(CalibrationCheck::relative(
                format!("total GFLOPs at {f} frames"),
                report.gflops(),
                target,
                tol,
            ));
        }
    }
    if variant == Variant::W3 {
        if let (Some(pct), Some(o)) = (report.overhead_pct(), report.overhead_flops()) {
            out.push(CalibrationCheck {
                name: format!("overhead % at {f} frames"),
                value: pct,
                lo: OVERHEAD_PCT_RANGE.0,
                hi: OVERHEAD_PCT_RANGE.1,
            });
            if let Some(&(_, g)) = REFERENCE_OVERHEAD_GFLOPS.iter().find(|(fr, _)| *fr == f) {
                out.push(CalibrationCheck::relative(
                    format!("overhead GFLOPs at {f} frames"),
                    o as f64 / 1e9,
                    g,
                    OVERHEAD_TOL,
                ));
            }
        }
    }
    out
}
