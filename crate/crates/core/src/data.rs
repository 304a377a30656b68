//! Synthetic moving-sprite clips.
//!
//! A 3×3 sprite (square or cross) sits in one quadrant of the frame and
//! moves one pixel per frame along an axis, then reverses halfway: its
//! displacement from the start of its span is `min(t, T - 1 - t)`. The eight
//! classes are (shape × trajectory). The two trajectories on an axis use the
//! same span from opposite ends, so their clips hold the same multiset of
//! frames and differ only in order; the direction bit is invisible to
//! anything that ignores frame order.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{contract, Error, Result};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 8;
pub const SPRITE: usize = 3;
pub const CHANNELS: usize = 3;
pub const SPRITE_INTENSITY: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpriteShape {
    Square,
    Cross,
}

impl SpriteShape {
    pub const ALL: [SpriteShape; 2] = [SpriteShape::Square, SpriteShape::Cross];

    fn covers(self, r: usize, c: usize) -> bool {
        match self {
            SpriteShape::Square => true,
            SpriteShape::Cross => r == 1 || c == 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trajectory {
    LeftThenRight,
    RightThenLeft,
    UpThenDown,
    DownThenUp,
}

impl Trajectory {
    pub const ALL: [Trajectory; 4] = [
        Trajectory::LeftThenRight,
        Trajectory::RightThenLeft,
        Trajectory::UpThenDown,
        Trajectory::DownThenUp,
    ];

    fn index(self) -> usize {
        Self::ALL.iter().position(|&t| t == self).unwrap()
    }

    fn horizontal(self) -> bool {
        matches!(self, Trajectory::LeftThenRight | Trajectory::RightThenLeft)
    }

    /// True when the sprite starts at the far (right/bottom) end of its span.
    fn starts_far(self) -> bool {
        matches!(self, Trajectory::LeftThenRight | Trajectory::UpThenDown)
    }
}

pub fn encode_label(shape: SpriteShape, trajectory: Trajectory) -> usize {
    let s = if shape == SpriteShape::Square { 0 } else { 1 };
    s * 4 + trajectory.index()
}

pub fn decode_label(label: usize) -> (SpriteShape, Trajectory) {
    assert!(label < NUM_CLASSES, "label {label} out of range");
    (SpriteShape::ALL[label / 4], Trajectory::ALL[label % 4])
}

/// Which end of its span the trajectory starts from: the bit that only
/// frame order reveals.
pub fn direction_bit(label: usize) -> usize {
    label % 2
}

/// Largest displacement reached, at the reversal point.
pub fn travel(frames: usize) -> usize {
    frames.saturating_sub(1) / 2
}

pub fn displacement(t: usize, frames: usize) -> usize {
    t.min(frames - 1 - t)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub shape: SpriteShape,
    pub trajectory: Trajectory,
    /// 0..4, row-major over the frame's quadrants.
    pub quadrant: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl ClipSpec {
    pub fn label(&self) -> usize {
        encode_label(self.shape, self.trajectory)
    }

    /// Top-left sprite corner `(row, col)` for every frame.
    pub fn positions(&self) -> Result<Vec<(usize, usize)>> {
        if self.quadrant >= 4 {
            return Err(contract!("quadrant {} out of range", self.quadrant));
        }
        if self.frames == 0 {
            return Err(contract!("clip needs at least one frame"));
        }
        let (qh, qw) = (self.height / 2, self.width / 2);
        let q0 = ((self.quadrant / 2) * qh, (self.quadrant % 2) * qw);
        let span = travel(self.frames);
        let (ext_h, ext_w) = if self.trajectory.horizontal() {
            (SPRITE, SPRITE + span)
        } else {
            (SPRITE + span, SPRITE)
        };
        if ext_h > qh || ext_w > qw {
            return Err(contract!(
                "a {ext_h}x{ext_w} trajectory does not fit a {qh}x{qw} quadrant"
            ));
        }
        let mut rng = Rng::new(self.seed);
        let r0 = q0.0 + rng.below(qh - ext_h + 1);
        let c0 = q0.1 + rng.below(qw - ext_w + 1);
        Ok((0..self.frames)
            .map(|t| {
                let d = displacement(t, self.frames);
                let along = if self.trajectory.starts_far() { span - d } else { d };
                if self.trajectory.horizontal() {
                    (r0, c0 + along)
                } else {
                    (r0 + along, c0)
                }
            })
            .collect())
    }
}

/// Renders a `(T, 3, H, W)` clip in `[0, 1]`.
pub fn generate_clip(spec: &ClipSpec) -> Result<Tensor> {
    if spec.noise_sigma < 0.0 || !spec.noise_sigma.is_finite() {
        return Err(contract!("noise sigma must be finite and >= 0"));
    }
    let positions = spec.positions()?;
    let (t_len, h, w) = (spec.frames, spec.height, spec.width);
    let mut clip = Tensor::zeros(vec![t_len, CHANNELS, h, w]);
    let data = clip.data_mut();
    for (t, &(r0, c0)) in positions.iter().enumerate() {
        for ch in 0..CHANNELS {
            let plane = &mut data[(t * CHANNELS + ch) * h * w..][..h * w];
            for dr in 0..SPRITE {
                for dc in 0..SPRITE {
                    if spec.shape.covers(dr, dc) {
                        plane[(r0 + dr) * w + c0 + dc] = SPRITE_INTENSITY;
                    }
                }
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        let mut rng = Rng::new(derive_seed(spec.seed, 0x6e_6f69_7365));
        for v in data.iter_mut() {
            *v = (*v + spec.noise_sigma * rng.normal()).clamp(0.0, 1.0);
        }
    }
    Ok(clip)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    /// Clip seeds of the two splits are derived from disjoint index ranges.
    fn index_offset(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1 << 32,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub noise_sigma: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            height: 32,
            width: 32,
            noise_sigma: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub clip: Tensor,
    pub label: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Seed of clip `index` in `split`.
pub fn clip_seed(base_seed: u64, split: Split, index: usize) -> u64 {
    derive_seed(base_seed, split.index_offset() + index as u64)
}

/// The full spec of clip `index`; labels cycle through all classes so the
/// set is balanced.
pub fn clip_spec(cfg: &DataConfig, base_seed: u64, split: Split, index: usize) -> ClipSpec {
    let seed = clip_seed(base_seed, split, index);
    let (shape, trajectory) = decode_label(index % NUM_CLASSES);
    let quadrant = Rng::new(derive_seed(seed, 0x7175_6164)).below(4);
    ClipSpec {
        frames: cfg.frames,
        height: cfg.height,
        width: cfg.width,
        shape,
        trajectory,
        quadrant,
        noise_sigma: cfg.noise_sigma,
        seed,
    }
}

pub fn generate_dataset(cfg: &DataConfig, n_per_class: usize, base_seed: u64, split: Split) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(contract!("need at least one clip per class"));
    }
    let samples = (0..n_per_class * NUM_CLASSES)
        .map(|i| {
            let spec = clip_spec(cfg, base_seed, split, i);
            Ok(Sample {
                clip: generate_clip(&spec)?,
                label: spec.label(),
                seed: spec.seed,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset { split, samples })
}

/// Returns the clip with its frames in a random order.
pub fn shuffle_frames(clip: &Tensor, rng: &mut Rng) -> Tensor {
    let t_len = clip.shape()[0];
    let frame = clip.len() / t_len;
    let order = rng.permutation(t_len);
    let mut out = Vec::with_capacity(clip.len());
    for &t in &order {
        out.extend_from_slice(&clip.data()[t * frame..(t + 1) * frame]);
    }
    Tensor::new(clip.shape().to_vec(), out).expect("same shape")
}

/// Dump layout: `T, H, W, label` as little-endian u64, then the
/// `(T, 3, H, W)` pixels as little-endian f64.
pub fn encode_clip(clip: &Tensor, label: usize) -> Vec<u8> {
    let s = clip.shape();
    let mut out = Vec::with_capacity(32 + clip.len() * 8);
    for v in [s[0], s[2], s[3], label] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for v in clip.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_clip(bytes: &[u8]) -> Result<(Tensor, usize)> {
    if bytes.len() < 32 {
        return Err(Error::Format("clip dump shorter than its header".into()));
    }
    let word = |i: usize| u64::from_le_bytes(bytes[i * 8..i * 8 + 8].try_into().unwrap()) as usize;
    let (t, h, w, label) = (word(0), word(1), word(2), word(3));
    let n = t
        .checked_mul(CHANNELS)
        .and_then(|v| v.checked_mul(h))
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::Format("clip dump extents overflow".into()))?;
    if bytes.len() != 32 + n * 8 {
        return Err(Error::Format(format!(
            "clip dump payload is {} bytes, header implies {}",
            bytes.len() - 32,
            n * 8
        )));
    }
    let data = bytes[32..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((Tensor::new(vec![t, CHANNELS, h, w], data)?, label))
}

/// Writes one `clip_<index>.bin` per sample.
pub fn dump_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for (i, s) in ds.samples.iter().enumerate() {
        let mut f = fs::File::create(dir.join(format!("clip_{i:05}.bin")))?;
        f.write_all(&encode_clip(&s.clip, s.label))?;
    }
    Ok(())
}

pub fn load_clip(path: impl AsRef<Path>) -> Result<(Tensor, usize)> {
    decode_clip(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(trajectory: Trajectory, sigma: f64) -> ClipSpec {
        ClipSpec {
            frames: 8,
            height: 32,
            width: 32,
            shape: SpriteShape::Cross,
            trajectory,
            quadrant: 2,
            noise_sigma: sigma,
            seed: 99,
        }
    }

    fn frames_of(clip: &Tensor) -> Vec<Vec<u64>> {
        let t = clip.shape()[0];
        let n = clip.len() / t;
        (0..t)
            .map(|i| clip.data()[i * n..(i + 1) * n].iter().map(|v| v.to_bits()).collect())
            .collect()
    }

    #[test]
    fn noiseless_pixels_are_binary_and_deterministic() {
        let a = generate_clip(&spec(Trajectory::UpThenDown, 0.0)).unwrap();
        let b = generate_clip(&spec(Trajectory::UpThenDown, 0.0)).unwrap();
        assert!(a.bit_eq(&b));
        assert!(a.data().iter().all(|&v| v == 0.0 || v == SPRITE_INTENSITY));
        // five cross pixels per channel per frame
        assert_eq!(a.sum(), (8 * CHANNELS * 5) as f64);
    }

    #[test]
    fn direction_pairs_share_frame_multisets() {
        for (x, y) in [
            (Trajectory::LeftThenRight, Trajectory::RightThenLeft),
            (Trajectory::UpThenDown, Trajectory::DownThenUp),
        ] {
            let a = generate_clip(&spec(x, 0.0)).unwrap();
            let b = generate_clip(&spec(y, 0.0)).unwrap();
            assert!(!a.bit_eq(&b));
            let (mut fa, mut fb) = (frames_of(&a), frames_of(&b));
            fa.sort();
            fb.sort();
            assert_eq!(fa, fb);
        }
    }

    #[test]
    fn positions_follow_the_trajectory() {
        let p = spec(Trajectory::LeftThenRight, 0.0).positions().unwrap();
        let cols: Vec<i64> = p.iter().map(|&(_, c)| c as i64 - p[0].1 as i64).collect();
        assert_eq!(cols, vec![0, -1, -2, -3, -3, -2, -1, 0]);
        assert!(p.iter().all(|&(r, c)| r >= 16 && c < 16));
        let p = spec(Trajectory::DownThenUp, 0.0).positions().unwrap();
        let rows: Vec<i64> = p.iter().map(|&(r, _)| r as i64 - p[0].0 as i64).collect();
        assert_eq!(rows, vec![0, 1, 2, 3, 3, 2, 1, 0]);
        assert_eq!(p[0], p[7]);
    }

    #[test]
    fn oversized_trajectory_is_rejected() {
        let mut s = spec(Trajectory::LeftThenRight, 0.0);
        s.frames = 16;
        s.width = 16;
        s.height = 16;
        assert!(matches!(generate_clip(&s), Err(Error::Contract(_))));
    }

    #[test]
    fn noise_is_clamped() {
        let c = generate_clip(&spec(Trajectory::LeftThenRight, 0.5)).unwrap();
        assert!(c.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(c.data().iter().any(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn dataset_is_balanced_reproducible_and_split_disjoint() {
        let cfg = DataConfig::default();
        let a = generate_dataset(&cfg, 2, 5, Split::Train).unwrap();
        assert_eq!(a.len(), 16);
        for k in 0..NUM_CLASSES {
            assert_eq!(a.samples.iter().filter(|s| s.label == k).count(), 2);
        }
        let b = generate_dataset(&cfg, 2, 5, Split::Train).unwrap();
        assert!(a.samples.iter().zip(&b.samples).all(|(x, y)| x.clip.bit_eq(&y.clip)));
        let v = generate_dataset(&cfg, 64, 5, Split::Val).unwrap();
        let t = generate_dataset(&cfg, 64, 5, Split::Train).unwrap();
        let train: std::collections::HashSet<u64> = t.samples.iter().map(|s| s.seed).collect();
        assert!(v.samples.iter().all(|s| !train.contains(&s.seed)));
        assert!(matches!(
            generate_dataset(&cfg, 0, 5, Split::Val),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn label_codec_round_trips() {
        for k in 0..NUM_CLASSES {
            let (s, t) = decode_label(k);
            assert_eq!(encode_label(s, t), k);
        }
        assert_ne!(direction_bit(0), direction_bit(1));
        assert_eq!(direction_bit(4), direction_bit(6));
    }

    #[test]
    fn shuffled_frames_are_a_permutation() {
        let c = generate_clip(&spec(Trajectory::UpThenDown, 0.1)).unwrap();
        let s = shuffle_frames(&c, &mut Rng::new(3));
        let (mut a, mut b) = (frames_of(&c), frames_of(&s));
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn dump_round_trips() {
        let c = generate_clip(&spec(Trajectory::UpThenDown, 0.1)).unwrap();
        let bytes = encode_clip(&c, 6);
        assert_eq!(bytes.len(), 32 + c.len() * 8);
        assert_eq!(&bytes[..8], &8u64.to_le_bytes());
        let (d, label) = decode_clip(&bytes).unwrap();
        assert!(d.bit_eq(&c));
        assert_eq!(label, 6);
        assert!(decode_clip(&bytes[..40]).is_err());
    }
}
