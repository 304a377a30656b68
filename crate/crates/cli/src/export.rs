//! Attention export: last-stage spatial masks as binary graymaps and the
//! matching channel masks as CSV.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use w3_core::backbone::forward_backbone;
use w3_core::train::Model;
use w3_core::{Tape, Tensor};

use crate::Exit;

/// Masks of the last block of the last stage for one clip.
#[derive(Clone, Debug)]
pub struct AttentionMaps {
    /// `(T, H_l, W_l)`
    pub spatial: Tensor,
    /// `(T, C_l)`
    pub channel: Tensor,
}

fn last_block<T: Copy>(stages: &[Vec<Option<T>>]) -> Option<T> {
    stages.last().and_then(|s| s.last().copied().flatten())
}

pub fn last_stage_masks(model: &Model, clip: &Tensor) -> Result<AttentionMaps> {
    let cfg = model.config();
    let want = [cfg.frames, cfg.in_channels, cfg.height, cfg.width];
    if clip.shape() != want {
        return Err(Exit::usage(format!(
            "clip shape {:?} does not match the model input {want:?}",
            clip.shape()
        ))
        .into());
    }
    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape, false);
    let x = tape.constant(clip.clone());
    let trace = forward_backbone(&mut tape, &b, &model.net, x, &model.flags)?;
    let spatial = last_block(&trace.spatial_masks)
        .ok_or_else(|| Exit::usage("the last stage computes no spatial attention (w3 or spatial_attention off)"))?;
    let channel =
        last_block(&trace.channel_masks).ok_or_else(|| Exit::usage("the last stage computes no attention (w3 off)"))?;
    Ok(AttentionMaps {
        spatial: tape.value(spatial.0).clone(),
        channel: tape.value(channel.0).clone(),
    })
}

/// Nearest-neighbour resize of a row-major `h×w` map to `out_h×out_w`.
pub fn upsample_nearest(map: &[f64], (h, w): (usize, usize), (out_h, out_w): (usize, usize)) -> Vec<f64> {
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = y * h / out_h;
        for x in 0..out_w {
            out.push(map[sy * w + x * w / out_w]);
        }
    }
    out
}

/// Maps `[0, 1]` linearly onto `[0, 255]`.
pub fn gray_level(m: f64) -> u8 {
    (m.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary (P5) graymap with maxval 255.
pub fn encode_pgm(width: usize, height: usize, values: &[f64]) -> Vec<u8> {
    assert_eq!(values.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| gray_level(v)));
    out
}

/// Parses what [`encode_pgm`] writes: `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        anyhow::ensure!(start < pos, "truncated graymap header");
        fields.push(std::str::from_utf8(&bytes[start..pos])?.to_string());
    }
    anyhow::ensure!(fields[0] == "P5", "not a binary graymap");
    let (w, h, max): (usize, usize, usize) = (fields[1].parse()?, fields[2].parse()?, fields[3].parse()?);
    anyhow::ensure!(max == 255, "unsupported maxval {max}");
    let payload = &bytes[pos + 1..];
    anyhow::ensure!(
        payload.len() == w * h,
        "payload has {} bytes, expected {}",
        payload.len(),
        w * h
    );
    Ok((w, h, payload.to_vec()))
}

/// One row per frame, one column per channel, 8 significant digits.
pub fn channel_csv(mask: &Tensor) -> String {
    let (t, c) = (mask.shape()[0], mask.shape()[1]);
    let mut s = (0..c).map(|i| format!("c{i}")).collect::<Vec<_>>().join(",");
    s.push('\n');
    for row in mask.data().chunks(c).take(t) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.7e}")).collect();
        let _ = writeln!(s, "{}", cells.join(","));
    }
    s
}

pub fn parse_channel_csv(text: &str) -> Result<Vec<Vec<f64>>> {
    text.lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| Ok(v.parse::<f64>()?)).collect())
        .collect()
}

pub fn pgm_name(frame: usize) -> String {
    format!("spatial_t{frame:02}.pgm")
}

pub const CHANNEL_CSV: &str = "channel_mask.csv";

/// Writes one graymap per frame and the channel CSV into `dir`.
pub fn write_maps(maps: &AttentionMaps, (height, width): (usize, usize), dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let s = maps.spatial.shape();
    let (t, h, w) = (s[0], s[1], s[2]);
    let mut written = Vec::with_capacity(t + 1);
    for (f, frame) in maps.spatial.data().chunks(h * w).enumerate() {
        let up = upsample_nearest(frame, (h, w), (height, width));
        let path = dir.join(pgm_name(f));
        std::fs::write(&path, encode_pgm(width, height, &up))?;
        written.push(path);
    }
    let path = dir.join(CHANNEL_CSV);
    std::fs::write(&path, channel_csv(&maps.channel))?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_upsampling_repeats_cells() {
        let up = upsample_nearest(&[1.0, 2.0, 3.0, 4.0], (2, 2), (4, 4));
        assert_eq!(up, vec![1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]);
        assert_eq!(upsample_nearest(&[7.0], (1, 1), (3, 2)), vec![7.0; 6]);
    }

    #[test]
    fn gray_levels() {
        assert_eq!(gray_level(0.5), 128);
        assert_eq!(gray_level(0.0), 0);
        assert_eq!(gray_level(1.0), 255);
        assert_eq!(gray_level(-3.0), 0);
    }

    #[test]
    fn graymap_layout() {
        let bytes = encode_pgm(3, 2, &[0.0, 0.5, 1.0, 0.25, 0.75, 0.1]);
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(bytes.len(), b"P5\n3 2\n255\n".len() + 6);
        let (w, h, px) = decode_pgm(&bytes).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(px, vec![0, 128, 255, 64, 191, 26]);
    }

    #[test]
    fn csv_round_trip_is_close() {
        let m = Tensor::from_fn([2, 3], |i| 1.0 / (1.0 + (i as f64 * 0.7 - 1.0).exp()));
        let rows = parse_channel_csv(&channel_csv(&m)).unwrap();
        assert_eq!(rows.len(), 2);
        for (i, v) in rows.iter().flatten().enumerate() {
            assert!((v - m.data()[i]).abs() < 1e-6);
        }
    }
}
