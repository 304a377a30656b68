//! Strided, padded, grouped cross-correlation over 1, 2 or 3 trailing axes,
//! computed as im2col followed by a matrix product over the whole batch.

use crate::error::{contract, Error, Result};
use crate::linalg::{gemm_nn, gemm_nt, gemm_tn};

/// Geometry of a convolution call. Input layout is `(B, Cin, *spatial)`,
/// kernel layout `(Cout, Cin / groups, *k)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub rank: usize,
    pub padding: Vec<usize>,
    pub stride: Vec<usize>,
    pub groups: usize,
}

impl ConvSpec {
    /// Stride 1, single group.
    pub fn same(rank: usize, padding: &[usize]) -> Self {
        Self {
            rank,
            padding: padding.to_vec(),
            stride: vec![1; rank],
            groups: 1,
        }
    }

    pub fn with_stride(mut self, stride: &[usize]) -> Self {
        self.stride = stride.to_vec();
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

/// Resolved geometry, always lifted to three spatial axes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub rank: usize,
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub groups: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub output: [usize; 3],
    pub pad: [usize; 3],
    pub stride: [usize; 3],
}

fn lift(rank: usize, v: &[usize], fill: usize) -> [usize; 3] {
    let mut out = [fill; 3];
    out[3 - rank..].copy_from_slice(v);
    out
}

impl Geometry {
    pub fn new(input: &[usize], kernel: &[usize], spec: &ConvSpec) -> Result<Self> {
        let rank = spec.rank;
        if !(1..=3).contains(&rank) {
            return Err(contract!("convolution rank must be 1, 2 or 3, got {rank}"));
        }
        if input.len() != rank + 2 || kernel.len() != rank + 2 {
            return Err(Error::dim("convolution", input, kernel));
        }
        if spec.padding.len() != rank || spec.stride.len() != rank {
            return Err(contract!(
                "convolution padding/stride must have {rank} entries, got {:?}/{:?}",
                spec.padding,
                spec.stride
            ));
        }
        if spec.groups == 0 || spec.stride.contains(&0) {
            return Err(contract!("groups and strides must be positive"));
        }
        let (batch, cin, cout) = (input[0], input[1], kernel[0]);
        let groups = spec.groups;
        if cin % groups != 0 || cout % groups != 0 || kernel[1] * groups != cin {
            return Err(Error::dim("convolution groups", input, kernel));
        }
        let in3 = lift(rank, &input[2..], 1);
        let k3 = lift(rank, &kernel[2..], 1);
        let pad = lift(rank, &spec.padding, 0);
        let stride = lift(rank, &spec.stride, 1);
        let mut output = [0; 3];
        for a in 0..3 {
            let padded = in3[a] + 2 * pad[a];
            if k3[a] > padded {
                return Err(Error::dim("convolution kernel exceeds padded input", input, kernel));
            }
            output[a] = (padded - k3[a]) / stride[a] + 1;
        }
        Ok(Self {
            rank,
            batch,
            cin,
            cout,
            groups,
            input: in3,
            kernel: k3,
            output,
            pad,
            stride,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        let mut s = vec![self.batch, self.cout];
        s.extend_from_slice(&self.output[3 - self.rank..]);
        s
    }

    fn in_plane(&self) -> usize {
        self.input.iter().product()
    }

    fn out_plane(&self) -> usize {
        self.output.iter().product()
    }

    fn kvol(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Multiply-accumulates of the dense (padding-inclusive) formulation.
    pub fn macs(&self) -> u64 {
        (self.batch * self.cout * (self.cin / self.groups) * self.kvol() * self.out_plane()) as u64
    }
}

/// Output positions `o` along one axis with `0 <= o*s + k - p < n`.
fn valid_range(n: usize, m: usize, k: usize, p: usize, s: usize) -> (usize, usize) {
    let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
    if n + p <= k {
        return (0, 0);
    }
    let hi = ((n - 1 + p - k) / s + 1).min(m);
    (lo.min(hi), hi)
}

/// Fills `cols` (`cin_g·kvol` rows × `batch·out_plane` columns) for group `grp`.
fn im2col(g: &Geometry, x: &[f64], grp: usize, cols: &mut [f64]) {
    let cin_g = g.cin / g.groups;
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.output;
    let [pd, ph, pw] = g.pad;
    let [sd, sh, sw] = g.stride;
    let (in_plane, out_plane) = (g.in_plane(), g.out_plane());
    let ncols = g.batch * out_plane;
    for icg in 0..cin_g {
        let ic = grp * cin_g + icg;
        for a in 0..kd {
            let (d_lo, d_hi) = valid_range(id, od, a, pd, sd);
            for b in 0..kh {
                let (h_lo, h_hi) = valid_range(ih, oh, b, ph, sh);
                for c in 0..kw {
                    let (w_lo, w_hi) = valid_range(iw, ow, c, pw, sw);
                    let row = (icg * kd + a) * kh * kw + b * kw + c;
                    let crow = &mut cols[row * ncols..(row + 1) * ncols];
                    // Rows that touch padding keep zeros in the uncovered slots.
                    if (d_lo, d_hi, h_lo, h_hi, w_lo, w_hi) != (0, od, 0, oh, 0, ow) {
                        crow.fill(0.0);
                    }
                    if w_lo >= w_hi {
                        continue;
                    }
                    for n in 0..g.batch {
                        let xin = &x[(n * g.cin + ic) * in_plane..][..in_plane];
                        let cbase = n * out_plane;
                        for o_d in d_lo..d_hi {
                            let i_d = o_d * sd + a - pd;
                            for o_h in h_lo..h_hi {
                                let i_h = o_h * sh + b - ph;
                                let dst = cbase + (o_d * oh + o_h) * ow;
                                let src = (i_d * ih + i_h) * iw;
                                if sw == 1 {
                                    let i0 = src + w_lo + c - pw;
                                    crow[dst + w_lo..dst + w_hi].copy_from_slice(&xin[i0..i0 + (w_hi - w_lo)]);
                                } else {
                                    for o_w in w_lo..w_hi {
                                        crow[dst + o_w] = xin[src + o_w * sw + c - pw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds `cols` back into `dx`.
fn col2im(g: &Geometry, cols: &[f64], grp: usize, dx: &mut [f64]) {
    let cin_g = g.cin / g.groups;
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.output;
    let [pd, ph, pw] = g.pad;
    let [sd, sh, sw] = g.stride;
    let (in_plane, out_plane) = (g.in_plane(), g.out_plane());
    let ncols = g.batch * out_plane;
    for icg in 0..cin_g {
        let ic = grp * cin_g + icg;
        for a in 0..kd {
            let (d_lo, d_hi) = valid_range(id, od, a, pd, sd);
            for b in 0..kh {
                let (h_lo, h_hi) = valid_range(ih, oh, b, ph, sh);
                for c in 0..kw {
                    let (w_lo, w_hi) = valid_range(iw, ow, c, pw, sw);
                    let row = (icg * kd + a) * kh * kw + b * kw + c;
                    let crow = &cols[row * ncols..(row + 1) * ncols];
                    for n in 0..g.batch {
                        let xin = &mut dx[(n * g.cin + ic) * in_plane..][..in_plane];
                        let cbase = n * out_plane;
                        for o_d in d_lo..d_hi {
                            let i_d = o_d * sd + a - pd;
                            for o_h in h_lo..h_hi {
                                let i_h = o_h * sh + b - ph;
                                let src = cbase + (o_d * oh + o_h) * ow;
                                let dst = (i_d * ih + i_h) * iw;
                                for o_w in w_lo..w_hi {
                                    xin[dst + o_w * sw + c - pw] += crow[src + o_w];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward(g: &Geometry, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (cin_g, cout_g) = (g.cin / g.groups, g.cout / g.groups);
    let rows = cin_g * g.kvol();
    let out_plane = g.out_plane();
    let ncols = g.batch * out_plane;
    let mut cols = vec![0.0; rows * ncols];
    let mut tmp = vec![0.0; cout_g * ncols];
    let mut out = vec![0.0; g.batch * g.cout * out_plane];
    for grp in 0..g.groups {
        im2col(g, x, grp, &mut cols);
        tmp.fill(0.0);
        let wg = &w[grp * cout_g * rows..(grp + 1) * cout_g * rows];
        gemm_nn(cout_g, rows, ncols, wg, &cols, &mut tmp);
        for ocg in 0..cout_g {
            let oc = grp * cout_g + ocg;
            let b = bias.map_or(0.0, |b| b[oc]);
            for n in 0..g.batch {
                let src = &tmp[ocg * ncols + n * out_plane..][..out_plane];
                let dst = &mut out[(n * g.cout + oc) * out_plane..][..out_plane];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + b;
                }
            }
        }
    }
    out
}

/// Gradients with respect to input, kernel and bias. Any of the outputs may
/// be skipped by passing `None`.
pub(crate) fn backward(
    g: &Geometry,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    dbias: Option<&mut [f64]>,
) {
    let (cin_g, cout_g) = (g.cin / g.groups, g.cout / g.groups);
    let rows = cin_g * g.kvol();
    let out_plane = g.out_plane();
    let ncols = g.batch * out_plane;

    if let Some(db) = dbias {
        for n in 0..g.batch {
            for oc in 0..g.cout {
                db[oc] += dout[(n * g.cout + oc) * out_plane..][..out_plane].iter().sum::<f64>();
            }
        }
    }
    if dx.is_none() && dw.is_none() {
        return;
    }

    let mut cols = vec![0.0; rows * ncols];
    let mut gout = vec![0.0; cout_g * ncols];
    for grp in 0..g.groups {
        for ocg in 0..cout_g {
            let oc = grp * cout_g + ocg;
            for n in 0..g.batch {
                gout[ocg * ncols + n * out_plane..][..out_plane]
                    .copy_from_slice(&dout[(n * g.cout + oc) * out_plane..][..out_plane]);
            }
        }
        let wrange = grp * cout_g * rows..(grp + 1) * cout_g * rows;
        if let Some(dw) = dw.as_deref_mut() {
            im2col(g, x, grp, &mut cols);
            gemm_nt(cout_g, ncols, rows, &gout, &cols, &mut dw[wrange.clone()]);
        }
        if let Some(dx) = dx.as_deref_mut() {
            cols.fill(0.0);
            gemm_tn(rows, cout_g, ncols, &w[wrange], &gout, &mut cols);
            col2im(g, &cols, grp, dx);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_cases() {
        // n=5, k=3 taps, pad 1, stride 1 -> 5 outputs
        assert_eq!(valid_range(5, 5, 0, 1, 1), (1, 5));
        assert_eq!(valid_range(5, 5, 1, 1, 1), (0, 5));
        assert_eq!(valid_range(5, 5, 2, 1, 1), (0, 4));
        // stride 2, no pad, n=4, k=1: outputs 0,1 read inputs 0,2
        assert_eq!(valid_range(4, 2, 0, 0, 2), (0, 2));
        // all padding
        let (lo, hi) = valid_range(1, 1, 0, 3, 1);
        assert!(lo >= hi);
        assert_eq!(valid_range(1, 1, 3, 3, 1), (0, 1));
    }

    #[test]
    fn kernel_larger_than_padded_input_is_rejected() {
        let spec = ConvSpec::same(1, &[0]);
        assert!(matches!(
            Geometry::new(&[1, 1, 2], &[1, 1, 3], &spec),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn output_extent_law() {
        let spec = ConvSpec::same(2, &[3, 3]);
        let g = Geometry::new(&[2, 2, 5, 6], &[1, 2, 7, 7], &spec).unwrap();
        assert_eq!(g.output_shape(), vec![2, 1, 5, 6]);
        let s2 = ConvSpec::same(2, &[0, 0]).with_stride(&[2, 2]);
        let g = Geometry::new(&[1, 4, 8, 8], &[8, 4, 1, 1], &s2).unwrap();
        assert_eq!(g.output_shape(), vec![1, 8, 4, 4]);
    }

    /// Direct loop over output positions and kernel taps in 3-D lifted form.
    fn naive(g: &Geometry, x: &[f64], w: &[f64]) -> Vec<f64> {
        let (cin_g, cout_g) = (g.cin / g.groups, g.cout / g.groups);
        let [id, ih, iw] = g.input;
        let [kd, kh, kw] = g.kernel;
        let [od, oh, ow] = g.output;
        let mut out = vec![0.0; g.batch * g.cout * od * oh * ow];
        for n in 0..g.batch {
            for oc in 0..g.cout {
                let grp = oc / cout_g;
                for o in 0..od * oh * ow {
                    let (z, y, xx) = (o / (oh * ow), o / ow % oh, o % ow);
                    let mut acc = 0.0;
                    for icg in 0..cin_g {
                        let ic = grp * cin_g + icg;
                        for a in 0..kd {
                            for b in 0..kh {
                                for c in 0..kw {
                                    let p = [
                                        (z * g.stride[0] + a) as isize - g.pad[0] as isize,
                                        (y * g.stride[1] + b) as isize - g.pad[1] as isize,
                                        (xx * g.stride[2] + c) as isize - g.pad[2] as isize,
                                    ];
                                    if p.iter().zip([id, ih, iw]).any(|(&v, n)| v < 0 || v >= n as isize) {
                                        continue;
                                    }
                                    let xi = (((n * g.cin + ic) * id + p[0] as usize) * ih + p[1] as usize) * iw
                                        + p[2] as usize;
                                    let wi = ((oc * cin_g + icg) * kd + a) * kh * kw + b * kw + c;
                                    acc += x[xi] * w[wi];
                                }
                            }
                        }
                    }
                    out[(n * g.cout + oc) * od * oh * ow + o] = acc;
                }
            }
        }
        out
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    proptest::proptest! {
        #[test]
        fn matches_naive_loop_and_adjoint(
            rank in 1usize..4,
            batch in 1usize..3,
            groups in 1usize..3,
            cin_g in 1usize..3,
            cout_g in 1usize..3,
            n in 1usize..6,
            k in 1usize..6,
            pad in 0usize..4,
            stride in 1usize..3,
            seed: u64,
        ) {
            proptest::prop_assume!(n + 2 * pad >= k);
            let spec = ConvSpec::same(rank, &vec![pad; rank]).with_stride(&vec![stride; rank]).with_groups(groups);
            let mut xs = vec![batch, groups * cin_g];
            xs.extend(vec![n; rank]);
            let mut ws = vec![groups * cout_g, cin_g];
            ws.extend(vec![k; rank]);
            let g = Geometry::new(&xs, &ws, &spec).unwrap();
            let mut rng = crate::rng::Rng::new(seed);
            let mut draw = |len: usize| (0..len).map(|_| rng.uniform_in(-1.0, 1.0)).collect::<Vec<_>>();
            let x = draw(xs.iter().product());
            let w = draw(ws.iter().product());
            let y = forward(&g, &x, &w, None);
            let want = naive(&g, &x, &w);
            for (a, b) in y.iter().zip(&want) {
                proptest::prop_assert!((a - b).abs() < 1e-12);
            }
            // the convolution is bilinear, so <y, dy> = <x, dx> = <w, dw>
            let dy = draw(y.len());
            let (mut dx, mut dw) = (vec![0.0; x.len()], vec![0.0; w.len()]);
            backward(&g, &x, &w, &dy, Some(&mut dx), Some(&mut dw), None);
            let lhs = dot(&y, &dy);
            proptest::prop_assert!((lhs - dot(&x, &dx)).abs() < 1e-9);
            proptest::prop_assert!((lhs - dot(&w, &dw)).abs() < 1e-9);
        }
    }
}
