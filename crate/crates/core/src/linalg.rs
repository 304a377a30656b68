//! Small row-major matrix kernels used by dense layers and im2col
//! convolution. All of them accumulate into `c`.

/// Adds `a0·b` to `c0` and so on for four rows at once, sharing each load of `b`.
#[inline]
fn axpy4(c: [&mut [f64]; 4], a: [f64; 4], b: &[f64]) {
    let [c0, c1, c2, c3] = c;
    let n = b.len();
    let (c0, c1, c2, c3) = (&mut c0[..n], &mut c1[..n], &mut c2[..n], &mut c3[..n]);
    for j in 0..n {
        let bv = b[j];
        c0[j] += a[0] * bv;
        c1[j] += a[1] * bv;
        c2[j] += a[2] * bv;
        c3[j] += a[3] * bv;
    }
}

#[inline]
fn axpy(c: &mut [f64], a: f64, b: &[f64]) {
    if a == 0.0 {
        return;
    }
    for (cv, &bv) in c.iter_mut().zip(b) {
        *cv += a * bv;
    }
}

fn rows4(c: &mut [f64], i: usize, n: usize) -> [&mut [f64]; 4] {
    let (r0, rest) = c[i * n..(i + 4) * n].split_at_mut(n);
    let (r1, rest) = rest.split_at_mut(n);
    let (r2, r3) = rest.split_at_mut(n);
    [r0, r1, r2, r3]
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let m4 = m - m % 4;
    for i in (0..m4).step_by(4) {
        for p in 0..k {
            let av = [a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]];
            if av == [0.0; 4] {
                continue;
            }
            axpy4(rows4(c, i, n), av, &b[p * n..(p + 1) * n]);
        }
    }
    for i in m4..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(crow, a[i * k + p], &b[p * n..(p + 1) * n]);
        }
    }
}

/// `c[m×n] += a[m×k] · bᵀ` where `b` is stored `n×k`.
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    let n4 = n - n % 4;
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in (0..n4).step_by(4) {
            let d = dot4(arow, &b[j * k..(j + 4) * k]);
            for (l, v) in d.into_iter().enumerate() {
                c[i * n + j + l] += v;
            }
        }
        for j in n4..n {
            c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[m×n] += aᵀ · b` where `a` is stored `k×m` and `b` is `k×n`.
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    let m4 = m - m % 4;
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        let acol = &a[p * m..(p + 1) * m];
        for i in (0..m4).step_by(4) {
            let av = [acol[i], acol[i + 1], acol[i + 2], acol[i + 3]];
            if av == [0.0; 4] {
                continue;
            }
            axpy4(rows4(c, i, n), av, brow);
        }
        for i in m4..m {
            axpy(&mut c[i * n..(i + 1) * n], acol[i], brow);
        }
    }
}

/// Dot products of `a` with four consecutive rows of `b`, each of length `a.len()`.
fn dot4(a: &[f64], b: &[f64]) -> [f64; 4] {
    let k = a.len();
    let (b0, rest) = b.split_at(k);
    let (b1, rest) = rest.split_at(k);
    let (b2, b3) = rest.split_at(k);
    let mut acc = [[0.0f64; 2]; 4];
    let pairs = k / 2;
    for q in 0..pairs {
        for l in 0..2 {
            let av = a[2 * q + l];
            acc[0][l] += av * b0[2 * q + l];
            acc[1][l] += av * b1[2 * q + l];
            acc[2][l] += av * b2[2 * q + l];
            acc[3][l] += av * b3[2 * q + l];
        }
    }
    let mut out = [0.0; 4];
    for (r, row) in [b0, b1, b2, b3].into_iter().enumerate() {
        let mut s = acc[r][0] + acc[r][1];
        for p in pairs * 2..k {
            s += a[p] * row[p];
        }
        out[r] = s;
    }
    out
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent accumulators let the loop vectorise.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * i + l] * b[4 * i + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = x[r * cols + c];
            }
        }
        t
    }

    #[test]
    fn three_layouts_agree_with_naive() {
        for (m, k, n) in [(3, 5, 7), (9, 6, 11), (4, 1, 8), (8, 13, 5)] {
            check(m, k, n);
        }
    }

    fn check(m: usize, k: usize, n: usize) {
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let want = naive(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        gemm_nn(m, k, n, &a, &b, &mut c);
        let mut c_nt = vec![0.0; m * n];
        gemm_nt(m, k, n, &a, &transpose(k, n, &b), &mut c_nt);
        let mut c_tn = vec![0.0; m * n];
        gemm_tn(m, k, n, &transpose(m, k, &a), &b, &mut c_tn);
        for i in 0..m * n {
            assert!((c[i] - want[i]).abs() < 1e-12);
            assert!((c_nt[i] - want[i]).abs() < 1e-12);
            assert!((c_tn[i] - want[i]).abs() < 1e-12);
        }
    }
}
