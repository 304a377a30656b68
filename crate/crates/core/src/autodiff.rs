//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and enough state
//! to replay its adjoint. Nodes are recorded in evaluation order, so walking
//! the tape backwards is a valid topological order. A tape is single-threaded;
//! independent samples use independent tapes.

use crate::conv::{self, ConvSpec, Geometry};
use crate::error::{contract, Error, Result};
use crate::linalg::{gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::{numel, strides, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Mul,
    Add,
}

enum Op {
    Leaf,
    Dense {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Conv {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: Geometry,
    },
    Pool {
        input: Var,
        mode: PoolMode,
        axes: Vec<usize>,
        argmax: Vec<usize>,
    },
    AdaptiveAvgPool {
        input: Var,
    },
    Activation {
        input: Var,
        kind: Activation,
    },
    Binary {
        a: Var,
        b: Var,
        kind: Elementwise,
        broadcast: Vec<usize>,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Reshape {
        input: Var,
    },
    Permute {
        input: Var,
        axes: Vec<usize>,
    },
    TimeShift {
        input: Var,
        fold: usize,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    RowNorm {
        input: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to the trainable leaves of a tape.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    /// Gradient for `var`, or `None` when no path reached it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient for `var`, or zeros of `like`'s shape when nothing reached it.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    fn add(&mut self, var: Var, shape: &[usize], g: &[f64]) {
        if self.grads.len() <= var.0 {
            self.grads.resize(var.0 + 1, None);
        }
        match &mut self.grads[var.0] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(shape.to_vec(), g.to_vec()).expect("leaf shape"));
            }
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    macs: u64,
}

/// For each element of a tensor of `shape`, the flat offset of the element it
/// maps to once the listed `axes` are collapsed to extent 1.
fn collapse_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let mut out_shape = shape.to_vec();
    for &a in axes {
        out_shape[a] = 1;
    }
    let mut ostr = strides(&out_shape);
    for &a in axes {
        ostr[a] = 0;
    }
    odometer(shape, &ostr)
}

/// Walks `shape` in row-major order accumulating `strides`.
fn odometer(shape: &[usize], strides: &[usize]) -> Vec<usize> {
    let n = numel(shape);
    let rank = shape.len();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            off -= strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    map
}

fn window(i: usize, len: usize, out: usize) -> (usize, usize) {
    (i * len / out, ((i + 1) * len).div_ceil(out))
}

fn sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    // Saturated values are pulled back inside the open unit interval.
    y.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates executed by dense and convolution ops so far,
    /// counted in the padding-inclusive convention.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// `out[n, j] = Σ_i input[n, i] · weight[i, j] + bias[j]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(input), self.shape(weight));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::dim("dense", xs, ws));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[1]);
        if let Some(b) = bias {
            if self.shape(b) != [dout] {
                return Err(Error::dim("dense bias", ws, self.shape(b)));
            }
        }
        let mut out = vec![0.0; n * dout];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bv);
            }
        }
        gemm_nn(
            n,
            din,
            dout,
            self.value(input).data(),
            self.value(weight).data(),
            &mut out,
        );
        self.macs += (n * din * dout) as u64;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        let value = Tensor::new(vec![n, dout], out)?;
        Ok(self.push(value, Op::Dense { input, weight, bias }, rg))
    }

    /// Cross-correlation over the trailing `spec.rank` axes of a
    /// `(B, Cin, *spatial)` input with a `(Cout, Cin/groups, *k)` kernel.
    pub fn conv(&mut self, input: Var, kernel: Var, bias: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let geom = Geometry::new(self.shape(input), self.shape(kernel), spec)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.cout] {
                return Err(Error::dim("convolution bias", self.shape(kernel), self.shape(b)));
            }
        }
        let out = conv::forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        self.macs += geom.macs();
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.rg(&deps);
        let value = Tensor::new(geom.output_shape(), out)?;
        Ok(self.push(
            value,
            Op::Conv {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Reduces the listed axes completely, keeping them as extent 1.
    /// Max routes its gradient to the first maximal element in row-major
    /// order.
    pub fn pool(&mut self, input: Var, mode: PoolMode, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axes.is_empty() {
            return Err(contract!("pool needs at least one axis"));
        }
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if axes.iter().any(|&a| a >= shape.len()) {
            return Err(contract!("pool axes {axes:?} invalid for shape {shape:?}"));
        }
        let mut out_shape = shape.clone();
        let mut count = 1;
        for &a in &axes {
            count *= shape[a];
            out_shape[a] = 1;
        }
        let map = collapse_map(&shape, &axes);
        let x = self.value(input).data();
        let m = numel(&out_shape);
        let mut out = vec![0.0; m];
        let mut argmax = Vec::new();
        match mode {
            PoolMode::Sum | PoolMode::Avg => {
                for (i, &o) in map.iter().enumerate() {
                    out[o] += x[i];
                }
                if mode == PoolMode::Avg {
                    let inv = 1.0 / count as f64;
                    out.iter_mut().for_each(|v| *v *= inv);
                }
            }
            PoolMode::Max => {
                out.fill(f64::NEG_INFINITY);
                argmax = vec![usize::MAX; m];
                for (i, &o) in map.iter().enumerate() {
                    if x[i] > out[o] || argmax[o] == usize::MAX {
                        out[o] = x[i];
                        argmax[o] = i;
                    }
                }
            }
        }
        let rg = self.rg(&[input]);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            value,
            Op::Pool {
                input,
                mode,
                axes,
                argmax,
            },
            rg,
        ))
    }

    /// Adaptive average pooling of the last two axes to `(out_h, out_w)`.
    /// Cell `(i, j)` averages rows `[⌊iH/oh⌋, ⌈(i+1)H/oh⌉)` and the matching
    /// columns.
    pub fn adaptive_avg_pool(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 {
            return Err(contract!("adaptive_avg_pool needs rank >= 2, got {shape:?}"));
        }
        if out_h == 0 || out_w == 0 {
            return Err(contract!("adaptive_avg_pool target extents must be positive"));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if out_h > h || out_w > w {
            return Err(Error::dim("adaptive_avg_pool", &shape, &[out_h, out_w]));
        }
        let lead = numel(&shape) / (h * w);
        let x = self.value(input).data();
        let mut out = vec![0.0; lead * out_h * out_w];
        for l in 0..lead {
            let plane = &x[l * h * w..(l + 1) * h * w];
            for i in 0..out_h {
                let (r0, r1) = window(i, h, out_h);
                for j in 0..out_w {
                    let (c0, c1) = window(j, w, out_w);
                    let mut s = 0.0;
                    for r in r0..r1 {
                        s += plane[r * w + c0..r * w + c1].iter().sum::<f64>();
                    }
                    out[(l * out_h + i) * out_w + j] = s / ((r1 - r0) * (c1 - c0)) as f64;
                }
            }
        }
        let mut out_shape = shape.clone();
        let r = out_shape.len();
        out_shape[r - 2] = out_h;
        out_shape[r - 1] = out_w;
        let rg = self.rg(&[input]);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::AdaptiveAvgPool { input }, rg))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let value = match kind {
            Activation::Sigmoid => self.value(input).map(sigmoid),
            Activation::Relu => self.value(input).map(|v| v.max(0.0)),
        };
        let rg = self.rg(&[input]);
        self.push(value, Op::Activation { input, kind }, rg)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Sigmoid)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Relu)
    }

    /// Element-wise `a ∘ b`. `b` must have `a`'s shape except on the
    /// `broadcast` axes, where it has extent 1 and is repeated.
    pub fn elementwise(&mut self, a: Var, b: Var, kind: Elementwise, broadcast: &[usize]) -> Result<Var> {
        let (ash, bsh) = (self.shape(a), self.shape(b));
        let compatible = ash.len() == bsh.len()
            && broadcast.iter().all(|&ax| ax < ash.len())
            && (0..ash.len()).all(|ax| {
                if broadcast.contains(&ax) {
                    bsh[ax] == 1
                } else {
                    bsh[ax] == ash[ax]
                }
            });
        if !compatible {
            return Err(Error::dim("elementwise broadcast", ash, bsh));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let op = |x: f64, y: f64| match kind {
            Elementwise::Mul => x * y,
            Elementwise::Add => x + y,
        };
        let out: Vec<f64> = if broadcast.is_empty() {
            av.iter().zip(bv).map(|(&x, &y)| op(x, y)).collect()
        } else {
            let map = collapse_map(ash, broadcast);
            av.iter().zip(&map).map(|(&x, &j)| op(x, bv[j])).collect()
        };
        let value = Tensor::new(ash.to_vec(), out)?;
        let rg = self.rg(&[a, b]);
        let mut broadcast = broadcast.to_vec();
        broadcast.sort_unstable();
        broadcast.dedup();
        Ok(self.push(value, Op::Binary { a, b, kind, broadcast }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Elementwise::Mul, &[])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Elementwise::Add, &[])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let value = self.value(input).map(|v| v * factor);
        let rg = self.rg(&[input]);
        self.push(value, Op::Scale { input, factor }, rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| contract!("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(contract!("concat axis {axis} invalid for {base:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len() && (0..s.len()).all(|ax| ax == axis || s[ax] == base[ax]);
            if !ok {
                return Err(Error::dim("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(parts);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(contract!(
                "slice [{start}, {}) of axis {axis} invalid for {shape:?}",
                start + len
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(&[input]);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::Slice { input, axis, start }, rg))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).reshape(shape.to_vec())?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Reshape { input }, rg))
    }

    /// Output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, input: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let mut seen = axes.to_vec();
        seen.sort_unstable();
        if seen != (0..shape.len()).collect::<Vec<_>>() {
            return Err(contract!("{axes:?} is not a permutation of axes of {shape:?}"));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let map = permute_map(&shape, axes);
        let x = self.value(input).data();
        let out: Vec<f64> = map.iter().map(|&i| x[i]).collect();
        let rg = self.rg(&[input]);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            value,
            Op::Permute {
                input,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    /// Temporal shift of a `(T, C, H, W)` map: the first `C / fold_div`
    /// channels take their value from frame `t - 1`, the next `C / fold_div`
    /// from frame `t + 1`, the rest are untouched; vacated slots are zero.
    pub fn time_shift(&mut self, input: Var, fold_div: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 {
            return Err(contract!("time_shift expects (T, C, H, W), got {shape:?}"));
        }
        let (t_len, c) = (shape[0], shape[1]);
        if fold_div == 0 || c % fold_div != 0 {
            return Err(Error::Config(format!(
                "time-shift fold divisor {fold_div} does not divide {c} channels"
            )));
        }
        let fold = c / fold_div;
        let plane = shape[2] * shape[3];
        let x = self.value(input).data();
        let mut out = vec![0.0; x.len()];
        for t in 0..t_len {
            for ch in 0..c {
                let src_t = if ch < fold {
                    t.checked_sub(1)
                } else if ch < 2 * fold {
                    (t + 1 < t_len).then_some(t + 1)
                } else {
                    Some(t)
                };
                if let Some(s) = src_t {
                    let dst = (t * c + ch) * plane;
                    let src = (s * c + ch) * plane;
                    out[dst..dst + plane].copy_from_slice(&x[src..src + plane]);
                }
            }
        }
        let rg = self.rg(&[input]);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::TimeShift { input, fold }, rg))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::dim("softmax_cross_entropy", &shape, &[labels.len()]));
        }
        let (n, k) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(contract!("label {bad} out of range for {k} classes"));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for r in 0..n {
            let row = &z[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[r * k + j] = e;
                denom += e;
            }
            for p in &mut probs[r * k..(r + 1) * k] {
                *p /= denom;
            }
            loss += denom.ln() + max - row[labels[r]];
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / n as f64),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Euclidean norm of each leading-axis slice: `(N, ...) -> (N)`.
    pub fn row_norm(&mut self, input: Var) -> Var {
        let shape = self.shape(input);
        let n = shape[0];
        let x = self.value(input).data();
        let d = x.len() / n;
        let norms: Vec<f64> = x
            .chunks(d)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let rg = self.rg(&[input]);
        let value = Tensor::new(vec![n], norms).expect("row_norm shape");
        self.push(value, Op::RowNorm { input }, rg)
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(input).len()).collect();
        let s = self.pool(input, PoolMode::Sum, &axes)?;
        self.reshape(s, &[1])
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(input).len()).collect();
        let s = self.pool(input, PoolMode::Avg, &axes)?;
        self.reshape(s, &[1])
    }

    /// Gradients of the scalar `loss` with respect to every trainable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let mut grads = Gradients::new();
        self.backward_accumulate(loss, &mut grads)?;
        Ok(grads)
    }

    /// Like [`Tape::backward`] but adds into existing leaf gradients instead
    /// of starting from zero.
    pub fn backward_accumulate(&self, loss: Var, grads: &mut Gradients) -> Result<()> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(contract!(
                "backward needs a scalar root, got shape {:?}",
                root.value.shape()
            ));
        }
        let mut work: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        work[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = work[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, Var(i), &g, &mut work, grads);
        }
        Ok(())
    }

    fn take_slot(&self, work: &mut [Option<Vec<f64>>], v: Var) -> Option<Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(work[v.0].take().unwrap_or_else(|| vec![0.0; node.value.len()]))
    }

    fn accum(&self, work: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if let Some(mut buf) = self.take_slot(work, v) {
            f(&mut buf);
            work[v.0] = Some(buf);
        }
    }

    fn backprop_node(&self, node: &Node, this: Var, g: &[f64], work: &mut [Option<Vec<f64>>], grads: &mut Gradients) {
        match &node.op {
            Op::Leaf => grads.add(this, node.value.shape(), g),
            Op::Dense { input, weight, bias } => {
                let xs = self.shape(*input);
                let (n, din) = (xs[0], xs[1]);
                let dout = self.shape(*weight)[1];
                let (x, w) = (self.value(*input).data(), self.value(*weight).data());
                self.accum(work, *input, |dx| gemm_nt(n, dout, din, g, w, dx));
                self.accum(work, *weight, |dw| gemm_tn(din, n, dout, x, g, dw));
                if let Some(b) = bias {
                    self.accum(work, *b, |db| {
                        for row in g.chunks(dout) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    });
                }
            }
            Op::Conv {
                input,
                kernel,
                bias,
                geom,
            } => {
                debug_assert_ne!(input, kernel);
                let mut dx = self.take_slot(work, *input);
                let mut dw = self.take_slot(work, *kernel);
                let mut db = bias.and_then(|b| self.take_slot(work, b));
                conv::backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if dx.is_some() {
                    work[input.0] = dx;
                }
                if dw.is_some() {
                    work[kernel.0] = dw;
                }
                if let (Some(b), Some(db)) = (bias, db) {
                    work[b.0] = Some(db);
                }
            }
            Op::Pool {
                input,
                mode,
                axes,
                argmax,
            } => {
                let shape = self.shape(*input);
                match mode {
                    PoolMode::Max => self.accum(work, *input, |dx| {
                        for (o, &i) in argmax.iter().enumerate() {
                            dx[i] += g[o];
                        }
                    }),
                    PoolMode::Sum | PoolMode::Avg => {
                        let count: usize = axes.iter().map(|&a| shape[a]).product();
                        let scale = if *mode == PoolMode::Avg {
                            1.0 / count as f64
                        } else {
                            1.0
                        };
                        let map = collapse_map(shape, axes);
                        self.accum(work, *input, |dx| {
                            for (d, &o) in dx.iter_mut().zip(&map) {
                                *d += g[o] * scale;
                            }
                        });
                    }
                }
            }
            Op::AdaptiveAvgPool { input } => {
                let shape = self.shape(*input);
                let r = shape.len();
                let (h, w) = (shape[r - 2], shape[r - 1]);
                let os = node.value.shape();
                let (oh, ow) = (os[r - 2], os[r - 1]);
                let lead = numel(shape) / (h * w);
                self.accum(work, *input, |dx| {
                    for l in 0..lead {
                        let plane = &mut dx[l * h * w..(l + 1) * h * w];
                        for i in 0..oh {
                            let (r0, r1) = window(i, h, oh);
                            for j in 0..ow {
                                let (c0, c1) = window(j, w, ow);
                                let v = g[(l * oh + i) * ow + j] / ((r1 - r0) * (c1 - c0)) as f64;
                                for row in r0..r1 {
                                    for p in &mut plane[row * w + c0..row * w + c1] {
                                        *p += v;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Activation { input, kind } => {
                let y = node.value.data();
                self.accum(work, *input, |dx| match kind {
                    Activation::Sigmoid => {
                        for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
                            *d += gv * yv * (1.0 - yv);
                        }
                    }
                    Activation::Relu => {
                        for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
                            if yv > 0.0 {
                                *d += gv;
                            }
                        }
                    }
                });
            }
            Op::Binary { a, b, kind, broadcast } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let map = (!broadcast.is_empty()).then(|| collapse_map(self.shape(*a), broadcast));
                let bidx = |i: usize| map.as_ref().map_or(i, |m| m[i]);
                self.accum(work, *a, |da| match kind {
                    Elementwise::Add => da.iter_mut().zip(g).for_each(|(d, gv)| *d += gv),
                    Elementwise::Mul => {
                        for (i, d) in da.iter_mut().enumerate() {
                            *d += g[i] * bv[bidx(i)];
                        }
                    }
                });
                self.accum(work, *b, |db| {
                    for (i, &gv) in g.iter().enumerate() {
                        db[bidx(i)] += match kind {
                            Elementwise::Add => gv,
                            Elementwise::Mul => gv * av[i],
                        };
                    }
                });
            }
            Op::Scale { input, factor } => {
                self.accum(work, *input, |dx| {
                    dx.iter_mut().zip(g).for_each(|(d, gv)| *d += gv * factor)
                });
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.shape(p)[*axis] * inner;
                    self.accum(work, p, |dp| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            for (d, s) in dp[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Slice { input, axis, start } => {
                let shape = self.shape(*input);
                let len = node.value.shape()[*axis];
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                self.accum(work, *input, |dx| {
                    for o in 0..outer {
                        let base = (o * shape[*axis] + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        for (d, s) in dx[base..base + len * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                });
            }
            Op::Reshape { input } => {
                self.accum(work, *input, |dx| dx.iter_mut().zip(g).for_each(|(d, gv)| *d += gv));
            }
            Op::Permute { input, axes } => {
                let map = permute_map(self.shape(*input), axes);
                self.accum(work, *input, |dx| {
                    for (o, &i) in map.iter().enumerate() {
                        dx[i] += g[o];
                    }
                });
            }
            Op::TimeShift { input, fold } => {
                let shape = self.shape(*input);
                let (t_len, c) = (shape[0], shape[1]);
                let plane = shape[2] * shape[3];
                self.accum(work, *input, |dx| {
                    for t in 0..t_len {
                        for ch in 0..c {
                            let src_t = if ch < *fold {
                                t.checked_sub(1)
                            } else if ch < 2 * fold {
                                (t + 1 < t_len).then_some(t + 1)
                            } else {
                                Some(t)
                            };
                            if let Some(s) = src_t {
                                let out = (t * c + ch) * plane;
                                let inp = (s * c + ch) * plane;
                                for (d, gv) in dx[inp..inp + plane].iter_mut().zip(&g[out..out + plane]) {
                                    *d += gv;
                                }
                            }
                        }
                    }
                });
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g[0] / n as f64;
                self.accum(work, *logits, |dz| {
                    for r in 0..n {
                        for j in 0..k {
                            let target = if j == labels[r] { 1.0 } else { 0.0 };
                            dz[r * k + j] += scale * (probs[r * k + j] - target);
                        }
                    }
                });
            }
            Op::RowNorm { input } => {
                let x = self.value(*input).data();
                let norms = node.value.data();
                let d = x.len() / norms.len();
                self.accum(work, *input, |dx| {
                    for (r, &nr) in norms.iter().enumerate() {
                        if nr == 0.0 {
                            continue;
                        }
                        let s = g[r] / nr;
                        for (dv, xv) in dx[r * d..(r + 1) * d].iter_mut().zip(&x[r * d..]) {
                            *dv += s * xv;
                        }
                    }
                });
            }
        }
    }
}

/// Input offset of every output element of `permute(shape, axes)`.
fn permute_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let in_str = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_str: Vec<usize> = axes.iter().map(|&a| in_str[a]).collect();
    odometer(&out_shape, &out_str)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn max_pool_routes_gradient_to_first_maximum() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 4], &[2.0, 5.0, 5.0, 1.0]));
        let m = tape.pool(x, PoolMode::Max, &[1]).unwrap();
        assert_eq!(tape.value(m).data(), &[5.0]);
        let loss = tape.sum(m).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn avg_pool_over_two_axes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn([2, 2, 3], |i| i as f64));
        let m = tape.pool(x, PoolMode::Avg, &[1, 2]).unwrap();
        assert_eq!(tape.shape(m), &[2, 1, 1]);
        assert_eq!(tape.value(m).data(), &[2.5, 8.5]);
    }

    #[test]
    fn sigmoid_stays_inside_the_unit_interval() {
        for x in [-1e4, -800.0, -40.0, 0.0, 40.0, 800.0, 1e4] {
            let y = sigmoid(x);
            assert!(y > 0.0 && y < 1.0, "sigmoid({x}) = {y}");
        }
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(1.0) - 0.731_058_578_630_004_9).abs() < 1e-15);
    }

    #[test]
    fn elementwise_product_rule() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[3.0, -2.0]));
        let b = tape.leaf(t(&[2], &[4.0, 0.5]));
        let p = tape.mul(a, b).unwrap();
        let loss = tape.sum(p).unwrap();
        assert_eq!(tape.value(loss).data(), &[11.0]);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[4.0, 0.5]);
        assert_eq!(g.get(b).unwrap().data(), &[3.0, -2.0]);
    }
}
