use super::kernels::{self, ConvGeom, NormSaved, PoolGeom, PoolMode};
use super::{gemm, MatLayout, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the second operand of a binary elementwise op spreads over the first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bcast {
    /// Identical shapes.
    Same,
    /// `B×C×1×1` over `B×C×H×W`.
    PerChannel,
    /// `B×1×H×W` over `B×C×H×W`.
    PerPosition,
    /// A single element over everything.
    Scalar,
}

impl Bcast {
    fn classify(a: &[usize], b: &[usize]) -> Result<Self> {
        if a == b {
            return Ok(Bcast::Same);
        }
        if b.iter().product::<usize>() == 1 {
            return Ok(Bcast::Scalar);
        }
        if let ([n, c, h, w], [bn, bc, bh, bw]) = (a, b) {
            if bn == n && bc == c && *bh == 1 && *bw == 1 {
                return Ok(Bcast::PerChannel);
            }
            if bn == n && *bc == 1 && bh == h && bw == w {
                return Ok(Bcast::PerPosition);
            }
            let _ = (h, w);
        }
        Err(Error::shape(format!("shapes {a:?} and {b:?} are not broadcast-compatible")))
    }

    /// Calls `f(a_range, b_part)` for runs of the full-size operand that meet
    /// either a single element or an equally long slice of the broadcast one.
    fn segments(self, shape: &[usize], mut f: impl FnMut(std::ops::Range<usize>, BPart)) {
        let n: usize = shape.iter().product();
        match self {
            Bcast::Same => f(0..n, BPart::Slice(0..n)),
            Bcast::Scalar => f(0..n, BPart::One(0)),
            Bcast::PerChannel => {
                let hw = shape[2] * shape[3];
                for k in 0..n / hw.max(1) {
                    f(k * hw..(k + 1) * hw, BPart::One(k));
                }
            }
            Bcast::PerPosition => {
                let hw = shape[2] * shape[3];
                for k in 0..n / hw.max(1) {
                    let bn = k / shape[1];
                    f(k * hw..(k + 1) * hw, BPart::Slice(bn * hw..(bn + 1) * hw));
                }
            }
        }
    }

    /// `f(a[i], b[map(i)])` for every element of the full-size operand.
    fn zip<T: Real>(self, shape: &[usize], av: &[T], bv: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
        let mut out = Vec::with_capacity(av.len());
        self.segments(shape, |r, part| match part {
            BPart::One(j) => {
                let y = bv[j];
                out.extend(av[r].iter().map(|&x| f(x, y)));
            }
            BPart::Slice(rb) => out.extend(av[r].iter().zip(&bv[rb]).map(|(&x, &y)| f(x, y))),
        });
        out
    }

    /// Sums `g[i]`, or `g[i]·w[i]` when weights are given, onto the broadcast
    /// operand's `n` elements.
    fn reduce<T: Real>(self, shape: &[usize], n: usize, g: &[T], w: Option<&[T]>) -> Vec<T> {
        if self == Bcast::Same {
            return match w {
                Some(w) => g.iter().zip(w).map(|(&d, &v)| d * v).collect(),
                None => g.to_vec(),
            };
        }
        let mut out = vec![T::zero(); n];
        self.segments(shape, |r, part| match part {
            BPart::One(j) => {
                let s = match w {
                    Some(w) => kernels::lane_dot(&g[r.clone()], &w[r]),
                    None => kernels::lane_sum(&g[r]),
                };
                out[j] = out[j] + s;
            }
            BPart::Slice(rb) => match w {
                Some(w) => {
                    for ((o, &d), &v) in out[rb].iter_mut().zip(&g[r.clone()]).zip(&w[r]) {
                        *o = *o + d * v;
                    }
                }
                None => {
                    for (o, &d) in out[rb].iter_mut().zip(&g[r]) {
                        *o = *o + d;
                    }
                }
            },
        });
        out
    }
}

#[derive(Clone, Debug)]
enum BPart {
    One(usize),
    Slice(std::ops::Range<usize>),
}

/// Statistics selection for batch normalization.
pub enum NormMode<'a, T> {
    /// Normalize with the batch's own statistics.
    Train { eps: T },
    /// Normalize with frozen running statistics.
    Eval { mean: &'a [T], var: &'a [T], eps: T },
}

/// Per-channel statistics observed in a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, the estimate folded into running statistics.
    pub var: Vec<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Pool2d { x: Var, geom: PoolGeom, mode: PoolMode, arg: Vec<usize> },
    Reduce { x: Var, mode: PoolMode, arg: Vec<usize>, spread: Vec<Vec<usize>> },
    BatchNorm { x: Var, gamma: Var, beta: Var, dims: [usize; 3], saved: NormSaved<T> },
    ChannelNorm { x: Var, gamma: Var, beta: Var, dims: [usize; 3], saved: NormSaved<T> },
    Linear { x: Var, w: Var, b: Var },
    Matmul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Softmax { x: Var, outer: usize, axis_len: usize, inner: usize },
    Binary { a: Var, b: Var, kind: Binary, bcast: Bcast },
    Relu { x: Var },
    Sigmoid { x: Var },
    Scale { x: Var, factor: T },
    Concat { parts: Vec<Var>, outer: usize, chunks: Vec<usize> },
    Narrow { x: Var, outer: usize, full: usize, start: usize, len: usize },
    Reshape { x: Var },
    Sum { x: Var },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Pool2d { .. } => "pool2d",
            Op::Reduce { .. } => "reduce",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::ChannelNorm { .. } => "channel_norm",
            Op::Linear { .. } => "linear",
            Op::Matmul { .. } => "matmul",
            Op::Softmax { .. } => "softmax",
            Op::Binary { kind: Binary::Add, .. } => "add",
            Op::Binary { kind: Binary::Sub, .. } => "sub",
            Op::Binary { kind: Binary::Mul, .. } => "mul",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Scale { .. } => "scale",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Reshape { .. } => "reshape",
            Op::Sum { .. } => "sum",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Gradients produced by [`Tape::backward`] for every leaf that asked for one.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Records primitive applications for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so inputs always precede their
/// consumers. A tape is single-threaded; build one per forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), check_finite: false }
    }

    /// Every recorded value is checked for NaN/Inf; the first offending op
    /// yields [`Error::Numerical`].
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an input. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::Numerical(format!(
                "{} produced a non-finite value (node {})",
                op.name(),
                self.nodes.len()
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, requires_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, padding)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.c_out] {
                return Err(Error::shape(format!(
                    "conv2d bias shape {:?} does not match {} output channels",
                    self.shape(b),
                    geom.c_out
                )));
            }
        }
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::new(geom.out_shape().to_vec(), out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(value, &inputs, Op::Conv2d { x, w, b, geom })
    }

    pub fn pool2d(&mut self, x: Var, window: usize, stride: usize, mode: PoolMode) -> Result<Var> {
        let geom = PoolGeom::new(self.shape(x), window, stride)?;
        let (out, arg) = kernels::pool2d_forward(self.value(x).data(), &geom, mode);
        let value = Tensor::new(geom.out_shape().to_vec(), out)?;
        self.push(value, &[x], Op::Pool2d { x, geom, mode, arg })
    }

    /// Per-channel reduction over all spatial positions: `B×C×H×W → B×C×1×1`.
    pub fn global_pool(&mut self, x: Var, mode: PoolMode) -> Result<Var> {
        let &[b, c, h, w] = self.shape(x) else {
            return Err(Error::shape(format!("global_pool expects 4-d input, got {:?}", self.shape(x))));
        };
        if h == 0 || w == 0 {
            return Err(Error::shape("global_pool over an empty plane"));
        }
        let p = h * w;
        self.reduce(x, mode, b * c, p, move |g, e| g * p + e, vec![b, c, 1, 1])
    }

    /// Reduction across channels at every position: `B×C×H×W → B×1×H×W`.
    pub fn reduce_channels(&mut self, x: Var, mode: PoolMode) -> Result<Var> {
        let &[b, c, h, w] = self.shape(x) else {
            return Err(Error::shape(format!("reduce_channels expects 4-d input, got {:?}", self.shape(x))));
        };
        let p = h * w;
        self.reduce(x, mode, b * p, c, move |g, e| ((g / p) * c + e) * p + g % p, vec![b, 1, h, w])
    }

    fn reduce(
        &mut self,
        x: Var,
        mode: PoolMode,
        groups: usize,
        group_len: usize,
        index_of: impl Fn(usize, usize) -> usize,
        out_shape: Vec<usize>,
    ) -> Result<Var> {
        let (out, arg) = kernels::reduce_groups(self.value(x).data(), groups, &index_of, group_len, mode);
        let spread = if mode == PoolMode::Avg {
            (0..groups).map(|g| (0..group_len).map(|e| index_of(g, e)).collect()).collect()
        } else {
            Vec::new()
        };
        let value = Tensor::new(out_shape, out)?;
        self.push(value, &[x], Op::Reduce { x, mode, arg, spread })
    }

    /// Batch normalization over `B×H×W` per channel. In training mode the
    /// returned statistics are the batch mean and unbiased variance.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape(format!("batchnorm2d expects at least 2-d input, got {shape:?}")));
        }
        let (b, c) = (shape[0], shape[1]);
        let p: usize = shape[2..].iter().product();
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::shape(format!(
                    "batchnorm2d {name} shape {:?} does not match {c} channels",
                    self.shape(v)
                )));
            }
        }
        let (stats, eps) = match mode {
            NormMode::Train { eps } => {
                if b < 2 {
                    return Err(Error::config("batchnorm2d in training mode needs a batch of at least 2"));
                }
                (None, eps)
            }
            NormMode::Eval { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batchnorm2d running statistics do not match channel count"));
                }
                (Some((mean, var)), eps)
            }
        };
        let dims = [b, c, p];
        let (y, saved, batch) = kernels::batchnorm_forward(
            self.value(x).data(),
            dims,
            self.value(gamma).data(),
            self.value(beta).data(),
            stats,
            eps,
        );
        let batch_stats = batch.map(|(mean, var)| {
            let n = T::from_usize(b * p).unwrap();
            let corr = if b * p > 1 { n / (n - T::one()) } else { T::one() };
            BatchStats { mean, var: var.into_iter().map(|v| v * corr).collect() }
        });
        let value = Tensor::new(shape, y)?;
        let v = self.push(value, &[x, gamma, beta], Op::BatchNorm { x, gamma, beta, dims, saved })?;
        Ok((v, batch_stats))
    }

    /// Normalizes across channels at every `(b, position)`, then applies a
    /// per-channel affine map.
    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape(format!("channel_norm expects at least 2-d input, got {shape:?}")));
        }
        let (b, c) = (shape[0], shape[1]);
        let p: usize = shape[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("channel_norm affine terms do not match channel count"));
        }
        let dims = [b, c, p];
        let (y, saved) = kernels::channelnorm_forward(
            self.value(x).data(),
            dims,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let value = Tensor::new(shape, y)?;
        self.push(value, &[x, gamma, beta], Op::ChannelNorm { x, gamma, beta, dims, saved })
    }

    /// `x·wᵀ + b` for `x: B×F_in`, `w: F_out×F_in`, `b: F_out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let (&[batch, f_in], &[f_out, w_in]) = (xs, ws) else {
            return Err(Error::shape(format!("linear expects 2-d input and weight, got {xs:?} and {ws:?}")));
        };
        if w_in != f_in {
            return Err(Error::shape(format!(
                "linear input width {f_in} does not match weight input width {w_in}"
            )));
        }
        if bs != [f_out] {
            return Err(Error::shape(format!("linear bias shape {bs:?} does not match {f_out} outputs")));
        }
        let mut out = vec![T::zero(); batch * f_out];
        gemm(
            self.value(x).data(),
            MatLayout::row_major(batch, f_in),
            self.value(w).data(),
            MatLayout::transposed(f_in, f_out),
            T::zero(),
            &mut out,
            MatLayout::row_major(batch, f_out),
        );
        let bias = self.value(b).data();
        for row in out.chunks_mut(f_out) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o = *o + bv;
            }
        }
        let value = Tensor::new(vec![batch, f_out], out)?;
        self.push(value, &[x, w, b], Op::Linear { x, w, b })
    }

    /// Matrix product of 2-d `M×K · K×N` or batched 3-d `B×M×K · B×K×N`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, kb, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [kb, n]) => (1, *m, *k, *kb, *n),
            ([ba, m, k], [bb, kb, n]) if ba == bb => (*ba, *m, *k, *kb, *n),
            _ => return Err(Error::shape(format!("matmul cannot combine {sa:?} and {sb:?}"))),
        };
        if k != kb {
            return Err(Error::shape(format!("matmul inner dimensions differ: {k} vs {kb}")));
        }
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            gemm(
                &self.value(a).data()[i * m * k..(i + 1) * m * k],
                MatLayout::row_major(m, k),
                &self.value(b).data()[i * k * n..(i + 1) * k * n],
                MatLayout::row_major(k, n),
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                MatLayout::row_major(m, n),
            );
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let value = Tensor::new(shape, out)?;
        self.push(value, &[a, b], Op::Matmul { a, b, batch, m, k, n })
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let axis_len = shape[axis];
        let y = kernels::softmax_forward(self.value(x).data(), outer, axis_len, inner);
        let value = Tensor::new(shape, y)?;
        self.push(value, &[x], Op::Softmax { x, outer, axis_len, inner })
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let bcast = Bcast::classify(&shape, self.shape(b))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let out = match kind {
            Binary::Add => bcast.zip(&shape, av, bv, |x, y| x + y),
            Binary::Sub => bcast.zip(&shape, av, bv, |x, y| x - y),
            Binary::Mul => bcast.zip(&shape, av, bv, |x, y| x * y),
        };
        let value = Tensor::new(shape, out)?;
        self.push(value, &[a, b], Op::Binary { a, b, kind, bcast })
    }

    /// `a + b`, with `b` broadcast per [`Bcast`].
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, &[x], Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| {
            // Split by sign so neither branch overflows.
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        });
        self.push(value, &[x], Op::Sigmoid { x })
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, &[x], Op::Scale { x, factor })
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("concat axis {axis} out of range for {base:?}")));
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut total = 0;
        let mut chunks = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(Error::shape(format!("concat along {axis}: {s:?} incompatible with {base:?}")));
            }
            total += s[axis];
            chunks.push(s[axis] * inner);
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &len) in parts.iter().zip(&chunks) {
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        self.push(value, parts, Op::Concat { parts: parts.to_vec(), outer, chunks })
    }

    /// The slice `start..start+len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(format!(
                "narrow {start}..{} along axis {axis} out of range for {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis] * inner;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&self.value(x).data()[o * full + start * inner..][..len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let value = Tensor::new(new_shape, out)?;
        self.push(
            value,
            &[x],
            Op::Narrow { x, outer, full, start: start * inner, len: len * inner },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(value, &[x], Op::Reshape { x })
    }

    /// Collapses everything after the leading axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        let b = shape.first().copied().unwrap_or(1);
        let rest: usize = shape.iter().skip(1).product();
        self.reshape(x, &[b, rest])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).data();
        let value = Tensor::scalar(kernels::lane_sum(xs));
        self.push(value, &[x], Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum(x)?;
        self.scale(s, T::one() / T::from_usize(n.max(1)).unwrap())
    }

    /// Replays the tape backwards from a scalar `loss`, consuming every
    /// recorded node. Gradients are summed when a value has several consumers.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::shape("backward on an empty tape"));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        self.nodes.truncate(loss.0 + 1);

        while let Some(node) = self.nodes.pop() {
            let id = self.nodes.len();
            let Some(g) = grads[id].take() else { continue };
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads[id] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |v: Var, delta: Vec<T>| match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.iter_mut().zip(delta) {
                    *e = *e + d;
                }
            }
            slot => *slot = Some(delta),
        };
        match node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let cg = kernels::conv2d_backward(
                    self.value(x).data(),
                    self.value(w).data(),
                    g,
                    &geom,
                    self.wants(x),
                    self.wants(w),
                    b.is_some_and(|b| self.wants(b)),
                );
                if let Some(dx) = cg.input {
                    acc(x, dx);
                }
                if let Some(dw) = cg.weight {
                    acc(w, dw);
                }
                if let (Some(b), Some(db)) = (b, cg.bias) {
                    acc(b, db);
                }
            }
            Op::Pool2d { x, geom, mode, arg } => {
                acc(x, kernels::pool2d_backward(g, &geom, mode, &arg));
            }
            Op::Reduce { x, mode, arg, spread } => {
                let mut dx = vec![T::zero(); self.value(x).numel()];
                match mode {
                    PoolMode::Avg => {
                        for (gi, idxs) in spread.iter().enumerate() {
                            let share = g[gi] / T::from_usize(idxs.len()).unwrap();
                            for &i in idxs {
                                dx[i] = dx[i] + share;
                            }
                        }
                    }
                    _ => {
                        for (gi, &i) in arg.iter().enumerate() {
                            dx[i] = dx[i] + g[gi];
                        }
                    }
                }
                acc(x, dx);
            }
            Op::BatchNorm { x, gamma, beta, dims, saved } => {
                let (dx, dg, db) = kernels::batchnorm_backward(g, dims, self.value(gamma).data(), &saved);
                if self.wants(x) {
                    acc(x, dx);
                }
                if self.wants(gamma) {
                    acc(gamma, dg);
                }
                if self.wants(beta) {
                    acc(beta, db);
                }
            }
            Op::ChannelNorm { x, gamma, beta, dims, saved } => {
                let (dx, dg, db) = kernels::channelnorm_backward(g, dims, self.value(gamma).data(), &saved);
                if self.wants(x) {
                    acc(x, dx);
                }
                if self.wants(gamma) {
                    acc(gamma, dg);
                }
                if self.wants(beta) {
                    acc(beta, db);
                }
            }
            Op::Linear { x, w, b } => {
                let (batch, f_in) = (self.shape(x)[0], self.shape(x)[1]);
                let f_out = self.shape(w)[0];
                if self.wants(x) {
                    let mut dx = vec![T::zero(); batch * f_in];
                    gemm(
                        g,
                        MatLayout::row_major(batch, f_out),
                        self.value(w).data(),
                        MatLayout::row_major(f_out, f_in),
                        T::zero(),
                        &mut dx,
                        MatLayout::row_major(batch, f_in),
                    );
                    acc(x, dx);
                }
                if self.wants(w) {
                    let mut dw = vec![T::zero(); f_out * f_in];
                    gemm(
                        g,
                        MatLayout::transposed(f_out, batch),
                        self.value(x).data(),
                        MatLayout::row_major(batch, f_in),
                        T::zero(),
                        &mut dw,
                        MatLayout::row_major(f_out, f_in),
                    );
                    acc(w, dw);
                }
                if self.wants(b) {
                    let mut db = vec![T::zero(); f_out];
                    for row in g.chunks(f_out) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    acc(b, db);
                }
            }
            Op::Matmul { a, b, batch, m, k, n } => {
                if self.wants(a) {
                    let mut da = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        gemm(
                            &g[i * m * n..(i + 1) * m * n],
                            MatLayout::row_major(m, n),
                            &self.value(b).data()[i * k * n..(i + 1) * k * n],
                            MatLayout::transposed(n, k),
                            T::zero(),
                            &mut da[i * m * k..(i + 1) * m * k],
                            MatLayout::row_major(m, k),
                        );
                    }
                    acc(a, da);
                }
                if self.wants(b) {
                    let mut db = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        gemm(
                            &self.value(a).data()[i * m * k..(i + 1) * m * k],
                            MatLayout::transposed(k, m),
                            &g[i * m * n..(i + 1) * m * n],
                            MatLayout::row_major(m, n),
                            T::zero(),
                            &mut db[i * k * n..(i + 1) * k * n],
                            MatLayout::row_major(k, n),
                        );
                    }
                    acc(b, db);
                }
            }
            Op::Softmax { x, outer, axis_len, inner } => {
                acc(x, kernels::softmax_backward(node.value.data(), g, outer, axis_len, inner));
            }
            Op::Binary { a, b, kind, bcast } => {
                let shape = node.value.shape();
                if self.wants(a) {
                    let da = match kind {
                        Binary::Add | Binary::Sub => g.to_vec(),
                        Binary::Mul => bcast.zip(shape, g, self.value(b).data(), |d, y| d * y),
                    };
                    acc(a, da);
                }
                if self.wants(b) {
                    let n = self.value(b).numel();
                    let db = match kind {
                        Binary::Add => bcast.reduce(shape, n, g, None),
                        Binary::Sub => bcast.reduce(shape, n, g, None).into_iter().map(|v| -v).collect(),
                        Binary::Mul => bcast.reduce(shape, n, g, Some(self.value(a).data())),
                    };
                    acc(b, db);
                }
            }
            Op::Relu { x } => {
                let xv = self.value(x).data();
                acc(x, g.iter().zip(xv).map(|(&d, &v)| if v > T::zero() { d } else { T::zero() }).collect());
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                acc(x, g.iter().zip(y).map(|(&d, &s)| d * s * (T::one() - s)).collect());
            }
            Op::Scale { x, factor } => {
                acc(x, g.iter().map(|&d| d * factor).collect());
            }
            Op::Concat { parts, outer, chunks } => {
                let total: usize = chunks.iter().sum();
                let mut offset = 0;
                for (&p, &len) in parts.iter().zip(&chunks) {
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            dp.extend_from_slice(&g[o * total + offset..][..len]);
                        }
                        acc(p, dp);
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, outer, full, start, len } => {
                let mut dx = vec![T::zero(); outer * full];
                for o in 0..outer {
                    dx[o * full + start..][..len].copy_from_slice(&g[o * len..(o + 1) * len]);
                }
                acc(x, dx);
            }
            Op::Reshape { x } => acc(x, g.to_vec()),
            Op::Sum { x } => acc(x, vec![g[0]; self.value(x).numel()]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 5.0]), true);
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert!(tape.is_empty());
    }

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn two_consumers_accumulate() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let a = tape.scale(x, 3.0).unwrap();
        let b = tape.scale(x, 4.0).unwrap();
        let c = tape.add(a, b).unwrap();
        let s = tape.sum(c).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[7.0, 7.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(tape.backward(x).is_err());
        let mut empty = Tape::<f64>::new();
        assert!(empty.backward(Var(0)).is_err());
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-2.0, 0.0, 2.0]), true);
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(r).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[0.0]), false);
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5]);
    }

    #[test]
    fn finite_checks_flag_nan() {
        let mut tape = Tape::new().with_finite_checks(true);
        let x = tape.leaf(t(&[1], &[f64::NAN]), false);
        let err = tape.scale(x, 2.0).unwrap_err();
        assert!(err.to_string().contains("scale"), "{err}");
    }

    #[test]
    fn broadcast_rejects_unsupported_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::<f64>::zeros(&[2, 3, 4, 4]), false);
        let b = tape.leaf(Tensor::<f64>::zeros(&[2, 3, 4, 1]), false);
        assert!(tape.add(a, b).is_err());
    }

    #[test]
    fn batchnorm_needs_two_samples_in_training() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::ones(&[1, 2, 2, 2]), false);
        let g = tape.leaf(Tensor::ones(&[2]), false);
        let b = tape.leaf(Tensor::zeros(&[2]), false);
        assert!(tape.batch_norm(x, g, b, NormMode::Train { eps: 1e-5 }).is_err());
    }

    #[test]
    fn unused_branch_gets_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let y = tape.leaf(t(&[2], &[3.0, 4.0]), true);
        let _unused = tape.scale(y, 2.0).unwrap();
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(y).is_none());
    }
}
