//! A small reverse-mode automatic differentiation tape over dense `f64`
//! tensors.
//!
//! The tape records every operation of one forward pass. Values are computed
//! eagerly; [`Graph::backward`] walks the tape in reverse and accumulates
//! gradients. Only the operations the detection network needs are provided.

use std::rc::Rc;

/// A dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn rows_cols(&self) -> (usize, usize) {
        let cols = *self.shape.last().expect("tensor has at least one axis");
        (self.data.len() / cols.max(1), cols)
    }
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Elementwise activation functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    /// Tanh approximation of GELU.
    #[default]
    Gelu,
    Silu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            Activation::Silu => x / (1.0 + (-x).exp()),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let inner = GELU_C * (x + 0.044715 * x * x * x);
                let t = inner.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
        }
    }
}

/// Sentinel gather index producing a zero (used for padding).
pub const PAD: usize = usize::MAX;

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    /// `[m, k] x [k, n]`.
    MatMul(Var, Var),
    /// `[b, m, k] x [b, k, n]`, or `[b, m, k] x [b, n, k]^T` when `transpose_b`.
    BatchMatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Add(Var, Var),
    /// Adds a bias vector along the last axis.
    AddBias(Var, Var),
    /// Multiplies every row of `[m, n]` by the matching entry of `[m]`.
    RowScale(Var, Var),
    Scale(Var, f64),
    Reshape(Var),
    /// `out[i] = src[index[i]]`, or zero where the index is [`PAD`].
    Gather(Var, Rc<Vec<usize>>),
    /// Concatenation along the last axis.
    Concat(Var, Var),
    /// Softmax over the last axis.
    Softmax(Var),
    /// `[a, b, c] -> [a, c]`, averaging the middle axis.
    MeanMiddle(Var),
    Act(Var, Activation),
    /// Normalization over the last axis with learned gain and bias.
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// The tape of one forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

/// `c (+)= op(a) * op(b)` for row-major matrices.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    // SAFETY: the slices cover exactly the strided extents described above,
    // which the debug assertions check.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape.to_vec()));
    f(&mut t.data);
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        &self.nodes[var.0].value.shape
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul {sa:?} x {sb:?}"
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &self.value(a).data,
            false,
            &self.value(b).data,
            false,
            &mut out,
            false,
        );
        self.push(Tensor::new(vec![m, n], out), Op::MatMul(a, b))
    }

    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "bmm {sa:?} x {sb:?}");
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b {
            assert_eq!(sb[2], k);
            sb[1]
        } else {
            assert_eq!(sb[1], k);
            sb[2]
        };
        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (&self.value(a).data, &self.value(b).data);
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    false,
                    &bv[i * k * n..(i + 1) * k * n],
                    transpose_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        self.push(
            Tensor::new(vec![batch, m, n], out),
            Op::BatchMatMul { a, b, transpose_b },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, data), Op::Add(a, b))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (_, cols) = self.value(x).rows_cols();
        assert_eq!(self.value(bias).len(), cols, "bias length");
        let bv = &self.value(bias).data;
        let data = self
            .value(x)
            .data
            .chunks(cols)
            .flat_map(|row| row.iter().zip(bv).map(|(v, b)| v + b))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, data), Op::AddBias(x, bias))
    }

    pub fn row_scale(&mut self, x: Var, scale: Var) -> Var {
        let (rows, cols) = self.value(x).rows_cols();
        assert_eq!(self.value(scale).len(), rows, "row scale length");
        let sv = &self.value(scale).data;
        let data = self
            .value(x)
            .data
            .chunks(cols)
            .zip(sv)
            .flat_map(|(row, s)| row.iter().map(move |v| v * s))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, data), Op::RowScale(x, scale))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let data = self.value(x).data.iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, data), Op::Scale(x, factor))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let value = Tensor::new(shape, self.value(x).data.clone());
        self.push(value, Op::Reshape(x))
    }

    pub fn gather(&mut self, x: Var, index: Rc<Vec<usize>>, shape: Vec<usize>) -> Var {
        let src = &self.value(x).data;
        let data = index.iter().map(|&i| if i == PAD { 0.0 } else { src[i] }).collect();
        self.push(Tensor::new(shape, data), Op::Gather(x, index))
    }

    /// Reorders the axes of `x`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let shape = self.shape(x).to_vec();
        let (out_shape, index) = permute_index(&shape, perm);
        self.gather(x, Rc::new(index), out_shape)
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (ra, ca) = self.value(a).rows_cols();
        let (rb, cb) = self.value(b).rows_cols();
        assert_eq!(ra, rb, "concat row mismatch");
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            data.extend_from_slice(&self.value(a).data[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&self.value(b).data[r * cb..(r + 1) * cb]);
        }
        let mut shape = self.shape(a).to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        self.push(Tensor::new(shape, data), Op::Concat(a, b))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let (_, cols) = self.value(x).rows_cols();
        let mut data = self.value(x).data.clone();
        for row in data.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, data), Op::Softmax(x))
    }

    pub fn mean_middle(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        assert_eq!(shape.len(), 3, "mean_middle expects a rank-3 tensor");
        let (a, b, c) = (shape[0], shape[1], shape[2]);
        let src = &self.value(x).data;
        let mut data = vec![0.0; a * c];
        for i in 0..a {
            for j in 0..b {
                let row = &src[(i * b + j) * c..(i * b + j + 1) * c];
                for (o, v) in data[i * c..(i + 1) * c].iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        let inv = 1.0 / b as f64;
        data.iter_mut().for_each(|v| *v *= inv);
        self.push(Tensor::new(vec![a, c], data), Op::MeanMiddle(x))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        let data = self.value(x).data.iter().map(|&v| act.apply(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, data), Op::Act(x, act))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (rows, cols) = self.value(x).rows_cols();
        assert_eq!(self.value(gain).len(), cols);
        assert_eq!(self.value(bias).len(), cols);
        let src = &self.value(x).data;
        let (g, b) = (&self.value(gain).data, &self.value(bias).data);
        let mut normalized = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let istd = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = istd;
            for c in 0..cols {
                let n = (row[c] - mean) * istd;
                normalized[r * cols + c] = n;
                out[r * cols + c] = n * g[c] + b[c];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            Tensor::new(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
        )
    }

    /// Back-propagates from the given output gradients.
    pub fn backward(&self, seeds: Vec<(Var, Tensor)>) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (var, g) in seeds {
            assert_eq!(g.shape, self.value(var).shape, "seed gradient shape");
            accumulate(&mut grads[var.0], &g.shape, |d| {
                d.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b)
            });
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &grad, &mut grads);
            grads[idx] = Some(grad);
        }
        Gradients { grads }
    }

    fn backward_node(&self, idx: usize, grad: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let g = &grad.data;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                accumulate(&mut grads[a.0], sa, |da| gemm(m, n, k, g, false, bv, true, da, true));
                accumulate(&mut grads[b.0], sb, |db| gemm(k, m, n, av, true, g, false, db, true));
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape[2];
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                accumulate(&mut grads[a.0], sa, |da| {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bv[i * k * n..(i + 1) * k * n];
                        // dA = dC * op(B)^T
                        gemm(
                            m,
                            n,
                            k,
                            gi,
                            false,
                            bi,
                            !transpose_b,
                            &mut da[i * m * k..(i + 1) * m * k],
                            true,
                        );
                    }
                });
                accumulate(&mut grads[b.0], sb, |db| {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let dbi = &mut db[i * k * n..(i + 1) * k * n];
                        if *transpose_b {
                            // B is [n, k]: dB = dC^T * A
                            gemm(n, m, k, gi, true, ai, false, dbi, true);
                        } else {
                            // dB = A^T * dC
                            gemm(k, m, n, ai, true, gi, false, dbi, true);
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    accumulate(&mut grads[v.0], &grad.shape, |d| {
                        d.iter_mut().zip(g).for_each(|(x, y)| *x += y)
                    });
                }
            }
            Op::AddBias(x, bias) => {
                accumulate(&mut grads[x.0], &grad.shape, |d| {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x += y)
                });
                let cols = self.value(*bias).len();
                accumulate(&mut grads[bias.0], self.shape(*bias), |d| {
                    for row in g.chunks(cols) {
                        d.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::RowScale(x, scale) => {
                let (xv, sv) = (&self.value(*x).data, &self.value(*scale).data);
                let cols = grad.shape.last().copied().unwrap_or(1);
                accumulate(&mut grads[x.0], self.shape(*x), |d| {
                    for ((drow, grow), s) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(sv) {
                        drow.iter_mut().zip(grow).for_each(|(a, b)| *a += b * s);
                    }
                });
                accumulate(&mut grads[scale.0], self.shape(*scale), |d| {
                    for ((ds, grow), xrow) in d.iter_mut().zip(g.chunks(cols)).zip(xv.chunks(cols)) {
                        *ds += grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
            }
            Op::Scale(x, factor) => {
                accumulate(&mut grads[x.0], &grad.shape, |d| {
                    d.iter_mut().zip(g).for_each(|(a, b)| *a += b * factor)
                });
            }
            Op::Reshape(x) => {
                accumulate(&mut grads[x.0], self.shape(*x), |d| {
                    d.iter_mut().zip(g).for_each(|(a, b)| *a += b)
                });
            }
            Op::Gather(x, index) => {
                accumulate(&mut grads[x.0], self.shape(*x), |d| {
                    for (&i, gv) in index.iter().zip(g) {
                        if i != PAD {
                            d[i] += gv;
                        }
                    }
                });
            }
            Op::Concat(a, b) => {
                let ca = *self.shape(*a).last().unwrap();
                let cb = *self.shape(*b).last().unwrap();
                let rows = g.len() / (ca + cb);
                accumulate(&mut grads[a.0], self.shape(*a), |d| {
                    for r in 0..rows {
                        for c in 0..ca {
                            d[r * ca + c] += g[r * (ca + cb) + c];
                        }
                    }
                });
                accumulate(&mut grads[b.0], self.shape(*b), |d| {
                    for r in 0..rows {
                        for c in 0..cb {
                            d[r * cb + c] += g[r * (ca + cb) + ca + c];
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let cols = *grad.shape.last().unwrap();
                let y = &node.value.data;
                accumulate(&mut grads[x.0], &grad.shape, |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((dv, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dv += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::MeanMiddle(x) => {
                let s = self.shape(*x);
                let (a, b, c) = (s[0], s[1], s[2]);
                let inv = 1.0 / b as f64;
                accumulate(&mut grads[x.0], s, |d| {
                    for i in 0..a {
                        for j in 0..b {
                            for k in 0..c {
                                d[(i * b + j) * c + k] += g[i * c + k] * inv;
                            }
                        }
                    }
                });
            }
            Op::Act(x, act) => {
                let xv = &self.value(*x).data;
                accumulate(&mut grads[x.0], &grad.shape, |d| {
                    for ((dv, gv), &v) in d.iter_mut().zip(g).zip(xv) {
                        *dv += gv * act.derivative(v);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let cols = *grad.shape.last().unwrap();
                let gv = &self.value(*gain).data;
                accumulate(&mut grads[gain.0], self.shape(*gain), |d| {
                    for (grow, nrow) in g.chunks(cols).zip(normalized.chunks(cols)) {
                        for c in 0..cols {
                            d[c] += grow[c] * nrow[c];
                        }
                    }
                });
                accumulate(&mut grads[bias.0], self.shape(*bias), |d| {
                    for grow in g.chunks(cols) {
                        d.iter_mut().zip(grow).for_each(|(a, b)| *a += b);
                    }
                });
                accumulate(&mut grads[x.0], &grad.shape, |d| {
                    let n = cols as f64;
                    for (r, ((drow, grow), nrow)) in d
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(normalized.chunks(cols))
                        .enumerate()
                    {
                        // dxhat = g * gain
                        let mut sum = 0.0;
                        let mut sum_n = 0.0;
                        for c in 0..cols {
                            let dxh = grow[c] * gv[c];
                            sum += dxh;
                            sum_n += dxh * nrow[c];
                        }
                        for c in 0..cols {
                            let dxh = grow[c] * gv[c];
                            drow[c] += inv_std[r] * (dxh - sum / n - nrow[c] * sum_n / n);
                        }
                    }
                });
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Output shape and flat gather index for an axis permutation.
pub fn permute_index(shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    assert_eq!(shape.len(), perm.len());
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let total: usize = shape.iter().product();
    let mut index = Vec::with_capacity(total);
    let mut counter = vec![0usize; shape.len()];
    for _ in 0..total {
        index.push(counter.iter().zip(perm).map(|(&c, &p)| c * in_strides[p]).sum());
        for axis in (0..counter.len()).rev() {
            counter[axis] += 1;
            if counter[axis] < out_shape[axis] {
                break;
            }
            counter[axis] = 0;
        }
    }
    (out_shape, index)
}

/// Gather index turning a `[len, channels]` sequence into im2col patches
/// `[out_len, kernel * channels]` for a zero-padded strided convolution.
pub fn im2col_index(len: usize, channels: usize, kernel: usize, stride: usize, padding: usize) -> (usize, Vec<usize>) {
    let out_len = (len + 2 * padding - kernel) / stride + 1;
    let mut index = Vec::with_capacity(out_len * kernel * channels);
    for o in 0..out_len {
        for k in 0..kernel {
            let pos = (o * stride + k) as isize - padding as isize;
            for c in 0..channels {
                if pos < 0 || pos as usize >= len {
                    index.push(PAD);
                } else {
                    index.push(pos as usize * channels + c);
                }
            }
        }
    }
    (out_len, index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Checks every input gradient of `f` against central differences, using a
    /// fixed random projection of the output as the scalar objective.
    fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().cloned().map(|t| g.leaf(t)).collect();
        let out = f(&mut g, &vars);
        let proj = random(g.shape(out).to_vec(), &mut rng);
        let objective = |inputs: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().cloned().map(|t| g.leaf(t)).collect();
            let out = f(&mut g, &vars);
            g.value(out)
                .data
                .iter()
                .zip(&proj.data)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let grads = g.backward(vec![(out, proj.clone())]);
        let h = 1e-6;
        for (vi, var) in vars.iter().enumerate() {
            let analytic = grads
                .get(*var)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(inputs[vi].shape.clone()));
            for j in 0..inputs[vi].len() {
                let mut plus = inputs.clone();
                plus[vi].data[j] += h;
                let mut minus = inputs.clone();
                minus[vi].data[j] -= h;
                let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let a = analytic.data[j];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-5, "input {vi}[{j}]: analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn matmul_and_bias_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check(
            vec![
                random(vec![3, 4], &mut rng),
                random(vec![4, 2], &mut rng),
                random(vec![2], &mut rng),
            ],
            |g, v| {
                let y = g.matmul(v[0], v[1]);
                g.add_bias(y, v[2])
            },
        );
    }

    #[test]
    fn batch_matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        check(
            vec![random(vec![2, 3, 4], &mut rng), random(vec![2, 4, 5], &mut rng)],
            |g, v| g.batch_matmul(v[0], v[1], false),
        );
        check(
            vec![random(vec![2, 3, 4], &mut rng), random(vec![2, 5, 4], &mut rng)],
            |g, v| g.batch_matmul(v[0], v[1], true),
        );
    }

    #[test]
    fn softmax_layer_norm_and_activation_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for act in [Activation::Gelu, Activation::Silu] {
            check(
                vec![
                    random(vec![3, 5], &mut rng),
                    random(vec![5], &mut rng),
                    random(vec![5], &mut rng),
                ],
                move |g, v| {
                    let s = g.softmax(v[0]);
                    let n = g.layer_norm(s, v[1], v[2]);
                    g.activation(n, act)
                },
            );
        }
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        check(
            vec![
                random(vec![2, 3, 4], &mut rng),
                random(vec![6], &mut rng),
                random(vec![6, 2], &mut rng),
            ],
            |g, v| {
                let p = g.permute(v[0], &[1, 0, 2]);
                let m = g.mean_middle(p);
                let r = g.reshape(v[0], vec![6, 4]);
                let scaled = g.row_scale(r, v[1]);
                let c = g.concat(scaled, v[2]);
                let c = g.scale(c, 0.5);
                let (out_len, idx) = im2col_index(6, 6, 3, 2, 1);
                let cols = g.gather(c, Rc::new(idx), vec![out_len, 18]);
                let m2 = g.reshape(m, vec![12]);
                let m2 = g.reshape(m2, vec![3, 4]);
                let a = g.concat(cols, m2);
                g.add(a, a)
            },
        );
    }

    #[test]
    fn permute_index_matches_manual_transpose() {
        let (shape, idx) = permute_index(&[2, 3], &[1, 0]);
        assert_eq!(shape, vec![3, 2]);
        assert_eq!(idx, vec![0, 3, 1, 4, 2, 5]);
    }

    #[test]
    fn im2col_pads_with_zeros() {
        let (out_len, idx) = im2col_index(4, 1, 3, 2, 1);
        assert_eq!(out_len, 2);
        assert_eq!(idx, vec![PAD, 0, 1, 1, 2, 3]);
    }
}
