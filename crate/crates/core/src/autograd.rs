//! Reverse-mode differentiation over a recorded tape of tensor ops.
//!
//! Each op appends a node holding its forward value. Parents always have
//! smaller indices than their children, so a reverse sweep over the node
//! list is a valid topological order for backpropagation.

use crate::tensor::{inverse_permutation, permute, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Scale(Var, f64),
    /// Adds `bias[k]` to every element whose index along `axis` is `k`.
    AddBias { x: Var, bias: Var, axis: usize },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    MatMul { a: Var, b: Var, trans_b: bool },
    Bmm { a: Var, b: Var, trans_b: bool },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Relu(Var),
    Gelu(Var),
    MeanAxis { x: Var, axis: usize },
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    L2Normalize { x: Var, norms: Vec<f64> },
    PairwiseDist { a: Var, b: Var },
    SoftMarginTriplet { dist: Var, pairs: Vec<(usize, usize)>, gamma: f64 },
    Mse { pred: Var, target: Var },
    WeightedSum(Vec<(Var, f64)>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Scale(..) => "scale",
            Op::AddBias { .. } => "add_bias",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::MatMul { .. } => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::MeanAxis { .. } => "mean",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::PairwiseDist { .. } => "pairwise_dist",
            Op::SoftMarginTriplet { .. } => "soft_margin_triplet",
            Op::Mse { .. } => "mse",
            Op::WeightedSum(..) => "weighted_sum",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    label: Option<String>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// `log(1 + e^z)` without overflow.
pub(crate) fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `c[m, n] = sum_k a[m, k] * b[k, n]` (or `b[n, k]` when `trans_b`), accumulated into `c`.
fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize, trans_b: bool) {
    for i in 0..m {
        let row = &a[i * k..(i + 1) * k];
        let out = &mut c[i * n..(i + 1) * n];
        if trans_b {
            for (j, o) in out.iter_mut().enumerate() {
                let col = &b[j * k..(j + 1) * k];
                *o += row.iter().zip(col).map(|(x, y)| x * y).sum::<f64>();
            }
        } else {
            for (p, &av) in row.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in out.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

/// `c[k, n] += sum_m a[m, k] * g[m, n]`.
fn gemm_at_acc(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out = &mut c[p * n..(p + 1) * n];
            for (o, &gv) in out.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

fn conv_out_dim(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

struct ConvDims {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvDims {
    /// Visit every (output position, input position) tap for one batch item and
    /// one (co, ci, kh, kw) kernel entry.
    #[inline]
    fn for_each_tap(&self, kh: usize, kw: usize, mut f: impl FnMut(usize, usize)) {
        for oy in 0..self.oh {
            let iy = (oy * self.stride + kh) as isize - self.pad as isize;
            if iy < 0 || iy >= self.h as isize {
                continue;
            }
            for ox in 0..self.ow {
                let ix = (ox * self.stride + kw) as isize - self.pad as isize;
                if ix < 0 || ix >= self.w as isize {
                    continue;
                }
                f(oy * self.ow + ox, iy as usize * self.w + ix as usize);
            }
        }
    }
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
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Add(a, b) => self.rg(*a) || self.rg(*b),
            Op::Scale(a, _) | Op::Reshape(a) | Op::Permute(a, _) | Op::Relu(a) | Op::Gelu(a) => {
                self.rg(*a)
            }
            Op::Softmax(a) => self.rg(*a),
            Op::AddBias { x, bias, .. } => self.rg(*x) || self.rg(*bias),
            Op::MatMul { a, b, .. } | Op::Bmm { a, b, .. } => self.rg(*a) || self.rg(*b),
            Op::Conv2d { x, w, b, .. } => self.rg(*x) || self.rg(*w) || self.rg(*b),
            Op::MeanAxis { x, .. } => self.rg(*x),
            Op::LayerNorm { x, gain, bias, .. } => self.rg(*x) || self.rg(*gain) || self.rg(*bias),
            Op::L2Normalize { x, .. } => self.rg(*x),
            Op::PairwiseDist { a, b } => self.rg(*a) || self.rg(*b),
            Op::SoftMarginTriplet { dist, .. } => self.rg(*dist),
            Op::Mse { pred, target } => self.rg(*pred) || self.rg(*target),
            Op::WeightedSum(terms) => terms.iter().any(|(v, _)| self.rg(*v)),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf; gradients are tracked when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].requires_grad = requires_grad;
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A constant copy of `v`: no gradient flows back through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn set_label(&mut self, v: Var, label: impl Into<String>) {
        self.nodes[v.0].label = Some(label.into());
    }

    /// Describes the first recorded node holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            if n.value.is_finite() {
                return None;
            }
            Some(match &n.label {
                Some(l) => format!("{l} (node {i}, {})", n.op.name()),
                None => format!("node {i} ({}, shape {:?})", n.op.name(), n.value.shape()),
            })
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Var {
        let shape = self.shape(x).to_vec();
        assert_eq!(self.value(bias).len(), shape[axis], "add_bias: length mismatch");
        let inner: usize = shape[axis + 1..].iter().product();
        let n_axis = shape[axis];
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += b[(i / inner) % n_axis];
        }
        self.push(out, Op::AddBias { x, bias, axis })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self
            .value(a)
            .clone()
            .reshaped(shape.to_vec())
            .expect("reshape: element count mismatch");
        self.push(out, Op::Reshape(a))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Var {
        let out = permute(self.value(a), perm);
        self.push(out, Op::Permute(a, perm.to_vec()))
    }

    /// `a[m, k] · b[k, n]`, or `a · bᵀ` with `b[n, k]` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2, "matmul: rank-2 operands");
        let (m, k) = (sa[0], sa[1]);
        let n = if trans_b { sb[0] } else { sb[1] };
        let kb = if trans_b { sb[1] } else { sb[0] };
        assert_eq!(k, kb, "matmul: inner dimension mismatch");
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n, trans_b);
        self.push(Tensor::new([m, n], out).unwrap(), Op::MatMul { a, b, trans_b })
    }

    /// Batched matmul over the leading axis of rank-3 operands.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "bmm: rank-3 operands");
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        assert_eq!(k, if trans_b { sb[2] } else { sb[1] }, "bmm: inner dimension mismatch");
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; g * m * n];
        for gi in 0..g {
            gemm_acc(
                &ad[gi * m * k..(gi + 1) * m * k],
                &bd[gi * k * n..(gi + 1) * k * n],
                &mut out[gi * m * n..(gi + 1) * m * n],
                m,
                k,
                n,
                trans_b,
            );
        }
        self.push(Tensor::new([g, m, n], out).unwrap(), Op::Bmm { a, b, trans_b })
    }

    fn conv_dims(&self, x: Var, w: Var, stride: usize, pad: usize) -> ConvDims {
        let (sx, sw) = (self.shape(x), self.shape(w));
        assert!(sx.len() == 4 && sw.len() == 4, "conv2d: rank-4 operands");
        assert_eq!(sx[1], sw[1], "conv2d: input channel mismatch");
        assert_eq!(sw[2], sw[3], "conv2d: square kernels only");
        let k = sw[2];
        ConvDims {
            batch: sx[0],
            cin: sx[1],
            h: sx[2],
            w: sx[3],
            cout: sw[0],
            k,
            oh: conv_out_dim(sx[2], k, stride, pad),
            ow: conv_out_dim(sx[3], k, stride, pad),
            stride,
            pad,
        }
    }

    /// 2-D cross-correlation: `x[B, Ci, H, W]`, `w[Co, Ci, k, k]`, `b[Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let d = self.conv_dims(x, w, stride, pad);
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let (in_plane, out_plane) = (d.h * d.w, d.oh * d.ow);
        let mut out = vec![0.0; d.batch * d.cout * out_plane];
        for bi in 0..d.batch {
            for co in 0..d.cout {
                let o = &mut out[(bi * d.cout + co) * out_plane..][..out_plane];
                o.fill(bd[co]);
                for ci in 0..d.cin {
                    let xs = &xd[(bi * d.cin + ci) * in_plane..][..in_plane];
                    for kh in 0..d.k {
                        for kw in 0..d.k {
                            let wv = wd[((co * d.cin + ci) * d.k + kh) * d.k + kw];
                            d.for_each_tap(kh, kw, |op, ip| o[op] += wv * xs[ip]);
                        }
                    }
                }
            }
        }
        let t = Tensor::new([d.batch, d.cout, d.oh, d.ow], out).unwrap();
        self.push(t, Op::Conv2d { x, w, b, stride, pad })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a))
    }

    /// Mean along `axis`, keeping it with length 1.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        let shape = self.shape(x).to_vec();
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xd = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let src = &xd[(o * n + a) * inner..][..inner];
                for (dst, s) in out[o * inner..][..inner].iter_mut().zip(src) {
                    *dst += s;
                }
            }
        }
        for v in &mut out {
            *v /= n as f64;
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        self.push(Tensor::new(out_shape, out).unwrap(), Op::MeanAxis { x, axis })
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = *t.shape().last().expect("softmax: rank ≥ 1");
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.push(out, Op::Softmax(a))
    }

    /// Layer normalization over axis 1 (channels) of `x[B, C, ...]`, with
    /// per-channel affine `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let shape = self.shape(x).to_vec();
        let (batch, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        assert_eq!(self.value(gain).len(), c, "layer_norm: gain length");
        assert_eq!(self.value(bias).len(), c, "layer_norm: bias length");
        let (xd, gd, bd) = (self.value(x).data(), self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; batch * spatial];
        let mut out = vec![0.0; xd.len()];
        for b in 0..batch {
            for s in 0..spatial {
                let at = |ch: usize| (b * c + ch) * spatial + s;
                let mean = (0..c).map(|ch| xd[at(ch)]).sum::<f64>() / c as f64;
                let var = (0..c).map(|ch| (xd[at(ch)] - mean).powi(2)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std[b * spatial + s] = inv;
                for ch in 0..c {
                    let xh = (xd[at(ch)] - mean) * inv;
                    xhat[at(ch)] = xh;
                    out[at(ch)] = gd[ch] * xh + bd[ch];
                }
            }
        }
        let t = Tensor::new(shape, out).unwrap();
        self.push(t, Op::LayerNorm { x, gain, bias, xhat, inv_std })
    }

    /// Divides each row of `x[N, D]` by `max(‖row‖, eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        let shape = self.shape(x).to_vec();
        let d = shape[1];
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(shape[0]);
        for row in out.data_mut().chunks_mut(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        self.push(out, Op::L2Normalize { x, norms })
    }

    /// Euclidean distances between rows: `out[i, j] = ‖a_i − b_j‖`.
    pub fn pairwise_dist(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa[1], sb[1], "pairwise_dist: dimension mismatch");
        let (n, m, d) = (sa[0], sb[0], sa[1]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = euclidean(&ad[i * d..(i + 1) * d], &bd[j * d..(j + 1) * d]);
            }
        }
        self.push(Tensor::new([n, m], out).unwrap(), Op::PairwiseDist { a, b })
    }

    /// Mean of `log(1 + exp(γ (dist[p] − dist[q])))` over the flat index pairs `(p, q)`.
    pub fn soft_margin_triplet(&mut self, dist: Var, pairs: Vec<(usize, usize)>, gamma: f64) -> Var {
        let dd = self.value(dist).data();
        let total = pairs
            .iter()
            .map(|&(p, q)| softplus(gamma * (dd[p] - dd[q])))
            .sum::<f64>();
        let value = total / pairs.len() as f64;
        self.push(Tensor::scalar(value), Op::SoftMarginTriplet { dist, pairs, gamma })
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Var {
        assert_eq!(self.shape(pred), self.shape(target), "mse: shape mismatch");
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let sum: f64 = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
        let value = sum / p.len() as f64;
        self.push(Tensor::scalar(value), Op::Mse { pred, target })
    }

    /// `Σ wᵢ · termᵢ` over one-element terms.
    pub fn weighted_sum(&mut self, terms: Vec<(Var, f64)>) -> Var {
        let value = terms.iter().map(|&(v, w)| w * self.value(v).item()).sum();
        self.push(Tensor::scalar(value), Op::WeightedSum(terms))
    }

    /// Backpropagates from the one-element node `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward: root must be a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape().to_vec(), 1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients(grads)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, make: impl FnOnce() -> Tensor) {
        if !self.rg(v) {
            return;
        }
        let g = make();
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    /// Like [`Self::accumulate`] but writes into an existing buffer for ops
    /// that naturally produce gradients by accumulation.
    fn accumulate_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v).to_vec()));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, || g.clone());
                self.accumulate(grads, *b, || g.clone());
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, || g.map(|v| v * s)),
            Op::AddBias { x, bias, axis } => {
                self.accumulate(grads, *x, || g.clone());
                let shape = out.shape();
                let inner: usize = shape[axis + 1..].iter().product();
                let n_axis = shape[*axis];
                self.accumulate_with(grads, *bias, |db| {
                    for (k, gv) in g.data().iter().enumerate() {
                        db[(k / inner) % n_axis] += gv;
                    }
                });
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, || g.clone().reshaped(shape).unwrap());
            }
            Op::Permute(a, perm) => {
                self.accumulate(grads, *a, || permute(g, &inverse_permutation(perm)));
            }
            Op::MatMul { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = (sa[0], sa[1]);
                let n = out.shape()[1];
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate_with(grads, *a, |da| {
                    // dA = G · Bᵀ (or G · B when B was transposed)
                    if *trans_b {
                        gemm_acc(g.data(), bd, da, m, n, k, false);
                    } else {
                        gemm_acc(g.data(), bd, da, m, n, k, true);
                    }
                });
                let _ = sb;
                self.accumulate_with(grads, *b, |db| {
                    if *trans_b {
                        // dB[n, k] = Gᵀ · A
                        gemm_at_acc(g.data(), ad, db, m, n, k);
                    } else {
                        // dB[k, n] = Aᵀ · G
                        gemm_at_acc(ad, g.data(), db, m, k, n);
                    }
                });
            }
            Op::Bmm { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (groups, m, k) = (sa[0], sa[1], sa[2]);
                let n = out.shape()[2];
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let gd = g.data();
                self.accumulate_with(grads, *a, |da| {
                    for gi in 0..groups {
                        let gs = &gd[gi * m * n..(gi + 1) * m * n];
                        let bs = &bd[gi * k * n..(gi + 1) * k * n];
                        let das = &mut da[gi * m * k..(gi + 1) * m * k];
                        gemm_acc(gs, bs, das, m, n, k, !*trans_b);
                    }
                });
                self.accumulate_with(grads, *b, |db| {
                    for gi in 0..groups {
                        let gs = &gd[gi * m * n..(gi + 1) * m * n];
                        let as_ = &ad[gi * m * k..(gi + 1) * m * k];
                        let dbs = &mut db[gi * k * n..(gi + 1) * k * n];
                        if *trans_b {
                            gemm_at_acc(gs, as_, dbs, m, n, k);
                        } else {
                            gemm_at_acc(as_, gs, dbs, m, k, n);
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let d = self.conv_dims(*x, *w, *stride, *pad);
                let (xd, wd, gd) = (self.value(*x).data(), self.value(*w).data(), g.data());
                let (in_plane, out_plane) = (d.h * d.w, d.oh * d.ow);
                self.accumulate_with(grads, *b, |db| {
                    for bi in 0..d.batch {
                        for (co, dbv) in db.iter_mut().enumerate() {
                            *dbv += gd[(bi * d.cout + co) * out_plane..][..out_plane]
                                .iter()
                                .sum::<f64>();
                        }
                    }
                });
                self.accumulate_with(grads, *w, |dw| {
                    for bi in 0..d.batch {
                        for co in 0..d.cout {
                            let go = &gd[(bi * d.cout + co) * out_plane..][..out_plane];
                            for ci in 0..d.cin {
                                let xs = &xd[(bi * d.cin + ci) * in_plane..][..in_plane];
                                for kh in 0..d.k {
                                    for kw in 0..d.k {
                                        let mut acc = 0.0;
                                        d.for_each_tap(kh, kw, |op, ip| acc += go[op] * xs[ip]);
                                        dw[((co * d.cin + ci) * d.k + kh) * d.k + kw] += acc;
                                    }
                                }
                            }
                        }
                    }
                });
                self.accumulate_with(grads, *x, |dx| {
                    for bi in 0..d.batch {
                        for co in 0..d.cout {
                            let go = &gd[(bi * d.cout + co) * out_plane..][..out_plane];
                            for ci in 0..d.cin {
                                let dxs = &mut dx[(bi * d.cin + ci) * in_plane..][..in_plane];
                                for kh in 0..d.k {
                                    for kw in 0..d.k {
                                        let wv = wd[((co * d.cin + ci) * d.k + kh) * d.k + kw];
                                        d.for_each_tap(kh, kw, |op, ip| dxs[ip] += wv * go[op]);
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, || {
                    Tensor::from_fn(g.shape().to_vec(), |k| if av[k] > 0.0 { g.data()[k] } else { 0.0 })
                });
            }
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, || {
                    Tensor::from_fn(g.shape().to_vec(), |k| g.data()[k] * gelu_grad(av[k]))
                });
            }
            Op::MeanAxis { x, axis } => {
                let shape = self.shape(*x);
                let outer: usize = shape[..*axis].iter().product();
                let n = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                self.accumulate_with(grads, *x, |dx| {
                    for o in 0..outer {
                        let gs = &g.data()[o * inner..][..inner];
                        for a in 0..n {
                            for (d, gv) in dx[(o * n + a) * inner..][..inner].iter_mut().zip(gs) {
                                *d += gv / n as f64;
                            }
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let n = *out.shape().last().unwrap();
                self.accumulate_with(grads, *a, |da| {
                    for ((y, gy), dst) in out
                        .data()
                        .chunks(n)
                        .zip(g.data().chunks(n))
                        .zip(da.chunks_mut(n))
                    {
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for k in 0..n {
                            dst[k] += y[k] * (gy[k] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let shape = out.shape();
                let (batch, c) = (shape[0], shape[1]);
                let spatial: usize = shape[2..].iter().product();
                let gd = g.data();
                let gain_v = self.value(*gain).data();
                self.accumulate_with(grads, *bias, |db| {
                    for (k, gv) in gd.iter().enumerate() {
                        db[(k / spatial) % c] += gv;
                    }
                });
                self.accumulate_with(grads, *gain, |dg| {
                    for (k, gv) in gd.iter().enumerate() {
                        dg[(k / spatial) % c] += gv * xhat[k];
                    }
                });
                self.accumulate_with(grads, *x, |dx| {
                    let cf = c as f64;
                    for b in 0..batch {
                        for s in 0..spatial {
                            let at = |ch: usize| (b * c + ch) * spatial + s;
                            let dxhat = |ch: usize| gd[at(ch)] * gain_v[ch];
                            let sum: f64 = (0..c).map(dxhat).sum();
                            let sum_x: f64 = (0..c).map(|ch| dxhat(ch) * xhat[at(ch)]).sum();
                            let inv = inv_std[b * spatial + s];
                            for ch in 0..c {
                                dx[at(ch)] +=
                                    inv / cf * (cf * dxhat(ch) - sum - xhat[at(ch)] * sum_x);
                            }
                        }
                    }
                });
            }
            Op::L2Normalize { x, norms } => {
                let d = out.shape()[1];
                let raw = self.value(*x).data();
                self.accumulate_with(grads, *x, |dx| {
                    for (r, &n) in norms.iter().enumerate() {
                        let y = &out.data()[r * d..(r + 1) * d];
                        let gy = &g.data()[r * d..(r + 1) * d];
                        let dst = &mut dx[r * d..(r + 1) * d];
                        let raw_norm: f64 = raw[r * d..(r + 1) * d]
                            .iter()
                            .map(|v| v * v)
                            .sum::<f64>()
                            .sqrt();
                        if raw_norm < n {
                            // clamped by eps: the map is x / eps
                            for k in 0..d {
                                dst[k] += gy[k] / n;
                            }
                        } else {
                            let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                            for k in 0..d {
                                dst[k] += (gy[k] - y[k] * dot) / n;
                            }
                        }
                    }
                });
            }
            Op::PairwiseDist { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (n, m, d) = (sa[0], sb[0], sa[1]);
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let coef = |i: usize, j: usize| {
                    let dist = out.data()[i * m + j];
                    if dist > 0.0 {
                        g.data()[i * m + j] / dist
                    } else {
                        0.0
                    }
                };
                self.accumulate_with(grads, *a, |da| {
                    for i in 0..n {
                        for j in 0..m {
                            let c = coef(i, j);
                            if c == 0.0 {
                                continue;
                            }
                            for k in 0..d {
                                da[i * d + k] += c * (ad[i * d + k] - bd[j * d + k]);
                            }
                        }
                    }
                });
                self.accumulate_with(grads, *b, |db| {
                    for i in 0..n {
                        for j in 0..m {
                            let c = coef(i, j);
                            if c == 0.0 {
                                continue;
                            }
                            for k in 0..d {
                                db[j * d + k] -= c * (ad[i * d + k] - bd[j * d + k]);
                            }
                        }
                    }
                });
            }
            Op::SoftMarginTriplet { dist, pairs, gamma } => {
                let dd = self.value(*dist).data();
                let scale = g.item() * gamma / pairs.len() as f64;
                self.accumulate_with(grads, *dist, |dg| {
                    for &(p, q) in pairs {
                        let s = sigmoid(gamma * (dd[p] - dd[q])) * scale;
                        dg[p] += s;
                        dg[q] -= s;
                    }
                });
            }
            Op::Mse { pred, target } => {
                let (p, t) = (self.value(*pred).data(), self.value(*target).data());
                let c = 2.0 * g.item() / p.len() as f64;
                self.accumulate_with(grads, *pred, |dp| {
                    for k in 0..p.len() {
                        dp[k] += c * (p[k] - t[k]);
                    }
                });
                self.accumulate_with(grads, *target, |dt| {
                    for k in 0..p.len() {
                        dt[k] -= c * (p[k] - t[k]);
                    }
                });
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    let shape = self.shape(v).to_vec();
                    self.accumulate(grads, v, || Tensor::full(shape, g.item() * w));
                }
            }
        }
    }
}

/// Euclidean distance between equal-length slices.
pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of `d root / d leaf` for a graph built by `build`.
    fn check(shapes: &[&[usize]], build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut seed = 12345u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let inputs: Vec<Tensor> = shapes.iter().map(|s| Tensor::from_fn(s.to_vec(), |_| next())).collect();
        let eval = |inputs: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
            let root = build(&mut g, &vars);
            (g, vars, root)
        };
        let (g, vars, root) = eval(&inputs);
        let grads = g.backward(root);
        let h = 1e-5;
        for (which, t) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[which]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()));
            for k in 0..t.len() {
                let mut plus = inputs.clone();
                plus[which].data_mut()[k] += h;
                let mut minus = inputs.clone();
                minus[which].data_mut()[k] -= h;
                let (gp, _, rp) = eval(&plus);
                let (gm, _, rm) = eval(&minus);
                let numeric = (gp.value(rp).item() - gm.value(rm).item()) / (2.0 * h);
                let a = analytic.data()[k];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-5, "input {which}[{k}]: analytic {a} numeric {numeric}");
            }
        }
    }

    fn sum_weighted(g: &mut Graph, v: Var) -> Var {
        // pseudo-random fixed weights so every output element matters
        let w = Tensor::from_fn(g.shape(v).to_vec(), |k| ((k * 7919) % 13) as f64 / 13.0 - 0.4);
        let wv = g.constant(w);
        let n = g.value(v).len();
        let a = g.reshape(v, &[1, n]);
        let b = g.reshape(wv, &[1, n]);
        let p = g.matmul(a, b, true);
        g.reshape(p, &[])
    }

    #[test]
    fn grad_matmul_both_orientations() {
        check(&[&[3, 4], &[4, 2]], |g, v| {
            let y = g.matmul(v[0], v[1], false);
            sum_weighted(g, y)
        });
        check(&[&[3, 4], &[2, 4]], |g, v| {
            let y = g.matmul(v[0], v[1], true);
            sum_weighted(g, y)
        });
    }

    #[test]
    fn grad_bmm_softmax() {
        check(&[&[2, 3, 4], &[2, 5, 4], &[2, 5, 3]], |g, v| {
            let s = g.bmm(v[0], v[1], true);
            let p = g.softmax(s);
            let o = g.bmm(p, v[2], false);
            sum_weighted(g, o)
        });
    }

    #[test]
    fn grad_conv_stride_pad() {
        check(&[&[2, 2, 5, 6], &[3, 2, 3, 3], &[3]], |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 2, 1);
            let y = g.gelu(y);
            sum_weighted(g, y)
        });
    }

    #[test]
    fn grad_layer_norm_mean_permute_bias() {
        check(&[&[2, 4, 3, 2], &[4], &[4], &[2]], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-6);
            let m = g.mean_axis(y, 2);
            let p = g.permute(m, &[0, 3, 1, 2]);
            let q = g.add_bias(p, v[3], 1);
            let s = g.scale(q, 0.7);
            sum_weighted(g, s)
        });
    }

    #[test]
    fn grad_losses() {
        check(&[&[3, 4], &[3, 4]], |g, v| {
            let a = g.l2_normalize(v[0], 1e-12);
            let b = g.l2_normalize(v[1], 1e-12);
            let d = g.pairwise_dist(a, b);
            let t = g.soft_margin_triplet(d, vec![(0, 1), (4, 3), (8, 6), (0, 6)], 3.0);
            let m = g.mse(v[0], v[1]);
            g.weighted_sum(vec![(t, 1.0), (m, 0.3)])
        });
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new([2], vec![1.0, 2.0]).unwrap(), true);
        let t = g.detach(x);
        let m = g.mse(x, t);
        let grads = g.backward(m);
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(grads.get(t).is_none());
    }

    #[test]
    fn softplus_is_overflow_safe() {
        assert!(softplus(1e3).is_finite());
        assert_eq!(softplus(1e3), 1e3);
        assert!(softplus(-1e3) >= 0.0);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
