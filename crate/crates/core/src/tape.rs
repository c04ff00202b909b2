//! Reverse-mode autodiff over `ndarray`.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding an
//! owned value plus the op descriptor needed for its backward rule. Calling
//! [`Tape::backward`] walks the nodes in reverse creation order and
//! accumulates gradients into every leaf that was registered with
//! `requires_grad`. Backward can be seeded at several nodes at once, which is
//! how externally computed loss gradients (the closed-form losses in
//! [`crate::losses`]) are injected into the graph.
//!
//! The engine is deliberately small: just the ops the models need, all owned
//! standard-layout arrays, no implicit broadcasting beyond [`Tape::broadcast`]
//! and [`Tape::add_broadcast`]. Everything is generic over [`Scalar`] so the
//! op tests can run finite-difference checks at `f64`.

use ndarray::{ArrayD, ArrayViewD, Axis, Ix2, IxDyn, Slice};

/// Floating point scalar the tape operates on.
pub trait Scalar: ndarray::NdFloat {
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Handle to a tensor on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tx(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `a + b`, identical shapes.
    Add(Tx, Tx),
    /// `a + b` where `b`'s shape is a suffix of `a`'s shape.
    AddBroadcast(Tx, Tx),
    /// `b` tiled up to `shape`; `b`'s shape must be a suffix of `shape`.
    Broadcast(Tx),
    Scale(Tx, f64),
    /// Matrix product over the last two axes; rank 2 or 3 operands.
    Matmul {
        a: Tx,
        b: Tx,
        ta: bool,
        tb: bool,
    },
    /// 2-D convolution, NCHW input, OIHW weight, per-channel bias.
    Conv2d {
        x: Tx,
        w: Tx,
        b: Tx,
        stride: usize,
        pad: usize,
    },
    Relu(Tx),
    /// Softmax over the last axis.
    Softmax(Tx),
    /// Layer norm over the last axis with affine parameters.
    LayerNorm {
        x: Tx,
        gain: Tx,
        bias: Tx,
        eps: f64,
    },
    /// `x / (||x|| + eps)` over the last axis.
    L2Normalize {
        x: Tx,
        eps: f64,
    },
    Reshape(Tx),
    Permute {
        x: Tx,
        axes: Vec<usize>,
    },
    Concat {
        xs: Vec<Tx>,
        axis: usize,
    },
    SliceAxis {
        x: Tx,
        axis: usize,
        start: usize,
        len: usize,
    },
    /// Index-select along `axis`; indices may repeat.
    Gather {
        x: Tx,
        axis: usize,
        idx: Vec<usize>,
    },
    MeanAxis {
        x: Tx,
        axis: usize,
    },
}

struct Node<A: Scalar> {
    value: ArrayD<A>,
    op: Op,
    needs_grad: bool,
}

/// Gradients keyed by tape handle after a backward pass.
pub struct Grads<A: Scalar> {
    by_node: Vec<Option<ArrayD<A>>>,
}

impl<A: Scalar> Grads<A> {
    pub fn get(&self, t: Tx) -> Option<&ArrayD<A>> {
        self.by_node[t.0].as_ref()
    }

    pub fn take(&mut self, t: Tx) -> Option<ArrayD<A>> {
        self.by_node[t.0].take()
    }
}

pub struct Tape<A: Scalar> {
    nodes: Vec<Node<A>>,
}

impl<A: Scalar> Default for Tape<A> {
    fn default() -> Self {
        Self::new()
    }
}

impl<A: Scalar> Tape<A> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn value(&self, t: Tx) -> &ArrayD<A> {
        &self.nodes[t.0].value
    }

    pub fn shape(&self, t: Tx) -> &[usize] {
        self.nodes[t.0].value.shape()
    }

    fn push(&mut self, value: ArrayD<A>, op: Op, needs_grad: bool) -> Tx {
        // ndarray matmul may hand back an F-order array for transposed
        // operands; every stored value is kept C-contiguous.
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().to_owned()
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Tx(self.nodes.len() - 1)
    }

    fn needs(&self, t: Tx) -> bool {
        self.nodes[t.0].needs_grad
    }

    pub fn leaf(&mut self, value: ArrayD<A>, requires_grad: bool) -> Tx {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn add(&mut self, a: Tx, b: Tx) -> Tx {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng)
    }

    /// `a + b` with `b` broadcast over `a`'s leading axes.
    pub fn add_broadcast(&mut self, a: Tx, b: Tx) -> Tx {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(
            sa.len() >= sb.len() && sa[sa.len() - sb.len()..] == sb[..],
            "broadcast shape {sb:?} is not a suffix of {sa:?}"
        );
        let bview = self.nodes[b.0]
            .value
            .broadcast(IxDyn(&sa))
            .expect("suffix broadcast");
        let v = &self.nodes[a.0].value + &bview;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::AddBroadcast(a, b), ng)
    }

    /// Tiles `b` up to `shape` (suffix broadcast).
    pub fn broadcast(&mut self, b: Tx, shape: &[usize]) -> Tx {
        let sb = self.shape(b).to_vec();
        assert!(
            shape.len() >= sb.len() && shape[shape.len() - sb.len()..] == sb[..],
            "broadcast shape {sb:?} is not a suffix of {shape:?}"
        );
        let v = self.nodes[b.0]
            .value
            .broadcast(IxDyn(shape))
            .expect("suffix broadcast")
            .as_standard_layout()
            .to_owned();
        let ng = self.needs(b);
        self.push(v, Op::Broadcast(b), ng)
    }

    pub fn scale(&mut self, a: Tx, c: f64) -> Tx {
        let v = self.nodes[a.0].value.mapv(|x| x * A::from_f64(c));
        let ng = self.needs(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    /// Matrix product over the last two axes with optional transposes.
    ///
    /// Supported operand ranks: `2@2`, `3@3` (matching batch), `3@2`
    /// (shared right-hand side).
    pub fn matmul(&mut self, a: Tx, b: Tx, ta: bool, tb: bool) -> Tx {
        let v = matmul_vals(&self.nodes[a.0].value, &self.nodes[b.0].value, ta, tb);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Matmul { a, b, ta, tb }, ng)
    }

    pub fn conv2d(&mut self, x: Tx, w: Tx, b: Tx, stride: usize, pad: usize) -> Tx {
        let v = conv2d_forward(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
            stride,
            pad,
        );
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(v, Op::Conv2d { x, w, b, stride, pad }, ng)
    }

    pub fn relu(&mut self, x: Tx) -> Tx {
        let v = self.nodes[x.0].value.mapv(|v| v.max(A::zero()));
        let ng = self.needs(x);
        self.push(v, Op::Relu(x), ng)
    }

    pub fn softmax(&mut self, x: Tx) -> Tx {
        let mut v = self.nodes[x.0].value.clone();
        let d = v.shape()[v.ndim() - 1];
        for row in v.as_slice_mut().expect("standard layout").chunks_exact_mut(d) {
            let mut max = row[0];
            for &r in row[1..].iter() {
                if r > max {
                    max = r;
                }
            }
            let mut sum = A::zero();
            for r in row.iter_mut() {
                *r = (*r - max).exp();
                sum = sum + *r;
            }
            let inv = A::one() / sum;
            for r in row.iter_mut() {
                *r = *r * inv;
            }
        }
        let ng = self.needs(x);
        self.push(v, Op::Softmax(x), ng)
    }

    pub fn layer_norm(&mut self, x: Tx, gain: Tx, bias: Tx, eps: f64) -> Tx {
        let d = *self.shape(x).last().expect("layer_norm needs rank >= 1");
        assert_eq!(self.shape(gain), &[d]);
        assert_eq!(self.shape(bias), &[d]);
        let eps_a = A::from_f64(eps);
        let mut v = self.nodes[x.0].value.clone();
        {
            let g = self.nodes[gain.0].value.as_slice().expect("standard layout");
            let b = self.nodes[bias.0].value.as_slice().expect("standard layout");
            let inv_d = A::one() / A::from_f64(d as f64);
            for row in v.as_slice_mut().expect("standard layout").chunks_exact_mut(d) {
                let mut mean = A::zero();
                for &r in row.iter() {
                    mean = mean + r;
                }
                mean = mean * inv_d;
                let mut var = A::zero();
                for &r in row.iter() {
                    let c = r - mean;
                    var = var + c * c;
                }
                var = var * inv_d;
                let rstd = A::one() / (var + eps_a).sqrt();
                for i in 0..d {
                    row[i] = (row[i] - mean) * rstd * g[i] + b[i];
                }
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(v, Op::LayerNorm { x, gain, bias, eps }, ng)
    }

    pub fn l2_normalize(&mut self, x: Tx, eps: f64) -> Tx {
        let d = *self.shape(x).last().expect("l2_normalize needs rank >= 1");
        let eps_a = A::from_f64(eps);
        let mut v = self.nodes[x.0].value.clone();
        for row in v.as_slice_mut().expect("standard layout").chunks_exact_mut(d) {
            let mut sq = A::zero();
            for &r in row.iter() {
                sq = sq + r * r;
            }
            let inv = A::one() / (sq.sqrt() + eps_a);
            for r in row.iter_mut() {
                *r = *r * inv;
            }
        }
        let ng = self.needs(x);
        self.push(v, Op::L2Normalize { x, eps }, ng)
    }

    pub fn reshape(&mut self, x: Tx, shape: &[usize]) -> Tx {
        let v = self.nodes[x.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape element count");
        let ng = self.needs(x);
        self.push(v, Op::Reshape(x), ng)
    }

    pub fn permute(&mut self, x: Tx, axes: &[usize]) -> Tx {
        let v = self.nodes[x.0]
            .value
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let ng = self.needs(x);
        self.push(
            v,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            ng,
        )
    }

    pub fn concat(&mut self, xs: &[Tx], axis: usize) -> Tx {
        assert!(!xs.is_empty());
        let views: Vec<ArrayViewD<A>> = xs.iter().map(|t| self.nodes[t.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views)
            .expect("concat shapes")
            .as_standard_layout()
            .to_owned();
        let ng = xs.iter().any(|t| self.needs(*t));
        self.push(
            v,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            ng,
        )
    }

    pub fn slice_axis(&mut self, x: Tx, axis: usize, start: usize, len: usize) -> Tx {
        let v = self.nodes[x.0]
            .value
            .slice_axis(
                Axis(axis),
                Slice::from(start as isize..(start + len) as isize),
            )
            .as_standard_layout()
            .to_owned();
        let ng = self.needs(x);
        self.push(v, Op::SliceAxis { x, axis, start, len }, ng)
    }

    pub fn gather(&mut self, x: Tx, axis: usize, idx: &[usize]) -> Tx {
        let v = self.nodes[x.0].value.select(Axis(axis), idx);
        let v = v.as_standard_layout().to_owned();
        let ng = self.needs(x);
        self.push(
            v,
            Op::Gather {
                x,
                axis,
                idx: idx.to_vec(),
            },
            ng,
        )
    }

    pub fn mean_axis(&mut self, x: Tx, axis: usize) -> Tx {
        let n = self.shape(x)[axis];
        let inv = A::one() / A::from_f64(n as f64);
        let v = self.nodes[x.0].value.sum_axis(Axis(axis)).mapv(|s| s * inv);
        let ng = self.needs(x);
        self.push(v, Op::MeanAxis { x, axis }, ng)
    }

    /// Backward pass seeded with upstream gradients at one or more nodes.
    pub fn backward(&self, seeds: Vec<(Tx, ArrayD<A>)>) -> Grads<A> {
        let mut grads: Vec<Option<ArrayD<A>>> = vec![None; self.nodes.len()];
        for (t, g) in seeds {
            assert_eq!(
                g.shape(),
                self.shape(t),
                "seed gradient shape mismatch at node {}",
                t.0
            );
            accumulate(&mut grads[t.0], g);
        }
        for i in (0..self.nodes.len()).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = grads[i].take().expect("just checked");
            self.backward_node(i, &g, &mut grads);
            // Leaf gradients stay; interior gradients are no longer needed.
            if matches!(self.nodes[i].op, Op::Leaf) {
                let g = if g.is_standard_layout() {
                    g
                } else {
                    g.as_standard_layout().to_owned()
                };
                grads[i] = Some(g);
            }
        }
        Grads { by_node: grads }
    }

    fn backward_node(&self, i: usize, g: &ArrayD<A>, grads: &mut [Option<ArrayD<A>>]) {
        let val = |t: Tx| &self.nodes[t.0].value;
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            Op::AddBroadcast(a, b) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], reduce_to_shape(g, self.shape(*b)));
                }
            }
            Op::Broadcast(b) => {
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], reduce_to_shape(g, self.shape(*b)));
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g.mapv(|x| x * A::from_f64(*c)));
                }
            }
            Op::Matmul { a, b, ta, tb } => {
                let (ga, gb) = matmul_backward(val(*a), val(*b), g, *ta, *tb);
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], ga);
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (gx, gw, gb) = conv2d_backward(val(*x), val(*w), g, *stride, *pad);
                if self.needs(*x) {
                    accumulate(&mut grads[x.0], gx);
                }
                if self.needs(*w) {
                    accumulate(&mut grads[w.0], gw);
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::Relu(x) => {
                if self.needs(*x) {
                    let mut gx = g.clone();
                    ndarray::Zip::from(&mut gx)
                        .and(out)
                        .for_each(|gv, &ov| {
                            if ov <= A::zero() {
                                *gv = A::zero();
                            }
                        });
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::Softmax(x) => {
                if self.needs(*x) {
                    let d = out.shape()[out.ndim() - 1];
                    let mut gx = g.clone();
                    let ys = out.as_slice().expect("standard layout");
                    let gs = gx.as_slice_mut().expect("standard layout");
                    for (grow, yrow) in gs.chunks_exact_mut(d).zip(ys.chunks_exact(d)) {
                        let mut dot = A::zero();
                        for k in 0..d {
                            dot = dot + grow[k] * yrow[k];
                        }
                        for k in 0..d {
                            grow[k] = yrow[k] * (grow[k] - dot);
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (gx, gg, gb) = layer_norm_backward(val(*x), val(*gain), g, *eps);
                if self.needs(*x) {
                    accumulate(&mut grads[x.0], gx);
                }
                if self.needs(*gain) {
                    accumulate(&mut grads[gain.0], gg);
                }
                if self.needs(*bias) {
                    accumulate(&mut grads[bias.0], gb);
                }
            }
            Op::L2Normalize { x, eps } => {
                if self.needs(*x) {
                    accumulate(&mut grads[x.0], l2_normalize_backward(val(*x), g, *eps));
                }
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    let gx = g
                        .clone()
                        .into_shape_with_order(IxDyn(self.shape(*x)))
                        .expect("reshape grad");
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::Permute { x, axes } => {
                if self.needs(*x) {
                    let mut inv = vec![0usize; axes.len()];
                    for (to, &from) in axes.iter().enumerate() {
                        inv[from] = to;
                    }
                    let gx = g
                        .view()
                        .permuted_axes(IxDyn(&inv))
                        .as_standard_layout()
                        .to_owned();
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::Concat { xs, axis } => {
                let mut start = 0usize;
                for t in xs {
                    let len = self.shape(*t)[*axis];
                    if self.needs(*t) {
                        let gx = g
                            .slice_axis(
                                Axis(*axis),
                                Slice::from(start as isize..(start + len) as isize),
                            )
                            .as_standard_layout()
                            .to_owned();
                        accumulate(&mut grads[t.0], gx);
                    }
                    start += len;
                }
            }
            Op::SliceAxis { x, axis, start, len } => {
                if self.needs(*x) {
                    let mut gx = ArrayD::<A>::zeros(IxDyn(self.shape(*x)));
                    gx.slice_axis_mut(
                        Axis(*axis),
                        Slice::from(*start as isize..(*start + *len) as isize),
                    )
                    .assign(g);
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::Gather { x, axis, idx } => {
                if self.needs(*x) {
                    let mut gx = ArrayD::<A>::zeros(IxDyn(self.shape(*x)));
                    for (pos, &src) in idx.iter().enumerate() {
                        let gslice = g.index_axis(Axis(*axis), pos);
                        let mut dst = gx.index_axis_mut(Axis(*axis), src);
                        dst += &gslice;
                    }
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::MeanAxis { x, axis } => {
                if self.needs(*x) {
                    let n = self.shape(*x)[*axis];
                    let scaled = g.mapv(|v| v / A::from_f64(n as f64));
                    let mut gx = ArrayD::<A>::zeros(IxDyn(self.shape(*x)));
                    for mut lane in gx.axis_iter_mut(Axis(*axis)) {
                        lane += &scaled;
                    }
                    accumulate(&mut grads[x.0], gx);
                }
            }
        }
    }
}

fn accumulate<A: Scalar>(slot: &mut Option<ArrayD<A>>, g: ArrayD<A>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

/// Sums `g` down to `shape` (which must be a suffix of `g.shape()`).
fn reduce_to_shape<A: Scalar>(g: &ArrayD<A>, shape: &[usize]) -> ArrayD<A> {
    let mut out = g.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    debug_assert_eq!(out.shape(), shape);
    out
}

fn as2<A: Scalar>(v: &ArrayD<A>) -> ndarray::ArrayView2<'_, A> {
    v.view().into_dimensionality::<Ix2>().expect("rank-2 view")
}

fn matmul_vals<A: Scalar>(a: &ArrayD<A>, b: &ArrayD<A>, ta: bool, tb: bool) -> ArrayD<A> {
    let mm2 = |av: ndarray::ArrayView2<A>, bv: ndarray::ArrayView2<A>| {
        let av = if ta { av.reversed_axes() } else { av };
        let bv = if tb { bv.reversed_axes() } else { bv };
        av.dot(&bv)
    };
    match (a.ndim(), b.ndim()) {
        (2, 2) => mm2(as2(a), as2(b)).into_dyn(),
        (3, 2) if !ta => {
            // Batched lhs with a shared rhs: one GEMM over flattened rows.
            let (n, r, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let a2 = a.view().into_shape_with_order((n * r, k)).expect("standard layout");
            let y = mm2(a2, as2(b));
            let cols = y.ncols();
            y.into_shape_with_order(IxDyn(&[n, r, cols])).expect("len matches")
        }
        (3, 2) => {
            let n = a.shape()[0];
            let bv = as2(b);
            let mut parts = Vec::with_capacity(n);
            for i in 0..n {
                let av = a
                    .index_axis(Axis(0), i)
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                parts.push(mm2(av, bv));
            }
            stack3(parts)
        }
        (3, 3) => {
            let n = a.shape()[0];
            assert_eq!(n, b.shape()[0], "batched matmul batch mismatch");
            let (ar, ac) = (a.shape()[1], a.shape()[2]);
            let (br, bc) = (b.shape()[1], b.shape()[2]);
            // Attention-sized batches are thousands of tiny products; a
            // direct kernel avoids per-call GEMM setup entirely.
            if ar.max(ac).max(br).max(bc) <= 32 {
                return bmm_small(a, b, ta, tb);
            }
            let mut parts = Vec::with_capacity(n);
            for i in 0..n {
                let av = a
                    .index_axis(Axis(0), i)
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                let bv = b
                    .index_axis(Axis(0), i)
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                parts.push(mm2(av, bv));
            }
            stack3(parts)
        }
        (ra, rb) => panic!("unsupported matmul ranks {ra}@{rb}"),
    }
}

/// Batched product of small matrices by direct loops over the flat buffers,
/// one branch-free kernel per transpose combination.
fn bmm_small<A: Scalar>(a: &ArrayD<A>, b: &ArrayD<A>, ta: bool, tb: bool) -> ArrayD<A> {
    let n = a.shape()[0];
    let (ar, ac) = (a.shape()[1], a.shape()[2]);
    let (br, bc) = (b.shape()[1], b.shape()[2]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (kb, p) = if tb { (bc, br) } else { (br, bc) };
    assert_eq!(k, kb, "matmul inner dimension mismatch");
    let asl = a.as_slice().expect("standard layout");
    let bsl = b.as_slice().expect("standard layout");
    let mut out = vec![A::zero(); n * m * p];
    let (astride, bstride) = (ar * ac, br * bc);
    for i in 0..n {
        let ab = &asl[i * astride..(i + 1) * astride];
        let bb = &bsl[i * bstride..(i + 1) * bstride];
        let ob = &mut out[i * m * p..(i + 1) * m * p];
        match (ta, tb) {
            (false, false) => {
                // c[r, :] += a[r, kk] * b[kk, :]
                for r in 0..m {
                    let arow = &ab[r * k..(r + 1) * k];
                    let orow = &mut ob[r * p..(r + 1) * p];
                    for kk in 0..k {
                        let av = arow[kk];
                        let brow = &bb[kk * p..(kk + 1) * p];
                        for c in 0..p {
                            orow[c] = orow[c] + av * brow[c];
                        }
                    }
                }
            }
            (false, true) => {
                // c[r, c] = dot(a row r, b row c)
                for r in 0..m {
                    let arow = &ab[r * k..(r + 1) * k];
                    let orow = &mut ob[r * p..(r + 1) * p];
                    for (c, brow) in bb.chunks_exact(k).enumerate() {
                        let mut sum = A::zero();
                        for kk in 0..k {
                            sum = sum + arow[kk] * brow[kk];
                        }
                        orow[c] = sum;
                    }
                }
            }
            (true, false) => {
                // c[r, :] += a[kk, r] * b[kk, :]
                for kk in 0..k {
                    let arow = &ab[kk * m..(kk + 1) * m];
                    let brow = &bb[kk * p..(kk + 1) * p];
                    for r in 0..m {
                        let av = arow[r];
                        let orow = &mut ob[r * p..(r + 1) * p];
                        for c in 0..p {
                            orow[c] = orow[c] + av * brow[c];
                        }
                    }
                }
            }
            (true, true) => {
                for kk in 0..k {
                    let arow = &ab[kk * m..(kk + 1) * m];
                    for r in 0..m {
                        let av = arow[r];
                        let orow = &mut ob[r * p..(r + 1) * p];
                        for (c, bcol) in bb.chunks_exact(k).enumerate() {
                            orow[c] = orow[c] + av * bcol[kk];
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[n, m, p]), out).expect("shape matches")
}

fn stack3<A: Scalar>(parts: Vec<ndarray::Array2<A>>) -> ArrayD<A> {
    let n = parts.len();
    let (r, c) = parts[0].dim();
    let mut out = ArrayD::<A>::zeros(IxDyn(&[n, r, c]));
    for (i, p) in parts.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&p);
    }
    out
}

/// Gradients of `c = a' @ b'` with `a' = a or aᵀ`, `b' = b or bᵀ`.
fn matmul_backward<A: Scalar>(
    a: &ArrayD<A>,
    b: &ArrayD<A>,
    g: &ArrayD<A>,
    ta: bool,
    tb: bool,
) -> (ArrayD<A>, ArrayD<A>) {
    if a.ndim() == 3 && b.ndim() == 2 && !ta {
        // Shared rank-2 rhs: both gradients are single GEMMs over the
        // flattened batch rows.
        let (n, r, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let cols = g.shape()[2];
        let a2 = a.view().into_shape_with_order((n * r, k)).expect("standard layout");
        let g2 = g.view().into_shape_with_order((n * r, cols)).expect("standard layout");
        let ga2 = if tb {
            g2.dot(&as2(b))
        } else {
            g2.dot(&as2(b).reversed_axes())
        };
        let ga2 = if ga2.is_standard_layout() {
            ga2
        } else {
            ga2.as_standard_layout().to_owned()
        };
        let gb = if tb {
            g2.reversed_axes().dot(&a2).into_dyn()
        } else {
            a2.reversed_axes().dot(&g2).into_dyn()
        };
        let ga = ga2
            .into_shape_with_order(IxDyn(&[n, r, k]))
            .expect("len matches");
        return (ga, gb);
    }
    // d a' = g @ b'ᵀ and d b' = a'ᵀ @ g, then undo the transposes.
    let ga = if ta {
        // d a = (d a')ᵀ = (g @ b'ᵀ)ᵀ = b' @ gᵀ
        matmul_vals(b, g, tb, true)
    } else {
        matmul_vals(g, b, false, !tb)
    };
    let gb = if tb {
        // d b = (d b')ᵀ = (a'ᵀ @ g)ᵀ = gᵀ @ a'
        matmul_vals(g, a, true, ta)
    } else {
        matmul_vals(a, g, !ta, false)
    };
    // Shared rank-2 rhs with a rank-3 lhs: sum the batched gradient.
    let gb = if b.ndim() == 2 && gb.ndim() == 3 {
        gb.sum_axis(Axis(0))
    } else {
        gb
    };
    let ga = if a.ndim() == 2 && ga.ndim() == 3 {
        ga.sum_axis(Axis(0))
    } else {
        ga
    };
    (ga, gb)
}

fn layer_norm_backward<A: Scalar>(
    x: &ArrayD<A>,
    gain: &ArrayD<A>,
    g: &ArrayD<A>,
    eps: f64,
) -> (ArrayD<A>, ArrayD<A>, ArrayD<A>) {
    let d = x.shape()[x.ndim() - 1];
    let rows = x.len() / d;
    let xs = x.as_slice().expect("standard layout");
    let gs = g.as_slice().expect("standard layout");
    let gain_s = gain.as_slice().expect("standard layout");
    let mut gx = vec![A::zero(); rows * d];
    let mut gg = vec![A::zero(); d];
    let mut gb = vec![A::zero(); d];
    let inv_d = A::one() / A::from_f64(d as f64);
    let eps_a = A::from_f64(eps);
    let mut xhat = vec![A::zero(); d];
    let mut dxhat = vec![A::zero(); d];
    for r in 0..rows {
        let xr = &xs[r * d..(r + 1) * d];
        let gr = &gs[r * d..(r + 1) * d];
        let mut mean = A::zero();
        for &v in xr {
            mean = mean + v;
        }
        mean = mean * inv_d;
        let mut var = A::zero();
        for &v in xr {
            let c = v - mean;
            var = var + c * c;
        }
        var = var * inv_d;
        let rstd = A::one() / (var + eps_a).sqrt();
        // dL/dxhat, and the two row sums the backward needs.
        let mut sum_dxhat = A::zero();
        let mut sum_dxhat_xhat = A::zero();
        for i in 0..d {
            xhat[i] = (xr[i] - mean) * rstd;
            dxhat[i] = gr[i] * gain_s[i];
            sum_dxhat = sum_dxhat + dxhat[i];
            sum_dxhat_xhat = sum_dxhat_xhat + dxhat[i] * xhat[i];
            gg[i] = gg[i] + gr[i] * xhat[i];
            gb[i] = gb[i] + gr[i];
        }
        let grow = &mut gx[r * d..(r + 1) * d];
        for i in 0..d {
            grow[i] = rstd * (dxhat[i] - inv_d * sum_dxhat - xhat[i] * inv_d * sum_dxhat_xhat);
        }
    }
    (
        ArrayD::from_shape_vec(IxDyn(x.shape()), gx).expect("shape"),
        ArrayD::from_shape_vec(IxDyn(&[d]), gg).expect("shape"),
        ArrayD::from_shape_vec(IxDyn(&[d]), gb).expect("shape"),
    )
}

fn l2_normalize_backward<A: Scalar>(x: &ArrayD<A>, g: &ArrayD<A>, eps: f64) -> ArrayD<A> {
    let d = x.shape()[x.ndim() - 1];
    let rows = x.len() / d;
    let xs = x.as_slice().expect("standard layout");
    let gs = g.as_slice().expect("standard layout");
    let mut gx = vec![A::zero(); rows * d];
    let eps_a = A::from_f64(eps);
    for r in 0..rows {
        let xr = &xs[r * d..(r + 1) * d];
        let gr = &gs[r * d..(r + 1) * d];
        let mut sq = A::zero();
        for &v in xr {
            sq = sq + v * v;
        }
        let norm = sq.sqrt();
        if norm.as_f64() == 0.0 {
            // y == 0 here; use the zero subgradient rather than 1/eps blowup.
            continue;
        }
        let n = norm + eps_a;
        let mut dot = A::zero();
        for i in 0..d {
            dot = dot + xr[i] * gr[i];
        }
        let coef = dot / (n * n * norm);
        let inv_n = A::one() / n;
        let grow = &mut gx[r * d..(r + 1) * d];
        for i in 0..d {
            grow[i] = gr[i] * inv_n - xr[i] * coef;
        }
    }
    ArrayD::from_shape_vec(IxDyn(x.shape()), gx).expect("shape")
}

fn conv_out_len(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// im2col: (C, H, W) -> (C*kh*kw, oh*ow) for one image.
fn im2col<A: Scalar>(
    x: ndarray::ArrayView3<A>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> ndarray::Array2<A> {
    let (c, h, w) = x.dim();
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let mut cols = ndarray::Array2::<A>::zeros((c * kh * kw, oh * ow));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[(row, oy * ow + ox)] = x[(ci, iy as usize, ix as usize)];
                    }
                }
            }
        }
    }
    cols
}

/// col2im: scatter-add of (C*kh*kw, oh*ow) back into (C, H, W).
fn col2im<A: Scalar>(
    cols: &ndarray::Array2<A>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> ndarray::Array3<A> {
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let mut x = ndarray::Array3::<A>::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[(ci, iy as usize, ix as usize)] =
                            x[(ci, iy as usize, ix as usize)] + cols[(row, oy * ow + ox)];
                    }
                }
            }
        }
    }
    x
}

fn conv2d_forward<A: Scalar>(
    x: &ArrayD<A>,
    w: &ArrayD<A>,
    b: &ArrayD<A>,
    stride: usize,
    pad: usize,
) -> ArrayD<A> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, ci, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(c, ci, "conv2d channel mismatch");
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(wd, kw, stride, pad);
    let w2 = w.view().into_shape_with_order((o, ci * kh * kw)).unwrap();
    let mut out = ArrayD::<A>::zeros(IxDyn(&[n, o, oh, ow]));
    for i in 0..n {
        let xi = x
            .index_axis(Axis(0), i)
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();
        let cols = im2col(xi, kh, kw, stride, pad);
        let y = w2.dot(&cols); // (O, oh*ow)
        let mut oi = out.index_axis_mut(Axis(0), i);
        for oc in 0..o {
            let bias = b[oc];
            for p in 0..oh * ow {
                oi[[oc, p / ow, p % ow]] = y[(oc, p)] + bias;
            }
        }
    }
    out
}

fn conv2d_backward<A: Scalar>(
    x: &ArrayD<A>,
    w: &ArrayD<A>,
    g: &ArrayD<A>,
    stride: usize,
    pad: usize,
) -> (ArrayD<A>, ArrayD<A>, ArrayD<A>) {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, _ci, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let oh = g.shape()[2];
    let ow = g.shape()[3];
    let w2 = w.view().into_shape_with_order((o, c * kh * kw)).unwrap();
    let mut gx = ArrayD::<A>::zeros(IxDyn(&[n, c, h, wd]));
    let mut gw2 = ndarray::Array2::<A>::zeros((o, c * kh * kw));
    let mut gb = ndarray::Array1::<A>::zeros(o);
    for i in 0..n {
        let xi = x
            .index_axis(Axis(0), i)
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();
        let gi = g
            .index_axis(Axis(0), i)
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();
        let g2 = gi.into_shape_with_order((o, oh * ow)).unwrap();
        // Recompute im2col rather than caching it; memory stays O(activations).
        let cols = im2col(xi, kh, kw, stride, pad);
        gw2 = gw2 + g2.dot(&cols.t());
        let gcols = w2.t().dot(&g2); // (C*kh*kw, oh*ow)
        let gxi = col2im(&gcols, c, h, wd, kh, kw, stride, pad);
        gx.index_axis_mut(Axis(0), i).assign(&gxi);
        for oc in 0..o {
            let mut s = A::zero();
            for p in 0..oh * ow {
                s = s + g2[(oc, p)];
            }
            gb[oc] = gb[oc] + s;
        }
    }
    (
        gx,
        gw2.into_shape_with_order(IxDyn(w.shape()))
            .unwrap()
            .to_owned(),
        gb.into_dyn(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use ndarray::IxDyn;

    fn randn(stream: &mut Stream, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_simple_fn(IxDyn(shape), || stream.normal())
    }

    /// Central finite differences of `f` at `inputs`, compared against the
    /// tape gradients of the same scalar-valued graph.
    fn check_grads(
        shapes: &[&[usize]],
        f: &dyn Fn(&mut Tape<f64>, &[Tx]) -> Tx,
        seed: u64,
        tol: f64,
    ) {
        let mut stream = Stream::seed_from_u64(seed);
        let inputs: Vec<ArrayD<f64>> = shapes.iter().map(|s| randn(&mut stream, s)).collect();

        let eval = |inputs: &[ArrayD<f64>]| -> f64 {
            let mut tape = Tape::<f64>::new();
            let txs: Vec<Tx> = inputs.iter().map(|v| tape.leaf(v.clone(), true)).collect();
            let out = f(&mut tape, &txs);
            assert_eq!(tape.value(out).len(), 1, "scalar output expected");
            tape.value(out)[0]
        };

        // Analytic gradients.
        let mut tape = Tape::<f64>::new();
        let txs: Vec<Tx> = inputs.iter().map(|v| tape.leaf(v.clone(), true)).collect();
        let out = f(&mut tape, &txs);
        let seed_grad = ArrayD::from_elem(IxDyn(tape.shape(out)), 1.0);
        let grads = tape.backward(vec![(out, seed_grad)]);

        let h = 1e-5;
        for (k, tx) in txs.iter().enumerate() {
            let ga = grads.get(*tx).expect("leaf gradient present").clone();
            let mut perturbed = inputs.clone();
            for idx in 0..inputs[k].len() {
                let orig = perturbed[k].as_slice().unwrap()[idx];
                perturbed[k].as_slice_mut().unwrap()[idx] = orig + h;
                let up = eval(&perturbed);
                perturbed[k].as_slice_mut().unwrap()[idx] = orig - h;
                let down = eval(&perturbed);
                perturbed[k].as_slice_mut().unwrap()[idx] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = ga.as_slice().unwrap()[idx];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    (fd - an).abs() / denom < tol,
                    "input {k} elem {idx}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    fn sum_all(tape: &mut Tape<f64>, x: Tx) -> Tx {
        let n = tape.value(x).len();
        let flat = tape.reshape(x, &[n]);
        // Weighted sum so gradients are not uniform.
        let weights: Vec<f64> = (0..n).map(|i| 0.25 + 0.5 * (i as f64 % 3.0)).collect();
        let w = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[n, 1]), weights).unwrap(), false);
        let flat2 = tape.reshape(flat, &[1, n]);
        let s = tape.matmul(flat2, w, false, false);
        tape.reshape(s, &[1])
    }

    #[test]
    fn grad_matmul_all_flag_combinations() {
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let (sa, sb) = if ta { ([3, 2], ()) } else { ([2, 3], ()) };
            let _ = sb;
            let sbv = if tb { [4, 3] } else { [3, 4] };
            check_grads(
                &[&sa, &sbv],
                &|tape, txs| {
                    let y = tape.matmul(txs[0], txs[1], ta, tb);
                    sum_all(tape, y)
                },
                42,
                1e-6,
            );
        }
    }

    #[test]
    fn grad_matmul_batched_and_shared_rhs() {
        check_grads(
            &[&[2, 3, 4], &[2, 4, 5]],
            &|tape, txs| {
                let y = tape.matmul(txs[0], txs[1], false, false);
                sum_all(tape, y)
            },
            1,
            1e-6,
        );
        check_grads(
            &[&[2, 3, 4], &[4, 5]],
            &|tape, txs| {
                let y = tape.matmul(txs[0], txs[1], false, false);
                sum_all(tape, y)
            },
            2,
            1e-6,
        );
        check_grads(
            &[&[2, 3, 4], &[2, 6, 4]],
            &|tape, txs| {
                let y = tape.matmul(txs[0], txs[1], false, true);
                sum_all(tape, y)
            },
            3,
            1e-6,
        );
    }

    #[test]
    fn grad_softmax_layernorm_l2norm() {
        check_grads(
            &[&[3, 5]],
            &|tape, txs| {
                let y = tape.softmax(txs[0]);
                sum_all(tape, y)
            },
            4,
            1e-6,
        );
        check_grads(
            &[&[3, 5], &[5], &[5]],
            &|tape, txs| {
                let y = tape.layer_norm(txs[0], txs[1], txs[2], 1e-5);
                sum_all(tape, y)
            },
            5,
            1e-5,
        );
        check_grads(
            &[&[4, 6]],
            &|tape, txs| {
                let y = tape.l2_normalize(txs[0], 1e-12);
                sum_all(tape, y)
            },
            6,
            1e-6,
        );
    }

    #[test]
    fn grad_conv2d() {
        check_grads(
            &[&[2, 2, 5, 5], &[3, 2, 3, 3], &[3]],
            &|tape, txs| {
                let y = tape.conv2d(txs[0], txs[1], txs[2], 2, 1);
                sum_all(tape, y)
            },
            7,
            1e-5,
        );
    }

    #[test]
    fn grad_structural_ops() {
        check_grads(
            &[&[2, 3, 4], &[4]],
            &|tape, txs| {
                let a = tape.add_broadcast(txs[0], txs[1]);
                let b = tape.permute(a, &[1, 0, 2]);
                let c = tape.slice_axis(b, 0, 1, 2);
                let d = tape.gather(c, 2, &[0, 0, 3, 1]);
                let e = tape.mean_axis(d, 1);
                let f = tape.relu(e);
                sum_all(tape, f)
            },
            8,
            1e-6,
        );
        check_grads(
            &[&[2, 3], &[2, 3], &[1, 3]],
            &|tape, txs| {
                let c = tape.concat(&[txs[0], txs[1], txs[2]], 0);
                let s = tape.scale(c, -1.7);
                let b = tape.broadcast(txs[2], &[4, 1, 3]);
                let b = tape.reshape(b, &[4, 3]);
                let all = tape.concat(&[s, b], 0);
                sum_all(tape, all)
            },
            9,
            1e-6,
        );
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::<f32>::new();
        let mut stream = Stream::seed_from_u64(3);
        let x = ArrayD::from_shape_simple_fn(IxDyn(&[7, 9]), || stream.normal() as f32 * 50.0);
        let t = tape.leaf(x, false);
        let y = tape.softmax(t);
        for row in tape.value(y).rows() {
            let s: f32 = row.sum();
            assert!((s - 1.0).abs() < 1e-5, "row sum {s}");
        }
    }

    #[test]
    fn frozen_leaves_receive_no_gradient_and_prune_backward() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(ArrayD::from_elem(IxDyn(&[2, 2]), 1.0), false);
        let b = tape.leaf(ArrayD::from_elem(IxDyn(&[2, 2]), 2.0), true);
        let y = tape.matmul(a, b, false, false);
        let s = tape.reshape(y, &[4]);
        let grads = tape.backward(vec![(s, ArrayD::from_elem(IxDyn(&[4]), 1.0))]);
        assert!(grads.get(a).is_none());
        assert!(grads.get(b).is_some());
    }

    #[test]
    fn multi_seed_backward_accumulates() {
        // Seeding y and z separately must equal seeding a combined scalar.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(ArrayD::from_elem(IxDyn(&[3]), 2.0), true);
        let y = tape.scale(x, 3.0);
        let z = tape.scale(x, -1.0);
        let grads = tape.backward(vec![
            (y, ArrayD::from_elem(IxDyn(&[3]), 1.0)),
            (z, ArrayD::from_elem(IxDyn(&[3]), 1.0)),
        ]);
        let gx = grads.get(x).unwrap();
        for &v in gx.iter() {
            assert!((v - 2.0).abs() < 1e-12);
        }
    }
}
