use super::kernels::{self, ConvGeom};
use super::{AutodiffError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an op defined outside the tape. Receives the output
/// gradient and returns one gradient buffer per input (same order).
pub type CustomBackward = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>> + Send + Sync>;

enum Op {
    Leaf,
    Constant,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Linear { x: usize, w: usize, b: usize, m: usize, k: usize, n: usize },
    Conv2d { input: usize, weight: usize, bias: usize, geom: ConvGeom, batch: usize, out_ch: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Softmax { a: usize, axis: usize },
    LogSoftmax { a: usize, axis: usize },
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    Reshape(usize),
    GlobalAvgPool(usize),
    BroadcastMul { mask: usize, fmap: usize },
    Sum(usize),
    Pick { a: usize, indices: Vec<usize> },
    Custom { inputs: Vec<usize>, backward: CustomBackward },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Define-by-run recording of tensor operations for reverse-mode
/// differentiation. A fresh tape is built for every forward pass.
///
/// Ops whose inputs all lack `requires_grad` are stored as constants and
/// take no part in [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
}

fn invalid(op: &'static str, shape: &[usize], reason: &'static str) -> AutodiffError {
    AutodiffError::InvalidShape { op, shape: shape.to_vec(), reason }
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

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        let n = value.numel();
        self.nodes.push(Node { value, grad: Some(vec![0.0; n]), requires_grad: true, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad: false, op: Op::Constant });
        Var(self.nodes.len() - 1)
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

    /// Accumulated gradient of a leaf created with [`Tape::param`].
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::from_parts(node.value.shape().to_vec(), g.clone()))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    fn push(&mut self, value: Tensor, inputs: &[usize], op: Op) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        let op = if requires_grad { op } else { Op::Constant };
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.val(a), self.val(b), &mut out, m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), &[a.0, b.0], Op::MatMul { a: a.0, b: b.0, m, k, n }))
    }

    /// Dense layer `x[m,k] * w[k,n] + bias[n]`, the bias repeated over rows.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(bias));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
            return Err(mismatch("linear", sx, sw));
        }
        if sb != [sw[1]] {
            return Err(mismatch("linear", sw, sb));
        }
        let (m, k, n) = (sx[0], sx[1], sw[1]);
        let bvals = self.val(bias);
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(bvals);
        }
        kernels::matmul_acc(self.val(x), self.val(w), &mut out, m, k, n);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            &[x.0, w.0, bias.0],
            Op::Linear { x: x.0, w: w.0, b: bias.0, m, k, n },
        ))
    }

    /// 2-D convolution of `[B,C,H,W]` by `[O,C,k,k]` plus bias `[O]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, AutodiffError> {
        let (si, sw, sb) = (self.shape(input), self.shape(weight), self.shape(bias));
        if si.len() != 4 || sw.len() != 4 || sw[1] != si[1] || sw[2] != sw[3] {
            return Err(mismatch("conv2d", si, sw));
        }
        if sb != [sw[0]] {
            return Err(mismatch("conv2d", sw, sb));
        }
        if stride == 0 {
            return Err(invalid("conv2d", sw, "stride must be positive"));
        }
        let (batch, channels, height, width) = (si[0], si[1], si[2], si[3]);
        let (out_ch, kernel) = (sw[0], sw[2]);
        if height + 2 * padding < kernel || width + 2 * padding < kernel {
            return Err(mismatch("conv2d", si, sw));
        }
        let out_h = (height + 2 * padding - kernel) / stride + 1;
        let out_w = (width + 2 * padding - kernel) / stride + 1;
        let geom = ConvGeom { channels, height, width, kernel, stride, padding, out_h, out_w };
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let in_stride = channels * height * width;
        let out_stride = out_ch * ncols;
        let mut out = vec![0.0; batch * out_stride];
        let mut cols = vec![0.0; rows * ncols];
        let (x, w, b) = (self.val(input), self.val(weight), self.val(bias));
        for bi in 0..batch {
            kernels::im2col(&x[bi * in_stride..(bi + 1) * in_stride], &geom, &mut cols);
            let dst = &mut out[bi * out_stride..(bi + 1) * out_stride];
            for (o, &bo) in b.iter().enumerate() {
                dst[o * ncols..(o + 1) * ncols].iter_mut().for_each(|v| *v = bo);
            }
            kernels::matmul_acc(w, &cols, dst, out_ch, rows, ncols);
        }
        Ok(self.push(
            Tensor::from_parts(vec![batch, out_ch, out_h, out_w], out),
            &[input.0, weight.0, bias.0],
            Op::Conv2d { input: input.0, weight: weight.0, bias: bias.0, geom, batch, out_ch },
        ))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(name, self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self.val(a).iter().zip(self.val(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), &[a.0, b.0], op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out: Vec<f64> = self.val(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_parts(shape, out), &[a.0], op)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.unary(a, |x| x * factor, Op::Scale(a.0, factor))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, kernels::sigmoid, Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a.0))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a.0))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(invalid("softmax", &shape, "axis out of range"));
        }
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let x = self.val(a);
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (x[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[idx(j)] /= total;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(shape, out), &[a.0], Op::Softmax { a: a.0, axis }))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(invalid("log_softmax", &shape, "axis out of range"));
        }
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let x = self.val(a);
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|j| (x[idx(j)] - max).exp()).sum::<f64>().ln();
                for j in 0..len {
                    out[idx(j)] = x[idx(j)] - lse;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(shape, out), &[a.0], Op::LogSoftmax { a: a.0, axis }))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        let first = inputs.first().ok_or(AutodiffError::Empty { op: "concat" })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", &base, "axis out of range"));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = kernels::axis_split(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let len = self.shape(*v)[axis];
                let chunk = len * inner;
                out.extend_from_slice(&self.val(*v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let ids: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        Ok(self.push(Tensor::from_parts(shape, out), &ids, Op::Concat { inputs: ids.clone(), axis }))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let src = self.shape(a).to_vec();
        if axis >= src.len() || len == 0 || start + len > src[axis] {
            return Err(invalid("slice", &src, "slice range outside tensor"));
        }
        let (outer, full, inner) = kernels::axis_split(&src, axis);
        let x = self.val(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut shape = src;
        shape[axis] = len;
        Ok(self.push(Tensor::from_parts(shape, out), &[a.0], Op::Slice { a: a.0, axis, start }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let value = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(value, &[a.0], Op::Reshape(a.0)))
    }

    /// `[B,C,H,W] -> [B,C]` mean over the spatial axes.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(invalid("global_avg_pool", &s, "expected [B,C,H,W]"));
        }
        let area = s[2] * s[3];
        let out: Vec<f64> =
            self.val(a).chunks(area).map(|c| c.iter().sum::<f64>() / area as f64).collect();
        Ok(self.push(Tensor::from_parts(vec![s[0], s[1]], out), &[a.0], Op::GlobalAvgPool(a.0)))
    }

    /// Multiplies every channel of `fmap[B,C,H,W]` by `mask[B,H,W]`.
    pub fn broadcast_mul(&mut self, mask: Var, fmap: Var) -> Result<Var, AutodiffError> {
        let (sm, sf) = (self.shape(mask).to_vec(), self.shape(fmap).to_vec());
        if sm.len() != 3 || sf.len() != 4 || sm[0] != sf[0] || sm[1] != sf[2] || sm[2] != sf[3] {
            return Err(mismatch("broadcast_mul", &sm, &sf));
        }
        let area = sm[1] * sm[2];
        let (m, f) = (self.val(mask), self.val(fmap));
        let mut out = Vec::with_capacity(f.len());
        for (idx, chunk) in f.chunks(area).enumerate() {
            let b = idx / sf[1];
            let mrow = &m[b * area..(b + 1) * area];
            out.extend(chunk.iter().zip(mrow).map(|(x, w)| x * w));
        }
        Ok(self.push(Tensor::from_parts(sf, out), &[mask.0, fmap.0], Op::BroadcastMul { mask: mask.0, fmap: fmap.0 }))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.val(a).iter().sum::<f64>();
        self.push(Tensor::scalar(s), &[a.0], Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Selects `a[b, indices[b]]` from a `[B,n]` tensor, giving `[B]`.
    pub fn pick(&mut self, a: Var, indices: &[usize]) -> Result<Var, AutodiffError> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[0] != indices.len() {
            return Err(mismatch("pick", &s, &[indices.len()]));
        }
        if indices.iter().any(|&i| i >= s[1]) {
            return Err(invalid("pick", &s, "index out of range"));
        }
        let x = self.val(a);
        let out: Vec<f64> = indices.iter().enumerate().map(|(b, &i)| x[b * s[1] + i]).collect();
        Ok(self.push(Tensor::from_parts(vec![s[0]], out), &[a.0], Op::Pick { a: a.0, indices: indices.to_vec() }))
    }

    /// Records an op whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, backward: CustomBackward) -> Var {
        let ids: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        self.push(output, &ids, Op::Custom { inputs: ids.clone(), backward })
    }

    /// Reverse sweep from a scalar loss. Leaf gradients accumulate across
    /// calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        if self.nodes.is_empty() {
            return Err(AutodiffError::Empty { op: "backward" });
        }
        let loss_shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(AutodiffError::NonScalarLoss { shape: loss_shape });
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let nodes = &self.nodes;
        for i in (0..=loss.0).rev() {
            if !nodes[i].requires_grad || matches!(nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backward_node(nodes, i, &g, &mut grads);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let (Op::Leaf, Some(g), Some(acc)) = (&node.op, g, node.grad.as_mut()) {
                acc.iter_mut().zip(g).for_each(|(a, v)| *a += v);
            }
        }
        Ok(())
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], i: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[i].requires_grad {
        return None;
    }
    let n = nodes[i].value.numel();
    Some(grads[i].get_or_insert_with(|| vec![0.0; n]))
}

fn backward_node(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = nodes[i].value.data();
    let v = |j: usize| nodes[j].value.data();
    match &nodes[i].op {
        Op::Leaf | Op::Constant => {}
        &Op::MatMul { a, b, m, k, n } => {
            if let Some(ga) = slot(nodes, grads, a) {
                kernels::matmul_bt_acc(g, v(b), ga, m, n, k);
            }
            if let Some(gb) = slot(nodes, grads, b) {
                kernels::matmul_at_acc(v(a), g, gb, m, k, n);
            }
        }
        &Op::Linear { x, w, b, m, k, n } => {
            if let Some(gx) = slot(nodes, grads, x) {
                kernels::matmul_bt_acc(g, v(w), gx, m, n, k);
            }
            if let Some(gw) = slot(nodes, grads, w) {
                kernels::matmul_at_acc(v(x), g, gw, m, k, n);
            }
            if let Some(gb) = slot(nodes, grads, b) {
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(acc, r)| *acc += r);
                }
            }
        }
        &Op::Conv2d { input, weight, bias, geom, batch, out_ch } => {
            let (rows, ncols) = (geom.col_rows(), geom.col_cols());
            let in_stride = geom.channels * geom.height * geom.width;
            let out_stride = out_ch * ncols;
            if let Some(gb) = slot(nodes, grads, bias) {
                for bi in 0..batch {
                    for (o, acc) in gb.iter_mut().enumerate() {
                        let base = bi * out_stride + o * ncols;
                        *acc += g[base..base + ncols].iter().sum::<f64>();
                    }
                }
            }
            let need_w = nodes[weight].requires_grad;
            let need_x = nodes[input].requires_grad;
            let mut cols = vec![0.0; rows * ncols];
            if need_w {
                let x = v(input);
                let gw = slot(nodes, grads, weight).expect("weight requires grad");
                for bi in 0..batch {
                    kernels::im2col(&x[bi * in_stride..(bi + 1) * in_stride], &geom, &mut cols);
                    kernels::matmul_bt_acc(&g[bi * out_stride..(bi + 1) * out_stride], &cols, gw, out_ch, ncols, rows);
                }
            }
            if need_x {
                let w = v(weight);
                let gx = slot(nodes, grads, input).expect("input requires grad");
                for bi in 0..batch {
                    cols.iter_mut().for_each(|c| *c = 0.0);
                    kernels::matmul_at_acc(w, &g[bi * out_stride..(bi + 1) * out_stride], &mut cols, out_ch, rows, ncols);
                    kernels::col2im_acc(&cols, &geom, &mut gx[bi * in_stride..(bi + 1) * in_stride]);
                }
            }
        }
        &Op::Add(a, b) => {
            for j in [a, b] {
                if let Some(gj) = slot(nodes, grads, j) {
                    gj.iter_mut().zip(g).for_each(|(acc, d)| *acc += d);
                }
            }
        }
        &Op::Sub(a, b) => {
            if let Some(ga) = slot(nodes, grads, a) {
                ga.iter_mut().zip(g).for_each(|(acc, d)| *acc += d);
            }
            if let Some(gb) = slot(nodes, grads, b) {
                gb.iter_mut().zip(g).for_each(|(acc, d)| *acc -= d);
            }
        }
        &Op::Mul(a, b) => {
            if let Some(ga) = slot(nodes, grads, a) {
                for ((acc, d), y) in ga.iter_mut().zip(g).zip(v(b)) {
                    *acc += d * y;
                }
            }
            if let Some(gb) = slot(nodes, grads, b) {
                for ((acc, d), x) in gb.iter_mut().zip(g).zip(v(a)) {
                    *acc += d * x;
                }
            }
        }
        &Op::Scale(a, factor) => {
            if let Some(ga) = slot(nodes, grads, a) {
                ga.iter_mut().zip(g).for_each(|(acc, d)| *acc += d * factor);
            }
        }
        &Op::Relu(a) => elementwise(nodes, grads, a, g, |x, _| if x > 0.0 { 1.0 } else { 0.0 }, out),
        &Op::Sigmoid(a) => elementwise(nodes, grads, a, g, |_, y| y * (1.0 - y), out),
        &Op::Tanh(a) => elementwise(nodes, grads, a, g, |_, y| 1.0 - y * y, out),
        &Op::Exp(a) => elementwise(nodes, grads, a, g, |_, y| y, out),
        &Op::Log(a) => elementwise(nodes, grads, a, g, |x, _| 1.0 / x, out),
        &Op::Square(a) => elementwise(nodes, grads, a, g, |x, _| 2.0 * x, out),
        &Op::Softmax { a, axis } => {
            let (outer, len, inner) = kernels::axis_split(nodes[i].value.shape(), axis);
            if let Some(ga) = slot(nodes, grads, a) {
                for o in 0..outer {
                    for k in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + k;
                        let dot: f64 = (0..len).map(|j| g[idx(j)] * out[idx(j)]).sum();
                        for j in 0..len {
                            ga[idx(j)] += out[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
            }
        }
        &Op::LogSoftmax { a, axis } => {
            let (outer, len, inner) = kernels::axis_split(nodes[i].value.shape(), axis);
            if let Some(ga) = slot(nodes, grads, a) {
                for o in 0..outer {
                    for k in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + k;
                        let total: f64 = (0..len).map(|j| g[idx(j)]).sum();
                        for j in 0..len {
                            ga[idx(j)] += g[idx(j)] - out[idx(j)].exp() * total;
                        }
                    }
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = kernels::axis_split(nodes[i].value.shape(), *axis);
            let mut offset = 0;
            for &j in inputs {
                let len = nodes[j].value.shape()[*axis];
                if let Some(gj) = slot(nodes, grads, j) {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        let dst = &mut gj[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(acc, d)| *acc += d);
                    }
                }
                offset += len;
            }
        }
        &Op::Slice { a, axis, start } => {
            let (outer, len, inner) = kernels::axis_split(nodes[i].value.shape(), axis);
            let full = nodes[a].value.shape()[axis];
            if let Some(ga) = slot(nodes, grads, a) {
                for o in 0..outer {
                    let dst = &mut ga[(o * full + start) * inner..(o * full + start + len) * inner];
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    dst.iter_mut().zip(src).for_each(|(acc, d)| *acc += d);
                }
            }
        }
        &Op::Reshape(a) => {
            if let Some(ga) = slot(nodes, grads, a) {
                ga.iter_mut().zip(g).for_each(|(acc, d)| *acc += d);
            }
        }
        &Op::GlobalAvgPool(a) => {
            let s = nodes[a].value.shape();
            let area = s[2] * s[3];
            if let Some(ga) = slot(nodes, grads, a) {
                for (chunk, d) in ga.chunks_mut(area).zip(g) {
                    chunk.iter_mut().for_each(|acc| *acc += d / area as f64);
                }
            }
        }
        &Op::BroadcastMul { mask, fmap } => {
            let sf = nodes[fmap].value.shape();
            let (channels, area) = (sf[1], sf[2] * sf[3]);
            let (mv, fv) = (v(mask), v(fmap));
            if let Some(gm) = slot(nodes, grads, mask) {
                for (idx, (gc, fc)) in g.chunks(area).zip(fv.chunks(area)).enumerate() {
                    let b = idx / channels;
                    let dst = &mut gm[b * area..(b + 1) * area];
                    for ((acc, d), f) in dst.iter_mut().zip(gc).zip(fc) {
                        *acc += d * f;
                    }
                }
            }
            if let Some(gf) = slot(nodes, grads, fmap) {
                for (idx, (dst, gc)) in gf.chunks_mut(area).zip(g.chunks(area)).enumerate() {
                    let b = idx / channels;
                    let mrow = &mv[b * area..(b + 1) * area];
                    for ((acc, d), w) in dst.iter_mut().zip(gc).zip(mrow) {
                        *acc += d * w;
                    }
                }
            }
        }
        &Op::Sum(a) => {
            if let Some(ga) = slot(nodes, grads, a) {
                ga.iter_mut().for_each(|acc| *acc += g[0]);
            }
        }
        Op::Pick { a, indices } => {
            let n = nodes[*a].value.shape()[1];
            if let Some(ga) = slot(nodes, grads, *a) {
                for (b, (&idx, d)) in indices.iter().zip(g).enumerate() {
                    ga[b * n + idx] += d;
                }
            }
        }
        Op::Custom { inputs, backward } => {
            let parts = backward(g);
            for (&j, part) in inputs.iter().zip(parts) {
                if let Some(gj) = slot(nodes, grads, j) {
                    gj.iter_mut().zip(part).for_each(|(acc, d)| *acc += d);
                }
            }
        }
    }
}

/// Accumulates `g * f(x, y)` into the input gradient of a unary op.
fn elementwise(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    a: usize,
    g: &[f64],
    f: impl Fn(f64, f64) -> f64,
    out: &[f64],
) {
    let x = nodes[a].value.data();
    if let Some(ga) = slot(nodes, grads, a) {
        for (((acc, d), &xi), &yi) in ga.iter_mut().zip(g).zip(x).zip(out) {
            *acc += d * f(xi, yi);
        }
    }
}
