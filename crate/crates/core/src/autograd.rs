//! A small reverse-mode automatic differentiation tape over dense `f64` tensors.
//!
//! Every differentiable backend (encoders, generators, classifiers) builds its
//! forward pass on a [`Graph`]; calling [`Graph::backward`] then yields the
//! gradient of a scalar output with respect to every node that requires one.
//! Graphs are built fresh per evaluation and are never shared across threads.

use std::sync::Arc;

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(vec![1], vec![value])
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows and columns when viewed as a matrix (trailing dims flattened).
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            _ => (self.shape[0], self.shape[1..].iter().product()),
        }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Geometry of a 2-D convolution over HWC-layout images.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Kernel layout is `[out_c, kernel, kernel, in_c]`.
    pub fn kernel_len(&self) -> usize {
        self.out_c * self.kernel * self.kernel * self.in_c
    }
}

/// Per-output-pixel bilinear interpolation stencil.
#[derive(Clone, Copy, Debug)]
struct LerpTap {
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
    fy: f64,
    fx: f64,
}

/// Precomputed half-pixel bilinear resampling plan for HWC images.
#[derive(Clone, Debug)]
pub struct BilinearPlan {
    in_h: usize,
    in_w: usize,
    channels: usize,
    out_h: usize,
    out_w: usize,
    taps: Vec<LerpTap>,
}

impl BilinearPlan {
    pub fn new(in_h: usize, in_w: usize, channels: usize, out_h: usize, out_w: usize) -> Self {
        fn axis(out_i: usize, in_n: usize, out_n: usize) -> (usize, usize, f64) {
            let scale = in_n as f64 / out_n as f64;
            let src = ((out_i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_n - 1);
            let i1 = (i0 + 1).min(in_n - 1);
            let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        }
        let mut taps = Vec::with_capacity(out_h * out_w);
        for oy in 0..out_h {
            let (y0, y1, fy) = axis(oy, in_h, out_h);
            for ox in 0..out_w {
                let (x0, x1, fx) = axis(ox, in_w, out_w);
                taps.push(LerpTap { y0, y1, x0, x1, fy, fx });
            }
        }
        Self { in_h, in_w, channels, out_h, out_w, taps }
    }

    pub fn input_len(&self) -> usize {
        self.in_h * self.in_w * self.channels
    }

    pub fn output_len(&self) -> usize {
        self.out_h * self.out_w * self.channels
    }

    /// Forward resample in lerp form so that constant regions are reproduced exactly.
    pub fn apply(&self, input: &[f64]) -> Vec<f64> {
        let c = self.channels;
        let at = |y: usize, x: usize, ch: usize| input[(y * self.in_w + x) * c + ch];
        let mut out = Vec::with_capacity(self.output_len());
        for tap in &self.taps {
            for ch in 0..c {
                let a = at(tap.y0, tap.x0, ch);
                let b = at(tap.y0, tap.x1, ch);
                let p = at(tap.y1, tap.x0, ch);
                let q = at(tap.y1, tap.x1, ch);
                let top = a + tap.fx * (b - a);
                let bottom = p + tap.fx * (q - p);
                out.push(top + tap.fy * (bottom - top));
            }
        }
        out
    }

    fn accumulate_adjoint(&self, grad_out: &[f64], grad_in: &mut [f64]) {
        let c = self.channels;
        for (pix, tap) in self.taps.iter().enumerate() {
            let w00 = (1.0 - tap.fy) * (1.0 - tap.fx);
            let w01 = (1.0 - tap.fy) * tap.fx;
            let w10 = tap.fy * (1.0 - tap.fx);
            let w11 = tap.fy * tap.fx;
            for ch in 0..c {
                let g = grad_out[pix * c + ch];
                grad_in[(tap.y0 * self.in_w + tap.x0) * c + ch] += w00 * g;
                grad_in[(tap.y0 * self.in_w + tap.x1) * c + ch] += w01 * g;
                grad_in[(tap.y1 * self.in_w + tap.x0) * c + ch] += w10 * g;
                grad_in[(tap.y1 * self.in_w + tap.x1) * c + ch] += w11 * g;
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MulScalar(Var, Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Sqrt(Var),
    Square(Var),
    Sum(Var),
    MeanRows(Var),
    Reshape(Var),
    ReplaceRows { base: Var, rows: Var, indices: Vec<usize> },
    GatherRows { src: Var, indices: Vec<usize> },
    LogSoftmax(Var),
    Conv2d { input: Var, kernel: Var, bias: Var, geom: Conv2dGeometry },
    AvgPool { input: Var, w: usize, c: usize, size: usize },
    Resize { input: Var, plan: Arc<BilinearPlan> },
    Clamp01(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, zero-filled when absent.
    pub fn get_or_zero(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }
}

/// Computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Frozen leaf; no gradient is accumulated for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = &self.nodes[a.0].value;
        let value = Tensor::new(t.shape.clone(), t.data.iter().map(|&x| f(x)).collect());
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.len(), tb.len(), "elementwise operands differ in length");
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape.clone(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| x * k, Op::Scale(a, k))
    }

    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| x + k, Op::Offset(a))
    }

    /// `a * s` where `s` is a single-element tensor.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.nodes[s.0].value.len(), 1, "mul_scalar expects a scalar");
        let k = self.nodes[s.0].value.data[0];
        let t = &self.nodes[a.0].value;
        let value = Tensor::new(t.shape.clone(), t.data.iter().map(|&x| x * k).collect());
        let rg = self.rg(a) || self.rg(s);
        self.push(value, Op::MulScalar(a, s), rg)
    }

    /// Adds a length-`cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        let (_, cols) = ta.dims2();
        assert_eq!(tr.len(), cols, "add_row width mismatch");
        let data = ta
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x + tr.data[i % cols])
            .collect();
        let value = Tensor::new(ta.shape.clone(), data);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    /// Matrix product `a (m×k) · b (k×n)`. Vectors are treated as `1×k`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = ta.dims2();
        let (k2, n) = tb.dims2();
        assert_eq!(k, k2, "matmul inner dimensions differ: {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &ta.data[i * k..(i + 1) * k];
            let dst = &mut out[i * n..(i + 1) * n];
            for (p, &av) in row.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &tb.data[p * n..(p + 1) * n];
                for (d, &bv) in dst.iter_mut().zip(brow) {
                    *d += av * bv;
                }
            }
        }
        let shape = if ta.shape.len() == 1 { vec![n] } else { vec![m, n] };
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, out), Op::MatMul(a, b), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Clamps into `[0, 1]`; the gradient is passed through unchanged.
    pub fn clamp01(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.clamp(0.0, 1.0), Op::Clamp01(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data.iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Mean over rows: `m×n → n`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let (m, n) = ta.dims2();
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, &x) in out.iter_mut().zip(&ta.data[r * n..(r + 1) * n]) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        let rg = self.rg(a);
        self.push(Tensor::vector(out), Op::MeanRows(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let t = self.nodes[a.0].value.clone();
        let value = Tensor::new(shape, t.data);
        let rg = self.rg(a);
        self.push(value, Op::Reshape(a), rg)
    }

    /// Copy of `base` with `indices` rows replaced by consecutive rows of `rows`.
    pub fn replace_rows(&mut self, base: Var, rows: Var, indices: &[usize]) -> Var {
        let (tb, tr) = (&self.nodes[base.0].value, &self.nodes[rows.0].value);
        let (m, n) = tb.dims2();
        assert_eq!(tr.len(), indices.len() * n, "replace_rows shape mismatch");
        let mut data = tb.data.clone();
        for (j, &idx) in indices.iter().enumerate() {
            assert!(idx < m, "row index {idx} out of range {m}");
            data[idx * n..(idx + 1) * n].copy_from_slice(&tr.data[j * n..(j + 1) * n]);
        }
        let value = Tensor::new(tb.shape.clone(), data);
        let rg = self.rg(base) || self.rg(rows);
        let op = Op::ReplaceRows { base, rows, indices: indices.to_vec() };
        self.push(value, op, rg)
    }

    pub fn gather_rows(&mut self, src: Var, indices: &[usize]) -> Var {
        let ts = &self.nodes[src.0].value;
        let (_, n) = ts.dims2();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &idx in indices {
            data.extend_from_slice(&ts.data[idx * n..(idx + 1) * n]);
        }
        let value = Tensor::matrix(indices.len(), n, data);
        let rg = self.rg(src);
        self.push(value, Op::GatherRows { src, indices: indices.to_vec() }, rg)
    }

    /// Max-subtracted log-softmax over a flat vector.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let out = log_softmax(self.nodes[a.0].value.data());
        let rg = self.rg(a);
        self.push(Tensor::vector(out), Op::LogSoftmax(a), rg)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, geom: Conv2dGeometry) -> Var {
        let x = &self.nodes[input.0].value.data;
        let k = &self.nodes[kernel.0].value.data;
        let b = &self.nodes[bias.0].value.data;
        assert_eq!(x.len(), geom.in_h * geom.in_w * geom.in_c, "conv input size");
        assert_eq!(k.len(), geom.kernel_len(), "conv kernel size");
        assert_eq!(b.len(), geom.out_c, "conv bias size");
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let mut out = vec![0.0; oh * ow * geom.out_c];
        for oy in 0..oh {
            for ox in 0..ow {
                let dst = &mut out[(oy * ow + ox) * geom.out_c..(oy * ow + ox + 1) * geom.out_c];
                dst.copy_from_slice(b);
                for_each_tap(&geom, oy, ox, |xi, ki| {
                    for (oc, d) in dst.iter_mut().enumerate() {
                        let kb = oc * geom.kernel * geom.kernel * geom.in_c + ki;
                        for ic in 0..geom.in_c {
                            *d += k[kb + ic] * x[xi + ic];
                        }
                    }
                });
            }
        }
        let rg = self.rg(input) || self.rg(kernel) || self.rg(bias);
        let value = Tensor::new(vec![oh, ow, geom.out_c], out);
        self.push(value, Op::Conv2d { input, kernel, bias, geom }, rg)
    }

    /// Non-overlapping `size×size` average pooling over an HWC tensor.
    pub fn avg_pool(&mut self, input: Var, h: usize, w: usize, c: usize, size: usize) -> Var {
        let x = &self.nodes[input.0].value.data;
        assert_eq!(x.len(), h * w * c, "avg_pool input size");
        let (oh, ow) = (h / size, w / size);
        let norm = 1.0 / (size * size) as f64;
        let mut out = vec![0.0; oh * ow * c];
        for y in 0..oh * size {
            for xx in 0..ow * size {
                let o = ((y / size) * ow + xx / size) * c;
                let i = (y * w + xx) * c;
                for ch in 0..c {
                    out[o + ch] += x[i + ch] * norm;
                }
            }
        }
        let rg = self.rg(input);
        let value = Tensor::new(vec![oh, ow, c], out);
        self.push(value, Op::AvgPool { input, w, c, size }, rg)
    }

    pub fn resize(&mut self, input: Var, plan: Arc<BilinearPlan>) -> Var {
        let x = &self.nodes[input.0].value.data;
        assert_eq!(x.len(), plan.input_len(), "resize input size");
        let out = plan.apply(x);
        let value = Tensor::new(vec![plan.out_h, plan.out_w, plan.channels], out);
        let rg = self.rg(input);
        self.push(value, Op::Resize { input, plan }, rg)
    }

    /// Reverse pass from the scalar node `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.nodes[output.0].value.len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(d, &x)| *d -= x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |s| zip3(s, g, vb, |x, y| x * y));
                acc(*b, &mut |s| zip3(s, g, va, |x, y| x * y));
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |s| zip3(s, g, vb, |x, y| x / y));
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] -= g[i] * va[i] / (vb[i] * vb[i]);
                    }
                });
            }
            Op::Scale(a, k) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(d, &x)| *d += k * x)),
            Op::Offset(a) | Op::Reshape(a) | Op::Clamp01(a) => acc(*a, &mut |s| add_into(s, g)),
            Op::MulScalar(a, sc) => {
                let k = val(*sc)[0];
                let va = val(*a);
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(d, &x)| *d += k * x));
                acc(*sc, &mut |s| s[0] += g.iter().zip(va).map(|(x, y)| x * y).sum::<f64>());
            }
            Op::AddRow(a, row) => {
                let n = val(*row).len();
                acc(*a, &mut |s| add_into(s, g));
                acc(*row, &mut |s| {
                    for (i, &x) in g.iter().enumerate() {
                        s[i % n] += x;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k) = ta.dims2();
                let (_, n) = tb.dims2();
                // dA = G · Bᵀ
                acc(*a, &mut |s| {
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let br = &tb.data[p * n..(p + 1) * n];
                            s[i * k + p] += gr.iter().zip(br).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                // dB = Aᵀ · G
                acc(*b, &mut |s| {
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ta.data[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (d, &x) in s[p * n..(p + 1) * n].iter_mut().zip(gr) {
                                *d += av * x;
                            }
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                let out = node.value.data();
                acc(*a, &mut |s| zip3(s, g, out, |x, y| x * (1.0 - y * y)));
            }
            Op::Sigmoid(a) => {
                let out = node.value.data();
                acc(*a, &mut |s| zip3(s, g, out, |x, y| x * y * (1.0 - y)));
            }
            Op::Relu(a) => {
                let va = val(*a);
                acc(*a, &mut |s| zip3(s, g, va, |x, y| if y > 0.0 { x } else { 0.0 }));
            }
            Op::Sqrt(a) => {
                let out = node.value.data();
                acc(*a, &mut |s| zip3(s, g, out, |x, y| x * 0.5 / y));
            }
            Op::Square(a) => {
                let va = val(*a);
                acc(*a, &mut |s| zip3(s, g, va, |x, y| 2.0 * x * y));
            }
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|d| *d += g[0])),
            Op::MeanRows(a) => {
                let (m, n) = self.nodes[a.0].value.dims2();
                acc(*a, &mut |s| {
                    for (i, d) in s.iter_mut().enumerate() {
                        *d += g[i % n] / m as f64;
                    }
                });
            }
            Op::ReplaceRows { base, rows, indices } => {
                let (_, n) = self.nodes[base.0].value.dims2();
                // Replaced rows do not flow back into the base.
                acc(*base, &mut |s| {
                    for (r, (d, gr)) in s.chunks_mut(n).zip(g.chunks(n)).enumerate() {
                        if !indices.contains(&r) {
                            add_into(d, gr);
                        }
                    }
                });
                acc(*rows, &mut |s| {
                    for (j, &idx) in indices.iter().enumerate() {
                        add_into(&mut s[j * n..(j + 1) * n], &g[idx * n..(idx + 1) * n]);
                    }
                });
            }
            Op::GatherRows { src, indices } => {
                let (_, n) = self.nodes[src.0].value.dims2();
                acc(*src, &mut |s| {
                    for (j, &idx) in indices.iter().enumerate() {
                        for (d, &x) in s[idx * n..(idx + 1) * n].iter_mut().zip(&g[j * n..(j + 1) * n]) {
                            *d += x;
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let out = node.value.data();
                let gsum: f64 = g.iter().sum();
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] - out[i].exp() * gsum;
                    }
                });
            }
            Op::Conv2d { input, kernel, bias, geom } => {
                let (x, k) = (val(*input), val(*kernel));
                let (oh, ow) = (geom.out_h(), geom.out_w());
                let kstride = geom.kernel * geom.kernel * geom.in_c;
                acc(*bias, &mut |s| {
                    for (i, &x) in g.iter().enumerate() {
                        s[i % geom.out_c] += x;
                    }
                });
                acc(*kernel, &mut |s| {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let go = &g[(oy * ow + ox) * geom.out_c..][..geom.out_c];
                            for_each_tap(geom, oy, ox, |xi, ki| {
                                for (oc, &gv) in go.iter().enumerate() {
                                    let kb = oc * kstride + ki;
                                    for ic in 0..geom.in_c {
                                        s[kb + ic] += gv * x[xi + ic];
                                    }
                                }
                            });
                        }
                    }
                });
                acc(*input, &mut |s| {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let go = &g[(oy * ow + ox) * geom.out_c..][..geom.out_c];
                            for_each_tap(geom, oy, ox, |xi, ki| {
                                for (oc, &gv) in go.iter().enumerate() {
                                    let kb = oc * kstride + ki;
                                    for ic in 0..geom.in_c {
                                        s[xi + ic] += gv * k[kb + ic];
                                    }
                                }
                            });
                        }
                    }
                });
            }
            Op::AvgPool { input, w, c, size } => {
                let (w, c, size) = (*w, *c, *size);
                let ow = w / size;
                let oh = node.value.shape()[0];
                let norm = 1.0 / (size * size) as f64;
                acc(*input, &mut |s| {
                    for y in 0..oh * size {
                        for xx in 0..ow * size {
                            let o = ((y / size) * ow + xx / size) * c;
                            let i = (y * w + xx) * c;
                            for ch in 0..c {
                                s[i + ch] += g[o + ch] * norm;
                            }
                        }
                    }
                });
            }
            Op::Resize { input, plan } => acc(*input, &mut |s| plan.accumulate_adjoint(g, s)),
        }
    }
}

/// Visits every in-bounds kernel tap for output pixel `(oy, ox)`, passing the
/// input offset and the kernel offset (both pointing at channel 0).
fn for_each_tap(geom: &Conv2dGeometry, oy: usize, ox: usize, mut f: impl FnMut(usize, usize)) {
    for ky in 0..geom.kernel {
        let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
        if iy < 0 || iy >= geom.in_h as isize {
            continue;
        }
        for kx in 0..geom.kernel {
            let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
            if ix < 0 || ix >= geom.in_w as isize {
                continue;
            }
            let xi = (iy as usize * geom.in_w + ix as usize) * geom.in_c;
            let ki = (ky * geom.kernel + kx) * geom.in_c;
            f(xi, ki);
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, &x)| *d += x);
}

fn zip3(dst: &mut [f64], a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) {
    for ((d, &x), &y) in dst.iter_mut().zip(a).zip(b) {
        *d += f(x, y);
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&x| x - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}
