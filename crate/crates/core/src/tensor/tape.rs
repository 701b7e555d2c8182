use super::conv::{self, Window};
use super::{Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        win: Window,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        win: Window,
    },
    Relu(Var),
    AvgPool2(Var),
    Upsample2(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Reshape(Var),
    Sum(Var),
    SumAxis { input: Var, axis: usize },
    Log(Var),
    Sqrt(Var),
    Reciprocal(Var),
    Det2x2(Var),
    Inv2x2(Var),
    BilinearSample { map: Var, coords: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations in evaluation order. Node indices are a topological
/// order, so the backward pass walks them in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`, or zeros shaped like `like` if nothing reached it.
    pub fn get_or_zeros(&self, var: Var, like: &Tensor) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

/// Bilinear lookup footprint along one axis.
#[derive(Clone, Copy)]
struct Axis {
    i0: usize,
    i1: usize,
    frac: f64,
    /// Coordinate was clamped into range, so it carries no gradient.
    clamped: bool,
}

fn axis(x: f64, extent: usize) -> Axis {
    let hi = (extent - 1) as f64;
    let xc = x.clamp(0.0, hi);
    let clamped = xc != x;
    if extent == 1 {
        return Axis {
            i0: 0,
            i1: 0,
            frac: 0.0,
            clamped: true,
        };
    }
    let i0 = (xc.floor() as usize).min(extent - 2);
    Axis {
        i0,
        i1: i0 + 1,
        frac: xc - i0 as f64,
        clamped,
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let va = self.value(a);
        let vb = self.value(b);
        Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().zip(&vb.data).map(|(x, y)| f(*x, *y)).collect(),
        }
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let va = self.value(a);
        Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().map(|x| f(*x)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.map(a, |x| x * c);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.map(a, |x| x + c);
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        conv::gemm(m, k, n, &self.value(a).data, false, &self.value(b).data, false, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b), rg))
    }

    fn image_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize, usize), TensorError> {
        match self.shape(v) {
            [c, h, w] => Ok((*c, *h, *w)),
            s => Err(TensorError::shape(op, format!("expected [c, h, w], got {s:?}"))),
        }
    }

    /// 2-D convolution with zero padding. `weight` is `[c_out, c_in, k, k]`,
    /// `bias` is `[c_out]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let (c_in, h, w) = self.image_dims("conv2d", input)?;
        let ws = self.shape(weight).to_vec();
        if ws.len() != 4 || ws[1] != c_in || ws[2] != ws[3] {
            return Err(TensorError::shape(
                "conv2d",
                format!("weight {ws:?} incompatible with input channels {c_in}"),
            ));
        }
        let c_out = ws[0];
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(TensorError::shape("conv2d", format!("bias {:?}", self.shape(b))));
            }
        }
        let win = Window::new(c_in, h, w, ws[2], stride, pad)
            .ok_or_else(|| TensorError::shape("conv2d", format!("kernel {} on {h}x{w}", ws[2])))?;
        let out = conv::conv2d_forward(
            &win,
            &self.value(input).data,
            &self.value(weight).data,
            bias.map(|b| self.value(b).data.as_slice()),
            c_out,
        );
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor {
                shape: vec![c_out, win.out_h, win.out_w],
                data: out,
            },
            Op::Conv2d {
                input,
                weight,
                bias,
                win,
            },
            rg,
        ))
    }

    /// Transposed convolution. `weight` is `[c_in, c_out, k, k]`; the output
    /// side is `(h - 1) * stride - 2 * pad + k`.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let (c_in, h, w) = self.image_dims("conv_transpose2d", input)?;
        let ws = self.shape(weight).to_vec();
        if ws.len() != 4 || ws[0] != c_in || ws[2] != ws[3] || stride == 0 {
            return Err(TensorError::shape(
                "conv_transpose2d",
                format!("weight {ws:?} incompatible with input channels {c_in}"),
            ));
        }
        let (c_out, k) = (ws[1], ws[2]);
        let oh = ((h - 1) * stride + k).checked_sub(2 * pad);
        let ow = ((w - 1) * stride + k).checked_sub(2 * pad);
        let win = match (oh, ow) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Window::new(c_out, oh, ow, k, stride, pad),
            _ => None,
        }
        .filter(|win| win.out_h == h && win.out_w == w)
        .ok_or_else(|| TensorError::shape("conv_transpose2d", "degenerate output size"))?;
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(TensorError::shape(
                    "conv_transpose2d",
                    format!("bias {:?}", self.shape(b)),
                ));
            }
        }
        let out = conv::conv_transpose2d_forward(
            &win,
            &self.value(input).data,
            &self.value(weight).data,
            bias.map(|b| self.value(b).data.as_slice()),
            c_in,
        );
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor {
                shape: vec![c_out, win.height, win.width],
                data: out,
            },
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                win,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| x.max(0.0));
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    /// 2x2 average pooling with stride 2; sides must be even.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var, TensorError> {
        let (c, h, w) = self.image_dims("avg_pool2", a)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::shape("avg_pool2", format!("odd size {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = &self.value(a).data;
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let base = (ch * h + 2 * y) * w + 2 * x;
                    out[(ch * oh + y) * ow + x] =
                        0.25 * (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]);
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape: vec![c, oh, ow], data: out }, Op::AvgPool2(a), rg))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, a: Var) -> Result<Var, TensorError> {
        let (c, h, w) = self.image_dims("upsample2", a)?;
        let (oh, ow) = (2 * h, 2 * w);
        let src = &self.value(a).data;
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    out[(ch * oh + y) * ow + x] = src[(ch * h + y / 2) * w + x / 2];
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape: vec![c, oh, ow], data: out }, Op::Upsample2(a), rg))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = inputs
            .first()
            .ok_or_else(|| TensorError::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::shape("concat", format!("axis {axis} on {base:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(TensorError::shape("concat", format!("{base:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = outer_inner(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let n = t.shape[axis] * inner;
                data.extend_from_slice(&t.data[o * n..(o + 1) * n]);
            }
        }
        let rg = inputs.iter().any(|v| self.rg(*v));
        Ok(self.push(
            Tensor { shape, data },
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(TensorError::shape(
                "slice",
                format!("[{start}, {}) along axis {axis} of {s:?}", start + len),
            ));
        }
        let (outer, extent, inner) = outer_inner(&s, axis);
        let src = &self.value(a).data;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = (o * extent + start) * inner;
            data.extend_from_slice(&src[off..off + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape, data }, Op::Slice { input: a, axis, start }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let v = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    /// Sum of all entries as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).data.iter().sum());
        let rg = self.rg(a);
        self.push(v, Op::Sum(a), rg)
    }

    /// Sums out `axis`.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(TensorError::shape("sum_axis", format!("axis {axis} on {s:?}")));
        }
        let (outer, extent, inner) = outer_inner(&s, axis);
        let src = &self.value(a).data;
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let row = &src[(o * extent + e) * inner..(o * extent + e + 1) * inner];
                for (d, v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape, data }, Op::SumAxis { input: a, axis }, rg))
    }

    fn check_domain(
        &self,
        op: &'static str,
        a: Var,
        ok: impl Fn(f64) -> bool,
    ) -> Result<(), TensorError> {
        if let Some(bad) = self.value(a).data.iter().find(|x| !ok(**x)) {
            return Err(TensorError::Domain {
                op,
                detail: format!("argument {bad}"),
            });
        }
        Ok(())
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check_domain("log", a, |x| x > 0.0)?;
        let v = self.map(a, f64::ln);
        let rg = self.rg(a);
        Ok(self.push(v, Op::Log(a), rg))
    }

    /// Square root; the backward rule uses a zero subgradient at 0.
    pub fn sqrt(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check_domain("sqrt", a, |x| x >= 0.0)?;
        let v = self.map(a, f64::sqrt);
        let rg = self.rg(a);
        Ok(self.push(v, Op::Sqrt(a), rg))
    }

    pub fn reciprocal(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check_domain("reciprocal", a, |x| x != 0.0)?;
        let v = self.map(a, |x| 1.0 / x);
        let rg = self.rg(a);
        Ok(self.push(v, Op::Reciprocal(a), rg))
    }

    fn batch2x2(&self, op: &'static str, a: Var) -> Result<Vec<usize>, TensorError> {
        let s = self.shape(a);
        if s.len() < 2 || s[s.len() - 1] != 2 || s[s.len() - 2] != 2 {
            return Err(TensorError::shape(op, format!("expected [.., 2, 2], got {s:?}")));
        }
        Ok(s[..s.len() - 2].to_vec())
    }

    /// Determinants of a batch `[.., 2, 2]`.
    pub fn det2x2(&mut self, a: Var) -> Result<Var, TensorError> {
        let lead = self.batch2x2("det2x2", a)?;
        let data = self
            .value(a)
            .data
            .chunks_exact(4)
            .map(|m| m[0] * m[3] - m[1] * m[2])
            .collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape: lead, data }, Op::Det2x2(a), rg))
    }

    /// Closed-form inverses of a batch `[.., 2, 2]`.
    pub fn inv2x2(&mut self, a: Var) -> Result<Var, TensorError> {
        self.batch2x2("inv2x2", a)?;
        let src = &self.value(a).data;
        let mut data = Vec::with_capacity(src.len());
        for m in src.chunks_exact(4) {
            let det = m[0] * m[3] - m[1] * m[2];
            if det.abs() < 1e-300 || !det.is_finite() {
                return Err(TensorError::Domain {
                    op: "inv2x2",
                    detail: format!("singular matrix, det = {det:e}"),
                });
            }
            let id = 1.0 / det;
            data.extend_from_slice(&[m[3] * id, -m[1] * id, -m[2] * id, m[0] * id]);
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape, data }, Op::Inv2x2(a), rg))
    }

    /// Samples `map` (`[c, h, w]`) at `coords` (`[n, 2]`, `(x, y)` in pixels
    /// with centres on integers). Returns `[n, c]`. Coordinates outside the
    /// grid are clamped to the border and carry no coordinate gradient.
    pub fn bilinear_sample(&mut self, map: Var, coords: Var) -> Result<Var, TensorError> {
        let (c, h, w) = self.image_dims("bilinear_sample", map)?;
        let n = match self.shape(coords) {
            [n, 2] => *n,
            s => {
                return Err(TensorError::shape(
                    "bilinear_sample",
                    format!("coords must be [n, 2], got {s:?}"),
                ))
            }
        };
        let m = &self.value(map).data;
        let xy = &self.value(coords).data;
        let mut data = vec![0.0; n * c];
        for i in 0..n {
            let ax = axis(xy[2 * i], w);
            let ay = axis(xy[2 * i + 1], h);
            let (w00, w01, w10, w11) = (
                (1.0 - ay.frac) * (1.0 - ax.frac),
                (1.0 - ay.frac) * ax.frac,
                ay.frac * (1.0 - ax.frac),
                ay.frac * ax.frac,
            );
            for ch in 0..c {
                let p = &m[ch * h * w..(ch + 1) * h * w];
                data[i * c + ch] = w00 * p[ay.i0 * w + ax.i0]
                    + w01 * p[ay.i0 * w + ax.i1]
                    + w10 * p[ay.i1 * w + ax.i0]
                    + w11 * p[ay.i1 * w + ax.i1];
            }
        }
        let rg = self.rg(map) || self.rg(coords);
        Ok(self.push(
            Tensor { shape: vec![n, c], data },
            Op::BilinearSample { map, coords },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape.clone()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(&lv.shape, 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let like = |v: Var, data: Vec<f64>| Tensor {
            shape: self.shape(v).to_vec(),
            data,
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, like(*b, g.data.iter().map(|x| -x).collect()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = g.data.iter().zip(&vb.data).map(|(g, y)| g * y).collect();
                    self.accumulate(grads, *a, like(*a, d));
                }
                if self.rg(*b) {
                    let d = g.data.iter().zip(&va.data).map(|(g, x)| g * x).collect();
                    self.accumulate(grads, *b, like(*b, d));
                }
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, like(*a, g.data.iter().map(|x| x * c).collect()));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    conv::gemm(m, n, k, &g.data, false, &vb.data, true, &mut da, 0.0);
                    self.accumulate(grads, *a, like(*a, da));
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    conv::gemm(k, m, n, &va.data, true, &g.data, false, &mut db, 0.0);
                    self.accumulate(grads, *b, like(*b, db));
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                win,
            } => {
                let need = (
                    self.rg(*input),
                    self.rg(*weight),
                    bias.is_some_and(|b| self.rg(b)),
                );
                let c_out = self.shape(*weight)[0];
                let r = conv::conv2d_backward(
                    win,
                    &self.value(*input).data,
                    &self.value(*weight).data,
                    &g.data,
                    c_out,
                    need,
                );
                if let Some(d) = r.input {
                    self.accumulate(grads, *input, like(*input, d));
                }
                if let Some(d) = r.weight {
                    self.accumulate(grads, *weight, like(*weight, d));
                }
                if let (Some(b), Some(d)) = (bias, r.bias) {
                    self.accumulate(grads, *b, like(*b, d));
                }
            }
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                win,
            } => {
                let need = (
                    self.rg(*input),
                    self.rg(*weight),
                    bias.is_some_and(|b| self.rg(b)),
                );
                let c_in = self.shape(*weight)[0];
                let r = conv::conv_transpose2d_backward(
                    win,
                    &self.value(*input).data,
                    &self.value(*weight).data,
                    &g.data,
                    c_in,
                    need,
                );
                if let Some(d) = r.input {
                    self.accumulate(grads, *input, like(*input, d));
                }
                if let Some(d) = r.weight {
                    self.accumulate(grads, *weight, like(*weight, d));
                }
                if let (Some(b), Some(d)) = (bias, r.bias) {
                    self.accumulate(grads, *b, like(*b, d));
                }
            }
            Op::Relu(a) => {
                let d = g
                    .data
                    .iter()
                    .zip(&self.value(*a).data)
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, like(*a, d));
            }
            Op::AvgPool2(a) => {
                let s = self.shape(*a);
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (h / 2, w / 2);
                let mut d = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            d[(ch * h + y) * w + x] = 0.25 * g.data[(ch * oh + y / 2) * ow + x / 2];
                        }
                    }
                }
                self.accumulate(grads, *a, like(*a, d));
            }
            Op::Upsample2(a) => {
                let s = self.shape(*a);
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (2 * h, 2 * w);
                let mut d = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..oh {
                        for x in 0..ow {
                            d[(ch * h + y / 2) * w + x / 2] += g.data[(ch * oh + y) * ow + x];
                        }
                    }
                }
                self.accumulate(grads, *a, like(*a, d));
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = outer_inner(&g.shape, *axis);
                let total = g.shape[*axis];
                let mut offset = 0;
                for v in inputs {
                    let len = self.shape(*v)[*axis];
                    if self.rg(*v) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let off = (o * total + offset) * inner;
                            d.extend_from_slice(&g.data[off..off + len * inner]);
                        }
                        self.accumulate(grads, *v, like(*v, d));
                    }
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let s = self.shape(*input);
                let (outer, extent, inner) = outer_inner(s, *axis);
                let len = g.shape[*axis];
                let mut d = vec![0.0; s.iter().product()];
                for o in 0..outer {
                    let off = (o * extent + start) * inner;
                    d[off..off + len * inner]
                        .copy_from_slice(&g.data[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *input, like(*input, d));
            }
            Op::Reshape(a) => self.accumulate(grads, *a, like(*a, g.data.clone())),
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, like(*a, vec![g.data[0]; n]));
            }
            Op::SumAxis { input, axis } => {
                let s = self.shape(*input);
                let (outer, extent, inner) = outer_inner(s, *axis);
                let mut d = vec![0.0; outer * extent * inner];
                for o in 0..outer {
                    let grow = &g.data[o * inner..(o + 1) * inner];
                    for e in 0..extent {
                        d[(o * extent + e) * inner..(o * extent + e + 1) * inner]
                            .copy_from_slice(grow);
                    }
                }
                self.accumulate(grads, *input, like(*input, d));
            }
            Op::Log(a) => {
                let d = g
                    .data
                    .iter()
                    .zip(&self.value(*a).data)
                    .map(|(g, x)| g / x)
                    .collect();
                self.accumulate(grads, *a, like(*a, d));
            }
            Op::Sqrt(a) => {
                let d = g
                    .data
                    .iter()
                    .zip(&node.value.data)
                    .map(|(g, y)| if *y > 0.0 { 0.5 * g / y } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, like(*a, d));
            }
            Op::Reciprocal(a) => {
                let d = g
                    .data
                    .iter()
                    .zip(&node.value.data)
                    .map(|(g, y)| -g * y * y)
                    .collect();
                self.accumulate(grads, *a, like(*a, d));
            }
            Op::Det2x2(a) => {
                let src = &self.value(*a).data;
                let mut d = Vec::with_capacity(src.len());
                for (m, gi) in src.chunks_exact(4).zip(&g.data) {
                    d.extend_from_slice(&[gi * m[3], -gi * m[2], -gi * m[1], gi * m[0]]);
                }
                self.accumulate(grads, *a, like(*a, d));
            }
            Op::Inv2x2(a) => {
                // dA = -inv^T * G * inv^T
                let mut d = Vec::with_capacity(g.len());
                for (inv, gm) in node.value.data.chunks_exact(4).zip(g.data.chunks_exact(4)) {
                    let it = [inv[0], inv[2], inv[1], inv[3]];
                    let t = mul2(&it, gm);
                    let r = mul2(&t, &it);
                    d.extend(r.iter().map(|x| -x));
                }
                self.accumulate(grads, *a, like(*a, d));
            }
            Op::BilinearSample { map, coords } => {
                let s = self.shape(*map);
                let (c, h, w) = (s[0], s[1], s[2]);
                let m = &self.value(*map).data;
                let xy = &self.value(*coords).data;
                let n = xy.len() / 2;
                let mut dmap = self.rg(*map).then(|| vec![0.0; c * h * w]);
                let mut dxy = self.rg(*coords).then(|| vec![0.0; 2 * n]);
                for i in 0..n {
                    let ax = axis(xy[2 * i], w);
                    let ay = axis(xy[2 * i + 1], h);
                    let gi = &g.data[i * c..(i + 1) * c];
                    if let Some(dm) = dmap.as_mut() {
                        let (w00, w01, w10, w11) = (
                            (1.0 - ay.frac) * (1.0 - ax.frac),
                            (1.0 - ay.frac) * ax.frac,
                            ay.frac * (1.0 - ax.frac),
                            ay.frac * ax.frac,
                        );
                        for (ch, gv) in gi.iter().enumerate() {
                            let p = &mut dm[ch * h * w..(ch + 1) * h * w];
                            p[ay.i0 * w + ax.i0] += w00 * gv;
                            p[ay.i0 * w + ax.i1] += w01 * gv;
                            p[ay.i1 * w + ax.i0] += w10 * gv;
                            p[ay.i1 * w + ax.i1] += w11 * gv;
                        }
                    }
                    if let Some(dc) = dxy.as_mut() {
                        let (mut gx, mut gy) = (0.0, 0.0);
                        for (ch, gv) in gi.iter().enumerate() {
                            let p = &m[ch * h * w..(ch + 1) * h * w];
                            let v00 = p[ay.i0 * w + ax.i0];
                            let v01 = p[ay.i0 * w + ax.i1];
                            let v10 = p[ay.i1 * w + ax.i0];
                            let v11 = p[ay.i1 * w + ax.i1];
                            gx += gv * ((1.0 - ay.frac) * (v01 - v00) + ay.frac * (v11 - v10));
                            gy += gv * ((1.0 - ax.frac) * (v10 - v00) + ax.frac * (v11 - v01));
                        }
                        if !ax.clamped {
                            dc[2 * i] = gx;
                        }
                        if !ay.clamped {
                            dc[2 * i + 1] = gy;
                        }
                    }
                }
                if let Some(d) = dmap {
                    self.accumulate(grads, *map, like(*map, d));
                }
                if let Some(d) = dxy {
                    self.accumulate(grads, *coords, like(*coords, d));
                }
            }
        }
    }
}

fn mul2(a: &[f64], b: &[f64]) -> [f64; 4] {
    [
        a[0] * b[0] + a[1] * b[2],
        a[0] * b[1] + a[1] * b[3],
        a[2] * b[0] + a[3] * b[2],
        a[2] * b[1] + a[3] * b[3],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Checks d(sum(out * probe))/d(input) against central differences for
    /// every entry of every listed leaf.
    fn gradcheck(
        leaves: Vec<Tensor>,
        build: impl Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
    ) -> f64 {
        let eval = |vals: &[Tensor]| -> (Tape, Vec<Var>, Var) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|t| tape.param(t.clone())).collect();
            let out = build(&mut tape, &vars).unwrap();
            // Deterministic non-uniform probe so every output entry matters.
            let probe = Tensor::from_fn(tape.shape(out), |i| 0.3 + ((i * 7919) % 13) as f64 * 0.1);
            let p = tape.constant(probe);
            let prod = tape.mul(out, p).unwrap();
            let loss = tape.sum(prod);
            (tape, vars, loss)
        };
        let (tape, vars, loss) = eval(&leaves);
        let grads = tape.backward(loss).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[li], leaf);
            for k in 0..leaf.len() {
                let mut plus = leaves.clone();
                plus[li].data[k] += h;
                let mut minus = leaves.clone();
                minus[li].data[k] -= h;
                let (tp, _, lp) = eval(&plus);
                let (tm, _, lm) = eval(&minus);
                let numeric = (tp.value(lp).item() - tm.value(lm).item()) / (2.0 * h);
                let a = analytic.data[k];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                worst = worst.max(err);
            }
        }
        worst
    }

    const TOL: f64 = 1e-6;

    #[test]
    fn elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[3, 4]);
        assert!(gradcheck(vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1])) < TOL);
        assert!(gradcheck(vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1])) < TOL);
        assert!(gradcheck(vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1])) < TOL);
        assert!(gradcheck(vec![a.clone()], |t, v| Ok(t.scale(v[0], -2.5))) < TOL);
        assert!(gradcheck(vec![a.clone()], |t, v| Ok(t.add_scalar(v[0], 0.7))) < TOL);
        // Keep away from the kink.
        let r = Tensor::from_fn(&[10], |i| if i % 2 == 0 { 0.5 + i as f64 } else { -0.5 - i as f64 });
        assert!(gradcheck(vec![r], |t, v| Ok(t.relu(v[0]))) < TOL);
        let pos = Tensor::from_fn(&[6], |i| 0.5 + i as f64 * 0.3);
        assert!(gradcheck(vec![pos.clone()], |t, v| t.log(v[0])) < TOL);
        assert!(gradcheck(vec![pos.clone()], |t, v| t.sqrt(v[0])) < TOL);
        assert!(gradcheck(vec![pos], |t, v| t.reciprocal(v[0])) < TOL);
    }

    #[test]
    fn structural_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&mut rng, &[2, 4, 6]);
        let b = rand_tensor(&mut rng, &[3, 4, 6]);
        assert!(gradcheck(vec![a.clone(), b.clone()], |t, v| t.concat(&[v[0], v[1]], 0)) < TOL);
        let c = rand_tensor(&mut rng, &[2, 3, 6]);
        assert!(gradcheck(vec![a.clone(), c], |t, v| t.concat(&[v[0], v[1]], 1)) < TOL);
        assert!(gradcheck(vec![b.clone()], |t, v| t.slice(v[0], 2, 1, 3)) < TOL);
        assert!(gradcheck(vec![b.clone()], |t, v| t.reshape(v[0], &[12, 6])) < TOL);
        assert!(gradcheck(vec![b.clone()], |t, v| Ok(t.sum(v[0]))) < TOL);
        assert!(gradcheck(vec![b.clone()], |t, v| t.sum_axis(v[0], 1)) < TOL);
        assert!(gradcheck(vec![a.clone()], |t, v| t.avg_pool2(v[0])) < TOL);
        assert!(gradcheck(vec![a], |t, v| t.upsample2(v[0])) < TOL);
        let m = rand_tensor(&mut rng, &[3, 5]);
        let n = rand_tensor(&mut rng, &[5, 2]);
        assert!(gradcheck(vec![m, n], |t, v| t.matmul(v[0], v[1])) < TOL);
    }

    #[test]
    fn convolution_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[2, 6, 5]);
        for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
            let w = rand_tensor(&mut rng, &[3, 2, k, k]);
            let b = rand_tensor(&mut rng, &[3]);
            let err = gradcheck(vec![x.clone(), w, b], |t, v| {
                t.conv2d(v[0], v[1], Some(v[2]), stride, pad)
            });
            assert!(err < TOL, "conv k={k} s={stride} p={pad}: {err}");
        }
        let xt = rand_tensor(&mut rng, &[2, 3, 4]);
        for (k, stride, pad) in [(2, 2, 0), (3, 2, 1), (3, 1, 1)] {
            let w = rand_tensor(&mut rng, &[2, 3, k, k]);
            let b = rand_tensor(&mut rng, &[3]);
            let err = gradcheck(vec![xt.clone(), w, b], |t, v| {
                t.conv_transpose2d(v[0], v[1], Some(v[2]), stride, pad)
            });
            assert!(err < TOL, "tconv k={k} s={stride} p={pad}: {err}");
        }
    }

    #[test]
    fn matrix_2x2_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = Tensor::from_fn(&[5, 2, 2], |i| {
            let base = if i % 4 == 0 || i % 4 == 3 { 2.0 } else { 0.0 };
            base + rng.random_range(-0.5..0.5)
        });
        assert!(gradcheck(vec![m.clone()], |t, v| t.det2x2(v[0])) < TOL);
        assert!(gradcheck(vec![m], |t, v| t.inv2x2(v[0])) < TOL);
    }

    #[test]
    fn bilinear_gradients_reach_map_and_coords() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let map = rand_tensor(&mut rng, &[3, 6, 7]);
        let coords = Tensor::from_fn(&[8, 2], |i| {
            let hi = if i % 2 == 0 { 6.0 } else { 5.0 };
            // Stay away from integer knots where the coordinate gradient jumps.
            let v: f64 = rng.random_range(0.1..hi - 0.1);
            if (v - v.round()).abs() < 0.05 { v + 0.1 } else { v }
        });
        let err = gradcheck(vec![map, coords], |t, v| t.bilinear_sample(v[0], v[1]));
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn bilinear_at_integer_point_is_exact() {
        let mut tape = Tape::new();
        let map = Tensor::from_fn(&[2, 4, 5], |i| i as f64 * 1.5 - 3.0);
        let m = tape.constant(map.clone());
        let c = tape.constant(Tensor::new(vec![2, 2], vec![3.0, 2.0, 4.0, 3.0]).unwrap());
        let s = tape.bilinear_sample(m, c).unwrap();
        let v = tape.value(s).data();
        assert_eq!(v[0], map.data()[2 * 5 + 3]);
        assert_eq!(v[1], map.data()[20 + 2 * 5 + 3]);
        assert_eq!(v[2], map.data()[3 * 5 + 4]);
        assert_eq!(v[3], map.data()[20 + 3 * 5 + 4]);
    }

    #[test]
    fn identity_1x1_conv_is_noop() {
        let mut tape = Tape::new();
        let x = Tensor::from_fn(&[3, 4, 4], |i| (i as f64).sin());
        let xv = tape.constant(x.clone());
        let w = Tensor::from_fn(&[3, 3, 1, 1], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let wv = tape.constant(w);
        let y = tape.conv2d(xv, wv, None, 1, 0).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn sum_of_params_has_unit_gradient() {
        let mut tape = Tape::new();
        let theta = tape.param(Tensor::from_fn(&[2, 3], |i| i as f64));
        let loss = tape.sum(theta);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(theta).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn quadratic_form_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = rand_tensor(&mut rng, &[4, 3]);
        let theta = rand_tensor(&mut rng, &[3, 1]);
        let mut tape = Tape::new();
        let av = tape.constant(a.clone());
        let tv = tape.param(theta.clone());
        let y = tape.matmul(av, tv).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        // Closed form 2 A^T A theta.
        for j in 0..3 {
            let mut expected = 0.0;
            for i in 0..4 {
                let mut ai_theta = 0.0;
                for k in 0..3 {
                    ai_theta += a.data()[i * 3 + k] * theta.data()[k];
                }
                expected += 2.0 * a.data()[i * 3 + j] * ai_theta;
            }
            assert!((g.get(tv).unwrap().data()[j] - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn chained_conv_relu_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, &[1, 5, 5]);
        let w = rand_tensor(&mut rng, &[2, 1, 3, 3]);
        let err = gradcheck(vec![x, w], |t, v| {
            let c = t.conv2d(v[0], v[1], None, 1, 1)?;
            Ok(t.relu(c))
        });
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn backward_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor(&mut rng, &[2, 4, 4]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let grads_for = |alpha: f64, beta: f64| {
            let mut t = Tape::new();
            let xv = t.param(x.clone());
            let wv = t.param(w.clone());
            let c = t.conv2d(xv, wv, None, 1, 1).unwrap();
            let r = t.relu(c);
            let l1 = t.sum(r);
            let sq = t.mul(c, c).unwrap();
            let l2 = t.sum(sq);
            let a = t.scale(l1, alpha);
            let b = t.scale(l2, beta);
            let loss = t.add(a, b).unwrap();
            let g = t.backward(loss).unwrap();
            g.get(wv).unwrap().clone()
        };
        let g1 = grads_for(1.0, 0.0);
        let g2 = grads_for(0.0, 1.0);
        let (a, b) = (0.7, -1.3);
        let combined = grads_for(a, b);
        for i in 0..combined.len() {
            let expect = a * g1.data()[i] + b * g2.data()[i];
            assert!((combined.data()[i] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn faults() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::zeros(&[2, 3]));
        let b = tape.param(Tensor::zeros(&[3, 2]));
        assert!(matches!(tape.add(a, b), Err(TensorError::Shape { .. })));
        assert!(matches!(tape.backward(a), Err(TensorError::NonScalarLoss(_))));
        let sing = tape.constant(Tensor::zeros(&[1, 2, 2]));
        assert!(matches!(tape.inv2x2(sing), Err(TensorError::Domain { .. })));
        assert!(matches!(tape.log(a), Err(TensorError::Domain { .. })));
    }
}
