//! A small define-by-run reverse-mode differentiation engine.
//!
//! Values live in a [`Tape`]; every operation appends one node and returns a
//! [`Var`] handle. [`Tape::backward`] walks the nodes in exact reverse
//! recording order, so gradient accumulation is deterministic. Only the
//! operations the registration model needs are provided, all in `f64`.
//!
//! Gradients are persisted on leaf nodes only and accumulate across repeated
//! backward calls until [`Tape::zero_grad`] is called. Intermediate gradients
//! are scratch buffers local to one backward pass.

use crate::error::{Error, Result};

/// Dense row-major `f64` array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(Error::Shape(format!(
                "expected a 4-d tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Square(Var),
    Scale(Var, f64),
    Offset(Var),
    Sum(Var),
    Mean(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    BiasAdd(Var, Var),
    LeakyRelu(Var, f64),
    Upsample(Var, usize),
    GridSample(Var, Var),
    FlowToCoords(Var),
    Diff(Var, usize),
    BoxSum(Var, usize),
    ChannelSum(Var),
    Concat(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Square(..) => "square",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Conv2d { .. } => "conv2d",
            Op::BiasAdd(..) => "bias_add",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Upsample(..) => "upsample_bilinear",
            Op::GridSample(..) => "grid_sample",
            Op::FlowToCoords(..) => "flow_to_coords",
            Op::Diff(..) => "diff",
            Op::BoxSum(..) => "box_sum",
            Op::ChannelSum(..) => "channel_sum",
            Op::Concat(..) => "concat",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Leaf node that receives a gradient on backward.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf node that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Reports the first node holding a NaN or infinite value.
    pub fn check_finite(&self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(bad) = node.value.data.iter().find(|v| !v.is_finite()) {
                return Err(Error::Contract(format!(
                    "node {i} ({}) holds non-finite value {bad}",
                    node.op.name()
                )));
            }
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape(format!("{op}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor {
            shape: va.shape.clone(),
            data,
        };
        let rg = self.rg(&[a, b]);
        self.push(value, op, rg)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let va = self.value(a);
        let value = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().map(|&x| f(x)).collect(),
        };
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Elementwise quotient. Division by zero yields inf/NaN, which
    /// [`Tape::check_finite`] reports.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        Ok(self.zip(a, b, Op::Div(a, b), |x, y| x / y))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, Op::Square(a), |x| x * x)
    }

    /// Multiplies by a constant; the constant is not differentiated.
    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.map(a, Op::Scale(a, factor), |x| x * factor)
    }

    /// Adds a constant.
    pub fn offset(&mut self, a: Var, constant: f64) -> Var {
        self.map(a, Op::Offset(a), |x| x + constant)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let m = va.data.iter().sum::<f64>() / va.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// 2-d cross-correlation of `[N,C,H,W]` input with `[F,C,kh,kw]` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4()?;
        let [f, kc, kh, kw] = self.value(kernel).dims4()?;
        if kc != c {
            return Err(Error::Shape(format!(
                "conv2d: input has {c} channels, kernel expects {kc}"
            )));
        }
        if stride == 0 || kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Shape(format!(
                "conv2d: kernel {kh}x{kw} must be odd and stride positive"
            )));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::Shape(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}"
            )));
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (w + 2 * padding - kw) / stride + 1;
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            stride,
            padding,
            ho,
            wo,
        };
        let x = &self.value(input).data;
        let k = &self.value(kernel).data;
        let (patch, pix) = (geom.patch(), geom.out_pixels());
        let mut cols = vec![0.0; n * patch * pix];
        let mut out = vec![0.0; n * f * pix];
        for b in 0..n {
            let col = &mut cols[b * patch * pix..(b + 1) * patch * pix];
            im2col(&geom, &x[b * c * h * w..(b + 1) * c * h * w], col);
            gemm(
                f,
                patch,
                pix,
                k,
                false,
                col,
                false,
                &mut out[b * f * pix..(b + 1) * f * pix],
                0.0,
            );
        }
        let value = Tensor {
            shape: vec![n, f, ho, wo],
            data: out,
        };
        let rg = self.rg(&[input, kernel]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// Adds a per-channel bias `[C]` to an `[N,C,H,W]` tensor.
    pub fn bias_add(&mut self, input: Var, bias: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4()?;
        let vb = self.value(bias);
        if vb.len() != c {
            return Err(Error::Shape(format!(
                "bias_add: {c} channels but bias has {} entries",
                vb.len()
            )));
        }
        let mut data = self.value(input).data.clone();
        let hw = h * w;
        for b in 0..n {
            for ch in 0..c {
                let beta = vb.data[ch];
                let base = (b * c + ch) * hw;
                data[base..base + hw].iter_mut().for_each(|v| *v += beta);
            }
        }
        let value = Tensor {
            shape: vec![n, c, h, w],
            data,
        };
        let rg = self.rg(&[input, bias]);
        Ok(self.push(value, Op::BiasAdd(input, bias), rg))
    }

    /// Elementwise `max(x, slope * x)`.
    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Var {
        self.map(input, Op::LeakyRelu(input, slope), |x| {
            if x > 0.0 {
                x
            } else {
                slope * x
            }
        })
    }

    /// Bilinear upsampling by an integer factor, half-pixel (align-corners
    /// false) convention.
    pub fn upsample_bilinear(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::Shape("upsample_bilinear: factor must be >= 1".into()));
        }
        let [n, c, h, w] = self.value(input).dims4()?;
        let (ho, wo) = (h * factor, w * factor);
        let ty = upsample_table(h, factor);
        let tx = upsample_table(w, factor);
        let x = &self.value(input).data;
        let mut out = vec![0.0; n * c * ho * wo];
        for plane in 0..n * c {
            let src = &x[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
                    let bot = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
                    dst[oy * wo + ox] = top * (1.0 - ly) + bot * ly;
                }
            }
        }
        let value = Tensor {
            shape: vec![n, c, ho, wo],
            data: out,
        };
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Upsample(input, factor), rg))
    }

    /// Bilinear sampling of `[N,C,H,W]` input at absolute voxel coordinates
    /// `[N,Ho,Wo,2]` (x along W first, then y along H). Coordinates outside
    /// the image are clamped to the border.
    pub fn grid_sample(&mut self, input: Var, coords: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4()?;
        let cs = self.value(coords).shape().to_vec();
        if cs.len() != 4 || cs[0] != n || cs[3] != 2 {
            return Err(Error::Shape(format!(
                "grid_sample: coords shape {cs:?} incompatible with input [{n},{c},{h},{w}]"
            )));
        }
        let (ho, wo) = (cs[1], cs[2]);
        let x = &self.value(input).data;
        let g = &self.value(coords).data;
        let mut out = vec![0.0; n * c * ho * wo];
        for b in 0..n {
            for p in 0..ho * wo {
                let gi = (b * ho * wo + p) * 2;
                let sx = axis_sample(g[gi], w);
                let sy = axis_sample(g[gi + 1], h);
                for ch in 0..c {
                    let src = &x[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                    out[(b * c + ch) * ho * wo + p] = bilinear(src, w, &sx, &sy);
                }
            }
        }
        let value = Tensor {
            shape: vec![n, c, ho, wo],
            data: out,
        };
        let rg = self.rg(&[input, coords]);
        Ok(self.push(value, Op::GridSample(input, coords), rg))
    }

    /// Turns a displacement field `[N,2,H,W]` into absolute sampling
    /// coordinates `[N,H,W,2]` (identity grid plus displacement).
    pub fn flow_to_coords(&mut self, flow: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(flow).dims4()?;
        if c != 2 {
            return Err(Error::Shape(format!(
                "flow_to_coords: expected 2 components, got {c}"
            )));
        }
        let u = &self.value(flow).data;
        let mut out = vec![0.0; n * h * w * 2];
        for b in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let p = y * w + xx;
                    let o = (b * h * w + p) * 2;
                    out[o] = xx as f64 + u[(b * 2) * h * w + p];
                    out[o + 1] = y as f64 + u[(b * 2 + 1) * h * w + p];
                }
            }
        }
        let value = Tensor {
            shape: vec![n, h, w, 2],
            data: out,
        };
        let rg = self.rg(&[flow]);
        Ok(self.push(value, Op::FlowToCoords(flow), rg))
    }

    /// Forward difference along `axis`; that axis shrinks by one.
    pub fn diff(&mut self, input: Var, axis: usize) -> Result<Var> {
        let shape = self.value(input).shape().to_vec();
        if axis >= shape.len() || shape[axis] < 2 {
            return Err(Error::Shape(format!(
                "diff: axis {axis} invalid for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = &self.value(input).data;
        let mut out = Vec::with_capacity(outer * (len - 1) * inner);
        for o in 0..outer {
            for i in 0..len - 1 {
                let a = (o * len + i) * inner;
                let b = a + inner;
                out.extend((0..inner).map(|k| x[b + k] - x[a + k]));
            }
        }
        let mut out_shape = shape;
        out_shape[axis] -= 1;
        let value = Tensor {
            shape: out_shape,
            data: out,
        };
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Diff(input, axis), rg))
    }

    /// Sum over every `window x window` patch fully inside the last two axes
    /// ("valid" mode).
    pub fn box_sum(&mut self, input: Var, window: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4()?;
        if window == 0 || window > h || window > w {
            return Err(Error::Shape(format!(
                "box_sum: window {window} does not fit {h}x{w}"
            )));
        }
        let (ho, wo) = (h - window + 1, w - window + 1);
        let x = &self.value(input).data;
        let mut out = vec![0.0; n * c * ho * wo];
        let mut rows = vec![0.0; h * wo];
        for plane in 0..n * c {
            let src = &x[plane * h * w..(plane + 1) * h * w];
            for y in 0..h {
                let r = &src[y * w..(y + 1) * w];
                for j in 0..wo {
                    rows[y * wo + j] = r[j..j + window].iter().sum();
                }
            }
            let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
            for i in 0..ho {
                for j in 0..wo {
                    dst[i * wo + j] = (i..i + window).map(|y| rows[y * wo + j]).sum();
                }
            }
        }
        let value = Tensor {
            shape: vec![n, c, ho, wo],
            data: out,
        };
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::BoxSum(input, window), rg))
    }

    /// Spatial sum per channel: `[N,C,H,W] -> [N,C]`.
    pub fn channel_sum(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4()?;
        let x = &self.value(input).data;
        let data = x.chunks(h * w).map(|p| p.iter().sum()).collect();
        let value = Tensor {
            shape: vec![n, c],
            data,
        };
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::ChannelSum(input), rg))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, h, w] = self.value(a).dims4()?;
        let [nb, cb, hb, wb] = self.value(b).dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::Shape(format!(
                "concat: [{n},{ca},{h},{w}] vs [{nb},{cb},{hb},{wb}]"
            )));
        }
        let (xa, xb) = (&self.value(a).data, &self.value(b).data);
        let hw = h * w;
        let mut data = Vec::with_capacity(n * (ca + cb) * hw);
        for bi in 0..n {
            data.extend_from_slice(&xa[bi * ca * hw..(bi + 1) * ca * hw]);
            data.extend_from_slice(&xb[bi * cb * hw..(bi + 1) * cb * hw]);
        }
        let value = Tensor {
            shape: vec![n, ca + cb, h, w],
            data,
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Concat(a, b), rg))
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_seeded(&[(loss, &[1.0])])
    }

    /// Backpropagates from arbitrary nodes given their upstream gradients.
    /// Used to push gradients collected elsewhere into a tape.
    pub fn backward_seeded(&mut self, seeds: &[(Var, &[f64])]) -> Result<()> {
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        let mut last = 0;
        for &(v, g) in seeds {
            if g.len() != self.value(v).len() {
                return Err(Error::Contract(format!(
                    "seed gradient has {} entries for node of {} elements",
                    g.len(),
                    self.value(v).len()
                )));
            }
            accumulate(&mut grads, v, self.value(v).len(), |acc| {
                acc.iter_mut().zip(g).for_each(|(a, b)| *a += b)
            });
            last = last.max(v.0 + 1);
        }

        for idx in (0..last).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            let node = &mut self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        // Each arm adds the contribution of `g` into the scratch gradient of
        // every input that needs one.
        let mut send = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if self.nodes[v.0].requires_grad {
                accumulate(grads, v, self.nodes[v.0].value.len(), |acc| f(acc));
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, &mut |acc| add_into(acc, g));
                send(*b, &mut |acc| add_into(acc, g));
            }
            Op::Sub(a, b) => {
                send(*a, &mut |acc| add_into(acc, g));
                send(*b, &mut |acc| acc.iter_mut().zip(g).for_each(|(s, d)| *s -= d));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.value(*a).data, &self.value(*b).data);
                send(*a, &mut |acc| {
                    for i in 0..acc.len() {
                        acc[i] += g[i] * vb[i];
                    }
                });
                send(*b, &mut |acc| {
                    for i in 0..acc.len() {
                        acc[i] += g[i] * va[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let vb = &self.value(*b).data;
                let q = &out.data;
                send(*a, &mut |acc| {
                    for i in 0..acc.len() {
                        acc[i] += g[i] / vb[i];
                    }
                });
                send(*b, &mut |acc| {
                    for i in 0..acc.len() {
                        acc[i] -= g[i] * q[i] / vb[i];
                    }
                });
            }
            Op::Square(a) => {
                let va = &self.value(*a).data;
                send(*a, &mut |acc| {
                    for i in 0..acc.len() {
                        acc[i] += 2.0 * va[i] * g[i];
                    }
                });
            }
            Op::Scale(a, k) => send(*a, &mut |acc| {
                acc.iter_mut().zip(g).for_each(|(s, d)| *s += k * d)
            }),
            Op::Offset(a) => send(*a, &mut |acc| add_into(acc, g)),
            Op::Sum(a) => send(*a, &mut |acc| acc.iter_mut().for_each(|s| *s += g[0])),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                send(*a, &mut |acc| acc.iter_mut().for_each(|s| *s += g[0] / n))
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            } => {
                let (patch, pix, f) = (geom.patch(), geom.out_pixels(), geom.f);
                send(*kernel, &mut |acc| {
                    for b in 0..geom.n {
                        gemm(
                            f,
                            pix,
                            patch,
                            &g[b * f * pix..(b + 1) * f * pix],
                            false,
                            &cols[b * patch * pix..(b + 1) * patch * pix],
                            true,
                            acc,
                            1.0,
                        );
                    }
                });
                let k = &self.value(*kernel).data;
                send(*input, &mut |acc| {
                    let mut dcol = vec![0.0; patch * pix];
                    let chw = geom.c * geom.h * geom.w;
                    for b in 0..geom.n {
                        gemm(
                            patch,
                            f,
                            pix,
                            k,
                            true,
                            &g[b * f * pix..(b + 1) * f * pix],
                            false,
                            &mut dcol,
                            0.0,
                        );
                        col2im(geom, &dcol, &mut acc[b * chw..(b + 1) * chw]);
                    }
                });
            }
            Op::BiasAdd(input, bias) => {
                send(*input, &mut |acc| add_into(acc, g));
                let [n, c, h, w] = [out.shape[0], out.shape[1], out.shape[2], out.shape[3]];
                send(*bias, &mut |acc| {
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * h * w;
                            acc[ch] += g[base..base + h * w].iter().sum::<f64>();
                        }
                    }
                });
            }
            Op::LeakyRelu(a, slope) => {
                let va = &self.value(*a).data;
                send(*a, &mut |acc| {
                    for i in 0..acc.len() {
                        acc[i] += if va[i] > 0.0 { g[i] } else { slope * g[i] };
                    }
                });
            }
            Op::Upsample(a, factor) => {
                let [n, c, h, w] = self.value(*a).dims4().expect("4-d");
                let (ho, wo) = (h * factor, w * factor);
                let ty = upsample_table(h, *factor);
                let tx = upsample_table(w, *factor);
                send(*a, &mut |acc| {
                    for plane in 0..n * c {
                        let gd = &g[plane * ho * wo..(plane + 1) * ho * wo];
                        let dst = &mut acc[plane * h * w..(plane + 1) * h * w];
                        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                                let d = gd[oy * wo + ox];
                                dst[y0 * w + x0] += d * (1.0 - ly) * (1.0 - lx);
                                dst[y0 * w + x1] += d * (1.0 - ly) * lx;
                                dst[y1 * w + x0] += d * ly * (1.0 - lx);
                                dst[y1 * w + x1] += d * ly * lx;
                            }
                        }
                    }
                });
            }
            Op::GridSample(input, coords) => {
                let [n, c, h, w] = self.value(*input).dims4().expect("4-d");
                let (ho, wo) = (out.shape[2], out.shape[3]);
                let x = &self.value(*input).data;
                let cd = &self.value(*coords).data;
                send(*input, &mut |acc| {
                    for b in 0..n {
                        for p in 0..ho * wo {
                            let gi = (b * ho * wo + p) * 2;
                            let sx = axis_sample(cd[gi], w);
                            let sy = axis_sample(cd[gi + 1], h);
                            for ch in 0..c {
                                let d = g[(b * c + ch) * ho * wo + p];
                                let dst = &mut acc[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                                dst[sy.i0 * w + sx.i0] += d * (1.0 - sy.t) * (1.0 - sx.t);
                                dst[sy.i0 * w + sx.i1] += d * (1.0 - sy.t) * sx.t;
                                dst[sy.i1 * w + sx.i0] += d * sy.t * (1.0 - sx.t);
                                dst[sy.i1 * w + sx.i1] += d * sy.t * sx.t;
                            }
                        }
                    }
                });
                send(*coords, &mut |acc| {
                    for b in 0..n {
                        for p in 0..ho * wo {
                            let gi = (b * ho * wo + p) * 2;
                            let sx = axis_sample(cd[gi], w);
                            let sy = axis_sample(cd[gi + 1], h);
                            let (mut dx, mut dy) = (0.0, 0.0);
                            for ch in 0..c {
                                let d = g[(b * c + ch) * ho * wo + p];
                                let src = &x[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                                let v00 = src[sy.i0 * w + sx.i0];
                                let v01 = src[sy.i0 * w + sx.i1];
                                let v10 = src[sy.i1 * w + sx.i0];
                                let v11 = src[sy.i1 * w + sx.i1];
                                dx += d * ((1.0 - sy.t) * (v01 - v00) + sy.t * (v11 - v10));
                                dy += d * ((1.0 - sx.t) * (v10 - v00) + sx.t * (v11 - v01));
                            }
                            if sx.inside {
                                acc[gi] += dx;
                            }
                            if sy.inside {
                                acc[gi + 1] += dy;
                            }
                        }
                    }
                });
            }
            Op::FlowToCoords(flow) => {
                let [n, _, h, w] = self.value(*flow).dims4().expect("4-d");
                send(*flow, &mut |acc| {
                    for b in 0..n {
                        for p in 0..h * w {
                            let o = (b * h * w + p) * 2;
                            acc[(b * 2) * h * w + p] += g[o];
                            acc[(b * 2 + 1) * h * w + p] += g[o + 1];
                        }
                    }
                });
            }
            Op::Diff(a, axis) => {
                let (outer, len, inner) = split_axis(self.value(*a).shape(), *axis);
                send(*a, &mut |acc| {
                    for o in 0..outer {
                        for i in 0..len - 1 {
                            let go = (o * (len - 1) + i) * inner;
                            let lo = (o * len + i) * inner;
                            let hi = lo + inner;
                            for k in 0..inner {
                                acc[hi + k] += g[go + k];
                                acc[lo + k] -= g[go + k];
                            }
                        }
                    }
                });
            }
            Op::BoxSum(a, window) => {
                let [n, c, h, w] = self.value(*a).dims4().expect("4-d");
                let (ho, wo) = (out.shape[2], out.shape[3]);
                let win = *window;
                send(*a, &mut |acc| {
                    let mut rows = vec![0.0; h * wo];
                    for plane in 0..n * c {
                        let gd = &g[plane * ho * wo..(plane + 1) * ho * wo];
                        rows.iter_mut().for_each(|r| *r = 0.0);
                        for i in 0..ho {
                            for y in i..i + win {
                                for j in 0..wo {
                                    rows[y * wo + j] += gd[i * wo + j];
                                }
                            }
                        }
                        let dst = &mut acc[plane * h * w..(plane + 1) * h * w];
                        for y in 0..h {
                            for j in 0..wo {
                                let r = rows[y * wo + j];
                                dst[y * w + j..y * w + j + win].iter_mut().for_each(|d| *d += r);
                            }
                        }
                    }
                });
            }
            Op::ChannelSum(a) => {
                let [_, _, h, w] = self.value(*a).dims4().expect("4-d");
                send(*a, &mut |acc| {
                    for (plane, chunk) in acc.chunks_mut(h * w).enumerate() {
                        chunk.iter_mut().for_each(|s| *s += g[plane]);
                    }
                });
            }
            Op::Concat(a, b) => {
                let [n, ca, h, w] = self.value(*a).dims4().expect("4-d");
                let cb = self.value(*b).shape()[1];
                let hw = h * w;
                send(*a, &mut |acc| {
                    for bi in 0..n {
                        let src = &g[bi * (ca + cb) * hw..(bi * (ca + cb) + ca) * hw];
                        add_into(&mut acc[bi * ca * hw..(bi + 1) * ca * hw], src);
                    }
                });
                send(*b, &mut |acc| {
                    for bi in 0..n {
                        let src = &g[(bi * (ca + cb) + ca) * hw..(bi + 1) * (ca + cb) * hw];
                        add_into(&mut acc[bi * cb * hw..(bi + 1) * cb * hw], src);
                    }
                });
            }
        }
    }
}

fn accumulate(
    grads: &mut [Option<Vec<f64>>],
    v: Var,
    len: usize,
    f: impl FnOnce(&mut [f64]),
) {
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Per-output-index source pair and interpolation weight for half-pixel
/// bilinear upsampling along one axis.
fn upsample_table(len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..len * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

struct AxisSample {
    i0: usize,
    i1: usize,
    t: f64,
    /// Strictly inside the border, where the coordinate derivative exists.
    inside: bool,
}

fn axis_sample(coord: f64, len: usize) -> AxisSample {
    if len == 1 {
        return AxisSample {
            i0: 0,
            i1: 0,
            t: 0.0,
            inside: false,
        };
    }
    let hi = (len - 1) as f64;
    let c = coord.clamp(0.0, hi);
    let i0 = (c.floor() as usize).min(len - 2);
    AxisSample {
        i0,
        i1: i0 + 1,
        t: c - i0 as f64,
        inside: coord > 0.0 && coord < hi,
    }
}

fn bilinear(src: &[f64], w: usize, sx: &AxisSample, sy: &AxisSample) -> f64 {
    let top = src[sy.i0 * w + sx.i0] * (1.0 - sx.t) + src[sy.i0 * w + sx.i1] * sx.t;
    let bot = src[sy.i1 * w + sx.i0] * (1.0 - sx.t) + src[sy.i1 * w + sx.i1] * sx.t;
    top * (1.0 - sy.t) + bot * sy.t
}

fn im2col(g: &ConvGeom, x: &[f64], col: &mut [f64]) {
    let pix = g.out_pixels();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * pix;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let dst = &mut col[row + oy * g.wo..row + (oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.iter_mut().for_each(|d| *d = 0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, col: &[f64], x: &mut [f64]) {
    let pix = g.out_pixels();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * pix;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            x[base + ix as usize] += col[row + oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c = op(a) * op(b) + beta * c` for row-major matrices, where `op(a)` is
/// `m x k` and `op(b)` is `k x n`. A transposed operand is stored in its
/// untransposed layout.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the assertion above bounds every index the kernel touches.
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
