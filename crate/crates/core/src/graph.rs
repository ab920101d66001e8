//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters enter it
//! by name from a [`ParamStore`]; whether they are tracked for gradients is
//! decided by the graph's [`ParamFilter`], which is how the trainer freezes
//! the discriminators during the generator update and vice versa.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Result, UstError};
use crate::kernels::{self, ConvGeom, PixelBox};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which named parameters receive gradients.
#[derive(Debug, Clone)]
pub enum ParamFilter {
    None,
    All,
    /// Parameters whose name starts with one of the prefixes.
    Prefixes(Vec<String>),
}

impl ParamFilter {
    fn tracks(&self, name: &str) -> bool {
        match self {
            ParamFilter::None => false,
            ParamFilter::All => true,
            ParamFilter::Prefixes(p) => p.iter().any(|p| name.starts_with(p.as_str())),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor),
    MulMask(Var, Tensor),
    Scale(Var, f64),
    AddScalar(Var),
    Abs(Var),
    Square(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Log(Var, f64),
    Mean(Var),
    Sum(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        c_out: usize,
        cols: Vec<Vec<f64>>,
    },
    Upsample2(Var),
    AvgPool2(Var),
    InstanceNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    Concat(Vec<Var>),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    GlobalAvgPool(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    Resample {
        x: Var,
        src: Vec<PixelBox>,
        dst: Vec<PixelBox>,
    },
    FlipW(Var),
    Gram(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    filter: ParamFilter,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads {
    by_node: Vec<Option<Tensor>>,
    params: BTreeMap<String, Var>,
}

impl Grads {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.by_node[v.0].as_ref()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).and_then(|v| self.of(*v))
    }

    /// Tracked parameters in name order, with their gradient (zero when the
    /// loss does not depend on them).
    pub fn params(&self) -> impl Iterator<Item = (&str, Option<&Tensor>)> {
        self.params.iter().map(|(n, v)| (n.as_str(), self.of(*v)))
    }
}

impl Graph {
    pub fn new(filter: ParamFilter) -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            filter,
        }
    }

    /// A graph that tracks nothing; used for plain inference.
    pub fn inference() -> Self {
        Self::new(ParamFilter::None)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives gradients regardless of the parameter filter.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Fetch a named parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(v) = self.params.get(name) {
            return Ok(*v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| UstError::Contract(format!("unknown parameter `{name}`")))?
            .clone();
        let tracked = self.filter.tracks(name);
        let v = self.push(t, Op::Leaf, tracked);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    fn same_shape(&self, ctx: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(UstError::shape(ctx, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let v = self.value(a).zip_map(c, |x, y| x * y)?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::MulConst(a, c.clone()), ng))
    }

    /// Multiply `[n, c, h, w]` by a constant `[n, 1, h, w]` mask.
    pub fn mul_mask(&mut self, a: Var, mask: &Tensor) -> Result<Var> {
        let (n, c, h, w) = self.value(a).dims4();
        if mask.shape() != [n, 1, h, w] {
            return Err(UstError::shape("mul_mask", &[n, 1, h, w], mask.shape()));
        }
        let plane = h * w;
        let mut out = self.value(a).clone();
        for (i, block) in out.data_mut().chunks_mut(plane).enumerate() {
            let m = mask.sample_data(i / c);
            for (o, mv) in block.iter_mut().zip(m) {
                *o *= mv;
            }
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::MulMask(a, mask.clone()), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        let ng = self.ng(a);
        self.push(v, Op::AddScalar(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        let ng = self.ng(a);
        self.push(v, Op::Abs(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        let ng = self.ng(a);
        self.push(v, Op::Square(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let ng = self.ng(a);
        self.push(v, Op::LeakyRelu(a, slope), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(v, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    /// `ln(max(x, eps))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, a: Var, eps: f64) -> Var {
        let v = self.value(a).map(|x| x.max(eps).ln());
        let ng = self.ng(a);
        self.push(v, Op::Log(a, eps), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        let ng = self.ng(a);
        self.push(v, Op::Mean(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::Sum(a), ng)
    }

    /// Mean absolute difference.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let d = self.abs(d);
        Ok(self.mean(d))
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let d = self.square(d);
        Ok(self.mean(d))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, c_in, h, wd) = self.value(x).dims4();
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[1] != c_in {
            return Err(UstError::shape("conv2d weight", &[0, c_in, 0, 0], &ws));
        }
        let c_out = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(UstError::shape("conv2d bias", &[c_out], self.shape(b)));
            }
        }
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
        };
        if !geom.valid() {
            return Err(UstError::Contract(format!(
                "convolution kernel {}x{} does not fit a {h}x{wd} input with padding {pad}",
                ws[2], ws[3]
            )));
        }
        let keep = self.ng(w);
        let (y, cols) = kernels::conv2d_forward(
            self.value(x).data(),
            n,
            &geom,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            c_out,
            keep,
        );
        let value = Tensor::from_parts(vec![n, c_out, geom.out_h(), geom.out_w()], y);
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                c_out,
                cols,
            },
            ng,
        ))
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let y = kernels::upsample2_forward(self.value(x).data(), n * c, h, w);
        let ng = self.ng(x);
        self.push(Tensor::from_parts(vec![n, c, 2 * h, 2 * w], y), Op::Upsample2(x), ng)
    }

    pub fn avgpool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4();
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(UstError::Contract(format!("avgpool2 needs even sides, got {h}x{w}")));
        }
        let y = kernels::avgpool2_forward(self.value(x).data(), n * c, h, w);
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_parts(vec![n, c, h / 2, w / 2], y), Op::AvgPool2(x), ng))
    }

    /// Per-sample, per-channel spatial normalisation (population variance,
    /// `eps` inside the square root).
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let (y, inv_std) = kernels::instance_norm_forward(self.value(x).data(), n * c, h * w, eps);
        let ng = self.ng(x);
        self.push(
            Tensor::from_parts(vec![n, c, h, w], y),
            Op::InstanceNorm { x, inv_std },
            ng,
        )
    }

    /// `x * gamma + beta` with per-sample, per-channel `[n, c]` coefficients.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4();
        for v in [gamma, beta] {
            if self.shape(v) != [n, c] {
                return Err(UstError::shape("channel_affine", &[n, c], self.shape(v)));
            }
        }
        let plane = h * w;
        let mut out = self.value(x).clone();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        for (i, block) in out.data_mut().chunks_mut(plane).enumerate() {
            for o in block.iter_mut() {
                *o = *o * g[i] + b[i];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(out, Op::ChannelAffine { x, gamma, beta }, ng))
    }

    /// Concatenate rank-4 tensors along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let (n, _, h, w) = self.value(parts[0]).dims4();
        let mut c_total = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4();
            if (pn, ph, pw) != (n, h, w) {
                return Err(UstError::shape("concat", &[n, pc, h, w], self.shape(p)));
            }
            c_total += pc;
        }
        let mut data = Vec::with_capacity(n * c_total * h * w);
        for s in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).sample_data(s));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::from_parts(vec![n, c_total, h, w], data),
            Op::Concat(parts.to_vec()),
            ng,
        ))
    }

    /// `x W^T + b` for `x: [n, in]`, `W: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(UstError::shape("linear", &[xs.first().copied().unwrap_or(0), ws[1]], &xs));
        }
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; n * fout];
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return Err(UstError::shape("linear bias", &[fout], self.shape(b)));
            }
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(self.value(b).data());
            }
        }
        kernels::gemm(n, fin, fout, self.value(x).data(), false, self.value(w).data(), true, 1.0, &mut out);
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(Tensor::from_parts(vec![n, fout], out), Op::Linear { x, w, b }, ng))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let plane = h * w;
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let ng = self.ng(x);
        self.push(Tensor::from_parts(vec![n, c], out), Op::GlobalAvgPool(x), ng)
    }

    /// Columns `start..start+len` of an `[n, d]` matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start + len > s[1] {
            return Err(UstError::Contract(format!(
                "column slice {start}..{} out of bounds for shape {s:?}",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(s[0] * len);
        for row in self.value(x).data().chunks(s[1]) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_parts(vec![s[0], len], out), Op::SliceCols { x, start }, ng))
    }

    /// Per-sample bilinear resampling of the `src[i]` box into the `dst[i]`
    /// box of a zero canvas of size `out_h x out_w`.
    pub fn resample(
        &mut self,
        x: Var,
        src: &[PixelBox],
        dst: &[PixelBox],
        out_h: usize,
        out_w: usize,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4();
        if src.len() != n || dst.len() != n {
            return Err(UstError::Contract(format!(
                "resample needs {n} boxes, got {} / {}",
                src.len(),
                dst.len()
            )));
        }
        for (s, d) in src.iter().zip(dst) {
            let degenerate = s.height == 0 || s.width == 0 || d.height == 0 || d.width == 0;
            if degenerate || s.row + s.height > h || s.col + s.width > w || d.row + d.height > out_h || d.col + d.width > out_w {
                return Err(UstError::Contract(format!("invalid resample boxes {s:?} -> {d:?}")));
            }
        }
        let mut out = vec![0.0; n * c * out_h * out_w];
        let xin = self.value(x).data();
        for i in 0..n {
            let len_in = c * h * w;
            let len_out = c * out_h * out_w;
            kernels::resample_forward(
                &xin[i * len_in..(i + 1) * len_in],
                c,
                (h, w),
                &src[i],
                &dst[i],
                (out_h, out_w),
                &mut out[i * len_out..(i + 1) * len_out],
            );
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::from_parts(vec![n, c, out_h, out_w], out),
            Op::Resample {
                x,
                src: src.to_vec(),
                dst: dst.to_vec(),
            },
            ng,
        ))
    }

    /// Mirror along the width axis.
    pub fn flip_w(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let out = flip_w_data(self.value(x).data(), w);
        let ng = self.ng(x);
        self.push(Tensor::from_parts(vec![n, c, h, w], out), Op::FlipW(x), ng)
    }

    /// Per-sample Gram matrices `[n, c, c]` of `[n, c, h, w]` features.
    pub fn gram(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4();
        if h * w == 0 || c == 0 {
            return Err(UstError::Contract("gram of a degenerate feature map".into()));
        }
        let p = h * w;
        let mut out = vec![0.0; n * c * c];
        for s in 0..n {
            kernels::gram_forward(self.value(x).sample_data(s), c, p, &mut out[s * c * c..(s + 1) * c * c]);
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_parts(vec![n, c, c], out), Op::Gram(x), ng))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).numel() != 1 {
            return Err(UstError::Contract(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.backprop_node(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        let params = self
            .params
            .iter()
            .filter(|(_, v)| self.ng(**v))
            .map(|(n, v)| (n.clone(), *v))
            .collect();
        Ok(Grads { by_node: grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Vec<f64>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(&g) {
                    *a += b;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::from_parts(self.shape(v).to_vec(), g));
            }
        }
    }

    fn backprop_node(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let g = gy.data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let bv = self.value(*b).data();
                    self.accumulate(grads, *a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                }
                if self.ng(*b) {
                    let av = self.value(*a).data();
                    self.accumulate(grads, *b, g.iter().zip(av).map(|(x, y)| x * y).collect());
                }
            }
            Op::MulConst(a, c) => {
                self.accumulate(grads, *a, g.iter().zip(c.data()).map(|(x, y)| x * y).collect());
            }
            Op::MulMask(a, mask) => {
                let (_, c, h, w) = self.value(*a).dims4();
                let plane = h * w;
                let mut d = g.to_vec();
                for (i, block) in d.chunks_mut(plane).enumerate() {
                    for (o, mv) in block.iter_mut().zip(mask.sample_data(i / c)) {
                        *o *= mv;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.iter().map(|v| v * s).collect()),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Abs(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, g.iter().zip(x).map(|(gv, xv)| gv * sign(*xv)).collect());
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, g.iter().zip(x).map(|(gv, xv)| 2.0 * gv * xv).collect());
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.accumulate(
                    grads,
                    *a,
                    g.iter().zip(x).map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 }).collect(),
                );
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a).data();
                self.accumulate(
                    grads,
                    *a,
                    g.iter().zip(x).map(|(gv, xv)| if *xv > 0.0 { *gv } else { gv * slope }).collect(),
                );
            }
            Op::Tanh(a) => {
                self.accumulate(grads, *a, g.iter().zip(y).map(|(gv, yv)| gv * (1.0 - yv * yv)).collect());
            }
            Op::Sigmoid(a) => {
                self.accumulate(grads, *a, g.iter().zip(y).map(|(gv, yv)| gv * yv * (1.0 - yv)).collect());
            }
            Op::Log(a, eps) => {
                let x = self.value(*a).data();
                self.accumulate(
                    grads,
                    *a,
                    g.iter().zip(x).map(|(gv, xv)| if *xv > *eps { gv / xv } else { 0.0 }).collect(),
                );
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![g[0] / n as f64; n]);
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                c_out,
                cols,
            } => {
                let n = self.value(*x).shape()[0];
                if self.ng(*x) {
                    let dx = kernels::conv2d_backward_input(g, n, geom, self.value(*w).data(), *c_out);
                    self.accumulate(grads, *x, dx);
                }
                let wants_b = b.is_some_and(|b| self.ng(b));
                if self.ng(*w) || wants_b {
                    let mut dw = vec![0.0; self.value(*w).numel()];
                    let mut db = vec![0.0; *c_out];
                    if self.ng(*w) {
                        kernels::conv2d_backward_params(g, cols, geom, *c_out, &mut dw, Some(&mut db));
                        self.accumulate(grads, *w, dw);
                    } else {
                        let p = geom.p();
                        for s in 0..n {
                            for (co, row) in g[s * c_out * p..(s + 1) * c_out * p].chunks(p).enumerate() {
                                db[co] += row.iter().sum::<f64>();
                            }
                        }
                    }
                    if let Some(b) = b {
                        self.accumulate(grads, *b, db);
                    }
                }
            }
            Op::Upsample2(a) => {
                let (n, c, h, w) = self.value(*a).dims4();
                self.accumulate(grads, *a, kernels::upsample2_backward(g, n * c, h, w));
            }
            Op::AvgPool2(a) => {
                let (n, c, h, w) = self.value(*a).dims4();
                self.accumulate(grads, *a, kernels::avgpool2_backward(g, n * c, h, w));
            }
            Op::InstanceNorm { x, inv_std } => {
                let (_, _, h, w) = self.value(*x).dims4();
                self.accumulate(grads, *x, kernels::instance_norm_backward(g, y, inv_std, h * w));
            }
            Op::ChannelAffine { x, gamma, beta } => {
                let (_, _, h, w) = self.value(*x).dims4();
                let plane = h * w;
                let xv = self.value(*x).data();
                let gam = self.value(*gamma).data();
                if self.ng(*x) {
                    let mut dx = g.to_vec();
                    for (i, block) in dx.chunks_mut(plane).enumerate() {
                        for o in block.iter_mut() {
                            *o *= gam[i];
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.ng(*gamma) {
                    let dg = g
                        .chunks(plane)
                        .zip(xv.chunks(plane))
                        .map(|(gb, xb)| gb.iter().zip(xb).map(|(a, b)| a * b).sum())
                        .collect();
                    self.accumulate(grads, *gamma, dg);
                }
                if self.ng(*beta) {
                    let dbeta = g.chunks(plane).map(|gb| gb.iter().sum()).collect();
                    self.accumulate(grads, *beta, dbeta);
                }
            }
            Op::Concat(parts) => {
                let n = gy.shape()[0];
                let out_len = gy.sample_len();
                let mut offset = 0;
                for &p in parts {
                    let plen = self.value(p).sample_len();
                    if self.ng(p) {
                        let mut d = Vec::with_capacity(n * plen);
                        for s in 0..n {
                            d.extend_from_slice(&g[s * out_len + offset..s * out_len + offset + plen]);
                        }
                        self.accumulate(grads, p, d);
                    }
                    offset += plen;
                }
            }
            Op::Linear { x, w, b } => {
                let (n, fin) = (self.shape(*x)[0], self.shape(*x)[1]);
                let fout = self.shape(*w)[0];
                if self.ng(*x) {
                    let mut dx = vec![0.0; n * fin];
                    kernels::gemm(n, fout, fin, g, false, self.value(*w).data(), false, 0.0, &mut dx);
                    self.accumulate(grads, *x, dx);
                }
                if self.ng(*w) {
                    let mut dw = vec![0.0; fout * fin];
                    kernels::gemm(fout, n, fin, g, true, self.value(*x).data(), false, 0.0, &mut dw);
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    let mut db = vec![0.0; fout];
                    for row in g.chunks(fout) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::GlobalAvgPool(a) => {
                let (_, _, h, w) = self.value(*a).dims4();
                let plane = h * w;
                let mut d = Vec::with_capacity(g.len() * plane);
                for gv in g {
                    d.extend(std::iter::repeat_n(gv / plane as f64, plane));
                }
                self.accumulate(grads, *a, d);
            }
            Op::SliceCols { x, start } => {
                let s = self.shape(*x);
                let (n, d) = (s[0], s[1]);
                let len = gy.shape()[1];
                let mut dx = vec![0.0; n * d];
                for r in 0..n {
                    dx[r * d + start..r * d + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Resample { x, src, dst } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let (_, _, oh, ow) = gy.dims4();
                let mut dx = vec![0.0; n * c * h * w];
                for i in 0..n {
                    let (li, lo) = (c * h * w, c * oh * ow);
                    kernels::resample_backward(
                        &g[i * lo..(i + 1) * lo],
                        c,
                        (h, w),
                        &src[i],
                        &dst[i],
                        (oh, ow),
                        &mut dx[i * li..(i + 1) * li],
                    );
                }
                self.accumulate(grads, *x, dx);
            }
            Op::FlipW(a) => {
                let w = self.value(*a).shape()[3];
                self.accumulate(grads, *a, flip_w_data(g, w));
            }
            Op::Gram(a) => {
                let (n, c, h, w) = self.value(*a).dims4();
                let p = h * w;
                let mut d = vec![0.0; n * c * p];
                for s in 0..n {
                    kernels::gram_backward(
                        &g[s * c * c..(s + 1) * c * c],
                        self.value(*a).sample_data(s),
                        c,
                        p,
                        &mut d[s * c * p..(s + 1) * c * p],
                    );
                }
                self.accumulate(grads, *a, d);
            }
        }
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

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn flip_w_data(x: &[f64], w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(w) {
        out.extend(row.iter().rev());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d(loss)/d(input) for a graph builder.
    fn check_input_grad(x0: Tensor, build: impl Fn(&mut Graph, Var) -> Var) {
        let mut g = Graph::new(ParamFilter::None);
        let x = g.input(x0.clone());
        let l = build(&mut g, x);
        let grads = g.backward(l).unwrap();
        let analytic = grads.of(x).unwrap().clone();
        let h = 1e-6;
        for i in 0..x0.numel() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[i] += delta;
                let mut g = Graph::new(ParamFilter::None);
                let x = g.input(xp);
                let l = build(&mut g, x);
                g.value(l).data()[0]
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-5, "element {i}: analytic {a}, numeric {fd}");
        }
    }

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(shape, 1.0, &mut rng)
    }

    #[test]
    fn conv_and_norm_gradients() {
        let w = rand_t(&[3, 2, 3, 3], 2);
        check_input_grad(rand_t(&[2, 2, 5, 4], 1), move |g, x| {
            let wv = g.constant(w.clone());
            let y = g.conv2d(x, wv, None, 2, 1).unwrap();
            let y = g.instance_norm(y, 1e-5);
            let y = g.tanh(y);
            let y = g.square(y);
            g.sum(y)
        });
    }

    #[test]
    fn resample_gram_flip_gradients() {
        check_input_grad(rand_t(&[2, 3, 6, 6], 3), |g, x| {
            let src = [PixelBox::full(6, 6), PixelBox { row: 1, col: 2, height: 4, width: 3 }];
            let dst = [PixelBox { row: 1, col: 0, height: 3, width: 5 }, PixelBox::full(6, 6)];
            let r = g.resample(x, &src, &dst, 6, 6).unwrap();
            let f = g.flip_w(r);
            let s = g.add(f, r).unwrap();
            let gm = g.gram(s).unwrap();
            let sq = g.square(gm);
            g.sum(sq)
        });
    }

    #[test]
    fn affine_linear_pool_gradients() {
        check_input_grad(rand_t(&[2, 3, 4, 4], 4), |g, x| {
            let up = g.upsample2(x);
            let pooled = g.avgpool2(up).unwrap();
            let gap = g.global_avg_pool(pooled);
            let w = g.constant(rand_t(&[6, 3], 5));
            let lin = g.linear(gap, w, None).unwrap();
            let gamma = g.slice_cols(lin, 0, 3).unwrap();
            let beta = g.slice_cols(lin, 3, 3).unwrap();
            let y = g.channel_affine(x, gamma, beta).unwrap();
            let s = g.sigmoid(y);
            let l = g.log_clamped(s, 1e-12);
            g.mean(l)
        });
    }

    #[test]
    fn concat_and_mask_gradients() {
        let mask = Tensor::new(&[2, 1, 2, 2], vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        check_input_grad(rand_t(&[2, 2, 2, 2], 6), move |g, x| {
            let m = g.mul_mask(x, &mask).unwrap();
            let c = g.concat(&[x, m]).unwrap();
            let lr = g.leaky_relu(c, 0.2);
            let r = g.relu(c);
            let s = g.add(lr, r).unwrap();
            let sq = g.square(s);
            g.mean(sq)
        });
    }

    #[test]
    fn untracked_params_get_no_gradient() {
        let mut store = ParamStore::default();
        store.insert("dis.w", Tensor::scalar(2.0)).unwrap();
        store.insert("gen.w", Tensor::scalar(3.0)).unwrap();
        let mut g = Graph::new(ParamFilter::Prefixes(vec!["gen.".into()]));
        let a = g.param(&store, "dis.w").unwrap();
        let b = g.param(&store, "gen.w").unwrap();
        let p = g.mul(a, b).unwrap();
        let grads = g.backward(p).unwrap();
        assert_eq!(grads.param("gen.w").unwrap().data(), &[2.0]);
        assert!(grads.param("dis.w").is_none());
    }
}
