//! Reverse-mode differentiation over an append-only operation tape.
//!
//! Every operation appends one node holding its forward value. A node keeps
//! the metadata needed for its adjoint only when at least one input requires
//! a gradient, so a tape built purely from constant leaves is a plain forward
//! evaluator. Nodes are appended after their inputs, which makes insertion
//! order a topological order; `backward` walks it once in reverse.

use std::fmt;
use std::sync::Arc;

use super::gemm::{matmul_into, MatRef};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// A constant linear operator with a known adjoint.
///
/// Used for every non-learned transform in the model graph: DCT bases, tile
/// extraction and averaging, pyramid filtering. The backward pass of a fixed
/// map is its adjoint; the operator itself never receives a gradient.
pub trait LinearMap: fmt::Debug + Send + Sync {
    fn apply(&self, x: &Tensor) -> Result<Tensor>;
    fn apply_adjoint(&self, y: &Tensor) -> Result<Tensor>;
}

/// Dense matrix acting on the trailing axis: `out[.., i] = Σ_j m[i, j] x[.., j]`.
#[derive(Clone, Debug)]
pub struct MatrixMap {
    matrix: Tensor,
}

impl MatrixMap {
    pub fn new(matrix: Tensor) -> Result<Self> {
        if matrix.rank() != 2 {
            return Err(Error::shape(
                "fixed_linear",
                format!("basis must be a matrix, got shape {:?}", matrix.shape()),
            ));
        }
        Ok(Self { matrix })
    }

    fn dims(&self) -> (usize, usize) {
        (self.matrix.shape()[0], self.matrix.shape()[1])
    }

    fn run(&self, x: &Tensor, transpose: bool) -> Result<Tensor> {
        let (rows, cols) = self.dims();
        let (n_in, n_out) = if transpose { (rows, cols) } else { (cols, rows) };
        if x.channels() != n_in {
            return Err(Error::shape(
                "fixed_linear",
                format!(
                    "trailing axis {} does not match basis input size {n_in}",
                    x.channels()
                ),
            ));
        }
        let m = x.len() / n_in;
        let basis = MatRef::row_major(self.matrix.data(), rows, cols);
        let right = if transpose { basis } else { basis.t() };
        let mut out = vec![0.0; m * n_out];
        matmul_into(MatRef::row_major(x.data(), m, n_in), right, 0.0, &mut out);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = n_out;
        Ok(Tensor::from_parts(shape, out))
    }
}

impl LinearMap for MatrixMap {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.run(x, false)
    }

    fn apply_adjoint(&self, y: &Tensor) -> Result<Tensor> {
        self.run(y, true)
    }
}

enum Op {
    Constant,
    Leaf,
    PointwiseLinear { x: Var, w: Var, b: Var },
    Activation { x: Var, kind: Activation },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Affine { x: Var, scale: f32 },
    Fixed { x: Var, map: Arc<dyn LinearMap> },
    Conv3x3 { x: Var, w: Var, b: Var, stride: usize },
    GlobalAvgPool { x: Var },
    Modulate { x: Var, scale: Var, shift: Var },
    L1 { a: Var, b: Var },
    WeightedSum { terms: Vec<(Var, f64)> },
    Clamp01 { x: Var },
    Mlp { x: Var, params: Vec<Var> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Full-precision value of scalar reductions.
    scalar: Option<f64>,
}

/// Gradients produced by [`Tape::backward`], indexed by leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

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

    /// Adds an input. It participates in differentiation iff
    /// `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        let op = if requires_grad { Op::Leaf } else { Op::Constant };
        self.push(tensor, op, requires_grad, None)
    }

    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Scalar value of a reduction, accumulated in `f64`.
    pub fn scalar(&self, var: Var) -> f64 {
        let node = &self.nodes[var.0];
        node.scalar.unwrap_or_else(|| node.value.item() as f64)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, scalar: Option<f64>) -> Var {
        let op = if requires_grad { op } else { Op::Constant };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            scalar,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// `out[.., o] = Σ_i w[o, i] x[.., i] + b[o]`: a 1×1 convolution over any
    /// leading axes.
    pub fn pointwise_linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if wv.rank() != 2 {
            return Err(Error::shape("pointwise_linear", "weight must be [cout, cin]"));
        }
        let (cout, cin) = (wv.shape()[0], wv.shape()[1]);
        if xv.channels() != cin {
            return Err(Error::shape(
                "pointwise_linear",
                format!("input has {} channels, weight expects {cin}", xv.channels()),
            ));
        }
        if bv.len() != cout {
            return Err(Error::shape(
                "pointwise_linear",
                format!("bias has {} entries, weight produces {cout}", bv.len()),
            ));
        }
        let m = xv.len() / cin;
        let mut out = Vec::with_capacity(m * cout);
        for _ in 0..m {
            out.extend_from_slice(bv.data());
        }
        matmul_into(
            MatRef::row_major(xv.data(), m, cin),
            MatRef::row_major(wv.data(), cout, cin).t(),
            1.0,
            &mut out,
        );
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = cout;
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::PointwiseLinear { x, w, b },
            rg,
            None,
        ))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let out = match kind {
            Activation::Relu => self.value(x).map(|v| v.max(0.0)),
            Activation::Sigmoid => self.value(x).map(sigmoid),
        };
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Activation { x, kind }, rg, None)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg, None))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |p, q| p - q)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Sub { a, b }, rg, None))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul { a, b }, rg, None))
    }

    /// `scale·x + shift` with scalar coefficients.
    pub fn affine(&mut self, x: Var, scale: f32, shift: f32) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Affine { x, scale }, rg, None)
    }

    /// Applies a constant linear operator; gradients flow through its adjoint.
    pub fn fixed_map(&mut self, x: Var, map: Arc<dyn LinearMap>) -> Result<Var> {
        let out = map.apply(self.value(x))?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Fixed { x, map }, rg, None))
    }

    /// Multiplies the trailing axis by a constant basis matrix.
    pub fn fixed_linear(&mut self, x: Var, basis: &Tensor) -> Result<Var> {
        let map = Arc::new(MatrixMap::new(basis.clone())?);
        self.fixed_map(x, map)
    }

    /// 3×3 convolution with zero padding 1 on an `[H, W, Cin]` input;
    /// weight layout `[Cout, 3, 3, Cin]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.rank() != 3 {
            return Err(Error::shape("conv3x3", "input must be [H, W, C]"));
        }
        let (h, wd, cin) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        if wv.shape().len() != 4 || wv.shape()[1..] != [3, 3, cin] {
            return Err(Error::shape(
                "conv3x3",
                format!("weight {:?} incompatible with {cin} input channels", wv.shape()),
            ));
        }
        let cout = wv.shape()[0];
        if bv.len() != cout || stride == 0 {
            return Err(Error::shape("conv3x3", "bias length or stride invalid"));
        }
        let geom = ConvGeom::new(h, wd, cin, stride);
        let cols = geom.im2col(xv.data());
        let m = geom.ho * geom.wo;
        let k = 9 * cin;
        let mut out = Vec::with_capacity(m * cout);
        for _ in 0..m {
            out.extend_from_slice(bv.data());
        }
        matmul_into(
            MatRef::row_major(&cols, m, k),
            MatRef::row_major(wv.data(), cout, k).t(),
            1.0,
            &mut out,
        );
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(
            Tensor::from_parts(vec![geom.ho, geom.wo, cout], out),
            Op::Conv3x3 { x, w, b, stride },
            rg,
            None,
        ))
    }

    /// Spatial mean of an `[H, W, C]` tensor, giving `[1, 1, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 3 {
            return Err(Error::shape("global_avg_pool", "input must be [H, W, C]"));
        }
        let c = xv.channels();
        let n = xv.len() / c;
        let mut acc = vec![0.0f64; c];
        for px in xv.data().chunks_exact(c) {
            for (a, &v) in acc.iter_mut().zip(px) {
                *a += v as f64;
            }
        }
        let out = acc.iter().map(|&a| (a / n as f64) as f32).collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![1, 1, c], out),
            Op::GlobalAvgPool { x },
            rg,
            None,
        ))
    }

    /// Per-channel `x·scale + shift`; `scale` and `shift` hold one value per
    /// trailing-axis channel of `x`.
    pub fn modulate(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (xv, sv, tv) = (self.value(x), self.value(scale), self.value(shift));
        let c = xv.channels();
        if sv.len() != c || tv.len() != c {
            return Err(Error::shape(
                "modulate",
                format!("{c} channels but scale/shift have {}/{}", sv.len(), tv.len()),
            ));
        }
        let mut out = xv.data().to_vec();
        for px in out.chunks_exact_mut(c) {
            for ((v, &s), &t) in px.iter_mut().zip(sv.data()).zip(tv.data()) {
                *v = *v * s + t;
            }
        }
        let rg = self.any_grad(&[x, scale, shift]);
        Ok(self.push(
            Tensor::from_parts(xv.shape().to_vec(), out),
            Op::Modulate { x, scale, shift },
            rg,
            None,
        ))
    }

    /// Mean absolute difference.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        av.expect_same_shape("l1_loss", bv)?;
        let total: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&p, &q)| (p as f64 - q as f64).abs())
            .sum();
        let mean = total / av.len() as f64;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::scalar(mean as f32), Op::L1 { a, b }, rg, Some(mean)))
    }

    /// `Σ w_i s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            if self.value(v).len() != 1 {
                return Err(Error::shape("weighted_sum", "terms must be scalars"));
            }
            total += w * self.scalar(v);
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.any_grad(&vars);
        Ok(self.push(
            Tensor::scalar(total as f32),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            rg,
            Some(total),
        ))
    }

    /// Stack of pointwise layers, relu between them and sigmoid at the end;
    /// `params` alternates weight `[cout, cin]` and bias `[cout]`.
    ///
    /// Rows are processed in cache-sized blocks and only the output is
    /// kept; the backward pass recomputes the hidden activations block by
    /// block.
    pub fn mlp(&mut self, x: Var, params: &[Var]) -> Result<Var> {
        if params.is_empty() || params.len() % 2 != 0 {
            return Err(Error::shape("mlp", "params must be weight/bias pairs"));
        }
        let xv = self.value(x);
        let mut cin = xv.channels();
        for pair in params.chunks_exact(2) {
            let (w, b) = (self.value(pair[0]), self.value(pair[1]));
            if w.rank() != 2 || w.shape()[1] != cin || b.len() != w.shape()[0] {
                return Err(Error::shape(
                    "mlp",
                    format!("layer {:?}/{:?} after {cin} channels", w.shape(), b.shape()),
                ));
            }
            cin = w.shape()[0];
        }
        let layers = self.mlp_layers(params);
        let cout = cin;
        let c0 = xv.channels();
        let m = xv.len() / c0;
        let mut out = vec![0.0f32; m * cout];
        let mut acts = MlpActs::new(&layers);
        for start in (0..m).step_by(MLP_BLOCK) {
            let rows = MLP_BLOCK.min(m - start);
            acts.forward(&layers, &xv.data()[start * c0..(start + rows) * c0], rows);
            out[start * cout..(start + rows) * cout].copy_from_slice(acts.output(rows));
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = cout;
        let mut all = vec![x];
        all.extend_from_slice(params);
        let rg = self.any_grad(&all);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Mlp {
                x,
                params: params.to_vec(),
            },
            rg,
            None,
        ))
    }

    fn mlp_layers<'a>(&'a self, params: &[Var]) -> Vec<(&'a Tensor, &'a Tensor)> {
        params
            .chunks_exact(2)
            .map(|p| (self.value(p[0]), self.value(p[1])))
            .collect()
    }

    pub fn clamp01(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.clamp(0.0, 1.0));
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Clamp01 { x }, rg, None)
    }

    /// Propagates adjoints from the scalar `loss` back to every node that
    /// requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", "loss must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf | Op::Constant) || !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &gy, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Constant | Op::Leaf => {}
            Op::PointwiseLinear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (cout, cin) = (wv.shape()[0], wv.shape()[1]);
                let m = xv.len() / cin;
                let gyr = MatRef::row_major(gy.data(), m, cout);
                if self.requires_grad(*x) {
                    let mut gx = vec![0.0; m * cin];
                    matmul_into(gyr, MatRef::row_major(wv.data(), cout, cin), 0.0, &mut gx);
                    self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), gx));
                }
                if self.requires_grad(*w) {
                    let mut gw = vec![0.0; cout * cin];
                    matmul_into(gyr.t(), MatRef::row_major(xv.data(), m, cin), 0.0, &mut gw);
                    self.accumulate(grads, *w, Tensor::from_parts(wv.shape().to_vec(), gw));
                }
                if self.requires_grad(*b) {
                    let gb = channel_sums(gy.data(), cout);
                    self.accumulate(grads, *b, Tensor::from_parts(self.value(*b).shape().to_vec(), gb));
                }
            }
            Op::Activation { x, kind } => {
                let y = &node.value;
                let gx = match kind {
                    Activation::Relu => y.zip_map(gy, |yv, g| if yv > 0.0 { g } else { 0.0 })?,
                    Activation::Sigmoid => y.zip_map(gy, |yv, g| g * yv * (1.0 - yv))?,
                };
                self.accumulate(grads, *x, gx);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.map(|g| -g));
            }
            Op::Mul { a, b } => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, gy.zip_map(self.value(*b), |g, q| g * q)?);
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, gy.zip_map(self.value(*a), |g, p| g * p)?);
                }
            }
            Op::Affine { x, scale } => {
                let s = *scale;
                self.accumulate(grads, *x, gy.map(|g| g * s));
            }
            Op::Fixed { x, map } => {
                let gx = map.apply_adjoint(gy)?;
                self.accumulate(grads, *x, gx);
            }
            Op::Conv3x3 { x, w, b, stride } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (h, wd, cin) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let cout = wv.shape()[0];
                let geom = ConvGeom::new(h, wd, cin, *stride);
                let m = geom.ho * geom.wo;
                let k = 9 * cin;
                let gyr = MatRef::row_major(gy.data(), m, cout);
                if self.requires_grad(*w) {
                    let cols = geom.im2col(xv.data());
                    let mut gw = vec![0.0; cout * k];
                    matmul_into(gyr.t(), MatRef::row_major(&cols, m, k), 0.0, &mut gw);
                    self.accumulate(grads, *w, Tensor::from_parts(wv.shape().to_vec(), gw));
                }
                if self.requires_grad(*x) {
                    let mut gcols = vec![0.0; m * k];
                    matmul_into(gyr, MatRef::row_major(wv.data(), cout, k), 0.0, &mut gcols);
                    let gx = geom.col2im(&gcols);
                    self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), gx));
                }
                if self.requires_grad(*b) {
                    let gb = channel_sums(gy.data(), cout);
                    self.accumulate(grads, *b, Tensor::from_parts(self.value(*b).shape().to_vec(), gb));
                }
            }
            Op::GlobalAvgPool { x } => {
                let xv = self.value(*x);
                let c = xv.channels();
                let n = (xv.len() / c) as f32;
                let mut gx = Vec::with_capacity(xv.len());
                for _ in 0..xv.len() / c {
                    gx.extend(gy.data().iter().map(|g| g / n));
                }
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), gx));
            }
            Op::Modulate { x, scale, shift } => {
                let (xv, sv) = (self.value(*x), self.value(*scale));
                let c = xv.channels();
                if self.requires_grad(*x) {
                    let mut gx = gy.data().to_vec();
                    for px in gx.chunks_exact_mut(c) {
                        for (g, &s) in px.iter_mut().zip(sv.data()) {
                            *g *= s;
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), gx));
                }
                if self.requires_grad(*scale) {
                    let mut gs = vec![0.0f64; c];
                    for (gp, xp) in gy.data().chunks_exact(c).zip(xv.data().chunks_exact(c)) {
                        for ((a, &g), &xx) in gs.iter_mut().zip(gp).zip(xp) {
                            *a += (g * xx) as f64;
                        }
                    }
                    let gs = gs.into_iter().map(|v| v as f32).collect();
                    self.accumulate(grads, *scale, Tensor::from_parts(sv.shape().to_vec(), gs));
                }
                if self.requires_grad(*shift) {
                    let gt = channel_sums(gy.data(), c);
                    self.accumulate(grads, *shift, Tensor::from_parts(self.value(*shift).shape().to_vec(), gt));
                }
            }
            Op::L1 { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let scale = gy.item() / av.len() as f32;
                let ga = av.zip_map(bv, |p, q| {
                    if p > q {
                        scale
                    } else if p < q {
                        -scale
                    } else {
                        0.0
                    }
                })?;
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, ga.map(|g| -g));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::WeightedSum { terms } => {
                for &(v, w) in terms {
                    self.accumulate(grads, v, Tensor::scalar(gy.item() * w as f32));
                }
            }
            Op::Mlp { x, params } => self.mlp_backward(*x, params, &node.value, gy, grads),
            Op::Clamp01 { x } => {
                let gx = self
                    .value(*x)
                    .zip_map(gy, |v, g| if (0.0..=1.0).contains(&v) { g } else { 0.0 })?;
                self.accumulate(grads, *x, gx);
            }
        }
        Ok(())
    }
}

impl Tape {
    fn mlp_backward(
        &self,
        x: Var,
        params: &[Var],
        y: &Tensor,
        gy: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let layers = self.mlp_layers(params);
        let xv = self.value(x);
        let c0 = xv.channels();
        let m = xv.len() / c0;
        let cout = y.channels();
        let widths: Vec<(usize, usize)> = layers.iter().map(|(w, _)| (w.shape()[0], w.shape()[1])).collect();
        let mut gw: Vec<Vec<f64>> = widths.iter().map(|&(o, i)| vec![0.0; o * i]).collect();
        let mut gb: Vec<Vec<f64>> = widths.iter().map(|&(o, _)| vec![0.0; o]).collect();
        let need_x = self.requires_grad(x);
        let mut gx = if need_x { vec![0.0f32; xv.len()] } else { Vec::new() };
        let mut acts = MlpActs::new(&layers);
        let widest = widths.iter().map(|&(o, i)| o.max(i)).max().unwrap_or(0);
        let mut g = vec![0.0f32; MLP_BLOCK * widest];
        let mut g_prev = vec![0.0f32; MLP_BLOCK * widest];
        let mut block_w = vec![0.0f32; widest * widest];

        for start in (0..m).step_by(MLP_BLOCK) {
            let rows = MLP_BLOCK.min(m - start);
            acts.forward(&layers, &xv.data()[start * c0..(start + rows) * c0], rows);
            // through the output sigmoid
            let ys = &y.data()[start * cout..(start + rows) * cout];
            let gys = &gy.data()[start * cout..(start + rows) * cout];
            for ((gv, &yv), &gyv) in g[..rows * cout].iter_mut().zip(ys).zip(gys) {
                *gv = gyv * yv * (1.0 - yv);
            }
            for l in (0..layers.len()).rev() {
                let (o, i) = widths[l];
                let input: &[f32] = if l == 0 {
                    &xv.data()[start * c0..(start + rows) * c0]
                } else {
                    &acts.hidden[l - 1][..rows * i]
                };
                let gl = MatRef::row_major(&g[..rows * o], rows, o);
                matmul_into(gl.t(), MatRef::row_major(input, rows, i), 0.0, &mut block_w[..o * i]);
                for (a, &v) in gw[l].iter_mut().zip(&block_w[..o * i]) {
                    *a += v as f64;
                }
                for row in g[..rows * o].chunks_exact(o) {
                    for (a, &v) in gb[l].iter_mut().zip(row) {
                        *a += v as f64;
                    }
                }
                if l == 0 && !need_x {
                    break;
                }
                matmul_into(
                    gl,
                    MatRef::row_major(layers[l].0.data(), o, i),
                    0.0,
                    &mut g_prev[..rows * i],
                );
                if l == 0 {
                    gx[start * c0..(start + rows) * c0].copy_from_slice(&g_prev[..rows * i]);
                } else {
                    for (gv, &h) in g_prev[..rows * i].iter_mut().zip(&acts.hidden[l - 1][..rows * i]) {
                        if h <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    std::mem::swap(&mut g, &mut g_prev);
                }
            }
        }
        for (l, pair) in params.chunks_exact(2).enumerate() {
            let to_f32 = |v: &[f64]| v.iter().map(|&a| a as f32).collect::<Vec<f32>>();
            self.accumulate(grads, pair[0], Tensor::from_parts(layers[l].0.shape().to_vec(), to_f32(&gw[l])));
            self.accumulate(grads, pair[1], Tensor::from_parts(layers[l].1.shape().to_vec(), to_f32(&gb[l])));
        }
        if need_x {
            self.accumulate(grads, x, Tensor::from_parts(xv.shape().to_vec(), gx));
        }
    }
}

/// Rows per block in [`Tape::mlp`].
const MLP_BLOCK: usize = 256;

/// Per-block activation buffers of an MLP: post-relu hidden layers and the
/// sigmoid output.
struct MlpActs {
    hidden: Vec<Vec<f32>>,
    out: Vec<f32>,
}

impl MlpActs {
    fn new(layers: &[(&Tensor, &Tensor)]) -> Self {
        let n = layers.len();
        Self {
            hidden: layers[..n - 1]
                .iter()
                .map(|(w, _)| vec![0.0; MLP_BLOCK * w.shape()[0]])
                .collect(),
            out: vec![0.0; MLP_BLOCK * layers[n - 1].0.shape()[0]],
        }
    }

    fn forward(&mut self, layers: &[(&Tensor, &Tensor)], x: &[f32], rows: usize) {
        let n = layers.len();
        for (l, (w, b)) in layers.iter().enumerate() {
            let (o, i) = (w.shape()[0], w.shape()[1]);
            let (before, rest) = self.hidden.split_at_mut(l);
            let input: &[f32] = if l == 0 { x } else { &before[l - 1][..rows * i] };
            let dst: &mut [f32] = if l + 1 < n { &mut rest[0][..rows * o] } else { &mut self.out[..rows * o] };
            for row in dst.chunks_exact_mut(o) {
                row.copy_from_slice(b.data());
            }
            matmul_into(
                MatRef::row_major(input, rows, i),
                MatRef::row_major(w.data(), o, i).t(),
                1.0,
                dst,
            );
            if l + 1 < n {
                dst.iter_mut().for_each(|v| *v = v.max(0.0));
            } else {
                dst.iter_mut().for_each(|v| *v = sigmoid(*v));
            }
        }
    }

    fn output(&self, rows: usize) -> &[f32] {
        let o = self.out.len() / MLP_BLOCK;
        &self.out[..rows * o]
    }
}

pub fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

fn channel_sums(data: &[f32], c: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; c];
    for px in data.chunks_exact(c) {
        for (a, &v) in acc.iter_mut().zip(px) {
            *a += v as f64;
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

struct ConvGeom {
    h: usize,
    w: usize,
    c: usize,
    stride: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(h: usize, w: usize, c: usize, stride: usize) -> Self {
        Self {
            h,
            w,
            c,
            stride,
            ho: (h - 1) / stride + 1,
            wo: (w - 1) / stride + 1,
        }
    }

    /// Source pixel for output `(oy, ox)` and tap `(ky, kx)`, if inside.
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let y = (oy * self.stride + ky) as isize - 1;
        let x = (ox * self.stride + kx) as isize - 1;
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            None
        } else {
            Some((y as usize * self.w + x as usize) * self.c)
        }
    }

    fn im2col(&self, x: &[f32]) -> Vec<f32> {
        let k = 9 * self.c;
        let mut cols = vec![0.0; self.ho * self.wo * k];
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let row = &mut cols[(oy * self.wo + ox) * k..][..k];
                for ky in 0..3 {
                    for kx in 0..3 {
                        if let Some(src) = self.source(oy, ox, ky, kx) {
                            let dst = (ky * 3 + kx) * self.c;
                            row[dst..dst + self.c].copy_from_slice(&x[src..src + self.c]);
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f32]) -> Vec<f32> {
        let k = 9 * self.c;
        let mut x = vec![0.0; self.h * self.w * self.c];
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let row = &cols[(oy * self.wo + ox) * k..][..k];
                for ky in 0..3 {
                    for kx in 0..3 {
                        if let Some(src) = self.source(oy, ox, ky, kx) {
                            let off = (ky * 3 + kx) * self.c;
                            for (d, &g) in x[src..src + self.c].iter_mut().zip(&row[off..off + self.c]) {
                                *d += g;
                            }
                        }
                    }
                }
            }
        }
        x
    }
}
