//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends one node holding its forward value. `backward`
//! walks the nodes in exact reverse order; nodes that cannot reach a
//! trainable parameter are skipped entirely.

use std::collections::HashMap;

use super::kernels::{self, ConvGeom, Plane, Window};
use super::{Array, ParamStore, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(String),
    Conv2d { x: Var, w: Var, b: Var, win: Window },
    ConvTranspose2d { x: Var, w: Var, b: Var, win: Window },
    Dense { x: Var, w: Var, b: Var },
    LeakyRelu { x: Var, slope: f32 },
    Sigmoid { x: Var },
    Upsample2x { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, k: f32 },
    ConcatChannels { a: Var, b: Var },
    Reshape { x: Var },
    Mean { x: Var },
    Mse { a: Var, b: Var },
    Pearson { a: Var, b: Var, valid: Vec<bool> },
    BceLogits { x: Var, targets: Vec<f32> },
}

struct Node {
    value: Array,
    op: Op,
    needs_grad: bool,
}

/// Faults injected into backward rules for negative-control tests.
#[cfg(test)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Fault {
    LeakyReluSlope,
}

/// Recorded computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    #[cfg(test)]
    pub(crate) fault: Option<Fault>,
}

/// Parameter handles of one `ParamStore` bound onto a tape.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
    prefix: String,
}

impl Bound {
    /// Handle for `name` (prefixed by the current scope).
    pub fn get(&self, name: &str) -> Result<Var, TensorError> {
        let key = format!("{}{}", self.prefix, name);
        self.vars.get(&key).copied().ok_or(TensorError::MissingParam(key))
    }

    /// View of the same bindings with an extra name prefix.
    pub fn scope(&self, prefix: &str) -> Bound {
        Bound { vars: self.vars.clone(), prefix: format!("{}{}", self.prefix, prefix) }
    }
}

fn mismatch(op: &str, left: &[usize], right: &[usize]) -> TensorError {
    TensorError::ShapeMismatch { op: op.to_string(), left: left.to_vec(), right: right.to_vec() }
}

fn nhwc(op: &str, a: &Array) -> Result<Plane, TensorError> {
    match *a.shape() {
        [n, h, w, c] => Ok(Plane { n, h, w, c }),
        _ => Err(TensorError::Rank { op: op.to_string(), expected: 4, shape: a.shape().to_vec() }),
    }
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

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Array, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Param(_) => true,
            _ => inputs.iter().any(|&i| self.needs(i)),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a value that receives no gradient.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Constant, &[])
    }

    /// Records a trainable leaf; its gradient is reported under `name`.
    pub fn param(&mut self, name: &str, value: Array) -> Var {
        self.push(value, Op::Param(name.to_string()), &[])
    }

    /// Binds every entry of `store` as a trainable leaf.
    pub fn bind(&mut self, store: &ParamStore) -> Bound {
        let vars = store.iter().map(|(n, a)| (n.to_string(), self.param(n, a.clone()))).collect();
        Bound { vars, prefix: String::new() }
    }

    /// Binds every entry of `store` as a constant (frozen weights that still
    /// pass gradients through to their inputs).
    pub fn bind_frozen(&mut self, store: &ParamStore) -> Bound {
        let vars = store.iter().map(|(n, a)| (n.to_string(), self.constant(a.clone()))).collect();
        Bound { vars, prefix: String::new() }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let plane = nhwc("conv2d", self.value(x))?;
        let ws = self.shape(w).to_vec();
        let [k, k2, cin, cout] = ws[..] else {
            return Err(TensorError::Rank { op: "conv2d weight".into(), expected: 4, shape: ws });
        };
        if k != k2 || cin != plane.c {
            return Err(mismatch("conv2d", self.shape(x), &ws));
        }
        if self.shape(b) != [cout] {
            return Err(mismatch("conv2d bias", self.shape(b), &[cout]));
        }
        let win = Window { kernel: k, stride, pad };
        let (oh, ow) = match (win.out_len(plane.h), win.out_len(plane.w)) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => return Err(mismatch("conv2d window", self.shape(x), &ws)),
        };
        let geom = ConvGeom { big: plane, small: Plane { h: oh, w: ow, c: cout, ..plane }, win };
        let out = kernels::conv_forward(geom, self.value(x).data(), self.value(w).data(), self.value(b).data());
        let value = Array::from_vec(&[plane.n, oh, ow, cout], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, win }, &[x, w, b]))
    }

    /// Transposed convolution producing an `out_hw` plane.
    ///
    /// `out_hw` must map back onto the input size under the forward conv
    /// geometry, i.e. `⌊(out + 2p − k)/s⌋ + 1 == in`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        out_hw: (usize, usize),
    ) -> Result<Var, TensorError> {
        let plane = nhwc("conv_transpose2d", self.value(x))?;
        let ws = self.shape(w).to_vec();
        let [k, k2, cout, cin] = ws[..] else {
            return Err(TensorError::Rank { op: "conv_transpose2d weight".into(), expected: 4, shape: ws });
        };
        if k != k2 || cin != plane.c {
            return Err(mismatch("conv_transpose2d", self.shape(x), &ws));
        }
        if self.shape(b) != [cout] {
            return Err(mismatch("conv_transpose2d bias", self.shape(b), &[cout]));
        }
        let win = Window { kernel: k, stride, pad };
        let (oh, ow) = out_hw;
        if win.out_len(oh) != Some(plane.h) || win.out_len(ow) != Some(plane.w) {
            return Err(mismatch("conv_transpose2d output", &[plane.h, plane.w], &[oh, ow]));
        }
        let geom = ConvGeom { big: Plane { h: oh, w: ow, c: cout, ..plane }, small: plane, win };
        let mut out = kernels::conv_grad_x(geom, self.value(x).data(), self.value(w).data());
        let bias = self.value(b).data();
        for px in out.chunks_mut(cout) {
            for (o, b) in px.iter_mut().zip(bias) {
                *o += b;
            }
        }
        let value = Array::from_vec(&[plane.n, oh, ow, cout], out)?;
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b, win }, &[x, w, b]))
    }

    /// `x [N, in] · w [in, out] + b [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let ([n, fin], [win, fout]) = (&xs[..], &ws[..]) else {
            return Err(mismatch("dense", &xs, &ws));
        };
        let (n, fin, fout) = (*n, *fin, *fout);
        if fin != *win {
            return Err(mismatch("dense", &xs, &ws));
        }
        if self.shape(b) != [fout] {
            return Err(mismatch("dense bias", self.shape(b), &[fout]));
        }
        let mut out = vec![0.0f32; n * fout];
        let bias = self.value(b).data();
        for row in out.chunks_mut(fout) {
            row.copy_from_slice(bias);
        }
        kernels::gemm_nn(n, fin, fout, self.value(x).data(), self.value(w).data(), &mut out, true);
        let value = Array::from_vec(&[n, fout], out)?;
        Ok(self.push(value, Op::Dense { x, w, b }, &[x, w, b]))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(value, Op::LeakyRelu { x, slope }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid { x }, &[x])
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var, TensorError> {
        let p = nhwc("upsample2x", self.value(x))?;
        let out = kernels::upsample2x(self.value(x).data(), p);
        let value = Array::from_vec(&[p.n, 2 * p.h, 2 * p.w, p.c], out)?;
        Ok(self.push(value, Op::Upsample2x { x }, &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y).map_err(|_| {
            mismatch("add", self.shape(a), self.shape(b))
        })?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y).map_err(|_| {
            mismatch("sub", self.shape(a), self.shape(b))
        })?;
        Ok(self.push(value, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y).map_err(|_| {
            mismatch("mul", self.shape(a), self.shape(b))
        })?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, k: f32) -> Var {
        let value = self.value(x).scale(k);
        self.push(value, Op::Scale { x, k }, &[x])
    }

    /// Concatenates two NHWC arrays along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let pa = nhwc("concat_channels", self.value(a))?;
        let pb = nhwc("concat_channels", self.value(b))?;
        if (pa.n, pa.h, pa.w) != (pb.n, pb.h, pb.w) {
            return Err(mismatch("concat_channels", self.shape(a), self.shape(b)));
        }
        let c = pa.c + pb.c;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(pa.n * pa.h * pa.w * c);
        for (ra, rb) in da.chunks(pa.c).zip(db.chunks(pb.c)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let value = Array::from_vec(&[pa.n, pa.h, pa.w, c], out)?;
        Ok(self.push(value, Op::ConcatChannels { a, b }, &[a, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// Mean over all elements, as a `[1]` array.
    pub fn mean(&mut self, x: Var) -> Var {
        let value = Array::scalar(mean_f64(self.value(x).data()) as f32);
        self.push(value, Op::Mean { x }, &[x])
    }

    /// `mean((a − b)²)` over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("mse", self.shape(a), self.shape(b)));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let s: f64 = da.iter().zip(db).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum();
        let value = Array::scalar((s / da.len().max(1) as f64) as f32);
        Ok(self.push(value, Op::Mse { a, b }, &[a, b]))
    }

    /// Batch Pearson correlation: per column of `[N, d]` inputs across the
    /// batch, averaged over columns with nonzero variance in both inputs.
    /// Returns 0 when no column qualifies.
    pub fn batch_pearson(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        if sa != self.shape(b) || sa.len() != 2 {
            return Err(mismatch("batch_pearson", &sa, self.shape(b)));
        }
        let (n, d) = (sa[0], sa[1]);
        if n < 2 {
            return Err(TensorError::BatchTooSmall { op: "batch_pearson".into(), n });
        }
        let stats = pearson_columns(self.value(a).data(), self.value(b).data(), n, d);
        let valid: Vec<bool> = stats.iter().map(|s| s.is_some()).collect();
        let rs: Vec<f64> = stats.iter().flatten().map(|s| s.r).collect();
        let r = if rs.is_empty() { 0.0 } else { rs.iter().sum::<f64>() / rs.len() as f64 };
        let value = Array::scalar(r as f32);
        Ok(self.push(value, Op::Pearson { a, b, valid }, &[a, b]))
    }

    /// Mean binary cross-entropy of logits `x` against fixed `targets`.
    pub fn bce_with_logits(&mut self, x: Var, targets: &[f32]) -> Result<Var, TensorError> {
        if self.value(x).len() != targets.len() {
            return Err(mismatch("bce_with_logits", self.shape(x), &[targets.len()]));
        }
        let s: f64 = self.value(x).data().iter().zip(targets).map(|(&l, &y)| bce_term(l as f64, y as f64)).sum();
        let value = Array::scalar((s / targets.len().max(1) as f64) as f32);
        Ok(self.push(value, Op::BceLogits { x, targets: targets.to_vec() }, &[x]))
    }

    /// Backpropagates `seed` (shaped like `out`) and returns gradients for
    /// every parameter reached.
    pub fn backward(&self, out: Var, seed: Array) -> Result<ParamStore, TensorError> {
        if seed.shape() != self.shape(out) {
            return Err(mismatch("backward seed", seed.shape(), self.shape(out)));
        }
        let mut grads: Vec<Option<Array>> = (0..=out.0).map(|_| None).collect();
        grads[out.0] = Some(seed);
        let mut result: Vec<(String, Array)> = Vec::new();

        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Constant => {}
                Op::Param(name) => match result.iter_mut().find(|(n, _)| n == name) {
                    Some(slot) => slot.1.add_assign(&g),
                    None => result.push((name.clone(), g)),
                },
                op => self.backward_op(op, &node.value, &g, &mut grads)?,
            }
        }

        // Report in parameter recording order.
        result.sort_by_key(|(name, _)| {
            self.nodes.iter().position(|n| matches!(&n.op, Op::Param(p) if p == name))
        });
        let mut store = ParamStore::new(0);
        for (n, g) in result {
            store.insert(n, g);
        }
        Ok(store)
    }

    /// Backward from a scalar output with unit seed.
    pub fn backward_scalar(&self, loss: Var) -> Result<ParamStore, TensorError> {
        self.backward(loss, Array::full(self.shape(loss), 1.0))
    }

    fn accumulate(&self, grads: &mut [Option<Array>], v: Var, g: Array) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_op(&self, op: &Op, y: &Array, g: &Array, grads: &mut [Option<Array>]) -> Result<(), TensorError> {
        match *op {
            Op::Constant | Op::Param(_) => {}
            Op::Conv2d { x, w, b, win } => {
                let xv = self.value(x);
                let plane = nhwc("conv2d", xv)?;
                let [_, oh, ow, cout] = y.shape()[..] else { unreachable!() };
                let geom = ConvGeom { big: plane, small: Plane { h: oh, w: ow, c: cout, ..plane }, win };
                if self.needs(w) {
                    let dw = kernels::conv_grad_w(geom, xv.data(), g.data());
                    self.accumulate(grads, w, Array::from_vec(self.shape(w), dw)?);
                }
                if self.needs(x) {
                    let dx = kernels::conv_grad_x(geom, g.data(), self.value(w).data());
                    self.accumulate(grads, x, Array::from_vec(xv.shape(), dx)?);
                }
                if self.needs(b) {
                    self.accumulate(grads, b, channel_sum(g.data(), cout));
                }
            }
            Op::ConvTranspose2d { x, w, b, win } => {
                let xv = self.value(x);
                let plane = nhwc("conv_transpose2d", xv)?;
                let [_, oh, ow, cout] = y.shape()[..] else { unreachable!() };
                let geom = ConvGeom { big: Plane { h: oh, w: ow, c: cout, ..plane }, small: plane, win };
                if self.needs(x) {
                    let zero = vec![0.0f32; plane.c];
                    let dx = kernels::conv_forward(geom, g.data(), self.value(w).data(), &zero);
                    self.accumulate(grads, x, Array::from_vec(xv.shape(), dx)?);
                }
                if self.needs(w) {
                    let dw = kernels::conv_grad_w(geom, g.data(), xv.data());
                    self.accumulate(grads, w, Array::from_vec(self.shape(w), dw)?);
                }
                if self.needs(b) {
                    self.accumulate(grads, b, channel_sum(g.data(), cout));
                }
            }
            Op::Dense { x, w, b } => {
                let xv = self.value(x);
                let [n, fin] = xv.shape()[..] else { unreachable!() };
                let fout = y.shape()[1];
                if self.needs(w) {
                    let mut dw = vec![0.0f32; fin * fout];
                    kernels::gemm_tn(n, fin, fout, xv.data(), g.data(), &mut dw, false);
                    self.accumulate(grads, w, Array::from_vec(&[fin, fout], dw)?);
                }
                if self.needs(x) {
                    let mut dx = vec![0.0f32; n * fin];
                    kernels::gemm_nt(n, fout, fin, g.data(), self.value(w).data(), &mut dx, false);
                    self.accumulate(grads, x, Array::from_vec(&[n, fin], dx)?);
                }
                if self.needs(b) {
                    self.accumulate(grads, b, channel_sum(g.data(), fout));
                }
            }
            Op::LeakyRelu { x, slope } => {
                #[cfg(test)]
                let slope = if self.fault == Some(Fault::LeakyReluSlope) { 2.0 * slope + 0.5 } else { slope };
                let dx = self.value(x).zip_map(g, |v, gv| if v > 0.0 { gv } else { slope * gv })?;
                self.accumulate(grads, x, dx);
            }
            Op::Sigmoid { x } => {
                let dx = y.zip_map(g, |s, gv| gv * s * (1.0 - s))?;
                self.accumulate(grads, x, dx);
            }
            Op::Upsample2x { x } => {
                let plane = nhwc("upsample2x", self.value(x))?;
                let dx = kernels::upsample2x_adjoint(g.data(), plane);
                self.accumulate(grads, x, Array::from_vec(self.shape(x), dx)?);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.scale(-1.0));
            }
            Op::Mul { a, b } => {
                if self.needs(a) {
                    self.accumulate(grads, a, g.zip_map(self.value(b), |gv, bv| gv * bv)?);
                }
                if self.needs(b) {
                    self.accumulate(grads, b, g.zip_map(self.value(a), |gv, av| gv * av)?);
                }
            }
            Op::Scale { x, k } => self.accumulate(grads, x, g.scale(k)),
            Op::ConcatChannels { a, b } => {
                let ca = *self.shape(a).last().unwrap();
                let cb = *self.shape(b).last().unwrap();
                let mut ga = Vec::with_capacity(self.value(a).len());
                let mut gb = Vec::with_capacity(self.value(b).len());
                for px in g.data().chunks(ca + cb) {
                    ga.extend_from_slice(&px[..ca]);
                    gb.extend_from_slice(&px[ca..]);
                }
                self.accumulate(grads, a, Array::from_vec(self.shape(a), ga)?);
                self.accumulate(grads, b, Array::from_vec(self.shape(b), gb)?);
            }
            Op::Reshape { x } => self.accumulate(grads, x, g.clone().reshape(self.shape(x))?),
            Op::Mean { x } => {
                let n = self.value(x).len().max(1) as f32;
                self.accumulate(grads, x, Array::full(self.shape(x), g.item() / n));
            }
            Op::Mse { a, b } => {
                let n = self.value(a).len().max(1) as f32;
                let k = 2.0 * g.item() / n;
                let diff = self.value(a).zip_map(self.value(b), |x, y| k * (x - y))?;
                if self.needs(b) {
                    self.accumulate(grads, b, diff.scale(-1.0));
                }
                self.accumulate(grads, a, diff);
            }
            Op::Pearson { a, b, ref valid } => {
                let [n, d] = self.shape(a)[..] else { unreachable!() };
                let nvalid = valid.iter().filter(|&&v| v).count();
                let (da, db) = (self.value(a).data(), self.value(b).data());
                let mut ga = vec![0.0f32; n * d];
                let mut gb = vec![0.0f32; n * d];
                if nvalid > 0 {
                    let stats = pearson_columns(da, db, n, d);
                    let k = g.item() as f64 / nvalid as f64;
                    for (j, s) in stats.iter().enumerate() {
                        let Some(s) = s else { continue };
                        let ab = s.sa * s.sb;
                        for i in 0..n {
                            let ca = da[i * d + j] as f64 - s.ma;
                            let cb = db[i * d + j] as f64 - s.mb;
                            ga[i * d + j] = (k * (cb / ab - s.r * ca / (s.sa * s.sa))) as f32;
                            gb[i * d + j] = (k * (ca / ab - s.r * cb / (s.sb * s.sb))) as f32;
                        }
                    }
                }
                self.accumulate(grads, a, Array::from_vec(&[n, d], ga)?);
                self.accumulate(grads, b, Array::from_vec(&[n, d], gb)?);
            }
            Op::BceLogits { x, ref targets } => {
                let k = g.item() / targets.len().max(1) as f32;
                let xv = self.value(x);
                let dx = xv.data().iter().zip(targets).map(|(&l, &y)| k * (sigmoid(l) - y)).collect();
                self.accumulate(grads, x, Array::from_vec(xv.shape(), dx)?);
            }
        }
        Ok(())
    }
}

impl Tape {
    /// Re-evaluates the recorded graph up to `out` in double precision,
    /// optionally shifting element `index` of parameter `name` by `delta`.
    ///
    /// This is the finite-difference oracle: it shares only the index
    /// kernels with the `f32` path, not the arithmetic.
    /// Recomputes `out` in `f64`, optionally shifting one parameter entry.
    /// Also returns a hash of which side of zero every leaky-ReLU input fell on.
    pub(crate) fn replay_f64(&self, out: Var, shift: Option<(&str, usize, f64)>) -> (Vec<f64>, u64) {
        let mut vals: Vec<Vec<f64>> = Vec::with_capacity(out.0 + 1);
        let mut signs = 0xcbf2_9ce4_8422_2325u64;
        for node in &self.nodes[..=out.0] {
            let f64s = |a: &Array| a.data().iter().map(|&v| v as f64).collect::<Vec<f64>>();
            let shape = node.value.shape();
            let v = match &node.op {
                Op::Constant => f64s(&node.value),
                Op::Param(name) => {
                    let mut v = f64s(&node.value);
                    if let Some((n, i, d)) = shift {
                        if n == name {
                            v[i] += d;
                        }
                    }
                    v
                }
                &Op::Conv2d { x, w, b, win } => {
                    let [n, h, wd, c] = self.shape(x)[..] else { unreachable!() };
                    let [_, oh, ow, cout] = shape[..] else { unreachable!() };
                    let cols = kernels::im2col(&vals[x.0], Plane { n, h, w: wd, c }, win, oh, ow);
                    let m = n * oh * ow;
                    let mut y: Vec<f64> = (0..m).flat_map(|_| vals[b.0].iter().copied()).collect();
                    kernels::dgemm(m, win.kernel * win.kernel * c, cout, &cols, &vals[w.0], false, &mut y);
                    y
                }
                &Op::ConvTranspose2d { x, w, b, win } => {
                    let [n, h, wd, cin] = self.shape(x)[..] else { unreachable!() };
                    let [_, oh, ow, cout] = shape[..] else { unreachable!() };
                    let kk = win.kernel * win.kernel * cout;
                    let m = n * h * wd;
                    let mut cols = vec![0.0f64; m * kk];
                    kernels::dgemm(m, cin, kk, &vals[x.0], &vals[w.0], true, &mut cols);
                    let mut y = kernels::col2im(&cols, Plane { n, h: oh, w: ow, c: cout }, win, h, wd);
                    for px in y.chunks_mut(cout) {
                        for (o, bv) in px.iter_mut().zip(&vals[b.0]) {
                            *o += bv;
                        }
                    }
                    y
                }
                &Op::Dense { x, w, b } => {
                    let [n, fin] = self.shape(x)[..] else { unreachable!() };
                    let fout = shape[1];
                    let mut y: Vec<f64> = (0..n).flat_map(|_| vals[b.0].iter().copied()).collect();
                    kernels::dgemm(n, fin, fout, &vals[x.0], &vals[w.0], false, &mut y);
                    y
                }
                &Op::LeakyRelu { x, slope } => {
                    for &v in &vals[x.0] {
                        signs = (signs ^ (v > 0.0) as u64).wrapping_mul(0x0100_0000_01b3);
                    }
                    vals[x.0].iter().map(|&v| if v > 0.0 { v } else { slope as f64 * v }).collect()
                }
                &Op::Sigmoid { x } => vals[x.0].iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect(),
                &Op::Upsample2x { x } => {
                    let [n, h, w, c] = self.shape(x)[..] else { unreachable!() };
                    kernels::upsample2x(&vals[x.0], Plane { n, h, w, c })
                }
                &Op::Add { a, b } => vals[a.0].iter().zip(&vals[b.0]).map(|(x, y)| x + y).collect(),
                &Op::Sub { a, b } => vals[a.0].iter().zip(&vals[b.0]).map(|(x, y)| x - y).collect(),
                &Op::Mul { a, b } => vals[a.0].iter().zip(&vals[b.0]).map(|(x, y)| x * y).collect(),
                &Op::Scale { x, k } => vals[x.0].iter().map(|v| v * k as f64).collect(),
                &Op::ConcatChannels { a, b } => {
                    let ca = *self.shape(a).last().unwrap();
                    let cb = *self.shape(b).last().unwrap();
                    vals[a.0]
                        .chunks(ca)
                        .zip(vals[b.0].chunks(cb))
                        .flat_map(|(ra, rb)| ra.iter().chain(rb).copied())
                        .collect()
                }
                &Op::Reshape { x } => vals[x.0].clone(),
                &Op::Mean { x } => {
                    let v = &vals[x.0];
                    vec![v.iter().sum::<f64>() / v.len().max(1) as f64]
                }
                &Op::Mse { a, b } => {
                    let (va, vb) = (&vals[a.0], &vals[b.0]);
                    vec![va.iter().zip(vb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / va.len().max(1) as f64]
                }
                &Op::Pearson { a, b, .. } => {
                    let [n, d] = self.shape(a)[..] else { unreachable!() };
                    let stats = pearson_columns(&vals[a.0], &vals[b.0], n, d);
                    let rs: Vec<f64> = stats.iter().flatten().map(|s| s.r).collect();
                    vec![if rs.is_empty() { 0.0 } else { rs.iter().sum::<f64>() / rs.len() as f64 }]
                }
                Op::BceLogits { x, targets } => {
                    let s: f64 = vals[x.0].iter().zip(targets).map(|(&l, &y)| bce_term(l, y as f64)).sum();
                    vec![s / targets.len().max(1) as f64]
                }
            };
            vals.push(v);
        }
        (vals.pop().unwrap_or_default(), signs)
    }
}

pub(crate) fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `softplus(l) − y·l`, stable for large `|l|`.
fn bce_term(l: f64, y: f64) -> f64 {
    l.max(0.0) + (-l.abs()).exp().ln_1p() - y * l
}

fn mean_f64(d: &[f32]) -> f64 {
    d.iter().map(|&v| v as f64).sum::<f64>() / d.len().max(1) as f64
}

fn channel_sum(g: &[f32], c: usize) -> Array {
    let mut acc = vec![0.0f32; c];
    for row in g.chunks(c) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    Array::from_vec(&[c], acc).expect("channel count")
}

struct ColumnStats {
    ma: f64,
    mb: f64,
    sa: f64,
    sb: f64,
    r: f64,
}

/// Variances below this are treated as zero.
const PEARSON_MIN_VAR: f64 = 1e-12;

fn pearson_columns<T: Copy + Into<f64>>(a: &[T], b: &[T], n: usize, d: usize) -> Vec<Option<ColumnStats>> {
    (0..d)
        .map(|j| {
            let col = |x: &[T], i: usize| -> f64 { x[i * d + j].into() };
            let ma = (0..n).map(|i| col(a, i)).sum::<f64>() / n as f64;
            let mb = (0..n).map(|i| col(b, i)).sum::<f64>() / n as f64;
            let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
            for i in 0..n {
                let (x, y) = (col(a, i) - ma, col(b, i) - mb);
                saa += x * x;
                sbb += y * y;
                sab += x * y;
            }
            if saa / (n as f64) <= PEARSON_MIN_VAR || sbb / (n as f64) <= PEARSON_MIN_VAR {
                return None;
            }
            let (sa, sb) = (saa.sqrt(), sbb.sqrt());
            Some(ColumnStats { ma, mb, sa, sb, r: (sab / (sa * sb)).clamp(-1.0, 1.0) })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(shape: &[usize], data: &[f32]) -> Array {
        Array::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_1x1_conv_is_identity() {
        let mut t = Tape::new();
        let x = Array::from_fn(&[2, 3, 4, 3], |i| i as f32 * 0.1 - 1.0);
        let mut w = Array::zeros(&[1, 1, 3, 3]);
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        let xv = t.constant(x.clone());
        let wv = t.constant(w);
        let bv = t.constant(Array::zeros(&[3]));
        let y = t.conv2d(xv, wv, bv, 1, 0).unwrap();
        assert_eq!(t.value(y), &x);
    }

    #[test]
    fn ones_conv_counts_window_taps() {
        let mut t = Tape::new();
        let x = t.constant(Array::full(&[1, 5, 5, 1], 1.0));
        let w = t.constant(Array::full(&[3, 3, 1, 1], 1.0));
        let b = t.constant(Array::zeros(&[1]));
        let y = t.conv2d(x, w, b, 1, 1).unwrap();
        let v = t.value(y);
        assert_eq!(v.shape(), &[1, 5, 5, 1]);
        assert_eq!(v.data()[0], 4.0);
        assert_eq!(v.data()[2 * 5 + 2], 9.0);
        assert_eq!(v.data()[5 + 1], 9.0);
        assert_eq!(v.data()[24], 4.0);
        assert_eq!(v.data()[2], 6.0);
    }

    #[test]
    fn strided_conv_halves_spatial_size() {
        let mut t = Tape::new();
        let x = t.constant(Array::zeros(&[1, 64, 64, 1]));
        let w = t.constant(Array::zeros(&[4, 4, 1, 32]));
        let b = t.constant(Array::zeros(&[32]));
        let y = t.conv2d(x, w, b, 2, 1).unwrap();
        assert_eq!(t.shape(y), &[1, 32, 32, 32]);
    }

    #[test]
    fn conv_shape_errors_are_structured() {
        let mut t = Tape::new();
        let x = t.constant(Array::zeros(&[1, 8, 8, 2]));
        let w = t.constant(Array::zeros(&[3, 3, 3, 4]));
        let b = t.constant(Array::zeros(&[4]));
        let err = t.conv2d(x, w, b, 1, 1).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { .. }), "{err}");
    }

    #[test]
    fn quadratic_loss_gradient_is_x() {
        // ½‖x‖² = ½·n·mse(x, 0)
        let mut t = Tape::new();
        let xs = arr(&[4], &[1.0, -2.0, 0.5, 3.0]);
        let x = t.param("x", xs.clone());
        let z = t.constant(Array::zeros(&[4]));
        let m = t.mse(x, z).unwrap();
        let loss = t.scale(m, 0.5 * 4.0);
        let g = t.backward_scalar(loss).unwrap();
        assert_eq!(g.get("x").unwrap(), &xs);
    }

    #[test]
    fn constant_loss_has_empty_gradient() {
        let mut t = Tape::new();
        let _p = t.param("p", Array::scalar(3.0));
        let c = t.constant(Array::scalar(2.0));
        let loss = t.mean(c);
        assert!(t.backward_scalar(loss).unwrap().is_empty());
    }

    #[test]
    fn shared_param_gradients_accumulate() {
        let mut t = Tape::new();
        let p = t.param("p", Array::scalar(3.0));
        let y = t.mul(p, p).unwrap();
        let g = t.backward_scalar(y).unwrap();
        assert_eq!(g.get("p").unwrap().item(), 6.0);
    }

    #[test]
    fn pearson_worked_example() {
        let mut t = Tape::new();
        let a = t.constant(arr(&[3, 2], &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]));
        let b = t.constant(arr(&[3, 2], &[1.0, 5.0, 2.0, 3.0, 3.0, 1.0]));
        let r = t.batch_pearson(a, b).unwrap();
        // columns: a=(1,2,3) b=(1,2,3) -> +1 ; a=(2,4,6) b=(5,3,1) -> -1
        assert!(t.value(r).item().abs() < 1e-7);
    }

    #[test]
    fn pearson_excludes_constant_columns() {
        let mut t = Tape::new();
        let a = t.constant(arr(&[3, 2], &[1.0, 7.0, 2.0, 7.0, 3.0, 7.0]));
        let b = t.constant(arr(&[3, 2], &[2.0, 1.0, 4.0, 2.0, 6.0, 3.0]));
        let r = t.batch_pearson(a, b).unwrap();
        assert!((t.value(r).item() - 1.0).abs() < 1e-6);

        let c = t.constant(Array::full(&[3, 2], 1.0));
        let r = t.batch_pearson(c, b).unwrap();
        assert_eq!(t.value(r).item(), 0.0);

        let one = t.constant(Array::zeros(&[1, 2]));
        assert!(matches!(t.batch_pearson(one, one), Err(TensorError::BatchTooSmall { .. })));
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, tconv(y)> with shared weights and zero bias.
        let win_x = Array::from_fn(&[2, 7, 7, 3], |i| ((i * 13 % 17) as f32 - 8.0) / 8.0);
        let w = Array::from_fn(&[3, 3, 3, 5], |i| ((i * 7 % 11) as f32 - 5.0) / 5.0);
        let mut t = Tape::new();
        let x = t.constant(win_x.clone());
        let wv = t.constant(w.clone());
        let b5 = t.constant(Array::zeros(&[5]));
        let cy = t.conv2d(x, wv, b5, 2, 1).unwrap();
        let yshape = t.shape(cy).to_vec();
        let yarr = Array::from_fn(&yshape, |i| ((i * 5 % 9) as f32 - 4.0) / 4.0);
        let yv = t.constant(yarr.clone());
        // conv weight [k,k,cin,cout] read as tconv weight [k,k,cout',cin'] with cout'=3, cin'=5
        let b3 = t.constant(Array::zeros(&[3]));
        let tx = t.conv_transpose2d(yv, wv, b3, 2, 1, (7, 7)).unwrap();
        let lhs: f32 = t.value(cy).data().iter().zip(yarr.data()).map(|(a, b)| a * b).sum();
        let rhs: f32 = win_x.data().iter().zip(t.value(tx).data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-3 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn bce_at_zero_logit_is_ln2() {
        let mut t = Tape::new();
        let x = t.param("x", arr(&[2, 1], &[0.0, 0.0]));
        let l = t.bce_with_logits(x, &[1.0, 0.0]).unwrap();
        assert!((t.value(l).item() - std::f32::consts::LN_2).abs() < 1e-6);
        let g = t.backward_scalar(l).unwrap();
        assert_eq!(g.get("x").unwrap().data(), &[-0.25, 0.25]);
    }
}
