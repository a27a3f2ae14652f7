//! Tape-based reverse-mode autodiff.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid topological order for gradient propagation.

use std::sync::Arc;

use super::gemm::{gemm, gemm_new, Layout};
use super::tensor::NdTensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    cout: usize,
    input: [usize; 3],
    output: [usize; 3],
    pad: usize,
}

impl ConvGeom {
    fn positions(&self) -> usize {
        self.output.iter().product()
    }

    fn rows(&self) -> usize {
        self.batch * self.positions()
    }

    fn patch_len(&self) -> usize {
        self.cin * 27
    }
}

enum Op {
    Leaf,
    Conv3d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Relu(Var),
    Concat(Vec<Var>),
    Sub(Var, Var),
    Reshape(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    MatMulConst {
        input: Var,
        rhs: Arc<NdTensor>,
    },
    Square(Var),
    Sum(Var),
    Mean(Var),
    Scale(Var, f64),
}

struct Node {
    value: NdTensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
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

    fn push(&mut self, value: NdTensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that collects gradients.
    pub fn param(&mut self, t: NdTensor) -> Var {
        self.push(t, true, Op::Leaf)
    }

    /// A constant leaf.
    pub fn constant(&mut self, t: NdTensor) -> Var {
        self.push(t, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &NdTensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].grad.take()
    }

    /// Clears accumulated gradients so `backward` may run again.
    pub fn reset(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    /// 3×3×3 cross-correlation, stride 1, zero padding `pad` ∈ {0, 1}.
    ///
    /// `x: [N, C_in, D, H, W]`, `weight: [C_out, C_in, 3, 3, 3]`, `bias: [C_out]`.
    pub fn conv3d(&mut self, x: Var, weight: Var, bias: Var, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 5 {
            return Err(Error::Shape(format!("conv3d input must be 5-D, got {xs:?}")));
        }
        if ws.len() != 5 || ws[2..] != [3, 3, 3] {
            return Err(Error::Shape(format!("conv3d kernel must be [Co,Ci,3,3,3], got {ws:?}")));
        }
        if ws[1] != xs[1] {
            return Err(Error::Shape(format!(
                "conv3d channel mismatch: input has {}, kernel expects {}",
                xs[1], ws[1]
            )));
        }
        if self.shape(bias) != [ws[0]] {
            return Err(Error::Shape(format!("conv3d bias must be [{}]", ws[0])));
        }
        if pad > 1 {
            return Err(Error::Invalid(format!("conv3d padding {pad} unsupported")));
        }
        let mut output = [0; 3];
        for k in 0..3 {
            let span = xs[2 + k] + 2 * pad;
            if span < 3 {
                return Err(Error::Shape(format!(
                    "conv3d spatial dims {:?} smaller than the kernel",
                    &xs[2..]
                )));
            }
            output[k] = span - 2;
        }
        let geom = ConvGeom {
            batch: xs[0],
            cin: xs[1],
            cout: ws[0],
            input: [xs[2], xs[3], xs[4]],
            output,
            pad,
        };

        let mut cols = im2col(self.value(x).data(), &geom);
        let rows = geom.rows();
        let kk = geom.patch_len();
        let tmp = gemm_new(
            rows,
            kk,
            geom.cout,
            &cols,
            Layout::row_major(kk),
            self.value(weight).data(),
            Layout::transposed(kk),
        );
        let p = geom.positions();
        let b = self.value(bias).data();
        let mut out = vec![0.0; rows * geom.cout];
        for n in 0..geom.batch {
            for pos in 0..p {
                let r = n * p + pos;
                for co in 0..geom.cout {
                    out[(n * geom.cout + co) * p + pos] = tmp[r * geom.cout + co] + b[co];
                }
            }
        }
        let shape = vec![geom.batch, geom.cout, output[0], output[1], output[2]];
        let requires = self.needs(&[x, weight, bias]);
        if !requires {
            cols = Vec::new();
        }
        Ok(self.push(
            NdTensor::new(shape, out)?,
            requires,
            Op::Conv3d {
                input: x,
                weight,
                bias,
                geom,
                cols,
            },
        ))
    }

    /// `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| if a > 0.0 { a } else { 0.0 }).collect();
        let t = NdTensor::new(v.shape().to_vec(), data).expect("same shape");
        let r = self.needs(&[x]);
        self.push(t, r, Op::Relu(x))
    }

    /// Concatenation along axis 1.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?)
            .to_vec();
        if first.len() < 2 {
            return Err(Error::Shape("concat needs at least 2 axes".into()));
        }
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                return Err(Error::Shape(format!("concat of {first:?} and {s:?}")));
            }
            channels += s[1];
        }
        let inner: usize = first[2..].iter().product();
        let batch = first[0];
        let mut out = Vec::with_capacity(batch * channels * inner);
        for n in 0..batch {
            for &p in parts {
                let v = self.value(p);
                let c = v.shape()[1];
                out.extend_from_slice(&v.data()[n * c * inner..(n + 1) * c * inner]);
            }
        }
        let mut shape = first;
        shape[1] = channels;
        let r = self.needs(parts);
        Ok(self.push(NdTensor::new(shape, out)?, r, Op::Concat(parts.to_vec())))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "subtract {:?} - {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let t = NdTensor::new(self.shape(a).to_vec(), data)?;
        let r = self.needs(&[a, b]);
        Ok(self.push(t, r, Op::Sub(a, b)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        let r = self.needs(&[x]);
        Ok(self.push(t, r, Op::Reshape(x)))
    }

    /// `x·Wᵀ + b` with `x: [N, in]`, `weight: [out, in]`, `bias: [out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || self.shape(bias) != [ws[0]] {
            return Err(Error::Shape(format!(
                "linear with input {xs:?}, weight {ws:?}, bias {:?}",
                self.shape(bias)
            )));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; n * dout];
        for row in out.chunks_exact_mut(dout) {
            row.copy_from_slice(self.value(bias).data());
        }
        gemm(
            n,
            din,
            dout,
            self.value(x).data(),
            Layout::row_major(din),
            self.value(weight).data(),
            Layout::transposed(din),
            1.0,
            &mut out,
            Layout::row_major(dout),
        );
        let r = self.needs(&[x, weight, bias]);
        Ok(self.push(
            NdTensor::new(vec![n, dout], out)?,
            r,
            Op::Linear {
                input: x,
                weight,
                bias,
            },
        ))
    }

    /// `x·M` for a constant `M: [k, m]`.
    pub fn matmul_const(&mut self, x: Var, rhs: Arc<NdTensor>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ms = rhs.shape();
        if xs.len() != 2 || ms.len() != 2 || xs[1] != ms[0] {
            return Err(Error::Shape(format!("matmul {xs:?} x {ms:?}")));
        }
        let (n, k, m) = (xs[0], xs[1], ms[1]);
        let mut out = vec![0.0; n * m];
        gemm(
            n,
            k,
            m,
            self.value(x).data(),
            Layout::row_major(k),
            rhs.data(),
            Layout::row_major(m),
            0.0,
            &mut out,
            Layout::row_major(m),
        );
        let r = self.needs(&[x]);
        Ok(self.push(NdTensor::new(vec![n, m], out)?, r, Op::MatMulConst { input: x, rhs }))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = NdTensor::new(v.shape().to_vec(), v.data().iter().map(|a| a * a).collect())
            .expect("same shape");
        let r = self.needs(&[x]);
        self.push(t, r, Op::Square(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let r = self.needs(&[x]);
        self.push(NdTensor::scalar(s), r, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let r = self.needs(&[x]);
        self.push(NdTensor::scalar(s), r, Op::Mean(x))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let v = self.value(x);
        let t = NdTensor::new(v.shape().to_vec(), v.data().iter().map(|a| a * k).collect())
            .expect("same shape");
        let r = self.needs(&[x]);
        self.push(t, r, Op::Scale(x, k))
    }

    /// Accumulates d(loss)/d(node) into every node that requires gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Autodiff(
                "backward called twice without reset".into(),
            ));
        }
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::Autodiff(format!(
                "loss must be a scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Err(Error::Autodiff("loss is not connected to any parameter".into()));
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = node.grad.as_deref() else {
                continue;
            };
            propagate(before, node, g);
        }
        self.backward_done = true;
        Ok(())
    }
}

fn slot<'a>(nodes: &'a mut [Node], v: Var) -> Option<&'a mut [f64]> {
    let n = &mut nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    let len = n.value.len();
    Some(n.grad.get_or_insert_with(|| vec![0.0; len]))
}

fn propagate(before: &mut [Node], node: &Node, g: &[f64]) {
    match &node.op {
        Op::Leaf => {}
        Op::Relu(x) => {
            let xv = before[x.0].value.data().to_vec();
            if let Some(dx) = slot(before, *x) {
                for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(&xv) {
                    if xi > 0.0 {
                        *d += gi;
                    }
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(da) = slot(before, *a) {
                da.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
            }
            if let Some(db) = slot(before, *b) {
                db.iter_mut().zip(g).for_each(|(d, gi)| *d -= gi);
            }
        }
        Op::Reshape(x) => {
            if let Some(dx) = slot(before, *x) {
                dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
            }
        }
        Op::Square(x) => {
            let xv = before[x.0].value.data().to_vec();
            if let Some(dx) = slot(before, *x) {
                for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(&xv) {
                    *d += 2.0 * xi * gi;
                }
            }
        }
        Op::Sum(x) => {
            if let Some(dx) = slot(before, *x) {
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean(x) => {
            if let Some(dx) = slot(before, *x) {
                let k = g[0] / dx.len() as f64;
                dx.iter_mut().for_each(|d| *d += k);
            }
        }
        Op::Scale(x, k) => {
            if let Some(dx) = slot(before, *x) {
                dx.iter_mut().zip(g).for_each(|(d, gi)| *d += k * gi);
            }
        }
        Op::Concat(parts) => {
            let shape = node.value.shape();
            let inner: usize = shape[2..].iter().product();
            let total = shape[1];
            let batch = shape[0];
            let mut offset = 0;
            for p in parts {
                let c = before[p.0].value.shape()[1];
                if let Some(dp) = slot(before, *p) {
                    for n in 0..batch {
                        let src = &g[(n * total + offset) * inner..(n * total + offset + c) * inner];
                        let dst = &mut dp[n * c * inner..(n + 1) * c * inner];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                }
                offset += c;
            }
        }
        Op::Linear {
            input,
            weight,
            bias,
        } => {
            let xs = before[input.0].value.shape().to_vec();
            let (n, din) = (xs[0], xs[1]);
            let dout = before[weight.0].value.shape()[0];
            let w = before[weight.0].value.data().to_vec();
            let x = before[input.0].value.data().to_vec();
            if let Some(dx) = slot(before, *input) {
                gemm(n, dout, din, g, Layout::row_major(dout), &w, Layout::row_major(din), 1.0, dx, Layout::row_major(din));
            }
            if let Some(dw) = slot(before, *weight) {
                gemm(dout, n, din, g, Layout::transposed(dout), &x, Layout::row_major(din), 1.0, dw, Layout::row_major(din));
            }
            if let Some(db) = slot(before, *bias) {
                for row in g.chunks_exact(dout) {
                    db.iter_mut().zip(row).for_each(|(d, gi)| *d += gi);
                }
            }
        }
        Op::MatMulConst { input, rhs } => {
            let (k, m) = (rhs.shape()[0], rhs.shape()[1]);
            if let Some(dx) = slot(before, *input) {
                let n = dx.len() / k;
                gemm(n, m, k, g, Layout::row_major(m), rhs.data(), Layout::transposed(m), 1.0, dx, Layout::row_major(k));
            }
        }
        Op::Conv3d {
            input,
            weight,
            bias,
            geom,
            cols,
        } => {
            let rows = geom.rows();
            let p = geom.positions();
            let kk = geom.patch_len();
            let co = geom.cout;
            // dY as [rows, C_out]
            let mut dy = vec![0.0; rows * co];
            for n in 0..geom.batch {
                for c in 0..co {
                    let src = &g[(n * co + c) * p..(n * co + c + 1) * p];
                    for (pos, &v) in src.iter().enumerate() {
                        dy[(n * p + pos) * co + c] = v;
                    }
                }
            }
            if let Some(dw) = slot(before, *weight) {
                gemm(co, rows, kk, &dy, Layout::transposed(co), cols, Layout::row_major(kk), 1.0, dw, Layout::row_major(kk));
            }
            if let Some(db) = slot(before, *bias) {
                for row in dy.chunks_exact(co) {
                    db.iter_mut().zip(row).for_each(|(d, gi)| *d += gi);
                }
            }
            if before[input.0].requires_grad {
                let w = before[weight.0].value.data();
                let dcols = gemm_new(rows, co, kk, &dy, Layout::row_major(co), w, Layout::row_major(kk));
                if let Some(dx) = slot(before, *input) {
                    col2im(&dcols, geom, dx);
                }
            }
        }
    }
}

/// Input offset within one channel of one sample for each (output position,
/// tap), or `usize::MAX` where the tap falls in the zero padding.
fn tap_table(geom: &ConvGeom) -> Vec<[usize; 27]> {
    let [d, h, w] = geom.input;
    let [od, oh, ow] = geom.output;
    let pad = geom.pad as isize;
    let inside = |i: isize, n: usize| i >= 0 && i < n as isize;
    let mut table = Vec::with_capacity(geom.positions());
    for oz in 0..od {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut t = [usize::MAX; 27];
                for (tap, slot) in t.iter_mut().enumerate() {
                    let iz = oz as isize + (tap / 9) as isize - pad;
                    let iy = oy as isize + (tap / 3 % 3) as isize - pad;
                    let ix = ox as isize + (tap % 3) as isize - pad;
                    if inside(iz, d) && inside(iy, h) && inside(ix, w) {
                        *slot = (iz as usize * h + iy as usize) * w + ix as usize;
                    }
                }
                table.push(t);
            }
        }
    }
    table
}

/// `[rows, C_in·27]` patch matrix, row = (sample, output position), column =
/// (input channel, tap). Written sequentially, padding included.
fn im2col(x: &[f64], geom: &ConvGeom) -> Vec<f64> {
    let table = tap_table(geom);
    let in_vol: usize = geom.input.iter().product();
    let mut cols = Vec::with_capacity(geom.rows() * geom.patch_len());
    for n in 0..geom.batch {
        for taps in &table {
            for ci in 0..geom.cin {
                let src = &x[(n * geom.cin + ci) * in_vol..(n * geom.cin + ci + 1) * in_vol];
                cols.extend(taps.iter().map(|&s| if s == usize::MAX { 0.0 } else { src[s] }));
            }
        }
    }
    cols
}

fn col2im(dcols: &[f64], geom: &ConvGeom, dx: &mut [f64]) {
    let table = tap_table(geom);
    let in_vol: usize = geom.input.iter().product();
    let mut rows = dcols.chunks_exact(27);
    for n in 0..geom.batch {
        for taps in &table {
            for ci in 0..geom.cin {
                let dst = &mut dx[(n * geom.cin + ci) * in_vol..(n * geom.cin + ci + 1) * in_vol];
                let src = rows.next().expect("dcols sized to the geometry");
                for (&s, &v) in taps.iter().zip(src) {
                    if s != usize::MAX {
                        dst[s] += v;
                    }
                }
            }
        }
    }
}
