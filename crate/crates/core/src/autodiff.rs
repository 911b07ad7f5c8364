//! Reverse-mode differentiation over a linear tape of primitive ops.
//!
//! Values are recorded in execution order; [`Tape::backward`] walks the
//! record in reverse, accumulating vector-Jacobian products into every node
//! that leads to a `requires_grad` leaf. The tape is consumed by a backward
//! pass, after which all outstanding [`Var`] handles are stale.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::tensor::{kernels, Activation, ConvGeom, Result, Tensor, TensorError};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, b_trans: bool, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    Reshape { a: Var },
    Affine { w: Var, b: Option<Var>, x: Var, batch: usize, n_in: usize, n_out: usize },
    Conv2d { kernel: Var, bias: Var, x: Var, geom: ConvGeom, cols: Vec<f64> },
    /// `slope` holds the activation derivative at each input, filled in
    /// only when a gradient will flow through.
    Activate { x: Var, slope: Vec<f64> },
    AvgPool { x: Var, spatial: usize },
    Softmax { x: Var, cols: usize },
    Mse { pred: Var, target: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: BTreeMap<Var, Tensor>,
}

impl Gradients {
    /// The leaf tensor with its `grad` populated.
    pub fn tensor(&self, var: Var) -> Option<&Tensor> {
        self.leaves.get(&var)
    }

    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.leaves.get(&var).and_then(|t| t.grad())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.leaves.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}

fn finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
        None => *slot = Some(delta),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, var: Var) -> Result<()> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(TensorError::Usage(
                "variable is not attached to this tape (stale after backward?)".into(),
            ));
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node { value, op, needs_grad });
        Var { tape: self.id, index }
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.index].needs_grad
    }

    pub fn value(&self, var: Var) -> Result<&Tensor> {
        self.check(var)?;
        Ok(&self.nodes[var.index].value)
    }

    /// Records an input or parameter. Gradients flow to it iff `requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs)
    }

    /// `a[m,k] * b[k,n]`, or `a * b^T` when `b_trans` (b is then `[n,k]`).
    pub fn matmul(&mut self, a: Var, b: Var, b_trans: bool) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.nodes[a.index].value.shape(), self.nodes[b.index].value.shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(TensorError::Shape {
                op: "matmul",
                expected: "rank-2 operands".into(),
                found: if sa.len() != 2 { sa.to_vec() } else { sb.to_vec() },
            });
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if b_trans { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(TensorError::Shape {
                op: "matmul",
                expected: format!("inner extent {k}"),
                found: sb.to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.nodes[a.index].value.data(),
            false,
            self.nodes[b.index].value.data(),
            b_trans,
            0.0,
            &mut out,
        );
        finite("matmul", &out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b, b_trans, m, k, n }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (&self.nodes[a.index].value, &self.nodes[b.index].value);
        if ta.shape() != tb.shape() {
            return Err(TensorError::Shape {
                op: "add",
                expected: format!("{:?}", ta.shape()),
                found: tb.shape().to_vec(),
            });
        }
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        finite("add", &out)?;
        let shape = ta.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add { a, b }, needs))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.check(a)?;
        let ta = &self.nodes[a.index].value;
        let out: Vec<f64> = ta.data().iter().map(|x| x * factor).collect();
        finite("scale", &out)?;
        let shape = ta.shape().to_vec();
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Scale { a, factor }, needs))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        self.check(a)?;
        let t = self.nodes[a.index].value.clone().reshape(shape)?;
        let t = Tensor::from_parts(t.shape().to_vec(), t.into_data());
        let needs = self.needs(a);
        Ok(self.push(t, Op::Reshape { a }, needs))
    }

    /// Dense layer `act(W x + b)` for `x` of shape `[n_in]` or `[batch, n_in]`.
    pub fn dense(&mut self, w: Var, b: Option<Var>, x: Var, act: Activation) -> Result<Var> {
        self.check(w)?;
        self.check(x)?;
        if let Some(b) = b {
            self.check(b)?;
        }
        let ws = self.nodes[w.index].value.shape().to_vec();
        let xs = self.nodes[x.index].value.shape().to_vec();
        if ws.len() != 2 {
            return Err(TensorError::Shape { op: "dense", expected: "rank-2 weight".into(), found: ws });
        }
        let (n_out, n_in) = (ws[0], ws[1]);
        let (batch, single) = match xs.as_slice() {
            [n] if *n == n_in => (1, true),
            [bt, n] if *n == n_in => (*bt, false),
            _ => {
                return Err(TensorError::Shape {
                    op: "dense",
                    expected: format!("input [{n_in}] or [batch, {n_in}] for weight {ws:?}"),
                    found: xs,
                })
            }
        };
        if let Some(b) = b {
            let bs = self.nodes[b.index].value.shape();
            if bs != [n_out] {
                return Err(TensorError::Shape {
                    op: "dense",
                    expected: format!("bias [{n_out}]"),
                    found: bs.to_vec(),
                });
            }
        }
        let out = kernels::affine(
            batch,
            n_in,
            n_out,
            self.nodes[w.index].value.data(),
            b.map(|b| self.nodes[b.index].value.data()),
            self.nodes[x.index].value.data(),
        );
        finite("dense", &out)?;
        let shape = if single { vec![n_out] } else { vec![batch, n_out] };
        let needs = self.needs(w) || self.needs(x) || b.is_some_and(|b| self.needs(b));
        let pre = self.push(
            Tensor::from_parts(shape, out),
            Op::Affine { w, b, x, batch, n_in, n_out },
            needs,
        );
        self.activation(pre, act)
    }

    /// Cross-correlation `act(K * x + b)` for `x` of shape `[c_in, h, w]` or `[batch, c_in, h, w]`.
    pub fn conv2d(
        &mut self,
        kernel: Var,
        bias: Var,
        x: Var,
        stride: usize,
        padding: usize,
        act: Activation,
    ) -> Result<Var> {
        self.check(kernel)?;
        self.check(bias)?;
        self.check(x)?;
        let ks = self.nodes[kernel.index].value.shape().to_vec();
        let xs = self.nodes[x.index].value.shape().to_vec();
        if ks.len() != 4 || ks[2] != ks[3] {
            return Err(TensorError::Shape {
                op: "conv2d",
                expected: "kernel [c_out, c_in, k, k]".into(),
                found: ks,
            });
        }
        let (batch, single, c_in, h, w) = match xs.as_slice() {
            [c, h, w] => (1, true, *c, *h, *w),
            [b, c, h, w] => (*b, false, *c, *h, *w),
            _ => {
                return Err(TensorError::Shape {
                    op: "conv2d",
                    expected: "input [c_in, h, w] or [batch, c_in, h, w]".into(),
                    found: xs,
                })
            }
        };
        if c_in != ks[1] {
            return Err(TensorError::Shape {
                op: "conv2d",
                expected: format!("{} input channels for kernel {ks:?}", ks[1]),
                found: xs,
            });
        }
        let bs = self.nodes[bias.index].value.shape();
        if bs != [ks[0]] {
            return Err(TensorError::Shape {
                op: "conv2d",
                expected: format!("bias [{}]", ks[0]),
                found: bs.to_vec(),
            });
        }
        let geom = ConvGeom { batch, c_in, h, w, c_out: ks[0], k: ks[2], stride, padding };
        geom.validate()?;
        let (out, cols) = kernels::conv2d(
            &geom,
            self.nodes[kernel.index].value.data(),
            self.nodes[bias.index].value.data(),
            self.nodes[x.index].value.data(),
        );
        finite("conv2d", &out)?;
        let shape = if single {
            vec![geom.c_out, geom.out_h(), geom.out_w()]
        } else {
            vec![batch, geom.c_out, geom.out_h(), geom.out_w()]
        };
        let needs = self.needs(kernel) || self.needs(bias) || self.needs(x);
        // The unfolded input is only needed for the kernel gradient.
        let cols = if self.needs(kernel) { cols } else { Vec::new() };
        let pre = self.push(
            Tensor::from_parts(shape, out),
            Op::Conv2d { kernel, bias, x, geom, cols },
            needs,
        );
        self.activation(pre, act)
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Result<Var> {
        self.check(x)?;
        if act == Activation::Identity {
            return Ok(x);
        }
        let t = &self.nodes[x.index].value;
        let needs = self.needs(x);
        let (out, slope): (Vec<f64>, Vec<f64>) = if needs {
            t.data().iter().map(|&v| act.apply_with_derivative(v)).unzip()
        } else {
            (t.data().iter().map(|&v| act.apply(v)).collect(), Vec::new())
        };
        finite("activation", &out)?;
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Activate { x, slope }, needs))
    }

    /// Global average pool `[batch, c, h, w] -> [batch, c, 1, 1]`.
    pub fn avg_pool(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = &self.nodes[x.index].value;
        let s = t.shape().to_vec();
        if s.len() != 4 {
            return Err(TensorError::Shape { op: "avg_pool", expected: "[batch, c, h, w]".into(), found: s });
        }
        let spatial = s[2] * s[3];
        let out = kernels::global_avg_pool(s[0] * s[1], spatial, t.data());
        let needs = self.needs(x);
        Ok(self.push(Tensor::from_parts(vec![s[0], s[1], 1, 1], out), Op::AvgPool { x, spatial }, needs))
    }

    /// `[batch, ...] -> [batch, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.nodes[x.index].value.shape().to_vec();
        if s.is_empty() {
            return Err(TensorError::Shape { op: "flatten", expected: "rank >= 1".into(), found: s });
        }
        let rest: usize = s[1..].iter().product();
        self.reshape(x, vec![s[0], rest])
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = &self.nodes[x.index].value;
        let cols = *t.shape().last().ok_or_else(|| TensorError::Shape {
            op: "softmax",
            expected: "rank >= 1".into(),
            found: vec![],
        })?;
        let out = kernels::softmax_rows(cols, t.data());
        finite("softmax", &out)?;
        let shape = t.shape().to_vec();
        let needs = self.needs(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x, cols }, needs))
    }

    /// Mean over all elements of `(pred - target)^2`.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.check(pred)?;
        self.check(target)?;
        let (p, t) = (&self.nodes[pred.index].value, &self.nodes[target.index].value);
        if p.shape() != t.shape() {
            return Err(TensorError::Shape {
                op: "mse",
                expected: format!("{:?}", p.shape()),
                found: t.shape().to_vec(),
            });
        }
        let loss = mse_value(p.data(), t.data());
        finite("mse", &[loss])?;
        let needs = self.needs(pred) || self.needs(target);
        Ok(self.push(Tensor::scalar(loss), Op::Mse { pred, target }, needs))
    }

    /// Populates the gradient of `loss` with respect to every `requires_grad`
    /// leaf and consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        if self.nodes[loss.index].value.numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.index].value.shape()
            )));
        }
        let nodes = std::mem::take(&mut self.nodes);
        self.id = NEXT_TAPE.fetch_add(1, Ordering::Relaxed);

        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.index] = Some(vec![1.0]);
        for i in (0..=loss.index).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            propagate(&nodes, node, &g, &mut grads);
        }

        let mut out = Gradients::default();
        for (i, node) in nodes.into_iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                let mut t = node.value;
                let g = grads[i].take().unwrap_or_else(|| vec![0.0; t.numel()]);
                finite("backward", &g)?;
                t.set_grad(g);
                out.leaves.insert(Var { tape: loss.tape, index: i }, t);
            }
        }
        Ok(out)
    }
}

pub(crate) fn mse_value(pred: &[f64], target: &[f64]) -> f64 {
    let sum: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    sum / pred.len() as f64
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let needs = |v: Var| nodes[v.index].needs_grad;
    let val = |v: Var| &nodes[v.index].value;
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, b_trans, m, k, n } => {
            if needs(a) {
                // dA = G * B^T  (or G * B when B was used transposed)
                let mut da = vec![0.0; m * k];
                kernels::gemm(m, n, k, g, false, val(b).data(), !b_trans, 0.0, &mut da);
                accumulate(&mut grads[a.index], da);
            }
            if needs(b) {
                let mut db = vec![0.0; k * n];
                if b_trans {
                    // d(B) with B [n,k]: G^T * A
                    kernels::gemm(n, m, k, g, true, val(a).data(), false, 0.0, &mut db);
                } else {
                    kernels::gemm(k, m, n, val(a).data(), true, g, false, 0.0, &mut db);
                }
                accumulate(&mut grads[b.index], db);
            }
        }
        &Op::Add { a, b } => {
            if needs(a) {
                accumulate(&mut grads[a.index], g.to_vec());
            }
            if needs(b) {
                accumulate(&mut grads[b.index], g.to_vec());
            }
        }
        &Op::Scale { a, factor } => {
            if needs(a) {
                accumulate(&mut grads[a.index], g.iter().map(|v| v * factor).collect());
            }
        }
        &Op::Reshape { a } => {
            if needs(a) {
                accumulate(&mut grads[a.index], g.to_vec());
            }
        }
        &Op::Affine { w, b, x, batch, n_in, n_out } => {
            if needs(w) {
                let mut dw = vec![0.0; n_out * n_in];
                kernels::gemm(n_out, batch, n_in, g, true, val(x).data(), false, 0.0, &mut dw);
                accumulate(&mut grads[w.index], dw);
            }
            if let Some(b) = b.filter(|b| needs(*b)) {
                let mut db = vec![0.0; n_out];
                for row in g.chunks(n_out) {
                    db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                }
                accumulate(&mut grads[b.index], db);
            }
            if needs(x) {
                let mut dx = vec![0.0; batch * n_in];
                kernels::gemm(batch, n_out, n_in, g, false, val(w).data(), false, 0.0, &mut dx);
                accumulate(&mut grads[x.index], dx);
            }
        }
        Op::Conv2d { kernel, bias, x, geom, cols } => {
            let want_dx = needs(*x);
            if !(needs(*kernel) || needs(*bias) || want_dx) {
                return;
            }
            let (dk, db, dx) = kernels::conv2d_backward(geom, val(*kernel).data(), cols, g, needs(*kernel), want_dx);
            if let Some(dk) = dk {
                accumulate(&mut grads[kernel.index], dk);
            }
            if needs(*bias) {
                accumulate(&mut grads[bias.index], db);
            }
            if let Some(dx) = dx {
                accumulate(&mut grads[x.index], dx);
            }
        }
        Op::Activate { x, slope } => {
            let x = *x;
            if needs(x) {
                let dx = slope.iter().zip(g).map(|(&d, &gv)| gv * d).collect();
                accumulate(&mut grads[x.index], dx);
            }
        }
        &Op::AvgPool { x, spatial } => {
            if needs(x) {
                let inv = 1.0 / spatial as f64;
                let mut dx = Vec::with_capacity(g.len() * spatial);
                for &gv in g {
                    dx.extend(std::iter::repeat(gv * inv).take(spatial));
                }
                accumulate(&mut grads[x.index], dx);
            }
        }
        &Op::Softmax { x, cols } => {
            if needs(x) {
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(cols).zip(g.chunks(cols)).zip(dx.chunks_mut(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(&mut grads[x.index], dx);
            }
        }
        &Op::Mse { pred, target } => {
            let (p, t) = (val(pred).data(), val(target).data());
            let c = 2.0 * g[0] / p.len() as f64;
            if needs(pred) {
                accumulate(&mut grads[pred.index], p.iter().zip(t).map(|(a, b)| c * (a - b)).collect());
            }
            if needs(target) {
                accumulate(&mut grads[target.index], p.iter().zip(t).map(|(a, b)| c * (b - a)).collect());
            }
        }
    }
}
