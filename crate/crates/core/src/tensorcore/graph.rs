//! Tape-based reverse-mode differentiation over whole-tensor ops.
//!
//! Every op appends a node to the tape; `backward` walks the tape in reverse.
//! Leaf gradients accumulate across `backward` calls until `zero_grad`.

use std::collections::BTreeMap;

use super::kernels::{self, ConvGeom};
use super::tensor::{ParamStore, Tensor};
use crate::error::{invalid, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of an op defined outside this module.
///
/// `inputs` are the forward values in the order they were registered,
/// `needs[i]` tells whether input `i` wants a gradient. The returned vector
/// must have one entry per input; entries for inputs that need no gradient
/// may be `None`.
pub trait Backward {
    fn backward(
        &self,
        inputs: &[&Tensor],
        needs: &[bool],
        grad_out: &[f64],
    ) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        batch: usize,
        out_channels: usize,
    },
    Relu(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample2(Var),
    Concat {
        a: Var,
        b: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    ToInstances(Var),
    Reshape(Var),
    Sum(Var),
    Mul(Var, Var),
    Axpby {
        a: Var,
        wa: f64,
        b: Var,
        wb: f64,
    },
    Custom {
        inputs: Vec<Var>,
        vjp: Box<dyn Backward>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: BTreeMap<usize, Vec<f64>>,
    params: BTreeMap<String, Var>,
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let value = value.requires_grad(false);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Registers a leaf; it is differentiated iff `t.is_trainable()`.
    pub fn input(&mut self, t: Tensor) -> Var {
        let rg = t.is_trainable();
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Registers a named trainable leaf; repeated names return the same node.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(t.clone(), Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
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

    /// Accumulated gradient of a leaf, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(&v.0).map(Vec::as_slice)
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    /// Adds the graph's parameter gradients into the store's gradient slots.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for (name, v) in &self.params {
            if let Some(g) = self.leaf_grads.get(&v.0) {
                store.get_mut(name)?.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Appends an op whose backward pass is supplied by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, vjp: Box<dyn Backward>) -> Var {
        let rg = self.rg(inputs);
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                vjp,
            },
            rg,
        )
    }

    /// 2-D cross-correlation, stride 1. `weight` is `[K,C,k,k]` with `k` odd;
    /// `pad` must be `(k-1)/2` so spatial extents are preserved.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(mismatch("conv2d", &xs, &ws));
        }
        if bs != [ws[0]] {
            return Err(mismatch("conv2d bias", &bs, &ws));
        }
        let kernel = ws[2];
        if kernel % 2 == 0 || 2 * pad + 1 != kernel {
            return invalid(format!(
                "conv2d supports odd kernels with same padding; got kernel {kernel}, pad {pad}"
            ));
        }
        let geom = ConvGeom {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel,
            pad,
        };
        let (oh, ow) = geom.out_hw();
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            xs[0],
            geom,
            self.value(weight).data(),
            self.value(bias).data(),
            ws[0],
        );
        let value = Tensor::new(vec![xs[0], ws[0], oh, ow], out)?;
        let rg = self.rg(&[x, weight, bias]);
        Ok(self.push(
            value,
            Op::Conv {
                x,
                w: weight,
                b: bias,
                geom,
                batch: xs[0],
                out_channels: ws[0],
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    /// 2x2 max pooling with stride 2 over `[N,C,H,W]`; H and W must be even.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return invalid(format!("maxpool2 expects [N,C,H,W], got {s:?}"));
        }
        let (h, w) = (s[2], s[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return invalid(format!("maxpool2 needs even spatial extents, got {h}x{w}"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let planes = s[0] * s[1];
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let value = Tensor::new(vec![s[0], s[1], oh, ow], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, rg))
    }

    /// Nearest-neighbour 2x upsampling of `[N,C,H,W]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return invalid(format!("upsample2 expects [N,C,H,W], got {s:?}"));
        }
        let (h, w) = (s[2], s[3]);
        let src = self.value(x).data();
        let mut out = vec![0.0; s[0] * s[1] * 4 * h * w];
        for p in 0..s[0] * s[1] {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[p * 4 * h * w + y * 2 * w + xx] = src[p * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::new(vec![s[0], s[1], 2 * h, 2 * w], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Upsample2(x), rg))
    }

    /// Concatenates `[N,Ca,H,W]` and `[N,Cb,H,W]` along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(mismatch("concat_channels", &sa, &sb));
        }
        let plane = sa[2] * sa[3];
        let (la, lb) = (sa[1] * plane, sb[1] * plane);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(sa[0] * (la + lb));
        for n in 0..sa[0] {
            out.extend_from_slice(&da[n * la..(n + 1) * la]);
            out.extend_from_slice(&db[n * lb..(n + 1) * lb]);
        }
        let value = Tensor::new(vec![sa[0], sa[1] + sb[1], sa[2], sa[3]], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Concat { a, b }, rg))
    }

    /// `x[N,in] @ weight[out,in]^T + bias[out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(mismatch("linear", &xs, &ws));
        }
        if bs != [ws[0]] {
            return Err(mismatch("linear bias", &bs, &ws));
        }
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        let mut out = Vec::with_capacity(n * fout);
        for _ in 0..n {
            out.extend_from_slice(self.value(bias).data());
        }
        kernels::gemm(
            n,
            fin,
            fout,
            1.0,
            self.value(x).data(),
            (fin as isize, 1),
            self.value(weight).data(),
            (1, fin as isize),
            1.0,
            &mut out,
        );
        let value = Tensor::new(vec![n, fout], out)?;
        let rg = self.rg(&[x, weight, bias]);
        Ok(self.push(
            value,
            Op::Linear {
                x,
                w: weight,
                b: bias,
            },
            rg,
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return invalid(format!("softmax axis {axis} out of range for {s:?}"));
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len)
                    .map(|j| src[idx(j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[idx(j)] /= z;
                }
            }
        }
        let value = Tensor::new(s, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax { x, axis }, rg))
    }

    /// Rearranges feature maps `[N,C,H,W]` into instance sets `[N,H*W,C]`:
    /// each spatial position becomes one `C`-dimensional instance.
    pub fn to_instances(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return invalid(format!("to_instances expects [N,C,H,W], got {s:?}"));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for b in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    out[(b * hw + p) * c + ch] = src[(b * c + ch) * hw + p];
                }
            }
        }
        let value = Tensor::new(vec![n, hw, c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::ToInstances(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// `wa * a + wb * b` for same-shaped operands.
    pub fn axpby(&mut self, a: Var, wa: f64, b: Var, wb: f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("axpby", ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| wa * x + wb * y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Axpby { a, wa, b, wb }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.axpby(a, 1.0, b, 1.0)
    }

    /// Propagates `d loss / d node` from a scalar `loss` to every reachable
    /// differentiable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match self.leaf_grads.get_mut(&i) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        self.leaf_grads.insert(i, g);
                    }
                }
                continue;
            }
            for (var, contrib) in self.vjp(i, &g) {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn vjp(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv {
                x,
                w,
                b,
                geom,
                batch,
                out_channels,
            } => {
                let grads = kernels::conv2d_backward(
                    self.value(*x).data(),
                    *batch,
                    *geom,
                    self.value(*w).data(),
                    *out_channels,
                    g,
                    self.needs(*x),
                );
                let mut out = vec![(*w, grads.dw), (*b, grads.db)];
                if let Some(dx) = grads.dx {
                    out.push((*x, dx));
                }
                out
            }
            Op::Relu(x) => {
                let src = self.value(*x).data();
                let dx = src
                    .iter()
                    .zip(g)
                    .map(|(&v, &d)| if v > 0.0 { d } else { 0.0 })
                    .collect();
                vec![(*x, dx)]
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (&idx, &d) in argmax.iter().zip(g) {
                    dx[idx as usize] += d;
                }
                vec![(*x, dx)]
            }
            Op::Upsample2(x) => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let mut dx = vec![0.0; self.value(*x).numel()];
                for p in 0..s[0] * s[1] {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dx[p * h * w + (y / 2) * w + xx / 2] +=
                                g[p * 4 * h * w + y * 2 * w + xx];
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::Concat { a, b } => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let plane = sa[2] * sa[3];
                let (la, lb) = (sa[1] * plane, sb[1] * plane);
                let mut da = Vec::with_capacity(sa[0] * la);
                let mut db = Vec::with_capacity(sa[0] * lb);
                for n in 0..sa[0] {
                    let base = n * (la + lb);
                    da.extend_from_slice(&g[base..base + la]);
                    db.extend_from_slice(&g[base + la..base + la + lb]);
                }
                vec![(*a, da), (*b, db)]
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (n, fin) = (xs[0], xs[1]);
                let fout = out_shape[1];
                let mut out = Vec::with_capacity(3);
                let mut db = vec![0.0; fout];
                for row in g.chunks(fout) {
                    db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                out.push((*b, db));
                if self.needs(*w) {
                    // dW[out,in] = g[n,out]^T @ x[n,in]
                    let mut dw = vec![0.0; fout * fin];
                    kernels::gemm(
                        fout,
                        n,
                        fin,
                        1.0,
                        g,
                        (1, fout as isize),
                        self.value(*x).data(),
                        (fin as isize, 1),
                        0.0,
                        &mut dw,
                    );
                    out.push((*w, dw));
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; n * fin];
                    kernels::gemm(
                        n,
                        fout,
                        fin,
                        1.0,
                        g,
                        (fout as isize, 1),
                        self.value(*w).data(),
                        (fin as isize, 1),
                        0.0,
                        &mut dx,
                    );
                    out.push((*x, dx));
                }
                out
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(out_shape, *axis);
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| y[idx(j)] * g[idx(j)]).sum();
                        for j in 0..len {
                            dx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::ToInstances(x) => {
                let s = self.shape(*x);
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let mut dx = vec![0.0; g.len()];
                for b in 0..n {
                    for ch in 0..c {
                        for p in 0..hw {
                            dx[(b * c + ch) * hw + p] = g[(b * hw + p) * c + ch];
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Sum(x) => vec![(*x, vec![g[0]; self.value(*x).numel()])],
            Op::Mul(a, b) => {
                let (da_src, db_src) = (self.value(*a).data(), self.value(*b).data());
                let da = db_src.iter().zip(g).map(|(v, d)| v * d).collect();
                let db = da_src.iter().zip(g).map(|(v, d)| v * d).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::Axpby { a, wa, b, wb } => {
                vec![
                    (*a, g.iter().map(|d| wa * d).collect()),
                    (*b, g.iter().map(|d| wb * d).collect()),
                ]
            }
            Op::Custom { inputs, vjp } => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|v| self.needs(*v)).collect();
                vjp.backward(&values, &needs, g)
                    .into_iter()
                    .zip(inputs)
                    .filter_map(|(gr, v)| gr.map(|gr| (*v, gr)))
                    .collect()
            }
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::new();
        let x = g.input(t(&[3], &[1.0, -2.0, 5.0]).requires_grad(true));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[1.0, 2.0]).requires_grad(true));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
        // a second pass accumulates
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, 8.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[1.0, 2.0]).requires_grad(true));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn relu_and_maxpool_definitions() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[-1.0, 2.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 2.0]);
        let m = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.maxpool2(m).unwrap();
        assert_eq!(g.value(p).shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(p).data(), &[4.0]);
        let odd = g.constant(Tensor::zeros(&[1, 1, 3, 2]));
        assert!(g.maxpool2(odd).is_err());
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0.0, 0.0]));
        let s = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn upsample_and_concat_shapes() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1, 1, 1, 2], &[1.0, 2.0]));
        let u = g.upsample2(a).unwrap();
        assert_eq!(g.value(u).data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        let b = g.constant(Tensor::zeros(&[1, 3, 2, 4]));
        let c = g.concat_channels(u, b).unwrap();
        assert_eq!(g.shape(c), &[1, 4, 2, 4]);
        let bad = g.constant(Tensor::zeros(&[1, 3, 2, 2]));
        assert!(g.concat_channels(u, bad).is_err());
    }

    #[test]
    fn conv_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.constant(Tensor::zeros(&[3, 1, 3, 3]));
        let b = g.constant(Tensor::zeros(&[3]));
        let err = g.conv2d(x, w, b, 1).unwrap_err().to_string();
        assert!(
            err.contains("[1, 2, 4, 4]") && err.contains("[3, 1, 3, 3]"),
            "{err}"
        );
    }

    #[test]
    fn linear_matches_hand_product() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = g.constant(t(&[2, 2], &[1.0, 0.0, 1.0, 1.0]));
        let b = g.constant(t(&[2], &[0.5, -0.5]));
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.5, 2.5]);
    }

    #[test]
    fn params_flow_into_store() {
        let mut store = ParamStore::new();
        store.insert("w", t(&[2], &[3.0, 4.0])).unwrap();
        let mut g = Graph::new();
        let w = g.param("w", store.get("w").unwrap());
        assert_eq!(g.param("w", store.get("w").unwrap()), w);
        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        g.accumulate_into(&mut store).unwrap();
        assert_eq!(store.get("w").unwrap().grad().unwrap(), &[6.0, 8.0]);
    }
}
