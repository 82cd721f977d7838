//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles in
//! creation order, which is already a topological order. [`Graph::backward`]
//! walks the tape in reverse with transient adjoint buffers and adds the
//! result into the gradient of every leaf that requires one. Repeated calls
//! accumulate until [`Graph::zero_grad`].
//!
//! Model parameters enter the graph by reference ([`Graph::param`]) so a
//! forward pass never copies weights.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::objectives;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Value<'a> {
    Owned(Tensor),
    Borrowed(&'a Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Sigmoid(Var),
    Concat(Var, Var),
    Add(Var, Var),
    BroadcastMul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    DiceLoss {
        prob: Var,
        target: Tensor,
        epsilon: f64,
    },
    CrossEntropy {
        prob: Var,
        target: Tensor,
        clamp: f64,
    },
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Logistic function saturating at the nearest representable values inside
/// (0, 1), so the result is strictly between 0 and 1 for every finite input.
pub fn sigmoid_scalar(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Branch taken by every piecewise node: the active mask of each relu,
    /// the winning index of each pooling window and the clamp region of
    /// each cross-entropy. Two evaluations with equal signatures lie in the
    /// same smooth piece of the graph.
    pub fn piecewise_signature(&self) -> Vec<usize> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => sig.extend(self.nodes[x.0].value.get().data().iter().map(|&v| (v > 0.0) as usize)),
                Op::MaxPool2d { argmax, .. } => sig.extend_from_slice(argmax),
                Op::CrossEntropy { prob, clamp, .. } => sig.extend(
                    self.nodes[prob.0]
                        .value
                        .get()
                        .data()
                        .iter()
                        .map(|&p| (p <= *clamp || p >= 1.0 - clamp) as usize),
                ),
                _ => {}
            }
        }
        sig
    }

    fn push(&mut self, value: Value<'a>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Value::Owned(value), op, rg)
    }

    /// A constant leaf; no gradient is tracked.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Value::Owned(value), Op::Leaf, false)
    }

    /// An owned leaf whose gradient is accumulated by [`Graph::backward`].
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(Value::Owned(value), Op::Leaf, true)
    }

    /// A borrowed leaf (model parameter) whose gradient is accumulated.
    pub fn param(&mut self, value: &'a Tensor) -> Var {
        self.push(Value::Borrowed(value), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Moves a leaf's accumulated gradient out, leaving none.
    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].grad.take()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let g = self.grad(v)?;
        Tensor::new(self.value(v).shape().to_vec(), g.to_vec()).ok()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let out = kernels::conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            geom,
        )?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        Ok(self.derived(out, Op::Conv2d { input, weight, bias, geom }, &deps))
    }

    pub fn conv_transpose2d(&mut self, input: Var, weight: Var, bias: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let out = kernels::conv_transpose2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            geom,
        )?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        Ok(self.derived(out, Op::ConvTranspose2d { input, weight, bias, geom }, &deps))
    }

    pub fn maxpool2d(&mut self, input: Var, window: usize) -> Result<Var> {
        let (out, argmax) = kernels::maxpool2d(self.value(input), window)?;
        Ok(self.derived(out, Op::MaxPool2d { input, argmax }, &[input]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v < 0.0 { 0.0 } else { v });
        self.derived(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid_scalar);
        self.derived(out, Op::Sigmoid(x), &[x])
    }

    /// Channel-wise concatenation of two `(N, C, H, W)` tensors.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "concat_channels";
        let [n, ca, h, w] = self.value(a).dims4(OP)?;
        let [nb, cb, hb, wb] = self.value(b).dims4(OP)?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape(
                OP,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let (la, lb) = (ca * h * w, cb * h * w);
        let mut data = Vec::with_capacity(n * (la + lb));
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..n {
            data.extend_from_slice(&da[i * la..(i + 1) * la]);
            data.extend_from_slice(&db[i * lb..(i + 1) * lb]);
        }
        let out = Tensor::new([n, ca + cb, h, w], data)?;
        Ok(self.derived(out, Op::Concat(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.derived(out, Op::Add(a, b), &[a, b]))
    }

    /// Scales every channel of `features` (N,C,H,W) by the same spatial
    /// `map` (N,1,H,W).
    pub fn broadcast_mul(&mut self, features: Var, map: Var) -> Result<Var> {
        const OP: &str = "broadcast_mul";
        let [n, c, h, w] = self.value(features).dims4(OP)?;
        let [nm, cm, hm, wm] = self.value(map).dims4(OP)?;
        if (n, h, w) != (nm, hm, wm) || cm != 1 {
            return Err(Error::shape(
                OP,
                format!(
                    "features {:?} vs map {:?}",
                    self.value(features).shape(),
                    self.value(map).shape()
                ),
            ));
        }
        let hw = h * w;
        let (f, m) = (self.value(features).data(), self.value(map).data());
        let mut data = Vec::with_capacity(f.len());
        for i in 0..n {
            let mrow = &m[i * hw..(i + 1) * hw];
            for ch in 0..c {
                let frow = &f[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                data.extend(frow.iter().zip(mrow).map(|(a, b)| a * b));
            }
        }
        let out = Tensor::new([n, c, h, w], data)?;
        Ok(self.derived(out, Op::BroadcastMul(features, map), &[features, map]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.derived(out, Op::Scale(x, factor), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.derived(out, Op::Sum(x), &[x])
    }

    /// Batch mean of the per-image soft Dice loss.
    pub fn dice_loss(&mut self, prob: Var, target: &Tensor, epsilon: f64) -> Result<Var> {
        let value = objectives::dice_loss(self.value(prob), target, epsilon)?;
        let op = Op::DiceLoss {
            prob,
            target: target.clone(),
            epsilon,
        };
        Ok(self.derived(Tensor::scalar(value), op, &[prob]))
    }

    /// Mean binary cross-entropy with probabilities clamped to
    /// `[clamp, 1 - clamp]`.
    pub fn cross_entropy(&mut self, prob: Var, target: &Tensor, clamp: f64) -> Result<Var> {
        let value = objectives::ce_loss(self.value(prob), target, clamp)?;
        let op = Op::CrossEntropy {
            prob,
            target: target.clone(),
            clamp,
        };
        Ok(self.derived(Tensor::scalar(value), op, &[prob]))
    }

    /// Accumulate `d loss / d leaf` into every gradient-tracking leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let n = &mut self.nodes[i];
                match n.grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => n.grad = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut adj)?;
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut give = |v: Var, contribution: Vec<f64>| {
            match adj[v.0].as_mut() {
                Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
                None => adj[v.0] = Some(contribution),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, geom } => {
                let grads = kernels::conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    *geom,
                    g,
                    wants(*input),
                )?;
                if let Some(gi) = grads.input {
                    give(*input, gi);
                }
                if wants(*weight) {
                    give(*weight, grads.weight);
                }
                if let Some(b) = bias.filter(|b| wants(*b)) {
                    give(b, grads.bias);
                }
            }
            Op::ConvTranspose2d { input, weight, bias, geom } => {
                let grads = kernels::conv_transpose2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    *geom,
                    g,
                    wants(*input),
                )?;
                if let Some(gi) = grads.input {
                    give(*input, gi);
                }
                if wants(*weight) {
                    give(*weight, grads.weight);
                }
                if let Some(b) = bias.filter(|b| wants(*b)) {
                    give(b, grads.bias);
                }
            }
            Op::MaxPool2d { input, argmax } => {
                let mut gi = vec![0.0; self.value(*input).len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    gi[src] += gv;
                }
                give(*input, gi);
            }
            Op::Relu(x) => {
                let gi = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                give(*x, gi);
            }
            Op::Sigmoid(x) => {
                let gi = node
                    .value
                    .get()
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&s, &gv)| gv * s * (1.0 - s))
                    .collect();
                give(*x, gi);
            }
            Op::Concat(a, b) => {
                let [n, ca, h, w] = self.value(*a).dims4("concat_channels")?;
                let cb = self.value(*b).dims4("concat_channels")?[1];
                let (la, lb) = (ca * h * w, cb * h * w);
                let (mut ga, mut gb) = (Vec::with_capacity(n * la), Vec::with_capacity(n * lb));
                for chunk in g.chunks_exact(la + lb) {
                    ga.extend_from_slice(&chunk[..la]);
                    gb.extend_from_slice(&chunk[la..]);
                }
                if wants(*a) {
                    give(*a, ga);
                }
                if wants(*b) {
                    give(*b, gb);
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    give(*a, g.to_vec());
                }
                if wants(*b) {
                    give(*b, g.to_vec());
                }
            }
            Op::BroadcastMul(f, m) => {
                let [n, c, h, w] = self.value(*f).dims4("broadcast_mul")?;
                let hw = h * w;
                let (fv, mv) = (self.value(*f).data(), self.value(*m).data());
                if wants(*f) {
                    let mut gf = Vec::with_capacity(g.len());
                    for i in 0..n {
                        let mrow = &mv[i * hw..(i + 1) * hw];
                        for ch in 0..c {
                            let off = (i * c + ch) * hw;
                            gf.extend(g[off..off + hw].iter().zip(mrow).map(|(a, b)| a * b));
                        }
                    }
                    give(*f, gf);
                }
                if wants(*m) {
                    let mut gm = vec![0.0; n * hw];
                    for i in 0..n {
                        let dst = &mut gm[i * hw..(i + 1) * hw];
                        for ch in 0..c {
                            let off = (i * c + ch) * hw;
                            for ((d, gv), fv) in dst.iter_mut().zip(&g[off..off + hw]).zip(&fv[off..off + hw]) {
                                *d += gv * fv;
                            }
                        }
                    }
                    give(*m, gm);
                }
            }
            Op::Scale(x, factor) => give(*x, g.iter().map(|v| v * factor).collect()),
            Op::Sum(x) => give(*x, vec![g[0]; self.value(*x).len()]),
            Op::DiceLoss { prob, target, epsilon } => {
                let mut gp = objectives::dice_loss_grad(self.value(*prob), target, *epsilon)?;
                gp.iter_mut().for_each(|v| *v *= g[0]);
                give(*prob, gp);
            }
            Op::CrossEntropy { prob, target, clamp } => {
                let mut gp = objectives::ce_loss_grad(self.value(*prob), target, *clamp)?;
                gp.iter_mut().for_each(|v| *v *= g[0]);
                give(*prob, gp);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_and_sigmoid_values() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new([3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let s = g.sigmoid(x);
        assert_eq!(g.value(s).data()[1], 0.5);
    }

    #[test]
    fn sigmoid_stays_strictly_inside_unit_interval() {
        for x in [-1e6, -800.0, -40.0, 40.0, 800.0, 1e6] {
            let s = sigmoid_scalar(x);
            assert!(s > 0.0 && s < 1.0, "sigmoid({x}) = {s}");
        }
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros([2]));
        let r = g.relu(x);
        let l = g.sum(r);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn sum_gives_unit_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::new([2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn chain_rule_through_two_ops() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = g.scale(x, 2.0);
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0; 3]);
    }

    #[test]
    fn repeated_backward_accumulates_until_zero_grad() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::new([2], vec![1.0, 2.0]).unwrap());
        let y = g.scale(x, 3.0);
        let l = g.sum(y);
        g.backward(l).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0, 6.0]);
        g.zero_grad();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros([2]));
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn concat_shapes_and_identity() {
        let mut g = Graph::new();
        let a = g.variable(Tensor::ones([1, 3, 4, 4]));
        let b = g.variable(Tensor::ones([1, 5, 4, 4]));
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 8, 4, 4]);
        let l = g.sum(c);
        g.backward(l).unwrap();
        assert!(g.grad(a).unwrap().iter().all(|&v| v == 1.0));
        assert!(g.grad(b).unwrap().iter().all(|&v| v == 1.0));

        let x = Tensor::new([1, 2, 2, 2], (0..8).map(f64::from).collect()).unwrap();
        let xv = g.input(x.clone());
        let e = g.input(Tensor::new([1, 0, 2, 2], Vec::new()).unwrap());
        let c = g.concat_channels(xv, e).unwrap();
        assert_eq!(g.value(c), &x);

        let bad = g.input(Tensor::zeros([1, 1, 3, 4]));
        assert!(g.concat_channels(a, bad).is_err());
    }

    #[test]
    fn broadcast_mul_identity_zero_and_map_grad() {
        let mut g = Graph::new();
        let x = Tensor::new([1, 3, 2, 2], (0..12).map(|v| v as f64 - 4.0).collect()).unwrap();
        let xv = g.input(x.clone());
        let ones = g.input(Tensor::ones([1, 1, 2, 2]));
        let y = g.broadcast_mul(xv, ones).unwrap();
        assert_eq!(g.value(y), &x);
        let zeros = g.input(Tensor::zeros([1, 1, 2, 2]));
        let z = g.broadcast_mul(xv, zeros).unwrap();
        assert!(g.value(z).data().iter().all(|&v| v == 0.0));

        let f = g.input(Tensor::ones([1, 3, 2, 2]));
        let m = g.variable(Tensor::full([1, 1, 2, 2], 0.3));
        let p = g.broadcast_mul(f, m).unwrap();
        let l = g.sum(p);
        g.backward(l).unwrap();
        assert_eq!(g.grad(m).unwrap(), &[3.0; 4]);

        let bad = g.input(Tensor::ones([1, 2, 2, 2]));
        assert!(g.broadcast_mul(f, bad).is_err());
    }

    #[test]
    fn add_requires_identical_shapes() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros([1, 2, 2, 2]));
        let b = g.input(Tensor::zeros([1, 1, 2, 2]));
        assert!(g.add(a, b).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.input(Tensor::ones([2]));
        let x = g.variable(Tensor::ones([2]));
        let s = g.add(c, x).unwrap();
        let l = g.sum(s);
        g.backward(l).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
    }
}
