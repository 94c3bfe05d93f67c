//! Tensor-level reverse-mode differentiation.
//!
//! Every cotangent rule is itself expressed with recorded operations, so the
//! gradient returned by [`Graph::grad`] is a differentiable [`Var`]. The
//! unrolled solver relies on this: each iteration takes the gradient of the
//! variational cost, and training differentiates through those gradients.

pub mod kernels;

use std::cell::RefCell;
use std::ops::{Add, Mul, Neg, Sub};
use std::rc::Rc;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {shape:?} does not match {} elements",
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::new(shape.to_vec(), vec![v; shape.iter().product()])
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(vec![1], vec![v])
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

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }

    fn dims4(&self) -> [usize; 4] {
        self.shape[..]
            .try_into()
            .unwrap_or_else(|_| panic!("expected a 4-D tensor, got {:?}", self.shape))
    }

    fn dims5(&self) -> [usize; 5] {
        self.shape[..]
            .try_into()
            .unwrap_or_else(|_| panic!("expected a 5-D filter, got {:?}", self.shape))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    ScaleConst(usize, f64),
    MulConst(usize, Rc<Vec<f64>>),
    Scale(usize, usize),
    Dot(usize, usize),
    Tanh(usize),
    Exp(usize),
    Powf(usize, f64),
    Pad(usize, [usize; 3]),
    PadAdj(usize, [usize; 3]),
    Conv(usize, usize),
    ConvT(usize, usize),
    WGrad(usize, usize),
    Pool2(usize),
    Unpool2(usize),
    BiasAdd(usize, usize),
    ChannelSum(usize),
    Reshape(usize),
}

impl Op {
    fn parents(&self) -> [Option<usize>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Scale(a, b) | Dot(a, b) | Conv(a, b)
            | ConvT(a, b) | WGrad(a, b) | BiasAdd(a, b) => [Some(a), Some(b)],
            ScaleConst(a, _) | MulConst(a, _) | Tanh(a) | Exp(a) | Powf(a, _) | Pad(a, _) | PadAdj(a, _)
            | Pool2(a) | Unpool2(a) | ChannelSum(a) | Reshape(a) => [Some(a), None],
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

/// Append-only record of tensor operations.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Input node: a parameter when later passed to [`Graph::grad`], a constant otherwise.
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf)
    }

    fn push(&self, t: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(t),
            op,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn var(&self, id: usize) -> Var<'_> {
        Var { graph: self, id }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Cotangents of `out` (seeded with ones) with respect to each of `wrt`.
    ///
    /// The result is recorded on the graph and can be differentiated again.
    /// Inputs `out` does not depend on get a zero tensor.
    pub fn grad<'g>(&'g self, out: Var<'g>, wrt: &[Var<'g>]) -> Vec<Var<'g>> {
        let n = out.id + 1;
        let mut relevant = vec![false; n];
        for w in wrt {
            if w.id < n {
                relevant[w.id] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for i in 0..n {
                if !relevant[i] {
                    relevant[i] = nodes[i]
                        .op
                        .parents()
                        .iter()
                        .flatten()
                        .any(|&p| relevant[p]);
                }
            }
        }

        let mut grads: Vec<Option<usize>> = vec![None; n];
        if relevant[out.id] {
            let seed = Tensor::full(&out.shape(), 1.0);
            grads[out.id] = Some(self.leaf(seed).id);
        }

        for i in (0..n).rev() {
            let Some(gid) = grads[i] else { continue };
            if !relevant[i] {
                continue;
            }
            let op = self.nodes.borrow()[i].op.clone();
            let g = self.var(gid);
            let y = self.var(i);
            let mut acc = |p: usize, v: Var<'g>| {
                grads[p] = Some(match grads[p] {
                    None => v.id,
                    Some(e) => (self.var(e) + v).id,
                });
            };
            let rel = |p: usize| relevant[p];
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    if rel(a) {
                        acc(a, g);
                    }
                    if rel(b) {
                        acc(b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if rel(a) {
                        acc(a, g);
                    }
                    if rel(b) {
                        acc(b, -g);
                    }
                }
                Op::Mul(a, b) => {
                    if rel(a) {
                        acc(a, g * self.var(b));
                    }
                    if rel(b) {
                        acc(b, g * self.var(a));
                    }
                }
                Op::ScaleConst(a, c) => acc(a, g.scale_const(c)),
                Op::MulConst(a, m) => acc(a, g.mul_const(&m)),
                Op::Scale(a, s) => {
                    if rel(a) {
                        acc(a, g.scale(self.var(s)));
                    }
                    if rel(s) {
                        acc(s, g.dot(self.var(a)));
                    }
                }
                Op::Dot(a, b) => {
                    if rel(a) {
                        acc(a, self.var(b).scale(g));
                    }
                    if rel(b) {
                        acc(b, self.var(a).scale(g));
                    }
                }
                Op::Tanh(a) => acc(a, g - g * y * y),
                Op::Exp(a) => acc(a, g * y),
                Op::Powf(a, e) => acc(a, g * self.var(a).powf(e - 1.0).scale_const(e)),
                Op::Pad(a, p) => acc(a, g.pad_adj(p)),
                Op::PadAdj(a, p) => acc(a, g.pad(p)),
                Op::Conv(x, w) => {
                    if rel(x) {
                        acc(x, g.conv_t(self.var(w)));
                    }
                    if rel(w) {
                        acc(w, self.var(x).wgrad(g));
                    }
                }
                Op::ConvT(gy, w) => {
                    if rel(gy) {
                        acc(gy, g.conv(self.var(w)));
                    }
                    if rel(w) {
                        acc(w, g.wgrad(self.var(gy)));
                    }
                }
                Op::WGrad(x, gy) => {
                    if rel(x) {
                        acc(x, self.var(gy).conv_t(g));
                    }
                    if rel(gy) {
                        acc(gy, self.var(x).conv(g));
                    }
                }
                Op::Pool2(a) => acc(a, g.unpool2().scale_const(0.25)),
                Op::Unpool2(a) => acc(a, g.pool2().scale_const(4.0)),
                Op::BiasAdd(x, b) => {
                    if rel(x) {
                        acc(x, g);
                    }
                    if rel(b) {
                        acc(b, g.channel_sum());
                    }
                }
                Op::ChannelSum(a) => {
                    let zeros = self.leaf(Tensor::zeros(&self.var(a).shape()));
                    acc(a, zeros.bias_add(g));
                }
                Op::Reshape(a) => {
                    let shape = self.var(a).shape();
                    acc(a, g.reshape(&shape));
                }
            }
        }

        wrt.iter()
            .map(|w| match grads.get(w.id).copied().flatten() {
                Some(id) => self.var(id),
                None => self.leaf(Tensor::zeros(&w.shape())),
            })
            .collect()
    }
}

impl<'g> Var<'g> {
    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape.clone()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn unary(self, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Var<'g> {
        let v = f(&self.value());
        self.graph.push(v, op)
    }

    fn zip_with(self, other: Var<'g>, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape, b.shape, "elementwise shape mismatch");
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        self.graph.push(Tensor::new(a.shape.clone(), data), op)
    }

    pub fn scale_const(self, c: f64) -> Var<'g> {
        self.unary(Op::ScaleConst(self.id, c), |a| {
            Tensor::new(a.shape.clone(), a.data.iter().map(|x| c * x).collect())
        })
    }

    /// Elementwise product with a constant, broadcast over leading axes when
    /// `m` is shorter than the tensor.
    pub fn mul_const(self, m: &Rc<Vec<f64>>) -> Var<'g> {
        let m2 = Rc::clone(m);
        self.unary(Op::MulConst(self.id, Rc::clone(m)), move |a| {
            assert!(
                !m2.is_empty() && a.len() % m2.len() == 0,
                "mask length {} does not tile tensor length {}",
                m2.len(),
                a.len()
            );
            let data = a
                .data
                .chunks(m2.len())
                .flat_map(|c| c.iter().zip(m2.iter()).map(|(x, w)| x * w))
                .collect();
            Tensor::new(a.shape.clone(), data)
        })
    }

    /// Tensor times a one-element variable.
    pub fn scale(self, s: Var<'g>) -> Var<'g> {
        let sv = s.item();
        self.unary(Op::Scale(self.id, s.id), |a| {
            Tensor::new(a.shape.clone(), a.data.iter().map(|x| sv * x).collect())
        })
    }

    pub fn dot(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.len(), b.len(), "dot length mismatch");
        let d = a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum();
        self.graph.push(Tensor::scalar(d), Op::Dot(self.id, other.id))
    }

    pub fn sum_sq(self) -> Var<'g> {
        self.dot(self)
    }

    pub fn tanh(self) -> Var<'g> {
        self.unary(Op::Tanh(self.id), |a| {
            Tensor::new(a.shape.clone(), a.data.iter().map(|x| x.tanh()).collect())
        })
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(Op::Exp(self.id), |a| {
            Tensor::new(a.shape.clone(), a.data.iter().map(|x| x.exp()).collect())
        })
    }

    pub fn powf(self, e: f64) -> Var<'g> {
        self.unary(Op::Powf(self.id, e), |a| {
            Tensor::new(a.shape.clone(), a.data.iter().map(|x| x.powf(e)).collect())
        })
    }

    pub fn pad(self, p: [usize; 3]) -> Var<'g> {
        self.unary(Op::Pad(self.id, p), |a| {
            let d = a.dims4();
            Tensor::new(
                kernels::padded_dims(d, p).to_vec(),
                kernels::pad_reflect(&a.data, d, p),
            )
        })
    }

    pub fn pad_adj(self, p: [usize; 3]) -> Var<'g> {
        self.unary(Op::PadAdj(self.id, p), |a| {
            let [c, t, h, w] = a.dims4();
            let d = [c, t - 2 * p[0], h - 2 * p[1], w - 2 * p[2]];
            Tensor::new(d.to_vec(), kernels::pad_reflect_adj(&a.data, d, p))
        })
    }

    pub fn conv(self, w: Var<'g>) -> Var<'g> {
        let wv = w.value();
        self.unary(Op::Conv(self.id, w.id), |a| {
            let (data, d) = kernels::conv(&a.data, a.dims4(), &wv.data, wv.dims5());
            Tensor::new(d.to_vec(), data)
        })
    }

    pub fn conv_t(self, w: Var<'g>) -> Var<'g> {
        let wv = w.value();
        self.unary(Op::ConvT(self.id, w.id), |a| {
            let (data, d) = kernels::conv_t(&a.data, a.dims4(), &wv.data, wv.dims5());
            Tensor::new(d.to_vec(), data)
        })
    }

    pub fn wgrad(self, gy: Var<'g>) -> Var<'g> {
        let gv = gy.value();
        self.unary(Op::WGrad(self.id, gy.id), |a| {
            let (data, d) = kernels::wgrad(&a.data, a.dims4(), &gv.data, gv.dims4());
            Tensor::new(d.to_vec(), data)
        })
    }

    /// Same-size convolution with reflect padding for odd kernel extents.
    pub fn conv_same(self, w: Var<'g>) -> Var<'g> {
        let ws = w.shape();
        let p = [(ws[2] - 1) / 2, (ws[3] - 1) / 2, (ws[4] - 1) / 2];
        let x = if p == [0, 0, 0] { self } else { self.pad(p) };
        x.conv(w)
    }

    pub fn pool2(self) -> Var<'g> {
        self.unary(Op::Pool2(self.id), |a| {
            let [c, t, h, w] = a.dims4();
            Tensor::new(vec![c, t, h / 2, w / 2], kernels::pool2(&a.data, [c, t, h, w]))
        })
    }

    pub fn unpool2(self) -> Var<'g> {
        self.unary(Op::Unpool2(self.id), |a| {
            let [c, t, h, w] = a.dims4();
            Tensor::new(vec![c, t, 2 * h, 2 * w], kernels::unpool2(&a.data, [c, t, h, w]))
        })
    }

    /// Adds `b[c]` to every element of channel `c`.
    pub fn bias_add(self, b: Var<'g>) -> Var<'g> {
        let bv = b.value();
        self.unary(Op::BiasAdd(self.id, b.id), |a| {
            let c = a.shape[0];
            assert_eq!(bv.len(), c, "bias length mismatch");
            let per = a.len() / c;
            let data = a
                .data
                .iter()
                .enumerate()
                .map(|(k, x)| x + bv.data[k / per])
                .collect();
            Tensor::new(a.shape.clone(), data)
        })
    }

    pub fn channel_sum(self) -> Var<'g> {
        self.unary(Op::ChannelSum(self.id), |a| {
            let c = a.shape[0];
            let per = a.len() / c;
            let data = a.data.chunks(per).map(|ch| ch.iter().sum()).collect();
            Tensor::new(vec![c], data)
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        self.unary(Op::Reshape(self.id), |a| Tensor::new(shape.to_vec(), a.data.clone()))
    }
}

impl<'g> Add for Var<'g> {
    type Output = Var<'g>;
    fn add(self, o: Var<'g>) -> Var<'g> {
        self.zip_with(o, Op::Add(self.id, o.id), |a, b| a + b)
    }
}

impl<'g> Sub for Var<'g> {
    type Output = Var<'g>;
    fn sub(self, o: Var<'g>) -> Var<'g> {
        self.zip_with(o, Op::Sub(self.id, o.id), |a, b| a - b)
    }
}

impl<'g> Mul for Var<'g> {
    type Output = Var<'g>;
    fn mul(self, o: Var<'g>) -> Var<'g> {
        self.zip_with(o, Op::Mul(self.id, o.id), |a, b| a * b)
    }
}

impl<'g> Neg for Var<'g> {
    type Output = Var<'g>;
    fn neg(self) -> Var<'g> {
        self.scale_const(-1.0)
    }
}

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let fp = f(&xp);
            xp[i] = orig - h;
            let fm = f(&xp);
            xp[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(shape: &[usize], k: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|i| ((i as f64 + 0.5) * k).sin()).collect(),
        )
    }

    /// Scalar test function exercising every recorded operation.
    fn compose<'g>(x: Var<'g>, w: Var<'g>, b: Var<'g>, s: Var<'g>) -> Var<'g> {
        let mask = Rc::new(vec![1.0, 0.0, 1.0, 1.0, 0.5, 1.0, 1.0, 1.0]);
        let h = x.conv_same(w).bias_add(b).tanh();
        let p = h.pool2().unpool2();
        let q = (p * h - h.scale_const(0.3)).mul_const(&mask);
        let r = q.channel_sum().reshape(&[2, 1, 1, 1]).sum_sq();
        let e = q.scale(s).exp().dot(h);
        let n = (r + e).exp().powf(-0.5);
        r + e + x.pad([1, 1, 1]).pad_adj([1, 1, 1]).sum_sq().scale(s).scale(n)
    }

    #[test]
    fn first_order_matches_finite_differences() {
        let x0 = seq(&[1, 2, 4, 4], 0.7);
        let w0 = seq(&[2, 1, 3, 3, 3], 0.31);
        let b0 = seq(&[2], 1.3);
        let s0 = Tensor::scalar(0.4);
        let g = Graph::new();
        let (x, w, b, s) = (
            g.leaf(x0.clone()),
            g.leaf(w0.clone()),
            g.leaf(b0.clone()),
            g.leaf(s0.clone()),
        );
        let f = compose(x, w, b, s);
        let grads = g.grad(f, &[x, w, b, s]);

        let eval = |xs: &[f64], ws: &[f64], bs: &[f64], ss: f64| {
            let g = Graph::new();
            let x = g.leaf(Tensor::new(x0.shape.clone(), xs.to_vec()));
            let w = g.leaf(Tensor::new(w0.shape.clone(), ws.to_vec()));
            let b = g.leaf(Tensor::new(b0.shape.clone(), bs.to_vec()));
            let s = g.leaf(Tensor::scalar(ss));
            compose(x, w, b, s).item()
        };
        let fx = finite_difference(&x0.data, 1e-5, |v| eval(v, &w0.data, &b0.data, 0.4));
        let fw = finite_difference(&w0.data, 1e-5, |v| eval(&x0.data, v, &b0.data, 0.4));
        let fb = finite_difference(&b0.data, 1e-5, |v| eval(&x0.data, &w0.data, v, 0.4));
        let fs = finite_difference(&[0.4], 1e-5, |v| eval(&x0.data, &w0.data, &b0.data, v[0]));
        for (gv, fd) in grads.iter().zip([fx, fw, fb, fs]) {
            let err = relative_error(gv.value().data(), &fd);
            assert!(err < 1e-7, "relative error {err}");
        }
    }

    #[test]
    fn second_order_through_gradient() {
        // d/dw of <v, ∇x f(x, w)> against finite differences in w.
        let x0 = seq(&[1, 1, 4, 4], 0.9);
        let w0 = seq(&[3, 1, 1, 3, 3], 0.23);
        let v0 = seq(&[1, 1, 4, 4], 1.7);
        let inner = |g: &Graph, ws: Tensor| -> f64 {
            let x = g.leaf(x0.clone());
            let w = g.leaf(ws);
            let v = g.leaf(v0.clone());
            let f = x.conv_same(w).tanh().sum_sq();
            let gx = g.grad(f, &[x])[0];
            gx.dot(v).item()
        };
        let g = Graph::new();
        let x = g.leaf(x0.clone());
        let w = g.leaf(w0.clone());
        let v = g.leaf(v0.clone());
        let f = x.conv_same(w).tanh().sum_sq();
        let gx = g.grad(f, &[x])[0];
        let obj = gx.dot(v);
        let gw = g.grad(obj, &[w])[0];
        let fd = finite_difference(&w0.data, 1e-5, |ws| {
            inner(&Graph::new(), Tensor::new(w0.shape.clone(), ws.to_vec()))
        });
        let err = relative_error(gw.value().data(), &fd);
        assert!(err < 1e-7, "relative error {err}");
    }

    #[test]
    fn unrelated_input_gets_zero_gradient() {
        let g = Graph::new();
        let a = g.leaf(Tensor::scalar(2.0));
        let b = g.leaf(Tensor::scalar(3.0));
        let f = a * a;
        let gr = g.grad(f, &[a, b]);
        assert_eq!(gr[0].item(), 4.0);
        assert_eq!(gr[1].item(), 0.0);
    }
}
