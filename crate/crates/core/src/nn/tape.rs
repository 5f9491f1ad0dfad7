//! Reverse-mode differentiation over a recorded sequence of vector operations.
//!
//! Every operation appends a node holding its forward value. Parameters are
//! read from a borrowed [`ParamSet`] and never copied onto the tape; their
//! gradients are accumulated into a [`Grads`] during the backward sweep.

use super::tensor::{Grads, ParamId, ParamSet, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Param(ParamId),
    Constant,
    MatVec(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Sum(Var),
    Dot(Var, Var),
    Pick(Var, usize),
    Softmax(Var),
    LogSoftmax(Var),
}

#[derive(Clone, Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert!(matches!(op, Op::Param(_)) || shape.iter().product::<usize>() == value.len());
        self.nodes.push(Node { shape, value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match self.nodes[v.0].op {
            Op::Param(id) => self.params.get(id).data(),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let value = self.value(v);
        assert_eq!(value.len(), 1, "not a scalar");
        value[0]
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let shape = self.params.get(id).shape().to_vec();
        self.push(shape, Vec::new(), Op::Param(id))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Constant)
    }

    pub fn vector(&mut self, data: &[f64]) -> Var {
        self.push(vec![data.len()], data.to_vec(), Op::Constant)
    }

    /// `[rows, cols] x [cols] -> [rows]`.
    pub fn matvec(&mut self, m: Var, v: Var) -> Var {
        let (ms, vs) = (self.shape(m), self.shape(v));
        assert!(ms.len() == 2 && vs.len() == 1 && ms[1] == vs[0], "matvec shapes {ms:?} x {vs:?}");
        let (rows, cols) = (ms[0], ms[1]);
        let (mv, vv) = (self.value(m), self.value(v));
        let out: Vec<f64> = (0..rows)
            .map(|r| mv[r * cols..(r + 1) * cols].iter().zip(vv).map(|(a, b)| a * b).sum())
            .collect();
        self.push(vec![rows], out, Op::MatVec(m, v))
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shape mismatch");
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).iter().map(|x| f(*x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut out = Vec::new();
        for &p in parts {
            assert_eq!(self.shape(p).len(), 1, "concat takes vectors");
            out.extend_from_slice(self.value(p));
        }
        let n = out.len();
        self.push(vec![n], out, Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a)[start..start + len].to_vec();
        self.push(vec![len], out, Op::Slice(a, start))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(Vec::new(), vec![s], Op::Sum(a))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "dot shape mismatch");
        let s = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).sum();
        self.push(Vec::new(), vec![s], Op::Dot(a, b))
    }

    pub fn pick(&mut self, a: Var, index: usize) -> Var {
        let x = self.value(a)[index];
        self.push(Vec::new(), vec![x], Op::Pick(a, index))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let out = super::softmax(self.value(a));
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let lse = log_sum_exp(self.value(a));
        self.map(a, |x| x - lse, Op::LogSoftmax(a))
    }

    /// Sums a list of scalars (or equal-shape values).
    pub fn add_all(&mut self, vars: &[Var]) -> Option<Var> {
        let (&first, rest) = vars.split_first()?;
        Some(rest.iter().fold(first, |acc, &v| self.add(acc, v)))
    }

    /// Gradients of a scalar with respect to every parameter it depends on.
    pub fn gradients(&self, loss: Var) -> Result<Grads> {
        if self.shape(loss).iter().product::<usize>() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads = Grads::empty(self.params.len());
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        fn acc(adj: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
            let slot = adj[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            let len_of = |v: Var| self.nodes[v.0].shape.iter().product::<usize>();
            match &node.op {
                Op::Param(id) => {
                    let slot = grads.slot(*id, &node.shape);
                    slot.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
                Op::Constant => {}
                Op::MatVec(m, v) => {
                    let cols = self.nodes[m.0].shape[1];
                    let (mv, vv) = (self.value(*m), self.value(*v));
                    acc(&mut adj, *m, mv.len(), |dm| {
                        for (r, gr) in g.iter().enumerate() {
                            if *gr != 0.0 {
                                for (d, x) in dm[r * cols..(r + 1) * cols].iter_mut().zip(vv) {
                                    *d += gr * x;
                                }
                            }
                        }
                    });
                    acc(&mut adj, *v, cols, |dv| {
                        for (r, gr) in g.iter().enumerate() {
                            if *gr != 0.0 {
                                for (d, x) in dv.iter_mut().zip(&mv[r * cols..(r + 1) * cols]) {
                                    *d += gr * x;
                                }
                            }
                        }
                    });
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *a, g.len(), |d| d.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                    acc(&mut adj, *b, g.len(), |d| d.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *a, g.len(), |d| d.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                    acc(&mut adj, *b, g.len(), |d| d.iter_mut().zip(&g).for_each(|(x, y)| *x -= y));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(&mut adj, *a, g.len(), |d| {
                        for ((x, gi), bi) in d.iter_mut().zip(&g).zip(bv) {
                            *x += gi * bi;
                        }
                    });
                    acc(&mut adj, *b, g.len(), |d| {
                        for ((x, gi), ai) in d.iter_mut().zip(&g).zip(av) {
                            *x += gi * ai;
                        }
                    });
                }
                Op::Scale(a, c) => {
                    acc(&mut adj, *a, g.len(), |d| d.iter_mut().zip(&g).for_each(|(x, y)| *x += c * y));
                }
                Op::Sigmoid(a) => {
                    acc(&mut adj, *a, g.len(), |d| {
                        for ((x, gi), s) in d.iter_mut().zip(&g).zip(&node.value) {
                            *x += gi * s * (1.0 - s);
                        }
                    });
                }
                Op::Tanh(a) => {
                    acc(&mut adj, *a, g.len(), |d| {
                        for ((x, gi), t) in d.iter_mut().zip(&g).zip(&node.value) {
                            *x += gi * (1.0 - t * t);
                        }
                    });
                }
                Op::Relu(a) => {
                    acc(&mut adj, *a, g.len(), |d| {
                        for ((x, gi), y) in d.iter_mut().zip(&g).zip(&node.value) {
                            if *y > 0.0 {
                                *x += gi;
                            }
                        }
                    });
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = len_of(p);
                        acc(&mut adj, p, n, |d| {
                            d.iter_mut().zip(&g[offset..offset + n]).for_each(|(x, y)| *x += y)
                        });
                        offset += n;
                    }
                }
                Op::Slice(a, start) => {
                    let n = len_of(*a);
                    acc(&mut adj, *a, n, |d| {
                        d[*start..*start + g.len()].iter_mut().zip(&g).for_each(|(x, y)| *x += y)
                    });
                }
                Op::Sum(a) => {
                    let n = len_of(*a);
                    acc(&mut adj, *a, n, |d| d.iter_mut().for_each(|x| *x += g[0]));
                }
                Op::Dot(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(&mut adj, *a, av.len(), |d| d.iter_mut().zip(bv).for_each(|(x, y)| *x += g[0] * y));
                    acc(&mut adj, *b, bv.len(), |d| d.iter_mut().zip(av).for_each(|(x, y)| *x += g[0] * y));
                }
                Op::Pick(a, index) => {
                    let n = len_of(*a);
                    acc(&mut adj, *a, n, |d| d[*index] += g[0]);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let inner: f64 = g.iter().zip(y).map(|(gi, yi)| gi * yi).sum();
                    acc(&mut adj, *a, g.len(), |d| {
                        for ((x, gi), yi) in d.iter_mut().zip(&g).zip(y) {
                            *x += yi * (gi - inner);
                        }
                    });
                }
                Op::LogSoftmax(a) => {
                    let total: f64 = g.iter().sum();
                    acc(&mut adj, *a, g.len(), |d| {
                        for ((x, gi), yi) in d.iter_mut().zip(&g).zip(&node.value) {
                            *x += gi - yi.exp() * total;
                        }
                    });
                }
            }
        }
        Ok(grads)
    }

    /// Like [`Tape::gradients`] but consumes the tape, freeing the recorded graph.
    pub fn backward(self, loss: Var) -> Result<Grads> {
        self.gradients(loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{finite_difference_check, random_params};

    #[test]
    fn quadratic_loss_gradient() {
        let mut params = ParamSet::new();
        let w = params.add("w", Tensor::vector(vec![1.0, -2.0, 0.5]));
        let tape_loss = |params: &ParamSet| {
            let mut tape = Tape::new(params);
            let v = tape.param(w);
            let sq = tape.mul(v, v);
            let loss = tape.sum(sq);
            tape.backward(loss).unwrap()
        };
        let grads = tape_loss(&params);
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut params = ParamSet::new();
        let w = params.add("w", Tensor::vector(vec![1.0, 2.0]));
        let mut tape = Tape::new(&params);
        let _ = tape.param(w);
        let c = tape.vector(&[3.0]);
        let loss = tape.sum(c);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(w).map_or(true, |g| g.data().iter().all(|x| *x == 0.0)));
        assert_eq!(grads.global_norm(), 0.0);
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut params = ParamSet::new();
        let w = params.add("w", Tensor::vector(vec![1.0, 2.0]));
        let mut tape = Tape::new(&params);
        let v = tape.param(w);
        let y = tape.scale(v, 2.0);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    /// Every op chained into one scalar, checked against central differences.
    #[test]
    fn every_op_matches_finite_differences() {
        for seed in 0..5 {
            let mut params = random_params(&[("m", &[4, 3]), ("x", &[3]), ("y", &[4])], seed);
            let (m, x, y) = (params.id("m").unwrap(), params.id("x").unwrap(), params.id("y").unwrap());
            let build = |tape: &mut Tape| {
                let (mv, xv, yv) = (tape.param(m), tape.param(x), tape.param(y));
                let a = tape.matvec(mv, xv);
                let b = tape.add(a, yv);
                let c = tape.sigmoid(b);
                let d = tape.tanh(a);
                let e = tape.mul(c, d);
                let f = tape.sub(e, yv);
                let r = tape.relu(f);
                let s = tape.scale(r, 1.7);
                let cat = tape.concat(&[s, xv]);
                let sl = tape.slice(cat, 2, 4);
                let sm = tape.softmax(sl);
                let ls = tape.log_softmax(b);
                let p = tape.pick(ls, 1);
                let dt = tape.dot(sm, sl);
                let sum = tape.sum(cat);
                tape.add_all(&[p, dt, sum]).unwrap()
            };
            finite_difference_check(&mut params, build, 1e-4);
        }
    }
}
