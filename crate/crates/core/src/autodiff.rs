//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation performed through [`Var`] handles in
//! execution order, which is already a topological order. [`Tape::backward`]
//! walks it once in reverse, summing gradients where a value fans out.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels::{self, SampleTable};
use crate::tensor::Tensor;

/// Maps the upstream gradient to one optional gradient per parent. The mask
/// says which parents need a gradient at all.
type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    branches: Cell<u64>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of a scalar with respect to the leaves of a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros when nothing reached it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }

    pub(crate) fn take(&mut self, id: usize) -> Option<Tensor> {
        self.grads.get_mut(id).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Hash of the branch taken at every piecewise-linear element so far
    /// (ReLU signs). Two evaluations with equal signatures lie on the same
    /// linear piece.
    pub fn branch_signature(&self) -> u64 {
        self.branches.get()
    }

    fn note_branches(&self, bits: impl Iterator<Item = bool>) {
        let mut h = self.branches.get();
        for b in bits {
            h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3);
        }
        self.branches.set(h);
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input (parameter or probe).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Rc::new(value), true, Vec::new(), None)
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Rc::new(value), false, Vec::new(), None)
    }

    fn push(
        &self,
        value: Rc<Tensor>,
        requires_grad: bool,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            requires_grad,
            parents,
            backward,
        });
        Var { tape: self, id }
    }

    fn record(&self, value: impl Into<Rc<Tensor>>, parents: &[Var<'_>], backward: BackwardFn) -> Var<'_> {
        let requires = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        let ids = parents.iter().map(|p| p.id).collect();
        let value = value.into();
        if requires {
            self.push(value, true, ids, Some(backward))
        } else {
            self.push(value, false, ids, None)
        }
    }

    /// Reverse sweep from a one-element `loss`. Only leaf gradients are kept.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let mask: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let pgrads = backward(&g, &mask);
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for ((&p, pg), &needed) in node.parents.iter().zip(pgrads).zip(&mask) {
                let (Some(pg), true) = (pg, needed) else { continue };
                match grads[p].as_mut() {
                    Some(acc) => acc.add_assign(&pg),
                    None => grads[p] = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Concatenation along `axis`.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = kernels::concat(&refs, axis)?;
        let extents: Vec<usize> = refs.iter().map(|t| t.shape()[axis]).collect();
        Ok(self.record(
            out,
            parts,
            Box::new(move |g, mask| {
                let mut start = 0;
                extents
                    .iter()
                    .zip(mask)
                    .map(|(&len, &m)| {
                        let s = start;
                        start += len;
                        m.then(|| kernels::slice(g, axis, s, len).expect("concat slice"))
                    })
                    .collect()
            }),
        ))
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(
        self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'t> {
        let x = self.value();
        let y = Rc::new(x.map(f));
        let yc = y.clone();
        self.tape.record(
            y,
            &[self],
            Box::new(move |g, _| {
                let data = g
                    .data()
                    .iter()
                    .zip(x.data().iter().zip(yc.data()))
                    .map(|(&gi, (&xi, &yi))| gi * df(xi, yi))
                    .collect();
                vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
            }),
        )
    }

    pub fn neg(self) -> Var<'t> {
        self.mul_scalar(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    pub fn mul_scalar(self, c: f64) -> Var<'t> {
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn log(self) -> Var<'t> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn pow(self, p: f64) -> Var<'t> {
        self.unary(move |x| x.powf(p), move |x, _| p * x.powf(p - 1.0))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(kernels::sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn relu(self) -> Var<'t> {
        self.tape.note_branches(self.value().data().iter().map(|&x| x > 0.0));
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn gelu(self) -> Var<'t> {
        self.unary(kernels::gelu, |x, _| kernels::gelu_grad(x))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    fn binary_op(
        self,
        other: Var<'t>,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        grads: impl Fn(&Tensor, &Tensor, &Tensor, &[bool]) -> (Option<Tensor>, Option<Tensor>) + 'static,
    ) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let out = kernels::binary(op, &a, &b, f)?;
        Ok(self.tape.record(
            out,
            &[self, other],
            Box::new(move |g, mask| {
                let (ga, gb) = grads(g, &a, &b, mask);
                vec![
                    ga.map(|t| kernels::reduce_to_shape(&t, a.shape())),
                    gb.map(|t| kernels::reduce_to_shape(&t, b.shape())),
                ]
            }),
        ))
    }

    /// Broadcasting addition.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_op(other, "add", |x, y| x + y, |g, _, _, m| {
            (m[0].then(|| g.clone()), m[1].then(|| g.clone()))
        })
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_op(other, "sub", |x, y| x - y, |g, _, _, m| {
            (m[0].then(|| g.clone()), m[1].then(|| g.map(|v| -v)))
        })
    }

    /// Broadcasting elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_op(other, "mul", |x, y| x * y, |g, a, b, m| {
            (
                m[0].then(|| kernels::binary("mul", g, b, |x, y| x * y).expect("broadcast")),
                m[1].then(|| kernels::binary("mul", g, a, |x, y| x * y).expect("broadcast")),
            )
        })
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_op(other, "div", |x, y| x / y, |g, a, b, m| {
            let ga = m[0].then(|| kernels::binary("div", g, b, |x, y| x / y).expect("broadcast"));
            let gb = m[1].then(|| {
                let q = kernels::binary("div", a, b, |x, y| -x / (y * y)).expect("broadcast");
                kernels::binary("mul", g, &q, |x, y| x * y).expect("broadcast")
            });
            (ga, gb)
        })
    }

    /// Batched matrix product `[..,p,q]·[..,q,r]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let out = kernels::matmul(&a, &b, false, false)?;
        Ok(self.tape.record(
            out,
            &[self, other],
            Box::new(move |g, mask| {
                let ga = mask[0].then(|| {
                    let full = kernels::matmul(g, &b, false, true).expect("matmul grad");
                    kernels::reduce_to_shape(&full, a.shape())
                });
                let gb = mask[1].then(|| {
                    let full = kernels::matmul(&a, g, true, false).expect("matmul grad");
                    kernels::reduce_to_shape(&full, b.shape())
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Scaled dot-product attention with `self` as queries `[h, lq, d]`;
    /// see [`kernels::attention`].
    pub fn attention(self, keys: Var<'t>, values: Var<'t>, scale: f64) -> Result<Var<'t>> {
        let (q, k, v) = (self.value(), keys.value(), values.value());
        let (ctx, w) = kernels::attention(&q, &k, &v, scale)?;
        Ok(self.tape.record(
            ctx,
            &[self, keys, values],
            Box::new(move |g, mask| {
                let gw = kernels::matmul(g, &v, false, true).expect("attention grad");
                let gs = kernels::softmax_backward(&w, &gw, 2).map(|x| x * scale);
                let gq = mask[0].then(|| kernels::matmul(&gs, &k, false, false).expect("attention grad"));
                let gk = mask[1].then(|| kernels::matmul(&gs, &q, true, false).expect("attention grad"));
                let gv = mask[2].then(|| kernels::matmul(&w, g, true, false).expect("attention grad"));
                vec![gq, gk, gv]
            }),
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let out = x.reshape(shape)?;
        let orig = x.shape().to_vec();
        Ok(self.tape.record(
            out,
            &[self],
            Box::new(move |g, _| vec![Some(Tensor::from_parts(orig.clone(), g.data().to_vec()))]),
        ))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>> {
        let out = kernels::permute(&self.value(), axes)?;
        let inv = kernels::inverse_permutation(axes);
        Ok(self.tape.record(
            out,
            &[self],
            Box::new(move |g, _| vec![Some(kernels::permute(g, &inv).expect("inverse permute"))]),
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t>> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(Error::dim("transpose", &self.shape(), &[]));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(&axes)
    }

    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let out = kernels::slice(&x, axis, start, len)?;
        let shape = x.shape().to_vec();
        Ok(self.tape.record(
            out,
            &[self],
            Box::new(move |g, _| vec![Some(kernels::unslice(g, &shape, axis, start))]),
        ))
    }

    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(Error::dim("sum_axis", x.shape(), &[axis]));
        }
        let out = kernels::sum_axis(&x, axis);
        let shape = x.shape().to_vec();
        Ok(self.tape.record(
            out,
            &[self],
            Box::new(move |g, _| vec![Some(kernels::expand_axis(g, &shape, axis))]),
        ))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let n = *self
            .shape()
            .get(axis)
            .ok_or_else(|| Error::dim("mean_axis", &self.shape(), &[axis]))?;
        Ok(self.sum_axis(axis)?.mul_scalar(1.0 / n as f64))
    }

    pub fn sum_all(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape.record(
            Tensor::scalar(x.sum()),
            &[self],
            Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    pub fn mean_all(self) -> Var<'t> {
        let n = self.value().len();
        self.sum_all().mul_scalar(1.0 / n as f64)
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(Error::dim("softmax", x.shape(), &[axis]));
        }
        let y = Rc::new(kernels::softmax(&x, axis)?);
        let yc = y.clone();
        Ok(self.tape.record(
            y,
            &[self],
            Box::new(move |g, _| vec![Some(kernels::softmax_backward(&yc, g, axis))]),
        ))
    }

    /// Normalizes along `axis` (population variance, ε = 1e-5) then applies
    /// `gain` and `bias`, both shaped `[extent of axis]`.
    pub fn layer_norm(self, axis: usize, gain: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(Error::dim("layer_norm", x.shape(), &[axis]));
        }
        let gv = gain.value();
        let (out, cache) = kernels::layer_norm(&x, axis, &gv, &bias.value())?;
        Ok(self.tape.record(
            out,
            &[self, gain, bias],
            Box::new(move |g, _| {
                let (dx, dg, db) = kernels::layer_norm_backward(&cache, &gv, g, axis);
                vec![Some(dx), Some(dg), Some(db)]
            }),
        ))
    }

    /// Cross-correlation of `[B,C,H,W]` with `[O,C,kh,kw]`.
    pub fn conv2d(self, w: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        let (x, wv) = (self.value(), w.value());
        let out = kernels::conv2d(&x, &wv, stride, pad)?;
        Ok(self.tape.record(
            out,
            &[self, w],
            Box::new(move |g, m| {
                let (dx, dw) = kernels::conv2d_backward(&x, &wv, g, stride, pad, (m[0], m[1]));
                vec![dx, dw]
            }),
        ))
    }

    /// Transposed convolution of `[B,O,h,w]` with `[O,C,kh,kw]`.
    pub fn conv_transpose2d(self, w: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        let (y, wv) = (self.value(), w.value());
        let out = kernels::conv_transpose2d(&y, &wv, stride, pad)?;
        Ok(self.tape.record(
            out,
            &[self, w],
            Box::new(move |g, m| {
                let (dy, dw) =
                    kernels::conv_transpose2d_backward(&y, &wv, g, stride, pad, (m[0], m[1]));
                vec![dy, dw]
            }),
        ))
    }

    /// Bilinear sampling of a `[C,H,W]` map at the table's points → `[C,P]`.
    /// Differentiable with respect to the map only.
    pub fn bilinear_sample(self, table: Rc<SampleTable>) -> Result<Var<'t>> {
        let out = table.sample(&self.value())?;
        Ok(self.tape.record(
            out,
            &[self],
            Box::new(move |g, _| vec![Some(table.sample_backward(g))]),
        ))
    }

    /// Mean sigmoid focal loss of logits against a binary target of the same shape.
    pub fn focal_loss(self, target: &Tensor, gamma: f64) -> Result<Var<'t>> {
        let x = self.value();
        if x.shape() != target.shape() {
            return Err(Error::dim("focal_loss", x.shape(), target.shape()));
        }
        if target.data().iter().any(|&t| t != 0.0 && t != 1.0) {
            return Err(Error::Usage("focal loss target must be binary {0,1}".into()));
        }
        let n = x.len() as f64;
        let mut total = 0.0;
        let mut dlogit = Vec::with_capacity(x.len());
        for (&l, &t) in x.data().iter().zip(target.data()) {
            let (loss, d) = kernels::focal_term(l, t, gamma);
            total += loss;
            dlogit.push(d / n);
        }
        let shape = x.shape().to_vec();
        Ok(self.tape.record(
            Tensor::scalar(total / n),
            &[self],
            Box::new(move |g, _| {
                let s = g.item();
                vec![Some(Tensor::from_parts(shape.clone(), dlogit.iter().map(|d| d * s).collect()))]
            }),
        ))
    }
}
