//! Reverse-mode autodiff tape.
//!
//! Every forward pass builds a fresh [`Tape`]; ops append nodes holding the
//! result value and a backward closure that routes the upstream gradient to
//! the node's parents. Gradients accumulate in node-creation order, so a
//! fixed graph yields bit-identical gradients across runs.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::losses;
use crate::ops::{self, ConvCfg};
use crate::scalar::Scalar;
use crate::tensor::{bilinear_resize, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackFn<T> = Box<dyn Fn(&Tensor<T>, &mut dyn FnMut(usize, Tensor<T>))>;

struct Node<T: Scalar> {
    value: Rc<Tensor<T>>,
    back: Option<BackFn<T>>,
}

pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: bool,
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the root w.r.t. `v`; `None` when no gradient flowed
    /// (disconnected or behind a detach).
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// Tape that records values only; backward closures are dropped.
    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    fn push(&self, value: Tensor<T>, back: Option<BackFn<T>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            back: if self.grad_enabled { back } else { None },
        });
        Var(nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn leaf(&self, value: Tensor<T>) -> Var {
        self.push(value, None)
    }

    /// New leaf sharing `v`'s value; gradient flow stops here.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v).as_ref().clone();
        self.push(value, None)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(b);
        let out = va.add(&vb)?;
        Ok(self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(a.0, g.clone());
                sink(b.0, g.clone());
            })),
        ))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(b);
        let out = va.mul(&vb)?;
        Ok(self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(a.0, g.mul(&vb).expect("shape fixed"));
                sink(b.0, g.mul(&va).expect("shape fixed"));
            })),
        ))
    }

    pub fn scale(&self, a: Var, k: T) -> Var {
        let va = self.value(a);
        self.push(
            va.scale(k),
            Some(Box::new(move |g, sink| sink(a.0, g.scale(k)))),
        )
    }

    /// Sum of scalar nodes.
    pub fn sum_scalars(&self, terms: &[Var]) -> Var {
        let total: T = terms.iter().map(|&v| self.value(v).item()).sum();
        let ids: Vec<usize> = terms.iter().map(|v| v.0).collect();
        self.push(
            Tensor::scalar(total),
            Some(Box::new(move |g, sink| {
                for &id in &ids {
                    sink(id, g.clone());
                }
            })),
        )
    }

    pub fn concat_channels(&self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|&v| self.value(v)).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat_channels(&refs)?;
        let meta: Vec<(usize, usize, usize, usize)> = values
            .iter()
            .zip(parts.iter())
            .map(|(v, p)| (p.0, v.channels(), v.height(), v.width()))
            .collect();
        Ok(self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut offset = 0;
                for &(id, c, h, w) in &meta {
                    let n = c * h * w;
                    let part =
                        Tensor::new(vec![c, h, w], g.data()[offset..offset + n].to_vec()).unwrap();
                    sink(id, part);
                    offset += n;
                }
            })),
        ))
    }

    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, cfg: ConvCfg) -> Result<Var> {
        let vx = self.value(x);
        let vw = self.value(w);
        let vb = b.map(|bv| self.value(bv));
        let out = ops::conv2d(&vx, &vw, vb.as_deref(), &cfg)?;
        Ok(self.push(
            out,
            Some(Box::new(move |g, sink| {
                let (dx, dw, db) =
                    ops::conv2d_backward(&vx, &vw, &cfg, g, b.is_some()).expect("shape fixed");
                sink(x.0, dx);
                sink(w.0, dw);
                if let (Some(bv), Some(db)) = (b, db) {
                    sink(bv.0, db);
                }
            })),
        ))
    }

    pub fn norm2d(&self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let vx = self.value(x);
        let vg = self.value(gamma);
        let vb = self.value(beta);
        let (out, cache) = ops::norm2d(&vx, &vg, &vb, eps)?;
        Ok(self.push(
            out,
            Some(Box::new(move |g, sink| {
                let (dx, dgamma, dbeta) = ops::norm2d_backward(&cache, &vg, g);
                sink(x.0, dx);
                sink(gamma.0, dgamma);
                sink(beta.0, dbeta);
            })),
        ))
    }

    pub fn prelu(&self, x: Var, alpha: Var) -> Result<Var> {
        let vx = self.value(x);
        let va = self.value(alpha);
        let out = ops::prelu(&vx, &va)?;
        Ok(self.push(
            out,
            Some(Box::new(move |g, sink| {
                let (dx, dalpha) = ops::prelu_backward(&vx, &va, g);
                sink(x.0, dx);
                sink(alpha.0, dalpha);
            })),
        ))
    }

    pub fn relu(&self, x: Var) -> Var {
        let vx = self.value(x);
        let out = vx.map(|v| v.max(T::zero()));
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let dx = g
                    .zip_map(&vx, |gv, xv| if xv > T::zero() { gv } else { T::zero() })
                    .expect("shape fixed");
                sink(x.0, dx);
            })),
        )
    }

    pub fn maxpool2d(&self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let vx = self.value(x);
        let (out, arg) = ops::maxpool2d(&vx, k, stride, pad)?;
        let in_shape = vx.shape().to_vec();
        Ok(self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(x.0, ops::maxpool2d_backward(&in_shape, &arg, g));
            })),
        ))
    }

    pub fn global_avg_pool(&self, x: Var) -> Var {
        let vx = self.value(x);
        let out = ops::global_avg_pool(&vx);
        let in_shape = vx.shape().to_vec();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(x.0, ops::global_avg_pool_backward(&in_shape, g));
            })),
        )
    }

    pub fn bilinear_resize(&self, x: Var, out_h: usize, out_w: usize) -> Var {
        let vx = self.value(x);
        let out = bilinear_resize(&vx, out_h, out_w);
        let in_shape = vx.shape().to_vec();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(x.0, ops::bilinear_resize_backward(&in_shape, g));
            })),
        )
    }

    pub fn reshape(&self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let vx = self.value(x);
        let out = vx.as_ref().clone().reshaped(shape)?;
        let in_shape = vx.shape().to_vec();
        Ok(self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(x.0, g.clone().reshaped(in_shape.clone()).expect("same size"));
            })),
        ))
    }

    pub fn transpose(&self, x: Var) -> Var {
        let vx = self.value(x);
        let out = vx.transposed();
        self.push(
            out,
            Some(Box::new(move |g, sink| sink(x.0, g.transposed()))),
        )
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(b);
        let out = va.matmul(&vb)?;
        Ok(self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(a.0, g.matmul(&vb.transposed()).expect("shape fixed"));
                sink(b.0, va.transposed().matmul(g).expect("shape fixed"));
            })),
        ))
    }

    pub fn softmax_cols(&self, x: Var) -> Var {
        let vx = self.value(x);
        let out = ops::softmax_cols(&vx);
        let s = out.clone();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(x.0, ops::softmax_cols_backward(&s, g));
            })),
        )
    }

    /// Mean sigmoid cross entropy against a constant target; see
    /// [`losses::sigmoid_ce`] for the element-wise form.
    pub fn sigmoid_ce_mean(&self, logits: Var, target: Rc<Tensor<T>>) -> Result<Var> {
        let vx = self.value(logits);
        let loss = losses::sigmoid_ce(&vx, &target)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Some(Box::new(move |g, sink| {
                let mut dx = losses::sigmoid_ce_grad(&vx, &target).expect("shape fixed");
                let gs = g.item();
                for v in dx.data_mut() {
                    *v *= gs;
                }
                sink(logits.0, dx);
            })),
        ))
    }

    /// Runs the backward pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if !self.grad_enabled {
            return Err(Error::Numeric("backward on an inference tape".into()));
        }
        if nodes[root.0].value.len() != 1 {
            return Err(Error::Shape("backward root must be scalar".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[root.0] = Some(Tensor::scalar(T::one()));
        for id in (0..=root.0).rev() {
            if nodes[id].back.is_none() {
                continue; // leaf: keep its accumulated gradient
            }
            let Some(g) = grads[id].take() else { continue };
            let back = nodes[id].back.as_ref().unwrap();
            back(&g, &mut |pid, contrib| match &mut grads[pid] {
                Some(acc) => acc.add_assign(&contrib),
                slot => *slot = Some(contrib),
            });
        }
        Ok(Gradients { grads })
    }
}
