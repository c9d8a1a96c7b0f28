//! Dynamic reverse-mode autodiff: every op on a recording [`Tape`] pushes a
//! node holding its adjoint closure; [`Tape::backward`] walks them in reverse.

use std::cell::RefCell;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::kernels::{self, Conv2dSpec};
use crate::tensor::Tensor;

type Adjoint<E> = Box<dyn Fn(&Tensor<E>) -> Result<Vec<Option<Tensor<E>>>>>;

struct Node<E: Element> {
    parents: Vec<Option<usize>>,
    adjoint: Option<Adjoint<E>>,
}

/// A value flowing through a [`Tape`]. Constants carry no node.
#[derive(Clone, Debug)]
pub struct Var<E: Element = f32> {
    value: Tensor<E>,
    node: Option<usize>,
}

impl<E: Element> Var<E> {
    pub fn value(&self) -> &Tensor<E> {
        &self.value
    }

    pub fn into_value(self) -> Tensor<E> {
        self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<E: Element> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Gradients<E> {
    pub fn get(&self, var: &Var<E>) -> Option<&Tensor<E>> {
        var.node.and_then(|id| self.grads[id].as_ref())
    }

    /// Gradient of `var`, or zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, var: &Var<E>) -> Tensor<E> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

pub struct Tape<E: Element = f32> {
    nodes: RefCell<Vec<Node<E>>>,
    recording: bool,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A tape that records nothing; intermediate values are freed as soon as
    /// their `Var`s drop.
    pub fn no_grad() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops all recorded nodes. Vars created before the reset must not be reused.
    pub fn reset(&self) {
        self.nodes.borrow_mut().clear();
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor<E>) -> Var<E> {
        if !self.recording {
            return Var { value, node: None };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents: Vec::new(),
            adjoint: None,
        });
        Var {
            value,
            node: Some(nodes.len() - 1),
        }
    }

    pub fn constant(&self, value: Tensor<E>) -> Var<E> {
        Var { value, node: None }
    }

    fn push(&self, value: Tensor<E>, parents: &[&Var<E>], adjoint: Adjoint<E>) -> Var<E> {
        if !self.recording || parents.iter().all(|p| p.node.is_none()) {
            return Var { value, node: None };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents: parents.iter().map(|p| p.node).collect(),
            adjoint: Some(adjoint),
        });
        Var {
            value,
            node: Some(nodes.len() - 1),
        }
    }

    /// Reverse sweep from a scalar `loss`. The tape is left intact, so the
    /// sweep can be repeated.
    pub fn backward(&self, loss: &Var<E>) -> Result<Gradients<E>> {
        if !loss.value.is_scalar() {
            return Err(TensorError::NotScalar(loss.shape().to_vec()));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<E>>> = vec![None; nodes.len()];
        let Some(root) = loss.node else {
            return Ok(Gradients { grads });
        };
        grads[root] = Some(Tensor::ones(loss.shape()));
        for id in (0..=root).rev() {
            let node = &nodes[id];
            let Some(adjoint) = node.adjoint.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let parent_grads = adjoint(&g)?;
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                if let (Some(pid), Some(pg)) = (parent, pg) {
                    match &mut grads[*pid] {
                        Some(acc) => acc.add_assign(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn binary(
        &self,
        a: &Var<E>,
        b: &Var<E>,
        op: &'static str,
        f: impl Fn(E, E) -> E,
        adjoint: Adjoint<E>,
    ) -> Result<Var<E>> {
        let out = a.value.zip_map(&b.value, op, f)?;
        Ok(self.push(out, &[a, b], adjoint))
    }

    pub fn add(&self, a: &Var<E>, b: &Var<E>) -> Result<Var<E>> {
        self.binary(a, b, "add", |x, y| x + y, Box::new(|g| Ok(vec![Some(g.clone()), Some(g.clone())])))
    }

    pub fn sub(&self, a: &Var<E>, b: &Var<E>) -> Result<Var<E>> {
        self.binary(
            a,
            b,
            "sub",
            |x, y| x - y,
            Box::new(|g| Ok(vec![Some(g.clone()), Some(g.map(|v| -v))])),
        )
    }

    pub fn mul(&self, a: &Var<E>, b: &Var<E>) -> Result<Var<E>> {
        let (av, bv) = (a.value.clone(), b.value.clone());
        self.binary(
            a,
            b,
            "mul",
            |x, y| x * y,
            Box::new(move |g| {
                Ok(vec![
                    Some(g.zip_map(&bv, "mul", |g, y| g * y)?),
                    Some(g.zip_map(&av, "mul", |g, x| g * x)?),
                ])
            }),
        )
    }

    pub fn div(&self, a: &Var<E>, b: &Var<E>) -> Result<Var<E>> {
        let (av, bv) = (a.value.clone(), b.value.clone());
        self.binary(
            a,
            b,
            "div",
            |x, y| x / y,
            Box::new(move |g| {
                let ga = g.zip_map(&bv, "div", |g, y| g / y)?;
                let gb = ga.zip_map(&av, "div", |q, x| q * x)?.zip_map(&bv, "div", |v, y| -v / y)?;
                Ok(vec![Some(ga), Some(gb)])
            }),
        )
    }

    /// `x + y` with `y`'s shape a suffix of `x`'s (bias add, positional tables).
    pub fn add_bcast(&self, x: &Var<E>, y: &Var<E>) -> Result<Var<E>> {
        let out = kernels::bcast_suffix(&x.value, &y.value, "add_bcast", |a, b| a + b)?;
        let yshape = y.shape().to_vec();
        Ok(self.push(
            out,
            &[x, y],
            Box::new(move |g| Ok(vec![Some(g.clone()), Some(kernels::sum_to_shape(g, &yshape)?)])),
        ))
    }

    /// `x * y` with `y`'s shape a suffix of `x`'s.
    pub fn mul_bcast(&self, x: &Var<E>, y: &Var<E>) -> Result<Var<E>> {
        let out = kernels::bcast_suffix(&x.value, &y.value, "mul_bcast", |a, b| a * b)?;
        let (xv, yv) = (x.value.clone(), y.value.clone());
        Ok(self.push(
            out,
            &[x, y],
            Box::new(move |g| {
                let gx = kernels::bcast_suffix(g, &yv, "mul_bcast", |g, b| g * b)?;
                let gy = kernels::sum_to_shape(&g.zip_map(&xv, "mul_bcast", |g, a| g * a)?, yv.shape())?;
                Ok(vec![Some(gx), Some(gy)])
            }),
        ))
    }

    fn unary(
        &self,
        x: &Var<E>,
        f: impl Fn(E) -> E,
        df: impl Fn(E, E) -> E + 'static,
    ) -> Var<E> {
        let out = x.value.map(f);
        let (xv, yv) = (x.value.clone(), out.clone());
        self.push(
            out,
            &[x],
            Box::new(move |g| {
                let d: Vec<E> = g
                    .data()
                    .iter()
                    .zip(xv.data().iter().zip(yv.data()))
                    .map(|(&g, (&x, &y))| g * df(x, y))
                    .collect();
                Ok(vec![Some(Tensor::from_vec(g.shape(), d)?)])
            }),
        )
    }

    pub fn add_scalar(&self, x: &Var<E>, c: f64) -> Var<E> {
        let c = E::of(c);
        self.unary(x, move |v| v + c, |_, _| E::one())
    }

    pub fn mul_scalar(&self, x: &Var<E>, c: f64) -> Var<E> {
        let c = E::of(c);
        self.unary(x, move |v| v * c, move |_, _| c)
    }

    pub fn neg(&self, x: &Var<E>) -> Var<E> {
        self.mul_scalar(x, -1.0)
    }

    pub fn abs(&self, x: &Var<E>) -> Var<E> {
        self.unary(
            x,
            |v| v.abs(),
            |x, _| {
                if x > E::zero() {
                    E::one()
                } else if x < E::zero() {
                    -E::one()
                } else {
                    E::zero()
                }
            },
        )
    }

    /// Clamp to `[lo, hi]`; the gradient passes where `lo <= x <= hi`.
    pub fn clamp(&self, x: &Var<E>, lo: f64, hi: f64) -> Var<E> {
        let (lo, hi) = (E::of(lo), E::of(hi));
        self.unary(
            x,
            move |v| v.max(lo).min(hi),
            move |x, _| if x >= lo && x <= hi { E::one() } else { E::zero() },
        )
    }

    pub fn sigmoid(&self, x: &Var<E>) -> Var<E> {
        self.unary(x, sigmoid, |_, y| y * (E::one() - y))
    }

    pub fn silu(&self, x: &Var<E>) -> Var<E> {
        self.unary(
            x,
            |v| v * sigmoid(v),
            |x, _| {
                let s = sigmoid(x);
                s + x * s * (E::one() - s)
            },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, x: &Var<E>) -> Var<E> {
        let c = E::of((2.0 / std::f64::consts::PI).sqrt());
        let k = E::of(0.044715);
        let half = E::of(0.5);
        let three = E::of(3.0);
        self.unary(
            x,
            move |v| half * v * (E::one() + (c * (v + k * v * v * v)).tanh()),
            move |x, _| {
                let t = (c * (x + k * x * x * x)).tanh();
                half * (E::one() + t)
                    + half * x * (E::one() - t * t) * c * (E::one() + three * k * x * x)
            },
        )
    }

    pub fn sum(&self, x: &Var<E>) -> Var<E> {
        let total: E = x.value.data().iter().copied().sum();
        let shape = x.shape().to_vec();
        self.push(
            Tensor::scalar(total),
            &[x],
            Box::new(move |g| Ok(vec![Some(Tensor::full(&shape, g.item()))])),
        )
    }

    pub fn mean(&self, x: &Var<E>) -> Var<E> {
        let n = x.value.numel().max(1) as f64;
        let s = self.sum(x);
        self.mul_scalar(&s, 1.0 / n)
    }

    pub fn matmul(&self, a: &Var<E>, b: &Var<E>) -> Result<Var<E>> {
        let out = kernels::matmul(&a.value, &b.value)?;
        let (av, bv) = (a.value.clone(), b.value.clone());
        Ok(self.push(
            out,
            &[a, b],
            Box::new(move |g| {
                let ga = kernels::sum_to_shape(&kernels::matmul_t(g, false, &bv, true)?, av.shape())?;
                let gb = if bv.rank() == 2 && av.rank() > 2 {
                    let k = av.dim(av.rank() - 1);
                    let p = g.dim(g.rank() - 1);
                    let a2 = av.reshape(&[av.numel() / k, k])?;
                    let g2 = g.reshape(&[g.numel() / p, p])?;
                    kernels::matmul_t(&a2, true, &g2, false)?
                } else {
                    kernels::sum_to_shape(&kernels::matmul_t(&av, true, g, false)?, bv.shape())?
                };
                Ok(vec![Some(ga), Some(gb)])
            }),
        ))
    }

    /// `x @ w + b` with `w: [in, out]`, `b: [out]`.
    pub fn linear(&self, x: &Var<E>, w: &Var<E>, b: Option<&Var<E>>) -> Result<Var<E>> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bcast(&y, b),
            None => Ok(y),
        }
    }

    pub fn reshape(&self, x: &Var<E>, shape: &[usize]) -> Result<Var<E>> {
        let out = x.value.reshape(shape)?;
        let orig = x.shape().to_vec();
        Ok(self.push(out, &[x], Box::new(move |g| Ok(vec![Some(g.reshape(&orig)?)]))))
    }

    pub fn permute(&self, x: &Var<E>, axes: &[usize]) -> Result<Var<E>> {
        let out = kernels::permute(&x.value, axes)?;
        let inv = kernels::inverse_permutation(axes);
        Ok(self.push(out, &[x], Box::new(move |g| Ok(vec![Some(kernels::permute(g, &inv)?)]))))
    }

    pub fn transpose(&self, x: &Var<E>, a: usize, b: usize) -> Result<Var<E>> {
        let mut axes: Vec<usize> = (0..x.value.rank()).collect();
        if a >= axes.len() || b >= axes.len() {
            return Err(TensorError::Axis {
                op: "transpose",
                axis: a.max(b),
                rank: axes.len(),
            });
        }
        axes.swap(a, b);
        self.permute(x, &axes)
    }

    pub fn concat(&self, xs: &[&Var<E>], axis: usize) -> Result<Var<E>> {
        let values: Vec<&Tensor<E>> = xs.iter().map(|x| &x.value).collect();
        let out = kernels::concat(&values, axis)?;
        let sizes: Vec<usize> = xs.iter().map(|x| x.shape()[axis]).collect();
        Ok(self.push(
            out,
            xs,
            Box::new(move |g| {
                let mut start = 0;
                let mut parts = Vec::with_capacity(sizes.len());
                for &len in &sizes {
                    parts.push(Some(kernels::slice(g, axis, start, len)?));
                    start += len;
                }
                Ok(parts)
            }),
        ))
    }

    pub fn slice(&self, x: &Var<E>, axis: usize, start: usize, len: usize) -> Result<Var<E>> {
        let out = kernels::slice(&x.value, axis, start, len)?;
        let full = x.shape().to_vec();
        Ok(self.push(
            out,
            &[x],
            Box::new(move |g| Ok(vec![Some(kernels::unslice(g, &full, axis, start))])),
        ))
    }

    pub fn split(&self, x: &Var<E>, axis: usize, sizes: &[usize]) -> Result<Vec<Var<E>>> {
        let total: usize = sizes.iter().sum();
        if axis >= x.value.rank() || total != x.shape()[axis] {
            return Err(TensorError::InvalidShape {
                op: "split",
                shape: x.shape().to_vec(),
                reason: format!("sizes {sizes:?} do not cover axis {axis}"),
            });
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice(x, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    pub fn expand(&self, x: &Var<E>, axis: usize, n: usize) -> Result<Var<E>> {
        let out = kernels::expand(&x.value, axis, n)?;
        Ok(self.push(
            out,
            &[x],
            Box::new(move |g| Ok(vec![Some(kernels::sum_axis_keepdim(g, axis)?)])),
        ))
    }

    pub fn softmax(&self, x: &Var<E>) -> Result<Var<E>> {
        let out = kernels::softmax_last(&x.value)?;
        let y = out.clone();
        let d = *x.shape().last().unwrap_or(&1);
        Ok(self.push(
            out,
            &[x],
            Box::new(move |g| {
                let mut dx = Vec::with_capacity(g.numel());
                for (gr, yr) in g.data().chunks_exact(d).zip(y.data().chunks_exact(d)) {
                    let dot: E = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    dx.extend(gr.iter().zip(yr).map(|(&g, &y)| y * (g - dot)));
                }
                Ok(vec![Some(Tensor::from_vec(g.shape(), dx)?)])
            }),
        ))
    }

    pub fn layer_norm(&self, x: &Var<E>, eps: f64) -> Result<Var<E>> {
        let (out, rstd) = kernels::layer_norm_last(&x.value, eps)?;
        let y = out.clone();
        let d = *x.shape().last().unwrap_or(&1);
        Ok(self.push(
            out,
            &[x],
            Box::new(move |g| {
                let inv_d = E::one() / E::of(d as f64);
                let mut dx = Vec::with_capacity(g.numel());
                for ((gr, yr), &r) in g.data().chunks_exact(d).zip(y.data().chunks_exact(d)).zip(&rstd) {
                    let mg = gr.iter().copied().sum::<E>() * inv_d;
                    let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<E>() * inv_d;
                    dx.extend(gr.iter().zip(yr).map(|(&g, &y)| r * (g - mg - y * mgy)));
                }
                Ok(vec![Some(Tensor::from_vec(g.shape(), dx)?)])
            }),
        ))
    }

    pub fn conv2d(
        &self,
        x: &Var<E>,
        w: &Var<E>,
        bias: Option<&Var<E>>,
        spec: Conv2dSpec,
    ) -> Result<Var<E>> {
        let out = kernels::conv2d(&x.value, &w.value, bias.map(|b| &b.value), spec)?;
        let (xv, wv) = (x.value.clone(), w.value.clone());
        let mut parents = vec![x, w];
        if let Some(b) = bias {
            parents.push(b);
        }
        let has_bias = bias.is_some();
        Ok(self.push(
            out,
            &parents,
            Box::new(move |g| {
                let kernel = (wv.dim(2), wv.dim(3));
                let gx = kernels::conv2d_input_grad(g, &wv, (xv.dim(2), xv.dim(3)), spec)?;
                let gw = kernels::conv2d_weight_grad(&xv, g, kernel, spec);
                let mut grads = vec![Some(gx), Some(gw)];
                if has_bias {
                    let cout = g.dim(1);
                    let plane = g.dim(2) * g.dim(3);
                    let mut gb = vec![E::zero(); cout];
                    for (i, chunk) in g.data().chunks_exact(plane.max(1)).enumerate() {
                        gb[i % cout] = gb[i % cout] + chunk.iter().copied().sum::<E>();
                    }
                    grads.push(Some(Tensor::from_vec(&[cout], gb)?));
                }
                Ok(grads)
            }),
        ))
    }

    pub fn area_downsample(&self, x: &Var<E>, f: usize) -> Result<Var<E>> {
        let out = kernels::area_downsample(&x.value, f)?;
        let inv = 1.0 / (f * f) as f64;
        Ok(self.push(
            out,
            &[x],
            Box::new(move |g| {
                let up = kernels::nearest_upsample(g, f)?;
                Ok(vec![Some(up.map(|v| v * E::of(inv)))])
            }),
        ))
    }

    pub fn nearest_upsample(&self, x: &Var<E>, f: usize) -> Result<Var<E>> {
        let out = kernels::nearest_upsample(&x.value, f)?;
        Ok(self.push(out, &[x], Box::new(move |g| Ok(vec![Some(kernels::block_sum(g, f)?)]))))
    }

    /// Replaces entries where `mask` is set with `value`; those entries get no gradient.
    pub fn masked_fill(&self, x: &Var<E>, mask: &[bool], value: f64) -> Result<Var<E>> {
        if mask.len() != x.value.numel() {
            return Err(TensorError::InvalidShape {
                op: "masked_fill",
                shape: x.shape().to_vec(),
                reason: format!("mask has {} entries", mask.len()),
            });
        }
        let fill = E::of(value);
        let data: Vec<E> = x
            .value
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { fill } else { v })
            .collect();
        let out = Tensor::from_vec(x.shape(), data)?;
        let mask = mask.to_vec();
        Ok(self.push(
            out,
            &[x],
            Box::new(move |g| {
                let d: Vec<E> = g
                    .data()
                    .iter()
                    .zip(&mask)
                    .map(|(&g, &m)| if m { E::zero() } else { g })
                    .collect();
                Ok(vec![Some(Tensor::from_vec(g.shape(), d)?)])
            }),
        ))
    }

    /// Fused scaled dot-product attention over `[..., S, D]`.
    pub fn attention(&self, q: &Var<E>, k: &Var<E>, v: &Var<E>) -> Result<Var<E>> {
        let out = kernels::attention(&q.value, &k.value, &v.value)?;
        let (qv, kv, vv, ov) = (q.value.clone(), k.value.clone(), v.value.clone(), out.clone());
        Ok(self.push(
            out,
            &[q, k, v],
            Box::new(move |g| {
                let (dq, dk, dv) = kernels::attention_backward(&qv, &kv, &vv, &ov, g)?;
                Ok(vec![Some(dq), Some(dk), Some(dv)])
            }),
        ))
    }
}

fn sigmoid<E: Element>(v: E) -> E {
    E::one() / (E::one() + (-v).exp())
}
