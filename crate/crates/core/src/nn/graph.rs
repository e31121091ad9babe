//! Tape of operator applications supporting one reverse sweep.

use std::collections::BTreeMap;

use super::ops::{self, ConvSpec};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param,
    Conv { input: Var, weight: Var, bias: Var, spec: ConvSpec },
    Selu(Var),
    Resize(Var),
    Concat(Vec<Var>),
    MaxOverBatch { input: Var, argmax: Vec<u32> },
    Reshape(Var),
    Scale(Var, T),
    CrossEntropy { logits: Var, grad: Tensor<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Named parameter gradients produced by [`Graph::backward`].
pub type Gradients<T> = BTreeMap<String, Tensor<T>>;

#[derive(Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn take(mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Var {
        let v = self.push(value.clone(), Op::Param, true);
        self.params.push((name.to_string(), v));
        v
    }

    pub fn conv(&mut self, input: Var, weight: Var, bias: Var, spec: ConvSpec) -> Result<Var> {
        let out = ops::conv2d(self.value(input), &spec, self.value(weight), self.value(bias))?;
        let ng = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(out, Op::Conv { input, weight, bias, spec }, ng))
    }

    pub fn selu(&mut self, x: Var) -> Var {
        let out = ops::selu(self.value(x));
        let ng = self.needs(x);
        self.push(out, Op::Selu(x), ng)
    }

    pub fn resize(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let out = ops::resize_bilinear(self.value(x), h, w)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Resize(x), ng))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ops::concat_channels(&tensors)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::Concat(parts.to_vec()), ng))
    }

    pub fn max_over_batch(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = ops::max_over_batch(self.value(x))?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::MaxOverBatch { input: x, argmax }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, factor), ng)
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], valid: &[bool]) -> Result<Var> {
        let (loss, grad) = ops::cross_entropy(self.value(logits), labels, valid)?;
        let ng = self.needs(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, grad }, ng))
    }

    /// Reverse sweep from the scalar `loss`, returning gradients for every
    /// parameter registered with [`Graph::param`].
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Input => {}
                Op::Param => grads[idx] = Some(g),
                Op::Conv { input, weight, bias, spec } => {
                    let need_in = self.needs(*input);
                    let (gi, gw, gb) =
                        ops::conv2d_backward(self.value(*input), spec, self.value(*weight), &g, need_in)?;
                    if let Some(gi) = gi {
                        accumulate(&mut grads, *input, gi);
                    }
                    accumulate(&mut grads, *weight, gw);
                    accumulate(&mut grads, *bias, gb);
                }
                Op::Selu(x) => {
                    let gx = ops::selu_backward(self.value(*x), &g);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Resize(x) => {
                    let gx = ops::resize_bilinear_backward(self.value(*x).shape(), &g)?;
                    accumulate(&mut grads, *x, gx);
                }
                Op::Concat(parts) => {
                    let (b, _, h, w) = g.dims4()?;
                    let hw = h * w;
                    let c_total = g.shape()[1];
                    let mut offset = 0;
                    for &p in parts {
                        let (pb, pc, _, _) = self.value(p).dims4()?;
                        if self.needs(p) {
                            let mut gp = Tensor::zeros(self.value(p).shape());
                            for bi in 0..b {
                                let src = &g.data()[(bi * c_total + offset) * hw..(bi * c_total + offset + pc) * hw];
                                let dst_b = if pb == 1 { 0 } else { bi };
                                let dst = &mut gp.data_mut()[dst_b * pc * hw..(dst_b + 1) * pc * hw];
                                dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                            }
                            accumulate(&mut grads, p, gp);
                        }
                        offset += pc;
                    }
                }
                Op::MaxOverBatch { input, argmax } => {
                    let shape = self.value(*input).shape();
                    let per: usize = shape[1..].iter().product();
                    let mut gx = Tensor::zeros(shape);
                    for (i, (&a, &gv)) in argmax.iter().zip(g.data()).enumerate() {
                        gx.data_mut()[a as usize * per + i] = gv;
                    }
                    accumulate(&mut grads, *input, gx);
                }
                Op::Reshape(x) => {
                    let gx = g.reshape(self.value(*x).shape())?;
                    accumulate(&mut grads, *x, gx);
                }
                Op::Scale(x, f) => {
                    let gx = g.map(|v| v * *f);
                    accumulate(&mut grads, *x, gx);
                }
                Op::CrossEntropy { logits, grad } => {
                    let s = g.data()[0];
                    accumulate(&mut grads, *logits, grad.map(|v| v * s));
                }
            }
        }

        let mut out = Gradients::new();
        for (name, v) in &self.params {
            let g = grads[v.0].take().unwrap_or_else(|| Tensor::zeros(self.value(*v).shape()));
            out.insert(name.clone(), g);
        }
        Ok(out)
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}
