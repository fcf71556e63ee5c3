//! Reverse-mode differentiation over a linear tape of primitive applications.

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
    },
    Elu {
        x: Var,
        alpha: f64,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
    },
    Add(Var, Var),
    Flatten {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of forward primitive applications.
///
/// Each node stores its output value; the inputs needed by the backward
/// rule are read from earlier nodes, so backward visits nodes in exact
/// reverse order of recording.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient of the seeded output with respect to every tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, Var)>,
}

impl Gradients {
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradients for parameters `0..n_params`, zero-filled when a parameter
    /// did not influence the output.
    pub fn param_grads(&self, shapes: &[&[usize]]) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
        for &(id, var) in &self.params {
            if let (Some(slot), Some(g)) = (out.get_mut(id), self.wrt(var)) {
                slot.add_assign(g);
            }
        }
        out
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::State(format!("variable {} is not on this tape", v.0)))
        }
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    /// Records model parameter `id`; its gradient is reported by [`Gradients::param_grads`].
    pub fn param(&mut self, id: usize, value: Tensor) -> Var {
        self.push(value, Op::Param(id))
    }

    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        for v in [x, w, b] {
            self.check(v)?;
        }
        let y = ops::conv1d(self.value(x), self.value(w), self.value(b), stride, padding)?;
        Ok(self.push(
            y,
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                padding,
            },
        ))
    }

    pub fn elu(&mut self, x: Var, alpha: f64) -> Result<Var> {
        self.check(x)?;
        let y = ops::elu(self.value(x), alpha)?;
        Ok(self.push(y, Op::Elu { x, alpha }))
    }

    pub fn maxpool1d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        self.check(x)?;
        let (y, argmax) = ops::maxpool1d_with_indices(self.value(x), kernel, stride)?;
        Ok(self.push(y, Op::MaxPool { x, argmax }))
    }

    pub fn adaptive_avg_pool1d(&mut self, x: Var, out_len: usize) -> Result<Var> {
        self.check(x)?;
        let y = ops::adaptive_avg_pool1d(self.value(x), out_len)?;
        Ok(self.push(y, Op::AvgPool { x }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let y = self.value(a).add(self.value(b))?;
        y.ensure_finite("add")?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    /// Collapses every axis after the first: `[B, ...] -> [B, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let v = self.value(x);
        let batch = v.shape()[0];
        let y = v.clone().reshape(vec![batch, v.len() / batch])?;
        Ok(self.push(y, Op::Flatten { x }))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        for v in [x, w, b] {
            self.check(v)?;
        }
        let y = ops::linear(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Linear { x, w, b }))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let y = Tensor::scalar(self.value(x).sum());
        y.ensure_finite("sum")?;
        Ok(self.push(y, Op::Sum { x }))
    }

    /// Propagates `seed` (the gradient of the final objective with respect
    /// to `output`) back through the tape.
    pub fn backward(&self, output: Var, seed: &Tensor) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward called on an empty tape".into()));
        }
        self.check(output)?;
        if !self.value(output).same_shape(seed) {
            return Err(Error::Shape(format!(
                "backward seed {:?} does not match output {:?}",
                seed.shape(),
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed.clone());
        let mut params = Vec::new();

        fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if let Op::Param(id) = node.op {
                params.push((id, Var(i)));
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Input | Op::Param(_) => {}
                Op::Conv1d {
                    x,
                    w,
                    b,
                    stride,
                    padding,
                } => {
                    let (gx, gw, gb) =
                        ops::conv1d_backward(self.value(*x), self.value(*w), &g, *stride, *padding)?;
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Elu { x, alpha } => {
                    let gx = ops::elu_backward(self.value(*x), &g, *alpha)?;
                    accumulate(&mut grads, *x, gx);
                }
                Op::MaxPool { x, argmax } => {
                    let gx = ops::maxpool1d_backward(self.value(*x).shape(), argmax, &g)?;
                    accumulate(&mut grads, *x, gx);
                }
                Op::AvgPool { x } => {
                    let gx = ops::adaptive_avg_pool1d_backward(self.value(*x).shape(), &g)?;
                    accumulate(&mut grads, *x, gx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Flatten { x } => {
                    let gx = g.clone().reshape(self.value(*x).shape().to_vec())?;
                    accumulate(&mut grads, *x, gx);
                }
                Op::Linear { x, w, b } => {
                    let (gx, gw, gb) = ops::linear_backward(self.value(*x), self.value(*w), &g)?;
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Sum { x } => {
                    let gx = Tensor::full(self.value(*x).shape(), g.data()[0]);
                    accumulate(&mut grads, *x, gx);
                }
            }
            grads[i] = Some(g);
        }
        for (_, var) in &params {
            if let Some(g) = &grads[var.0] {
                g.ensure_finite("parameter gradient")?;
            }
        }
        params.reverse();
        Ok(Gradients { grads, params })
    }
}
