//! A minimal reverse-mode tape over batched `[rows, features]` matrices.
//!
//! Only the operations the lab needs are recorded: affine layers reading a
//! flat parameter vector, SiLU, column concatenation, linear combinations and
//! `detach`. Parameter vectors are borrowed for the tape's lifetime and
//! identified by address, so [`Gradients::params`] can be queried with the
//! same slice that was recorded.
//!
//! Backward visits only nodes that receive a gradient. A detached node never
//! forwards its gradient, so everything upstream of it (including the
//! parameters of a frozen network) ends with an exactly-zero gradient.

use ndarray::{linalg::general_mat_mul, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Location of one affine layer inside a flat parameter vector. The weight is
/// stored row-major as `[fan_in, fan_out]`, followed by a `[fan_out]` bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinearLayout {
    pub offset: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl LinearLayout {
    pub fn weight_len(&self) -> usize {
        self.fan_in * self.fan_out
    }

    pub fn len(&self) -> usize {
        self.weight_len() + self.fan_out
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn weight<'a>(&self, params: &'a [f64]) -> ArrayView2<'a, f64> {
        let w = &params[self.offset..self.offset + self.weight_len()];
        ArrayView2::from_shape((self.fan_in, self.fan_out), w).expect("layout matches parameter vector")
    }

    pub fn bias<'a>(&self, params: &'a [f64]) -> ArrayView1<'a, f64> {
        let start = self.offset + self.weight_len();
        ArrayView1::from(&params[start..start + self.fan_out])
    }
}

pub(crate) fn linear_forward(x: &ArrayView2<f64>, params: &[f64], layer: &LinearLayout) -> Array2<f64> {
    let mut y = x.dot(&layer.weight(params));
    y += &layer.bias(params);
    y
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub(crate) fn silu(v: f64) -> f64 {
    v * sigmoid(v)
}

fn silu_grad(v: f64) -> f64 {
    let s = sigmoid(v);
    s * (1.0 + v * (1.0 - s))
}

pub(crate) fn silu_forward(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(silu)
}

enum Op {
    Leaf,
    Linear { input: usize, slot: usize, layer: LinearLayout },
    Silu { input: usize },
    Concat { parts: Vec<usize> },
    Lincomb { a: usize, ca: f64, b: usize, cb: f64 },
    Detach,
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node>,
    slots: Vec<&'p [f64]>,
}

pub struct Gradients {
    nodes: Vec<Option<Array2<f64>>>,
    params: Vec<Vec<f64>>,
    slot_keys: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to a recorded parameter vector; all zeros if
    /// nothing reached it, `None` if it was never recorded.
    pub fn params(&self, params: &[f64]) -> Option<&[f64]> {
        let key = (params.as_ptr() as usize, params.len());
        self.slot_keys.iter().position(|k| *k == key).map(|i| self.params[i].as_slice())
    }

    /// Gradient that reached a leaf or a detach point; `None` when nothing
    /// reached it. Interior nodes do not keep their gradients.
    pub fn wrt(&self, v: Var) -> Option<&Array2<f64>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn slot(&mut self, params: &'p [f64]) -> usize {
        let key = (params.as_ptr() as usize, params.len());
        if let Some(i) = self.slots.iter().position(|s| (s.as_ptr() as usize, s.len()) == key) {
            return i;
        }
        self.slots.push(params);
        self.slots.len() - 1
    }

    /// A leaf that backward treats as a differentiable input.
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn linear(&mut self, x: Var, params: &'p [f64], layer: LinearLayout) -> Var {
        let slot = self.slot(params);
        let y = linear_forward(&self.nodes[x.0].value.view(), params, &layer);
        self.push(y, Op::Linear { input: x.0, slot, layer }, true)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let node = &self.nodes[x.0];
        let y = silu_forward(&node.value);
        let ng = node.needs_grad;
        self.push(y, Op::Silu { input: x.0 }, ng)
    }

    /// Column-wise concatenation; all parts must share the row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let y = ndarray::concatenate(Axis(1), &views)
            .map_err(|e| Error::Format(format!("concat: {e}")))?;
        let ng = parts.iter().any(|p| self.nodes[p.0].needs_grad);
        Ok(self.push(y, Op::Concat { parts: parts.iter().map(|p| p.0).collect() }, ng))
    }

    /// `ca * a + cb * b`.
    pub fn lincomb(&mut self, a: Var, ca: f64, b: Var, cb: f64) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.dim() != vb.dim() {
            return Err(Error::ShapeMismatch {
                expected: vec![va.nrows(), va.ncols()],
                got: vec![vb.nrows(), vb.ncols()],
            });
        }
        let mut y = va * ca;
        y.scaled_add(cb, vb);
        let ng = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        Ok(self.push(y, Op::Lincomb { a: a.0, ca, b: b.0, cb }, ng))
    }

    /// Stop-gradient: same value, no gradient flows back through it.
    pub fn detach(&mut self, x: Var) -> Var {
        let y = self.nodes[x.0].value.clone();
        self.push(y, Op::Detach, false)
    }

    /// Reverse pass from `root` seeded with `dL/droot`.
    pub fn backward(&self, root: Var, seed: Array2<f64>) -> Result<Gradients> {
        let rv = &self.nodes[root.0].value;
        if rv.dim() != seed.dim() {
            return Err(Error::ShapeMismatch {
                expected: vec![rv.nrows(), rv.ncols()],
                got: vec![seed.nrows(), seed.ncols()],
            });
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        let mut pgrads: Vec<Vec<f64>> = self.slots.iter().map(|s| vec![0.0; s.len()]).collect();
        grads[root.0] = Some(seed);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Detach => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Linear { input, slot, layer } => {
                    let x = &self.nodes[*input].value;
                    let params = self.slots[*slot];
                    let pg = &mut pgrads[*slot];
                    {
                        let (wg, bg) = pg[layer.offset..layer.offset + layer.len()].split_at_mut(layer.weight_len());
                        let mut wg = ArrayViewMut2::from_shape((layer.fan_in, layer.fan_out), wg)
                            .expect("layout matches parameter vector");
                        general_mat_mul(1.0, &x.t(), &g, 1.0, &mut wg);
                        for row in g.rows() {
                            for (b, v) in bg.iter_mut().zip(row) {
                                *b += v;
                            }
                        }
                    }
                    if self.nodes[*input].needs_grad {
                        let dx = g.dot(&layer.weight(params).t());
                        accumulate(&mut grads[*input], dx);
                    }
                }
                Op::Silu { input } => {
                    let x = &self.nodes[*input].value;
                    let mut dx = g;
                    dx.zip_mut_with(x, |d, &v| *d *= silu_grad(v));
                    accumulate(&mut grads[*input], dx);
                }
                Op::Concat { parts } => {
                    let mut col = 0;
                    for &p in parts {
                        let w = self.nodes[p].value.ncols();
                        if self.nodes[p].needs_grad {
                            let piece = g.slice(ndarray::s![.., col..col + w]).to_owned();
                            accumulate(&mut grads[p], piece);
                        }
                        col += w;
                    }
                }
                Op::Lincomb { a, ca, b, cb } => {
                    if self.nodes[*a].needs_grad {
                        accumulate(&mut grads[*a], &g * *ca);
                    }
                    if self.nodes[*b].needs_grad {
                        accumulate(&mut grads[*b], &g * *cb);
                    }
                }
            }
        }
        Ok(Gradients {
            nodes: grads,
            params: pgrads,
            slot_keys: self.slots.iter().map(|s| (s.as_ptr() as usize, s.len())).collect(),
        })
    }

    /// Mean squared error against `target` over every element, and its
    /// gradients.
    pub fn mse_backward(&self, root: Var, target: &Array2<f64>) -> Result<(f64, Gradients)> {
        let y = &self.nodes[root.0].value;
        if y.dim() != target.dim() {
            return Err(Error::ShapeMismatch {
                expected: vec![y.nrows(), y.ncols()],
                got: vec![target.nrows(), target.ncols()],
            });
        }
        let diff = y - target;
        let n = diff.len() as f64;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
        let grads = self.backward(root, diff * (2.0 / n))?;
        Ok((loss, grads))
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}
