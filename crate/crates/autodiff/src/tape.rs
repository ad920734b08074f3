//! Reverse-mode tape.
//!
//! A [`Tape`] records one forward evaluation. Parameters are borrowed from a
//! [`ParamSet`](crate::ParamSet) rather than copied, so building a graph over a
//! large network only allocates activations. [`Tape::backward`] walks the
//! records in reverse and returns gradients for every node.

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvSpec};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<'p> {
    Owned(Tensor),
    Borrowed(&'p Tensor),
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
    Param(usize),
    Conv {
        x: Var,
        w: Var,
        b: Var,
        spec: ConvSpec,
        cols: Vec<f64>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample(Var),
    Relu(Var),
    Tanh(Var),
    Concat(Vec<Var>),
    Broadcast(Var),
    ScaleChannels(Var, Vec<f64>),
    Add(Var, Var),
    Mul(Var, Var),
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
}

#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Value<'p>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, t: Tensor, op: Op, name: &'static str) -> Result<Var> {
        let t = t.check_finite(name)?;
        Ok(self.push(Value::Owned(t), op))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    /// Record an input that is differentiated but not trained.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        self.push_checked(t, Op::Leaf, "leaf")
    }

    /// Borrow parameter `id` of `params` onto the tape.
    pub fn param(&mut self, params: &'p ParamSet, id: usize) -> Var {
        self.push(Value::Borrowed(params.tensor(id)), Op::Param(id))
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Result<Var> {
        let (out, cols) = kernels::conv_forward(self.value(x), self.value(w), self.value(b), &spec)?;
        self.push_checked(out, Op::Conv { x, w, b, spec, cols }, "conv")
    }

    pub fn maxpool(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = kernels::maxpool_forward(self.value(x))?;
        self.push_checked(out, Op::MaxPool { x, argmax }, "maxpool")
    }

    /// Nearest-neighbour ×2 upsampling cropped to `target` spatial extents.
    pub fn upsample(&mut self, x: Var, target: &[usize]) -> Result<Var> {
        let out = kernels::upsample_forward(self.value(x), target)?;
        self.push_checked(out, Op::Upsample(x), "upsample")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push_checked(out, Op::Relu(x), "relu")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::tanh);
        self.push_checked(out, Op::Tanh(x), "tanh")
    }

    /// Concatenate along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| TensorError::Shape("empty concat".into()))?);
        let spatial = first.spatial().to_vec();
        let mut channels = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.spatial() != spatial.as_slice() {
                return Err(TensorError::Shape(format!(
                    "concat spatial mismatch {:?} vs {:?}",
                    t.shape(),
                    spatial
                )));
            }
            channels += t.channels();
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![channels];
        shape.extend_from_slice(&spatial);
        let out = Tensor::from_vec(&shape, data)?;
        self.push_checked(out, Op::Concat(parts.to_vec()), "concat")
    }

    /// Broadcast a `[C]` vector to `[C, spatial..]`, constant per channel.
    pub fn broadcast(&mut self, x: Var, spatial: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if v.shape().len() != 1 {
            return Err(TensorError::Shape(format!("broadcast expects [C], got {:?}", v.shape())));
        }
        let s: usize = spatial.iter().product();
        let mut shape = vec![v.len()];
        shape.extend_from_slice(spatial);
        let data = v.data().iter().flat_map(|&c| std::iter::repeat(c).take(s)).collect();
        let out = Tensor::from_vec(&shape, data)?;
        self.push_checked(out, Op::Broadcast(x), "broadcast")
    }

    /// Multiply channel `c` by the constant `scale[c]`.
    pub fn scale_channels(&mut self, x: Var, scale: &[f64]) -> Result<Var> {
        let v = self.value(x);
        if v.channels() != scale.len() {
            return Err(TensorError::Shape(format!(
                "{} channel scales for {:?}",
                scale.len(),
                v.shape()
            )));
        }
        let s = v.spatial_len();
        let mut out = v.clone();
        for (c, chunk) in out.data_mut().chunks_mut(s).enumerate() {
            chunk.iter_mut().for_each(|e| *e *= scale[c]);
        }
        self.push_checked(out, Op::ScaleChannels(x, scale.to_vec()), "scale_channels")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::Shape(format!("add {:?} + {:?}", ta.shape(), tb.shape())));
        }
        let mut out = ta.clone();
        out.add_assign(tb);
        self.push_checked(out, Op::Add(a, b), "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::Shape(format!("mul {:?} * {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(ta.shape(), data)?;
        self.push_checked(out, Op::Mul(a, b), "mul")
    }

    /// Back-propagate `seed` (same shape as `output`) through the tape.
    pub fn backward(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.value(output).shape() {
            return Err(TensorError::Shape(format!(
                "seed {:?} for output {:?}",
                seed.shape(),
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Conv { x, w, b, spec, cols } => {
                    let xin = self.value(*x).spatial().to_vec();
                    let (gx, gw, gb) = kernels::conv_backward(&g, cols, self.value(*w), spec, &xin);
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MaxPool { x, argmax } => {
                    let gx = kernels::maxpool_backward(&g, argmax, self.value(*x).shape());
                    accumulate(&mut grads, *x, gx);
                }
                Op::Upsample(x) => {
                    let gx = kernels::upsample_backward(&g, self.value(*x).shape());
                    accumulate(&mut grads, *x, gx);
                }
                Op::Relu(x) => {
                    let xin = self.value(*x);
                    let data = g
                        .data()
                        .iter()
                        .zip(xin.data())
                        .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(g.shape(), data)?);
                }
                Op::Tanh(x) => {
                    let y = node.value.get();
                    let data = g.data().iter().zip(y.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(g.shape(), data)?);
                }
                Op::Concat(parts) => {
                    let s = g.spatial_len();
                    let mut offset = 0;
                    for &p in parts {
                        let shape = self.value(p).shape().to_vec();
                        let n = shape[0] * s;
                        let part = Tensor::from_vec(&shape, g.data()[offset..offset + n].to_vec())?;
                        offset += n;
                        accumulate(&mut grads, p, part);
                    }
                }
                Op::Broadcast(x) => {
                    let s = g.spatial_len();
                    let data = g.data().chunks(s).map(|c| c.iter().sum()).collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(self.value(*x).shape(), data)?);
                }
                Op::ScaleChannels(x, scale) => {
                    let s = g.spatial_len();
                    let mut gx = g;
                    for (c, chunk) in gx.data_mut().chunks_mut(s).enumerate() {
                        chunk.iter_mut().for_each(|e| *e *= scale[c]);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let ga = g.data().iter().zip(tb.data()).map(|(g, v)| g * v).collect();
                    let gb = g.data().iter().zip(ta.data()).map(|(g, v)| g * v).collect();
                    accumulate(&mut grads, *a, Tensor::from_vec(g.shape(), ga)?);
                    accumulate(&mut grads, *b, Tensor::from_vec(g.shape(), gb)?);
                }
            }
        }
        for g in grads.iter().flatten() {
            if !g.all_finite() {
                return Err(TensorError::NonFinite { op: "backward" });
            }
        }
        let param_ids = self
            .nodes
            .iter()
            .map(|n| match n.op {
                Op::Param(id) => Some(id),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, param_ids })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Gradients from one backward pass, addressable by node or by parameter id.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    param_ids: Vec<Option<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// As [`Gradients::for_params`], consuming the gradients to avoid copies.
    pub fn into_params(self, params: &ParamSet) -> Vec<Tensor> {
        let mut out: Vec<Option<Tensor>> = (0..params.len()).map(|_| None).collect();
        for (g, id) in self.grads.into_iter().zip(self.param_ids) {
            if let (Some(g), Some(id)) = (g, id) {
                match &mut out[id] {
                    Some(existing) => existing.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        out.into_iter()
            .enumerate()
            .map(|(i, g)| g.unwrap_or_else(|| Tensor::zeros(params.tensor(i).shape())))
            .collect()
    }

    /// Gradient for every parameter of `params`; parameters that did not
    /// take part in the graph get zeros. Repeated uses are summed.
    pub fn for_params(&self, params: &ParamSet) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = (0..params.len()).map(|i| Tensor::zeros(params.tensor(i).shape())).collect();
        for (g, id) in self.grads.iter().zip(&self.param_ids) {
            if let (Some(g), Some(id)) = (g, id) {
                out[*id].add_assign(g);
            }
        }
        out
    }
}
