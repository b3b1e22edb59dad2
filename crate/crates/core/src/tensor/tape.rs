//! Reverse-mode autodiff over an operation tape.
//!
//! Every op appends one node holding its forward value; nodes reference
//! their inputs by index, so the tape is topologically ordered by
//! construction. `backward` replays the tape once in reverse, accumulating
//! gradients in f64, and returns them keyed by parameter name.

use std::collections::BTreeMap;

use super::kernels::{self, Padding};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

/// Gradients keyed by parameter name, in deterministic (sorted) order.
pub type GradMap = BTreeMap<String, Tensor>;

enum Step {
    Leaf,
    Conv2d {
        input: ValueId,
        kernel: ValueId,
        stride: usize,
        padding: Padding,
    },
    AddBias {
        input: ValueId,
        bias: ValueId,
    },
    Relu {
        input: ValueId,
    },
    MaxPool2d {
        input: ValueId,
        argmax: Vec<u32>,
    },
    GlobalAvgPool {
        input: ValueId,
    },
    ConcatChannels {
        inputs: Vec<ValueId>,
    },
    Matmul {
        a: ValueId,
        b: ValueId,
    },
    ElemMul {
        a: ValueId,
        b: ValueId,
    },
    SoftmaxTemp {
        input: ValueId,
        tau: f32,
    },
    CrossEntropy {
        logits: ValueId,
        labels: ValueId,
    },
    KlDiv {
        p: ValueId,
        q: ValueId,
    },
    AddScaled {
        a: ValueId,
        b: ValueId,
        ca: f32,
        cb: f32,
    },
    SumAll {
        input: ValueId,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f32>,
    step: Step,
    needs_grad: bool,
    name: Option<String>,
}

/// Single-owner autodiff tape: one forward pass, one backward pass.
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, step: Step, needs_grad: bool) -> ValueId {
        self.nodes.push(Node {
            shape,
            data,
            step,
            needs_grad,
            name: None,
        });
        ValueId(self.nodes.len() - 1)
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Record a constant leaf; no gradient will be tracked for it.
    pub fn constant(&mut self, t: &Tensor) -> ValueId {
        self.push(t.shape().to_vec(), t.data().to_vec(), Step::Leaf, false)
    }

    /// Record a named parameter leaf. Gradient is tracked when the tensor
    /// has `requires_grad` set, and lands in the backward map under `name`.
    pub fn param(&mut self, name: &str, t: &Tensor) -> ValueId {
        let id = self.push(t.shape().to_vec(), t.data().to_vec(), Step::Leaf, t.requires_grad());
        self.nodes[id.0].name = Some(name.to_string());
        id
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: ValueId) -> &[f32] {
        &self.nodes[id.0].data
    }

    /// Copy a recorded value out as a plain tensor.
    pub fn value(&self, id: ValueId) -> Tensor {
        Tensor::from_vec(self.nodes[id.0].shape.clone(), self.nodes[id.0].data.clone())
            .expect("tape nodes hold consistent shapes")
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn conv2d(&mut self, input: ValueId, kernel: ValueId, stride: usize, padding: Padding) -> Result<ValueId> {
        let (data, shape) = kernels::conv2d_forward(
            self.data(input),
            self.shape(input),
            self.data(kernel),
            self.shape(kernel),
            stride,
            padding,
        )?;
        let needs = self.needs(input) || self.needs(kernel);
        Ok(self.push(
            shape,
            data,
            Step::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
            needs,
        ))
    }

    /// Add a `[F]` bias to the last axis of `input`.
    pub fn add_bias(&mut self, input: ValueId, bias: ValueId) -> Result<ValueId> {
        let f = *self.shape(input).last().unwrap_or(&0);
        if self.shape(bias) != [f] {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} vs channels {f}", self.shape(bias)),
            ));
        }
        let bias_data = self.data(bias).to_vec();
        let mut data = self.data(input).to_vec();
        for chunk in data.chunks_mut(f) {
            for (v, &b) in chunk.iter_mut().zip(&bias_data) {
                *v += b;
            }
        }
        let shape = self.shape(input).to_vec();
        let needs = self.needs(input) || self.needs(bias);
        Ok(self.push(shape, data, Step::AddBias { input, bias }, needs))
    }

    pub fn relu(&mut self, input: ValueId) -> ValueId {
        let data: Vec<f32> = self.data(input).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(input).to_vec();
        let needs = self.needs(input);
        self.push(shape, data, Step::Relu { input }, needs)
    }

    pub fn max_pool2d(&mut self, input: ValueId, win: usize, stride: usize, padding: Padding) -> Result<ValueId> {
        let (data, shape, argmax) =
            kernels::max_pool_forward(self.data(input), self.shape(input), win, stride, padding)?;
        let needs = self.needs(input);
        Ok(self.push(shape, data, Step::MaxPool2d { input, argmax }, needs))
    }

    /// [N,H,W,C] -> [N,C] spatial mean.
    pub fn global_avg_pool(&mut self, input: ValueId) -> Result<ValueId> {
        let s = self.shape(input);
        if s.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("want rank 4, got {s:?}")));
        }
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let src = self.data(input);
        let mut data = vec![0.0f32; n * c];
        for bi in 0..n {
            let mut acc = vec![0.0f64; c];
            for px in 0..h * w {
                let base = (bi * h * w + px) * c;
                for ci in 0..c {
                    acc[ci] += src[base + ci] as f64;
                }
            }
            for ci in 0..c {
                data[bi * c + ci] = (acc[ci] / (h * w) as f64) as f32;
            }
        }
        let needs = self.needs(input);
        Ok(self.push(vec![n, c], data, Step::GlobalAvgPool { input }, needs))
    }

    /// Concatenate NHWC tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[ValueId]) -> Result<ValueId> {
        if inputs.is_empty() {
            return Err(Error::shape("concat_channels", "empty input list".to_string()));
        }
        let lead = self.shape(inputs[0])[..3].to_vec();
        let mut c_total = 0;
        for &id in inputs {
            let s = self.shape(id);
            if s.len() != 4 || s[..3] != lead[..] {
                return Err(Error::shape(
                    "concat_channels",
                    format!("incompatible shapes {:?} vs {:?}", self.shape(inputs[0]), s),
                ));
            }
            c_total += s[3];
        }
        let (n, h, w) = (lead[0], lead[1], lead[2]);
        let mut data = vec![0.0f32; n * h * w * c_total];
        let mut offset = 0;
        for &id in inputs {
            let ci = self.shape(id)[3];
            let src = self.data(id);
            for px in 0..n * h * w {
                data[px * c_total + offset..px * c_total + offset + ci]
                    .copy_from_slice(&src[px * ci..(px + 1) * ci]);
            }
            offset += ci;
        }
        let needs = inputs.iter().any(|&id| self.needs(id));
        Ok(self.push(
            vec![n, h, w, c_total],
            data,
            Step::ConcatChannels {
                inputs: inputs.to_vec(),
            },
            needs,
        ))
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (data, shape) = kernels::matmul_forward(self.data(a), self.shape(a), self.data(b), self.shape(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(shape, data, Step::Matmul { a, b }, needs))
    }

    pub fn elem_mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "elem_mul",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data: Vec<f32> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(shape, data, Step::ElemMul { a, b }, needs))
    }

    pub fn softmax_temperature(&mut self, input: ValueId, tau: f32) -> Result<ValueId> {
        let data = kernels::softmax_temp_forward(self.data(input), self.shape(input), tau)?;
        let shape = self.shape(input).to_vec();
        let needs = self.needs(input);
        Ok(self.push(shape, data, Step::SoftmaxTemp { input, tau }, needs))
    }

    pub fn cross_entropy(&mut self, logits: ValueId, labels: ValueId) -> Result<ValueId> {
        let v = kernels::cross_entropy_forward(
            self.data(logits),
            self.data(labels),
            self.shape(logits),
            self.shape(labels),
        )?;
        let needs = self.needs(logits) || self.needs(labels);
        Ok(self.push(vec![1], vec![v], Step::CrossEntropy { logits, labels }, needs))
    }

    pub fn kl_divergence(&mut self, p: ValueId, q: ValueId) -> Result<ValueId> {
        let v = kernels::kl_div_forward(self.data(p), self.data(q), self.shape(p), self.shape(q))?;
        let needs = self.needs(p) || self.needs(q);
        Ok(self.push(vec![1], vec![v], Step::KlDiv { p, q }, needs))
    }

    /// Elementwise `ca*a + cb*b` for same-shape values.
    pub fn add_scaled(&mut self, a: ValueId, b: ValueId, ca: f32, cb: f32) -> Result<ValueId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add_scaled",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data: Vec<f32> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| ca * x + cb * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(shape, data, Step::AddScaled { a, b, ca, cb }, needs))
    }

    pub fn sum_all(&mut self, input: ValueId) -> ValueId {
        let v: f64 = self.data(input).iter().map(|&x| x as f64).sum();
        let needs = self.needs(input);
        self.push(vec![1], vec![v as f32], Step::SumAll { input }, needs)
    }

    /// Reverse sweep from a scalar loss. Consumes the tape's backward
    /// capacity: a second call without a fresh forward pass is an error.
    pub fn backward(&mut self, loss: ValueId) -> Result<GradMap> {
        if self.consumed {
            return Err(Error::Train(
                "backward called twice on one tape; record a new forward pass first".to_string(),
            ));
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.nodes[loss.0].shape),
            ));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let g = grads[idx].take().unwrap();
            self.propagate(idx, &g, &mut grads);
            if matches!(self.nodes[idx].step, Step::Leaf) {
                grads[idx] = Some(g); // keep leaf gradients for the map
            }
        }

        let mut map = GradMap::new();
        for (node, grad) in self.nodes.iter().zip(grads.into_iter()) {
            if let (Some(name), Some(g)) = (&node.name, grad) {
                if node.needs_grad {
                    let g32: Vec<f32> = g.iter().map(|&v| v as f32).collect();
                    map.insert(name.clone(), Tensor::from_vec(node.shape.clone(), g32)?);
                }
            }
        }
        Ok(map)
    }

    fn accumulate(grads: &mut [Option<Vec<f64>>], id: ValueId, contribution: Vec<f64>) {
        match &mut grads[id.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            slot => *slot = Some(contribution),
        }
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.step {
            Step::Leaf => {}
            Step::Conv2d {
                input,
                kernel,
                stride,
                padding,
            } => {
                if self.needs(*input) {
                    let din = kernels::conv2d_backward_input(
                        g,
                        &node.shape,
                        self.data(*kernel),
                        self.shape(*kernel),
                        self.shape(*input),
                        *stride,
                        *padding,
                    );
                    Self::accumulate(grads, *input, din);
                }
                if self.needs(*kernel) {
                    let dk = kernels::conv2d_backward_kernel(
                        g,
                        &node.shape,
                        self.data(*input),
                        self.shape(*input),
                        self.shape(*kernel),
                        *stride,
                        *padding,
                    );
                    Self::accumulate(grads, *kernel, dk);
                }
            }
            Step::AddBias { input, bias } => {
                if self.needs(*input) {
                    Self::accumulate(grads, *input, g.to_vec());
                }
                if self.needs(*bias) {
                    let f = self.shape(*bias)[0];
                    let mut db = vec![0.0f64; f];
                    for chunk in g.chunks(f) {
                        for (d, &gv) in db.iter_mut().zip(chunk) {
                            *d += gv;
                        }
                    }
                    Self::accumulate(grads, *bias, db);
                }
            }
            Step::Relu { input } => {
                if self.needs(*input) {
                    let src = self.data(*input);
                    let din: Vec<f64> = g
                        .iter()
                        .zip(src)
                        .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                        .collect();
                    Self::accumulate(grads, *input, din);
                }
            }
            Step::MaxPool2d { input, argmax } => {
                if self.needs(*input) {
                    let mut din = vec![0.0f64; self.data(*input).len()];
                    for (&gv, &src_idx) in g.iter().zip(argmax) {
                        din[src_idx as usize] += gv;
                    }
                    Self::accumulate(grads, *input, din);
                }
            }
            Step::GlobalAvgPool { input } => {
                if self.needs(*input) {
                    let s = self.shape(*input);
                    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
                    let inv = 1.0 / (h * w) as f64;
                    let mut din = vec![0.0f64; n * h * w * c];
                    for bi in 0..n {
                        for px in 0..h * w {
                            let base = (bi * h * w + px) * c;
                            for ci in 0..c {
                                din[base + ci] = g[bi * c + ci] * inv;
                            }
                        }
                    }
                    Self::accumulate(grads, *input, din);
                }
            }
            Step::ConcatChannels { inputs } => {
                let c_total = *node.shape.last().unwrap();
                let px_count = node.data.len() / c_total;
                let mut offset = 0;
                for &id in inputs {
                    let ci = self.shape(id)[3];
                    if self.needs(id) {
                        let mut din = vec![0.0f64; px_count * ci];
                        for px in 0..px_count {
                            din[px * ci..(px + 1) * ci]
                                .copy_from_slice(&g[px * c_total + offset..px * c_total + offset + ci]);
                        }
                        Self::accumulate(grads, id, din);
                    }
                    offset += ci;
                }
            }
            Step::Matmul { a, b } => {
                let (da, db) = kernels::matmul_backward(g, self.data(*a), self.shape(*a), self.data(*b), self.shape(*b));
                if self.needs(*a) {
                    Self::accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, db);
                }
            }
            Step::ElemMul { a, b } => {
                if self.needs(*a) {
                    let din: Vec<f64> = g.iter().zip(self.data(*b)).map(|(&gv, &y)| gv * y as f64).collect();
                    Self::accumulate(grads, *a, din);
                }
                if self.needs(*b) {
                    let din: Vec<f64> = g.iter().zip(self.data(*a)).map(|(&gv, &x)| gv * x as f64).collect();
                    Self::accumulate(grads, *b, din);
                }
            }
            Step::SoftmaxTemp { input, tau } => {
                if self.needs(*input) {
                    let k = *node.shape.last().unwrap();
                    let din = kernels::softmax_temp_backward(g, &node.data, k, *tau);
                    Self::accumulate(grads, *input, din);
                }
            }
            Step::CrossEntropy { logits, labels } => {
                let k = *self.shape(*logits).last().unwrap();
                let (dz, dy) = kernels::cross_entropy_backward(g[0], self.data(*logits), self.data(*labels), k);
                if self.needs(*logits) {
                    Self::accumulate(grads, *logits, dz);
                }
                if self.needs(*labels) {
                    Self::accumulate(grads, *labels, dy);
                }
            }
            Step::KlDiv { p, q } => {
                let k = *self.shape(*p).last().unwrap();
                let (dp, dq) = kernels::kl_div_backward(g[0], self.data(*p), self.data(*q), k);
                if self.needs(*p) {
                    Self::accumulate(grads, *p, dp);
                }
                if self.needs(*q) {
                    Self::accumulate(grads, *q, dq);
                }
            }
            Step::AddScaled { a, b, ca, cb } => {
                if self.needs(*a) {
                    let din: Vec<f64> = g.iter().map(|&gv| gv * *ca as f64).collect();
                    Self::accumulate(grads, *a, din);
                }
                if self.needs(*b) {
                    let din: Vec<f64> = g.iter().map(|&gv| gv * *cb as f64).collect();
                    Self::accumulate(grads, *b, din);
                }
            }
            Step::SumAll { input } => {
                if self.needs(*input) {
                    Self::accumulate(grads, *input, vec![g[0]; self.data(*input).len()]);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(tape: &mut Tape, name: &str, shape: Vec<usize>, data: Vec<f32>) -> ValueId {
        let t = Tensor::from_vec(shape, data).unwrap().with_grad();
        tape.param(name, &t)
    }

    #[test]
    fn grad_of_plain_sum_is_ones() {
        let mut tape = Tape::new();
        let w = param(&mut tape, "w", vec![2, 3], vec![0.5; 6]);
        let loss = tape.sum_all(w);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads["w"].data(), &[1.0; 6]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut tape = Tape::new();
        let w = param(&mut tape, "w", vec![2], vec![1.0, -2.0]);
        let sq = tape.elem_mul(w, w).unwrap();
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads["w"].data(), &[2.0, -4.0]);
    }

    #[test]
    fn second_backward_errors() {
        let mut tape = Tape::new();
        let w = param(&mut tape, "w", vec![1], vec![3.0]);
        let loss = tape.sum_all(w);
        tape.backward(loss).unwrap();
        assert!(tape.backward(loss).is_err());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let w = param(&mut tape, "w", vec![2], vec![1.0, 2.0]);
        assert!(tape.backward(w).is_err());
    }

    #[test]
    fn detached_leaf_absent_from_map() {
        let mut tape = Tape::new();
        let w = param(&mut tape, "w", vec![2], vec![1.0, 2.0]);
        let frozen = tape.param("frozen", &Tensor::from_vec(vec![2], vec![3.0, 4.0]).unwrap());
        let prod = tape.elem_mul(w, frozen).unwrap();
        let loss = tape.sum_all(prod);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.contains_key("w"));
        assert!(!grads.contains_key("frozen"));
        assert_eq!(grads["w"].data(), &[3.0, 4.0]);
    }

    #[test]
    fn masked_multiply_zeroes_gradient() {
        let mut tape = Tape::new();
        let w = param(&mut tape, "w", vec![3], vec![1.0, 2.0, 3.0]);
        let mask = tape.constant(&Tensor::from_vec(vec![3], vec![1.0, 0.0, 1.0]).unwrap());
        let masked = tape.elem_mul(w, mask).unwrap();
        let loss = tape.sum_all(masked);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads["w"].data(), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_label() {
        let mut tape = Tape::new();
        let z = param(&mut tape, "z", vec![1, 3], vec![0.2, -0.4, 0.9]);
        let y = tape.constant(&Tensor::from_vec(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap());
        let loss = tape.cross_entropy(z, y).unwrap();
        let grads = tape.backward(loss).unwrap();
        let p = super::super::softmax_temperature(
            &Tensor::from_vec(vec![1, 3], vec![0.2, -0.4, 0.9]).unwrap(),
            1.0,
        )
        .unwrap();
        let g = grads["z"].data();
        for i in 0..3 {
            let expect = p.data()[i] - if i == 1 { 1.0 } else { 0.0 };
            assert!((g[i] - expect).abs() < 1e-6, "coord {i}: {} vs {expect}", g[i]);
        }
    }

    #[test]
    fn backward_visits_each_node_once() {
        // A diamond: w feeds two branches that rejoin. If a node were visited
        // twice its gradient would double.
        let mut tape = Tape::new();
        let w = param(&mut tape, "w", vec![2], vec![1.0, 2.0]);
        let r = tape.relu(w);
        let a = tape.add_scaled(r, r, 1.0, 2.0).unwrap(); // 3*relu(w)
        let loss = tape.sum_all(a);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads["w"].data(), &[3.0, 3.0]);
    }
}
