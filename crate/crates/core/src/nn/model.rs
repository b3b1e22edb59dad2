//! Model construction and the two forward paths (tape for training,
//! direct evaluation with optional fake-quant execution).

use rand::Rng;

use super::arch::ArchSpec;
use super::ParamStore;
use crate::error::{Error, Result};
use crate::prune::PruneMask;
use crate::quantize::{fake_quant_slice, QuantParams};
use crate::rng::substream;
use crate::tensor::{conv2d, Padding, Tape, Tensor, ValueId};

/// An architecture bound to a parameter naming scheme. Parameters live in a
/// separate [`ParamStore`] so snapshots and rewinds are plain copies.
#[derive(Debug, Clone)]
pub struct ModelGraph {
    arch: ArchSpec,
}

/// Tape handles for one recorded forward pass.
pub struct TapeForward {
    pub fine: ValueId,
    pub aux: Option<ValueId>,
}

/// Plain forward output.
#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub fine: Tensor,
    pub aux: Option<Tensor>,
}

fn he_uniform(rng: &mut impl Rng, fan_in: usize, numel: usize) -> Vec<f32> {
    let limit = (6.0 / fan_in as f64).sqrt() as f32;
    (0..numel)
        .map(|_| {
            // exact zeros excluded so non-zero size accounting sees every weight
            loop {
                let v = rng.random_range(-limit..limit);
                if v != 0.0 {
                    return v;
                }
            }
        })
        .collect()
}

impl ModelGraph {
    /// Deterministic build: each parameter is drawn from an RNG substream
    /// keyed by its name, so the same (spec, seed) yields bit-identical
    /// stores regardless of construction order.
    pub fn build(arch: ArchSpec, seed: u64) -> Result<(ModelGraph, ParamStore)> {
        arch.validate()?;
        let mut params = ParamStore::new();
        let mut add_conv = |name: String, kh: usize, kw: usize, c_in: usize, f: usize| {
            let fan_in = kh * kw * c_in;
            let mut rng = substream(seed, &format!("init:{name}.kernel"));
            let kernel = he_uniform(&mut rng, fan_in, fan_in * f);
            params.insert(
                format!("{name}.kernel"),
                Tensor::from_vec(vec![kh, kw, c_in, f], kernel).expect("init shape").with_grad(),
            );
            params.insert(format!("{name}.bias"), Tensor::zeros(vec![f]).with_grad());
        };
        for (i, block) in arch.blocks.iter().enumerate() {
            let c_in = arch.channels_into(i);
            let prefix = format!("block{}", i + 1);
            add_conv(format!("{prefix}.conv1x1"), 1, 1, c_in, block.filters_1x1);
            add_conv(format!("{prefix}.conv3x3"), 3, 3, c_in, block.filters_3x3);
            add_conv(format!("{prefix}.conv5x5"), 5, 5, c_in, block.filters_5x5);
            add_conv(format!("{prefix}.pool_proj"), 1, 1, c_in, block.filters_pool);
        }
        let c = arch.trunk_output_channels();
        let mut add_dense = |name: String, d: usize, k: usize| {
            let mut rng = substream(seed, &format!("init:{name}.kernel"));
            let kernel = he_uniform(&mut rng, d, d * k);
            params.insert(
                format!("{name}.kernel"),
                Tensor::from_vec(vec![d, k], kernel).expect("init shape").with_grad(),
            );
            params.insert(format!("{name}.bias"), Tensor::zeros(vec![k]).with_grad());
        };
        add_dense("head.fine".to_string(), c, arch.head.num_classes);
        if let Some(aux) = arch.head.aux_classes {
            add_dense("head.aux".to_string(), c, aux);
        }
        Ok((ModelGraph { arch }, params))
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn num_classes(&self) -> usize {
        self.arch.head.num_classes
    }

    fn check_batch(&self, shape: &[usize]) -> Result<usize> {
        let want = self.arch.input_shape;
        if shape.len() != 4 || shape[1] != want[0] || shape[2] != want[1] || shape[3] != want[2] {
            return Err(Error::shape(
                "forward",
                format!("batch {shape:?} vs expected [N, {}, {}, {}]", want[0], want[1], want[2]),
            ));
        }
        Ok(shape[0])
    }

    /// Record a differentiable forward pass. Masked parameters are
    /// multiplied by their binary mask before use, so they contribute
    /// exactly zero and receive exactly zero gradient.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        batch: &Tensor,
        mask: Option<&PruneMask>,
    ) -> Result<TapeForward> {
        self.check_batch(batch.shape())?;
        let mut fetch = |tape: &mut Tape, name: &str| -> Result<ValueId> {
            let id = tape.param(name, params.get(name)?);
            match mask {
                Some(m) if !m.is_all_ones(name) => {
                    let bits = m
                        .get(name)
                        .ok_or_else(|| Error::Input(format!("mask missing parameter '{name}'")))?;
                    let as_f32: Vec<f32> = bits.iter().map(|&b| b as f32).collect();
                    let mask_t = Tensor::from_vec(tape.shape(id).to_vec(), as_f32)?;
                    let mask_id = tape.constant(&mask_t);
                    tape.elem_mul(id, mask_id)
                }
                _ => Ok(id),
            }
        };

        let mut x = tape.constant(batch);
        for (i, block) in self.arch.blocks.iter().enumerate() {
            let prefix = format!("block{}", i + 1);
            let mut branch = |tape: &mut Tape, x: ValueId, conv: &str, kh: usize| -> Result<ValueId> {
                let k = fetch(tape, &format!("{prefix}.{conv}.kernel"))?;
                let b = fetch(tape, &format!("{prefix}.{conv}.bias"))?;
                let padding = if kh == 1 { Padding::Valid } else { Padding::Same };
                let c = tape.conv2d(x, k, 1, padding)?;
                let cb = tape.add_bias(c, b)?;
                Ok(tape.relu(cb))
            };
            let b1 = branch(tape, x, "conv1x1", 1)?;
            let b3 = branch(tape, x, "conv3x3", 3)?;
            let b5 = branch(tape, x, "conv5x5", 5)?;
            let pooled = tape.max_pool2d(x, 3, 1, Padding::Same)?;
            let bp = branch(tape, pooled, "pool_proj", 1)?;
            x = tape.concat_channels(&[b1, b3, b5, bp])?;
            if block.pool_after {
                x = tape.max_pool2d(x, 2, 2, Padding::Valid)?;
            }
        }
        let gap = tape.global_avg_pool(x)?;
        let wf = fetch(tape, "head.fine.kernel")?;
        let bf = fetch(tape, "head.fine.bias")?;
        let fine_mm = tape.matmul(gap, wf)?;
        let fine = tape.add_bias(fine_mm, bf)?;
        let aux = if self.arch.head.aux_classes.is_some() {
            let wa = fetch(tape, "head.aux.kernel")?;
            let ba = fetch(tape, "head.aux.bias")?;
            let mm = tape.matmul(gap, wa)?;
            Some(tape.add_bias(mm, ba)?)
        } else {
            None
        };
        Ok(TapeForward { fine, aux })
    }

    /// Inference without a tape. With `quant`, weights are dequantized from
    /// their int8 form and every activation is re-quantized on the fly from
    /// its own range (fake-quant execution).
    pub fn forward_eval(
        &self,
        params: &ParamStore,
        batch: &Tensor,
        mask: Option<&PruneMask>,
        quant: Option<&QuantParams>,
    ) -> Result<EvalOutput> {
        self.check_batch(batch.shape())?;
        let fetch = |name: &str| -> Result<Tensor> {
            let mut t = match quant {
                Some(q) => q
                    .get(name)
                    .ok_or_else(|| Error::Input(format!("missing quantized tensor '{name}'")))?
                    .dequantize()?,
                None => params.get(name)?.clone(),
            };
            if let Some(m) = mask {
                if !m.is_all_ones(name) {
                    let bits = m
                        .get(name)
                        .ok_or_else(|| Error::Input(format!("mask missing parameter '{name}'")))?;
                    for (v, &b) in t.data_mut().iter_mut().zip(bits) {
                        if b == 0 {
                            *v = 0.0;
                        }
                    }
                }
            }
            Ok(t)
        };
        let fq = |t: &mut Tensor| {
            if quant.is_some() {
                fake_quant_slice(t.data_mut());
            }
        };

        let mut x = batch.clone();
        fq(&mut x);
        for (i, block) in self.arch.blocks.iter().enumerate() {
            let prefix = format!("block{}", i + 1);
            let branch = |x: &Tensor, conv: &str, kh: usize| -> Result<Tensor> {
                let kernel = fetch(&format!("{prefix}.{conv}.kernel"))?;
                let bias = fetch(&format!("{prefix}.{conv}.bias"))?;
                let padding = if kh == 1 { Padding::Valid } else { Padding::Same };
                let mut out = conv2d(x, &kernel, 1, padding)?;
                add_bias_relu(&mut out, bias.data());
                fq(&mut out);
                Ok(out)
            };
            let b1 = branch(&x, "conv1x1", 1)?;
            let b3 = branch(&x, "conv3x3", 3)?;
            let b5 = branch(&x, "conv5x5", 5)?;
            let pooled = max_pool(&x, 3, 1, Padding::Same)?;
            let bp = branch(&pooled, "pool_proj", 1)?;
            x = concat_channels(&[&b1, &b3, &b5, &bp])?;
            if block.pool_after {
                x = max_pool(&x, 2, 2, Padding::Valid)?;
            }
        }
        let mut gap = global_avg_pool(&x)?;
        fq(&mut gap);
        let dense = |name: &str, gap: &Tensor| -> Result<Tensor> {
            let w = fetch(&format!("{name}.kernel"))?;
            let b = fetch(&format!("{name}.bias"))?;
            let (data, shape) = crate::tensor::matmul(gap, &w)?;
            let mut out = Tensor::from_vec(shape, data)?;
            for row in out.data_mut().chunks_mut(b.numel()) {
                for (v, &bv) in row.iter_mut().zip(b.data()) {
                    *v += bv;
                }
            }
            Ok(out)
        };
        let fine = dense("head.fine", &gap)?;
        let aux = match self.arch.head.aux_classes {
            Some(_) => Some(dense("head.aux", &gap)?),
            None => None,
        };
        Ok(EvalOutput { fine, aux })
    }
}

fn add_bias_relu(t: &mut Tensor, bias: &[f32]) {
    let f = bias.len();
    for chunk in t.data_mut().chunks_mut(f) {
        for (v, &b) in chunk.iter_mut().zip(bias) {
            *v = (*v + b).max(0.0);
        }
    }
}

fn max_pool(t: &Tensor, win: usize, stride: usize, padding: Padding) -> Result<Tensor> {
    let (data, shape, _) = crate::tensor::max_pool_raw(t.data(), t.shape(), win, stride, padding)?;
    Tensor::from_vec(shape, data)
}

fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let lead = &parts[0].shape()[..3];
    let c_total: usize = parts.iter().map(|t| t.shape()[3]).sum();
    let px = lead.iter().product::<usize>();
    let mut data = vec![0.0f32; px * c_total];
    let mut offset = 0;
    for t in parts {
        if &t.shape()[..3] != lead {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}", parts[0].shape(), t.shape()),
            ));
        }
        let ci = t.shape()[3];
        for p in 0..px {
            data[p * c_total + offset..p * c_total + offset + ci]
                .copy_from_slice(&t.data()[p * ci..(p + 1) * ci]);
        }
        offset += ci;
    }
    Tensor::from_vec(vec![lead[0], lead[1], lead[2], c_total], data)
}

fn global_avg_pool(t: &Tensor) -> Result<Tensor> {
    let s = t.shape();
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let mut data = vec![0.0f32; n * c];
    for bi in 0..n {
        let mut acc = vec![0.0f64; c];
        for px in 0..h * w {
            let base = (bi * h * w + px) * c;
            for ci in 0..c {
                acc[ci] += t.data()[base + ci] as f64;
            }
        }
        for ci in 0..c {
            data[bi * c + ci] = (acc[ci] / (h * w) as f64) as f32;
        }
    }
    Tensor::from_vec(vec![n, c], data)
}
