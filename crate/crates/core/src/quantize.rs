//! Post-training dynamic range quantization: static symmetric int8 weights
//! plus per-call activation scaling. Execution stays in float over
//! dequantized values; the int8 form is the deployment artifact whose size
//! gets counted.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::{EvalOutput, ModelGraph, ParamStore};
use crate::prune::PruneMask;
use crate::tensor::Tensor;

/// Symmetric per-tensor int8 values: `float = scale * int8`, zero point 0,
/// so exact zeros survive quantization and sparsity accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    shape: Vec<usize>,
    values: Vec<i8>,
    scale: f32,
}

pub type QuantParams = BTreeMap<String, QuantizedTensor>;

impl QuantizedTensor {
    /// scale = max|w| / 127 (1 when all-zero); values round half away from
    /// zero and clamp to [-127, 127].
    pub fn quantize(t: &Tensor) -> Result<Self> {
        if !t.is_finite() {
            return Err(Error::Input("tensor has non-finite values".to_string()));
        }
        let amax = t.data().iter().fold(0.0f32, |m, &v| m.max(v.abs()));
        let scale = if amax == 0.0 { 1.0 } else { amax / 127.0 };
        let values = t
            .data()
            .iter()
            .map(|&v| ((v / scale).round() as i32).clamp(-127, 127) as i8)
            .collect();
        Ok(QuantizedTensor {
            shape: t.shape().to_vec(),
            values,
            scale,
        })
    }

    pub fn from_parts(shape: Vec<usize>, values: Vec<i8>, scale: f32) -> Result<Self> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::shape(
                "quantized_tensor",
                format!("shape {shape:?} vs {} values", values.len()),
            ));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::param("scale", format!("must be positive, got {scale}")));
        }
        Ok(QuantizedTensor { shape, values, scale })
    }

    pub fn dequantize(&self) -> Result<Tensor> {
        let data = self.values.iter().map(|&q| self.scale * q as f32).collect();
        Tensor::from_vec(self.shape.clone(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn nonzero(&self) -> usize {
        self.values.iter().filter(|&&q| q != 0).count()
    }
}

/// Quantize every parameter tensor. Masked-out coordinates are forced to
/// exact zero first, so the int8 form carries the same sparsity.
pub fn quantize_weights(params: &ParamStore, mask: Option<&PruneMask>) -> Result<QuantParams> {
    let mut out = QuantParams::new();
    for (name, t) in params.iter() {
        let mut tensor = t.clone();
        if let Some(m) = mask {
            if let Some(bits) = m.get(name) {
                for (v, &b) in tensor.data_mut().iter_mut().zip(bits) {
                    if b == 0 {
                        *v = 0.0;
                    }
                }
            }
        }
        let q = QuantizedTensor::quantize(&tensor)
            .map_err(|_| Error::Input(format!("non-finite weight in tensor '{name}'")))?;
        out.insert(name.clone(), q);
    }
    Ok(out)
}

/// Quantize an activation batch against its own max-abs range.
pub fn dynamic_activation_scale(batch: &[f32]) -> (Vec<i8>, f32) {
    let amax = batch.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
    let scale = if amax == 0.0 { 1.0 } else { amax / 127.0 };
    let values = batch
        .iter()
        .map(|&v| ((v / scale).round() as i32).clamp(-127, 127) as i8)
        .collect();
    (values, scale)
}

/// In-place quantize/dequantize round trip, simulating int8 activations.
pub fn fake_quant_slice(x: &mut [f32]) {
    let (q, scale) = dynamic_activation_scale(x);
    for (v, qv) in x.iter_mut().zip(q) {
        *v = scale * qv as f32;
    }
}

/// Forward pass over dequantized weights with per-layer dynamically
/// quantized activations.
pub fn quantized_forward(model: &ModelGraph, quant: &QuantParams, batch: &Tensor) -> Result<EvalOutput> {
    let empty = ParamStore::new();
    model.forward_eval(&empty, batch, None, Some(quant))
}

/// Deployment size: one byte per nonzero int8 value plus a 4-byte scale per
/// tensor.
pub fn quantized_size_bytes(quant: &QuantParams) -> usize {
    quant.values().map(|q| q.nonzero()).sum::<usize>() + 4 * quant.len()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_map_to_full_range() {
        let t = Tensor::from_vec(vec![3], vec![-1.0, 0.0, 1.0]).unwrap();
        let q = QuantizedTensor::quantize(&t).unwrap();
        assert_eq!(q.values(), &[-127, 0, 127]);
        assert!((q.scale() - 1.0 / 127.0).abs() < 1e-9);
    }

    #[test]
    fn all_zero_tensor_uses_unit_scale() {
        let t = Tensor::zeros(vec![4]);
        let q = QuantizedTensor::quantize(&t).unwrap();
        assert_eq!(q.scale(), 1.0);
        assert!(q.values().iter().all(|&v| v == 0));
    }

    #[test]
    fn dequantization_error_within_half_scale() {
        use rand::Rng;
        let mut rng = crate::rng::substream(17, "quant");
        for _ in 0..20 {
            let data: Vec<f32> = (0..257).map(|_| rng.random_range(-3.0..3.0)).collect();
            let t = Tensor::from_vec(vec![257], data.clone()).unwrap();
            let q = QuantizedTensor::quantize(&t).unwrap();
            let back = q.dequantize().unwrap();
            for (orig, rec) in data.iter().zip(back.data()) {
                assert!(
                    (orig - rec).abs() <= q.scale() / 2.0 + 1e-7,
                    "error {} vs scale/2 {}",
                    (orig - rec).abs(),
                    q.scale() / 2.0
                );
            }
        }
    }

    #[test]
    fn quantization_is_odd_symmetric() {
        use rand::Rng;
        let mut rng = crate::rng::substream(23, "quant-sym");
        let data: Vec<f32> = (0..100).map(|_| rng.random_range(-2.0..2.0)).collect();
        let neg: Vec<f32> = data.iter().map(|&v| -v).collect();
        let q1 = QuantizedTensor::quantize(&Tensor::from_vec(vec![100], data).unwrap()).unwrap();
        let q2 = QuantizedTensor::quantize(&Tensor::from_vec(vec![100], neg).unwrap()).unwrap();
        for (a, b) in q1.values().iter().zip(q2.values()) {
            assert_eq!(*a, -*b);
        }
    }

    #[test]
    fn idempotent_on_the_int8_grid() {
        let t = Tensor::from_vec(vec![4], vec![-1.0, -0.5, 0.5, 1.0]).unwrap();
        let q = QuantizedTensor::quantize(&t).unwrap();
        let q2 = QuantizedTensor::quantize(&q.dequantize().unwrap()).unwrap();
        assert_eq!(q.values(), q2.values());
    }

    #[test]
    fn zeros_stay_zero_exactly() {
        let t = Tensor::from_vec(vec![5], vec![0.0, 2.0, 0.0, -2.0, 0.5]).unwrap();
        let q = QuantizedTensor::quantize(&t).unwrap();
        assert_eq!(q.values()[0], 0);
        assert_eq!(q.values()[2], 0);
        assert_eq!(q.nonzero(), 3);
    }

    #[test]
    fn nan_weight_errors_with_tensor_name() {
        let mut params = ParamStore::new();
        params.insert("block1.conv1x1.kernel", Tensor::from_vec(vec![2], vec![f32::NAN, 1.0]).unwrap());
        let err = quantize_weights(&params, None).unwrap_err();
        assert!(err.to_string().contains("block1.conv1x1.kernel"));
    }

    #[test]
    fn activation_scale_example() {
        let batch = vec![3.0, -12.7, 5.0];
        let (_, scale) = dynamic_activation_scale(&batch);
        assert!((scale - 0.1).abs() < 1e-7);
        let (q, s) = dynamic_activation_scale(&[0.0, 0.0]);
        assert_eq!(s, 1.0);
        assert!(q.iter().all(|&v| v == 0));
    }

    #[test]
    fn fake_quant_round_trip_error_bounded() {
        use rand::Rng;
        let mut rng = crate::rng::substream(29, "fq");
        let mut x: Vec<f32> = (0..500).map(|_| rng.random_range(-4.0..4.0)).collect();
        let orig = x.clone();
        let (_, scale) = dynamic_activation_scale(&x);
        fake_quant_slice(&mut x);
        for (a, b) in orig.iter().zip(&x) {
            assert!((a - b).abs() <= scale / 2.0 + 1e-7);
        }
    }

    #[test]
    fn size_accounting_dense_example() {
        // 1000 params in 10 tensors: 1000 bytes + 40 bytes of scales
        let mut q = QuantParams::new();
        for i in 0..10 {
            let t = Tensor::filled(vec![100], 0.5);
            q.insert(format!("t{i}"), QuantizedTensor::quantize(&t).unwrap());
        }
        assert_eq!(quantized_size_bytes(&q), 1000 + 40);
    }
}
