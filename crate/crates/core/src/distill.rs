//! Teacher-student loss assembly and the teacher logits cache.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::dataset::DatasetView;
use crate::error::{Error, Result};
use crate::nn::{ModelGraph, ParamStore};
use crate::tensor::{self, read_tensor, write_tensor_f32, Tape, Tensor, ValueId};

/// Temperature and mixing weight for the distillation loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillConfig {
    pub tau: f32,
    pub beta: f32,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig { tau: 2.0, beta: 0.5 }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::param("tau", format!("temperature must be positive, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::param("beta", format!("must be in [0,1], got {}", self.beta)));
        }
        Ok(())
    }
}

/// `(1-beta)*CE(student, labels) + beta*tau^2*KL(soften(teacher) || soften(student))`.
///
/// Teacher logits enter as constants, so no gradient reaches them; the
/// tau^2 factor keeps the soft term's gradient magnitude comparable across
/// temperatures.
pub fn distill_loss_on_tape(
    tape: &mut Tape,
    student_logits: ValueId,
    teacher_logits: &Tensor,
    hard_labels: &Tensor,
    cfg: &DistillConfig,
) -> Result<ValueId> {
    cfg.validate()?;
    let teacher_soft = tensor::softmax_temperature(teacher_logits, cfg.tau)?;
    let teacher_id = tape.constant(&teacher_soft);
    let student_soft = tape.softmax_temperature(student_logits, cfg.tau)?;
    let kl = tape.kl_divergence(teacher_id, student_soft)?;
    let labels_id = tape.constant(hard_labels);
    let ce = tape.cross_entropy(student_logits, labels_id)?;
    tape.add_scaled(ce, kl, 1.0 - cfg.beta, cfg.beta * cfg.tau * cfg.tau)
}

/// Loss value without a tape, for oracle checks.
pub fn distill_loss_value(
    student_logits: &Tensor,
    teacher_logits: &Tensor,
    hard_labels: &Tensor,
    cfg: &DistillConfig,
) -> Result<f32> {
    cfg.validate()?;
    let ce = tensor::cross_entropy(student_logits, hard_labels)?.item()?;
    let t_soft = tensor::softmax_temperature(teacher_logits, cfg.tau)?;
    let s_soft = tensor::softmax_temperature(student_logits, cfg.tau)?;
    let kl = tensor::kl_divergence(&t_soft, &s_soft)?.item()?;
    Ok((1.0 - cfg.beta) * ce + cfg.beta * cfg.tau * cfg.tau * kl)
}

/// Teacher logits per clip id, fingerprinted by the teacher's parameter
/// bytes. Write-once, then read-only.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsCache {
    fingerprint: String,
    num_classes: usize,
    logits: BTreeMap<String, Vec<f32>>,
}

/// Digest of every parameter tensor's raw bytes, in name order.
pub fn params_fingerprint(params: &ParamStore) -> String {
    let mut h = Sha256::new();
    for (name, t) in params.iter() {
        h.update(name.as_bytes());
        for &v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl LogitsCache {
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Logits for one clip; unknown ids are an error naming the clip.
    pub fn get(&self, clip_id: &str) -> Result<&[f32]> {
        self.logits
            .get(clip_id)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Train(format!("no cached teacher logits for clip '{clip_id}'")))
    }

    /// Stack cached logits for a batch of clips into [N, K].
    pub fn batch(&self, clip_ids: &[String]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(clip_ids.len() * self.num_classes);
        for id in clip_ids {
            data.extend_from_slice(self.get(id)?);
        }
        Tensor::from_vec(vec![clip_ids.len(), self.num_classes], data)
    }

    /// Persist as a tensor-format file plus a clip-id index file
    /// (`<path>.idx`: fingerprint line, then one id per line).
    pub fn save(&self, path: &Path) -> Result<()> {
        let n = self.logits.len();
        let mut data = Vec::with_capacity(n * self.num_classes);
        let mut ids = String::new();
        ids.push_str(&self.fingerprint);
        ids.push('\n');
        for (id, row) in &self.logits {
            data.extend_from_slice(row);
            ids.push_str(id);
            ids.push('\n');
        }
        let mut f = std::fs::File::create(path)?;
        write_tensor_f32(&mut f, &[n, self.num_classes], &data)?;
        let mut idx = std::fs::File::create(index_path(path))?;
        idx.write_all(ids.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<LogitsCache> {
        let mut f = std::fs::File::open(path)?;
        let tensor = read_tensor(&mut f)?.into_tensor()?;
        let idx = std::fs::File::open(index_path(path))?;
        let mut lines = std::io::BufReader::new(idx).lines();
        let fingerprint = lines
            .next()
            .ok_or_else(|| Error::Input("empty logits index".to_string()))??;
        let ids: Vec<String> = lines.collect::<std::io::Result<_>>()?;
        let (n, k) = (tensor.shape()[0], tensor.shape()[1]);
        if ids.len() != n {
            return Err(Error::Input(format!("logits index has {} ids for {n} rows", ids.len())));
        }
        let mut logits = BTreeMap::new();
        for (i, id) in ids.into_iter().enumerate() {
            logits.insert(id, tensor.data()[i * k..(i + 1) * k].to_vec());
        }
        Ok(LogitsCache {
            fingerprint,
            num_classes: k,
            logits,
        })
    }
}

fn index_path(path: &Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".idx");
    p.into()
}

/// Run the trained teacher over a dataset view and cache its logits per
/// clip id.
pub fn teacher_predict_cache(
    model: &ModelGraph,
    params: &ParamStore,
    data: &DatasetView,
    hierarchy: &crate::fusion::ClassHierarchy,
) -> Result<LogitsCache> {
    let mut logits = BTreeMap::new();
    let chunk = 64usize;
    let positions: Vec<usize> = (0..data.len()).collect();
    for block in positions.chunks(chunk) {
        let batch = data.batch(block, hierarchy)?;
        let out = model.forward_eval(params, &batch.features, None, None)?;
        let k = model.num_classes();
        for (row, id) in batch.clip_ids.iter().enumerate() {
            logits.insert(id.clone(), out.fine.data()[row * k..(row + 1) * k].to_vec());
        }
    }
    Ok(LogitsCache {
        fingerprint: params_fingerprint(params),
        num_classes: model.num_classes(),
        logits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(data: Vec<f32>, k: usize) -> Tensor {
        let n = data.len() / k;
        Tensor::from_vec(vec![n, k], data).unwrap()
    }

    #[test]
    fn beta_zero_is_plain_cross_entropy() {
        let student = logits(vec![1.0, -0.5, 0.2], 3);
        let teacher = logits(vec![0.3, 0.3, 0.9], 3);
        let labels = logits(vec![0.0, 1.0, 0.0], 3);
        let cfg = DistillConfig { tau: 2.0, beta: 0.0 };
        let got = distill_loss_value(&student, &teacher, &labels, &cfg).unwrap();
        let ce = tensor::cross_entropy(&student, &labels).unwrap().item().unwrap();
        assert!((got - ce).abs() <= 1e-9);
    }

    #[test]
    fn identical_logits_at_beta_one_give_zero() {
        let student = logits(vec![1.0, -0.5, 0.2], 3);
        let labels = logits(vec![0.0, 1.0, 0.0], 3);
        let cfg = DistillConfig { tau: 3.0, beta: 1.0 };
        let got = distill_loss_value(&student, &student, &labels, &cfg).unwrap();
        assert!(got.abs() <= 1e-9);
    }

    #[test]
    fn composed_value_matches_hand_mix() {
        use rand::Rng;
        let mut rng = crate::rng::substream(131, "distill");
        let s: Vec<f32> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let t: Vec<f32> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let student = logits(s, 4);
        let teacher = logits(t, 4);
        let labels = logits(vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0], 4);
        let cfg = DistillConfig { tau: 2.0, beta: 0.5 };
        let got = distill_loss_value(&student, &teacher, &labels, &cfg).unwrap() as f64;
        let ce = tensor::cross_entropy(&student, &labels).unwrap().item().unwrap() as f64;
        let kl = tensor::kl_divergence(
            &tensor::softmax_temperature(&teacher, 2.0).unwrap(),
            &tensor::softmax_temperature(&student, 2.0).unwrap(),
        )
        .unwrap()
        .item()
        .unwrap() as f64;
        let expect = 0.5 * ce + 0.5 * 4.0 * kl;
        assert!((got - expect).abs() < 1e-6);
    }

    #[test]
    fn loss_is_linear_in_beta() {
        let student = logits(vec![0.5, -1.0, 0.7, 0.1], 2);
        let teacher = logits(vec![1.5, 0.0, -0.3, 0.8], 2);
        let labels = logits(vec![1.0, 0.0, 0.0, 1.0], 2);
        let at = |beta: f32| {
            distill_loss_value(&student, &teacher, &labels, &DistillConfig { tau: 2.0, beta }).unwrap() as f64
        };
        let (l0, l_half, l1) = (at(0.0), at(0.5), at(1.0));
        assert!((l_half - 0.5 * (l0 + l1)).abs() < 1e-6);
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = DistillConfig { tau: 0.0, beta: 0.5 };
        assert!(cfg.validate().is_err());
        let cfg = DistillConfig { tau: 2.0, beta: 1.5 };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn tape_loss_matches_value_and_skips_teacher_grad() {
        let student_t = logits(vec![0.4, -0.2, 0.9, 0.3], 2).with_grad();
        let teacher_t = logits(vec![1.0, 0.2, -0.5, 0.6], 2);
        let labels = logits(vec![1.0, 0.0, 0.0, 1.0], 2);
        let cfg = DistillConfig::default();

        let mut tape = Tape::new();
        let s = tape.param("student_logits", &student_t);
        let loss = distill_loss_on_tape(&mut tape, s, &teacher_t, &labels, &cfg).unwrap();
        let loss_val = tape.value(loss).item().unwrap();
        let expect = distill_loss_value(&student_t, &teacher_t, &labels, &cfg).unwrap();
        assert!((loss_val - expect).abs() < 1e-6);

        let grads = tape.backward(loss).unwrap();
        assert!(grads.contains_key("student_logits"));
        assert_eq!(grads.len(), 1);
        assert!(loss_val >= 0.0);
    }

    #[test]
    fn cache_round_trips_and_errors_on_missing_clip() {
        let dir = tempfile::tempdir().unwrap();
        let mut logits_map = BTreeMap::new();
        logits_map.insert("clip/a".to_string(), vec![0.1f32, 0.9]);
        logits_map.insert("clip/b".to_string(), vec![0.8, 0.2]);
        let cache = LogitsCache {
            fingerprint: "fp".to_string(),
            num_classes: 2,
            logits: logits_map,
        };
        let path = dir.path().join("teacher.alt");
        cache.save(&path).unwrap();
        let back = LogitsCache::load(&path).unwrap();
        assert_eq!(cache, back);
        assert_eq!(back.get("clip/a").unwrap(), &[0.1, 0.9]);
        let err = back.get("clip/zz").unwrap_err();
        assert!(err.to_string().contains("clip/zz"));
    }
}
