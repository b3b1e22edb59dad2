//! SGD with momentum over the autodiff tape.

use std::collections::BTreeMap;

use super::model::ModelGraph;
use super::schedule::{lr_at, LrSchedule};
use super::ParamStore;
use crate::dataset::DatasetView;
use crate::distill::{distill_loss_on_tape, DistillConfig, LogitsCache};
use crate::error::{Error, Result};
use crate::fusion::{mtl_loss_on_tape, ClassHierarchy};
use crate::prune::PruneMask;
use crate::rng::substream_indexed;
use crate::tensor::Tape;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f32,
    pub schedule: LrSchedule,
    /// Take the parameters from the last step where the schedule sits at
    /// its minimum (cycle end) instead of the raw final step.
    pub select_min_lr_checkpoint: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            batch_size: 32,
            momentum: 0.9,
            schedule: LrSchedule::default(),
            select_min_lr_checkpoint: true,
            seed: 0,
        }
    }
}

/// Which loss drives training.
pub enum LossSpec<'a> {
    /// Cross entropy against the (possibly soft) fine labels.
    CrossEntropy,
    /// Teacher-student loss over cached teacher logits.
    Distill {
        cache: &'a LogitsCache,
        cfg: DistillConfig,
    },
    /// Weighted fine + coarse cross entropy on a two-head model.
    Mtl {
        weight: f32,
        hierarchy: &'a ClassHierarchy,
    },
}

#[derive(Debug, Clone)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
    pub lr_last: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    /// Parameters as returned (after min-lr selection when enabled).
    pub final_params: ParamStore,
    /// Step of the snapshot that was selected, when one was.
    pub selected_step: Option<u64>,
    pub steps: u64,
}

fn shuffled(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = substream_indexed(seed, "batch", epoch as u64);
    order.shuffle(&mut rng);
    order
}

/// Train in place. Masked coordinates contribute nothing to the forward
/// pass, receive zero gradient, and are re-zeroed after every update, so
/// they stay exactly 0.0 at every step.
pub fn sgd_train(
    model: &ModelGraph,
    params: &mut ParamStore,
    data: &DatasetView,
    loss: &LossSpec,
    cfg: &TrainConfig,
    mask: Option<&PruneMask>,
) -> Result<TrainReport> {
    if cfg.epochs == 0 {
        return Err(Error::param("epochs", "training needs E >= 1"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::param("batch_size", "must be positive"));
    }
    if !(0.0..1.0).contains(&cfg.momentum) {
        return Err(Error::param("momentum", format!("must be in [0,1), got {}", cfg.momentum)));
    }
    cfg.schedule.validate()?;
    if data.is_empty() {
        return Err(Error::Train("training data view is empty".to_string()));
    }
    if let Some(m) = mask {
        m.validate_against(params)?;
    }
    if let LossSpec::Mtl { weight, .. } = loss {
        if !(0.0..=1.0).contains(weight) {
            return Err(Error::param("mtl_weight", format!("must be in [0,1], got {weight}")));
        }
        if model.arch().head.aux_classes.is_none() {
            return Err(Error::Train("mtl loss needs a model with an aux head".to_string()));
        }
    }

    let hierarchy_for_batches: &ClassHierarchy = match loss {
        LossSpec::Mtl { hierarchy, .. } => hierarchy,
        _ => &STATIC_FALLBACK,
    };

    let mut velocity: BTreeMap<String, Vec<f32>> = params
        .iter()
        .map(|(n, t)| (n.clone(), vec![0.0f32; t.numel()]))
        .collect();
    let mut step: u64 = 0;
    let mut selected: Option<(ParamStore, u64)> = None;
    let mut epochs_out = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let order = shuffled(data.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0f64;
        let mut loss_count = 0usize;
        let mut correct = 0usize;
        let mut total = 0usize;
        let mut lr_last = 0.0f64;

        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.batch(chunk, hierarchy_for_batches)?;
            let lr = lr_at(&cfg.schedule, step);
            lr_last = lr;

            let mut tape = Tape::new();
            let fwd = model.forward_tape(&mut tape, params, &batch.features, mask)?;
            let loss_id = match loss {
                LossSpec::CrossEntropy => {
                    let labels = tape.constant(&batch.fine_labels);
                    tape.cross_entropy(fwd.fine, labels)?
                }
                LossSpec::Distill { cache, cfg: dcfg } => {
                    let teacher = cache.batch(&batch.clip_ids)?;
                    distill_loss_on_tape(&mut tape, fwd.fine, &teacher, &batch.fine_labels, dcfg)?
                }
                LossSpec::Mtl { weight, hierarchy } => {
                    let aux = fwd
                        .aux
                        .ok_or_else(|| Error::Train("model produced no aux logits".to_string()))?;
                    mtl_loss_on_tape(
                        &mut tape,
                        fwd.fine,
                        aux,
                        &batch.fine_labels,
                        &batch.coarse_labels,
                        hierarchy,
                        *weight,
                    )?
                }
            };
            let loss_val = tape.value(loss_id).item()?;
            if !loss_val.is_finite() {
                return Err(Error::Train(format!(
                    "non-finite loss {loss_val} at step {step} (epoch {epoch})"
                )));
            }
            loss_sum += loss_val as f64 * chunk.len() as f64;
            loss_count += chunk.len();

            // training accuracy against the primary labels
            let logits = tape.data(fwd.fine);
            let k = model.num_classes();
            for (row, &want) in batch.fine_indices.iter().enumerate() {
                let row_logits = &logits[row * k..(row + 1) * k];
                let mut best = 0usize;
                for i in 1..k {
                    if row_logits[i] > row_logits[best] {
                        best = i;
                    }
                }
                if best == want {
                    correct += 1;
                }
                total += 1;
            }

            let grads = tape.backward(loss_id)?;
            for (name, grad) in &grads {
                let v = velocity.get_mut(name).expect("velocity tracks params");
                let p = params.get_mut(name)?;
                let bits = mask.and_then(|m| m.get(name));
                for (i, (w, g)) in p.data_mut().iter_mut().zip(grad.data()).enumerate() {
                    let masked = bits.is_some_and(|b| b[i] == 0);
                    if masked {
                        v[i] = 0.0;
                        *w = 0.0;
                    } else {
                        v[i] = cfg.momentum * v[i] + g;
                        *w -= (lr as f32) * v[i];
                    }
                }
            }

            if lr == cfg.schedule.lr_min {
                selected = Some((params.clone(), step));
            }
            step += 1;
        }

        epochs_out.push(EpochMetrics {
            epoch,
            mean_loss: loss_sum / loss_count.max(1) as f64,
            accuracy: correct as f64 / total.max(1) as f64,
            lr_last,
        });
    }

    let selected_step = match (&selected, cfg.select_min_lr_checkpoint) {
        (Some((snapshot, at)), true) => {
            *params = snapshot.clone();
            Some(*at)
        }
        _ => None,
    };

    Ok(TrainReport {
        epochs: epochs_out,
        final_params: params.clone(),
        selected_step,
        steps: step,
    })
}

// Batches always aggregate coarse labels; outside MTL training the result
// is unused, so any well-formed hierarchy works. A 1-coarse-class map is
// the cheapest.
static STATIC_FALLBACK: std::sync::LazyLock<ClassHierarchy> = std::sync::LazyLock::new(|| {
    ClassHierarchy::new(vec!["_all".to_string()], vec!["_any".to_string()], vec![0])
        .expect("fallback hierarchy is well-formed")
});
