//! Synthetic multi-device scene data plus manifest-driven ingestion.
//!
//! Clips are generated in the log-mel feature domain by default (each class
//! owns a smooth spectral prototype, each device a coloration curve), with
//! an optional raw-waveform mode that drives the whole STFT pipeline.

mod manifest;
mod synth;

pub use manifest::load_manifest;
pub use synth::{synth_generate, synth_generate_waveform, SynthConfig};

use std::collections::BTreeSet;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{assemble_channels, scale_unit, ChannelMode, ScaleStats};
use crate::fusion::ClassHierarchy;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Per-device coloration used by the generator.
#[derive(Debug, Clone)]
pub struct DeviceProfile {
    pub id: String,
    /// Linear gain per mel band; applied as an additive offset in log space.
    pub band_gains: Vec<f32>,
    pub noise_floor_db: f32,
    pub gain_offset_db: f32,
}

impl DeviceProfile {
    pub fn validate(&self) -> Result<()> {
        if self.band_gains.iter().any(|&g| g <= 0.0) {
            return Err(Error::Data(format!("device '{}' has a nonpositive band gain", self.id)));
        }
        Ok(())
    }
}

/// One clip as a raw log-mel map with its labels.
#[derive(Debug, Clone)]
pub struct Clip {
    pub id: String,
    pub lmfb: Tensor,
    pub label: usize,
    pub device: String,
    pub split: Split,
}

/// Raw dataset before channel assembly and scaling.
#[derive(Debug, Clone)]
pub struct SceneDataset {
    pub classes: Vec<String>,
    pub hierarchy: ClassHierarchy,
    pub devices: Vec<String>,
    pub seen_devices: Vec<String>,
    pub clips: Vec<Clip>,
}

impl SceneDataset {
    /// Content digest for determinism checks.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.clips {
            h.update(c.id.as_bytes());
            h.update([c.label as u8]);
            h.update(c.device.as_bytes());
            for &v in c.lmfb.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Partition clip indices into train / seen-device test / unseen-device
/// test views. Index views only; clips are never copied.
pub fn split_by_device(
    ds: &SceneDataset,
    seen: &BTreeSet<String>,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    if seen.is_empty() {
        return Err(Error::Data("seen device set is empty".to_string()));
    }
    for d in seen {
        if !ds.devices.contains(d) {
            return Err(Error::Data(format!("unknown device id '{d}'")));
        }
    }
    let mut train = Vec::new();
    let mut test_seen = Vec::new();
    let mut test_unseen = Vec::new();
    for (i, clip) in ds.clips.iter().enumerate() {
        match clip.split {
            Split::Train => train.push(i),
            Split::Test => {
                if seen.contains(&clip.device) {
                    test_seen.push(i);
                } else {
                    test_unseen.push(i);
                }
            }
        }
    }
    Ok((train, test_seen, test_unseen))
}

/// A clip after channel assembly and [0,1] scaling, ready for a model.
#[derive(Debug, Clone)]
pub struct Example {
    pub clip_id: String,
    /// [frames, mels, 3]
    pub features: Tensor,
    /// Fine label distribution (one-hot, or soft after mixup).
    pub label_dist: Vec<f32>,
    pub fine_label: usize,
    pub coarse_label: usize,
    pub device: String,
}

/// Model-ready dataset with frozen scaling stats and index views.
#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub classes: Vec<String>,
    pub hierarchy: ClassHierarchy,
    pub devices: Vec<String>,
    pub seen_devices: Vec<String>,
    pub examples: Vec<Example>,
    pub train: Vec<usize>,
    pub test_seen: Vec<usize>,
    pub test_unseen: Vec<usize>,
    pub scale_stats: ScaleStats,
    pub input_shape: [usize; 3],
}

/// Assemble channels, fit min/max on the training split, scale everything.
pub fn prepare(ds: &SceneDataset, mode: ChannelMode, stats: Option<ScaleStats>) -> Result<PreparedDataset> {
    let seen: BTreeSet<String> = ds.seen_devices.iter().cloned().collect();
    let (train, test_seen, test_unseen) = split_by_device(ds, &seen)?;
    if ds.clips.is_empty() {
        return Err(Error::Data("dataset has no clips".to_string()));
    }
    let assembled: Vec<Tensor> = ds
        .clips
        .iter()
        .map(|c| assemble_channels(&c.lmfb, mode))
        .collect::<Result<_>>()?;
    let stats = match stats {
        Some(s) => s,
        None => ScaleStats::fit(train.iter().map(|&i| &assembled[i]))?,
    };
    let k = ds.classes.len();
    let mut examples = Vec::with_capacity(ds.clips.len());
    for (clip, feats) in ds.clips.iter().zip(&assembled) {
        let mut label_dist = vec![0.0f32; k];
        label_dist[clip.label] = 1.0;
        examples.push(Example {
            clip_id: clip.id.clone(),
            features: scale_unit(feats, &stats)?,
            label_dist,
            fine_label: clip.label,
            coarse_label: ds.hierarchy.parent_of(clip.label)?,
            device: clip.device.clone(),
        });
    }
    let shape = examples[0].features.shape();
    let input_shape = [shape[0], shape[1], shape[2]];
    Ok(PreparedDataset {
        classes: ds.classes.clone(),
        hierarchy: ds.hierarchy.clone(),
        devices: ds.devices.clone(),
        seen_devices: ds.seen_devices.clone(),
        examples,
        train,
        test_seen,
        test_unseen,
        scale_stats: stats,
        input_shape,
    })
}

impl PreparedDataset {
    pub fn view(&self, indices: Vec<usize>) -> DatasetView<'_> {
        DatasetView {
            examples: &self.examples,
            indices,
            num_classes: self.classes.len(),
            num_coarse: self.hierarchy.num_coarse(),
            input_shape: self.input_shape,
        }
    }

    pub fn train_view(&self) -> DatasetView<'_> {
        self.view(self.train.clone())
    }

    pub fn test_view(&self) -> DatasetView<'_> {
        let mut idx = self.test_seen.clone();
        idx.extend_from_slice(&self.test_unseen);
        self.view(idx)
    }

    pub fn test_seen_view(&self) -> DatasetView<'_> {
        self.view(self.test_seen.clone())
    }

    pub fn test_unseen_view(&self) -> DatasetView<'_> {
        self.view(self.test_unseen.clone())
    }
}

/// Borrowed index view over prepared examples.
#[derive(Debug, Clone)]
pub struct DatasetView<'a> {
    pub examples: &'a [Example],
    pub indices: Vec<usize>,
    pub num_classes: usize,
    pub num_coarse: usize,
    pub input_shape: [usize; 3],
}

/// One stacked minibatch.
pub struct Batch {
    pub features: Tensor,
    /// [N, K] fine label distributions.
    pub fine_labels: Tensor,
    /// [N, C] coarse label distributions (hierarchy aggregation of fine).
    pub coarse_labels: Tensor,
    pub clip_ids: Vec<String>,
    pub fine_indices: Vec<usize>,
}

impl<'a> DatasetView<'a> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn example(&self, i: usize) -> &Example {
        &self.examples[self.indices[i]]
    }

    /// Stack the view positions `order` into one batch, aggregating coarse
    /// labels through the hierarchy.
    pub fn batch(&self, order: &[usize], hierarchy: &ClassHierarchy) -> Result<Batch> {
        if order.is_empty() {
            return Err(Error::Data("empty batch".to_string()));
        }
        let n = order.len();
        let [f, m, c] = self.input_shape;
        let mut features = vec![0.0f32; n * f * m * c];
        let mut fine = vec![0.0f32; n * self.num_classes];
        let mut coarse = vec![0.0f32; n * self.num_coarse];
        let mut clip_ids = Vec::with_capacity(n);
        let mut fine_indices = Vec::with_capacity(n);
        for (row, &pos) in order.iter().enumerate() {
            let ex = self.example(pos);
            features[row * f * m * c..(row + 1) * f * m * c].copy_from_slice(ex.features.data());
            fine[row * self.num_classes..(row + 1) * self.num_classes].copy_from_slice(&ex.label_dist);
            let agg = hierarchy.coarse_dist(&ex.label_dist)?;
            coarse[row * self.num_coarse..(row + 1) * self.num_coarse].copy_from_slice(&agg);
            clip_ids.push(ex.clip_id.clone());
            fine_indices.push(ex.fine_label);
        }
        Ok(Batch {
            features: Tensor::from_vec(vec![n, f, m, c], features)?,
            fine_labels: Tensor::from_vec(vec![n, self.num_classes], fine)?,
            coarse_labels: Tensor::from_vec(vec![n, self.num_coarse], coarse)?,
            clip_ids,
            fine_indices,
        })
    }
}

/// Round-robin assignment of fine classes onto the three standard coarse
/// groups, used when no hierarchy is configured.
pub fn default_hierarchy(classes: &[String]) -> Result<ClassHierarchy> {
    let coarse = vec![
        "indoor".to_string(),
        "outdoor".to_string(),
        "transportation".to_string(),
    ];
    let parent: Vec<usize> = (0..classes.len()).map(|i| i % 3).collect();
    ClassHierarchy::new(classes.to_vec(), coarse, parent)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_partitions_are_disjoint_and_exhaustive() {
        let cfg = SynthConfig {
            classes: 4,
            devices: 3,
            unseen: 1,
            train_per_cell: 2,
            test_per_cell: 1,
            frames: 12,
            mels: 8,
            noise_sigma: 0.1,
        };
        let ds = synth_generate(&cfg, 5).unwrap();
        let seen: BTreeSet<String> = ds.seen_devices.iter().cloned().collect();
        let (train, seen_t, unseen_t) = split_by_device(&ds, &seen).unwrap();
        assert_eq!(train.len() + seen_t.len() + unseen_t.len(), ds.clips.len());
        let mut all: Vec<usize> = train.iter().chain(&seen_t).chain(&unseen_t).cloned().collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), ds.clips.len());
        for &i in &unseen_t {
            assert!(!seen.contains(&ds.clips[i].device));
        }
    }

    #[test]
    fn all_devices_seen_means_empty_unseen_view() {
        let cfg = SynthConfig {
            classes: 3,
            devices: 2,
            unseen: 0,
            train_per_cell: 2,
            test_per_cell: 1,
            frames: 12,
            mels: 8,
            noise_sigma: 0.1,
        };
        let ds = synth_generate(&cfg, 5).unwrap();
        let seen: BTreeSet<String> = ds.devices.iter().cloned().collect();
        let (_, _, unseen) = split_by_device(&ds, &seen).unwrap();
        assert!(unseen.is_empty());
    }

    #[test]
    fn unknown_device_in_seen_set_errors() {
        let cfg = SynthConfig {
            classes: 3,
            devices: 2,
            unseen: 0,
            train_per_cell: 1,
            test_per_cell: 1,
            frames: 12,
            mels: 8,
            noise_sigma: 0.1,
        };
        let ds = synth_generate(&cfg, 5).unwrap();
        let mut seen = BTreeSet::new();
        seen.insert("dev_zz".to_string());
        assert!(split_by_device(&ds, &seen).is_err());
    }

    #[test]
    fn prepared_features_live_in_unit_range() {
        let cfg = SynthConfig {
            classes: 3,
            devices: 3,
            unseen: 1,
            train_per_cell: 3,
            test_per_cell: 2,
            frames: 12,
            mels: 8,
            noise_sigma: 0.15,
        };
        let ds = synth_generate(&cfg, 9).unwrap();
        let prep = prepare(&ds, ChannelMode::Deltas, None).unwrap();
        assert_eq!(prep.input_shape, [12, 8, 3]);
        for ex in &prep.examples {
            for &v in ex.features.data() {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn batch_aggregates_coarse_labels() {
        let cfg = SynthConfig {
            classes: 4,
            devices: 2,
            unseen: 0,
            train_per_cell: 2,
            test_per_cell: 1,
            frames: 12,
            mels: 8,
            noise_sigma: 0.1,
        };
        let ds = synth_generate(&cfg, 3).unwrap();
        let prep = prepare(&ds, ChannelMode::Deltas, None).unwrap();
        let view = prep.train_view();
        let batch = view.batch(&[0, 1, 2], &prep.hierarchy).unwrap();
        assert_eq!(batch.features.shape()[0], 3);
        for row in 0..3 {
            let fine = &batch.fine_labels.data()[row * 4..(row + 1) * 4];
            let coarse = &batch.coarse_labels.data()[row * 3..(row + 1) * 3];
            crate::fusion::check_label_consistency(&prep.hierarchy, fine, coarse).unwrap();
        }
    }
}
