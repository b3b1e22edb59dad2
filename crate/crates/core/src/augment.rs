//! Data augmentation: mixup, spectrum masking, spectrum correction, and the
//! waveform-level schemes (pitch shift, speed change, additive noise, clip
//! mixing). All draws run on per-clip derived RNG streams so parallel order
//! cannot change results.

use rand::Rng;
use rand_distr::{Beta, Distribution, Normal};

use crate::error::{Error, Result};
use crate::features::AudioClip;
use crate::tensor::Tensor;

/// Interpolate a pair of feature tensors and their label distributions.
pub fn mixup(x1: &Tensor, x2: &Tensor, y1: &[f32], y2: &[f32], lambda: f32) -> Result<(Tensor, Vec<f32>)> {
    if x1.shape() != x2.shape() {
        return Err(Error::shape(
            "mixup",
            format!("{:?} vs {:?}", x1.shape(), x2.shape()),
        ));
    }
    if y1.len() != y2.len() {
        return Err(Error::shape("mixup", format!("labels {} vs {}", y1.len(), y2.len())));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::param("lambda", format!("must be in [0,1], got {lambda}")));
    }
    let data: Vec<f32> = x1
        .data()
        .iter()
        .zip(x2.data())
        .map(|(&a, &b)| lambda * a + (1.0 - lambda) * b)
        .collect();
    let labels: Vec<f32> = y1
        .iter()
        .zip(y2)
        .map(|(&a, &b)| lambda * a + (1.0 - lambda) * b)
        .collect();
    Ok((Tensor::from_vec(x1.shape().to_vec(), data)?, labels))
}

/// Draw the mixup coefficient from Beta(alpha, alpha).
pub fn sample_mixup_lambda(alpha: f32, rng: &mut impl Rng) -> Result<f32> {
    if alpha <= 0.0 {
        return Err(Error::param("mixup_alpha", format!("must be positive, got {alpha}")));
    }
    let beta = Beta::new(alpha as f64, alpha as f64)
        .map_err(|e| Error::param("mixup_alpha", e.to_string()))?;
    Ok(beta.sample(rng) as f32)
}

/// Mask random time and frequency bands with the tensor mean. Works on
/// `[frames, mels]` or `[frames, mels, ch]` maps; every unmasked cell stays
/// bit-identical.
pub fn spec_augment(
    x: &Tensor,
    n_time_masks: usize,
    n_freq_masks: usize,
    max_time_width: usize,
    max_freq_width: usize,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 2 && s.len() != 3 {
        return Err(Error::shape("spec_augment", format!("want rank 2 or 3, got {s:?}")));
    }
    let (frames, mels) = (s[0], s[1]);
    let ch = if s.len() == 3 { s[2] } else { 1 };
    if max_time_width >= frames && n_time_masks > 0 {
        return Err(Error::param(
            "max_time_width",
            format!("{max_time_width} must be below {frames} frames"),
        ));
    }
    if max_freq_width >= mels && n_freq_masks > 0 {
        return Err(Error::param(
            "max_freq_width",
            format!("{max_freq_width} must be below {mels} bins"),
        ));
    }
    let mean = (x.data().iter().map(|&v| v as f64).sum::<f64>() / x.numel() as f64) as f32;
    let mut out = x.clone();
    for _ in 0..n_time_masks {
        let width = rng.random_range(0..=max_time_width);
        let start = rng.random_range(0..=frames - width.max(1));
        for t in start..(start + width).min(frames) {
            for i in 0..mels * ch {
                out.data_mut()[t * mels * ch + i] = mean;
            }
        }
    }
    for _ in 0..n_freq_masks {
        let width = rng.random_range(0..=max_freq_width);
        let start = rng.random_range(0..=mels - width.max(1));
        for t in 0..frames {
            for b in start..(start + width).min(mels) {
                for c in 0..ch {
                    out.data_mut()[(t * mels + b) * ch + c] = mean;
                }
            }
        }
    }
    Ok(out)
}

/// Flatten device coloration: multiply every spectrum bin by
/// `ref_profile[b] / device_profile[b]`. Profiles are per-device mean
/// spectra over the training set, in the same representation as `x`.
pub fn spectrum_correction(x: &Tensor, ref_profile: &[f32], device_profile: &[f32]) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(Error::shape("spectrum_correction", format!("want [frames, bins], got {s:?}")));
    }
    let bins = s[1];
    if ref_profile.len() != bins || device_profile.len() != bins {
        return Err(Error::shape(
            "spectrum_correction",
            format!("profiles {}/{} vs {bins} bins", ref_profile.len(), device_profile.len()),
        ));
    }
    if let Some(b) = device_profile.iter().chain(ref_profile).position(|&v| v <= 0.0) {
        return Err(Error::Input(format!("nonpositive profile value at bin {b}")));
    }
    let mut out = x.clone();
    for frame in out.data_mut().chunks_mut(bins) {
        for (b, v) in frame.iter_mut().enumerate() {
            *v *= ref_profile[b] / device_profile[b];
        }
    }
    Ok(out)
}

/// Mean spectrum over a set of `[frames, bins]` spectrograms.
pub fn mean_spectrum_profile<'a>(spectra: impl Iterator<Item = &'a Tensor>) -> Result<Vec<f32>> {
    let mut acc: Vec<f64> = Vec::new();
    let mut frames_total = 0usize;
    for t in spectra {
        let bins = t.shape()[1];
        if acc.is_empty() {
            acc = vec![0.0; bins];
        } else if acc.len() != bins {
            return Err(Error::shape(
                "mean_spectrum_profile",
                format!("bin count changed from {} to {bins}", acc.len()),
            ));
        }
        for frame in t.data().chunks(bins) {
            for (a, &v) in acc.iter_mut().zip(frame) {
                *a += v as f64;
            }
            frames_total += 1;
        }
    }
    if frames_total == 0 {
        return Err(Error::Input("no spectra to average".to_string()));
    }
    Ok(acc.iter().map(|&v| (v / frames_total as f64) as f32).collect())
}

/// Waveform-level scheme selector.
#[derive(Debug, Clone)]
pub enum WaveformAugment<'a> {
    /// Semitones in [-2, 2].
    PitchShift(f32),
    /// Factor in [0.8, 1.2].
    SpeedChange(f32),
    /// Target SNR in dB (>= 0); `None` leaves the clip untouched.
    RandomNoise(Option<f32>),
    /// Blend with a partner clip; the primary clip's label is retained.
    MixAudios { partner: &'a AudioClip, weight: f32 },
}

fn resample_linear(samples: &[f32], rate: f64) -> Vec<f32> {
    let out_len = ((samples.len() as f64 / rate).round() as usize).max(1);
    (0..out_len)
        .map(|i| {
            let pos = i as f64 * rate;
            let i0 = pos.floor() as usize;
            let frac = (pos - i0 as f64) as f32;
            let a = samples[i0.min(samples.len() - 1)];
            let b = samples[(i0 + 1).min(samples.len() - 1)];
            a + frac * (b - a)
        })
        .collect()
}

fn crop_or_pad_center(mut samples: Vec<f32>, target: usize) -> Vec<f32> {
    use std::cmp::Ordering;
    match samples.len().cmp(&target) {
        Ordering::Equal => samples,
        Ordering::Greater => {
            let start = (samples.len() - target) / 2;
            samples[start..start + target].to_vec()
        }
        Ordering::Less => {
            let pad = target - samples.len();
            let left = pad / 2;
            let mut out = vec![0.0f32; target];
            out[left..left + samples.len()].copy_from_slice(&samples);
            samples.clear();
            out
        }
    }
}

/// Apply one waveform scheme; the output keeps the clip's length, rate,
/// device, and label.
pub fn waveform_augment(clip: &AudioClip, kind: &WaveformAugment, rng: &mut impl Rng) -> Result<AudioClip> {
    let original_len = clip.samples.len();
    let samples = match kind {
        WaveformAugment::PitchShift(semitones) => {
            if semitones.abs() > 2.0 {
                return Err(Error::param(
                    "semitones",
                    format!("|semitones| must be <= 2, got {semitones}"),
                ));
            }
            let rate = 2f64.powf(*semitones as f64 / 12.0);
            crop_or_pad_center(resample_linear(&clip.samples, rate), original_len)
        }
        WaveformAugment::SpeedChange(factor) => {
            if !(0.8..=1.2).contains(factor) {
                return Err(Error::param(
                    "speed_factor",
                    format!("factor must be in [0.8, 1.2], got {factor}"),
                ));
            }
            crop_or_pad_center(resample_linear(&clip.samples, *factor as f64), original_len)
        }
        WaveformAugment::RandomNoise(None) => clip.samples.clone(),
        WaveformAugment::RandomNoise(Some(snr_db)) => {
            if *snr_db < 0.0 {
                return Err(Error::param("snr_db", format!("must be >= 0, got {snr_db}")));
            }
            let sig_power = clip.samples.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>()
                / original_len.max(1) as f64;
            let noise_power = sig_power / 10f64.powf(*snr_db as f64 / 10.0);
            let normal = Normal::new(0.0, noise_power.sqrt())
                .map_err(|e| Error::param("snr_db", e.to_string()))?;
            clip.samples
                .iter()
                .map(|&v| v + normal.sample(rng) as f32)
                .collect()
        }
        WaveformAugment::MixAudios { partner, weight } => {
            if !(0.0..=1.0).contains(weight) {
                return Err(Error::param("mix_weight", format!("must be in [0,1], got {weight}")));
            }
            if partner.samples.len() != original_len {
                return Err(Error::shape(
                    "mix_audios",
                    format!("partner has {} samples vs {original_len}", partner.samples.len()),
                ));
            }
            clip.samples
                .iter()
                .zip(&partner.samples)
                .map(|(&a, &b)| weight * a + (1.0 - weight) * b)
                .collect()
        }
    };
    Ok(AudioClip {
        samples,
        sample_rate: clip.sample_rate,
        device_id: clip.device_id.clone(),
        scene_label: clip.scene_label.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(samples: Vec<f32>) -> AudioClip {
        AudioClip {
            samples,
            sample_rate: 16_000,
            device_id: "dev_a".into(),
            scene_label: "park".into(),
        }
    }

    #[test]
    fn mixup_endpoint_returns_first_pair() {
        let x1 = Tensor::filled(vec![2, 2], 1.0);
        let x2 = Tensor::filled(vec![2, 2], 5.0);
        let (x, y) = mixup(&x1, &x2, &[1.0, 0.0], &[0.0, 1.0], 1.0).unwrap();
        assert!(x.bit_eq(&x1));
        assert_eq!(y, vec![1.0, 0.0]);
    }

    #[test]
    fn mixup_midpoint_averages() {
        let x1 = Tensor::filled(vec![3], 0.0);
        let x2 = Tensor::filled(vec![3], 1.0);
        let (x, y) = mixup(&x1, &x2, &[1.0, 0.0], &[0.0, 1.0], 0.5).unwrap();
        assert!(x.data().iter().all(|&v| v == 0.5));
        assert_eq!(y, vec![0.5, 0.5]);
    }

    #[test]
    fn mixup_matches_elementwise_formula() {
        use rand::Rng;
        let mut rng = crate::rng::substream(71, "mixup");
        let a: Vec<f32> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x1 = Tensor::from_vec(vec![4, 6], a.clone()).unwrap();
        let x2 = Tensor::from_vec(vec![4, 6], b.clone()).unwrap();
        let lam = 0.37f32;
        let (x, y) = mixup(&x1, &x2, &[0.3, 0.7], &[0.9, 0.1], lam).unwrap();
        for i in 0..24 {
            let expect = lam * a[i] + (1.0 - lam) * b[i];
            assert!((x.data()[i] - expect).abs() < 1e-7);
        }
        let label_sum: f32 = y.iter().sum();
        assert!((label_sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn spec_augment_zero_masks_is_identity() {
        let x = Tensor::from_vec(vec![10, 8], (0..80).map(|v| v as f32).collect()).unwrap();
        let mut rng = crate::rng::substream(73, "sa");
        let out = spec_augment(&x, 0, 0, 4, 3, &mut rng).unwrap();
        assert!(out.bit_eq(&x));
    }

    #[test]
    fn spec_augment_on_constant_tensor_is_fixed_point() {
        let x = Tensor::filled(vec![12, 8], 2.5);
        let mut rng = crate::rng::substream(79, "sa2");
        let out = spec_augment(&x, 2, 2, 4, 3, &mut rng).unwrap();
        assert!(out.bit_eq(&x));
    }

    #[test]
    fn spec_augment_modified_cells_form_bands() {
        let x = Tensor::from_vec(vec![16, 12], (0..192).map(|v| v as f32 * 0.1).collect()).unwrap();
        let mut rng = crate::rng::substream(83, "sa3");
        let out = spec_augment(&x, 1, 1, 5, 4, &mut rng).unwrap();
        // diff oracle: every modified cell sits in a full row band or column band
        let mut rows = std::collections::BTreeSet::new();
        let mut cols = std::collections::BTreeSet::new();
        for t in 0..16 {
            for b in 0..12 {
                if out.data()[t * 12 + b] != x.data()[t * 12 + b] {
                    rows.insert(t);
                    cols.insert(b);
                }
            }
        }
        let mean = (x.data().iter().map(|&v| v as f64).sum::<f64>() / 192.0) as f32;
        for t in 0..16 {
            for b in 0..12 {
                let changed = out.data()[t * 12 + b] != x.data()[t * 12 + b];
                if changed {
                    assert_eq!(out.data()[t * 12 + b], mean);
                }
            }
        }
        // bands are contiguous
        let contiguous = |s: &std::collections::BTreeSet<usize>| {
            s.is_empty() || s.iter().max().unwrap() - s.iter().min().unwrap() + 1 >= s.len()
        };
        assert!(contiguous(&rows) && contiguous(&cols));
    }

    #[test]
    fn spec_augment_rejects_oversized_mask() {
        let x = Tensor::filled(vec![8, 8], 1.0);
        let mut rng = crate::rng::substream(89, "sa4");
        assert!(spec_augment(&x, 1, 0, 8, 0, &mut rng).is_err());
    }

    #[test]
    fn spec_augment_deterministic_per_seed() {
        let x = Tensor::from_vec(vec![16, 12], (0..192).map(|v| v as f32 * 0.3).collect()).unwrap();
        let a = spec_augment(&x, 2, 2, 5, 4, &mut crate::rng::substream(7, "s")).unwrap();
        let b = spec_augment(&x, 2, 2, 5, 4, &mut crate::rng::substream(7, "s")).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn correction_with_matching_profiles_is_identity() {
        let x = Tensor::from_vec(vec![3, 4], (1..=12).map(|v| v as f32).collect()).unwrap();
        let profile = vec![1.0, 2.0, 3.0, 4.0];
        let out = spectrum_correction(&x, &profile, &profile).unwrap();
        for (a, b) in x.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn correction_halves_under_doubled_device_profile() {
        let x = Tensor::filled(vec![2, 3], 8.0);
        let refp = vec![1.0, 1.0, 1.0];
        let devp = vec![2.0, 2.0, 2.0];
        let out = spectrum_correction(&x, &refp, &devp).unwrap();
        assert!(out.data().iter().all(|&v| (v - 4.0).abs() < 1e-6));
    }

    #[test]
    fn correction_aligns_device_mean_to_reference() {
        use rand::Rng;
        let mut rng = crate::rng::substream(97, "sc");
        let bins = 6;
        let device_gain: Vec<f32> = (0..bins).map(|_| rng.random_range(0.5..2.0)).collect();
        let spectra: Vec<Tensor> = (0..20)
            .map(|_| {
                let data: Vec<f32> = (0..4 * bins)
                    .map(|i| rng.random_range(0.5..1.5) * device_gain[i % bins])
                    .collect();
                Tensor::from_vec(vec![4, bins], data).unwrap()
            })
            .collect();
        let dev_profile = mean_spectrum_profile(spectra.iter()).unwrap();
        let ref_profile = vec![1.0f32; bins];
        let corrected: Vec<Tensor> = spectra
            .iter()
            .map(|t| spectrum_correction(t, &ref_profile, &dev_profile).unwrap())
            .collect();
        let new_profile = mean_spectrum_profile(corrected.iter()).unwrap();
        for (got, want) in new_profile.iter().zip(&ref_profile) {
            assert!((got - want).abs() < 1e-5, "{got} vs {want}");
        }
    }

    #[test]
    fn correction_rejects_nonpositive_profile() {
        let x = Tensor::filled(vec![2, 2], 1.0);
        assert!(spectrum_correction(&x, &[1.0, 1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn speed_factor_one_is_identity() {
        let c = clip((0..500).map(|n| (n as f32 * 0.01).sin()).collect());
        let mut rng = crate::rng::substream(101, "wav");
        let out = waveform_augment(&c, &WaveformAugment::SpeedChange(1.0), &mut rng).unwrap();
        assert_eq!(out.samples.len(), c.samples.len());
        for (a, b) in c.samples.iter().zip(&out.samples) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn noise_disabled_sentinel_is_identity() {
        let c = clip(vec![0.5; 100]);
        let mut rng = crate::rng::substream(103, "wav2");
        let out = waveform_augment(&c, &WaveformAugment::RandomNoise(None), &mut rng).unwrap();
        assert_eq!(out.samples, c.samples);
    }

    #[test]
    fn noise_at_zero_db_hits_the_target_power() {
        let c = clip((0..20_000).map(|n| (n as f32 * 0.05).sin() * 0.7).collect());
        let mut rng = crate::rng::substream(107, "wav3");
        let out = waveform_augment(&c, &WaveformAugment::RandomNoise(Some(0.0)), &mut rng).unwrap();
        let sig_power: f64 = c.samples.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / c.samples.len() as f64;
        let noise: Vec<f64> = out
            .samples
            .iter()
            .zip(&c.samples)
            .map(|(&a, &b)| (a - b) as f64)
            .collect();
        let noise_power: f64 = noise.iter().map(|v| v * v).sum::<f64>() / noise.len() as f64;
        let snr_db = 10.0 * (sig_power / noise_power).log10();
        assert!(snr_db.abs() < 0.5, "measured snr {snr_db:.3} dB");
    }

    #[test]
    fn augmentation_preserves_length() {
        let c = clip((0..1000).map(|n| (n as f32 * 0.02).sin()).collect());
        let partner = clip(vec![0.1; 1000]);
        let mut rng = crate::rng::substream(109, "wav4");
        for kind in [
            WaveformAugment::PitchShift(1.5),
            WaveformAugment::PitchShift(-2.0),
            WaveformAugment::SpeedChange(0.8),
            WaveformAugment::SpeedChange(1.2),
            WaveformAugment::RandomNoise(Some(10.0)),
            WaveformAugment::MixAudios {
                partner: &partner,
                weight: 0.7,
            },
        ] {
            let out = waveform_augment(&c, &kind, &mut rng).unwrap();
            assert_eq!(out.samples.len(), c.samples.len(), "{kind:?}");
            assert_eq!(out.scene_label, c.scene_label);
        }
    }

    #[test]
    fn out_of_range_parameters_rejected() {
        let c = clip(vec![0.1; 100]);
        let mut rng = crate::rng::substream(113, "wav5");
        assert!(waveform_augment(&c, &WaveformAugment::SpeedChange(1.5), &mut rng).is_err());
        assert!(waveform_augment(&c, &WaveformAugment::PitchShift(3.0), &mut rng).is_err());
        assert!(waveform_augment(&c, &WaveformAugment::RandomNoise(Some(-5.0)), &mut rng).is_err());
    }

    #[test]
    fn mixup_lambda_sampling_stays_in_unit_interval() {
        let mut rng = crate::rng::substream(127, "beta");
        for _ in 0..200 {
            let l = sample_mixup_lambda(0.4, &mut rng).unwrap();
            assert!((0.0..=1.0).contains(&l));
        }
        assert!(sample_mixup_lambda(0.0, &mut rng).is_err());
    }
}
