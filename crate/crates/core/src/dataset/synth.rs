//! Synthetic device-shifted scene generator.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{default_hierarchy, Clip, DeviceProfile, SceneDataset, Split};
use crate::error::{Error, Result};
use crate::features::AudioClip;
use crate::rng::{substream, substream_indexed};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub classes: usize,
    pub devices: usize,
    pub unseen: usize,
    pub train_per_cell: usize,
    pub test_per_cell: usize,
    pub frames: usize,
    pub mels: usize,
    pub noise_sigma: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 10,
            devices: 6,
            unseen: 2,
            train_per_cell: 100,
            test_per_cell: 20,
            frames: 20,
            mels: 32,
            noise_sigma: 0.2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 3 {
            return Err(Error::param("classes", "hierarchy needs at least 3 classes"));
        }
        if self.devices == 0 || self.unseen >= self.devices {
            return Err(Error::param(
                "devices",
                format!("need unseen < devices, got {} / {}", self.unseen, self.devices),
            ));
        }
        if self.train_per_cell == 0 || self.test_per_cell == 0 {
            return Err(Error::param("clips_per_cell", "must be positive"));
        }
        if self.frames < 9 || self.mels < 4 {
            return Err(Error::param("frames", "need frames >= 9 and mels >= 4"));
        }
        Ok(())
    }
}

/// Smooth random curve over `n` points: a few low-order cosines.
fn smooth_curve(n: usize, amplitude: f32, rng: &mut impl Rng) -> Vec<f32> {
    let terms: Vec<(f32, f32, f32)> = (1..=4)
        .map(|j| {
            (
                rng.random_range(-1.0..1.0) / j as f32,
                j as f32,
                rng.random_range(0.0..std::f32::consts::TAU),
            )
        })
        .collect();
    (0..n)
        .map(|i| {
            let x = (i as f32 + 0.5) / n as f32;
            amplitude
                * terms
                    .iter()
                    .map(|&(a, j, phi)| a * (std::f32::consts::PI * j * x + phi).cos())
                    .sum::<f32>()
        })
        .collect()
}

fn class_names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("scene_{i:02}")).collect()
}

fn device_names(d: usize) -> Vec<String> {
    (0..d).map(|i| format!("dev_{}", (b'a' + i as u8) as char)).collect()
}

pub(crate) fn device_profiles(cfg: &SynthConfig, seed: u64) -> Vec<DeviceProfile> {
    device_names(cfg.devices)
        .into_iter()
        .enumerate()
        .map(|(d, id)| {
            let mut rng = substream_indexed(seed, "synth:device", d as u64);
            let log_gains = smooth_curve(cfg.mels, 0.5, &mut rng);
            DeviceProfile {
                id,
                band_gains: log_gains.iter().map(|&g| g.exp()).collect(),
                noise_floor_db: rng.random_range(0.0..6.0),
                gain_offset_db: rng.random_range(-3.0..3.0),
            }
        })
        .collect()
}

fn class_prototypes(cfg: &SynthConfig, seed: u64) -> Vec<Vec<f32>> {
    (0..cfg.classes)
        .map(|k| {
            let mut rng = substream_indexed(seed, "synth:proto", k as u64);
            smooth_curve(cfg.mels, 2.0, &mut rng)
        })
        .collect()
}

fn render_clip(
    proto: &[f32],
    device: &DeviceProfile,
    cfg: &SynthConfig,
    clip_seed: u64,
    seed: u64,
) -> Tensor {
    let mut rng = substream_indexed(seed, "synth:clip", clip_seed);
    let envelope = smooth_curve(cfg.frames, 0.4, &mut rng);
    let sigma = cfg.noise_sigma as f64 * 10f64.powf(device.noise_floor_db as f64 / 20.0);
    let normal = Normal::new(0.0, sigma).expect("sigma positive");
    let offset = device.gain_offset_db / 20.0 * std::f32::consts::LN_10;
    let mut data = vec![0.0f32; cfg.frames * cfg.mels];
    for t in 0..cfg.frames {
        for (b, slot) in data[t * cfg.mels..(t + 1) * cfg.mels].iter_mut().enumerate() {
            // prototype chosen before the device is applied: device effects
            // never depend on the class
            *slot = proto[b]
                + envelope[t]
                + device.band_gains[b].ln()
                + offset
                + normal.sample(&mut rng) as f32;
        }
    }
    Tensor::from_vec(vec![cfg.frames, cfg.mels], data).expect("generator shapes are consistent")
}

/// Generate the feature-domain dataset. Deterministic per seed; clips are
/// rendered in parallel on per-clip derived streams.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<SceneDataset> {
    cfg.validate()?;
    let classes = class_names(cfg.classes);
    let devices = device_profiles(cfg, seed);
    let protos = class_prototypes(cfg, seed);
    let seen_count = cfg.devices - cfg.unseen;

    // plan (id, class, device index, split, stream index) in a fixed order
    let mut plan: Vec<(String, usize, usize, Split)> = Vec::new();
    for k in 0..cfg.classes {
        for d in 0..seen_count {
            for i in 0..cfg.train_per_cell {
                plan.push((
                    format!("train/{}/{}/{i:03}", classes[k], devices[d].id),
                    k,
                    d,
                    Split::Train,
                ));
            }
        }
    }
    for k in 0..cfg.classes {
        for d in 0..cfg.devices {
            for i in 0..cfg.test_per_cell {
                plan.push((
                    format!("test/{}/{}/{i:03}", classes[k], devices[d].id),
                    k,
                    d,
                    Split::Test,
                ));
            }
        }
    }

    let clips: Vec<Clip> = plan
        .par_iter()
        .enumerate()
        .map(|(idx, (id, k, d, split))| Clip {
            id: id.clone(),
            lmfb: render_clip(&protos[*k], &devices[*d], cfg, idx as u64, seed),
            label: *k,
            device: devices[*d].id.clone(),
            split: *split,
        })
        .collect();

    let hierarchy = default_hierarchy(&classes)?;
    Ok(SceneDataset {
        classes,
        hierarchy,
        devices: devices.iter().map(|p| p.id.clone()).collect(),
        seen_devices: devices[..seen_count].iter().map(|p| p.id.clone()).collect(),
        clips,
    })
}

/// Raw-waveform variant: each clip is a sum of sinusoids at the prototype's
/// strongest bands, colored by the device curve, plus noise. Exercises the
/// full STFT path end to end.
pub fn synth_generate_waveform(
    cfg: &SynthConfig,
    sample_rate: u32,
    samples_per_clip: usize,
    seed: u64,
) -> Result<(Vec<AudioClip>, Vec<String>, Vec<String>)> {
    cfg.validate()?;
    let classes = class_names(cfg.classes);
    let devices = device_profiles(cfg, seed);
    let protos = class_prototypes(cfg, seed);
    let seen_count = cfg.devices - cfg.unseen;

    // strongest three bands per class, amplitudes from the prototype
    let top_bands: Vec<Vec<(usize, f32)>> = protos
        .iter()
        .map(|p| {
            let mut order: Vec<usize> = (0..p.len()).collect();
            order.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap());
            order[..3].iter().map(|&b| (b, p[b].exp())).collect()
        })
        .collect();
    let band_freq = |b: usize| (b + 1) as f32 * sample_rate as f32 / (2.0 * (cfg.mels + 1) as f32);

    let mut clips = Vec::new();
    let mut stream = 0u64;
    for k in 0..cfg.classes {
        for (d, dev) in devices.iter().enumerate().take(seen_count) {
            for _ in 0..cfg.train_per_cell {
                let mut rng = substream_indexed(seed, "synth:wave", stream);
                stream += 1;
                let noise_amp = 0.01 * 10f32.powf(dev.noise_floor_db / 20.0);
                let samples: Vec<f32> = (0..samples_per_clip)
                    .map(|n| {
                        let t = n as f32 / sample_rate as f32;
                        let mut v = 0.0f32;
                        for &(b, amp) in &top_bands[k] {
                            let gain = dev.band_gains[b.min(cfg.mels - 1)];
                            v += 0.05 * amp * gain * (std::f32::consts::TAU * band_freq(b) * t).sin();
                        }
                        v + noise_amp * rng.random_range(-1.0f32..1.0)
                    })
                    .collect();
                clips.push(AudioClip {
                    samples,
                    sample_rate,
                    device_id: devices[d].id.clone(),
                    scene_label: classes[k].clone(),
                });
            }
        }
    }
    Ok((
        clips,
        classes,
        devices.iter().map(|p| p.id.clone()).collect(),
    ))
}
