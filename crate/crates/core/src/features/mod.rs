//! Log-mel feature extraction: STFT power, triangular mel filterbank,
//! delta channels, and [0,1] scaling with frozen corpus statistics.

mod mel;
mod stft;
pub mod wav;

pub use mel::{log_mel, mel_filterbank};
pub use stft::stft_power;

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor_f32, Tensor};

/// A mono clip with its recording context.
#[derive(Debug, Clone)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub device_id: String,
    pub scene_label: String,
}

/// What the three input channels carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelMode {
    /// log-mel, first-order delta, second-order delta
    Deltas,
    /// the log-mel map replicated three times
    Replicate,
}

impl ChannelMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "deltas" => Ok(ChannelMode::Deltas),
            "replicate" => Ok(ChannelMode::Replicate),
            other => Err(Error::Config(format!("unknown channel mode '{other}'"))),
        }
    }
}

/// Extraction constants. Frames follow `floor((len - win)/hop) + 1` with no
/// centering or padding.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub n_fft: usize,
    pub win: usize,
    pub hop: usize,
    pub mel_bins: usize,
    pub fmin: f32,
    /// Defaults to sample_rate / 2 when unset.
    pub fmax: Option<f32>,
    pub channels: ChannelMode,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            n_fft: 2048,
            win: 2048,
            hop: 1024,
            mel_bins: 128,
            fmin: 0.0,
            fmax: None,
            channels: ChannelMode::Deltas,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.hop > 0 && self.hop <= self.win && self.win <= self.n_fft) {
            return Err(Error::Config(format!(
                "need 0 < hop <= win <= n_fft, got hop {} win {} n_fft {}",
                self.hop, self.win, self.n_fft
            )));
        }
        if self.mel_bins == 0 {
            return Err(Error::Config("mel_bins must be positive".to_string()));
        }
        Ok(())
    }

    pub fn num_frames(&self, samples: usize) -> Result<usize> {
        if samples < self.win {
            return Err(Error::Input(format!(
                "clip of {samples} samples is shorter than one window ({})",
                self.win
            )));
        }
        Ok((samples - self.win) / self.hop + 1)
    }

    /// Stable hash of every extraction constant.
    pub fn fingerprint(&self) -> String {
        let canon = format!(
            "n_fft={};win={};hop={};mel_bins={};fmin={};fmax={:?};channels={:?}",
            self.n_fft, self.win, self.hop, self.mel_bins, self.fmin, self.fmax, self.channels
        );
        let digest = Sha256::digest(canon.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Feature map plus the fingerprint of the config that produced it.
#[derive(Debug, Clone)]
pub struct FeatureTensor {
    pub data: Tensor,
    pub fingerprint: String,
}

/// First-order regression delta over a 9-frame window. Frames without a
/// full window copy the nearest fully-covered frame, so constants stay
/// exactly zero and a linear ramp stays exactly constant at the edges.
pub fn delta_time(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(Error::shape("delta_time", format!("want [frames, mels], got {s:?}")));
    }
    let (frames, mels) = (s[0], s[1]);
    if frames < 9 {
        return Err(Error::Input(format!(
            "delta needs at least 9 frames, got {frames}"
        )));
    }
    const HALF: usize = 4;
    const NORM: f64 = 60.0; // 2 * (1 + 4 + 9 + 16)
    let src = x.data();
    let mut out = vec![0.0f32; frames * mels];
    for t in HALF..frames - HALF {
        for b in 0..mels {
            let mut acc = 0.0f64;
            for k in 1..=HALF {
                acc += k as f64 * (src[(t + k) * mels + b] as f64 - src[(t - k) * mels + b] as f64);
            }
            out[t * mels + b] = (acc / NORM) as f32;
        }
    }
    for t in 0..HALF {
        let (dst, src_row) = (t * mels, HALF * mels);
        out.copy_within(src_row..src_row + mels, dst);
    }
    for t in frames - HALF..frames {
        let (dst, src_row) = (t * mels, (frames - HALF - 1) * mels);
        out.copy_within(src_row..src_row + mels, dst);
    }
    Tensor::from_vec(vec![frames, mels], out)
}

/// Stack the log-mel map with its deltas (or replicas) into
/// `[frames, mels, 3]`.
pub fn assemble_channels(lmfb: &Tensor, mode: ChannelMode) -> Result<Tensor> {
    let s = lmfb.shape();
    if s.len() != 2 {
        return Err(Error::shape("assemble_channels", format!("want [frames, mels], got {s:?}")));
    }
    let (frames, mels) = (s[0], s[1]);
    let (c1, c2) = match mode {
        ChannelMode::Deltas => {
            let d = delta_time(lmfb)?;
            let dd = delta_time(&d)?;
            (d, dd)
        }
        ChannelMode::Replicate => (lmfb.clone(), lmfb.clone()),
    };
    let mut out = vec![0.0f32; frames * mels * 3];
    for i in 0..frames * mels {
        out[i * 3] = lmfb.data()[i];
        out[i * 3 + 1] = c1.data()[i];
        out[i * 3 + 2] = c2.data()[i];
    }
    Tensor::from_vec(vec![frames, mels, 3], out)
}

/// Global min/max over the training corpus, frozen for evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleStats {
    pub min: f32,
    pub max: f32,
}

impl ScaleStats {
    pub fn fit<'a>(tensors: impl Iterator<Item = &'a Tensor>) -> Result<ScaleStats> {
        let mut min = f32::INFINITY;
        let mut max = f32::NEG_INFINITY;
        for t in tensors {
            for &v in t.data() {
                min = min.min(v);
                max = max.max(v);
            }
        }
        if !(min < max) {
            return Err(Error::Input(format!(
                "degenerate scaling stats: min {min}, max {max}"
            )));
        }
        Ok(ScaleStats { min, max })
    }
}

/// Map into [0,1] via `(x - min) / (max - min)`, clipping anything outside
/// the fitted range.
pub fn scale_unit(x: &Tensor, stats: &ScaleStats) -> Result<Tensor> {
    if !(stats.min < stats.max) {
        return Err(Error::Input(format!(
            "degenerate scaling stats: min {}, max {}",
            stats.min, stats.max
        )));
    }
    let span = stats.max - stats.min;
    let data = x
        .data()
        .iter()
        .map(|&v| ((v - stats.min) / span).clamp(0.0, 1.0))
        .collect();
    Tensor::from_vec(x.shape().to_vec(), data)
}

/// Inverse of [`scale_unit`] for values inside the fitted range.
pub fn unscale_unit(x: &Tensor, stats: &ScaleStats) -> Result<Tensor> {
    let span = stats.max - stats.min;
    let data = x.data().iter().map(|&v| v * span + stats.min).collect();
    Tensor::from_vec(x.shape().to_vec(), data)
}

/// Whole pipeline for one clip: STFT power -> log-mel -> channels.
/// Scaling happens afterwards with corpus-level stats.
pub fn extract_features(clip: &AudioClip, cfg: &FeatureConfig) -> Result<Tensor> {
    cfg.validate()?;
    let power = stft_power(&clip.samples, cfg)?;
    let lm = log_mel(&power, cfg, clip.sample_rate)?;
    assemble_channels(&lm, cfg.channels)
}

/// Write a feature tensor with a JSON sidecar carrying the config
/// fingerprint.
pub fn write_feature_file(path: &Path, tensor: &Tensor, fingerprint: &str) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    write_tensor_f32(&mut f, tensor.shape(), tensor.data())?;
    let sidecar = serde_json::json!({
        "fingerprint": fingerprint,
        "shape": tensor.shape(),
    });
    std::fs::write(path.with_extension("json"), sidecar.to_string())?;
    Ok(())
}

/// Read a feature tensor; returns the sidecar fingerprint when present.
pub fn read_feature_file(path: &Path) -> Result<(Tensor, Option<String>)> {
    let mut f = std::fs::File::open(path)?;
    let tensor = read_tensor(&mut f)?.into_tensor()?;
    let sidecar_path = path.with_extension("json");
    let fingerprint = if sidecar_path.exists() {
        let text = std::fs::read_to_string(sidecar_path)?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Input(format!("bad feature sidecar: {e}")))?;
        value["fingerprint"].as_str().map(str::to_string)
    } else {
        None
    };
    Ok((tensor, fingerprint))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count_matches_loop_oracle() {
        use rand::Rng;
        let mut rng = crate::rng::substream(41, "frames");
        for _ in 0..1000 {
            let win = rng.random_range(4..512usize);
            let hop = rng.random_range(1..=win);
            let len = rng.random_range(win..win * 20);
            let cfg = FeatureConfig {
                n_fft: win.next_power_of_two(),
                win,
                hop,
                ..FeatureConfig::default()
            };
            // count frames the slow way
            let mut oracle = 0usize;
            let mut start = 0usize;
            while start + win <= len {
                oracle += 1;
                start += hop;
            }
            assert_eq!(cfg.num_frames(len).unwrap(), oracle, "len {len} win {win} hop {hop}");
        }
    }

    #[test]
    fn delta_of_constant_is_zero() {
        let lmfb = Tensor::filled(vec![12, 4], 3.7);
        let out = assemble_channels(&lmfb, ChannelMode::Deltas).unwrap();
        for i in 0..12 * 4 {
            assert_eq!(out.data()[i * 3 + 1], 0.0);
            assert_eq!(out.data()[i * 3 + 2], 0.0);
        }
    }

    #[test]
    fn delta_of_ramp_is_constant_and_dd_zero() {
        let mut data = vec![0.0f32; 16 * 3];
        for t in 0..16 {
            for b in 0..3 {
                data[t * 3 + b] = t as f32 * 0.5;
            }
        }
        let lmfb = Tensor::from_vec(vec![16, 3], data).unwrap();
        let d = delta_time(&lmfb).unwrap();
        for &v in d.data() {
            assert!((v - 0.5).abs() < 1e-6, "delta {v}");
        }
        let dd = delta_time(&d).unwrap();
        for &v in dd.data() {
            assert!(v.abs() < 1e-6);
        }
    }

    #[test]
    fn delta_matches_direct_regression_formula() {
        use rand::Rng;
        let mut rng = crate::rng::substream(43, "delta");
        let (frames, mels) = (20, 5);
        let data: Vec<f32> = (0..frames * mels).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::from_vec(vec![frames, mels], data.clone()).unwrap();
        let d = delta_time(&x).unwrap();
        for t in 4..frames - 4 {
            for b in 0..mels {
                let mut acc = 0.0f64;
                for k in 1..=4usize {
                    acc += k as f64
                        * (data[(t + k) * mels + b] as f64 - data[(t - k) * mels + b] as f64);
                }
                let expect = acc / 60.0;
                assert!((d.data()[t * mels + b] as f64 - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn delta_needs_nine_frames() {
        let lmfb = Tensor::filled(vec![8, 4], 1.0);
        assert!(assemble_channels(&lmfb, ChannelMode::Deltas).is_err());
    }

    #[test]
    fn scaling_boundaries() {
        let stats = ScaleStats { min: -2.0, max: 6.0 };
        let lo = Tensor::filled(vec![4], -2.0);
        assert!(scale_unit(&lo, &stats).unwrap().data().iter().all(|&v| v == 0.0));
        let hi = Tensor::filled(vec![4], 6.0);
        assert!(scale_unit(&hi, &stats).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn scale_round_trip_recovers_in_range_values() {
        use rand::Rng;
        let mut rng = crate::rng::substream(47, "scale");
        let data: Vec<f32> = (0..64).map(|_| rng.random_range(-1.5..2.5)).collect();
        let x = Tensor::from_vec(vec![64], data.clone()).unwrap();
        let stats = ScaleStats { min: -2.0, max: 3.0 };
        let back = unscale_unit(&scale_unit(&x, &stats).unwrap(), &stats).unwrap();
        for (a, b) in data.iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn scaling_preserves_per_frame_argmax() {
        use rand::Rng;
        let mut rng = crate::rng::substream(53, "argmax");
        let (frames, mels) = (6, 10);
        let data: Vec<f32> = (0..frames * mels).map(|_| rng.random_range(-4.0..4.0)).collect();
        let x = Tensor::from_vec(vec![frames, mels], data.clone()).unwrap();
        let stats = ScaleStats { min: -5.0, max: 5.0 };
        let scaled = scale_unit(&x, &stats).unwrap();
        for t in 0..frames {
            let row = &data[t * mels..(t + 1) * mels];
            let srow = &scaled.data()[t * mels..(t + 1) * mels];
            let am = |r: &[f32]| {
                r.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0
            };
            assert_eq!(am(row), am(srow));
        }
    }

    #[test]
    fn degenerate_stats_rejected() {
        let x = Tensor::filled(vec![4], 1.0);
        assert!(ScaleStats::fit([&x].into_iter()).is_err());
        let stats = ScaleStats { min: 2.0, max: 2.0 };
        assert!(scale_unit(&x, &stats).is_err());
    }

    #[test]
    fn fingerprint_tracks_config_changes() {
        let a = FeatureConfig::default();
        let mut b = FeatureConfig::default();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.hop = 512;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn extraction_is_pure() {
        use rand::Rng;
        let mut rng = crate::rng::substream(59, "pure");
        let samples: Vec<f32> = (0..4096).map(|_| rng.random_range(-0.5..0.5)).collect();
        let clip = AudioClip {
            samples,
            sample_rate: 16_000,
            device_id: "dev_a".into(),
            scene_label: "park".into(),
        };
        let cfg = FeatureConfig {
            n_fft: 256,
            win: 256,
            hop: 128,
            mel_bins: 24,
            ..FeatureConfig::default()
        };
        let a = extract_features(&clip, &cfg).unwrap();
        let b = extract_features(&clip, &cfg).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn feature_file_round_trip_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip0.alt");
        let t = Tensor::from_vec(vec![3, 2], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        write_feature_file(&path, &t, "abc123").unwrap();
        let (back, fp) = read_feature_file(&path).unwrap();
        assert!(t.bit_eq(&back));
        assert_eq!(fp.as_deref(), Some("abc123"));
    }
}
