//! Triangular mel filterbank over STFT power bins.

use super::FeatureConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const LOG_FLOOR: f64 = 1e-10;

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Row-major `[mel_bins, n_fft/2+1]` triangular filters on the mel scale,
/// peaking at 1 on their center bin.
pub fn mel_filterbank(mel_bins: usize, n_fft: usize, sample_rate: u32, fmin: f32, fmax: f32) -> Vec<f32> {
    let bins = n_fft / 2 + 1;
    let mel_lo = hz_to_mel(fmin as f64);
    let mel_hi = hz_to_mel(fmax as f64);
    // mel_bins + 2 edge points, converted back to Hz
    let edges: Vec<f64> = (0..mel_bins + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (mel_bins + 1) as f64))
        .collect();
    let mut fb = vec![0.0f32; mel_bins * bins];
    for m in 0..mel_bins {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for b in 0..bins {
            let f = b as f64 * sample_rate as f64 / n_fft as f64;
            let w = if f >= lo && f <= center && center > lo {
                (f - lo) / (center - lo)
            } else if f > center && f <= hi && hi > center {
                (hi - f) / (hi - center)
            } else {
                0.0
            };
            fb[m * bins + b] = w as f32;
        }
    }
    fb
}

/// `ln(filterbank . power + 1e-10)` per frame.
pub fn log_mel(power: &Tensor, cfg: &FeatureConfig, sample_rate: u32) -> Result<Tensor> {
    let s = power.shape();
    if s.len() != 2 {
        return Err(Error::shape("log_mel", format!("want [frames, bins], got {s:?}")));
    }
    let bins = cfg.n_fft / 2 + 1;
    if s[1] != bins {
        return Err(Error::shape(
            "log_mel",
            format!("power has {} bins, config wants {bins}", s[1]),
        ));
    }
    let fmax = cfg.fmax.unwrap_or(sample_rate as f32 / 2.0);
    let fb = mel_filterbank(cfg.mel_bins, cfg.n_fft, sample_rate, cfg.fmin, fmax);
    let frames = s[0];
    let mut out = vec![0.0f32; frames * cfg.mel_bins];
    for frame in 0..frames {
        let row = &power.data()[frame * bins..(frame + 1) * bins];
        for m in 0..cfg.mel_bins {
            let filter = &fb[m * bins..(m + 1) * bins];
            let mut acc = 0.0f64;
            for (&w, &p) in filter.iter().zip(row) {
                if w != 0.0 {
                    acc += w as f64 * p as f64;
                }
            }
            out[frame * cfg.mel_bins + m] = ((acc + LOG_FLOOR).ln()) as f32;
        }
    }
    Tensor::from_vec(vec![frames, cfg.mel_bins], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> FeatureConfig {
        FeatureConfig {
            n_fft: 256,
            win: 256,
            hop: 128,
            mel_bins: 24,
            ..FeatureConfig::default()
        }
    }

    #[test]
    fn zero_spectrum_hits_the_log_floor() {
        let cfg = small_cfg();
        let power = Tensor::zeros(vec![3, 129]);
        let out = log_mel(&power, &cfg, 8000).unwrap();
        let floor = (1e-10f64).ln() as f32;
        assert!(out.data().iter().all(|&v| (v - floor).abs() < 1e-5));
    }

    #[test]
    fn filter_rows_are_nonempty_triangles() {
        let cfg = small_cfg();
        let bins = cfg.n_fft / 2 + 1;
        let fb = mel_filterbank(cfg.mel_bins, cfg.n_fft, 8000, 0.0, 4000.0);
        for m in 0..cfg.mel_bins {
            let row = &fb[m * bins..(m + 1) * bins];
            let sum: f32 = row.iter().sum();
            assert!(sum > 0.0, "filter {m} is empty");
            // peak weight occurs at most once and interior filters reach near 1
            let peak = row.iter().cloned().fold(0.0f32, f32::max);
            assert!(peak <= 1.0 + 1e-6);
        }
    }

    #[test]
    fn doubling_power_adds_ln2() {
        use rand::Rng;
        let cfg = small_cfg();
        let mut rng = crate::rng::substream(67, "logmel");
        let data: Vec<f32> = (0..2 * 129).map(|_| rng.random_range(0.5..4.0)).collect();
        let power = Tensor::from_vec(vec![2, 129], data.clone()).unwrap();
        let doubled = Tensor::from_vec(vec![2, 129], data.iter().map(|&v| 2.0 * v).collect()).unwrap();
        let a = log_mel(&power, &cfg, 8000).unwrap();
        let b = log_mel(&doubled, &cfg, 8000).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((y - x - std::f32::consts::LN_2).abs() < 1e-4, "{y} - {x}");
        }
    }
}
