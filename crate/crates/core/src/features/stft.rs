//! Short-time Fourier transform power spectra.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::FeatureConfig;
use crate::error::Result;
use crate::tensor::Tensor;

/// Hann window (periodic form).
fn hann(win: usize) -> Vec<f64> {
    (0..win)
        .map(|n| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / win as f64).cos()))
        .collect()
}

/// Power spectrogram `[frames, n_fft/2 + 1]`: bin b holds |X(b)|^2 of the
/// Hann-windowed frame, frames spaced by `hop` with no padding.
pub fn stft_power(samples: &[f32], cfg: &FeatureConfig) -> Result<Tensor> {
    cfg.validate()?;
    let frames = cfg.num_frames(samples.len())?;
    let bins = cfg.n_fft / 2 + 1;
    let window = hann(cfg.win);

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(cfg.n_fft);

    let mut out = vec![0.0f32; frames * bins];
    let mut buf = vec![Complex::new(0.0f64, 0.0); cfg.n_fft];
    for frame in 0..frames {
        let start = frame * cfg.hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            let v = if i < cfg.win {
                samples[start + i] as f64 * window[i]
            } else {
                0.0
            };
            *slot = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        for (b, o) in out[frame * bins..(frame + 1) * bins].iter_mut().enumerate() {
            *o = buf[b].norm_sqr() as f32;
        }
    }
    Tensor::from_vec(vec![frames, bins], out)
}
