//! Minimal mono WAV IO: 16-bit PCM and 32-bit IEEE float.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;

/// Read a mono WAV file into [-1, 1] samples plus its sample rate.
pub fn read_wav(path: &Path) -> Result<(Vec<f32>, u32)> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 12 || &bytes[..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::Input(format!("{}: not a RIFF/WAVE file", path.display())));
    }
    let mut pos = 12usize;
    let mut format = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_end = (pos + 8 + size).min(bytes.len());
        let body = &bytes[pos + 8..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(Error::Input("truncated fmt chunk".to_string()));
                }
                let tag = u16::from_le_bytes([body[0], body[1]]);
                let channels = u16::from_le_bytes([body[2], body[3]]);
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes([body[14], body[15]]);
                if channels != 1 {
                    return Err(Error::Input(format!(
                        "{}: only mono supported, got {channels} channels",
                        path.display()
                    )));
                }
                format = Some((tag, rate, bits));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        pos += 8 + size + (size & 1); // chunks are word-aligned
    }
    let (tag, rate, bits) = format.ok_or_else(|| Error::Input("missing fmt chunk".to_string()))?;
    let body = data.ok_or_else(|| Error::Input("missing data chunk".to_string()))?;
    let samples = match (tag, bits) {
        (FORMAT_PCM, 16) => body
            .chunks_exact(2)
            .map(|b| i16::from_le_bytes([b[0], b[1]]) as f32 / 32768.0)
            .collect(),
        (FORMAT_FLOAT, 32) => body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect(),
        _ => {
            return Err(Error::Input(format!(
                "{}: unsupported format tag {tag} / {bits}-bit",
                path.display()
            )))
        }
    };
    Ok((samples, rate))
}

/// Write mono 16-bit PCM.
pub fn write_wav(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let data_len = samples.len() * 2;
    let mut f = std::fs::File::create(path)?;
    f.write_all(b"RIFF")?;
    f.write_all(&(36 + data_len as u32).to_le_bytes())?;
    f.write_all(b"WAVE")?;
    f.write_all(b"fmt ")?;
    f.write_all(&16u32.to_le_bytes())?;
    f.write_all(&FORMAT_PCM.to_le_bytes())?;
    f.write_all(&1u16.to_le_bytes())?; // mono
    f.write_all(&sample_rate.to_le_bytes())?;
    f.write_all(&(sample_rate * 2).to_le_bytes())?; // byte rate
    f.write_all(&2u16.to_le_bytes())?; // block align
    f.write_all(&16u16.to_le_bytes())?; // bits per sample
    f.write_all(b"data")?;
    f.write_all(&(data_len as u32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(data_len);
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&buf)?;
    Ok(())
}

/// Write mono 32-bit IEEE float (lossless for feature work).
pub fn write_wav_f32(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let data_len = samples.len() * 4;
    let mut f = std::fs::File::create(path)?;
    f.write_all(b"RIFF")?;
    f.write_all(&(36 + data_len as u32).to_le_bytes())?;
    f.write_all(b"WAVE")?;
    f.write_all(b"fmt ")?;
    f.write_all(&16u32.to_le_bytes())?;
    f.write_all(&FORMAT_FLOAT.to_le_bytes())?;
    f.write_all(&1u16.to_le_bytes())?;
    f.write_all(&sample_rate.to_le_bytes())?;
    f.write_all(&(sample_rate * 4).to_le_bytes())?;
    f.write_all(&4u16.to_le_bytes())?;
    f.write_all(&32u16.to_le_bytes())?;
    f.write_all(b"data")?;
    f.write_all(&(data_len as u32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(data_len);
    for &s in samples {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    f.write_all(&buf)?;
    Ok(())
}

#[allow(dead_code)]
fn read_exact_helper(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pcm16_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let samples: Vec<f32> = (0..256).map(|n| (n as f32 / 256.0).sin() * 0.8).collect();
        write_wav(&path, &samples, 16_000).unwrap();
        let (back, rate) = read_wav(&path).unwrap();
        assert_eq!(rate, 16_000);
        assert_eq!(back.len(), samples.len());
        for (a, b) in samples.iter().zip(&back) {
            assert!((a - b).abs() < 1.0 / 32000.0);
        }
    }

    #[test]
    fn float32_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t32.wav");
        let samples: Vec<f32> = vec![0.123456, -0.98765, 0.0, 1.0, -1.0];
        write_wav_f32(&path, &samples, 22_050).unwrap();
        let (back, rate) = read_wav(&path).unwrap();
        assert_eq!(rate, 22_050);
        assert_eq!(back, samples);
    }

    #[test]
    fn garbage_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.wav");
        std::fs::write(&path, b"not a wav at all").unwrap();
        assert!(read_wav(&path).is_err());
    }
}
