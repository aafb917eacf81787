//! Minimal RIFF/WAVE reader and writer for 16-bit PCM mono files.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Read a mono PCM16 WAV file, returning samples in `[-1, 1)` and the rate.
pub fn read_wav_pcm16(path: &Path) -> Result<(Vec<f64>, u32)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::Parse(format!(
            "{}: not a RIFF/WAVE file",
            path.display()
        )));
    }
    let mut pos = 12usize;
    let mut sample_rate = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body = bytes
            .get(pos + 8..pos + 8 + size)
            .ok_or_else(|| Error::Parse(format!("{}: truncated chunk", path.display())))?;
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::Parse("fmt chunk too short".into()));
                }
                let format = u16::from_le_bytes(body[0..2].try_into().unwrap());
                let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                if format != 1 || bits != 16 {
                    return Err(Error::Parse(format!(
                        "{}: only PCM16 supported (format {format}, {bits} bits)",
                        path.display()
                    )));
                }
                if channels != 1 {
                    return Err(Error::Parse(format!(
                        "{}: only mono supported ({channels} channels)",
                        path.display()
                    )));
                }
                sample_rate = Some(rate);
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // chunks are word-aligned
        pos += 8 + size + (size & 1);
    }
    let rate = sample_rate.ok_or_else(|| Error::Parse("missing fmt chunk".into()))?;
    let data = data.ok_or_else(|| Error::Parse("missing data chunk".into()))?;
    let samples = data
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0)
        .collect();
    Ok((samples, rate))
}

/// Write a mono PCM16 WAV file.
pub fn write_wav_pcm16(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let data_len = samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32768.0)
            .round()
            .clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}
