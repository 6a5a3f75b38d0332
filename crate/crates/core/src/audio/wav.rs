//! PCM16 mono RIFF/WAVE reader and writer. The writer emits the classic
//! 44-byte header; the reader is strict about format fields and names the
//! offending field in its errors.

use super::{AudioError, Waveform};
use crate::Scalar;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

fn io_err(path: &Path, source: std::io::Error) -> AudioError {
    AudioError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_wav<T: Scalar>(w: &Waveform<T>, path: &Path) -> Result<(), AudioError> {
    for (i, s) in w.samples.iter().enumerate() {
        let v = s.as_f64();
        if !(-1.0..=1.0).contains(&v) || !v.is_finite() {
            return Err(AudioError::SampleOutOfRange { index: i, value: v });
        }
    }
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = BufWriter::new(file);
    let data_len = (w.samples.len() * 2) as u32;
    let byte_rate = w.sample_rate * 2;

    let mut header = Vec::with_capacity(44);
    header.extend_from_slice(b"RIFF");
    header.extend_from_slice(&(36 + data_len).to_le_bytes());
    header.extend_from_slice(b"WAVE");
    header.extend_from_slice(b"fmt ");
    header.extend_from_slice(&16u32.to_le_bytes()); // fmt chunk size
    header.extend_from_slice(&1u16.to_le_bytes()); // PCM
    header.extend_from_slice(&1u16.to_le_bytes()); // mono
    header.extend_from_slice(&w.sample_rate.to_le_bytes());
    header.extend_from_slice(&byte_rate.to_le_bytes());
    header.extend_from_slice(&2u16.to_le_bytes()); // block align
    header.extend_from_slice(&16u16.to_le_bytes()); // bits per sample
    header.extend_from_slice(b"data");
    header.extend_from_slice(&data_len.to_le_bytes());
    out.write_all(&header).map_err(|e| io_err(path, e))?;

    let mut buf = Vec::with_capacity(w.samples.len() * 2);
    for s in &w.samples {
        let q = (s.as_f64() * 32767.0).round() as i16;
        buf.extend_from_slice(&q.to_le_bytes());
    }
    out.write_all(&buf).map_err(|e| io_err(path, e))?;
    out.flush().map_err(|e| io_err(path, e))
}

pub fn read_wav<T: Scalar>(path: &Path) -> Result<Waveform<T>, AudioError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| io_err(path, e))?;
    parse_wav(&bytes)
}

fn field_err(field: &'static str, detail: impl Into<String>) -> AudioError {
    AudioError::WavFormat {
        field,
        detail: detail.into(),
    }
}

fn parse_wav<T: Scalar>(bytes: &[u8]) -> Result<Waveform<T>, AudioError> {
    if bytes.len() < 44 {
        return Err(field_err("header", format!("file too short: {} bytes", bytes.len())));
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(field_err("riff_tag", "missing RIFF tag"));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(field_err("wave_tag", "missing WAVE tag"));
    }

    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body = pos + 8;
        if body + size > bytes.len() {
            return Err(field_err("chunk_size", format!("chunk `{}` overruns file", String::from_utf8_lossy(id))));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(field_err("fmt_size", format!("{size} < 16")));
                }
                let format = u16::from_le_bytes(bytes[body..body + 2].try_into().unwrap());
                let channels = u16::from_le_bytes(bytes[body + 2..body + 4].try_into().unwrap());
                let rate = u32::from_le_bytes(bytes[body + 4..body + 8].try_into().unwrap());
                let bits = u16::from_le_bytes(bytes[body + 14..body + 16].try_into().unwrap());
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => {
                let (format, channels, rate, bits) =
                    fmt.ok_or_else(|| field_err("fmt_chunk", "data chunk before fmt chunk"))?;
                if format != 1 {
                    return Err(field_err("audio_format", format!("expected PCM (1), got {format}")));
                }
                if channels != 1 {
                    return Err(field_err("channels", format!("expected mono (1), got {channels}")));
                }
                if rate != crate::SAMPLE_RATE {
                    return Err(field_err(
                        "sample_rate",
                        format!("expected {}, got {rate}", crate::SAMPLE_RATE),
                    ));
                }
                if bits != 16 {
                    return Err(field_err("bits_per_sample", format!("expected 16, got {bits}")));
                }
                if size % 2 != 0 {
                    return Err(field_err("data_size", format!("odd byte count {size}")));
                }
                let samples = bytes[body..body + size]
                    .chunks_exact(2)
                    .map(|c| {
                        let q = i16::from_le_bytes([c[0], c[1]]);
                        T::from_f64(q as f64 / 32767.0)
                    })
                    .collect();
                return Ok(Waveform::new(samples, rate));
            }
            _ => {} // skip unknown chunks (LIST, fact, ...)
        }
        // chunks are word-aligned
        pos = body + size + (size & 1);
    }
    Err(field_err("data_chunk", "no data chunk found"))
}
