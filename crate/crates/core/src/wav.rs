//! Minimal reader/writer for 2-channel 32-bit IEEE-float WAVE files.

use std::fs;
use std::path::Path;

use crate::dsp::Rir;
use crate::error::{io_err, NacfError, Result};

const FORMAT_IEEE_FLOAT: u16 = 3;

/// Encodes a response as a stereo float WAVE file image. Samples are
/// rounded to `f32`.
pub fn encode(rir: &Rir) -> Vec<u8> {
    let frames = rir.len() as u32;
    let data_len = frames * 8;
    let mut out = Vec::with_capacity(58 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(4 + 26 + 12 + 8 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&18u32.to_le_bytes());
    out.extend_from_slice(&FORMAT_IEEE_FLOAT.to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&rir.sample_rate().to_le_bytes());
    out.extend_from_slice(&(rir.sample_rate() * 8).to_le_bytes());
    out.extend_from_slice(&8u16.to_le_bytes());
    out.extend_from_slice(&32u16.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(b"fact");
    out.extend_from_slice(&4u32.to_le_bytes());
    out.extend_from_slice(&frames.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for (l, r) in rir.channel(0).iter().zip(rir.channel(1)) {
        out.extend_from_slice(&(*l as f32).to_le_bytes());
        out.extend_from_slice(&(*r as f32).to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Rir, String> {
    let u16_at = |i: usize| bytes.get(i..i + 2).map(|b| u16::from_le_bytes([b[0], b[1]]));
    let u32_at = |i: usize| bytes.get(i..i + 4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]));
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err("not a RIFF/WAVE file".into());
    }
    let mut pos = 12;
    let mut format = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let len = u32_at(pos + 4).ok_or("truncated chunk header")? as usize;
        let body = pos + 8;
        let end = body.checked_add(len).filter(|&e| e <= bytes.len()).ok_or("truncated chunk")?;
        match id {
            b"fmt " => {
                let tag = u16_at(body).ok_or("short fmt chunk")?;
                let channels = u16_at(body + 2).ok_or("short fmt chunk")?;
                let rate = u32_at(body + 4).ok_or("short fmt chunk")?;
                let bits = u16_at(body + 14).ok_or("short fmt chunk")?;
                if tag != FORMAT_IEEE_FLOAT || channels != 2 || bits != 32 {
                    return Err(format!("unsupported format: tag {tag}, {channels} channels, {bits} bits"));
                }
                format = Some(rate);
            }
            b"data" => {
                let rate = format.ok_or("data chunk before fmt chunk")?;
                if len % 8 != 0 {
                    return Err("data length is not a whole number of frames".into());
                }
                let (mut left, mut right) = (Vec::with_capacity(len / 8), Vec::with_capacity(len / 8));
                for frame in bytes[body..end].chunks_exact(8) {
                    left.push(f32::from_le_bytes([frame[0], frame[1], frame[2], frame[3]]) as f64);
                    right.push(f32::from_le_bytes([frame[4], frame[5], frame[6], frame[7]]) as f64);
                }
                return Rir::new(left, right, rate).map_err(|e| e.to_string());
            }
            _ => {}
        }
        pos = end + (len & 1);
    }
    Err("no data chunk".into())
}

pub fn write(path: &Path, rir: &Rir) -> Result<()> {
    fs::write(path, encode(rir)).map_err(io_err(path))
}

pub fn read(path: &Path) -> Result<Rir> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode(&bytes).map_err(|reason| NacfError::Format { path: path.to_path_buf(), reason })
}

/// Rounds every sample to the nearest `f32`, i.e. what a write/read round
/// trip produces.
pub fn quantize(rir: &Rir) -> Rir {
    let q = |c: &[f64]| c.iter().map(|v| *v as f32 as f64).collect();
    Rir::new(q(rir.channel(0)), q(rir.channel(1)), rir.sample_rate()).expect("same shape as input")
}
