//! RIFF/WAVE reader and writer, PCM 16-bit little-endian mono only.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::Waveform;

const PCM_SCALE: f64 = 32_768.0;

/// Reads a 16-bit PCM mono WAV file; samples are scaled by 1/32768.
pub fn load_wav(path: &Path) -> Result<Waveform> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io_err = |e| Error::io(path, e);

    let mut hdr = [0u8; 12];
    r.read_exact(&mut hdr).map_err(io_err)?;
    if &hdr[0..4] != b"RIFF" || &hdr[8..12] != b"WAVE" {
        return Err(Error::Format(format!("{}: not a RIFF/WAVE file", path.display())));
    }

    let mut sample_rate = 0u32;
    let mut fmt_seen = false;
    loop {
        let mut chunk_hdr = [0u8; 8];
        match r.read_exact(&mut chunk_hdr) {
            Ok(()) => {}
            Err(_) => {
                return Err(Error::Format(format!(
                    "{}: missing data chunk",
                    path.display()
                )))
            }
        }
        let id = [chunk_hdr[0], chunk_hdr[1], chunk_hdr[2], chunk_hdr[3]];
        let size = u32::from_le_bytes([chunk_hdr[4], chunk_hdr[5], chunk_hdr[6], chunk_hdr[7]]) as usize;
        match &id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::Format(format!("{}: fmt chunk too small", path.display())));
                }
                let mut fmt = vec![0u8; size];
                r.read_exact(&mut fmt).map_err(io_err)?;
                let audio_format = u16::from_le_bytes([fmt[0], fmt[1]]);
                let channels = u16::from_le_bytes([fmt[2], fmt[3]]);
                sample_rate = u32::from_le_bytes([fmt[4], fmt[5], fmt[6], fmt[7]]);
                let bits = u16::from_le_bytes([fmt[14], fmt[15]]);
                if audio_format != 1 {
                    return Err(Error::UnsupportedFormat(format!(
                        "{}: only PCM supported, got format tag {}",
                        path.display(),
                        audio_format
                    )));
                }
                if channels != 1 {
                    return Err(Error::UnsupportedFormat(format!(
                        "{}: only mono supported, got {} channels",
                        path.display(),
                        channels
                    )));
                }
                if bits != 16 {
                    return Err(Error::UnsupportedFormat(format!(
                        "{}: only 16-bit PCM supported, got {} bits",
                        path.display(),
                        bits
                    )));
                }
                if sample_rate == 0 {
                    return Err(Error::Format(format!("{}: zero sample rate", path.display())));
                }
                fmt_seen = true;
            }
            b"data" => {
                if !fmt_seen {
                    return Err(Error::Format(format!(
                        "{}: data chunk before fmt chunk",
                        path.display()
                    )));
                }
                if size % 2 != 0 {
                    return Err(Error::Format(format!(
                        "{}: odd data chunk size {}",
                        path.display(),
                        size
                    )));
                }
                let mut raw = vec![0u8; size];
                r.read_exact(&mut raw).map_err(io_err)?;
                let samples = raw
                    .chunks_exact(2)
                    .map(|b| f64::from(i16::from_le_bytes([b[0], b[1]])) / PCM_SCALE)
                    .collect();
                return Ok(Waveform { samples, sample_rate });
            }
            _ => {
                // Skip unknown chunks (word-aligned).
                let skip = size + (size & 1);
                let mut sink = vec![0u8; skip];
                r.read_exact(&mut sink).map_err(io_err)?;
            }
        }
    }
}

/// Duration in seconds from the header alone; the sample payload is never
/// read.
pub fn wav_duration(path: &Path) -> Result<f64> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io_err = |e| Error::io(path, e);

    let mut hdr = [0u8; 12];
    r.read_exact(&mut hdr).map_err(io_err)?;
    if &hdr[0..4] != b"RIFF" || &hdr[8..12] != b"WAVE" {
        return Err(Error::Format(format!("{}: not a RIFF/WAVE file", path.display())));
    }
    let mut sample_rate = 0u32;
    let mut block_align = 0u16;
    loop {
        let mut chunk_hdr = [0u8; 8];
        if r.read_exact(&mut chunk_hdr).is_err() {
            return Err(Error::Format(format!("{}: missing data chunk", path.display())));
        }
        let id = [chunk_hdr[0], chunk_hdr[1], chunk_hdr[2], chunk_hdr[3]];
        let size = u32::from_le_bytes([chunk_hdr[4], chunk_hdr[5], chunk_hdr[6], chunk_hdr[7]]) as usize;
        match &id {
            b"fmt " => {
                let mut fmt = vec![0u8; size];
                r.read_exact(&mut fmt).map_err(io_err)?;
                sample_rate = u32::from_le_bytes([fmt[4], fmt[5], fmt[6], fmt[7]]);
                block_align = u16::from_le_bytes([fmt[12], fmt[13]]);
            }
            b"data" => {
                if sample_rate == 0 || block_align == 0 {
                    return Err(Error::Format(format!("{}: data before fmt", path.display())));
                }
                return Ok(size as f64 / f64::from(block_align) / f64::from(sample_rate));
            }
            _ => {
                let skip = size + (size & 1);
                let mut sink = vec![0u8; skip];
                r.read_exact(&mut sink).map_err(io_err)?;
            }
        }
    }
}

/// Writes 16-bit PCM mono; values are clipped to the representable range
/// before quantization.
pub fn write_wav(w: &Waveform, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);

    let data_len = (w.samples.len() * 2) as u32;
    out.write_all(b"RIFF").map_err(io_err)?;
    out.write_all(&(36 + data_len).to_le_bytes()).map_err(io_err)?;
    out.write_all(b"WAVE").map_err(io_err)?;

    out.write_all(b"fmt ").map_err(io_err)?;
    out.write_all(&16u32.to_le_bytes()).map_err(io_err)?;
    out.write_all(&1u16.to_le_bytes()).map_err(io_err)?; // PCM
    out.write_all(&u16::to_le_bytes(Waveform::CHANNELS)).map_err(io_err)?;
    out.write_all(&w.sample_rate.to_le_bytes()).map_err(io_err)?;
    let byte_rate = w.sample_rate * 2;
    out.write_all(&byte_rate.to_le_bytes()).map_err(io_err)?;
    out.write_all(&2u16.to_le_bytes()).map_err(io_err)?; // block align
    out.write_all(&16u16.to_le_bytes()).map_err(io_err)?;

    out.write_all(b"data").map_err(io_err)?;
    out.write_all(&data_len.to_le_bytes()).map_err(io_err)?;
    for s in &w.samples {
        let q = (s * PCM_SCALE).round().clamp(-32_768.0, 32_767.0) as i16;
        out.write_all(&q.to_le_bytes()).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}
