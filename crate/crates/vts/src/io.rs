//! On-disk formats: little-endian f32 raw tensors with JSON sidecars, and
//! 16-bit PCM mono WAV.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
    #[error("{path}: raw payload has {actual} floats, sidecar shape implies {expected}")]
    ShapeMismatch {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("{path}: unsupported dtype {dtype:?} (expected \"f32le\")")]
    BadDtype { path: PathBuf, dtype: String },
}

/// Sidecar for a video tensor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VideoSidecar {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub fps: u32,
}

/// Sidecar for a mel tensor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MelSidecar {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub hop_len: usize,
    pub sample_rate: u32,
}

pub fn sidecar_path(raw: &Path) -> PathBuf {
    raw.with_extension("json")
}

/// Writes an f64 slice as little-endian f32 raw plus its JSON sidecar.
pub fn write_f32_raw<S: Serialize>(path: &Path, data: &[f64], sidecar: &S) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    for &v in data {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    let sc = File::create(sidecar_path(path))?;
    serde_json::to_writer_pretty(BufWriter::new(sc), sidecar)?;
    Ok(())
}

/// Reads a raw f32 file and its typed sidecar, validating dtype and length.
pub fn read_f32_raw<S: DeserializeOwned + SidecarShape>(
    path: &Path,
) -> Result<(Vec<f64>, S), IoError> {
    let sc: S = serde_json::from_reader(BufReader::new(File::open(sidecar_path(path))?))?;
    if sc.dtype() != "f32le" {
        return Err(IoError::BadDtype {
            path: path.to_owned(),
            dtype: sc.dtype().to_owned(),
        });
    }
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let n = bytes.len() / 4;
    let expected: usize = sc.shape().iter().product();
    if n != expected || bytes.len() % 4 != 0 {
        return Err(IoError::ShapeMismatch {
            path: path.to_owned(),
            expected,
            actual: n,
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((data, sc))
}

pub trait SidecarShape {
    fn shape(&self) -> &[usize];
    fn dtype(&self) -> &str;
}

impl SidecarShape for VideoSidecar {
    fn shape(&self) -> &[usize] {
        &self.shape
    }
    fn dtype(&self) -> &str {
        &self.dtype
    }
}

impl SidecarShape for MelSidecar {
    fn shape(&self) -> &[usize] {
        &self.shape
    }
    fn dtype(&self) -> &str {
        &self.dtype
    }
}

/// Writes mono 16-bit PCM. Samples are clamped to [-1, 1].
pub fn write_wav_mono16(path: &Path, sample_rate: u32, samples: &[f64]) -> Result<(), IoError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16;
        writer.write_sample(v)?;
    }
    writer.finalize()?;
    Ok(())
}

/// Reads mono 16-bit PCM into f64 samples in [-1, 1].
pub fn read_wav_mono16(path: &Path) -> Result<(u32, Vec<f64>), IoError> {
    let mut reader = hound::WavReader::open(path)?;
    let sr = reader.spec().sample_rate;
    let samples: Result<Vec<f64>, _> = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / i16::MAX as f64))
        .collect();
    Ok((sr, samples?))
}
