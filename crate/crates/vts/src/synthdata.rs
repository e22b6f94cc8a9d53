//! Synthetic audiovisual corpus with a controllable amount of speaker
//! identity leaked into the video channel.
//!
//! Each content token renders as a fixed spatial pattern held for a few video
//! frames and as a tone complex whose fundamental depends on the token. The
//! speaker imprints the video through a per-speaker bias pattern scaled by
//! the `leakage` knob, and the audio through a formant-like harmonic
//! envelope. Everything is a pure function of `(spec, seed, tokens,
//! speaker_id)`, so generation parallelizes per clip and reproduces
//! byte-identically at any thread count.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{self, IoError, MelSidecar, VideoSidecar};
use crate::vocoder::{self, AnalysisConfig, VocoderError};

/// Video geometry is fixed at desk scale.
pub const FRAME_H: usize = 32;
pub const FRAME_W: usize = 32;
/// Audio frames per video frame.
pub const R_AV: usize = 4;
/// Dimension of the oracle speaker embedding.
pub const EMBED_DIM: usize = 512;

const N_HARMONICS: usize = 6;
const TOKEN_PATTERN_SALT: u64 = 0x746f_6b70_6174;
const SPEAKER_BIAS_SALT: u64 = 0x7370_6b62_6961;
const SPEAKER_ENV_SALT: u64 = 0x7370_6b65_6e76;
const TOKEN_STREAM_BASE: u64 = 1 << 40;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid corpus spec: {0}")]
    BadSpec(String),
    #[error("token {token} out of vocabulary (n_tokens = {n_tokens})")]
    TokenOutOfRange { token: usize, n_tokens: usize },
    #[error("cannot produce {needed} distinct token sequences from {capacity} possible")]
    CannotDistinct { needed: usize, capacity: u128 },
    #[error("degenerate waveform (empty or all-zero)")]
    DegenerateWaveform,
    #[error("manifest validation failed: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Vocoder(#[from] VocoderError),
}

/// Parameters of a synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub n_speakers: usize,
    pub n_clips_per_speaker: usize,
    /// Vocabulary size.
    pub n_tokens: usize,
    pub clip_len_tokens: usize,
    pub video_fps: u32,
    pub frames_per_token: usize,
    /// Strength of the per-speaker bias pattern added to video frames, in [0, 1].
    pub leakage: f64,
    pub sample_rate: u32,
    pub n_mels: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_speakers: 4,
            n_clips_per_speaker: 50,
            n_tokens: 10,
            clip_len_tokens: 4,
            video_fps: 20,
            frames_per_token: 5,
            leakage: 0.5,
            sample_rate: 16_000,
            n_mels: 40,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_speakers < 2 {
            return Err(SynthError::BadSpec("n_speakers must be >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.leakage) {
            return Err(SynthError::BadSpec(format!(
                "leakage {} not in [0, 1]",
                self.leakage
            )));
        }
        for (name, v) in [
            ("n_clips_per_speaker", self.n_clips_per_speaker),
            ("n_tokens", self.n_tokens),
            ("clip_len_tokens", self.clip_len_tokens),
            ("frames_per_token", self.frames_per_token),
            ("n_mels", self.n_mels),
        ] {
            if v < 1 {
                return Err(SynthError::BadSpec(format!("{name} must be >= 1")));
            }
        }
        if self.video_fps == 0 || self.sample_rate == 0 {
            return Err(SynthError::BadSpec("rates must be positive".into()));
        }
        if self.sample_rate % self.video_fps != 0 {
            return Err(SynthError::BadSpec(
                "sample_rate must be a multiple of video_fps".into(),
            ));
        }
        if (self.sample_rate / self.video_fps) as usize % R_AV != 0 {
            return Err(SynthError::BadSpec(format!(
                "samples per video frame must be divisible by {R_AV} for exact mel alignment"
            )));
        }
        Ok(())
    }

    /// Video frames per clip.
    pub fn frames_per_clip(&self) -> usize {
        self.clip_len_tokens * self.frames_per_token
    }

    pub fn samples_per_frame(&self) -> usize {
        (self.sample_rate / self.video_fps) as usize
    }

    pub fn samples_per_clip(&self) -> usize {
        self.frames_per_clip() * self.samples_per_frame()
    }

    /// Mel frames per clip (exactly `R_AV` per video frame).
    pub fn mel_frames_per_clip(&self) -> usize {
        self.frames_per_clip() * R_AV
    }

    /// STFT/mel settings with the hop chosen so that the audio-frames-per-
    /// video-frame ratio is exactly [`R_AV`].
    pub fn analysis_config(&self) -> AnalysisConfig {
        let hop = self.samples_per_frame() / R_AV;
        let win = 2 * hop;
        AnalysisConfig {
            sample_rate: self.sample_rate,
            fft_size: win.next_power_of_two(),
            hop_len: hop,
            win_len: win,
            n_mels: self.n_mels,
            fmin: 0.0,
            fmax: self.sample_rate as f64 / 2.0,
            n_gl_iters: 60,
        }
    }

    pub fn total_clips(&self) -> usize {
        self.n_speakers * self.n_clips_per_speaker
    }
}

/// A video clip with its ground-truth labels. Pixel values are in [0, 1].
#[derive(Clone, Debug)]
pub struct VideoClip {
    /// `(t, h, w)` frames.
    pub frames: Array3<f64>,
    pub fps: u32,
    pub speaker_id: usize,
    pub tokens: Vec<usize>,
}

/// Log-mel spectrogram, `(frames, n_mels)`.
#[derive(Clone, Debug)]
pub struct MelSpectrogram {
    pub frames: Array2<f64>,
    pub hop_len: usize,
    pub sample_rate: u32,
}

/// Speaker selection: a discrete training identity or a 512-dim embedding.
#[derive(Clone, Debug)]
pub enum SpeakerDescriptor {
    Identity(usize),
    Embedding(Array1<f64>),
}

impl SpeakerDescriptor {
    pub fn embedding(v: Array1<f64>) -> Result<Self, SynthError> {
        if v.len() != EMBED_DIM {
            return Err(SynthError::BadSpec(format!(
                "embedding dimension {} != {EMBED_DIM}",
                v.len()
            )));
        }
        Ok(Self::Embedding(v))
    }
}

fn salted_rng(salt: u64, id: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(salt.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (id as u64))
}

/// Deterministic spatial pattern for a content token, values in [0.3, 0.7].
/// Drawn at quarter resolution and block-upsampled so patterns have spatial
/// structure at the convolution kernel scale.
pub fn token_pattern(token: usize) -> Array2<f64> {
    let mut rng = salted_rng(TOKEN_PATTERN_SALT, token);
    let coarse = Array2::from_shape_fn((FRAME_H / 4, FRAME_W / 4), |_| {
        0.3 + 0.4 * rng.random::<f64>()
    });
    Array2::from_shape_fn((FRAME_H, FRAME_W), |(y, x)| coarse[[y / 4, x / 4]])
}

/// Deterministic per-speaker bias pattern, values in [-0.2, 0.2].
pub fn speaker_bias(speaker_id: usize) -> Array2<f64> {
    let mut rng = salted_rng(SPEAKER_BIAS_SALT, speaker_id);
    Array2::from_shape_fn((FRAME_H, FRAME_W), |_| 0.4 * rng.random::<f64>() - 0.2)
}

/// Formant-like harmonic gains defining a speaker's voice, plus a small
/// positive floor so every harmonic carries some energy.
pub fn speaker_envelope(speaker_id: usize) -> [f64; N_HARMONICS] {
    let mut rng = salted_rng(SPEAKER_ENV_SALT, speaker_id);
    let p1 = 1.2 + 1.8 * rng.random::<f64>();
    let p2 = 3.5 + 2.3 * rng.random::<f64>();
    let mut g = [0.0; N_HARMONICS];
    for (i, gi) in g.iter_mut().enumerate() {
        let h = (i + 1) as f64;
        *gi = (-(h - p1).powi(2) / (2.0 * 0.7f64.powi(2))).exp()
            + 0.6 * (-(h - p2).powi(2) / (2.0 * 0.9f64.powi(2))).exp()
            + 0.05;
    }
    g
}

/// Fundamental frequency of a content token.
pub fn token_frequency(token: usize) -> f64 {
    130.0 * 1.16f64.powi(token as i32)
}

fn check_tokens(tokens: &[usize], spec: &CorpusSpec) -> Result<(), SynthError> {
    for &t in tokens {
        if t >= spec.n_tokens {
            return Err(SynthError::TokenOutOfRange {
                token: t,
                n_tokens: spec.n_tokens,
            });
        }
    }
    Ok(())
}

/// Renders a video clip: each token's pattern is held for
/// `frames_per_token` frames with a slight brightness modulation, the
/// speaker bias scaled by `leakage` is added, plus a small clip-specific
/// noise drawn from `rng`. Values stay in [0, 1] by construction.
pub fn render_video(
    tokens: &[usize],
    speaker_id: usize,
    spec: &CorpusSpec,
    rng: &mut ChaCha8Rng,
) -> Result<VideoClip, SynthError> {
    check_tokens(tokens, spec)?;
    let t_frames = tokens.len() * spec.frames_per_token;
    let bias = speaker_bias(speaker_id);
    let mut frames = Array3::<f64>::zeros((t_frames, FRAME_H, FRAME_W));
    for (ti, &tok) in tokens.iter().enumerate() {
        let pattern = token_pattern(tok);
        for j in 0..spec.frames_per_token {
            let modulation = 0.9
                + 0.1
                    * (2.0 * std::f64::consts::PI * j as f64 / spec.frames_per_token as f64)
                        .cos();
            let f = ti * spec.frames_per_token + j;
            for y in 0..FRAME_H {
                for x in 0..FRAME_W {
                    let noise = 0.04 * rng.random::<f64>() - 0.02;
                    let v = pattern[[y, x]] * modulation + spec.leakage * bias[[y, x]] + noise;
                    frames[[f, y, x]] = v.clamp(0.0, 1.0);
                }
            }
        }
    }
    Ok(VideoClip {
        frames,
        fps: spec.video_fps,
        speaker_id,
        tokens: tokens.to_vec(),
    })
}

/// Renders a waveform and its log-mel spectrogram: each token maps to a tone
/// complex whose fundamental depends on the token and whose harmonic
/// envelope depends on the speaker.
pub fn render_audio(
    tokens: &[usize],
    speaker_id: usize,
    spec: &CorpusSpec,
) -> Result<(Vec<f64>, MelSpectrogram), SynthError> {
    check_tokens(tokens, spec)?;
    let spt = spec.frames_per_token * spec.samples_per_frame();
    let sr = spec.sample_rate as f64;
    let env = speaker_envelope(speaker_id);
    let amp = 0.45 / env.iter().sum::<f64>();
    let ramp = (spec.sample_rate / 200) as usize; // 5 ms fades
    let mut wav = Vec::with_capacity(tokens.len() * spt);
    for &tok in tokens {
        let f0 = token_frequency(tok);
        for n in 0..spt {
            let t = n as f64 / sr;
            let mut s = 0.0;
            for (h, &g) in env.iter().enumerate() {
                s += g * (2.0 * std::f64::consts::PI * f0 * (h + 1) as f64 * t).sin();
            }
            let fade_in = if n < ramp {
                0.5 - 0.5 * (std::f64::consts::PI * n as f64 / ramp as f64).cos()
            } else {
                1.0
            };
            let fade_out = if n >= spt - ramp {
                let k = spt - 1 - n;
                0.5 - 0.5 * (std::f64::consts::PI * k as f64 / ramp as f64).cos()
            } else {
                1.0
            };
            wav.push(s * amp * fade_in * fade_out);
        }
    }
    let cfg = spec.analysis_config();
    let mel = vocoder::wav_to_mel(&wav, &cfg)?;
    debug_assert_eq!(
        mel.frames.nrows(),
        R_AV * tokens.len() * spec.frames_per_token
    );
    Ok((wav, mel))
}

/// Deterministic 512-dim speaker embedding from long-term mel statistics:
/// per-band mean (centered across bands) and standard deviation of the
/// log-mel frames, tiled to [`EMBED_DIM`] and L2-normalized.
pub fn oracle_speaker_embedding(
    wav: &[f64],
    cfg: &AnalysisConfig,
) -> Result<Array1<f64>, SynthError> {
    if wav.is_empty() || wav.iter().all(|&v| v == 0.0) {
        return Err(SynthError::DegenerateWaveform);
    }
    let mel = vocoder::wav_to_mel(wav, cfg)?;
    let n_mels = mel.frames.ncols();
    let f = mel.frames.nrows() as f64;
    let mean = mel.frames.sum_axis(ndarray::Axis(0)) / f;
    let mut var = Array1::<f64>::zeros(n_mels);
    for row in mel.frames.rows() {
        for (b, &v) in row.iter().enumerate() {
            var[b] += (v - mean[b]).powi(2);
        }
    }
    let std = var.mapv(|v| (v / f).sqrt());
    let grand = mean.sum() / n_mels as f64;
    let stats: Vec<f64> = mean
        .iter()
        .map(|&m| m - grand)
        .chain(std.iter().copied())
        .collect();
    let mut emb = Array1::<f64>::zeros(EMBED_DIM);
    for i in 0..EMBED_DIM {
        emb[i] = stats[i % stats.len()];
    }
    let norm = emb.dot(&emb).sqrt();
    if norm < 1e-12 {
        return Err(SynthError::DegenerateWaveform);
    }
    Ok(emb / norm)
}

// ---- corpus on disk ----

/// One manifest record. Paths are relative to the corpus root.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub speaker_id: usize,
    pub tokens: Vec<usize>,
    pub video_path: String,
    pub mel_path: String,
    pub wav_path: String,
}

/// Draws `n_clips_per_speaker` distinct token sequences per speaker by
/// rejection sampling with a retry cap.
pub fn assign_token_sequences(spec: &CorpusSpec) -> Result<Vec<Vec<usize>>, SynthError> {
    let capacity = (spec.n_tokens as u128)
        .checked_pow(spec.clip_len_tokens as u32)
        .unwrap_or(u128::MAX);
    if capacity < spec.n_clips_per_speaker as u128 {
        return Err(SynthError::CannotDistinct {
            needed: spec.n_clips_per_speaker,
            capacity,
        });
    }
    let mut all = Vec::with_capacity(spec.total_clips());
    for s in 0..spec.n_speakers {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(TOKEN_STREAM_BASE + s as u64);
        let mut seen = HashSet::new();
        let cap = 1000 + 200 * spec.n_clips_per_speaker;
        let mut tries = 0;
        while seen.len() < spec.n_clips_per_speaker {
            tries += 1;
            if tries > cap {
                return Err(SynthError::CannotDistinct {
                    needed: spec.n_clips_per_speaker,
                    capacity,
                });
            }
            let seq: Vec<usize> = (0..spec.clip_len_tokens)
                .map(|_| rng.random_range(0..spec.n_tokens))
                .collect();
            if seen.insert(seq.clone()) {
                all.push(seq);
            }
        }
    }
    Ok(all)
}

/// Fully rendered clip, in memory.
pub struct RenderedClip {
    pub clip_id: String,
    pub speaker_id: usize,
    pub tokens: Vec<usize>,
    pub video: VideoClip,
    pub wav: Vec<f64>,
    pub mel: MelSpectrogram,
}

/// Renders clip `index` of the corpus (clips are ordered speaker-major).
/// Pure function of `(spec, index)`; the per-clip rng stream is derived from
/// the corpus seed and the clip index.
pub fn render_clip(
    spec: &CorpusSpec,
    sequences: &[Vec<usize>],
    index: usize,
) -> Result<RenderedClip, SynthError> {
    let speaker_id = index / spec.n_clips_per_speaker;
    let tokens = &sequences[index];
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1 + index as u64);
    let video = render_video(tokens, speaker_id, spec, &mut rng)?;
    let (wav, mel) = render_audio(tokens, speaker_id, spec)?;
    Ok(RenderedClip {
        clip_id: format!("clip_{index:05}"),
        speaker_id,
        tokens: tokens.clone(),
        video,
        wav,
        mel,
    })
}

/// Generates the corpus under `out_dir`: `manifest.json`, `corpus_spec.json`,
/// and per-clip video/mel raws plus WAV under `clips/`. Deterministic given
/// `spec.seed`, at any parallelism degree.
pub fn generate_corpus(spec: &CorpusSpec, out_dir: &Path) -> Result<Vec<ManifestEntry>, SynthError> {
    spec.validate()?;
    let sequences = assign_token_sequences(spec)?;
    let clips_dir = out_dir.join("clips");
    std::fs::create_dir_all(&clips_dir).map_err(IoError::from)?;

    let results = crate::par::map_range(spec.total_clips(), |i| -> Result<ManifestEntry, SynthError> {
        let clip = render_clip(spec, &sequences, i)?;
        let video_rel = format!("clips/{}_video.f32", clip.clip_id);
        let mel_rel = format!("clips/{}_mel.f32", clip.clip_id);
        let wav_rel = format!("clips/{}.wav", clip.clip_id);
        let (t, h, w) = clip.video.frames.dim();
        io::write_f32_raw(
            &out_dir.join(&video_rel),
            clip.video.frames.as_slice().unwrap(),
            &VideoSidecar {
                shape: vec![t, h, w],
                dtype: "f32le".into(),
                fps: spec.video_fps,
            },
        )?;
        let (f, m) = clip.mel.frames.dim();
        io::write_f32_raw(
            &out_dir.join(&mel_rel),
            clip.mel.frames.as_slice().unwrap(),
            &MelSidecar {
                shape: vec![f, m],
                dtype: "f32le".into(),
                hop_len: clip.mel.hop_len,
                sample_rate: clip.mel.sample_rate,
            },
        )?;
        io::write_wav_mono16(&out_dir.join(&wav_rel), spec.sample_rate, &clip.wav)?;
        Ok(ManifestEntry {
            clip_id: clip.clip_id,
            speaker_id: clip.speaker_id,
            tokens: clip.tokens,
            video_path: video_rel,
            mel_path: mel_rel,
            wav_path: wav_rel,
        })
    });
    let manifest: Vec<ManifestEntry> = results.into_iter().collect::<Result<_, _>>()?;

    let mf = std::fs::File::create(out_dir.join("manifest.json")).map_err(IoError::from)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(mf), &manifest).map_err(IoError::from)?;
    let sf = std::fs::File::create(out_dir.join("corpus_spec.json")).map_err(IoError::from)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(sf), spec).map_err(IoError::from)?;
    Ok(manifest)
}

/// A clip loaded back from disk, with its oracle embedding precomputed.
pub struct LoadedClip {
    pub clip_id: String,
    pub speaker_id: usize,
    pub tokens: Vec<usize>,
    pub video: Array3<f64>,
    pub mel: Array2<f64>,
    pub embedding: Array1<f64>,
    pub wav_path: PathBuf,
}

/// A corpus loaded into memory.
pub struct Corpus {
    pub spec: CorpusSpec,
    pub clips: Vec<LoadedClip>,
}

impl Corpus {
    pub fn n_speakers(&self) -> usize {
        self.spec.n_speakers
    }
}

/// Loads and validates a corpus directory: manifest closure (every referenced
/// file exists, every clip file is referenced), shape and alignment checks,
/// and oracle embeddings for every clip.
pub fn load_corpus(dir: &Path) -> Result<Corpus, SynthError> {
    let manifest: Vec<ManifestEntry> = serde_json::from_reader(std::io::BufReader::new(
        std::fs::File::open(dir.join("manifest.json")).map_err(IoError::from)?,
    ))
    .map_err(IoError::from)?;
    let spec: CorpusSpec = serde_json::from_reader(std::io::BufReader::new(
        std::fs::File::open(dir.join("corpus_spec.json")).map_err(IoError::from)?,
    ))
    .map_err(IoError::from)?;
    spec.validate()?;
    if manifest.len() != spec.total_clips() {
        return Err(SynthError::Manifest(format!(
            "manifest lists {} clips, spec implies {}",
            manifest.len(),
            spec.total_clips()
        )));
    }

    // closure: referenced set == files present under clips/
    let mut referenced = HashSet::new();
    for e in &manifest {
        for p in [&e.video_path, &e.mel_path, &e.wav_path] {
            if !dir.join(p).is_file() {
                return Err(SynthError::Manifest(format!("missing file {p}")));
            }
            referenced.insert(dir.join(p));
            if p.ends_with(".f32") {
                referenced.insert(io::sidecar_path(&dir.join(p)));
            }
        }
    }
    for entry in std::fs::read_dir(dir.join("clips")).map_err(IoError::from)? {
        let path = entry.map_err(IoError::from)?.path();
        if !referenced.contains(&path) {
            return Err(SynthError::Manifest(format!(
                "unreferenced clip file {}",
                path.display()
            )));
        }
    }

    let cfg = spec.analysis_config();
    let loaded = crate::par::map_slice(&manifest, |e| -> Result<LoadedClip, SynthError> {
        let (vdata, vsc): (Vec<f64>, VideoSidecar) = io::read_f32_raw(&dir.join(&e.video_path))?;
        let video = Array3::from_shape_vec((vsc.shape[0], vsc.shape[1], vsc.shape[2]), vdata)
            .map_err(|_| SynthError::Manifest(format!("bad video shape for {}", e.clip_id)))?;
        if video.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(SynthError::Manifest(format!(
                "{}: pixel out of [0,1]",
                e.clip_id
            )));
        }
        let (mdata, msc): (Vec<f64>, MelSidecar) = io::read_f32_raw(&dir.join(&e.mel_path))?;
        let mel = Array2::from_shape_vec((msc.shape[0], msc.shape[1]), mdata)
            .map_err(|_| SynthError::Manifest(format!("bad mel shape for {}", e.clip_id)))?;
        if mel.iter().any(|v| !v.is_finite()) {
            return Err(SynthError::Manifest(format!(
                "{}: non-finite mel entry",
                e.clip_id
            )));
        }
        if mel.nrows() != R_AV * video.dim().0 {
            return Err(SynthError::Manifest(format!(
                "{}: mel frames {} != {} x video frames {}",
                e.clip_id,
                mel.nrows(),
                R_AV,
                video.dim().0
            )));
        }
        let wav_path = dir.join(&e.wav_path);
        let (_, wav) = io::read_wav_mono16(&wav_path)?;
        let embedding = oracle_speaker_embedding(&wav, &cfg)?;
        Ok(LoadedClip {
            clip_id: e.clip_id.clone(),
            speaker_id: e.speaker_id,
            tokens: e.tokens.clone(),
            video,
            mel,
            embedding,
            wav_path,
        })
    });
    let clips: Vec<LoadedClip> = loaded.into_iter().collect::<Result<_, _>>()?;
    Ok(Corpus { spec, clips })
}
