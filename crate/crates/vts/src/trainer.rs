//! End-to-end training for the B / B-spk / SI / SE / SE-norm modes with
//! optional disentanglement, per-epoch metrics, and bit-exact
//! checkpoint/resume.
//!
//! Determinism: all randomness flows from a single ChaCha stream whose state
//! is captured in the checkpoint; batch gradients are computed one tape per
//! clip and reduced in clip order, so identical `(config, seed)` give
//! identical loss traces at any parallelism degree.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conditioner::{ConditionerParams, ConditioningMode, EmbedStats};
use crate::decoder::apply_frame_dropout;
use crate::disentangle::{DisentangleConfig, DisentangleMode};
use crate::evalkit::EvalError;
use crate::model::{
    batch_step, forward_recon_mse, CondInput, MelStats, Model, ModelError, Objective, TrainItem,
};
use crate::nn::{clip_global_norm, Adam};
use crate::synthdata::{load_corpus, Corpus, SynthError};
use crate::vocoder::AnalysisConfig;

pub const CHECKPOINT_MAGIC: u32 = 0x5654_5343; // "VTSC"
pub const CHECKPOINT_VERSION: u32 = 1;
const GRAD_CLIP_NORM: f64 = 1.0;
const PROBE_TRAIN_CAP: usize = 160;
/// The adversarial classifier trains with this multiple of the base
/// learning rate; a lagging classifier collapses to chance predictions and
/// stops producing a useful disentanglement gradient.
const CLF_LR_MULT: f64 = 10.0;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Corpus(#[from] SynthError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: aborting")]
    NonFinite { epoch: usize, batch: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Speaker-modeling mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Baseline trained on all speakers, no speaker input.
    B,
    /// Baseline trained on a single speaker's clips.
    #[serde(rename = "B-spk")]
    BSpk,
    /// Learned identity-table conditioning.
    SI,
    /// Projected external-embedding conditioning.
    SE,
    /// Standardized-then-projected embedding conditioning.
    #[serde(rename = "SE-norm")]
    SENorm,
}

impl Mode {
    pub fn conditioning(&self) -> Option<ConditioningMode> {
        match self {
            Mode::B | Mode::BSpk => None,
            Mode::SI => Some(ConditioningMode::SpeakerId),
            Mode::SE => Some(ConditioningMode::Embedding),
            Mode::SENorm => Some(ConditioningMode::EmbeddingNorm),
        }
    }

    pub fn uses_embeddings(&self) -> bool {
        matches!(self, Mode::SE | Mode::SENorm)
    }
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "B" => Ok(Mode::B),
            "B-spk" => Ok(Mode::BSpk),
            "SI" => Ok(Mode::SI),
            "SE" => Ok(Mode::SE),
            "SE-norm" => Ok(Mode::SENorm),
            other => Err(format!(
                "unknown mode {other:?} (expected B, B-spk, SI, SE, SE-norm)"
            )),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Mode::B => "B",
            Mode::BSpk => "B-spk",
            Mode::SI => "SI",
            Mode::SE => "SE",
            Mode::SENorm => "SE-norm",
        };
        write!(f, "{s}")
    }
}

fn default_lr() -> f64 {
    1e-3
}
fn default_dropout() -> f64 {
    0.2
}
fn default_batch() -> usize {
    8
}
fn default_epochs() -> usize {
    10
}
fn default_reduction() -> usize {
    2
}
fn default_mode() -> Mode {
    Mode::B
}
fn default_corpus() -> PathBuf {
    PathBuf::from("corpus")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainingConfig {
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default)]
    pub disentangle: DisentangleConfig,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_corpus")]
    pub corpus_path: PathBuf,
    /// The single speaker trained in B-spk mode.
    #[serde(default)]
    pub bspk_speaker: Option<usize>,
    /// Speaker excluded from training entirely (the unseen-speaker split).
    #[serde(default)]
    pub holdout_speaker: Option<usize>,
    #[serde(default = "default_reduction")]
    pub reduction: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        toml::from_str("").expect("default config")
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.disentangle
            .validate()
            .map_err(TrainError::BadConfig)?;
        if !(0.0..=1.0).contains(&self.dropout_rate) {
            return Err(TrainError::BadConfig(format!(
                "dropout_rate {} not in [0,1]",
                self.dropout_rate
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.reduction == 0 {
            return Err(TrainError::BadConfig(
                "batch_size, epochs and reduction must be >= 1".into(),
            ));
        }
        if matches!(self.mode, Mode::B | Mode::BSpk)
            && self.disentangle.mode != DisentangleMode::None
        {
            return Err(TrainError::BadConfig(format!(
                "mode {} has no speaker input to disentangle from",
                self.mode
            )));
        }
        if self.mode == Mode::BSpk && self.bspk_speaker.is_none() {
            return Err(TrainError::BadConfig(
                "mode B-spk requires bspk_speaker".into(),
            ));
        }
        if self.mode != Mode::BSpk && self.bspk_speaker.is_some() {
            return Err(TrainError::BadConfig(
                "bspk_speaker is only valid in mode B-spk".into(),
            ));
        }
        Ok(())
    }
}

/// Captured ChaCha state, reconstructable bit-exactly.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RngState {
    seed: [u8; 32],
    stream: u64,
    word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Train/validation clip indices (into `corpus.clips`).
#[derive(Clone, Debug)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

/// Deterministic split: 10% of each speaker's eligible clips (by clip-id
/// hash order, at least one) go to validation. B-spk keeps only the chosen
/// speaker; a holdout speaker is excluded entirely.
pub fn split_corpus(corpus: &Corpus, config: &TrainingConfig) -> SplitIndices {
    let mut by_speaker: Vec<Vec<usize>> = vec![Vec::new(); corpus.spec.n_speakers];
    for (i, clip) in corpus.clips.iter().enumerate() {
        if let Some(h) = config.holdout_speaker {
            if clip.speaker_id == h {
                continue;
            }
        }
        if let Some(b) = config.bspk_speaker {
            if clip.speaker_id != b {
                continue;
            }
        }
        by_speaker[clip.speaker_id].push(i);
    }
    let mut split = SplitIndices {
        train: Vec::new(),
        val: Vec::new(),
    };
    for clips in by_speaker.iter_mut() {
        if clips.is_empty() {
            continue;
        }
        clips.sort_by_key(|&i| (fnv1a64(corpus.clips[i].clip_id.as_bytes()), i));
        let n_val = (clips.len() as f64 * 0.1).ceil() as usize;
        split.val.extend(&clips[..n_val.min(clips.len())]);
        split.train.extend(&clips[n_val.min(clips.len())..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split
}

/// Everything needed to resume training bit-exactly or to run synthesis and
/// evaluation from a finished run.
#[derive(Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub magic: u32,
    pub version: u32,
    pub config: TrainingConfig,
    pub epoch: usize,
    pub rng: RngState,
    pub model: Model,
    pub mel_stats: MelStats,
    /// Mean of the training-set oracle embeddings (embedding modes only).
    pub mean_embedding: Option<Array1<f64>>,
    pub gen_opt: Adam,
    pub clf_opt: Option<Adam>,
    pub analysis: AnalysisConfig,
    pub n_speakers: usize,
    pub video_fps: u32,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), TrainError> {
    let f = std::fs::File::create(path)?;
    bincode::serialize_into(std::io::BufWriter::new(f), ckpt)
        .map_err(|e| TrainError::Checkpoint(format!("serialize: {e}")))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let f = std::fs::File::open(path)?;
    let ckpt: Checkpoint = bincode::deserialize_from(std::io::BufReader::new(f))
        .map_err(|e| TrainError::Checkpoint(format!("deserialize: {e}")))?;
    if ckpt.magic != CHECKPOINT_MAGIC {
        return Err(TrainError::Checkpoint("not a checkpoint file".into()));
    }
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(TrainError::Checkpoint(format!(
            "version mismatch: file has {}, this build reads {}",
            ckpt.version, CHECKPOINT_VERSION
        )));
    }
    Ok(ckpt)
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Serialize, Deserialize)]
pub struct MetricsLine {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    /// Objective value (equals `train_mse` without disentanglement).
    pub loss: f64,
    /// Discriminator cross-entropy (dispel mode only).
    pub d_loss: Option<f64>,
    /// Held-out linear-probe accuracy on frozen features (when
    /// disentangling).
    pub probe_acc: Option<f64>,
}

fn cond_input<'a>(mode: Mode, clip: &'a crate::synthdata::LoadedClip) -> CondInput<'a> {
    match mode {
        Mode::B | Mode::BSpk => CondInput::None,
        Mode::SI => CondInput::Id(clip.speaker_id),
        Mode::SE | Mode::SENorm => CondInput::Emb(&clip.embedding),
    }
}

/// Initializes a fresh training state from a validated config and corpus.
fn init_checkpoint(config: &TrainingConfig, corpus: &Corpus) -> Result<Checkpoint, TrainError> {
    let split = split_corpus(corpus, config);
    if split.train.is_empty() {
        return Err(TrainError::BadConfig(
            "no training clips after filtering".into(),
        ));
    }
    let mel_stats = MelStats::fit(split.train.iter().map(|&i| &corpus.clips[i].mel));

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let classifier = match config.disentangle.mode {
        DisentangleMode::None => None,
        _ => Some(config.disentangle.classifier),
    };
    let mut model = Model::init(
        config.mode.conditioning(),
        corpus.spec.n_speakers,
        classifier,
        corpus.spec.n_mels,
        config.reduction,
        &mut rng,
    );

    // mean (normalized) training frame for the dropout replacement
    let mut mean_frame = Array1::<f64>::zeros(corpus.spec.n_mels);
    let mut n_frames = 0usize;
    for &i in &split.train {
        let normalized = mel_stats.normalize(&corpus.clips[i].mel);
        mean_frame += &normalized.sum_axis(ndarray::Axis(0));
        n_frames += normalized.nrows();
    }
    mean_frame /= n_frames as f64;
    model.decoder.mean_frame = mean_frame;

    let mut mean_embedding = None;
    if config.mode.uses_embeddings() {
        let train_embs: Vec<_> = split
            .train
            .iter()
            .map(|&i| corpus.clips[i].embedding.view())
            .collect();
        if config.mode == Mode::SENorm {
            let stats = EmbedStats::fit(&train_embs)
                .map_err(|e| TrainError::BadConfig(e.to_string()))?;
            if let Some((_, ConditionerParams::Projector(p))) = &mut model.conditioning {
                p.stats = Some(stats);
            }
        }
        let embs: Vec<Array1<f64>> = train_embs.iter().map(|v| v.to_owned()).collect();
        mean_embedding = Some(
            crate::conditioner::mean_embedding(embs.iter())
                .map_err(|e| TrainError::BadConfig(e.to_string()))?,
        );
    }

    let gen_opt = Adam::new(config.learning_rate, &model.generator_params());
    let clf_opt = model
        .classifier
        .as_ref()
        .map(|c| Adam::new(config.learning_rate, &c.params()));

    Ok(Checkpoint {
        magic: CHECKPOINT_MAGIC,
        version: CHECKPOINT_VERSION,
        config: config.clone(),
        epoch: 0,
        rng: RngState::capture(&rng),
        model,
        mel_stats,
        mean_embedding,
        gen_opt,
        clf_opt,
        analysis: corpus.spec.analysis_config(),
        n_speakers: corpus.spec.n_speakers,
        video_fps: corpus.spec.video_fps,
    })
}

/// Trains from scratch. Per-epoch metrics are appended to
/// `<out_dir>/metrics.jsonl` when an output directory is given.
pub fn train(config: &TrainingConfig, out_dir: Option<&Path>) -> Result<Checkpoint, TrainError> {
    config.validate()?;
    let corpus = load_corpus(&config.corpus_path)?;
    let ckpt = init_checkpoint(config, &corpus)?;
    run_epochs(ckpt, &corpus, out_dir)
}

/// Continues a checkpoint up to its config's epoch count.
pub fn resume(ckpt: Checkpoint, out_dir: Option<&Path>) -> Result<Checkpoint, TrainError> {
    let corpus = load_corpus(&ckpt.config.corpus_path)?;
    run_epochs(ckpt, &corpus, out_dir)
}

fn run_epochs(
    mut ckpt: Checkpoint,
    corpus: &Corpus,
    out_dir: Option<&Path>,
) -> Result<Checkpoint, TrainError> {
    let config = ckpt.config.clone();
    let split = split_corpus(corpus, &config);
    let normalized: Vec<Array2<f64>> = corpus
        .clips
        .iter()
        .map(|c| ckpt.mel_stats.normalize(&c.mel))
        .collect();

    let mut metrics_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(
                std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(dir.join("metrics.jsonl"))?,
            )
        }
        None => None,
    };

    let mut rng = ckpt.rng.restore();
    for epoch in ckpt.epoch..config.epochs {
        let mut order = split.train.clone();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut epoch_recon = 0.0;
        let mut epoch_d = 0.0;
        let mut n_batches = 0usize;
        for (batch_no, chunk) in order.chunks(config.batch_size).enumerate() {
            // teacher inputs with frame dropout, drawn in clip order
            let teachers: Vec<Array2<f64>> = chunk
                .iter()
                .map(|&i| {
                    apply_frame_dropout(
                        &normalized[i],
                        config.dropout_rate,
                        &ckpt.model.decoder.mean_frame,
                        &mut rng,
                    )
                    .expect("validated dropout rate")
                })
                .collect();
            let items: Vec<TrainItem<'_>> = chunk
                .iter()
                .zip(&teachers)
                .map(|(&i, teacher)| TrainItem {
                    video: &corpus.clips[i].video,
                    target: &normalized[i],
                    teacher,
                    label: corpus.clips[i].speaker_id,
                    cond: cond_input(config.mode, &corpus.clips[i]),
                })
                .collect();

            let nan = |e: ModelError| match e {
                ModelError::NonFiniteLoss => TrainError::NonFinite {
                    epoch,
                    batch: batch_no,
                },
                other => TrainError::Model(other),
            };

            match config.disentangle.mode {
                DisentangleMode::None => {
                    let res =
                        batch_step(&ckpt.model, &items, Objective::Reconstruction).map_err(nan)?;
                    let mut grads = res.gen_grads.unwrap();
                    clip_global_norm(&mut grads, GRAD_CLIP_NORM);
                    ckpt.gen_opt.step(ckpt.model.generator_params_mut(), &grads);
                    epoch_loss += res.loss;
                    epoch_recon += res.recon_mse;
                }
                DisentangleMode::Dispel => {
                    let d = batch_step(&ckpt.model, &items, Objective::DispelDiscriminator)
                        .map_err(nan)?;
                    let mut dg = d.clf_grads.unwrap();
                    clip_global_norm(&mut dg, GRAD_CLIP_NORM);
                    ckpt.clf_opt
                        .as_mut()
                        .unwrap()
                        .step(ckpt.model.classifier_params_mut(), &dg);

                    let g = batch_step(
                        &ckpt.model,
                        &items,
                        Objective::DispelGenerator {
                            lambda: config.disentangle.lambda,
                        },
                    )
                    .map_err(nan)?;
                    let mut gg = g.gen_grads.unwrap();
                    clip_global_norm(&mut gg, GRAD_CLIP_NORM);
                    ckpt.gen_opt.step(ckpt.model.generator_params_mut(), &gg);

                    epoch_loss += g.loss;
                    epoch_recon += g.recon_mse;
                    epoch_d += d.loss;
                }
                DisentangleMode::RevGrad => {
                    let res = batch_step(
                        &ckpt.model,
                        &items,
                        Objective::RevGrad {
                            lambda: config.disentangle.lambda,
                        },
                    )
                    .map_err(nan)?;
                    let mut gg = res.gen_grads.unwrap();
                    clip_global_norm(&mut gg, GRAD_CLIP_NORM);
                    ckpt.gen_opt.step(ckpt.model.generator_params_mut(), &gg);
                    let mut cg = res.clf_grads.unwrap();
                    clip_global_norm(&mut cg, GRAD_CLIP_NORM);
                    ckpt.clf_opt
                        .as_mut()
                        .unwrap()
                        .step(ckpt.model.classifier_params_mut(), &cg);
                    epoch_loss += res.loss;
                    epoch_recon += res.recon_mse;
                }
            }
            n_batches += 1;
        }

        let val_mse = validation_mse(&ckpt.model, corpus, &normalized, &split.val, config.mode)?;
        let probe_acc = if config.disentangle.mode != DisentangleMode::None {
            probe_during_training(&ckpt.model, corpus, &split)?
        } else {
            None
        };

        let line = MetricsLine {
            epoch,
            train_mse: epoch_recon / n_batches as f64,
            val_mse,
            loss: epoch_loss / n_batches as f64,
            d_loss: (config.disentangle.mode == DisentangleMode::Dispel)
                .then_some(epoch_d / n_batches as f64),
            probe_acc,
        };
        if let Some(f) = &mut metrics_file {
            writeln!(f, "{}", serde_json::to_string(&line).unwrap())?;
        }

        ckpt.epoch = epoch + 1;
        ckpt.rng = RngState::capture(&rng);
    }
    Ok(ckpt)
}

/// Teacher-forced validation MSE (no dropout).
pub fn validation_mse(
    model: &Model,
    corpus: &Corpus,
    normalized: &[Array2<f64>],
    val: &[usize],
    mode: Mode,
) -> Result<f64, TrainError> {
    if val.is_empty() {
        return Ok(f64::NAN);
    }
    let mses = crate::par::map_slice(val, |&i| {
        forward_recon_mse(
            model,
            &corpus.clips[i].video,
            &normalized[i],
            &cond_input(mode, &corpus.clips[i]),
        )
    });
    let mut total = 0.0;
    for m in mses {
        total += m?;
    }
    Ok(total / val.len() as f64)
}

fn probe_during_training(
    model: &Model,
    corpus: &Corpus,
    split: &SplitIndices,
) -> Result<Option<f64>, TrainError> {
    if split.val.is_empty() || corpus.spec.n_speakers < 2 {
        return Ok(None);
    }
    // subsample the train split to bound per-epoch probe cost
    let stride = (split.train.len() / PROBE_TRAIN_CAP).max(1);
    let train_idx: Vec<usize> = split.train.iter().copied().step_by(stride).collect();
    let acc = crate::evalkit::probe_accuracy(model, corpus, &train_idx, &split.val)?;
    Ok(Some(acc))
}
