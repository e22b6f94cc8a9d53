//! `vts` — corpus generation, training, synthesis, and evaluation for the
//! multi-speaker video-to-speech model.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndarray::{Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use vts::conditioner::ConditioningMode;
use vts::disentangle::{ClassifierKind, DisentangleMode};
use vts::evalkit;
use vts::io::{read_f32_raw, write_wav_mono16, VideoSidecar};
use vts::model::{synthesize_normalized_mel, CondInput};
use vts::synthdata::{
    generate_corpus, load_corpus, oracle_speaker_embedding, CorpusSpec, MelSpectrogram,
};
use vts::trainer::{
    load_checkpoint, resume, save_checkpoint, split_corpus, train, Checkpoint, Mode,
    TrainError, TrainingConfig,
};
use vts::vocoder::{griffin_lim, mel_to_linear};

#[derive(Parser)]
#[command(name = "vts", version, about = "Multi-speaker video-to-speech synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic audiovisual corpus.
    GenData(GenDataArgs),
    /// Train a model on a corpus.
    Train(TrainArgs),
    /// Synthesize a waveform from a video and a target speaker.
    Synth(SynthArgs),
    /// Evaluate a checkpoint (MCD, EER, speaker probe).
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// TOML file with corpus parameters (all fields optional).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output corpus directory.
    #[arg(long)]
    out: PathBuf,
    /// Corpus seed; overrides the config file. Drawn and printed if absent
    /// from both.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_speakers: Option<usize>,
    #[arg(long)]
    clips_per_speaker: Option<usize>,
    #[arg(long)]
    leakage: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML file with training parameters (all fields optional).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus directory; overrides the config file.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Training mode: B, B-spk, SI, SE, SE-norm.
    #[arg(long)]
    mode: Option<Mode>,
    /// Disentanglement: none, dispel, revgrad.
    #[arg(long)]
    disentangle: Option<String>,
    /// Speaker classifier: linear, mlp.
    #[arg(long)]
    classifier: Option<String>,
    /// Disentanglement loss weight.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    dropout_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Speaker index for B-spk mode.
    #[arg(long)]
    bspk_speaker: Option<usize>,
    /// Speaker excluded from training (unseen-speaker evaluation).
    #[arg(long)]
    holdout_speaker: Option<usize>,
    /// Resume from a checkpoint instead of initializing fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Output directory for checkpoint.bin and metrics.jsonl.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Video file (.f32 raw with JSON sidecar).
    #[arg(long)]
    video: PathBuf,
    /// Target speaker as a training identity index (SI checkpoints).
    #[arg(long)]
    speaker_id: Option<usize>,
    /// Target speaker as a WAV to embed (embedding checkpoints).
    #[arg(long)]
    speaker_wav: Option<PathBuf>,
    /// Use the mean of all training embeddings as the target voice.
    #[arg(long)]
    mean_embedding: bool,
    /// Output WAV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Comma-separated metrics: eer, mcd, probe.
    #[arg(long, default_value = "eer,mcd,probe")]
    metrics: String,
    /// Pair videos of the held-out (unseen) speaker with seen identities.
    #[arg(long)]
    unseen_speaker: bool,
    #[arg(long, default_value_t = 2000)]
    n_pairs: usize,
    #[arg(long, default_value_t = 0.073)]
    pos_fraction: f64,
    /// Seed for pair sampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output JSON report path.
    #[arg(long)]
    out: PathBuf,
}

/// A failure carrying its process exit code (1 runtime, 2 usage).
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Self {
            code: 2,
            msg: msg.into(),
        }
    }
    fn runtime(msg: impl std::fmt::Display) -> Self {
        Self {
            code: 1,
            msg: msg.to_string(),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::BadConfig(_) => Failure::usage(e.to_string()),
            other => Failure::runtime(other),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse(); // clap exits with code 2 on usage errors
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Failure::usage(format!("bad config: {e}")))
}

fn cmd_gen_data(args: GenDataArgs) -> Result<(), Failure> {
    let mut spec: CorpusSpec = match &args.config {
        Some(p) => read_toml(p)?,
        None => CorpusSpec::default(),
    };
    if let Some(n) = args.n_speakers {
        spec.n_speakers = n;
    }
    if let Some(n) = args.clips_per_speaker {
        spec.n_clips_per_speaker = n;
    }
    if let Some(l) = args.leakage {
        spec.leakage = l;
    }
    match args.seed {
        Some(s) => spec.seed = s,
        None if args.config.is_none() => {
            spec.seed = rand::random::<u64>();
        }
        None => {}
    }
    println!("resolved corpus spec (seed {}):", spec.seed);
    println!("{}", toml::to_string(&spec).unwrap());

    generate_corpus(&spec, &args.out).map_err(Failure::runtime)?;
    println!(
        "wrote {} clips to {}",
        spec.total_clips(),
        args.out.display()
    );
    Ok(())
}

fn parse_disentangle(s: &str) -> Result<DisentangleMode, Failure> {
    match s {
        "none" => Ok(DisentangleMode::None),
        "dispel" => Ok(DisentangleMode::Dispel),
        "revgrad" => Ok(DisentangleMode::RevGrad),
        other => Err(Failure::usage(format!(
            "unknown disentangle mode {other:?} (expected none, dispel, revgrad)"
        ))),
    }
}

fn parse_classifier(s: &str) -> Result<ClassifierKind, Failure> {
    match s {
        "linear" => Ok(ClassifierKind::Linear),
        "mlp" => Ok(ClassifierKind::Mlp),
        other => Err(Failure::usage(format!(
            "unknown classifier {other:?} (expected linear, mlp)"
        ))),
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), Failure> {
    let ckpt_path = args.out.join("checkpoint.bin");

    let ckpt = if let Some(resume_path) = &args.resume {
        let loaded = load_checkpoint(resume_path)?;
        let mut config = loaded.config.clone();
        if let Some(e) = args.epochs {
            config.epochs = e;
        }
        println!("resuming at epoch {} (seed {}):", loaded.epoch, config.seed);
        println!("{}", toml::to_string(&config).unwrap());
        let mut loaded = loaded;
        loaded.config = config;
        resume(loaded, Some(&args.out))?
    } else {
        let mut config: TrainingConfig = match &args.config {
            Some(p) => read_toml(p)?,
            None => TrainingConfig::default(),
        };
        if let Some(c) = args.corpus {
            config.corpus_path = c;
        }
        if let Some(m) = args.mode {
            config.mode = m;
        }
        if let Some(d) = &args.disentangle {
            config.disentangle.mode = parse_disentangle(d)?;
        }
        if let Some(c) = &args.classifier {
            config.disentangle.classifier = parse_classifier(c)?;
        }
        if let Some(l) = args.lambda {
            config.disentangle.lambda = l;
        }
        if let Some(e) = args.epochs {
            config.epochs = e;
        }
        if let Some(b) = args.batch_size {
            config.batch_size = b;
        }
        if let Some(lr) = args.learning_rate {
            config.learning_rate = lr;
        }
        if let Some(d) = args.dropout_rate {
            config.dropout_rate = d;
        }
        if let Some(s) = args.seed {
            config.seed = s;
        }
        if let Some(b) = args.bspk_speaker {
            config.bspk_speaker = Some(b);
        }
        if let Some(h) = args.holdout_speaker {
            config.holdout_speaker = Some(h);
        }
        config.validate()?;
        println!("resolved training config (seed {}):", config.seed);
        println!("{}", toml::to_string(&config).unwrap());
        train(&config, Some(&args.out))?
    };

    save_checkpoint(&ckpt, &ckpt_path)?;
    println!(
        "trained {} epochs; checkpoint at {}",
        ckpt.epoch,
        ckpt_path.display()
    );
    Ok(())
}

/// Resolves the speaker conditioning input for synthesis from the CLI flags.
fn resolve_speaker(
    ckpt: &Checkpoint,
    args: &SynthArgs,
) -> Result<Option<Array1<f64>>, Failure> {
    let n_flags = args.speaker_id.is_some() as u32
        + args.speaker_wav.is_some() as u32
        + args.mean_embedding as u32;
    let cond_mode = ckpt.config.mode.conditioning();
    match cond_mode {
        None => {
            if n_flags > 0 {
                return Err(Failure::usage(format!(
                    "checkpoint mode {} takes no speaker flags",
                    ckpt.config.mode
                )));
            }
            Ok(None)
        }
        Some(mode) => {
            if n_flags != 1 {
                return Err(Failure::usage(
                    "exactly one of --speaker-id, --speaker-wav, --mean-embedding is required",
                ));
            }
            match mode {
                ConditioningMode::SpeakerId => {
                    if args.speaker_id.is_none() {
                        return Err(Failure::usage(
                            "SI checkpoints select speakers with --speaker-id (embedding flags are for embedding modes only)",
                        ));
                    }
                    Ok(None) // identity passes through CondInput::Id
                }
                ConditioningMode::Embedding | ConditioningMode::EmbeddingNorm => {
                    if args.speaker_id.is_some() {
                        return Err(Failure::usage(
                            "embedding checkpoints select speakers with --speaker-wav or --mean-embedding",
                        ));
                    }
                    if args.mean_embedding {
                        let m = ckpt.mean_embedding.clone().ok_or_else(|| {
                            Failure::runtime("checkpoint carries no mean embedding")
                        })?;
                        Ok(Some(m))
                    } else {
                        let wav_path = args.speaker_wav.as_ref().unwrap();
                        let (_, wav) = vts::io::read_wav_mono16(wav_path)
                            .map_err(Failure::runtime)?;
                        let emb = oracle_speaker_embedding(&wav, &ckpt.analysis)
                            .map_err(Failure::runtime)?;
                        Ok(Some(emb))
                    }
                }
            }
        }
    }
}

fn load_video(path: &Path) -> Result<Array3<f64>, Failure> {
    let (data, sc): (Vec<f64>, VideoSidecar) = read_f32_raw(path).map_err(Failure::runtime)?;
    Array3::from_shape_vec((sc.shape[0], sc.shape[1], sc.shape[2]), data)
        .map_err(|e| Failure::runtime(format!("bad video shape: {e}")))
}

fn mel_to_wav(ckpt: &Checkpoint, normalized_mel: &Array2<f64>) -> Result<Vec<f64>, Failure> {
    let log_mel = ckpt.mel_stats.denormalize(normalized_mel);
    let mel = MelSpectrogram {
        frames: log_mel,
        hop_len: ckpt.analysis.hop_len,
        sample_rate: ckpt.analysis.sample_rate,
    };
    let linear = mel_to_linear(&mel, &ckpt.analysis);
    griffin_lim(&linear, &ckpt.analysis).map_err(Failure::runtime)
}

fn cmd_synth(args: SynthArgs) -> Result<(), Failure> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    println!(
        "checkpoint: mode {}, epoch {}, seed {}",
        ckpt.config.mode, ckpt.epoch, ckpt.config.seed
    );
    println!("{}", toml::to_string(&ckpt.config).unwrap());
    let emb = resolve_speaker(&ckpt, &args)?;
    let video = load_video(&args.video)?;

    let cond = match (ckpt.config.mode.conditioning(), &emb, args.speaker_id) {
        (None, _, _) => CondInput::None,
        (Some(ConditioningMode::SpeakerId), _, Some(id)) => CondInput::Id(id),
        (Some(_), Some(e), _) => CondInput::Emb(e),
        _ => return Err(Failure::usage("no speaker selected")),
    };
    let mel = synthesize_normalized_mel(&ckpt.model, &video, &cond).map_err(Failure::runtime)?;
    let wav = mel_to_wav(&ckpt, &mel)?;
    write_wav_mono16(&args.out, ckpt.analysis.sample_rate, &wav).map_err(Failure::runtime)?;
    println!(
        "wrote {} ({:.3} s at {} Hz)",
        args.out.display(),
        wav.len() as f64 / ckpt.analysis.sample_rate as f64,
        ckpt.analysis.sample_rate
    );
    Ok(())
}

fn config_hash(ckpt: &Checkpoint, args: &EvalArgs) -> String {
    let payload = serde_json::json!({
        "train_config": serde_json::to_value(&ckpt.config).unwrap(),
        "epoch": ckpt.epoch,
        "metrics": args.metrics,
        "unseen_speaker": args.unseen_speaker,
        "n_pairs": args.n_pairs,
        "pos_fraction": args.pos_fraction,
        "seed": args.seed,
    });
    let mut h = Sha256::new();
    h.update(payload.to_string().as_bytes());
    hex_prefix(&h.finalize())
}

fn hex_prefix(bytes: &[u8]) -> String {
    bytes[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn cmd_eval(args: EvalArgs) -> Result<(), Failure> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    println!(
        "checkpoint: mode {}, epoch {}, seed {}",
        ckpt.config.mode, ckpt.epoch, ckpt.config.seed
    );
    println!("{}", toml::to_string(&ckpt.config).unwrap());

    let mut want_eer = false;
    let mut want_mcd = false;
    let mut want_probe = false;
    for m in args.metrics.split(',').filter(|s| !s.is_empty()) {
        match m.trim() {
            "eer" => want_eer = true,
            "mcd" => want_mcd = true,
            "probe" => want_probe = true,
            other => return Err(Failure::usage(format!("unknown metric {other:?}"))),
        }
    }
    if args.unseen_speaker && want_mcd {
        return Err(Failure::usage(
            "mcd needs a reference signal; unseen-speaker pairing has none",
        ));
    }

    let corpus = load_corpus(&args.corpus).map_err(Failure::runtime)?;
    if corpus.clips.is_empty() {
        return Err(Failure::runtime("corpus has no clips"));
    }
    let split = split_corpus(&corpus, &ckpt.config);

    // (clip index, target speaker, conditioning) for every synthesized clip
    let jobs: Vec<(usize, usize)> = if args.unseen_speaker {
        let holdout = ckpt.config.holdout_speaker.ok_or_else(|| {
            Failure::usage("--unseen-speaker requires a checkpoint trained with holdout_speaker")
        })?;
        let seen: Vec<usize> =
            (0..corpus.spec.n_speakers).filter(|&s| s != holdout).collect();
        corpus
            .clips
            .iter()
            .enumerate()
            .filter(|(_, c)| c.speaker_id == holdout)
            .enumerate()
            .map(|(k, (i, _))| (i, seen[k % seen.len()]))
            .collect()
    } else {
        split
            .val
            .iter()
            .map(|&i| (i, corpus.clips[i].speaker_id))
            .collect()
    };
    if jobs.is_empty() {
        return Err(Failure::runtime("no clips to evaluate"));
    }

    // mean training embedding per speaker for identity targets in
    // embedding modes
    let speaker_mean_emb: Vec<Option<Array1<f64>>> = (0..corpus.spec.n_speakers)
        .map(|s| {
            let embs: Vec<&Array1<f64>> = split
                .train
                .iter()
                .map(|&i| &corpus.clips[i])
                .filter(|c| c.speaker_id == s)
                .map(|c| &c.embedding)
                .collect();
            vts::conditioner::mean_embedding(embs.into_iter().cloned().collect::<Vec<_>>().iter())
                .ok()
        })
        .collect();

    let outputs = vts::par::map_slice(&jobs, |&(clip_idx, target_speaker)| {
        let clip = &corpus.clips[clip_idx];
        let cond_owned: Option<Array1<f64>> = match ckpt.config.mode.conditioning() {
            None => None,
            Some(ConditioningMode::SpeakerId) => None,
            Some(_) => {
                if target_speaker == clip.speaker_id {
                    Some(clip.embedding.clone())
                } else {
                    speaker_mean_emb[target_speaker].clone()
                }
            }
        };
        let cond = match ckpt.config.mode.conditioning() {
            None => CondInput::None,
            Some(ConditioningMode::SpeakerId) => CondInput::Id(target_speaker),
            Some(_) => CondInput::Emb(cond_owned.as_ref().expect("embedding for target speaker")),
        };
        let mel = synthesize_normalized_mel(&ckpt.model, &clip.video, &cond)
            .map_err(|e| e.to_string())?;
        Ok::<(usize, usize, Array2<f64>), String>((clip_idx, target_speaker, mel))
    });

    let mut mcds = Vec::new();
    let mut synth_embs: Vec<(usize, Array1<f64>)> = Vec::new();
    for out in outputs {
        let (clip_idx, target_speaker, mel) = out.map_err(Failure::runtime)?;
        let clip = &corpus.clips[clip_idx];
        if want_mcd {
            let synth_mel = MelSpectrogram {
                frames: ckpt.mel_stats.denormalize(&mel),
                hop_len: ckpt.analysis.hop_len,
                sample_rate: ckpt.analysis.sample_rate,
            };
            let ref_mel = MelSpectrogram {
                frames: clip.mel.clone(),
                hop_len: ckpt.analysis.hop_len,
                sample_rate: ckpt.analysis.sample_rate,
            };
            mcds.push(
                evalkit::mcd(&ref_mel, &synth_mel)
                    .map_err(Failure::runtime)?
                    .db,
            );
        }
        if want_eer {
            let wav = mel_to_wav(&ckpt, &mel)?;
            let emb = oracle_speaker_embedding(&wav, &ckpt.analysis).map_err(Failure::runtime)?;
            synth_embs.push((target_speaker, emb));
        }
    }

    let mut report = serde_json::Map::new();
    if want_mcd {
        let n = mcds.len() as f64;
        let mean = mcds.iter().sum::<f64>() / n;
        let std = (mcds.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        report.insert("mcd_mean".into(), mean.into());
        report.insert("mcd_std".into(), std.into());
    }
    if want_eer {
        let natural: Vec<(usize, Array1<f64>)> = if args.unseen_speaker {
            split
                .train
                .iter()
                .chain(&split.val)
                .map(|&i| (corpus.clips[i].speaker_id, corpus.clips[i].embedding.clone()))
                .collect()
        } else {
            split
                .val
                .iter()
                .map(|&i| (corpus.clips[i].speaker_id, corpus.clips[i].embedding.clone()))
                .collect()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        let pairs = evalkit::build_pairs(
            &synth_embs,
            &natural,
            args.n_pairs,
            args.pos_fraction,
            &mut rng,
        )
        .map_err(Failure::runtime)?;
        let eer = evalkit::eer(&pairs.pairs).map_err(Failure::runtime)?;
        report.insert("eer".into(), eer.into());
        report.insert("n_pairs".into(), args.n_pairs.into());
    }
    if want_probe {
        let acc = evalkit::probe_accuracy(&ckpt.model, &corpus, &split.train, &split.val)
            .map_err(Failure::runtime)?;
        report.insert("probe_accuracy".into(), acc.into());
    }
    report.insert("n_clips".into(), jobs.len().into());
    report.insert("config_hash".into(), config_hash(&ckpt, &args).into());

    let json = serde_json::Value::Object(report);
    std::fs::write(&args.out, serde_json::to_string_pretty(&json).unwrap())
        .map_err(Failure::runtime)?;
    println!("{json}");
    println!("report written to {}", args.out.display());
    Ok(())
}
