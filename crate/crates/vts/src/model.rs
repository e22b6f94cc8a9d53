//! Full video-to-speech model: frontend, optional speaker conditioning,
//! decoder, and optional speaker classifier, with the per-batch gradient
//! machinery for every training objective. Batch members are independent, so
//! gradients are computed one tape per clip (in parallel) and averaged in a
//! fixed order; results are bit-identical at any parallelism degree.

use ndarray::{Array1, Array2, Array3, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conditioner::{
    concat_condition_graph, condition_vector_graph, ConditionError, ConditionerParams,
    ConditioningMode, EmbeddingProjector, SpeakerTable,
};
use crate::decoder::{
    decode_free_running_graph, decode_teacher_forced_graph, DecoderError, DecoderParams,
    DecoderVars,
};
use crate::disentangle::{
    classify_speaker_graph, cross_entropy_graph, entropy_graph, ClassifierKind, ClassifierVars,
    DisentangleError, SpeakerClassifier,
};
use crate::frontend::{encode_video_graph, FrontendError, FrontendParams, FrontendVars, D_V};
use crate::nn::{Arr, Grads, Tape, Var};
use crate::synthdata::{SpeakerDescriptor, R_AV};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Frontend(#[from] FrontendError),
    #[error(transparent)]
    Condition(#[from] ConditionError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Disentangle(#[from] DisentangleError),
    #[error("objective requires a speaker classifier but the model has none")]
    MissingClassifier,
    #[error("conditioning input does not match the model's conditioning mode")]
    CondInputMismatch,
    #[error("non-finite loss")]
    NonFiniteLoss,
}

/// Per-mel-band statistics used to normalize decoder targets.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MelStats {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl MelStats {
    pub fn fit<'a>(mels: impl Iterator<Item = &'a Array2<f64>>) -> Self {
        let mut sum: Option<Array1<f64>> = None;
        let mut sum_sq: Option<Array1<f64>> = None;
        let mut n = 0usize;
        for m in mels {
            let s = m.sum_axis(Axis(0));
            let s2 = m.mapv(|v| v * v).sum_axis(Axis(0));
            match (&mut sum, &mut sum_sq) {
                (Some(a), Some(b)) => {
                    *a += &s;
                    *b += &s2;
                }
                _ => {
                    sum = Some(s);
                    sum_sq = Some(s2);
                }
            }
            n += m.nrows();
        }
        let mean = sum.expect("MelStats::fit on empty iterator") / n as f64;
        let var = sum_sq.unwrap() / n as f64 - mean.mapv(|v| v * v);
        MelStats {
            mean,
            std: var.mapv(|v| v.max(1e-12).sqrt()),
        }
    }

    pub fn normalize(&self, mel: &Array2<f64>) -> Array2<f64> {
        let mut out = mel.clone();
        for mut row in out.rows_mut() {
            row.zip_mut_with(&self.mean, |v, &m| *v -= m);
            row.zip_mut_with(&self.std, |v, &s| *v /= s);
        }
        out
    }

    pub fn denormalize(&self, mel: &Array2<f64>) -> Array2<f64> {
        let mut out = mel.clone();
        for mut row in out.rows_mut() {
            row.zip_mut_with(&self.std, |v, &s| *v *= s);
            row.zip_mut_with(&self.mean, |v, &m| *v += m);
        }
        out
    }
}

/// Complete parameter bundle.
#[derive(Clone, Serialize, Deserialize)]
pub struct Model {
    pub frontend: FrontendParams,
    pub conditioning: Option<(ConditioningMode, ConditionerParams)>,
    pub decoder: DecoderParams,
    pub classifier: Option<SpeakerClassifier>,
}

impl Model {
    pub fn init(
        cond_mode: Option<ConditioningMode>,
        n_speakers: usize,
        classifier: Option<ClassifierKind>,
        n_mels: usize,
        reduction: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let frontend = FrontendParams::init(rng);
        let conditioning = cond_mode.map(|mode| {
            let params = match mode {
                ConditioningMode::SpeakerId => {
                    ConditionerParams::Table(SpeakerTable::init(n_speakers, rng))
                }
                _ => ConditionerParams::Projector(EmbeddingProjector::init(rng)),
            };
            (mode, params)
        });
        let ctx_dim = D_V + conditioning.as_ref().map_or(0, |_| crate::conditioner::COND_DIM);
        let decoder = DecoderParams::init(reduction, n_mels, ctx_dim, rng);
        let classifier = classifier.map(|kind| SpeakerClassifier::init(kind, D_V, n_speakers, rng));
        Self {
            frontend,
            conditioning,
            decoder,
            classifier,
        }
    }

    /// Generator parameters (frontend, conditioning, decoder), fixed order.
    pub fn generator_params(&self) -> Vec<&Arr> {
        let mut v = self.frontend.params();
        if let Some((_, c)) = &self.conditioning {
            v.extend(c.params());
        }
        v.extend(self.decoder.params());
        v
    }

    pub fn generator_params_mut(&mut self) -> Vec<&mut Arr> {
        let mut v = self.frontend.params_mut();
        if let Some((_, c)) = &mut self.conditioning {
            v.extend(c.params_mut());
        }
        v.extend(self.decoder.params_mut());
        v
    }

    pub fn classifier_params(&self) -> Vec<&Arr> {
        self.classifier.as_ref().map_or_else(Vec::new, |c| c.params())
    }

    pub fn classifier_params_mut(&mut self) -> Vec<&mut Arr> {
        self.classifier
            .as_mut()
            .map_or_else(Vec::new, |c| c.params_mut())
    }

    fn embed_stats(&self) -> Option<&crate::conditioner::EmbedStats> {
        match &self.conditioning {
            Some((_, ConditionerParams::Projector(p))) => p.stats.as_ref(),
            _ => None,
        }
    }
}

/// Speaker input for one clip's forward pass.
#[derive(Clone, Debug)]
pub enum CondInput<'a> {
    None,
    Id(usize),
    Emb(&'a Array1<f64>),
}

impl CondInput<'_> {
    fn descriptor(&self) -> Option<SpeakerDescriptor> {
        match self {
            CondInput::None => None,
            CondInput::Id(i) => Some(SpeakerDescriptor::Identity(*i)),
            CondInput::Emb(e) => Some(SpeakerDescriptor::Embedding((*e).clone())),
        }
    }
}

/// One clip of a training batch. `target` and `teacher` are normalized
/// log-mel frames; `teacher` already has frame dropout applied.
pub struct TrainItem<'a> {
    pub video: &'a Array3<f64>,
    pub target: &'a Array2<f64>,
    pub teacher: &'a Array2<f64>,
    pub label: usize,
    pub cond: CondInput<'a>,
}

/// Training objective for one batch step.
#[derive(Clone, Copy, Debug)]
pub enum Objective {
    /// Reconstruction only.
    Reconstruction,
    /// Dispel, discriminator side: classifier cross-entropy on detached
    /// features; gradients reach only the classifier.
    DispelDiscriminator,
    /// Dispel, generator side: reconstruction minus `lambda` x prediction
    /// entropy, classifier weights frozen.
    DispelGenerator { lambda: f64 },
    /// Joint objective with reversed classifier gradient into the frontend.
    RevGrad { lambda: f64 },
}

pub struct BatchResult {
    /// Objective value, averaged over the batch.
    pub loss: f64,
    /// Mean reconstruction MSE (0 for the discriminator pass).
    pub recon_mse: f64,
    /// Gradients aligned with `generator_params()`, when the objective
    /// updates the generator.
    pub gen_grads: Option<Vec<Arr>>,
    /// Gradients aligned with `classifier_params()`, when the objective
    /// updates the classifier.
    pub clf_grads: Option<Vec<Arr>>,
}

struct ClipOutcome {
    loss: f64,
    recon: f64,
    gen: Option<Vec<Arr>>,
    clf: Option<Vec<Arr>>,
}

fn collect(grads: &Grads, vars: &[Var], shapes: &[Vec<usize>]) -> Vec<Arr> {
    vars.iter()
        .zip(shapes)
        .map(|(&v, s)| grads.get_or_zeros(v, s))
        .collect()
}

/// Registers generator params and builds the shared part of the clip graph
/// (features, context, prediction, reconstruction MSE when wanted).
struct ClipGraph {
    gen_vars: Vec<Var>,
    feats: Var,
    mse: Option<Var>,
}

fn build_clip_graph(
    tape: &Tape,
    model: &Model,
    item: &TrainItem<'_>,
    with_decoder: bool,
) -> Result<ClipGraph, ModelError> {
    let fvars = FrontendVars::register(tape, &model.frontend);
    let feats = encode_video_graph(tape, &fvars, item.video);
    let mut gen_vars: Vec<Var> = fvars.all().to_vec();

    let ctx = match (&model.conditioning, &item.cond) {
        (None, CondInput::None) => tape.upsample_rows(feats, R_AV),
        (Some((mode, params)), cond) => {
            let desc = cond.descriptor().ok_or(ModelError::CondInputMismatch)?;
            let pvar = tape.input(params.params()[0].clone());
            gen_vars.push(pvar);
            let cvec = condition_vector_graph(tape, *mode, pvar, &desc, model.embed_stats())?;
            let ups = tape.upsample_rows(feats, R_AV);
            concat_condition_graph(tape, ups, cvec)
        }
        _ => return Err(ModelError::CondInputMismatch),
    };

    let mse = if with_decoder {
        let dvars = DecoderVars::register(tape, &model.decoder);
        gen_vars.extend(dvars.all().iter().copied());
        let pred = decode_teacher_forced_graph(tape, &dvars, &model.decoder, ctx, item.teacher)?;
        let tv = tape.input(item.target.to_owned().into_dyn());
        Some(tape.mse(pred, tv))
    } else {
        None
    };

    Ok(ClipGraph {
        gen_vars,
        feats,
        mse,
    })
}

fn clip_step(
    model: &Model,
    item: &TrainItem<'_>,
    objective: Objective,
) -> Result<ClipOutcome, ModelError> {
    let tape = Tape::new();
    match objective {
        Objective::Reconstruction => {
            let g = build_clip_graph(&tape, model, item, true)?;
            let loss = g.mse.unwrap();
            let grads = tape.backward(loss);
            let shapes: Vec<_> = model
                .generator_params()
                .iter()
                .map(|p| p.shape().to_vec())
                .collect();
            Ok(ClipOutcome {
                loss: tape.scalar(loss),
                recon: tape.scalar(loss),
                gen: Some(collect(&grads, &g.gen_vars, &shapes)),
                clf: None,
            })
        }
        Objective::DispelDiscriminator => {
            let clf = model.classifier.as_ref().ok_or(ModelError::MissingClassifier)?;
            let g = build_clip_graph(&tape, model, item, false)?;
            let feats_const = tape.detach(g.feats);
            let cvars = ClassifierVars::register(&tape, clf);
            let lp = classify_speaker_graph(&tape, &cvars, feats_const);
            let loss = cross_entropy_graph(&tape, lp, item.label);
            let grads = tape.backward(loss);
            let shapes: Vec<_> = clf.params().iter().map(|p| p.shape().to_vec()).collect();
            Ok(ClipOutcome {
                loss: tape.scalar(loss),
                recon: 0.0,
                gen: None,
                clf: Some(collect(&grads, cvars.all(), &shapes)),
            })
        }
        Objective::DispelGenerator { lambda } => {
            let clf = model.classifier.as_ref().ok_or(ModelError::MissingClassifier)?;
            let g = build_clip_graph(&tape, model, item, true)?;
            let cvars = ClassifierVars::register_frozen(&tape, clf);
            let lp = classify_speaker_graph(&tape, &cvars, g.feats);
            let ent = entropy_graph(&tape, lp);
            let mse = g.mse.unwrap();
            let loss = tape.sub(mse, tape.scale(ent, lambda));
            let grads = tape.backward(loss);
            let shapes: Vec<_> = model
                .generator_params()
                .iter()
                .map(|p| p.shape().to_vec())
                .collect();
            Ok(ClipOutcome {
                loss: tape.scalar(loss),
                recon: tape.scalar(mse),
                gen: Some(collect(&grads, &g.gen_vars, &shapes)),
                clf: None,
            })
        }
        Objective::RevGrad { lambda } => {
            let clf = model.classifier.as_ref().ok_or(ModelError::MissingClassifier)?;
            let g = build_clip_graph(&tape, model, item, true)?;
            let reversed = tape.grad_reverse(g.feats);
            let cvars = ClassifierVars::register(&tape, clf);
            let lp = classify_speaker_graph(&tape, &cvars, reversed);
            let ce = cross_entropy_graph(&tape, lp, item.label);
            let mse = g.mse.unwrap();
            let loss = tape.add(mse, tape.scale(ce, lambda));
            let grads = tape.backward(loss);
            let gen_shapes: Vec<_> = model
                .generator_params()
                .iter()
                .map(|p| p.shape().to_vec())
                .collect();
            let clf_shapes: Vec<_> = clf.params().iter().map(|p| p.shape().to_vec()).collect();
            Ok(ClipOutcome {
                loss: tape.scalar(loss),
                recon: tape.scalar(mse),
                gen: Some(collect(&grads, &g.gen_vars, &gen_shapes)),
                clf: Some(collect(&grads, cvars.all(), &clf_shapes)),
            })
        }
    }
}

/// Runs one objective over a batch: per-clip tapes in parallel, gradients
/// averaged sequentially in clip order.
pub fn batch_step(
    model: &Model,
    items: &[TrainItem<'_>],
    objective: Objective,
) -> Result<BatchResult, ModelError> {
    assert!(!items.is_empty());
    let outcomes = crate::par::map_slice(items, |item| clip_step(model, item, objective));
    let mut loss = 0.0;
    let mut recon = 0.0;
    let mut gen: Option<Vec<Arr>> = None;
    let mut clf: Option<Vec<Arr>> = None;
    let n = items.len() as f64;
    for outcome in outcomes {
        let o = outcome?;
        loss += o.loss / n;
        recon += o.recon / n;
        for (acc, part) in [(&mut gen, o.gen), (&mut clf, o.clf)] {
            if let Some(gs) = part {
                match acc {
                    Some(a) => {
                        for (ai, gi) in a.iter_mut().zip(gs) {
                            *ai += &gi;
                        }
                    }
                    None => *acc = Some(gs),
                }
            }
        }
    }
    for a in gen.iter_mut().chain(clf.iter_mut()) {
        for g in a.iter_mut() {
            g.mapv_inplace(|v| v / n);
        }
    }
    if !loss.is_finite() {
        return Err(ModelError::NonFiniteLoss);
    }
    Ok(BatchResult {
        loss,
        recon_mse: recon,
        gen_grads: gen,
        clf_grads: clf,
    })
}

/// Teacher-forced reconstruction MSE without gradients (validation).
pub fn forward_recon_mse(
    model: &Model,
    video: &Array3<f64>,
    target: &Array2<f64>,
    cond: &CondInput<'_>,
) -> Result<f64, ModelError> {
    let tape = Tape::new();
    let item = TrainItem {
        video,
        target,
        teacher: target,
        label: 0,
        cond: cond.clone(),
    };
    let g = build_clip_graph(&tape, model, &item, true)?;
    Ok(tape.scalar(g.mse.unwrap()))
}

/// Visual features for one clip, `(t, D_V)`.
pub fn clip_features(model: &Model, video: &Array3<f64>) -> Array2<f64> {
    let tape = Tape::new();
    let fvars = FrontendVars::register(&tape, &model.frontend);
    let feats = encode_video_graph(&tape, &fvars, video);
    tape.value(feats)
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
}

/// Mean-pooled features for many clips, in parallel.
pub fn pooled_features_batch(model: &Model, videos: &[&Array3<f64>]) -> Vec<Array1<f64>> {
    crate::par::map_slice(videos, |v| {
        let f = clip_features(model, v);
        f.sum_axis(Axis(0)) / f.nrows() as f64
    })
}

/// Free-running synthesis of a normalized mel spectrogram from a video and a
/// speaker input. Output has `R_AV` frames per video frame.
pub fn synthesize_normalized_mel(
    model: &Model,
    video: &Array3<f64>,
    cond: &CondInput<'_>,
) -> Result<Array2<f64>, ModelError> {
    let tape = Tape::new();
    let fvars = FrontendVars::register(&tape, &model.frontend);
    let feats = encode_video_graph(&tape, &fvars, video);
    let ctx = match (&model.conditioning, cond) {
        (None, CondInput::None) => tape.upsample_rows(feats, R_AV),
        (Some((mode, params)), cond) => {
            let desc = cond.descriptor().ok_or(ModelError::CondInputMismatch)?;
            let pvar = tape.input(params.params()[0].clone());
            let cvec = condition_vector_graph(&tape, *mode, pvar, &desc, model.embed_stats())?;
            let ups = tape.upsample_rows(feats, R_AV);
            concat_condition_graph(&tape, ups, cvec)
        }
        _ => return Err(ModelError::CondInputMismatch),
    };
    let n_frames = video.dim().0 * R_AV;
    let n_steps = n_frames.div_ceil(model.decoder.reduction);
    let dvars = DecoderVars::register(&tape, &model.decoder);
    let pred = decode_free_running_graph(&tape, &dvars, &model.decoder, ctx, n_steps);
    let out = tape
        .value(pred)
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap();
    Ok(out.slice(ndarray::s![..n_frames, ..]).to_owned())
}
