//! Speaker classifier and the three disentanglement objectives.
//!
//! The adversarial pair ("dispel") alternates a discriminator loss — mean
//! cross-entropy of the classifier on detached visual features — with a
//! generator loss — reconstruction error minus a weighted mean entropy of
//! the classifier's predictions, computed with the classifier weights
//! frozen. The gradient-reversal variant optimizes a single joint loss of
//! reconstruction plus weighted cross-entropy, with the classifier input
//! passed through the reversal op so the frontend receives the negated
//! identity gradient.

use ndarray::{Array1, Array2, ArrayView1};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{self, Arr, Tape, Var};

const MLP_HIDDEN: usize = 128;
/// Log floor keeping cross-entropy finite under saturated softmax.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DisentangleError {
    #[error("probability vector has a negative entry ({0})")]
    NegativeProbability(f64),
    #[error("probability vector sums to {0}, more than 1e-4 from 1")]
    NotNormalized(f64),
    #[error("speaker index {index} out of range for {k} classes")]
    BadSpeaker { index: usize, k: usize },
    #[error("empty feature sequence")]
    EmptySequence,
}

/// Disentanglement objective selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DisentangleMode {
    None,
    Dispel,
    RevGrad,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    Linear,
    Mlp,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DisentangleConfig {
    pub mode: DisentangleMode,
    pub classifier: ClassifierKind,
    pub lambda: f64,
}

impl Default for DisentangleConfig {
    fn default() -> Self {
        Self {
            mode: DisentangleMode::None,
            classifier: ClassifierKind::Linear,
            lambda: 1e-4,
        }
    }
}

impl DisentangleConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.lambda < 0.0 {
            return Err(format!("lambda must be >= 0, got {}", self.lambda));
        }
        Ok(())
    }
}

/// Utterance-level speaker classifier over visual features. The linear kind
/// pools over time then applies a linear map; the MLP kind applies a
/// two-layer network per frame before pooling, then a linear head.
#[derive(Clone, Serialize, Deserialize)]
pub struct SpeakerClassifier {
    pub kind: ClassifierKind,
    pub n_speakers: usize,
    weights: Vec<Arr>,
}

impl SpeakerClassifier {
    pub fn init(kind: ClassifierKind, d_v: usize, n_speakers: usize, rng: &mut ChaCha8Rng) -> Self {
        let weights = match kind {
            ClassifierKind::Linear => vec![
                nn::randn_scaled(&[d_v, n_speakers], d_v, rng),
                Arr::zeros(ndarray::IxDyn(&[n_speakers])),
            ],
            ClassifierKind::Mlp => vec![
                nn::randn_scaled(&[d_v, MLP_HIDDEN], d_v, rng),
                Arr::zeros(ndarray::IxDyn(&[MLP_HIDDEN])),
                nn::randn_scaled(&[MLP_HIDDEN, MLP_HIDDEN], MLP_HIDDEN, rng),
                Arr::zeros(ndarray::IxDyn(&[MLP_HIDDEN])),
                nn::randn_scaled(&[MLP_HIDDEN, n_speakers], MLP_HIDDEN, rng),
                Arr::zeros(ndarray::IxDyn(&[n_speakers])),
            ],
        };
        Self {
            kind,
            n_speakers,
            weights,
        }
    }

    pub fn params(&self) -> Vec<&Arr> {
        self.weights.iter().collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Arr> {
        self.weights.iter_mut().collect()
    }
}

pub struct ClassifierVars {
    pub kind: ClassifierKind,
    /// Handles representing the parameters (gradient queries go here).
    param_vars: Vec<Var>,
    /// Handles the forward pass reads; detached copies when frozen.
    forward_vars: Vec<Var>,
}

impl ClassifierVars {
    pub fn register(tape: &Tape, c: &SpeakerClassifier) -> Self {
        let vars = nn::register_all(tape, &c.params());
        Self {
            kind: c.kind,
            param_vars: vars.clone(),
            forward_vars: vars,
        }
    }

    /// Registers the classifier with every weight used through a detached
    /// copy, so no gradient reaches the classifier parameters in graphs
    /// built from this registration (the generator side of the dispel
    /// objective).
    pub fn register_frozen(tape: &Tape, c: &SpeakerClassifier) -> Self {
        let param_vars = nn::register_all(tape, &c.params());
        let forward_vars = param_vars.iter().map(|&v| tape.detach(v)).collect();
        Self {
            kind: c.kind,
            param_vars,
            forward_vars,
        }
    }

    /// Parameter handles, in [`SpeakerClassifier::params`] order.
    pub fn all(&self) -> &[Var] {
        &self.param_vars
    }

    fn forward(&self) -> &[Var] {
        &self.forward_vars
    }
}

/// Log-probabilities `(1, k)` of the speaker given per-frame features
/// `(t, d_v)`: one prediction per utterance.
pub fn classify_speaker_graph(tape: &Tape, vars: &ClassifierVars, feats: Var) -> Var {
    let vs = vars.forward();
    let logits = match vars.kind {
        ClassifierKind::Linear => {
            let pooled = tape.mean_rows(feats);
            tape.dense(pooled, vs[0], vs[1])
        }
        ClassifierKind::Mlp => {
            let h1 = tape.tanh(tape.dense(feats, vs[0], vs[1]));
            let h2 = tape.tanh(tape.dense(h1, vs[2], vs[3]));
            let pooled = tape.mean_rows(h2);
            tape.dense(pooled, vs[4], vs[5])
        }
    };
    tape.log_softmax(logits)
}

/// Probability vector over speakers for an utterance's visual features.
pub fn classify_speaker(
    feats: &Array2<f64>,
    clf: &SpeakerClassifier,
) -> Result<Array1<f64>, DisentangleError> {
    if feats.nrows() == 0 {
        return Err(DisentangleError::EmptySequence);
    }
    let tape = Tape::new();
    let vars = ClassifierVars::register(&tape, clf);
    let f = tape.input(feats.to_owned().into_dyn());
    let lp = classify_speaker_graph(&tape, &vars, f);
    let v = tape.value(lp);
    Ok(Array1::from_iter(v.iter().map(|&l| l.exp())))
}

fn validate_probs(p: &ArrayView1<f64>) -> Result<(), DisentangleError> {
    for &v in p.iter() {
        if v < 0.0 {
            return Err(DisentangleError::NegativeProbability(v));
        }
    }
    let sum = p.sum();
    if (sum - 1.0).abs() > 1e-4 {
        return Err(DisentangleError::NotNormalized(sum));
    }
    Ok(())
}

/// Shannon entropy `-sum p ln p`, with `0 ln 0 := 0`.
pub fn entropy(p: &ArrayView1<f64>) -> Result<f64, DisentangleError> {
    validate_probs(p)?;
    Ok(p.iter()
        .map(|&v| if v > 0.0 { -v * v.ln() } else { 0.0 })
        .sum())
}

/// Cross-entropy of the true speaker `s` under prediction `p`: `-ln p_s`,
/// floored at [`LOG_EPS`] inside the log.
pub fn cross_entropy(s: usize, p: &ArrayView1<f64>) -> Result<f64, DisentangleError> {
    validate_probs(p)?;
    if s >= p.len() {
        return Err(DisentangleError::BadSpeaker {
            index: s,
            k: p.len(),
        });
    }
    Ok(-(p[s].max(LOG_EPS)).ln())
}

/// Entropy node from a `(1, k)` log-probability node.
pub fn entropy_graph(tape: &Tape, logprobs: Var) -> Var {
    let p = tape.exp(logprobs);
    tape.neg(tape.sum_all(tape.mul(p, logprobs)))
}

/// Cross-entropy node from a `(1, k)` log-probability node.
pub fn cross_entropy_graph(tape: &Tape, logprobs: Var, speaker: usize) -> Var {
    tape.neg(tape.sum_all(tape.slice_cols(logprobs, speaker, 1)))
}

/// Discriminator objective: mean cross-entropy of classifier predictions on
/// the batch. Callers must build `logprobs` from detached visual features so
/// gradients reach only the classifier.
pub fn discriminator_loss(tape: &Tape, logprobs_with_labels: &[(Var, usize)]) -> Var {
    let ces: Vec<Var> = logprobs_with_labels
        .iter()
        .map(|&(lp, s)| cross_entropy_graph(tape, lp, s))
        .collect();
    tape.mean_scalars(&ces)
}

/// Generator objective: mean reconstruction error minus `lambda` times the
/// mean prediction entropy. Callers must build `logprobs` through a frozen
/// classifier registration so no gradient reaches the classifier weights.
pub fn generator_loss(tape: &Tape, recon: &[Var], logprobs: &[Var], lambda: f64) -> Var {
    let mse = tape.mean_scalars(recon);
    let ents: Vec<Var> = logprobs
        .iter()
        .map(|&lp| entropy_graph(tape, lp))
        .collect();
    let h = tape.mean_scalars(&ents);
    tape.sub(mse, tape.scale(h, lambda))
}

/// Joint reversal objective: mean reconstruction error plus `lambda` times
/// the mean cross-entropy. Callers must pass the visual features through
/// [`Tape::grad_reverse`] before the classifier so the frontend receives the
/// negated identity gradient while the classifier trains normally.
pub fn revgrad_loss(tape: &Tape, recon: &[Var], logprobs_with_labels: &[(Var, usize)], lambda: f64) -> Var {
    let mse = tape.mean_scalars(recon);
    let ce = discriminator_loss(tape, logprobs_with_labels);
    tape.add(mse, tape.scale(ce, lambda))
}
