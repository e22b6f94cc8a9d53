//! Autoregressive mel decoder with a reduction factor: a two-layer pre-net
//! over the previous frame group, a recurrent core over the (upsampled,
//! speaker-conditioned) context, and a linear projection emitting `r` mel
//! frames per step. Teacher forcing conditions on ground-truth frames after
//! frame dropout; free-running decoding feeds back the model's own output.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{self, lstm_step, Arr, Tape, Var};

pub const PRENET_DIM: usize = 64;
pub const DEC_HIDDEN: usize = 128;

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("context has {ctx} frames but target has {target}")]
    LengthMismatch { ctx: usize, target: usize },
    #[error("dropout rate {0} outside [0, 1]")]
    BadRate(f64),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
}

#[derive(Clone, Serialize, Deserialize)]
pub struct DecoderParams {
    /// Mel frames emitted per decoder step.
    pub reduction: usize,
    pub n_mels: usize,
    /// Width of one context frame (visual features plus any conditioning).
    pub ctx_dim: usize,
    /// Training-set mean mel frame (in the decoder's normalized units),
    /// used as the frame-dropout replacement.
    pub mean_frame: Array1<f64>,
    pub prenet1_w: Arr,
    pub prenet1_b: Arr,
    pub prenet2_w: Arr,
    pub prenet2_b: Arr,
    pub lstm_w_ih: Arr,
    pub lstm_w_hh: Arr,
    pub lstm_b: Arr,
    pub proj_w: Arr,
    pub proj_b: Arr,
}

impl DecoderParams {
    pub fn init(
        reduction: usize,
        n_mels: usize,
        ctx_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(reduction >= 1);
        let group = reduction * n_mels;
        let lstm_in = reduction * ctx_dim + PRENET_DIM;
        Self {
            reduction,
            n_mels,
            ctx_dim,
            mean_frame: Array1::zeros(n_mels),
            prenet1_w: nn::randn_he(&[group, PRENET_DIM], group, rng),
            prenet1_b: Arr::zeros(ndarray::IxDyn(&[PRENET_DIM])),
            prenet2_w: nn::randn_he(&[PRENET_DIM, PRENET_DIM], PRENET_DIM, rng),
            prenet2_b: Arr::zeros(ndarray::IxDyn(&[PRENET_DIM])),
            lstm_w_ih: nn::randn_scaled(&[lstm_in, 4 * DEC_HIDDEN], lstm_in, rng),
            lstm_w_hh: nn::randn_scaled(&[DEC_HIDDEN, 4 * DEC_HIDDEN], DEC_HIDDEN, rng),
            lstm_b: nn::lstm_bias(DEC_HIDDEN),
            proj_w: nn::randn_scaled(&[DEC_HIDDEN, group], DEC_HIDDEN, rng),
            proj_b: Arr::zeros(ndarray::IxDyn(&[group])),
        }
    }

    pub fn params(&self) -> Vec<&Arr> {
        vec![
            &self.prenet1_w,
            &self.prenet1_b,
            &self.prenet2_w,
            &self.prenet2_b,
            &self.lstm_w_ih,
            &self.lstm_w_hh,
            &self.lstm_b,
            &self.proj_w,
            &self.proj_b,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Arr> {
        vec![
            &mut self.prenet1_w,
            &mut self.prenet1_b,
            &mut self.prenet2_w,
            &mut self.prenet2_b,
            &mut self.lstm_w_ih,
            &mut self.lstm_w_hh,
            &mut self.lstm_b,
            &mut self.proj_w,
            &mut self.proj_b,
        ]
    }
}

pub struct DecoderVars {
    vars: Vec<Var>,
}

impl DecoderVars {
    pub fn register(tape: &Tape, p: &DecoderParams) -> Self {
        Self {
            vars: nn::register_all(tape, &p.params()),
        }
    }

    pub fn all(&self) -> &[Var] {
        &self.vars
    }
}

/// Replaces each frame (row) independently by `mean_frame` with probability
/// `rate`; untouched frames are bit-exact copies.
pub fn apply_frame_dropout(
    frames: &Array2<f64>,
    rate: f64,
    mean_frame: &Array1<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>, DecoderError> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(DecoderError::BadRate(rate));
    }
    let mut out = frames.clone();
    for mut row in out.rows_mut() {
        if rng.random::<f64>() < rate {
            row.assign(mean_frame);
        }
    }
    Ok(out)
}

fn prenet(tape: &Tape, vs: &[Var], x: Var) -> Var {
    let h1 = tape.relu(tape.dense(x, vs[0], vs[1]));
    tape.relu(tape.dense(h1, vs[2], vs[3]))
}

fn pad_rows_to_multiple(x: &Array2<f64>, r: usize) -> Array2<f64> {
    let f = x.nrows();
    let rem = f % r;
    if rem == 0 {
        return x.clone();
    }
    let pad = r - rem;
    let mut out = Array2::zeros((f + pad, x.ncols()));
    out.slice_mut(ndarray::s![..f, ..]).assign(x);
    for i in 0..pad {
        out.row_mut(f + i).assign(&x.row(f - 1));
    }
    out
}

enum Feedback<'a> {
    Teacher(&'a Array2<f64>),
    OwnOutput,
}

/// Shared decoding loop. Step `s` consumes context frames
/// `[s*r, (s+1)*r)` plus the previous frame group (ground truth under
/// teacher forcing, own prediction when free-running) passed through the
/// pre-net. Returns the `(f, n_mels)` prediction node.
fn decode_graph(
    tape: &Tape,
    vars: &DecoderVars,
    p: &DecoderParams,
    ctx: Var,
    n_frames: usize,
    feedback: Feedback<'_>,
) -> Var {
    let r = p.reduction;
    let group = r * p.n_mels;
    let vs = vars.all();
    let (pn, lstm_w_ih, lstm_w_hh, lstm_b, proj_w, proj_b) =
        (&vs[0..4], vs[4], vs[5], vs[6], vs[7], vs[8]);
    let n_steps = n_frames.div_ceil(r);
    let ctx = if n_steps * r == n_frames {
        ctx
    } else {
        // pad the context by replicating its last frame
        let last = tape.slice_rows(ctx, n_frames - 1, 1);
        let mut parts = vec![ctx];
        for _ in 0..n_steps * r - n_frames {
            parts.push(last);
        }
        tape.stack_rows(&parts)
    };

    let zeros_h = tape.input(Array2::<f64>::zeros((1, DEC_HIDDEN)).into_dyn());
    let mut state = (zeros_h, zeros_h);
    let go = tape.input(Array2::<f64>::zeros((1, group)).into_dyn());
    let mut prev = go;
    let mut outputs = Vec::with_capacity(n_steps);
    for s in 0..n_steps {
        let ctx_rows = tape.slice_rows(ctx, s * r, r);
        let ctx_flat = tape.flatten_row(ctx_rows);
        let pre = prenet(tape, pn, prev);
        let x = tape.concat_cols(ctx_flat, pre);
        state = lstm_step(tape, x, state, lstm_w_ih, lstm_w_hh, lstm_b, DEC_HIDDEN);
        let y = tape.dense(state.0, proj_w, proj_b); // (1, r * n_mels)
        outputs.push(y);
        prev = match feedback {
            Feedback::Teacher(teacher) => {
                let lo = s * r;
                let hi = ((s + 1) * r).min(teacher.nrows());
                let mut g = Array2::zeros((1, group));
                for (k, row) in (lo..hi).enumerate() {
                    g.slice_mut(ndarray::s![0, k * p.n_mels..(k + 1) * p.n_mels])
                        .assign(&teacher.row(row));
                }
                tape.input(g.into_dyn())
            }
            Feedback::OwnOutput => y,
        };
    }
    let stacked = tape.stack_rows(&outputs); // (n_steps, r * n_mels)
    let full = tape.reshape(stacked, &[n_steps * r, p.n_mels]);
    if n_steps * r == n_frames {
        full
    } else {
        tape.slice_rows(full, 0, n_frames)
    }
}

/// Teacher-forced decoding graph. `teacher` must already have frame dropout
/// applied; its length must match the context.
pub fn decode_teacher_forced_graph(
    tape: &Tape,
    vars: &DecoderVars,
    p: &DecoderParams,
    ctx: Var,
    teacher: &Array2<f64>,
) -> Result<Var, DecoderError> {
    let f = tape.shape(ctx)[0];
    if teacher.nrows() != f {
        return Err(DecoderError::LengthMismatch {
            ctx: f,
            target: teacher.nrows(),
        });
    }
    let padded = pad_rows_to_multiple(teacher, p.reduction);
    Ok(decode_graph(tape, vars, p, ctx, f, Feedback::Teacher(&padded)))
}

/// Teacher-forced decoding: applies frame dropout to the target, then
/// predicts every frame from the context and the (dropped-out) previous
/// target group. Output shape equals the target shape.
pub fn decode_teacher_forced(
    ctx: &Array2<f64>,
    target: &Array2<f64>,
    dropout_rate: f64,
    rng: &mut ChaCha8Rng,
    p: &DecoderParams,
) -> Result<Array2<f64>, DecoderError> {
    if ctx.nrows() != target.nrows() {
        return Err(DecoderError::LengthMismatch {
            ctx: ctx.nrows(),
            target: target.nrows(),
        });
    }
    let teacher = apply_frame_dropout(target, dropout_rate, &p.mean_frame, rng)?;
    let tape = Tape::new();
    let vars = DecoderVars::register(&tape, p);
    let ctx_v = tape.input(ctx.to_owned().into_dyn());
    let pred = decode_teacher_forced_graph(&tape, &vars, p, ctx_v, &teacher)?;
    Ok(tape
        .value(pred)
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap())
}

/// Free-running decoding graph: each step feeds back the previous
/// prediction. No dropout is applied at inference.
pub fn decode_free_running_graph(
    tape: &Tape,
    vars: &DecoderVars,
    p: &DecoderParams,
    ctx: Var,
    n_steps: usize,
) -> Var {
    decode_graph(tape, vars, p, ctx, n_steps * p.reduction, Feedback::OwnOutput)
}

/// Free-running decoding of `n_steps * reduction` frames.
pub fn decode_free_running(ctx: &Array2<f64>, p: &DecoderParams, n_steps: usize) -> Array2<f64> {
    let tape = Tape::new();
    let vars = DecoderVars::register(&tape, p);
    let ctx_v = tape.input(ctx.to_owned().into_dyn());
    let pred = decode_free_running_graph(&tape, &vars, p, ctx_v, n_steps);
    tape.value(pred)
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
}

/// Mean squared error over all entries.
pub fn reconstruction_loss(pred: &Array2<f64>, target: &Array2<f64>) -> Result<f64, DecoderError> {
    if pred.dim() != target.dim() {
        return Err(DecoderError::ShapeMismatch(
            pred.shape().to_vec(),
            target.shape().to_vec(),
        ));
    }
    let n = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(target.iter())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / n)
}
