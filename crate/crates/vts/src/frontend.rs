//! Visual frontend: one 3-d convolution stem, a 4-block residual stack with
//! spatial global average pooling, and a unidirectional recurrent layer.
//! Produces one feature vector per input video frame (time is preserved via
//! stride-1 temporal convolution with replicate-edge padding).

use ndarray::{Array2, Array3, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{self, lstm_sequence, Arr, Conv3dSpec, Tape, Var};
use crate::synthdata::VideoClip;

/// Feature width after the recurrent layer.
pub const D_V: usize = 64;

const STEM_CH: usize = 8;
const LSTM_IN: usize = 64;
/// Residual stack: (in, out, spatial stride) per block, widths 32 to 64.
const BLOCKS: [(usize, usize, usize); 4] = [
    (STEM_CH, 32, 2),
    (32, 32, 2),
    (32, 64, 2),
    (64, 64, 1),
];

#[derive(Debug, Error)]
pub enum FrontendError {
    #[error("input contains non-finite pixel values")]
    NonFinite,
    #[error("upsampling factor must be >= 1")]
    BadFactor,
}

#[derive(Clone, Serialize, Deserialize)]
pub struct ResBlockParams {
    pub conv1_w: Arr,
    pub conv1_b: Arr,
    pub conv2_w: Arr,
    pub conv2_b: Arr,
    /// 1x1 projection when channels or resolution change.
    pub skip: Option<(Arr, Arr)>,
}

#[derive(Clone, Serialize, Deserialize)]
pub struct FrontendParams {
    pub stem_w: Arr,
    pub stem_b: Arr,
    pub blocks: Vec<ResBlockParams>,
    pub lstm_w_ih: Arr,
    pub lstm_w_hh: Arr,
    pub lstm_b: Arr,
}

fn stem_spec() -> Conv3dSpec {
    Conv3dSpec {
        cin: 1,
        cout: STEM_CH,
        kt: 3,
        kh: 5,
        kw: 5,
        stride: 2,
    }
}

fn block_spec(cin: usize, cout: usize, stride: usize) -> Conv3dSpec {
    Conv3dSpec {
        cin,
        cout,
        kt: 1,
        kh: 3,
        kw: 3,
        stride,
    }
}

impl FrontendParams {
    pub fn init(rng: &mut ChaCha8Rng) -> Self {
        let stem = stem_spec();
        let stem_fan = stem.cin * stem.kt * stem.kh * stem.kw;
        let blocks = BLOCKS
            .iter()
            .map(|&(cin, cout, stride)| {
                let s1 = block_spec(cin, cout, stride);
                let s2 = block_spec(cout, cout, 1);
                let skip = if cin != cout || stride != 1 {
                    let sk = Conv3dSpec {
                        cin,
                        cout,
                        kt: 1,
                        kh: 1,
                        kw: 1,
                        stride,
                    };
                    Some((
                        nn::randn_scaled(&sk.weight_shape(), cin, rng),
                        Arr::zeros(ndarray::IxDyn(&[cout])),
                    ))
                } else {
                    None
                };
                ResBlockParams {
                    conv1_w: nn::randn_he(&s1.weight_shape(), cin * 9, rng),
                    conv1_b: Arr::zeros(ndarray::IxDyn(&[cout])),
                    conv2_w: nn::randn_he(&s2.weight_shape(), cout * 9, rng),
                    conv2_b: Arr::zeros(ndarray::IxDyn(&[cout])),
                    skip,
                }
            })
            .collect();
        Self {
            stem_w: nn::randn_he(&stem.weight_shape(), stem_fan, rng),
            stem_b: Arr::zeros(ndarray::IxDyn(&[STEM_CH])),
            blocks,
            lstm_w_ih: nn::randn_scaled(&[LSTM_IN, 4 * D_V], LSTM_IN, rng),
            lstm_w_hh: nn::randn_scaled(&[D_V, 4 * D_V], D_V, rng),
            lstm_b: nn::lstm_bias(D_V),
        }
    }

    /// Parameter tensors in a fixed order (matching [`FrontendVars`]).
    pub fn params(&self) -> Vec<&Arr> {
        let mut v = vec![&self.stem_w, &self.stem_b];
        for b in &self.blocks {
            v.push(&b.conv1_w);
            v.push(&b.conv1_b);
            v.push(&b.conv2_w);
            v.push(&b.conv2_b);
            if let Some((w, bias)) = &b.skip {
                v.push(w);
                v.push(bias);
            }
        }
        v.push(&self.lstm_w_ih);
        v.push(&self.lstm_w_hh);
        v.push(&self.lstm_b);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Arr> {
        let mut v = vec![&mut self.stem_w, &mut self.stem_b];
        for b in &mut self.blocks {
            v.push(&mut b.conv1_w);
            v.push(&mut b.conv1_b);
            v.push(&mut b.conv2_w);
            v.push(&mut b.conv2_b);
            if let Some((w, bias)) = &mut b.skip {
                v.push(w);
                v.push(bias);
            }
        }
        v.push(&mut self.lstm_w_ih);
        v.push(&mut self.lstm_w_hh);
        v.push(&mut self.lstm_b);
        v
    }
}

/// Tape handles for the frontend parameters.
pub struct FrontendVars {
    vars: Vec<Var>,
}

impl FrontendVars {
    pub fn register(tape: &Tape, p: &FrontendParams) -> Self {
        Self {
            vars: nn::register_all(tape, &p.params()),
        }
    }

    pub fn all(&self) -> &[Var] {
        &self.vars
    }
}

/// Builds the frontend graph for one clip: `(t, h, w)` pixels in, `(t, D_V)`
/// features out.
pub fn encode_video_graph(tape: &Tape, vars: &FrontendVars, frames: &Array3<f64>) -> Var {
    let (t, h, w) = frames.dim();
    let x = tape.input(
        frames
            .to_owned()
            .into_shape_with_order(ndarray::IxDyn(&[t, 1, h, w]))
            .unwrap(),
    );
    let vs = vars.all();
    let mut i = 0;
    let mut next = || {
        i += 1;
        vs[i - 1]
    };

    let stem = stem_spec();
    let mut cur = tape.relu(tape.conv3d(x, next(), next(), stem));
    for &(cin, cout, stride) in BLOCKS.iter() {
        let c1w = next();
        let c1b = next();
        let c2w = next();
        let c2b = next();
        let y = tape.relu(tape.conv3d(cur, c1w, c1b, block_spec(cin, cout, stride)));
        let y = tape.conv3d(y, c2w, c2b, block_spec(cout, cout, 1));
        let shortcut = if cin != cout || stride != 1 {
            let skw = next();
            let skb = next();
            tape.conv3d(
                cur,
                skw,
                skb,
                Conv3dSpec {
                    cin,
                    cout,
                    kt: 1,
                    kh: 1,
                    kw: 1,
                    stride,
                },
            )
        } else {
            cur
        };
        cur = tape.relu(tape.add(y, shortcut));
    }
    let pooled = tape.spatial_mean(cur); // (t, LSTM_IN)
    lstm_sequence(tape, pooled, next(), next(), next(), D_V)
}

/// Encodes a clip to per-frame visual features, `(t, D_V)`.
pub fn encode_video(clip: &VideoClip, params: &FrontendParams) -> Result<Array2<f64>, FrontendError> {
    if clip.frames.iter().any(|v| !v.is_finite()) {
        return Err(FrontendError::NonFinite);
    }
    let tape = Tape::new();
    let vars = FrontendVars::register(&tape, params);
    let out = encode_video_graph(&tape, &vars, &clip.frames);
    let val = tape.value(out);
    Ok(val.into_dimensionality::<ndarray::Ix2>().unwrap())
}

/// Nearest-neighbor temporal upsampling: `out[i] = feats[i / factor]`.
pub fn upsample_features(feats: &Array2<f64>, factor: usize) -> Result<Array2<f64>, FrontendError> {
    if factor < 1 {
        return Err(FrontendError::BadFactor);
    }
    let (n, m) = feats.dim();
    let mut out = Array2::zeros((n * factor, m));
    for i in 0..n * factor {
        out.row_mut(i).assign(&feats.row(i / factor));
    }
    Ok(out)
}

/// Mean-pooled per-clip feature vector, the representation probed for
/// speaker information.
pub fn pooled_features(feats: &Array2<f64>) -> ndarray::Array1<f64> {
    feats.sum_axis(Axis(0)) / feats.nrows() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{central_diff, rel_err};
    use ndarray::Array3;
    use rand::Rng;
    use rand::SeedableRng;

    fn clip(t: usize, rng: &mut ChaCha8Rng) -> VideoClip {
        VideoClip {
            frames: Array3::from_shape_fn((t, 32, 32), |_| rng.random::<f64>()),
            fps: 20,
            speaker_id: 0,
            tokens: vec![0],
        }
    }

    #[test]
    fn output_shape_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let params = FrontendParams::init(&mut rng);
        let c = clip(20, &mut rng);
        let f1 = encode_video(&c, &params).unwrap();
        let f2 = encode_video(&c, &params).unwrap();
        assert_eq!(f1.dim(), (20, D_V));
        assert_eq!(f1, f2);
        assert!(f1.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn time_length_preserved_across_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let params = FrontendParams::init(&mut rng);
        for t in [4, 5, 11, 64] {
            let c = clip(t, &mut rng);
            let f = encode_video(&c, &params).unwrap();
            assert_eq!(f.dim(), (t, D_V), "t = {t}");
        }
    }

    #[test]
    fn non_finite_pixels_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let params = FrontendParams::init(&mut rng);
        let mut c = clip(4, &mut rng);
        c.frames[[0, 0, 0]] = f64::NAN;
        assert!(matches!(
            encode_video(&c, &params),
            Err(FrontendError::NonFinite)
        ));
    }

    #[test]
    fn upsample_definition_and_identity() {
        let feats = Array2::from_shape_fn((3, 2), |(i, j)| (i * 2 + j) as f64);
        let up = upsample_features(&feats, 4).unwrap();
        assert_eq!(up.dim(), (12, 2));
        for i in 0..12 {
            assert_eq!(up.row(i), feats.row(i / 4));
        }
        assert_eq!(upsample_features(&feats, 1).unwrap(), feats);
        assert!(upsample_features(&feats, 0).is_err());

        // decimating the upsampled sequence recovers the original exactly
        for i in 0..3 {
            assert_eq!(up.row(i * 4), feats.row(i));
        }
    }

    /// Gradient of a frontend scalar objective w.r.t. sampled weights from
    /// every parameter group matches central finite differences.
    #[test]
    fn frontend_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let params = FrontendParams::init(&mut rng);
        let frames = Array3::from_shape_fn((2, 32, 32), |_| rng.random::<f64>());

        let loss_with = |p: &FrontendParams| {
            let tape = Tape::new();
            let vars = FrontendVars::register(&tape, p);
            let f = encode_video_graph(&tape, &vars, &frames);
            tape.scalar(tape.mean_all(f))
        };

        let tape = Tape::new();
        let vars = FrontendVars::register(&tape, &params);
        let f = encode_video_graph(&tape, &vars, &frames);
        let loss = tape.mean_all(f);
        let grads = tape.backward(loss);

        // one sampled coordinate per parameter tensor; the small step keeps
        // central differences clear of rectifier kinks
        let n_params = params.params().len();
        for pi in 0..n_params {
            let shape = params.params()[pi].shape().to_vec();
            let len: usize = shape.iter().product();
            let idx = (pi * 131) % len;
            let x0 = params.params()[pi].as_slice().unwrap()[idx];
            let fd = central_diff(
                |x| {
                    let mut p2 = params.clone();
                    p2.params_mut()[pi].as_slice_mut().unwrap()[idx] = x;
                    loss_with(&p2)
                },
                x0,
                1e-5,
            );
            let an = grads
                .get_or_zeros(vars.all()[pi], &shape)
                .as_slice()
                .unwrap()[idx];
            assert!(
                rel_err(an, fd) < 1e-4,
                "param {pi} idx {idx}: analytic {an} vs fd {fd}"
            );
        }

        // sampled recurrent weight at step 1e-3 (smooth path, so the larger
        // step is safe): relative error stays below 1e-4
        let pi = n_params - 3; // lstm_w_ih
        let idx = 77;
        let x0 = params.params()[pi].as_slice().unwrap()[idx];
        let fd = central_diff(
            |x| {
                let mut p2 = params.clone();
                p2.params_mut()[pi].as_slice_mut().unwrap()[idx] = x;
                loss_with(&p2)
            },
            x0,
            1e-3,
        );
        let shape = params.params()[pi].shape().to_vec();
        let an = grads
            .get_or_zeros(vars.all()[pi], &shape)
            .as_slice()
            .unwrap()[idx];
        assert!(rel_err(an, fd) < 1e-4, "lstm weight at step 1e-3: {an} vs {fd}");
    }
}
