//! 3-d convolution kernels backing the tape's `conv3d` op.
//!
//! Layout is `(t, c, h, w)`. Time is convolved with stride 1 and
//! replicate-edge padding so the frame count is preserved; space uses zero
//! padding of `k/2` and stride `spec.stride`. The heavy lifting runs through
//! an im2col matrix and `ndarray::dot`, with hand-written scatter loops for
//! the input gradient.

use ndarray::{Array1, Array2, ArrayD, IxDyn};

use super::tape::Arr;

/// Static description of one convolution layer.
#[derive(Clone, Copy, Debug)]
pub struct Conv3dSpec {
    pub cin: usize,
    pub cout: usize,
    pub kt: usize,
    pub kh: usize,
    pub kw: usize,
    /// Spatial stride (time stride is always 1).
    pub stride: usize,
}

impl Conv3dSpec {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let ph = self.kh / 2;
        let pw = self.kw / 2;
        (
            (h + 2 * ph - self.kh) / self.stride + 1,
            (w + 2 * pw - self.kw) / self.stride + 1,
        )
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        [self.cout, self.cin, self.kt, self.kh, self.kw]
    }

    fn cols(&self) -> usize {
        self.cin * self.kt * self.kh * self.kw
    }
}

/// Gathers input patches into a `(t*oh*ow, cin*kt*kh*kw)` matrix.
pub fn im2col(x: &Arr, spec: &Conv3dSpec) -> Array2<f64> {
    let (t, cin, h, w) = dims4(x);
    assert_eq!(cin, spec.cin, "conv3d: input channel mismatch");
    let (oh, ow) = spec.out_hw(h, w);
    let (ph, pw, ct) = (spec.kh / 2, spec.kw / 2, spec.kt / 2);
    let xs = x.as_slice().expect("conv input must be contiguous");
    let mut cols = Array2::<f64>::zeros((t * oh * ow, spec.cols()));
    let cs = cols.as_slice_mut().unwrap();
    let ncols = spec.cols();
    for ti in 0..t {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (ti * oh + oy) * ow + ox;
                let base = row * ncols;
                let mut k = 0;
                for ci in 0..cin {
                    for dt in 0..spec.kt {
                        // replicate-edge in time
                        let tt = (ti + dt).saturating_sub(ct).min(t - 1);
                        for dy in 0..spec.kh {
                            let yy = oy * spec.stride + dy;
                            if yy < ph || yy - ph >= h {
                                k += spec.kw;
                                continue;
                            }
                            let yy = yy - ph;
                            let src = ((tt * cin + ci) * h + yy) * w;
                            for dx in 0..spec.kw {
                                let xx = ox * spec.stride + dx;
                                if xx >= pw && xx - pw < w {
                                    cs[base + k] = xs[src + (xx - pw)];
                                }
                                k += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Forward pass given a precomputed im2col matrix.
pub fn conv3d_forward(
    x: &Arr,
    cols: &Array2<f64>,
    w: &Arr,
    b: &Arr,
    spec: &Conv3dSpec,
) -> Arr {
    let (t, _, h, wd) = dims4(x);
    let (oh, ow) = spec.out_hw(h, wd);
    let w2 = w
        .view()
        .into_shape_with_order((spec.cout, spec.cols()))
        .expect("conv3d: weight shape");
    // (t*oh*ow, cout)
    let out_mat = cols.dot(&w2.t());
    let bs = b.as_slice().expect("bias contiguous");
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[t, spec.cout, oh, ow]));
    {
        let os = out.as_slice_mut().unwrap();
        let om = out_mat.as_slice().unwrap();
        for ti in 0..t {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = (ti * oh + oy) * ow + ox;
                    for co in 0..spec.cout {
                        os[((ti * spec.cout + co) * oh + oy) * ow + ox] =
                            om[row * spec.cout + co] + bs[co];
                    }
                }
            }
        }
    }
    out
}

/// Backward pass: gradients for input, weights, and bias.
pub fn conv3d_backward(
    gout: &Arr,
    cols: &Array2<f64>,
    x: &Arr,
    w: &Arr,
    spec: &Conv3dSpec,
) -> (Arr, Arr, Arr) {
    let (t, cin, h, wd) = dims4(x);
    let (oh, ow) = spec.out_hw(h, wd);
    let (ph, pw, ct) = (spec.kh / 2, spec.kw / 2, spec.kt / 2);
    let ncols = spec.cols();

    // gather gout into (t*oh*ow, cout)
    let mut g_mat = Array2::<f64>::zeros((t * oh * ow, spec.cout));
    {
        let gm = g_mat.as_slice_mut().unwrap();
        let gs = gout.as_slice().expect("grad contiguous");
        for ti in 0..t {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = (ti * oh + oy) * ow + ox;
                    for co in 0..spec.cout {
                        gm[row * spec.cout + co] =
                            gs[((ti * spec.cout + co) * oh + oy) * ow + ox];
                    }
                }
            }
        }
    }

    let w2 = w
        .view()
        .into_shape_with_order((spec.cout, ncols))
        .expect("conv3d: weight shape");
    let gw2 = g_mat.t().dot(cols);
    let gw = gw2
        .into_shape_with_order(IxDyn(&spec.weight_shape()))
        .unwrap();
    let gb: Array1<f64> = g_mat.sum_axis(ndarray::Axis(0));
    let g_cols = g_mat.dot(&w2);

    // scatter g_cols back onto the input (adjoint of im2col)
    let mut gx = ArrayD::<f64>::zeros(IxDyn(&[t, cin, h, wd]));
    {
        let gxs = gx.as_slice_mut().unwrap();
        let gcs = g_cols.as_slice().unwrap();
        for ti in 0..t {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = (ti * oh + oy) * ow + ox;
                    let base = row * ncols;
                    let mut k = 0;
                    for ci in 0..cin {
                        for dt in 0..spec.kt {
                            let tt = (ti + dt).saturating_sub(ct).min(t - 1);
                            for dy in 0..spec.kh {
                                let yy = oy * spec.stride + dy;
                                if yy < ph || yy - ph >= h {
                                    k += spec.kw;
                                    continue;
                                }
                                let yy = yy - ph;
                                let dst = ((tt * cin + ci) * h + yy) * wd;
                                for dx in 0..spec.kw {
                                    let xx = ox * spec.stride + dx;
                                    if xx >= pw && xx - pw < wd {
                                        gxs[dst + (xx - pw)] += gcs[base + k];
                                    }
                                    k += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    (gx, gw, gb.into_dyn())
}

fn dims4(x: &Arr) -> (usize, usize, usize, usize) {
    let s = x.shape();
    assert_eq!(s.len(), 4, "expected (t, c, h, w) tensor");
    (s[0], s[1], s[2], s[3])
}

/// Reference convolution via direct summation; used by tests as an oracle
/// against the im2col path.
#[doc(hidden)]
pub fn conv3d_reference(x: &Arr, w: &Arr, b: &Arr, spec: &Conv3dSpec) -> Arr {
    let (t, cin, h, wd) = dims4(x);
    let (oh, ow) = spec.out_hw(h, wd);
    let (ph, pw, ct) = (spec.kh / 2, spec.kw / 2, spec.kt / 2);
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[t, spec.cout, oh, ow]));
    for ti in 0..t {
        for co in 0..spec.cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[[co]];
                    for ci in 0..cin {
                        for dt in 0..spec.kt {
                            let tt = (ti + dt).saturating_sub(ct).min(t - 1);
                            for dy in 0..spec.kh {
                                let yy = (oy * spec.stride + dy) as isize - ph as isize;
                                if yy < 0 || yy >= h as isize {
                                    continue;
                                }
                                for dx in 0..spec.kw {
                                    let xx = (ox * spec.stride + dx) as isize - pw as isize;
                                    if xx < 0 || xx >= wd as isize {
                                        continue;
                                    }
                                    acc += x[[tt, ci, yy as usize, xx as usize]]
                                        * w[[co, ci, dt, dy, dx]];
                                }
                            }
                        }
                    }
                    out[[ti, co, oy, ox]] = acc;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tape::{central_diff, rel_err, Tape};
    use ndarray::Array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Arr {
        Array::from_shape_fn(IxDyn(shape), |_| rng.random::<f64>() - 0.5)
    }

    #[test]
    fn im2col_forward_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(kt, kh, kw, stride) in &[(3, 5, 5, 2), (1, 3, 3, 1), (3, 3, 3, 2), (1, 1, 1, 2)] {
            let spec = Conv3dSpec {
                cin: 2,
                cout: 3,
                kt,
                kh,
                kw,
                stride,
            };
            let x = randn(&[4, 2, 8, 8], &mut rng);
            let w = randn(&spec.weight_shape(), &mut rng);
            let b = randn(&[3], &mut rng);
            let cols = im2col(&x, &spec);
            let fast = conv3d_forward(&x, &cols, &w, &b, &spec);
            let slow = conv3d_reference(&x, &w, &b, &spec);
            let max = (&fast - &slow).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max < 1e-12, "kernel {kt}x{kh}x{kw}/{stride}: max diff {max}");
        }
    }

    #[test]
    fn conv_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let spec = Conv3dSpec {
            cin: 2,
            cout: 2,
            kt: 3,
            kh: 3,
            kw: 3,
            stride: 2,
        };
        let x0 = randn(&[3, 2, 6, 6], &mut rng);
        let w0 = randn(&spec.weight_shape(), &mut rng);
        let b0 = randn(&[2], &mut rng);

        let loss_at = |x: &Arr, w: &Arr, b: &Arr| {
            let t = Tape::new();
            let (xv, wv, bv) = (t.input(x.clone()), t.input(w.clone()), t.input(b.clone()));
            let y = t.conv3d(xv, wv, bv, spec);
            let sq = t.mul(y, y);
            t.scalar(t.mean_all(sq))
        };

        let tape = Tape::new();
        let (xv, wv, bv) = (
            tape.input(x0.clone()),
            tape.input(w0.clone()),
            tape.input(b0.clone()),
        );
        let y = tape.conv3d(xv, wv, bv, spec);
        let sq = tape.mul(y, y);
        let loss = tape.mean_all(sq);
        let grads = tape.backward(loss);

        // sample a handful of coordinates from each tensor
        let check = |var, arr: &Arr, which: usize| {
            let g = grads.get(var).unwrap().clone();
            let n = arr.len();
            for s in 0..8.min(n) {
                let idx = (s * 37) % n;
                let fd = central_diff(
                    |v| {
                        let mut a = arr.clone();
                        a.as_slice_mut().unwrap()[idx] = v;
                        match which {
                            0 => loss_at(&a, &w0, &b0),
                            1 => loss_at(&x0, &a, &b0),
                            _ => loss_at(&x0, &w0, &a),
                        }
                    },
                    arr.as_slice().unwrap()[idx],
                    1e-5,
                );
                let an = g.as_slice().unwrap()[idx];
                assert!(
                    rel_err(an, fd) < 1e-6,
                    "tensor {which} idx {idx}: {an} vs {fd}"
                );
            }
        };
        check(xv, &x0, 0);
        check(wv, &w0, 1);
        check(bv, &b0, 2);
    }

    #[test]
    fn time_length_preserved_for_any_t() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let spec = Conv3dSpec {
            cin: 1,
            cout: 2,
            kt: 3,
            kh: 5,
            kw: 5,
            stride: 2,
        };
        for t in [1, 2, 4, 7, 64] {
            let x = randn(&[t, 1, 16, 16], &mut rng);
            let cols = im2col(&x, &spec);
            let w = randn(&spec.weight_shape(), &mut rng);
            let b = randn(&[2], &mut rng);
            let y = conv3d_forward(&x, &cols, &w, &b, &spec);
            assert_eq!(y.shape(), &[t, 2, 8, 8]);
        }
    }
}
