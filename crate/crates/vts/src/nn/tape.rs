//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every forward operation records a node holding its value, its parent node
//! ids, and a closure computing parent gradients from the output gradient.
//! [`Tape::backward`] walks the nodes in reverse creation order, so a single
//! pass yields gradients for every registered input. Tapes are cheap,
//! single-threaded objects; data parallelism happens one tape per clip.
//!
//! Two ops carry the disentanglement contracts: [`Tape::grad_reverse`]
//! (identity forward, negated gradient) and [`Tape::detach`] (identity
//! forward, no gradient), which the adversarial losses use to partition
//! updates between the generator and the speaker classifier.

use std::cell::RefCell;
use std::sync::Arc;

use ndarray::{Array2, ArrayD, ArrayView2, Axis, Ix1, Ix2, IxDyn};

use super::conv::{conv3d_backward, conv3d_forward, im2col, Conv3dSpec};

pub type Arr = ArrayD<f64>;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn = Box<dyn Fn(&Arr, &Arr, &[&Arr]) -> Vec<Arr>>;

struct Node {
    value: Arr,
    parents: Vec<usize>,
    back: Option<BackFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients w.r.t. tape nodes, indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Arr>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Arr> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when no gradient flowed to it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Arr {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Arr::zeros(IxDyn(shape)),
        }
    }
}

pub fn as2(a: &Arr) -> ArrayView2<'_, f64> {
    a.view()
        .into_dimensionality::<Ix2>()
        .expect("expected 2-d tensor")
}

fn to_dyn2(a: Array2<f64>) -> Arr {
    a.into_dyn()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Arr, parents: Vec<usize>, back: Option<BackFn>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            back,
        });
        Var(nodes.len() - 1)
    }

    /// Registers a leaf value (parameter or constant input).
    pub fn input(&self, value: Arr) -> Var {
        self.push(value, vec![], None)
    }

    /// Owned copy of a node's value.
    pub fn value(&self, v: Var) -> Arr {
        self.nodes.borrow()[v.0].value.clone()
    }

    /// Runs `f` against a node's value without cloning it.
    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Arr) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Value of a `(1, 1)` node as a scalar.
    pub fn scalar(&self, v: Var) -> f64 {
        let nodes = self.nodes.borrow();
        let val = &nodes[v.0].value;
        assert_eq!(val.len(), 1, "scalar() on non-scalar node");
        val.iter().next().copied().unwrap()
    }

    // ---- elementwise ----

    pub fn add(&self, a: Var, b: Var) -> Var {
        let nodes = self.nodes.borrow();
        let value = &nodes[a.0].value + &nodes[b.0].value;
        drop(nodes);
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|g, _, _| vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let nodes = self.nodes.borrow();
        let value = &nodes[a.0].value - &nodes[b.0].value;
        drop(nodes);
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|g, _, _| vec![g.clone(), g.mapv(|x| -x)])),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let nodes = self.nodes.borrow();
        let value = &nodes[a.0].value * &nodes[b.0].value;
        drop(nodes);
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|g, _, ps| vec![g * ps[1], g * ps[0]])),
        )
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        let value = self.nodes.borrow()[a.0].value.mapv(|x| x * k);
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, _, _| vec![g.mapv(|x| x * k)])),
        )
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn relu(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.mapv(|x| x.max(0.0));
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|g, _, ps| {
                vec![g * &ps[0].mapv(|x| if x > 0.0 { 1.0 } else { 0.0 })]
            })),
        )
    }

    pub fn tanh(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.mapv(f64::tanh);
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|g, out, _| vec![g * &out.mapv(|y| 1.0 - y * y)])),
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|g, out, _| {
                vec![g * &out.mapv(|y| y * (1.0 - y))]
            })),
        )
    }

    pub fn exp(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.mapv(f64::exp);
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|g, out, _| vec![g * out])),
        )
    }

    // ---- linear algebra ----

    /// `(n, m) x (m, p)` matrix product.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let nodes = self.nodes.borrow();
        let value = to_dyn2(as2(&nodes[a.0].value).dot(&as2(&nodes[b.0].value)));
        drop(nodes);
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|g, _, ps| {
                let g2 = as2(g);
                let a2 = as2(ps[0]);
                let b2 = as2(ps[1]);
                vec![to_dyn2(g2.dot(&b2.t())), to_dyn2(a2.t().dot(&g2))]
            })),
        )
    }

    /// Adds a `(m,)` bias row-wise to a `(n, m)` matrix.
    pub fn add_row(&self, x: Var, b: Var) -> Var {
        let nodes = self.nodes.borrow();
        let x2 = as2(&nodes[x.0].value);
        let b1 = nodes[b.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("bias must be 1-d");
        let value = to_dyn2(&x2 + &b1);
        drop(nodes);
        self.push(
            value,
            vec![x.0, b.0],
            Some(Box::new(|g, _, _| {
                let g2 = as2(g);
                vec![g.clone(), g2.sum_axis(Axis(0)).into_dyn()]
            })),
        )
    }

    /// Dense layer: `x @ w + b`.
    pub fn dense(&self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    // ---- shape ----

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let nodes = self.nodes.borrow();
        let old_shape: Vec<usize> = nodes[a.0].value.shape().to_vec();
        let value = nodes[a.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        drop(nodes);
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, _, _| {
                vec![g
                    .clone()
                    .into_shape_with_order(IxDyn(&old_shape))
                    .expect("reshape backward")]
            })),
        )
    }

    /// Flattens to a single `(1, numel)` row.
    pub fn flatten_row(&self, a: Var) -> Var {
        let n = self.nodes.borrow()[a.0].value.len();
        self.reshape(a, &[1, n])
    }

    pub fn concat_cols(&self, a: Var, b: Var) -> Var {
        let nodes = self.nodes.borrow();
        let a2 = as2(&nodes[a.0].value);
        let b2 = as2(&nodes[b.0].value);
        let p = a2.ncols();
        let value = to_dyn2(
            ndarray::concatenate(Axis(1), &[a2, b2]).expect("concat_cols: row mismatch"),
        );
        drop(nodes);
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(move |g, _, _| {
                let g2 = as2(g);
                vec![
                    g2.slice(ndarray::s![.., ..p]).to_owned().into_dyn(),
                    g2.slice(ndarray::s![.., p..]).to_owned().into_dyn(),
                ]
            })),
        )
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let nodes = self.nodes.borrow();
        let a2 = as2(&nodes[a.0].value);
        let value = a2
            .slice(ndarray::s![.., start..start + len])
            .to_owned()
            .into_dyn();
        drop(nodes);
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, _, ps| {
                let mut gx = Array2::<f64>::zeros(as2(ps[0]).raw_dim());
                gx.slice_mut(ndarray::s![.., start..start + len])
                    .assign(&as2(g));
                vec![gx.into_dyn()]
            })),
        )
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Var {
        let nodes = self.nodes.borrow();
        let a2 = as2(&nodes[a.0].value);
        let value = a2
            .slice(ndarray::s![start..start + len, ..])
            .to_owned()
            .into_dyn();
        drop(nodes);
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, _, ps| {
                let mut gx = Array2::<f64>::zeros(as2(ps[0]).raw_dim());
                gx.slice_mut(ndarray::s![start..start + len, ..])
                    .assign(&as2(g));
                vec![gx.into_dyn()]
            })),
        )
    }

    /// Stacks `(1, m)` rows into a `(n, m)` matrix.
    pub fn stack_rows(&self, rows: &[Var]) -> Var {
        assert!(!rows.is_empty());
        let nodes = self.nodes.borrow();
        let views: Vec<ArrayView2<f64>> = rows.iter().map(|v| as2(&nodes[v.0].value)).collect();
        let value = to_dyn2(ndarray::concatenate(Axis(0), &views).expect("stack_rows"));
        drop(nodes);
        let parents: Vec<usize> = rows.iter().map(|v| v.0).collect();
        self.push(
            value,
            parents,
            Some(Box::new(|g, _, ps| {
                let g2 = as2(g);
                let mut out = Vec::with_capacity(ps.len());
                let mut row = 0;
                for p in ps {
                    let r = as2(p).nrows();
                    out.push(g2.slice(ndarray::s![row..row + r, ..]).to_owned().into_dyn());
                    row += r;
                }
                out
            })),
        )
    }

    /// Broadcasts a `(1, m)` row to `(n, m)`.
    pub fn broadcast_rows(&self, a: Var, n: usize) -> Var {
        let nodes = self.nodes.borrow();
        let a2 = as2(&nodes[a.0].value);
        assert_eq!(a2.nrows(), 1, "broadcast_rows expects a single row");
        let m = a2.ncols();
        let mut value = Array2::<f64>::zeros((n, m));
        for mut row in value.rows_mut() {
            row.assign(&a2.row(0));
        }
        drop(nodes);
        self.push(
            value.into_dyn(),
            vec![a.0],
            Some(Box::new(|g, _, _| {
                let s = as2(g).sum_axis(Axis(0));
                vec![s.insert_axis(Axis(0)).into_dyn()]
            })),
        )
    }

    /// Repeats each row `factor` times: row `i` of the output is row
    /// `i / factor` of the input.
    pub fn upsample_rows(&self, a: Var, factor: usize) -> Var {
        assert!(factor >= 1);
        let nodes = self.nodes.borrow();
        let a2 = as2(&nodes[a.0].value);
        let (n, m) = a2.dim();
        let mut value = Array2::<f64>::zeros((n * factor, m));
        for i in 0..n * factor {
            value.row_mut(i).assign(&a2.row(i / factor));
        }
        drop(nodes);
        self.push(
            value.into_dyn(),
            vec![a.0],
            Some(Box::new(move |g, _, _| {
                let g2 = as2(g);
                let m = g2.ncols();
                let n = g2.nrows() / factor;
                let mut gx = Array2::<f64>::zeros((n, m));
                for i in 0..g2.nrows() {
                    let mut row = gx.row_mut(i / factor);
                    row += &g2.row(i);
                }
                vec![gx.into_dyn()]
            })),
        )
    }

    // ---- reductions ----

    /// Mean over rows: `(n, m)` to `(1, m)`.
    pub fn mean_rows(&self, a: Var) -> Var {
        let nodes = self.nodes.borrow();
        let a2 = as2(&nodes[a.0].value);
        let n = a2.nrows();
        let value = (a2.sum_axis(Axis(0)) / n as f64)
            .insert_axis(Axis(0))
            .into_dyn();
        drop(nodes);
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, _, _| {
                let g2 = as2(g);
                let m = g2.ncols();
                let mut gx = Array2::<f64>::zeros((n, m));
                for mut row in gx.rows_mut() {
                    row.assign(&(&g2.row(0) / n as f64));
                }
                vec![gx.into_dyn()]
            })),
        )
    }

    /// Mean of all entries, producing a `(1, 1)` scalar node.
    pub fn mean_all(&self, a: Var) -> Var {
        let nodes = self.nodes.borrow();
        let n = nodes[a.0].value.len();
        let value = Array2::from_elem((1, 1), nodes[a.0].value.sum() / n as f64).into_dyn();
        drop(nodes);
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, _, ps| {
                let gs = g.iter().next().copied().unwrap() / n as f64;
                vec![Arr::from_elem(ps[0].raw_dim(), gs)]
            })),
        )
    }

    /// Sum of all entries, producing a `(1, 1)` scalar node.
    pub fn sum_all(&self, a: Var) -> Var {
        let nodes = self.nodes.borrow();
        let value = Array2::from_elem((1, 1), nodes[a.0].value.sum()).into_dyn();
        drop(nodes);
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|g, _, ps| {
                let gs = g.iter().next().copied().unwrap();
                vec![Arr::from_elem(ps[0].raw_dim(), gs)]
            })),
        )
    }

    /// Spatial mean of a `(t, c, h, w)` tensor to `(t, c)`.
    pub fn spatial_mean(&self, a: Var) -> Var {
        let nodes = self.nodes.borrow();
        let v = &nodes[a.0].value;
        let (t, c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]);
        let mut value = Array2::<f64>::zeros((t, c));
        for ti in 0..t {
            for ci in 0..c {
                let mut s = 0.0;
                for hi in 0..h {
                    for wi in 0..w {
                        s += v[[ti, ci, hi, wi]];
                    }
                }
                value[[ti, ci]] = s / (h * w) as f64;
            }
        }
        drop(nodes);
        self.push(
            value.into_dyn(),
            vec![a.0],
            Some(Box::new(move |g, _, _| {
                let g2 = as2(g);
                let mut gx = ArrayD::<f64>::zeros(IxDyn(&[t, c, h, w]));
                let scale = 1.0 / (h * w) as f64;
                for ti in 0..t {
                    for ci in 0..c {
                        let gv = g2[[ti, ci]] * scale;
                        for hi in 0..h {
                            for wi in 0..w {
                                gx[[ti, ci, hi, wi]] = gv;
                            }
                        }
                    }
                }
                vec![gx]
            })),
        )
    }

    // ---- softmax family ----

    /// Row-wise log-softmax of a `(n, k)` matrix.
    pub fn log_softmax(&self, a: Var) -> Var {
        let nodes = self.nodes.borrow();
        let a2 = as2(&nodes[a.0].value);
        let mut value = a2.to_owned();
        for mut row in value.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            row.mapv_inplace(|x| x - lse);
        }
        drop(nodes);
        self.push(
            value.into_dyn(),
            vec![a.0],
            Some(Box::new(|g, out, _| {
                let g2 = as2(g);
                let y2 = as2(out);
                let mut gx = g2.to_owned();
                for (mut grow, yrow) in gx.rows_mut().into_iter().zip(y2.rows()) {
                    let gsum: f64 = grow.sum();
                    grow.zip_mut_with(&yrow, |gi, &yi| *gi -= yi.exp() * gsum);
                }
                vec![gx.into_dyn()]
            })),
        )
    }

    // ---- gradient-flow control ----

    /// Identity in the forward pass; negates the gradient flowing upstream.
    pub fn grad_reverse(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.clone();
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|g, _, _| vec![g.mapv(|x| -x)])),
        )
    }

    /// Identity in the forward pass; stops gradients entirely.
    pub fn detach(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.clone();
        self.push(value, vec![], None)
    }

    // ---- convolution ----

    /// 3-d convolution over a `(t, cin, h, w)` input with replicate padding in
    /// time, zero padding in space, and spatial stride `spec.stride`.
    pub fn conv3d(&self, x: Var, w: Var, b: Var, spec: Conv3dSpec) -> Var {
        let nodes = self.nodes.borrow();
        let cols = im2col(&nodes[x.0].value, &spec);
        let value = conv3d_forward(&nodes[x.0].value, &cols, &nodes[w.0].value, &nodes[b.0].value, &spec);
        drop(nodes);
        let cols = Arc::new(cols);
        self.push(
            value,
            vec![x.0, w.0, b.0],
            Some(Box::new(move |g, _, ps| {
                let (gx, gw, gb) = conv3d_backward(g, &cols, ps[0], ps[1], &spec);
                vec![gx, gw, gb]
            })),
        )
    }

    // ---- composite losses ----

    /// Mean squared error between `pred` and `target` as a `(1, 1)` node.
    pub fn mse(&self, pred: Var, target: Var) -> Var {
        let d = self.sub(pred, target);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    /// Mean of several `(1, 1)` scalar nodes.
    pub fn mean_scalars(&self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty());
        let mut acc = vars[0];
        for v in &vars[1..] {
            acc = self.add(acc, *v);
        }
        self.scale(acc, 1.0 / vars.len() as f64)
    }

    // ---- backward ----

    /// Backpropagates from `loss` (any shape; seeded with ones) and returns
    /// gradients for every node that influenced it.
    pub fn backward(&self, loss: Var) -> Grads {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Arr>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Arr::ones(nodes[loss.0].value.raw_dim()));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(back) = &node.back {
                let parent_vals: Vec<&Arr> =
                    node.parents.iter().map(|&p| &nodes[p].value).collect();
                let pgrads = back(&g, &node.value, &parent_vals);
                debug_assert_eq!(pgrads.len(), node.parents.len());
                for (&p, pg) in node.parents.iter().zip(pgrads) {
                    match &mut grads[p] {
                        Some(acc) => *acc += &pg,
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            grads[id] = Some(g);
        }
        Grads { grads }
    }
}

/// Registers each array as a tape input, preserving order.
pub fn register_all(tape: &Tape, params: &[&Arr]) -> Vec<Var> {
    params.iter().map(|p| tape.input((*p).clone())).collect()
}

/// One LSTM step. `x` is `(1, in)`, state is `((1, h), (1, h))`; weights are
/// `w_ih: (in, 4h)`, `w_hh: (h, 4h)`, `bias: (4h,)` with gate order
/// input, forget, cell, output.
pub fn lstm_step(
    tape: &Tape,
    x: Var,
    state: (Var, Var),
    w_ih: Var,
    w_hh: Var,
    bias: Var,
    hidden: usize,
) -> (Var, Var) {
    let (h_prev, c_prev) = state;
    let zx = tape.matmul(x, w_ih);
    let zh = tape.matmul(h_prev, w_hh);
    let z = tape.add_row(tape.add(zx, zh), bias);
    let i = tape.sigmoid(tape.slice_cols(z, 0, hidden));
    let f = tape.sigmoid(tape.slice_cols(z, hidden, hidden));
    let g = tape.tanh(tape.slice_cols(z, 2 * hidden, hidden));
    let o = tape.sigmoid(tape.slice_cols(z, 3 * hidden, hidden));
    let c = tape.add(tape.mul(f, c_prev), tape.mul(i, g));
    let h = tape.mul(o, tape.tanh(c));
    (h, c)
}

/// Runs an LSTM over the rows of `xs` (`(t, in)`), returning `(t, h)` hidden
/// states. Initial state is zero.
pub fn lstm_sequence(
    tape: &Tape,
    xs: Var,
    w_ih: Var,
    w_hh: Var,
    bias: Var,
    hidden: usize,
) -> Var {
    let t = tape.shape(xs)[0];
    let zeros = tape.input(Array2::<f64>::zeros((1, hidden)).into_dyn());
    let mut state = (zeros, zeros);
    let mut hs = Vec::with_capacity(t);
    for ti in 0..t {
        let x = tape.slice_rows(xs, ti, 1);
        state = lstm_step(tape, x, state, w_ih, w_hh, bias, hidden);
        hs.push(state.0);
    }
    tape.stack_rows(&hs)
}

/// Central finite difference `(f(x+h) - f(x-h)) / 2h`.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, x0: f64, h: f64) -> f64 {
    (f(x0 + h) - f(x0 - h)) / (2.0 * h)
}

/// Relative error between an analytic and a reference derivative, guarded
/// against tiny denominators.
pub fn rel_err(analytic: f64, reference: f64) -> f64 {
    let denom = analytic.abs().max(reference.abs()).max(1e-8);
    (analytic - reference).abs() / denom
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn2(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Arr {
        Array2::from_shape_fn((r, c), |_| rng.random::<f64>() * 2.0 - 1.0).into_dyn()
    }

    /// Checks tape gradients of `build` against central differences for every
    /// coordinate of every parameter in `params`.
    fn check_grads(params: &[Arr], build: impl Fn(&Tape, &[Var]) -> Var, tol: f64) {
        let tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.input(p.clone())).collect();
        let loss = build(&tape, &vars);
        let grads = tape.backward(loss);
        for (pi, p) in params.iter().enumerate() {
            let g = grads.get_or_zeros(vars[pi], p.shape());
            for idx in 0..p.len() {
                let fd = central_diff(
                    |x| {
                        let mut pp: Vec<Arr> = params.to_vec();
                        pp[pi].as_slice_mut().unwrap()[idx] = x;
                        let t2 = Tape::new();
                        let vs: Vec<Var> = pp.iter().map(|p| t2.input(p.clone())).collect();
                        t2.scalar(build(&t2, &vs))
                    },
                    p.as_slice().unwrap()[idx],
                    1e-5,
                );
                let an = g.as_slice().unwrap()[idx];
                assert!(
                    rel_err(an, fd) < tol,
                    "param {pi} idx {idx}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn matmul_dense_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = vec![randn2(3, 4, &mut rng), randn2(4, 2, &mut rng)];
        check_grads(
            &params,
            |t, vs| {
                let y = t.matmul(vs[0], vs[1]);
                let y = t.tanh(y);
                t.mean_all(y)
            },
            1e-6,
        );
    }

    #[test]
    fn elementwise_and_reduction_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = vec![randn2(2, 5, &mut rng), randn2(2, 5, &mut rng)];
        check_grads(
            &params,
            |t, vs| {
                let p = t.mul(vs[0], vs[1]);
                let s = t.sigmoid(p);
                let e = t.exp(t.scale(s, 0.3));
                t.sum_all(e)
            },
            1e-6,
        );
    }

    #[test]
    fn softmax_slice_concat_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = vec![randn2(2, 3, &mut rng), randn2(2, 3, &mut rng)];
        check_grads(
            &params,
            |t, vs| {
                let cat = t.concat_cols(vs[0], vs[1]);
                let lsm = t.log_softmax(cat);
                let part = t.slice_cols(lsm, 1, 4);
                let pooled = t.mean_rows(part);
                t.mean_all(pooled)
            },
            1e-6,
        );
    }

    #[test]
    fn lstm_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let hidden = 3;
        let params = vec![
            randn2(4, 5, &mut rng),                                   // xs (t=4, in=5)
            randn2(5, 4 * hidden, &mut rng).mapv(|x| x * 0.5),        // w_ih
            randn2(hidden, 4 * hidden, &mut rng).mapv(|x| x * 0.5),   // w_hh
            ndarray::Array1::from_shape_fn(4 * hidden, |_| rng.random::<f64>() - 0.5).into_dyn(),
        ];
        check_grads(
            &params,
            |t, vs| {
                let hs = lstm_sequence(t, vs[0], vs[1], vs[2], vs[3], hidden);
                let sq = t.mul(hs, hs);
                t.mean_all(sq)
            },
            1e-5,
        );
    }

    #[test]
    fn upsample_broadcast_stack_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = vec![randn2(3, 2, &mut rng), randn2(1, 2, &mut rng)];
        check_grads(
            &params,
            |t, vs| {
                let up = t.upsample_rows(vs[0], 2);
                let bc = t.broadcast_rows(vs[1], 6);
                let cat = t.concat_cols(up, bc);
                let r0 = t.slice_rows(cat, 0, 1);
                let r1 = t.slice_rows(cat, 3, 1);
                let st = t.stack_rows(&[r0, r1]);
                let f = t.flatten_row(st);
                let sq = t.mul(f, f);
                t.mean_all(sq)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_reverse_negates_and_detach_stops() {
        let x0 = arr2(&[[0.7, -0.3]]).into_dyn();

        let tape = Tape::new();
        let x = tape.input(x0.clone());
        let plain = tape.mean_all(tape.mul(x, x));
        let g_plain = tape.backward(plain).get(x).unwrap().clone();

        let tape2 = Tape::new();
        let x2 = tape2.input(x0.clone());
        let rev = tape2.grad_reverse(x2);
        assert_eq!(tape2.value(rev), x0, "grad_reverse must be identity forward");
        let loss = tape2.mean_all(tape2.mul(rev, rev));
        let g_rev = tape2.backward(loss).get(x2).unwrap().clone();
        assert_eq!(g_rev, g_plain.mapv(|v| -v));

        let tape3 = Tape::new();
        let x3 = tape3.input(x0.clone());
        let det = tape3.detach(x3);
        assert_eq!(tape3.value(det), x0, "detach must be identity forward");
        let loss3 = tape3.mean_all(tape3.mul(det, det));
        assert!(tape3.backward(loss3).get(x3).is_none());
    }

    #[test]
    fn upsample_then_decimate_recovers_input() {
        let tape = Tape::new();
        let x = tape.input(arr2(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).into_dyn());
        let up = tape.upsample_rows(x, 4);
        let v = tape.value(up);
        let v2 = as2(&v);
        assert_eq!(v2.nrows(), 12);
        for i in 0..3 {
            for j in 0..4 {
                assert_eq!(v2.row(4 * i + j), as2(&tape.value(x)).row(i));
            }
        }
    }
}
