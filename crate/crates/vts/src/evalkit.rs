//! Objective evaluation: mel-cepstral distortion, cosine-distance equal
//! error rate over synthesized/natural embedding pairs, and a speaker-probe
//! diagnostic measuring how much identity a frozen representation carries.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::synthdata::MelSpectrogram;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cosine distance of a zero-norm vector")]
    ZeroNorm,
    #[error("EER needs at least one positive and one negative pair")]
    SingleClass,
    #[error("no overlapping frames between reference and synthesis")]
    EmptyOverlap,
    #[error("impossible pair composition: {0}")]
    ImpossibleComposition(String),
    #[error("speaker probe needs at least 2 speakers")]
    FewerThanTwoSpeakers,
}

/// Cosine distance `1 - a.b / (|a||b|)`, in [0, 2].
pub fn cosine_distance(a: &ArrayView1<f64>, b: &ArrayView1<f64>) -> Result<f64, EvalError> {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na < 1e-300 || nb < 1e-300 {
        return Err(EvalError::ZeroNorm);
    }
    Ok(1.0 - a.dot(b) / (na * nb))
}

/// Mel-cepstral distortion between two log-mel spectrograms.
#[derive(Debug, Clone, Copy)]
pub struct Mcd {
    /// Distortion in dB, averaged over frames.
    pub db: f64,
    /// Frames actually compared.
    pub frames: usize,
    /// Whether the longer input was trimmed to match.
    pub trimmed: bool,
}

/// Number of cepstral coefficients compared (c_1..c_13; c_0 excluded).
pub const MCD_COEFFS: usize = 13;

fn dct_rows(frames: &Array2<f64>, n_coeffs: usize) -> Array2<f64> {
    let m = frames.ncols();
    let mut basis = Array2::<f64>::zeros((m, n_coeffs));
    for i in 1..=n_coeffs {
        for j in 0..m {
            basis[[j, i - 1]] =
                (std::f64::consts::PI * i as f64 * (2 * j + 1) as f64 / (2.0 * m as f64)).cos();
        }
    }
    frames.dot(&basis)
}

/// MCD over the overlapping frames: per frame, DCT-II cepstra `c_1..c_13` of
/// the log-mel vector, then `(10 / ln 10) * sqrt(2 * sum((c - c_hat)^2))`,
/// averaged over frames.
pub fn mcd(reference: &MelSpectrogram, synthesized: &MelSpectrogram) -> Result<Mcd, EvalError> {
    let f = reference.frames.nrows().min(synthesized.frames.nrows());
    if f == 0 {
        return Err(EvalError::EmptyOverlap);
    }
    let trimmed = reference.frames.nrows() != synthesized.frames.nrows();
    let n_coeffs = MCD_COEFFS.min(reference.frames.ncols().saturating_sub(1));
    let cr = dct_rows(&reference.frames.slice(ndarray::s![..f, ..]).to_owned(), n_coeffs);
    let cs = dct_rows(&synthesized.frames.slice(ndarray::s![..f, ..]).to_owned(), n_coeffs);
    let k = 10.0 / std::f64::consts::LN_10;
    let mut total = 0.0;
    for (r, s) in cr.rows().into_iter().zip(cs.rows()) {
        let d2: f64 = r.iter().zip(s.iter()).map(|(a, b)| (a - b).powi(2)).sum();
        total += k * (2.0 * d2).sqrt();
    }
    Ok(Mcd {
        db: total / f as f64,
        frames: f,
        trimmed,
    })
}

/// One scored trial: cosine distance between a synthesized and a natural
/// embedding, labeled by whether they share a speaker.
#[derive(Debug, Clone, Copy)]
pub struct ScoredPair {
    pub distance: f64,
    pub positive: bool,
}

/// Result of pair sampling.
pub struct PairSet {
    pub pairs: Vec<ScoredPair>,
    /// True when either class had fewer candidates than requested and was
    /// sampled with replacement.
    pub with_replacement: bool,
}

/// Samples `n_pairs` scored pairs between `(speaker, embedding)` lists, with
/// `round(n_pairs * pos_fraction)` positives. Sampling is without
/// replacement within each class when enough candidates exist.
pub fn build_pairs(
    synth: &[(usize, Array1<f64>)],
    natural: &[(usize, Array1<f64>)],
    n_pairs: usize,
    pos_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<PairSet, EvalError> {
    let mut pos_cand = Vec::new();
    let mut neg_cand = Vec::new();
    for (i, (ss, _)) in synth.iter().enumerate() {
        for (j, (ns, _)) in natural.iter().enumerate() {
            if ss == ns {
                pos_cand.push((i, j));
            } else {
                neg_cand.push((i, j));
            }
        }
    }
    let n_pos = (n_pairs as f64 * pos_fraction).round() as usize;
    let n_neg = n_pairs - n_pos;
    if (n_pos > 0 && pos_cand.is_empty()) || (n_neg > 0 && neg_cand.is_empty()) {
        return Err(EvalError::ImpossibleComposition(format!(
            "need {n_pos} positives ({} available) and {n_neg} negatives ({} available)",
            pos_cand.len(),
            neg_cand.len()
        )));
    }

    let mut with_replacement = false;
    let mut draw = |cands: &mut Vec<(usize, usize)>, n: usize, rng: &mut ChaCha8Rng| {
        let mut out = Vec::with_capacity(n);
        if cands.len() >= n {
            // partial Fisher-Yates
            for k in 0..n {
                let pick = k + rng.random_range(0..cands.len() - k);
                cands.swap(k, pick);
                out.push(cands[k]);
            }
        } else {
            with_replacement = true;
            for _ in 0..n {
                out.push(cands[rng.random_range(0..cands.len())]);
            }
        }
        out
    };

    let mut pairs = Vec::with_capacity(n_pairs);
    for (i, j) in draw(&mut pos_cand, n_pos, rng) {
        pairs.push(ScoredPair {
            distance: cosine_distance(&synth[i].1.view(), &natural[j].1.view())?,
            positive: true,
        });
    }
    for (i, j) in draw(&mut neg_cand, n_neg, rng) {
        pairs.push(ScoredPair {
            distance: cosine_distance(&synth[i].1.view(), &natural[j].1.view())?,
            positive: false,
        });
    }
    Ok(PairSet {
        pairs,
        with_replacement,
    })
}

fn split_classes(pairs: &[ScoredPair]) -> Result<(Vec<f64>, Vec<f64>), EvalError> {
    let mut pos: Vec<f64> = pairs.iter().filter(|p| p.positive).map(|p| p.distance).collect();
    let mut neg: Vec<f64> = pairs
        .iter()
        .filter(|p| !p.positive)
        .map(|p| p.distance)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(EvalError::SingleClass);
    }
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    Ok((pos, neg))
}

fn count_le(sorted: &[f64], x: f64) -> usize {
    sorted.partition_point(|&d| d <= x)
}

/// Equal error rate: accept a pair when its distance falls at or below a
/// threshold; sweep thresholds over the observed distances and linearly
/// interpolate the operating point where the false-acceptance rate equals
/// the false-rejection rate.
pub fn eer(pairs: &[ScoredPair]) -> Result<f64, EvalError> {
    let (pos, neg) = split_classes(pairs)?;
    let np = pos.len() as f64;
    let nn = neg.len() as f64;
    let mut thresholds: Vec<f64> = pos.iter().chain(neg.iter()).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    // below every distance: FAR = 0, FRR = 1
    let (mut f0, mut r0) = (0.0f64, 1.0f64);
    for &th in &thresholds {
        let f1 = count_le(&neg, th) as f64 / nn;
        let r1 = (pos.len() - count_le(&pos, th)) as f64 / np;
        if f1 >= r1 {
            if (f1 - r1).abs() < 1e-300 {
                return Ok(f1);
            }
            let denom = (f1 - f0) - (r1 - r0);
            if denom.abs() < 1e-300 {
                return Ok((f1.min(r0) + r1.max(f0)) / 2.0);
            }
            let t = (r0 - f0) / denom;
            return Ok(f0 + t * (f1 - f0));
        }
        (f0, r0) = (f1, r1);
    }
    // FAR reaches 1 with FRR 0 at the top; crossing must have occurred
    Ok(0.5)
}

/// Reference EER by exhaustive threshold enumeration: evaluates the error
/// rates at midpoints between every adjacent pair of distinct distances (plus
/// sentinels below and above), locating the crossing by direct counting.
/// Quadratic; kept as the independent check for [`eer`].
pub fn eer_threshold_sweep(pairs: &[ScoredPair]) -> Result<f64, EvalError> {
    let (pos, neg) = split_classes(pairs)?;
    let mut all: Vec<f64> = pos.iter().chain(neg.iter()).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let mut candidates = vec![all[0] - 1.0];
    for w in all.windows(2) {
        candidates.push(w[0]);
        candidates.push((w[0] + w[1]) / 2.0);
    }
    candidates.push(*all.last().unwrap());
    candidates.push(all.last().unwrap() + 1.0);

    let rates = |th: f64| {
        let far = neg.iter().filter(|&&d| d <= th).count() as f64 / neg.len() as f64;
        let frr = pos.iter().filter(|&&d| d > th).count() as f64 / pos.len() as f64;
        (far, frr)
    };
    let (mut f0, mut r0) = rates(candidates[0]);
    for &th in &candidates[1..] {
        let (f1, r1) = rates(th);
        if f1 >= r1 {
            if (f1 - r1).abs() < 1e-300 {
                return Ok(f1);
            }
            let denom = (f1 - f0) - (r1 - r0);
            if denom.abs() < 1e-300 {
                return Ok((f1.min(r0) + r1.max(f0)) / 2.0);
            }
            let t = (r0 - f0) / denom;
            return Ok(f0 + t * (f1 - f0));
        }
        (f0, r0) = (f1, r1);
    }
    Ok(0.5)
}

// ---- speaker probe ----

/// A freshly trained softmax-regression probe over frozen features.
pub struct LinearProbe {
    w: Array2<f64>,
    b: Array1<f64>,
    mean: Array1<f64>,
    std: Array1<f64>,
}

impl LinearProbe {
    fn standardize(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut z = x.clone();
        for mut row in z.rows_mut() {
            row.zip_mut_with(&self.mean, |v, &m| *v -= m);
            row.zip_mut_with(&self.std, |v, &s| *v /= s);
        }
        z
    }

    pub fn predict(&self, x: &Array2<f64>) -> Vec<usize> {
        let logits = self.standardize(x).dot(&self.w) + &self.b;
        logits
            .rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0
            })
            .collect()
    }

    pub fn accuracy(&self, x: &Array2<f64>, y: &[usize]) -> f64 {
        let pred = self.predict(x);
        pred.iter().zip(y).filter(|(p, t)| p == t).count() as f64 / y.len() as f64
    }
}

/// Fits a multinomial logistic-regression probe with full-batch gradient
/// descent. Zero initialization makes the fit deterministic (the objective is
/// convex), so identical features always give identical probes.
pub fn fit_linear_probe(x: &Array2<f64>, y: &[usize], n_classes: usize) -> LinearProbe {
    let (n, d) = x.dim();
    assert_eq!(n, y.len());
    let mean = x.sum_axis(Axis(0)) / n as f64;
    let mut std = Array1::<f64>::zeros(d);
    for row in x.rows() {
        for (j, &v) in row.iter().enumerate() {
            std[j] += (v - mean[j]).powi(2);
        }
    }
    std.mapv_inplace(|v| (v / n as f64).sqrt().max(1e-8));

    let mut probe = LinearProbe {
        w: Array2::zeros((d, n_classes)),
        b: Array1::zeros(n_classes),
        mean,
        std,
    };
    let z = probe.standardize(x);
    let lr = 0.5;
    let l2 = 1e-4;
    for _ in 0..300 {
        let logits = z.dot(&probe.w) + &probe.b;
        // softmax gradient: (p - onehot) / n
        let mut delta = logits;
        for (mut row, &label) in delta.rows_mut().into_iter().zip(y) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            row.mapv_inplace(|v| (v - lse).exp());
            row[label] -= 1.0;
        }
        delta /= n as f64;
        let gw = z.t().dot(&delta) + &(l2 * &probe.w);
        let gb = delta.sum_axis(Axis(0));
        probe.w.scaled_add(-lr, &gw);
        probe.b.scaled_add(-lr, &gb);
    }
    probe
}

/// Speaker-probe accuracy for a trained model: extracts frozen mean-pooled
/// visual features for both splits, fits a fresh linear probe on the train
/// clips, and reports held-out accuracy. Chance level is `1 / n_speakers`.
pub fn probe_accuracy(
    model: &crate::model::Model,
    corpus: &crate::synthdata::Corpus,
    train_idx: &[usize],
    val_idx: &[usize],
) -> Result<f64, EvalError> {
    if corpus.spec.n_speakers < 2 {
        return Err(EvalError::FewerThanTwoSpeakers);
    }
    let stack = |idx: &[usize]| {
        let videos: Vec<&ndarray::Array3<f64>> =
            idx.iter().map(|&i| &corpus.clips[i].video).collect();
        let feats = crate::model::pooled_features_batch(model, &videos);
        let d = feats[0].len();
        let mut x = Array2::zeros((feats.len(), d));
        for (mut row, f) in x.rows_mut().into_iter().zip(&feats) {
            row.assign(f);
        }
        let y: Vec<usize> = idx.iter().map(|&i| corpus.clips[i].speaker_id).collect();
        (x, y)
    };
    let (train_x, train_y) = stack(train_idx);
    let (val_x, val_y) = stack(val_idx);
    probe_accuracy_features(&train_x, &train_y, &val_x, &val_y, corpus.spec.n_speakers)
}

/// Trains a probe on `(train_x, train_y)` and reports accuracy on the
/// held-out split. Chance level is `1 / n_classes`.
pub fn probe_accuracy_features(
    train_x: &Array2<f64>,
    train_y: &[usize],
    test_x: &Array2<f64>,
    test_y: &[usize],
    n_classes: usize,
) -> Result<f64, EvalError> {
    if n_classes < 2 {
        return Err(EvalError::FewerThanTwoSpeakers);
    }
    let probe = fit_linear_probe(train_x, train_y, n_classes);
    Ok(probe.accuracy(test_x, test_y))
}
