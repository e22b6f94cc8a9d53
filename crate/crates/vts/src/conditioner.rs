//! Speaker conditioning: a learned per-identity table (SI), a linear
//! projection of an external 512-dim embedding (SE), or the same projection
//! after per-dimension standardization against training-set statistics
//! (SE-norm). The resulting 32-dim vector is broadcast-concatenated onto the
//! upsampled visual features.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{self, Arr, Tape, Var};
use crate::synthdata::{SpeakerDescriptor, EMBED_DIM};

/// Width of the conditioning vector (same for SI and SE so parameter counts
/// stay comparable).
pub const COND_DIM: usize = 32;

/// Variance floor guarding constant embedding dimensions.
pub const STANDARDIZE_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum ConditionError {
    #[error("conditioning mode {mode:?} is incompatible with the given speaker descriptor")]
    ModeMismatch { mode: ConditioningMode },
    #[error("identity index {index} out of range (table has {n} speakers)")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("embedding dimension {got} != {EMBED_DIM}")]
    BadEmbeddingDim { got: usize },
    #[error("SE-norm requires standardization statistics computed at training start")]
    MissingStats,
    #[error("mean embedding of an empty set")]
    EmptySet,
}

/// Which conditioning pathway a model was trained with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConditioningMode {
    /// Learned table row per discrete training identity.
    SpeakerId,
    /// Linear projection of the raw 512-dim embedding.
    Embedding,
    /// Standardize the embedding per dimension, then project.
    EmbeddingNorm,
}

/// Learned speaker-identity table (SI mode).
#[derive(Clone, Serialize, Deserialize)]
pub struct SpeakerTable {
    pub table: Arr, // (n_speakers, COND_DIM)
}

impl SpeakerTable {
    pub fn init(n_speakers: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            table: nn::randn(&[n_speakers, COND_DIM], 0.1, rng),
        }
    }

    pub fn n_speakers(&self) -> usize {
        self.table.shape()[0]
    }
}

/// Per-dimension statistics of the training-set embeddings, frozen at
/// training start.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmbedStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

impl EmbedStats {
    /// Computes per-dimension mean and variance over training embeddings.
    pub fn fit(embeddings: &[ArrayView1<f64>]) -> Result<Self, ConditionError> {
        if embeddings.is_empty() {
            return Err(ConditionError::EmptySet);
        }
        let d = embeddings[0].len();
        let n = embeddings.len() as f64;
        let mut mean = Array1::<f64>::zeros(d);
        for e in embeddings {
            mean += e;
        }
        mean /= n;
        let mut var = Array1::<f64>::zeros(d);
        for e in embeddings {
            for (j, &v) in e.iter().enumerate() {
                var[j] += (v - mean[j]).powi(2);
            }
        }
        var /= n;
        Ok(Self { mean, var })
    }

    pub fn standardize(&self, e: &ArrayView1<f64>) -> Array1<f64> {
        let mut z = e.to_owned();
        z -= &self.mean;
        z.zip_mut_with(&self.var, |v, &s| *v /= (s + STANDARDIZE_EPS).sqrt());
        z
    }
}

/// Bias-free linear map 512 -> 32, with optional standardization statistics
/// (present exactly when the model runs in SE-norm mode).
#[derive(Clone, Serialize, Deserialize)]
pub struct EmbeddingProjector {
    pub w: Arr, // (EMBED_DIM, COND_DIM)
    pub stats: Option<EmbedStats>,
}

impl EmbeddingProjector {
    pub fn init(rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: nn::randn_scaled(&[EMBED_DIM, COND_DIM], EMBED_DIM, rng),
            stats: None,
        }
    }
}

/// Parameters for whichever conditioning mode is active.
#[derive(Clone, Serialize, Deserialize)]
pub enum ConditionerParams {
    Table(SpeakerTable),
    Projector(EmbeddingProjector),
}

impl ConditionerParams {
    pub fn params(&self) -> Vec<&Arr> {
        match self {
            Self::Table(t) => vec![&t.table],
            Self::Projector(p) => vec![&p.w],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Arr> {
        match self {
            Self::Table(t) => vec![&mut t.table],
            Self::Projector(p) => vec![&mut p.w],
        }
    }
}

/// Computes the 32-dim conditioning vector for a speaker descriptor under
/// the given mode. Mismatched mode/descriptor combinations are errors, never
/// silent coercions.
pub fn condition_vector(
    desc: &SpeakerDescriptor,
    mode: ConditioningMode,
    params: &ConditionerParams,
) -> Result<Array1<f64>, ConditionError> {
    match (mode, desc, params) {
        (ConditioningMode::SpeakerId, SpeakerDescriptor::Identity(idx), ConditionerParams::Table(t)) => {
            if *idx >= t.n_speakers() {
                return Err(ConditionError::IndexOutOfRange {
                    index: *idx,
                    n: t.n_speakers(),
                });
            }
            Ok(nn::as2(&t.table).row(*idx).to_owned())
        }
        (ConditioningMode::Embedding, SpeakerDescriptor::Embedding(e), ConditionerParams::Projector(p)) => {
            if e.len() != EMBED_DIM {
                return Err(ConditionError::BadEmbeddingDim { got: e.len() });
            }
            Ok(e.dot(&nn::as2(&p.w)))
        }
        (
            ConditioningMode::EmbeddingNorm,
            SpeakerDescriptor::Embedding(e),
            ConditionerParams::Projector(p),
        ) => {
            if e.len() != EMBED_DIM {
                return Err(ConditionError::BadEmbeddingDim { got: e.len() });
            }
            let stats = p.stats.as_ref().ok_or(ConditionError::MissingStats)?;
            Ok(stats.standardize(&e.view()).dot(&nn::as2(&p.w)))
        }
        (mode, _, _) => Err(ConditionError::ModeMismatch { mode }),
    }
}

/// Graph version: returns a `(1, COND_DIM)` node. For embedding modes the
/// (possibly standardized) embedding enters as a constant and the projection
/// weight is the learned parameter.
pub fn condition_vector_graph(
    tape: &Tape,
    mode: ConditioningMode,
    param_var: Var,
    desc: &SpeakerDescriptor,
    stats: Option<&EmbedStats>,
) -> Result<Var, ConditionError> {
    match (mode, desc) {
        (ConditioningMode::SpeakerId, SpeakerDescriptor::Identity(idx)) => {
            let n = tape.shape(param_var)[0];
            if *idx >= n {
                return Err(ConditionError::IndexOutOfRange { index: *idx, n });
            }
            Ok(tape.slice_rows(param_var, *idx, 1))
        }
        (ConditioningMode::Embedding, SpeakerDescriptor::Embedding(e)) => {
            let ev = tape.input(e.to_owned().insert_axis(Axis(0)).into_dyn());
            Ok(tape.matmul(ev, param_var))
        }
        (ConditioningMode::EmbeddingNorm, SpeakerDescriptor::Embedding(e)) => {
            let stats = stats.ok_or(ConditionError::MissingStats)?;
            let z = stats.standardize(&e.view());
            let ev = tape.input(z.insert_axis(Axis(0)).into_dyn());
            Ok(tape.matmul(ev, param_var))
        }
        (mode, _) => Err(ConditionError::ModeMismatch { mode }),
    }
}

/// Broadcasts the conditioning vector to every frame and concatenates it to
/// the upsampled visual features: `(f, d_v)` + `(COND_DIM,)` -> `(f, d_v + COND_DIM)`.
pub fn concat_condition(upsampled: &Array2<f64>, cond: &ArrayView1<f64>) -> Array2<f64> {
    let (f, d) = upsampled.dim();
    let mut out = Array2::zeros((f, d + cond.len()));
    out.slice_mut(ndarray::s![.., ..d]).assign(upsampled);
    for mut row in out.slice_mut(ndarray::s![.., d..]).rows_mut() {
        row.assign(cond);
    }
    out
}

/// Graph version of [`concat_condition`].
pub fn concat_condition_graph(tape: &Tape, upsampled: Var, cond: Var) -> Var {
    let f = tape.shape(upsampled)[0];
    let bc = tape.broadcast_rows(cond, f);
    tape.concat_cols(upsampled, bc)
}

/// Arithmetic mean of a set of 512-dim embeddings.
pub fn mean_embedding<'a, I>(descriptors: I) -> Result<Array1<f64>, ConditionError>
where
    I: IntoIterator<Item = &'a Array1<f64>>,
{
    let mut acc: Option<Array1<f64>> = None;
    let mut n = 0usize;
    for e in descriptors {
        if e.len() != EMBED_DIM {
            return Err(ConditionError::BadEmbeddingDim { got: e.len() });
        }
        match &mut acc {
            Some(a) => *a += e,
            None => acc = Some(e.clone()),
        }
        n += 1;
    }
    match acc {
        Some(a) => Ok(a / n as f64),
        None => Err(ConditionError::EmptySet),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use rand::Rng;
    use rand::SeedableRng;

    fn emb(seed: u64) -> Array1<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array1::from_shape_fn(EMBED_DIM, |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn table_lookup_and_range_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let table = SpeakerTable::init(4, &mut rng);
        let params = ConditionerParams::Table(table.clone());
        let v = condition_vector(
            &SpeakerDescriptor::Identity(2),
            ConditioningMode::SpeakerId,
            &params,
        )
        .unwrap();
        assert_eq!(v, nn::as2(&table.table).row(2).to_owned());
        assert!(matches!(
            condition_vector(
                &SpeakerDescriptor::Identity(4),
                ConditioningMode::SpeakerId,
                &params
            ),
            Err(ConditionError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn zero_projection_gives_zero_vector_and_linearity_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let mut proj = EmbeddingProjector::init(&mut rng);
        let params_rand = ConditionerParams::Projector(proj.clone());

        let a = emb(1);
        let b = emb(2);
        let va = condition_vector(
            &SpeakerDescriptor::Embedding(a.clone()),
            ConditioningMode::Embedding,
            &params_rand,
        )
        .unwrap();
        let vb = condition_vector(
            &SpeakerDescriptor::Embedding(b.clone()),
            ConditioningMode::Embedding,
            &params_rand,
        )
        .unwrap();
        let vab = condition_vector(
            &SpeakerDescriptor::Embedding(&a + &b),
            ConditioningMode::Embedding,
            &params_rand,
        )
        .unwrap();
        for i in 0..COND_DIM {
            assert!((vab[i] - va[i] - vb[i]).abs() < 1e-10, "projection linearity");
        }

        proj.w.fill(0.0);
        let params_zero = ConditionerParams::Projector(proj);
        let v = condition_vector(
            &SpeakerDescriptor::Embedding(a),
            ConditioningMode::Embedding,
            &params_zero,
        )
        .unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn standardization_zeroes_mean_and_unit_variance_on_training_set() {
        let embs: Vec<Array1<f64>> = (0..40).map(emb).collect();
        let views: Vec<_> = embs.iter().map(|e| e.view()).collect();
        let stats = EmbedStats::fit(&views).unwrap();
        let standardized: Vec<Array1<f64>> =
            embs.iter().map(|e| stats.standardize(&e.view())).collect();
        // oracle: recompute stats over the standardized set
        let d = EMBED_DIM;
        let n = standardized.len() as f64;
        for j in 0..d {
            let mean: f64 = standardized.iter().map(|e| e[j]).sum::<f64>() / n;
            let var: f64 = standardized.iter().map(|e| (e[j] - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-6, "dim {j}: mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "dim {j}: var {var}");
        }
    }

    #[test]
    fn se_norm_without_stats_and_mode_mismatch_are_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let proj = ConditionerParams::Projector(EmbeddingProjector::init(&mut rng));
        assert!(matches!(
            condition_vector(
                &SpeakerDescriptor::Embedding(emb(3)),
                ConditioningMode::EmbeddingNorm,
                &proj
            ),
            Err(ConditionError::MissingStats)
        ));
        assert!(matches!(
            condition_vector(
                &SpeakerDescriptor::Identity(0),
                ConditioningMode::Embedding,
                &proj
            ),
            Err(ConditionError::ModeMismatch { .. })
        ));
    }

    #[test]
    fn concat_broadcasts_and_preserves_features() {
        let ups = Array2::from_shape_fn((8, 64), |(i, j)| (i * 64 + j) as f64);
        let cond = Array1::from_shape_fn(COND_DIM, |i| i as f64 * 0.5);
        let out = concat_condition(&ups, &cond.view());
        assert_eq!(out.dim(), (8, 96));
        assert_eq!(out.slice(ndarray::s![.., ..64]), ups);
        for r in 0..8 {
            for c in 0..COND_DIM {
                assert_eq!(out[[r, 64 + c]], cond[c]);
            }
        }

        let zero = Array1::zeros(COND_DIM);
        let out = concat_condition(&ups, &zero.view());
        assert!(out.slice(ndarray::s![.., 64..]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mean_embedding_identities() {
        let e = emb(5);
        let m = mean_embedding([&e, &e]).unwrap();
        assert_eq!(m, e);
        let neg = e.mapv(|v| -v);
        let z = mean_embedding([&e, &neg]).unwrap();
        assert!(z.iter().all(|&v| v.abs() < 1e-15));
        assert!(matches!(
            mean_embedding(std::iter::empty::<&Array1<f64>>()),
            Err(ConditionError::EmptySet)
        ));
    }

    #[test]
    fn graph_and_pure_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let table = SpeakerTable::init(3, &mut rng);
        let tape = Tape::new();
        let tv = tape.input(table.table.clone());
        let v = condition_vector_graph(
            &tape,
            ConditioningMode::SpeakerId,
            tv,
            &SpeakerDescriptor::Identity(1),
            None,
        )
        .unwrap();
        let pure = condition_vector(
            &SpeakerDescriptor::Identity(1),
            ConditioningMode::SpeakerId,
            &ConditionerParams::Table(table),
        )
        .unwrap();
        assert_eq!(tape.value(v).as_slice().unwrap(), pure.as_slice().unwrap());
    }
}
