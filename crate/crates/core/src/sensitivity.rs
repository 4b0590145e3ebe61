//! First-order parameter sensitivity `|θ · ∂L/∂θ|` on seed samples, and per-layer totals.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::tinylm::{backward, ParamName, ParamStore, TokenBatch};

/// Nonnegative per-parameter scores congruent with a model's tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityMap {
    scores: ParamStore,
    sample_count: usize,
}

impl SensitivityMap {
    pub fn new(scores: ParamStore, sample_count: usize) -> Result<Self> {
        if sample_count == 0 {
            return Err(Error::InvalidInput("sensitivity map needs at least one sample".into()));
        }
        for (name, t) in scores.iter() {
            if t.as_slice().iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::InvalidInput(format!("sensitivity of `{name}` has a negative or non-finite entry")));
            }
        }
        Ok(Self { scores, sample_count })
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn scores(&self) -> &ParamStore {
        &self.scores
    }

    pub fn matrix(&self, name: &ParamName) -> Option<&DenseMatrix> {
        self.scores.get(name).and_then(|t| t.as_matrix())
    }

    /// Elementwise sum, with the sample counts added.
    pub fn combine(&self, other: &SensitivityMap) -> Result<SensitivityMap> {
        check_congruent(&self.scores, &other.scores)?;
        let mut out = self.scores.clone();
        for ((_, a), (_, b)) in out.iter_mut().zip(other.scores.iter()) {
            for (x, y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
                *x += y;
            }
        }
        Ok(SensitivityMap {
            scores: out,
            sample_count: self.sample_count + other.sample_count,
        })
    }

    /// True when every tensor has the same name and shape as in `model`.
    pub fn is_congruent_with(&self, model: &ParamStore) -> bool {
        check_congruent(&self.scores, model).is_ok()
    }
}

fn check_congruent(a: &ParamStore, b: &ParamStore) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape("maps have different tensor counts".into()));
    }
    for ((na, ta), (nb, tb)) in a.iter().zip(b.iter()) {
        if na != nb || ta.shape() != tb.shape() {
            return Err(Error::Shape(format!("tensor `{na}` does not line up with `{nb}`")));
        }
    }
    Ok(())
}

/// `|θᵢ · gᵢ|` for each entry.
pub fn elementwise_sensitivity(theta: &[f64], grad: &[f64]) -> Vec<f64> {
    theta.iter().zip(grad).map(|(t, g)| (t * g).abs()).collect()
}

/// Sensitivity of every parameter on a single sequence.
pub fn sample_sensitivity(model: &ParamStore, sample: &TokenBatch) -> Result<SensitivityMap> {
    if sample.len() != 1 {
        return Err(Error::InvalidInput(format!(
            "sample sensitivity takes exactly one sequence, got {}",
            sample.len()
        )));
    }
    let (_, mut grads) = backward(model, sample)?;
    for ((_, g), (_, theta)) in grads.iter_mut().zip(model.iter()) {
        for (gi, ti) in g.as_mut_slice().iter_mut().zip(theta.as_slice()) {
            *gi = (*gi * ti).abs();
        }
    }
    SensitivityMap::new(grads, 1)
}

/// Sum of per-sample sensitivities over `seeds`.
///
/// Samples are reduced in a canonical order (sorted by content), so any permutation of
/// the same seeds yields a bit-identical map.
pub fn accumulate_sensitivity(model: &ParamStore, seeds: &[TokenBatch]) -> Result<SensitivityMap> {
    if seeds.is_empty() {
        return Err(Error::InvalidInput("no seed samples".into()));
    }
    let mut order: Vec<&TokenBatch> = seeds.iter().collect();
    order.sort();
    let mut acc: Option<SensitivityMap> = None;
    for sample in order {
        let s = sample_sensitivity(model, sample)?;
        acc = Some(match acc {
            None => s,
            Some(a) => a.combine(&s)?,
        });
    }
    Ok(acc.expect("at least one seed"))
}

/// Per-layer sensitivity totals, indexed by teacher layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScores(pub Vec<f64>);

impl LayerScores {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Sums every entry (matrices and norm vectors) belonging to each block layer. Embeddings
/// and the output head belong to no layer and are left out.
pub fn layer_scores(map: &SensitivityMap) -> LayerScores {
    let mut scores = vec![0.0; map.scores.config().num_layers];
    for (name, t) in map.scores.iter() {
        if let Some(l) = name.layer {
            for v in t.as_slice() {
                scores[l] += v;
            }
        }
    }
    LayerScores(scores)
}
