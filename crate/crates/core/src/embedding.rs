//! Token embeddings, nearest-neighbour rounding, and the clipping threshold
//! derived from embedding geometry.
//!
//! The threshold is `σ_min = (1/δ² + 1)^(−1/2)`, where `δ²` is the mean
//! squared distance from each embedding to its nearest neighbour, divided by
//! the embedding dimension. Timesteps whose noise scale falls below `σ_min`
//! are not used for training.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::ClippedTimeSampler;
use crate::tensor::Matrix;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Ordered symbol list with the four reserved ids at the front.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from regular symbols; the specials are prepended.
    pub fn new<I, S>(symbols: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(symbols.into_iter().map(Into::into))
            .collect();
        Self::from_tokens(tokens)
    }

    /// Builds a vocabulary from a full token list that already starts with the specials.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Input(format!(
                    "vocabulary must start with {s} at id {i}"
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Learnable `V × D` token embedding matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    matrix: Matrix,
}

impl EmbeddingTable {
    pub fn new(matrix: Matrix) -> Self {
        Self { matrix }
    }

    /// I.i.d. standard normal entries scaled by `1/sqrt(D)`.
    pub fn random(vocab: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let scale = 1.0 / (dim as f64).sqrt();
        Self::gaussian(vocab, dim, scale, rng)
    }

    /// I.i.d. `N(0, scale²)` entries.
    pub fn gaussian(vocab: usize, dim: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let m = Matrix::from_fn(vocab, dim, |_, _| {
            let x: f64 = rng.sample(StandardNormal);
            x * scale
        });
        Self { matrix: m }
    }

    pub fn vocab_size(&self) -> usize {
        self.matrix.rows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn matrix_mut(&mut self) -> &mut Matrix {
        &mut self.matrix
    }

    /// `n × D` matrix whose row `i` is the embedding of `tokens[i]`.
    pub fn embed(&self, tokens: &[usize]) -> Result<Matrix> {
        let d = self.dim();
        let mut out = Matrix::zeros(tokens.len(), d);
        for (i, &id) in tokens.iter().enumerate() {
            if id >= self.vocab_size() {
                return Err(Error::TokenIndex {
                    id,
                    vocab: self.vocab_size(),
                });
            }
            out.row_mut(i).copy_from_slice(self.matrix.row(id));
        }
        Ok(out)
    }

    /// Maps each row of `z` to the nearest non-pad embedding; ties go to the
    /// lowest id.
    pub fn round_to_tokens(&self, z: &Matrix) -> Result<Vec<usize>> {
        if z.cols() != self.dim() {
            return Err(Error::Shape {
                expected: (z.rows(), self.dim()),
                got: z.shape(),
            });
        }
        Ok(z.iter_rows().map(|row| self.nearest(row, PAD)).collect())
    }

    fn nearest(&self, point: &[f64], skip: usize) -> usize {
        let mut best = usize::MAX;
        let mut best_d = f64::INFINITY;
        for (v, e) in self.matrix.iter_rows().enumerate() {
            if v == skip {
                continue;
            }
            let d = sq_dist(point, e);
            if d < best_d {
                best_d = d;
                best = v;
            }
        }
        best
    }

    /// True when any row holds NaN or infinity.
    pub fn has_non_finite(&self) -> bool {
        !self.matrix.is_finite()
    }

    /// Pairs of distinct non-pad ids whose rows coincide exactly.
    pub fn duplicate_rows(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.vocab_size() {
            for j in i + 1..self.vocab_size() {
                if i != PAD && j != PAD && self.matrix.row(i) == self.matrix.row(j) {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `δ² = (1 / (V′·D)) Σ_i min_{j≠i} ‖e_i − e_j‖²` over the `V′` rows not in `exclude`.
pub fn min_pairwise_delta_sq(table: &Matrix, exclude: &[usize]) -> Result<f64> {
    let keep: Vec<usize> = (0..table.rows()).filter(|i| !exclude.contains(i)).collect();
    if keep.len() < 2 {
        return Err(Error::Undefined(format!(
            "nearest-neighbour distance needs at least 2 rows, have {}",
            keep.len()
        )));
    }
    let mut nearest = vec![f64::INFINITY; keep.len()];
    for a in 0..keep.len() {
        let ea = table.row(keep[a]);
        for b in a + 1..keep.len() {
            let d = sq_dist(ea, table.row(keep[b]));
            if d < nearest[a] {
                nearest[a] = d;
            }
            if d < nearest[b] {
                nearest[b] = d;
            }
        }
    }
    let total: f64 = nearest.iter().sum();
    Ok(total / (keep.len() * table.cols()) as f64)
}

/// `σ_min = (1/δ² + 1)^(−1/2)`; `0` for `δ² = 0`.
pub fn sigma_min_from_delta_sq(delta_sq: f64) -> f64 {
    if delta_sq <= 0.0 {
        return 0.0;
    }
    if delta_sq.is_infinite() {
        return 1.0;
    }
    (1.0 / delta_sq + 1.0).powf(-0.5)
}

/// Snapshot of the clipping statistics at one training step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClippingEstimate {
    pub delta_sq: f64,
    pub sigma_min: f64,
    pub step_computed: u64,
}

impl ClippingEstimate {
    /// Computes `δ²` and `σ_min` over every non-pad row of `table`.
    pub fn compute(table: &EmbeddingTable, step: u64) -> Result<Self> {
        let delta_sq = min_pairwise_delta_sq(table.matrix(), &[PAD])?;
        if delta_sq == 0.0 {
            log::warn!("embedding rows collapsed (δ² = 0); clipping threshold is 0");
        }
        Ok(Self {
            delta_sq,
            sigma_min: sigma_min_from_delta_sq(delta_sq),
            step_computed: step,
        })
    }
}

/// `σ_min` of a table (pad row excluded).
pub fn sigma_min(table: &EmbeddingTable) -> Result<f64> {
    Ok(ClippingEstimate::compute(table, 0)?.sigma_min)
}

/// Keeps the clipping estimate fresh and pushes it into the time sampler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClippingController {
    pub enabled: bool,
    pub refresh_every: u64,
    pub estimate: Option<ClippingEstimate>,
}

impl ClippingController {
    pub fn new(enabled: bool, refresh_every: u64) -> Result<Self> {
        if refresh_every == 0 {
            return Err(Error::Config(
                "clip_refresh_every must be at least 1".into(),
            ));
        }
        Ok(Self {
            enabled,
            refresh_every,
            estimate: None,
        })
    }

    /// Recomputes the estimate when `step` is a multiple of `refresh_every`
    /// (or none exists yet), then sets the sampler's `t_min`. The estimate is
    /// tracked even when clipping is disabled; the sampler then stays at
    /// `t_min = 0`.
    pub fn refresh(
        &mut self,
        table: &EmbeddingTable,
        sampler: &mut ClippedTimeSampler,
        step: u64,
    ) -> Result<ClippingEstimate> {
        let est = match self.estimate {
            Some(e) if step % self.refresh_every != 0 => e,
            _ => ClippingEstimate::compute(table, step)?,
        };
        self.estimate = Some(est);
        if self.enabled {
            sampler.set_sigma_min(est.sigma_min)?;
        } else {
            sampler.set_t_min(0.0)?;
        }
        Ok(est)
    }
}
