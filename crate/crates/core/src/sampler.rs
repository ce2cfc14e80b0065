//! DDIM and condition-enhanced (CeDi) sampling, length beams and MBR selection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bleu::sentence_bleu;
use crate::denoiser::{DenoiseBatch, Denoiser, DenoiserParams};
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::schedule::NoiseSchedule;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMode {
    Ddim,
    Cedi,
}

impl std::str::FromStr for SamplerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddim" => Ok(Self::Ddim),
            "cedi" => Ok(Self::Cedi),
            other => Err(Error::Config(format!("unknown sampler mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for SamplerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Ddim => "ddim",
            Self::Cedi => "cedi",
        })
    }
}

/// End point of the model-facing timestep grid used by CeDi.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum TauTerminal {
    /// Noise level `σ(τ_M)`; the grid ends at `σ⁻¹` of it.
    Sigma(f64),
    /// Timestep `τ_M` directly.
    Time(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub mode: SamplerMode,
    pub tau_terminal: TauTerminal,
    pub t_terminal: f64,
    pub length_beam: usize,
    pub mbr_samples: usize,
    /// Feed the previous estimate back as self-conditioning input.
    pub self_condition: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            mode: SamplerMode::Cedi,
            tau_terminal: TauTerminal::Sigma(0.99),
            t_terminal: 0.0,
            length_beam: 1,
            mbr_samples: 1,
            self_condition: true,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.length_beam == 0 || self.mbr_samples == 0 {
            return Err(Error::Config(
                "length_beam and mbr_samples must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.t_terminal) {
            return Err(Error::Config("t_terminal must lie in [0, 1)".into()));
        }
        match self.tau_terminal {
            TauTerminal::Sigma(s) if !(s > 0.0 && s < 1.0) => {
                Err(Error::Config("tau sigma must lie in (0, 1)".into()))
            }
            TauTerminal::Time(t) if !(0.0..1.0).contains(&t) => {
                Err(Error::Config("tau terminal time must lie in [0, 1)".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn tau_end(&self, schedule: NoiseSchedule) -> Result<f64> {
        match self.tau_terminal {
            TauTerminal::Sigma(s) => schedule.sigma_inverse(s),
            TauTerminal::Time(t) => Ok(t),
        }
    }

    /// Trajectory grid `t_0 = 1 > … > t_M = T`.
    pub fn t_grid(&self) -> Vec<f64> {
        uniform_grid(self.steps, self.t_terminal)
    }

    /// Model-facing grid: `τ` for CeDi, `t` for DDIM.
    pub fn model_grid(&self, schedule: NoiseSchedule) -> Result<Vec<f64>> {
        Ok(match self.mode {
            SamplerMode::Ddim => self.t_grid(),
            SamplerMode::Cedi => uniform_grid(self.steps, self.tau_end(schedule)?),
        })
    }
}

/// `M + 1` points uniform from 1 down to `end`, endpoints inclusive.
pub fn uniform_grid(steps: usize, end: f64) -> Vec<f64> {
    (0..=steps)
        .map(|i| {
            if i == steps {
                end
            } else {
                1.0 - i as f64 * (1.0 - end) / steps as f64
            }
        })
        .collect()
}

/// Re-noises `z0_hat` from `t_prev` to `t_next`, keeping the implied noise.
pub fn ddim_step(
    z_prev: &Matrix,
    z0_hat: &Matrix,
    t_prev: f64,
    t_next: f64,
    schedule: NoiseSchedule,
) -> Result<Matrix> {
    reverse_step(z_prev, z0_hat, t_prev, t_next, schedule)
}

/// Shared update: `ε̂ = (z − α(denom_t)·ẑ0)/σ(denom_t)`, then `α(t_next)·ẑ0 + σ(t_next)·ε̂`.
fn reverse_step(
    z_prev: &Matrix,
    z0_hat: &Matrix,
    denom_t: f64,
    t_next: f64,
    schedule: NoiseSchedule,
) -> Result<Matrix> {
    if z_prev.shape() != z0_hat.shape() {
        return Err(Error::Shape {
            expected: z_prev.shape(),
            got: z0_hat.shape(),
        });
    }
    let (a_p, s_p) = (schedule.alpha(denom_t)?, schedule.sigma(denom_t)?);
    if s_p == 0.0 {
        return Err(Error::Domain {
            what: "σ(t_prev)",
            value: 0.0,
            domain: "(0, 1]",
        });
    }
    let (a_n, s_n) = (schedule.alpha(t_next)?, schedule.sigma(t_next)?);
    let data = z_prev
        .data()
        .iter()
        .zip(z0_hat.data())
        .map(|(&z, &x)| {
            let eps = (z - a_p * x) / s_p;
            a_n * x + s_n * eps
        })
        .collect();
    Ok(Matrix::from_vec(z_prev.rows(), z_prev.cols(), data))
}

/// One CeDi update: the model sees `tau_prev`, the trajectory moves on `t`.
/// Returns `(z_next, ẑ0)`.
#[allow(clippy::too_many_arguments)]
pub fn cedi_step<D: Denoiser + ?Sized>(
    z_prev: &Matrix,
    denoiser: &D,
    source: &[usize],
    t_next: f64,
    tau_prev: f64,
    self_cond: Option<&Matrix>,
    schedule: NoiseSchedule,
) -> Result<(Matrix, Matrix)> {
    let z0_hat = denoiser.denoise(&DenoiseBatch {
        z_t: z_prev,
        lengths: &[z_prev.rows()],
        sources: &[source.to_vec()],
        t: &[tau_prev],
        self_cond,
    })?;
    let z_next = reverse_step(z_prev, &z0_hat, tau_prev, t_next, schedule)?;
    Ok((z_next, z0_hat))
}

/// One decoded hypothesis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub tokens: Vec<usize>,
    pub length: usize,
    pub sample: usize,
}

/// Candidates for one source, their pairwise utilities and the MBR choice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub candidates: Vec<Candidate>,
    /// `utility[i][j]` = sentence BLEU of candidate `i` against `j`.
    pub utility: Vec<Vec<f64>>,
    pub selected: usize,
}

impl CandidateSet {
    pub fn best(&self) -> &[usize] {
        &self.candidates[self.selected].tokens
    }
}

/// Pairwise utility table with zeros on the diagonal.
pub fn utility_matrix(candidates: &[Vec<usize>]) -> Vec<Vec<f64>> {
    let n = candidates.len();
    let mut u = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                u[i][j] = sentence_bleu(&candidates[i], &candidates[j]);
            }
        }
    }
    u
}

fn argmax_row_mean(u: &[Vec<f64>]) -> usize {
    let n = u.len();
    if n <= 1 {
        return 0;
    }
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, row) in u.iter().enumerate() {
        let score = row.iter().sum::<f64>() / (n - 1) as f64;
        if score > best_score {
            best = i;
            best_score = score;
        }
    }
    best
}

/// Index of the candidate with the highest mean utility against the others
/// (lowest index on ties). Panics on an empty list.
pub fn mbr_select(candidates: &[Vec<usize>]) -> usize {
    assert!(!candidates.is_empty(), "MBR over zero candidates");
    argmax_row_mean(&utility_matrix(candidates))
}

/// The `beam` most probable target lengths for `source`.
pub fn length_beam(params: &DenoiserParams, source: &[usize], beam: usize) -> Result<Vec<usize>> {
    if beam == 0 {
        return Err(Error::Config("length beam must be at least 1".into()));
    }
    Ok(params.predict_length(source)?.top_lengths(beam))
}

/// One sequence to decode: source, target length and its own noise seed.
#[derive(Clone, Debug)]
pub struct SampleRequest {
    pub source: Vec<usize>,
    pub length: usize,
    pub seed: u64,
}

/// Runs the iterative sampler over a batch of requests packed together.
pub struct Sampler<'a, D: Denoiser + ?Sized> {
    pub denoiser: &'a D,
    pub table: &'a EmbeddingTable,
    pub schedule: NoiseSchedule,
    pub config: SamplerConfig,
}

impl<'a, D: Denoiser + ?Sized> Sampler<'a, D> {
    pub fn new(
        denoiser: &'a D,
        table: &'a EmbeddingTable,
        schedule: NoiseSchedule,
        config: SamplerConfig,
    ) -> Result<Self> {
        config.validate()?;
        if denoiser.embed_dim() != table.dim() {
            return Err(Error::Config(
                "denoiser and embedding table disagree on D".into(),
            ));
        }
        Ok(Self {
            denoiser,
            table,
            schedule,
            config,
        })
    }

    /// Initial standard-normal draws for each request, packed.
    fn initial_noise(&self, reqs: &[SampleRequest]) -> Matrix {
        let d = self.table.dim();
        let rows: usize = reqs.iter().map(|r| r.length).sum();
        let mut z = Matrix::zeros(rows, d);
        let mut r0 = 0;
        for req in reqs {
            let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
            for v in &mut z.data_mut()[r0 * d..(r0 + req.length) * d] {
                *v = rng.sample(StandardNormal);
            }
            r0 += req.length;
        }
        z
    }

    /// Final continuous states `ẑ_{t_M}` for a batch, packed.
    pub fn sample_continuous(&self, reqs: &[SampleRequest]) -> Result<Matrix> {
        if reqs.iter().any(|r| r.length == 0) {
            return Err(Error::Input("target length must be at least 1".into()));
        }
        let t = self.config.t_grid();
        let tau = self.config.model_grid(self.schedule)?;
        let lengths: Vec<usize> = reqs.iter().map(|r| r.length).collect();
        let sources: Vec<Vec<usize>> = reqs.iter().map(|r| r.source.clone()).collect();
        let mut z = self.initial_noise(reqs);
        let mut self_cond: Option<Matrix> = None;
        for i in 0..self.config.steps {
            let model_t = vec![tau[i]; reqs.len()];
            let z0_hat = self.denoiser.denoise(&DenoiseBatch {
                z_t: &z,
                lengths: &lengths,
                sources: &sources,
                t: &model_t,
                self_cond: self_cond.as_ref(),
            })?;
            z = reverse_step(&z, &z0_hat, tau[i], t[i + 1], self.schedule)?;
            if self.config.self_condition {
                self_cond = Some(z0_hat);
            }
        }
        Ok(z)
    }

    /// Token sequences for a batch of requests.
    pub fn sample_batch(&self, reqs: &[SampleRequest]) -> Result<Vec<Vec<usize>>> {
        let z = self.sample_continuous(reqs)?;
        let tokens = self.table.round_to_tokens(&z)?;
        let mut out = Vec::with_capacity(reqs.len());
        let mut r0 = 0;
        for req in reqs {
            out.push(tokens[r0..r0 + req.length].to_vec());
            r0 += req.length;
        }
        Ok(out)
    }

    /// Decodes one sequence of a known length.
    pub fn sample(&self, source: &[usize], length: usize) -> Result<Vec<usize>> {
        let req = SampleRequest {
            source: source.to_vec(),
            length,
            seed: self.config.seed,
        };
        Ok(self.sample_batch(&[req])?.remove(0))
    }

    /// Seed for candidate `(source index, length rank, sample)`.
    pub fn candidate_seed(&self, source_index: usize, beam_rank: usize, sample: usize) -> u64 {
        derive_seed(
            self.config.seed,
            &[source_index as u64, beam_rank as u64, sample as u64],
        )
    }

    /// Decodes sources given candidate lengths per source, pooling
    /// `lengths × mbr_samples` candidates into one MBR choice per source.
    /// `first_index` offsets source indices for seed derivation.
    pub fn decode_with_lengths(
        &self,
        sources: &[Vec<usize>],
        lengths: &[Vec<usize>],
        first_index: usize,
    ) -> Result<Vec<CandidateSet>> {
        let mut reqs = Vec::new();
        let mut meta = Vec::new();
        for (k, (src, lens)) in sources.iter().zip(lengths).enumerate() {
            for (rank, &len) in lens.iter().enumerate() {
                for s in 0..self.config.mbr_samples {
                    reqs.push(SampleRequest {
                        source: src.clone(),
                        length: len,
                        seed: self.candidate_seed(first_index + k, rank, s),
                    });
                    meta.push((k, len, s));
                }
            }
        }
        let outs = self.sample_batch(&reqs)?;
        let mut per_source: Vec<Vec<Candidate>> = vec![Vec::new(); sources.len()];
        for ((k, length, sample), tokens) in meta.into_iter().zip(outs) {
            per_source[k].push(Candidate {
                tokens,
                length,
                sample,
            });
        }
        Ok(per_source
            .into_iter()
            .map(|candidates| {
                let toks: Vec<Vec<usize>> = candidates.iter().map(|c| c.tokens.clone()).collect();
                let utility = utility_matrix(&toks);
                let selected = argmax_row_mean(&utility);
                CandidateSet {
                    candidates,
                    utility,
                    selected,
                }
            })
            .collect())
    }
}

impl Sampler<'_, DenoiserParams> {
    /// Full decoding: length beam from the length head, then pooled MBR.
    /// Sources are processed in chunks of `chunk` to bound memory.
    pub fn decode(&self, sources: &[Vec<usize>], chunk: usize) -> Result<Vec<CandidateSet>> {
        let dists = self.denoiser.predict_lengths(sources)?;
        let lengths: Vec<Vec<usize>> = dists
            .iter()
            .map(|d| d.top_lengths(self.config.length_beam))
            .collect();
        let chunk = chunk.max(1);
        let mut out = Vec::with_capacity(sources.len());
        for start in (0..sources.len()).step_by(chunk) {
            let end = (start + chunk).min(sources.len());
            out.extend(self.decode_with_lengths(
                &sources[start..end],
                &lengths[start..end],
                start,
            )?);
        }
        Ok(out)
    }
}
