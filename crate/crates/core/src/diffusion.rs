//! Forward corruption, training losses and the clipped training loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::SeqPair;
use crate::denoiser::{DenoiseBatch, Denoiser, DenoiserParams};
use crate::embedding::{ClippingController, ClippingEstimate, EmbeddingTable, PAD};
use crate::error::{Error, Result};
use crate::optim::{adamw_step, AdamWConfig, AdamWState};
use crate::rng::{derive_seed, RngState};
use crate::schedule::{ClippedTimeSampler, NoiseSchedule};
use crate::tensor::Matrix;

/// `α(t)·z0 + σ(t)·ε`.
pub fn forward_diffuse(
    z0: &Matrix,
    t: f64,
    eps: &Matrix,
    schedule: NoiseSchedule,
) -> Result<Matrix> {
    if z0.shape() != eps.shape() {
        return Err(Error::Shape {
            expected: z0.shape(),
            got: eps.shape(),
        });
    }
    let (a, s) = (schedule.alpha(t)?, schedule.sigma(t)?);
    let data = z0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(z, e)| a * z + s * e)
        .collect();
    Ok(Matrix::from_vec(z0.rows(), z0.cols(), data))
}

/// Mean over kept positions of `‖ẑ0_i − z0_i‖²`. `keep[i] = false` masks row `i`.
pub fn diffusion_loss(z_hat: &Matrix, z0: &Matrix, keep: &[bool]) -> Result<f64> {
    if z_hat.shape() != z0.shape() {
        return Err(Error::Shape {
            expected: z0.shape(),
            got: z_hat.shape(),
        });
    }
    if keep.len() != z0.rows() {
        return Err(Error::Shape {
            expected: (z0.rows(), 1),
            got: (keep.len(), 1),
        });
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, _) in keep.iter().enumerate().filter(|(_, &k)| k) {
        total += crate::embedding::sq_dist(z_hat.row(i), z0.row(i));
        count += 1;
    }
    if count == 0 {
        return Err(Error::Undefined(
            "diffusion loss over an all-masked batch".into(),
        ));
    }
    Ok(total / count as f64)
}

fn pad_mask(vocab: usize) -> Vec<bool> {
    let mut m = vec![false; vocab];
    m[PAD] = true;
    m
}

/// Mean per-position NLL of `targets` under logits `−‖z0_i − e_v‖²` (pad excluded).
pub fn reconstruction_loss(z0: &Matrix, targets: &[usize], table: &EmbeddingTable) -> Result<f64> {
    if z0.rows() != targets.len() || z0.cols() != table.dim() {
        return Err(Error::Shape {
            expected: (targets.len(), table.dim()),
            got: z0.shape(),
        });
    }
    if targets.is_empty() {
        return Err(Error::Undefined(
            "reconstruction loss over zero positions".into(),
        ));
    }
    let probs =
        crate::autograd::distance_softmax(z0, table.matrix(), &pad_mask(table.vocab_size()));
    let mut nll = 0.0;
    for (i, &y) in targets.iter().enumerate() {
        if y >= table.vocab_size() {
            return Err(Error::TokenIndex {
                id: y,
                vocab: table.vocab_size(),
            });
        }
        nll -= probs.get(i, y).max(f64::MIN_POSITIVE).ln();
    }
    Ok(nll / targets.len() as f64)
}

/// One packed training batch with its corruption draws.
#[derive(Clone, Debug)]
pub struct DiffusionBatch {
    pub sources: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
    pub lengths: Vec<usize>,
    pub t: Vec<f64>,
    /// Packed `Σ n_i × D` standard-normal draws.
    pub epsilon: Matrix,
}

impl DiffusionBatch {
    pub fn target_ids(&self) -> Vec<usize> {
        self.targets.iter().flatten().copied().collect()
    }

    /// Per-row `(α, σ)` broadcast over each sequence's positions.
    fn row_coefficients(&self, schedule: NoiseSchedule) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut a = Vec::with_capacity(self.epsilon.rows());
        let mut s = Vec::with_capacity(self.epsilon.rows());
        for (&t, &n) in self.t.iter().zip(&self.lengths) {
            let (at, st) = (schedule.alpha(t)?, schedule.sigma(t)?);
            a.extend(std::iter::repeat_n(at, n));
            s.extend(std::iter::repeat_n(st, n));
        }
        Ok((a, s))
    }

    /// Clean embeddings `z0` and corrupted `z_t` for the batch.
    pub fn corrupt(
        &self,
        table: &EmbeddingTable,
        schedule: NoiseSchedule,
    ) -> Result<(Matrix, Matrix)> {
        let z0 = table.embed(&self.target_ids())?;
        let (a, s) = self.row_coefficients(schedule)?;
        let mut zt = z0.clone();
        for i in 0..zt.rows() {
            let e = self.epsilon.row(i);
            for (j, z) in zt.row_mut(i).iter_mut().enumerate() {
                *z = a[i] * *z + s[i] * e[j];
            }
        }
        Ok((z0, zt))
    }
}

/// Per-step loss terms. `total = diffusion_mse + reconstruction_nll + length_weight · length_nll`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub diffusion_mse: f64,
    pub reconstruction_nll: f64,
    pub length_nll: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.diffusion_mse.is_finite()
            && self.reconstruction_nll.is_finite()
            && self.length_nll.is_finite()
            && self.total.is_finite()
    }
}

/// Total loss of one batch and (optionally) gradients for every denoiser
/// tensor followed by the embedding table. `self_cond` is a detached input.
pub fn batch_loss(
    params: &DenoiserParams,
    table: &EmbeddingTable,
    schedule: NoiseSchedule,
    batch: &DiffusionBatch,
    self_cond: Option<&Matrix>,
    length_weight: f64,
    want_grads: bool,
) -> Result<(LossBreakdown, Option<Vec<Matrix>>)> {
    let ids = batch.target_ids();
    let rows = ids.len();
    let d = table.dim();
    if rows == 0 {
        return Err(Error::Undefined("batch without target positions".into()));
    }
    let (a, s) = batch.row_coefficients(schedule)?;
    let mut g = if want_grads {
        Graph::new()
    } else {
        Graph::inference()
    };
    let table_slot = params.num_tensors();
    let e = g.param(table_slot, table.matrix());
    let z0 = g.gather(e, ids.clone());
    let signal = g.row_scale(z0, a);
    let noise = g.input(Matrix::from_fn(rows, d, |i, j| {
        s[i] * batch.epsilon.get(i, j)
    }));
    let zt = g.add(signal, noise);
    let sc = g.input(match self_cond {
        Some(m) => m.clone(),
        None => Matrix::zeros(rows, d),
    });
    let out = params.forward(&mut g, zt, sc, &batch.lengths, &batch.sources, &batch.t)?;
    let mse = g.sq_dist_mean(out.z0_hat, z0);
    let recon = g.dist_softmax_nll(z0, e, ids, &pad_mask(table.vocab_size()));
    let classes = batch
        .sources
        .iter()
        .zip(&batch.lengths)
        .map(|(src, &n)| params.length_class(src.len(), n))
        .collect();
    let len = g.cross_entropy(out.length_logits, classes);
    let total = g.weighted_sum(vec![(mse, 1.0), (recon, 1.0), (len, length_weight)]);
    let loss = LossBreakdown {
        diffusion_mse: g.scalar(mse),
        reconstruction_nll: g.scalar(recon),
        length_nll: g.scalar(len),
        total: g.scalar(total),
    };
    let grads = want_grads.then(|| {
        let mut shapes = params.shapes();
        shapes.push(table.matrix().shape());
        g.backward(total, &shapes)
    });
    Ok((loss, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub schedule: NoiseSchedule,
    pub noise_clipping: bool,
    pub clip_refresh_every: u64,
    pub self_cond_prob: f64,
    pub length_loss_weight: f64,
    /// Target-token budget per batch.
    pub batch_tokens: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: NoiseSchedule::Linear,
            noise_clipping: true,
            clip_refresh_every: 100,
            self_cond_prob: 0.5,
            length_loss_weight: 0.1,
            batch_tokens: 512,
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }
}

/// What one optimizer step did.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: LossBreakdown,
    pub sigma_min: f64,
    pub t_min: f64,
    pub grad_norm: f64,
}

/// Serialisable position of a trainer, excluding parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub step: u64,
    pub epoch: u64,
    pub cursor: usize,
    pub t_min: f64,
    pub time_rng: RngState,
    pub noise_rng: RngState,
    pub clipping: Option<ClippingEstimate>,
}

/// Single-threaded trainer owning parameters, optimizer state and data order.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub params: DenoiserParams,
    pub table: EmbeddingTable,
    pub optimizer: AdamWState,
    clipping: ClippingController,
    time_sampler: ClippedTimeSampler,
    noise_rng: ChaCha8Rng,
    data: Vec<SeqPair>,
    order: Vec<usize>,
    epoch: u64,
    cursor: usize,
    step: u64,
}

impl Trainer {
    pub fn new(
        config: TrainConfig,
        params: DenoiserParams,
        table: EmbeddingTable,
        data: Vec<SeqPair>,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Input("empty training set".into()));
        }
        if data.iter().any(|p| p.src.is_empty() || p.tgt.is_empty()) {
            return Err(Error::Input(
                "training pairs must have non-empty source and target".into(),
            ));
        }
        if !(0.0..=1.0).contains(&config.self_cond_prob) {
            return Err(Error::Config("self_cond_prob must lie in [0, 1]".into()));
        }
        if table.dim() != params.config().embed_dim
            || table.vocab_size() != params.config().vocab_size
        {
            return Err(Error::Config(
                "embedding table does not match denoiser config".into(),
            ));
        }
        let mut shapes = params.shapes();
        shapes.push(table.matrix().shape());
        let clipping = ClippingController::new(config.noise_clipping, config.clip_refresh_every)?;
        let time_sampler = ClippedTimeSampler::for_worker(config.schedule, config.seed, 0);
        let noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[0xE95]));
        let mut t = Self {
            optimizer: AdamWState::new(&shapes),
            clipping,
            time_sampler,
            noise_rng,
            order: Vec::new(),
            epoch: 0,
            cursor: 0,
            step: 0,
            config,
            params,
            table,
            data,
        };
        t.order = t.epoch_order(0);
        Ok(t)
    }

    fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, &[0xDA7A, epoch]));
        order.shuffle(&mut rng);
        order
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn clipping_estimate(&self) -> Option<ClippingEstimate> {
        self.clipping.estimate
    }

    pub fn t_min(&self) -> f64 {
        self.time_sampler.t_min()
    }

    pub fn state(&self) -> TrainerState {
        TrainerState {
            step: self.step,
            epoch: self.epoch,
            cursor: self.cursor,
            t_min: self.time_sampler.t_min(),
            time_rng: self.time_sampler.rng_state(),
            noise_rng: RngState::capture(&self.noise_rng),
            clipping: self.clipping.estimate,
        }
    }

    pub fn restore_state(&mut self, state: &TrainerState, optimizer: AdamWState) -> Result<()> {
        if optimizer.m.len() != self.optimizer.m.len() {
            return Err(Error::Checkpoint(
                "optimizer state does not match parameters".into(),
            ));
        }
        self.step = state.step;
        self.epoch = state.epoch;
        self.order = self.epoch_order(state.epoch);
        if state.cursor > self.order.len() {
            return Err(Error::Checkpoint("data cursor beyond training set".into()));
        }
        self.cursor = state.cursor;
        self.time_sampler =
            ClippedTimeSampler::restore(self.config.schedule, state.t_min, &state.time_rng);
        self.noise_rng = state.noise_rng.restore();
        self.clipping.estimate = state.clipping;
        self.optimizer = optimizer;
        Ok(())
    }

    /// Next run of pairs whose target tokens fit the budget (at least one pair).
    fn next_batch_indices(&mut self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut tokens = 0;
        loop {
            if self.cursor == self.order.len() {
                self.epoch += 1;
                self.order = self.epoch_order(self.epoch);
                self.cursor = 0;
            }
            let idx = self.order[self.cursor];
            let n = self.data[idx].tgt.len();
            if !out.is_empty() && tokens + n > self.config.batch_tokens {
                break;
            }
            out.push(idx);
            tokens += n;
            self.cursor += 1;
        }
        out
    }

    /// One step of clipped training: refresh the threshold, draw a batch
    /// with timesteps above it, optionally self-condition, and descend.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let est = self
            .clipping
            .refresh(&self.table, &mut self.time_sampler, self.step)?;
        let schedule = self.config.schedule;
        let idx = self.next_batch_indices();
        let d = self.table.dim();
        let t: Vec<f64> = idx
            .iter()
            .map(|_| self.time_sampler.sample_timestep())
            .collect();
        if self.config.noise_clipping {
            for &ti in &t {
                let s = schedule.sigma(ti)?;
                assert!(
                    s >= est.sigma_min - 1e-12,
                    "timestep {ti} below clipping threshold (σ = {s} < {})",
                    est.sigma_min
                );
            }
        }
        let lengths: Vec<usize> = idx.iter().map(|&i| self.data[i].tgt.len()).collect();
        let rows: usize = lengths.iter().sum();
        let rng = &mut self.noise_rng;
        let epsilon = Matrix::from_fn(rows, d, |_, _| rng.sample(StandardNormal));
        let use_self_cond =
            self.config.self_cond_prob > 0.0 && rng.random::<f64>() < self.config.self_cond_prob;
        let batch = DiffusionBatch {
            sources: idx.iter().map(|&i| self.data[i].src.clone()).collect(),
            targets: idx.iter().map(|&i| self.data[i].tgt.clone()).collect(),
            lengths,
            t,
            epsilon,
        };
        let self_cond = if use_self_cond {
            let (_, zt) = batch.corrupt(&self.table, schedule)?;
            Some(self.params.denoise(&DenoiseBatch {
                z_t: &zt,
                lengths: &batch.lengths,
                sources: &batch.sources,
                t: &batch.t,
                self_cond: None,
            })?)
        } else {
            None
        };
        let (loss, grads) = batch_loss(
            &self.params,
            &self.table,
            schedule,
            &batch,
            self_cond.as_ref(),
            self.config.length_loss_weight,
            true,
        )?;
        if !loss.is_finite() {
            let sigmas: Vec<f64> = batch
                .t
                .iter()
                .map(|&t| schedule.sigma_unchecked(t))
                .collect();
            return Err(Error::NonFinite {
                step: self.step,
                detail: format!(
                    "loss {loss:?}; t = {:?}; σ(t) = {sigmas:?}; batch ids = {idx:?}",
                    batch.t
                ),
            });
        }
        let grads = grads.expect("gradients requested");
        let mut slots: Vec<&mut Matrix> = self.params.values_mut().iter_mut().collect();
        slots.push(self.table.matrix_mut());
        let grad_norm = adamw_step(
            &self.config.optimizer,
            &mut self.optimizer,
            &mut slots,
            &grads,
        )?;
        if !self.params.all_finite() || self.table.has_non_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                detail: format!("parameters became non-finite; batch ids = {idx:?}"),
            });
        }
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            loss,
            sigma_min: est.sigma_min,
            t_min: self.time_sampler.t_min(),
            grad_norm,
        })
    }

    pub fn into_parts(self) -> (DenoiserParams, EmbeddingTable) {
        (self.params, self.table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;

    fn small_setup(seed: u64, clipping: bool, self_cond: f64) -> Trainer {
        let cfg = DenoiserConfig {
            vocab_size: 14,
            embed_dim: 4,
            width: 16,
            layers: 1,
            heads: 2,
            ffn_width: 16,
            length_offset_k: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = DenoiserParams::new(cfg, &mut rng).unwrap();
        let table = EmbeddingTable::random(14, 4, &mut rng);
        let data: Vec<SeqPair> = (0..20)
            .map(|i| {
                let src: Vec<usize> = (0..3 + i % 4).map(|j| 4 + (i + j) % 10).collect();
                SeqPair {
                    tgt: src.clone(),
                    src,
                }
            })
            .collect();
        let tc = TrainConfig {
            noise_clipping: clipping,
            self_cond_prob: self_cond,
            batch_tokens: 20,
            clip_refresh_every: 5,
            optimizer: AdamWConfig {
                lr: 3e-3,
                warmup_steps: 5,
                ..Default::default()
            },
            seed,
            ..Default::default()
        };
        Trainer::new(tc, params, table, data).unwrap()
    }

    #[test]
    fn forward_diffuse_examples() {
        let z0 = Matrix::from_vec(1, 2, vec![1.0, -2.0]);
        let eps = Matrix::from_vec(1, 2, vec![0.3, 0.7]);
        let lin = NoiseSchedule::Linear;
        assert_eq!(forward_diffuse(&z0, 0.0, &eps, lin).unwrap(), z0);
        assert_eq!(forward_diffuse(&z0, 1.0, &eps, lin).unwrap(), eps);
        let zero = Matrix::zeros(1, 2);
        let half = forward_diffuse(&zero, 0.5, &eps, lin).unwrap();
        assert_eq!(half.data(), &[0.15, 0.35]);
        assert!(forward_diffuse(&z0, 0.5, &Matrix::zeros(2, 2), lin).is_err());
    }

    #[test]
    fn forward_diffuse_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z0 = Matrix::from_vec(1, 1, vec![0.8]);
        let t = 0.6;
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| {
                let eps = Matrix::from_vec(1, 1, vec![rng.sample(StandardNormal)]);
                forward_diffuse(&z0, t, &eps, NoiseSchedule::Linear)
                    .unwrap()
                    .get(0, 0)
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let (a, s) = (0.8, 0.6);
        let se_mean = s / (n as f64).sqrt();
        let se_var = s * s * (2.0 / (n - 1) as f64).sqrt();
        assert!((mean - a * 0.8).abs() < 3.0 * se_mean);
        assert!((var - s * s).abs() < 3.0 * se_var);
    }

    #[test]
    fn diffusion_loss_examples() {
        let z0 = Matrix::from_fn(3, 4, |i, j| (i + j) as f64);
        let keep = [true, true, true];
        assert_eq!(diffusion_loss(&z0, &z0, &keep).unwrap(), 0.0);
        let shifted = z0.map(|x| x + 0.5);
        assert!((diffusion_loss(&shifted, &z0, &keep).unwrap() - 0.25 * 4.0).abs() < 1e-12);
        assert!(matches!(
            diffusion_loss(&shifted, &z0, &[false; 3]),
            Err(Error::Undefined(_))
        ));
        let mut partly = shifted.clone();
        partly.row_mut(2).fill(100.0);
        assert!((diffusion_loss(&partly, &z0, &[true, true, false]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_loss_examples() {
        // pad plus a single real token: certainty
        let table = EmbeddingTable::new(Matrix::from_vec(2, 2, vec![0.0, 0.0, 1.0, 1.0]));
        let z0 = table.embed(&[1, 1]).unwrap();
        assert!(reconstruction_loss(&z0, &[1, 1], &table).unwrap().abs() < 1e-12);
        // all real rows identical: uniform over V' = 4 tokens
        let mut m = Matrix::filled(5, 3, 0.2);
        m.row_mut(PAD).fill(9.0);
        let table = EmbeddingTable::new(m);
        let z0 = table.embed(&[2, 3]).unwrap();
        let l = reconstruction_loss(&z0, &[2, 3], &table).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn identical_seeds_give_identical_traces() {
        let mut a = small_setup(5, true, 0.5);
        let mut b = small_setup(5, true, 0.5);
        for _ in 0..30 {
            let (ra, rb) = (a.train_step().unwrap(), b.train_step().unwrap());
            assert_eq!(ra.loss.total.to_bits(), rb.loss.total.to_bits());
            assert_eq!(ra, rb);
        }
    }

    #[test]
    fn clipping_flag_controls_threshold() {
        let mut on = small_setup(2, true, 0.0);
        let mut off = small_setup(2, false, 0.0);
        let r_on = on.train_step().unwrap();
        let r_off = off.train_step().unwrap();
        assert!(r_on.t_min > 0.0);
        assert_eq!(
            r_on.t_min,
            on.config.schedule.sigma_inverse(r_on.sigma_min).unwrap()
        );
        assert_eq!(r_off.t_min, 0.0);
        // the estimate is still tracked without clipping
        assert_eq!(r_on.sigma_min, r_off.sigma_min);
    }

    #[test]
    fn training_reduces_loss() {
        let mut tr = small_setup(9, true, 0.5);
        let first: f64 = (0..10)
            .map(|_| tr.train_step().unwrap().loss.total)
            .sum::<f64>()
            / 10.0;
        for _ in 0..200 {
            tr.train_step().unwrap();
        }
        let last: f64 = (0..10)
            .map(|_| tr.train_step().unwrap().loss.total)
            .sum::<f64>()
            / 10.0;
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }

    #[test]
    fn total_is_weighted_sum() {
        let mut tr = small_setup(4, true, 0.0);
        let r = tr.train_step().unwrap();
        let l = r.loss;
        let expect = l.diffusion_mse + l.reconstruction_nll + 0.1 * l.length_nll;
        assert!((l.total - expect).abs() < 1e-12);
    }

    #[test]
    fn resumed_trainer_matches_uninterrupted() {
        let mut full = small_setup(7, true, 0.5);
        let mut part = small_setup(7, true, 0.5);
        for _ in 0..12 {
            full.train_step().unwrap();
            part.train_step().unwrap();
        }
        let st = part.state();
        let opt = part.optimizer.clone();
        let (p, t) = part.into_parts();
        let mut resumed = small_setup(7, true, 0.5);
        resumed.params = p;
        resumed.table = t;
        resumed.restore_state(&st, opt).unwrap();
        for _ in 0..12 {
            assert_eq!(full.train_step().unwrap(), resumed.train_step().unwrap());
        }
    }
}
