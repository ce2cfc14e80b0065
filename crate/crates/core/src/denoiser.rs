//! The conditional estimator `ẑ₀ = z_θ(z_t, x, t)` and the target-length head.
//!
//! Architecture: a pre-norm transformer encoder over source tokens and a
//! decoder with full (non-causal) self-attention plus cross-attention over
//! the encoder output. The decoder input is `[z_t ; self_cond]` projected to
//! the model width; the timestep embedding is added to the input of every
//! decoder block. Sequences of different length are packed along rows, so
//! there is no padding anywhere in the forward pass.

use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub vocab_size: usize,
    /// Diffusion embedding dimension `D`.
    pub embed_dim: usize,
    /// Model width `H`.
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_width: usize,
    /// Length offsets are predicted over `[-K, K]`.
    pub length_offset_k: usize,
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2");
        }
        if self.embed_dim == 0 || self.width == 0 || self.ffn_width == 0 {
            return bad("embed_dim, width and ffn_width must be positive");
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return bad("width must be a positive multiple of heads");
        }
        if self.width % 2 != 0 {
            return bad("width must be even (sinusoidal features)");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    g: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct AttnBlock {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Debug)]
struct EncoderBlock {
    ln_attn: Norm,
    attn: AttnBlock,
    ln_ffn: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
struct DecoderBlock {
    ln_self: Norm,
    self_attn: AttnBlock,
    ln_cross: Norm,
    cross_attn: AttnBlock,
    ln_ffn: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    src_embed: usize,
    encoder: Vec<EncoderBlock>,
    enc_norm: Norm,
    input_proj: Linear,
    time1: Linear,
    time2: Linear,
    decoder: Vec<DecoderBlock>,
    dec_norm: Norm,
    output_proj: Linear,
    length_head: Linear,
}

struct Builder<'r> {
    names: Vec<String>,
    values: Vec<Matrix>,
    rng: &'r mut ChaCha8Rng,
}

impl Builder<'_> {
    fn tensor(&mut self, name: String, rows: usize, cols: usize, std: f64) -> usize {
        let m = if std == 0.0 {
            Matrix::zeros(rows, cols)
        } else {
            Matrix::from_fn(rows, cols, |_, _| {
                let x: f64 = self.rng.sample(StandardNormal);
                x * std
            })
        };
        self.names.push(name);
        self.values.push(m);
        self.values.len() - 1
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, gain: f64) -> Linear {
        let std = gain / (fan_in as f64).sqrt();
        Linear {
            w: self.tensor(format!("{name}.weight"), fan_in, fan_out, std),
            b: self.tensor(format!("{name}.bias"), 1, fan_out, 0.0),
        }
    }

    fn norm(&mut self, name: &str, width: usize) -> Norm {
        let g = self.tensor(format!("{name}.gamma"), 1, width, 0.0);
        self.values[g] = Matrix::filled(1, width, 1.0);
        Norm {
            g,
            b: self.tensor(format!("{name}.beta"), 1, width, 0.0),
        }
    }

    fn attn(&mut self, name: &str, width: usize, out_gain: f64) -> AttnBlock {
        AttnBlock {
            q: self.linear(&format!("{name}.q"), width, width, 1.0),
            k: self.linear(&format!("{name}.k"), width, width, 1.0),
            v: self.linear(&format!("{name}.v"), width, width, 1.0),
            o: self.linear(&format!("{name}.o"), width, width, out_gain),
        }
    }
}

/// Trainable parameters of the denoiser, stored as a flat list of named matrices.
#[derive(Clone, Debug)]
pub struct DenoiserParams {
    config: DenoiserConfig,
    names: Vec<String>,
    values: Vec<Matrix>,
    layout: Layout,
}

/// Normalised distribution over target-length offsets `[-K, K]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LengthDistribution {
    pub k: usize,
    pub source_len: usize,
    /// `log_probs[i]` is the log-probability of offset `i − K`.
    pub log_probs: Vec<f64>,
}

impl LengthDistribution {
    pub fn offsets(&self) -> impl Iterator<Item = i64> + '_ {
        let k = self.k as i64;
        (0..self.log_probs.len()).map(move |i| i as i64 - k)
    }

    pub fn entropy(&self) -> f64 {
        -self.log_probs.iter().map(|&lp| lp.exp() * lp).sum::<f64>()
    }

    /// Predicted target length for an offset, floored at 1.
    pub fn length_for(&self, offset: i64) -> usize {
        (self.source_len as i64 + offset).max(1) as usize
    }

    /// The `beam` most probable distinct lengths, best first. Offsets that
    /// floor to the same length are merged (their probability is summed).
    pub fn top_lengths(&self, beam: usize) -> Vec<usize> {
        let mut by_len: Vec<(usize, f64)> = Vec::new();
        for (off, lp) in self.offsets().zip(&self.log_probs) {
            let len = self.length_for(off);
            match by_len.iter_mut().find(|(l, _)| *l == len) {
                Some((_, p)) => *p += lp.exp(),
                None => by_len.push((len, lp.exp())),
            }
        }
        // stable sort keeps shorter lengths first on ties
        by_len.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
        by_len.into_iter().take(beam).map(|(l, _)| l).collect()
    }
}

/// One packed batch of denoiser inputs. Rows of `z_t` (and `self_cond`) are
/// grouped by sequence, in order, with `lengths[i]` rows for sequence `i`.
#[derive(Clone, Copy, Debug)]
pub struct DenoiseBatch<'a> {
    pub z_t: &'a Matrix,
    pub lengths: &'a [usize],
    pub sources: &'a [Vec<usize>],
    pub t: &'a [f64],
    pub self_cond: Option<&'a Matrix>,
}

impl DenoiseBatch<'_> {
    pub fn validate(&self, embed_dim: usize) -> Result<()> {
        let n = self.lengths.len();
        if self.sources.len() != n || self.t.len() != n {
            return Err(Error::Input(format!(
                "batch of {n} lengths has {} sources and {} timesteps",
                self.sources.len(),
                self.t.len()
            )));
        }
        let rows: usize = self.lengths.iter().sum();
        if self.z_t.shape() != (rows, embed_dim) {
            return Err(Error::Shape {
                expected: (rows, embed_dim),
                got: self.z_t.shape(),
            });
        }
        if let Some(sc) = self.self_cond {
            if sc.shape() != self.z_t.shape() {
                return Err(Error::Shape {
                    expected: self.z_t.shape(),
                    got: sc.shape(),
                });
            }
            if !sc.is_finite() {
                return Err(Error::Input("non-finite self-conditioning input".into()));
            }
        }
        if !self.z_t.is_finite() {
            return Err(Error::Input("non-finite z_t".into()));
        }
        for &t in self.t {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Domain {
                    what: "t",
                    value: t,
                    domain: "[0, 1]",
                });
            }
        }
        if self.sources.iter().any(Vec::is_empty) {
            return Err(Error::Input("empty source sequence".into()));
        }
        Ok(())
    }
}

/// Anything that predicts clean embeddings from a packed noisy batch.
pub trait Denoiser {
    fn embed_dim(&self) -> usize;

    fn denoise(&self, batch: &DenoiseBatch<'_>) -> Result<Matrix>;
}

pub(crate) fn segments(lengths: &[usize]) -> Vec<Range<usize>> {
    let mut out = Vec::with_capacity(lengths.len());
    let mut start = 0;
    for &l in lengths {
        out.push(start..start + l);
        start += l;
    }
    out
}

/// Sinusoidal features `[sin(ω_k x), cos(ω_k x)]` with `ω_k` geometric in `[1, max_freq]`.
pub(crate) fn sinusoid(x: f64, width: usize, max_freq: f64) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for k in 0..half {
        let frac = if half > 1 {
            k as f64 / (half - 1) as f64
        } else {
            0.0
        };
        let w = max_freq.powf(frac);
        out[k] = (w * x).sin();
        out[half + k] = (w * x).cos();
    }
    out
}

const TIME_MAX_FREQ: f64 = 100.0;
const POSITION_MAX_FREQ: f64 = 1.0 / 64.0;

fn positional_rows(segs: &[Range<usize>], width: usize) -> Matrix {
    let rows: usize = segs.iter().map(|s| s.len()).sum();
    let mut m = Matrix::zeros(rows, width);
    for seg in segs {
        for (pos, r) in seg.clone().enumerate() {
            // frequencies 1/64 .. 1 over positions
            let f = sinusoid(pos as f64, width, POSITION_MAX_FREQ);
            m.row_mut(r).copy_from_slice(&f);
        }
    }
    m
}

/// Graph handles produced by one forward pass.
pub struct ForwardOutput {
    pub z0_hat: Var,
    pub length_logits: Var,
}

impl DenoiserParams {
    pub fn new(config: DenoiserConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let h = config.width;
        let d = config.embed_dim;
        let depth_gain = 1.0 / (2.0 * config.layers.max(1) as f64).sqrt();
        let mut b = Builder {
            names: Vec::new(),
            values: Vec::new(),
            rng,
        };
        let src_embed = b.tensor("source_embed".into(), config.vocab_size, h, 1.0);
        let mut encoder = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("encoder.{l}");
            encoder.push(EncoderBlock {
                ln_attn: b.norm(&format!("{p}.ln_attn"), h),
                attn: b.attn(&format!("{p}.attn"), h, depth_gain),
                ln_ffn: b.norm(&format!("{p}.ln_ffn"), h),
                ff1: b.linear(&format!("{p}.ff1"), h, config.ffn_width, 1.0),
                ff2: b.linear(&format!("{p}.ff2"), config.ffn_width, h, depth_gain),
            });
        }
        let enc_norm = b.norm("encoder.ln_out", h);
        let input_proj = b.linear("decoder.input_proj", 2 * d, h, 1.0);
        let time1 = b.linear("time.fc1", h, h, 1.0);
        let time2 = b.linear("time.fc2", h, h, 1.0);
        let mut decoder = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("decoder.{l}");
            decoder.push(DecoderBlock {
                ln_self: b.norm(&format!("{p}.ln_self"), h),
                self_attn: b.attn(&format!("{p}.self_attn"), h, depth_gain),
                ln_cross: b.norm(&format!("{p}.ln_cross"), h),
                cross_attn: b.attn(&format!("{p}.cross_attn"), h, depth_gain),
                ln_ffn: b.norm(&format!("{p}.ln_ffn"), h),
                ff1: b.linear(&format!("{p}.ff1"), h, config.ffn_width, 1.0),
                ff2: b.linear(&format!("{p}.ff2"), config.ffn_width, h, depth_gain),
            });
        }
        let dec_norm = b.norm("decoder.ln_out", h);
        let output_proj = b.linear("decoder.output_proj", h, d, 0.5);
        let length_head = b.linear("length_head", h, 2 * config.length_offset_k + 1, 0.05);
        let layout = Layout {
            src_embed,
            encoder,
            enc_norm,
            input_proj,
            time1,
            time2,
            decoder,
            dec_norm,
            output_proj,
            length_head,
        };
        Ok(Self {
            config,
            names: b.names,
            values: b.values,
            layout,
        })
    }

    /// Rebuilds parameters from named values (e.g. a checkpoint).
    pub fn from_named(config: DenoiserConfig, named: Vec<(String, Matrix)>) -> Result<Self> {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut fresh = Self::new(config, &mut rng)?;
        if named.len() != fresh.values.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                fresh.values.len(),
                named.len()
            )));
        }
        for (i, (name, m)) in named.into_iter().enumerate() {
            if name != fresh.names[i] || m.shape() != fresh.values[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {i}: expected {} {:?}, found {name} {:?}",
                    fresh.names[i],
                    fresh.values[i].shape(),
                    m.shape()
                )));
            }
            fresh.values[i] = m;
        }
        Ok(fresh)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn num_tensors(&self) -> usize {
        self.values.len()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|m| m.data().len()).sum()
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.values.iter().map(Matrix::shape).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Matrix::is_finite)
    }

    fn p(&self, g: &mut Graph, id: usize) -> Var {
        g.param(id, &self.values[id])
    }

    fn linear(&self, g: &mut Graph, x: Var, l: Linear) -> Var {
        let w = self.p(g, l.w);
        let b = self.p(g, l.b);
        let y = g.matmul(x, w);
        g.add_bias(y, b)
    }

    fn norm(&self, g: &mut Graph, x: Var, n: Norm) -> Var {
        let gamma = self.p(g, n.g);
        let beta = self.p(g, n.b);
        g.layer_norm(x, gamma, beta)
    }

    fn attend(
        &self,
        g: &mut Graph,
        query_in: Var,
        kv_in: Var,
        a: AttnBlock,
        q_segs: &[Range<usize>],
        k_segs: &[Range<usize>],
    ) -> Var {
        let q = self.linear(g, query_in, a.q);
        let k = self.linear(g, kv_in, a.k);
        let v = self.linear(g, kv_in, a.v);
        let o = g.attention(q, k, v, self.config.heads, q_segs.to_vec(), k_segs.to_vec());
        self.linear(g, o, a.o)
    }

    fn ffn(&self, g: &mut Graph, x: Var, ff1: Linear, ff2: Linear) -> Var {
        let h = self.linear(g, x, ff1);
        let h = g.silu(h);
        self.linear(g, h, ff2)
    }

    /// Encodes packed source sequences; returns the final-normed encoder rows.
    fn encode(&self, g: &mut Graph, sources: &[Vec<usize>]) -> Result<(Var, Vec<Range<usize>>)> {
        let lens: Vec<usize> = sources.iter().map(Vec::len).collect();
        let segs = segments(&lens);
        let mut ids = Vec::with_capacity(lens.iter().sum());
        for s in sources {
            for &id in s {
                if id >= self.config.vocab_size {
                    return Err(Error::TokenIndex {
                        id,
                        vocab: self.config.vocab_size,
                    });
                }
                ids.push(id);
            }
        }
        let table = self.p(g, self.layout.src_embed);
        let x = g.gather(table, ids);
        let pos = g.input(positional_rows(&segs, self.config.width));
        let mut x = g.add(x, pos);
        for blk in &self.layout.encoder {
            let h = self.norm(g, x, blk.ln_attn);
            let a = self.attend(g, h, h, blk.attn, &segs, &segs);
            x = g.add(x, a);
            let h = self.norm(g, x, blk.ln_ffn);
            let f = self.ffn(g, h, blk.ff1, blk.ff2);
            x = g.add(x, f);
        }
        let x = self.norm(g, x, self.layout.enc_norm);
        Ok((x, segs))
    }

    /// Time embedding for each entry of `t`, one row per entry.
    fn time_rows(&self, g: &mut Graph, t: &[f64]) -> Var {
        let h = self.config.width;
        let feats = Matrix::from_rows(
            &t.iter()
                .map(|&x| sinusoid(x, h, TIME_MAX_FREQ))
                .collect::<Vec<_>>(),
            h,
        );
        let f = g.input(feats);
        let e = self.linear(g, f, self.layout.time1);
        let e = g.silu(e);
        self.linear(g, e, self.layout.time2)
    }

    /// `H`-dimensional embedding of a single timestep.
    pub fn time_embedding(&self, t: f64) -> Result<Vec<f64>> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain {
                what: "t",
                value: t,
                domain: "[0, 1]",
            });
        }
        let mut g = Graph::inference();
        let v = self.time_rows(&mut g, &[t]);
        Ok(g.value(v).data().to_vec())
    }

    /// Builds the full forward pass into `g`. `z_t` and `self_cond` are
    /// packed `rows × D` nodes laid out by `lengths`.
    pub fn forward(
        &self,
        g: &mut Graph,
        z_t: Var,
        self_cond: Var,
        lengths: &[usize],
        sources: &[Vec<usize>],
        t: &[f64],
    ) -> Result<ForwardOutput> {
        let (enc, src_segs) = self.encode(g, sources)?;
        let pooled = g.segment_mean(enc, src_segs.clone());
        let length_logits = self.linear(g, pooled, self.layout.length_head);

        let tgt_segs = segments(lengths);
        let row_seq: Vec<usize> = lengths
            .iter()
            .enumerate()
            .flat_map(|(i, &l)| std::iter::repeat_n(i, l))
            .collect();
        let temb = self.time_rows(g, t);
        let temb_rows = g.gather(temb, row_seq);

        let inp = g.concat_cols(z_t, self_cond);
        let x = self.linear(g, inp, self.layout.input_proj);
        let pos = g.input(positional_rows(&tgt_segs, self.config.width));
        let mut x = g.add(x, pos);
        for blk in &self.layout.decoder {
            x = g.add(x, temb_rows);
            let h = self.norm(g, x, blk.ln_self);
            let a = self.attend(g, h, h, blk.self_attn, &tgt_segs, &tgt_segs);
            x = g.add(x, a);
            let h = self.norm(g, x, blk.ln_cross);
            let a = self.attend(g, h, enc, blk.cross_attn, &tgt_segs, &src_segs);
            x = g.add(x, a);
            let h = self.norm(g, x, blk.ln_ffn);
            let f = self.ffn(g, h, blk.ff1, blk.ff2);
            x = g.add(x, f);
        }
        let x = self.norm(g, x, self.layout.dec_norm);
        let z0_hat = self.linear(g, x, self.layout.output_proj);
        Ok(ForwardOutput {
            z0_hat,
            length_logits,
        })
    }

    /// Length distributions for a batch of sources.
    pub fn predict_lengths(&self, sources: &[Vec<usize>]) -> Result<Vec<LengthDistribution>> {
        if sources.iter().any(Vec::is_empty) {
            return Err(Error::Input("empty source sequence".into()));
        }
        let mut g = Graph::inference();
        let (enc, segs) = self.encode(&mut g, sources)?;
        let pooled = g.segment_mean(enc, segs);
        let logits = self.linear(&mut g, pooled, self.layout.length_head);
        let lv = g.value(logits);
        Ok(sources
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let row = lv.row(i);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                LengthDistribution {
                    k: self.config.length_offset_k,
                    source_len: s.len(),
                    log_probs: row.iter().map(|x| x - lse).collect(),
                }
            })
            .collect())
    }

    pub fn predict_length(&self, source: &[usize]) -> Result<LengthDistribution> {
        Ok(self.predict_lengths(&[source.to_vec()])?.remove(0))
    }

    /// Class index of the offset `target_len − source_len`, clamped to `[-K, K]`.
    pub fn length_class(&self, source_len: usize, target_len: usize) -> usize {
        let k = self.config.length_offset_k as i64;
        let off = (target_len as i64 - source_len as i64).clamp(-k, k);
        (off + k) as usize
    }
}

impl Denoiser for DenoiserParams {
    fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    fn denoise(&self, batch: &DenoiseBatch<'_>) -> Result<Matrix> {
        batch.validate(self.config.embed_dim)?;
        if batch.z_t.rows() == 0 {
            return Ok(Matrix::zeros(0, self.config.embed_dim));
        }
        let mut g = Graph::inference();
        let z = g.input(batch.z_t.clone());
        let sc = match batch.self_cond {
            Some(m) => g.input(m.clone()),
            None => g.input(Matrix::zeros(batch.z_t.rows(), self.config.embed_dim)),
        };
        let out = self.forward(&mut g, z, sc, batch.lengths, batch.sources, batch.t)?;
        Ok(g.value(out.z0_hat).clone())
    }
}

/// Testing double that returns fixed clean embeddings regardless of input.
#[derive(Clone, Debug)]
pub struct OracleDenoiser {
    truth: Matrix,
}

impl OracleDenoiser {
    /// `truth` holds the packed clean rows the oracle will return.
    pub fn new(truth: Matrix) -> Self {
        Self { truth }
    }
}

impl Denoiser for OracleDenoiser {
    fn embed_dim(&self) -> usize {
        self.truth.cols()
    }

    fn denoise(&self, batch: &DenoiseBatch<'_>) -> Result<Matrix> {
        if batch.z_t.shape() != self.truth.shape() {
            return Err(Error::Shape {
                expected: self.truth.shape(),
                got: batch.z_t.shape(),
            });
        }
        Ok(self.truth.clone())
    }
}
