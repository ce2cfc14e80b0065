//! Diagnostic experiments: nearest-neighbour recovery under corruption,
//! loss as a function of noise scale, the condition-reliance probe, and the
//! uniform-time / reweighted-uniform-σ equivalence check.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::neg_sq_distances;
use crate::data::SeqPair;
use crate::denoiser::{DenoiseBatch, Denoiser};
use crate::embedding::{sq_dist, EmbeddingTable};
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::schedule::{effective_weight, NoiseSchedule};
use crate::tensor::Matrix;

pub use crate::bleu::{corpus_bleu, sentence_bleu};

/// `n` points uniform on the open interval `(0, 1)`.
pub fn open_unit_grid(n: usize) -> Vec<f64> {
    (1..=n).map(|i| i as f64 / (n + 1) as f64).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryPoint {
    pub sigma: f64,
    pub accuracy: f64,
    /// Binomial standard error of `accuracy`.
    pub std_err: f64,
}

/// Nearest-neighbour recovery on a standard-Gaussian `V × D` table.
pub fn nn_recovery(
    v: usize,
    d: usize,
    sigma_grid: &[f64],
    samples: usize,
    seed: u64,
) -> Result<Vec<RecoveryPoint>> {
    if v < 2 || d == 0 {
        return Err(Error::Input(format!(
            "need V ≥ 2 and D ≥ 1, got V={v}, D={d}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[v as u64, d as u64]));
    let table = Matrix::from_fn(v, d, |_, _| rng.sample(StandardNormal));
    nn_recovery_on(&table, sigma_grid, samples, seed)
}

/// Nearest-neighbour recovery on a given table. The same clean indices and
/// noise draws are reused at every σ, so curves are smooth in σ.
pub fn nn_recovery_on(
    table: &Matrix,
    sigma_grid: &[f64],
    samples: usize,
    seed: u64,
) -> Result<Vec<RecoveryPoint>> {
    let (v, d) = table.shape();
    if v < 2 || d == 0 {
        return Err(Error::Input(
            "table needs at least 2 rows and 1 column".into(),
        ));
    }
    if samples == 0 {
        return Err(Error::Input("samples must be positive".into()));
    }
    for &s in sigma_grid {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::Domain {
                what: "σ",
                value: s,
                domain: "[0, 1]",
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x4E4E]));
    let idx: Vec<usize> = (0..samples).map(|_| rng.random_range(0..v)).collect();
    let eps = Matrix::from_fn(samples, d, |_, _| rng.sample(StandardNormal));
    const CHUNK: usize = 2048;
    let mut out = Vec::with_capacity(sigma_grid.len());
    for &sigma in sigma_grid {
        let a = (1.0 - sigma * sigma).max(0.0).sqrt();
        let mut hits = 0usize;
        for start in (0..samples).step_by(CHUNK) {
            let end = (start + CHUNK).min(samples);
            let z = Matrix::from_fn(end - start, d, |i, j| {
                a * table.get(idx[start + i], j) + sigma * eps.get(start + i, j)
            });
            let scores = neg_sq_distances(&z, table);
            for i in 0..z.rows() {
                let row = scores.row(i);
                let mut best = 0;
                for (k, &s) in row.iter().enumerate() {
                    if s > row[best] {
                        best = k;
                    }
                }
                if best == idx[start + i] {
                    hits += 1;
                }
            }
        }
        let p = hits as f64 / samples as f64;
        out.push(RecoveryPoint {
            sigma,
            accuracy: p,
            std_err: (p * (1.0 - p) / samples as f64).sqrt(),
        });
    }
    Ok(out)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Closed-form recovery accuracy for two rows at `±e₁`: `Φ(sqrt(1−σ²)/σ)`.
pub fn two_point_recovery(sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 1.0;
    }
    normal_cdf((1.0 - sigma * sigma).max(0.0).sqrt() / sigma)
}

/// Mean squared row distance between packed predictions and truth.
fn mean_row_sq_dist(a: &Matrix, b: &Matrix) -> f64 {
    let total: f64 = (0..a.rows()).map(|i| sq_dist(a.row(i), b.row(i))).sum();
    total / a.rows().max(1) as f64
}

/// Packs `z_t`, truth and batch metadata for a list of pairs.
struct Packed {
    sources: Vec<Vec<usize>>,
    lengths: Vec<usize>,
    z0: Matrix,
}

fn pack(pairs: &[&SeqPair], table: &EmbeddingTable) -> Result<Packed> {
    let ids: Vec<usize> = pairs.iter().flat_map(|p| p.tgt.iter().copied()).collect();
    Ok(Packed {
        sources: pairs.iter().map(|p| p.src.clone()).collect(),
        lengths: pairs.iter().map(|p| p.tgt.len()).collect(),
        z0: table.embed(&ids)?,
    })
}

fn corrupt(z0: &Matrix, a: &[f64], s: &[f64], lengths: &[usize], rng: &mut ChaCha8Rng) -> Matrix {
    let mut z = z0.clone();
    let mut r = 0;
    for (k, &n) in lengths.iter().enumerate() {
        for _ in 0..n {
            for x in z.row_mut(r) {
                let e: f64 = rng.sample(StandardNormal);
                *x = a[k] * *x + s[k] * e;
            }
            r += 1;
        }
    }
    z
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfilePoint {
    pub sigma: f64,
    pub loss: f64,
}

/// Mean diffusion loss on `pairs` when corrupted at exactly each σ. The
/// model is fed the timestep `σ⁻¹(σ)` of `schedule`.
pub fn loss_vs_sigma_profile<D: Denoiser + ?Sized>(
    denoiser: &D,
    table: &EmbeddingTable,
    pairs: &[SeqPair],
    sigma_grid: &[f64],
    schedule: NoiseSchedule,
    seed: u64,
) -> Result<Vec<ProfilePoint>> {
    if pairs.is_empty() {
        return Err(Error::Input("empty evaluation set".into()));
    }
    let refs: Vec<&SeqPair> = pairs.iter().collect();
    let packed = pack(&refs, table)?;
    let mut out = Vec::with_capacity(sigma_grid.len());
    for (gi, &sigma) in sigma_grid.iter().enumerate() {
        let t = schedule.sigma_inverse(sigma)?;
        let n = pairs.len();
        let a = vec![schedule.alpha(t)?; n];
        let s = vec![schedule.sigma(t)?; n];
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[gi as u64]));
        let z = corrupt(&packed.z0, &a, &s, &packed.lengths, &mut rng);
        let z_hat = denoiser.denoise(&DenoiseBatch {
            z_t: &z,
            lengths: &packed.lengths,
            sources: &packed.sources,
            t: &vec![t; n],
            self_cond: None,
        })?;
        out.push(ProfilePoint {
            sigma,
            loss: mean_row_sq_dist(&z_hat, &packed.z0),
        });
    }
    Ok(out)
}

/// Histogram of `σ(t)` for `t ~ U(t_min, 1)`, as counts over `bins` equal bins of `[0, 1]`.
pub fn sigma_histogram(
    schedule: NoiseSchedule,
    t_min: f64,
    bins: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let mut sampler = crate::schedule::ClippedTimeSampler::new(schedule, seed);
    sampler.set_t_min(t_min)?;
    let mut counts = vec![0; bins.max(1)];
    for _ in 0..n {
        let s = schedule.sigma(sampler.sample_timestep())?;
        let b = ((s * counts.len() as f64) as usize).min(counts.len() - 1);
        counts[b] += 1;
    }
    Ok(counts)
}

/// A source, its target, and a mismatched target of the same length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeTriple {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
    pub negative: Vec<usize>,
}

/// Pairs every example with a different target of the same length, drawn
/// with a seeded shuffle. Examples without such a partner are skipped.
pub fn probe_triples(pairs: &[SeqPair], seed: u64) -> Vec<ProbeTriple> {
    let mut by_len: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, p) in pairs.iter().enumerate() {
        by_len.entry(p.tgt.len()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x9E6]));
    let mut out = Vec::new();
    for (i, p) in pairs.iter().enumerate() {
        let mut cands: Vec<usize> = by_len[&p.tgt.len()]
            .iter()
            .copied()
            .filter(|&j| j != i && pairs[j].tgt != p.tgt)
            .collect();
        if cands.is_empty() {
            continue;
        }
        cands.shuffle(&mut rng);
        out.push(ProbeTriple {
            src: p.src.clone(),
            tgt: p.tgt.clone(),
            negative: pairs[cands[0]].tgt.clone(),
        });
    }
    out
}

/// Which timestep the probe feeds the model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum TauPolicy {
    /// The corruption timestep itself.
    Current,
    /// A fixed timestep regardless of the corruption.
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub t: f64,
    pub mse_to_truth: f64,
    pub mse_to_negative: f64,
}

/// Corrupts the negative targets at each `t`, asks the model for `ẑ0`
/// conditioned on the true source, and measures distances to both targets.
/// Noise draws depend only on `(seed, t index)`, so policies are comparable.
pub fn condition_reliance_probe<D: Denoiser + ?Sized>(
    denoiser: &D,
    table: &EmbeddingTable,
    triples: &[ProbeTriple],
    t_grid: &[f64],
    policy: TauPolicy,
    schedule: NoiseSchedule,
    seed: u64,
) -> Result<Vec<ProbeRow>> {
    if triples.is_empty() {
        return Err(Error::Input("no probe triples".into()));
    }
    for tr in triples {
        if tr.tgt.len() != tr.negative.len() {
            return Err(Error::Input(format!(
                "target length {} differs from negative length {}",
                tr.tgt.len(),
                tr.negative.len()
            )));
        }
    }
    let lengths: Vec<usize> = triples.iter().map(|t| t.tgt.len()).collect();
    let sources: Vec<Vec<usize>> = triples.iter().map(|t| t.src.clone()).collect();
    let truth = table.embed(
        &triples
            .iter()
            .flat_map(|t| t.tgt.iter().copied())
            .collect::<Vec<_>>(),
    )?;
    let neg = table.embed(
        &triples
            .iter()
            .flat_map(|t| t.negative.iter().copied())
            .collect::<Vec<_>>(),
    )?;
    let n = triples.len();
    let mut out = Vec::with_capacity(t_grid.len());
    for (gi, &t) in t_grid.iter().enumerate() {
        let a = vec![schedule.alpha(t)?; n];
        let s = vec![schedule.sigma(t)?; n];
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[gi as u64]));
        let z = corrupt(&neg, &a, &s, &lengths, &mut rng);
        let tau = match policy {
            TauPolicy::Current => t,
            TauPolicy::Fixed(x) => x,
        };
        let z_hat = denoiser.denoise(&DenoiseBatch {
            z_t: &z,
            lengths: &lengths,
            sources: &sources,
            t: &vec![tau; n],
            self_cond: None,
        })?;
        out.push(ProbeRow {
            t,
            mse_to_truth: mean_row_sq_dist(&z_hat, &truth),
            mse_to_negative: mean_row_sq_dist(&z_hat, &neg),
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceResult {
    pub lhs: f64,
    pub rhs: f64,
    pub relative_gap: f64,
    /// Monte-Carlo standard errors of the two estimates.
    pub lhs_std_err: f64,
    pub rhs_std_err: f64,
}

/// Diffusion loss of a frozen model at each of `sigmas`, one random
/// example and noise draw per entry. The model sees timestep `σ⁻¹(σ)` under
/// `feed_schedule`, so the loss is a fixed function of σ.
fn loss_at_sigmas<D: Denoiser + ?Sized>(
    denoiser: &D,
    table: &EmbeddingTable,
    pairs: &[SeqPair],
    sigmas: &[f64],
    feed_schedule: NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    const CHUNK: usize = 512;
    let mut out = Vec::with_capacity(sigmas.len());
    for chunk in sigmas.chunks(CHUNK) {
        let picked: Vec<&SeqPair> = chunk
            .iter()
            .map(|_| &pairs[rng.random_range(0..pairs.len())])
            .collect();
        let packed = pack(&picked, table)?;
        let a: Vec<f64> = chunk
            .iter()
            .map(|s| (1.0 - s * s).max(0.0).sqrt())
            .collect();
        let z = corrupt(&packed.z0, &a, chunk, &packed.lengths, rng);
        let t: Vec<f64> = chunk
            .iter()
            .map(|&s| feed_schedule.sigma_inverse(s))
            .collect::<Result<_>>()?;
        let z_hat = denoiser.denoise(&DenoiseBatch {
            z_t: &z,
            lengths: &packed.lengths,
            sources: &packed.sources,
            t: &t,
            self_cond: None,
        })?;
        let mut r = 0;
        for &n in &packed.lengths {
            let l: f64 = (r..r + n)
                .map(|i| sq_dist(z_hat.row(i), packed.z0.row(i)))
                .sum::<f64>()
                / n as f64;
            out.push(l);
            r += n;
        }
    }
    Ok(out)
}

fn mean_and_se(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, (var / n).sqrt())
}

/// Compares `E_{t~U(0,1)} ℓ(σ_from(t))` with `E_{σ~U(0,1)} w(σ)·ℓ(σ)`,
/// where `w` converts uniform time under `from` into uniform σ
/// (`w = dt/dσ`). With `from = linear` both sides sample the same law.
pub fn schedule_equivalence_check<D: Denoiser + ?Sized>(
    denoiser: &D,
    table: &EmbeddingTable,
    pairs: &[SeqPair],
    from: NoiseSchedule,
    n_samples: usize,
    seed: u64,
) -> Result<EquivalenceResult> {
    if pairs.is_empty() || n_samples < 2 {
        return Err(Error::Input(
            "need a non-empty dataset and at least 2 samples".into(),
        ));
    }
    let feed = NoiseSchedule::Linear;
    // keep σ away from the endpoints where dt/dσ is undefined
    let open = |u: f64| u.clamp(1e-12, 1.0 - 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1]));
    let lhs_sigmas: Vec<f64> = (0..n_samples)
        .map(|_| from.sigma_unchecked(open(rng.random())))
        .collect();
    let lhs_vals = loss_at_sigmas(denoiser, table, pairs, &lhs_sigmas, feed, &mut rng)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[2]));
    let rhs_sigmas: Vec<f64> = (0..n_samples).map(|_| open(rng.random())).collect();
    let rhs_loss = loss_at_sigmas(denoiser, table, pairs, &rhs_sigmas, feed, &mut rng)?;
    let rhs_vals: Vec<f64> = rhs_sigmas
        .iter()
        .zip(&rhs_loss)
        .map(|(&s, &l)| Ok(effective_weight(from, NoiseSchedule::Linear, s)? * l))
        .collect::<Result<_>>()?;
    let (lhs, lhs_se) = mean_and_se(&lhs_vals);
    let (rhs, rhs_se) = mean_and_se(&rhs_vals);
    Ok(EquivalenceResult {
        lhs,
        rhs,
        relative_gap: (lhs - rhs).abs() / lhs.abs().max(f64::MIN_POSITIVE),
        lhs_std_err: lhs_se,
        rhs_std_err: rhs_se,
    })
}

/// Writes a CSV file whose first lines are `# key = value` comments.
pub fn write_csv(
    path: &Path,
    meta: &[(String, String)],
    header: &[&str],
    rows: &[Vec<f64>],
) -> Result<()> {
    let mut s = String::new();
    for (k, v) in meta {
        let _ = writeln!(s, "# {k} = {v}");
    }
    s.push_str(&header.join(","));
    s.push('\n');
    for r in rows {
        let line: Vec<String> = r.iter().map(|x| format!("{x}")).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Minimal SVG line chart; one polyline per series on shared axes.
pub fn line_plot_svg(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 56.0;
    const COLORS: [&str; 6] = [
        "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
    ];
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for &(x, y) in pts.filter(|(x, y)| x.is_finite() && y.is_finite()) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<path d="M{M},{M} V{} H{}" fill="none" stroke="black"/>"#,
        H - M,
        W - M
    );
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{xv:.3}</text>"#,
            sx(xv),
            H - M + 16.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{yv:.3}</text>"#,
            M - 4.0,
            sy(yv) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        W / 2.0,
        H - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    for (i, (name, p)) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let d: Vec<String> = p
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="1.5"/>"#,
            d.join(" ")
        );
        let ly = M + 14.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly}" fill="{c}">{}</text>"#,
            W - M - 120.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::OracleDenoiser;

    #[test]
    fn recovery_is_exact_without_noise_and_decreasing() {
        let grid = [0.0, 0.3, 0.6, 0.9];
        let r = nn_recovery(50, 8, &grid, 2000, 1).unwrap();
        assert_eq!(r[0].accuracy, 1.0);
        for w in r.windows(2) {
            assert!(w[1].accuracy <= w[0].accuracy + 0.02);
        }
        assert_eq!(r, nn_recovery(50, 8, &grid, 2000, 1).unwrap());
    }

    #[test]
    fn two_point_closed_form() {
        let table = Matrix::from_vec(2, 3, vec![1.0, 0.0, 0.0, -1.0, 0.0, 0.0]);
        let grid = [0.2, 0.5, 0.8, 0.95];
        let r = nn_recovery_on(&table, &grid, 20_000, 3).unwrap();
        for p in r {
            let expect = two_point_recovery(p.sigma);
            let se = (expect * (1.0 - expect) / 20_000.0).sqrt().max(1e-4);
            assert!((p.accuracy - expect).abs() < 4.0 * se, "{p:?} vs {expect}");
        }
    }

    #[test]
    fn normal_cdf_values() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((normal_cdf(1.0) - 0.841_344_746).abs() < 1e-9);
        assert!((normal_cdf(-1.96) - 0.024_997_895).abs() < 1e-9);
    }

    #[test]
    fn probe_triples_match_lengths() {
        let pairs: Vec<SeqPair> = (0..12)
            .map(|i| SeqPair {
                src: vec![4 + i],
                tgt: vec![4 + i; 2 + i % 3],
            })
            .collect();
        let tr = probe_triples(&pairs, 0);
        assert_eq!(tr.len(), 12);
        for t in &tr {
            assert_eq!(t.tgt.len(), t.negative.len());
            assert_ne!(t.tgt, t.negative);
        }
    }

    #[test]
    fn probe_rejects_length_mismatch() {
        let table = EmbeddingTable::new(Matrix::from_fn(8, 2, |i, j| (i * 2 + j) as f64));
        let o = OracleDenoiser::new(Matrix::zeros(2, 2));
        let bad = [ProbeTriple {
            src: vec![4],
            tgt: vec![4, 5],
            negative: vec![6],
        }];
        let r = condition_reliance_probe(
            &o,
            &table,
            &bad,
            &[0.5],
            TauPolicy::Current,
            NoiseSchedule::Linear,
            0,
        );
        assert!(matches!(r, Err(Error::Input(_))));
    }

    #[test]
    fn equivalence_with_identity_weighting() {
        // A stand-in model whose loss is a smooth function of σ only.
        struct Shrink;
        impl Denoiser for Shrink {
            fn embed_dim(&self) -> usize {
                2
            }
            fn denoise(&self, b: &DenoiseBatch<'_>) -> Result<Matrix> {
                let mut out = b.z_t.clone();
                let mut r = 0;
                for (&n, &t) in b.lengths.iter().zip(b.t) {
                    for i in r..r + n {
                        for x in out.row_mut(i) {
                            *x *= 1.0 - t;
                        }
                    }
                    r += n;
                }
                Ok(out)
            }
        }
        let table = EmbeddingTable::new(Matrix::from_fn(8, 2, |i, j| {
            (i as f64 - 4.0) * 0.3 + j as f64 * 0.1
        }));
        let pairs: Vec<SeqPair> = (0..6)
            .map(|i| SeqPair {
                src: vec![4],
                tgt: vec![4 + i % 4, 5],
            })
            .collect();
        let lin =
            schedule_equivalence_check(&Shrink, &table, &pairs, NoiseSchedule::Linear, 20_000, 1)
                .unwrap();
        assert!(lin.relative_gap < 4.0 * (lin.lhs_std_err + lin.rhs_std_err) / lin.lhs);
        let sq =
            schedule_equivalence_check(&Shrink, &table, &pairs, NoiseSchedule::Sqrt, 20_000, 1)
                .unwrap();
        assert!(sq.relative_gap < 4.0 * (sq.lhs_std_err + sq.rhs_std_err) / sq.lhs);
    }

    #[test]
    fn histogram_respects_threshold() {
        let h = sigma_histogram(NoiseSchedule::Linear, 0.5, 10, 10_000, 2).unwrap();
        assert_eq!(h.iter().sum::<usize>(), 10_000);
        assert!(h[..5].iter().all(|&c| c == 0));
    }

    #[test]
    fn svg_contains_series() {
        let s = line_plot_svg(
            "t",
            "x",
            "y",
            &[("a<b".into(), vec![(0.0, 1.0), (1.0, 0.5)])],
        );
        assert!(s.starts_with("<svg") && s.contains("polyline") && s.contains("a&lt;b"));
    }
}
