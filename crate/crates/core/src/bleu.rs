//! Corpus BLEU and the smoothed sentence-level variant used as MBR utility.

use std::collections::HashMap;

use crate::error::{Error, Result};

const MAX_N: usize = 4;

fn ngram_counts(seq: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut m = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// `(clipped matches, hypothesis n-grams)` for each order 1..=4.
fn match_stats(hyp: &[usize], reference: &[usize]) -> [(usize, usize); MAX_N] {
    let mut out = [(0, 0); MAX_N];
    for (k, slot) in out.iter_mut().enumerate() {
        let n = k + 1;
        let h = ngram_counts(hyp, n);
        let r = ngram_counts(reference, n);
        let matched = h.iter().map(|(g, &c)| c.min(*r.get(g).unwrap_or(&0))).sum();
        *slot = (matched, hyp.len().saturating_sub(n - 1));
    }
    out
}

fn brevity_penalty(hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len == 0 {
        0.0
    } else if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    }
}

/// Corpus-level BLEU in `[0, 100]`: pooled clipped n-gram precisions for
/// n ≤ 4, geometric mean, brevity penalty over total lengths.
pub fn corpus_bleu(hypotheses: &[Vec<usize>], references: &[Vec<usize>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::Input(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::Undefined("BLEU of an empty corpus".into()));
    }
    let mut matched = [0usize; MAX_N];
    let mut total = [0usize; MAX_N];
    let (mut c, mut r) = (0, 0);
    for (h, rf) in hypotheses.iter().zip(references) {
        for (k, (m, t)) in match_stats(h, rf).into_iter().enumerate() {
            matched[k] += m;
            total[k] += t;
        }
        c += h.len();
        r += rf.len();
    }
    if matched.iter().any(|&m| m == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..MAX_N)
        .map(|k| (matched[k] as f64 / total[k] as f64).ln())
        .sum::<f64>()
        / MAX_N as f64;
    Ok(100.0 * brevity_penalty(c, r) * log_p.exp())
}

/// Sentence BLEU in `[0, 100]` with add-one smoothing on every precision.
pub fn sentence_bleu(hyp: &[usize], reference: &[usize]) -> f64 {
    if hyp.is_empty() {
        return 0.0;
    }
    let log_p: f64 = match_stats(hyp, reference)
        .iter()
        .map(|&(m, t)| ((m + 1) as f64 / (t + 1) as f64).ln())
        .sum::<f64>()
        / MAX_N as f64;
    100.0 * brevity_penalty(hyp.len(), reference.len()) * log_p.exp()
}
