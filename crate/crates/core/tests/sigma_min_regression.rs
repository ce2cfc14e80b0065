use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seqdiff::embedding::{min_pairwise_delta_sq, sigma_min, PAD};
use seqdiff::EmbeddingTable;

// Computed once by an independent brute-force pass (numpy, all pairs) over
// the table this seed produces.
const DELTA_SQ: f64 = 0.4057455409831253;
const SIGMA_MIN: f64 = 0.5372464080936716;

#[test]
fn gaussian_table_threshold_is_pinned() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let table = EmbeddingTable::gaussian(10_000, 16, 1.0, &mut rng);
    let d = min_pairwise_delta_sq(table.matrix(), &[PAD]).unwrap();
    let s = sigma_min(&table).unwrap();
    assert!((d - DELTA_SQ).abs() / DELTA_SQ < 1e-12, "δ² = {d}");
    assert!((s - SIGMA_MIN).abs() / SIGMA_MIN < 1e-12, "σ_min = {s}");
}
