//! Nearest-neighbour recovery of noisy Gaussian embeddings.
//!
//! For each vocabulary size and dimension, draws `z = α·e + σ·ε` around a
//! random row `e` and reports how often the nearest row is `e` again.
//!
//!     cargo run --release --example nn_recovery [samples]

use seqdiff::analysis::{nn_recovery, nn_recovery_on, two_point_recovery};
use seqdiff::Matrix;

fn main() -> seqdiff::Result<()> {
    let samples: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(10_000);
    let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();

    print!("{:>12}", "V, D \\ σ");
    for s in &grid {
        print!("{s:>7.1}");
    }
    println!();
    for v in [100, 1000] {
        for d in [16, 64, 128] {
            let curve = nn_recovery(v, d, &grid, samples, 0)?;
            print!("{:>12}", format!("{v}, {d}"));
            for p in &curve {
                print!("{:>7.3}", p.accuracy);
            }
            println!();
        }
    }

    // two rows at ±e₁ have a closed form
    let mut two = Matrix::zeros(2, 8);
    two.set(0, 0, 1.0);
    two.set(1, 0, -1.0);
    println!("\ntwo rows at ±e1: simulated vs closed form");
    for p in nn_recovery_on(&two, &[0.3, 0.6, 0.9], samples, 1)? {
        println!(
            "  σ = {:.1}: {:.4} ± {:.4} vs {:.4}",
            p.sigma,
            p.accuracy,
            p.std_err,
            two_point_recovery(p.sigma)
        );
    }
    Ok(())
}
