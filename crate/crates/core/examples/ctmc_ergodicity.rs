//! The switching chain on its own: invariant law, transition matrices,
//! exponential convergence in total variation and sampled paths.
//!
//! cargo run --example ctmc_ergodicity

use switching_mkv::ctmc::{ergodic_profile, invariant_measure, sample_path, transition_matrix, QMatrix};
use switching_mkv::noise::derive_stream;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // Off-diagonal rates; the diagonal is filled in.
    let q = QMatrix::from_off_diagonal(&[
        vec![0.0, 1.0, 0.5],
        vec![2.0, 0.0, 1.0],
        vec![0.5, 0.5, 0.0],
    ])?;
    let pi = invariant_measure(&q)?;
    println!("pi = {:?}", pi.weights());
    println!("P(1) =\n{:.6}", transition_matrix(&q, 1.0)?);

    let grid: Vec<f64> = (0..=20).map(|k| 0.25 * k as f64).collect();
    let profile = ergodic_profile(&q, &grid)?;
    println!("{:>6} {:>12} {:>12} {:>12}", "t", "tv(0)", "tv(1)", "tv(2)");
    for (j, t) in grid.iter().enumerate().step_by(4) {
        println!(
            "{t:>6.2} {:>12.4e} {:>12.4e} {:>12.4e}",
            profile.tv[0][j], profile.tv[1][j], profile.tv[2][j]
        );
    }
    println!("fitted decay rate {:.4}", profile.decay_rate);

    // Occupation fractions of one long path approach pi. A time scale
    // eps < 1 speeds the chain up by 1/eps.
    for eps in [1.0, 0.1] {
        let mut stream = derive_stream(7, "omega0", 0);
        let path = sample_path(&q, 0, 200.0, eps, &mut stream)?;
        let fractions: Vec<f64> = path.occupation(q.size()).iter().map(|t| t / 200.0).collect();
        println!("eps = {eps}: {} jumps, occupation {fractions:.3?}", path.jump_count());
    }
    Ok(())
}
