//! Strong convergence of the Euler scheme: runs at several step sizes share
//! one Brownian path and one set of Poisson points with a fine reference run.
//!
//! cargo run --release --example strong_order

use switching_mkv::ctmc::QMatrix;
use switching_mkv::experiments::{strong_order_experiment, StrongOrderConfig};
use switching_mkv::model::{switching_ou, uniform_marks};
use switching_mkv::noise::PointLaw;
use switching_mkv::simulate::RunSpec;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let q = QMatrix::build(&[vec![-1.0, 1.0], vec![2.0, -2.0]])?;
    let model = switching_ou(
        &[1.0, 2.0],
        &[1.0, -1.0],
        &[0.5, 0.3],
        &[0.2, 0.4],
        uniform_marks(2.0, 0.0, 1.0),
    )?;
    let spec = RunSpec::new(1.0, 1.0 / 256.0, PointLaw::standard_gaussian(1));
    let cfg = StrongOrderConfig {
        multipliers: vec![1, 2, 4, 8, 16],
        refinement: 16,
        particles: 64,
        replicates: 8,
        slope_threshold: -0.3,
    };
    let report = strong_order_experiment(&model, &q, 0, &spec, &cfg, 3)?;
    for row in &report.rows {
        println!("{}", row.iter().map(|v| format!("{v:>12.4e}")).collect::<String>());
    }
    for line in report.fit_lines() {
        println!("{line}");
    }
    for v in &report.verdicts {
        println!("[{}] {}: {}", if v.passed { "pass" } else { "FAIL" }, v.name, v.detail);
    }
    Ok(())
}
