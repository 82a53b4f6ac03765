//! Fast switching: as the chain speeds up (generator Q / eps) the switching
//! system approaches the system with coefficients averaged over the
//! invariant law.
//!
//! cargo run --release --example averaging_principle

use std::sync::Arc;

use switching_mkv::ctmc::QMatrix;
use switching_mkv::experiments::{averaging_experiment, AveragingConfig};
use switching_mkv::model::{switching_ou, uniform_marks, Coefficients};
use switching_mkv::noise::PointLaw;
use switching_mkv::simulate::RunSpec;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let q = QMatrix::build(&[vec![-1.0, 1.0], vec![2.0, -2.0]])?;
    // Drift switches; diffusion and jump sizes do not. With state-dependent
    // noise the pathwise limit would not be the averaged equation.
    let model: Arc<dyn Coefficients> = Arc::new(switching_ou(
        &[1.0, 2.0],
        &[1.0, -1.0],
        &[0.4, 0.4],
        &[0.3, 0.3],
        uniform_marks(2.0, 0.0, 1.0),
    )?);
    let spec = RunSpec::new(1.0, 1e-3, PointLaw::standard_gaussian(1));
    let cfg = AveragingConfig::new(vec![1.0, 0.1, 0.01, 0.001]);
    let report = averaging_experiment(model, &q, 0, &spec, &cfg, 20240601)?;
    println!("{:>8} {:>14} {:>12}", "eps", "E|Y-Ybar|^2", "se");
    for row in &report.rows {
        println!("{:>8} {:>14.4e} {:>12.3e}", row[0], row[1], row[2]);
    }
    for v in &report.verdicts {
        println!("[{}] {}: {}", if v.passed { "pass" } else { "FAIL" }, v.name, v.detail);
    }
    Ok(())
}
