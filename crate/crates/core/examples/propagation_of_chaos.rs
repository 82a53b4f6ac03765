//! Propagation of chaos for the switching mean-field OU model: the
//! interacting system against its synchronously coupled auxiliary system,
//! for increasing N.
//!
//! cargo run --release --example propagation_of_chaos

use switching_mkv::ctmc::QMatrix;
use switching_mkv::experiments::{chaos_experiment, ChaosConfig};
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
    let spec = RunSpec::new(1.0, 1e-3, PointLaw::standard_gaussian(1));
    let cfg = ChaosConfig::new(vec![50, 100, 200, 400, 800]);
    let report = chaos_experiment(&model, &q, 0, &spec, &cfg, 20240601)?;

    println!("{:>6} {:>14} {:>12} {:>14} {:>12}", "N", "pathwise", "se", "W2^2", "se");
    for row in &report.rows {
        println!(
            "{:>6} {:>14.6e} {:>12.3e} {:>14.6e} {:>12.3e}",
            row[0], row[1], row[2], row[3], row[4]
        );
    }
    for line in report.fit_lines() {
        println!("{line}");
    }
    for (key, value) in &report.metadata {
        println!("{key} = {value}");
    }
    for v in &report.verdicts {
        println!("[{}] {}: {}", if v.passed { "pass" } else { "FAIL" }, v.name, v.detail);
    }
    println!("elapsed {:.1}s", report.elapsed_seconds);
    Ok(())
}
