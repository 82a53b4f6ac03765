//! The conditional law as a fixed point: iterate the decoupled map
//! mu -> law(X^mu) along one chain path and watch the sup-in-time W_2
//! distance between iterates contract.
//!
//! cargo run --release --example picard_fixed_point

use switching_mkv::ctmc::QMatrix;
use switching_mkv::experiments::picard_experiment;
use switching_mkv::model::{switching_ou, uniform_marks};
use switching_mkv::noise::PointLaw;
use switching_mkv::simulate::{chain_path_for, PicardOptions, RunSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let q = QMatrix::build(&[vec![-1.0, 1.0], vec![2.0, -2.0]])?;
    let model = switching_ou(
        &[1.0, 2.0],
        &[1.0, -1.0],
        &[0.5, 0.3],
        &[0.2, 0.4],
        uniform_marks(2.0, 0.0, 1.0),
    )?;
    let spec = RunSpec::new(1.0, 1e-2, PointLaw::standard_gaussian(1));
    let root = 11;
    let path = chain_path_for(&q, 0, spec.horizon, 1.0, root)?;
    let opts = PicardOptions {
        size: 1000,
        tol: 1e-6,
        max_iter: 30,
    };
    let report = picard_experiment(&model, path, &spec, &opts, root, Some(&model))?;
    println!("{:>4} {:>14} {:>10}", "n", "distance", "ratio");
    for row in &report.rows {
        println!("{:>4} {:>14.4e} {:>10.4}", row[0], row[1], row[2]);
    }
    for v in &report.verdicts {
        println!("[{}] {}: {}", if v.passed { "pass" } else { "FAIL" }, v.name, v.detail);
    }
    Ok(())
}
