//! Decay of `E W_2^2(mu_N, mu)` for i.i.d. samples: a 1-D Gaussian against a
//! 100k reference cloud, and the uniform law on the unit cube in 5-D.
//!
//! Pass `--quick` for a reduced 5-D size range.

use switching_mkv::experiments::{fg14_experiment, Fg14Config};
use switching_mkv::noise::PointLaw;

fn show(cfg: &Fg14Config, seed: u64) {
    let report = fg14_experiment(cfg, seed).expect("experiment runs");
    println!("d = {}", cfg.law.dim());
    println!("{}", report.columns.join("\t"));
    for row in &report.rows {
        println!("{}\t{:.6e}\t{:.2e}", row[0], row[1], row[2]);
    }
    for line in report.fit_lines() {
        println!("fit {line}");
    }
    for v in &report.verdicts {
        println!("{}: {} ({})", v.name, if v.passed { "pass" } else { "fail" }, v.detail);
    }
    println!("elapsed {:.1}s\n", report.elapsed_seconds);
}

fn main() {
    let quick = std::env::args().any(|a| a == "--quick");
    let sizes: Vec<usize> = (0..7).map(|k| 100 << k).collect();

    show(&Fg14Config::new(PointLaw::standard_gaussian(1), sizes.clone()), 7);

    let cube = PointLaw::UniformBox {
        lower: vec![0.0; 5],
        upper: vec![1.0; 5],
    };
    let sizes5 = if quick { sizes[..4].to_vec() } else { sizes };
    show(&Fg14Config::new(cube, sizes5), 8);
}
