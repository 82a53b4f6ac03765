//! One interacting particle system under regime switching, with the
//! ensemble mean checked against its closed form along the sampled path.
//!
//! cargo run --release --example particle_system

use switching_mkv::ctmc::QMatrix;
use switching_mkv::model::{switching_ou, uniform_marks};
use switching_mkv::noise::PointLaw;
use switching_mkv::simulate::{run_particle_system, RunSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let q = QMatrix::build(&[vec![-1.0, 1.0], vec![2.0, -2.0]])?;
    let model = switching_ou(
        &[1.0, 2.0],
        &[1.0, -1.0],
        &[0.5, 0.3],
        &[0.2, 0.4],
        uniform_marks(2.0, 0.0, 1.0),
    )?;
    let spec = RunSpec::new(2.0, 1e-3, PointLaw::standard_gaussian(1));
    let n = 2000;
    let ens = run_particle_system(&model, &q, 0, n, &spec, 42, 1.0)?;
    println!("regime switches at {:.3?}", ens.path.jump_times);

    // The interaction pulls every particle to the mean, which then only
    // feels c and the noise: m(t) = m(0) + ∫ c ds.
    println!("{:>6} {:>6} {:>12} {:>12} {:>10}", "t", "state", "mean", "oracle", "z");
    for j in (0..ens.grid.len()).step_by(ens.grid.len() / 10) {
        let t = ens.times()[j];
        let mean = ens.mean_at(j)[0];
        let oracle = model.mean_oracle(&[0.0], &ens.path, t)[0];
        let se = (model.mean_noise_variance(&[1.0], &ens.path, t)[0] / n as f64).sqrt();
        let z = if se > 0.0 { (mean - oracle) / se } else { 0.0 };
        println!("{t:>6.3} {:>6} {mean:>12.5} {oracle:>12.5} {z:>10.2}", ens.states[j]);
    }
    Ok(())
}
