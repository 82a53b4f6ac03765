//! Labelled random streams: the same (root, component, index) always gives
//! the same numbers, so particles draw their noise independently of thread
//! scheduling. Also shows Poisson batches and compensated sums.
//!
//! cargo run --example noise_streams

use switching_mkv::noise::{brownian_increments, compensate_integral, derive_stream, sample_jump_batch, JumpSpec, PointLaw};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut s = derive_stream(2024, "omega1", 3);
    let first: Vec<f64> = (0..3).map(|_| s.standard_normal()).collect();
    let mut again = derive_stream(2024, "omega1", 3);
    let second: Vec<f64> = (0..3).map(|_| again.standard_normal()).collect();
    println!("particle 3, twice: {first:.4?} {second:.4?}");
    let mut other = derive_stream(2024, "omega1", 4);
    println!("particle 4: {:.4?}", (0..3).map(|_| other.standard_normal()).collect::<Vec<_>>());

    let dw = brownian_increments(&mut s, 0.01, 2, 5)?;
    println!("five 2-d Brownian increments, h = 0.01: {dw:.4?}");

    let spec = JumpSpec::new(3.0, PointLaw::Gaussian { mean: vec![0.5], std: 0.3 });
    let mut js = derive_stream(2024, "omega1-jump", 0);
    let batch = sample_jump_batch(&spec, 0.0, 1.0, &mut js)?;
    let marks: Vec<f64> = (0..batch.len()).map(|k| batch.mark(k)[0]).collect();
    println!("{} jumps at {:.3?}", batch.len(), batch.times);
    // ∫∫ z Ñ(ds, dz) = sum of marks - rate * E z * h.
    println!("compensated sum {:.4}", compensate_integral(&batch, &marks, 3.0 * 0.5, 1.0)?);
    Ok(())
}
