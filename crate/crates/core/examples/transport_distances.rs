//! Exact Wasserstein distances between empirical measures: the assignment
//! solver, the one-dimensional sorted and quantile formulas, and the
//! index coupling upper bound.
//!
//! cargo run --example transport_distances

use switching_mkv::measures::{
    coupling_upper_bound, optimal_matching, w1_assignment, w2_1d, w2_assignment,
    w2_squared_1d_quantile, EmpiricalMeasure,
};
use switching_mkv::noise::{derive_stream, PointLaw};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut stream = derive_stream(1, "example", 0);
    let gauss = PointLaw::standard_gaussian(2);
    let a = EmpiricalMeasure::new(2, gauss.sample_many(&mut stream, 200))?;
    let b = a.translated(&[1.0, -0.5]);
    // A translation by v moves W_2 by exactly |v|.
    println!("W2(a, a + v) = {:.12}  |v| = {:.12}", w2_assignment(&a, &b)?, 1.25f64.sqrt());

    let c = EmpiricalMeasure::new(2, gauss.sample_many(&mut stream, 200))?;
    println!("W1(a, c) = {:.6}", w1_assignment(&a, &c)?);
    println!("W2(a, c) = {:.6}", w2_assignment(&a, &c)?);
    println!("index coupling bound on W2^2 = {:.6}", coupling_upper_bound(&a, &c)?);
    let m = optimal_matching(&a, &c, true, usize::MAX)?;
    println!("first matches {:?}", &m.row_to_col[..8]);

    // One dimension: sorting is optimal, and unequal sizes go through the
    // quantile coupling.
    let x = EmpiricalMeasure::from_scalars(&[0.3, -1.0, 2.0, 0.7])?;
    let y = EmpiricalMeasure::from_scalars(&[1.0, 0.0, -0.5, 0.2])?;
    println!("1-d W2 sorted {:.6} assignment {:.6}", w2_1d(&x, &y)?, w2_assignment(&x, &y)?);
    let z = EmpiricalMeasure::from_scalars(&[0.0, 1.0, 2.0])?;
    println!("quantile W2^2 (4 vs 3 atoms) = {:.6}", w2_squared_1d_quantile(&x, &z)?);
    Ok(())
}
