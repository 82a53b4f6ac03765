//! Probing a model's Lipschitz and growth constants at random points and
//! random clouds, for a built-in model and for a user-defined one.
//!
//! cargo run --example assumption_check

use switching_mkv::model::{builtin_model, validate_assumptions, Coefficients, MeasureView};
use switching_mkv::noise::{derive_stream, JumpSpec, PointLaw};

/// b = -x + sin(mean), sigma = 0.5 in state 0 and 1 in state 1,
/// g = 0.1 z.
#[derive(Debug)]
struct Custom(JumpSpec);

impl Coefficients for Custom {
    fn dim(&self) -> usize {
        1
    }
    fn states(&self) -> usize {
        2
    }
    fn jump_spec(&self) -> &JumpSpec {
        &self.0
    }
    fn drift(&self, x: &[f64], mu: &MeasureView, _: usize, out: &mut [f64]) {
        out[0] = -x[0] + mu.mean()[0].sin();
    }
    fn diffusion(&self, _: &[f64], _: &MeasureView, state: usize, out: &mut [f64]) {
        out[0] = if state == 0 { 0.5 } else { 1.0 };
    }
    fn jump(&self, _: &[f64], _: &MeasureView, _: usize, z: &[f64], out: &mut [f64]) {
        out[0] = 0.1 * z[0];
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let params: toml::Table = toml::from_str(
        r#"
        a = [1.0, 2.0]
        c = [1.0, -1.0]
        s = [0.5, 0.3]
        gamma = [0.2, 0.4]
        jumps = { rate = 2.0, marks = { law = "uniform-box", lower = [0.0], upper = [1.0] } }
        "#,
    )?;
    let ou = builtin_model("switching-mf-ou", &params)?;
    let custom = Custom(JumpSpec::new(1.0, PointLaw::standard_gaussian(1)));
    let models: [(&str, &dyn Coefficients); 2] = [("switching-mf-ou", ou.as_ref()), ("custom", &custom)];
    for (name, model) in models {
        let mut stream = derive_stream(5, "probe", 0);
        let r = validate_assumptions(model, 2000, 5.0, &mut stream)?;
        println!("{name}: K1 >= {:.4}, K2 >= {:.4} over {} probes", r.k1, r.k2, r.probes);
        if let Some(w) = &r.k1_witness {
            println!("  Lipschitz witness: state {} x {:.3?} y {:.3?}", w.state, w.x, w.y);
        }
    }
    Ok(())
}
