use std::sync::Arc;

use proptest::prelude::*;
use switching_mkv::ctmc::ProbVector;
use switching_mkv::model::{
    average, builtin_model, switching_ou, uniform_marks, validate_assumptions, Coefficients,
    ConstantModel, ConstantParams, MeasureView, ModelError, SwitchingMfOu,
};
use switching_mkv::noise::{derive_stream, Envelope, JumpSpec, PointLaw};

/// `b = a x`, constant `sigma` and `g`.
#[derive(Debug)]
struct Linear {
    a: f64,
    jumps: JumpSpec,
}

impl Coefficients for Linear {
    fn dim(&self) -> usize {
        1
    }
    fn states(&self) -> usize {
        1
    }
    fn jump_spec(&self) -> &JumpSpec {
        &self.jumps
    }
    fn drift(&self, x: &[f64], _: &MeasureView, _: usize, out: &mut [f64]) {
        out[0] = self.a * x[0];
    }
    fn diffusion(&self, _: &[f64], _: &MeasureView, _: usize, out: &mut [f64]) {
        out[0] = 0.7;
    }
    fn jump(&self, _: &[f64], _: &MeasureView, _: usize, _: &[f64], out: &mut [f64]) {
        out[0] = 0.2;
    }
    fn g_state_free(&self) -> bool {
        true
    }
}

/// Claims a state-free jump coefficient but uses `x`.
#[derive(Debug)]
struct Liar(JumpSpec);

impl Coefficients for Liar {
    fn dim(&self) -> usize {
        1
    }
    fn states(&self) -> usize {
        1
    }
    fn jump_spec(&self) -> &JumpSpec {
        &self.0
    }
    fn drift(&self, _: &[f64], _: &MeasureView, _: usize, out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn diffusion(&self, _: &[f64], _: &MeasureView, _: usize, out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn jump(&self, x: &[f64], _: &MeasureView, _: usize, z: &[f64], out: &mut [f64]) {
        out[0] = x[0] * z[0];
    }
    fn g_state_free(&self) -> bool {
        true
    }
}

/// Pointwise sum of two models sharing a jump spec.
#[derive(Debug)]
struct Sum(SwitchingMfOu, SwitchingMfOu);

impl Coefficients for Sum {
    fn dim(&self) -> usize {
        self.0.dim
    }
    fn states(&self) -> usize {
        self.0.a.len()
    }
    fn jump_spec(&self) -> &JumpSpec {
        &self.0.jumps
    }
    fn drift(&self, x: &[f64], mu: &MeasureView, i: usize, out: &mut [f64]) {
        let mut t = vec![0.0; out.len()];
        self.0.drift(x, mu, i, out);
        self.1.drift(x, mu, i, &mut t);
        out.iter_mut().zip(&t).for_each(|(o, v)| *o += v);
    }
    fn diffusion(&self, x: &[f64], mu: &MeasureView, i: usize, out: &mut [f64]) {
        let mut t = vec![0.0; out.len()];
        self.0.diffusion(x, mu, i, out);
        self.1.diffusion(x, mu, i, &mut t);
        out.iter_mut().zip(&t).for_each(|(o, v)| *o += v);
    }
    fn jump(&self, x: &[f64], mu: &MeasureView, i: usize, z: &[f64], out: &mut [f64]) {
        let mut t = vec![0.0; out.len()];
        self.0.jump(x, mu, i, z, out);
        self.1.jump(x, mu, i, z, &mut t);
        out.iter_mut().zip(&t).for_each(|(o, v)| *o += v);
    }
    fn g_state_free(&self) -> bool {
        true
    }
}

fn unit_jumps() -> JumpSpec {
    uniform_marks(2.0, 0.0, 1.0)
}

#[test]
fn linear_drift_constant_is_at_most_a_squared() {
    let a = 1.7;
    let model = Linear { a, jumps: unit_jumps() };
    let mut s = derive_stream(1, "validate", 0);
    let r = validate_assumptions(&model, 2000, 3.0, &mut s).unwrap();
    assert!(r.k1 <= a * a + 1e-9, "{}", r.k1);
    assert!(r.k1 > 0.5 * a * a, "{}", r.k1);
    let w = r.k1_witness.unwrap();
    assert!((w.ratio - r.k1).abs() < 1e-15);
    // The probe ratio is a^2 |x-y|^2 / (|x-y|^2 + W_2^2).
    let dx = (w.x[0] - w.y[0]).powi(2);
    assert!((w.ratio - a * a * dx / (dx + w.measure_term)).abs() < 1e-9);
}

#[test]
fn constant_coefficients_have_zero_lipschitz_constant() {
    let model = ConstantModel::new(ConstantParams {
        dim: 2,
        b: vec![1.0, -2.0],
        s: vec![0.3, 0.1],
        g: vec![0.5, 0.5],
        jumps: JumpSpec::new(1.0, PointLaw::standard_gaussian(2)),
    })
    .unwrap();
    let r = validate_assumptions(&model, 500, 2.0, &mut derive_stream(2, "validate", 0)).unwrap();
    assert_eq!(r.k1, 0.0);
    assert!(r.k2 > 0.0);
}

#[test]
fn more_probes_never_lower_the_estimates() {
    let model = switching_ou(&[1.0, 3.0], &[0.0, 1.0], &[0.2, 0.5], &[0.1, 0.4], unit_jumps()).unwrap();
    let short = validate_assumptions(&model, 200, 4.0, &mut derive_stream(3, "validate", 0)).unwrap();
    let long = validate_assumptions(&model, 800, 4.0, &mut derive_stream(3, "validate", 0)).unwrap();
    assert!(long.k1 >= short.k1 && long.k2 >= short.k2);
    let again = validate_assumptions(&model, 200, 4.0, &mut derive_stream(3, "validate", 0)).unwrap();
    assert_eq!(short, again);
}

#[test]
fn envelope_violation_is_reported() {
    let jumps = unit_jumps().with_envelope(Envelope::Affine {
        constant: 0.0,
        slope: 1.0,
    });
    let model = switching_ou(&[1.0], &[0.0], &[0.1], &[2.0], jumps.clone()).unwrap();
    let e = validate_assumptions(&model, 100, 1.0, &mut derive_stream(4, "validate", 0)).unwrap_err();
    assert!(matches!(e, ModelError::EnvelopeViolated { state: 0, .. }), "{e}");
    let fine = switching_ou(&[1.0], &[0.0], &[0.1], &[0.5], jumps).unwrap();
    let r = validate_assumptions(&fine, 100, 1.0, &mut derive_stream(4, "validate", 0)).unwrap();
    assert_eq!(r.envelope_ok, Some(true));
}

#[test]
fn false_state_free_flag_is_caught() {
    let e = validate_assumptions(&Liar(unit_jumps()), 100, 1.0, &mut derive_stream(5, "validate", 0))
        .unwrap_err();
    assert!(matches!(e, ModelError::GStateFreeViolated { .. }));
}

#[test]
fn validation_rejects_bad_inputs() {
    let model = Linear { a: 1.0, jumps: unit_jumps() };
    let mut s = derive_stream(6, "validate", 0);
    assert!(matches!(
        validate_assumptions(&model, 10, 1.0, &mut s),
        Err(ModelError::TooFewProbes { .. })
    ));
    assert!(matches!(
        validate_assumptions(&model, 100, -1.0, &mut s),
        Err(ModelError::InvalidRadius(_))
    ));
}

#[test]
fn gallery_lookup() {
    let params: toml::Table = toml::from_str(
        r#"
a = [1.0]
c = [0.0]
s = [0.1]
gamma = [0.2]
kappa = 0.5
jumps = { rate = 1.0, marks = { law = "gaussian", mean = [0.0], std = 1.0 } }
"#,
    )
    .unwrap();
    let m = builtin_model("switching-mf-ou-gxmu", &params).unwrap();
    assert!(!m.g_state_free());
    assert!(matches!(
        builtin_model("switching-mf-ou", &params),
        Err(ModelError::InvalidParams { .. })
    ));
    assert!(matches!(builtin_model("nope", &params), Err(ModelError::UnknownModel(_))));
}

#[test]
fn measure_dependent_compensator_matches_quadrature() {
    // For the measure-dependent jump term the closed-form compensator must
    // agree with direct integration against the mark law.
    let params: toml::Table = toml::from_str(
        r#"
a = [1.0, 2.0]
c = [0.0, 1.0]
s = [0.1, 0.2]
gamma = [0.2, 0.4]
kappa = 0.5
jumps = { rate = 3.0, marks = { law = "gaussian", mean = [0.3], std = 0.7 } }
"#,
    )
    .unwrap();
    let m = builtin_model("switching-mf-ou-gxmu", &params).unwrap();
    let cloud = [0.5, -1.0, 2.0];
    let view = MeasureView::new(1, &cloud);
    let (x, state) = ([0.4], 1);
    let mut closed = [0.0];
    m.jump_compensator(&x, &view, state, &mut closed);
    // E|z| for N(0.3, 0.49) by a fine Riemann sum.
    let (mu, sd) = (0.3f64, 0.7f64);
    let steps = 200_000;
    let (lo, hi) = (mu - 12.0 * sd, mu + 12.0 * sd);
    let dz = (hi - lo) / steps as f64;
    let abs_mean: f64 = (0..steps)
        .map(|k| {
            let z = lo + (k as f64 + 0.5) * dz;
            z.abs() * (-(z - mu).powi(2) / (2.0 * sd * sd)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt()) * dz
        })
        .sum();
    let mean = cloud.iter().sum::<f64>() / 3.0;
    let expected = 3.0 * (0.4 * mu + 0.5 * (mean - x[0]) * abs_mean);
    assert!((closed[0] - expected).abs() < 1e-8, "{} vs {expected}", closed[0]);
}

#[test]
fn averaging_needs_matching_states_and_state_free_jumps() {
    let model: Arc<dyn Coefficients> =
        Arc::new(switching_ou(&[1.0, 2.0], &[0.0, 1.0], &[0.1, 0.1], &[0.2, 0.2], unit_jumps()).unwrap());
    let pi3 = ProbVector::uniform(3);
    assert!(matches!(average(model.clone(), &pi3), Err(ModelError::StateMismatch { .. })));
    assert!(average(model, &ProbVector::uniform(2)).is_ok());
    let params: toml::Table = toml::from_str(
        "a = [1.0, 2.0]\nc = [0.0, 0.0]\ns = [0.1, 0.1]\ngamma = [0.2, 0.2]\nkappa = 0.3\n\
         jumps = { rate = 1.0, marks = { law = \"gaussian\", mean = [0.0], std = 1.0 } }",
    )
    .unwrap();
    let coupled = builtin_model("switching-mf-ou-gxmu", &params).unwrap();
    assert!(matches!(
        average(coupled, &ProbVector::uniform(2)),
        Err(ModelError::GNotStateFree)
    ));
}

#[test]
fn measure_view_queries() {
    let pts = [1.0, 2.0, 3.0, -1.0];
    let v = MeasureView::new(2, &pts);
    assert_eq!(v.mean(), &[2.0, 0.5]);
    assert!((v.second_moment() - (1.0 + 4.0 + 9.0 + 1.0) / 2.0).abs() < 1e-15);
    let k = v.kernel_expectation(&[0.0, 0.0], |y, x| (y[0] - x[0]) * y[1]);
    assert!((k - (2.0 - 3.0) / 2.0).abs() < 1e-15);
}

fn ou_pair() -> impl Strategy<Value = (SwitchingMfOu, SwitchingMfOu, Vec<f64>)> {
    let per_state = || prop::collection::vec(-2.0f64..2.0, 3);
    (per_state(), per_state(), per_state(), per_state(), per_state(), per_state(), per_state(), per_state())
        .prop_flat_map(|(a1, c1, s1, g1, a2, c2, s2, g2)| {
            let m1 = switching_ou(&a1, &c1, &s1, &g1, unit_jumps()).unwrap();
            let m2 = switching_ou(&a2, &c2, &s2, &g2, unit_jumps()).unwrap();
            (Just(m1), Just(m2), prop::collection::vec(0.05f64..1.0, 3))
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn averaging_is_linear(
        (m1, m2, w) in ou_pair(),
        x in -3.0f64..3.0,
        z in 0.0f64..1.0,
        cloud in prop::collection::vec(-3.0f64..3.0, 1..6),
    ) {
        let total: f64 = w.iter().sum();
        let pi = ProbVector::new(w.iter().map(|v| v / total).collect()).unwrap();
        let sum = average(Arc::new(Sum(m1.clone(), m2.clone())), &pi).unwrap();
        let a1 = average(Arc::new(m1), &pi).unwrap();
        let a2 = average(Arc::new(m2), &pi).unwrap();
        let view = MeasureView::new(1, &cloud);
        let (mut s, mut p, mut q) = ([0.0], [0.0], [0.0]);

        sum.drift(&[x], &view, 0, &mut s);
        a1.drift(&[x], &view, 0, &mut p);
        a2.drift(&[x], &view, 0, &mut q);
        prop_assert!((s[0] - p[0] - q[0]).abs() < 1e-12);

        sum.diffusion(&[x], &view, 0, &mut s);
        a1.diffusion(&[x], &view, 0, &mut p);
        a2.diffusion(&[x], &view, 0, &mut q);
        prop_assert!((s[0] - p[0] - q[0]).abs() < 1e-12);

        sum.jump(&[x], &view, 0, &[z], &mut s);
        a1.jump(&[x], &view, 0, &[z], &mut p);
        a2.jump(&[x], &view, 0, &[z], &mut q);
        prop_assert!((s[0] - p[0] - q[0]).abs() < 1e-12);

        // The average against pi is the pi-weighted sum of the states.
        let mut direct = 0.0;
        for i in 0..3 {
            let mut b = [0.0];
            a1.inner().drift(&[x], &view, i, &mut b);
            direct += pi.weights()[i] * b[0];
        }
        a1.drift(&[x], &view, 0, &mut p);
        prop_assert!((p[0] - direct).abs() < 1e-12);
    }
}
