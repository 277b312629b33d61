use std::f64::consts::PI;

use bidomain_core::sim::simulate_coupled;
use bidomain_core::{
    bilinear_form, build_operator, make_grid, make_spectrum, mean_zero_project, semigroup_apply, simulate,
    simulate_transformed, BidomainOperator, ConductivitySpec, DecayRule, Field, IonicModel, SimConfig, State,
};
use proptest::prelude::*;

fn operator(dim: usize, n: usize) -> BidomainOperator {
    let extent = if dim == 1 { vec![PI] } else { vec![1.0, 1.4] };
    let g = make_grid(dim, &extent, n).unwrap();
    build_operator(&ConductivitySpec::uniform(&g, 1.7, 0.9), &g).unwrap()
}

fn field(op: &BidomainOperator, values: &[f64]) -> Field {
    let g = op.grid();
    Field::new(g.clone(), (0..g.len()).map(|i| values[i % values.len()]).collect()).unwrap()
}

fn max_diff(a: &Field, b: &Field) -> f64 {
    a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn bilinear_form_is_symmetric_and_nonnegative(
        a in prop::collection::vec(-2.0f64..2.0, 7),
        b in prop::collection::vec(-2.0f64..2.0, 5),
        dim in 1usize..=2,
    ) {
        let op = operator(dim, if dim == 1 { 33 } else { 9 });
        let u = field(&op, &a);
        let v = field(&op, &b);
        let uv = bilinear_form(&op, &u, &v).unwrap();
        let vu = bilinear_form(&op, &v, &u).unwrap();
        prop_assert!((uv - vu).abs() <= 1e-10 * (1.0 + uv.abs()));
        prop_assert!(bilinear_form(&op, &u, &u).unwrap() >= -1e-12);
    }

    #[test]
    fn semigroup_composes(a in prop::collection::vec(-1.0f64..1.0, 6), s in 0.0f64..1.0, t in 0.0f64..1.0) {
        let op = operator(1, 33);
        let u = field(&op, &a);
        let two = semigroup_apply(&op, t, &semigroup_apply(&op, s, &u).unwrap()).unwrap();
        let one = semigroup_apply(&op, s + t, &u).unwrap();
        prop_assert!(max_diff(&one, &two) <= 1e-12);
    }

    #[test]
    fn semigroup_keeps_mean_and_shrinks_the_rest(a in prop::collection::vec(-1.0f64..1.0, 6), t in 0.01f64..2.0) {
        let op = operator(2, 7);
        let u = field(&op, &a);
        let su = semigroup_apply(&op, t, &u).unwrap();
        prop_assert!((su.mean() - u.mean()).abs() <= 1e-12);
        let p = mean_zero_project(&u);
        let q = mean_zero_project(&su);
        prop_assert!(q.norm_h_sq() <= p.norm_h_sq() * (-2.0 * op.eigenvalues()[1] * t).exp() + 1e-12);
    }
}

#[test]
fn semigroup_at_zero_is_identity_and_rejects_negative_time() {
    let op = operator(1, 17);
    let u = field(&op, &[0.3, -1.0, 2.0]);
    assert!(max_diff(&semigroup_apply(&op, 0.0, &u).unwrap(), &u) <= 1e-13);
    assert!(semigroup_apply(&op, -0.1, &u).is_err());
}

fn fhn() -> IonicModel {
    IonicModel::FitzHughNagumo { eta: 1.0, a: 0.1, b: 1.0, c: 1.0 }
}

#[test]
fn zero_noise_member_matches_deterministic_run() {
    let op = operator(1, 33);
    let g = op.grid().clone();
    let spec = make_spectrum(DecayRule::PowerLaw { scale: 1.0, exponent: 2.0 }, 32, &op).unwrap();
    let mut cfg = SimConfig::new(0.01, 0.5);
    cfg.c3 = Some((0.0, 0.0, 0.0));
    let init = State::new(g.sample(|x, _| 0.4 * x.cos() + 0.2), Field::zeros(&g)).unwrap();
    let det = simulate(&init, &cfg, &op, &fhn(), &spec, 5).unwrap();
    let coupled = simulate_coupled(&init, &cfg, &op, &fhn(), &spec, &[0.0, 0.3], 5).unwrap();
    assert_eq!(coupled.members[0].final_state, det.final_state);
    assert_eq!(coupled.members[0].ledger, det.ledger);
    assert!(coupled.sup_difference(1) > 0.0);
}

#[test]
fn transformed_path_agrees_with_direct_path() {
    let op = operator(1, 33);
    let g = op.grid().clone();
    let spec = make_spectrum(DecayRule::PowerLaw { scale: 1.0, exponent: 2.0 }, 32, &op).unwrap();
    let mut cfg = SimConfig::new(0.01, 1.0);
    cfg.epsilon = 0.2;
    cfg.c3 = Some((0.0, 0.0, 0.0));
    let init = State::new(g.sample(|x, _| 0.5 * (2.0 * x).cos()), Field::zeros(&g)).unwrap();
    let direct = simulate(&init, &cfg, &op, &fhn(), &spec, 9).unwrap();
    let transformed = simulate_transformed(&init, &cfg, &op, &fhn(), &spec, 9).unwrap();
    assert!(max_diff(&direct.final_state.u, &transformed.final_state.u) <= 1e-10);
    assert!(max_diff(&direct.final_state.w, &transformed.final_state.w) <= 1e-10);
}

#[test]
fn same_seed_same_path_different_seed_different_path() {
    let op = operator(1, 17);
    let g = op.grid().clone();
    let spec = make_spectrum(DecayRule::PowerLaw { scale: 1.0, exponent: 2.0 }, 16, &op).unwrap();
    let mut cfg = SimConfig::new(0.01, 0.2);
    cfg.epsilon = 0.1;
    cfg.c3 = Some((0.0, 0.0, 0.0));
    let init = State::zeros(&g);
    let a = simulate(&init, &cfg, &op, &fhn(), &spec, 1).unwrap();
    let b = simulate(&init, &cfg, &op, &fhn(), &spec, 1).unwrap();
    let c = simulate(&init, &cfg, &op, &fhn(), &spec, 2).unwrap();
    assert_eq!(a.ledger.to_csv(), b.ledger.to_csv());
    assert_ne!(a.ledger.to_csv(), c.ledger.to_csv());
}

#[test]
fn support_regression_scales_with_initial_energy() {
    use bidomain_core::{invariant_support, McConfig, SimInputs};
    let op = operator(1, 33);
    let g = op.grid().clone();
    let spec = make_spectrum(DecayRule::PowerLaw { scale: 1.0, exponent: 2.0 }, 32, &op).unwrap();
    let model = fhn();
    let mut cfg = SimConfig::new(0.01, 10.0);
    cfg.epsilon = 0.1;
    cfg.c3 = Some(cfg.resolve_c3(&model).unwrap());
    let init = State::new(g.sample(|x, _| 0.1 * x.cos()), Field::zeros(&g)).unwrap();
    let inputs = SimInputs { op: &op, model: &model, spectrum: &spec, config: &cfg, initial: &init };
    let rep = invariant_support(&[5.0, 10.0], inputs, &McConfig::new(16, 3)).unwrap();
    let q = |name: &str| rep.quantities.iter().find(|q| q.name == name).unwrap_or_else(|| panic!("{name}")).clone();
    // small data: the transient integral is nearly quadratic in the amplitude
    let k1 = q("K1_hat(v0_scale=1)").estimate;
    let k1_doubled = q("K1_hat(v0_scale=2)").estimate;
    assert!((k1_doubled / k1 - 1.0).abs() < 0.25, "{k1} vs {k1_doubled}");
    let shift = q("K2_shift_on_doubling");
    let k2 = q("K2_hat(v0_scale=1)").estimate;
    assert!(shift.estimate.abs() < 0.2 * k2, "{} vs {k2}", shift.estimate);
}
