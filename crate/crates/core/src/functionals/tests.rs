use std::sync::Arc;

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::demand::{logit_gamma, simulate_logit_markets, DemandParams, MarketData};
use crate::mliv::LinearFunction;

/// `sin(a'x) + 0.5 (b'x)^2`, a smooth non-polynomial test function.
struct Wavy {
    a: Vec<f64>,
    b: Vec<f64>,
}

impl Wavy {
    fn random(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            a: (0..dim).map(|_| rng.random_range(-0.5..0.5)).collect(),
            b: (0..dim).map(|_| rng.random_range(-0.3..0.3)).collect(),
        }
    }

    fn dots(&self, x: &[f64]) -> (f64, f64) {
        let a = self.a.iter().zip(x).map(|(u, v)| u * v).sum::<f64>();
        let b = self.b.iter().zip(x).map(|(u, v)| u * v).sum::<f64>();
        (a, b)
    }
}

impl StructuralFunction for Wavy {
    fn input_dim(&self) -> usize {
        self.a.len()
    }

    fn value(&self, x: &[f64]) -> f64 {
        let (a, b) = self.dots(x);
        a.sin() + 0.5 * b * b
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let (a, b) = self.dots(x);
        (0..x.len())
            .map(|c| a.cos() * self.a[c] + b * self.b[c])
            .collect()
    }
}

fn markets(j: usize, t: usize, seed: u64) -> Vec<MarketData> {
    simulate_logit_markets(j, t, &DemandParams::default(), seed)
        .unwrap()
        .into_iter()
        .map(|m| MarketData::new(m).unwrap())
        .collect()
}

fn col(values: &[f64]) -> DMatrix<f64> {
    DMatrix::from_column_slice(values.len(), 1, values)
}

#[test]
fn average_derivative_of_identity_is_one() {
    let spec = avg_derivative_spec(0, None);
    let gamma = LinearFunction::new(0.0, vec![1.0, 0.0]);
    for x in [[0.0, 0.0], [2.0, -1.0], [-5.0, 3.0]] {
        assert_eq!(spec.eval(&x, &gamma).unwrap(), 1.0);
    }
    assert!(spec.is_linear());
}

#[test]
fn average_derivative_of_square_direction() {
    let dict = Dictionary::polynomial(1, 2, false).unwrap();
    let spec = avg_derivative_spec(0, None);
    let sq = BasisFunction::new(&dict, 2);
    assert_eq!(sq.value(&[3.0]), 9.0);
    assert_eq!(spec.gateaux(&[3.0], None, &sq).unwrap(), 6.0);
    assert_eq!(spec.gateaux_dictionary(&[3.0], None, &dict).unwrap(), vec![0.0, 1.0, 6.0]);
}

#[test]
fn average_derivative_weight_and_coordinate() {
    let spec = avg_derivative_spec(1, Some(Arc::new(|x: &[f64]| x[0])));
    let gamma = LinearFunction::new(0.0, vec![0.0, 3.0]);
    assert_eq!(spec.eval(&[2.0, 7.0], &gamma).unwrap(), 6.0);
    let bad = avg_derivative_spec(2, None);
    assert!(bad.eval(&[2.0, 7.0], &gamma).is_err());
    assert!(spec.eval(&[2.0], &gamma).is_err());
}

#[test]
fn policy_effect_examples() {
    let gamma = LinearFunction::new(0.5, vec![1.0]);
    let same = policy_effect_spec(Arc::new(|x: &[f64]| x.to_vec()));
    let shift = policy_effect_spec(Arc::new(|x: &[f64]| vec![x[0] + 1.0]));
    let constant = policy_effect_spec(Arc::new(|_: &[f64]| vec![4.0]));
    let wavy = Wavy {
        a: vec![0.7],
        b: vec![0.2],
    };
    for x in [-1.0, 0.0, 2.5] {
        assert_eq!(same.eval(&[x], &wavy).unwrap(), 0.0);
        assert!((shift.eval(&[x], &gamma).unwrap() - 1.0).abs() < 1e-15);
        let want = wavy.value(&[4.0]) - wavy.value(&[x]);
        assert_eq!(constant.eval(&[x], &wavy).unwrap(), want);
    }
    let dict = Dictionary::polynomial(1, 3, false).unwrap();
    let g = shift.gateaux_dictionary(&[1.0], None, &dict).unwrap();
    assert_eq!(g, vec![0.0, 1.0, 3.0, 7.0]);
    let bad = policy_effect_spec(Arc::new(|_: &[f64]| vec![1.0, 2.0]));
    assert!(bad.eval(&[1.0], &gamma).is_err());
}

#[test]
fn g_hat_examples() {
    let d = Dictionary::polynomial(1, 1, false).unwrap();
    let g = build_G_hat(&d, &d, &col(&[2.0]), &col(&[3.0])).unwrap();
    assert_eq!(g, DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 2.0, 6.0]));

    let x = col(&[2.0, -1.0]);
    let z = col(&[3.0, 0.5]);
    let both = build_G_hat(&d, &d, &x, &z).unwrap();
    let first = build_G_hat(&d, &d, &col(&[2.0]), &col(&[3.0])).unwrap();
    let second = build_G_hat(&d, &d, &col(&[-1.0]), &col(&[0.5])).unwrap();
    assert_eq!(both, (first + second) / 2.0);

    assert!(build_G_hat(&d, &d, &DMatrix::zeros(0, 1), &DMatrix::zeros(0, 1)).is_err());
    assert!(build_G_hat(&d, &d, &x, &col(&[1.0])).is_err());
}

#[test]
fn m_linear_examples() {
    let spec = avg_derivative_spec(0, None);
    let lin = Dictionary::polynomial(1, 1, false).unwrap();
    let m = build_M_linear(&spec, &lin, &col(&[0.3, -2.0, 5.0])).unwrap();
    assert_eq!(m.as_slice(), &[0.0, 1.0]);

    let quad = Dictionary::polynomial(1, 2, false).unwrap();
    let m = build_M_linear(&spec, &quad, &col(&[1.0, 3.0])).unwrap();
    assert_eq!(m[2], 4.0);

    let same = policy_effect_spec(Arc::new(|x: &[f64]| x.to_vec()));
    let m = build_M_linear(&same, &quad, &col(&[1.0, 3.0])).unwrap();
    assert!(m.iter().all(|&v| v == 0.0));
}

#[test]
fn m_linear_is_additive_over_partitions() {
    let spec = avg_derivative_spec(1, None);
    let dict = Dictionary::polynomial(2, 3, true).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = DMatrix::from_fn(30, 2, |_, _| rng.random_range(-2.0..2.0));
    let all = build_M_linear(&spec, &dict, &x).unwrap();
    let a = build_M_linear(&spec, &dict, &x.rows(0, 12).into_owned()).unwrap();
    let b = build_M_linear(&spec, &dict, &x.rows(12, 18).into_owned()).unwrap();
    let pooled = (a * 12.0 + b * 18.0) / 30.0;
    assert!((all - pooled).amax() < 1e-12);
}

#[test]
fn m_linear_rejects_nonlinear_spec() {
    struct Squared;
    impl FunctionalSpec for Squared {
        type Obs = [f64];
        fn is_linear(&self) -> bool {
            false
        }
        fn eval(&self, x: &[f64], gamma: &dyn StructuralFunction) -> Result<f64> {
            Ok(gamma.value(x).powi(2))
        }
        fn gateaux(
            &self,
            x: &[f64],
            gamma: Option<&dyn StructuralFunction>,
            direction: &dyn StructuralFunction,
        ) -> Result<f64> {
            Ok(2.0 * gamma.unwrap().value(x) * direction.value(x))
        }
    }
    let dict = Dictionary::polynomial(1, 1, false).unwrap();
    assert!(build_M_linear(&Squared, &dict, &col(&[1.0])).is_err());
}

#[test]
fn log_share_jacobian_examples() {
    assert_eq!(log_share_jacobian(&[0.5, 0.5]).unwrap()[(0, 0)], 4.0);
    let l = log_share_jacobian(&[0.5, 0.25, 0.25]).unwrap();
    assert_eq!(l, DMatrix::from_row_slice(2, 2, &[6.0, 2.0, 2.0, 6.0]));
    assert!(log_share_jacobian(&[0.5, 0.0, 0.5]).is_err());
    assert!(log_share_jacobian(&[0.5, 0.3, 0.3]).is_err());
    assert!(log_share_jacobian(&[1.0]).is_err());
}

#[test]
fn log_share_jacobian_structure() {
    for md in markets(4, 30, 3) {
        let s = &md.market.shares;
        let l = log_share_jacobian(s).unwrap();
        let off = &l - DMatrix::from_element(4, 4, 1.0 / s[0]);
        for a in 0..4 {
            for b in 0..4 {
                if a != b {
                    assert_eq!(off[(a, b)], 0.0);
                }
            }
            let row: f64 = l.row(a).sum();
            let want = 1.0 / s[a + 1] + 4.0 / s[0];
            assert!((row - want).abs() < 1e-10 * want);
        }
    }
}

#[test]
fn logit_gamma_jacobians() {
    let params = DemandParams::default();
    for md in markets(3, 5, 4) {
        let (gp, gs) = gamma_jacobians(&logit_gamma(&params, 3), &md).unwrap();
        assert_eq!(gp, DMatrix::identity(3, 3) * params.beta_p);
        assert_eq!(gs, DMatrix::zeros(3, 3));
    }
}

#[test]
fn unit_price_slope_and_constant() {
    let md = &markets(2, 1, 5)[0];
    let mut coef = vec![0.0; md.state_dim()];
    coef[PRICE_ENTRY] = 1.0;
    let (gp, gs) = gamma_jacobians(&LinearFunction::new(0.0, coef), md).unwrap();
    assert_eq!(gp, DMatrix::identity(2, 2));
    assert_eq!(gs, DMatrix::zeros(2, 2));

    let constant = LinearFunction::new(3.0, vec![0.0; md.state_dim()]);
    let (gp, gs) = gamma_jacobians(&constant, md).unwrap();
    assert_eq!(gp, DMatrix::zeros(2, 2));
    assert_eq!(gs, DMatrix::zeros(2, 2));

    assert!(gamma_jacobians(&LinearFunction::new(0.0, vec![0.0; 3]), md).is_err());
}

fn rebuilt(md: &MarketData, f: impl Fn(&mut Market)) -> MarketData {
    let mut m = md.market.clone();
    f(&mut m);
    MarketData::new(m).unwrap()
}

#[test]
fn chain_rule_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let h = 1e-6;
    for nj in [1, 2, 4] {
        for md in markets(nj, 4, 10 + nj as u64) {
            let gamma = Wavy::random(md.state_dim(), &mut rng);
            let (gp, gs) = gamma_jacobians(&gamma, &md).unwrap();
            for k in 1..=nj {
                let up = rebuilt(&md, |m| m.prices[k - 1] += h);
                let dn = rebuilt(&md, |m| m.prices[k - 1] -= h);
                let sup = rebuilt(&md, |m| {
                    m.shares[k] += h;
                    m.shares[0] -= h;
                });
                let sdn = rebuilt(&md, |m| {
                    m.shares[k] -= h;
                    m.shares[0] += h;
                });
                for j in 0..nj {
                    let fd_p = (gamma.value(&up.omegas[j]) - gamma.value(&dn.omegas[j])) / (2.0 * h);
                    let fd_s = (gamma.value(&sup.omegas[j]) - gamma.value(&sdn.omegas[j])) / (2.0 * h);
                    assert!((gp[(j, k - 1)] - fd_p).abs() < 1e-5, "price {j} {k}");
                    assert!((gs[(j, k - 1)] - fd_s).abs() < 1e-5, "share {j} {k}");
                }
            }
        }
    }
}

#[test]
fn logit_elasticities_match_closed_form() {
    let params = DemandParams::default();
    for nj in [1, 2, 5] {
        let gamma = logit_gamma(&params, nj);
        for md in markets(nj, 200, 20 + nj as u64) {
            let eps = elasticity_matrix(&md, &gamma).unwrap();
            for j in 1..=nj {
                let oracle =
                    logit_elasticity_oracle(params.beta_p, md.market.price(j), md.market.share(j))
                        .unwrap();
                assert!((eps[(j - 1, j - 1)] - oracle).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn oracle_examples() {
    assert_eq!(logit_elasticity_oracle(-2.0, 1.0, 0.5).unwrap(), -1.0);
    assert!((logit_elasticity_oracle(-2.0, 2.0, 1e-12).unwrap() + 4.0).abs() < 1e-10);
    assert!(logit_elasticity_oracle(-2.0, 1.0, 1.0).is_err());
    assert!(logit_elasticity_oracle(-2.0, 1.0, 0.0).is_err());
}

#[test]
fn doubling_prices_doubles_logit_elasticities() {
    let params = DemandParams::default();
    let gamma = logit_gamma(&params, 3);
    for md in markets(3, 5, 7) {
        let e1 = elasticity_matrix(&md, &gamma).unwrap();
        let e2 = elasticity_matrix(&rebuilt(&md, |m| m.prices.iter_mut().for_each(|p| *p *= 2.0)), &gamma)
            .unwrap();
        assert!((e2 - e1 * 2.0).amax() < 1e-12);
    }
}

#[test]
fn singular_share_jacobian_is_reported() {
    let md = &markets(1, 1, 8)[0];
    let s = &md.market.shares;
    let l = 1.0 / s[1] + 1.0 / s[0];
    // gamma = c * s_0 gives Gamma_s = -c, so c = -L makes A vanish
    let mut coef = vec![0.0; md.state_dim()];
    coef[SHARE_ENTRY] = -l;
    let gamma = LinearFunction::new(0.0, coef);
    match elasticity_matrix(md, &gamma) {
        Err(Error::SingularShareJacobian { market, .. }) => assert_eq!(market, md.market.id),
        other => panic!("expected singular jacobian, got {other:?}"),
    }
    let spec = OwnPriceElasticity { product: 1 };
    assert!(spec.gateaux(md, Some(&gamma), &gamma).is_err());
}

/// Logit truth plus a nonlinear term so that `Gamma_s` is non-zero.
fn perturbed_truth(dim: usize, nj: usize, rng: &mut ChaCha8Rng) -> (LinearFunction, Wavy) {
    (logit_gamma(&DemandParams::default(), nj), Wavy::random(dim, rng))
}

#[test]
fn gateaux_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let h = 1e-5;
    let mut checked = 0;
    for nj in [1, 2, 3] {
        for md in markets(nj, 7, 30 + nj as u64) {
            let (truth, wave) = perturbed_truth(md.state_dim(), nj, &mut rng);
            let gamma = LinearCombination::new().term(1.0, &truth).term(0.3, &wave);
            let zeta = Wavy::random(md.state_dim(), &mut rng);
            for j in 1..=nj {
                let d = elasticity_gateaux(&md, &gamma, &zeta, j).unwrap();
                let up = LinearCombination::new().term(1.0, &gamma).term(h, &zeta);
                let dn = LinearCombination::new().term(1.0, &gamma).term(-h, &zeta);
                let r = j - 1;
                let fd = (elasticity_matrix(&md, &up).unwrap()[(r, r)]
                    - elasticity_matrix(&md, &dn).unwrap()[(r, r)])
                    / (2.0 * h);
                assert!(
                    (d - fd).abs() <= 1e-4 * fd.abs().max(1e-3),
                    "analytic {d} vs finite difference {fd}"
                );
                checked += 1;
            }
        }
    }
    assert!(checked >= 20);
}

#[test]
fn zero_direction_has_zero_derivative() {
    let md = &markets(2, 1, 12)[0];
    let truth = logit_gamma(&DemandParams::default(), 2);
    let zero = LinearFunction::new(0.0, vec![0.0; md.state_dim()]);
    assert_eq!(elasticity_gateaux(md, &truth, &zero, 1).unwrap(), 0.0);
}

#[test]
fn dictionary_derivatives_match_single_directions() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let md = &markets(2, 1, 14)[0];
    let (truth, wave) = perturbed_truth(md.state_dim(), 2, &mut rng);
    let gamma = LinearCombination::new().term(1.0, &truth).term(0.3, &wave);
    let dict = Dictionary::polynomial(md.state_dim(), 2, true).unwrap();
    let spec = OwnPriceElasticity { product: 2 };
    let all = spec.gateaux_dictionary(md, Some(&gamma), &dict).unwrap();
    assert_eq!(all.len(), dict.size());
    for k in [0, 1, 5, 17, dict.size() - 1] {
        let one = spec
            .gateaux(md, Some(&gamma), &BasisFunction::new(&dict, k))
            .unwrap();
        assert!((all[k] - one).abs() <= 1e-12 * one.abs().max(1.0));
    }
    assert!(spec.gateaux_dictionary(md, None, &dict).is_err());
    assert!(!spec.is_linear());
    assert!(OwnPriceElasticity { product: 3 }.eval(md, &gamma).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gateaux_is_linear_in_direction(
        seed in any::<u64>(),
        c1 in -3.0f64..3.0,
        c2 in -3.0f64..3.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let md = &markets(2, 1, seed)[0];
        let (truth, wave) = perturbed_truth(md.state_dim(), 2, &mut rng);
        let gamma = LinearCombination::new().term(1.0, &truth).term(0.3, &wave);
        let z1 = Wavy::random(md.state_dim(), &mut rng);
        let z2 = Wavy::random(md.state_dim(), &mut rng);
        let mix = LinearCombination::new().term(c1, &z1).term(c2, &z2);
        let d1 = elasticity_gateaux(md, &gamma, &z1, 1).unwrap();
        let d2 = elasticity_gateaux(md, &gamma, &z2, 1).unwrap();
        let dm = elasticity_gateaux(md, &gamma, &mix, 1).unwrap();
        let scale = (c1 * d1).abs() + (c2 * d2).abs() + 1.0;
        prop_assert!((dm - c1 * d1 - c2 * d2).abs() <= 1e-12 * scale);
    }

    #[test]
    fn linear_gateaux_is_additive(
        xs in proptest::collection::vec(-2.0f64..2.0, 2),
        c1 in -3.0f64..3.0,
        c2 in -3.0f64..3.0,
    ) {
        let dict = Dictionary::polynomial(2, 3, true).unwrap();
        let spec = avg_derivative_spec(0, None);
        let (a, b) = (BasisFunction::new(&dict, 3), BasisFunction::new(&dict, 7));
        let mix = LinearCombination::new().term(c1, &a).term(c2, &b);
        let lhs = spec.gateaux(&xs, None, &mix).unwrap();
        let rhs = c1 * spec.gateaux(&xs, None, &a).unwrap() + c2 * spec.gateaux(&xs, None, &b).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
    }
}
