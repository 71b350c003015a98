//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::Instant;

use admliv::basis::Dictionary;
use admliv::debias::{build_M_nonlinear, fit_fold_gammas, fit_pair_gammas, make_folds};
use admliv::demand::{
    build_omega, build_outcome, logit_gamma, market_data, outside_state, simulate_logit_markets,
    DemandParams, MarketData,
};
use admliv::experiments::{
    approximate_theta0_elasticity, run_avg_derivative_mc, run_elasticity_mc, write_replications_csv,
    write_summary_csv, Estimator, McConfig, McRun, PRESIM_SEED,
};
use admliv::functionals::{
    elasticity_gateaux, elasticity_matrix, logit_elasticity_oracle, LinearCombination, OwnPriceElasticity,
};
use admliv::mliv::{KivConfig, MlivConfig, StructuralFunction};
use admliv::pgmm::{
    adaptive_solve, adaptive_weights, closed_form_gmm, kkt_violations, solve_active_set, solve_cd, MomentSystem,
    PenaltyConfig, SolverConfig, Weight,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_system(rng: &mut ChaCha8Rng, q: usize, p: usize, diagonal: bool) -> MomentSystem {
    let g = DMatrix::from_fn(q, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let m = DVector::from_fn(q, |_, _| rng.sample::<f64, _>(StandardNormal));
    let w = if diagonal {
        Weight::Diagonal(DVector::from_fn(q, |_, _| rng.random_range(0.5..2.0)))
    } else {
        Weight::Identity
    };
    MomentSystem::new(g, m, w).unwrap()
}

fn tight() -> SolverConfig {
    SolverConfig {
        tol: 1e-13,
        max_sweeps: 2_000_000,
        ..SolverConfig::default()
    }
}

const SHAPES: [(usize, usize); 4] = [(5, 3), (5, 40), (50, 3), (50, 40)];

fn solver_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst_pair = 0.0f64;
    let mut worst_closed = 0.0f64;
    let mut closed_checks = 0;
    for i in 0..50 {
        let (q, p) = SHAPES[i % SHAPES.len()];
        let sys = random_system(&mut rng, q, p, false);
        let pen = PenaltyConfig::absolute(10f64.powf(rng.random_range(-3.0..-1.0)));
        let cd = solve_cd(&sys, &pen, &tight(), None).unwrap();
        let act = solve_active_set(&sys, &pen, &tight(), None).unwrap();
        worst_pair = worst_pair.max((&cd.rho - &act.rho).amax());
        if p <= q {
            let exact = closed_form_gmm(&sys).unwrap();
            let zero = PenaltyConfig::uniform(0.0);
            let cd0 = solve_cd(&sys, &zero, &tight(), None).unwrap();
            let act0 = solve_active_set(&sys, &zero, &tight(), None).unwrap();
            worst_closed = worst_closed.max((&cd0.rho - &exact).amax()).max((&act0.rho - &exact).amax());
            closed_checks += 1;
        }
    }
    outcome(
        worst_pair <= 1e-8 && worst_closed <= 1e-8,
        format!(
            "50 instances: max |cd - active| = {worst_pair:.2e}; {closed_checks} identified at lambda = 0: max |fit - closed form| = {worst_closed:.2e} (tol 1e-8)"
        ),
    )
}

fn kkt_certification() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut fits = 0;
    let mut worst = 0.0f64;
    let mut failures = 0;
    let cfg = SolverConfig {
        tol: 1e-8,
        max_sweeps: 1_000_000,
        ..SolverConfig::default()
    };
    for i in 0..100 {
        let (q, p) = SHAPES[i % SHAPES.len()];
        let sys = random_system(&mut rng, q, p, i % 3 == 0);
        let pen = PenaltyConfig::absolute(10f64.powf(rng.random_range(-4.0..0.0)));
        let (pilot, refit) = adaptive_solve(&sys, &pen, &cfg, None).unwrap();
        let refit_pen = PenaltyConfig {
            weights: Some(adaptive_weights(&pilot.rho)),
            ..pen.clone()
        };
        let checks = [
            (solve_cd(&sys, &pen, &cfg, None).unwrap(), &pen),
            (solve_active_set(&sys, &pen, &cfg, None).unwrap(), &pen),
            (pilot, &pen),
            (refit, &refit_pen),
        ];
        for (fit, penalty) in checks {
            let report = kkt_violations(&sys, penalty, &fit.rho, 1e-5).unwrap();
            worst = worst.max(report.max_violation);
            failures += usize::from(!report.is_optimal());
            fits += 1;
        }
    }
    outcome(
        failures == 0,
        format!("{fits} fits (cd, active set, adaptive pilot and refit): {failures} with violations, max {worst:.2e} (slack 1e-5)"),
    )
}

fn logit_oracle() -> Outcome {
    let params = DemandParams::default();
    let mut worst = 0.0f64;
    let mut count = 0;
    for (nj, t) in [(1, 200), (2, 400), (5, 400)] {
        let gamma = logit_gamma(&params, nj);
        for md in market_data(simulate_logit_markets(nj, t, &params, 303).unwrap()).unwrap() {
            let eps = elasticity_matrix(&md, &gamma).unwrap();
            for j in 1..=nj {
                let oracle = logit_elasticity_oracle(params.beta_p, md.market.price(j), md.market.share(j)).unwrap();
                worst = worst.max((eps[(j - 1, j - 1)] - oracle).abs());
            }
            count += 1;
        }
    }
    outcome(
        count == 1000 && worst <= 1e-10,
        format!("{count} markets (J = 1, 2, 5): max |IFT - beta_p p (1 - s)| = {worst:.2e} (tol 1e-10)"),
    )
}

/// `sin(a'x) + 0.5 (b'x)^2`.
struct Smooth {
    a: Vec<f64>,
    b: Vec<f64>,
}

impl Smooth {
    fn random(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            a: (0..dim).map(|_| rng.random_range(-0.5..0.5)).collect(),
            b: (0..dim).map(|_| rng.random_range(-0.3..0.3)).collect(),
        }
    }

    fn dots(&self, x: &[f64]) -> (f64, f64) {
        let a = self.a.iter().zip(x).map(|(u, v)| u * v).sum();
        let b = self.b.iter().zip(x).map(|(u, v)| u * v).sum();
        (a, b)
    }
}

impl StructuralFunction for Smooth {
    fn input_dim(&self) -> usize {
        self.a.len()
    }

    fn value(&self, x: &[f64]) -> f64 {
        let (a, b) = self.dots(x);
        a.sin() + 0.5 * b * b
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let (a, b) = self.dots(x);
        (0..x.len()).map(|c| a.cos() * self.a[c] + b * self.b[c]).collect()
    }
}

fn gateaux_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let h = 1e-5;
    let mut worst_rel = 0.0f64;
    let mut worst_lin = 0.0f64;
    let mut checks = 0;
    for nj in [1, 2, 5] {
        let params = DemandParams::default();
        for md in market_data(simulate_logit_markets(nj, 10, &params, 405 + nj as u64).unwrap()).unwrap() {
            let truth = logit_gamma(&params, nj);
            let wave = Smooth::random(md.state_dim(), &mut rng);
            let gamma = LinearCombination::new().term(1.0, &truth).term(0.3, &wave);
            let z1 = Smooth::random(md.state_dim(), &mut rng);
            let z2 = Smooth::random(md.state_dim(), &mut rng);
            for j in 1..=nj {
                let d = elasticity_gateaux(&md, &gamma, &z1, j).unwrap();
                let up = LinearCombination::new().term(1.0, &gamma).term(h, &z1);
                let dn = LinearCombination::new().term(1.0, &gamma).term(-h, &z1);
                let r = j - 1;
                let fd = (elasticity_matrix(&md, &up).unwrap()[(r, r)] - elasticity_matrix(&md, &dn).unwrap()[(r, r)])
                    / (2.0 * h);
                worst_rel = worst_rel.max((d - fd).abs() / fd.abs().max(1e-3));

                let (c1, c2) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
                let mix = LinearCombination::new().term(c1, &z1).term(c2, &z2);
                let d2 = elasticity_gateaux(&md, &gamma, &z2, j).unwrap();
                let dm = elasticity_gateaux(&md, &gamma, &mix, j).unwrap();
                let scale = (c1 * d).abs() + (c2 * d2).abs() + 1.0;
                worst_lin = worst_lin.max((dm - c1 * d - c2 * d2).abs() / scale);
                checks += 1;
            }
        }
    }
    outcome(
        worst_rel <= 1e-4 && worst_lin <= 1e-12,
        format!(
            "{checks} directions: max relative error vs central difference (h = 1e-5) = {worst_rel:.2e} (tol 1e-4); max linearity defect = {worst_lin:.2e}"
        ),
    )
}

fn coverage(run: &McRun, est: Estimator) -> f64 {
    run.summary.get(est).map_or(f64::NAN, |s| s.coverage)
}

fn table_avg_derivative() -> Outcome {
    let start = Instant::now();
    let run = run_avg_derivative_mc(&McConfig::avg_derivative(2, 1000, 200, 2024)).unwrap();
    let adml = run.summary.get(Estimator::Adml).unwrap();
    let pi = coverage(&run, Estimator::Plugin);
    let pass = (0.90..=0.98).contains(&adml.coverage) && adml.abs_bias <= 0.02 && pi <= 0.40;
    outcome(
        pass,
        format!(
            "k = 2, n = 1000, 200 reps: ADML coverage {:.1}% in [90, 98], |bias| {:.4} <= 0.02, median SE {:.4}; PI coverage {:.1}% <= 40; {} failures; {:.0?}",
            100.0 * adml.coverage,
            adml.abs_bias,
            adml.median_se,
            100.0 * pi,
            adml.failures,
            start.elapsed()
        ),
    )
}

fn table_elasticity() -> Outcome {
    let start = Instant::now();
    let theta2 = approximate_theta0_elasticity(2, 100_000, PRESIM_SEED).unwrap();
    let theta5 = approximate_theta0_elasticity(5, 100_000, PRESIM_SEED).unwrap();
    let mut config = McConfig::elasticity(2, 100, 100, 2024);
    config.theta0 = Some(theta2);
    let run = run_elasticity_mc(&config).unwrap();
    let adml = run.summary.get(Estimator::Adml).unwrap();
    let pi = coverage(&run, Estimator::Plugin);
    let pass = adml.coverage >= 0.85
        && pi <= 0.60
        && (theta2 + 4.22).abs() <= 0.02
        && (theta5 + 4.28).abs() <= 0.02;
    outcome(
        pass,
        format!(
            "J = 2, T = 100, 100 reps: ADML coverage {:.1}% >= 85 (|bias| {:.3}, median SE {:.3}); PI coverage {:.1}% <= 60; theta0 {theta2:.4} (J = 2), {theta5:.4} (J = 5) within 0.02 of -4.22 / -4.28; {} failures; {:.0?}",
            100.0 * adml.coverage,
            adml.abs_bias,
            adml.median_se,
            100.0 * pi,
            adml.failures,
            start.elapsed()
        ),
    )
}

fn demand_identities() -> Outcome {
    let params = DemandParams::default();
    let mut simplex = 0.0f64;
    let mut xi = 0.0f64;
    let mut outside = 0.0f64;
    for nj in [1, 2, 5] {
        let gamma = logit_gamma(&params, nj);
        for m in simulate_logit_markets(nj, 300, &params, 707).unwrap() {
            simplex = simplex.max((m.shares.iter().sum::<f64>() - 1.0).abs());
            if m.shares.iter().any(|&s| !(s > 0.0)) {
                simplex = f64::INFINITY;
            }
            let reference = outside_state(&build_omega(&m, 1).unwrap());
            for j in 1..=nj {
                let w = build_omega(&m, j).unwrap();
                let y = build_outcome(&m, j).unwrap();
                xi = xi.max((y - gamma.value(&w.flat()) - m.xi[j - 1]).abs());
                let o = outside_state(&w);
                outside = outside.max(o.iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
            }
        }
    }
    outcome(
        simplex <= 1e-12 && xi <= 1e-12 && outside <= 1e-12,
        format!("900 markets: simplex defect {simplex:.1e}, max |y - gamma(omega) - xi| {xi:.1e}, outside-state spread {outside:.1e} (tol 1e-12)"),
    )
}

fn double_cross_fitting() -> Outcome {
    let markets: Vec<MarketData> =
        market_data(simulate_logit_markets(2, 60, &DemandParams::default(), 808).unwrap()).unwrap();
    let folds = make_folds(60, 5, 809).unwrap();
    let mliv = MlivConfig::KernelIv(KivConfig::default());
    let pairs = fit_pair_gammas(&markets, &mliv, &folds).unwrap();
    let gammas = fit_fold_gammas(&markets, &mliv, &folds).unwrap();
    let d = Dictionary::polynomial(markets[0].state_dim(), 2, true).unwrap();
    let moments = build_M_nonlinear(&OwnPriceElasticity { product: 1 }, &d, &folds, &pairs, &markets).unwrap();

    let mut leaks = 0;
    let mut used = BTreeSet::new();
    for fm in &moments {
        for (&t, &(a, b)) in fm.markets.iter().zip(&fm.sources) {
            let fit = pairs.get(a, b).unwrap();
            leaks += usize::from(fit.training.contains(&t) || folds.fold_of(t) == fm.fold);
            leaks += usize::from(fit.training.iter().any(|&s| [a, b].contains(&folds.fold_of(s))));
            used.insert((a, b));
        }
    }
    for (l, g) in gammas.iter().enumerate() {
        leaks += g.training.iter().filter(|&&t| folds.fold_of(t) == l).count();
    }
    outcome(
        pairs.len() == 10 && used.len() == 10 && leaks == 0,
        format!("L = 5: {} pair fits created, {} used in the moment vectors, {leaks} markets evaluated by a fit trained on them", pairs.len(), used.len()),
    )
}

fn render(run: &McRun) -> Vec<u8> {
    let mut out = Vec::new();
    write_summary_csv(&mut out, run).unwrap();
    write_replications_csv(&mut out, run).unwrap();
    out
}

fn determinism() -> Outcome {
    let avg = McConfig::avg_derivative(2, 300, 8, 99);
    let mut el = McConfig::elasticity(2, 60, 3, 99);
    el.theta0 = Some(-4.22);
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let runs: [Box<dyn Fn() -> McRun + Sync>; 2] = [
        Box::new(|| run_avg_derivative_mc(&avg).unwrap()),
        Box::new(|| run_elasticity_mc(&el).unwrap()),
    ];
    let mut identical = true;
    for run in &runs {
        let a = render(&run());
        let b = render(&run());
        let c = render(&single.install(|| run()));
        identical &= a == b && a == c;
    }
    outcome(
        identical,
        "avg-derivative and elasticity runs repeated, and rerun on a one-thread pool: CSV bytes identical".into(),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("1 solver oracle equivalence", solver_oracle),
        ("2 KKT certification", kkt_certification),
        ("3 logit elasticity oracle", logit_oracle),
        ("4 Gateaux correctness", gateaux_correctness),
        ("5 average-derivative coverage", table_avg_derivative),
        ("6 elasticity coverage", table_elasticity),
        ("7 demand identities", demand_identities),
        ("8 double cross-fitting structure", double_cross_fitting),
        ("9 determinism", determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let o = check();
        failed += usize::from(!o.pass);
        println!("{} criterion {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("acceptance: {} of 9 criteria passed", 9 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
