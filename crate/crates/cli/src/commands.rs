use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::Path;

use admliv::experiments::{
    run_avg_derivative_mc, run_elasticity_mc, write_replications_csv, write_sidecar_json,
    write_summary_csv, Design,
};
use admliv::io::{read_matrix_file, write_vector};
use admliv::pgmm::{
    adaptive_solve, solve, Algorithm, MomentSystem, PenaltyConfig, RieszFit, SolverConfig, Weight,
};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::args::{AlgorithmArg, SolvePgmmArgs};
use crate::config::McRunSpec;
use crate::CliError;

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, CliError> {
    let path = dir.join(name);
    let file = File::create(&path)
        .map_err(|e| admliv::Error::Io(format!("{}: {e}", path.display())))?;
    Ok(BufWriter::new(file))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| admliv::Error::Io(format!("{}: {e}", dir.display())).into())
}

fn flush(mut w: impl Write) -> Result<(), CliError> {
    w.flush().map_err(|e| admliv::Error::from(e).into())
}

pub fn mc(spec: McRunSpec) -> Result<(), CliError> {
    let run = match spec.config.design {
        Design::AvgDerivative => run_avg_derivative_mc(&spec.config)?,
        Design::Elasticity => run_elasticity_mc(&spec.config)?,
    };
    create_dir(&spec.out)?;
    let mut summary = create(&spec.out, "summary.csv")?;
    write_summary_csv(&mut summary, &run)?;
    flush(summary)?;
    let mut reps = create(&spec.out, "replications.csv")?;
    write_replications_csv(&mut reps, &run)?;
    flush(reps)?;
    let mut json = create(&spec.out, "run.json")?;
    write_sidecar_json(&mut json, &run)?;
    flush(json)?;

    write_summary_csv(io::stdout().lock(), &run)?;
    eprintln!("theta0 = {}", run.summary.theta0);
    let failed = run.records.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        eprintln!("{failed} of {} replications failed; see replications.csv", run.records.len());
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct PgmmDiagnostics<'a> {
    lambda: f64,
    /// Smallest lambda at which every coefficient is zero.
    lambda_max: f64,
    objective: f64,
    kkt_max_violation: f64,
    active_set: &'a [usize],
    sweeps_used: usize,
    outer_iters_used: usize,
    weights: &'a [f64],
    adaptive: bool,
    pilot_active_set: Option<&'a [usize]>,
    note: Option<String>,
}

fn read_weight(path: &Path, q: usize) -> Result<Weight, CliError> {
    let w = read_matrix_file(path)?;
    if w.shape() == (q, q) && q > 1 {
        Ok(Weight::Dense(w))
    } else if w.len() == q && (w.ncols() == 1 || w.nrows() == 1) {
        Ok(Weight::Diagonal(DVector::from_iterator(q, w.iter().copied())))
    } else {
        Err(admliv::Error::DimensionMismatch {
            context: "weight matrix",
            expected: q,
            found: w.nrows(),
        }
        .into())
    }
}

fn to_vector(m: DMatrix<f64>) -> Result<DVector<f64>, CliError> {
    if m.ncols() == 1 || m.nrows() == 1 {
        Ok(DVector::from_iterator(m.len(), m.iter().copied()))
    } else {
        Err(admliv::Error::Parse(format!("M must be a vector, found {}x{}", m.nrows(), m.ncols())).into())
    }
}

/// `max_j |c_j| / w_j` with `c = G' Omega_q M`.
fn full_shrinkage_level(system: &MomentSystem, weights: &[f64]) -> f64 {
    let (_, c) = system.normal_equations();
    c.iter()
        .zip(weights)
        .map(|(c, w)| if *w > 0.0 { c.abs() / w } else if *c != 0.0 { f64::INFINITY } else { 0.0 })
        .fold(0.0, f64::max)
}

pub fn solve_pgmm(args: &SolvePgmmArgs) -> Result<(), CliError> {
    let g = read_matrix_file(&args.g)?;
    let m = to_vector(read_matrix_file(&args.m)?)?;
    let omega = match &args.omega {
        Some(path) => read_weight(path, g.nrows())?,
        None => Weight::Identity,
    };
    let mut system = MomentSystem::new(g, m, omega)?;
    if let Some(n) = args.n_obs {
        system = system.with_n_obs(n);
    }
    let penalty = match (args.lambda, args.n_obs) {
        (Some(lambda), _) => PenaltyConfig {
            lambda: Some(lambda),
            c0: args.c0,
            ..PenaltyConfig::default()
        },
        (None, Some(_)) => PenaltyConfig {
            c1: args.c1.unwrap_or(PenaltyConfig::default().c1),
            c0: args.c0,
            ..PenaltyConfig::default()
        },
        (None, None) => {
            return Err(CliError::Usage("give --lambda, or --n-obs for the c1-scaled penalty".into()))
        }
    };
    let solver = SolverConfig {
        tol: args.tol,
        max_sweeps: args.max_sweeps,
        algorithm: match args.algorithm {
            AlgorithmArg::Cd => Algorithm::CoordinateDescent,
            AlgorithmArg::ActiveSet => Algorithm::ActiveSet,
        },
        ..SolverConfig::default()
    };
    let (fit, pilot): (RieszFit, Option<RieszFit>) = if args.adaptive {
        let (pilot, refit) = adaptive_solve(&system, &penalty, &solver, None)?;
        (refit, Some(pilot))
    } else {
        (solve(&system, &penalty, &solver, None)?, None)
    };

    let lambda_max = full_shrinkage_level(&system, &fit.weights);
    let note = fit.active_set.is_empty().then(|| {
        format!(
            "all coefficients are zero: lambda {} is at or above the full-shrinkage level {}",
            fit.lambda, lambda_max
        )
    });
    create_dir(&args.out)?;
    let mut rho = create(&args.out, "rho.csv")?;
    write_vector(&mut rho, &fit.rho)?;
    flush(rho)?;
    let diagnostics = PgmmDiagnostics {
        lambda: fit.lambda,
        lambda_max,
        objective: fit.objective(),
        kkt_max_violation: fit.kkt_max_violation,
        active_set: &fit.active_set,
        sweeps_used: fit.sweeps_used,
        outer_iters_used: fit.outer_iters_used,
        weights: &fit.weights,
        adaptive: args.adaptive,
        pilot_active_set: pilot.as_ref().map(|p| p.active_set.as_slice()),
        note,
    };
    let mut json = create(&args.out, "diagnostics.json")?;
    serde_json::to_writer_pretty(&mut json, &diagnostics)
        .map_err(|e| admliv::Error::Io(e.to_string()))?;
    flush(json)?;
    if let Some(n) = &diagnostics.note {
        eprintln!("note: {n}");
    }
    write_vector(io::stdout().lock(), &fit.rho)?;
    Ok(())
}
