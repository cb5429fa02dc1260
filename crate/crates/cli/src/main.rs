//! `slicenet`: optimize, evaluate, verify, cross-check, and simulate
//! sliding strategies for sliced sensor networks.
//!
//! Exit codes: 0 success, 1 input error (unreadable or invalid files,
//! malformed flags), 2 internal assertion failure, 3 verification or
//! statistical rejection.

mod document;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use slicenet_core::{
    brute_force_oracle, check_tabletop_optimality, compare, compute_optimal_with,
    evaluate_strategy, oracle_lifespan_slack, simulate, ConditionCheck, Configuration, Lifespan,
    NetworkSpec, OptimizerError, SimConfig, SimError, Strategy, Tolerance,
};

use document::{ResultDocument, SpecDocument};

#[derive(Parser)]
#[command(
    name = "slicenet",
    version,
    about = "Lifespan-optimal message routing for sliced sensor networks",
    after_help = "Every flag can also be set through an environment variable \
                  with the SLICENET_ prefix, e.g. SLICENET_TOLERANCE=1e-6."
)]
struct Cli {
    /// Relative tolerance for balance, verification, and clamping checks.
    #[arg(
        long,
        global = true,
        default_value_t = 1e-9,
        env = "SLICENET_TOLERANCE"
    )]
    tolerance: f64,

    /// Worker threads for grid search and simulation. Results are
    /// identical for any value; the default lets the runtime decide.
    #[arg(long, global = true, env = "SLICENET_JOBS")]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute the lifespan-optimal sliding strategy for a network spec.
    Optimize {
        /// Network spec document (JSON).
        spec: PathBuf,
        /// Write the result document here instead of stdout.
        #[arg(long, short, env = "SLICENET_OUTPUT")]
        output: Option<PathBuf>,
    },
    /// Evaluate a fixed strategy against a network spec.
    Evaluate {
        /// Network spec document (JSON).
        spec: PathBuf,
        /// Sliding probabilities, comma-separated, slice 1 first (which
        /// must be 0: the slice at the sink always ejects).
        #[arg(long, value_delimiter = ',', required = true)]
        probabilities: Vec<f64>,
        /// Write the result document here instead of stdout.
        #[arg(long, short, env = "SLICENET_OUTPUT")]
        output: Option<PathBuf>,
    },
    /// Re-check a result document: hash, optimality conditions, flows.
    Verify {
        /// Result document produced by optimize or evaluate.
        result: PathBuf,
    },
    /// Exhaustive grid search over strategies, compared to the optimizer.
    Oracle {
        /// Network spec document (JSON), at most 5 slices.
        spec: PathBuf,
        /// Probability grid step in (0, 1].
        #[arg(long, default_value_t = 0.01, env = "SLICENET_STEP")]
        step: f64,
    },
    /// Monte Carlo check of a result document against its spec.
    Simulate {
        /// Network spec document the result claims to come from.
        spec: PathBuf,
        /// Result document with the strategy to simulate.
        result: PathBuf,
        #[arg(long, default_value_t = 100_000, env = "SLICENET_REPLICATIONS")]
        replications: usize,
        #[arg(long, default_value_t = 0, env = "SLICENET_SEED")]
        seed: u64,
        /// Acceptance band half-width in standard errors.
        #[arg(long, default_value_t = 3.0, env = "SLICENET_SIGMAS")]
        sigmas: f64,
    },
    /// Emit a per-slice CSV table from a result document.
    ProfileCsv {
        /// Result document produced by optimize or evaluate.
        result: PathBuf,
        /// Write the table here instead of stdout.
        #[arg(long, short, env = "SLICENET_OUTPUT")]
        output: Option<PathBuf>,
    },
}

enum AppError {
    /// Unreadable, unparsable, or invalid input. Exit 1.
    Input(String),
    /// A library invariant failed; a bug, not bad input. Exit 2.
    Internal(String),
    /// The input was fine but the check it asked for failed. Exit 3.
    Verification(String),
}

impl AppError {
    fn code(&self) -> u8 {
        match self {
            AppError::Input(_) => 1,
            AppError::Internal(_) => 2,
            AppError::Verification(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            AppError::Input(m) | AppError::Internal(m) | AppError::Verification(m) => m,
        }
    }
}

fn optimizer_error(error: OptimizerError) -> AppError {
    match error {
        OptimizerError::Spec(inner) => AppError::Input(inner.to_string()),
        other => AppError::Internal(other.to_string()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    if let Some(jobs) = cli.jobs {
        if let Err(err) = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
        {
            eprintln!("error: cannot configure {jobs} worker threads: {err}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message());
            ExitCode::from(err.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), AppError> {
    let tol = Tolerance::new(cli.tolerance);
    match cli.command {
        Command::Optimize { spec, output } => cmd_optimize(&spec, output.as_deref(), tol),
        Command::Evaluate {
            spec,
            probabilities,
            output,
        } => cmd_evaluate(&spec, &probabilities, output.as_deref(), tol),
        Command::Verify { result } => cmd_verify(&result, tol),
        Command::Oracle { spec, step } => cmd_oracle(&spec, step, tol),
        Command::Simulate {
            spec,
            result,
            replications,
            seed,
            sigmas,
        } => cmd_simulate(&spec, &result, replications, seed, sigmas),
        Command::ProfileCsv { result, output } => cmd_profile_csv(&result, output.as_deref()),
    }
}

fn read_spec(path: &Path) -> Result<(NetworkSpec, Option<String>), AppError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| AppError::Input(format!("cannot read {}: {e}", path.display())))?;
    let doc: SpecDocument = serde_json::from_str(&text)
        .map_err(|e| AppError::Input(format!("cannot parse {}: {e}", path.display())))?;
    let label = doc.label.clone();
    let spec = doc
        .to_network()
        .map_err(|m| AppError::Input(format!("{}: {m}", path.display())))?;
    Ok((spec, label))
}

fn read_spec_document(path: &Path) -> Result<SpecDocument, AppError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| AppError::Input(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| AppError::Input(format!("cannot parse {}: {e}", path.display())))
}

fn read_result(path: &Path) -> Result<ResultDocument, AppError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| AppError::Input(format!("cannot read {}: {e}", path.display())))?;
    let doc: ResultDocument = serde_json::from_str(&text)
        .map_err(|e| AppError::Input(format!("cannot parse {}: {e}", path.display())))?;
    doc.schema_check()
        .map_err(|m| AppError::Input(format!("{}: {m}", path.display())))?;
    Ok(doc)
}

fn emit(text: &str, output: Option<&Path>, kind: &str) -> Result<(), AppError> {
    match output {
        Some(path) => {
            std::fs::write(path, text)
                .map_err(|e| AppError::Input(format!("cannot write {}: {e}", path.display())))?;
            println!("wrote {kind} to {}", path.display());
            Ok(())
        }
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn result_json(doc: &ResultDocument) -> Result<String, AppError> {
    serde_json::to_string_pretty(doc)
        .map_err(|e| AppError::Internal(format!("cannot serialize result: {e}")))
}

fn cmd_optimize(spec_path: &Path, output: Option<&Path>, tol: Tolerance) -> Result<(), AppError> {
    let (spec, label) = read_spec(spec_path)?;
    let solution = compute_optimal_with(&spec, tol).map_err(optimizer_error)?;
    let config = Configuration::new(spec.clone(), solution.strategy.clone())
        .map_err(|e| AppError::Internal(e.to_string()))?;
    let report = check_tabletop_optimality(&config, tol);
    let doc = ResultDocument::new(
        &spec,
        label,
        tol.relative(),
        &solution.strategy,
        &solution.flow,
        &solution.profile,
        &report,
    );
    emit(&result_json(&doc)?, output, "result document")
}

fn cmd_evaluate(
    spec_path: &Path,
    probabilities: &[f64],
    output: Option<&Path>,
    tol: Tolerance,
) -> Result<(), AppError> {
    let (spec, label) = read_spec(spec_path)?;
    let strategy =
        Strategy::new(probabilities.to_vec()).map_err(|e| AppError::Input(e.to_string()))?;
    let config = Configuration::new(spec.clone(), strategy.clone())
        .map_err(|e| AppError::Input(e.to_string()))?;
    let (flow, profile) = evaluate_strategy(&config);
    let report = check_tabletop_optimality(&config, tol);
    let doc = ResultDocument::new(
        &spec,
        label,
        tol.relative(),
        &strategy,
        &flow,
        &profile,
        &report,
    );
    emit(&result_json(&doc)?, output, "result document")
}

fn describe_condition(name: &str, check: &ConditionCheck) -> String {
    match *check {
        ConditionCheck::Void => format!("{name}: void (edge does not exist)"),
        ConditionCheck::Holds { slice, probability } => {
            format!("{name}: holds at slice {} (p = {probability})", slice + 1)
        }
        ConditionCheck::Violated {
            slice,
            probability,
            required,
        } => format!(
            "{name}: violated at slice {} (p = {probability}, required {required})",
            slice + 1
        ),
    }
}

fn cmd_verify(result_path: &Path, tol: Tolerance) -> Result<(), AppError> {
    let doc = read_result(result_path)?;
    let config = doc
        .to_configuration()
        .map_err(|m| AppError::Input(format!("{}: {m}", result_path.display())))?;

    let recomputed_hash = doc.input.to_spec_document().content_hash();
    if recomputed_hash != doc.input.hash {
        return Err(AppError::Verification(format!(
            "input hash: document says {}, content hashes to {recomputed_hash}",
            doc.input.hash
        )));
    }

    let report = check_tabletop_optimality(&config, tol);
    println!("max per-sensor energy: {}", report.max_value);
    println!("plateau ends at slice {}", report.plateau_end + 1);
    println!(
        "{}",
        describe_condition(
            "left condition (outward edge ejects)",
            &report.left_condition
        )
    );
    println!(
        "{}",
        describe_condition(
            "right condition (sink-side edge slides)",
            &report.right_condition
        )
    );
    if !report.interior_ok {
        println!("interior peaks: unpinned");
    }
    if !report.optimal {
        let violated = if !report.left_condition.satisfied() {
            describe_condition("left_condition", &report.left_condition)
        } else if !report.right_condition.satisfied() {
            describe_condition("right_condition", &report.right_condition)
        } else {
            "interior_ok: a peak away from the plateau is not pinned".to_string()
        };
        return Err(AppError::Verification(violated));
    }

    let (flow, profile) = evaluate_strategy(&config);
    let spec = config.spec();
    let within = |a: f64, b: f64| (a - b).abs() <= tol.absolute_for(b.abs().max(1.0));
    for i in 0..spec.len() {
        let checks = [
            ("flows.slid", flow.slid()[i], doc.flows.slid[i]),
            ("flows.ejected", flow.ejected()[i], doc.flows.ejected[i]),
            (
                "energy.per_slice",
                slicenet_core::slice_energy(&flow, spec, i),
                doc.energy.per_slice[i],
            ),
            (
                "energy.per_sensor",
                profile.per_sensor()[i],
                doc.energy.per_sensor[i],
            ),
        ];
        for (name, recomputed, stored) in checks {
            if !within(recomputed, stored) {
                return Err(AppError::Verification(format!(
                    "{name} at slice {}: document says {stored}, re-evaluation gives {recomputed}",
                    i + 1
                )));
            }
        }
    }
    let lifespan_ok = match (profile.lifespan(), doc.lifespan) {
        (Lifespan::Finite(a), Some(b)) => within(a, b),
        (Lifespan::Unbounded, None) => true,
        _ => false,
    };
    if !lifespan_ok {
        return Err(AppError::Verification(format!(
            "lifespan: document says {:?}, re-evaluation gives {}",
            doc.lifespan,
            profile.lifespan()
        )));
    }

    println!("verification passed: optimal, flows and profile re-evaluate consistently");
    Ok(())
}

fn cmd_oracle(spec_path: &Path, step: f64, tol: Tolerance) -> Result<(), AppError> {
    let (spec, _) = read_spec(spec_path)?;
    let solution = compute_optimal_with(&spec, tol).map_err(optimizer_error)?;
    let oracle = brute_force_oracle(&spec, step).map_err(|e| AppError::Input(e.to_string()))?;
    let slack = oracle_lifespan_slack(&spec, step, oracle.peak_energy);

    println!("grid step:          {step}");
    println!("points evaluated:   {}", oracle.points_evaluated);
    println!("oracle strategy p:  {:?}", oracle.strategy.probabilities());
    println!("oracle lifespan:    {}", oracle.lifespan);
    println!("optimizer lifespan: {}", solution.profile.lifespan());
    println!("grid slack bound:   {slack}");

    match (solution.profile.lifespan(), oracle.lifespan) {
        (Lifespan::Finite(best), Lifespan::Finite(grid)) => {
            println!("lifespan gap (optimizer - oracle): {}", best - grid);
            if best < grid - slack {
                return Err(AppError::Internal(format!(
                    "optimizer lifespan {best} fell below the grid's {grid} by more than \
                     the slack bound {slack}"
                )));
            }
        }
        (Lifespan::Unbounded, Lifespan::Unbounded) => {
            println!("lifespan gap (optimizer - oracle): 0 (both unbounded)");
        }
        (best, grid) => {
            return Err(AppError::Internal(format!(
                "lifespans disagree on finiteness: optimizer {best}, oracle {grid}"
            )));
        }
    }
    Ok(())
}

fn cmd_simulate(
    spec_path: &Path,
    result_path: &Path,
    replications: usize,
    seed: u64,
    sigmas: f64,
) -> Result<(), AppError> {
    let spec_doc = read_spec_document(spec_path)?;
    let spec = spec_doc
        .to_network()
        .map_err(|m| AppError::Input(format!("{}: {m}", spec_path.display())))?;
    let doc = read_result(result_path)?;
    if spec_doc.content_hash() != doc.input.hash {
        return Err(AppError::Input(format!(
            "{} was not produced from {}: content hash {} does not match the document's {}",
            result_path.display(),
            spec_path.display(),
            spec_doc.content_hash(),
            doc.input.hash
        )));
    }
    let strategy = Strategy::new(doc.p.clone()).map_err(|e| AppError::Input(e.to_string()))?;

    // The document's stored energies must already follow from its own
    // strategy; otherwise the claim is inconsistent and no amount of
    // simulation can vouch for it.
    let claim_config = Configuration::new(spec.clone(), strategy.clone())
        .map_err(|e| AppError::Input(e.to_string()))?;
    let (_, claimed_profile) = evaluate_strategy(&claim_config);
    let claim_tol = Tolerance::new(doc.tolerance);
    for (i, (&recomputed, &stored)) in claimed_profile
        .per_sensor()
        .iter()
        .zip(doc.energy.per_sensor.iter())
        .enumerate()
    {
        if (recomputed - stored).abs() > claim_tol.absolute_for(stored.abs().max(1.0)) {
            return Err(AppError::Verification(format!(
                "document energies do not match its strategy at slice {}: \
                 stored {stored}, strategy gives {recomputed}",
                i + 1
            )));
        }
    }

    let sim_config = SimConfig {
        replications,
        seed,
        tolerance_sigmas: sigmas,
        round_events: true,
    };
    let result = simulate(&spec, &strategy, &sim_config).map_err(|e| match e {
        SimError::ModelMismatch { .. } => AppError::Verification(e.to_string()),
        other => AppError::Input(other.to_string()),
    })?;

    // The walks use whole messages, so the analytic side must too.
    let rounded = NetworkSpec::new(
        spec.batteries().to_vec(),
        spec.distances().to_vec(),
        result.rounded_events.iter().map(|&c| c as f64).collect(),
    )
    .map_err(|e| AppError::Internal(e.to_string()))?;
    let config =
        Configuration::new(rounded, strategy).map_err(|e| AppError::Internal(e.to_string()))?;
    let (_, profile) = evaluate_strategy(&config);

    let report = compare(&profile, &result, &sim_config).map_err(|e| match e {
        SimError::ModelMismatch { .. } => AppError::Verification(e.to_string()),
        other => AppError::Internal(other.to_string()),
    })?;

    println!(
        "{} replications, seed {seed}, acceptance band {sigmas} standard errors",
        result.replications
    );
    println!("slice  analytic      empirical     std-error     z");
    for row in &report.rows {
        println!(
            "{:<6} {:<13.6} {:<13.6} {:<13.3e} {:+.3}",
            row.slice + 1,
            row.analytic,
            row.empirical,
            row.std_error,
            row.z
        );
    }
    if report.pass {
        println!("simulation agrees with the analytic profile");
        Ok(())
    } else {
        Err(AppError::Verification(format!(
            "statistical rejection at slice {}: |z| = {} exceeds {sigmas}",
            report.worst_slice + 1,
            report.worst_abs_z
        )))
    }
}

fn cmd_profile_csv(result_path: &Path, output: Option<&Path>) -> Result<(), AppError> {
    let doc = read_result(result_path)?;
    let csv = doc.to_csv();
    match output {
        Some(path) => {
            std::fs::write(path, &csv)
                .map_err(|e| AppError::Input(format!("cannot write {}: {e}", path.display())))?;
            println!("wrote table to {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}
