use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use serde_json::{json, Value};

use fbcap::pipeline::{run_pipeline, validate_value, RunStatus};

/// Feedback capacity bounds and coding scheme synthesis for a Gaussian
/// channel with ARMA noise.
#[derive(Parser, Debug)]
#[command(name = "fbcap", version)]
struct Args {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `out_dir`; defaults to `fbcap-out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Grid half-resolution.
    #[arg(long)]
    m: Option<usize>,
    /// Largest number of causality constraints.
    #[arg(long = "h-max")]
    h_max: Option<usize>,
    /// Average input power.
    #[arg(long)]
    power: Option<f64>,
    /// Simulation seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run the transmission simulation, with defaults for unset fields.
    #[arg(long)]
    simulate: bool,
    #[arg(long = "quad-tol")]
    quad_tol: Option<f64>,
    /// Dual solver KKT tolerance.
    #[arg(long = "solver-tol")]
    solver_tol: Option<f64>,
}

fn apply_overrides(doc: &mut Value, args: &Args) {
    let Some(obj) = doc.as_object_mut() else { return };
    if let Some(m) = args.m {
        obj.insert("m".into(), json!(m));
    }
    if let Some(h) = args.h_max {
        obj.insert("h_max".into(), json!(h));
    }
    if let Some(p) = args.power {
        obj.insert("power".into(), json!(p));
    }
    if let Some(q) = args.quad_tol {
        obj.insert("quad_tol".into(), json!(q));
    }
    if let Some(out) = &args.out {
        obj.insert("out_dir".into(), json!(out));
    }
    if let Some(tol) = args.solver_tol {
        let solver = obj.entry("solver").or_insert_with(|| json!({}));
        if let Some(s) = solver.as_object_mut() {
            s.insert("tol_grad".into(), json!(tol));
        }
    }
    if args.simulate || args.seed.is_some() {
        let sim = obj.entry("simulation").or_insert_with(|| json!({}));
        if let (Some(s), Some(seed)) = (sim.as_object_mut(), args.seed) {
            s.insert("seed".into(), json!(seed));
        }
    }
}

fn configure_threads() {
    let Ok(raw) = std::env::var("FBCAP_THREADS") else { return };
    match raw.parse::<usize>() {
        Ok(n) if n > 0 => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                log::warn!("could not size the thread pool: {e}");
            }
        }
        _ => log::warn!("ignoring FBCAP_THREADS={raw}: expected a positive integer"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    configure_threads();

    let text = match std::fs::read_to_string(&args.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", args.config.display());
            return ExitCode::from(2);
        }
    };
    let mut doc: Value = match serde_json::from_str(&text) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: malformed document: {e}");
            return ExitCode::from(2);
        }
    };
    apply_overrides(&mut doc, &args);
    let validated = match validate_value(doc) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    for w in &validated.warnings {
        log::warn!("{w}");
    }
    let dir = validated.config.out_dir.clone().unwrap_or_else(|| PathBuf::from("fbcap-out"));
    match run_pipeline(&validated, &dir) {
        Ok(report) => {
            for row in &report.convergence {
                let lower = row.lower_bits.map(|v| format!("{v:.10}")).unwrap_or_else(|| "-".into());
                let gap = row.gap_bits.map(|v| format!("{v:.3e}")).unwrap_or_else(|| "-".into());
                println!("h={}  upper={:.10}  lower={lower}  gap={gap}", row.h, row.upper_bits);
            }
            if report.status == RunStatus::Incomplete {
                eprintln!("error: run incomplete: {}", report.error.as_deref().unwrap_or("unknown failure"));
                return ExitCode::from(1);
            }
            println!("wrote {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
