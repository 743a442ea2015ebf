//! Batch command-line surface: load a trial CSV, fit the linear or
//! semiparametric reduction models, select the structural dimension, evaluate
//! treatment rules by repeated-split IPWE, and draw simulated datasets.
//! Machine-readable JSON goes to stdout; diagnostics go to stderr.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use sdrint::config::{FitConfig, InitStrategy};
use sdrint::data::{self, Dataset, Schema};
use sdrint::error::Error;
use sdrint::itr::{split_evaluate, EstimatorSpec};
use sdrint::linear::fit_linear_gem;
use sdrint::sim::{self, GeneratorSpec};
use sdrint::simml::fit_simml;
use sdrint::simsl::fit_simsl;
use sdrint::spline::LambdaGrid;
use sdrint::stiefel::select_dimension;

#[derive(Parser)]
#[command(
    name = "sdrint",
    version,
    about = "Sufficient dimension reduction for covariate-by-treatment interactions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads (0 = all cores; 1 forces serial execution).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Linear interaction pipeline: eta, H, eigenbasis, GEM slopes.
    FitLinear {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Single-index model with multiple links (discrete treatment).
    FitSimml {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        tuning: TuningArgs,
        /// Write (u, g_1(u), ..., g_L(u)) curves as CSV.
        #[arg(long)]
        emit_curves: Option<PathBuf>,
    },
    /// Single-index model with a surface link (continuous treatment).
    FitSimsl {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        tuning: TuningArgs,
        /// Write a (u, a, g) surface grid as CSV.
        #[arg(long)]
        emit_curves: Option<PathBuf>,
    },
    /// Fit q = 1..qmax multi-index models and select q by AIC.
    SelectDim {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        tuning: TuningArgs,
        #[arg(long, default_value_t = 3)]
        qmax: usize,
    },
    /// Repeated-split IPWE value of a fitted treatment rule.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        tuning: TuningArgs,
        /// linear | simml | stiefel:<q> | fixed:<a> | random
        #[arg(long)]
        estimator: String,
        /// Train:test split ratio.
        #[arg(long, default_value_t = 5.0)]
        ratio: f64,
        #[arg(long, default_value_t = 200)]
        reps: usize,
    },
    /// Draw a dataset from a generator spec (TOML) to CSV plus truth JSON.
    Simulate {
        /// Generator spec in TOML.
        #[arg(long)]
        config: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        output: PathBuf,
        /// Ground-truth record JSON path.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Center link sets that violate the identifiability constraint.
        #[arg(long)]
        auto_center: bool,
    },
    /// Run a scenario × estimator × seed experiment from a TOML config.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        /// Directory for report.json and cells.csv.
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        tuning: TuningArgs,
    },
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    outcome: String,
    #[arg(long)]
    treatment: String,
    /// Comma-separated covariate column names.
    #[arg(long, value_delimiter = ',', required = true)]
    covariates: Vec<String>,
    /// Known randomization probabilities overriding the empirical estimate.
    #[arg(long, value_delimiter = ',')]
    probs: Option<Vec<f64>>,
}

#[derive(Args, Clone)]
struct TuningArgs {
    #[arg(long, default_value_t = 8)]
    basis_dim: usize,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 50)]
    max_iter: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl TuningArgs {
    fn fit_config(&self) -> FitConfig {
        FitConfig {
            basis_dim: self.basis_dim,
            tol: self.tol,
            max_iter: self.max_iter,
            seed: self.seed,
            init: InitStrategy::LeadingEigen,
            ..FitConfig::default()
        }
    }

    fn provenance(&self) -> serde_json::Value {
        let grid = LambdaGrid::default();
        json!({
            "basis_dim": self.basis_dim,
            "tensor_basis_dim": FitConfig::default().tensor_basis_dim,
            "degree": FitConfig::default().degree,
            "penalty_order": FitConfig::default().penalty_order,
            "tol": self.tol,
            "max_iter": self.max_iter,
            "seed": self.seed,
            "lambda_grid": { "lo": grid.lo, "hi": grid.hi, "count": grid.count },
            "lambda_refresh_every": FitConfig::default().lambda_refresh_every,
        })
    }
}

fn main() {
    let cli = Cli::parse();
    if cli.threads > 0 {
        // The global pool may already exist (tests); that is fine.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
    }
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(if e.is_usage() { 2 } else { 1 });
        }
    }
}

fn load_discrete(args: &DataArgs) -> Result<Dataset, Error> {
    let schema = Schema {
        outcome: args.outcome.clone(),
        treatment: args.treatment.clone(),
        covariates: args.covariates.clone(),
        treatment_continuous: false,
    };
    let mut ds = data::load_csv(&args.input, &schema)?;
    if let Some(p) = &args.probs {
        ds = ds.with_probs(p.clone())?;
    }
    Ok(ds)
}

fn load_continuous(args: &DataArgs) -> Result<Dataset, Error> {
    let schema = Schema {
        outcome: args.outcome.clone(),
        treatment: args.treatment.clone(),
        covariates: args.covariates.clone(),
        treatment_continuous: true,
    };
    data::load_csv(&args.input, &schema)
}

fn preprocess_discrete(
    ds: &Dataset,
) -> Result<(Dataset, serde_json::Value), Error> {
    let (ds, rep1) = data::standardize_covariates(ds)?;
    let (ds, rep2) = data::center_outcome_by_treatment(&ds)?;
    let pre = json!({
        "standardization": rep1.standardization,
        "centering": rep2.centering,
        "pi": rep2.pi,
    });
    Ok((ds, pre))
}

fn emit(value: serde_json::Value) -> Result<(), Error> {
    println!(
        "{}",
        serde_json::to_string_pretty(&value).map_err(|e| Error::Config(e.to_string()))?
    );
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::FitLinear { data: args } => {
            let raw = load_discrete(&args)?;
            let (ds, pre) = preprocess_discrete(&raw)?;
            let fit = fit_linear_gem(&ds)?;
            emit(json!({
                "command": "fit-linear",
                "config": { "probs": args.probs },
                "preprocess": pre,
                "fit": fit,
            }))
        }
        Command::FitSimml {
            data: args,
            tuning,
            emit_curves,
        } => {
            let raw = load_discrete(&args)?;
            let (ds, pre) = preprocess_discrete(&raw)?;
            let cfg = tuning.fit_config();
            let fit = fit_simml(&ds, &cfg)?;
            if !fit.converged {
                eprintln!(
                    "warning: no convergence within {} iterations (last relative change above {})",
                    cfg.max_iter, cfg.tol
                );
            }
            if let Some(path) = emit_curves {
                let mut w = csv::Writer::from_path(&path).map_err(Error::Csv)?;
                let mut header = vec!["u".to_string()];
                header.extend((1..=fit.levels()).map(|a| format!("g{a}")));
                w.write_record(&header).map_err(Error::Csv)?;
                let (lo, hi) = fit.basis.domain();
                for k in 0..200 {
                    let u = lo + (hi - lo) * k as f64 / 199.0;
                    let (g, _) = fit.links_at(u);
                    let mut rec = vec![u.to_string()];
                    rec.extend(g.iter().map(|v| v.to_string()));
                    w.write_record(&rec).map_err(Error::Csv)?;
                }
                w.flush()?;
                eprintln!("curves written to {}", path.display());
            }
            emit(json!({
                "command": "fit-simml",
                "config": tuning.provenance(),
                "preprocess": pre,
                "fit": fit,
            }))
        }
        Command::FitSimsl {
            data: args,
            tuning,
            emit_curves,
        } => {
            let raw = load_continuous(&args)?;
            let (ds, rep1) = data::standardize_covariates(&raw)?;
            let (ds, rep2) = data::center_outcome_grand(&ds)?;
            let cfg = tuning.fit_config();
            let fit = fit_simsl(&ds, &cfg)?;
            if !fit.converged {
                eprintln!("warning: no convergence within {} iterations", cfg.max_iter);
            }
            if let Some(path) = emit_curves {
                let mut w = csv::Writer::from_path(&path).map_err(Error::Csv)?;
                w.write_record(["u", "a", "g"]).map_err(Error::Csv)?;
                for (u, a, g) in fit.surface_grid(50, 50) {
                    w.write_record([u.to_string(), a.to_string(), g.to_string()])
                        .map_err(Error::Csv)?;
                }
                w.flush()?;
                eprintln!("surface grid written to {}", path.display());
            }
            emit(json!({
                "command": "fit-simsl",
                "config": tuning.provenance(),
                "preprocess": {
                    "standardization": rep1.standardization,
                    "centering": rep2.centering,
                },
                "fit": fit,
            }))
        }
        Command::SelectDim {
            data: args,
            tuning,
            qmax,
        } => {
            let raw = load_discrete(&args)?;
            let (ds, pre) = preprocess_discrete(&raw)?;
            let cfg = tuning.fit_config();
            let sel = select_dimension(&ds, qmax, &cfg)?;
            eprintln!("q   AIC");
            for (k, q) in sel.candidates.iter().enumerate() {
                match sel.aic[k] {
                    Some(a) => eprintln!(
                        "{q}   {a:.2}{}",
                        if *q == sel.selected { "   <- selected" } else { "" }
                    ),
                    None => eprintln!("{q}   failed"),
                }
            }
            let selected_fit = sel.fits[sel.selected - 1].clone();
            emit(json!({
                "command": "select-dim",
                "config": { "qmax": qmax, "fit": tuning.provenance() },
                "preprocess": pre,
                "selection": sel,
                "selected_fit": selected_fit,
            }))
        }
        Command::Evaluate {
            data: args,
            tuning,
            estimator,
            ratio,
            reps,
        } => {
            let raw = load_discrete(&args)?;
            let cfg = tuning.fit_config();
            let spec = parse_estimator(&estimator, &cfg)?;
            let report = split_evaluate(&raw, &spec, ratio, reps, tuning.seed)?;
            eprintln!(
                "{}: {:.2} ({:.2}) over {} splits at {}:1",
                report.estimator, report.mean, report.sd, report.reps, ratio
            );
            emit(json!({
                "command": "evaluate",
                "config": {
                    "estimator": estimator,
                    "ratio": ratio,
                    "reps": reps,
                    "fit": tuning.provenance(),
                },
                "report": report,
            }))
        }
        Command::Simulate {
            config,
            output,
            truth,
            seed,
            auto_center,
        } => {
            let text = std::fs::read_to_string(&config)?;
            let mut spec: GeneratorSpec =
                toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            if auto_center {
                spec.auto_center = true;
            }
            let (ds, truth_record) = sim::generate(&spec)?;
            write_dataset_csv(&ds, &output)?;
            if let Some(path) = &truth {
                let json = serde_json::to_string_pretty(&truth_record)
                    .map_err(|e| Error::Config(e.to_string()))?;
                std::fs::write(path, json)?;
            }
            emit(json!({
                "command": "simulate",
                "config": spec,
                "rows": ds.n(),
                "output": output.display().to_string(),
                "truth": truth.map(|p| p.display().to_string()),
            }))
        }
        Command::Experiment {
            config,
            output,
            tuning,
        } => {
            let cfg = sim::load_experiment_config(&config)?;
            let report = sim::run_experiment(&cfg, &tuning.fit_config())?;
            sim::write_report(&report, &output)?;
            eprintln!(
                "{} cells ({} failed); reports in {}",
                report.cells.len(),
                report.cells.iter().filter(|c| c.error.is_some()).count(),
                output.display()
            );
            emit(json!({
                "command": "experiment",
                "config_path": config.display().to_string(),
                "aggregates": report.aggregates,
            }))
        }
    }
}

fn parse_estimator(name: &str, cfg: &FitConfig) -> Result<EstimatorSpec, Error> {
    if name == "linear" {
        return Ok(EstimatorSpec::LinearGem);
    }
    if name == "simml" {
        return Ok(EstimatorSpec::Simml(cfg.clone()));
    }
    if name == "random" {
        return Ok(EstimatorSpec::Random);
    }
    if let Some(q) = name.strip_prefix("stiefel:") {
        let q: usize = q
            .parse()
            .map_err(|_| Error::Validation(format!("bad dimension in '{name}'")))?;
        return Ok(EstimatorSpec::Multi {
            q,
            cfg: cfg.clone(),
        });
    }
    if let Some(a) = name.strip_prefix("fixed:") {
        let a: usize = a
            .parse()
            .map_err(|_| Error::Validation(format!("bad label in '{name}'")))?;
        return Ok(EstimatorSpec::Fixed(a));
    }
    Err(Error::Validation(format!(
        "unknown estimator '{name}'; use linear, simml, stiefel:<q>, fixed:<a>, or random"
    )))
}

fn write_dataset_csv(ds: &Dataset, path: &PathBuf) -> Result<(), Error> {
    let mut w = csv::Writer::from_path(path).map_err(Error::Csv)?;
    let mut header: Vec<String> = ds.covariate_names().to_vec();
    header.push("a".into());
    header.push("y".into());
    w.write_record(&header).map_err(Error::Csv)?;
    for i in 0..ds.n() {
        let mut rec: Vec<String> = (0..ds.p()).map(|j| ds.x()[(i, j)].to_string()).collect();
        let a = match ds.treatment() {
            sdrint::data::Treatment::Discrete { labels, .. } => labels[i].to_string(),
            sdrint::data::Treatment::Continuous(doses) => doses[i].to_string(),
        };
        rec.push(a);
        rec.push(ds.y()[i].to_string());
        w.write_record(&rec).map_err(Error::Csv)?;
    }
    w.flush()?;
    Ok(())
}
