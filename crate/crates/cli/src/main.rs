//! muwarm command line: each subcommand reproduces one experiment protocol.
//!
//! Usage:
//!   muwarm <train|grid|transfer|warmstart|ablate|succ|coordcheck|report>
//!          [--config PATH] [--out DIR] [--seed N] [--lambda X] [--corpus PATH]
//!
//! Exit code 0 iff every assertion of the recipe passes.

use std::path::PathBuf;
use std::process::ExitCode;

use muwarm::experiments::{
    run_ablate, run_coordcheck, run_grid, run_report, run_succ, run_train, run_transfer,
    run_warmstart, ExperimentSpec, RecipeReport, Workspace,
};

fn usage() -> ! {
    eprintln!(
        "usage: muwarm <train|grid|transfer|warmstart|ablate|succ|coordcheck|report> \
         [--config PATH] [--out DIR] [--seed N] [--lambda X] [--corpus PATH]"
    );
    std::process::exit(2);
}

struct Args {
    recipe: String,
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    lambda: Option<f64>,
    corpus: Option<PathBuf>,
}

fn parse_args() -> Args {
    let mut argv = std::env::args().skip(1);
    let recipe = match argv.next() {
        Some(r) => r,
        None => usage(),
    };
    let mut args = Args {
        recipe,
        config: None,
        out: None,
        seed: None,
        lambda: None,
        corpus: None,
    };
    while let Some(flag) = argv.next() {
        let mut value = || argv.next().unwrap_or_else(|| usage());
        match flag.as_str() {
            "--config" => args.config = Some(PathBuf::from(value())),
            "--out" => args.out = Some(PathBuf::from(value())),
            "--seed" => {
                args.seed = Some(value().parse().unwrap_or_else(|_| usage()));
            }
            "--lambda" => {
                args.lambda = Some(value().parse().unwrap_or_else(|_| usage()));
            }
            "--corpus" => args.corpus = Some(PathBuf::from(value())),
            _ => usage(),
        }
    }
    args
}

fn main() -> ExitCode {
    let args = parse_args();
    let mut spec = match &args.config {
        Some(path) => match ExperimentSpec::load(path) {
            Ok(s) => s,
            Err(e) => {
                eprintln!("error: cannot load config {}: {e}", path.display());
                return ExitCode::from(2);
            }
        },
        None => ExperimentSpec::default(),
    };
    spec.recipe = args.recipe.clone();
    if let Some(out) = args.out {
        spec.out_dir = out;
    }
    if let Some(seed) = args.seed {
        spec.seeds = vec![seed];
    }
    if let Some(lambda) = args.lambda {
        spec.lambda_shrink = lambda;
    }
    if let Some(corpus) = args.corpus {
        spec.corpus_path = Some(corpus);
    }

    let corpus = match spec.corpus() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: corpus: {e}");
            return ExitCode::from(2);
        }
    };
    let workspace = match Workspace::new(&spec.out_dir, corpus) {
        Ok(w) => w,
        Err(e) => {
            eprintln!("error: workspace: {e}");
            return ExitCode::from(2);
        }
    };

    let result: muwarm_core::Result<RecipeReport> = match args.recipe.as_str() {
        "train" => run_train(&spec, &workspace),
        "grid" => run_grid(&spec, &workspace),
        "transfer" => run_transfer(&spec, &workspace),
        "warmstart" => run_warmstart(&spec, &workspace),
        "ablate" => run_ablate(&spec, &workspace),
        "succ" => run_succ(&spec, &workspace),
        "coordcheck" => run_coordcheck(&spec, &workspace),
        "report" => run_report(&spec, &workspace),
        _ => usage(),
    };

    match result {
        Ok(report) => {
            for a in &report.assertions {
                println!(
                    "[{}] {}{}",
                    if a.pass { "PASS" } else { "FAIL" },
                    a.name,
                    if a.detail.is_empty() {
                        String::new()
                    } else {
                        format!(" — {}", a.detail)
                    }
                );
            }
            // always refresh plots for recipes that produced runs
            if !report.runs.is_empty() {
                if let Err(e) = muwarm::report::emit(&spec.out_dir) {
                    eprintln!("warning: report emission failed: {e}");
                }
            }
            if report.all_pass() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
