//! Command-line driver of the `boostdet` toy detector.

pub mod ablate;
pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod plot;
pub mod svg;

use std::fs;

use boostdet::gradsuite::{run_suite, CheckOutcome};

use crate::cli::{require_out, threads, Cli, Command};
use crate::error::{CliError, CliResult};

pub const GRADCHECK_FILE: &str = "gradcheck.json";

fn print_json(v: &impl serde::Serialize) -> CliResult<()> {
    println!("{}", serde_json::to_string(v)?);
    Ok(())
}

pub fn gradcheck_report(outcomes: &[CheckOutcome]) -> String {
    let mut s = format!("{:<14} {:<6} {:>6} {:>12}  result\n", "check", "kind", "points", "worst rel");
    for o in outcomes {
        s += &format!(
            "{:<14} {:<6} {:>6} {:>12.3e}  {}\n",
            o.name,
            format!("{:?}", o.kind).to_lowercase(),
            o.points,
            o.worst_relative_error,
            if o.passed { "PASS" } else { "FAIL" }
        );
    }
    s
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData { common, scenes, mix } => {
            let mut run = common.resolve(None)?;
            if let Some(s) = common.seed {
                run.dataset.seed = s;
            }
            if let Some(n) = scenes {
                run.dataset.n_scenes = n;
            }
            if let Some(m) = mix {
                run.dataset.vagueness_mix = m;
            }
            run.validate()?;
            let out = require_out(&run)?;
            let summary = commands::gen_data(&run, &out)?;
            eprintln!(
                "{} scenes ({} train / {} val), {} objects, {} hard",
                summary.scenes, summary.train, summary.val, summary.objects, summary.hard_objects
            );
            print_json(&summary)
        }
        Command::Train { common, data, resume } => {
            let run = common.resolve(data.as_ref())?;
            let out = require_out(&run)?;
            let summary = commands::train(&run, &out, resume)?;
            print_json(&summary)
        }
        Command::Eval { common, data, checkpoint, split, all_modes } => {
            let run = common.resolve(data.as_ref())?;
            let out = require_out(&run)?;
            let m = commands::eval(&run, &checkpoint, &out, split, all_modes, true)?;
            eprintln!("AP {:.4}  AP50 {:.4}  AP75 {:.4}  ({} scenes)", m.primary.ap, m.primary.ap50, m.primary.ap75, m.scenes);
            print_json(&m)
        }
        Command::Ablate { common, data, mode, seeds } => {
            let mut run = common.resolve(data.as_ref())?;
            if let Some(n) = seeds {
                run.ablation.seeds = n;
            }
            run.validate()?;
            let out = require_out(&run)?;
            let ds = commands::dataset_for(&run, false)?;
            run.echo(&out)?;
            let cells = ablate::plan(&run, mode);
            let rows = ablate::execute(&cells, &ds, &run.inference, threads()?)?;
            let summary = ablate::summarize(&rows);
            ablate::write_outputs(&out, &rows, &summary)?;
            print!("{}", ablate::render(&summary));
            Ok(())
        }
        Command::GradCheck { common, points, tolerance } => {
            let run = common.resolve(None)?;
            if points == 0 || tolerance.is_nan() || tolerance <= 0.0 {
                return Err(CliError::new("usage", "--points must be >= 1 and --tolerance > 0"));
            }
            let outcomes = run_suite(points, run.seed, tolerance)?;
            print!("{}", gradcheck_report(&outcomes));
            if let Some(out) = &run.out {
                fs::create_dir_all(out)?;
                fs::write(out.join(GRADCHECK_FILE), serde_json::to_string_pretty(&outcomes)? + "\n")?;
            }
            let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name.as_str()).collect();
            if failed.is_empty() {
                Ok(())
            } else {
                Err(CliError::new("check", format!("gradient checks failed: {}", failed.join(", "))))
            }
        }
        Command::Plot { common, inputs } => {
            let run = common.resolve(None)?;
            let out = require_out(&run)?;
            for p in plot::plot(&inputs, &out)? {
                eprintln!("wrote {}", p.display());
            }
            Ok(())
        }
    }
}
