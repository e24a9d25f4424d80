//! The ablation ladder (baseline, +prior, +fusion, +reweighting) and the
//! eta / omega sweeps, each over several training seeds.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use boostdet::detector::{
    evaluate, train_epoch, Detector, InferenceConfig, ModelConfig, ScoreMode, TrainConfig, TrainState, Variant,
};
use boostdet::losses::FiouConfig;
use boostdet::postprocess::ApSummary;
use boostdet::reweighting::BrConfig;
use boostdet::synthdata::{Dataset, Scene};
use rayon::prelude::*;
use serde::Serialize;

use crate::cli::AblateMode;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const RUNS_FILE: &str = "ablation_runs.csv";
pub const SUMMARY_FILE: &str = "ablation.csv";

/// Ladder rows: label, trained variant, ranking score.
pub const LADDER: [(&str, Variant, ScoreMode); 4] = [
    ("baseline", Variant::Baseline, ScoreMode::ClsOnly),
    ("+prior", Variant::NoBr, ScoreMode::ClsOnly),
    ("+fusion", Variant::NoBr, ScoreMode::Fused),
    ("+br", Variant::Full, ScoreMode::Fused),
];

type JobResult = CliResult<(String, Vec<(ScoreMode, ApSummary)>)>;

/// One training run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Job {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Job {
    fn key(&self) -> String {
        serde_json::to_string(self).expect("configs serialize")
    }
}

/// One evaluated cell of a table.
#[derive(Debug, Clone)]
pub struct Cell {
    pub table: &'static str,
    pub setting: String,
    pub seed: u64,
    pub job: Job,
    pub score_mode: ScoreMode,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRow {
    pub table: String,
    pub setting: String,
    pub seed: u64,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub table: String,
    pub setting: String,
    pub runs: usize,
    pub mean_ap: f64,
    pub min_ap: f64,
    pub max_ap: f64,
    pub mean_ap50: f64,
    pub mean_ap75: f64,
}

fn variant_job(run: &RunConfig, variant: Variant, seed: u64) -> Job {
    let (mut model, mut train, mut inf) = (run.model.clone(), run.train.clone(), run.inference);
    variant.apply(&mut model, &mut train, &mut inf);
    Job { model, train, seed }
}

pub fn seeds(run: &RunConfig) -> Vec<u64> {
    (0..run.ablation.seeds as u64).map(|k| run.seed + k).collect()
}

pub fn plan(run: &RunConfig, mode: AblateMode) -> Vec<Cell> {
    let mut cells = Vec::new();
    let ladder = matches!(mode, AblateMode::Ladder | AblateMode::All);
    let eta = matches!(mode, AblateMode::Eta | AblateMode::All);
    let omega = matches!(mode, AblateMode::Omega | AblateMode::All);
    for seed in seeds(run) {
        if ladder {
            for (label, variant, score_mode) in LADDER {
                cells.push(Cell { table: "ladder", setting: label.into(), seed, job: variant_job(run, variant, seed), score_mode });
            }
        }
        if eta {
            for &e in &run.ablation.eta_values {
                let mut job = variant_job(run, Variant::Full, seed);
                job.train.fiou = FiouConfig { eta: e };
                cells.push(Cell { table: "eta", setting: format!("eta={e}"), seed, job, score_mode: ScoreMode::Fused });
            }
        }
        if omega {
            for normalize in [true, false] {
                for &w in &run.ablation.omega_values {
                    let mut job = variant_job(run, Variant::Full, seed);
                    job.train.br = Some(BrConfig { omega: w, normalize });
                    let setting = format!("omega={w};normalize={normalize}");
                    cells.push(Cell { table: "omega", setting, seed, job, score_mode: ScoreMode::Fused });
                }
            }
        }
    }
    cells
}

/// Trains `job` on the training split and scores the validation split under each mode.
pub fn run_job(job: &Job, ds: &Dataset, inference: &InferenceConfig, modes: &[ScoreMode]) -> CliResult<Vec<ApSummary>> {
    let mut det = Detector::<f64>::new(job.model.clone(), job.seed)?;
    let train: Vec<&Scene> = ds.train_scenes().collect();
    let val: Vec<&Scene> = ds.val_scenes().collect();
    let mut state = TrainState::default();
    for _ in 0..job.train.epochs {
        train_epoch(&mut det, &train, &job.train, job.seed, &mut state)?;
    }
    modes
        .iter()
        .map(|&m| Ok(evaluate(&det, &val, &InferenceConfig { score_mode: m, ..*inference })?.0))
        .collect()
}

/// Runs every distinct training of `cells` on a pool of `threads` workers.
pub fn execute(cells: &[Cell], ds: &Dataset, inference: &InferenceConfig, threads: usize) -> CliResult<Vec<RunRow>> {
    let mut jobs: BTreeMap<String, (Job, Vec<ScoreMode>)> = BTreeMap::new();
    for c in cells {
        let entry = jobs.entry(c.job.key()).or_insert_with(|| (c.job.clone(), Vec::new()));
        if !entry.1.contains(&c.score_mode) {
            entry.1.push(c.score_mode);
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::new("config", format!("thread pool: {e}")))?;
    let work: Vec<(&String, &(Job, Vec<ScoreMode>))> = jobs.iter().collect();
    eprintln!("ablation: {} trainings on {threads} thread(s)", work.len());
    let done: Vec<JobResult> = pool.install(|| {
        work.par_iter()
            .map(|(key, (job, modes))| {
                let aps = run_job(job, ds, inference, modes)?;
                Ok(((*key).clone(), modes.iter().copied().zip(aps).collect()))
            })
            .collect()
    });
    let mut results: BTreeMap<String, Vec<(ScoreMode, ApSummary)>> = BTreeMap::new();
    for d in done {
        let (k, v) = d?;
        results.insert(k, v);
    }
    Ok(cells
        .iter()
        .map(|c| {
            let s = &results[&c.job.key()].iter().find(|(m, _)| *m == c.score_mode).expect("mode evaluated").1;
            RunRow { table: c.table.into(), setting: c.setting.clone(), seed: c.seed, ap: s.ap, ap50: s.ap50, ap75: s.ap75 }
        })
        .collect())
}

/// Mean and range per (table, setting), in first-appearance order.
pub fn summarize(rows: &[RunRow]) -> Vec<SummaryRow> {
    let mut order: Vec<(String, String)> = Vec::new();
    for r in rows {
        let k = (r.table.clone(), r.setting.clone());
        if !order.contains(&k) {
            order.push(k);
        }
    }
    order
        .into_iter()
        .map(|(table, setting)| {
            let group: Vec<&RunRow> = rows.iter().filter(|r| r.table == table && r.setting == setting).collect();
            let n = group.len() as f64;
            let mean = |f: fn(&RunRow) -> f64| group.iter().map(|r| f(r)).sum::<f64>() / n;
            SummaryRow {
                runs: group.len(),
                mean_ap: mean(|r| r.ap),
                min_ap: group.iter().map(|r| r.ap).fold(f64::INFINITY, f64::min),
                max_ap: group.iter().map(|r| r.ap).fold(f64::NEG_INFINITY, f64::max),
                mean_ap50: mean(|r| r.ap50),
                mean_ap75: mean(|r| r.ap75),
                table,
                setting,
            }
        })
        .collect()
}

pub fn write_outputs(out: &Path, rows: &[RunRow], summary: &[SummaryRow]) -> CliResult<()> {
    fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join(RUNS_FILE))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(out.join(SUMMARY_FILE))?;
    for s in summary {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

/// `mean ± half-range` table for the terminal.
pub fn render(summary: &[SummaryRow]) -> String {
    let mut s = format!("{:<8} {:<28} {:>4} {:>16} {:>8} {:>8}\n", "table", "setting", "runs", "AP (mean±range)", "AP50", "AP75");
    for r in summary {
        s += &format!(
            "{:<8} {:<28} {:>4} {:>8.2}±{:<7.2} {:>8.2} {:>8.2}\n",
            r.table,
            r.setting,
            r.runs,
            100.0 * r.mean_ap,
            50.0 * (r.max_ap - r.min_ap),
            100.0 * r.mean_ap50,
            100.0 * r.mean_ap75
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_has_four_rows_per_seed_and_three_trainings() {
        let run = RunConfig::default();
        let cells = plan(&run, AblateMode::Ladder);
        assert_eq!(cells.len(), 4 * 3);
        let mut keys: Vec<String> = cells.iter().map(|c| c.job.key()).collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), 3 * 3);
    }

    #[test]
    fn sweeps_cover_the_reference_values() {
        let run = RunConfig::default();
        let cells = plan(&run, AblateMode::All);
        let settings: Vec<&str> = cells.iter().map(|c| c.setting.as_str()).collect();
        for s in ["eta=0", "eta=2", "omega=0;normalize=true", "omega=0.5;normalize=true", "omega=0.5;normalize=false"] {
            assert!(settings.contains(&s), "{s}");
        }
    }

    #[test]
    fn summary_mean_and_range() {
        let row = |seed, ap| RunRow { table: "ladder".into(), setting: "x".into(), seed, ap, ap50: 0.5, ap75: 0.1 };
        let s = summarize(&[row(0, 0.2), row(1, 0.4), row(2, 0.3)]);
        assert_eq!(s.len(), 1);
        assert!((s[0].mean_ap - 0.3).abs() < 1e-15);
        assert_eq!((s[0].min_ap, s[0].max_ap, s[0].runs), (0.2, 0.4, 3));
    }
}
