use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use boostdet::detector::{
    evaluate, load_checkpoint, save_checkpoint, train_epoch, Detector, EpochLog, InferenceConfig, ScoreMode,
    TrainConfig, TrainState, CHECKPOINT_MANIFEST,
};
use boostdet::losses::LossComponents;
use boostdet::postprocess::{pr_curve, ApSummary, SceneResult};
use boostdet::synthdata::{generate_dataset, read_dataset, write_dataset, Dataset, Scene};
use serde::Serialize;
use serde_json::json;

use crate::cli::Split;
use crate::config::{check_dataset_fits, json_diff, RunConfig};
use crate::error::{CliError, CliResult};

pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const METRICS_FILE: &str = "metrics.json";
pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const PR_CURVES_FILE: &str = "pr_curves.csv";

/// IoU threshold of the exported precision/recall curves.
const PR_IOU: f64 = 0.5;

#[derive(Debug, Clone, Serialize)]
pub struct GenSummary {
    pub scenes: usize,
    pub objects: usize,
    pub hard_objects: usize,
    pub train: usize,
    pub val: usize,
}

pub fn gen_data(run: &RunConfig, out: &Path) -> CliResult<GenSummary> {
    let ds = generate_dataset(&run.dataset)?;
    fs::create_dir_all(out).map_err(|e| CliError::new("io", format!("cannot create {}: {e}", out.display())))?;
    run.echo(out)?;
    write_dataset(&ds, out, run.feature_encoding)?;
    let hard = ds
        .scenes
        .iter()
        .flat_map(|s| &s.spec.objects)
        .filter(|o| !o.occluder && o.vagueness >= boostdet::synthdata::HARD_VAGUENESS)
        .count();
    Ok(GenSummary { scenes: ds.scenes.len(), objects: ds.num_objects(), hard_objects: hard, train: ds.train.len(), val: ds.val.len() })
}

/// Reads `run.data`, or generates the configured dataset when none is given.
pub fn dataset_for(run: &RunConfig, require: bool) -> CliResult<Dataset> {
    let ds = match &run.data {
        Some(dir) => read_dataset(dir).map_err(|e| CliError::new(e.category(), format!("{}: {e}", dir.display())))?,
        None if require => return Err(CliError::new("usage", "no dataset; pass --data or set `data`")),
        None => generate_dataset(&run.dataset)?,
    };
    let (model, _, _) = run.resolved();
    check_dataset_fits(&ds.config, &model)?;
    Ok(ds)
}

#[derive(Debug, Serialize)]
struct EpochRecord<'a> {
    event: &'static str,
    epoch: usize,
    learning_rate: f64,
    steps: usize,
    total: f64,
    /// Loss terms multiplied by their weights; these sum to `total`.
    weighted: &'a LossComponents<f64>,
    unweighted: &'a LossComponents<f64>,
    br_weights: Option<boostdet::detector::BrStats>,
    mean_positives: f64,
    mean_fg_rois: f64,
    mean_grad_norm: f64,
    max_grad_norm: f64,
}

fn epoch_record(log: &EpochLog) -> EpochRecord<'_> {
    EpochRecord {
        event: "epoch",
        epoch: log.epoch,
        learning_rate: log.learning_rate,
        steps: log.steps,
        total: log.total,
        weighted: &log.weighted,
        unweighted: &log.components,
        br_weights: log.br_weights,
        mean_positives: log.mean_positives,
        mean_fg_rois: log.mean_fg_rois,
        mean_grad_norm: log.mean_grad_norm,
        max_grad_norm: log.max_grad_norm,
    }
}

fn write_line(w: &mut impl Write, v: &impl Serialize) -> CliResult<()> {
    serde_json::to_writer(&mut *w, v)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Saves beside the target and swaps it in, so a crash never leaves a torn checkpoint.
fn save_atomically(dir: &Path, det: &Detector<f64>, run: &RunConfig, state: TrainState) -> CliResult<()> {
    let (_, train, _) = run.resolved();
    let tmp = dir.with_extension("tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    save_checkpoint(&tmp, det, &train, run.seed, state)?;
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&tmp, dir)?;
    Ok(())
}

/// The epoch count is a budget, not part of a run's identity: the schedule
/// depends only on the milestones, so a run may be resumed with a larger one.
fn budgetless(train: &TrainConfig) -> TrainConfig {
    TrainConfig { epochs: 0, ..train.clone() }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub final_total: Option<f64>,
    pub checkpoint: PathBuf,
}

pub fn train(run: &RunConfig, out: &Path, resume: bool) -> CliResult<TrainSummary> {
    let ds = dataset_for(run, true)?;
    let (model, train_cfg, _) = run.resolved();
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    let (mut det, mut state) = if resume {
        let (det, ckpt) = load_checkpoint::<f64>(&ckpt_dir)?;
        let want = json!({"model": &model, "train": budgetless(&train_cfg), "seed": run.seed});
        let got = json!({"model": &ckpt.model, "train": budgetless(&ckpt.train), "seed": ckpt.seed});
        let diff = json_diff(&got, &want);
        if !diff.is_empty() {
            return Err(CliError::new("config-mismatch", format!("checkpoint vs config: {}", diff.join("; "))));
        }
        (det, ckpt.state)
    } else {
        (Detector::<f64>::new(model, run.seed)?, TrainState::default())
    };
    run.echo(out)?;
    let log_file = OpenOptions::new().create(true).write(true).append(resume).truncate(!resume).open(out.join(TRAIN_LOG))?;
    let mut log = BufWriter::new(log_file);
    if !resume {
        save_atomically(&ckpt_dir, &det, run, state)?;
    }
    let scenes: Vec<&Scene> = ds.train_scenes().collect();
    let mut final_total = None;
    while state.epoch < train_cfg.epochs {
        let before = state;
        match train_epoch(&mut det, &scenes, &train_cfg, run.seed, &mut state) {
            Ok(epoch_log) => {
                write_line(&mut log, &epoch_record(&epoch_log))?;
                eprintln!(
                    "epoch {:>2}  lr {:.5}  total {:.4}  cls {:.4}  reg {:.4}",
                    epoch_log.epoch, epoch_log.learning_rate, epoch_log.total, epoch_log.weighted.cls, epoch_log.weighted.reg
                );
                final_total = Some(epoch_log.total);
                save_atomically(&ckpt_dir, &det, run, state)?;
            }
            Err(e) => {
                write_line(
                    &mut log,
                    &json!({"event": "abort", "epoch": before.epoch, "error": e.to_string(), "checkpoint_epoch": before.epoch}),
                )?;
                return Err(CliError::new(
                    e.category(),
                    format!("{e}; last good checkpoint {} holds {} completed epochs", ckpt_dir.display(), before.epoch),
                ));
            }
        }
    }
    write_line(&mut log, &json!({"event": "done", "epochs": state.epoch}))?;
    Ok(TrainSummary { epochs: state.epoch, final_total, checkpoint: ckpt_dir })
}

#[derive(Debug, Clone, Serialize)]
pub struct ModeMetrics {
    pub score_mode: ScoreMode,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub per_class: Vec<ClassAp>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub ap: f64,
}

impl ModeMetrics {
    fn new(score_mode: ScoreMode, s: &ApSummary) -> Self {
        Self {
            score_mode,
            ap: s.ap,
            ap50: s.ap50,
            ap75: s.ap75,
            per_class: s.per_class.iter().map(|&(class_id, ap)| ClassAp { class_id, ap }).collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Metrics {
    pub split: String,
    pub scenes: usize,
    pub checkpoint_epoch: usize,
    #[serde(flatten)]
    pub primary: ModeMetrics,
    /// Alternative rankings, present with `--all-modes`.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub modes: Vec<ModeMetrics>,
}

fn split_scenes(ds: &Dataset, split: Split) -> Vec<&Scene> {
    match split {
        Split::Train => ds.train_scenes().collect(),
        Split::Val => ds.val_scenes().collect(),
        Split::All => ds.scenes.iter().collect(),
    }
}

/// Compares the configuration a checkpoint was trained with against the run's.
pub fn check_checkpoint_config(run: &RunConfig, ckpt: &boostdet::detector::Checkpoint) -> CliResult<()> {
    let (model, train, _) = run.resolved();
    let diff = json_diff(
        &json!({"model": &ckpt.model, "train": budgetless(&ckpt.train)}),
        &json!({"model": model, "train": budgetless(&train)}),
    );
    if diff.is_empty() {
        Ok(())
    } else {
        Err(CliError::new("config-mismatch", format!("checkpoint vs config: {}", diff.join("; "))))
    }
}

pub fn eval(
    run: &RunConfig,
    checkpoint: &Path,
    out: &Path,
    split: Split,
    all_modes: bool,
    strict_config: bool,
) -> CliResult<Metrics> {
    if !checkpoint.join(CHECKPOINT_MANIFEST).exists() {
        return Err(CliError::new("io", format!("no checkpoint in {}", checkpoint.display())));
    }
    let (det, ckpt) = load_checkpoint::<f64>(checkpoint)?;
    if strict_config {
        check_checkpoint_config(run, &ckpt)?;
    }
    let ds = match &run.data {
        Some(dir) => read_dataset(dir)?,
        None => return Err(CliError::new("usage", "no dataset; pass --data or set `data`")),
    };
    check_dataset_fits(&ds.config, &det.config)?;
    let (_, _, inference) = run.resolved();
    let scenes = split_scenes(&ds, split);
    let (summary, results) = evaluate(&det, &scenes, &inference)?;
    let mut modes = Vec::new();
    if all_modes {
        for mode in [ScoreMode::Fused, ScoreMode::ClsOnly, ScoreMode::PriorOnly] {
            if mode != inference.score_mode {
                let (s, _) = evaluate(&det, &scenes, &InferenceConfig { score_mode: mode, ..inference })?;
                modes.push(ModeMetrics::new(mode, &s));
            }
        }
    }
    let metrics = Metrics {
        split: format!("{split:?}").to_lowercase(),
        scenes: scenes.len(),
        checkpoint_epoch: ckpt.state.epoch,
        primary: ModeMetrics::new(inference.score_mode, &summary),
        modes,
    };
    fs::create_dir_all(out)?;
    run.echo(out)?;
    fs::write(out.join(METRICS_FILE), serde_json::to_string_pretty(&metrics)? + "\n")?;
    write_detections(&out.join(DETECTIONS_FILE), &results)?;
    write_pr_curves(&out.join(PR_CURVES_FILE), &results, det.config.num_classes)?;
    Ok(metrics)
}

fn write_detections(path: &Path, results: &[SceneResult<f64>]) -> CliResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (i, r) in results.iter().enumerate() {
        let dets: Vec<_> = r
            .detections
            .iter()
            .map(|d| json!({"bbox": d.bbox.to_array(), "class_id": d.class_id, "prior": d.score.prior, "cls": d.score.cls, "score": d.score.fused}))
            .collect();
        write_line(&mut w, &json!({"scene": i, "detections": dets}))?;
    }
    Ok(())
}

fn write_pr_curves(path: &Path, results: &[SceneResult<f64>], num_classes: usize) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["class_id", "iou_threshold", "recall", "precision"])?;
    for c in 0..num_classes {
        let curve = pr_curve(results, c, PR_IOU);
        for (r, p) in curve.recall.iter().zip(&curve.precision) {
            w.write_record([c.to_string(), PR_IOU.to_string(), r.to_string(), p.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

