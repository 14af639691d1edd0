//! Command implementations behind the CLI: training, continuum sweeps (clean
//! and masked), attribution grids, human-baseline fitting and comparison
//! reports. Every artifact lands under the configured output directory and is
//! stamped with the config hash and seed.

pub mod config;

pub use config::{Ctx, ExperimentConfig, ModelEntry};

use crate::attribution;
use crate::error::{Error, Result};
use crate::psychometrics::{self, HumanBaseline, PsychometricFit};
use crate::stats::{self, ComparisonRow, Condition, Strategy};
use crate::stimuli::{self, Fill, MaskSpec, MorphContinuum, Region};
use crate::train::{self, DatasetManifest, Split, TrainReport};
use crate::zoo::{self, Model, ModelSpec};
use config::{ContinuumConfig, DatasetConfig};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::PathBuf;

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^ (z >> 31)
}

fn model_seed(ctx: &Ctx, entry: &ModelEntry) -> u64 {
    let tag: u64 =
        entry.id().bytes().fold(0u64, |acc, b| acc.wrapping_mul(131).wrapping_add(b as u64));
    mix(ctx.seed, tag)
}

fn spec_for(ctx: &Ctx, entry: &ModelEntry) -> Result<ModelSpec> {
    ModelSpec::new(entry.name, ctx.cfg.input_size, 2)
}

fn checkpoint_dir(ctx: &Ctx, entry: &ModelEntry) -> PathBuf {
    ctx.out_dir.join("checkpoints").join(entry.id())
}

fn load_model(ctx: &Ctx, entry: &ModelEntry) -> Result<Model<f32>> {
    let dir = checkpoint_dir(ctx, entry);
    if !dir.join(zoo::checkpoint::MANIFEST_FILE).exists() {
        return Err(Error::MissingArtifact(format!(
            "checkpoint for {} (expected at {}; run `transfer` first)",
            entry.id(),
            dir.display()
        )));
    }
    let spec = spec_for(ctx, entry)?;
    zoo::build_model(&spec, zoo::Init::FromCheckpoint(&dir))
}

fn ensure_continuum(ctx: &Ctx) -> Result<MorphContinuum> {
    match &ctx.cfg.continuum {
        ContinuumConfig::Synthetic { n_levels, size } => {
            let continuum = stimuli::synth_continuum(*n_levels, mix(ctx.seed, 0xC0), *size)?;
            let dir = ctx.out_dir.join("data").join("continuum");
            stimuli::save_continuum(&continuum, &dir, "face").ok();
            Ok(continuum)
        }
        ContinuumConfig::Directory { directory, prefix } => {
            stimuli::load_continuum(directory, prefix.as_deref())
        }
    }
}

fn ensure_dataset(ctx: &Ctx) -> Result<(DatasetManifest, DatasetManifest)> {
    match &ctx.cfg.dataset {
        None => Err(Error::Validation(
            "this command needs a `dataset` section in the config".into(),
        )),
        Some(DatasetConfig::Synthetic { n_train, n_val, size }) => {
            let train_set = stimuli::synth_dataset(*n_train, mix(ctx.seed, 0xA1), *size);
            let val_set = stimuli::synth_dataset(*n_val, mix(ctx.seed, 0xB2), *size);
            let train_csv = train::data::write_image_set(
                &ctx.out_dir.join("data").join("train"),
                &train_set,
                "train",
            )?;
            let val_csv =
                train::data::write_image_set(&ctx.out_dir.join("data").join("val"), &val_set, "val")?;
            Ok((
                DatasetManifest::from_csv(&train_csv, Split::Train)?,
                DatasetManifest::from_csv(&val_csv, Split::Val)?,
            ))
        }
        Some(DatasetConfig::Csv { train_csv, val_csv }) => Ok((
            DatasetManifest::from_csv(train_csv, Split::Train)?,
            DatasetManifest::from_csv(val_csv, Split::Val)?,
        )),
        Some(DatasetConfig::Dirs { train_dir, val_dir }) => Ok((
            DatasetManifest::from_dir(train_dir, Split::Train)?,
            DatasetManifest::from_dir(val_dir, Split::Val)?,
        )),
    }
}

fn strip_timings(ctx: &Ctx, report: &mut TrainReport) {
    if !ctx.cfg.emit_timings {
        report.wall_seconds = None;
    }
}

/// Trains each configured model (frozen backbone unless the config says
/// otherwise) and writes checkpoints plus per-model reports. One model's
/// failure does not abort the others; the first error is returned at the end.
pub fn cmd_transfer(ctx: &Ctx) -> Result<Vec<TrainReport>> {
    let (train_m, val_m) = ensure_dataset(ctx)?;
    run_training(ctx, &train_m, &val_m, ctx.cfg.train.clone(), "reports")
}

/// Desk-scale pretraining: the same loop with the backbone unfrozen and the
/// pretraining epoch count.
pub fn cmd_pretrain(ctx: &Ctx) -> Result<Vec<TrainReport>> {
    let (train_m, val_m) = ensure_dataset(ctx)?;
    let cfg = train::TrainConfig {
        epochs: ctx.cfg.pretrain_epochs,
        freeze_backbone: false,
        ..ctx.cfg.train.clone()
    };
    run_training(ctx, &train_m, &val_m, cfg, "pretrain_reports")
}

fn run_training(
    ctx: &Ctx,
    train_m: &DatasetManifest,
    val_m: &DatasetManifest,
    base_cfg: train::TrainConfig,
    report_dir: &str,
) -> Result<Vec<TrainReport>> {
    let mut first_error: Option<Error> = None;
    let mut reports = Vec::new();
    for entry in &ctx.cfg.models {
        let result = (|| -> Result<TrainReport> {
            let spec = spec_for(ctx, entry)?;
            let seed = model_seed(ctx, entry);
            let mut model = match &entry.checkpoint {
                Some(dir) => zoo::build_model(&spec, zoo::Init::FromCheckpoint(dir))?,
                None => Model::new_random(spec.clone(), seed)?,
            };
            let cfg = train::TrainConfig { seed, ..base_cfg.clone() };
            let mut report = train::train_head(&mut model, train_m, val_m, &cfg)?;
            model.save_checkpoint(
                &checkpoint_dir(ctx, entry),
                entry.provenance,
                Some(report.best_val_accuracy),
                Some(seed),
            )?;
            strip_timings(ctx, &mut report);
            ctx.write_json(
                &format!("{report_dir}/train_{}.json", entry.id()),
                &ctx.stamp(report.clone()),
            )?;
            Ok(report)
        })();
        match result {
            Ok(report) => reports.push(report),
            Err(e) => {
                eprintln!("model {} failed: {e}", entry.id());
                first_error.get_or_insert(e);
            }
        }
    }
    match first_error {
        Some(e) => Err(e),
        None => Ok(reports),
    }
}

/// One model's response curve under one condition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurveRecord {
    pub model: String,
    pub provenance: zoo::Provenance,
    pub condition: Condition,
    pub points: Vec<(f64, f64)>,
    pub fit: PsychometricFit,
}

fn curve_rel_path(entry: &ModelEntry, condition: Condition) -> String {
    format!("curves/{}_{condition}.json", entry.id())
}

fn sweep_condition(
    ctx: &Ctx,
    continuum: &MorphContinuum,
    condition: Condition,
) -> Result<Vec<CurveRecord>> {
    let mut records = Vec::new();
    for entry in &ctx.cfg.models {
        let model = load_model(ctx, entry)?;
        let points = zoo::classify_continuum(&model, continuum)?;
        let fit = psychometrics::fit_psychometric(&points)?;
        let record = CurveRecord {
            model: entry.name.to_string(),
            provenance: entry.provenance,
            condition,
            points,
            fit,
        };
        ctx.write_json(&curve_rel_path(entry, condition), &ctx.stamp(record.clone()))?;
        records.push(record);
    }
    Ok(records)
}

fn human_series(ctx: &Ctx) -> Result<Option<plot_series::HumanSeries>> {
    let Some(path) = &ctx.cfg.human_trials else { return Ok(None) };
    let trials = psychometrics::read_trials_csv(path)?;
    Ok(Some(plot_series::human_series_from_trials(&trials)?))
}

mod plot_series {
    use super::*;
    use crate::plotting::{self, CurveSeries};

    pub struct HumanSeries {
        pub points: Vec<(f64, f64)>,
        pub fit: PsychometricFit,
    }

    /// Pools all participants into per-level proportions for display.
    pub fn human_series_from_trials(
        trials: &[psychometrics::TrialRecord],
    ) -> Result<HumanSeries> {
        let mut by_level: BTreeMap<u64, (f64, usize, usize)> = BTreeMap::new();
        for t in trials {
            let e = by_level.entry(t.level.to_bits()).or_insert((t.level, 0, 0));
            e.2 += 1;
            if t.response == psychometrics::Response::Happy {
                e.1 += 1;
            }
        }
        let points: Vec<(f64, f64)> =
            by_level.values().map(|&(l, h, n)| (l, h as f64 / n as f64)).collect();
        let fit = psychometrics::fit_psychometric(&points)?;
        Ok(HumanSeries { points, fit })
    }

    pub fn figure_for(
        records: &[CurveRecord],
        human: Option<&HumanSeries>,
    ) -> image::RgbImage {
        let mut series = Vec::new();
        if let Some(h) = human {
            series.push(CurveSeries {
                label: "HUMAN".to_string(),
                color: plotting::HUMAN_COLOR,
                dashed: false,
                points: h.points.clone(),
                fit: Some(h.fit.clone()),
            });
        }
        for r in records {
            series.push(CurveSeries {
                label: format!("{} ({})", r.model, r.provenance).to_uppercase(),
                color: plotting::color_for_model(&r.model),
                dashed: plotting::dashed_for_model(&r.model),
                points: r.points.clone(),
                fit: Some(r.fit.clone()),
            });
        }
        plotting::psychometric_figure(&series, 800, 600)
    }
}

fn save_png(ctx: &Ctx, rel: &str, img: &image::RgbImage) -> Result<PathBuf> {
    let path = ctx.out_dir.join(rel);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    img.save(&path)?;
    Ok(path)
}

/// Clean-continuum sweep: per-model curve records plus a combined figure.
pub fn cmd_curve(ctx: &Ctx) -> Result<Vec<CurveRecord>> {
    let continuum = ensure_continuum(ctx)?;
    let records = sweep_condition(ctx, &continuum, Condition::Unmasked)?;
    let human = human_series(ctx)?;
    let fig = plot_series::figure_for(&records, human.as_ref());
    save_png(ctx, "figures/curves_unmasked.png", &fig)?;
    Ok(records)
}

/// Attribution grid over evenly spaced morph levels (clean stimuli).
pub fn cmd_cam(ctx: &Ctx, layer: Option<&str>, list_layers: bool) -> Result<Option<PathBuf>> {
    if list_layers {
        for entry in &ctx.cfg.models {
            let spec = spec_for(ctx, entry)?;
            let model = Model::<f32>::new_random(spec, 0)?;
            println!("{}: {}", entry.id(), model.layer_names().join(" "));
        }
        return Ok(None);
    }
    let continuum = ensure_continuum(ctx)?;
    let mut models = Vec::new();
    for entry in &ctx.cfg.models {
        models.push((entry.id().to_uppercase(), load_model(ctx, entry)?));
    }
    let model_refs: Vec<(String, &Model<f32>)> =
        models.iter().map(|(l, m)| (l.clone(), m)).collect();
    let stimuli = attribution::evenly_spaced_stimuli(&continuum, 5);
    let layer = layer.or(ctx.cfg.cam.layer.as_deref());
    let grid = attribution::cam_grid(
        &model_refs,
        &stimuli,
        layer,
        ctx.cfg.cam.target_class,
        ctx.cfg.cam.alpha,
    )?;
    Ok(Some(save_png(ctx, "figures/cam_unmasked.png", &grid)?))
}

/// Masked sweeps: per-condition curve records, figures, and one
/// conditions-by-levels attribution grid per model.
pub fn cmd_mask_eval(ctx: &Ctx) -> Result<Vec<CurveRecord>> {
    let continuum = ensure_continuum(ctx)?;
    let boxes = ctx.mask_boxes()?;
    let human = human_series(ctx)?;
    let mut all = Vec::new();
    let mut masked_continua: Vec<(Region, MorphContinuum)> = Vec::new();
    for &region in &ctx.cfg.mask_conditions {
        let bounds = *boxes.get(&region).ok_or_else(|| {
            Error::Validation(format!("no mask box configured for region {region}"))
        })?;
        let spec = MaskSpec::new(region, bounds, Fill::MeanGray)?;
        let masked = continuum.masked(&spec)?;
        let records = sweep_condition(ctx, &masked, region.into())?;
        let fig = plot_series::figure_for(&records, human.as_ref());
        save_png(ctx, &format!("figures/curves_{region}.png"), &fig)?;
        all.extend(records);
        masked_continua.push((region, masked));
    }
    // Per-model grid: rows = mask conditions, cols = lowest/neutral/highest.
    for entry in &ctx.cfg.models {
        let model = load_model(ctx, entry)?;
        let mut rows = Vec::new();
        let mut col_labels = Vec::new();
        for (region, masked) in &masked_continua {
            let stimuli = attribution::evenly_spaced_stimuli(masked, 3);
            if col_labels.is_empty() {
                col_labels = stimuli
                    .iter()
                    .map(|(l, _)| format!("{}%", (l * 100.0).round() as i64))
                    .collect();
            }
            let mut cells = Vec::new();
            for (_, img) in stimuli {
                let map = attribution::layer_cam(
                    &model,
                    img,
                    ctx.cfg.cam.layer.as_deref(),
                    ctx.cfg.cam.target_class,
                )?;
                cells.push(attribution::render_overlay(&map, img, ctx.cfg.cam.alpha)?);
            }
            rows.push((region.to_string().to_uppercase(), cells));
        }
        let grid = crate::plotting::image_grid(&rows, &col_labels)?;
        save_png(ctx, &format!("figures/cam_masked_{}.png", entry.id()), &grid)?;
    }
    Ok(all)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HumanArtifacts {
    pub baseline: HumanBaseline,
    pub excluded: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParticipantsArtifact {
    pub fits: Vec<psychometrics::ParticipantFit>,
}

/// Fits every participant in the trials CSV and stores the baseline.
pub fn cmd_fit_human(ctx: &Ctx) -> Result<HumanBaseline> {
    let path = ctx.cfg.human_trials.as_ref().ok_or_else(|| {
        Error::Validation("config has no `human_trials` path".into())
    })?;
    let trials = psychometrics::read_trials_csv(path)?;
    let summary = psychometrics::fit_participants(&trials)?;
    ctx.write_json(
        "human/baseline.json",
        &ctx.stamp(HumanArtifacts {
            baseline: summary.baseline.clone(),
            excluded: summary.excluded.clone(),
        }),
    )?;
    ctx.write_json(
        "human/participants.json",
        &ctx.stamp(ParticipantsArtifact { fits: summary.fits.clone() }),
    )?;
    Ok(summary.baseline)
}

fn load_or_fit_baseline(ctx: &Ctx) -> Result<HumanBaseline> {
    let path = ctx.out_dir.join("human/baseline.json");
    if path.exists() {
        let stamped: config::Stamped<HumanArtifacts> =
            serde_json::from_str(&std::fs::read_to_string(path)?)?;
        return Ok(stamped.payload.baseline);
    }
    if ctx.cfg.human_trials.is_some() {
        return cmd_fit_human(ctx);
    }
    Err(Error::MissingArtifact(
        "human baseline (run `fit-human` or set `human_trials` in the config)".into(),
    ))
}

fn row_from_record(record: &CurveRecord, baseline: &HumanBaseline) -> Result<ComparisonRow> {
    ComparisonRow::new(
        Strategy::from(record.provenance),
        record.condition,
        record.model.clone(),
        record.fit.pse,
        baseline,
    )
}

fn stored_curves(ctx: &Ctx, conditions: &[Condition]) -> Result<Vec<CurveRecord>> {
    let mut records = Vec::new();
    for entry in &ctx.cfg.models {
        for &condition in conditions {
            let path = ctx.out_dir.join(curve_rel_path(entry, condition));
            if path.exists() {
                let stamped: config::Stamped<CurveRecord> =
                    serde_json::from_str(&std::fs::read_to_string(path)?)?;
                records.push(stamped.payload);
            }
        }
    }
    if records.is_empty() {
        return Err(Error::MissingArtifact(
            "no stored curves under the output directory (run `curve` or `mask-eval`)".into(),
        ));
    }
    Ok(records)
}

/// Builds the comparison table from stored curve records.
pub fn cmd_report(ctx: &Ctx, m: Option<usize>) -> Result<stats::Report> {
    let baseline = load_or_fit_baseline(ctx)?;
    let all_conditions =
        [Condition::Unmasked, Condition::Eyes, Condition::Nose, Condition::Mouth];
    let records = stored_curves(ctx, &all_conditions)?;
    let rows: Vec<ComparisonRow> = records
        .iter()
        .map(|r| row_from_record(r, &baseline))
        .collect::<Result<_>>()?;
    let report = stats::build_table(&rows, m.or(ctx.cfg.report_m))?;
    write_report_files(ctx, &report, "report")?;
    Ok(report)
}

fn write_report_files(ctx: &Ctx, report: &stats::Report, stem: &str) -> Result<()> {
    ctx.write_json(&format!("report/{stem}.json"), &ctx.stamp(report.clone()))?;
    let path = ctx.out_dir.join(format!("report/{stem}.txt"));
    std::fs::write(path, &report.text)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    Clean,
    Masked,
    Excitation,
}

impl Experiment {
    pub fn from_index(i: u8) -> Result<Self> {
        match i {
            1 => Ok(Experiment::Clean),
            2 => Ok(Experiment::Masked),
            3 => Ok(Experiment::Excitation),
            other => Err(Error::Validation(format!("experiment must be 1, 2 or 3, got {other}"))),
        }
    }
}

/// End-to-end experiment bundles.
///
/// 1: clean sweep + curves figure + attribution grid + comparison table.
/// 2: the same under eyes/nose/mouth masking.
/// 3: the excitation model's clean+masked curves overlaid on the stored
///    baselines from earlier runs, plus its own table rows.
pub fn cmd_experiment(ctx: &Ctx, which: Experiment) -> Result<stats::Report> {
    let baseline = load_or_fit_baseline(ctx)?;
    match which {
        Experiment::Clean => {
            let records = cmd_curve(ctx)?;
            cmd_cam(ctx, None, false)?;
            let rows: Vec<ComparisonRow> = records
                .iter()
                .map(|r| row_from_record(r, &baseline))
                .collect::<Result<_>>()?;
            let report = stats::build_table(&rows, ctx.cfg.report_m)?;
            write_report_files(ctx, &report, "exp1")?;
            Ok(report)
        }
        Experiment::Masked => {
            let records = cmd_mask_eval(ctx)?;
            let rows: Vec<ComparisonRow> = records
                .iter()
                .map(|r| row_from_record(r, &baseline))
                .collect::<Result<_>>()?;
            let report = stats::build_table(&rows, ctx.cfg.report_m)?;
            write_report_files(ctx, &report, "exp2")?;
            Ok(report)
        }
        Experiment::Excitation => {
            let fe_entry = ctx
                .cfg
                .models
                .iter()
                .find(|m| m.name == zoo::ArchName::FeAlexnet)
                .ok_or_else(|| {
                    Error::Validation("experiment 3 needs an fe_alexnet entry in `models`".into())
                })?;
            // The sweep below needs the excitation checkpoint; stored curves
            // from experiments 1 and 2 act as the comparison baselines.
            let fe_model = load_model(ctx, fe_entry)?;
            let continuum = ensure_continuum(ctx)?;
            let boxes = ctx.mask_boxes()?;
            let human = human_series(ctx)?;
            let mut fe_records = Vec::new();
            let mut conditions: Vec<(Condition, MorphContinuum)> =
                vec![(Condition::Unmasked, continuum)];
            for &region in &ctx.cfg.mask_conditions {
                let bounds = *boxes.get(&region).ok_or_else(|| {
                    Error::Validation(format!("no mask box configured for region {region}"))
                })?;
                let spec = MaskSpec::new(region, bounds, Fill::MeanGray)?;
                let masked = conditions[0].1.masked(&spec)?;
                conditions.push((region.into(), masked));
            }
            for (condition, stimuli_set) in &conditions {
                let points = zoo::classify_continuum(&fe_model, stimuli_set)?;
                let fit = psychometrics::fit_psychometric(&points)?;
                let record = CurveRecord {
                    model: fe_entry.name.to_string(),
                    provenance: fe_entry.provenance,
                    condition: *condition,
                    points,
                    fit,
                };
                ctx.write_json(&curve_rel_path(fe_entry, *condition), &ctx.stamp(record.clone()))?;
                // Overlay against whatever stored baselines exist for the
                // other models under this condition.
                let mut overlay = vec![record.clone()];
                for entry in ctx.cfg.models.iter().filter(|m| m.name != zoo::ArchName::FeAlexnet) {
                    let path = ctx.out_dir.join(curve_rel_path(entry, *condition));
                    if path.exists() {
                        let stamped: config::Stamped<CurveRecord> =
                            serde_json::from_str(&std::fs::read_to_string(path)?)?;
                        overlay.push(stamped.payload);
                    }
                }
                let fig = plot_series::figure_for(&overlay, human.as_ref());
                save_png(ctx, &format!("figures/exp3_{condition}.png"), &fig)?;
                fe_records.push(record);
            }
            let rows: Vec<ComparisonRow> = fe_records
                .iter()
                .map(|r| row_from_record(r, &baseline))
                .collect::<Result<_>>()?;
            let report = stats::build_table(&rows, ctx.cfg.report_m)?;
            write_report_files(ctx, &report, "exp3")?;
            Ok(report)
        }
    }
}
