use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{prepare_pair, prepare_records, to_isotropic, PreparedSet, RegistrationCache};
use super::model::{Ablation, TrackerModel};
use crate::error::{Error, Result};
use crate::metrics::{EvalRecord, MetricsReport};
use crate::registration::register_affine;
use crate::volume::{read_manifest, Direction, Lesion, ManifestRecord, Vec3, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackResult {
    /// Predicted lesion center `[x, y, z]` mm.
    pub center: Vec3,
    /// Softmax of the classification logits over the search feature cells.
    pub heatmap: Vec<f64>,
    /// `[D, H, W]` of the heatmap.
    pub heatmap_dims: [usize; 3],
    /// World position of heatmap cell `(0, 0, 0)` and the cell size, mm.
    pub heatmap_origin: Vec3,
    pub heatmap_spacing: Vec3,
    pub registration_cost: f64,
    /// Number of template tokens.
    pub tokens: usize,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    /// Selection threshold override; the model's own when absent.
    pub threshold: Option<f64>,
    pub ablation: Ablation,
    pub deterministic: bool,
}

/// Tracks one lesion from `template` into `search`.
pub fn track(
    model: &TrackerModel,
    template: &Volume,
    lesion: &Lesion,
    search: &Volume,
    opts: &EvalOptions,
) -> Result<TrackResult> {
    let started = Instant::now();
    let spacing = model.config.spacing_mm;
    let template = to_isotropic(template.clone(), spacing)?;
    let search = to_isotropic(search.clone(), spacing)?;
    let reg = register_affine(&template, &search, &model.config.registration)?;
    let pair = prepare_pair(&model.config, "track", &template, lesion, &search, &reg, None)?;
    let threshold = opts.threshold.unwrap_or(model.config.threshold);
    crate::attention::check_threshold(threshold)?;
    let (center, out, tokens) = model.predict_center(&pair, threshold, &opts.ablation);
    if !center.iter().all(|v| v.is_finite()) {
        return Err(Error::NumericalFailure("non-finite center prediction".into()));
    }
    let grid = pair.search_features;
    Ok(TrackResult {
        center,
        heatmap: out.heatmap(),
        heatmap_dims: grid.dims,
        heatmap_origin: grid.origin,
        heatmap_spacing: grid.spacing,
        registration_cost: reg.final_cost,
        tokens,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub pair_id: String,
    pub direction: Direction,
    pub predicted: Option<Vec3>,
    pub truth: Vec3,
    pub radius: f64,
    pub distance: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: MetricsReport,
    pub pairs: Vec<PairResult>,
}

fn truth_of(r: &ManifestRecord) -> Result<(Vec3, f64)> {
    let pair = r.to_pair()?;
    let s = pair
        .search_lesion
        .ok_or_else(|| Error::InvalidArgument(format!("record {} has no ground truth", r.pair_id)))?;
    Ok((s.center, s.mean_radius()))
}

/// Scores prepared pairs. Records that failed to prepare count as misses.
pub fn evaluate_prepared(
    model: &TrackerModel,
    records: &[ManifestRecord],
    prepared: &PreparedSet,
    opts: &EvalOptions,
) -> Result<EvalOutcome> {
    let threshold = opts.threshold.unwrap_or(model.config.threshold);
    crate::attention::check_threshold(threshold)?;
    let job = |(pair, &ri): (&super::model::PairData, &usize)| {
        let (center, _, _) = model.predict_center(pair, threshold, &opts.ablation);
        (ri, center)
    };
    let centers: Vec<(usize, Vec3)> = if opts.deterministic {
        prepared.pairs.iter().zip(&prepared.record_index).map(job).collect()
    } else {
        prepared.pairs.par_iter().zip(&prepared.record_index).map(job).collect()
    };
    let mut slots: Vec<Option<Result<Vec3, String>>> = vec![None; records.len()];
    for (ri, c) in centers {
        slots[ri] = Some(if c.iter().all(|v| v.is_finite()) {
            Ok(c)
        } else {
            Err("non-finite prediction".into())
        });
    }
    for (ri, _, e) in &prepared.skipped {
        slots[*ri] = Some(Err(e.to_string()));
    }
    let slots = slots
        .into_iter()
        .map(|s| s.expect("every record is either prepared or skipped"))
        .collect();
    score(records, slots)
}

fn display_id(r: &ManifestRecord, i: usize) -> String {
    if r.pair_id.is_empty() {
        format!("record{i:05}")
    } else {
        r.pair_id.clone()
    }
}

fn score(records: &[ManifestRecord], slots: Vec<Result<Vec3, String>>) -> Result<EvalOutcome> {
    let mut pairs = Vec::with_capacity(records.len());
    let mut scored = Vec::new();
    let mut failed = 0;
    for (i, (r, slot)) in records.iter().zip(slots).enumerate() {
        let (truth, radius) = truth_of(r)?;
        let id = display_id(r, i);
        match slot {
            Ok(c) => {
                let rec = EvalRecord {
                    pair_id: id.clone(),
                    direction: r.direction,
                    predicted: c,
                    truth,
                    radius,
                };
                pairs.push(PairResult {
                    pair_id: id,
                    direction: r.direction,
                    predicted: Some(c),
                    truth,
                    radius,
                    distance: Some(rec.distance()),
                    error: None,
                });
                scored.push(rec);
            }
            Err(e) => {
                log::warn!("pair {id} ({}) failed: {e}", r.direction);
                failed += 1;
                pairs.push(PairResult {
                    pair_id: id,
                    direction: r.direction,
                    predicted: None,
                    truth,
                    radius,
                    distance: None,
                    error: Some(e),
                });
            }
        }
    }
    let report = MetricsReport::with_failures(&scored, failed)?;
    Ok(EvalOutcome { report, pairs })
}

/// Center produced outside the tracker for one directed pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub pair_id: String,
    pub direction: Direction,
    pub predicted: Vec3,
}

/// Reads one JSON [`Prediction`] per line; blank lines are skipped.
pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| {
                Error::InvalidArgument(format!("{} line {}: {e}", path.display(), n + 1))
            })
        })
        .collect()
}

/// Scores ready-made predictions against the ground truth of `records`.
/// Predictions are matched by pair id and direction; records without one
/// count as failures.
pub fn evaluate_predictions(records: &[ManifestRecord], predictions: &[Prediction]) -> Result<EvalOutcome> {
    let mut by_key = HashMap::with_capacity(predictions.len());
    for p in predictions {
        if by_key.insert((p.pair_id.as_str(), p.direction), p.predicted).is_some() {
            return Err(Error::InvalidArgument(format!(
                "duplicate prediction for {} ({})",
                p.pair_id, p.direction
            )));
        }
    }
    let ids: Vec<String> = records.iter().enumerate().map(|(i, r)| display_id(r, i)).collect();
    let slots = records
        .iter()
        .zip(&ids)
        .map(|(r, id)| match by_key.get(&(id.as_str(), r.direction)) {
            Some(c) if c.iter().all(|v| v.is_finite()) => Ok(*c),
            Some(_) => Err("non-finite prediction".to_string()),
            None => Err("no prediction".to_string()),
        })
        .collect();
    score(records, slots)
}

/// Tracks every directed pair of a manifest and scores the predictions.
pub fn evaluate(
    model: &TrackerModel,
    manifest: &Path,
    cache: &RegistrationCache,
    opts: &EvalOptions,
) -> Result<EvalOutcome> {
    let records = read_manifest(manifest)?;
    if records.is_empty() {
        return Err(Error::InvalidArgument(format!("manifest {} is empty", manifest.display())));
    }
    for r in &records {
        truth_of(r)?;
    }
    let root = manifest.parent().unwrap_or(Path::new("."));
    let prepared = prepare_records(&model.config, &records, root, cache, true)?;
    evaluate_prepared(model, &records, &prepared, opts)
}

/// Writes the report JSON at `report`, plus `<stem>.txt` (table) and
/// `<stem>_pairs.csv` (per-pair results) beside it.
pub fn write_eval_outputs(report: &Path, outcome: &EvalOutcome) -> Result<()> {
    if let Some(parent) = report.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(report, serde_json::to_vec_pretty(&outcome.report)?).map_err(|e| Error::io(report, e))?;
    let table = report.with_extension("txt");
    fs::write(&table, outcome.report.table()).map_err(|e| Error::io(&table, e))?;
    let stem = report.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    let csv_path = report.with_file_name(format!("{stem}_pairs.csv"));
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record([
        "pair_id", "direction", "pred_x", "pred_y", "pred_z", "gt_x", "gt_y", "gt_z", "distance", "error",
    ])?;
    let num = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for p in &outcome.pairs {
        let pred = p.predicted.map(|c| c.map(Some)).unwrap_or([None; 3]);
        w.write_record([
            p.pair_id.clone(),
            p.direction.to_string(),
            num(pred[0]),
            num(pred[1]),
            num(pred[2]),
            p.truth[0].to_string(),
            p.truth[1].to_string(),
            p.truth[2].to_string(),
            num(p.distance),
            p.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    Ok(())
}
