use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::save_checkpoint;
use super::augment::Symmetry;
use super::data::{prepare_records, RegistrationCache};
use super::model::{Ablation, PairData, TrackerModel};
use super::{TrainConfig, CONFIG_ECHO};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Graph, ParamSet};
use crate::volume::read_manifest;

pub const CHECKPOINT_NAME: &str = "checkpoint.safetensors";
pub const LOSS_LOG_NAME: &str = "loss.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub loss_regression: f64,
    pub loss_focal: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss_regression: f64,
    pub mean_loss_focal: f64,
    pub mean_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TrackerModel,
    pub checkpoint: Option<PathBuf>,
    pub epochs: Vec<EpochSummary>,
    pub steps: Vec<StepLog>,
    pub skipped: Vec<String>,
}

/// Loss and parameter gradients of one pair in single precision.
/// `dropout_seed` seeds the dropout masks; `None` disables dropout.
pub fn pair_gradients(
    model: &TrackerModel,
    params: &ParamSet<f32>,
    pair: &PairData,
    dropout_seed: Option<u64>,
) -> Result<(ParamSet<f32>, [f64; 3])> {
    let target = pair
        .target
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument(format!("pair {} has no ground truth", pair.id)))?;
    let mut g = match dropout_seed {
        Some(s) => Graph::with_dropout(ChaCha8Rng::seed_from_u64(s)),
        None => Graph::new(),
    };
    let cfg = &model.config;
    let f = TrackerModel::forward(cfg, &mut g, params, pair, cfg.threshold, &Ablation::default());
    let (total, lr, lc) = TrackerModel::loss(cfg, &mut g, &f, target);
    let losses = [
        g.value(total).item() as f64,
        g.value(lr).item() as f64,
        g.value(lc).item() as f64,
    ];
    let mut grads = params.zeros_like();
    if losses.iter().all(|v| v.is_finite()) {
        g.backward(total).accumulate_into(&mut grads, 1.0);
    }
    Ok((grads, losses))
}

const AUGMENT_SALT: u64 = 0x5851_F42D_4C95_7F2D;

fn step_seed(seed: u64, epoch: usize, step: usize, slot: usize) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in [epoch as u64, step as u64, slot as u64] {
        h = (h ^ v).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 31;
    }
    h
}

/// Trains on already prepared pairs. Writes checkpoint, loss log and
/// effective config into `out_dir` when given.
pub fn train_prepared(
    cfg: &TrainConfig,
    pairs: &[PairData],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::TrainingAborted("no trainable pairs".into()));
    }
    let mut model = TrackerModel::init(cfg.model.clone(), cfg.seed)?;
    let mut params: ParamSet<f32> = model.params.cast();
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        ..AdamConfig::default()
    });
    let mut log_writer = match out_dir {
        Some(d) => {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            let cfg_path = d.join(CONFIG_ECHO);
            fs::write(&cfg_path, serde_json::to_vec_pretty(cfg)?).map_err(|e| Error::io(&cfg_path, e))?;
            Some(csv::Writer::from_path(d.join(LOSS_LOG_NAME))?)
        }
        None => None,
    };
    let checkpoint = out_dir.map(|d| d.join(CHECKPOINT_NAME));
    let use_dropout = cfg.model.cat.dropout > 0.0;

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::new();
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 3];
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let job = |(slot, &i): (usize, &usize)| {
                let seed = use_dropout.then(|| step_seed(cfg.seed, epoch, step, slot));
                if cfg.augment {
                    let sym = Symmetry::random(step_seed(cfg.seed ^ AUGMENT_SALT, epoch, step, slot));
                    pair_gradients(&model, &params, &sym.pair(&pairs[i]), seed)
                } else {
                    pair_gradients(&model, &params, &pairs[i], seed)
                }
            };
            let results: Vec<Result<(ParamSet<f32>, [f64; 3])>> = if cfg.deterministic {
                batch.iter().enumerate().map(job).collect()
            } else {
                batch.par_iter().enumerate().map(job).collect()
            };
            let mut grads = params.zeros_like();
            let mut batch_loss = [0.0f64; 3];
            let weight = 1.0 / batch.len() as f32;
            for (res, &i) in results.into_iter().zip(batch) {
                let (g, l) = res?;
                if !l.iter().all(|v| v.is_finite()) {
                    let msg = format!(
                        "non-finite loss on pair {} (epoch {epoch}, step {step}): L={} L_r={} L_c={}",
                        pairs[i].id, l[0], l[1], l[2]
                    );
                    if let Some(d) = out_dir {
                        let dump = serde_json::json!({
                            "pair_id": pairs[i].id, "epoch": epoch, "step": step,
                            "loss": l[0], "loss_regression": l[1], "loss_focal": l[2],
                        });
                        let _ = fs::write(d.join("abort.json"), dump.to_string());
                    }
                    return Err(Error::TrainingAborted(msg));
                }
                for (name, acc) in grads.iter_mut() {
                    let src = g.get(name).expect("gradient set matches parameters");
                    for (a, &b) in acc.data.iter_mut().zip(&src.data) {
                        *a += weight * b;
                    }
                }
                for k in 0..3 {
                    batch_loss[k] += l[k] / batch.len() as f64;
                }
            }
            adam.update(&mut params, &grads);
            let row = StepLog {
                epoch,
                step,
                loss_regression: batch_loss[1],
                loss_focal: batch_loss[2],
                loss: batch_loss[0],
            };
            if let Some(w) = log_writer.as_mut() {
                w.serialize(&row)?;
            }
            for k in 0..3 {
                sums[k] += batch_loss[k] * batch.len() as f64;
            }
            steps.push(row);
        }
        let n = pairs.len() as f64;
        let summary = EpochSummary {
            epoch,
            mean_loss: sums[0] / n,
            mean_loss_regression: sums[1] / n,
            mean_loss_focal: sums[2] / n,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}/{}: L={:.4} L_r={:.4} L_c={:.4} ({:.1}s)",
            cfg.epochs,
            summary.mean_loss,
            summary.mean_loss_regression,
            summary.mean_loss_focal,
            summary.seconds
        );
        epochs.push(summary);
        if let Some(w) = log_writer.as_mut() {
            w.flush().map_err(|e| Error::io(out_dir.unwrap().join(LOSS_LOG_NAME), e))?;
        }
        if let Some(path) = &checkpoint {
            model.params = params.cast();
            save_checkpoint(path, &model, cfg.seed, Some(epoch))?;
        }
    }
    model.params = params.cast();
    Ok(TrainOutcome {
        model,
        checkpoint,
        epochs,
        steps,
        skipped: Vec::new(),
    })
}

/// Full training run from a manifest. Pairs that fail to prepare are skipped
/// with a warning; the run aborts when too many are.
pub fn train(cfg: &TrainConfig, manifest: &Path, out_dir: &Path, cache: &RegistrationCache) -> Result<TrainOutcome> {
    cfg.validate()?;
    let records = read_manifest(manifest)?;
    if records.is_empty() {
        return Err(Error::InvalidArgument(format!("manifest {} is empty", manifest.display())));
    }
    let root = manifest.parent().unwrap_or(Path::new("."));
    let prepared = prepare_records(&cfg.model, &records, root, cache, true)?;
    for (_, id, e) in &prepared.skipped {
        if matches!(e, Error::MissingFile(_)) {
            return Err(Error::InvalidArgument(format!("pair {id}: {e}")));
        }
        log::warn!("skipping pair {id}: {e}");
    }
    let frac = prepared.skipped.len() as f64 / records.len() as f64;
    if frac > cfg.max_skip_fraction {
        return Err(Error::TrainingAborted(format!(
            "{} of {} pairs skipped ({:.0}% > {:.0}%)",
            prepared.skipped.len(),
            records.len(),
            100.0 * frac,
            100.0 * cfg.max_skip_fraction
        )));
    }
    let mut out = train_prepared(cfg, &prepared.pairs, Some(out_dir))?;
    out.skipped = prepared.skipped.iter().map(|(_, id, _)| id.clone()).collect();
    Ok(out)
}
