use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{ModelConfig, PairData, Target};
use crate::attention::{coarse_prior, registered_prior};
use crate::backbone::{self, feature_dims};
use crate::error::{Error, Result};
use crate::predictor::make_label;
use crate::registration::{register_affine, Registration, RegistrationOptions};
use crate::volume::{
    gaussian_map, read_volume, resample_isotropic, Grid, Lesion, ManifestRecord, Vec3, Volume,
};

/// Brings a volume to the pipeline's isotropic spacing when it is not already.
pub fn to_isotropic(v: Volume, spacing: f64) -> Result<Volume> {
    if v.grid.spacing.iter().all(|s| (s - spacing).abs() < 1e-9) {
        Ok(v)
    } else {
        resample_isotropic(&v, spacing)
    }
}

/// Window of `dims` voxels centered as closely as possible on `center_mm`
/// while staying inside the volume; the whole volume if it is smaller.
pub fn crop_around(v: &Volume, center_mm: Vec3, dims: [usize; 3]) -> Volume {
    let c = v.mm_to_voxel(center_mm);
    let vd = v.dims();
    // voxel coordinates are [x, y, z]; dims are [D, H, W]
    let start: [usize; 3] = std::array::from_fn(|a| {
        let n = dims[a].min(vd[a]);
        let want = c[2 - a].round() as isize - (n as isize) / 2;
        want.clamp(0, (vd[a] - n) as isize) as usize
    });
    let size: [usize; 3] = std::array::from_fn(|a| dims[a].min(vd[a]));
    let origin = v.voxel_to_mm([start[2] as f64, start[1] as f64, start[0] as f64]);
    let grid = Grid {
        dims: size,
        spacing: v.grid.spacing,
        origin,
    };
    let mut data = Vec::with_capacity(grid.len());
    for z in 0..size[0] {
        for y in 0..size[1] {
            for x in 0..size[2] {
                data.push(v.at(start[0] + z, start[1] + y, start[2] + x));
            }
        }
    }
    Volume { grid, data }
}

/// Network inputs for one directed pair. `truth` adds the training target.
pub fn prepare_pair(
    config: &ModelConfig,
    id: &str,
    template: &Volume,
    lesion: &Lesion,
    search: &Volume,
    registration: &Registration,
    truth: Option<&Lesion>,
) -> Result<PairData> {
    let (template, search) = match config.crop {
        Some(dims) => {
            let moved = registration.transform.apply(lesion.center);
            (crop_around(template, lesion.center, dims), crop_around(search, moved, dims))
        }
        None => (template.clone(), search.clone()),
    };
    backbone::check_input(&template)?;
    backbone::check_input(&search)?;
    let tdims = feature_dims(template.dims());
    let sdims = feature_dims(search.dims());
    let prior = gaussian_map(lesion.center, lesion.radius, &template.grid)?;
    let template_prior = coarse_prior(&prior, tdims)?.data;
    let mask_row = registered_prior(&prior, &registration.transform, &search.grid, sdims)?;
    let target = match truth {
        Some(t) => Some(Target {
            center: t.center,
            radius: t.radius,
            label: make_label(t.center, t.radius, &search.grid, sdims)?,
        }),
        None => None,
    };
    Ok(PairData {
        id: id.to_string(),
        template_features: template.grid.resized(tdims),
        search_features: search.grid.resized(sdims),
        template,
        search,
        template_prior,
        mask_row,
        registration_cost: registration.final_cost,
        target,
    })
}

/// On-disk cache of registrations keyed by (template id, search id).
/// Entries remember the options they were computed with and are ignored
/// when those differ.
#[derive(Debug, Clone)]
pub struct RegistrationCache {
    dir: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    options: RegistrationOptions,
    registration: Registration,
}

impl RegistrationCache {
    pub fn new(dir: Option<PathBuf>) -> Self {
        RegistrationCache { dir }
    }

    pub fn disabled() -> Self {
        RegistrationCache { dir: None }
    }

    fn key(template_id: &str, search_id: &str) -> String {
        let clean = |s: &str| s.replace(['/', '\\', ':'], "_");
        format!("{}__{}.json", clean(template_id), clean(search_id))
    }

    fn path(&self, template_id: &str, search_id: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(Self::key(template_id, search_id)))
    }

    pub fn get_or_compute(
        &self,
        template_id: &str,
        search_id: &str,
        template: &Volume,
        search: &Volume,
        opts: &RegistrationOptions,
    ) -> Result<Registration> {
        let path = self.path(template_id, search_id);
        if let Some(p) = &path {
            if let Ok(text) = fs::read_to_string(p) {
                match serde_json::from_str::<CacheEntry>(&text) {
                    Ok(e) if e.options == *opts && e.registration.transform.is_finite() => {
                        return Ok(e.registration)
                    }
                    Ok(_) => log::info!("recomputing stale registration cache entry {}", p.display()),
                    Err(_) => log::warn!("ignoring unreadable registration cache entry {}", p.display()),
                }
            }
        }
        let reg = register_affine(template, search, opts)?;
        if let Some(p) = &path {
            let write = || -> std::io::Result<()> {
                if let Some(parent) = p.parent() {
                    fs::create_dir_all(parent)?;
                }
                let tmp = p.with_extension("json.tmp");
                let entry = CacheEntry {
                    options: opts.clone(),
                    registration: reg.clone(),
                };
                fs::write(&tmp, serde_json::to_vec(&entry).map_err(std::io::Error::other)?)?;
                fs::rename(&tmp, p)
            };
            if let Err(e) = write() {
                log::warn!("could not write registration cache {}: {e}", p.display());
            }
        }
        Ok(reg)
    }
}

/// Outcome of preparing every record of a manifest.
pub struct PreparedSet {
    pub pairs: Vec<PairData>,
    /// `(record index, pair id, error)` of records that could not be prepared.
    pub skipped: Vec<(usize, String, Error)>,
    /// Record index of each prepared pair.
    pub record_index: Vec<usize>,
}

pub fn record_id(r: &ManifestRecord, index: usize) -> String {
    let base = if r.pair_id.is_empty() {
        format!("record{index:05}")
    } else {
        r.pair_id.clone()
    };
    format!("{base}:{}", r.direction)
}

/// Loads, registers and prepares every record. Volumes are read once even
/// when several records share them. Records are processed in parallel on
/// the current rayon pool; the result order follows the manifest.
pub fn prepare_records(
    config: &ModelConfig,
    records: &[ManifestRecord],
    root: &Path,
    cache: &RegistrationCache,
    with_truth: bool,
) -> Result<PreparedSet> {
    let mut paths: Vec<String> = Vec::new();
    for r in records {
        for p in [&r.template_volume, &r.search_volume] {
            if !paths.contains(p) {
                paths.push(p.clone());
            }
        }
    }
    let loaded: Vec<(String, Result<Volume>)> = paths
        .par_iter()
        .map(|p| {
            let v = read_volume(root.join(p)).and_then(|v| to_isotropic(v, config.spacing_mm));
            (p.clone(), v)
        })
        .collect();
    let volumes: HashMap<String, Result<Volume>> = loaded.into_iter().collect();

    let results: Vec<Result<PairData>> = records
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let id = record_id(r, i);
            let get = |p: &String| -> Result<&Volume> {
                volumes[p].as_ref().map_err(|e| match e {
                    Error::MissingFile(p) => Error::MissingFile(p.clone()),
                    other => Error::InvalidArgument(format!("volume {p}: {other}")),
                })
            };
            let template = get(&r.template_volume)?;
            let search = get(&r.search_volume)?;
            let pair = r.to_pair()?;
            let truth = if with_truth {
                Some(pair.search_lesion.ok_or_else(|| {
                    Error::InvalidArgument(format!("record {id} has no search ground truth"))
                })?)
            } else {
                None
            };
            // keyed by full path so datasets sharing volume names do not collide
            let reg = cache.get_or_compute(
                &root.join(&r.template_volume).to_string_lossy(),
                &root.join(&r.search_volume).to_string_lossy(),
                template,
                search,
                &config.registration,
            )?;
            prepare_pair(config, &id, template, &pair.template_lesion, search, &reg, truth.as_ref())
        })
        .collect();

    let mut out = PreparedSet {
        pairs: Vec::new(),
        skipped: Vec::new(),
        record_index: Vec::new(),
    };
    for (i, res) in results.into_iter().enumerate() {
        match res {
            Ok(p) => {
                out.pairs.push(p);
                out.record_index.push(i);
            }
            Err(e) => out.skipped.push((i, record_id(&records[i], i), e)),
        }
    }
    Ok(out)
}
