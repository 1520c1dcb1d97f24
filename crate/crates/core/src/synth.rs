//! Deterministic synthetic phantoms: template/search volume pairs with a
//! known lesion and a known inter-visit affine.
//!
//! Randomness comes from ChaCha8 (`rand_chacha::ChaCha8Rng`), keyed with
//! `seed_from_u64(seed)` and using the pair index as the stream id. Uniform
//! variates are `(next_u64 >> 11) · 2⁻⁵³`; normal variates use Box–Muller
//! on two uniforms. The draw order is fixed by [`gen_pair`].

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Unit, Vector3};
use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Error, Result};
use crate::registration::AffineTransform;
use crate::volume::{
    write_manifest, write_volume, Direction, Grid, Lesion, LesionPair, ManifestRecord, Vec3,
    Volume,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// `[D, H, W]`.
    pub dims: [usize; 3],
    pub spacing_mm: f64,
    pub blob_count: usize,
    /// Per-axis standard deviation range of the anatomy blobs (mm).
    pub blob_sigma_mm: [f64; 2],
    pub blob_amplitude: [f64; 2],
    pub lesion_radius_mm: [f64; 2],
    pub lesion_contrast: f64,
    pub max_rotation_deg: f64,
    pub max_translation_mm: f64,
    pub max_scale_delta: f64,
    /// Search radius = template radius × factor drawn from this range.
    pub radius_change: [f64; 2],
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            dims: [48, 48, 48],
            spacing_mm: 1.0,
            blob_count: 12,
            blob_sigma_mm: [3.0, 9.0],
            blob_amplitude: [0.2, 1.0],
            lesion_radius_mm: [4.0, 7.0],
            lesion_contrast: 0.3,
            max_rotation_deg: 10.0,
            max_translation_mm: 6.0,
            max_scale_delta: 0.03,
            radius_change: [0.8, 1.25],
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let range = |name: &str, r: [f64; 2], min: f64| -> Result<()> {
            ensure_arg!(
                r[0].is_finite() && r[1].is_finite() && r[0] >= min && r[0] <= r[1],
                "{name} range {r:?} is invalid"
            );
            Ok(())
        };
        ensure_arg!(
            self.dims.iter().all(|&d| d >= 8),
            "synthetic dims must be >= 8, got {:?}",
            self.dims
        );
        ensure_arg!(self.spacing_mm > 0.0, "spacing must be positive");
        range("blob sigma", self.blob_sigma_mm, 1e-3)?;
        range("blob amplitude", self.blob_amplitude, 0.0)?;
        range("lesion radius", self.lesion_radius_mm, 1e-3)?;
        range("radius change", self.radius_change, 1e-3)?;
        ensure_arg!(
            (0.0..=1.0).contains(&self.lesion_contrast),
            "lesion contrast must be in [0, 1]"
        );
        ensure_arg!(
            self.max_rotation_deg >= 0.0
                && self.max_translation_mm >= 0.0
                && (0.0..0.5).contains(&self.max_scale_delta),
            "affine magnitudes must be non-negative (scale delta < 0.5)"
        );
        ensure_arg!(self.noise_sigma >= 0.0, "noise sigma must be >= 0");
        let grid = self.grid();
        let (lo, hi) = grid.world_bounds();
        let r_max = self.lesion_radius_mm[1] * self.radius_change[1].max(1.0);
        ensure_arg!(
            (0..3).all(|i| hi[i] - lo[i] > 4.0 * r_max),
            "volume extent too small for lesion radius {r_max}mm"
        );
        Ok(())
    }

    pub fn grid(&self) -> Grid {
        Grid {
            dims: self.dims,
            spacing: [self.spacing_mm; 3],
            origin: [0.0; 3],
        }
    }
}

/// One generated pair with its ground truth.
#[derive(Debug, Clone)]
pub struct SynthPair {
    pub template: Volume,
    pub search: Volume,
    pub pair: LesionPair,
    /// Generating transform, template world → search world.
    pub affine: AffineTransform,
}

struct Stream(ChaCha8Rng);

impl Stream {
    fn new(seed: u64, index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        Stream(rng)
    }

    fn uniform(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    fn range(&mut self, r: [f64; 2]) -> f64 {
        r[0] + (r[1] - r[0]) * self.uniform()
    }

    fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    fn unit_vector(&mut self) -> Vector3<f64> {
        let z = 2.0 * self.uniform() - 1.0;
        let phi = std::f64::consts::TAU * self.uniform();
        let s = (1.0 - z * z).max(0.0).sqrt();
        Vector3::new(s * phi.cos(), s * phi.sin(), z)
    }
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    center: Vec3,
    sigma: Vec3,
    amplitude: f64,
}

impl Blob {
    fn eval(&self, p: Vec3) -> f64 {
        let e: f64 = (0..3)
            .map(|i| {
                let d = (p[i] - self.center[i]) / self.sigma[i];
                d * d
            })
            .sum();
        self.amplitude * (-0.5 * e).exp()
    }
}

/// Soft-edged ball profile: ~1 inside radius `r`, ~0 outside, 0.5 at the edge.
fn ball(p: Vec3, center: Vec3, r: f64) -> f64 {
    const EDGE_MM: f64 = 0.5;
    let d = (0..3)
        .map(|i| (p[i] - center[i]).powi(2))
        .sum::<f64>()
        .sqrt();
    1.0 / (1.0 + ((d - r) / EDGE_MM).exp())
}

fn quantize(x: f64) -> f64 {
    x.clamp(0.0, 1.0) as f32 as f64
}

fn random_affine(cfg: &SynthConfig, rng: &mut Stream, center: Vec3) -> AffineTransform {
    let axis = Unit::new_normalize(rng.unit_vector());
    let angle = cfg.max_rotation_deg.to_radians() * rng.uniform();
    let rotation = *nalgebra::Rotation3::from_axis_angle(&axis, angle).matrix();
    let scale = Matrix3::from_diagonal(&Vector3::new(
        1.0 + cfg.max_scale_delta * (2.0 * rng.uniform() - 1.0),
        1.0 + cfg.max_scale_delta * (2.0 * rng.uniform() - 1.0),
        1.0 + cfg.max_scale_delta * (2.0 * rng.uniform() - 1.0),
    ));
    let dir = rng.unit_vector();
    let shift = dir * (cfg.max_translation_mm * rng.uniform());
    AffineTransform::about(center, rotation * scale, [shift.x, shift.y, shift.z])
}

fn inside_margin(grid: &Grid, p: Vec3, margin: f64) -> bool {
    let (lo, hi) = grid.world_bounds();
    (0..3).all(|i| p[i] >= lo[i] + margin && p[i] <= hi[i] - margin)
}

/// Generates pair `index` with a randomly drawn inter-visit affine.
pub fn gen_pair(cfg: &SynthConfig, index: u64) -> Result<SynthPair> {
    generate(cfg, index, None)
}

/// Generates pair `index` with the given inter-visit affine instead of a random one.
pub fn gen_pair_with_affine(
    cfg: &SynthConfig,
    index: u64,
    affine: &AffineTransform,
) -> Result<SynthPair> {
    generate(cfg, index, Some(affine))
}

fn generate(cfg: &SynthConfig, index: u64, fixed: Option<&AffineTransform>) -> Result<SynthPair> {
    cfg.validate()?;
    let grid = cfg.grid();
    let (lo, hi) = grid.world_bounds();
    let center: Vec3 = std::array::from_fn(|i| 0.5 * (lo[i] + hi[i]));
    let mut rng = Stream::new(cfg.seed, index);

    let blobs: Vec<Blob> = (0..cfg.blob_count)
        .map(|_| Blob {
            center: std::array::from_fn(|i| lo[i] + (hi[i] - lo[i]) * rng.uniform()),
            sigma: std::array::from_fn(|_| rng.range(cfg.blob_sigma_mm)),
            amplitude: rng.range(cfg.blob_amplitude),
        })
        .collect();
    let anatomy = |p: Vec3| blobs.iter().map(|b| b.eval(p)).sum::<f64>();

    let radius_t = rng.range(cfg.lesion_radius_mm);
    let radius_s = radius_t * rng.range(cfg.radius_change);
    let mut affine = match fixed {
        Some(a) => *a,
        None => random_affine(cfg, &mut rng, center),
    };
    let mut center_t = [0.0; 3];
    let mut center_s = [0.0; 3];
    let mut placed = false;
    for _ in 0..1000 {
        center_t = std::array::from_fn(|i| {
            rng.range([lo[i] + 2.0 * radius_t, hi[i] - 2.0 * radius_t])
        });
        center_s = affine.apply(center_t);
        if inside_margin(&grid, center_s, 2.0 * radius_s) {
            placed = true;
            break;
        }
        if fixed.is_none() {
            affine = random_affine(cfg, &mut rng, center);
        }
    }
    if !placed {
        return Err(Error::InvalidArgument(format!(
            "pair {index}: could not place the lesion away from the border"
        )));
    }

    let template_anatomy = Volume::from_fn(grid, anatomy);
    let scale = if template_anatomy.max() > 0.0 {
        (1.0 - cfg.lesion_contrast) / template_anatomy.max()
    } else {
        0.0
    };
    let contrast = cfg.lesion_contrast;
    let mut template = Volume::from_fn(grid, |p| contrast * ball(p, center_t, radius_t));
    for (t, a) in template.data.iter_mut().zip(&template_anatomy.data) {
        *t += scale * a;
    }
    let inverse = affine.inverse()?;
    let mut search = Volume::from_fn(grid, |q| {
        scale * anatomy(inverse.apply(q)) + contrast * ball(q, center_s, radius_s)
    });
    for v in [&mut template, &mut search] {
        for x in v.data.iter_mut() {
            let noise = if cfg.noise_sigma > 0.0 {
                cfg.noise_sigma * rng.normal()
            } else {
                0.0
            };
            *x = quantize(*x + noise);
        }
    }

    let (tid, sid) = volume_names(index);
    Ok(SynthPair {
        template,
        search,
        pair: LesionPair {
            template_volume_id: tid,
            search_volume_id: sid,
            template_lesion: Lesion::new(center_t, [radius_t; 3])?,
            search_lesion: Some(Lesion::new(center_s, [radius_s; 3])?),
        },
        affine,
    })
}

fn volume_names(index: u64) -> (String, String) {
    (
        format!("volumes/pair_{index:05}_a"),
        format!("volumes/pair_{index:05}_b"),
    )
}

/// Both directed records of a generated pair.
pub fn directed_records(pair: &SynthPair, index: u64) -> [ManifestRecord; 2] {
    let t = pair.pair.template_lesion;
    let s = pair.pair.search_lesion.expect("synthetic pairs carry ground truth");
    let id = format!("pair_{index:05}");
    [
        ManifestRecord {
            template_volume: pair.pair.template_volume_id.clone(),
            search_volume: pair.pair.search_volume_id.clone(),
            template_center_mm: t.center,
            template_radius_mm: t.radius,
            search_center_mm: Some(s.center),
            search_radius_mm: Some(s.radius),
            pair_id: id.clone(),
            direction: Direction::Forward,
        },
        ManifestRecord {
            template_volume: pair.pair.search_volume_id.clone(),
            search_volume: pair.pair.template_volume_id.clone(),
            template_center_mm: s.center,
            template_radius_mm: s.radius,
            search_center_mm: Some(t.center),
            search_radius_mm: Some(t.radius),
            pair_id: id,
            direction: Direction::Backward,
        },
    ]
}

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// Writes `n_pairs` pairs (both directions each) plus `manifest.jsonl` and
/// the effective `synth_config.json` under `out_dir`.
pub fn gen_dataset(cfg: &SynthConfig, n_pairs: usize, out_dir: impl AsRef<Path>) -> Result<PathBuf> {
    cfg.validate()?;
    let out = out_dir.as_ref();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let records: Vec<[ManifestRecord; 2]> = (0..n_pairs as u64)
        .into_par_iter()
        .map(|i| {
            let pair = gen_pair(cfg, i)?;
            write_volume(&pair.template, out.join(&pair.pair.template_volume_id))?;
            write_volume(&pair.search, out.join(&pair.pair.search_volume_id))?;
            Ok(directed_records(&pair, i))
        })
        .collect::<Result<_>>()?;
    let flat: Vec<ManifestRecord> = records.into_iter().flatten().collect();
    let manifest = out.join(MANIFEST_NAME);
    write_manifest(&manifest, &flat)?;
    let cfg_path = out.join("synth_config.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(cfg)?)
        .map_err(|e| Error::io(&cfg_path, e))?;
    Ok(manifest)
}
