//! Volume data model, world/voxel coordinates, Gaussian lesion priors and
//! trilinear resampling.
//!
//! Conventions used throughout the crate:
//! * voxel arrays are indexed `(z, y, x)` and flattened row-major;
//! * world vectors (centers, radii, spacing, origin) are `[x, y, z]` in mm;
//! * continuous voxel coordinates are `[x, y, z]` in voxel units.

mod io;
mod manifest;
mod sample;

pub use io::{read_volume, write_volume};
pub use manifest::{read_manifest, write_manifest, Direction, ManifestRecord};
pub use sample::{sample_clamped, sample_clamped_with_gradient, sample_zero};

use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Result};

/// World-space 3-vector `[x, y, z]` in mm.
pub type Vec3 = [f64; 3];

/// Geometry of a voxel grid: dimensions plus the voxel-to-world mapping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    /// `[D, H, W]`, i.e. `(z, y, x)` extents.
    pub dims: [usize; 3],
    /// Voxel size `[x, y, z]` in mm.
    pub spacing: Vec3,
    /// World position of voxel `(0, 0, 0)`, `[x, y, z]` in mm.
    pub origin: Vec3,
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: Vec3, origin: Vec3) -> Result<Self> {
        let grid = Grid {
            dims,
            spacing,
            origin,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Unit-spacing grid anchored at the world origin.
    pub fn unit(dims: [usize; 3]) -> Self {
        Grid {
            dims,
            spacing: [1.0; 3],
            origin: [0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure_arg!(
            self.dims.iter().all(|&d| d >= 1),
            "grid dimensions must be >= 1, got {:?}",
            self.dims
        );
        ensure_arg!(
            self.spacing.iter().all(|&s| s > 0.0 && s.is_finite()),
            "spacing must be positive, got {:?}",
            self.spacing
        );
        ensure_arg!(
            self.origin.iter().all(|o| o.is_finite()),
            "origin must be finite, got {:?}",
            self.origin
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Extents in `[x, y, z]` order.
    pub fn dims_xyz(&self) -> [usize; 3] {
        [self.dims[2], self.dims[1], self.dims[0]]
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    /// Inverse of [`Grid::index`], returning `(z, y, x)`.
    #[inline]
    pub fn unravel(&self, flat: usize) -> [usize; 3] {
        let x = flat % self.dims[2];
        let y = (flat / self.dims[2]) % self.dims[1];
        let z = flat / (self.dims[2] * self.dims[1]);
        [z, y, x]
    }

    /// Continuous voxel coordinate `[x, y, z]` of a world point.
    pub fn mm_to_voxel(&self, p: Vec3) -> Vec3 {
        std::array::from_fn(|i| (p[i] - self.origin[i]) / self.spacing[i])
    }

    pub fn voxel_to_mm(&self, v: Vec3) -> Vec3 {
        std::array::from_fn(|i| self.origin[i] + v[i] * self.spacing[i])
    }

    /// World position of the voxel at `(z, y, x)`.
    pub fn position(&self, z: usize, y: usize, x: usize) -> Vec3 {
        self.voxel_to_mm([x as f64, y as f64, z as f64])
    }

    /// Axis-aligned world bounds `(min, max)` spanned by voxel centers.
    pub fn world_bounds(&self) -> (Vec3, Vec3) {
        let d = self.dims_xyz();
        let lo = self.origin;
        let hi = std::array::from_fn(|i| self.origin[i] + (d[i] - 1) as f64 * self.spacing[i]);
        (lo, hi)
    }

    pub fn contains_mm(&self, p: Vec3) -> bool {
        let (lo, hi) = self.world_bounds();
        (0..3).all(|i| p[i] >= lo[i] && p[i] <= hi[i])
    }

    /// Geometry obtained by resizing to `target` dims with half-voxel alignment,
    /// so every output voxel's world position is the point it was sampled at.
    pub fn resized(&self, target: [usize; 3]) -> Grid {
        let src = self.dims_xyz();
        let dst = [target[2], target[1], target[0]];
        let mut spacing = [0.0; 3];
        let mut origin = [0.0; 3];
        for i in 0..3 {
            let scale = src[i] as f64 / dst[i] as f64;
            spacing[i] = self.spacing[i] * scale;
            origin[i] = self.origin[i] + (0.5 * scale - 0.5) * self.spacing[i];
        }
        Grid {
            dims: target,
            spacing,
            origin,
        }
    }
}

/// Dense scalar volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub grid: Grid,
    pub data: Vec<f64>,
}

impl Volume {
    pub fn new(grid: Grid, data: Vec<f64>) -> Result<Self> {
        grid.validate()?;
        ensure_arg!(
            data.len() == grid.len(),
            "data length {} does not match dims {:?}",
            data.len(),
            grid.dims
        );
        Ok(Volume { grid, data })
    }

    pub fn zeros(grid: Grid) -> Self {
        Volume {
            data: vec![0.0; grid.len()],
            grid,
        }
    }

    pub fn filled(grid: Grid, value: f64) -> Self {
        Volume {
            data: vec![value; grid.len()],
            grid,
        }
    }

    /// Evaluates `f` at every voxel's world position.
    pub fn from_fn(grid: Grid, mut f: impl FnMut(Vec3) -> f64) -> Self {
        let [d, h, w] = grid.dims;
        let mut data = Vec::with_capacity(grid.len());
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(grid.position(z, y, x)));
                }
            }
        }
        Volume { grid, data }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> f64 {
        self.data[self.grid.index(z, y, x)]
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Flat index of the maximum value (first occurrence).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub fn mm_to_voxel(&self, p: Vec3) -> Vec3 {
        self.grid.mm_to_voxel(p)
    }

    pub fn voxel_to_mm(&self, v: Vec3) -> Vec3 {
        self.grid.voxel_to_mm(v)
    }
}

/// A lesion annotation: center and per-axis radius, both in world mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub center: Vec3,
    pub radius: Vec3,
}

impl Lesion {
    pub fn new(center: Vec3, radius: Vec3) -> Result<Self> {
        ensure_arg!(
            radius.iter().all(|&r| r > 0.0 && r.is_finite()),
            "lesion radius must be positive, got {radius:?}"
        );
        ensure_arg!(
            center.iter().all(|c| c.is_finite()),
            "lesion center must be finite, got {center:?}"
        );
        Ok(Lesion { center, radius })
    }

    /// Scalar radius: mean of the per-axis radii.
    pub fn mean_radius(&self) -> f64 {
        self.radius.iter().sum::<f64>() / 3.0
    }
}

/// A directed (template → search) lesion pair.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionPair {
    pub template_volume_id: String,
    pub search_volume_id: String,
    pub template_lesion: Lesion,
    /// Ground truth; absent at inference.
    pub search_lesion: Option<Lesion>,
}

/// Gaussian prior map over `grid`:
/// `G(p) = exp(-Σ_i (p_i - c_i)² / Σ_i (2 r_i)²)`, with a single scalar
/// denominator shared by all axes. Evaluated at voxel world positions.
pub fn gaussian_map(center: Vec3, radius: Vec3, grid: &Grid) -> Result<Volume> {
    ensure_arg!(
        radius.iter().all(|&r| r > 0.0 && r.is_finite()),
        "gaussian radius must be positive, got {radius:?}"
    );
    grid.validate()?;
    let denom: f64 = radius.iter().map(|r| (2.0 * r) * (2.0 * r)).sum();
    Ok(Volume::from_fn(*grid, |p| {
        let num: f64 = (0..3).map(|i| (p[i] - center[i]) * (p[i] - center[i])).sum();
        (-num / denom).exp()
    }))
}

/// Trilinear resize to `target` dims (`[D, H, W]`), half-voxel aligned.
///
/// Output voxel `i` samples the input at `(i + 0.5) · n_in / n_out − 0.5`,
/// clamped to the input extent, so the result never leaves the input range.
pub fn resize_trilinear(v: &Volume, target: [usize; 3]) -> Result<Volume> {
    ensure_arg!(
        target.iter().all(|&d| d >= 1),
        "target dims must be >= 1, got {target:?}"
    );
    let grid = v.grid.resized(target);
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let [d0, h0, w0] = v.grid.dims;
    let zs = axis(target[0], d0);
    let ys = axis(target[1], h0);
    let xs = axis(target[2], w0);
    let mut data = Vec::with_capacity(grid.len());
    for &(z0, z1, fz) in &zs {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let c00 = lerp(v.at(z0, y0, x0), v.at(z0, y0, x1), fx);
                let c01 = lerp(v.at(z0, y1, x0), v.at(z0, y1, x1), fx);
                let c10 = lerp(v.at(z1, y0, x0), v.at(z1, y0, x1), fx);
                let c11 = lerp(v.at(z1, y1, x0), v.at(z1, y1, x1), fx);
                data.push(lerp(lerp(c00, c01, fy), lerp(c10, c11, fy), fz));
            }
        }
    }
    Ok(Volume { grid, data })
}

/// Resamples onto an isotropic grid with voxel size `target_mm`, keeping the
/// origin and covering the same world extent (to within one voxel).
pub fn resample_isotropic(v: &Volume, target_mm: f64) -> Result<Volume> {
    ensure_arg!(
        target_mm > 0.0 && target_mm.is_finite(),
        "target spacing must be positive, got {target_mm}"
    );
    let src = v.grid.dims_xyz();
    let dims_xyz: [usize; 3] = std::array::from_fn(|i| {
        let extent = (src[i] - 1) as f64 * v.grid.spacing[i];
        (extent / target_mm).round() as usize + 1
    });
    let grid = Grid {
        dims: [dims_xyz[2], dims_xyz[1], dims_xyz[0]],
        spacing: [target_mm; 3],
        origin: v.grid.origin,
    };
    let ratio: Vec3 = std::array::from_fn(|i| target_mm / v.grid.spacing[i]);
    let [d, h, w] = grid.dims;
    let mut data = Vec::with_capacity(grid.len());
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [x as f64 * ratio[0], y as f64 * ratio[1], z as f64 * ratio[2]];
                data.push(sample_clamped(v, p));
            }
        }
    }
    Ok(Volume { grid, data })
}

#[inline(always)]
pub(crate) fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else {
        a + (b - a) * t
    }
}
