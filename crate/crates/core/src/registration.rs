//! Affine registration by smoothed-L1 intensity matching, and resampling of
//! volumes through an affine transform.
//!
//! The optimizer works on a three-level pyramid (coarse to fine) of volumes
//! resampled to a common isotropic spacing, with normalized gradient steps
//! and backtracking. Gradients flow analytically through trilinear sampling.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Error, Result};
use crate::volume::{
    resample_isotropic, sample_clamped, sample_clamped_with_gradient, sample_zero, Grid, Vec3,
    Volume,
};

/// `p ↦ A·p + t` on world coordinates (mm).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    pub a: Matrix3<f64>,
    pub t: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
struct AffineJson {
    #[serde(rename = "A")]
    a: [f64; 9],
    t: [f64; 3],
}

impl Serialize for AffineTransform {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut a = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                a[r * 3 + c] = self.a[(r, c)];
            }
        }
        AffineJson {
            a,
            t: [self.t.x, self.t.y, self.t.z],
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for AffineTransform {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let j = AffineJson::deserialize(d)?;
        Ok(AffineTransform {
            a: Matrix3::from_row_slice(&j.a),
            t: Vector3::from(j.t),
        })
    }
}

impl Default for AffineTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineTransform {
    pub fn identity() -> Self {
        AffineTransform {
            a: Matrix3::identity(),
            t: Vector3::zeros(),
        }
    }

    pub fn translation(t: Vec3) -> Self {
        AffineTransform {
            a: Matrix3::identity(),
            t: Vector3::from(t),
        }
    }

    /// Linear map `linear` applied about `center`, followed by `shift`:
    /// `p ↦ linear·(p − center) + center + shift`.
    pub fn about(center: Vec3, linear: Matrix3<f64>, shift: Vec3) -> Self {
        let c = Vector3::from(center);
        AffineTransform {
            a: linear,
            t: c - linear * c + Vector3::from(shift),
        }
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        let q = self.a * Vector3::from(p) + self.t;
        [q.x, q.y, q.z]
    }

    pub fn det(&self) -> f64 {
        self.a.determinant()
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self
            .a
            .try_inverse()
            .filter(|m| m.iter().all(|x| x.is_finite()))
            .ok_or_else(|| Error::InvalidArgument("affine matrix is singular".into()))?;
        Ok(AffineTransform {
            a: inv,
            t: -(inv * self.t),
        })
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        AffineTransform {
            a: self.a * other.a,
            t: self.a * other.t + self.t,
        }
    }

    /// Rotation angle (degrees) of the orthogonal factor of the polar
    /// decomposition `A = R·P`.
    pub fn rotation_angle_deg(&self) -> f64 {
        rotation_angle_deg(&self.a)
    }

    pub fn is_finite(&self) -> bool {
        self.a.iter().chain(self.t.iter()).all(|x| x.is_finite())
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Orthogonal polar factor of `m` (nearest rotation).
pub fn polar_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u2 = u;
        u2.column_mut(2).neg_mut();
        r = u2 * v_t;
    }
    r
}

pub fn rotation_angle_deg(m: &Matrix3<f64>) -> f64 {
    let r = polar_rotation(m);
    let c = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

/// Rotation `Rz(θz)·Ry(θy)·Rx(θx)` (radians).
pub fn euler_rotation(theta: Vec3) -> Matrix3<f64> {
    let [rx, ry, rz] = rotation_factors(theta);
    rz * ry * rx
}

fn rotation_factors(theta: Vec3) -> [Matrix3<f64>; 3] {
    let (sx, cx) = theta[0].sin_cos();
    let (sy, cy) = theta[1].sin_cos();
    let (sz, cz) = theta[2].sin_cos();
    [
        Matrix3::new(1.0, 0.0, 0.0, 0.0, cx, -sx, 0.0, sx, cx),
        Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy),
        Matrix3::new(cz, -sz, 0.0, sz, cz, 0.0, 0.0, 0.0, 1.0),
    ]
}

fn rotation_derivatives(theta: Vec3) -> [Matrix3<f64>; 3] {
    let (sx, cx) = theta[0].sin_cos();
    let (sy, cy) = theta[1].sin_cos();
    let (sz, cz) = theta[2].sin_cos();
    [
        Matrix3::new(0.0, 0.0, 0.0, 0.0, -sx, -cx, 0.0, cx, -sx),
        Matrix3::new(-sy, 0.0, cy, 0.0, 0.0, 0.0, -cy, 0.0, -sy),
        Matrix3::new(-sz, -cz, 0.0, cz, -sz, 0.0, 0.0, 0.0, 0.0),
    ]
}

/// Pulls `v` through `transform` onto `target`: output(q) = v(T⁻¹(q)),
/// trilinear, zero outside `v`.
pub fn apply_affine(v: &Volume, transform: &AffineTransform, target: &Grid) -> Result<Volume> {
    target.validate()?;
    ensure_arg!(transform.is_finite(), "affine transform is not finite");
    let inv = transform.inverse()?;
    // fold world→voxel of the source into the inverse map
    let src = &v.grid;
    let to_vox = Matrix3::from_diagonal(&Vector3::new(
        1.0 / src.spacing[0],
        1.0 / src.spacing[1],
        1.0 / src.spacing[2],
    ));
    let m = to_vox * inv.a;
    let b = to_vox * (inv.t - Vector3::from(src.origin));
    Ok(Volume::from_fn(*target, |q| {
        let p = m * Vector3::from(q) + b;
        sample_zero(v, [p.x, p.y, p.z])
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationOptions {
    /// Isotropic spacing both volumes are resampled to before registering;
    /// `None` registers at native spacing (which must then match).
    pub resample_mm: Option<f64>,
    /// Downsampling factors, coarse to fine.
    pub pyramid: Vec<usize>,
    pub iterations_per_level: usize,
    /// Level stops when the relative cost improvement of a step drops below this.
    pub tolerance: f64,
    /// Smoothing of |r| as sqrt(r² + ε²).
    pub epsilon: f64,
}

impl Default for RegistrationOptions {
    fn default() -> Self {
        RegistrationOptions {
            resample_mm: Some(2.0),
            pyramid: vec![4, 2, 1],
            iterations_per_level: 200,
            tolerance: 1e-6,
            epsilon: 1e-6,
        }
    }
}

/// Outcome of [`register_affine`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Registration {
    /// Maps template world coordinates onto search world coordinates.
    pub transform: AffineTransform,
    /// Cost of the identity transform at the finest level.
    pub initial_cost: f64,
    pub final_cost: f64,
    /// `(start, end)` cost per pyramid level, coarse to fine.
    pub level_costs: Vec<(f64, f64)>,
}

/// Number of free parameters of the affine model.
const NPARAM: usize = 12;

/// Parameterization of the pull-back map `U(q) = M·(q − c) + c + u` taking
/// search coordinates into template coordinates, `M = R(θ)·diag(s)·H(h)`.
/// Angle, scale and shear parameters are multiplied by a length so one unit
/// of any parameter moves points by roughly 1mm.
#[derive(Debug, Clone, Copy)]
struct PullBack {
    center: Vector3<f64>,
    length: f64,
}

impl PullBack {
    fn parts(&self, x: &[f64; NPARAM]) -> (Vector3<f64>, Vec3, Vec3, Vec3) {
        let l = self.length;
        let u = Vector3::new(x[0], x[1], x[2]);
        let theta = [x[3] / l, x[4] / l, x[5] / l];
        let scale = [1.0 + x[6] / l, 1.0 + x[7] / l, 1.0 + x[8] / l];
        let shear = [x[9] / l, x[10] / l, x[11] / l];
        (u, theta, scale, shear)
    }

    fn shear_matrix(h: Vec3) -> Matrix3<f64> {
        Matrix3::new(1.0, h[0], h[1], 0.0, 1.0, h[2], 0.0, 0.0, 1.0)
    }

    fn linear(&self, x: &[f64; NPARAM]) -> Matrix3<f64> {
        let (_, theta, scale, shear) = self.parts(x);
        euler_rotation(theta)
            * Matrix3::from_diagonal(&Vector3::from(scale))
            * Self::shear_matrix(shear)
    }

    /// Derivatives of `M` with respect to parameters 3..12.
    fn linear_derivatives(&self, x: &[f64; NPARAM]) -> [Matrix3<f64>; 9] {
        let (_, theta, scale, shear) = self.parts(x);
        let l = self.length;
        let [rx, ry, rz] = rotation_factors(theta);
        let [drx, dry, drz] = rotation_derivatives(theta);
        let s = Matrix3::from_diagonal(&Vector3::from(scale));
        let h = Self::shear_matrix(shear);
        let r = rz * ry * rx;
        let mut out = [Matrix3::zeros(); 9];
        out[0] = rz * ry * drx * s * h / l;
        out[1] = rz * dry * rx * s * h / l;
        out[2] = drz * ry * rx * s * h / l;
        for i in 0..3 {
            let mut e = Matrix3::zeros();
            e[(i, i)] = 1.0;
            out[3 + i] = r * e * h / l;
        }
        let rs = r * s;
        for (k, (row, col)) in [(0, 1), (0, 2), (1, 2)].into_iter().enumerate() {
            let mut e = Matrix3::zeros();
            e[(row, col)] = 1.0;
            out[6 + k] = rs * e / l;
        }
        out
    }

    /// The forward transform (template → search), i.e. the inverse of `U`.
    fn forward_transform(&self, x: &[f64; NPARAM]) -> Result<AffineTransform> {
        let (u, ..) = self.parts(x);
        let m = self.linear(x);
        let pull = AffineTransform {
            a: m,
            t: self.center - m * self.center + u,
        };
        pull.inverse()
    }
}

struct Level {
    template: Volume,
    search: Volume,
    /// World coordinates of every search voxel.
    points: Vec<Vector3<f64>>,
}

impl Level {
    fn new(template: Volume, search: Volume) -> Self {
        let g = search.grid;
        let [d, h, w] = g.dims;
        let mut points = Vec::with_capacity(g.len());
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    points.push(Vector3::from(g.position(z, y, x)));
                }
            }
        }
        Level {
            template,
            search,
            points,
        }
    }

    fn pull_matrices(&self, model: &PullBack, x: &[f64; NPARAM]) -> (Matrix3<f64>, Vector3<f64>) {
        let (u, ..) = model.parts(x);
        let m = model.linear(x);
        let tg = &self.template.grid;
        let to_vox = Matrix3::from_diagonal(&Vector3::new(
            1.0 / tg.spacing[0],
            1.0 / tg.spacing[1],
            1.0 / tg.spacing[2],
        ));
        let b = model.center - m * model.center + u - Vector3::from(tg.origin);
        (to_vox * m, to_vox * b)
    }

    fn cost(&self, model: &PullBack, x: &[f64; NPARAM], eps: f64) -> f64 {
        let (m, b) = self.pull_matrices(model, x);
        let eps2 = eps * eps;
        let mut total = 0.0;
        for (q, &s) in self.points.iter().zip(&self.search.data) {
            let p = m * q + b;
            let r = sample_clamped(&self.template, [p.x, p.y, p.z]) - s;
            total += (r * r + eps2).sqrt();
        }
        total / self.points.len() as f64
    }

    fn cost_and_gradient(
        &self,
        model: &PullBack,
        x: &[f64; NPARAM],
        eps: f64,
    ) -> (f64, [f64; NPARAM]) {
        let (m, b) = self.pull_matrices(model, x);
        let tg = &self.template.grid;
        let inv_sp = Vector3::new(
            1.0 / tg.spacing[0],
            1.0 / tg.spacing[1],
            1.0 / tg.spacing[2],
        );
        let eps2 = eps * eps;
        let n = self.points.len() as f64;
        let mut total = 0.0;
        let mut g_u = Vector3::zeros();
        let mut g_m = Matrix3::zeros();
        for (q, &s) in self.points.iter().zip(&self.search.data) {
            let p = m * q + b;
            let (val, grad_vox) = sample_clamped_with_gradient(&self.template, [p.x, p.y, p.z]);
            let r = val - s;
            let rho = (r * r + eps2).sqrt();
            total += rho;
            let w = r / rho;
            if w == 0.0 {
                continue;
            }
            // d cost / d U(q), world units
            let g = Vector3::from(grad_vox).component_mul(&inv_sp) * w;
            g_u += g;
            g_m += g * (q - model.center).transpose();
        }
        g_u /= n;
        g_m /= n;
        let mut grad = [0.0; NPARAM];
        grad[0] = g_u.x;
        grad[1] = g_u.y;
        grad[2] = g_u.z;
        for (k, dm) in model.linear_derivatives(x).iter().enumerate() {
            grad[3 + k] = g_m.component_mul(dm).sum();
        }
        (total / n, grad)
    }
}

/// Separable [1, 2, 1]/4 smoothing with edge replication.
fn smooth(v: &Volume) -> Volume {
    let [d, h, w] = v.grid.dims;
    let mut cur = v.data.clone();
    let mut next = vec![0.0; cur.len()];
    let strides = [h * w, w, 1];
    let lens = [d, h, w];
    for axis in 0..3 {
        let n = lens[axis];
        let st = strides[axis];
        for (i, out) in next.iter_mut().enumerate() {
            let pos = (i / st) % n;
            let lo = if pos > 0 { i - st } else { i };
            let hi = if pos + 1 < n { i + st } else { i };
            *out = 0.25 * cur[lo] + 0.5 * cur[i] + 0.25 * cur[hi];
        }
        std::mem::swap(&mut cur, &mut next);
    }
    Volume {
        grid: v.grid,
        data: cur,
    }
}

fn downsample(v: &Volume, factor: usize) -> Result<Volume> {
    let mut cur = v.clone();
    let mut f = 1;
    while f < factor {
        let target = cur.grid.spacing[0] * 2.0;
        cur = resample_isotropic(&smooth(&cur), target)?;
        f *= 2;
    }
    Ok(cur)
}

fn is_isotropic(g: &Grid) -> bool {
    (g.spacing[0] - g.spacing[1]).abs() < 1e-9 && (g.spacing[0] - g.spacing[2]).abs() < 1e-9
}

/// Finds the affine transform `T` (template → search world coordinates)
/// minimizing the mean smoothed absolute difference between the warped
/// template and the search volume.
pub fn register_affine(
    template: &Volume,
    search: &Volume,
    opts: &RegistrationOptions,
) -> Result<Registration> {
    ensure_arg!(!opts.pyramid.is_empty(), "registration pyramid is empty");
    ensure_arg!(
        opts.pyramid.iter().all(|&f| f.is_power_of_two()),
        "pyramid factors must be powers of two, got {:?}",
        opts.pyramid
    );
    ensure_arg!(opts.epsilon > 0.0, "epsilon must be positive");
    let (t0, s0) = match opts.resample_mm {
        Some(mm) => (resample_isotropic(template, mm)?, resample_isotropic(search, mm)?),
        None => {
            ensure_arg!(
                is_isotropic(&template.grid) && is_isotropic(&search.grid),
                "registration needs isotropic volumes; resample first"
            );
            ensure_arg!(
                (template.grid.spacing[0] - search.grid.spacing[0]).abs() < 1e-9,
                "template spacing {:?} differs from search spacing {:?}",
                template.grid.spacing,
                search.grid.spacing
            );
            (template.clone(), search.clone())
        }
    };
    ensure_arg!(
        t0.dims().iter().chain(s0.dims().iter()).all(|&d| d >= 2),
        "volumes must span at least 2 voxels per axis after resampling: {:?} vs {:?}",
        t0.dims(),
        s0.dims()
    );

    let (lo, hi) = s0.grid.world_bounds();
    let center = Vector3::new(
        0.5 * (lo[0] + hi[0]),
        0.5 * (lo[1] + hi[1]),
        0.5 * (lo[2] + hi[2]),
    );
    let length = (0..3).map(|i| 0.5 * (hi[i] - lo[i])).sum::<f64>() / 3.0;
    let model = PullBack {
        center,
        length: length.max(1.0),
    };

    let identity = [0.0; NPARAM];
    let mut x = identity;
    let mut level_costs = Vec::with_capacity(opts.pyramid.len());
    let mut initial_cost = f64::NAN;
    let mut final_cost = f64::NAN;
    let finest = opts.pyramid.len() - 1;
    for (li, &factor) in opts.pyramid.iter().enumerate() {
        let level = Level::new(downsample(&t0, factor)?, downsample(&s0, factor)?);
        let id_cost = level.cost(&model, &identity, opts.epsilon);
        let mut cost = level.cost(&model, &x, opts.epsilon);
        if !cost.is_finite() || !id_cost.is_finite() {
            return Err(Error::NumericalFailure(format!(
                "non-finite registration cost at level {li}"
            )));
        }
        if id_cost < cost {
            x = identity;
            cost = id_cost;
        }
        if li == finest {
            initial_cost = id_cost;
        }
        let start = cost;
        let spacing = level.search.grid.spacing[0];
        let mut step = spacing;
        let min_step = 1e-4 * spacing;
        for _ in 0..opts.iterations_per_level {
            let (c, grad) = level.cost_and_gradient(&model, &x, opts.epsilon);
            if !c.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NumericalFailure(format!(
                    "non-finite registration gradient at level {li}"
                )));
            }
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm == 0.0 {
                break;
            }
            let mut accepted = None;
            while step >= min_step {
                let mut trial = x;
                for (t, g) in trial.iter_mut().zip(&grad) {
                    *t -= step * g / norm;
                }
                let tc = level.cost(&model, &trial, opts.epsilon);
                if tc < c {
                    accepted = Some((trial, tc));
                    break;
                }
                step *= 0.5;
            }
            let Some((trial, tc)) = accepted else { break };
            let improvement = (c - tc) / c.max(f64::MIN_POSITIVE);
            x = trial;
            cost = tc;
            if improvement < opts.tolerance {
                break;
            }
            step = (step * 1.5).min(2.0 * spacing);
        }
        level_costs.push((start, cost));
        if li == finest {
            final_cost = cost;
        }
    }
    let transform = model.forward_transform(&x)?;
    if !transform.is_finite() || transform.det() <= 0.0 {
        return Err(Error::NumericalFailure(
            "registration produced a degenerate transform".into(),
        ));
    }
    Ok(Registration {
        transform,
        initial_cost,
        final_cost,
        level_costs,
    })
}
