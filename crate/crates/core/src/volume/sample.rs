use super::{lerp, Vec3, Volume};

#[inline]
fn corner(coord: f64, n: usize) -> (usize, usize, f64) {
    let i0 = (coord.floor() as isize).clamp(0, n as isize - 1) as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, (coord - i0 as f64).clamp(0.0, 1.0))
}

#[inline]
fn interpolate(v: &Volume, p: Vec3) -> f64 {
    let [d, h, w] = v.grid.dims;
    let (x0, x1, fx) = corner(p[0], w);
    let (y0, y1, fy) = corner(p[1], h);
    let (z0, z1, fz) = corner(p[2], d);
    let c00 = lerp(v.at(z0, y0, x0), v.at(z0, y0, x1), fx);
    let c01 = lerp(v.at(z0, y1, x0), v.at(z0, y1, x1), fx);
    let c10 = lerp(v.at(z1, y0, x0), v.at(z1, y0, x1), fx);
    let c11 = lerp(v.at(z1, y1, x0), v.at(z1, y1, x1), fx);
    lerp(lerp(c00, c01, fy), lerp(c10, c11, fy), fz)
}

/// Trilinear sample at continuous voxel coordinate `p = [x, y, z]`, with
/// coordinates clamped to the grid (edge replication).
pub fn sample_clamped(v: &Volume, p: Vec3) -> f64 {
    let [d, h, w] = v.grid.dims;
    let q = [
        p[0].clamp(0.0, (w - 1) as f64),
        p[1].clamp(0.0, (h - 1) as f64),
        p[2].clamp(0.0, (d - 1) as f64),
    ];
    interpolate(v, q)
}

/// Trilinear sample that returns 0 for points outside the grid.
pub fn sample_zero(v: &Volume, p: Vec3) -> f64 {
    const TOL: f64 = 1e-9;
    let [d, h, w] = v.grid.dims;
    let lim = [(w - 1) as f64, (h - 1) as f64, (d - 1) as f64];
    if (0..3).any(|i| p[i] < -TOL || p[i] > lim[i] + TOL) {
        return 0.0;
    }
    let q = [
        p[0].clamp(0.0, lim[0]),
        p[1].clamp(0.0, lim[1]),
        p[2].clamp(0.0, lim[2]),
    ];
    interpolate(v, q)
}

/// Clamped trilinear sample plus its spatial gradient (per voxel unit,
/// `[d/dx, d/dy, d/dz]`). The gradient is zero along clamped axes.
pub fn sample_clamped_with_gradient(v: &Volume, p: Vec3) -> (f64, Vec3) {
    let [d, h, w] = v.grid.dims;
    let dims = [w, h, d];
    let mut i0 = [0usize; 3];
    let mut i1 = [0usize; 3];
    let mut f = [0.0; 3];
    let mut live = [true; 3];
    for a in 0..3 {
        let n = dims[a];
        let hi = (n - 1) as f64;
        let c = p[a];
        if n == 1 || c <= 0.0 || c >= hi {
            live[a] = false;
        }
        let c = c.clamp(0.0, hi);
        let lo = (c.floor() as usize).min(n.saturating_sub(2));
        i0[a] = lo;
        i1[a] = (lo + 1).min(n - 1);
        f[a] = c - lo as f64;
    }
    let g = |z: usize, y: usize, x: usize| v.at(z, y, x);
    let v000 = g(i0[2], i0[1], i0[0]);
    let v001 = g(i0[2], i0[1], i1[0]);
    let v010 = g(i0[2], i1[1], i0[0]);
    let v011 = g(i0[2], i1[1], i1[0]);
    let v100 = g(i1[2], i0[1], i0[0]);
    let v101 = g(i1[2], i0[1], i1[0]);
    let v110 = g(i1[2], i1[1], i0[0]);
    let v111 = g(i1[2], i1[1], i1[0]);
    let [fx, fy, fz] = f;

    let c00 = v000 + (v001 - v000) * fx;
    let c01 = v010 + (v011 - v010) * fx;
    let c10 = v100 + (v101 - v100) * fx;
    let c11 = v110 + (v111 - v110) * fx;
    let c0 = c00 + (c01 - c00) * fy;
    let c1 = c10 + (c11 - c10) * fy;
    let value = c0 + (c1 - c0) * fz;

    let dx = {
        let e0 = (v001 - v000) + ((v011 - v010) - (v001 - v000)) * fy;
        let e1 = (v101 - v100) + ((v111 - v110) - (v101 - v100)) * fy;
        e0 + (e1 - e0) * fz
    };
    let dy = (c01 - c00) + ((c11 - c10) - (c01 - c00)) * fz;
    let dz = c1 - c0;
    let grad = [
        if live[0] { dx } else { 0.0 },
        if live[1] { dy } else { 0.0 },
        if live[2] { dz } else { 0.0 },
    ];
    (value, grad)
}
