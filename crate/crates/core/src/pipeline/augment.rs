//! Training-time augmentation by axis permutations and reflections.
//!
//! A symmetry acts on voxel indices; every grid keeps its origin and
//! spacing (permuted with the axes) and world points move with the voxel
//! they sit in. Because feature grids are half-voxel aligned resizes of the
//! volume grid, the same symmetry maps volume, feature cells, labels and
//! target center consistently.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{PairData, Target};
use crate::volume::{Grid, Vec3, Volume};

/// `perm[k]` is the source array axis of output axis `k` (array order
/// `z, y, x`); `flip[k]` reverses output axis `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Symmetry {
    pub perm: [usize; 3],
    pub flip: [bool; 3],
}

const PERMUTATIONS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

impl Symmetry {
    pub fn identity() -> Self {
        Symmetry {
            perm: [0, 1, 2],
            flip: [false; 3],
        }
    }

    /// One of the 48 symmetries of the cube, uniformly.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let perm = PERMUTATIONS[rng.gen_range(0..6)];
        let flip = std::array::from_fn(|_| rng.gen_bool(0.5));
        Symmetry { perm, flip }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    // world vectors are [x, y, z], array axis k is world axis 2 - k
    fn permute_xyz(&self, v: Vec3) -> Vec3 {
        let mut out = [0.0; 3];
        for k in 0..3 {
            out[2 - k] = v[2 - self.perm[k]];
        }
        out
    }

    pub fn grid(&self, g: &Grid) -> Grid {
        Grid {
            dims: std::array::from_fn(|k| g.dims[self.perm[k]]),
            spacing: self.permute_xyz(g.spacing),
            origin: self.permute_xyz(g.origin),
        }
    }

    /// Image of world point `p` given on grid `g`.
    pub fn point(&self, g: &Grid, p: Vec3) -> Vec3 {
        let v = g.mm_to_voxel(p);
        let out_grid = self.grid(g);
        let mut w = [0.0; 3];
        for k in 0..3 {
            let src = v[2 - self.perm[k]];
            let n = g.dims[self.perm[k]] as f64;
            w[2 - k] = if self.flip[k] { n - 1.0 - src } else { src };
        }
        out_grid.voxel_to_mm(w)
    }

    /// Row-major `(z, y, x)` array on `dims`, rearranged.
    pub fn array(&self, data: &[f64], dims: [usize; 3]) -> Vec<f64> {
        debug_assert_eq!(data.len(), dims.iter().product::<usize>());
        let out_dims: [usize; 3] = std::array::from_fn(|k| dims[self.perm[k]]);
        let mut out = Vec::with_capacity(data.len());
        let mut src = [0usize; 3];
        for a in 0..out_dims[0] {
            for b in 0..out_dims[1] {
                for c in 0..out_dims[2] {
                    for (k, &i) in [a, b, c].iter().enumerate() {
                        src[self.perm[k]] = if self.flip[k] { out_dims[k] - 1 - i } else { i };
                    }
                    out.push(data[(src[0] * dims[1] + src[1]) * dims[2] + src[2]]);
                }
            }
        }
        out
    }

    fn volume(&self, v: &Volume) -> Volume {
        Volume {
            grid: self.grid(&v.grid),
            data: self.array(&v.data, v.grid.dims),
        }
    }

    pub fn pair(&self, p: &PairData) -> PairData {
        if self.is_identity() {
            return p.clone();
        }
        let sf = &p.search_features;
        PairData {
            id: p.id.clone(),
            template: self.volume(&p.template),
            search: self.volume(&p.search),
            template_features: self.grid(&p.template_features),
            search_features: self.grid(sf),
            template_prior: self.array(&p.template_prior, p.template_features.dims),
            mask_row: self.array(&p.mask_row, sf.dims),
            registration_cost: p.registration_cost,
            target: p.target.as_ref().map(|t| Target {
                center: self.point(&p.search.grid, t.center),
                radius: self.permute_xyz(t.radius),
                label: self.array(&t.label, sf.dims),
            }),
        }
    }
}
