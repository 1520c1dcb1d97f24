//! Siamese 3D residual feature extractor with total stride 8.
//!
//! Layout follows ResNet18 with the stem at stride 1 and the last stage
//! dropped: stem conv (stage 1), then stages 2-4 of two basic blocks each,
//! the first block of every stage downsampling by 2.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Result};
use crate::nn::{ConvSpec, Graph, Init, ParamSet, Tensor, Var};
use crate::real::Real;
use crate::volume::{Grid, Volume};

pub const STRIDE: usize = 8;
const BLOCKS_PER_STAGE: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    /// Output width of the stem and of stages 2-4.
    pub widths: [usize; 4],
    /// Input intensities are mapped to `(v − input_mean) / input_std`.
    pub input_mean: f64,
    pub input_std: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl BackboneConfig {
    pub fn toy() -> Self {
        BackboneConfig {
            widths: [8, 16, 32, 48],
            input_mean: 0.5,
            input_std: 0.25,
        }
    }

    pub fn full() -> Self {
        BackboneConfig {
            widths: [24, 48, 96, 192],
            ..Self::toy()
        }
    }

    pub fn channels(&self) -> usize {
        self.widths[3]
    }

    pub fn validate(&self) -> Result<()> {
        ensure_arg!(self.widths[0] > 0, "backbone widths must be positive: {:?}", self.widths);
        ensure_arg!(
            self.widths.windows(2).all(|w| w[0] <= w[1]),
            "backbone widths must be non-decreasing: {:?}",
            self.widths
        );
        ensure_arg!(
            self.input_std > 0.0 && self.input_mean.is_finite(),
            "invalid input normalization ({}, {})",
            self.input_mean,
            self.input_std
        );
        Ok(())
    }
}

/// `C × D × H × W` features plus the geometry of their cells in world space.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    /// Cell geometry: the source grid resized to the feature dims.
    pub grid: Grid,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn cells(&self) -> usize {
        self.grid.len()
    }

    /// Feature vector of cell `flat`.
    pub fn cell(&self, flat: usize) -> Vec<f64> {
        let n = self.cells();
        (0..self.channels).map(|c| self.data[c * n + flat]).collect()
    }

    /// Cell-major `[cells, C]` view.
    pub fn tokens(&self) -> Tensor<f64> {
        let n = self.cells();
        let mut out = vec![0.0; n * self.channels];
        for c in 0..self.channels {
            for i in 0..n {
                out[i * self.channels + c] = self.data[c * n + i];
            }
        }
        Tensor::new(vec![n, self.channels], out)
    }
}

pub fn feature_dims(input: [usize; 3]) -> [usize; 3] {
    input.map(|d| d.div_ceil(STRIDE))
}

fn conv_name(prefix: &str) -> String {
    format!("{prefix}.w")
}

fn add_conv<T: Real>(p: &mut ParamSet<T>, init: &mut Init, prefix: &str, ci: usize, co: usize, k: usize) {
    let fan_in = ci * k * k * k;
    p.insert(conv_name(prefix), init.he(vec![co, fan_in], fan_in));
}

fn add_norm<T: Real>(p: &mut ParamSet<T>, prefix: &str, c: usize) {
    p.insert(format!("{prefix}.gamma"), Tensor::filled(vec![c], T::one()));
    p.insert(format!("{prefix}.beta"), Tensor::zeros(vec![c]));
}

/// Deterministic He initialization from `seed`.
pub fn init_backbone<T: Real>(cfg: &BackboneConfig, seed: u64) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Init { rng: &mut rng };
    let mut p = ParamSet::new();
    let w = cfg.widths;
    add_conv(&mut p, &mut init, "backbone.stem.conv", 1, w[0], 3);
    add_norm(&mut p, "backbone.stem.norm", w[0]);
    for stage in 1..4 {
        for block in 0..BLOCKS_PER_STAGE {
            let ci = if block == 0 { w[stage - 1] } else { w[stage] };
            let co = w[stage];
            let pre = format!("backbone.stage{}.block{block}", stage + 1);
            add_conv(&mut p, &mut init, &format!("{pre}.conv1"), ci, co, 3);
            add_norm(&mut p, &format!("{pre}.norm1"), co);
            add_conv(&mut p, &mut init, &format!("{pre}.conv2"), co, co, 3);
            add_norm(&mut p, &format!("{pre}.norm2"), co);
            if block == 0 {
                add_conv(&mut p, &mut init, &format!("{pre}.down"), ci, co, 1);
                add_norm(&mut p, &format!("{pre}.down_norm"), co);
            }
        }
    }
    Ok(p)
}

fn conv_norm<T: Real>(g: &mut Graph<T>, params: &ParamSet<T>, x: Var, conv: &str, norm: &str, spec: ConvSpec) -> Var {
    let w = g.param(params, &conv_name(conv));
    let y = g.conv3d(x, w, spec);
    let gamma = g.param(params, &format!("{norm}.gamma"));
    let beta = g.param(params, &format!("{norm}.beta"));
    g.instance_norm(y, gamma, beta)
}

/// Backbone on a `[1, D, H, W]` input already normalized; returns `[C, d, h, w]`.
pub fn backbone_graph<T: Real>(g: &mut Graph<T>, params: &ParamSet<T>, input: Var) -> Var {
    let k3s1 = ConvSpec { kernel: 3, stride: 1 };
    let stem = conv_norm(g, params, input, "backbone.stem.conv", "backbone.stem.norm", k3s1);
    let mut x = g.relu(stem);
    for stage in 2..=4 {
        for block in 0..BLOCKS_PER_STAGE {
            let pre = format!("backbone.stage{stage}.block{block}");
            let stride = if block == 0 { 2 } else { 1 };
            let spec = ConvSpec { kernel: 3, stride };
            let h = conv_norm(g, params, x, &format!("{pre}.conv1"), &format!("{pre}.norm1"), spec);
            let h = g.relu(h);
            let h = conv_norm(g, params, h, &format!("{pre}.conv2"), &format!("{pre}.norm2"), k3s1);
            let shortcut = if block == 0 {
                let spec = ConvSpec { kernel: 1, stride };
                conv_norm(g, params, x, &format!("{pre}.down"), &format!("{pre}.down_norm"), spec)
            } else {
                x
            };
            let sum = g.add(h, shortcut);
            x = g.relu(sum);
        }
    }
    x
}

/// Normalized network input for a volume, `[1, D, H, W]`.
pub fn input_tensor<T: Real>(cfg: &BackboneConfig, v: &Volume) -> Tensor<T> {
    let [d, h, w] = v.dims();
    let (m, s) = (cfg.input_mean, cfg.input_std);
    Tensor::new(vec![1, d, h, w], v.data.iter().map(|&x| T::of((x - m) / s)).collect())
}

pub fn check_input(v: &Volume) -> Result<()> {
    ensure_arg!(
        v.dims().iter().all(|&d| d >= STRIDE),
        "backbone input must be at least {STRIDE} voxels per axis, got {:?}",
        v.dims()
    );
    Ok(())
}

/// Feature map of `v`. Template and search volumes go through the same
/// parameter set.
pub fn extract_features(params: &ParamSet<f64>, cfg: &BackboneConfig, v: &Volume) -> Result<FeatureMap> {
    check_input(v)?;
    let mut g = Graph::inference();
    let x = g.constant(input_tensor(cfg, v));
    let y = backbone_graph(&mut g, params, x);
    Ok(feature_map_from(g.value(y), &v.grid))
}

pub fn feature_map_from<T: Real>(t: &Tensor<T>, source: &Grid) -> FeatureMap {
    let dims = [t.shape[1], t.shape[2], t.shape[3]];
    FeatureMap {
        channels: t.shape[0],
        grid: source.resized(dims),
        data: t.to_f64_vec(),
    }
}
