//! Center prediction heads, global regression and the two training losses.

use rand_chacha::ChaCha8Rng;

use crate::error::{ensure_arg, ensure_shape, Error, Result};
use crate::nn::{Graph, Init, ParamSet, Tensor, Var};
use crate::real::Real;
use crate::volume::{gaussian_map, resize_trilinear, Grid, Vec3};

/// Labels at or above this value count as the positive (`y = 1`) branch.
pub const POSITIVE_LABEL: f64 = 1.0 - 1e-6;
/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

pub const FOCAL_ALPHA: f64 = 2.0;
pub const FOCAL_BETA: f64 = 2.0;

const LAYERS: usize = 3;

/// Per-cell head outputs on the search feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorOutput {
    /// One logit per cell, row-major `(z, y, x)`.
    pub logits: Vec<f64>,
    /// Predicted world center per cell, `[x, y, z]` mm.
    pub coords: Vec<Vec3>,
}

impl PredictorOutput {
    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    /// Softmax of the logits over all cells.
    pub fn heatmap(&self) -> Vec<f64> {
        softmax(&self.logits)
    }
}

/// Initializes both three-layer MLP heads for `channels`-wide features.
/// The last regression layer starts at zero so predictions start on the
/// cell-center grid.
pub fn init_predictor<T: Real>(channels: usize, rng: &mut ChaCha8Rng) -> ParamSet<T> {
    let mut p = ParamSet::new();
    let mut init = Init { rng };
    for (head, out) in [("cls", 1), ("reg", 3)] {
        for l in 0..LAYERS {
            let fout = if l + 1 == LAYERS { out } else { channels };
            let w = if head == "reg" && l + 1 == LAYERS {
                Tensor::zeros(vec![channels, fout])
            } else if l + 1 == LAYERS {
                init.glorot(vec![channels, fout], channels, fout)
            } else {
                init.he(vec![channels, fout], channels)
            };
            p.insert(format!("pred.{head}.{l}.w"), w);
            p.insert(format!("pred.{head}.{l}.b"), Tensor::zeros(vec![fout]));
        }
    }
    p
}

fn mlp<T: Real>(g: &mut Graph<T>, params: &ParamSet<T>, head: &str, x: Var) -> Var {
    let mut h = x;
    for l in 0..LAYERS {
        let w = g.param(params, &format!("pred.{head}.{l}.w"));
        let b = g.param(params, &format!("pred.{head}.{l}.b"));
        h = g.linear(h, w, b);
        if l + 1 < LAYERS {
            h = g.relu(h);
        }
    }
    h
}

/// Cell-center world coordinates of a feature grid, row-major.
pub fn anchor_grid(grid: &Grid) -> Vec<Vec3> {
    let [d, h, w] = grid.dims;
    let mut out = Vec::with_capacity(grid.len());
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                out.push(grid.position(z, y, x));
            }
        }
    }
    out
}

/// Runs both heads on fused features `[N, C]`.
///
/// Returns `(logits [N], coords [N, 3])`; coords are `anchor + offset ·
/// cell size`, so one unit of regression output spans one feature cell.
pub fn predict_graph<T: Real>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    features: Var,
    feature_grid: &Grid,
) -> (Var, Var) {
    let n = g.value(features).rows();
    assert_eq!(n, feature_grid.len(), "predictor input does not match the feature grid");
    let cls = mlp(g, params, "cls", features);
    let logits = g.reshape(cls, vec![n]);
    let reg = mlp(g, params, "reg", features);
    let mut mul = Vec::with_capacity(3 * n);
    let mut add = Vec::with_capacity(3 * n);
    for a in anchor_grid(feature_grid) {
        for i in 0..3 {
            mul.push(T::of(feature_grid.spacing[i]));
            add.push(T::of(a[i]));
        }
    }
    let coords = g.mul_add(reg, mul, &add);
    (logits, coords)
}

/// Pure evaluation of both heads on `[N, C]` features.
pub fn predict(features: &Tensor<f64>, params: &ParamSet<f64>, feature_grid: &Grid) -> Result<PredictorOutput> {
    ensure_shape!(
        features.shape.len() == 2 && features.rows() == feature_grid.len(),
        "predictor expects [{}, C] features, got {:?}",
        feature_grid.len(),
        features.shape
    );
    let c = params
        .get("pred.cls.0.w")
        .ok_or_else(|| Error::InvalidArgument("missing predictor parameters".into()))?
        .rows();
    ensure_shape!(features.cols() == c, "predictor expects width {c}, got {}", features.cols());
    let mut g = Graph::new();
    let x = g.constant(features.clone());
    let (logits, coords) = predict_graph(&mut g, params, x, feature_grid);
    Ok(output_from_graph(&g, logits, coords))
}

pub fn output_from_graph<T: Real>(g: &Graph<T>, logits: Var, coords: Var) -> PredictorOutput {
    let c = g.value(coords).to_f64_vec();
    PredictorOutput {
        logits: g.value(logits).to_f64_vec(),
        coords: c.chunks(3).map(|v| [v[0], v[1], v[2]]).collect(),
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut w = logits.to_vec();
    crate::nn::softmax_in_place(&mut w);
    w
}

/// Softmax-weighted average of the per-cell coordinates.
pub fn global_regress(out: &PredictorOutput) -> Vec3 {
    let w = out.heatmap();
    let mut c = [0.0; 3];
    for (wi, p) in w.iter().zip(&out.coords) {
        for i in 0..3 {
            c[i] += wi * p[i];
        }
    }
    c
}

/// Coordinates of the highest-scoring cell.
pub fn argmax_decode(out: &PredictorOutput) -> Vec3 {
    let mut best = 0;
    for (i, &l) in out.logits.iter().enumerate() {
        if l > out.logits[best] {
            best = i;
        }
    }
    out.coords[best]
}

/// Graph form of [`global_regress`]: returns the `[1, 3]` predicted center.
pub fn global_regress_graph<T: Real>(g: &mut Graph<T>, logits: Var, coords: Var) -> Var {
    let n = g.value(logits).len();
    let row = g.reshape(logits, vec![1, n]);
    let w = g.softmax_rows(row);
    g.matmul(w, coords)
}

/// Sum of per-axis absolute errors, in mm.
pub fn loss_regression(pred: Vec3, truth: Vec3) -> f64 {
    (0..3).map(|i| (pred[i] - truth[i]).abs()).sum()
}

/// Focal loss of one cell, with `p` already clamped.
fn focal_term(p: f64, y: f64, alpha: f64, beta: f64) -> f64 {
    if y >= POSITIVE_LABEL {
        -(1.0 - p).powf(alpha) * p.ln()
    } else {
        -(1.0 - y).powf(beta) * p.powf(alpha) * (1.0 - p).ln()
    }
}

/// Heatmap focal loss over probabilities `probs` and soft labels `labels`.
pub fn loss_focal(probs: &[f64], labels: &[f64]) -> Result<f64> {
    loss_focal_with(probs, labels, FOCAL_ALPHA, FOCAL_BETA)
}

pub fn loss_focal_with(probs: &[f64], labels: &[f64], alpha: f64, beta: f64) -> Result<f64> {
    ensure_shape!(
        probs.len() == labels.len(),
        "focal loss: {} probabilities vs {} labels",
        probs.len(),
        labels.len()
    );
    let mut total = 0.0;
    for (&p, &y) in probs.iter().zip(labels) {
        ensure_arg!(p > 0.0 && p < 1.0, "focal loss needs probabilities in (0, 1), got {p}");
        ensure_arg!((0.0..=1.0).contains(&y), "focal loss needs labels in [0, 1], got {y}");
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        total += focal_term(p, y, alpha, beta);
    }
    Ok(total)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Focal loss of one cell given its logit, and the derivative w.r.t. the logit.
pub fn focal_from_logit(z: f64, y: f64, alpha: f64, beta: f64) -> (f64, f64) {
    let raw = sigmoid(z);
    let p = raw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let loss = focal_term(p, y, alpha, beta);
    if p != raw {
        return (loss, 0.0);
    }
    let dl_dp = if y >= POSITIVE_LABEL {
        alpha * (1.0 - p).powf(alpha - 1.0) * p.ln() - (1.0 - p).powf(alpha) / p
    } else {
        let w = (1.0 - y).powf(beta);
        -w * (alpha * p.powf(alpha - 1.0) * (1.0 - p).ln() - p.powf(alpha) / (1.0 - p))
    };
    (loss, dl_dp * p * (1.0 - p))
}

/// Soft classification target on the search feature grid: the Gaussian prior
/// at full resolution, resized to `feature_dims`, min-max normalized.
pub fn make_label(center: Vec3, radius: Vec3, search: &Grid, feature_dims: [usize; 3]) -> Result<Vec<f64>> {
    let full = gaussian_map(center, radius, search)?;
    let coarse = resize_trilinear(&full, feature_dims)?;
    let (lo, hi) = (coarse.min(), coarse.max());
    if !(hi - lo > 0.0) {
        return Err(Error::InvalidLabel(format!(
            "label map is constant ({hi}) on a {feature_dims:?} grid"
        )));
    }
    Ok(coarse.data.iter().map(|&v| (v - lo) / (hi - lo)).collect())
}
