//! Central finite-difference checks of the hand-written backward passes.
//!
//! Every parameter tensor is one group. Parameters are jittered away from
//! their initial values first, so zero-initialized layers and unit norm
//! scales do not make gradients vanish trivially. The readout is a fixed
//! random linear functional of the module output.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{grid_cells, init_cat, AttentionMask, CatConfig, Positions};
use crate::backbone::{backbone_graph, init_backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::nn::{Graph, ParamSet, Tensor, Var};
use crate::predictor::{init_predictor, predict_graph};
use crate::volume::Grid;

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-3;
const STEP: f64 = 1e-6;
/// Gradient magnitudes below this are compared absolutely.
const MAGNITUDE_FLOOR: f64 = 1e-6;
const JITTER: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Module {
    Backbone,
    Attention,
    Predictor,
}

impl Module {
    pub const ALL: [Module; 3] = [Module::Backbone, Module::Attention, Module::Predictor];
}

impl fmt::Display for Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Module::Backbone => "backbone",
            Module::Attention => "attention",
            Module::Predictor => "predictor",
        })
    }
}

impl FromStr for Module {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "backbone" => Ok(Module::Backbone),
            "attention" => Ok(Module::Attention),
            "predictor" => Ok(Module::Predictor),
            other => Err(Error::InvalidArgument(format!(
                "unknown module {other:?}; expected backbone, attention or predictor"
            ))),
        }
    }
}

/// Outcome for one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub module: String,
    pub group: String,
    /// Entries compared.
    pub entries: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

fn jitter(params: &mut ParamSet<f64>, rng: &mut ChaCha8Rng) {
    for (_, t) in params.iter_mut() {
        for v in &mut t.data {
            let n: f64 = StandardNormal.sample(rng);
            *v += JITTER * n;
        }
    }
}

fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape, data)
}

/// Compares analytic and central-difference gradients of
/// `readout(build(params))` for every tensor in `params`. Tensors with more
/// than `max_entries` values are checked on a random subset.
pub fn check_groups(
    module: &str,
    params: &ParamSet<f64>,
    max_entries: usize,
    rng: &mut ChaCha8Rng,
    build: impl Fn(&mut Graph<f64>, &ParamSet<f64>) -> Var,
) -> Vec<GroupCheck> {
    let eval = |p: &ParamSet<f64>| {
        let mut g = Graph::new();
        let y = build(&mut g, p);
        g.value(y).item()
    };
    let mut g = Graph::new();
    let y = build(&mut g, params);
    let grads = g.backward(y);

    let mut out = Vec::with_capacity(params.len());
    let mut probe = params.clone();
    for (name, t) in params.iter() {
        let zeros = Tensor::zeros(t.shape.clone());
        let analytic = grads.param(name).unwrap_or(&zeros);
        let picked: Vec<usize> = if t.len() > max_entries {
            let mut idx = sample(rng, t.len(), max_entries).into_vec();
            idx.sort_unstable();
            idx
        } else {
            (0..t.len()).collect()
        };
        let mut worst = 0.0f64;
        for &i in &picked {
            let orig = t.data[i];
            probe.get_mut(name).expect("same names").data[i] = orig + STEP;
            let up = eval(&probe);
            probe.get_mut(name).expect("same names").data[i] = orig - STEP;
            let down = eval(&probe);
            probe.get_mut(name).expect("same names").data[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic.data[i], numeric));
        }
        out.push(GroupCheck {
            module: module.to_string(),
            group: name.to_string(),
            entries: picked.len(),
            max_rel_error: worst,
            passed: worst < TOLERANCE,
        });
    }
    out
}

/// Backbone with toy widths on a random `dims` input.
pub fn check_backbone(seed: u64, dims: [usize; 3], max_entries: usize) -> Result<Vec<GroupCheck>> {
    let cfg = BackboneConfig::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init_backbone::<f64>(&cfg, seed)?;
    jitter(&mut params, &mut rng);
    let input = random_tensor(vec![1, dims[0], dims[1], dims[2]], &mut rng);
    let out_len = cfg.channels() * crate::backbone::feature_dims(dims).iter().product::<usize>();
    let readout: Vec<f64> = (0..out_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Ok(check_groups("backbone", &params, max_entries, &mut rng, |g, p| {
        let x = g.constant(input.clone());
        let y = backbone_graph(g, p, x);
        g.dot(y, readout.clone())
    }))
}

/// Cross-attention transformer with `C = 8`, two heads, three template
/// tokens and a 2×2×2 search grid; every entry is checked.
pub fn check_attention(seed: u64) -> Result<Vec<GroupCheck>> {
    let channels = 8;
    let cfg = CatConfig {
        heads: 2,
        dropout: 0.0,
        ..CatConfig::toy()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init_cat::<f64>(&cfg, channels, &mut rng)?;
    jitter(&mut params, &mut rng);
    let search_dims = [2, 2, 2];
    let cells = grid_cells(search_dims);
    let template_cells = vec![cells[0], cells[3], cells[6]];
    let (l, n) = (template_cells.len(), cells.len());
    let template = random_tensor(vec![l, channels], &mut rng);
    let search = random_tensor(vec![n, channels], &mut rng);
    let row: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    let mask = AttentionMask::from_row(&row, l);
    let positions = Positions::new(&template_cells, search_dims, channels);
    let readout: Vec<f64> = (0..n * channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Ok(check_groups("attention", &params, usize::MAX, &mut rng, |g, p| {
        let t = g.constant(template.clone());
        let s = g.constant(search.clone());
        let y = crate::attention::cat_graph(g, p, &cfg, t, s, &mask, Some(&positions));
        g.dot(y, readout.clone())
    }))
}

/// Both predictor heads on random `[8, 8]` features over a 2×2×2 grid.
pub fn check_predictor(seed: u64) -> Result<Vec<GroupCheck>> {
    let channels = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init_predictor::<f64>(channels, &mut rng);
    jitter(&mut params, &mut rng);
    let grid = Grid {
        dims: [2, 2, 2],
        spacing: [8.0; 3],
        origin: [3.5; 3],
    };
    let features = random_tensor(vec![grid.len(), channels], &mut rng);
    let w_logits: Vec<f64> = (0..grid.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w_coords: Vec<f64> = (0..3 * grid.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Ok(check_groups("predictor", &params, usize::MAX, &mut rng, |g, p| {
        let x = g.constant(features.clone());
        let (logits, coords) = predict_graph(g, p, x, &grid);
        let a = g.dot(logits, w_logits.clone());
        let b = g.dot(coords, w_coords.clone());
        g.add(a, b)
    }))
}

/// Runs the checks of one module. The backbone is checked on an 8³ input
/// and on a 16³ input, where the deepest stage keeps more than one cell.
pub fn run(module: Module, seed: u64) -> Result<Vec<GroupCheck>> {
    match module {
        Module::Backbone => {
            let mut out = check_backbone(seed, [8, 8, 8], 24)?;
            for mut c in check_backbone(seed, [16, 16, 16], 12)? {
                c.group = format!("{} (16^3)", c.group);
                out.push(c);
            }
            Ok(out)
        }
        Module::Attention => check_attention(seed),
        Module::Predictor => check_predictor(seed),
    }
}
