use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self, cat_graph, select_cells, AttentionMask, CatConfig, Positions};
use crate::backbone::{self, backbone_graph, BackboneConfig};
use crate::error::{ensure_arg, Result};
use crate::nn::{Graph, ParamSet, Tensor, Var};
use crate::predictor::{self, global_regress_graph, predict_graph, PredictorOutput};
use crate::real::Real;
use crate::registration::RegistrationOptions;
use crate::volume::{Grid, Vec3, Volume};

/// Architecture and inference settings stored with every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub cat: CatConfig,
    /// Template cells whose resized prior exceeds this become tokens.
    pub threshold: f64,
    /// Weight of the focal loss against the regression loss.
    pub focal_weight: f64,
    /// Isotropic spacing volumes are brought to before the network, mm.
    pub spacing_mm: f64,
    pub registration: RegistrationOptions,
    /// Optional `[D, H, W]` window around the lesion (template) and the
    /// registered prior (search); full volumes when absent.
    pub crop: Option<[usize; 3]>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    pub fn toy() -> Self {
        ModelConfig {
            backbone: BackboneConfig::toy(),
            cat: CatConfig::toy(),
            threshold: 0.7,
            focal_weight: 1.0,
            spacing_mm: 1.0,
            registration: RegistrationOptions::default(),
            crop: None,
        }
    }

    pub fn full() -> Self {
        ModelConfig {
            backbone: BackboneConfig::full(),
            cat: CatConfig::full(),
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.cat.validate(self.backbone.channels())?;
        attention::check_threshold(self.threshold)?;
        ensure_arg!(
            self.focal_weight >= 0.0 && self.focal_weight.is_finite(),
            "focal weight must be >= 0"
        );
        ensure_arg!(self.spacing_mm > 0.0, "spacing must be positive");
        if let Some(c) = self.crop {
            ensure_arg!(
                c.iter().all(|&d| d >= backbone::STRIDE),
                "crop must be at least {} voxels per axis",
                backbone::STRIDE
            );
        }
        Ok(())
    }
}

/// Module switches used by the ablation study. Everything enabled is the
/// full model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    /// Thresholded token selection; when off every template cell is a token.
    pub sparse_selection: bool,
    /// Registration-derived attention bias; when off the bias is zero.
    pub anatomical_mask: bool,
    /// Softmax-weighted decoding; when off the best cell's coordinate is used.
    pub global_regression: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            sparse_selection: true,
            anatomical_mask: true,
            global_regression: true,
        }
    }
}

impl Ablation {
    /// Parses `sss`, `raam` or `globalreg` into the model with that module off.
    pub fn without(name: &str) -> Result<Self> {
        let mut a = Ablation::default();
        match name {
            "sss" => a.sparse_selection = false,
            "raam" => a.anatomical_mask = false,
            "globalreg" => a.global_regression = false,
            other => {
                return Err(crate::Error::InvalidArgument(format!(
                    "unknown ablation {other:?}; expected sss, raam or globalreg"
                )))
            }
        }
        Ok(a)
    }
}

/// Ground truth of a training or evaluation pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub center: Vec3,
    pub radius: Vec3,
    /// Soft label over the search feature cells.
    pub label: Vec<f64>,
}

/// Everything the network needs for one directed pair, precomputed once.
#[derive(Debug, Clone)]
pub struct PairData {
    pub id: String,
    pub template: Volume,
    pub search: Volume,
    pub template_features: Grid,
    pub search_features: Grid,
    /// Template prior resized onto the template feature cells.
    pub template_prior: Vec<f64>,
    /// Registered prior over the search feature cells.
    pub mask_row: Vec<f64>,
    pub registration_cost: f64,
    pub target: Option<Target>,
}

impl PairData {
    pub fn tokens(&self, threshold: f64, ablation: &Ablation) -> Vec<usize> {
        if ablation.sparse_selection {
            select_cells(&self.template_prior, threshold)
        } else {
            (0..self.template_prior.len()).collect()
        }
    }
}

/// Graph handles of one forward pass.
pub struct Forward {
    pub logits: Var,
    pub coords: Var,
    /// `[1, 3]` softmax-weighted center.
    pub center: Var,
    pub tokens: usize,
}

/// Learnable state plus its configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackerModel {
    pub config: ModelConfig,
    pub params: ParamSet<f64>,
}

impl TrackerModel {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = backbone::init_backbone(&config.backbone, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        params.extend(attention::init_cat(&config.cat, config.backbone.channels(), &mut rng)?);
        rng.set_stream(2);
        params.extend(predictor::init_predictor(config.backbone.channels(), &mut rng));
        Ok(TrackerModel { config, params })
    }

    /// Builds the network for `pair` into `g`.
    pub fn forward<T: Real>(
        config: &ModelConfig,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        pair: &PairData,
        threshold: f64,
        ablation: &Ablation,
    ) -> Forward {
        let c = config.backbone.channels();
        let xt = g.constant(backbone::input_tensor(&config.backbone, &pair.template));
        let xs = g.constant(backbone::input_tensor(&config.backbone, &pair.search));
        let ft = backbone_graph(g, params, xt);
        let fs = backbone_graph(g, params, xs);
        let (nt, ns) = (pair.template_features.len(), pair.search_features.len());
        let ft = g.reshape(ft, vec![c, nt]);
        let ft = g.transpose(ft);
        let fs = g.reshape(fs, vec![c, ns]);
        let fs = g.transpose(fs);
        let cells = pair.tokens(threshold, ablation);
        let tokens = g.gather_rows(ft, &cells);
        let mask = if ablation.anatomical_mask {
            AttentionMask::from_row(&pair.mask_row, cells.len())
        } else {
            AttentionMask::zeros(cells.len(), ns)
        };
        let positions = config.cat.positional.then(|| {
            let idx: Vec<[usize; 3]> = cells.iter().map(|&i| pair.template_features.unravel(i)).collect();
            Positions::new(&idx, pair.search_features.dims, c)
        });
        let fused = cat_graph(g, params, &config.cat, tokens, fs, &mask, positions.as_ref());
        let (logits, coords) = predict_graph(g, params, fused, &pair.search_features);
        let center = global_regress_graph(g, logits, coords);
        Forward {
            logits,
            coords,
            center,
            tokens: cells.len(),
        }
    }

    /// Total loss `L_r + λ·L_c` of a forward pass; returns `(total, L_r, L_c)`.
    pub fn loss<T: Real>(config: &ModelConfig, g: &mut Graph<T>, f: &Forward, target: &Target) -> (Var, Var, Var) {
        let truth: Vec<T> = target.center.iter().map(|&v| T::of(v)).collect();
        let lr = g.l1_to(f.center, &truth);
        let label: Vec<T> = target.label.iter().map(|&v| T::of(v)).collect();
        let lc = g.focal(f.logits, &label, predictor::FOCAL_ALPHA, predictor::FOCAL_BETA);
        let weighted = g.scale(lc, T::of(config.focal_weight));
        let total = g.add(lr, weighted);
        (total, lr, lc)
    }

    /// Head outputs for `pair` in 64-bit precision.
    pub fn infer(&self, pair: &PairData, threshold: f64, ablation: &Ablation) -> (PredictorOutput, usize) {
        let mut g = Graph::inference();
        let f = Self::forward(&self.config, &mut g, &self.params, pair, threshold, ablation);
        (predictor::output_from_graph(&g, f.logits, f.coords), f.tokens)
    }

    /// Center estimate for `pair`.
    pub fn predict_center(&self, pair: &PairData, threshold: f64, ablation: &Ablation) -> (Vec3, PredictorOutput, usize) {
        let (out, tokens) = self.infer(pair, threshold, ablation);
        let center = if ablation.global_regression {
            predictor::global_regress(&out)
        } else {
            predictor::argmax_decode(&out)
        };
        (center, out, tokens)
    }

    /// `(L, L_r, L_c)` of a labelled pair in 64-bit precision, without dropout.
    pub fn evaluate_loss(&self, pair: &PairData) -> Result<(f64, f64, f64)> {
        let target = pair
            .target
            .as_ref()
            .ok_or_else(|| crate::Error::InvalidArgument(format!("pair {} has no ground truth", pair.id)))?;
        let mut g = Graph::inference();
        let f = Self::forward(&self.config, &mut g, &self.params, pair, self.config.threshold, &Ablation::default());
        let (l, lr, lc) = Self::loss(&self.config, &mut g, &f, target);
        Ok((g.value(l).item(), g.value(lr).item(), g.value(lc).item()))
    }
}

/// Parameter tensor shapes by name, for checkpoint validation.
pub fn expected_shapes(config: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>> {
    let m = TrackerModel::init(config.clone(), 0)?;
    Ok(m.params.iter().map(|(n, t)| (n.to_string(), t.shape.clone())).collect())
}

pub(crate) fn tensor_shape_ok(t: &Tensor<f64>, shape: &[usize]) -> bool {
    t.shape == shape
}
