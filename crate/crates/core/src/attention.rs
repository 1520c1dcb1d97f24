//! Sparse template token selection, the registration-derived attention
//! bias, and the cross-attention transformer fusing template and search
//! features.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::error::{ensure_arg, ensure_shape, Result};
use crate::nn::{Graph, Init, ParamSet, Tensor, Var};
use crate::real::Real;
use crate::registration::{apply_affine, AffineTransform};
use crate::volume::{resize_trilinear, Grid, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CatConfig {
    pub heads: usize,
    /// Interleaved template/search rounds before the final search block.
    pub rounds: usize,
    /// Feed-forward hidden width as a multiple of the model width.
    pub ffn_mult: usize,
    pub dropout: f64,
    /// Add sinusoidal cell-position encodings to queries and keys.
    pub positional: bool,
}

impl Default for CatConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl CatConfig {
    pub fn toy() -> Self {
        CatConfig {
            heads: 2,
            rounds: 3,
            ffn_mult: 2,
            dropout: 0.1,
            positional: true,
        }
    }

    pub fn full() -> Self {
        CatConfig {
            heads: 8,
            ..Self::toy()
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        ensure_arg!(
            self.heads >= 1 && channels % self.heads == 0,
            "head count {} must divide width {channels}",
            self.heads
        );
        ensure_arg!(self.ffn_mult >= 1, "feed-forward multiplier must be >= 1");
        ensure_arg!(
            (0.0..1.0).contains(&self.dropout),
            "dropout must be in [0, 1), got {}",
            self.dropout
        );
        Ok(())
    }

    /// Block names in evaluation order.
    pub fn block_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for r in 0..self.rounds {
            names.push(format!("cat.template{r}"));
            names.push(format!("cat.search{r}"));
        }
        names.push("cat.final".to_string());
        names
    }
}

/// Template tokens picked by the prior, with their source cells.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseFeatureSet {
    /// `[L, C]`.
    pub features: Tensor<f64>,
    /// Source cells `(z, y, x)` in the template feature grid, row-major order.
    pub indices: Vec<[usize; 3]>,
    pub grid: Grid,
}

impl SparseFeatureSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Flat indices of cells whose prior exceeds `threshold`; the single
/// largest cell when none does.
pub fn select_cells(prior: &[f64], threshold: f64) -> Vec<usize> {
    let picked: Vec<usize> = (0..prior.len()).filter(|&i| prior[i] > threshold).collect();
    if !picked.is_empty() {
        return picked;
    }
    let mut best = 0;
    for (i, &v) in prior.iter().enumerate() {
        if v > prior[best] {
            best = i;
        }
    }
    vec![best]
}

pub fn check_threshold(threshold: f64) -> Result<()> {
    ensure_arg!(
        (0.0..1.0).contains(&threshold),
        "selection threshold must be in [0, 1), got {threshold}"
    );
    Ok(())
}

/// Prior resized onto the template feature grid.
pub fn coarse_prior(prior: &Volume, feature_dims: [usize; 3]) -> Result<Volume> {
    resize_trilinear(prior, feature_dims)
}

pub fn sparse_select(features: &FeatureMap, prior: &Volume, threshold: f64) -> Result<SparseFeatureSet> {
    check_threshold(threshold)?;
    let coarse = coarse_prior(prior, features.dims())?;
    let cells = select_cells(&coarse.data, threshold);
    let c = features.channels;
    let mut data = Vec::with_capacity(cells.len() * c);
    for &i in &cells {
        data.extend(features.cell(i));
    }
    Ok(SparseFeatureSet {
        features: Tensor::new(vec![cells.len(), c], data),
        indices: cells.iter().map(|&i| features.grid.unravel(i)).collect(),
        grid: features.grid,
    })
}

/// Additive attention bias of the template line: every one of the `rows`
/// rows holds the registered prior flattened over the search feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    pub rows: usize,
    pub cols: usize,
    pub bias: Vec<f64>,
}

impl AttentionMask {
    /// `ones(rows) ⊗ rowᵀ`.
    pub fn from_row(row: &[f64], rows: usize) -> Self {
        let mut bias = Vec::with_capacity(rows * row.len());
        for _ in 0..rows {
            bias.extend_from_slice(row);
        }
        AttentionMask {
            rows,
            cols: row.len(),
            bias,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        AttentionMask {
            rows,
            cols,
            bias: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.bias[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transposed(&self) -> AttentionMask {
        let mut bias = vec![0.0; self.bias.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                bias[c * self.rows + r] = self.bias[r * self.cols + c];
            }
        }
        AttentionMask {
            rows: self.cols,
            cols: self.rows,
            bias,
        }
    }

    pub fn cast<T: Real>(&self) -> Vec<T> {
        self.bias.iter().map(|&v| T::of(v)).collect()
    }
}

/// Registered prior on the search grid, flattened over the search feature
/// cells.
pub fn registered_prior(
    template_prior: &Volume,
    transform: &AffineTransform,
    search: &Grid,
    feature_dims: [usize; 3],
) -> Result<Vec<f64>> {
    let warped = apply_affine(template_prior, transform, search)?;
    Ok(resize_trilinear(&warped, feature_dims)?.data)
}

pub fn build_raam_mask(
    template_prior: &Volume,
    transform: &AffineTransform,
    search: &Grid,
    feature_dims: [usize; 3],
    rows: usize,
) -> Result<AttentionMask> {
    ensure_arg!(rows >= 1, "attention mask needs at least one row");
    ensure_arg!(
        feature_dims.iter().zip(&search.dims).all(|(f, s)| f <= s && *f >= 1),
        "feature dims {feature_dims:?} do not fit the search grid {:?}",
        search.dims
    );
    let row = registered_prior(template_prior, transform, search, feature_dims)?;
    Ok(AttentionMask::from_row(&row, rows))
}

/// Sinusoidal encoding of cell positions, `[cells.len(), channels]`.
///
/// Each axis gets `channels / 3` channels (rounded down to even), laid out
/// `z`, `y`, `x`; leftover channels stay zero.
pub fn positional_encoding(cells: &[[usize; 3]], channels: usize) -> Tensor<f64> {
    let per_axis = (channels / 3) & !1;
    let mut out = vec![0.0; cells.len() * channels];
    for (r, cell) in cells.iter().enumerate() {
        for (axis, &pos) in cell.iter().enumerate() {
            for k in 0..per_axis / 2 {
                let freq = 1.0 / 10000f64.powf(2.0 * k as f64 / per_axis as f64);
                let base = r * channels + axis * per_axis + 2 * k;
                out[base] = (pos as f64 * freq).sin();
                out[base + 1] = (pos as f64 * freq).cos();
            }
        }
    }
    Tensor::new(vec![cells.len(), channels], out)
}

pub fn grid_cells(dims: [usize; 3]) -> Vec<[usize; 3]> {
    let mut out = Vec::with_capacity(dims.iter().product());
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                out.push([z, y, x]);
            }
        }
    }
    out
}

fn add_linear<T: Real>(p: &mut ParamSet<T>, init: &mut Init, name: &str, fin: usize, fout: usize, bias: bool) {
    p.insert(format!("{name}.w"), init.glorot(vec![fin, fout], fin, fout));
    if bias {
        p.insert(format!("{name}.b"), Tensor::zeros(vec![fout]));
    }
}

fn add_layer_norm<T: Real>(p: &mut ParamSet<T>, name: &str, c: usize) {
    p.insert(format!("{name}.gamma"), Tensor::filled(vec![c], T::one()));
    p.insert(format!("{name}.beta"), Tensor::zeros(vec![c]));
}

/// Parameters of one cross-attention block under `prefix`.
pub fn init_block<T: Real>(p: &mut ParamSet<T>, init: &mut Init, prefix: &str, channels: usize, ffn_mult: usize) {
    for proj in ["q", "k", "v"] {
        add_linear(p, init, &format!("{prefix}.{proj}"), channels, channels, false);
    }
    add_linear(p, init, &format!("{prefix}.out"), channels, channels, true);
    add_layer_norm(p, &format!("{prefix}.norm1"), channels);
    add_linear(p, init, &format!("{prefix}.ffn1"), channels, ffn_mult * channels, true);
    add_linear(p, init, &format!("{prefix}.ffn2"), ffn_mult * channels, channels, true);
    add_layer_norm(p, &format!("{prefix}.norm2"), channels);
}

pub fn init_cat<T: Real>(cfg: &CatConfig, channels: usize, rng: &mut ChaCha8Rng) -> Result<ParamSet<T>> {
    cfg.validate(channels)?;
    let mut p = ParamSet::new();
    let mut init = Init { rng };
    for name in cfg.block_names() {
        init_block(&mut p, &mut init, &name, channels, cfg.ffn_mult);
    }
    Ok(p)
}

fn linear_named<T: Real>(g: &mut Graph<T>, params: &ParamSet<T>, name: &str, x: Var) -> Var {
    let w = g.param(params, &format!("{name}.w"));
    match params.get(&format!("{name}.b")) {
        Some(_) => {
            let b = g.param(params, &format!("{name}.b"));
            g.linear(x, w, b)
        }
        None => g.matmul(x, w),
    }
}

fn layer_norm_named<T: Real>(g: &mut Graph<T>, params: &ParamSet<T>, name: &str, x: Var) -> Var {
    let gamma = g.param(params, &format!("{name}.gamma"));
    let beta = g.param(params, &format!("{name}.beta"));
    g.layer_norm(x, gamma, beta)
}

/// Inputs of one cross-attention block.
pub struct BlockInput<'a, T> {
    pub query: Var,
    pub key_value: Var,
    pub query_pos: Option<Var>,
    pub key_pos: Option<Var>,
    /// `[Nq, Nkv]` bias added to the scaled logits.
    pub bias: Option<&'a [T]>,
}

/// Post-norm cross-attention block: attention with residual and norm, then
/// a two-layer feed-forward with residual and norm.
pub fn cross_attention_graph<T: Real>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    prefix: &str,
    input: BlockInput<'_, T>,
    heads: usize,
    dropout: f64,
) -> Var {
    let q_in = match input.query_pos {
        Some(p) => g.add(input.query, p),
        None => input.query,
    };
    let k_in = match input.key_pos {
        Some(p) => g.add(input.key_value, p),
        None => input.key_value,
    };
    let q = linear_named(g, params, &format!("{prefix}.q"), q_in);
    let k = linear_named(g, params, &format!("{prefix}.k"), k_in);
    let v = linear_named(g, params, &format!("{prefix}.v"), input.key_value);
    let att = g.attention(q, k, v, input.bias, heads);
    let att = linear_named(g, params, &format!("{prefix}.out"), att);
    let att = g.dropout(att, dropout);
    let x = g.add(input.query, att);
    let x = layer_norm_named(g, params, &format!("{prefix}.norm1"), x);
    let h = linear_named(g, params, &format!("{prefix}.ffn1"), x);
    let h = g.relu(h);
    let h = linear_named(g, params, &format!("{prefix}.ffn2"), h);
    let h = g.dropout(h, dropout);
    let y = g.add(x, h);
    layer_norm_named(g, params, &format!("{prefix}.norm2"), y)
}

/// Evaluates one block on concrete inputs, without positional encodings.
pub fn cross_attention_block(
    query: &Tensor<f64>,
    key_value: &Tensor<f64>,
    bias: Option<&[f64]>,
    params: &ParamSet<f64>,
    prefix: &str,
    heads: usize,
) -> Result<Tensor<f64>> {
    ensure_shape!(
        query.shape.len() == 2 && key_value.shape.len() == 2 && query.cols() == key_value.cols(),
        "block inputs must be [N, C] with equal C, got {:?} and {:?}",
        query.shape,
        key_value.shape
    );
    if let Some(b) = bias {
        ensure_shape!(
            b.len() == query.rows() * key_value.rows(),
            "bias must be {}x{}, got {} entries",
            query.rows(),
            key_value.rows(),
            b.len()
        );
    }
    ensure_arg!(
        heads >= 1 && query.cols() % heads == 0,
        "head count {heads} must divide width {}",
        query.cols()
    );
    let mut g = Graph::inference();
    let q = g.constant(query.clone());
    let kv = g.constant(key_value.clone());
    let input = BlockInput {
        query: q,
        key_value: kv,
        query_pos: None,
        key_pos: None,
        bias,
    };
    let y = cross_attention_graph(&mut g, params, prefix, input, heads, 0.0);
    Ok(g.value(y).clone())
}

/// Positional encodings of both token sets, when enabled.
pub struct Positions<T> {
    pub template: Tensor<T>,
    pub search: Tensor<T>,
}

impl<T: Real> Positions<T> {
    pub fn new(template_cells: &[[usize; 3]], search_dims: [usize; 3], channels: usize) -> Self {
        Positions {
            template: positional_encoding(template_cells, channels).cast(),
            search: positional_encoding(&grid_cells(search_dims), channels).cast(),
        }
    }
}

/// Fused search features `[N, C]` from template tokens `[L, C]` and search
/// tokens `[N, C]`. `mask` is the `[L, N]` template-line bias; the search
/// line uses its transpose.
pub fn cat_graph<T: Real>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    cfg: &CatConfig,
    template: Var,
    search: Var,
    mask: &AttentionMask,
    positions: Option<&Positions<T>>,
) -> Var {
    let bias_t: Vec<T> = mask.cast();
    let bias_s: Vec<T> = mask.transposed().cast();
    let (pos_t, pos_s) = match positions {
        Some(p) => (Some(g.constant(p.template.clone())), Some(g.constant(p.search.clone()))),
        None => (None, None),
    };
    let (mut t, mut s) = (template, search);
    for r in 0..cfg.rounds {
        let t_next = cross_attention_graph(
            g,
            params,
            &format!("cat.template{r}"),
            BlockInput {
                query: t,
                key_value: s,
                query_pos: pos_t,
                key_pos: pos_s,
                bias: Some(&bias_t),
            },
            cfg.heads,
            cfg.dropout,
        );
        let s_next = cross_attention_graph(
            g,
            params,
            &format!("cat.search{r}"),
            BlockInput {
                query: s,
                key_value: t,
                query_pos: pos_s,
                key_pos: pos_t,
                bias: Some(&bias_s),
            },
            cfg.heads,
            cfg.dropout,
        );
        t = t_next;
        s = s_next;
    }
    cross_attention_graph(
        g,
        params,
        "cat.final",
        BlockInput {
            query: s,
            key_value: t,
            query_pos: pos_s,
            key_pos: pos_t,
            bias: Some(&bias_s),
        },
        cfg.heads,
        cfg.dropout,
    )
}

/// Inference-time fusion on concrete features.
pub fn cat_forward(
    sparse: &SparseFeatureSet,
    search: &FeatureMap,
    mask: &AttentionMask,
    params: &ParamSet<f64>,
    cfg: &CatConfig,
) -> Result<Tensor<f64>> {
    cfg.validate(search.channels)?;
    ensure_shape!(
        mask.rows == sparse.len() && mask.cols == search.cells(),
        "mask is {}x{}, expected {}x{}",
        mask.rows,
        mask.cols,
        sparse.len(),
        search.cells()
    );
    ensure_shape!(
        sparse.features.cols() == search.channels,
        "template width {} differs from search width {}",
        sparse.features.cols(),
        search.channels
    );
    let mut g = Graph::inference();
    let t = g.constant(sparse.features.clone());
    let s = g.constant(search.tokens());
    let pos = cfg
        .positional
        .then(|| Positions::new(&sparse.indices, search.dims(), search.channels));
    let y = cat_graph(&mut g, params, cfg, t, s, mask, pos.as_ref());
    Ok(g.value(y).clone())
}
