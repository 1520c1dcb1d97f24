//! Catalogue of small worked examples with hand-derived expectations.
//! Shared by the `worked_examples` test and the acceptance runner.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tlt_core::attention::{
    cat_forward, coarse_prior, grid_cells, init_cat, registered_prior, select_cells, sparse_select,
    AttentionMask, CatConfig, SparseFeatureSet,
};
use tlt_core::backbone::{extract_features, feature_dims, init_backbone, BackboneConfig, FeatureMap};
use tlt_core::metrics::{cpm, med, CpmMode, EvalRecord, MetricsReport};
use tlt_core::nn::{multi_head_attention, Graph, ParamSet, Tensor};
use tlt_core::predictor::{
    anchor_grid, global_regress, init_predictor, loss_focal, loss_regression, make_label, predict,
    PredictorOutput,
};
use tlt_core::registration::{
    apply_affine, euler_rotation, register_affine, AffineTransform, RegistrationOptions,
};
use tlt_core::synth::{gen_pair, gen_pair_with_affine, SynthConfig};
use tlt_core::volume::{gaussian_map, resize_trilinear, Direction, Grid, Vec3, Volume};

pub type Outcome = Result<(), String>;

pub struct Example {
    pub name: &'static str,
    pub run: fn() -> Outcome,
}

fn ensure(cond: bool, msg: impl Into<String>) -> Outcome {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn close(got: f64, want: f64, tol: f64, what: &str) -> Outcome {
    ensure(
        (got - want).abs() <= tol,
        format!("{what}: got {got}, want {want} (tol {tol})"),
    )
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

pub fn catalogue() -> Vec<Example> {
    macro_rules! ex {
        ($($f:ident),* $(,)?) => { vec![$(Example { name: stringify!($f), run: $f }),*] };
    }
    ex![
        prior_peak_is_one,
        prior_isotropic_value,
        prior_anisotropic_value,
        resize_constant,
        resize_identity_is_bitwise,
        resize_ramp_is_monotone,
        world_to_voxel_examples,
        synth_is_deterministic,
        synth_identity_warp,
        synth_translation_moves_center,
        register_identity,
        register_translation,
        register_rotation,
        warp_identity,
        warp_moves_blob_centroid,
        warp_moves_prior_peak,
        backbone_output_shape,
        backbone_odd_input_shape,
        backbone_init_is_deterministic,
        backbone_zero_input_is_finite,
        backbone_is_pure,
        backbone_shift_moves_features_one_cell,
        selection_threshold,
        selection_all_cells_at_zero,
        selection_argmax_fallback,
        mask_outer_product,
        mask_peak_at_lesion_cell,
        mask_is_rank_one,
        attention_uniform_without_logits,
        attention_saturated_bias_is_one_hot,
        attention_row_shift_invariance,
        fusion_shape_and_finiteness,
        fusion_ignores_constant_mask,
        predictor_zero_offsets_give_cell_centers,
        predictor_random_params_are_finite,
        global_regression_peaked,
        global_regression_uniform,
        global_regression_shift_invariance,
        regression_loss_zero,
        regression_loss_hand_value,
        regression_loss_gradient_is_sign,
        label_peak_at_cell_center,
        label_range_and_unique_max,
        label_argmax_is_nearest_cell,
        focal_positive_hand_value,
        focal_perfect_prediction,
        focal_soft_hand_value,
        cpm_fixed_threshold_hit,
        cpm_radius_caps_threshold,
        cpm_three_records,
        med_unit_offset,
        med_identity,
        med_population_std,
        report_oracle,
        report_constant_offset,
    ]
}

// ---- prior map --------------------------------------------------------

fn prior_peak_is_one() -> Outcome {
    let g = Grid::unit([9, 9, 9]);
    for r in [0.5, 3.0, 40.0] {
        let m = ok(gaussian_map([4.0, 4.0, 4.0], [r; 3], &g))?;
        ensure(m.at(4, 4, 4) == 1.0, format!("peak {} for radius {r}", m.at(4, 4, 4)))?;
    }
    Ok(())
}

fn prior_isotropic_value() -> Outcome {
    let g = Grid::unit([9, 9, 9]);
    let m = ok(gaussian_map([4.0, 4.0, 4.0], [2.0; 3], &g))?;
    close(m.at(4, 4, 6), (-1.0f64 / 12.0).exp(), 1e-9, "offset (2,0,0)")?;
    close(m.at(4, 4, 6), 0.92004, 1e-5, "rounded value")
}

fn prior_anisotropic_value() -> Outcome {
    let g = Grid::unit([9, 9, 9]);
    let m = ok(gaussian_map([4.0, 4.0, 4.0], [1.0, 2.0, 3.0], &g))?;
    close(m.at(4, 4, 5), (-1.0f64 / 56.0).exp(), 1e-9, "offset (1,0,0)")?;
    close(m.at(4, 4, 5), 0.98230, 1e-5, "rounded value")
}

// ---- resampling and geometry ------------------------------------------

fn resize_constant() -> Outcome {
    let v = Volume::filled(Grid::unit([5, 6, 7]), 0.5);
    let r = ok(resize_trilinear(&v, [9, 3, 14]))?;
    ensure(r.data.iter().all(|&x| (x - 0.5).abs() < 1e-15), "constant not preserved")
}

fn resize_identity_is_bitwise() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let v = Volume::from_fn(Grid::unit([4, 5, 6]), |_| rng.gen());
    let r = ok(resize_trilinear(&v, [4, 5, 6]))?;
    ensure(r.data == v.data, "identity resize changed values")
}

fn resize_ramp_is_monotone() -> Outcome {
    let v = Volume::from_fn(Grid::unit([3, 3, 8]), |p| p[0] / 7.0);
    let r = ok(resize_trilinear(&v, [3, 3, 16]))?;
    for z in 0..3 {
        for y in 0..3 {
            for x in 1..16 {
                ensure(r.at(z, y, x) >= r.at(z, y, x - 1), "ramp decreased along x")?;
            }
        }
    }
    Ok(())
}

fn world_to_voxel_examples() -> Outcome {
    let unit = Grid::unit([8, 8, 8]);
    ensure(unit.mm_to_voxel(unit.origin) == [0.0; 3], "origin")?;
    ensure(unit.mm_to_voxel([3.0, 4.0, 5.0]) == [3.0, 4.0, 5.0], "unit spacing")?;
    let g = ok(Grid::new([8, 8, 8], [2.0; 3], [1.0; 3]))?;
    ensure(g.mm_to_voxel([5.0; 3]) == [2.0; 3], "spacing 2, origin 1")
}

// ---- synthetic data ---------------------------------------------------

fn synth_is_deterministic() -> Outcome {
    let cfg = SynthConfig::default();
    let a = ok(gen_pair(&cfg, 7))?;
    let b = ok(gen_pair(&cfg, 7))?;
    ensure(a.template == b.template && a.search == b.search, "volumes differ")?;
    ensure(a.pair == b.pair, "ground truth differs")
}

fn still_config() -> SynthConfig {
    SynthConfig {
        max_rotation_deg: 0.0,
        max_translation_mm: 0.0,
        max_scale_delta: 0.0,
        noise_sigma: 0.0,
        radius_change: [1.0, 1.0],
        ..SynthConfig::default()
    }
}

fn synth_identity_warp() -> Outcome {
    let cfg = SynthConfig {
        lesion_contrast: 0.0,
        ..still_config()
    };
    let p = ok(gen_pair(&cfg, 3))?;
    let diff = p
        .template
        .data
        .iter()
        .zip(&p.search.data)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    ensure(diff < 1e-12, format!("anatomy differs by {diff}"))?;
    let s = p.pair.search_lesion.ok_or("no search lesion")?;
    ensure(
        (0..3).all(|i| (s.center[i] - p.pair.template_lesion.center[i]).abs() < 1e-12),
        "centers differ",
    )
}

fn synth_translation_moves_center() -> Outcome {
    let p = ok(gen_pair_with_affine(&still_config(), 4, &AffineTransform::translation([3.0, 0.0, 0.0])))?;
    let s = p.pair.search_lesion.ok_or("no search lesion")?.center;
    let t = p.pair.template_lesion.center;
    for (i, d) in [3.0, 0.0, 0.0].iter().enumerate() {
        close(s[i] - t[i], *d, 1e-12, "center shift")?;
    }
    Ok(())
}

// ---- registration -----------------------------------------------------

fn register_identity() -> Outcome {
    let p = ok(gen_pair(&SynthConfig::default(), 0))?;
    let r = ok(register_affine(&p.template, &p.template, &RegistrationOptions::default()))?;
    let a = r.transform.a;
    let dev = (0..3)
        .flat_map(|i| (0..3).map(move |j| (i, j)))
        .map(|(i, j)| (a[(i, j)] - if i == j { 1.0 } else { 0.0 }).abs())
        .fold(0.0, f64::max);
    ensure(dev < 1e-3, format!("|A − I|∞ = {dev}"))?;
    ensure(r.transform.t.norm() < 0.1, format!("|t| = {}", r.transform.t.norm()))?;
    ensure(r.final_cost < 1e-3, format!("cost {}", r.final_cost))
}

fn register_translation() -> Outcome {
    let cfg = SynthConfig {
        noise_sigma: 0.0,
        ..SynthConfig::default()
    };
    let p = ok(gen_pair_with_affine(&cfg, 1, &AffineTransform::translation([3.0, 0.0, 0.0])))?;
    let r = ok(register_affine(&p.template, &p.search, &RegistrationOptions::default()))?;
    let t = r.transform.t;
    let err = ((t.x - 3.0).powi(2) + t.y.powi(2) + t.z.powi(2)).sqrt();
    ensure(err < 0.5, format!("recovered t = ({:.3}, {:.3}, {:.3})", t.x, t.y, t.z))
}

fn register_rotation() -> Outcome {
    let cfg = SynthConfig {
        noise_sigma: 0.0,
        ..SynthConfig::default()
    };
    let center = {
        let (lo, hi) = cfg.grid().world_bounds();
        std::array::from_fn(|i| 0.5 * (lo[i] + hi[i]))
    };
    let rot = euler_rotation([0.0, 0.0, 5f64.to_radians()]);
    let p = ok(gen_pair_with_affine(&cfg, 2, &AffineTransform::about(center, rot, [0.0; 3])))?;
    let r = ok(register_affine(&p.template, &p.search, &RegistrationOptions::default()))?;
    let angle = r.transform.rotation_angle_deg();
    close(angle, 5.0, 1.0, "recovered rotation (deg)")
}

fn warp_identity() -> Outcome {
    let p = ok(gen_pair(&SynthConfig::default(), 5))?;
    let w = ok(apply_affine(&p.template, &AffineTransform::identity(), &p.template.grid))?;
    let diff = w
        .data
        .iter()
        .zip(&p.template.data)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    ensure(diff <= 1e-6, format!("identity warp changed values by {diff}"))
}

fn centroid(v: &Volume) -> Vec3 {
    let mut c = [0.0; 3];
    let mut total = 0.0;
    for (i, &w) in v.data.iter().enumerate() {
        let [z, y, x] = v.grid.unravel(i);
        let p = v.grid.position(z, y, x);
        for k in 0..3 {
            c[k] += w * p[k];
        }
        total += w;
    }
    c.map(|s| s / total)
}

fn warp_moves_blob_centroid() -> Outcome {
    let g = Grid::unit([24, 24, 24]);
    let blob = ok(gaussian_map([10.0, 11.0, 12.0], [0.6; 3], &g))?;
    let shift = [2.5, -1.5, 3.0];
    let w = ok(apply_affine(&blob, &AffineTransform::translation(shift), &g))?;
    let (a, b) = (centroid(&blob), centroid(&w));
    for i in 0..3 {
        close(b[i] - a[i], shift[i], 0.5, "centroid shift")?;
    }
    Ok(())
}

fn warp_moves_prior_peak() -> Outcome {
    let g = Grid::unit([32, 32, 32]);
    let c = [14.0, 15.0, 16.0];
    let prior = ok(gaussian_map(c, [4.0; 3], &g))?;
    let t = AffineTransform::about(c, euler_rotation([0.1, -0.05, 0.15]), [2.2, -1.7, 0.9]);
    let w = ok(apply_affine(&prior, &t, &g))?;
    let [z, y, x] = g.unravel(w.argmax());
    let peak = g.position(z, y, x);
    let want = t.apply(c);
    let d = (0..3).map(|i| (peak[i] - want[i]).abs()).fold(0.0, f64::max);
    ensure(d <= 1.0, format!("peak {peak:?} vs T(center) {want:?}"))
}

// ---- backbone ---------------------------------------------------------

fn toy_backbone() -> Result<(BackboneConfig, ParamSet<f64>), String> {
    let cfg = BackboneConfig::toy();
    let params = ok(init_backbone(&cfg, 0))?;
    Ok((cfg, params))
}

fn backbone_output_shape() -> Outcome {
    let (cfg, params) = toy_backbone()?;
    let v = Volume::filled(Grid::unit([48, 48, 48]), 0.3);
    let f = ok(extract_features(&params, &cfg, &v))?;
    ensure(f.channels == 48 && f.dims() == [6, 6, 6], format!("{} × {:?}", f.channels, f.dims()))
}

fn backbone_odd_input_shape() -> Outcome {
    ensure(feature_dims([47, 47, 47]) == [6, 6, 6], "47 → 6")?;
    let (cfg, params) = toy_backbone()?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let v = Volume::from_fn(Grid::unit([47, 47, 47]), |_| rng.gen());
    let f = ok(extract_features(&params, &cfg, &v))?;
    ensure(f.dims() == [6, 6, 6], format!("{:?}", f.dims()))
}

fn backbone_init_is_deterministic() -> Outcome {
    let cfg = BackboneConfig::toy();
    let a: ParamSet<f64> = ok(init_backbone(&cfg, 11))?;
    let b: ParamSet<f64> = ok(init_backbone(&cfg, 11))?;
    ensure(a == b, "same seed gave different parameters")
}

fn backbone_zero_input_is_finite() -> Outcome {
    let (cfg, params) = toy_backbone()?;
    let f = ok(extract_features(&params, &cfg, &Volume::zeros(Grid::unit([16, 16, 16]))))?;
    ensure(f.data.iter().all(|v| v.is_finite()), "non-finite features")
}

fn backbone_is_pure() -> Outcome {
    let (cfg, params) = toy_backbone()?;
    let p = ok(gen_pair(&SynthConfig::default(), 0))?;
    let a = ok(extract_features(&params, &cfg, &p.template))?;
    let b = ok(extract_features(&params, &cfg, &p.template))?;
    ensure(a.data == b.data, "two runs differ")
}

fn backbone_shift_moves_features_one_cell() -> Outcome {
    // Content sits in a band along x, far from both x faces, on a background
    // equal to the input mean (zero after normalization). Shifting the band by
    // one cell then leaves every norm statistic unchanged, and features inside
    // the band's reach move by exactly one cell.
    let (cfg, params) = toy_backbone()?;
    let (band, margin, shift) = (32usize, 112usize, 8usize);
    let w = 2 * margin + band + shift;
    let dims = [24, 24, w];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let noise: Vec<f64> = (0..24 * 24 * band).map(|_| rng.gen_range(0.0..1.0)).collect();
    let make = |offset: usize| {
        Volume::from_fn(Grid::unit(dims), |p| {
            let (x, y, z) = (p[0] as usize, p[1] as usize, p[2] as usize);
            if x >= margin + offset && x < margin + offset + band {
                noise[(z * 24 + y) * band + x - margin - offset]
            } else {
                cfg.input_mean
            }
        })
    };
    let a = ok(extract_features(&params, &cfg, &make(0)))?;
    let b = ok(extract_features(&params, &cfg, &make(shift)))?;
    let [fd, fh, fw] = a.dims();
    let cell = |f: &FeatureMap, c: usize, z: usize, y: usize, x: usize| f.data[((c * fd + z) * fh + y) * fw + x];
    // cells whose receptive field stays clear of both x faces in both inputs
    let (lo, hi) = (margin / 8 - 4, (margin + band) / 8 + 4);
    let mut worst = 0.0f64;
    for c in 0..a.channels {
        for z in 0..fd {
            for y in 0..fh {
                for x in lo..hi {
                    worst = worst.max((cell(&b, c, z, y, x + 1) - cell(&a, c, z, y, x)).abs());
                }
            }
        }
    }
    ensure(worst <= 1e-4, format!("max interior difference {worst:.3e}"))
}

// ---- selection, mask, attention ---------------------------------------

fn selection_threshold() -> Outcome {
    ensure(select_cells(&[0.9, 0.8, 0.6, 0.5], 0.7) == vec![0, 1], "expected first two cells")
}

fn selection_all_cells_at_zero() -> Outcome {
    let g = Grid::unit([48, 48, 48]);
    let prior = ok(gaussian_map([10.0, 20.0, 30.0], [5.0; 3], &g))?;
    let coarse = ok(coarse_prior(&prior, [6, 6, 6]))?;
    ensure(coarse.data.iter().all(|&v| v > 0.0), "prior not positive")?;
    ensure(select_cells(&coarse.data, 0.0).len() == 216, "not every cell selected")
}

fn selection_argmax_fallback() -> Outcome {
    // a small lesion between cell centers: its coarse prior peaks below 0.7
    let g = Grid::unit([48, 48, 48]);
    let prior = ok(gaussian_map([23.5, 23.5, 23.5], [1.5; 3], &g))?;
    let coarse = ok(coarse_prior(&prior, [6, 6, 6]))?;
    let peak = coarse.max();
    ensure(peak < 0.7, format!("construction failed, peak {peak}"))?;
    let picked = select_cells(&coarse.data, 0.7);
    ensure(picked == vec![coarse.argmax()], format!("picked {picked:?}"))?;
    let features = FeatureMap {
        channels: 2,
        grid: g.resized([6, 6, 6]),
        data: vec![0.0; 2 * 216],
    };
    let sparse: SparseFeatureSet = ok(sparse_select(&features, &prior, 0.7))?;
    ensure(sparse.len() == 1, format!("L = {}", sparse.len()))
}

fn mask_outer_product() -> Outcome {
    let m = AttentionMask::from_row(&[0.1, 0.5, 0.9], 2);
    ensure(m.rows == 2 && m.cols == 3, "shape")?;
    ensure(m.bias == vec![0.1, 0.5, 0.9, 0.1, 0.5, 0.9], format!("{:?}", m.bias))
}

fn mask_peak_at_lesion_cell() -> Outcome {
    let g = Grid::unit([48, 48, 48]);
    let center = [19.5, 27.5, 35.5]; // center of feature cell (z 4, y 3, x 2)
    let prior = ok(gaussian_map(center, [0.5; 3], &g))?;
    let row = ok(registered_prior(&prior, &AffineTransform::identity(), &g, [6, 6, 6]))?;
    let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
    ensure(best == (4 * 6 + 3) * 6 + 2, format!("row maximum at {best}"))
}

fn mask_is_rank_one() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let row: Vec<f64> = (0..27).map(|_| rng.gen()).collect();
    let m = AttentionMask::from_row(&row, 5);
    ensure((0..5).all(|r| m.row(r) == row.as_slice()), "rows differ")?;
    let t = m.transposed();
    ensure(
        (0..27).all(|r| t.row(r).iter().all(|&v| v == row[r])),
        "transpose rows are not constant",
    )
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn attention_uniform_without_logits() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (nq, nk, c) = (3, 5, 4);
    let q = Tensor::zeros(vec![nq, c]);
    let k = Tensor::zeros(vec![nk, c]);
    let v = random(nk, c, &mut rng);
    let (out, probs) = multi_head_attention(&q, &k, &v, None, 2);
    ensure(probs.iter().all(|&p| (p - 0.2).abs() < 1e-15), "attention is not uniform")?;
    for r in 0..nq {
        for j in 0..c {
            let mean = (0..nk).map(|i| v.data[i * c + j]).sum::<f64>() / nk as f64;
            close(out.data[r * c + j], mean, 1e-12, "column mean")?;
        }
    }
    Ok(())
}

fn attention_saturated_bias_is_one_hot() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (nq, nk, c, j) = (2, 6, 4, 3);
    let (q, k, v) = (random(nq, c, &mut rng), random(nk, c, &mut rng), random(nk, c, &mut rng));
    let mut bias = vec![0.0; nq * nk];
    for r in 0..nq {
        bias[r * nk + j] = 1e4;
    }
    let (out, _) = multi_head_attention(&q, &k, &v, Some(&bias), 2);
    for r in 0..nq {
        for col in 0..c {
            close(out.data[r * c + col], v.data[j * c + col], 1e-6, "saturated output")?;
        }
    }
    Ok(())
}

fn attention_row_shift_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (nq, nk, c) = (3, 5, 4);
    let (q, k, v) = (random(nq, c, &mut rng), random(nk, c, &mut rng), random(nk, c, &mut rng));
    let bias: Vec<f64> = (0..nq * nk).map(|_| rng.gen()).collect();
    let mut shifted = bias.clone();
    for b in &mut shifted[nk..2 * nk] {
        *b += 7.3;
    }
    let (a, _) = multi_head_attention(&q, &k, &v, Some(&bias), 2);
    let (b, _) = multi_head_attention(&q, &k, &v, Some(&shifted), 2);
    let d = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    ensure(d <= 1e-6, format!("outputs differ by {d}"))
}

fn fusion_inputs(
    channels: usize,
    rounds: usize,
    template_cells: usize,
) -> Result<(CatConfig, ParamSet<f64>, SparseFeatureSet, FeatureMap), String> {
    let cfg = CatConfig {
        rounds,
        dropout: 0.0,
        ..CatConfig::toy()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let params = ok(init_cat(&cfg, channels, &mut rng))?;
    let sdims = [2, 3, 2];
    let sgrid = Grid::unit([16, 24, 16]).resized(sdims);
    let cells = grid_cells(sdims);
    let search = FeatureMap {
        channels,
        grid: sgrid,
        data: (0..channels * cells.len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    };
    let sparse = SparseFeatureSet {
        features: random(template_cells, channels, &mut rng),
        indices: cells[..template_cells].to_vec(),
        grid: sgrid,
    };
    Ok((cfg, params, sparse, search))
}

fn fusion_shape_and_finiteness() -> Outcome {
    let (cfg, params, sparse, search) = fusion_inputs(8, 1, 1)?;
    let mask = AttentionMask::zeros(1, search.cells());
    let out = ok(cat_forward(&sparse, &search, &mask, &params, &cfg))?;
    ensure(out.shape == vec![12, 8], format!("shape {:?}", out.shape))?;
    ensure(out.all_finite(), "non-finite output")
}

fn fusion_ignores_constant_mask() -> Outcome {
    let (cfg, params, sparse, search) = fusion_inputs(8, 3, 3)?;
    let zeros = AttentionMask::from_row(&vec![0.0; search.cells()], 3);
    let ones = AttentionMask::from_row(&vec![1.0; search.cells()], 3);
    let a = ok(cat_forward(&sparse, &search, &zeros, &params, &cfg))?;
    let b = ok(cat_forward(&sparse, &search, &ones, &params, &cfg))?;
    let d = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    ensure(d <= 1e-6, format!("outputs differ by {d}"))
}

// ---- predictor and losses ---------------------------------------------

fn predictor_zero_offsets_give_cell_centers() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let params = init_predictor::<f64>(8, &mut rng);
    let grid = Grid::unit([48, 48, 48]).resized([6, 6, 6]);
    let features = random(216, 8, &mut rng);
    let out = ok(predict(&features, &params, &grid))?;
    ensure(out.coords == anchor_grid(&grid), "coordinates are not the cell centers")
}

fn predictor_random_params_are_finite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut params = init_predictor::<f64>(8, &mut rng);
    for (_, t) in params.iter_mut() {
        for v in &mut t.data {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    let grid = Grid::unit([16, 16, 16]).resized([2, 2, 2]);
    let out = ok(predict(&random(8, 8, &mut rng), &params, &grid))?;
    ensure(out.logits.len() == 8 && out.coords.len() == 8, "shape")?;
    ensure(
        out.logits.iter().chain(out.coords.iter().flatten()).all(|v| v.is_finite()),
        "non-finite output",
    )
}

fn output(logits: Vec<f64>, coords: Vec<Vec3>) -> PredictorOutput {
    PredictorOutput { logits, coords }
}

fn global_regression_peaked() -> Outcome {
    let c = global_regress(&output(
        vec![10.0, -10.0, -10.0],
        vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]],
    ));
    for (i, want) in [1.0, 2.0, 3.0].into_iter().enumerate() {
        close(c[i], want, 1e-6, "center")?;
    }
    Ok(())
}

fn global_regression_uniform() -> Outcome {
    let c = global_regress(&output(vec![0.4, 0.4], vec![[0.0; 3], [2.0; 3]]));
    ensure(c.iter().all(|&v| (v - 1.0).abs() < 1e-12), format!("{c:?}"))
}

fn global_regression_shift_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let logits: Vec<f64> = (0..27).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let coords: Vec<Vec3> = (0..27).map(|_| [rng.gen(), rng.gen(), rng.gen()].map(|v: f64| 40.0 * v)).collect();
    let a = global_regress(&output(logits.clone(), coords.clone()));
    let b = global_regress(&output(logits.iter().map(|l| l + 5.0).collect(), coords));
    (0..3).try_for_each(|i| close(b[i], a[i], 1e-9, "shifted logits"))
}

fn regression_loss_zero() -> Outcome {
    ensure(loss_regression([4.0, 5.0, 6.0], [4.0, 5.0, 6.0]) == 0.0, "nonzero")
}

fn regression_loss_hand_value() -> Outcome {
    close(loss_regression([1.0, -2.0, 0.5], [0.0; 3]), 3.5, 1e-15, "L1")
}

fn regression_loss_gradient_is_sign() -> Outcome {
    let truth = [0.0; 3];
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::new(vec![1, 3], vec![1.0, 1.0, 1.0]));
    let l = g.l1_to(x, &truth);
    let grads = g.backward(l);
    let analytic = grads.get(x).ok_or("no gradient")?.data.clone();
    let h = 1e-6;
    for i in 0..3 {
        let mut up = [1.0; 3];
        let mut down = [1.0; 3];
        up[i] += h;
        down[i] -= h;
        let fd = (loss_regression(up, truth) - loss_regression(down, truth)) / (2.0 * h);
        close(fd, 1.0, 1e-6, "difference quotient")?;
        close(analytic[i], 1.0, 0.0, "analytic gradient")?;
    }
    Ok(())
}

fn label_peak_at_cell_center() -> Outcome {
    let search = Grid::unit([48, 48, 48]);
    let cell = search.resized([6, 6, 6]).position(2, 4, 1);
    let label = ok(make_label(cell, [5.0; 3], &search, [6, 6, 6]))?;
    ensure(label[(2 * 6 + 4) * 6 + 1] == 1.0, "label at the lesion cell is not 1")
}

fn label_range_and_unique_max() -> Outcome {
    let search = Grid::unit([48, 48, 48]);
    let label = ok(make_label([17.3, 29.1, 22.6], [5.0; 3], &search, [6, 6, 6]))?;
    ensure(label.iter().all(|v| (0.0..=1.0).contains(v)), "label outside [0, 1]")?;
    ensure(label.iter().filter(|&&v| v == 1.0).count() == 1, "maximum is not unique")
}

fn label_argmax_is_nearest_cell() -> Outcome {
    let search = Grid::unit([48, 48, 48]);
    let cells = search.resized([6, 6, 6]);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..200 {
        let c: Vec3 = [rng.gen_range(0.0..47.0), rng.gen_range(0.0..47.0), rng.gen_range(0.0..47.0)];
        let r = rng.gen_range(4.0..10.0);
        let label = ok(make_label(c, [r; 3], &search, [6, 6, 6]))?;
        let best = (0..216).fold(0, |b, i| if label[i] > label[b] { i } else { b });
        let dist = |i: usize| {
            let [z, y, x] = cells.unravel(i);
            let p = cells.position(z, y, x);
            (0..3).map(|k| (p[k] - c[k]).powi(2)).sum::<f64>()
        };
        let nearest = (0..216).fold(0, |b, i| if dist(i) < dist(b) { i } else { b });
        // ties between equidistant cells are allowed either way
        ensure(
            best == nearest || (dist(best) - dist(nearest)).abs() < 1e-9,
            format!("center {c:?}: argmax {best}, nearest {nearest}"),
        )?;
    }
    Ok(())
}

fn focal_positive_hand_value() -> Outcome {
    let l = ok(loss_focal(&[0.5], &[1.0]))?;
    close(l, 0.25 * 2f64.ln(), 1e-6, "positive cell")?;
    close(l, 0.17329, 1e-5, "rounded value")
}

fn focal_perfect_prediction() -> Outcome {
    let l = ok(loss_focal(&[1.0 - 1e-7], &[1.0]))?;
    ensure(l < 1e-12, format!("loss {l}"))
}

fn focal_soft_hand_value() -> Outcome {
    let l = ok(loss_focal(&[0.5], &[0.5]))?;
    close(l, 0.0625 * 2f64.ln(), 1e-6, "soft cell")?;
    close(l, 0.04332, 1e-5, "rounded value")
}

// ---- metrics ------------------------------------------------------------

fn rec(distance_x: f64, radius: f64) -> EvalRecord {
    EvalRecord {
        pair_id: "p".into(),
        direction: Direction::Forward,
        predicted: [distance_x, 0.0, 0.0],
        truth: [0.0; 3],
        radius,
    }
}

fn cpm_fixed_threshold_hit() -> Outcome {
    close(ok(cpm(&[rec(5.0, 12.0)], CpmMode::At10mm))?, 100.0, 0.0, "CPM@10mm")
}

fn cpm_radius_caps_threshold() -> Outcome {
    close(ok(cpm(&[rec(5.0, 4.0)], CpmMode::At10mm))?, 0.0, 0.0, "CPM@10mm")
}

fn cpm_three_records() -> Outcome {
    let r = [rec(3.0, 20.0), rec(9.0, 20.0), rec(15.0, 20.0)];
    close(ok(cpm(&r, CpmMode::At10mm))?, 200.0 / 3.0, 1e-12, "CPM@10mm")?;
    close(ok(cpm(&r, CpmMode::AtRadius))?, 100.0, 0.0, "CPM@Radius")
}

fn med_unit_offset() -> Outcome {
    let r = EvalRecord {
        predicted: [1.0; 3],
        ..rec(0.0, 5.0)
    };
    let (total, axes) = ok(med(&[r]))?;
    close(total.mean, 3f64.sqrt(), 1e-12, "MED")?;
    axes.iter().try_for_each(|a| close(a.mean, 1.0, 0.0, "axis"))
}

fn med_identity() -> Outcome {
    let (total, axes) = ok(med(&[rec(0.0, 5.0), rec(0.0, 7.0)]))?;
    ensure(total.mean == 0.0 && total.std == 0.0, "MED not 0 ± 0")?;
    ensure(axes.iter().all(|a| a.mean == 0.0 && a.std == 0.0), "axes not 0 ± 0")
}

fn med_population_std() -> Outcome {
    let (total, _) = ok(med(&[rec(2.0, 5.0), rec(4.0, 5.0)]))?;
    close(total.mean, 3.0, 1e-15, "mean")?;
    close(total.std, 1.0, 1e-15, "std")
}

fn report_oracle() -> Outcome {
    let records: Vec<EvalRecord> = (0..6)
        .map(|i| EvalRecord {
            predicted: [i as f64, 2.0, 3.0],
            truth: [i as f64, 2.0, 3.0],
            ..rec(0.0, 4.0)
        })
        .collect();
    let r = ok(MetricsReport::from_records(&records))?;
    ensure(r.cpm_at_10mm == 100.0 && r.cpm_at_radius == 100.0, "CPM below 100")?;
    ensure(r.med.mean == 0.0, "MED above 0")
}

fn report_constant_offset() -> Outcome {
    let records: Vec<EvalRecord> = (0..4)
        .map(|i| EvalRecord {
            predicted: [20.0 + i as f64, i as f64, 1.0],
            truth: [i as f64, i as f64, 1.0],
            ..rec(0.0, 5.0)
        })
        .collect();
    let r = ok(MetricsReport::from_records(&records))?;
    ensure(r.cpm_at_10mm == 0.0 && r.cpm_at_radius == 0.0, "CPM above 0")?;
    close(r.med_x.mean, 20.0, 1e-12, "MED_X")?;
    close(r.med_y.mean, 0.0, 0.0, "MED_Y")?;
    close(r.med_z.mean, 0.0, 0.0, "MED_Z")
}
