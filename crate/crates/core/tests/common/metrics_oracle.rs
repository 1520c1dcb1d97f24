//! Brute-force metrics written without the library's helpers: squared
//! distances against squared thresholds, and the pairwise-difference form of
//! the population variance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tlt_core::metrics::{EvalRecord, MetricsReport};
use tlt_core::volume::Direction;

pub struct Oracle {
    pub cpm_at_10mm: f64,
    pub cpm_at_radius: f64,
    /// `(mean, std)` of the Euclidean error and of `|dx|`, `|dy|`, `|dz|`.
    pub med: [(f64, f64); 4],
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mut mean = 0.0;
    for x in v {
        mean += x;
    }
    mean /= n;
    let mut pairs = 0.0;
    for i in 0..v.len() {
        for j in i + 1..v.len() {
            pairs += (v[i] - v[j]) * (v[i] - v[j]);
        }
    }
    (mean, (pairs / (n * n)).sqrt())
}

pub fn oracle(records: &[EvalRecord]) -> Oracle {
    let mut hit10 = 0usize;
    let mut hit_r = 0usize;
    let mut cols: [Vec<f64>; 4] = Default::default();
    for r in records {
        let d = [
            r.predicted[0] - r.truth[0],
            r.predicted[1] - r.truth[1],
            r.predicted[2] - r.truth[2],
        ];
        let sq = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
        let cap = if r.radius < 10.0 { r.radius } else { 10.0 };
        if sq < cap * cap {
            hit10 += 1;
        }
        if sq < r.radius * r.radius {
            hit_r += 1;
        }
        cols[0].push(sq.sqrt());
        for a in 0..3 {
            cols[a + 1].push(d[a].abs());
        }
    }
    let n = records.len() as f64;
    Oracle {
        cpm_at_10mm: hit10 as f64 * 100.0 / n,
        cpm_at_radius: hit_r as f64 * 100.0 / n,
        med: [
            mean_std(&cols[0]),
            mean_std(&cols[1]),
            mean_std(&cols[2]),
            mean_std(&cols[3]),
        ],
    }
}

/// Records with errors spread across both thresholds.
pub fn random_records(seed: u64, n: usize) -> Vec<EvalRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let truth = [0, 1, 2].map(|_| rng.gen_range(-60.0..60.0));
            let scale = rng.gen_range(0.0..15.0);
            let predicted = [0, 1, 2].map(|a| truth[a] + scale * rng.gen_range(-1.0..1.0));
            EvalRecord {
                pair_id: format!("r{i}"),
                direction: if i % 2 == 0 { Direction::Forward } else { Direction::Backward },
                predicted,
                truth,
                radius: rng.gen_range(1.0..20.0),
            }
        })
        .collect()
}

/// Largest absolute difference between a report and the oracle.
pub fn max_difference(report: &MetricsReport, o: &Oracle) -> f64 {
    let got = [
        report.cpm_at_10mm,
        report.cpm_at_radius,
        report.med.mean,
        report.med.std,
        report.med_x.mean,
        report.med_x.std,
        report.med_y.mean,
        report.med_y.std,
        report.med_z.mean,
        report.med_z.std,
    ];
    let want = [
        o.cpm_at_10mm,
        o.cpm_at_radius,
        o.med[0].0,
        o.med[0].1,
        o.med[1].0,
        o.med[1].1,
        o.med[2].0,
        o.med[2].1,
        o.med[3].0,
        o.med[3].1,
    ];
    got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}
