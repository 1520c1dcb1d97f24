//! Center point matching accuracy and mean Euclidean distance.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Result};
use crate::volume::{Direction, Vec3};

/// Distance threshold cap of the fixed-threshold accuracy, in mm.
pub const CPM_CAP_MM: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub pair_id: String,
    pub direction: Direction,
    pub predicted: Vec3,
    pub truth: Vec3,
    /// Mean of the per-axis ground-truth radii, mm.
    pub radius: f64,
}

impl EvalRecord {
    pub fn distance(&self) -> f64 {
        (0..3)
            .map(|i| (self.predicted[i] - self.truth[i]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn axis_error(&self, axis: usize) -> f64 {
        (self.predicted[axis] - self.truth[axis]).abs()
    }

    fn validate(&self) -> Result<()> {
        ensure_arg!(
            self.predicted.iter().chain(&self.truth).all(|v| v.is_finite()),
            "record {} has non-finite coordinates",
            self.pair_id
        );
        ensure_arg!(
            self.radius > 0.0 && self.radius.is_finite(),
            "record {} has non-positive radius {}",
            self.pair_id,
            self.radius
        );
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CpmMode {
    /// Threshold `min(10mm, r)`.
    At10mm,
    /// Threshold `r`.
    AtRadius,
}

impl CpmMode {
    pub fn threshold(self, radius: f64) -> f64 {
        match self {
            CpmMode::At10mm => radius.min(CPM_CAP_MM),
            CpmMode::AtRadius => radius,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population mean and standard deviation.
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return MeanStd { mean: f64::NAN, std: f64::NAN };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cpm_at_10mm: f64,
    pub cpm_at_radius: f64,
    pub med: MeanStd,
    pub med_x: MeanStd,
    pub med_y: MeanStd,
    pub med_z: MeanStd,
    pub n_pairs: usize,
    /// Pairs that could not be tracked; counted as misses, left out of distances.
    #[serde(default)]
    pub n_failed: usize,
}

fn check(records: &[EvalRecord]) -> Result<()> {
    ensure_arg!(!records.is_empty(), "metrics need at least one record");
    records.iter().try_for_each(EvalRecord::validate)
}

fn hits(records: &[EvalRecord], mode: CpmMode) -> usize {
    records
        .iter()
        .filter(|r| r.distance() < mode.threshold(r.radius))
        .count()
}

/// Percentage of records whose center error is strictly below the threshold.
pub fn cpm(records: &[EvalRecord], mode: CpmMode) -> Result<f64> {
    check(records)?;
    Ok(100.0 * hits(records, mode) as f64 / records.len() as f64)
}

/// Euclidean error and per-axis absolute errors `[x, y, z]`.
pub fn med(records: &[EvalRecord]) -> Result<(MeanStd, [MeanStd; 3])> {
    check(records)?;
    let total = MeanStd::of(records.iter().map(EvalRecord::distance));
    let axes = std::array::from_fn(|a| MeanStd::of(records.iter().map(|r| r.axis_error(a))));
    Ok((total, axes))
}

impl MetricsReport {
    pub fn from_records(records: &[EvalRecord]) -> Result<Self> {
        Self::with_failures(records, 0)
    }

    /// Report over `records` plus `failed` untracked pairs, which count as
    /// misses in both accuracies.
    pub fn with_failures(records: &[EvalRecord], failed: usize) -> Result<Self> {
        let n = records.len() + failed;
        ensure_arg!(n > 0, "metrics need at least one record");
        records.iter().try_for_each(EvalRecord::validate)?;
        let pct = |mode| 100.0 * hits(records, mode) as f64 / n as f64;
        let nan = MeanStd { mean: f64::NAN, std: f64::NAN };
        let (total, [x, y, z]) = if records.is_empty() {
            (nan, [nan; 3])
        } else {
            med(records)?
        };
        Ok(MetricsReport {
            cpm_at_10mm: pct(CpmMode::At10mm),
            cpm_at_radius: pct(CpmMode::AtRadius),
            med: total,
            med_x: x,
            med_y: y,
            med_z: z,
            n_pairs: n,
            n_failed: failed,
        })
    }

    /// Aligned text table with the columns CPM@10mm, CPM@Radius, MED_X,
    /// MED_Y, MED_Z, MED.
    pub fn table(&self) -> String {
        let pm = |m: &MeanStd| format!("{:.2}±{:.2}", m.mean, m.std);
        let header = ["CPM@10mm", "CPM@Radius", "MED_X", "MED_Y", "MED_Z", "MED", "n"];
        let row = [
            format!("{:.2}", self.cpm_at_10mm),
            format!("{:.2}", self.cpm_at_radius),
            pm(&self.med_x),
            pm(&self.med_y),
            pm(&self.med_z),
            pm(&self.med),
            self.n_pairs.to_string(),
        ];
        let widths: Vec<usize> = header
            .iter()
            .zip(&row)
            .map(|(h, r)| h.chars().count().max(r.chars().count()))
            .collect();
        let line = |cells: Vec<String>| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, &w)| format!("{c:>w$}"))
                .collect::<Vec<_>>()
                .join("  ")
        };
        format!(
            "{}\n{}\n",
            line(header.iter().map(|s| s.to_string()).collect()),
            line(row.to_vec())
        )
    }
}
