//! Evaluation metrics over all OD cells of a split, multi-seed reports and
//! heatmap/curve exporters.

mod export;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cgame::{CGameModel, CgameError};
use crate::simkit::{Dataset, OdMatrix, TrafficCounts};
use crate::storage::write_file_atomically;

pub use export::{export_curve, export_heatmap, read_heatmap_csv, HeatmapFiles};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("metric input is empty")]
    Empty,
    #[error("length mismatch: truth has {truth} values, estimate has {estimate}")]
    Length { truth: usize, estimate: usize },
    #[error("metric undefined: {0}")]
    Undefined(&'static str),
    #[error("non-finite value in metric input")]
    NonFinite,
    #[error("split index {index} out of range for {n_items} items")]
    Index { index: usize, n_items: usize },
    #[error(transparent)]
    Model(#[from] CgameError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Hotspot threshold multiplier: cells above `mean + k·std`.
pub const DEFAULT_HOTSPOT_K: f64 = 2.0;
/// Relative error within which a hotspot counts as captured.
pub const HOTSPOT_TOLERANCE: f64 = 0.2;

fn check(y: &[f64], yh: &[f64]) -> Result<()> {
    if y.len() != yh.len() {
        return Err(EvalError::Length { truth: y.len(), estimate: yh.len() });
    }
    if y.is_empty() {
        return Err(EvalError::Empty);
    }
    if !y.iter().chain(yh).all(|v| v.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population variance.
fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
}

pub fn rmse(y: &[f64], yh: &[f64]) -> Result<f64> {
    check(y, yh)?;
    let sq: f64 = y.iter().zip(yh).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((sq / y.len() as f64).sqrt())
}

pub fn mae(y: &[f64], yh: &[f64]) -> Result<f64> {
    check(y, yh)?;
    let abs: f64 = y.iter().zip(yh).map(|(a, b)| (a - b).abs()).sum();
    Ok(abs / y.len() as f64)
}

/// `1 − Σ|y − ŷ| / Σ|y|`.
pub fn accuracy(y: &[f64], yh: &[f64]) -> Result<f64> {
    check(y, yh)?;
    let denom: f64 = y.iter().map(|v| v.abs()).sum();
    if denom == 0.0 {
        return Err(EvalError::Undefined("accuracy needs a nonzero ground truth"));
    }
    let err: f64 = y.iter().zip(yh).map(|(a, b)| (a - b).abs()).sum();
    Ok(1.0 - err / denom)
}

/// Coefficient of determination `1 − SS_res / SS_tot`.
pub fn r2(y: &[f64], yh: &[f64]) -> Result<f64> {
    check(y, yh)?;
    if y.len() < 2 {
        return Err(EvalError::Undefined("r2 needs at least two values"));
    }
    let m = mean(y);
    let ss_tot: f64 = y.iter().map(|v| (v - m).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(EvalError::Undefined("r2 needs a non-constant ground truth"));
    }
    let ss_res: f64 = y.iter().zip(yh).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Explained variance `1 − Var(y − ŷ) / Var(y)`.
pub fn var_score(y: &[f64], yh: &[f64]) -> Result<f64> {
    check(y, yh)?;
    if y.len() < 2 {
        return Err(EvalError::Undefined("variance score needs at least two values"));
    }
    let vy = variance(y);
    if vy == 0.0 {
        return Err(EvalError::Undefined("variance score needs a non-constant ground truth"));
    }
    let resid: Vec<f64> = y.iter().zip(yh).map(|(a, b)| a - b).collect();
    Ok(1.0 - variance(&resid) / vy)
}

/// Cells of `y` above `mean + k·std` (population std).
pub fn hotspot_cells(y: &[f64], k: f64) -> Vec<usize> {
    if y.is_empty() {
        return Vec::new();
    }
    let threshold = mean(y) + k * variance(y).sqrt();
    (0..y.len()).filter(|&i| y[i] > threshold).collect()
}

/// `(captured, hotspots)` for one matrix.
fn hotspot_hits(y: &[f64], yh: &[f64], k: f64) -> (usize, usize) {
    let cells = hotspot_cells(y, k);
    let hits = cells
        .iter()
        .filter(|&&i| (y[i] - yh[i]).abs() / y[i] <= HOTSPOT_TOLERANCE)
        .count();
    (hits, cells.len())
}

/// Fraction of hotspot cells estimated within 20% relative error.
pub fn hotspot_recall(y: &OdMatrix, yh: &OdMatrix, k: f64) -> Result<f64> {
    if y.n_spots() != yh.n_spots() {
        return Err(EvalError::Length {
            truth: y.as_slice().len(),
            estimate: yh.as_slice().len(),
        });
    }
    check(y.as_slice(), yh.as_slice())?;
    let (hits, total) = hotspot_hits(y.as_slice(), yh.as_slice(), k);
    if total == 0 {
        return Err(EvalError::Undefined("no hotspot cells"));
    }
    Ok(hits as f64 / total as f64)
}

/// Anything that maps link counts to OD estimates.
pub trait OdEstimator {
    fn estimate(&self, counts: &[&TrafficCounts]) -> Result<Vec<OdMatrix>>;
}

impl OdEstimator for CGameModel {
    fn estimate(&self, counts: &[&TrafficCounts]) -> Result<Vec<OdMatrix>> {
        Ok(self.predict_od_batch(counts)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Train,
    Validation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub mae: f64,
    pub accuracy: f64,
    pub r2: f64,
    pub var_score: f64,
    /// Pooled over items; `None` when the split has no hotspot cells.
    pub hotspot_recall: Option<f64>,
    pub n_samples: usize,
    pub n_cells: usize,
}

const CHUNK: usize = 256;

/// Metrics over every OD cell of every item in the split.
pub fn evaluate(model: &dyn OdEstimator, dataset: &Dataset, split: SplitKind) -> Result<Metrics> {
    let idx = match split {
        SplitKind::Train => &dataset.split.train,
        SplitKind::Validation => &dataset.split.validation,
    };
    if idx.is_empty() {
        return Err(EvalError::Empty);
    }
    let n_items = dataset.items.len();
    if let Some(&index) = idx.iter().find(|&&i| i >= n_items) {
        return Err(EvalError::Index { index, n_items });
    }
    let mut y = Vec::new();
    let mut yh = Vec::new();
    let (mut hits, mut hotspots) = (0, 0);
    for chunk in idx.chunks(CHUNK) {
        let counts: Vec<&TrafficCounts> = chunk.iter().map(|&i| &dataset.items[i].counts).collect();
        let estimates = model.estimate(&counts)?;
        if estimates.len() != chunk.len() {
            return Err(EvalError::Length { truth: chunk.len(), estimate: estimates.len() });
        }
        for (&i, est) in chunk.iter().zip(&estimates) {
            let truth = dataset.items[i].od.as_slice();
            check(truth, est.as_slice())?;
            let (h, t) = hotspot_hits(truth, est.as_slice(), DEFAULT_HOTSPOT_K);
            hits += h;
            hotspots += t;
            y.extend_from_slice(truth);
            yh.extend_from_slice(est.as_slice());
        }
    }
    Ok(Metrics {
        rmse: rmse(&y, &yh)?,
        mae: mae(&y, &yh)?,
        accuracy: accuracy(&y, &yh)?,
        r2: r2(&y, &yh)?,
        var_score: var_score(&y, &yh)?,
        hotspot_recall: (hotspots > 0).then(|| hits as f64 / hotspots as f64),
        n_samples: idx.len(),
        n_cells: y.len(),
    })
}

pub const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
    pub per_seed: Vec<f64>,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let m = if n == 0 { f64::NAN } else { mean(values) };
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean: m, std, per_seed: values.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format_version: u32,
    pub split: SplitKind,
    pub n_samples: usize,
    pub n_cells: usize,
    /// One label per evaluated model, in `per_seed` order.
    pub runs: Vec<String>,
    pub metrics: BTreeMap<String, Summary>,
    /// Metric definitions that involve a choice.
    pub notes: BTreeMap<String, String>,
}

impl MetricsReport {
    /// Mean ± sample std of each metric across seeds. Hotspot recall is
    /// summarized over the seeds where it is defined.
    pub fn aggregate(split: SplitKind, runs: &[String], per_seed: &[Metrics]) -> Result<Self> {
        let first = per_seed.first().ok_or(EvalError::Empty)?;
        if runs.len() != per_seed.len() {
            return Err(EvalError::Length { truth: runs.len(), estimate: per_seed.len() });
        }
        let pick = |f: fn(&Metrics) -> f64| Summary::of(&per_seed.iter().map(f).collect::<Vec<_>>());
        let mut metrics = BTreeMap::new();
        metrics.insert("rmse".to_string(), pick(|m| m.rmse));
        metrics.insert("mae".to_string(), pick(|m| m.mae));
        metrics.insert("accuracy".to_string(), pick(|m| m.accuracy));
        metrics.insert("r2".to_string(), pick(|m| m.r2));
        metrics.insert("var_score".to_string(), pick(|m| m.var_score));
        let recall: Vec<f64> = per_seed.iter().filter_map(|m| m.hotspot_recall).collect();
        if !recall.is_empty() {
            metrics.insert("hotspot_recall".to_string(), Summary::of(&recall));
        }
        let notes = [
            ("accuracy", "1 - sum|y - y_hat| / sum|y| over all OD cells of the split"),
            ("r2", "1 - SS_res / SS_tot, population sums over all OD cells"),
            ("var_score", "1 - Var(y - y_hat) / Var(y), population variance"),
            (
                "hotspot_recall",
                "our quantification: cells above mean + 2 std of each true OD matrix, \
                 captured when relative error <= 0.2, pooled over items",
            ),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        Ok(Self {
            format_version: REPORT_FORMAT_VERSION,
            split,
            n_samples: first.n_samples,
            n_cells: first.n_cells,
            runs: runs.to_vec(),
            metrics,
            notes,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_vec_pretty(self).expect("report serializes");
        json.push(b'\n');
        write_file_atomically(path, &json)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simkit::{generate_dataset, NetworkConfig, SimConfig};
    use proptest::prelude::*;

    const TOL: f64 = 1e-12;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= TOL
    }

    #[test]
    fn hand_examples() {
        let (y, yh) = ([0.0, 4.0], [2.0, 2.0]);
        assert!(close(rmse(&y, &yh).unwrap(), 2.0));
        assert!(close(mae(&y, &yh).unwrap(), 2.0));
        assert!(close(accuracy(&y, &yh).unwrap(), 0.0));
        assert!(close(r2(&y, &yh).unwrap(), 0.0));
        assert!(close(var_score(&y, &yh).unwrap(), 0.0));

        let (y, yh) = ([1.0, 2.0, 3.0], [2.0, 2.0, 2.0]);
        assert!(close(rmse(&y, &yh).unwrap(), (2.0f64 / 3.0).sqrt()));
        assert!(close(mae(&y, &yh).unwrap(), 2.0 / 3.0));
        assert!(close(r2(&y, &yh).unwrap(), 0.0));

        assert!(close(accuracy(&[10.0, 10.0], &[9.0, 11.0]).unwrap(), 0.9));
    }

    #[test]
    fn identical_inputs_are_ideal() {
        let y = [0.0, 3.0, 1.5, 7.0];
        assert_eq!(rmse(&y, &y).unwrap(), 0.0);
        assert_eq!(mae(&y, &y).unwrap(), 0.0);
        assert_eq!(accuracy(&y, &y).unwrap(), 1.0);
        assert_eq!(r2(&y, &y).unwrap(), 1.0);
        assert_eq!(var_score(&y, &y).unwrap(), 1.0);
    }

    #[test]
    fn undefined_and_malformed_inputs() {
        assert!(matches!(rmse(&[], &[]), Err(EvalError::Empty)));
        assert!(matches!(mae(&[1.0], &[1.0, 2.0]), Err(EvalError::Length { .. })));
        assert!(matches!(accuracy(&[0.0, 0.0], &[1.0, 0.0]), Err(EvalError::Undefined(_))));
        assert!(matches!(r2(&[2.0, 2.0], &[1.0, 0.0]), Err(EvalError::Undefined(_))));
        assert!(matches!(var_score(&[2.0], &[2.0]), Err(EvalError::Undefined(_))));
        assert!(matches!(rmse(&[f64::NAN], &[0.0]), Err(EvalError::NonFinite)));
    }

    fn od(values: Vec<f64>) -> OdMatrix {
        let n = (values.len() as f64).sqrt() as usize;
        OdMatrix::from_values(n, values).unwrap()
    }

    #[test]
    fn hotspot_examples() {
        let mut v = vec![1.0; 16];
        v[5] = 100.0;
        let y = od(v.clone());
        assert_eq!(hotspot_cells(y.as_slice(), 2.0), vec![5]);
        assert_eq!(hotspot_recall(&y, &y, 2.0).unwrap(), 1.0);
        assert_eq!(hotspot_recall(&y, &OdMatrix::zeros(4), 2.0).unwrap(), 0.0);
        let mut est = v.clone();
        est[5] = 85.0;
        assert_eq!(hotspot_recall(&y, &od(est.clone()), 2.0).unwrap(), 1.0);
        est[5] = 79.0;
        assert_eq!(hotspot_recall(&y, &od(est), 2.0).unwrap(), 0.0);
        assert!(matches!(
            hotspot_recall(&od(vec![1.0; 4]), &od(vec![1.0; 4]), 2.0),
            Err(EvalError::Undefined(_))
        ));
    }

    /// Looks up the true OD matrix of each item by its counts.
    struct Perfect<'a>(&'a Dataset);

    impl OdEstimator for Perfect<'_> {
        fn estimate(&self, counts: &[&TrafficCounts]) -> Result<Vec<OdMatrix>> {
            Ok(counts
                .iter()
                .map(|c| self.0.items.iter().find(|i| &i.counts == *c).unwrap().od.clone())
                .collect())
        }
    }

    /// Halves every cell of the truth.
    struct Halved<'a>(&'a Dataset);

    impl OdEstimator for Halved<'_> {
        fn estimate(&self, counts: &[&TrafficCounts]) -> Result<Vec<OdMatrix>> {
            Perfect(self.0)
                .estimate(counts)?
                .into_iter()
                .map(|d| Ok(OdMatrix::from_values(d.n_spots(), d.as_slice().iter().map(|v| v / 2.0).collect()).unwrap()))
                .collect()
        }
    }

    fn toy() -> Dataset {
        let cfg = SimConfig {
            network: NetworkConfig { rows: 2, cols: 3, link_length_m: 500.0 },
            n_items: 20,
            trips_min: 100,
            trips_max: 150,
            ..SimConfig::default()
        };
        generate_dataset(&cfg, 3).unwrap()
    }

    #[test]
    fn perfect_estimator_is_ideal() {
        let ds = toy();
        let m = evaluate(&Perfect(&ds), &ds, SplitKind::Validation).unwrap();
        assert_eq!((m.rmse, m.mae, m.accuracy, m.r2, m.var_score), (0.0, 0.0, 1.0, 1.0, 1.0));
        assert_eq!(m.n_samples, 4);
        assert_eq!(m.n_cells, 4 * 36);
    }

    #[test]
    fn evaluate_matches_concatenated_cells() {
        let ds = toy();
        let m = evaluate(&Halved(&ds), &ds, SplitKind::Train).unwrap();
        let y: Vec<f64> = ds.train_items().flat_map(|i| i.od.as_slice().to_vec()).collect();
        let yh: Vec<f64> = y.iter().map(|v| v / 2.0).collect();
        assert_eq!(m.rmse, rmse(&y, &yh).unwrap());
        assert_eq!(m.mae, mae(&y, &yh).unwrap());
        assert_eq!(m.accuracy, accuracy(&y, &yh).unwrap());
        assert!(close(m.accuracy, 0.5));
        assert_eq!(m.r2, r2(&y, &yh).unwrap());
        assert_eq!(m.var_score, var_score(&y, &yh).unwrap());
        assert_eq!(m.hotspot_recall, Some(0.0));
    }

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("seed_{i}")).collect()
    }

    #[test]
    fn report_aggregation() {
        let ds = toy();
        let a = evaluate(&Perfect(&ds), &ds, SplitKind::Validation).unwrap();
        let b = evaluate(&Halved(&ds), &ds, SplitKind::Validation).unwrap();
        let r = MetricsReport::aggregate(SplitKind::Validation, &labels(3), &[a, b, a]).unwrap();
        let acc = &r.metrics["accuracy"];
        assert_eq!(acc.per_seed.len(), 3);
        assert!(close(acc.mean, (2.0 + b.accuracy) / 3.0));
        assert!(acc.std > 0.0);
        let single = MetricsReport::aggregate(SplitKind::Validation, &labels(1), &[a]).unwrap();
        assert_eq!(single.metrics["rmse"].std, 0.0);
        assert!(MetricsReport::aggregate(SplitKind::Validation, &[], &[]).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        r.write(&path).unwrap();
        let back: MetricsReport = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    fn naive(y: &[f64], yh: &[f64]) -> [f64; 5] {
        let n = y.len() as f64;
        let (mut sq, mut ab, mut sy, mut sum_y, mut sum_e) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..y.len() {
            let e = y[i] - yh[i];
            sq += e * e;
            ab += e.abs();
            sy += y[i].abs();
            sum_y += y[i];
            sum_e += e;
        }
        let (my, me) = (sum_y / n, sum_e / n);
        let (mut tot, mut ve) = (0.0, 0.0);
        for i in 0..y.len() {
            tot += (y[i] - my) * (y[i] - my);
            let e = y[i] - yh[i];
            ve += (e - me) * (e - me);
        }
        [(sq / n).sqrt(), ab / n, 1.0 - ab / sy, 1.0 - sq / tot, 1.0 - ve / tot]
    }

    fn pairs() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2usize..40).prop_flat_map(|n| {
            (
                prop::collection::vec(0.0f64..50.0, n),
                prop::collection::vec(0.0f64..50.0, n),
            )
        })
    }

    fn all(y: &[f64], yh: &[f64]) -> [f64; 5] {
        [
            rmse(y, yh).unwrap(),
            mae(y, yh).unwrap(),
            accuracy(y, yh).unwrap(),
            r2(y, yh).unwrap(),
            var_score(y, yh).unwrap(),
        ]
    }

    proptest! {
        #[test]
        fn rmse_dominates_mae((y, yh) in pairs()) {
            prop_assert!(rmse(&y, &yh).unwrap() + TOL >= mae(&y, &yh).unwrap());
        }

        #[test]
        fn metrics_match_naive_and_upper_bounds((y, yh) in pairs()) {
            prop_assume!(variance(&y) > 1e-6);
            let got = all(&y, &yh);
            let want = naive(&y, &yh);
            for (g, w) in got.iter().zip(want) {
                prop_assert!((g - w).abs() <= TOL * w.abs().max(1.0), "{} vs {}", g, w);
            }
            prop_assert!(got[2] <= 1.0 && got[3] <= 1.0 && got[4] <= 1.0);
        }

        #[test]
        fn permutation_invariance((y, yh) in pairs(), seed in any::<u64>()) {
            prop_assume!(variance(&y) > 1e-6);
            use rand::{seq::SliceRandom, SeedableRng};
            let mut order: Vec<usize> = (0..y.len()).collect();
            order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let py: Vec<f64> = order.iter().map(|&i| y[i]).collect();
            let pyh: Vec<f64> = order.iter().map(|&i| yh[i]).collect();
            for (a, b) in all(&y, &yh).iter().zip(all(&py, &pyh)) {
                prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
            }
        }
    }
}
