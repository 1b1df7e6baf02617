//! Error metrics and experiment runners.
//!
//! "Normalized" errors are dB errors divided by the 200 dB evaluation range
//! (-250 to -50 dB); both are reported, under separate names. Predictions
//! and references are clamped to the evaluation range before comparison,
//! and ECDFs pool per-pixel errors over every evaluated tile.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{scenario_ids, split_scenarios, Sample, TruthSpec};
use crate::derive_seed;
use crate::propagate::{Generator, Heatmap};
use crate::unet::{predict_sample, train, train_from, ModelParams, TrainConfig};
use crate::{Error, Result, PG_MAX_DB, PG_MIN_DB, PG_RANGE_DB};

/// Absolute dB errors over the pixels valid in both heatmaps.
pub fn abs_errors_db(pred: &Heatmap, truth: &Heatmap) -> Result<Vec<f64>> {
    let (p, t) = (&pred.tile, &truth.tile);
    if p.size_px != t.size_px {
        return Err(Error::Shape(format!(
            "heatmaps of {}px and {}px cannot be compared",
            p.size_px, t.size_px
        )));
    }
    let errs: Vec<f64> = (0..p.values.len())
        .filter(|k| p.mask[*k] && t.mask[*k])
        .map(|k| {
            let a = p.values[k].clamp(PG_MIN_DB, PG_MAX_DB);
            let b = t.values[k].clamp(PG_MIN_DB, PG_MAX_DB);
            (a - b).abs()
        })
        .collect();
    if errs.is_empty() {
        return Err(Error::domain("heatmaps share no valid pixel"));
    }
    Ok(errs)
}

fn rms(errs: &[f64]) -> f64 {
    (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt()
}

/// dB RMSE over jointly valid pixels divided by the 200 dB range.
pub fn nrmse(pred: &Heatmap, truth: &Heatmap) -> Result<f64> {
    Ok(rms(&abs_errors_db(pred, truth)?) / PG_RANGE_DB)
}

/// Median with the midpoint rule on even counts; `sorted` must be
/// ascending and non-empty.
fn median_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Empirical CDF of normalized absolute errors.
#[derive(Debug, Clone, PartialEq)]
pub struct Ecdf {
    /// Errors ascending.
    pub errors: Vec<f64>,
    pub median: f64,
}

impl Ecdf {
    pub fn from_errors(mut errors: Vec<f64>) -> Result<Self> {
        if errors.is_empty() {
            return Err(Error::domain("ECDF of an empty error set"));
        }
        if errors.iter().any(|e| !e.is_finite() || *e < 0.0) {
            return Err(Error::domain("errors must be finite and non-negative"));
        }
        errors.sort_by(f64::total_cmp);
        let median = median_sorted(&errors);
        Ok(Self { errors, median })
    }

    /// Fraction of errors at or below `x`.
    pub fn eval(&self, x: f64) -> f64 {
        self.errors.partition_point(|e| *e <= x) as f64 / self.errors.len() as f64
    }

    /// `(error, k / n)` for every sample.
    pub fn points(&self) -> Vec<(f64, f64)> {
        let n = self.errors.len() as f64;
        self.errors
            .iter()
            .enumerate()
            .map(|(k, e)| (*e, (k + 1) as f64 / n))
            .collect()
    }

    /// At most `max_points` curve points at evenly spaced ranks, always
    /// including the last one.
    pub fn thinned(&self, max_points: usize) -> Vec<(f64, f64)> {
        let n = self.errors.len();
        let m = max_points.max(1).min(n);
        (1..=m)
            .map(|i| {
                let k = (i * n).div_ceil(m);
                (self.errors[k - 1], k as f64 / n as f64)
            })
            .collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>, max_points: usize) -> Result<()> {
        let rows: Vec<[String; 2]> = self
            .thinned(max_points)
            .into_iter()
            .map(|(e, f)| [e.to_string(), f.to_string()])
            .collect();
        write_csv(path.as_ref(), &["normalized_abs_error", "cumulative_fraction"], rows)
    }
}

/// ECDF of normalized absolute errors between two heatmaps.
pub fn ecdf(pred: &Heatmap, truth: &Heatmap) -> Result<Ecdf> {
    Ecdf::from_errors(abs_errors_db(pred, truth)?.iter().map(|e| e / PG_RANGE_DB).collect())
}

fn write_csv<const N: usize>(path: &Path, header: &[&str; N], rows: Vec<[String; N]>) -> Result<()> {
    let fmt = |e: csv::Error| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(fmt)?;
    w.write_record(header).map_err(fmt)?;
    for r in rows {
        w.write_record(&r).map_err(fmt)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub nrmse: f64,
    pub rmse_db: f64,
    /// Median normalized absolute error.
    pub median_abs_error: f64,
    pub median_abs_error_db: f64,
    pub n_pixels: usize,
    pub generator_compared: Generator,
    pub wall_clock_s: f64,
    #[serde(skip)]
    pub ecdf: Option<Ecdf>,
}

impl EvalReport {
    /// Report over pooled absolute dB errors.
    pub fn from_errors_db(errors_db: Vec<f64>, generator: Generator, wall_clock_s: f64) -> Result<Self> {
        let rmse_db = if errors_db.is_empty() { 0.0 } else { rms(&errors_db) };
        let ecdf = Ecdf::from_errors(errors_db.iter().map(|e| e / PG_RANGE_DB).collect())?;
        Ok(Self {
            nrmse: rmse_db / PG_RANGE_DB,
            rmse_db,
            median_abs_error: ecdf.median,
            median_abs_error_db: ecdf.median * PG_RANGE_DB,
            n_pixels: ecdf.errors.len(),
            generator_compared: generator,
            wall_clock_s,
            ecdf: Some(ecdf),
        })
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

/// Evaluates a heatmap source against the targets of `samples`, pooling
/// pixel errors.
pub fn evaluate_with<F>(samples: &[&Sample], generator: Generator, predict: F) -> Result<EvalReport>
where
    F: Fn(&Sample) -> Result<Heatmap> + Sync,
{
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let start = Instant::now();
    let per: Vec<Vec<f64>> = samples
        .par_iter()
        .map(|s| abs_errors_db(&predict(s)?, &s.target_heatmap()))
        .collect::<Result<_>>()?;
    let errors: Vec<f64> = per.into_iter().flatten().collect();
    EvalReport::from_errors_db(errors, generator, start.elapsed().as_secs_f64())
}

pub fn evaluate_model(params: &ModelParams, samples: &[&Sample]) -> Result<EvalReport> {
    evaluate_with(samples, Generator::Model, |s| Ok(predict_sample(params, s)?.heatmap))
}

pub fn evaluate_baseline(samples: &[&Sample]) -> Result<EvalReport> {
    evaluate_with(samples, Generator::Rough, |s| Ok(s.estimate_heatmap()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineComparison {
    pub model: EvalReport,
    pub baseline: EvalReport,
    /// Baseline median over model median; absent when the model median is 0.
    pub improvement_ratio: Option<f64>,
}

impl BaselineComparison {
    pub fn new(model: EvalReport, baseline: EvalReport) -> Self {
        let improvement_ratio = (model.median_abs_error > 0.0)
            .then(|| baseline.median_abs_error / model.median_abs_error);
        Self {
            model,
            baseline,
            improvement_ratio,
        }
    }
}

/// Model and rough-estimate errors against the same targets on the same
/// pixels. The model heatmap is valid exactly where the sample is, so both
/// reports cover identical pixel sets.
pub fn baseline_compare_with<F>(samples: &[&Sample], predict: F) -> Result<BaselineComparison>
where
    F: Fn(&Sample) -> Result<Heatmap> + Sync,
{
    let model = evaluate_with(samples, Generator::Model, predict)?;
    let baseline = evaluate_baseline(samples)?;
    Ok(BaselineComparison::new(model, baseline))
}

pub fn baseline_compare(params: &ModelParams, samples: &[&Sample]) -> Result<BaselineComparison> {
    baseline_compare_with(samples, |s| Ok(predict_sample(params, s)?.heatmap))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ratio: f64,
    pub mean_nrmse: f64,
    /// Sample standard deviation over repeats (0 for a single repeat).
    pub std_nrmse: f64,
    pub mean_median_abs_error: f64,
    pub runs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Ratios that could not be split, with the reason.
    pub skipped: Vec<(f64, String)>,
    pub master_seed: u64,
}

impl SweepTable {
    pub fn row(&self, ratio: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| (r.ratio - ratio).abs() < 1e-9)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let rows = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.ratio.to_string(),
                    r.mean_nrmse.to_string(),
                    r.std_nrmse.to_string(),
                    r.mean_median_abs_error.to_string(),
                    r.runs.len().to_string(),
                ]
            })
            .collect();
        write_csv(
            path.as_ref(),
            &["ratio", "mean_nrmse", "std_nrmse", "mean_median_abs_error", "repeats"],
            rows,
        )
    }
}

/// Default sweep ratios 0.1 to 0.9.
pub fn default_ratios() -> Vec<f64> {
    (1..=9).map(|k| k as f64 / 10.0).collect()
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() > 1 {
        (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// For every ratio, `repeats` seeded scenario splits, each trained from
/// scratch and evaluated on its held-out scenarios.
pub fn split_sweep(
    corpus: &[Sample],
    ratios: &[f64],
    repeats: usize,
    cfg: &TrainConfig,
    master_seed: u64,
) -> Result<SweepTable> {
    if repeats == 0 {
        return Err(Error::domain("repeats must be at least 1"));
    }
    let ids = scenario_ids(corpus);
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (ri, &ratio) in ratios.iter().enumerate() {
        let mut runs = Vec::with_capacity(repeats);
        let mut medians = Vec::with_capacity(repeats);
        let mut failure = None;
        for rep in 0..repeats {
            let cell = (ri * 1000 + rep) as u64;
            let plan = match split_scenarios(&ids, ratio, derive_seed(master_seed, 2 * cell)) {
                Ok(p) => p,
                Err(e) => {
                    failure = Some(e.to_string());
                    break;
                }
            };
            let (train_set, test_set) = plan.apply(corpus);
            let run_cfg = TrainConfig {
                seed: derive_seed(master_seed, 2 * cell + 1),
                ..cfg.clone()
            };
            let out = train(&train_set, &run_cfg)?;
            let report = evaluate_model(&out.params, &test_set)?;
            log::info!("sweep ratio {ratio} repeat {rep}: nrmse {:.5}", report.nrmse);
            runs.push(report.nrmse);
            medians.push(report.median_abs_error);
        }
        if let Some(reason) = failure {
            log::warn!("sweep ratio {ratio} skipped: {reason}");
            skipped.push((ratio, reason));
            continue;
        }
        let (mean_nrmse, std_nrmse) = mean_std(&runs);
        rows.push(SweepRow {
            ratio,
            mean_nrmse,
            std_nrmse,
            mean_median_abs_error: mean_std(&medians).0,
            runs,
        });
    }
    Ok(SweepTable {
        rows,
        skipped,
        master_seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineReport {
    pub before: EvalReport,
    pub after: EvalReport,
    pub finetune_ids: Vec<u64>,
    pub holdout_ids: Vec<u64>,
}

/// Evaluates `pretrained` on a scenario holdout of `measurement_like`,
/// fine-tunes on the remaining scenarios and re-evaluates on the same
/// holdout. Returns the report and the tuned parameters.
pub fn refine_experiment(
    pretrained: &ModelParams,
    measurement_like: &[Sample],
    holdout_fraction: f64,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(RefineReport, ModelParams)> {
    if measurement_like.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let plan = split_scenarios(&scenario_ids(measurement_like), 1.0 - holdout_fraction, seed)?;
    let (tune, holdout) = plan.apply(measurement_like);
    let before = evaluate_model(pretrained, &holdout)?;
    let tuned = train_from(pretrained.clone(), &tune, cfg)?;
    let after = evaluate_model(&tuned.params, &holdout)?;
    let report = RefineReport {
        before,
        after,
        finetune_ids: plan.train_ids,
        holdout_ids: plan.test_ids,
    };
    Ok((report, tuned.params))
}

/// Reference used for "measurement-like" data: a changed ground reflection
/// coefficient and a random per-scenario level offset.
pub fn measurement_like_truth() -> TruthSpec {
    TruthSpec {
        reflection_coeff: Some(-0.6),
        offset_db: (1.0, 3.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodata::GridTile;
    use proptest::prelude::*;

    fn hm(values: Vec<f64>, generator: Generator) -> Heatmap {
        let n = (values.len() as f64).sqrt() as usize;
        Heatmap {
            tile: GridTile::new(n, 1.0, values, vec![true; n * n]).unwrap(),
            generator,
        }
    }

    #[test]
    fn nrmse_examples() {
        let t = hm(vec![-100.0; 16], Generator::Oracle);
        assert_eq!(nrmse(&t, &t).unwrap(), 0.0);
        let off = hm(vec![-98.0; 16], Generator::Model);
        assert!((nrmse(&off, &t).unwrap() - 0.01).abs() < 1e-12);
        let half: Vec<f64> = (0..16).map(|k| if k < 8 { -96.0 } else { -100.0 }).collect();
        let want = (0.5f64 * 16.0).sqrt() / 200.0;
        assert!((nrmse(&hm(half, Generator::Model), &t).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.01414).abs() < 1e-5);
    }

    #[test]
    fn no_overlap_is_domain_error() {
        let mut a = hm(vec![-100.0; 4], Generator::Model);
        let mut b = a.clone();
        a.tile.mask = vec![true, true, false, false];
        b.tile.mask = vec![false, false, true, true];
        assert!(matches!(nrmse(&a, &b), Err(Error::Domain(_))));
        assert!(matches!(nrmse(&a, &hm(vec![0.0; 9], Generator::Oracle)), Err(Error::Shape(_))));
    }

    #[test]
    fn clamps_to_evaluation_range() {
        let a = hm(vec![-300.0; 4], Generator::Model);
        let b = hm(vec![-250.0; 4], Generator::Oracle);
        assert_eq!(nrmse(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn ecdf_examples() {
        let zero = Ecdf::from_errors(vec![0.0; 4]).unwrap();
        assert_eq!(zero.median, 0.0);
        let mixed: Vec<f64> = (0..10).map(|k| if k % 2 == 0 { 0.01 } else { 0.03 }).collect();
        let e = Ecdf::from_errors(mixed).unwrap();
        assert!((e.median - 0.02).abs() < 1e-15);
        assert_eq!(e.eval(0.03), 1.0);
        assert_eq!(e.eval(0.015), 0.5);
        let pts = e.points();
        assert_eq!(pts.last().unwrap().1, 1.0);
        assert!(pts.windows(2).all(|w| w[0].1 < w[1].1 && w[0].0 <= w[1].0));
        assert!(pts[0].1 > 0.0);
        let thin = e.thinned(3);
        assert_eq!(thin.len(), 3);
        assert_eq!(*thin.last().unwrap(), (0.03, 1.0));
        assert!(Ecdf::from_errors(vec![]).is_err());
    }

    #[test]
    fn comparison_ratio_rules() {
        let rep = |median: f64| EvalReport {
            nrmse: median,
            rmse_db: 0.0,
            median_abs_error: median,
            median_abs_error_db: median * 200.0,
            n_pixels: 1,
            generator_compared: Generator::Model,
            wall_clock_s: 0.0,
            ecdf: None,
        };
        assert_eq!(BaselineComparison::new(rep(0.0), rep(0.4)).improvement_ratio, None);
        assert_eq!(BaselineComparison::new(rep(0.1), rep(0.4)).improvement_ratio, Some(4.0));
    }

    #[test]
    fn report_json_has_both_units() {
        let r = EvalReport::from_errors_db(vec![2.0, 4.0], Generator::Model, 0.5).unwrap();
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        assert_eq!(v["median_abs_error_db"], 3.0);
        assert_eq!(v["median_abs_error"], 0.015);
        assert_eq!(v["generator_compared"], "model");
        assert!(v.get("ecdf").is_none());
    }

    proptest! {
        #[test]
        fn nrmse_symmetric_and_permutation_invariant(
            a in proptest::collection::vec(-250.0f64..-50.0, 16),
            b in proptest::collection::vec(-250.0f64..-50.0, 16),
            shift in 0usize..16,
        ) {
            let (pa, pb) = (hm(a.clone(), Generator::Model), hm(b.clone(), Generator::Oracle));
            let x = nrmse(&pa, &pb).unwrap();
            prop_assert_eq!(x, nrmse(&pb, &pa).unwrap());
            prop_assert!(x >= 0.0);
            let mut ra = a.clone();
            let mut rb = b.clone();
            ra.rotate_left(shift);
            rb.rotate_left(shift);
            let y = nrmse(&hm(ra, Generator::Model), &hm(rb, Generator::Oracle)).unwrap();
            prop_assert!((x - y).abs() < 1e-12);
            let ea = ecdf(&pa, &pb).unwrap();
            prop_assert_eq!(ea.median, ecdf(&pb, &pa).unwrap().median);
            prop_assert_eq!(x == 0.0, a == b);
        }
    }
}
