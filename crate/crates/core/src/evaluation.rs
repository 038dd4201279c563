//! Population template construction and evaluation metrics: centeredness,
//! node-strength error, ROI discriminability, top-k reproducibility, and the
//! cross-validation and variant-comparison drivers that aggregate them.

use crate::dataset::{format_matrix, kfold_split, node_strengths, DatasetError, LongitudinalDataset};
use crate::losses::frobenius_distance;
use crate::model::{check_cbt_invariants, forward_subject_with_cycles, Cbt, Variant};
use crate::training::{train, TrainingConfig, TrainingError};
use ndarray::{Array2, Axis};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};
use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvaluationError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: TrainingError,
    },
}

/// The population template per timepoint.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationCbtTrajectory {
    pub cbts: Vec<Cbt>,
}

impl PopulationCbtTrajectory {
    pub fn n_timepoints(&self) -> usize {
        self.cbts.len()
    }

    pub fn n_rois(&self) -> usize {
        self.cbts[0].nrows()
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        if self.cbts.is_empty() {
            return Err("trajectory has no timepoints".into());
        }
        for (t, c) in self.cbts.iter().enumerate() {
            check_cbt_invariants(c).map_err(|e| format!("timepoint {t}: {e}"))?;
        }
        Ok(())
    }
}

/// Median of `buf` in place: middle element for odd counts, mean of the two
/// middle order statistics for even counts. Selection-based, O(n).
fn median_in_place(buf: &mut [f64]) -> f64 {
    let n = buf.len();
    assert!(n > 0, "median of empty slice");
    let mid = n / 2;
    let (_, &mut hi, _) = buf.select_nth_unstable_by(mid, f64::total_cmp);
    if n % 2 == 1 {
        hi
    } else {
        // After selection everything left of `mid` is <= hi; its maximum is
        // the lower middle order statistic.
        let lo = buf[..mid]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    }
}

/// Element-wise median across subjects, per timepoint. The median of
/// symmetric zero-diagonal matrices keeps both properties.
///
/// Panics if `subject_cbts` is empty or dimensions disagree.
pub fn population_cbt(subject_cbts: &[Vec<Cbt>]) -> PopulationCbtTrajectory {
    assert!(!subject_cbts.is_empty(), "population_cbt: no subjects");
    let n_t = subject_cbts[0].len();
    assert!(n_t > 0, "population_cbt: no timepoints");
    let dim = subject_cbts[0][0].dim();
    for (s, traj) in subject_cbts.iter().enumerate() {
        assert_eq!(traj.len(), n_t, "subject {s}: timepoint count mismatch");
        for (t, c) in traj.iter().enumerate() {
            assert_eq!(c.dim(), dim, "subject {s}, timepoint {t}: shape mismatch");
        }
    }
    let mut buf = vec![0.0; subject_cbts.len()];
    let cbts = (0..n_t)
        .map(|t| {
            Array2::from_shape_fn(dim, |(i, j)| {
                for (s, traj) in subject_cbts.iter().enumerate() {
                    buf[s] = traj[t][(i, j)];
                }
                median_in_place(&mut buf)
            })
        })
        .collect();
    PopulationCbtTrajectory { cbts }
}

/// Per-timepoint centeredness of a template trajectory against a test set:
/// the unweighted mean Frobenius distance to every (subject, view) pair.
///
/// Panics on dimension mismatch.
pub fn centeredness_score(p: &PopulationCbtTrajectory, test: &LongitudinalDataset) -> Vec<f64> {
    assert_eq!(
        p.n_timepoints(),
        test.dims.n_timepoints,
        "timepoint count mismatch"
    );
    assert_eq!(p.n_rois(), test.dims.n_rois, "ROI count mismatch");
    let denom = (test.n_subjects() * test.dims.n_views) as f64;
    (0..p.n_timepoints())
        .map(|t| {
            let total: f64 = test
                .subjects
                .iter()
                .flat_map(|s| s.observations[t].views())
                .map(|view| frobenius_distance(&p.cbts[t], view))
                .sum();
            total / denom
        })
        .collect()
}

/// Per-timepoint mean absolute error between the template's node strengths
/// and a reference strength vector. The reference at each timepoint is the
/// node strength of the element-wise median, across subjects, of each
/// subject's view-averaged connectivity matrix.
///
/// Panics on dimension mismatch.
pub fn node_strength_mae(p: &PopulationCbtTrajectory, reference: &LongitudinalDataset) -> Vec<f64> {
    assert_eq!(
        p.n_timepoints(),
        reference.dims.n_timepoints,
        "timepoint count mismatch"
    );
    assert_eq!(p.n_rois(), reference.dims.n_rois, "ROI count mismatch");
    let n_r = p.n_rois();
    (0..p.n_timepoints())
        .map(|t| {
            let averaged: Vec<Array2<f64>> = reference
                .subjects
                .iter()
                .map(|s| {
                    let obs = &s.observations[t];
                    let mut acc = Array2::zeros((n_r, n_r));
                    for v in obs.views() {
                        acc += v;
                    }
                    acc / obs.n_views() as f64
                })
                .collect();
            let mut buf = vec![0.0; averaged.len()];
            let median = Array2::from_shape_fn((n_r, n_r), |(i, j)| {
                for (s, m) in averaged.iter().enumerate() {
                    buf[s] = m[(i, j)];
                }
                median_in_place(&mut buf)
            });
            let predicted = node_strengths(&p.cbts[t]);
            let target = node_strengths(&median);
            predicted
                .iter()
                .zip(&target)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / n_r as f64
        })
        .collect()
}

/// Per-ROI discriminability between two templates.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminabilityRanking {
    /// Row sums of the absolute difference matrix, by ROI index.
    pub scores: Vec<f64>,
    /// ROI indices by descending score; ties broken by lower index.
    pub ranking: Vec<usize>,
}

impl DiscriminabilityRanking {
    pub fn check_invariants(&self) -> Result<(), String> {
        let n = self.scores.len();
        let mut seen = vec![false; n];
        for &r in &self.ranking {
            if r >= n || seen[r] {
                return Err(format!("ranking is not a permutation of 0..{n}"));
            }
            seen[r] = true;
        }
        if self.ranking.len() != n {
            return Err(format!("ranking is not a permutation of 0..{n}"));
        }
        for w in self.ranking.windows(2) {
            if self.scores[w[0]] < self.scores[w[1]] {
                return Err("scores along the ranking increase".into());
            }
        }
        Ok(())
    }

    pub fn top_k(&self, k: usize) -> &[usize] {
        &self.ranking[..k]
    }
}

/// Score each ROI by how much two templates disagree on it: take the
/// absolute element-wise difference and sum each row.
///
/// Panics on dimension mismatch.
pub fn discriminability_ranking(cbt_a: &Cbt, cbt_b: &Cbt) -> DiscriminabilityRanking {
    assert_eq!(cbt_a.dim(), cbt_b.dim(), "template shape mismatch");
    let residual = (cbt_a - cbt_b).mapv(f64::abs);
    let scores: Vec<f64> = residual.sum_axis(Axis(1)).to_vec();
    let mut ranking: Vec<usize> = (0..scores.len()).collect();
    ranking.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    DiscriminabilityRanking { scores, ranking }
}

/// Fraction of shared ROIs among the two top-k sets: `|A ∩ B| / k`.
///
/// Panics unless `1 <= k <= n_r` and the rankings have equal length.
pub fn topk_overlap(a: &DiscriminabilityRanking, b: &DiscriminabilityRanking, k: usize) -> f64 {
    assert_eq!(a.ranking.len(), b.ranking.len(), "ranking length mismatch");
    assert!(
        k >= 1 && k <= a.ranking.len(),
        "k = {k} out of range 1..={}",
        a.ranking.len()
    );
    let set_a: BTreeSet<usize> = a.top_k(k).iter().copied().collect();
    let shared = b.top_k(k).iter().filter(|r| set_a.contains(r)).count();
    shared as f64 / k as f64
}

/// Two-tailed paired t-test over matched samples: `t = d̄ / (s_d / √n)` on
/// the differences, n−1 degrees of freedom. Degenerate zero-variance
/// differences give (0, 1) when the mean difference is zero and (±∞, 0)
/// otherwise.
///
/// Panics unless both slices have the same length, at least 2.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> (f64, f64) {
    assert_eq!(a.len(), b.len(), "paired samples must have equal length");
    let n = a.len();
    assert!(n >= 2, "paired t-test needs at least 2 pairs");
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    if sd == 0.0 {
        return if mean == 0.0 {
            (0.0, 1.0)
        } else {
            (mean.signum() * f64::INFINITY, 0.0)
        };
    }
    let t = mean / (sd / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("valid dof");
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    (t, p)
}

/// Which parameter snapshot a metric row was computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Strategy {
    /// Parameters after the final epoch.
    Last,
    /// Snapshot with the lowest held-out centeredness.
    Best,
}

impl Strategy {
    pub const ALL: [Strategy; 2] = [Strategy::Last, Strategy::Best];

    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Last => "last",
            Strategy::Best => "best",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Metrics of one (fold, variant, strategy) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldMetrics {
    pub fold: usize,
    pub variant: Variant,
    pub strategy: Strategy,
    /// Centeredness per timepoint on the fold's test split.
    pub centeredness: Vec<f64>,
    /// Node-strength MAE per timepoint on the fold's test split.
    pub node_strength_mae: Vec<f64>,
}

impl FoldMetrics {
    pub fn mean_centeredness(&self) -> f64 {
        self.centeredness.iter().sum::<f64>() / self.centeredness.len() as f64
    }

    pub fn mean_node_strength_mae(&self) -> f64 {
        self.node_strength_mae.iter().sum::<f64>() / self.node_strength_mae.len() as f64
    }
}

/// Mean ± sample standard deviation across folds for one (variant, strategy)
/// pair, reported per timepoint and aggregated over timepoints.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub variant: Variant,
    pub strategy: Strategy,
    pub centeredness_mean: Vec<f64>,
    pub centeredness_std: Vec<f64>,
    pub mae_mean: Vec<f64>,
    pub mae_std: Vec<f64>,
    pub overall_centeredness_mean: f64,
    pub overall_centeredness_std: f64,
    pub overall_mae_mean: f64,
    pub overall_mae_std: f64,
}

/// Paired two-tailed t-test between two variants' fold-wise mean
/// centeredness, one per strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantComparison {
    pub variant_a: Variant,
    pub variant_b: Variant,
    pub strategy: Strategy,
    pub t_statistic: f64,
    pub p_value: f64,
}

/// Cross-validation results: raw per-fold rows, aggregates, and (when more
/// than one variant is present) pairwise significance tests.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub n_folds: usize,
    pub folds: Vec<FoldMetrics>,
    pub aggregates: Vec<AggregateRow>,
    pub comparisons: Vec<VariantComparison>,
}

fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl MetricsReport {
    /// Group per-fold rows into aggregates and pairwise comparisons.
    /// Variants keep first-appearance order; comparisons need at least
    /// two folds and two variants.
    pub fn from_folds(n_folds: usize, folds: Vec<FoldMetrics>) -> MetricsReport {
        let mut variants: Vec<Variant> = Vec::new();
        for f in &folds {
            if !variants.contains(&f.variant) {
                variants.push(f.variant);
            }
        }
        let rows_for = |variant: Variant, strategy: Strategy| -> Vec<&FoldMetrics> {
            folds
                .iter()
                .filter(|f| f.variant == variant && f.strategy == strategy)
                .collect()
        };

        let mut aggregates = Vec::new();
        for &variant in &variants {
            for strategy in Strategy::ALL {
                let rows = rows_for(variant, strategy);
                if rows.is_empty() {
                    continue;
                }
                let n_t = rows[0].centeredness.len();
                let per_t = |extract: &dyn Fn(&FoldMetrics) -> &[f64]| -> (Vec<f64>, Vec<f64>) {
                    let mut means = Vec::with_capacity(n_t);
                    let mut stds = Vec::with_capacity(n_t);
                    for t in 0..n_t {
                        let vals: Vec<f64> = rows.iter().map(|r| extract(r)[t]).collect();
                        let (m, s) = mean_and_std(&vals);
                        means.push(m);
                        stds.push(s);
                    }
                    (means, stds)
                };
                let (c_mean, c_std) = per_t(&|r| &r.centeredness);
                let (m_mean, m_std) = per_t(&|r| &r.node_strength_mae);
                let overall_c: Vec<f64> = rows.iter().map(|r| r.mean_centeredness()).collect();
                let overall_m: Vec<f64> = rows.iter().map(|r| r.mean_node_strength_mae()).collect();
                let (oc_mean, oc_std) = mean_and_std(&overall_c);
                let (om_mean, om_std) = mean_and_std(&overall_m);
                aggregates.push(AggregateRow {
                    variant,
                    strategy,
                    centeredness_mean: c_mean,
                    centeredness_std: c_std,
                    mae_mean: m_mean,
                    mae_std: m_std,
                    overall_centeredness_mean: oc_mean,
                    overall_centeredness_std: oc_std,
                    overall_mae_mean: om_mean,
                    overall_mae_std: om_std,
                });
            }
        }

        let mut comparisons = Vec::new();
        if n_folds >= 2 {
            for i in 0..variants.len() {
                for j in i + 1..variants.len() {
                    for strategy in Strategy::ALL {
                        let a: Vec<f64> = rows_for(variants[i], strategy)
                            .iter()
                            .map(|r| r.mean_centeredness())
                            .collect();
                        let b: Vec<f64> = rows_for(variants[j], strategy)
                            .iter()
                            .map(|r| r.mean_centeredness())
                            .collect();
                        if a.len() != b.len() || a.len() < 2 {
                            continue;
                        }
                        let (t, p) = paired_t_test(&a, &b);
                        comparisons.push(VariantComparison {
                            variant_a: variants[i],
                            variant_b: variants[j],
                            strategy,
                            t_statistic: t,
                            p_value: p,
                        });
                    }
                }
            }
        }

        MetricsReport {
            n_folds,
            folds,
            aggregates,
            comparisons,
        }
    }

    /// All metrics must be finite and non-negative.
    pub fn check_invariants(&self) -> Result<(), String> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        for f in &self.folds {
            for &x in f.centeredness.iter().chain(&f.node_strength_mae) {
                if !ok(x) {
                    return Err(format!(
                        "fold {} ({}, {}) carries invalid metric {x}",
                        f.fold, f.variant, f.strategy
                    ));
                }
            }
        }
        for a in &self.aggregates {
            let all = a
                .centeredness_mean
                .iter()
                .chain(&a.centeredness_std)
                .chain(&a.mae_mean)
                .chain(&a.mae_std);
            for &x in all {
                if !ok(x) {
                    return Err(format!(
                        "aggregate ({}, {}) carries invalid metric {x}",
                        a.variant, a.strategy
                    ));
                }
            }
        }
        Ok(())
    }

    /// Long-format per-fold table, one row per (variant, strategy, fold,
    /// timepoint).
    pub fn folds_csv(&self) -> String {
        let mut out = String::from("variant,strategy,fold,timepoint,centeredness,node_strength_mae\n");
        for f in &self.folds {
            for t in 0..f.centeredness.len() {
                out.push_str(&format!(
                    "{},{},{},{},{:.16e},{:.16e}\n",
                    f.variant,
                    f.strategy,
                    f.fold,
                    t + 1,
                    f.centeredness[t],
                    f.node_strength_mae[t]
                ));
            }
        }
        out
    }

    /// Aggregate table; the `timepoint` column is 1-based, with an extra
    /// `overall` row holding the mean over timepoints.
    pub fn aggregate_csv(&self) -> String {
        let mut out = String::from(
            "variant,strategy,timepoint,centeredness_mean,centeredness_std,mae_mean,mae_std\n",
        );
        for a in &self.aggregates {
            for t in 0..a.centeredness_mean.len() {
                out.push_str(&format!(
                    "{},{},{},{:.16e},{:.16e},{:.16e},{:.16e}\n",
                    a.variant,
                    a.strategy,
                    t + 1,
                    a.centeredness_mean[t],
                    a.centeredness_std[t],
                    a.mae_mean[t],
                    a.mae_std[t]
                ));
            }
            out.push_str(&format!(
                "{},{},overall,{:.16e},{:.16e},{:.16e},{:.16e}\n",
                a.variant,
                a.strategy,
                a.overall_centeredness_mean,
                a.overall_centeredness_std,
                a.overall_mae_mean,
                a.overall_mae_std
            ));
        }
        out
    }

    /// Human-readable summary. The header states the metric conventions so
    /// the numbers are interpretable on their own.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "cross-validation report ({} folds)\n\
             centeredness: mean Frobenius distance from the population template\n\
             to every test (subject, view) pair, unweighted.\n\
             node-strength MAE: reference strengths come from the element-wise\n\
             median across subjects of each subject's view-averaged matrix.\n\
             aggregates: mean +/- sample standard deviation across folds.\n\n",
            self.n_folds
        ));
        for a in &self.aggregates {
            out.push_str(&format!(
                "{} ({}): centeredness {:.6} +/- {:.6}, node-strength MAE {:.6} +/- {:.6}\n",
                a.variant,
                a.strategy,
                a.overall_centeredness_mean,
                a.overall_centeredness_std,
                a.overall_mae_mean,
                a.overall_mae_std
            ));
        }
        if !self.comparisons.is_empty() {
            out.push('\n');
            for c in &self.comparisons {
                out.push_str(&format!(
                    "{} vs {} ({}): paired t = {:.6}, two-tailed p = {:.6}\n",
                    c.variant_a, c.variant_b, c.strategy, c.t_statistic, c.p_value
                ));
            }
        }
        out
    }
}

fn fold_metrics(
    dataset: &LongitudinalDataset,
    config: &TrainingConfig,
    fold_index: usize,
    train_ids: &[String],
    test_ids: &[String],
) -> Result<Vec<FoldMetrics>, EvaluationError> {
    let train_set = dataset.subset(train_ids);
    let test_set = dataset.subset(test_ids);
    let mut fold_config = config.clone();
    fold_config.seed = config.seed.wrapping_add(fold_index as u64);
    let out = train(&train_set, Some(&test_set), &fold_config).map_err(|source| {
        EvaluationError::Fold {
            fold: fold_index,
            source,
        }
    })?;

    let n_t = dataset.dims.n_timepoints;
    let cycles = fold_config.effective_cycles();
    let mut rows = Vec::with_capacity(2);
    for (strategy, params) in [(Strategy::Last, &out.last), (Strategy::Best, &out.best)] {
        let per_subject: Vec<Vec<Cbt>> = train_set
            .subjects
            .iter()
            .map(|s| forward_subject_with_cycles(s.baseline(), params, n_t, cycles))
            .collect();
        let pop = population_cbt(&per_subject);
        rows.push(FoldMetrics {
            fold: fold_index,
            variant: fold_config.variant,
            strategy,
            centeredness: centeredness_score(&pop, &test_set),
            node_strength_mae: node_strength_mae(&pop, &test_set),
        });
    }
    Ok(rows)
}

/// K-fold cross-validation: per fold, train on the train split with the test
/// split as the held-out selection set, rebuild the population template from
/// the training subjects, and score it on the test split for both the last
/// and the best parameters. Fold seeds derive from the base seed by adding
/// the fold index; folds run in parallel.
pub fn crossval(
    dataset: &LongitudinalDataset,
    config: &TrainingConfig,
    n_folds: usize,
) -> Result<MetricsReport, EvaluationError> {
    let splits = kfold_split(dataset, n_folds, config.seed)?;
    let per_fold: Vec<Vec<FoldMetrics>> = splits
        .par_iter()
        .map(|split| {
            fold_metrics(
                dataset,
                config,
                split.fold_index,
                &split.train_ids,
                &split.test_ids,
            )
        })
        .collect::<Result<_, _>>()?;
    Ok(MetricsReport::from_folds(
        n_folds,
        per_fold.into_iter().flatten().collect(),
    ))
}

/// Run [`crossval`] once per variant over identical folds (same base seed,
/// same splits) so fold-wise comparisons are paired, then merge everything
/// into one report with pairwise significance tests.
///
/// Panics if `variants` is empty.
pub fn compare_variants(
    dataset: &LongitudinalDataset,
    base_config: &TrainingConfig,
    variants: &[Variant],
    n_folds: usize,
) -> Result<MetricsReport, EvaluationError> {
    assert!(!variants.is_empty(), "no variants to compare");
    let splits = kfold_split(dataset, n_folds, base_config.seed)?;
    let mut all_folds = Vec::new();
    for &variant in variants {
        let mut config = base_config.clone();
        config.variant = variant;
        let per_fold: Vec<Vec<FoldMetrics>> = splits
            .par_iter()
            .map(|split| {
                fold_metrics(
                    dataset,
                    &config,
                    split.fold_index,
                    &split.train_ids,
                    &split.test_ids,
                )
            })
            .collect::<Result<_, _>>()?;
        all_folds.extend(per_fold.into_iter().flatten());
    }
    Ok(MetricsReport::from_folds(n_folds, all_folds))
}

/// Write one view file per timepoint (`cbt_t1.csv`, `cbt_t2.csv`, …) in the
/// dataset's matrix format; returns the paths in timepoint order.
pub fn export_population_cbt(
    p: &PopulationCbtTrajectory,
    dir: &Path,
) -> Result<Vec<PathBuf>, EvaluationError> {
    std::fs::create_dir_all(dir).map_err(|source| DatasetError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut paths = Vec::with_capacity(p.cbts.len());
    for (t, c) in p.cbts.iter().enumerate() {
        let path = dir.join(format!("cbt_t{}.csv", t + 1));
        std::fs::write(&path, format_matrix(c)).map_err(|source| DatasetError::Io {
            path: path.clone(),
            source,
        })?;
        paths.push(path);
    }
    Ok(paths)
}
