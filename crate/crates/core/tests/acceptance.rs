//! Release gate: ten end-to-end checks over the whole toolkit. Every test
//! prints exactly one `criterion N: PASS/FAIL` line (visible with
//! `--nocapture`); tolerances and runtime bounds are pinned inline.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use remi_core::{
    cbt_from_hidden, cbt_from_hidden_reference, centeredness_score, check_cbt_invariants,
    compare_variants, crossval, discriminability_ranking, finite_diff_check, forward_subject,
    frobenius_distance, generate_synthetic, node_strength_mae, node_strengths, population_cbt,
    sample_subset, save_checkpoint, tape_forward_subject, tape_subject_loss, time_reg_loss,
    topk_overlap, train, view_weights, Cbt, ModelParams, MultigraphObservation, Strategy,
    SubjectTrajectory, TrainingConfig, Variant,
};
use std::time::{Duration, Instant};

fn gate(criterion: usize, name: &str, outcome: Result<String, String>) {
    match outcome {
        Ok(detail) => println!("criterion {criterion} ({name}): PASS [{detail}]"),
        Err(detail) => {
            println!("criterion {criterion} ({name}): FAIL [{detail}]");
            panic!("criterion {criterion} ({name}) failed: {detail}");
        }
    }
}

fn within(elapsed: Duration, bound: Duration, label: &str) -> Result<(), String> {
    if elapsed <= bound {
        Ok(())
    } else {
        Err(format!(
            "{label} took {:.1}s, bound is {:.0}s",
            elapsed.as_secs_f64(),
            bound.as_secs_f64()
        ))
    }
}

/// The shared synthetic benchmark: 40 subjects, 10 ROIs, 4 views,
/// 2 timepoints, seed 42, default drift and noise scales.
fn benchmark_dataset() -> remi_core::LongitudinalDataset {
    generate_synthetic(40, 10, 4, 2, 42, 0.05, 0.05)
}

/// Published operating point: lr 0.0008, alpha 0.3, k 10, 100 epochs.
fn benchmark_config(variant: Variant) -> TrainingConfig {
    TrainingConfig {
        variant,
        ..TrainingConfig::default()
    }
}

#[test]
fn criterion_01_gradient_correctness() {
    let started = Instant::now();
    let outcome = (|| {
        let ds = generate_synthetic(6, 6, 2, 3, 4242, 0.05, 0.05);
        let subject = &ds.subjects[0];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let subset = sample_subset(&ds.subject_ids(), 3, &mut rng).map_err(|e| e.to_string())?;
        let samples: Vec<&SubjectTrajectory> = subset
            .iter()
            .map(|id| ds.subject(id).expect("id from this dataset"))
            .collect();
        let template = ModelParams::init(Variant::Full, &[3, 5, 4], 2, 11);
        let init = template.flat_arrays();
        let max_rel = finite_diff_check(
            |tape, values| {
                let lifted = template.lift_from_values(values);
                let fwd = tape_forward_subject(tape, subject.baseline(), &lifted, 3, 1);
                tape_subject_loss(tape, &fwd.cbts, &samples, 0.3).total
            },
            &init,
            1e-6,
        )
        .map_err(|e| format!("finite-difference check aborted: {e}"))?;
        if max_rel > 1e-4 {
            return Err(format!("max relative gradient error {max_rel:.3e} > 1e-4"));
        }
        let elapsed = started.elapsed();
        within(elapsed, Duration::from_secs(60), "gradient check")?;
        Ok(format!(
            "max relative error {max_rel:.3e} over {} parameter matrices, {:.1}s",
            init.len(),
            elapsed.as_secs_f64()
        ))
    })();
    gate(1, "gradient correctness", outcome);
}

#[test]
fn criterion_02_cbt_pipeline_equivalence() {
    let started = Instant::now();
    let outcome = (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let n_r = rng.random_range(1..=12);
            let n_h = rng.random_range(1..=8);
            let h = Array2::from_shape_fn((n_r, n_h), |_| rng.random_range(-2.0..2.0));
            let fast = cbt_from_hidden(&h);
            let reference = cbt_from_hidden_reference(&h);
            let diff = (&fast - &reference)
                .iter()
                .fold(0.0f64, |acc, &x| acc.max(x.abs()));
            worst = worst.max(diff);
        }
        if worst > 1e-12 {
            return Err(format!("max template disagreement {worst:.3e} > 1e-12"));
        }
        let elapsed = started.elapsed();
        within(elapsed, Duration::from_secs(10), "equivalence sweep")?;
        Ok(format!(
            "1000 embeddings, max disagreement {worst:.3e}, {:.1}s",
            elapsed.as_secs_f64()
        ))
    })();
    gate(2, "template pipeline equivalence", outcome);
}

#[test]
fn criterion_03_structural_invariants() {
    let outcome = (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let variants = [
            Variant::Vanilla,
            Variant::Cyclic,
            Variant::CyclicMinmax,
            Variant::Full,
        ];
        let mut forwards = 0usize;
        let mut checked = 0usize;
        for round in 0..30 {
            let n_r = rng.random_range(2..=8);
            let n_v = rng.random_range(1..=4);
            let n_t = rng.random_range(1..=4);
            let ds = generate_synthetic(4, n_r, n_v, n_t, 1000 + round, 0.05, 0.05);
            let d1 = rng.random_range(2..=6);
            let d2 = rng.random_range(2..=6);
            let params = ModelParams::init(
                variants[round as usize % variants.len()],
                &[d1, d2],
                n_v,
                round,
            );
            let mut per_subject = Vec::new();
            for s in &ds.subjects {
                let cbts = forward_subject(s.baseline(), &params, n_t);
                forwards += 1;
                for (t, c) in cbts.iter().enumerate() {
                    check_cbt_invariants(c)
                        .map_err(|e| format!("subject template at timepoint {t}: {e}"))?;
                    checked += 1;
                }
                per_subject.push(cbts);
            }
            let pop = population_cbt(&per_subject);
            for (t, c) in pop.cbts.iter().enumerate() {
                check_cbt_invariants(c)
                    .map_err(|e| format!("population template at timepoint {t}: {e}"))?;
                checked += 1;
            }
        }
        if forwards < 100 {
            return Err(format!("only {forwards} forward passes, need at least 100"));
        }
        Ok(format!(
            "{forwards} forward passes, {checked} templates symmetric, non-negative, zero-diagonal"
        ))
    })();
    gate(3, "structural invariants", outcome);
}

#[test]
fn criterion_04_median_oracle() {
    fn sorted_median(values: &[f64]) -> f64 {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }
    let outcome = (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut even_populations = 0usize;
        for round in 0..200usize {
            // Alternate even and odd subject counts.
            let n_s = 2 + (round % 7);
            if n_s % 2 == 0 {
                even_populations += 1;
            }
            let n_r = rng.random_range(2..=6);
            let n_t = rng.random_range(1..=3);
            let pop: Vec<Vec<Cbt>> = (0..n_s)
                .map(|_| {
                    (0..n_t)
                        .map(|_| {
                            let mut m = Array2::zeros((n_r, n_r));
                            for i in 0..n_r {
                                for j in i + 1..n_r {
                                    let x: f64 = rng.random_range(0.0..2.0);
                                    m[(i, j)] = x;
                                    m[(j, i)] = x;
                                }
                            }
                            m
                        })
                        .collect()
                })
                .collect();
            let p = population_cbt(&pop);
            for t in 0..n_t {
                for i in 0..n_r {
                    for j in 0..n_r {
                        let column: Vec<f64> = pop.iter().map(|s| s[t][(i, j)]).collect();
                        let want = sorted_median(&column);
                        let got = p.cbts[t][(i, j)];
                        if (got - want).abs() > 1e-12 {
                            return Err(format!(
                                "round {round}, entry ({i}, {j}): median {got} vs oracle {want}"
                            ));
                        }
                    }
                }
            }
        }
        Ok(format!(
            "200 random populations ({even_populations} with even subject counts) match the sort-based oracle"
        ))
    })();
    gate(4, "median oracle", outcome);
}

#[test]
fn criterion_05_training_progress() {
    let started = Instant::now();
    let outcome = (|| {
        let ds = benchmark_dataset();
        let config = benchmark_config(Variant::Full);
        let out = train(&ds, None, &config).map_err(|e| e.to_string())?;
        let first = out.history.records.first().expect("nonempty history");
        let last = out.history.records.last().expect("nonempty history");
        let ratio = last.mean_total / first.mean_total;
        if !(ratio <= 0.70) {
            return Err(format!(
                "final mean loss {:.6} is {:.1}% of epoch-1 loss {:.6}, bound is 70%",
                last.mean_total,
                100.0 * ratio,
                first.mean_total
            ));
        }
        let elapsed = started.elapsed();
        within(elapsed, Duration::from_secs(600), "benchmark training")?;
        Ok(format!(
            "loss {:.4} -> {:.4} ({:.1}% of epoch 1) over 100 epochs, {:.0}s",
            first.mean_total,
            last.mean_total,
            100.0 * ratio,
            elapsed.as_secs_f64()
        ))
    })();
    gate(5, "training progress", outcome);
}

#[test]
fn criterion_06_variant_ordering() {
    let outcome = (|| {
        let ds = benchmark_dataset();
        let config = benchmark_config(Variant::Vanilla);
        let report = compare_variants(&ds, &config, &[Variant::Vanilla, Variant::Full], 5)
            .map_err(|e| e.to_string())?;
        report.check_invariants()?;
        let mean_of = |variant: Variant| -> Result<f64, String> {
            report
                .aggregates
                .iter()
                .find(|a| a.variant == variant && a.strategy == Strategy::Best)
                .map(|a| a.overall_centeredness_mean)
                .ok_or_else(|| format!("missing aggregate row for {variant}"))
        };
        let vanilla = mean_of(Variant::Vanilla)?;
        let full = mean_of(Variant::Full)?;
        if !(full <= 1.05 * vanilla) {
            return Err(format!(
                "full centeredness {full:.6} > 1.05 x vanilla {vanilla:.6}"
            ));
        }
        let t_test = report
            .comparisons
            .iter()
            .find(|c| c.strategy == Strategy::Best)
            .ok_or("missing paired t-test row")?;
        if !t_test.p_value.is_finite() || !(0.0..=1.0).contains(&t_test.p_value) {
            return Err(format!("unusable p-value {}", t_test.p_value));
        }
        Ok(format!(
            "5-fold centeredness: full {full:.4} vs vanilla {vanilla:.4} (ratio {:.3}), paired p = {:.3}",
            full / vanilla,
            t_test.p_value
        ))
    })();
    gate(6, "variant ordering", outcome);
}

#[test]
fn criterion_07_time_regularizer_effect() {
    let outcome = (|| {
        // Drift-free cohort: the ideal template trajectory is constant.
        let ds = generate_synthetic(40, 10, 4, 2, 42, 0.0, 0.05);
        let mut smooth_cfg = benchmark_config(Variant::Vanilla);
        smooth_cfg.alpha = 10.0;
        smooth_cfg.epochs = 40;
        let mut free_cfg = smooth_cfg.clone();
        free_cfg.alpha = 0.0;
        let smooth = train(&ds, None, &smooth_cfg).map_err(|e| e.to_string())?;
        let free = train(&ds, None, &free_cfg).map_err(|e| e.to_string())?;
        let drift = |params: &ModelParams| -> f64 {
            ds.subjects
                .iter()
                .map(|s| time_reg_loss(&forward_subject(s.baseline(), params, 2)))
                .sum::<f64>()
                / ds.n_subjects() as f64
        };
        let smooth_drift = drift(&smooth.last);
        let free_drift = drift(&free.last);
        if !(smooth_drift <= free_drift) {
            return Err(format!(
                "consecutive-template distance {smooth_drift:.6} with alpha 10 exceeds {free_drift:.6} with alpha 0"
            ));
        }
        Ok(format!(
            "mean consecutive-template distance {smooth_drift:.4} (alpha 10) <= {free_drift:.4} (alpha 0), same seed"
        ))
    })();
    gate(7, "time regularizer effect", outcome);
}

#[test]
fn criterion_08_determinism() {
    let outcome = (|| {
        let ds = generate_synthetic(8, 6, 2, 2, 88, 0.05, 0.05);
        let config = TrainingConfig {
            variant: Variant::Full,
            hidden_dims: vec![4, 6],
            epochs: 5,
            k_samples: 3,
            seed: 88,
            ..TrainingConfig::default()
        };
        let a = crossval(&ds, &config, 2).map_err(|e| e.to_string())?;
        let b = crossval(&ds, &config, 2).map_err(|e| e.to_string())?;
        if a != b {
            return Err("cross-validation reports differ between identical runs".into());
        }
        if a.folds_csv() != b.folds_csv() || a.aggregate_csv() != b.aggregate_csv() {
            return Err("serialized reports differ between identical runs".into());
        }
        let t1 = train(&ds, None, &config).map_err(|e| e.to_string())?;
        let t2 = train(&ds, None, &config).map_err(|e| e.to_string())?;
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&p1, &t1.last, &config).map_err(|e| e.to_string())?;
        save_checkpoint(&p2, &t2.last, &config).map_err(|e| e.to_string())?;
        let c1 = std::fs::read(&p1).map_err(|e| e.to_string())?;
        let c2 = std::fs::read(&p2).map_err(|e| e.to_string())?;
        if c1 != c2 {
            return Err("checkpoints differ between identical runs".into());
        }
        Ok(format!(
            "reports and checkpoints bit-identical across repeated runs ({} bytes per checkpoint)",
            c1.len()
        ))
    })();
    gate(8, "determinism", outcome);
}

#[test]
fn criterion_09_six_timepoint_horizon() {
    let started = Instant::now();
    let outcome = (|| {
        let ds = generate_synthetic(12, 8, 3, 6, 99, 0.05, 0.05);
        let ids = ds.subject_ids();
        let train_set = ds.subset(&ids[..9]);
        let eval_set = ds.subset(&ids[9..]);
        let config = TrainingConfig {
            variant: Variant::Full,
            hidden_dims: vec![6, 10, 8],
            epochs: 10,
            k_samples: 4,
            seed: 99,
            ..TrainingConfig::default()
        };
        let out = train(&train_set, Some(&eval_set), &config).map_err(|e| e.to_string())?;
        let per_subject: Vec<Vec<Cbt>> = train_set
            .subjects
            .iter()
            .map(|s| forward_subject(s.baseline(), &out.best, 6))
            .collect();
        let pop = population_cbt(&per_subject);
        if pop.cbts.len() != 6 {
            return Err(format!("expected 6 population templates, got {}", pop.cbts.len()));
        }
        for (t, c) in pop.cbts.iter().enumerate() {
            check_cbt_invariants(c).map_err(|e| format!("population template {t}: {e}"))?;
        }
        let centeredness = centeredness_score(&pop, &eval_set);
        let mae = node_strength_mae(&pop, &eval_set);
        if centeredness.len() != 6 || mae.len() != 6 {
            return Err("evaluation did not cover all 6 timepoints".into());
        }
        if centeredness.iter().chain(&mae).any(|x| !x.is_finite()) {
            return Err("non-finite evaluation metric".into());
        }
        let elapsed = started.elapsed();
        within(elapsed, Duration::from_secs(1800), "six-timepoint run")?;
        Ok(format!(
            "6 structurally valid population templates, centeredness {:.3}..{:.3}, {:.0}s",
            centeredness.iter().cloned().fold(f64::INFINITY, f64::min),
            centeredness.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            elapsed.as_secs_f64()
        ))
    })();
    gate(9, "six-timepoint horizon", outcome);
}

#[test]
fn criterion_10_metric_examples() {
    let outcome = (|| {
        let exact = |got: f64, want: f64, what: &str| -> Result<(), String> {
            if got == want {
                Ok(())
            } else {
                Err(format!("{what}: got {got}, want {want}"))
            }
        };
        let close = |got: f64, want: f64, what: &str| -> Result<(), String> {
            if (got - want).abs() <= 1e-15 {
                Ok(())
            } else {
                Err(format!("{what}: got {got}, want {want}"))
            }
        };

        // Frobenius distance.
        let a = ndarray::array![[0.0, 3.0], [3.0, 0.0]];
        let zero2 = Array2::zeros((2, 2));
        exact(frobenius_distance(&a, &a), 0.0, "d(A, A)")?;
        close(
            frobenius_distance(&a, &zero2),
            18.0_f64.sqrt(),
            "d([[0,3],[3,0]], 0)",
        )?;
        exact(
            frobenius_distance(&a, &zero2),
            frobenius_distance(&zero2, &a),
            "d symmetry",
        )?;

        // View weights: means (2, 4) -> (2, 1); (1, 2, 4) -> (4, 2, 1);
        // equal means -> all ones. A 2x2 view with off-diagonal x has mean x/2.
        let view = |x: f64| ndarray::array![[0.0, x], [x, 0.0]];
        let w = view_weights(&MultigraphObservation::new(vec![view(4.0), view(8.0)]));
        if w.lambda != vec![2.0, 1.0] {
            return Err(format!("weights for means (2, 4): {:?}", w.lambda));
        }
        let w = view_weights(&MultigraphObservation::new(vec![
            view(2.0),
            view(4.0),
            view(8.0),
        ]));
        if w.lambda != vec![4.0, 2.0, 1.0] {
            return Err(format!("weights for means (1, 2, 4): {:?}", w.lambda));
        }
        let w = view_weights(&MultigraphObservation::new(vec![view(3.0); 4]));
        if w.lambda != vec![1.0; 4] {
            return Err(format!("weights for equal means: {:?}", w.lambda));
        }

        // Node strengths.
        let m = ndarray::array![[0.0, 1.0, 3.0], [1.0, 0.0, 2.0], [3.0, 2.0, 0.0]];
        if node_strengths(&m) != vec![4.0, 3.0, 5.0] {
            return Err(format!("strengths of the 3x3 example: {:?}", node_strengths(&m)));
        }
        if node_strengths(&Array2::zeros((4, 4))) != vec![0.0; 4] {
            return Err("strengths of the zero matrix".into());
        }
        let col_sums: Vec<f64> = (0..3).map(|j| m.column(j).sum()).collect();
        if node_strengths(&m) != col_sums {
            return Err("row sums of a symmetric matrix must equal column sums".into());
        }

        // Discriminability ranking.
        let same = discriminability_ranking(&m, &m);
        if same.scores != vec![0.0; 3] || same.ranking != vec![0, 1, 2] {
            return Err("identical templates must give zero scores in index order".into());
        }
        let z4 = Array2::zeros((4, 4));
        let mut b4 = Array2::zeros((4, 4));
        b4[(0, 1)] = 2.0;
        b4[(1, 0)] = 2.0;
        let r = discriminability_ranking(&z4, &b4);
        if r.scores != vec![2.0, 2.0, 0.0, 0.0] || r.ranking[..2] != [0, 1] {
            return Err(format!("single-edge residual: {:?} / {:?}", r.scores, r.ranking));
        }
        if r != discriminability_ranking(&b4, &z4) {
            return Err("ranking must be symmetric in its arguments".into());
        }

        // Top-k overlap.
        exact(topk_overlap(&r, &r, 4), 1.0, "overlap of a ranking with itself")?;
        let first = remi_core::DiscriminabilityRanking {
            scores: vec![0.0, 3.0, 2.0, 1.0, 0.0],
            ranking: vec![1, 2, 3, 0, 4],
        };
        let second = remi_core::DiscriminabilityRanking {
            scores: vec![0.0, 0.0, 3.0, 2.0, 1.0],
            ranking: vec![2, 3, 4, 0, 1],
        };
        close(topk_overlap(&first, &second, 3), 2.0 / 3.0, "top-3 {1,2,3} vs {2,3,4}")?;
        let disjoint = remi_core::DiscriminabilityRanking {
            scores: vec![3.0, 2.0, 0.0, 0.0, 0.0],
            ranking: vec![0, 4, 1, 2, 3],
        };
        let other = remi_core::DiscriminabilityRanking {
            scores: vec![0.0, 2.0, 3.0, 1.0, 0.0],
            ranking: vec![2, 1, 3, 0, 4],
        };
        exact(topk_overlap(&disjoint, &other, 2), 0.0, "disjoint top-2")?;
        Ok("all pinned metric examples reproduced".to_string())
    })();
    gate(10, "metric examples", outcome);
}
