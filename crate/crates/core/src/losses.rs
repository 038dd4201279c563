//! Training objectives: subject centeredness against randomly sampled peers,
//! temporal smoothness between consecutive predicted templates, and their
//! weighted combination.
//!
//! Every loss exists in two forms that share one iteration order: a plain
//! evaluation on matrices and a tape recording for training. Sampled
//! observations and view weights enter the tape as constants; gradients flow
//! only through the predicted templates.

use crate::dataset::{view_means, MultigraphObservation, SubjectTrajectory};
use crate::grad::{Tape, Value};
use crate::model::Cbt;
use ndarray::Array2;

/// Guard for near-zero view means in the weight denominator.
const MEAN_EPS: f64 = 1e-8;

/// Per-view loss weights λ_v = max_w(μ_w) / μ_v for one observation. The
/// view with the largest mean gets weight 1; fainter views get amplified.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewWeights {
    pub lambda: Vec<f64>,
}

/// One subject's loss terms; `total = centeredness + alpha·time_reg` exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub centeredness: f64,
    pub time_reg: f64,
    pub alpha: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(centeredness: f64, time_reg: f64, alpha: f64) -> Self {
        LossBreakdown {
            centeredness,
            time_reg,
            alpha,
            total: centeredness + alpha * time_reg,
        }
    }
}

/// Frobenius distance `√(Σ_ij (A_ij − B_ij)²)`; panics on shape mismatch.
pub fn frobenius_distance(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(
        a.dim(),
        b.dim(),
        "frobenius_distance: incompatible shapes {:?} and {:?}",
        a.dim(),
        b.dim()
    );
    (a - b).mapv(|x| x * x).sum().sqrt()
}

/// Tape form of [`frobenius_distance`]; returns a 1×1 value.
pub fn tape_frobenius_distance(a: &Value, b: &Value) -> Value {
    a.sub(b).square().sum().sqrt()
}

/// λ_v = max_w(μ_w) / max(μ_v, 1e-8), computed from this observation alone
/// (per subject and per timepoint).
pub fn view_weights(obs: &MultigraphObservation) -> ViewWeights {
    let means = view_means(obs);
    let max = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    ViewWeights {
        lambda: means.iter().map(|&mu| max / mu.max(MEAN_EPS)).collect(),
    }
}

fn check_sample_dims(n_t: usize, n_r: usize, samples: &[&SubjectTrajectory]) {
    for s in samples {
        assert_eq!(
            s.observations.len(),
            n_t,
            "sampled subject {} has {} timepoints, templates cover {n_t}",
            s.subject_id,
            s.observations.len()
        );
        for obs in &s.observations {
            assert_eq!(
                obs.n_rois(),
                n_r,
                "sampled subject {} has {} ROIs, templates have {n_r}",
                s.subject_id,
                obs.n_rois()
            );
        }
    }
}

/// Centeredness of a predicted template sequence against sampled peers:
/// `(1/n_t) Σ_t Σ_v Σ_k λ_v(S_k^t) · d_F(Ĉ^t, view v of S_k^t)`.
pub fn centeredness_loss(cbts: &[Cbt], samples: &[&SubjectTrajectory]) -> f64 {
    assert!(!cbts.is_empty(), "centeredness_loss: no templates");
    assert!(!samples.is_empty(), "centeredness_loss: no sampled subjects");
    let n_t = cbts.len();
    check_sample_dims(n_t, cbts[0].nrows(), samples);
    let n_v = samples[0].observations[0].n_views();
    let mut total = 0.0;
    for (t, cbt) in cbts.iter().enumerate() {
        for v in 0..n_v {
            for s in samples {
                let obs = &s.observations[t];
                let lambda = view_weights(obs).lambda[v];
                total += lambda * frobenius_distance(cbt, obs.view(v));
            }
        }
    }
    total * (1.0 / n_t as f64)
}

/// Tape form of [`centeredness_loss`] over template values; the sampled
/// observations and their λ weights are constants.
pub fn tape_centeredness_loss(
    tape: &Tape,
    cbts: &[Value],
    samples: &[&SubjectTrajectory],
) -> Value {
    assert!(!cbts.is_empty(), "centeredness_loss: no templates");
    assert!(!samples.is_empty(), "centeredness_loss: no sampled subjects");
    let n_t = cbts.len();
    check_sample_dims(n_t, cbts[0].shape().0, samples);
    let n_v = samples[0].observations[0].n_views();
    let mut total = tape.scalar(0.0);
    for (t, cbt) in cbts.iter().enumerate() {
        for v in 0..n_v {
            for s in samples {
                let obs = &s.observations[t];
                let lambda = view_weights(obs).lambda[v];
                let target = tape.constant(obs.view(v).clone());
                total = total.add(&tape_frobenius_distance(cbt, &target).scale(lambda));
            }
        }
    }
    total.scale(1.0 / n_t as f64)
}

/// Temporal smoothness: mean Frobenius distance over consecutive templates,
/// `(1/(n_t−1)) Σ_t d_F(Ĉ^{t+1}, Ĉ^t)`. Panics when fewer than two
/// timepoints are given; training validates that before calling.
pub fn time_reg_loss(cbts: &[Cbt]) -> f64 {
    assert!(
        cbts.len() >= 2,
        "time_reg_loss: needs at least 2 timepoints, got {}",
        cbts.len()
    );
    let mut total = 0.0;
    for w in cbts.windows(2) {
        total += frobenius_distance(&w[1], &w[0]);
    }
    total * (1.0 / (cbts.len() - 1) as f64)
}

/// Tape form of [`time_reg_loss`].
pub fn tape_time_reg_loss(tape: &Tape, cbts: &[Value]) -> Value {
    assert!(
        cbts.len() >= 2,
        "time_reg_loss: needs at least 2 timepoints, got {}",
        cbts.len()
    );
    let mut total = tape.scalar(0.0);
    for w in cbts.windows(2) {
        total = total.add(&tape_frobenius_distance(&w[1], &w[0]));
    }
    total.scale(1.0 / (cbts.len() - 1) as f64)
}

/// Mean of `centeredness + alpha·time_reg` over subjects; panics on an empty
/// list.
pub fn total_loss(breakdowns: &[LossBreakdown]) -> f64 {
    assert!(!breakdowns.is_empty(), "total_loss: no subjects");
    breakdowns.iter().map(|b| b.total).sum::<f64>() / breakdowns.len() as f64
}

/// One subject's differentiable objective.
pub struct TapeSubjectLoss {
    pub centeredness: Value,
    /// Present when the template sequence has at least two timepoints.
    pub time_reg: Option<Value>,
    /// `centeredness + alpha·time_reg` (or just centeredness for one timepoint).
    pub total: Value,
}

/// Assemble `L_c + α·L_t` for one subject's predicted templates against a
/// fixed peer sample.
pub fn tape_subject_loss(
    tape: &Tape,
    cbts: &[Value],
    samples: &[&SubjectTrajectory],
    alpha: f64,
) -> TapeSubjectLoss {
    assert!(alpha >= 0.0, "alpha must be non-negative, got {alpha}");
    let centeredness = tape_centeredness_loss(tape, cbts, samples);
    if cbts.len() >= 2 {
        let time_reg = tape_time_reg_loss(tape, cbts);
        let total = centeredness.add(&time_reg.scale(alpha));
        TapeSubjectLoss {
            centeredness,
            time_reg: Some(time_reg),
            total,
        }
    } else {
        TapeSubjectLoss {
            centeredness: centeredness.clone(),
            time_reg: None,
            total: centeredness,
        }
    }
}

/// Plain breakdown of one subject's objective; time regularisation is zero
/// for single-timepoint sequences.
pub fn subject_loss_breakdown(
    cbts: &[Cbt],
    samples: &[&SubjectTrajectory],
    alpha: f64,
) -> LossBreakdown {
    let centeredness = centeredness_loss(cbts, samples);
    let time_reg = if cbts.len() >= 2 { time_reg_loss(cbts) } else { 0.0 };
    LossBreakdown::new(centeredness, time_reg, alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_synthetic;
    use crate::grad::finite_diff_check;
    use crate::model::{tape_forward_subject, ModelParams, Variant};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const SQRT_18: f64 = 4.242640687119285;
    const SQRT_8: f64 = 2.8284271247461903;

    fn sym_obs(offdiag: &[f64], n: usize) -> MultigraphObservation {
        // One view per provided constant; each view has all off-diagonal
        // entries equal to that constant.
        let views = offdiag
            .iter()
            .map(|&c| {
                let mut m = Array2::from_elem((n, n), c);
                for i in 0..n {
                    m[(i, i)] = 0.0;
                }
                m
            })
            .collect();
        MultigraphObservation::new(views)
    }

    #[test]
    fn distance_of_a_matrix_to_itself_is_zero() {
        let a = array![[1.0, 2.0], [2.0, 0.5]];
        assert_eq!(frobenius_distance(&a, &a), 0.0);
    }

    #[test]
    fn distance_to_zero_matrix_is_the_frobenius_norm() {
        let a = array![[0.0, 3.0], [3.0, 0.0]];
        assert_abs_diff_eq!(frobenius_distance(&a, &Array2::zeros((2, 2))), SQRT_18, epsilon = 1e-12);
    }

    #[test]
    fn distance_is_symmetric_in_its_arguments() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let a = Array2::from_shape_fn((3, 3), |_| rng.random_range(-2.0..2.0));
            let b = Array2::from_shape_fn((3, 3), |_| rng.random_range(-2.0..2.0));
            assert_eq!(frobenius_distance(&a, &b), frobenius_distance(&b, &a));
        }
    }

    #[test]
    #[should_panic(expected = "frobenius_distance: incompatible shapes")]
    fn distance_rejects_mismatched_shapes() {
        frobenius_distance(&Array2::zeros((2, 2)), &Array2::zeros((3, 3)));
    }

    #[test]
    fn tape_distance_matches_plain_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let a = Array2::from_shape_fn((4, 4), |_| rng.random_range(-2.0..2.0));
            let b = Array2::from_shape_fn((4, 4), |_| rng.random_range(-2.0..2.0));
            let tape = Tape::new();
            let av = tape.constant(a.clone());
            let bv = tape.constant(b.clone());
            assert_eq!(tape_frobenius_distance(&av, &bv).item(), frobenius_distance(&a, &b));
        }
    }

    #[test]
    fn weights_are_max_mean_over_view_mean() {
        // Off-diagonal constants 4 and 8 over 2 ROIs give means 2 and 4.
        let w = view_weights(&sym_obs(&[4.0, 8.0], 2));
        assert_abs_diff_eq!(w.lambda[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w.lambda[1], 1.0, epsilon = 1e-12);

        let w = view_weights(&sym_obs(&[2.0, 4.0, 8.0], 2));
        assert_abs_diff_eq!(w.lambda[0], 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w.lambda[1], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w.lambda[2], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn equal_view_means_give_unit_weights() {
        let w = view_weights(&sym_obs(&[3.0, 3.0, 3.0], 4));
        for l in &w.lambda {
            assert_abs_diff_eq!(*l, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn minimum_weight_is_one_for_nondegenerate_observations() {
        let ds = generate_synthetic(6, 5, 4, 2, 77, 0.05, 0.1);
        for s in &ds.subjects {
            for obs in &s.observations {
                let w = view_weights(obs);
                let min = w.lambda.iter().cloned().fold(f64::INFINITY, f64::min);
                assert_abs_diff_eq!(min, 1.0, epsilon = 1e-12);
                assert!(w.lambda.iter().all(|&l| l >= 1.0 - 1e-12));
            }
        }
    }

    #[test]
    fn scaling_a_non_maximal_view_rescales_its_weight_inversely() {
        let base = sym_obs(&[4.0, 8.0], 2);
        let w0 = view_weights(&base).lambda[0];
        let c = 0.5;
        let scaled = MultigraphObservation::new(vec![
            base.view(0).mapv(|x| c * x),
            base.view(1).clone(),
        ]);
        let w0_scaled = view_weights(&scaled).lambda[0];
        assert_abs_diff_eq!(w0_scaled, w0 / c, epsilon = 1e-12);
    }

    fn single_view_subject(id: &str, views_per_t: &[Array2<f64>]) -> SubjectTrajectory {
        SubjectTrajectory {
            subject_id: id.into(),
            observations: views_per_t
                .iter()
                .map(|m| MultigraphObservation::new(vec![m.clone()]))
                .collect(),
        }
    }

    #[test]
    fn perfectly_centered_template_has_zero_loss() {
        let view = array![[0.0, 1.0], [1.0, 0.0]];
        let subject = single_view_subject("s", &[view.clone()]);
        assert_eq!(centeredness_loss(&[view], &[&subject]), 0.0);
    }

    #[test]
    fn single_view_distance_example() {
        let cbt = array![[0.0, 1.0], [1.0, 0.0]];
        let subject = single_view_subject("s", &[array![[0.0, 3.0], [3.0, 0.0]]]);
        assert_abs_diff_eq!(centeredness_loss(&[cbt], &[&subject]), SQRT_8, epsilon = 1e-12);
    }

    #[test]
    fn duplicating_every_sample_doubles_the_loss() {
        let ds = generate_synthetic(3, 4, 2, 2, 8, 0.05, 0.1);
        let cbts = vec![Array2::from_elem((4, 4), 0.3); 2];
        let samples: Vec<&SubjectTrajectory> = ds.subjects.iter().collect();
        let doubled: Vec<&SubjectTrajectory> =
            ds.subjects.iter().chain(ds.subjects.iter()).collect();
        let once = centeredness_loss(&cbts, &samples);
        let twice = centeredness_loss(&cbts, &doubled);
        assert_abs_diff_eq!(twice, 2.0 * once, epsilon = 1e-9);
        assert!(once > 0.0);
    }

    #[test]
    fn identical_templates_have_zero_smoothness_penalty() {
        let c = array![[0.0, 2.0], [2.0, 0.0]];
        assert_eq!(time_reg_loss(&[c.clone(), c.clone(), c]), 0.0);
    }

    #[test]
    fn two_timepoints_reduce_to_a_single_distance() {
        let a = array![[0.0, 1.0], [1.0, 0.0]];
        let b = array![[0.0, 4.0], [4.0, 0.0]];
        assert_eq!(time_reg_loss(&[a.clone(), b.clone()]), frobenius_distance(&a, &b));
    }

    #[test]
    fn three_timepoints_average_consecutive_distances() {
        // Distances between consecutive templates are 1 and 3.
        let x = 1.0 / 2.0_f64.sqrt();
        let y = 3.0 / 2.0_f64.sqrt();
        let c1 = Array2::zeros((2, 2));
        let c2 = array![[0.0, x], [x, 0.0]];
        let c3 = array![[0.0, x + y], [x + y, 0.0]];
        assert_abs_diff_eq!(time_reg_loss(&[c1, c2, c3]), 2.0, epsilon = 1e-12);
    }

    #[test]
    #[should_panic(expected = "needs at least 2 timepoints")]
    fn single_timepoint_smoothness_is_a_contract_violation() {
        time_reg_loss(&[Array2::zeros((2, 2))]);
    }

    #[test]
    fn zero_alpha_total_is_mean_centeredness() {
        let b1 = LossBreakdown::new(2.0, 5.0, 0.0);
        let b2 = LossBreakdown::new(4.0, 1.0, 0.0);
        assert_eq!(total_loss(&[b1, b2]), 3.0);
    }

    #[test]
    fn breakdown_combines_terms_exactly() {
        let b = LossBreakdown::new(2.0, 1.0, 0.3);
        assert_eq!(b.total, 2.3);
        assert_eq!(total_loss(&[b]), 2.3);
        let b2 = LossBreakdown::new(4.0, 1.0, 0.3);
        assert_abs_diff_eq!(total_loss(&[b, b2]), 3.3, epsilon = 1e-12);
    }

    #[test]
    fn total_loss_is_permutation_invariant() {
        let bs: Vec<LossBreakdown> = (0..6)
            .map(|i| LossBreakdown::new(i as f64 * 0.7, i as f64 * 0.2, 0.4))
            .collect();
        let mut rev = bs.clone();
        rev.reverse();
        assert_abs_diff_eq!(total_loss(&bs), total_loss(&rev), epsilon = 1e-12);
    }

    #[test]
    #[should_panic(expected = "total_loss: no subjects")]
    fn empty_population_total_is_rejected() {
        total_loss(&[]);
    }

    #[test]
    fn tape_losses_match_plain_losses() {
        let ds = generate_synthetic(4, 5, 3, 3, 17, 0.05, 0.1);
        let params = ModelParams::init(Variant::Full, &[3, 4], 3, 18);
        let subject = &ds.subjects[0];
        let samples: Vec<&SubjectTrajectory> = ds.subjects[1..].iter().collect();
        let tape = Tape::new();
        let lifted = params.lift(&tape, false);
        let fwd = tape_forward_subject(&tape, subject.baseline(), &lifted, 3, 1);
        let loss = tape_subject_loss(&tape, &fwd.cbts, &samples, 0.3);

        let cbts: Vec<Cbt> = fwd.cbts.iter().map(Value::data).collect();
        let plain = subject_loss_breakdown(&cbts, &samples, 0.3);
        assert_abs_diff_eq!(loss.centeredness.item(), plain.centeredness, epsilon = 1e-12);
        assert_abs_diff_eq!(
            loss.time_reg.as_ref().unwrap().item(),
            plain.time_reg,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(loss.total.item(), plain.total, epsilon = 1e-12);
        assert!(plain.centeredness > 0.0);
        assert!(plain.time_reg > 0.0);
    }

    #[test]
    fn objective_gradients_match_finite_differences() {
        let ds = generate_synthetic(3, 4, 2, 2, 23, 0.05, 0.1);
        let params = ModelParams::init(Variant::Full, &[2, 3], 2, 24);
        let subject = ds.subjects[0].clone();
        let peers: Vec<SubjectTrajectory> = ds.subjects[1..].to_vec();
        let frozen = params.clone();
        let err = finite_diff_check(
            move |tape, values| {
                let lifted = frozen.lift_from_values(values);
                let fwd = tape_forward_subject(tape, subject.baseline(), &lifted, 2, 1);
                let samples: Vec<&SubjectTrajectory> = peers.iter().collect();
                tape_subject_loss(tape, &fwd.cbts, &samples, 0.3).total
            },
            &params.flat_arrays(),
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "relative error {err}");
    }
}
