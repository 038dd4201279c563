//! Stochastic training of the model against the combined objective, plus
//! checkpoint and history serialisation.
//!
//! One training run is strictly sequential and fully determined by
//! `(dataset, config, seed)`: subjects are visited in a seeded shuffled order,
//! each visit samples a fresh peer subset, records one subject's objective on
//! a fresh tape, and applies a single bias-corrected Adam update. The "best"
//! parameters are the snapshot with the lowest held-out centeredness, scored
//! every `eval_every` epochs against a caller-supplied evaluation set.

use crate::dataset::{LongitudinalDataset, SubjectTrajectory};
use crate::evaluation::{centeredness_score, population_cbt};
use crate::grad::{Tape, Value};
use crate::losses::{tape_subject_loss, LossBreakdown};
use crate::model::{forward_subject_with_cycles, tape_forward_subject, Cbt, ModelParams, Variant};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite gradient for parameter {name} at optimiser step {step}")]
    NonFiniteGradient { name: String, step: usize },
    #[error("non-finite loss {value}")]
    NonFiniteLoss { value: f64 },
    #[error("epoch {epoch}, subject {subject}: {source}")]
    Epoch {
        epoch: usize,
        subject: String,
        #[source]
        source: Box<TrainingError>,
    },
}

/// Hyperparameters of one training run. The defaults are the published
/// operating point: three layers of widths 12/36/24, learning rate 0.0008,
/// 100 epochs, α = 0.3, k = 10 sampled peers, one recursion cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub variant: Variant,
    pub hidden_dims: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub alpha: f64,
    pub k_samples: usize,
    /// Recursion cycles; `None` defers to the variant default.
    pub cycles: Option<usize>,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// How often (in epochs) the held-out score is measured.
    pub eval_every: usize,
    /// Optional symmetric clip bound applied to every gradient entry.
    pub grad_clip: Option<f64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            variant: Variant::Full,
            hidden_dims: vec![12, 36, 24],
            learning_rate: 0.0008,
            epochs: 100,
            alpha: 0.3,
            k_samples: 10,
            cycles: None,
            seed: 42,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            eval_every: 1,
            grad_clip: None,
        }
    }
}

impl TrainingConfig {
    pub fn for_variant(variant: Variant) -> Self {
        TrainingConfig {
            variant,
            ..TrainingConfig::default()
        }
    }

    /// Cycle count actually used: explicit override or the variant default.
    pub fn effective_cycles(&self) -> usize {
        self.cycles.unwrap_or_else(|| self.variant.cycles())
    }

    /// Validate against the training set this run will see.
    pub fn validate(&self, n_train_subjects: usize, n_timepoints: usize) -> Result<(), TrainingError> {
        let fail = |msg: String| Err(TrainingError::Config(msg));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.epochs < 1 {
            return fail("epochs must be at least 1".into());
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return fail(format!("alpha must be non-negative, got {}", self.alpha));
        }
        if self.k_samples < 1 || self.k_samples > n_train_subjects {
            return fail(format!(
                "k_samples = {} must lie in 1..={n_train_subjects} (training subjects)",
                self.k_samples
            ));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.iter().any(|&d| d == 0) {
            return fail("hidden_dims must be non-empty positive integers".into());
        }
        if self.eval_every < 1 {
            return fail("eval_every must be at least 1".into());
        }
        if self.alpha > 0.0 && n_timepoints < 2 {
            return fail(format!(
                "time regularisation (alpha = {}) needs at least 2 timepoints, dataset has {n_timepoints}",
                self.alpha
            ));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_epsilon > 0.0) {
            return fail("adam_epsilon must be positive".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return fail(format!("grad_clip must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

/// First and second Adam moments, one pair per parameter matrix in the
/// model's canonical flat order, plus the shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    step: usize,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Array2<f64>> = params
            .flat_arrays()
            .iter()
            .map(|a| Array2::zeros(a.dim()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// State for an arbitrary list of parameter shapes (used by tests and
    /// by optimisation outside a full model).
    pub fn for_shapes(shapes: &[(usize, usize)]) -> Self {
        let zeros: Vec<Array2<f64>> = shapes.iter().map(|&s| Array2::zeros(s)).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }
}

/// One bias-corrected Adam update over a flat parameter list:
/// `m ← β₁m + (1−β₁)g`, `v ← β₂v + (1−β₂)g²`, `θ ← θ − lr·m̂/(√v̂ + ε)`.
/// All gradients are checked for finiteness before anything mutates.
pub fn adam_update(
    arrays: &mut [Array2<f64>],
    grads: &[Array2<f64>],
    names: &[String],
    state: &mut AdamState,
    config: &TrainingConfig,
) -> Result<(), TrainingError> {
    assert_eq!(arrays.len(), grads.len(), "gradient count mismatch");
    assert_eq!(arrays.len(), state.m.len(), "optimiser state mismatch");
    for (i, g) in grads.iter().enumerate() {
        assert_eq!(g.dim(), arrays[i].dim(), "gradient shape mismatch for {}", names[i]);
        if g.iter().any(|x| !x.is_finite()) {
            return Err(TrainingError::NonFiniteGradient {
                name: names[i].clone(),
                step: state.step + 1,
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps, lr) = (
        config.adam_beta1,
        config.adam_beta2,
        config.adam_epsilon,
        config.learning_rate,
    );
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for i in 0..arrays.len() {
        let g = &grads[i];
        state.m[i] = state.m[i].mapv(|x| b1 * x) + &g.mapv(|x| (1.0 - b1) * x);
        state.v[i] = state.v[i].mapv(|x| b2 * x) + &g.mapv(|x| (1.0 - b2) * x * x);
        let m_hat = state.m[i].mapv(|x| x / bc1);
        let v_hat = state.v[i].mapv(|x| x / bc2);
        let delta = ndarray::Zip::from(&m_hat)
            .and(&v_hat)
            .map_collect(|&m, &v| lr * m / (v.sqrt() + eps));
        arrays[i] = &arrays[i] - &delta;
    }
    Ok(())
}

/// [`adam_update`] applied to a model's parameters in canonical order.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[Array2<f64>],
    state: &mut AdamState,
    config: &TrainingConfig,
) -> Result<(), TrainingError> {
    let mut arrays = params.flat_arrays();
    let names = params.flat_names();
    adam_update(&mut arrays, grads, &names, state, config)?;
    params.assign_flat(&arrays);
    Ok(())
}

/// Uniform sample of `k` ids without replacement (partial Fisher-Yates);
/// deterministic given the generator state.
pub fn sample_subset(
    ids: &[String],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<String>, TrainingError> {
    if k > ids.len() {
        return Err(TrainingError::Config(format!(
            "cannot sample {k} subjects from a population of {}",
            ids.len()
        )));
    }
    let mut pool: Vec<String> = ids.to_vec();
    for i in 0..k {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(k);
    Ok(pool)
}

/// One epoch's summary row.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch index.
    pub epoch: usize,
    pub mean_centeredness: f64,
    pub mean_time_reg: f64,
    pub mean_total: f64,
    /// Held-out centeredness, present on evaluation epochs.
    pub heldout_centeredness: Option<f64>,
}

/// Per-epoch training curve; exactly one record per epoch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainingHistory {
    /// Comma-separated rows `epoch, L_c, L_t, total, held-out score` with a
    /// header; the held-out column is empty on epochs without evaluation.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,centeredness,time_reg,total,heldout_centeredness\n");
        for r in &self.records {
            let held = r
                .heldout_centeredness
                .map(|h| format!("{h:.16e}"))
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{:.16e},{:.16e},{:.16e},{}\n",
                r.epoch, r.mean_centeredness, r.mean_time_reg, r.mean_total, held
            ));
        }
        out
    }
}

/// Everything a training run produces.
#[derive(Debug, Clone)]
pub struct TrainingOutput {
    /// Parameters after the final epoch.
    pub last: ModelParams,
    /// Snapshot with the lowest held-out centeredness (equals `last` when no
    /// evaluation set was supplied).
    pub best: ModelParams,
    /// Epoch at which `best` was captured, when evaluation ran.
    pub best_epoch: Option<usize>,
    pub history: TrainingHistory,
}

/// Mean-over-timepoints centeredness of the training population's template
/// trajectory, measured on a held-out set.
fn heldout_score(
    params: &ModelParams,
    cycles: usize,
    train_set: &LongitudinalDataset,
    eval_set: &LongitudinalDataset,
) -> f64 {
    let n_t = train_set.dims.n_timepoints;
    let per_subject: Vec<Vec<Cbt>> = train_set
        .subjects
        .iter()
        .map(|s| forward_subject_with_cycles(s.baseline(), params, n_t, cycles))
        .collect();
    let pop = population_cbt(&per_subject);
    let scores = centeredness_score(&pop, eval_set);
    scores.iter().sum::<f64>() / scores.len() as f64
}

/// Train on `dataset`, optionally scoring a held-out `eval_set` for
/// best-model selection. Fully deterministic given `(dataset, config)`.
pub fn train(
    dataset: &LongitudinalDataset,
    eval_set: Option<&LongitudinalDataset>,
    config: &TrainingConfig,
) -> Result<TrainingOutput, TrainingError> {
    dataset
        .check_invariants()
        .map_err(TrainingError::Config)?;
    config.validate(dataset.n_subjects(), dataset.dims.n_timepoints)?;
    if let Some(es) = eval_set {
        if es.dims != dataset.dims {
            return Err(TrainingError::Config(format!(
                "evaluation set dims {:?} do not match training dims {:?}",
                es.dims, dataset.dims
            )));
        }
    }

    let n_t = dataset.dims.n_timepoints;
    let cycles = config.effective_cycles();
    let mut params = ModelParams::init(
        config.variant,
        &config.hidden_dims,
        dataset.dims.n_views,
        config.seed,
    );
    let mut adam = AdamState::new(&params);
    // Separate stream from the weight initialisation.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let ids = dataset.subject_ids();

    let mut history = TrainingHistory::default();
    let mut best: Option<(f64, usize, ModelParams)> = None;

    for epoch in 1..=config.epochs {
        let mut order = ids.clone();
        order.shuffle(&mut rng);
        let mut breakdowns: Vec<LossBreakdown> = Vec::with_capacity(order.len());

        for subject_id in &order {
            let subject = dataset.subject(subject_id).expect("id from this dataset");
            let subset = sample_subset(&ids, config.k_samples, &mut rng)?;
            let samples: Vec<&SubjectTrajectory> = subset
                .iter()
                .map(|id| dataset.subject(id).expect("id from this dataset"))
                .collect();

            let step = |params: &mut ModelParams, adam: &mut AdamState| -> Result<LossBreakdown, TrainingError> {
                let tape = Tape::new();
                let values: Vec<Value> = params
                    .flat_arrays()
                    .into_iter()
                    .map(|a| tape.param(a))
                    .collect();
                let lifted = params.lift_from_values(&values);
                let fwd = tape_forward_subject(&tape, subject.baseline(), &lifted, n_t, cycles);
                let loss = tape_subject_loss(&tape, &fwd.cbts, &samples, config.alpha);
                let total = loss.total.item();
                if !total.is_finite() {
                    return Err(TrainingError::NonFiniteLoss { value: total });
                }
                loss.total.backward();
                let mut grads: Vec<Array2<f64>> = values.iter().map(Value::grad).collect();
                if let Some(c) = config.grad_clip {
                    for g in &mut grads {
                        *g = g.mapv(|x| x.clamp(-c, c));
                    }
                }
                adam_step(params, &grads, adam, config)?;
                Ok(LossBreakdown::new(
                    loss.centeredness.item(),
                    loss.time_reg.as_ref().map(Value::item).unwrap_or(0.0),
                    config.alpha,
                ))
            };
            let breakdown = step(&mut params, &mut adam).map_err(|source| TrainingError::Epoch {
                epoch,
                subject: subject_id.clone(),
                source: Box::new(source),
            })?;
            breakdowns.push(breakdown);
        }

        let n = breakdowns.len() as f64;
        let mean_c = breakdowns.iter().map(|b| b.centeredness).sum::<f64>() / n;
        let mean_t = breakdowns.iter().map(|b| b.time_reg).sum::<f64>() / n;
        let mean_total = breakdowns.iter().map(|b| b.total).sum::<f64>() / n;

        let heldout = match eval_set {
            Some(es) if epoch % config.eval_every == 0 => {
                let score = heldout_score(&params, cycles, dataset, es);
                let improved = best.as_ref().map_or(true, |(b, _, _)| score < *b);
                if improved {
                    best = Some((score, epoch, params.clone()));
                }
                Some(score)
            }
            _ => None,
        };
        log::info!(
            "epoch {epoch}/{}: loss {mean_total:.6} (centeredness {mean_c:.6}, time-reg {mean_t:.6}){}",
            config.epochs,
            heldout.map(|h| format!(", held-out {h:.6}")).unwrap_or_default()
        );
        history.records.push(EpochRecord {
            epoch,
            mean_centeredness: mean_c,
            mean_time_reg: mean_t,
            mean_total,
            heldout_centeredness: heldout,
        });
    }

    let (best_params, best_epoch) = match best {
        Some((_, epoch, p)) => (p, Some(epoch)),
        None => (params.clone(), None),
    };
    Ok(TrainingOutput {
        last: params,
        best: best_params,
        best_epoch,
        history,
    })
}

// ── checkpoints ─────────────────────────────────────────────────────

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("failed to read or write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("checkpoint {path}, line {line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("checkpoint {path}: {reason}")]
    Invalid { path: PathBuf, reason: String },
}

fn render_config(config: &TrainingConfig) -> String {
    let mut s = String::from("[config]\n");
    s.push_str(&format!("variant = {}\n", config.variant));
    let dims: Vec<String> = config.hidden_dims.iter().map(|d| d.to_string()).collect();
    s.push_str(&format!("hidden_dims = {}\n", dims.join(",")));
    s.push_str(&format!("learning_rate = {:.16e}\n", config.learning_rate));
    s.push_str(&format!("epochs = {}\n", config.epochs));
    s.push_str(&format!("alpha = {:.16e}\n", config.alpha));
    s.push_str(&format!("k_samples = {}\n", config.k_samples));
    s.push_str(&format!("cycles = {}\n", config.effective_cycles()));
    s.push_str(&format!("seed = {}\n", config.seed));
    s.push_str(&format!("adam_beta1 = {:.16e}\n", config.adam_beta1));
    s.push_str(&format!("adam_beta2 = {:.16e}\n", config.adam_beta2));
    s.push_str(&format!("adam_epsilon = {:.16e}\n", config.adam_epsilon));
    s.push_str(&format!("eval_every = {}\n", config.eval_every));
    match config.grad_clip {
        Some(c) => s.push_str(&format!("grad_clip = {c:.16e}\n")),
        None => s.push_str("grad_clip = none\n"),
    }
    s
}

/// Write a model plus the configuration that produced it as a plain-text
/// checkpoint: a `[config]` key-value section followed by one
/// `[matrix <name> <rows> <cols>]` section per parameter, entries in
/// row-major order with 17 significant digits.
pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams,
    config: &TrainingConfig,
) -> Result<(), CheckpointError> {
    let mut text = render_config(config);
    for (name, matrix) in params.flat_names().iter().zip(params.flat_arrays()) {
        let (r, c) = matrix.dim();
        text.push_str(&format!("\n[matrix {name} {r} {c}]\n"));
        for i in 0..r {
            let row: Vec<String> = (0..c).map(|j| format!("{:.16e}", matrix[(i, j)])).collect();
            text.push_str(&row.join(","));
            text.push('\n');
        }
    }
    std::fs::write(path, text).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Load a checkpoint written by [`save_checkpoint`]; reconstruction is
/// bit-exact.
pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, TrainingConfig), CheckpointError> {
    let text = std::fs::read_to_string(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let perr = |line: usize, reason: String| CheckpointError::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let ierr = |reason: String| CheckpointError::Invalid {
        path: path.to_path_buf(),
        reason,
    };

    let mut config_pairs: Vec<(String, String)> = Vec::new();
    let mut matrices: Vec<(String, Array2<f64>)> = Vec::new();
    let mut lines = text.lines().enumerate().peekable();
    let mut in_config = false;
    while let Some((ln, line)) = lines.next() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line == "[config]" {
            in_config = true;
            continue;
        }
        if let Some(rest) = line.strip_prefix("[matrix ").and_then(|r| r.strip_suffix(']')) {
            in_config = false;
            let parts: Vec<&str> = rest.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(perr(ln + 1, format!("malformed matrix header {line:?}")));
            }
            let name = parts[0].to_string();
            let rows: usize = parts[1]
                .parse()
                .map_err(|_| perr(ln + 1, format!("bad row count {:?}", parts[1])))?;
            let cols: usize = parts[2]
                .parse()
                .map_err(|_| perr(ln + 1, format!("bad column count {:?}", parts[2])))?;
            let mut m = Array2::zeros((rows, cols));
            for i in 0..rows {
                let (rln, row_line) = lines
                    .next()
                    .ok_or_else(|| perr(ln + 1, format!("matrix {name} truncated at row {i}")))?;
                let cells: Vec<&str> = row_line.trim().split(',').collect();
                if cells.len() != cols {
                    return Err(perr(
                        rln + 1,
                        format!("matrix {name} row {i}: expected {cols} entries, got {}", cells.len()),
                    ));
                }
                for (j, cell) in cells.iter().enumerate() {
                    m[(i, j)] = cell.trim().parse::<f64>().map_err(|_| {
                        perr(rln + 1, format!("matrix {name}: unparseable entry {cell:?}"))
                    })?;
                }
            }
            matrices.push((name, m));
            continue;
        }
        if in_config {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| perr(ln + 1, format!("expected key = value, got {line:?}")))?;
            config_pairs.push((key.trim().to_string(), value.trim().to_string()));
            continue;
        }
        return Err(perr(ln + 1, format!("unexpected content {line:?}")));
    }

    let get = |key: &str| -> Result<String, CheckpointError> {
        config_pairs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.clone())
            .ok_or_else(|| ierr(format!("missing config key {key}")))
    };
    let parse_f64 = |key: &str| -> Result<f64, CheckpointError> {
        get(key)?
            .parse::<f64>()
            .map_err(|_| ierr(format!("config key {key} is not a number")))
    };
    let parse_usize = |key: &str| -> Result<usize, CheckpointError> {
        get(key)?
            .parse::<usize>()
            .map_err(|_| ierr(format!("config key {key} is not an integer")))
    };

    let variant: Variant = get("variant")?
        .parse()
        .map_err(|e: String| ierr(e))?;
    let hidden_dims: Vec<usize> = get("hidden_dims")?
        .split(',')
        .map(|d| d.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| ierr("hidden_dims must be comma-separated integers".into()))?;
    let grad_clip = match get("grad_clip")?.as_str() {
        "none" => None,
        v => Some(
            v.parse::<f64>()
                .map_err(|_| ierr("grad_clip must be a number or none".into()))?,
        ),
    };
    let config = TrainingConfig {
        variant,
        hidden_dims: hidden_dims.clone(),
        learning_rate: parse_f64("learning_rate")?,
        epochs: parse_usize("epochs")?,
        alpha: parse_f64("alpha")?,
        k_samples: parse_usize("k_samples")?,
        cycles: Some(parse_usize("cycles")?),
        seed: get("seed")?
            .parse::<u64>()
            .map_err(|_| ierr("seed must be an unsigned integer".into()))?,
        adam_beta1: parse_f64("adam_beta1")?,
        adam_beta2: parse_f64("adam_beta2")?,
        adam_epsilon: parse_f64("adam_epsilon")?,
        eval_every: parse_usize("eval_every")?,
        grad_clip,
    };

    // Rebuild the parameter set from the named matrices.
    let n_views = matrices
        .iter()
        .find(|(n, _)| n == "layer0.w_e")
        .map(|(_, m)| m.ncols())
        .ok_or_else(|| ierr("missing matrix layer0.w_e".into()))?;
    let mut params = ModelParams::init(variant, &hidden_dims, n_views, 0);
    let expected = params.flat_names();
    if matrices.len() != expected.len() {
        return Err(ierr(format!(
            "expected {} parameter matrices, found {}",
            expected.len(),
            matrices.len()
        )));
    }
    let mut ordered = Vec::with_capacity(expected.len());
    for name in &expected {
        let found = matrices
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| ierr(format!("missing matrix {name}")))?;
        ordered.push(found.1.clone());
    }
    params.assign_flat(&ordered);
    params
        .check_invariants()
        .map_err(|e| ierr(format!("inconsistent parameters: {e}")))?;
    Ok((params, config))
}
