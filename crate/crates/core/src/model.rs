//! The recurrent graph-convolutional forward pass: view normalisation,
//! stacked message-passing cells over the complete ROI graph, cyclic
//! recursion across timepoints, and template derivation from hidden states.
//!
//! Every forward runs through the gradient tape. Training lifts parameters as
//! trainable leaves; the plain-matrix entry points below lift them as
//! constants and run the identical numeric path, so training, evaluation and
//! checkpointed inference cannot drift apart.
//!
//! Message passing over the complete graph is evaluated in batched form: the
//! `n_r² × n_v` edge-feature matrix (row `i·n_r + j` holding the fiber between
//! ROI `i` and `j`) is combined with row-replicated and row-tiled copies of
//! the hidden-state matrix, so one cell application is a handful of matrix
//! ops instead of `n_r²` tape nodes.

use crate::dataset::MultigraphObservation;
use crate::grad::{Tape, Value};
use ndarray::{Array1, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::str::FromStr;

/// Guard added to standard deviations and ranges before dividing.
const NORM_EPS: f64 = 1e-8;

/// A connectional brain template: symmetric, zero-diagonal, non-negative.
pub type Cbt = Array2<f64>;

/// Audit the structural template invariants (exact, not approximate).
pub fn check_cbt_invariants(c: &Cbt) -> Result<(), String> {
    let (r, k) = c.dim();
    if r != k {
        return Err(format!("template must be square, got ({r}, {k})"));
    }
    for i in 0..r {
        if c[(i, i)] != 0.0 {
            return Err(format!("diagonal entry ({i}, {i}) = {}", c[(i, i)]));
        }
        for j in 0..r {
            let x = c[(i, j)];
            if !x.is_finite() || x < 0.0 {
                return Err(format!("entry ({i}, {j}) = {x}"));
            }
            if x != c[(j, i)] {
                return Err(format!("asymmetry at ({i}, {j}): {x} vs {}", c[(j, i)]));
            }
        }
    }
    Ok(())
}

/// Architecture variants, ordered from ablated to complete.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Raw edge features, no cyclic recursion.
    Vanilla,
    /// Raw edge features, one extra recursion pass.
    Cyclic,
    /// Min-max normalised edge features, one extra recursion pass.
    CyclicMinmax,
    /// Learned sigmoid normalisation, one extra recursion pass.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Vanilla,
        Variant::Cyclic,
        Variant::CyclicMinmax,
        Variant::Full,
    ];

    /// Extra full passes over the timepoint sequence.
    pub fn cycles(self) -> usize {
        match self {
            Variant::Vanilla => 0,
            _ => 1,
        }
    }

    pub fn uses_learned_normalizer(self) -> bool {
        matches!(self, Variant::Full)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::Cyclic => "cyclic",
            Variant::CyclicMinmax => "cyclic-minmax",
            Variant::Full => "full",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vanilla" => Ok(Variant::Vanilla),
            "cyclic" => Ok(Variant::Cyclic),
            "cyclic-minmax" => Ok(Variant::CyclicMinmax),
            "full" => Ok(Variant::Full),
            other => Err(format!(
                "unknown variant {other:?}; expected vanilla, cyclic, cyclic-minmax or full"
            )),
        }
    }
}

/// Learnable per-view gain and bias of the sigmoid normaliser (both 1×n_v).
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizerParams {
    pub gain: Array2<f64>,
    pub bias: Array2<f64>,
}

impl NormalizerParams {
    /// Identity initialisation: gain 1, bias 0.
    pub fn init(n_views: usize) -> Self {
        NormalizerParams {
            gain: Array2::from_elem((1, n_views), 1.0),
            bias: Array2::zeros((1, n_views)),
        }
    }

    pub fn n_views(&self) -> usize {
        self.gain.ncols()
    }
}

/// One cell layer: message weights (W_e over edge features, W_h over hidden
/// state, bias b) and the self-loop map Theta.
#[derive(Debug, Clone, PartialEq)]
pub struct CellParams {
    /// n_out × n_v
    pub w_e: Array2<f64>,
    /// n_out × n_in
    pub w_h: Array2<f64>,
    /// 1 × n_out
    pub b: Array2<f64>,
    /// n_out × n_in
    pub theta: Array2<f64>,
}

impl CellParams {
    pub fn n_in(&self) -> usize {
        self.w_h.ncols()
    }

    pub fn n_out(&self) -> usize {
        self.w_h.nrows()
    }

    pub fn n_views(&self) -> usize {
        self.w_e.ncols()
    }
}

/// Full parameter set of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub variant: Variant,
    pub hidden_dims: Vec<usize>,
    /// Present exactly when the variant learns its normalisation.
    pub normalizer: Option<NormalizerParams>,
    pub layers: Vec<CellParams>,
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit))
}

impl ModelParams {
    /// Seeded initialisation. Weight matrices draw uniform
    /// ±√(6/(fan_in+fan_out)) entries in a fixed order (per layer: W_e, W_h,
    /// Theta); biases start at zero, the normaliser at gain 1 / bias 0.
    ///
    /// Layer ℓ maps `hidden_dims[ℓ−1] → hidden_dims[ℓ]`; layer 0's input width
    /// is the last layer's output width so the hidden state can recur across
    /// timepoints.
    pub fn init(variant: Variant, hidden_dims: &[usize], n_views: usize, seed: u64) -> Self {
        assert!(!hidden_dims.is_empty(), "hidden_dims must be non-empty");
        assert!(hidden_dims.iter().all(|&d| d >= 1), "hidden dims must be positive");
        assert!(n_views >= 1, "n_views must be at least 1");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = *hidden_dims.last().expect("non-empty");
        let mut layers = Vec::with_capacity(hidden_dims.len());
        for (l, &n_out) in hidden_dims.iter().enumerate() {
            let n_in = if l == 0 { last } else { hidden_dims[l - 1] };
            let w_e = glorot(&mut rng, n_out, n_views, n_views, n_out);
            let w_h = glorot(&mut rng, n_out, n_in, n_in, n_out);
            let theta = glorot(&mut rng, n_out, n_in, n_in, n_out);
            layers.push(CellParams {
                w_e,
                w_h,
                b: Array2::zeros((1, n_out)),
                theta,
            });
        }
        let normalizer = variant
            .uses_learned_normalizer()
            .then(|| NormalizerParams::init(n_views));
        ModelParams {
            variant,
            hidden_dims: hidden_dims.to_vec(),
            normalizer,
            layers,
        }
    }

    /// Output width of the recurrent state (last layer's n_out).
    pub fn state_dim(&self) -> usize {
        *self.hidden_dims.last().expect("non-empty hidden_dims")
    }

    pub fn n_views(&self) -> usize {
        self.layers[0].n_views()
    }

    /// Verify the layer chain wiring and shape consistency.
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.hidden_dims.is_empty() || self.layers.len() != self.hidden_dims.len() {
            return Err(format!(
                "{} layers for {} hidden dims",
                self.layers.len(),
                self.hidden_dims.len()
            ));
        }
        let last = self.state_dim();
        let n_v = self.n_views();
        for (l, cell) in self.layers.iter().enumerate() {
            let want_in = if l == 0 { last } else { self.hidden_dims[l - 1] };
            let want_out = self.hidden_dims[l];
            if cell.n_in() != want_in || cell.n_out() != want_out {
                return Err(format!(
                    "layer {l}: maps {} -> {}, expected {want_in} -> {want_out}",
                    cell.n_in(),
                    cell.n_out()
                ));
            }
            if cell.w_e.dim() != (want_out, n_v)
                || cell.b.dim() != (1, want_out)
                || cell.theta.dim() != (want_out, want_in)
            {
                return Err(format!("layer {l}: inconsistent parameter shapes"));
            }
        }
        match (&self.normalizer, self.variant.uses_learned_normalizer()) {
            (Some(n), true) => {
                if n.gain.dim() != (1, n_v) || n.bias.dim() != (1, n_v) {
                    return Err("normaliser shape does not match n_views".into());
                }
            }
            (None, false) => {}
            (Some(_), false) => return Err("variant does not use a learned normaliser".into()),
            (None, true) => return Err("full variant requires a normaliser".into()),
        }
        Ok(())
    }

    /// Parameter matrices in canonical order: normaliser gain and bias (when
    /// present), then per layer W_e, W_h, b, Theta. This order is shared by
    /// [`assign_flat`], [`lift_from_values`] and the optimiser state.
    ///
    /// [`assign_flat`]: ModelParams::assign_flat
    /// [`lift_from_values`]: ModelParams::lift_from_values
    pub fn flat_arrays(&self) -> Vec<Array2<f64>> {
        let mut out = Vec::new();
        if let Some(n) = &self.normalizer {
            out.push(n.gain.clone());
            out.push(n.bias.clone());
        }
        for cell in &self.layers {
            out.push(cell.w_e.clone());
            out.push(cell.w_h.clone());
            out.push(cell.b.clone());
            out.push(cell.theta.clone());
        }
        out
    }

    /// Canonical names matching [`flat_arrays`] order, used by checkpoints.
    ///
    /// [`flat_arrays`]: ModelParams::flat_arrays
    pub fn flat_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.normalizer.is_some() {
            out.push("norm.gain".to_string());
            out.push("norm.bias".to_string());
        }
        for l in 0..self.layers.len() {
            for part in ["w_e", "w_h", "b", "theta"] {
                out.push(format!("layer{l}.{part}"));
            }
        }
        out
    }

    /// Overwrite every parameter from matrices in canonical order.
    pub fn assign_flat(&mut self, arrays: &[Array2<f64>]) {
        let mut it = arrays.iter();
        let mut take = |shape: (usize, usize), name: &str| -> Array2<f64> {
            let a = it.next().unwrap_or_else(|| panic!("missing parameter {name}"));
            assert_eq!(a.dim(), shape, "parameter {name}: wrong shape");
            a.clone()
        };
        if let Some(n) = &mut self.normalizer {
            n.gain = take((1, n.gain.ncols()), "norm.gain");
            n.bias = take((1, n.bias.ncols()), "norm.bias");
        }
        for (l, cell) in self.layers.iter_mut().enumerate() {
            cell.w_e = take(cell.w_e.dim(), &format!("layer{l}.w_e"));
            cell.w_h = take(cell.w_h.dim(), &format!("layer{l}.w_h"));
            cell.b = take(cell.b.dim(), &format!("layer{l}.b"));
            cell.theta = take(cell.theta.dim(), &format!("layer{l}.theta"));
        }
        assert!(it.next().is_none(), "too many parameter matrices");
    }

    /// Record the parameters on a tape, trainable or frozen.
    pub fn lift(&self, tape: &Tape, trainable: bool) -> TapeModelParams {
        let values: Vec<Value> = self
            .flat_arrays()
            .into_iter()
            .map(|a| if trainable { tape.param(a) } else { tape.constant(a) })
            .collect();
        self.lift_from_values(&values)
    }

    /// Assemble a tape-side parameter set from already-recorded values in
    /// canonical order (shape-checked against this model).
    pub fn lift_from_values(&self, values: &[Value]) -> TapeModelParams {
        let expected = self.flat_arrays().len();
        assert_eq!(
            values.len(),
            expected,
            "expected {expected} parameter values, got {}",
            values.len()
        );
        for (v, a) in values.iter().zip(self.flat_arrays()) {
            assert_eq!(v.shape(), a.dim(), "parameter value has wrong shape");
        }
        let mut it = values.iter().cloned();
        let normalizer = self.normalizer.as_ref().map(|_| TapeNormalizer {
            gain: it.next().expect("gain"),
            bias: it.next().expect("bias"),
        });
        let layers = self
            .layers
            .iter()
            .map(|_| TapeCellParams {
                w_e: it.next().expect("w_e"),
                w_h: it.next().expect("w_h"),
                b: it.next().expect("b"),
                theta: it.next().expect("theta"),
            })
            .collect();
        TapeModelParams {
            variant: self.variant,
            normalizer,
            layers,
        }
    }
}

/// Tape-side normaliser parameters.
#[derive(Clone)]
pub struct TapeNormalizer {
    pub gain: Value,
    pub bias: Value,
}

/// Tape-side cell parameters.
#[derive(Clone)]
pub struct TapeCellParams {
    pub w_e: Value,
    pub w_h: Value,
    pub b: Value,
    pub theta: Value,
}

/// Tape-side model: the same structure as [`ModelParams`] but with recorded
/// values, produced by [`ModelParams::lift`].
#[derive(Clone)]
pub struct TapeModelParams {
    pub variant: Variant,
    pub normalizer: Option<TapeNormalizer>,
    pub layers: Vec<TapeCellParams>,
}

// ── normalisation ───────────────────────────────────────────────────

/// Mean and population standard deviation of the off-diagonal entries.
fn offdiag_mean_std(m: &Array2<f64>) -> (f64, f64) {
    let n = m.nrows();
    let count = n * n - n;
    if count == 0 {
        return (0.0, 0.0);
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sum += m[(i, j)];
            }
        }
    }
    let mean = sum / count as f64;
    let mut var = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let d = m[(i, j)] - mean;
                var += d * d;
            }
        }
    }
    (mean, (var / count as f64).sqrt())
}

fn offdiag_min_max(m: &Array2<f64>) -> (f64, f64) {
    let n = m.nrows();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                lo = lo.min(m[(i, j)]);
                hi = hi.max(m[(i, j)]);
            }
        }
    }
    if lo.is_finite() {
        (lo, hi)
    } else {
        (0.0, 0.0)
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Learned sigmoid normalisation: per view, z-score the off-diagonal entries
/// with that view's own mean and standard deviation (guarded by +1e-8), apply
/// `z·gain_v + bias_v`, then the logistic sigmoid. Diagonals stay zero, so
/// symmetry is preserved and off-diagonal outputs lie strictly in (0, 1).
pub fn normalize_views_learned(
    obs: &MultigraphObservation,
    params: &NormalizerParams,
) -> MultigraphObservation {
    assert_eq!(
        params.n_views(),
        obs.n_views(),
        "normaliser covers {} views, observation has {}",
        params.n_views(),
        obs.n_views()
    );
    let n = obs.n_rois();
    let views = obs
        .views()
        .iter()
        .enumerate()
        .map(|(v, m)| {
            let (mean, std) = offdiag_mean_std(m);
            let gain = params.gain[(0, v)];
            let bias = params.bias[(0, v)];
            Array2::from_shape_fn((n, n), |(i, j)| {
                if i == j {
                    0.0
                } else {
                    let z = (m[(i, j)] - mean) / (std + NORM_EPS);
                    logistic(z * gain + bias)
                }
            })
        })
        .collect();
    MultigraphObservation::new(views)
}

/// Min-max normalisation: per view, off-diagonal entries are mapped by
/// `(x − min)/(max − min + 1e-8)` over that view's own range; a constant view
/// maps to all zeros. Diagonals stay zero.
pub fn normalize_views_minmax(obs: &MultigraphObservation) -> MultigraphObservation {
    let n = obs.n_rois();
    let views = obs
        .views()
        .iter()
        .map(|m| {
            let (lo, hi) = offdiag_min_max(m);
            Array2::from_shape_fn((n, n), |(i, j)| {
                if i == j {
                    0.0
                } else {
                    (m[(i, j)] - lo) / (hi - lo + NORM_EPS)
                }
            })
        })
        .collect();
    MultigraphObservation::new(views)
}

/// Z-scored edge-feature matrix (n_r² × n_v) with per-view off-diagonal
/// statistics; diagonal-pair rows carry z-scores of zero entries and are
/// masked downstream.
fn zscore_edge_matrix(obs: &MultigraphObservation) -> Array2<f64> {
    let n_r = obs.n_rois();
    let stats: Vec<(f64, f64)> = obs.views().iter().map(offdiag_mean_std).collect();
    Array2::from_shape_fn((n_r * n_r, obs.n_views()), |(p, v)| {
        let (mean, std) = stats[v];
        (obs.view(v)[(p / n_r, p % n_r)] - mean) / (std + NORM_EPS)
    })
}

/// Mask with zero rows at diagonal pairs (p = i·n_r + i), ones elsewhere.
fn offdiag_pair_mask(n_r: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((n_r * n_r, cols), |(p, _)| {
        if p / n_r == p % n_r {
            0.0
        } else {
            1.0
        }
    })
}

/// Edge inputs for one subject under the model's variant, as a tape value.
/// Only the full variant records learnable nodes; the others are constants.
fn tape_edge_inputs(tape: &Tape, obs: &MultigraphObservation, model: &TapeModelParams) -> Value {
    match model.variant {
        Variant::Vanilla | Variant::Cyclic => tape.constant(obs.edge_feature_matrix()),
        Variant::CyclicMinmax => tape.constant(normalize_views_minmax(obs).edge_feature_matrix()),
        Variant::Full => {
            let norm = model
                .normalizer
                .as_ref()
                .expect("full variant requires a normaliser");
            let z = tape.constant(zscore_edge_matrix(obs));
            let mask = tape.constant(offdiag_pair_mask(obs.n_rois(), obs.n_views()));
            z.mul_row(&norm.gain).add_row(&norm.bias).sigmoid().mul(&mask)
        }
    }
}

// ── cells and recursion ─────────────────────────────────────────────

/// One cell application in batched form. `e` is the n_r² × n_v edge-input
/// matrix, `h` the n_r × n_in hidden state; returns n_r × n_out.
fn tape_cell_apply(tape: &Tape, e: &Value, h: &Value, cell: &TapeCellParams, n_r: usize) -> Value {
    let n_out = cell.b.shape().1;
    // Shared edge term of both message halves.
    let edge_term = e.matmul(&cell.w_e.transpose());
    let f_i = edge_term
        .add(&h.repeat_rows(n_r).matmul(&cell.w_h.transpose()))
        .add_row(&cell.b)
        .tanh();
    let f_j = edge_term
        .add(&h.tile_rows(n_r).matmul(&cell.w_h.transpose()))
        .add_row(&cell.b)
        .tanh();
    let mask = tape.constant(offdiag_pair_mask(n_r, n_out));
    let neighbors = if n_r > 1 { (n_r - 1) as f64 } else { 1.0 };
    let messages = f_i
        .mul(&f_j)
        .mul(&mask)
        .block_sum_rows(n_r)
        .scale(1.0 / neighbors);
    h.matmul(&cell.theta.transpose()).add(&messages)
}

/// Run the stacked layers over the timepoint sequence on the tape.
///
/// The hidden state starts at zero; each timepoint pushes the state through
/// every layer in order, and the last layer's output recurs to the next
/// timepoint. With `cycles = c` the whole sweep runs c+1 times, each extra
/// pass re-seeded with the final state of the previous pass; the returned
/// states (one per timepoint) come from the last pass.
fn tape_block_forward(
    tape: &Tape,
    e: &Value,
    layers: &[TapeCellParams],
    n_r: usize,
    state_dim: usize,
    n_timepoints: usize,
    cycles: usize,
) -> Vec<Value> {
    assert!(n_timepoints >= 1, "need at least one timepoint");
    let mut seed = tape.constant(Array2::zeros((n_r, state_dim)));
    let mut states = Vec::new();
    for _pass in 0..=cycles {
        states = Vec::with_capacity(n_timepoints);
        let mut h = seed.clone();
        for _t in 0..n_timepoints {
            for cell in layers {
                h = tape_cell_apply(tape, e, &h, cell, n_r);
            }
            states.push(h.clone());
        }
        seed = states.last().expect("n_timepoints >= 1").clone();
    }
    states
}

/// Pairwise L1 template from a hidden state, on the tape:
/// `C[i][j] = Σ_k |h[i][k] − h[j][k]|`.
fn tape_cbt_from_hidden(h: &Value, n_r: usize) -> Value {
    h.repeat_rows(n_r)
        .sub(&h.tile_rows(n_r))
        .abs()
        .sum_axis(1)
        .reshape(n_r, n_r)
}

/// Everything a subject forward produces on the tape.
pub struct TapeSubjectForward {
    /// Hidden state per timepoint (n_r × state_dim), final pass.
    pub hidden: Vec<Value>,
    /// Predicted template per timepoint (n_r × n_r).
    pub cbts: Vec<Value>,
}

/// Full differentiable forward for one subject: variant normalisation of the
/// baseline observation, recurrent block with the given cycle count, template
/// per timepoint. Only the baseline observation is consumed; follow-up
/// observations enter through the losses.
pub fn tape_forward_subject(
    tape: &Tape,
    baseline: &MultigraphObservation,
    model: &TapeModelParams,
    n_timepoints: usize,
    cycles: usize,
) -> TapeSubjectForward {
    let n_r = baseline.n_rois();
    let state_dim = model
        .layers
        .last()
        .expect("model has at least one layer")
        .b
        .shape()
        .1;
    let e = tape_edge_inputs(tape, baseline, model);
    let hidden = tape_block_forward(tape, &e, &model.layers, n_r, state_dim, n_timepoints, cycles);
    let cbts = hidden.iter().map(|h| tape_cbt_from_hidden(h, n_r)).collect();
    TapeSubjectForward { hidden, cbts }
}

// ── plain-matrix entry points ───────────────────────────────────────

/// Single recurrent unit on one (edge-feature, hidden) vector pair:
/// `tanh(W_e·e + W_h·h + b)`.
pub fn rnn_unit(e: &Array1<f64>, h: &Array1<f64>, cell: &CellParams) -> Array1<f64> {
    assert_eq!(
        e.len(),
        cell.n_views(),
        "rnn_unit: edge vector has {} entries, cell expects {}",
        e.len(),
        cell.n_views()
    );
    assert_eq!(
        h.len(),
        cell.n_in(),
        "rnn_unit: hidden vector has {} entries, cell expects {}",
        h.len(),
        cell.n_in()
    );
    let pre = cell.w_e.dot(e) + cell.w_h.dot(h) + cell.b.row(0);
    pre.mapv(f64::tanh)
}

/// One cell over a complete graph:
/// `h'_i = Θ·h_i + (1/(n_r−1))·Σ_{j≠i} f(e_ij, h_i) ∘ f(e_ij, h_j)`
/// where `f` is [`rnn_unit`]. `obs_norm` must already be normalised (or raw,
/// for the variants that skip normalisation).
pub fn cell_forward(
    obs_norm: &MultigraphObservation,
    h: &Array2<f64>,
    cell: &CellParams,
) -> Array2<f64> {
    let n_r = obs_norm.n_rois();
    assert_eq!(
        h.dim(),
        (n_r, cell.n_in()),
        "cell_forward: hidden state is {:?}, expected ({n_r}, {})",
        h.dim(),
        cell.n_in()
    );
    let tape = Tape::new();
    let e = tape.constant(obs_norm.edge_feature_matrix());
    let hv = tape.constant(h.clone());
    let tc = TapeCellParams {
        w_e: tape.constant(cell.w_e.clone()),
        w_h: tape.constant(cell.w_h.clone()),
        b: tape.constant(cell.b.clone()),
        theta: tape.constant(cell.theta.clone()),
    };
    tape_cell_apply(&tape, &e, &hv, &tc, n_r).data()
}

/// Stacked recurrence over timepoints on plain matrices; `obs_norm` is the
/// (already normalised) baseline observation. See [`tape_forward_subject`]
/// for the variant-aware entry point.
pub fn block_forward(
    obs_norm: &MultigraphObservation,
    params: &ModelParams,
    n_timepoints: usize,
    cycles: usize,
) -> Vec<Array2<f64>> {
    let tape = Tape::new();
    let lifted = params.lift(&tape, false);
    let e = tape.constant(obs_norm.edge_feature_matrix());
    tape_block_forward(
        &tape,
        &e,
        &lifted.layers,
        obs_norm.n_rois(),
        params.state_dim(),
        n_timepoints,
        cycles,
    )
    .iter()
    .map(Value::data)
    .collect()
}

/// Pairwise L1 template from a hidden-state matrix.
pub fn cbt_from_hidden(h: &Array2<f64>) -> Cbt {
    let tape = Tape::new();
    let hv = tape.constant(h.clone());
    tape_cbt_from_hidden(&hv, h.nrows()).data()
}

/// Literal tensor-pipeline oracle for [`cbt_from_hidden`]: replicate the
/// state into an n_r × n_h × n_r tensor, swap the first and last axes,
/// take the element-wise absolute difference, and sum along the middle axis.
pub fn cbt_from_hidden_reference(h: &Array2<f64>) -> Cbt {
    let (n_r, n_h) = h.dim();
    let r = Array3::from_shape_fn((n_r, n_h, n_r), |(x, y, _z)| h[(x, y)]);
    let t = r.clone().permuted_axes([2, 1, 0]);
    let diff = (&r - &t).mapv(f64::abs);
    diff.sum_axis(Axis(1))
}

/// Variant-aware forward on plain matrices: normalise the baseline
/// observation, run the recurrent block, derive one template per timepoint.
/// Uses the variant's default cycle count.
pub fn forward_subject(
    baseline: &MultigraphObservation,
    params: &ModelParams,
    n_timepoints: usize,
) -> Vec<Cbt> {
    forward_subject_with_cycles(baseline, params, n_timepoints, params.variant.cycles())
}

/// [`forward_subject`] with an explicit cycle count (training configurations
/// may override the variant default).
pub fn forward_subject_with_cycles(
    baseline: &MultigraphObservation,
    params: &ModelParams,
    n_timepoints: usize,
    cycles: usize,
) -> Vec<Cbt> {
    let tape = Tape::new();
    let lifted = params.lift(&tape, false);
    tape_forward_subject(&tape, baseline, &lifted, n_timepoints, cycles)
        .cbts
        .iter()
        .map(Value::data)
        .collect()
}
