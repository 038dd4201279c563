//! Longitudinal multigraph populations: containers, disk format, synthesis,
//! and fold splitting.
//!
//! A subject is observed at `n_t` ordered timepoints; each observation is a
//! multigraph of `n_v` views, every view a symmetric, zero-diagonal,
//! non-negative `n_r × n_r` connectivity matrix. Datasets are immutable after
//! load or generation and safe to share read-only across threads.
//!
//! On disk a dataset is a TOML manifest plus one plain-text matrix file per
//! (subject, timepoint, view): `n_r` lines of `n_r` comma-separated decimals.
//! Writers emit 17 significant digits so save → load round-trips bit-exactly.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Maximum |S − Sᵀ| tolerated silently; larger asymmetry is repaired with a warning.
pub const SYMMETRY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("failed to read or write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("failed to parse manifest {path}: {source}")]
    ManifestParse {
        path: PathBuf,
        source: Box<toml::de::Error>,
    },
    #[error("invalid manifest {path}: {reason}")]
    ManifestInvalid { path: PathBuf, reason: String },
    #[error("view file {path}: expected {expected} rows of {expected} entries, found {found} at row {row}")]
    ViewShape {
        path: PathBuf,
        expected: usize,
        row: usize,
        found: usize,
    },
    #[error("view file {path}: unparseable entry {token:?} at row {row}, column {col}")]
    ViewParse {
        path: PathBuf,
        row: usize,
        col: usize,
        token: String,
    },
    #[error(
        "subject {subject}, timepoint {timepoint}, view {view}: invalid entry {value} at cell ({row}, {col})"
    )]
    BadEntry {
        subject: String,
        timepoint: usize,
        view: usize,
        row: usize,
        col: usize,
        value: f64,
    },
    #[error("subject {subject}: {reason}")]
    DimensionMismatch { subject: String, reason: String },
    #[error("cannot split {n_subjects} subjects into {n_folds} folds")]
    InvalidFolds { n_folds: usize, n_subjects: usize },
}

/// Shared dimensions of every subject in a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n_rois: usize,
    pub n_views: usize,
    pub n_timepoints: usize,
}

/// One timepoint of one subject: `n_v` connectivity views.
#[derive(Debug, Clone, PartialEq)]
pub struct MultigraphObservation {
    views: Vec<Array2<f64>>,
}

impl MultigraphObservation {
    /// Wrap pre-validated views. Panics on structurally impossible input
    /// (no views, non-square, inconsistent sizes); numeric invariants are the
    /// caller's responsibility and can be audited with [`check_invariants`].
    ///
    /// [`check_invariants`]: MultigraphObservation::check_invariants
    pub fn new(views: Vec<Array2<f64>>) -> Self {
        assert!(!views.is_empty(), "observation needs at least one view");
        let n_r = views[0].nrows();
        for (v, m) in views.iter().enumerate() {
            assert_eq!(
                m.dim(),
                (n_r, n_r),
                "view {v} must be {n_r}x{n_r}, got {:?}",
                m.dim()
            );
        }
        MultigraphObservation { views }
    }

    pub fn n_rois(&self) -> usize {
        self.views[0].nrows()
    }

    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    pub fn view(&self, v: usize) -> &Array2<f64> {
        &self.views[v]
    }

    pub fn views(&self) -> &[Array2<f64>] {
        &self.views
    }

    /// Edge features as a dense `n_r² × n_v` matrix: row `i·n_r + j` is the
    /// weight fiber between ROI `i` and ROI `j` across views.
    pub fn edge_feature_matrix(&self) -> Array2<f64> {
        let n_r = self.n_rois();
        let n_v = self.n_views();
        Array2::from_shape_fn((n_r * n_r, n_v), |(p, v)| self.views[v][(p / n_r, p % n_r)])
    }

    /// Audit the type invariants: symmetry within `1e-9`, exactly zero
    /// diagonal, and finite non-negative entries.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (v, m) in self.views.iter().enumerate() {
            let n = m.nrows();
            for i in 0..n {
                if m[(i, i)] != 0.0 {
                    return Err(format!("view {v}: diagonal entry ({i}, {i}) = {}", m[(i, i)]));
                }
                for j in 0..n {
                    let x = m[(i, j)];
                    if !x.is_finite() || x < 0.0 {
                        return Err(format!("view {v}: entry ({i}, {j}) = {x}"));
                    }
                    if (x - m[(j, i)]).abs() > SYMMETRY_TOLERANCE {
                        return Err(format!(
                            "view {v}: asymmetry at ({i}, {j}): {x} vs {}",
                            m[(j, i)]
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Ordered observations of one subject; index 0 is the baseline timepoint.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectTrajectory {
    pub subject_id: String,
    pub observations: Vec<MultigraphObservation>,
}

impl SubjectTrajectory {
    pub fn baseline(&self) -> &MultigraphObservation {
        &self.observations[0]
    }

    pub fn n_timepoints(&self) -> usize {
        self.observations.len()
    }
}

/// A population of subjects sharing identical dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalDataset {
    pub subjects: Vec<SubjectTrajectory>,
    pub dims: Dims,
    pub label: Option<String>,
}

impl LongitudinalDataset {
    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn subject_ids(&self) -> Vec<String> {
        self.subjects.iter().map(|s| s.subject_id.clone()).collect()
    }

    pub fn subject(&self, id: &str) -> Option<&SubjectTrajectory> {
        self.subjects.iter().find(|s| s.subject_id == id)
    }

    /// Clone the subjects named by `ids`, in that order. Panics on unknown ids.
    pub fn subset(&self, ids: &[String]) -> LongitudinalDataset {
        let subjects = ids
            .iter()
            .map(|id| {
                self.subject(id)
                    .unwrap_or_else(|| panic!("unknown subject id {id:?}"))
                    .clone()
            })
            .collect();
        LongitudinalDataset {
            subjects,
            dims: self.dims,
            label: self.label.clone(),
        }
    }

    /// Audit every invariant of the dataset and its members.
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.subjects.len() < 2 {
            return Err(format!("dataset has {} subjects, need at least 2", self.subjects.len()));
        }
        for s in &self.subjects {
            if s.observations.len() != self.dims.n_timepoints {
                return Err(format!(
                    "subject {}: {} timepoints, dataset declares {}",
                    s.subject_id,
                    s.observations.len(),
                    self.dims.n_timepoints
                ));
            }
            for (t, obs) in s.observations.iter().enumerate() {
                if obs.n_rois() != self.dims.n_rois || obs.n_views() != self.dims.n_views {
                    return Err(format!(
                        "subject {}, timepoint {t}: got {}x{} views {}, dataset declares {}x{} views {}",
                        s.subject_id,
                        obs.n_rois(),
                        obs.n_rois(),
                        obs.n_views(),
                        self.dims.n_rois,
                        self.dims.n_rois,
                        self.dims.n_views
                    ));
                }
                obs.check_invariants()
                    .map_err(|e| format!("subject {}, timepoint {t}: {e}", s.subject_id))?;
            }
        }
        Ok(())
    }
}

/// One cross-validation fold: disjoint train/test subject-id lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

// ── manifest schema ─────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    n_subjects: usize,
    n_rois: usize,
    n_views: usize,
    n_timepoints: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    subjects: Vec<ManifestSubject>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestSubject {
    id: String,
    /// `timepoints[t][v]` is the view file path, relative to the manifest.
    timepoints: Vec<Vec<String>>,
}

fn read_to_string(path: &Path) -> Result<String, DatasetError> {
    std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_view_file(path: &Path, n_r: usize) -> Result<Array2<f64>, DatasetError> {
    let text = read_to_string(path)?;
    let rows: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if rows.len() != n_r {
        return Err(DatasetError::ViewShape {
            path: path.to_path_buf(),
            expected: n_r,
            row: rows.len(),
            found: rows.len(),
        });
    }
    let mut m = Array2::zeros((n_r, n_r));
    for (i, line) in rows.iter().enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != n_r {
            return Err(DatasetError::ViewShape {
                path: path.to_path_buf(),
                expected: n_r,
                row: i,
                found: cells.len(),
            });
        }
        for (j, cell) in cells.iter().enumerate() {
            let token = cell.trim();
            m[(i, j)] = token.parse::<f64>().map_err(|_| DatasetError::ViewParse {
                path: path.to_path_buf(),
                row: i,
                col: j,
                token: token.to_string(),
            })?;
        }
    }
    Ok(m)
}

/// Read one square matrix from a view file, inferring the dimension from
/// the first row.
pub fn load_matrix(path: &Path) -> Result<Array2<f64>, DatasetError> {
    let text = read_to_string(path)?;
    let n = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .map(|l| l.split(',').count())
        .unwrap_or(0);
    if n == 0 {
        return Err(DatasetError::ViewShape {
            path: path.to_path_buf(),
            expected: 1,
            row: 0,
            found: 0,
        });
    }
    parse_view_file(path, n)
}

/// Load a dataset from a TOML manifest.
///
/// View matrices are validated (finite, non-negative), symmetrised by
/// averaging with their transpose (a warning is logged when the asymmetry
/// exceeds [`SYMMETRY_TOLERANCE`]), and their diagonals are forced to zero
/// (with a warning when a nonzero diagonal was present).
pub fn load_dataset(manifest_path: &Path) -> Result<LongitudinalDataset, DatasetError> {
    let text = read_to_string(manifest_path)?;
    let manifest: ManifestFile =
        toml::from_str(&text).map_err(|source| DatasetError::ManifestParse {
            path: manifest_path.to_path_buf(),
            source: Box::new(source),
        })?;
    let invalid = |reason: String| DatasetError::ManifestInvalid {
        path: manifest_path.to_path_buf(),
        reason,
    };

    if manifest.n_subjects < 2 {
        return Err(invalid(format!(
            "n_subjects = {}, need at least 2",
            manifest.n_subjects
        )));
    }
    if manifest.n_rois == 0 || manifest.n_views == 0 || manifest.n_timepoints == 0 {
        return Err(invalid("n_rois, n_views and n_timepoints must be positive".into()));
    }
    if manifest.subjects.len() != manifest.n_subjects {
        return Err(invalid(format!(
            "manifest declares {} subjects but lists {}",
            manifest.n_subjects,
            manifest.subjects.len()
        )));
    }
    let mut seen = std::collections::BTreeSet::new();
    for s in &manifest.subjects {
        if !seen.insert(s.id.clone()) {
            return Err(invalid(format!("duplicate subject id {:?}", s.id)));
        }
    }

    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let n_r = manifest.n_rois;
    let mut subjects = Vec::with_capacity(manifest.subjects.len());
    for ms in &manifest.subjects {
        if ms.timepoints.len() != manifest.n_timepoints {
            return Err(DatasetError::DimensionMismatch {
                subject: ms.id.clone(),
                reason: format!(
                    "has {} timepoints, dataset declares {}",
                    ms.timepoints.len(),
                    manifest.n_timepoints
                ),
            });
        }
        let mut observations = Vec::with_capacity(ms.timepoints.len());
        for (t, views) in ms.timepoints.iter().enumerate() {
            if views.len() != manifest.n_views {
                return Err(DatasetError::DimensionMismatch {
                    subject: ms.id.clone(),
                    reason: format!(
                        "timepoint {t} has {} views, dataset declares {}",
                        views.len(),
                        manifest.n_views
                    ),
                });
            }
            let mut mats = Vec::with_capacity(views.len());
            for (v, rel) in views.iter().enumerate() {
                let mut m = parse_view_file(&base.join(rel), n_r)?;
                for i in 0..n_r {
                    for j in 0..n_r {
                        let x = m[(i, j)];
                        if !x.is_finite() || x < 0.0 {
                            return Err(DatasetError::BadEntry {
                                subject: ms.id.clone(),
                                timepoint: t,
                                view: v,
                                row: i,
                                col: j,
                                value: x,
                            });
                        }
                    }
                }
                let mut max_asym = 0.0_f64;
                for i in 0..n_r {
                    for j in (i + 1)..n_r {
                        max_asym = max_asym.max((m[(i, j)] - m[(j, i)]).abs());
                        let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
                        m[(i, j)] = avg;
                        m[(j, i)] = avg;
                    }
                }
                if max_asym > SYMMETRY_TOLERANCE {
                    log::warn!(
                        "subject {}, timepoint {t}, view {v}: asymmetry {max_asym:.3e} repaired by averaging",
                        ms.id
                    );
                }
                let mut diag_hit = false;
                for i in 0..n_r {
                    if m[(i, i)] != 0.0 {
                        diag_hit = true;
                        m[(i, i)] = 0.0;
                    }
                }
                if diag_hit {
                    log::warn!(
                        "subject {}, timepoint {t}, view {v}: nonzero diagonal zeroed",
                        ms.id
                    );
                }
                mats.push(m);
            }
            observations.push(MultigraphObservation::new(mats));
        }
        subjects.push(SubjectTrajectory {
            subject_id: ms.id.clone(),
            observations,
        });
    }

    Ok(LongitudinalDataset {
        subjects,
        dims: Dims {
            n_rois: manifest.n_rois,
            n_views: manifest.n_views,
            n_timepoints: manifest.n_timepoints,
        },
        label: manifest.label,
    })
}

/// Render a matrix in the view-file format: one comma-separated row per
/// line, entries with 17 significant digits for bit-exact reload.
pub fn format_matrix(m: &Array2<f64>) -> String {
    let mut out = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:.16e}", m[(i, j)])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn write_file(path: &Path, contents: &str) -> Result<(), DatasetError> {
    std::fs::write(path, contents).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Write a dataset under `dir` (created if absent) as `manifest.toml` plus one
/// view file per (subject, timepoint, view). Returns the manifest path.
/// Entries are written with 17 significant digits for bit-exact reload.
pub fn save_dataset(dataset: &LongitudinalDataset, dir: &Path) -> Result<PathBuf, DatasetError> {
    std::fs::create_dir_all(dir).map_err(|source| DatasetError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut subjects = Vec::with_capacity(dataset.subjects.len());
    for s in &dataset.subjects {
        let sub_dir = dir.join(&s.subject_id);
        std::fs::create_dir_all(&sub_dir).map_err(|source| DatasetError::Io {
            path: sub_dir.clone(),
            source,
        })?;
        let mut timepoints = Vec::with_capacity(s.observations.len());
        for (t, obs) in s.observations.iter().enumerate() {
            let mut views = Vec::with_capacity(obs.n_views());
            for v in 0..obs.n_views() {
                let rel = format!("{}/t{}_v{}.csv", s.subject_id, t + 1, v + 1);
                write_file(&dir.join(&rel), &format_matrix(obs.view(v)))?;
                views.push(rel);
            }
            timepoints.push(views);
        }
        subjects.push(ManifestSubject {
            id: s.subject_id.clone(),
            timepoints,
        });
    }
    let manifest = ManifestFile {
        n_subjects: dataset.subjects.len(),
        n_rois: dataset.dims.n_rois,
        n_views: dataset.dims.n_views,
        n_timepoints: dataset.dims.n_timepoints,
        label: dataset.label.clone(),
        subjects,
    };
    let path = dir.join("manifest.toml");
    let text = toml::to_string_pretty(&manifest).expect("manifest serialises");
    write_file(&path, &text)?;
    Ok(path)
}

// ── synthesis ───────────────────────────────────────────────────────

/// Generate a deterministic synthetic cohort.
///
/// Per view `v` the recipe draws a symmetric zero-diagonal population mean
/// `M_v` (off-diagonal uniform in `[0.2, 0.8]`) and a symmetric drift
/// direction `D_v` (entries uniform in `[-1, 1] · drift_scale`); subject `s`
/// at timepoint `t` (0-based) observes
/// `clamp(M_v + t·D_v + E, 0.001, ∞)` off-diagonal, where `E` is symmetric
/// noise with entries `Normal(0, noise_scale)`. Diagonals stay exactly zero
/// and symmetry is exact by construction.
///
/// Panics if any count is zero or a scale is negative.
pub fn generate_synthetic(
    n_subjects: usize,
    n_rois: usize,
    n_views: usize,
    n_timepoints: usize,
    seed: u64,
    drift_scale: f64,
    noise_scale: f64,
) -> LongitudinalDataset {
    assert!(
        n_subjects >= 1 && n_rois >= 1 && n_views >= 1 && n_timepoints >= 1,
        "all counts must be at least 1"
    );
    assert!(
        drift_scale >= 0.0 && noise_scale >= 0.0,
        "drift_scale and noise_scale must be non-negative"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_scale).expect("non-negative standard deviation");

    let sym_draw = |f: &mut dyn FnMut(&mut ChaCha8Rng) -> f64, rng: &mut ChaCha8Rng| {
        let mut m = Array2::zeros((n_rois, n_rois));
        for i in 0..n_rois {
            for j in (i + 1)..n_rois {
                let x = f(rng);
                m[(i, j)] = x;
                m[(j, i)] = x;
            }
        }
        m
    };

    let means: Vec<Array2<f64>> = (0..n_views)
        .map(|_| sym_draw(&mut |r| r.random_range(0.2..0.8), &mut rng))
        .collect();
    let drifts: Vec<Array2<f64>> = (0..n_views)
        .map(|_| sym_draw(&mut |r| r.random_range(-1.0..1.0) * drift_scale, &mut rng))
        .collect();

    let mut subjects = Vec::with_capacity(n_subjects);
    for s in 0..n_subjects {
        let mut observations = Vec::with_capacity(n_timepoints);
        for t in 0..n_timepoints {
            let mut views = Vec::with_capacity(n_views);
            for v in 0..n_views {
                let e = sym_draw(&mut |r| noise.sample(r), &mut rng);
                let mut m = Array2::zeros((n_rois, n_rois));
                for i in 0..n_rois {
                    for j in (i + 1)..n_rois {
                        let x = (means[v][(i, j)] + t as f64 * drifts[v][(i, j)] + e[(i, j)])
                            .max(0.001);
                        m[(i, j)] = x;
                        m[(j, i)] = x;
                    }
                }
                views.push(m);
            }
            observations.push(MultigraphObservation::new(views));
        }
        subjects.push(SubjectTrajectory {
            subject_id: format!("sub-{:03}", s + 1),
            observations,
        });
    }
    LongitudinalDataset {
        subjects,
        dims: Dims {
            n_rois,
            n_views,
            n_timepoints,
        },
        label: None,
    }
}

// ── splitting ───────────────────────────────────────────────────────

/// Shuffle subject ids with `seed` and deal them round-robin into `n_folds`
/// test sets; each fold's training set is the complement. Deterministic.
pub fn kfold_split(
    dataset: &LongitudinalDataset,
    n_folds: usize,
    seed: u64,
) -> Result<Vec<FoldSplit>, DatasetError> {
    let n_s = dataset.n_subjects();
    if n_folds < 2 || n_folds > n_s {
        return Err(DatasetError::InvalidFolds {
            n_folds,
            n_subjects: n_s,
        });
    }
    let mut ids = dataset.subject_ids();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let mut folds = Vec::with_capacity(n_folds);
    for f in 0..n_folds {
        let mut test_ids = Vec::new();
        let mut train_ids = Vec::new();
        for (i, id) in ids.iter().enumerate() {
            if i % n_folds == f {
                test_ids.push(id.clone());
            } else {
                train_ids.push(id.clone());
            }
        }
        folds.push(FoldSplit {
            fold_index: f,
            train_ids,
            test_ids,
        });
    }
    Ok(folds)
}

// ── per-matrix statistics ───────────────────────────────────────────

/// Mean of all `n_r²` entries of each view, zero diagonal included.
pub fn view_means(obs: &MultigraphObservation) -> Vec<f64> {
    let n = (obs.n_rois() * obs.n_rois()) as f64;
    obs.views().iter().map(|m| m.sum() / n).collect()
}

/// Node strength of each ROI: the row sum of a square connectivity matrix.
pub fn node_strengths(matrix: &Array2<f64>) -> Vec<f64> {
    let (r, c) = matrix.dim();
    assert_eq!(r, c, "node_strengths: matrix must be square, got ({r}, {c})");
    (0..r).map(|i| matrix.row(i).sum()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn write_demo_view(dir: &Path, rel: &str, m: &Array2<f64>) {
        let path = dir.join(rel);
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, format_matrix(m)).unwrap();
    }

    fn demo_matrix(n: usize, scale: f64) -> Array2<f64> {
        let mut m = Array2::zeros((n, n));
        for i in 0..n {
            for j in (i + 1)..n {
                let x = scale * (1.0 + (i * n + j) as f64);
                m[(i, j)] = x;
                m[(j, i)] = x;
            }
        }
        m
    }

    fn demo_manifest(dir: &Path, n_subjects: usize, n_rois: usize, n_views: usize, n_t: usize) -> PathBuf {
        let mut text = format!(
            "n_subjects = {n_subjects}\nn_rois = {n_rois}\nn_views = {n_views}\nn_timepoints = {n_t}\n"
        );
        for s in 0..n_subjects {
            text.push_str(&format!("\n[[subjects]]\nid = \"sub-{s}\"\ntimepoints = [\n"));
            for t in 0..n_t {
                let files: Vec<String> = (0..n_views)
                    .map(|v| {
                        let rel = format!("sub-{s}/t{t}_v{v}.csv");
                        write_demo_view(dir, &rel, &demo_matrix(n_rois, 0.1 * (s + t + v + 1) as f64));
                        format!("\"{rel}\"")
                    })
                    .collect();
                text.push_str(&format!("  [{}],\n", files.join(", ")));
            }
            text.push_str("]\n");
        }
        let path = dir.join("manifest.toml");
        std::fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn load_echoes_declared_dimensions() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = demo_manifest(dir.path(), 2, 4, 2, 2);
        let ds = load_dataset(&manifest).unwrap();
        assert_eq!(
            ds.dims,
            Dims {
                n_rois: 4,
                n_views: 2,
                n_timepoints: 2
            }
        );
        assert_eq!(ds.n_subjects(), 2);
        ds.check_invariants().unwrap();
    }

    #[test]
    fn nonzero_diagonal_is_zeroed_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = demo_manifest(dir.path(), 2, 4, 1, 1);
        let mut m = demo_matrix(4, 0.2);
        m[(2, 2)] = 0.5;
        write_demo_view(dir.path(), "sub-0/t0_v0.csv", &m);
        let ds = load_dataset(&manifest).unwrap();
        assert_eq!(ds.subjects[0].observations[0].view(0)[(2, 2)], 0.0);
        ds.check_invariants().unwrap();
    }

    #[test]
    fn asymmetric_view_is_repaired_by_averaging() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = demo_manifest(dir.path(), 2, 4, 1, 1);
        let mut m = demo_matrix(4, 0.2);
        m[(0, 1)] = 1.0;
        m[(1, 0)] = 3.0;
        write_demo_view(dir.path(), "sub-0/t0_v0.csv", &m);
        let ds = load_dataset(&manifest).unwrap();
        let v = ds.subjects[0].observations[0].view(0);
        assert_eq!(v[(0, 1)], 2.0);
        assert_eq!(v[(1, 0)], 2.0);
    }

    #[test]
    fn view_count_mismatch_is_a_dimension_error() {
        let dir = tempfile::tempdir().unwrap();
        demo_manifest(dir.path(), 2, 4, 2, 1);
        // Rewrite the manifest so subject 1 lists only one view.
        let text = "n_subjects = 2\nn_rois = 4\nn_views = 2\nn_timepoints = 1\n\n\
            [[subjects]]\nid = \"sub-0\"\ntimepoints = [[\"sub-0/t0_v0.csv\", \"sub-0/t0_v1.csv\"]]\n\n\
            [[subjects]]\nid = \"sub-1\"\ntimepoints = [[\"sub-1/t0_v0.csv\"]]\n";
        let path = dir.path().join("manifest.toml");
        std::fs::write(&path, text).unwrap();
        match load_dataset(&path) {
            Err(DatasetError::DimensionMismatch { subject, .. }) => assert_eq!(subject, "sub-1"),
            other => panic!("expected DimensionMismatch, got {other:?}"),
        }
    }

    #[test]
    fn negative_entry_names_subject_timepoint_view_and_cell() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = demo_manifest(dir.path(), 2, 4, 2, 2);
        let mut m = demo_matrix(4, 0.2);
        m[(1, 3)] = -0.25;
        write_demo_view(dir.path(), "sub-1/t1_v1.csv", &m);
        match load_dataset(&manifest) {
            Err(DatasetError::BadEntry {
                subject,
                timepoint,
                view,
                row,
                col,
                value,
            }) => {
                assert_eq!(subject, "sub-1");
                assert_eq!((timepoint, view, row, col), (1, 1, 1, 3));
                assert_eq!(value, -0.25);
            }
            other => panic!("expected BadEntry, got {other:?}"),
        }
    }

    #[test]
    fn missing_view_file_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = demo_manifest(dir.path(), 2, 4, 1, 1);
        std::fs::remove_file(dir.path().join("sub-1/t0_v0.csv")).unwrap();
        assert!(matches!(load_dataset(&manifest), Err(DatasetError::Io { .. })));
    }

    #[test]
    fn save_then_load_round_trips_bit_exactly() {
        let ds = generate_synthetic(3, 5, 2, 2, 77, 0.05, 0.05);
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(&manifest).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn generator_produces_declared_dims_and_valid_invariants() {
        let ds = generate_synthetic(40, 10, 4, 2, 42, 0.05, 0.05);
        assert_eq!(
            ds.dims,
            Dims {
                n_rois: 10,
                n_views: 4,
                n_timepoints: 2
            }
        );
        assert_eq!(ds.n_subjects(), 40);
        ds.check_invariants().unwrap();
    }

    #[test]
    fn zero_drift_and_noise_collapse_to_the_population_mean() {
        let ds = generate_synthetic(3, 6, 2, 3, 9, 0.0, 0.0);
        let reference = &ds.subjects[0].observations[0];
        for s in &ds.subjects {
            for obs in &s.observations {
                assert_eq!(obs, reference);
            }
        }
    }

    #[test]
    fn generator_is_deterministic_in_the_seed() {
        let a = generate_synthetic(4, 6, 3, 2, 1234, 0.05, 0.05);
        let b = generate_synthetic(4, 6, 3, 2, 1234, 0.05, 0.05);
        assert_eq!(a, b);
        let c = generate_synthetic(4, 6, 3, 2, 1235, 0.05, 0.05);
        assert_ne!(a, c);
    }

    #[test]
    fn ten_subjects_five_folds_gives_disjoint_pairs() {
        let ds = generate_synthetic(10, 4, 2, 2, 5, 0.05, 0.05);
        let folds = kfold_split(&ds, 5, 11).unwrap();
        assert_eq!(folds.len(), 5);
        let mut seen = std::collections::BTreeSet::new();
        for f in &folds {
            assert_eq!(f.test_ids.len(), 2);
            assert_eq!(f.train_ids.len(), 8);
            for id in &f.test_ids {
                assert!(seen.insert(id.clone()), "id {id} appears in two test sets");
                assert!(!f.train_ids.contains(id));
            }
        }
        assert_eq!(seen.len(), 10);
    }

    #[test]
    fn seven_subjects_five_folds_gives_round_robin_sizes() {
        let ds = generate_synthetic(7, 4, 2, 2, 5, 0.05, 0.05);
        let folds = kfold_split(&ds, 5, 3).unwrap();
        let sizes: Vec<usize> = folds.iter().map(|f| f.test_ids.len()).collect();
        assert_eq!(sizes, vec![2, 2, 1, 1, 1]);
        for f in &folds {
            assert_eq!(f.train_ids.len() + f.test_ids.len(), 7);
        }
    }

    #[test]
    fn splits_are_deterministic_in_the_seed() {
        let ds = generate_synthetic(9, 4, 2, 2, 5, 0.05, 0.05);
        assert_eq!(kfold_split(&ds, 3, 21).unwrap(), kfold_split(&ds, 3, 21).unwrap());
    }

    #[test]
    fn too_many_folds_is_a_configuration_error() {
        let ds = generate_synthetic(4, 4, 2, 2, 5, 0.05, 0.05);
        assert!(matches!(
            kfold_split(&ds, 5, 0),
            Err(DatasetError::InvalidFolds { n_folds: 5, n_subjects: 4 })
        ));
        assert!(matches!(kfold_split(&ds, 1, 0), Err(DatasetError::InvalidFolds { .. })));
    }

    #[test]
    fn view_means_average_all_entries_including_the_diagonal() {
        let obs = MultigraphObservation::new(vec![
            array![[0.0, 4.0], [4.0, 0.0]],
            array![[0.0, 0.0], [0.0, 0.0]],
        ]);
        assert_eq!(view_means(&obs), vec![2.0, 0.0]);
    }

    #[test]
    fn node_strengths_are_row_sums() {
        let m = array![[0.0, 1.0, 3.0], [1.0, 0.0, 2.0], [3.0, 2.0, 0.0]];
        assert_eq!(node_strengths(&m), vec![4.0, 3.0, 5.0]);
        assert_eq!(node_strengths(&Array2::zeros((3, 3))), vec![0.0; 3]);
        // Symmetric input: strengths equal column sums.
        let cols: Vec<f64> = (0..3).map(|j| m.column(j).sum()).collect();
        assert_eq!(node_strengths(&m), cols);
    }

    #[test]
    fn edge_feature_rows_are_cross_view_fibers() {
        let obs = MultigraphObservation::new(vec![
            array![[0.0, 1.0], [1.0, 0.0]],
            array![[0.0, 5.0], [5.0, 0.0]],
        ]);
        let e = obs.edge_feature_matrix();
        assert_eq!(e.dim(), (4, 2));
        assert_eq!(e.row(1).to_vec(), vec![1.0, 5.0]);
        assert_eq!(e.row(0).to_vec(), vec![0.0, 0.0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn generated_observations_always_satisfy_invariants(
            seed in any::<u64>(),
            n_subjects in 1usize..4,
            n_rois in 1usize..6,
            n_views in 1usize..4,
            n_timepoints in 1usize..4,
            drift in 0.0f64..0.5,
            noise in 0.0f64..0.5,
        ) {
            let ds = generate_synthetic(n_subjects, n_rois, n_views, n_timepoints, seed, drift, noise);
            for s in &ds.subjects {
                for obs in &s.observations {
                    prop_assert!(obs.check_invariants().is_ok());
                }
            }
        }

        #[test]
        fn fold_test_sets_partition_the_id_set(
            seed in any::<u64>(),
            n_subjects in 2usize..12,
            extra in 0usize..6,
        ) {
            let n_folds = 2 + extra % (n_subjects - 1).max(1);
            prop_assume!(n_folds <= n_subjects);
            let ds = generate_synthetic(n_subjects, 3, 2, 1, seed, 0.01, 0.01);
            let folds = kfold_split(&ds, n_folds, seed).unwrap();
            let mut seen: Vec<String> = folds.iter().flat_map(|f| f.test_ids.clone()).collect();
            seen.sort();
            let mut all = ds.subject_ids();
            all.sort();
            prop_assert_eq!(seen, all);
            for f in &folds {
                for id in &f.test_ids {
                    prop_assert!(!f.train_ids.contains(id));
                }
                prop_assert_eq!(f.train_ids.len() + f.test_ids.len(), n_subjects);
            }
        }
    }
}
