//! Class-prior objects: the test prior, per-client set-prior matrices and
//! surrogate (set-membership) priors.

use nalgebra::DMatrix;
use ndarray::Array2;
use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-sum tolerance for prior matrices and vectors.
pub const SUM_TOLERANCE: f64 = 1e-10;
/// Smallest singular value (after scaling rows to unit length) accepted as full rank.
pub const RANK_THRESHOLD: f64 = 1e-8;
/// Resampling budget of [`sample_prior_matrix`].
pub const DEFAULT_RETRIES: usize = 100;

/// `M_c × K` matrix whose row `m` is the class composition of U set `m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct ClassPriorMatrix {
    entries: Array2<f64>,
}

/// A single invariant failure reported by [`validate_prior_matrix`].
#[derive(Debug, Clone, PartialEq)]
pub enum PriorViolation {
    EntryOutOfRange { row: usize, col: usize, value: f64 },
    RowSum { row: usize, sum: f64 },
    TooFewSets { sets: usize, classes: usize },
    RankDeficient { min_singular_value: f64 },
    IdenticalRows,
}

impl std::fmt::Display for PriorViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::EntryOutOfRange { row, col, value } => {
                write!(f, "entry ({row}, {col}) = {value} outside [0, 1]")
            }
            Self::RowSum { row, sum } => write!(f, "row {row} sums to {sum}"),
            Self::TooFewSets { sets, classes } => {
                write!(f, "{sets} sets cannot identify {classes} classes")
            }
            Self::RankDeficient { min_singular_value } => write!(
                f,
                "column rank deficient (min singular value {min_singular_value:e})"
            ),
            Self::IdenticalRows => write!(f, "all rows are identical"),
        }
    }
}

impl ClassPriorMatrix {
    /// Wraps `entries` and checks every invariant.
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        let m = Self { entries };
        let violations = validate_prior_matrix(&m);
        if violations.is_empty() {
            Ok(m)
        } else {
            Err(Error::InvalidPriors(
                violations
                    .iter()
                    .map(ToString::to_string)
                    .collect::<Vec<_>>()
                    .join("; "),
            ))
        }
    }

    /// Wraps `entries` without validation; use [`validate_prior_matrix`] to inspect.
    pub fn new_unchecked(entries: Array2<f64>) -> Self {
        Self { entries }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(rows_to_array(rows)?)
    }

    /// `M × M` identity: each set holds a single class.
    pub fn identity(classes: usize) -> Self {
        Self {
            entries: Array2::eye(classes),
        }
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn sets(&self) -> usize {
        self.entries.nrows()
    }

    pub fn classes(&self) -> usize {
        self.entries.ncols()
    }

    pub fn row(&self, m: usize) -> Vec<f64> {
        self.entries.row(m).to_vec()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.entries.rows().into_iter().map(|r| r.to_vec()).collect()
    }
}

fn rows_to_array(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let k = rows.first().map(Vec::len).unwrap_or(0);
    if rows.iter().any(|r| r.len() != k) {
        return Err(Error::Shape("prior matrix rows have different lengths".into()));
    }
    Array2::from_shape_vec((rows.len(), k), rows.concat())
        .map_err(|e| Error::Shape(e.to_string()))
}

impl TryFrom<Vec<Vec<f64>>> for ClassPriorMatrix {
    type Error = Error;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_rows(&rows)
    }
}

impl From<ClassPriorMatrix> for Vec<Vec<f64>> {
    fn from(m: ClassPriorMatrix) -> Self {
        m.to_rows()
    }
}

/// Smallest singular value of `entries` after scaling each row to unit L2 norm.
pub fn min_singular_value(entries: &Array2<f64>) -> f64 {
    let (rows, cols) = entries.dim();
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    let mut scaled = DMatrix::<f64>::zeros(rows, cols);
    for (i, row) in entries.rows().into_iter().enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (j, v) in row.iter().enumerate() {
            scaled[(i, j)] = if norm > 0.0 { v / norm } else { 0.0 };
        }
    }
    let sv = scaled.singular_values();
    if rows < cols {
        return 0.0;
    }
    sv.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Reports every violated invariant of `priors`; empty means valid.
pub fn validate_prior_matrix(priors: &ClassPriorMatrix) -> Vec<PriorViolation> {
    let e = &priors.entries;
    let (sets, classes) = e.dim();
    let mut out = Vec::new();
    for ((row, col), &value) in e.indexed_iter() {
        if !(0.0..=1.0).contains(&value) {
            out.push(PriorViolation::EntryOutOfRange { row, col, value });
        }
    }
    for (row, r) in e.rows().into_iter().enumerate() {
        let sum: f64 = r.sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            out.push(PriorViolation::RowSum { row, sum });
        }
    }
    if sets < classes || classes == 0 {
        out.push(PriorViolation::TooFewSets { sets, classes });
    } else {
        let s = min_singular_value(e);
        if s <= RANK_THRESHOLD {
            out.push(PriorViolation::RankDeficient {
                min_singular_value: s,
            });
        }
    }
    if classes >= 2 && sets >= 1 {
        let first = e.row(0);
        if e.rows().into_iter().all(|r| r == first) {
            out.push(PriorViolation::IdenticalRows);
        }
    }
    out
}

/// Draws each raw entry from `Uniform[low, high]`, normalizes rows to sum to one,
/// and resamples until the matrix has full column rank.
pub fn sample_prior_matrix<R: Rng + ?Sized>(
    classes: usize,
    sets: usize,
    low: f64,
    high: f64,
    rng: &mut R,
) -> Result<ClassPriorMatrix> {
    sample_prior_matrix_weighted(classes, sets, low, high, None, DEFAULT_RETRIES, rng)
}

/// Like [`sample_prior_matrix`], with raw entries optionally multiplied by a
/// per-class weight before row normalization (used for class-imbalanced clients).
pub fn sample_prior_matrix_weighted<R: Rng + ?Sized>(
    classes: usize,
    sets: usize,
    low: f64,
    high: f64,
    class_weights: Option<&[f64]>,
    retries: usize,
    rng: &mut R,
) -> Result<ClassPriorMatrix> {
    if classes == 0 || sets < classes {
        return Err(Error::InvalidArgument(format!(
            "need sets >= classes >= 1, got {sets} sets and {classes} classes"
        )));
    }
    if !(0.0 < low && low < high && high < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "prior range must satisfy 0 < low < high < 1, got [{low}, {high}]"
        )));
    }
    if let Some(w) = class_weights {
        if w.len() != classes || w.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument(
                "class weights must be positive, one per class".into(),
            ));
        }
    }
    let mut last = Vec::new();
    for _ in 0..retries {
        let mut raw = Array2::from_shape_fn((sets, classes), |_| rng.random_range(low..=high));
        if let Some(w) = class_weights {
            for mut row in raw.rows_mut() {
                row.iter_mut().zip(w).for_each(|(v, wk)| *v *= wk);
            }
        }
        normalize_rows(&mut raw);
        let candidate = ClassPriorMatrix { entries: raw };
        last = validate_prior_matrix(&candidate);
        if last.is_empty() {
            return Ok(candidate);
        }
    }
    Err(Error::PriorGeneration {
        attempts: retries,
        reason: last
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("; "),
    })
}

fn normalize_rows(a: &mut Array2<f64>) {
    for mut row in a.rows_mut() {
        let s: f64 = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}

/// Whether a prior vector describes test classes or surrogate sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorRole {
    Test,
    Surrogate,
}

/// A probability vector over classes (test role) or set indices (surrogate role).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorVector {
    values: Vec<f64>,
    role: PriorRole,
}

impl PriorVector {
    pub fn new(values: Vec<f64>, role: PriorRole) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("empty prior vector".into()));
        }
        if values.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument(
                "prior entries must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidArgument(format!("prior sums to {sum}, not 1")));
        }
        Ok(Self { values, role })
    }

    pub fn uniform(len: usize, role: PriorRole) -> Self {
        Self {
            values: vec![1.0 / len as f64; len],
            role,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn role(&self) -> PriorRole {
        self.role
    }
}

/// Surrogate prior `n_{c,m} / n_c`, zero-padded to length `total_sets`.
pub fn estimate_surrogate_prior(set_sizes: &[usize], total_sets: usize) -> Result<PriorVector> {
    if set_sizes.is_empty() {
        return Err(Error::InvalidArgument("no U sets given".into()));
    }
    if set_sizes.contains(&0) {
        return Err(Error::InvalidArgument("every U set must be non-empty".into()));
    }
    if total_sets < set_sizes.len() {
        return Err(Error::InvalidArgument(format!(
            "padded length {total_sets} below set count {}",
            set_sizes.len()
        )));
    }
    let total: usize = set_sizes.iter().sum();
    let mut values: Vec<f64> = set_sizes
        .iter()
        .map(|&n| n as f64 / total as f64)
        .collect();
    // Each quotient is correctly rounded but their sum can miss 1 by a few
    // ulps. Floating-point addition is monotone in each operand, so stepping
    // one entry an ulp at a time walks the index-order sum onto 1. A step on a
    // small entry can still jump over 1; then move to the next largest entry.
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    'outer: for &i in &order {
        let start: f64 = values.iter().sum();
        if start == 1.0 {
            break;
        }
        let up = start < 1.0;
        let saved = values[i];
        for _ in 0..4096 {
            values[i] = if up { values[i].next_up() } else { values[i].next_down() };
            let sum: f64 = values.iter().sum();
            if sum == 1.0 {
                break 'outer;
            }
            if (sum < 1.0) != up {
                break;
            }
        }
        values[i] = saved;
    }
    values.resize(total_sets, 0.0);
    Ok(PriorVector {
        values,
        role: PriorRole::Surrogate,
    })
}

/// Multiplies every entry by `(2γ - 1)ε + 1` with `γ ~ Uniform[0, 1]`.
///
/// A perturbed entry that leaves `[low, high]` is clipped back to the range (an
/// entry that already sat outside the range is never pushed further out). Rows
/// containing a changed entry are renormalized; the result is revalidated.
pub fn perturb_priors<R: Rng + ?Sized>(
    priors: &ClassPriorMatrix,
    noise: f64,
    low: f64,
    high: f64,
    rng: &mut R,
) -> Result<ClassPriorMatrix> {
    perturb_priors_with(priors, noise, low, high, || rng.random::<f64>())
}

/// [`perturb_priors`] with the `γ` draws supplied by `gamma`, in row-major order.
pub fn perturb_priors_with<G: FnMut() -> f64>(
    priors: &ClassPriorMatrix,
    noise: f64,
    low: f64,
    high: f64,
    mut gamma: G,
) -> Result<ClassPriorMatrix> {
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise level {noise} must be >= 0")));
    }
    let mut out = priors.entries.clone();
    for mut row in out.rows_mut() {
        let mut changed = false;
        for v in row.iter_mut() {
            let g = gamma();
            let multiplier = (2.0 * g - 1.0) * noise + 1.0;
            let noisy = *v * multiplier;
            let clipped = noisy.clamp(low.min(*v), high.max(*v));
            if clipped != *v {
                *v = clipped;
                changed = true;
            }
        }
        if changed {
            let s: f64 = row.sum();
            row.mapv_inplace(|x| x / s);
        }
    }
    let m = ClassPriorMatrix { entries: out };
    let violations = validate_prior_matrix(&m);
    if violations.is_empty() {
        Ok(m)
    } else {
        Err(Error::InvalidPriors(format!(
            "perturbed priors invalid: {}",
            violations
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join("; ")
        )))
    }
}
