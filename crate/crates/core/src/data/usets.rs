use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand::seq::SliceRandom;

use super::task::{sample_index, TaskSpec};
use crate::error::{Error, Result};
use crate::priors::{validate_prior_matrix, ClassPriorMatrix, PriorVector};

/// Class labels behind the U sets. Only evaluation code should look at them.
///
/// The type has no public accessor that training code could call by accident;
/// [`HiddenLabels::reveal`] logs every read.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenLabels {
    per_set: Vec<Vec<usize>>,
}

impl HiddenLabels {
    /// Labels of every set, for an evaluation oracle named by `purpose`.
    pub fn reveal(&self, purpose: &str) -> &[Vec<usize>] {
        log::debug!("hidden labels revealed for {purpose}");
        &self.per_set
    }

    /// Per-set class counts.
    pub fn histograms(&self, classes: usize, purpose: &str) -> Vec<Vec<usize>> {
        self.reveal(purpose)
            .iter()
            .map(|labels| {
                let mut h = vec![0; classes];
                labels.iter().for_each(|&y| h[y] += 1);
                h
            })
            .collect()
    }

    /// Overwrites every label with `value`. Used to show that training never reads them.
    pub fn poison(&mut self, value: usize) {
        self.per_set
            .iter_mut()
            .flatten()
            .for_each(|y| *y = value);
    }
}

/// The unlabeled sets held by one client, with their class-prior matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct USetCollection {
    client: usize,
    sets: Vec<Array2<f64>>,
    priors: ClassPriorMatrix,
    hidden: HiddenLabels,
}

impl USetCollection {
    pub fn client(&self) -> usize {
        self.client
    }

    pub fn sets(&self) -> &[Array2<f64>] {
        &self.sets
    }

    pub fn set_count(&self) -> usize {
        self.sets.len()
    }

    pub fn set_sizes(&self) -> Vec<usize> {
        self.sets.iter().map(Array2::nrows).collect()
    }

    pub fn total_len(&self) -> usize {
        self.sets.iter().map(Array2::nrows).sum()
    }

    pub fn priors(&self) -> &ClassPriorMatrix {
        &self.priors
    }

    /// Replaces the class priors the client believes in, e.g. with a noisy copy.
    pub fn with_priors(mut self, priors: ClassPriorMatrix) -> Result<Self> {
        if priors.sets() != self.sets.len() || priors.classes() != self.priors.classes() {
            return Err(Error::Shape("replacement priors do not match the sets".into()));
        }
        self.priors = priors;
        Ok(self)
    }

    pub fn hidden(&self) -> &HiddenLabels {
        &self.hidden
    }

    pub fn hidden_mut(&mut self) -> &mut HiddenLabels {
        &mut self.hidden
    }
}

/// Draws `sizes[m]` points for each set `m`: a hidden class from row `m` of
/// `priors`, then an input from that class-conditional.
pub fn sample_u_sets<R: Rng + ?Sized>(
    client: usize,
    task: &TaskSpec,
    priors: &ClassPriorMatrix,
    sizes: &[usize],
    rng: &mut R,
) -> Result<USetCollection> {
    if let Some(v) = validate_prior_matrix(priors).into_iter().next() {
        return Err(Error::InvalidPriors(v.to_string()));
    }
    if priors.classes() != task.classes() {
        return Err(Error::Shape(format!(
            "priors cover {} classes, task has {}",
            priors.classes(),
            task.classes()
        )));
    }
    if sizes.len() != priors.sets() {
        return Err(Error::Shape(format!(
            "{} set sizes for {} prior rows",
            sizes.len(),
            priors.sets()
        )));
    }
    if sizes.contains(&0) {
        return Err(Error::InvalidArgument("set sizes must be positive".into()));
    }
    let d = task.dim();
    let mut sets = Vec::with_capacity(sizes.len());
    let mut per_set = Vec::with_capacity(sizes.len());
    for (m, &n) in sizes.iter().enumerate() {
        let row = priors.row(m);
        let mut x = Array2::zeros((n, d));
        let mut labels = Vec::with_capacity(n);
        for mut xi in x.rows_mut() {
            let y = sample_index(&row, rng);
            task.sample_into(y, xi.as_slice_mut().expect("row-major"), rng);
            labels.push(y);
        }
        sets.push(x);
        per_set.push(labels);
    }
    Ok(USetCollection {
        client,
        sets,
        priors: priors.clone(),
        hidden: HiddenLabels { per_set },
    })
}

/// Sets concatenated with the set index as the label.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateDataset {
    inputs: Array2<f64>,
    labels: Vec<usize>,
    offsets: Vec<usize>,
    total_sets: usize,
}

impl SurrogateDataset {
    pub fn inputs(&self) -> ArrayView2<'_, f64> {
        self.inputs.view()
    }

    /// Set index of each row, in `0..total_sets`.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Start row of each set, followed by the total length.
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn total_sets(&self) -> usize {
        self.total_sets
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Row counts per surrogate label, padded to `total_sets`.
    pub fn label_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.total_sets];
        self.labels.iter().for_each(|&l| c[l] += 1);
        c
    }

    /// Rows in a fresh random order (labels follow their rows).
    pub fn shuffled_indices<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        idx
    }
}

/// Stacks the sets of `u` and labels each row with its set index.
pub fn build_surrogate_dataset(u: &USetCollection, total_sets: usize) -> Result<SurrogateDataset> {
    if total_sets < u.set_count() {
        return Err(Error::InvalidArgument(format!(
            "padded set count {total_sets} below the client's {} sets",
            u.set_count()
        )));
    }
    let views: Vec<ArrayView2<'_, f64>> = u.sets.iter().map(|s| s.view()).collect();
    let inputs = ndarray::concatenate(ndarray::Axis(0), &views)
        .map_err(|e| Error::Shape(e.to_string()))?;
    let mut labels = Vec::with_capacity(inputs.nrows());
    let mut offsets = vec![0];
    for (m, s) in u.sets.iter().enumerate() {
        labels.extend(std::iter::repeat_n(m, s.nrows()));
        offsets.push(labels.len());
    }
    Ok(SurrogateDataset {
        inputs,
        labels,
        offsets,
        total_sets,
    })
}

/// Labeled examples for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledTestSet {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl LabeledTestSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// `n` labeled draws with classes from `prior`.
pub fn sample_test_set<R: Rng + ?Sized>(
    task: &TaskSpec,
    prior: &PriorVector,
    n: usize,
    rng: &mut R,
) -> Result<LabeledTestSet> {
    if n == 0 {
        return Err(Error::InvalidArgument("test set size must be positive".into()));
    }
    if prior.len() != task.classes() {
        return Err(Error::Shape("test prior length differs from class count".into()));
    }
    let mut inputs = Array2::zeros((n, task.dim()));
    let mut labels = Vec::with_capacity(n);
    for mut xi in inputs.rows_mut() {
        let y = sample_index(prior.values(), rng);
        task.sample_into(y, xi.as_slice_mut().expect("row-major"), rng);
        labels.push(y);
    }
    Ok(LabeledTestSet {
        inputs,
        labels,
        classes: task.classes(),
    })
}
