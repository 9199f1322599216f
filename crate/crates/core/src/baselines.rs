//! Comparison methods that plug into the federation as local objectives.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::{index, SliceRandom};
use rand::{Rng, RngExt};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{build_surrogate_dataset, USetCollection};
use crate::error::{Error, Result};
use crate::federation::{gather, LocalObjective, SupervisedObjective};
use crate::nn::{
    add_l1, argmax, backward_from_logits, ce_logit_grad, ce_loss, forward, forward_cached,
    soft_ce_logit_grad, soft_ce_loss, softmax, softmax_backward, GradientSet, ModelParams,
    LOG_FLOOR,
};

/// Pseudo-labeling with mixup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PseudoLabelSettings {
    /// Beta(a, a) parameter for the mixing coefficient.
    pub mixup_alpha: f64,
    /// Weight of the mixup term.
    pub mix_weight: f64,
    /// Confidence threshold splitting a batch.
    pub threshold: f64,
}

impl Default for PseudoLabelSettings {
    fn default() -> Self {
        Self {
            mixup_alpha: 0.75,
            mix_weight: 0.3,
            threshold: 0.4,
        }
    }
}

/// Virtual adversarial consistency regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VatSettings {
    /// Weight of the consistency term.
    pub weight: f64,
    /// Perturbation radius.
    pub radius: f64,
    /// Finite-difference step of the power iteration.
    pub xi: f64,
    pub power_iters: usize,
}

impl Default for VatSettings {
    fn default() -> Self {
        Self {
            weight: 5e-4,
            radius: 1e-2,
            xi: 1e-6,
            power_iters: 1,
        }
    }
}

/// A minibatch split by model confidence, with its mixup partners fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabeledBatch {
    pub high_inputs: Array2<f64>,
    pub high_labels: Vec<usize>,
    pub low_inputs: Array2<f64>,
    pub low_labels: Vec<usize>,
    pub threshold: f64,
    /// Mixed inputs and soft targets; `None` when no mixup term applies.
    pub mix: Option<MixedPairs>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedPairs {
    pub lambda: f64,
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
}

/// Splits `inputs` at `threshold` on the max softmax probability of `params`
/// and, when `mix_weight > 0` and both sides are non-empty, draws
/// `λ ~ Beta(a, a)` and pairs shuffled high- and low-confidence rows.
pub fn split_by_confidence<R: Rng + ?Sized>(
    params: &ModelParams,
    inputs: ArrayView2<'_, f64>,
    labels: &[usize],
    settings: &PseudoLabelSettings,
    rng: &mut R,
) -> Result<PseudoLabeledBatch> {
    let probs = softmax(forward(params, inputs)?.view());
    let (mut hi, mut lo) = (Vec::new(), Vec::new());
    for (i, row) in probs.rows().into_iter().enumerate() {
        let conf = row.iter().copied().fold(0.0, f64::max);
        if conf >= settings.threshold {
            hi.push(i);
        } else {
            lo.push(i);
        }
    }
    let pick = |idx: &[usize]| -> (Array2<f64>, Vec<usize>) {
        (gather(inputs, idx), idx.iter().map(|&i| labels[i]).collect())
    };
    let (high_inputs, high_labels) = pick(&hi);
    let (low_inputs, low_labels) = pick(&lo);
    let mix = if settings.mix_weight > 0.0 && !hi.is_empty() && !lo.is_empty() {
        let beta = Beta::new(settings.mixup_alpha, settings.mixup_alpha)
            .map_err(|e| Error::InvalidArgument(format!("mixup parameter: {e}")))?;
        let lambda: f64 = rng.sample(beta);
        let mut hs: Vec<usize> = (0..hi.len()).collect();
        let mut ls: Vec<usize> = (0..lo.len()).collect();
        hs.shuffle(rng);
        ls.shuffle(rng);
        let n = hs.len().min(ls.len());
        let classes = params.classes();
        let mut x = Array2::zeros((n, inputs.ncols()));
        let mut t = Array2::zeros((n, classes));
        for (r, (&h, &l)) in hs.iter().zip(&ls).enumerate() {
            let xm = &high_inputs.row(h) * lambda + &low_inputs.row(l) * (1.0 - lambda);
            x.row_mut(r).assign(&xm);
            t[[r, high_labels[h]]] += lambda;
            t[[r, low_labels[l]]] += 1.0 - lambda;
        }
        Some(MixedPairs {
            lambda,
            inputs: x,
            targets: t,
        })
    } else {
        None
    };
    Ok(PseudoLabeledBatch {
        high_inputs,
        high_labels,
        low_inputs,
        low_labels,
        threshold: settings.threshold,
        mix,
    })
}

/// `L_fix + mix_weight · L_mix` on a prepared batch, plus the L1 penalty.
///
/// `L_fix` is the cross-entropy on confident rows; `L_mix` is the cross-entropy
/// of mixed inputs against the correspondingly mixed labels. Empty parts add 0.
pub fn fedpl_loss(
    params: &ModelParams,
    batch: &PseudoLabeledBatch,
    mix_weight: f64,
    l1_weight: f64,
) -> Result<(f64, GradientSet)> {
    let mut grads = GradientSet::zeros_like(params.tensors());
    let mut loss = 0.0;
    if !batch.high_labels.is_empty() {
        let cache = forward_cached(params, batch.high_inputs.view())?;
        let probs = softmax(cache.logits().view());
        loss += ce_loss(probs.view(), &batch.high_labels)?;
        let (g, _) = backward_from_logits(
            params,
            &cache,
            ce_logit_grad(probs.view(), &batch.high_labels),
            false,
        );
        grads = g;
    }
    if let (Some(mix), true) = (&batch.mix, mix_weight != 0.0) {
        let cache = forward_cached(params, mix.inputs.view())?;
        let probs = softmax(cache.logits().view());
        loss += mix_weight * soft_ce_loss(probs.view(), mix.targets.view());
        let (g, _) = backward_from_logits(
            params,
            &cache,
            soft_ce_logit_grad(probs.view(), mix.targets.view()),
            false,
        );
        grads.axpy(mix_weight, &g);
    }
    loss += add_l1(params, &mut grads, l1_weight);
    Ok((loss, grads))
}

/// Pseudo-labels every row with the most likely class of its set.
#[derive(Debug, Clone)]
pub struct PseudoLabelObjective {
    inputs: Array2<f64>,
    labels: Vec<usize>,
    settings: PseudoLabelSettings,
}

impl PseudoLabelObjective {
    pub fn new(u: &USetCollection, settings: PseudoLabelSettings) -> Result<Self> {
        if !(settings.mixup_alpha > 0.0) || settings.mix_weight < 0.0 {
            return Err(Error::InvalidArgument(
                "mixup parameter must be positive and mix weight non-negative".into(),
            ));
        }
        let data = build_surrogate_dataset(u, u.set_count())?;
        let set_label: Vec<usize> = (0..u.set_count())
            .map(|m| argmax(u.priors().row(m)))
            .collect();
        Ok(Self {
            inputs: data.inputs().to_owned(),
            labels: data.labels().iter().map(|&m| set_label[m]).collect(),
            settings,
        })
    }

    pub fn pseudo_labels(&self) -> &[usize] {
        &self.labels
    }
}

impl LocalObjective for PseudoLabelObjective {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn loss_and_grad(
        &self,
        params: &ModelParams,
        rows: &[usize],
        l1_weight: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, GradientSet)> {
        let x = gather(self.inputs.view(), rows);
        let y: Vec<usize> = rows.iter().map(|&r| self.labels[r]).collect();
        let batch = split_by_confidence(params, x.view(), &y, &self.settings, rng)?;
        fedpl_loss(params, &batch, self.settings.mix_weight, l1_weight)
    }
}

/// True and predicted class proportions of one set.
#[derive(Debug, Clone, PartialEq)]
pub struct ProportionTarget {
    pub target: Vec<f64>,
    pub predicted: Vec<f64>,
}

/// `-Σ_k π_k ln π̂_k`, with `π̂` the mean softmax output over `inputs`.
pub fn fedllp_loss(
    params: &ModelParams,
    inputs: ArrayView2<'_, f64>,
    target: &[f64],
    l1_weight: f64,
) -> Result<(f64, GradientSet, ProportionTarget)> {
    if inputs.nrows() == 0 {
        return Err(Error::InvalidArgument("proportion loss needs a non-empty set".into()));
    }
    if target.len() != params.classes() {
        return Err(Error::Shape("proportion length differs from class count".into()));
    }
    let cache = forward_cached(params, inputs)?;
    let probs = softmax(cache.logits().view());
    let n = probs.nrows() as f64;
    let predicted = probs.mean_axis(Axis(0)).expect("non-empty");
    let mut loss = 0.0;
    let mut dmean = vec![0.0; target.len()];
    for (k, (&t, &p)) in target.iter().zip(predicted.iter()).enumerate() {
        if t == 0.0 {
            continue;
        }
        loss -= t * p.max(LOG_FLOOR).ln();
        if p > LOG_FLOOR {
            dmean[k] = -t / p;
        }
    }
    let dprobs = Array2::from_shape_fn(probs.dim(), |(_, k)| dmean[k] / n);
    let dlogits = softmax_backward(probs.view(), dprobs.view());
    let (mut grads, _) = backward_from_logits(params, &cache, dlogits, false);
    loss += add_l1(params, &mut grads, l1_weight);
    Ok((
        loss,
        grads,
        ProportionTarget {
            target: target.to_vec(),
            predicted: predicted.to_vec(),
        },
    ))
}

fn normalize_rows<R: Rng + ?Sized>(d: &mut Array2<f64>, rng: &mut R) {
    for mut row in d.rows_mut() {
        let mut norm = row.dot(&row).sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            row.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            norm = row.dot(&row).sqrt();
        }
        row /= norm;
    }
}

/// Adversarial direction for each row of `inputs`: power iterations on the
/// curvature of `KL(p(x) ‖ p(x + ξ d))`, starting from a random direction.
/// Rows where the gradient vanishes fall back to a random unit vector.
pub fn vat_direction<R: Rng + ?Sized>(
    params: &ModelParams,
    inputs: ArrayView2<'_, f64>,
    xi: f64,
    power_iters: usize,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let clean = softmax(forward(params, inputs)?.view());
    let mut d = Array2::from_shape_fn(inputs.dim(), |_| rng.sample(StandardNormal));
    normalize_rows(&mut d, rng);
    for _ in 0..power_iters {
        let probe = &inputs + &(&d * xi);
        let cache = forward_cached(params, probe.view())?;
        let probs = softmax(cache.logits().view());
        let dlogits = soft_ce_logit_grad(probs.view(), clean.view());
        let (_, g) = backward_from_logits(params, &cache, dlogits, true);
        d = g.expect("input gradient requested");
        normalize_rows(&mut d, rng);
    }
    Ok(d)
}

/// Mean `KL(target ‖ p(x))` over rows, with gradient only through `p(x)`.
pub fn kl_to_target(
    params: &ModelParams,
    inputs: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
) -> Result<(f64, GradientSet)> {
    let cache = forward_cached(params, inputs)?;
    let probs = softmax(cache.logits().view());
    if probs.dim() != target.dim() {
        return Err(Error::Shape("target and model output differ in shape".into()));
    }
    let mut kl = 0.0;
    for (t, q) in target.iter().zip(probs.iter()) {
        if *t > 0.0 {
            kl += t * (t.max(LOG_FLOOR).ln() - q.max(LOG_FLOOR).ln());
        }
    }
    let dlogits = soft_ce_logit_grad(probs.view(), target);
    let (grads, _) = backward_from_logits(params, &cache, dlogits, false);
    Ok((kl / inputs.nrows() as f64, grads))
}

/// Mean `KL(p(x) ‖ p(x + μ d))` for a fixed direction `d`, with `p(x)` held constant.
pub fn vat_consistency_with_direction(
    params: &ModelParams,
    inputs: ArrayView2<'_, f64>,
    direction: ArrayView2<'_, f64>,
    radius: f64,
) -> Result<(f64, GradientSet)> {
    if inputs.dim() != direction.dim() {
        return Err(Error::Shape("direction and inputs differ in shape".into()));
    }
    let clean = softmax(forward(params, inputs)?.view());
    let perturbed = &inputs + &(&direction * radius);
    kl_to_target(params, perturbed.view(), clean.view())
}

/// Consistency loss with a freshly computed adversarial direction.
pub fn vat_consistency<R: Rng + ?Sized>(
    params: &ModelParams,
    inputs: ArrayView2<'_, f64>,
    settings: &VatSettings,
    rng: &mut R,
) -> Result<(f64, GradientSet)> {
    let d = vat_direction(params, inputs, settings.xi, settings.power_iters, rng)?;
    vat_consistency_with_direction(params, inputs, d.view(), settings.radius)
}

/// Proportion matching on whole sets, optionally with VAT.
#[derive(Debug, Clone)]
pub struct ProportionObjective {
    inputs: Array2<f64>,
    offsets: Vec<usize>,
    proportions: Vec<Vec<f64>>,
    vat: Option<VatSettings>,
}

impl ProportionObjective {
    pub fn new(u: &USetCollection, vat: Option<VatSettings>) -> Result<Self> {
        let data = build_surrogate_dataset(u, u.set_count())?;
        Ok(Self {
            inputs: data.inputs().to_owned(),
            offsets: data.offsets().to_vec(),
            proportions: u.priors().to_rows(),
            vat,
        })
    }

    fn set_of(&self, row: usize) -> usize {
        self.offsets.partition_point(|&o| o <= row) - 1
    }
}

impl LocalObjective for ProportionObjective {
    fn len(&self) -> usize {
        self.offsets.last().copied().unwrap_or(0)
    }

    /// One batch per set, holding the whole set, in random set order. The
    /// proportion target only describes a set as a whole, so `batch_size` is unused.
    fn epoch_batches(&self, _batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        let mut batches: Vec<Vec<usize>> =
            self.offsets.windows(2).map(|w| (w[0]..w[1]).collect()).collect();
        batches.shuffle(rng);
        batches
    }

    fn batches_per_epoch(&self, _batch_size: usize) -> usize {
        self.offsets.len() - 1
    }

    fn loss_and_grad(
        &self,
        params: &ModelParams,
        rows: &[usize],
        l1_weight: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, GradientSet)> {
        let set = self.set_of(rows[0]);
        if rows.iter().any(|&r| self.set_of(r) != set) {
            return Err(Error::Invariant("proportion batch spans several sets".into()));
        }
        let x = gather(self.inputs.view(), rows);
        let (mut loss, mut grads, _) =
            fedllp_loss(params, x.view(), &self.proportions[set], l1_weight)?;
        if let Some(vat) = &self.vat {
            if vat.weight != 0.0 {
                let (c, g) = vat_consistency(params, x.view(), vat, rng)?;
                loss += vat.weight * c;
                grads.axpy(vat.weight, &g);
            }
        }
        Ok((loss, grads))
    }
}

/// Cross-entropy on a random `fraction` of a client's rows, labeled through
/// the audited hidden-label gate. The rest of the data is dropped.
pub fn supervised_fraction_objective<R: Rng + ?Sized>(
    u: &USetCollection,
    fraction: f64,
    rng: &mut R,
) -> Result<SupervisedObjective> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "labeled fraction {fraction} outside (0, 1]"
        )));
    }
    let data = build_surrogate_dataset(u, u.set_count())?;
    let labels: Vec<usize> = u
        .hidden()
        .reveal("supervised baseline")
        .iter()
        .flatten()
        .copied()
        .collect();
    let n = labels.len();
    let keep: Vec<usize> = if fraction == 1.0 {
        (0..n).collect()
    } else {
        let k = (n as f64 * fraction).round() as usize;
        let mut idx = index::sample(rng, n, k).into_vec();
        idx.sort_unstable();
        idx
    };
    if keep.is_empty() {
        log::warn!("client {} keeps no labeled rows at fraction {fraction}", u.client());
    }
    SupervisedObjective::new(
        gather(data.inputs(), &keep),
        keep.iter().map(|&i| labels[i]).collect(),
        u.priors().classes(),
    )
}
