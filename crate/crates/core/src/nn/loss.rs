use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};

/// Probabilities below this are clamped before taking a logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// Row-wise softmax with max-subtraction.
pub fn softmax(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|z| (z - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|e| e / sum);
    }
    out
}

/// Mean of `-ln p[i, y_i]` with the probability floored at [`LOG_FLOOR`].
pub fn ce_loss(probs: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64> {
    if probs.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} probability rows but {} labels",
            probs.nrows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let k = probs.ncols();
    let mut total = 0.0;
    for (row, &y) in probs.rows().into_iter().zip(labels) {
        if y >= k {
            return Err(Error::InvalidArgument(format!("label {y} outside [0, {k})")));
        }
        total -= row[y].max(LOG_FLOOR).ln();
    }
    Ok(total / labels.len() as f64)
}

/// Mean soft-target cross-entropy `-Σ_k t_k ln p_k`.
pub fn soft_ce_loss(probs: ArrayView2<'_, f64>, targets: ArrayView2<'_, f64>) -> f64 {
    let mut total = 0.0;
    Zip::from(probs).and(targets).for_each(|&p, &t| {
        if t != 0.0 {
            total -= t * p.max(LOG_FLOOR).ln();
        }
    });
    total / probs.nrows() as f64
}

/// Gradient of the batch-mean softmax cross-entropy with respect to the logits.
pub fn ce_logit_grad(probs: ArrayView2<'_, f64>, labels: &[usize]) -> Array2<f64> {
    let n = probs.nrows() as f64;
    let mut g = probs.to_owned();
    for (mut row, &y) in g.rows_mut().into_iter().zip(labels) {
        row[y] -= 1.0;
    }
    g /= n;
    g
}

/// Logit gradient of the batch-mean soft-target cross-entropy; targets sum to 1 per row.
pub fn soft_ce_logit_grad(probs: ArrayView2<'_, f64>, targets: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = probs.nrows() as f64;
    (&probs - &targets) / n
}

/// Pulls a gradient with respect to softmax outputs back onto the logits.
pub fn softmax_backward(probs: ArrayView2<'_, f64>, dprobs: ArrayView2<'_, f64>) -> Array2<f64> {
    let inner: Array1<f64> = (&probs * &dprobs).sum_axis(Axis(1));
    let mut out = dprobs.to_owned();
    for ((mut row, p), c) in out.rows_mut().into_iter().zip(probs.rows()).zip(inner.iter()) {
        Zip::from(&mut row).and(&p).for_each(|d, &pk| *d = pk * (*d - c));
    }
    out
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(row: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, v) in row.into_iter().enumerate() {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    best
}
