use super::Tensor;
use crate::error::{Error, Result};

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let (b, k) = logits.dims2()?;
    let mut out = Vec::with_capacity(b * k);
    for row in logits.data().chunks_exact(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / z));
    }
    Ok(Tensor::from_parts(vec![b, k], out))
}

/// Cross-entropy `-log softmax(row)[label]` of a single logit row, computed
/// via log-sum-exp so extreme logits cannot overflow.
#[inline]
pub fn xent_row(row: &[f64], label: usize) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
    m + z.ln() - row[label]
}

/// Mean of [`xent_row`] over the batch, rows summed in order.
pub fn mean_xent(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (b, k) = logits.dims2()?;
    if labels.len() != b {
        return Err(Error::input(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::input(format!("label {bad} outside 0..{k}")));
    }
    logits.check_finite("logits")?;
    let mut total = 0.0;
    for (row, &l) in logits.data().chunks_exact(k).zip(labels) {
        total += xent_row(row, l);
    }
    let loss = total / b as f64;
    if !loss.is_finite() {
        return Err(Error::numeric("non-finite cross-entropy"));
    }
    Ok(loss)
}

/// Mean cross-entropy over the batch and its gradient w.r.t. the logits,
/// `(softmax - onehot) / B`.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let loss = mean_xent(logits, labels)?;
    let b = labels.len();
    let k = logits.shape()[1];
    let mut grad = softmax_rows(logits)?;
    let inv = 1.0 / b as f64;
    for (row, &l) in grad.data_mut().chunks_exact_mut(k).zip(labels) {
        row[l] -= 1.0;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    Ok((loss, grad))
}
