use super::{NnError, Scalar, Tensor};

/// Row-wise softmax of `[N, K]` logits, stabilised by max subtraction.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    let (_, k) = logits.dims2()?;
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k.max(1)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    Ok(out)
}

/// Mean cross-entropy over the batch and its gradient w.r.t. the logits,
/// `(softmax − one_hot) / N`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>), NnError> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(super::shape_err(format!("{} labels for a batch of {n}", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(NnError::LabelOutOfRange { label, classes: k });
    }
    let mut grad = softmax_rows(logits)?;
    let inv_n = T::lit(1.0 / n as f64);
    let mut loss = T::zero();
    for ((row, logit_row), &label) in grad.data_mut().chunks_mut(k).zip(logits.data().chunks(k)).zip(labels) {
        // log-sum-exp form keeps the loss finite when the softmax underflows
        let max = logit_row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = logit_row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        loss += lse - logit_row[label];
        row[label] -= T::one();
        row.iter_mut().for_each(|g| *g *= inv_n);
    }
    Ok((loss * inv_n, grad))
}
