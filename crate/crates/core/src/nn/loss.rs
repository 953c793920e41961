use super::Tensor;
use crate::error::{CpvError, Result};
use crate::Scalar;

pub fn log_softmax_row<T: Scalar>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let log_sum = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
    row.iter().map(|&v| (v - max) - log_sum).collect()
}

/// Mean negative log-likelihood of `labels` under softmax(`logits`), with
/// the gradient `(softmax - onehot) / N`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let &[n, classes] = logits.shape() else {
        return Err(CpvError::Shape(format!("logits must be 2-d, got {:?}", logits.shape())));
    };
    if labels.len() != n {
        return Err(CpvError::Shape(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(CpvError::LabelOutOfRange { label, classes });
    }
    let scale = T::one() / T::from_usize(n).unwrap();
    let mut loss = T::zero();
    let mut grad = Tensor::zeros(&[n, classes]);
    for ((row, g), &label) in logits.data().chunks(classes).zip(grad.data_mut().chunks_mut(classes)).zip(labels) {
        let lp = log_softmax_row(row);
        loss -= lp[label];
        for (gi, &l) in g.iter_mut().zip(&lp) {
            *gi = l.exp() * scale;
        }
        g[label] -= scale;
    }
    Ok((loss * scale, grad))
}
