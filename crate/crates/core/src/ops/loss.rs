use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

/// Mean softmax cross-entropy over the batch and its gradient
/// `(softmax − onehot) / N` with respect to the scores.
///
/// `scores` is `(N, K, 1, 1)`.
pub fn softmax_cross_entropy<S: Scalar>(
    scores: &Tensor4<S>,
    labels: &[usize],
) -> Result<(f64, Tensor4<S>)> {
    let d = scores.dims();
    let k = d.sample();
    if labels.len() != d.n {
        return Err(Error::Data(format!(
            "{} labels for a batch of {}",
            labels.len(),
            d.n
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Data(format!("label {bad} outside [0, {k})")));
    }
    let n = d.n as f64;
    let mut grad = Tensor4::zeros(d);
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = scores.sample(i);
        let max = row
            .iter()
            .map(|v| v.to_f64_lossy())
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.to_f64_lossy() - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        total += z.ln() - (row[label].to_f64_lossy() - max);
        for (j, (g, e)) in grad.sample_mut(i).iter_mut().zip(&exps).enumerate() {
            let onehot = if j == label { 1.0 } else { 0.0 };
            *g = S::from_f64_lossy((e / z - onehot) / n);
        }
    }
    Ok((total / n, grad))
}

/// Index of the largest score of every sample.
pub fn argmax_rows<S: Scalar>(scores: &Tensor4<S>) -> Vec<usize> {
    (0..scores.dims().n)
        .map(|i| {
            let row = scores.sample(i);
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims;

    #[test]
    fn uniform_scores_give_log_k() {
        let s = Tensor4::<f64>::zeros(Dims::new(3, 10, 1, 1));
        let (loss, _) = softmax_cross_entropy(&s, &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn large_margin_is_stable() {
        let mut s = Tensor4::<f32>::zeros(Dims::new(1, 10, 1, 1));
        s.data_mut()[3] = 1e4;
        let (loss, grad) = softmax_cross_entropy(&s, &[3]).unwrap();
        assert!(loss.abs() < 1e-6);
        assert!(grad.is_finite());
    }

    #[test]
    fn label_out_of_range() {
        let s = Tensor4::<f32>::zeros(Dims::new(1, 3, 1, 1));
        assert!(matches!(softmax_cross_entropy(&s, &[3]), Err(Error::Data(_))));
    }
}
