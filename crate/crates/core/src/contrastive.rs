//! Supervised contrastive loss and softmax cross-entropy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{softmax_rows, Tensor};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;

/// What to do with an anchor whose label occurs nowhere else in the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyPositives {
    /// The anchor contributes nothing.
    #[default]
    Skip,
    Error,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    /// Gradient with respect to the loss input, same shape.
    pub grad: Tensor,
    /// Anchors with at least one positive.
    pub anchors_used: usize,
}

/// Supervised contrastive loss over a batch of embeddings `z` (N × d),
/// summed over anchors. Each anchor averages the log-probability of its
/// positives under a softmax over all other samples.
pub fn supcon_loss(z: &Tensor, labels: &[usize], tau: f64, empty: EmptyPositives) -> Result<LossOutput> {
    let (n, d) = z.dims2("supcon embeddings")?;
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            context: "supcon labels".into(),
            expected: vec![n],
            actual: vec![labels.len()],
        });
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    if n < 2 {
        return Err(Error::invalid("contrastive loss needs at least two samples"));
    }
    let zd = z.data();
    let mut s = vec![0.0; n * n];
    crate::nn::gemm(n, d, n, zd, false, zd, true, &mut s, 1.0 / tau, 0.0);

    // coef[i][a] = dL/ds_ia
    let mut coef = vec![0.0; n * n];
    let mut value = 0.0;
    let mut used = 0;
    for i in 0..n {
        let positives = (0..n).filter(|&a| a != i && labels[a] == labels[i]).count();
        if positives == 0 {
            match empty {
                EmptyPositives::Skip => continue,
                EmptyPositives::Error => return Err(Error::NoPositives(i)),
            }
        }
        used += 1;
        let row = &s[i * n..(i + 1) * n];
        let max = (0..n).filter(|&a| a != i).map(|a| row[a]).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..n).filter(|&a| a != i).map(|a| (row[a] - max).exp()).sum();
        let lse = max + denom.ln();
        let inv_p = 1.0 / positives as f64;
        let crow = &mut coef[i * n..(i + 1) * n];
        for a in (0..n).filter(|&a| a != i) {
            let q = (row[a] - lse).exp();
            crow[a] = q;
            if labels[a] == labels[i] {
                value -= inv_p * (row[a] - lse);
                crow[a] -= inv_p;
            }
        }
    }

    // dL/dZ = (C + Cᵀ) Z / τ
    let mut sym = vec![0.0; n * n];
    for i in 0..n {
        for a in 0..n {
            sym[i * n + a] = coef[i * n + a] + coef[a * n + i];
        }
    }
    let mut grad = vec![0.0; n * d];
    crate::nn::gemm(n, n, d, &sym, false, zd, false, &mut grad, 1.0 / tau, 0.0);
    Ok(LossOutput {
        value,
        grad: Tensor::from_vec(&[n, d], grad)?,
        anchors_used: used,
    })
}

/// Mean cross-entropy of predicted probabilities against integer labels.
/// The returned gradient is the fused softmax/cross-entropy gradient with
/// respect to the logits that produced `probs`.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<LossOutput> {
    let (n, k) = probs.dims2("cross-entropy probabilities")?;
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            context: "cross-entropy labels".into(),
            expected: vec![n],
            actual: vec![labels.len()],
        });
    }
    if n == 0 {
        return Err(Error::invalid("cross-entropy of an empty batch"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
    }
    let mut grad = probs.clone();
    let mut value = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        value -= (probs.data()[i * k + y] + 1e-12).ln();
        grad.data_mut()[i * k + y] -= 1.0;
    }
    grad.data_mut().iter_mut().for_each(|g| *g /= n as f64);
    Ok(LossOutput {
        value: value / n as f64,
        grad,
        anchors_used: n,
    })
}

/// Cross-entropy of softmax(logits).
pub fn cross_entropy_logits(logits: &Tensor, labels: &[usize]) -> Result<LossOutput> {
    cross_entropy(&softmax_rows(logits), labels)
}
