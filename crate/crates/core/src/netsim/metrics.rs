//! Output-distance metrics, accuracy and the low/high-bitwidth loss.

use crate::error::{Error, Result};

/// Euclidean distance `||a - b||`, accumulated in f64.
pub fn l2_distance(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidParams(format!(
            "length {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum::<f64>()
        .sqrt())
}

/// `||a - b|| / ||b||`; a zero reference is rejected.
pub fn relative_l2(a: &[f32], b: &[f32]) -> Result<f64> {
    let norm = b.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::InvalidParams("reference tensor has zero norm".into()));
    }
    Ok(l2_distance(a, b)? / norm)
}

pub fn argmax(v: &[f32]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// Fraction of rows whose argmax equals the label.
pub fn top1_accuracy(logits: &[Vec<f32>], labels: &[usize]) -> f64 {
    if logits.is_empty() {
        return 0.0;
    }
    let hits = logits.iter().zip(labels).filter(|(l, &y)| argmax(l) == y).count();
    hits as f64 / logits.len() as f64
}

/// Max-subtracted softmax in f64.
pub fn softmax(logits: &[f32]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f64> = logits.iter().map(|&v| (f64::from(v) - f64::from(m)).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Log-softmax in f64, computed directly for stability.
fn log_softmax(logits: &[f32]) -> Vec<f64> {
    let m = f64::from(logits.iter().copied().fold(f32::NEG_INFINITY, f32::max));
    let lse = logits.iter().map(|&v| (f64::from(v) - m).exp()).sum::<f64>().ln() + m;
    logits.iter().map(|&v| f64::from(v) - lse).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossInputs {
    pub logits_low: Vec<Vec<f32>>,
    pub logits_high: Vec<Vec<f32>>,
    pub logits_fp32: Vec<Vec<f32>>,
    pub hard_labels: Vec<usize>,
    pub lambda: f64,
}

impl LossInputs {
    pub const DEFAULT_LAMBDA: f64 = 0.5;
}

/// Hard-label cross-entropy plus soft-label cross-entropy against the
/// fp32 distribution, averaged over samples.
pub fn branch_loss(logits: &[Vec<f32>], fp32: &[Vec<f32>], labels: &[usize]) -> Result<f64> {
    if logits.len() != fp32.len() || logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::InvalidParams("loss inputs disagree in sample count".into()));
    }
    let mut total = 0.0;
    for ((l, t), &y) in logits.iter().zip(fp32).zip(labels) {
        if l.len() != t.len() || y >= l.len() {
            return Err(Error::InvalidParams("logit dimensions or label out of range".into()));
        }
        let logp = log_softmax(l);
        let target = softmax(t);
        let hard = -logp[y];
        let soft: f64 = -target.iter().zip(&logp).map(|(p, lq)| p * lq).sum::<f64>();
        total += hard + soft;
    }
    Ok(total / logits.len() as f64)
}

/// `lambda * L_low + (1 - lambda) * L_high`.
pub fn total_loss(inp: &LossInputs) -> Result<f64> {
    if !(0.0..=1.0).contains(&inp.lambda) {
        return Err(Error::InvalidParams(format!("lambda {} outside [0, 1]", inp.lambda)));
    }
    let low = branch_loss(&inp.logits_low, &inp.logits_fp32, &inp.hard_labels)?;
    let high = branch_loss(&inp.logits_high, &inp.logits_fp32, &inp.hard_labels)?;
    Ok(inp.lambda * low + (1.0 - inp.lambda) * high)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l2_examples() {
        assert_eq!(l2_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((l2_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 5.0).abs() < 1e-12);
        assert!((relative_l2(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(relative_l2(&[1.0], &[0.0]).is_err());
        assert!(l2_distance(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn accuracy_counts_argmax() {
        let logits = vec![vec![0.1, 0.9], vec![2.0, -1.0], vec![0.0, 1.0]];
        assert!((top1_accuracy(&logits, &[1, 0, 0]) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn lambda_rejected_outside_unit_interval() {
        let inp = LossInputs {
            logits_low: vec![vec![0.0, 0.0]],
            logits_high: vec![vec![0.0, 0.0]],
            logits_fp32: vec![vec![0.0, 0.0]],
            hard_labels: vec![0],
            lambda: 1.5,
        };
        assert!(total_loss(&inp).is_err());
    }
}
