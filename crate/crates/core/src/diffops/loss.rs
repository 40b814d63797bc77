//! Losses over `V x (C + 1)` category probability fields.
//!
//! Category `C` is free space; the remaining columns are semantic classes.

use super::graph::{Graph, Var};
use super::ops::FnOp;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Probabilities below this are floored inside the log; the adjoint there is zero.
pub const PROB_FLOOR: f64 = 1e-12;

fn check_field(op: &'static str, probs: &Tensor, labels: &[u8]) -> Result<usize> {
    if probs.shape().len() != 2 || probs.rows() != labels.len() {
        return Err(Error::shape(op, probs.shape(), &[labels.len()]));
    }
    let k = probs.cols();
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(Error::validation(format!("label {bad} out of range for {k} categories")));
    }
    Ok(k)
}

/// Weighted mean negative log-likelihood of the labels.
pub fn cross_entropy_value(probs: &Tensor, labels: &[u8], class_weights: &[f64]) -> Result<f64> {
    let k = check_field("cross_entropy", probs, labels)?;
    if class_weights.len() != k {
        return Err(Error::shape("cross_entropy weights", &[class_weights.len()], &[k]));
    }
    let n = labels.len().max(1) as f64;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(v, &l)| {
            let p = probs.data()[v * k + l as usize];
            -class_weights[l as usize] * p.max(PROB_FLOOR).ln()
        })
        .sum::<f64>()
        / n)
}

/// Per-category errors `|fg - p|` and foreground flags for one class.
fn class_errors(probs: &Tensor, labels: &[u8], class: usize) -> (Vec<f64>, Vec<bool>) {
    let k = probs.cols();
    let mut errs = Vec::with_capacity(labels.len());
    let mut fg = Vec::with_capacity(labels.len());
    for (v, &l) in labels.iter().enumerate() {
        let p = probs.data()[v * k + class];
        let is_fg = l as usize == class;
        errs.push(if is_fg { 1.0 - p } else { p });
        fg.push(is_fg);
    }
    (errs, fg)
}

/// Lovasz extension of the Jaccard loss for one class.
///
/// Returns the loss and its adjoint with respect to the error vector. Errors
/// are sorted descending (stable by voxel index); the value is evaluated as
/// `sum_k (e_k - e_{k+1}) J_k`, which for 0/1 errors reduces to a single
/// Jaccard term computed from integer counts.
fn lovasz_class(errs: &[f64], fg: &[bool]) -> (f64, Vec<f64>) {
    let n = errs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| errs[b].total_cmp(&errs[a]));
    let gts = fg.iter().filter(|&&f| f).count() as f64;
    let mut jac = Vec::with_capacity(n);
    let (mut cum_fg, mut cum_bg) = (0.0, 0.0);
    for &i in &order {
        if fg[i] {
            cum_fg += 1.0;
        } else {
            cum_bg += 1.0;
        }
        let inter = gts - cum_fg;
        let union = gts + cum_bg;
        jac.push(1.0 - inter / union);
    }
    let mut loss = 0.0;
    for k in 0..n {
        let next = if k + 1 < n { errs[order[k + 1]] } else { 0.0 };
        loss += (errs[order[k]] - next) * jac[k];
    }
    let mut grad = vec![0.0; n];
    for k in 0..n {
        grad[order[k]] = if k == 0 { jac[0] } else { jac[k] - jac[k - 1] };
    }
    (loss, grad)
}

/// Lovasz loss per category; `None` for categories absent from the labels.
pub fn lovasz_per_class(probs: &Tensor, labels: &[u8]) -> Result<Vec<Option<f64>>> {
    let k = check_field("lovasz", probs, labels)?;
    let mut present = vec![false; k];
    labels.iter().for_each(|&l| present[l as usize] = true);
    Ok((0..k)
        .map(|c| {
            present[c].then(|| {
                let (e, fg) = class_errors(probs, labels, c);
                lovasz_class(&e, &fg).0
            })
        })
        .collect())
}

/// Mean Lovasz loss over categories present in the labels.
pub fn lovasz_value(probs: &Tensor, labels: &[u8]) -> Result<f64> {
    let per = lovasz_per_class(probs, labels)?;
    let present: Vec<f64> = per.into_iter().flatten().collect();
    if present.is_empty() {
        return Ok(0.0);
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

pub fn mse_value(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("mse", pred.shape(), target.shape()));
    }
    let n = pred.len().max(1) as f64;
    Ok(pred.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

impl Graph {
    /// Weighted cross-entropy of `probs [V, C+1]` against labels.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[u8], class_weights: &[f64]) -> Result<Var> {
        let value = cross_entropy_value(self.value(probs), labels, class_weights)?;
        let labels = labels.to_vec();
        let weights = class_weights.to_vec();
        Ok(self.push(
            Tensor::scalar(value),
            &[probs],
            FnOp::boxed("cross_entropy", move |inp, _, g| {
                let p = inp[0];
                let k = p.cols();
                let n = labels.len().max(1) as f64;
                let mut gp = Tensor::zeros(p.shape());
                for (v, &l) in labels.iter().enumerate() {
                    let idx = v * k + l as usize;
                    let pv = p.data()[idx];
                    if pv > PROB_FLOOR {
                        gp.data_mut()[idx] = -g.item() * weights[l as usize] / (n * pv);
                    }
                }
                Ok(vec![Some(gp)])
            }),
        ))
    }

    /// Mean Lovasz-softmax loss over present categories.
    pub fn lovasz(&mut self, probs: Var, labels: &[u8]) -> Result<Var> {
        let p = self.value(probs);
        let k = check_field("lovasz", p, labels)?;
        let mut present = vec![false; k];
        labels.iter().for_each(|&l| present[l as usize] = true);
        let classes: Vec<usize> = (0..k).filter(|&c| present[c]).collect();
        let mut total = 0.0;
        let mut grad = Tensor::zeros(p.shape());
        let denom = classes.len().max(1) as f64;
        for &c in &classes {
            let (errs, fg) = class_errors(p, labels, c);
            let (loss, ge) = lovasz_class(&errs, &fg);
            total += loss;
            for v in 0..labels.len() {
                let sign = if fg[v] { -1.0 } else { 1.0 };
                grad.data_mut()[v * k + c] += sign * ge[v] / denom;
            }
        }
        let value = if classes.is_empty() { 0.0 } else { total / denom };
        Ok(self.push(
            Tensor::scalar(value),
            &[probs],
            FnOp::boxed("lovasz", move |_, _, g| Ok(vec![Some(grad.scaled(g.item()))])),
        ))
    }

    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let value = mse_value(self.value(pred), self.value(target))?;
        Ok(self.push(
            Tensor::scalar(value),
            &[pred, target],
            FnOp::boxed("mse", |inp, _, g| {
                let n = inp[0].len().max(1) as f64;
                let d = inp[0].zip_map(inp[1], |a, b| 2.0 * g.item() * (a - b) / n);
                let neg = d.scaled(-1.0);
                Ok(vec![Some(d), Some(neg)])
            }),
        ))
    }
}
