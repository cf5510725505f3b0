//! The four loss terms and their weighted combination.
//!
//! All pair losses consume unit-norm embedding rows and average over the
//! batch, so magnitudes do not depend on batch size. Distances are plain
//! (non-squared) Euclidean except in the alignment term, which is the
//! squared distance by definition.

use crate::error::{Error, Result};
use crate::tensor::ops;
use crate::tensor::{Recording, Tensor};

/// Trade-off weights and margins of the combined loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// sketch-image contrastive weight
    pub alpha: f64,
    /// image-edgemap alignment weight
    pub beta: f64,
    /// sketch-edgemap contrastive weight
    pub gamma: f64,
    /// sketch-edgemap margin
    pub m1: f64,
    /// sketch-image margin
    pub m2: f64,
}

impl Default for LossWeights {
    fn default() -> LossWeights {
        LossWeights {
            alpha: 10.0,
            beta: 100.0,
            gamma: 10.0,
            m1: 0.3,
            m2: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 || self.m1 < 0.0 || self.m2 < 0.0
        {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

fn check_rows(a: &Tensor, b: &Tensor, what: &str) -> Result<(usize, usize)> {
    if a.shape().len() != 2 || a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{what} wants matching [N,D] inputs, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok((a.shape()[0], a.shape()[1]))
}

/// Row-wise Euclidean distance between paired rows: [N,D] x [N,D] -> [N].
pub fn euclidean_rowwise(rec: &Recording, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_rows(a, b, "euclidean distance")?;
    let diff = ops::sub(rec, a, b)?;
    let sq = ops::elementwise_mul(rec, &diff, &diff)?;
    ops::sqrt(rec, &ops::sum_rows(rec, &sq)?)
}

/// Mean squared Euclidean distance between an image embedding and its own
/// edgemap embedding. On unit vectors each pair contributes 2 - 2 cos.
pub fn alignment_loss(rec: &Recording, f_i: &Tensor, f_e: &Tensor) -> Result<Tensor> {
    let (n, _) = check_rows(f_i, f_e, "alignment_loss")?;
    let diff = ops::sub(rec, f_i, f_e)?;
    let sq = ops::elementwise_mul(rec, &diff, &diff)?;
    let per_pair = ops::sum_rows(rec, &sq)?;
    ops::scale(rec, &ops::sum_all(rec, &per_pair)?, 1.0 / n as f64)
}

/// Margin contrastive loss over paired rows, averaged across the batch:
/// l_sim * d + (1 - l_sim) * max(0, margin - d).
pub fn contrastive_loss(
    rec: &Recording,
    fa: &Tensor,
    fb: &Tensor,
    l_sim: &Tensor,
    margin: f64,
) -> Result<Tensor> {
    let (n, _) = check_rows(fa, fb, "contrastive_loss")?;
    if l_sim.shape() != [n] {
        return Err(Error::dim(format!(
            "similarity labels must be [N]={n}, got {:?}",
            l_sim.shape()
        )));
    }
    if l_sim.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::contract("similarity labels must be 0 or 1".into()));
    }
    if margin < 0.0 {
        return Err(Error::contract("margin must be non-negative".into()));
    }
    let d = euclidean_rowwise(rec, fa, fb)?;
    let pos = ops::elementwise_mul(rec, l_sim, &d)?;
    let margins = Tensor::full(&[n], margin);
    let hinge = ops::relu(rec, &ops::sub(rec, &margins, &d)?)?;
    let ones = Tensor::full(&[n], 1.0);
    let not_sim = ops::sub(rec, &ones, l_sim)?;
    let neg = ops::elementwise_mul(rec, &not_sim, &hinge)?;
    let per_pair = ops::add(rec, &pos, &neg)?;
    ops::scale(rec, &ops::sum_all(rec, &per_pair)?, 1.0 / n as f64)
}

/// Softmax cross-entropy against one-hot labels, mean over the batch.
pub fn cross_entropy_loss(rec: &Recording, logits: &Tensor, onehot: &Tensor) -> Result<Tensor> {
    ops::cross_entropy_mean(rec, logits, onehot)
}

/// One-hot encode integer categories into [N,K].
pub fn one_hot(categories: &[usize], num_classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; categories.len() * num_classes];
    for (i, &c) in categories.iter().enumerate() {
        if c >= num_classes {
            return Err(Error::contract(format!(
                "category {c} out of range for {num_classes} classes"
            )));
        }
        data[i * num_classes + c] = 1.0;
    }
    Tensor::new(vec![categories.len(), num_classes], data)
}

/// Everything the combined loss needs from one batch's forward pass.
pub struct HybridBatch<'a> {
    pub f_s: &'a Tensor,
    pub f_i: &'a Tensor,
    pub f_e: &'a Tensor,
    pub logits_s: &'a Tensor,
    pub logits_i: &'a Tensor,
    pub logits_e: &'a Tensor,
    /// one-hot categories of the sketches
    pub onehot_s: &'a Tensor,
    /// one-hot categories of the images (the edgemaps share them)
    pub onehot_i: &'a Tensor,
    pub l_sim: &'a Tensor,
}

/// Unweighted component values of one step, for logging.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub ce_sketch: f64,
    pub ce_image: f64,
    pub ce_edgemap: f64,
    pub l_si: f64,
    pub l_align: f64,
    pub l_se: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn ce_sum(&self) -> f64 {
        self.ce_sketch + self.ce_image + self.ce_edgemap
    }

    /// Recombine the logged components with the given weights, in the same
    /// association order as the recorded sum.
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        let mut total = (self.ce_sketch + self.ce_image) + self.ce_edgemap;
        if w.alpha != 0.0 {
            total += w.alpha * self.l_si;
        }
        if w.beta != 0.0 {
            total += w.beta * self.l_align;
        }
        if w.gamma != 0.0 {
            total += w.gamma * self.l_se;
        }
        total
    }
}

/// The combined loss: sum of the three branch cross-entropies plus the
/// weighted sketch-image contrastive, alignment, and sketch-edgemap
/// contrastive terms. Zero-weighted terms are still evaluated for the log
/// but contribute no node to the total, so they carry no gradient.
pub fn hybrid_loss(
    rec: &Recording,
    batch: &HybridBatch,
    weights: &LossWeights,
) -> Result<(Tensor, LossBreakdown)> {
    weights.validate()?;
    let ce_s = cross_entropy_loss(rec, batch.logits_s, batch.onehot_s)?;
    let ce_i = cross_entropy_loss(rec, batch.logits_i, batch.onehot_i)?;
    let ce_e = cross_entropy_loss(rec, batch.logits_e, batch.onehot_i)?;
    let l_si = contrastive_loss(rec, batch.f_s, batch.f_i, batch.l_sim, weights.m2)?;
    let l_align = alignment_loss(rec, batch.f_i, batch.f_e)?;
    let l_se = contrastive_loss(rec, batch.f_s, batch.f_e, batch.l_sim, weights.m1)?;

    let mut total = ops::add(rec, &ops::add(rec, &ce_s, &ce_i)?, &ce_e)?;
    if weights.alpha != 0.0 {
        total = ops::add(rec, &total, &ops::scale(rec, &l_si, weights.alpha)?)?;
    }
    if weights.beta != 0.0 {
        total = ops::add(rec, &total, &ops::scale(rec, &l_align, weights.beta)?)?;
    }
    if weights.gamma != 0.0 {
        total = ops::add(rec, &total, &ops::scale(rec, &l_se, weights.gamma)?)?;
    }

    let breakdown = LossBreakdown {
        ce_sketch: ce_s.item()?,
        ce_image: ce_i.item()?,
        ce_edgemap: ce_e.item()?,
        l_si: l_si.item()?,
        l_align: l_align.item()?,
        l_se: l_se.item()?,
        total: total.item()?,
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: Vec<f64>) -> Tensor {
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let d = v.len();
        Tensor::new(vec![1, d], v.into_iter().map(|x| x / norm).collect()).unwrap()
    }

    #[test]
    fn alignment_identical_orthogonal_antipodal() {
        let rec = Recording::new();
        let a = unit(vec![1.0, 0.0]);
        let b = unit(vec![0.0, 1.0]);
        let na = Tensor::new(vec![1, 2], vec![-1.0, 0.0]).unwrap();
        assert_eq!(alignment_loss(&rec, &a, &a).unwrap().item().unwrap(), 0.0);
        assert!((alignment_loss(&rec, &a, &b).unwrap().item().unwrap() - 2.0).abs() < 1e-15);
        assert!((alignment_loss(&rec, &a, &na).unwrap().item().unwrap() - 4.0).abs() < 1e-15);
    }

    #[test]
    fn alignment_is_symmetric() {
        let rec = Recording::new();
        let a = unit(vec![0.3, -0.8, 0.52]);
        let b = unit(vec![-0.1, 0.4, 0.9]);
        let ab = alignment_loss(&rec, &a, &b).unwrap().item().unwrap();
        let ba = alignment_loss(&rec, &b, &a).unwrap().item().unwrap();
        assert_eq!(ab.to_bits(), ba.to_bits());
    }

    #[test]
    fn contrastive_positive_identical_is_zero() {
        let rec = Recording::new();
        let a = unit(vec![0.6, 0.8]);
        let sim = Tensor::new(vec![1], vec![1.0]).unwrap();
        let loss = contrastive_loss(&rec, &a, &a, &sim, 0.3).unwrap();
        assert_eq!(loss.item().unwrap(), 0.0);
    }

    #[test]
    fn contrastive_negative_beyond_margin_is_zero() {
        let rec = Recording::new();
        let a = unit(vec![1.0, 0.0]);
        let b = unit(vec![0.0, 1.0]); // distance sqrt(2) > 0.3
        let dis = Tensor::new(vec![1], vec![0.0]).unwrap();
        let loss = contrastive_loss(&rec, &a, &b, &dis, 0.3).unwrap();
        assert_eq!(loss.item().unwrap(), 0.0);
    }

    #[test]
    fn contrastive_negative_coincident_hits_the_margin() {
        let rec = Recording::new();
        let a = unit(vec![0.6, 0.8]);
        let dis = Tensor::new(vec![1], vec![0.0]).unwrap();
        let loss = contrastive_loss(&rec, &a, &a, &dis, 0.3).unwrap();
        assert!((loss.item().unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn contrastive_rejects_bad_labels() {
        let rec = Recording::new();
        let a = unit(vec![1.0, 0.0]);
        let bad = Tensor::new(vec![1], vec![0.5]).unwrap();
        assert!(contrastive_loss(&rec, &a, &a, &bad, 0.3).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_k() {
        let rec = Recording::new();
        let logits = Tensor::zeros(&[1, 4]);
        let y = one_hot(&[2], 4).unwrap();
        let loss = cross_entropy_loss(&rec, &logits, &y).unwrap().item().unwrap();
        assert!((loss - 4.0_f64.ln()).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn cross_entropy_saturates_on_confident_correct_logit() {
        let rec = Recording::new();
        let logits = Tensor::new(vec![1, 4], vec![0.0, 30.0, 0.0, 0.0]).unwrap();
        let y = one_hot(&[1], 4).unwrap();
        let loss = cross_entropy_loss(&rec, &logits, &y).unwrap().item().unwrap();
        assert!(loss < 1e-12, "{loss}");
    }

    #[test]
    fn cross_entropy_rejects_non_one_hot() {
        let rec = Recording::new();
        let logits = Tensor::zeros(&[1, 3]);
        let y = Tensor::new(vec![1, 3], vec![0.5, 0.5, 0.0]).unwrap();
        assert!(cross_entropy_loss(&rec, &logits, &y).is_err());
    }

    #[test]
    fn hybrid_weighted_sum_matches_hand_arithmetic() {
        // components (CE sum = 1, SI = 0.2, align = 0.01, SE = 0.1) with the
        // default weights give 1 + 2 + 1 + 1 = 5
        let b = LossBreakdown {
            ce_sketch: 0.5,
            ce_image: 0.25,
            ce_edgemap: 0.25,
            l_si: 0.2,
            l_align: 0.01,
            l_se: 0.1,
            total: 0.0,
        };
        let w = LossWeights::default();
        assert!((b.recombine(&w) - 5.0).abs() < 1e-12);
    }
}
