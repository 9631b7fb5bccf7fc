//! Identity and metric losses, the softmax-form triplet used for gradient
//! verification, and the weighted overall objective.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_cl: f64,
    pub lambda_mcl: f64,
    pub margin: f64,
    /// Weights of the ID and triplet terms inside every ReID loss.
    pub id_weight: f64,
    pub triplet_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_cl: 0.25, lambda_mcl: 0.25, margin: 0.3, id_weight: 1.0, triplet_weight: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_cl", self.lambda_cl),
            ("lambda_mcl", self.lambda_mcl),
            ("margin", self.margin),
            ("id_weight", self.id_weight),
            ("triplet_weight", self.triplet_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("loss weight {name} = {v} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// Mean cross-entropy of classifier logits `[N, num_classes]`.
pub fn id_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape(format!("logits {s:?} for {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= s[1]) {
        return Err(Error::Data(format!("label {bad} outside classifier range 0..{}", s[1])));
    }
    Ok(tape.cross_entropy(logits, labels))
}

/// Checks that every label has a second sample and another label exists.
pub fn check_triplet_batch(labels: &[usize]) -> Result<()> {
    let mut counts = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    if counts.len() < 2 {
        return Err(Error::Data("triplet batch needs at least two identities".into()));
    }
    if let Some((l, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(Error::Data(format!("identity {l} has a single sample in the triplet batch")));
    }
    Ok(())
}

/// Batch-hard triplet loss over `[N, d]` features.
pub fn triplet_batch_hard<T: Scalar>(tape: &mut Tape<T>, features: Var, labels: &[usize], margin: f64) -> Result<Var> {
    let s = tape.shape(features).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape(format!("features {s:?} for {} labels", labels.len())));
    }
    check_triplet_batch(labels)?;
    Ok(tape.batch_hard_triplet(features, labels, T::lit(margin)))
}

/// `log(1 + exp(v_a·v_n − v_a·v_p))`, averaged over rows of `[N, d]` operands.
pub fn softmax_triplet<T: Scalar>(tape: &mut Tape<T>, v_a: Var, v_p: Var, v_n: Var) -> Result<Var> {
    let (a, p, n) = (tape.shape(v_a).to_vec(), tape.shape(v_p).to_vec(), tape.shape(v_n).to_vec());
    if a != p || a != n || a.len() != 2 {
        return Err(Error::shape(format!("triplet operands {a:?}, {p:?}, {n:?}")));
    }
    let an = tape.rowwise_dot(v_a, v_n);
    let ap = tape.rowwise_dot(v_a, v_p);
    let diff = tape.sub(an, ap);
    let sp = tape.softplus(diff);
    Ok(tape.mean_all(sp))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Softplus form of the softmax triplet for one triplet.
pub fn softmax_triplet_value(v_a: &[f64], v_p: &[f64], v_n: &[f64]) -> f64 {
    let x = dot(v_a, v_n) - dot(v_a, v_p);
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// The same loss written as the negative log-probability of the positive
/// in a two-way softmax.
pub fn softmax_triplet_log_softmax_form(v_a: &[f64], v_p: &[f64], v_n: &[f64]) -> f64 {
    let (sp, sn) = (dot(v_a, v_p), dot(v_a, v_n));
    let m = sp.max(sn);
    -(sp - (m + ((sp - m).exp() + (sn - m).exp()).ln()))
}

/// Analytic `∂L/∂v_a = σ(v_a·v_n − v_a·v_p) (v_n − v_p)`.
pub fn softmax_triplet_anchor_gradient(v_a: &[f64], v_p: &[f64], v_n: &[f64]) -> Vec<f64> {
    let x = dot(v_a, v_n) - dot(v_a, v_p);
    let s = 1.0 / (1.0 + (-x).exp());
    v_n.iter().zip(v_p).map(|(n, p)| s * (n - p)).collect()
}

/// Per-term loss values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reid_g: f64,
    pub reid_e: f64,
    pub reid_v: f64,
    pub cl: f64,
    pub mcl: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "step,L_ReID^G,L_ReID^E,L_ReID^V,L_CL,L_MCL,total";

    /// Weighted total of already-evaluated terms.
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        self.reid_g + self.reid_e + self.reid_v + w.lambda_cl * self.cl + w.lambda_mcl * self.mcl
    }

    pub fn csv_row(&self, step: usize) -> String {
        format!("{step},{},{},{},{},{},{}", self.reid_g, self.reid_e, self.reid_v, self.cl, self.mcl, self.total)
    }

    pub fn is_finite(&self) -> bool {
        [self.reid_g, self.reid_e, self.reid_v, self.cl, self.mcl, self.total].iter().all(|v| v.is_finite())
    }
}

/// Scalar loss nodes of one forward pass; disabled terms are `None`.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub reid_g: Var,
    pub reid_e: Option<Var>,
    pub reid_v: Option<Var>,
    pub cl: Option<Var>,
    pub mcl: Option<Var>,
}

/// `L^G + L^E + L^V + λ_cl L_CL + λ_mcl L_MCL` with its breakdown.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, terms: &LossTerms, w: &LossWeights) -> (Var, LossBreakdown) {
    let val = |t: &Tape<T>, v: Option<Var>| v.map_or(0.0, |v| t.value(v).item().to_f64_lossy());
    let mut parts = vec![(terms.reid_g, T::one())];
    for (v, weight) in [(terms.reid_e, 1.0), (terms.reid_v, 1.0), (terms.cl, w.lambda_cl), (terms.mcl, w.lambda_mcl)] {
        if let Some(v) = v {
            parts.push((v, T::lit(weight)));
        }
    }
    let total = tape.weighted_sum(&parts);
    let breakdown = LossBreakdown {
        reid_g: val(tape, Some(terms.reid_g)),
        reid_e: val(tape, terms.reid_e),
        reid_v: val(tape, terms.reid_v),
        cl: val(tape, terms.cl),
        mcl: val(tape, terms.mcl),
        total: tape.value(total).item().to_f64_lossy(),
    };
    (total, breakdown)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn id_loss_examples() {
        let mut t = Tape::<f64>::new();
        let uniform = t.constant(Tensor::zeros(&[2, 4]));
        let l = id_loss(&mut t, uniform, &[0, 3]).unwrap();
        assert!((t.value(l).item() - 4f64.ln()).abs() < 1e-12);
        let confident = t.constant(Tensor::new(&[1, 3], vec![0.0, 50.0, 0.0]).unwrap());
        let l = id_loss(&mut t, confident, &[1]).unwrap();
        assert!(t.value(l).item() < 1e-6);
        assert!(matches!(id_loss(&mut t, confident, &[3]), Err(Error::Data(_))));
    }

    #[test]
    fn triplet_examples() {
        let mut t = Tape::<f64>::new();
        let sep = t.constant(Tensor::new(&[4, 1], vec![0.0, 1.0, 4.0, 5.0]).unwrap());
        let l = triplet_batch_hard(&mut t, sep, &[0, 0, 1, 1], 0.3).unwrap();
        assert_eq!(t.value(l).item(), 0.0);
        let mixed = t.constant(Tensor::new(&[4, 1], vec![0.0, 2.0, 1.0, 3.0]).unwrap());
        let l = triplet_batch_hard(&mut t, mixed, &[0, 0, 1, 1], 0.3).unwrap();
        assert!((t.value(l).item() - 1.3).abs() < 1e-12);
        assert!(matches!(triplet_batch_hard(&mut t, mixed, &[0, 0, 1, 2], 0.3), Err(Error::Data(_))));
        assert!(matches!(triplet_batch_hard(&mut t, mixed, &[0, 0, 0, 0], 0.3), Err(Error::Data(_))));
    }

    #[test]
    fn softmax_triplet_examples() {
        let (a, p, n) = ([1.0, 0.0], [1.0, 0.0], [0.0, 1.0]);
        assert!((softmax_triplet_value(&a, &p, &n) - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
        assert!((softmax_triplet_value(&a, &p, &n) - 0.3133).abs() < 1e-4);
        assert!((softmax_triplet_value(&a, &p, &p) - 2f64.ln()).abs() < 1e-12);
        let mut t = Tape::<f64>::new();
        let vars: Vec<Var> = [a, p, n].iter().map(|v| t.leaf(Tensor::new(&[1, 2], v.to_vec()).unwrap())).collect();
        let l = softmax_triplet(&mut t, vars[0], vars[1], vars[2]).unwrap();
        assert!((t.value(l).item() - softmax_triplet_value(&a, &p, &n)).abs() < 1e-15);
        let g = t.backward(l);
        let expected = softmax_triplet_anchor_gradient(&a, &p, &n);
        for (x, y) in g.get(vars[0]).unwrap().data().iter().zip(&expected) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn weighted_total_example() {
        let b = LossBreakdown { reid_g: 2.0, reid_e: 1.5, reid_v: 1.8, cl: 0.4, mcl: 1.0, total: 0.0 };
        assert!((b.weighted_total(&LossWeights::default()) - 5.65).abs() < 1e-12);
        let mut t = Tape::<f64>::new();
        let mut s = |v: f64| t.constant(Tensor::scalar(v));
        let terms = LossTerms { reid_g: s(2.0), reid_e: Some(s(1.5)), reid_v: Some(s(1.8)), cl: Some(s(0.4)), mcl: Some(s(1.0)) };
        let (_, bd) = total_loss(&mut t, &terms, &LossWeights::default());
        assert!((bd.total - 5.65).abs() < 1e-12);
        let zero = LossWeights { lambda_cl: 0.0, lambda_mcl: 0.0, ..Default::default() };
        assert!((b.weighted_total(&zero) - 5.3).abs() < 1e-12);
    }
}
