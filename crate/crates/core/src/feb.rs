//! Foreground-enhanced branch: attention from the mean part feature,
//! attentive pooling, `f_E = f_F + f_G`, and the consistency loss that
//! distills `f_E` into the main branch.

use crate::autograd::{Detached, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Norm floor used when attention operands are unit-normalized.
const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionOptions {
    /// Unit-normalize pixel features and `f_L` first (cosine logits).
    pub normalized: bool,
    pub temperature: f64,
}

impl Default for AttentionOptions {
    fn default() -> Self {
        AttentionOptions { normalized: false, temperature: 1.0 }
    }
}

/// `a = softmax_{ij}(F_ij · f_L / temperature)` as `[N, h*w]`.
pub fn foreground_attention<T: Scalar>(tape: &mut Tape<T>, f: Var, f_l: Var, opts: AttentionOptions) -> Result<Var> {
    if !(opts.temperature > 0.0) {
        return Err(Error::config(format!("attention temperature must be positive, got {}", opts.temperature)));
    }
    let (fs, ls) = (tape.shape(f).to_vec(), tape.shape(f_l).to_vec());
    if fs.len() != 4 || ls != [fs[0], fs[1]] {
        return Err(Error::shape(format!("attention query {ls:?} does not match feature map {fs:?}")));
    }
    let (ff, fl) = if opts.normalized {
        (tape.l2_normalize(f, 1, T::lit(NORM_EPS)), tape.l2_normalize(f_l, 1, T::lit(NORM_EPS)))
    } else {
        (f, f_l)
    };
    let dots = tape.pixel_dot(ff, fl);
    if !tape.value(dots).all_finite() {
        return Err(Error::Numeric("non-finite attention logits".into()));
    }
    let logits = tape.scale(dots, T::lit(1.0 / opts.temperature));
    Ok(tape.softmax_last(logits))
}

/// `f_F = Σ_ij a_ij F_ij` as `[N, c]`.
pub fn attentive_pool<T: Scalar>(tape: &mut Tape<T>, f: Var, a: Var) -> Result<Var> {
    let (fs, as_) = (tape.shape(f).to_vec(), tape.shape(a).to_vec());
    if fs.len() != 4 || as_ != [fs[0], fs[2] * fs[3]] {
        return Err(Error::shape(format!("attention {as_:?} does not match feature map {fs:?}")));
    }
    let weights = tape.reshape(a, &[fs[0], 1, fs[2], fs[3]]);
    let pooled = tape.weighted_spatial_pool(f, weights, T::one());
    Ok(tape.reshape(pooled, &[fs[0], fs[1]]))
}

/// `f_E = f_F + f_G`.
pub fn enhance<T: Scalar>(tape: &mut Tape<T>, f_f: Var, f_g: Var) -> Result<Var> {
    if tape.shape(f_f) != tape.shape(f_g) {
        return Err(Error::shape(format!("cannot add {:?} and {:?}", tape.shape(f_f), tape.shape(f_g))));
    }
    Ok(tape.add(f_f, f_g))
}

/// `L_CL = ‖f_G − f_E‖²`, averaged over the batch. Gradient reaches `f_G`
/// only; the teacher is detached by type.
pub fn consistent_loss<T: Scalar>(tape: &mut Tape<T>, f_g: Var, f_e: Detached) -> Result<Var> {
    debug_assert!(tape.detach_is_broken() || tape.is_detached(f_e.var()), "consistency teacher must be detached");
    if tape.shape(f_g) != tape.shape(f_e.var()) {
        return Err(Error::shape(format!("cannot compare {:?} with {:?}", tape.shape(f_g), tape.shape(f_e.var()))));
    }
    Ok(tape.squared_distance_mean(f_g, f_e.var()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn attention_examples() {
        let mut t = Tape::<f64>::new();
        // h=1, w=2, c=1: logits (ln 3, 0).
        let f = t.constant(Tensor::new(&[1, 1, 1, 2], vec![3f64.ln(), 0.0]).unwrap());
        let q = t.constant(Tensor::new(&[1, 1], vec![1.0]).unwrap());
        let a = foreground_attention(&mut t, f, q, AttentionOptions::default()).unwrap();
        let av = t.value(a).data().to_vec();
        assert!((av[0] - 0.75).abs() < 1e-12 && (av[1] - 0.25).abs() < 1e-12);

        let constant = t.constant(Tensor::full(&[1, 3, 2, 2], 0.7));
        let q3 = t.constant(Tensor::new(&[1, 3], vec![1.0, -2.0, 0.5]).unwrap());
        let u = foreground_attention(&mut t, constant, q3, AttentionOptions::default()).unwrap();
        assert!(t.value(u).data().iter().all(|&v| (v - 0.25).abs() < 1e-12));

        let bad = foreground_attention(&mut t, constant, q3, AttentionOptions { temperature: 0.0, ..Default::default() });
        assert!(matches!(bad, Err(Error::Config(_))));
        let inf = t.constant(Tensor::new(&[1, 3], vec![f64::INFINITY, 0.0, 0.0]).unwrap());
        assert!(matches!(foreground_attention(&mut t, constant, inf, AttentionOptions::default()), Err(Error::Numeric(_))));
    }

    #[test]
    fn pooling_and_enhance_examples() {
        let mut t = Tape::<f64>::new();
        // Pixels (4, 0) and (0, 4), channel-major.
        let f = t.constant(Tensor::new(&[1, 2, 1, 2], vec![4.0, 0.0, 0.0, 4.0]).unwrap());
        let a = t.constant(Tensor::new(&[1, 2], vec![0.75, 0.25]).unwrap());
        let ff = attentive_pool(&mut t, f, a).unwrap();
        assert_eq!(t.value(ff).data(), &[3.0, 1.0]);
        let fg = t.constant(Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap());
        let fe = enhance(&mut t, ff, fg).unwrap();
        assert_eq!(t.value(fe).data(), &[4.0, 2.0]);
    }

    #[test]
    fn consistency_loss_value_and_gradient() {
        let mut t = Tape::<f64>::new();
        let fg = t.leaf(Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap());
        let fe_src = t.leaf(Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap());
        let fe = t.detach(fe_src);
        let l = consistent_loss(&mut t, fg, fe).unwrap();
        assert_eq!(t.value(l).item(), 2.0);
        let g = t.backward(l);
        assert_eq!(g.get(fg).unwrap().data(), &[2.0, -2.0]);
        assert!(g.get(fe_src).is_none());
    }
}
