//! Semantics-aligned branch: per-part projections, the channel-group split
//! of `f_G`, the multi-part contrastive loss and the fusion `f_V`.

use crate::autograd::{Detached, Tape, Var};
use crate::error::{Error, Result};
use crate::heatmaps::PartGroup;
use crate::scalar::Scalar;

const NORM_EPS: f64 = 1e-12;

/// Positive sets `P(i)` of the contrastive loss; everything else is negative.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SymmetryGroups {
    k: usize,
    positive: Vec<bool>,
}

impl SymmetryGroups {
    /// Each part is positive with itself and with its mirror part.
    pub fn for_parts(parts: &[PartGroup]) -> Self {
        let k = parts.len();
        let positive = (0..k * k).map(|x| {
            let (i, j) = (x / k, x % k);
            i == j || parts[j] == parts[i].mirror()
        });
        SymmetryGroups { k, positive: positive.collect() }
    }

    /// Explicit positive sets, validated: non-empty, containing self, symmetric.
    pub fn from_sets(sets: &[Vec<usize>]) -> Result<Self> {
        let k = sets.len();
        let mut positive = vec![false; k * k];
        for (i, set) in sets.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::config(format!("part {i} has an empty positive set")));
            }
            for &j in set {
                if j >= k {
                    return Err(Error::config(format!("positive index {j} out of range for {k} parts")));
                }
                positive[i * k + j] = true;
            }
            if !positive[i * k + i] {
                return Err(Error::config(format!("part {i} must be its own positive")));
            }
        }
        for i in 0..k {
            for j in 0..k {
                if positive[i * k + j] != positive[j * k + i] {
                    return Err(Error::config(format!("positive sets not symmetric between {i} and {j}")));
                }
            }
        }
        Ok(SymmetryGroups { k, positive })
    }

    pub fn num_parts(&self) -> usize {
        self.k
    }

    pub fn is_positive(&self, i: usize, j: usize) -> bool {
        self.positive[i * self.k + j]
    }

    pub fn positives(&self, i: usize) -> Vec<usize> {
        (0..self.k).filter(|&j| self.is_positive(i, j)).collect()
    }

    pub fn mask(&self) -> &[bool] {
        &self.positive
    }
}

impl Default for SymmetryGroups {
    fn default() -> Self {
        Self::for_parts(&PartGroup::ALL)
    }
}

/// Linear part projections `W_k f_lk`: `[N, K, c]` with weights
/// `[K, c/K, c]` gives `[N, K * c/K]` (the parts laid out contiguously).
pub fn project_parts<T: Scalar>(tape: &mut Tape<T>, f_l: Var, w: Var) -> Result<Var> {
    let (xs, ws) = (tape.shape(f_l).to_vec(), tape.shape(w).to_vec());
    if xs.len() != 3 || ws.len() != 3 || ws[0] != xs[1] || ws[2] != xs[2] {
        return Err(Error::shape(format!("projection {ws:?} incompatible with parts {xs:?}")));
    }
    let y = tape.part_linear(f_l, w);
    Ok(tape.reshape(y, &[xs[0], xs[1] * ws[1]]))
}

/// Splits `[N, c]` into `K` contiguous channel groups, `[N, K, c/K]`.
/// Concatenation of parts is the inverse reshape.
pub fn split_groups<T: Scalar>(tape: &mut Tape<T>, x: Var, k: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 2 || k == 0 || s[1] % k != 0 {
        return Err(Error::config(format!("cannot split {s:?} into {k} equal channel groups")));
    }
    Ok(tape.reshape(x, &[s[0], k, s[1] / k]))
}

/// `[N, K, d]` parts to `[N, K d]`.
pub fn concat_parts<T: Scalar>(tape: &mut Tape<T>, parts: Var) -> Var {
    let s = tape.shape(parts).to_vec();
    tape.reshape(parts, &[s[0], s[1] * s[2]])
}

/// Multi-part contrastive loss, summed over parts and averaged over
/// images. Both operands are `[N, K, d]`; logits are cosine similarities
/// `f_gj · f_pi / temperature`.
pub fn multi_part_contrastive_loss<T: Scalar>(
    tape: &mut Tape<T>,
    f_g_parts: Var,
    f_p_parts: Detached,
    sym: &SymmetryGroups,
    temperature: f64,
) -> Result<Var> {
    debug_assert!(tape.detach_is_broken() || tape.is_detached(f_p_parts.var()), "part features must be detached");
    let (gs, ps) = (tape.shape(f_g_parts).to_vec(), tape.shape(f_p_parts.var()).to_vec());
    if gs != ps || gs.len() != 3 || gs[1] != sym.num_parts() {
        return Err(Error::shape(format!("contrastive operands {gs:?} / {ps:?} for {} parts", sym.num_parts())));
    }
    if !(temperature > 0.0) {
        return Err(Error::config(format!("contrastive temperature must be positive, got {temperature}")));
    }
    if (0..sym.num_parts()).any(|i| sym.positives(i).is_empty()) {
        return Err(Error::config("every part needs a positive"));
    }
    let g = tape.l2_normalize(f_g_parts, 2, T::lit(NORM_EPS));
    let p = tape.l2_normalize(f_p_parts.var(), 2, T::lit(NORM_EPS));
    // logits[n, i, j] = p_i · g_j
    let dots = tape.bmm_nt(p, g);
    let logits = tape.scale(dots, T::lit(1.0 / temperature));
    Ok(tape.multi_positive_nll(logits, sym.mask()))
}

/// `f_V = f_G + f_P`; both operands keep their gradients.
pub fn fuse<T: Scalar>(tape: &mut Tape<T>, f_g: Var, f_p: Var) -> Result<Var> {
    if tape.shape(f_g) != tape.shape(f_p) {
        return Err(Error::shape(format!("cannot fuse {:?} with {:?}", tape.shape(f_g), tape.shape(f_p))));
    }
    Ok(tape.add(f_g, f_p))
}
