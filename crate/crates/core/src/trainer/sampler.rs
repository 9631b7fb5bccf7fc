//! Identity-balanced batch sampling.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One epoch of `P x S` batches drawn without replacement.
///
/// Each identity's samples are shuffled and cut into chunks of `S`
/// (remainders are dropped for the epoch); batches then take one chunk from
/// each of `P` distinct identities until fewer than `P` identities have
/// chunks left.
pub fn epoch_batches(labels: &[usize], p: usize, s: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    if p == 0 || s == 0 {
        return Err(Error::config("P and S must be positive"));
    }
    let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_id.entry(l).or_default().push(i);
    }
    let eligible = by_id.values().filter(|v| v.len() >= s).count();
    if eligible < p {
        return Err(Error::data(format!("need {p} identities with at least {s} samples, found {eligible}")));
    }
    let mut chunks: Vec<(usize, Vec<Vec<usize>>)> = Vec::new();
    for (&id, idx) in &by_id {
        let mut idx = idx.clone();
        idx.shuffle(rng);
        let cs: Vec<Vec<usize>> = idx.chunks_exact(s).map(|c| c.to_vec()).collect();
        if !cs.is_empty() {
            chunks.push((id, cs));
        }
    }
    let mut batches = Vec::new();
    loop {
        let mut open: Vec<usize> = (0..chunks.len()).filter(|&i| !chunks[i].1.is_empty()).collect();
        if open.len() < p {
            break;
        }
        // Prefer identities with more chunks left so few are stranded.
        open.shuffle(rng);
        let mut keyed: Vec<(usize, usize)> = open.iter().map(|&i| (chunks[i].1.len() + usize::from(rng.random_bool(0.5)), i)).collect();
        keyed.sort_by_key(|&(k, _)| std::cmp::Reverse(k));
        let mut batch = Vec::with_capacity(p * s);
        for &(_, i) in &keyed[..p] {
            batch.extend(chunks[i].1.pop().expect("open chunk"));
        }
        batches.push(batch);
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use std::collections::BTreeSet;

    #[test]
    fn batch_histograms() {
        let labels: Vec<usize> = (0..10).flat_map(|id| std::iter::repeat_n(id, 8)).collect();
        let batches = epoch_batches(&labels, 4, 4, &mut stream(3, &[])).unwrap();
        assert!(!batches.is_empty());
        let mut seen = BTreeSet::new();
        for b in &batches {
            assert_eq!(b.len(), 16);
            let mut hist = BTreeMap::new();
            for &i in b {
                *hist.entry(labels[i]).or_insert(0) += 1;
                assert!(seen.insert(i), "sample {i} drawn twice");
            }
            assert_eq!(hist.len(), 4);
            assert!(hist.values().all(|&c| c == 4));
        }
    }

    #[test]
    fn two_ids_two_each() {
        let batches = epoch_batches(&[0, 0, 1, 1], 2, 2, &mut stream(0, &[])).unwrap();
        assert_eq!(batches.len(), 1);
        let ids: BTreeSet<_> = batches[0].iter().map(|&i| [0, 0, 1, 1][i]).collect();
        assert_eq!(ids.len(), 2);
    }

    #[test]
    fn insufficient_data() {
        assert!(matches!(epoch_batches(&[0, 0, 1], 2, 2, &mut stream(0, &[])), Err(Error::Data(_))));
    }
}
