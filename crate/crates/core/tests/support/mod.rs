//! Independent reference implementations shared by the integration tests
//! and the acceptance runner.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// CMC at ranks 1/5/10, mAP and per-query AP computed by counting: the rank
/// of a gallery entry is the number of valid entries strictly closer, or
/// equally close with a lower index.
pub struct RankingOracle {
    pub cmc: [f64; 3],
    pub map: f64,
    pub ap: Vec<Option<f64>>,
}

pub fn ranking_oracle(d: &[Vec<f64>], q_ids: &[usize], q_cams: &[usize], g_ids: &[usize], g_cams: &[usize]) -> Option<RankingOracle> {
    let mut ap = Vec::new();
    let mut firsts = Vec::new();
    for q in 0..d.len() {
        let valid = |g: usize| !(g_ids[g] == q_ids[q] && g_cams[g] == q_cams[q]);
        let rank_of = |g: usize| (0..g_ids.len()).filter(|&o| valid(o) && (d[q][o] < d[q][g] || (d[q][o] == d[q][g] && o < g))).count();
        let mut pos_ranks: Vec<usize> = (0..g_ids.len()).filter(|&g| valid(g) && g_ids[g] == q_ids[q]).map(rank_of).collect();
        if pos_ranks.is_empty() {
            ap.push(None);
            continue;
        }
        pos_ranks.sort_unstable();
        let a = pos_ranks.iter().enumerate().map(|(i, &r)| (i + 1) as f64 / (r + 1) as f64).sum::<f64>() / pos_ranks.len() as f64;
        ap.push(Some(a));
        firsts.push(pos_ranks[0]);
    }
    if firsts.is_empty() {
        return None;
    }
    let n = firsts.len() as f64;
    let cmc = [1, 5, 10].map(|k| firsts.iter().filter(|&&f| f < k).count() as f64 / n);
    let map = ap.iter().flatten().sum::<f64>() / n;
    Some(RankingOracle { cmc, map, ap })
}

/// Random ranking problem; with `levels` set, distances are drawn from that
/// many discrete values so ties occur.
pub struct RankingCase {
    pub d: Vec<Vec<f64>>,
    pub q_ids: Vec<usize>,
    pub q_cams: Vec<usize>,
    pub g_ids: Vec<usize>,
    pub g_cams: Vec<usize>,
}

pub fn random_ranking_case(rng: &mut ChaCha8Rng, nq: usize, ng: usize, ids: usize, cams: usize, levels: Option<u32>) -> RankingCase {
    let draw = |r: &mut ChaCha8Rng| match levels {
        Some(l) => f64::from(r.random_range(0..l)) / f64::from(l),
        None => r.random::<f64>(),
    };
    let d = (0..nq).map(|_| (0..ng).map(|_| draw(rng)).collect()).collect();
    RankingCase {
        d,
        q_ids: (0..nq).map(|_| rng.random_range(0..ids)).collect(),
        q_cams: (0..nq).map(|_| rng.random_range(0..cams)).collect(),
        g_ids: (0..ng).map(|_| rng.random_range(0..ids)).collect(),
        g_cams: (0..ng).map(|_| rng.random_range(0..cams)).collect(),
    }
}

/// Pairwise-loop distances in `f64`.
pub fn distance_oracle(q: &[Vec<f64>], g: &[Vec<f64>], cosine: bool) -> Vec<Vec<f64>> {
    q.iter()
        .map(|a| {
            g.iter()
                .map(|b| {
                    let mut dot = 0.0;
                    let (mut na, mut nb, mut sq) = (0.0, 0.0, 0.0);
                    for i in 0..a.len() {
                        dot += a[i] * b[i];
                        na += a[i] * a[i];
                        nb += b[i] * b[i];
                        sq += (a[i] - b[i]) * (a[i] - b[i]);
                    }
                    if cosine {
                        let den = na.sqrt() * nb.sqrt();
                        1.0 - if den > 0.0 { dot / den } else { 0.0 }
                    } else {
                        sq.sqrt()
                    }
                })
                .collect()
        })
        .collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}
