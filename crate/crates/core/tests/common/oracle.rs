//! Brute-force retrieval metrics: full sort of every candidate list.

use clipforge::eval::RetrievalTask;
use clipforge::tensor::Tensor;
use rand::Rng;

/// Ranks by sorting `(score desc, index asc)` and scanning for the first
/// relevant candidate. Scores are accumulated in the same order as the
/// library so ties are bit-identical.
pub fn ranks(task: &RetrievalTask) -> Vec<usize> {
    let d = task.queries.shape()[1];
    let nc = task.candidates.shape()[0];
    let q = task.queries.data();
    let c = task.candidates.data();
    (0..task.relevant.len())
        .map(|i| {
            let mut order: Vec<(f32, usize)> = (0..nc)
                .map(|j| {
                    let mut s = 0f32;
                    for t in 0..d {
                        s += q[i * d + t] * c[j * d + t];
                    }
                    (s, j)
                })
                .collect();
            order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            order.iter().position(|&(_, j)| task.relevant[i].contains(&j)).unwrap() + 1
        })
        .collect()
}

pub fn recall(ranks: &[usize], k: usize) -> f64 {
    let mut hits = 0;
    for &r in ranks {
        if r <= k {
            hits += 1;
        }
    }
    hits as f64 / ranks.len() as f64
}

pub fn mrr(ranks: &[usize], k: usize) -> f64 {
    let mut s = 0.0;
    for &r in ranks {
        if r <= k {
            s += 1.0 / r as f64;
        }
    }
    s / ranks.len() as f64
}

/// Random task with up to `max_candidates` candidates. Some instances use a
/// tiny value alphabet so that exact score ties are common.
pub fn random_task(rng: &mut impl Rng, max_candidates: usize) -> RetrievalTask {
    let nc = rng.random_range(1..=max_candidates);
    let nq = rng.random_range(1..=40);
    let d = rng.random_range(1..=16);
    let coarse = rng.random_bool(0.3);
    let value = |rng: &mut dyn rand::RngCore| -> f32 {
        if coarse {
            [-1.0, 0.0, 0.5, 1.0][rng.random_range(0..4)]
        } else {
            rng.random_range(-1.0..1.0)
        }
    };
    let queries: Vec<f32> = (0..nq * d).map(|_| value(rng)).collect();
    let candidates: Vec<f32> = (0..nc * d).map(|_| value(rng)).collect();
    let relevant = (0..nq)
        .map(|_| {
            let m = rng.random_range(1..=nc.min(5));
            let mut r: Vec<usize> = (0..m).map(|_| rng.random_range(0..nc)).collect();
            r.sort_unstable();
            r.dedup();
            r
        })
        .collect();
    RetrievalTask {
        queries: Tensor::new(vec![nq, d], queries).unwrap(),
        candidates: Tensor::new(vec![nc, d], candidates).unwrap(),
        relevant,
    }
}

/// Compares library metrics with the oracle on one task; `Err` names the
/// first disagreement.
pub fn check_task(task: &RetrievalTask) -> Result<(), String> {
    use clipforge::eval::{mrr_at_k, rank_items, recall_at_k};
    let got = rank_items(task).map_err(|e| e.to_string())?;
    let want = ranks(task);
    if got != want {
        return Err(format!("ranks differ: {got:?} vs {want:?}"));
    }
    let nc = task.candidates.shape()[0];
    let (mut prev_r, mut prev_m) = (0.0, 0.0);
    for k in 1..=nc.min(60) {
        let (r, m) = (recall_at_k(&got, k), mrr_at_k(&got, k));
        if r != recall(&want, k) || m != mrr(&want, k) {
            return Err(format!("k={k}: R {r} vs {}, MRR {m} vs {}", recall(&want, k), mrr(&want, k)));
        }
        if r < prev_r || m < prev_m {
            return Err(format!("k={k}: not monotone"));
        }
        if m > r {
            return Err(format!("k={k}: MRR {m} > R {r}"));
        }
        (prev_r, prev_m) = (r, m);
    }
    Ok(())
}
