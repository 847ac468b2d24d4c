use rand::Rng;
use rand_chacha::ChaCha8Rng;
use vcil_core::causal::{CacheEntry, RelationCache, RelationVector};

pub fn sim(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (d / (na * nb)).clamp(-1.0, 1.0)
    }
}

pub fn vector(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(-2i32..=2) as f64 * 0.5 + r.gen_range(-0.1..0.1)).collect()
}

/// Random cache; about a quarter of the entries duplicate an earlier one to force ties.
pub fn random_cache(r: &mut ChaCha8Rng, classes: usize) -> RelationCache {
    let n = r.gen_range(1..=64);
    let mut entries: Vec<CacheEntry> = Vec::with_capacity(n);
    let mut ids: Vec<u64> = (0..n as u64 * 3).collect();
    for i in 0..n {
        let j = r.gen_range(i..ids.len());
        ids.swap(i, j);
        let mut e = CacheEntry {
            sample_id: ids[i],
            class: r.gen_range(0..classes),
            relation: RelationVector {
                spatial: vector(r, classes + 1),
                temporal: vector(r, classes + 1),
            },
            branch_s: vector(r, classes),
            branch_t: vector(r, classes),
            full: vector(r, classes),
            benefit_s: vector(r, classes),
            benefit_t: vector(r, classes),
        };
        if i > 0 && r.gen_bool(0.25) {
            let src = &entries[r.gen_range(0..i)];
            e.relation = src.relation.clone();
            e.benefit_s = src.benefit_s.clone();
            e.benefit_t = src.benefit_t.clone();
        }
        entries.push(e);
    }
    RelationCache {
        task: 1,
        capacity_per_class: 64,
        entries,
    }
}

/// Indices of the `k` best entries: an entry's rank is the number of entries that beat it.
pub fn brute_force(keys: &[(u64, Vec<f64>)], query: &[f64], k: usize, exclude: Option<u64>) -> Vec<(usize, f64)> {
    let scored: Vec<(usize, u64, f64)> = keys
        .iter()
        .enumerate()
        .filter(|(_, (id, _))| Some(*id) != exclude)
        .map(|(i, (id, v))| (i, *id, sim(v, query)))
        .collect();
    let mut ranked: Vec<(usize, usize, f64)> = scored
        .iter()
        .map(|&(i, id, s)| {
            let rank = scored.iter().filter(|&&(_, id2, s2)| s2 > s || (s2 == s && id2 < id)).count();
            (rank, i, s)
        })
        .filter(|(rank, _, _)| *rank < k)
        .collect();
    ranked.sort_by_key(|x| x.0);
    ranked.into_iter().map(|(_, i, s)| (i, s)).collect()
}
