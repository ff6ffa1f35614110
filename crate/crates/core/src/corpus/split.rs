use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::SubVideo;
use crate::error::{Error, Result};
use crate::util::mix_seed;

#[derive(Clone, Debug, Default)]
pub struct Splits {
    pub train: Vec<SubVideo>,
    pub val: Vec<SubVideo>,
    pub test: Vec<SubVideo>,
}

/// Largest-remainder apportionment of `n` by `ratios`.
fn apportion(n: usize, ratios: &[f64]) -> Vec<usize> {
    let ideal: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut out: Vec<usize> = ideal.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        (ideal[b] - ideal[b].floor())
            .total_cmp(&(ideal[a] - ideal[a].floor()))
            .then(a.cmp(&b))
    });
    let short = n - out.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        out[i] += 1;
    }
    out
}

/// Domain-stratified train/val/test split, deterministic in `seed`.
///
/// Each domain gets `floor(ratio * n_d)` items per split plus at most one
/// extra, and the extras are placed so the global sizes match the
/// largest-remainder apportionment of the whole manifest.
pub fn split(items: &[SubVideo], ratios: [f64; 3], seed: u64) -> Result<Splits> {
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    let mut by_domain: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, sv) in items.iter().enumerate() {
        by_domain.entry(sv.domain.as_str()).or_default().push(i);
    }
    let global = apportion(items.len(), &ratios);
    let mut counts: Vec<[usize; 3]> = Vec::new();
    let mut leftover: Vec<usize> = Vec::new();
    for idx in by_domain.values() {
        let f: [usize; 3] = std::array::from_fn(|s| (ratios[s] * idx.len() as f64).floor() as usize);
        leftover.push(idx.len() - f.iter().sum::<usize>());
        counts.push(f);
    }
    let mut demand: [usize; 3] = std::array::from_fn(|s| global[s] - counts.iter().map(|c| c[s]).sum::<usize>());
    // Hand out extras, domains with most leftovers first, each to the splits
    // still owed the most (one extra per split per domain).
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| leftover[b].cmp(&leftover[a]).then(a.cmp(&b)));
    for d in order {
        let mut splits: Vec<usize> = (0..3).collect();
        splits.sort_by(|&a, &b| demand[b].cmp(&demand[a]).then(a.cmp(&b)));
        for &s in splits.iter().take(leftover[d]) {
            counts[d][s] += 1;
            demand[s] = demand[s].saturating_sub(1);
        }
    }

    let mut parts: [Vec<usize>; 3] = Default::default();
    for (d, (name, idx)) in by_domain.iter().enumerate() {
        let mut idx = idx.clone();
        let salt = name
            .bytes()
            .fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64));
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, salt)));
        let mut it = idx.into_iter();
        for s in 0..3 {
            parts[s].extend(it.by_ref().take(counts[d][s]));
        }
    }
    let names = ["train", "val", "test"];
    let mut out: [Vec<SubVideo>; 3] = Default::default();
    for s in 0..3 {
        if parts[s].is_empty() {
            return Err(Error::Config(format!("{} split would be empty", names[s])));
        }
        parts[s].sort_unstable();
        out[s] = parts[s].iter().map(|&i| items[i].clone()).collect();
    }
    let [train, val, test] = out;
    Ok(Splits { train, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_corpus, CorpusConfig};

    #[test]
    fn sizes_disjointness_and_strata() {
        let items = gen_corpus(&CorpusConfig {
            n_subvideos: 1000,
            ..CorpusConfig::default()
        })
        .unwrap();
        let sp = split(&items, [0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!((sp.train.len(), sp.val.len(), sp.test.len()), (800, 100, 100));
        let mut ids: Vec<u64> = sp.train.iter().chain(&sp.val).chain(&sp.test).map(|s| s.id).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..1000).collect::<Vec<_>>());

        let mut per: BTreeMap<&str, [usize; 4]> = BTreeMap::new();
        for (s, part) in [&sp.train, &sp.val, &sp.test].iter().enumerate() {
            for sv in part.iter() {
                per.entry(&sv.domain).or_default()[s] += 1;
            }
        }
        for sv in &items {
            per.get_mut(sv.domain.as_str()).unwrap()[3] += 1;
        }
        for c in per.values() {
            for (s, r) in [0.8, 0.1, 0.1].iter().enumerate() {
                assert!((c[s] as f64 - r * c[3] as f64).abs() <= 1.0, "{c:?}");
            }
        }
        let again = split(&items, [0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!(again.test, sp.test);
    }

    #[test]
    fn bad_ratios_and_empty_splits() {
        let items = gen_corpus(&CorpusConfig {
            n_subvideos: 5,
            ..CorpusConfig::default()
        })
        .unwrap();
        assert!(split(&items, [0.5, 0.2, 0.2], 0).is_err());
        assert!(matches!(split(&items, [0.98, 0.01, 0.01], 0), Err(Error::Config(_))));
    }
}
