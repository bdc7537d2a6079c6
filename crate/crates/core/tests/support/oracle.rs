//! Brute-force BLEU reference written independently of the library: n-grams
//! are materialized as owned vectors and counted by linear search, and the
//! exhaustive sweep clips counts through dense per-order tables.

#![allow(dead_code)]

use gda_core::diversity::{BleuConfig, BleuStats, NgramCounts};

/// Every n-gram of `tokens` with its multiplicity, found by linear search.
pub fn ngram_multiset<T: PartialEq + Clone>(tokens: &[T], n: usize) -> Vec<(Vec<T>, usize)> {
    let mut out: Vec<(Vec<T>, usize)> = Vec::new();
    if tokens.len() < n {
        return out;
    }
    for start in 0..=tokens.len() - n {
        let gram = tokens[start..start + n].to_vec();
        match out.iter_mut().find(|(g, _)| *g == gram) {
            Some((_, c)) => *c += 1,
            None => out.push((gram, 1)),
        }
    }
    out
}

/// Clipped matches and candidate totals for orders 1..=4.
pub fn clipped_counts<T: PartialEq + Clone>(candidate: &[T], reference: &[T]) -> ([usize; 4], [usize; 4]) {
    let mut matches = [0; 4];
    let mut totals = [0; 4];
    for n in 1..=4 {
        let cand = ngram_multiset(candidate, n);
        let refr = ngram_multiset(reference, n);
        totals[n - 1] = cand.iter().map(|(_, c)| c).sum();
        matches[n - 1] = cand
            .iter()
            .map(|(g, c)| {
                let r = refr.iter().find(|(h, _)| h == g).map_or(0, |(_, r)| *r);
                (*c).min(r)
            })
            .sum();
    }
    (matches, totals)
}

/// Unsmoothed BLEU-4 from counts.
pub fn score_from_counts(matches: [usize; 4], totals: [usize; 4], c: usize, r: usize) -> f64 {
    if matches.contains(&0) {
        return 0.0;
    }
    let log_mean = (0..4)
        .map(|k| (matches[k] as f64 / totals[k] as f64).ln())
        .sum::<f64>()
        / 4.0;
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    bp * log_mean.exp()
}

pub fn oracle_bleu<T: PartialEq + Clone>(candidate: &[T], reference: &[T]) -> f64 {
    let (m, t) = clipped_counts(candidate, reference);
    score_from_counts(m, t, candidate.len(), reference.len())
}

/// All sequences of length 1..=max_len over `0..alphabet`.
pub fn all_sequences(alphabet: u8, max_len: usize) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    let mut layer: Vec<Vec<u8>> = vec![Vec::new()];
    for _ in 0..max_len {
        layer = layer
            .iter()
            .flat_map(|s| {
                (0..alphabet).map(move |a| {
                    let mut t = s.clone();
                    t.push(a);
                    t
                })
            })
            .collect();
        out.extend(layer.iter().cloned());
    }
    out
}

/// Per-sequence n-gram tables indexed by the gram's base-`alphabet` code.
struct Dense {
    len: usize,
    counts: [Vec<u8>; 4],
    distinct: [Vec<(u16, u8)>; 4],
}

impl Dense {
    fn new(seq: &[u8], alphabet: usize) -> Self {
        let counts: [Vec<u8>; 4] = std::array::from_fn(|k| {
            let n = k + 1;
            let mut table = vec![0u8; alphabet.pow(n as u32)];
            if seq.len() >= n {
                for w in seq.windows(n) {
                    let code = w.iter().fold(0usize, |acc, &t| acc * alphabet + t as usize);
                    table[code] += 1;
                }
            }
            table
        });
        let distinct = std::array::from_fn(|k| {
            counts[k]
                .iter()
                .enumerate()
                .filter(|(_, &c)| c > 0)
                .map(|(code, &c)| (code as u16, c))
                .collect()
        });
        Self {
            len: seq.len(),
            counts,
            distinct,
        }
    }

    fn clipped(&self, reference: &Dense) -> ([usize; 4], [usize; 4]) {
        let mut matches = [0; 4];
        let mut totals = [0; 4];
        for k in 0..4 {
            totals[k] = self.len.saturating_sub(k);
            matches[k] = self.distinct[k]
                .iter()
                .map(|&(code, c)| c.min(reference.counts[k][code as usize]) as usize)
                .sum();
        }
        (matches, totals)
    }
}

#[derive(Debug, Default)]
pub struct SweepResult {
    pub pairs: u64,
    pub mismatches: u64,
    pub first_mismatch: Option<(Vec<u8>, Vec<u8>, f64, f64)>,
}

/// Compares the library's unsmoothed score with the oracle on every ordered
/// pair of sequences of length 1..=max_len over the alphabet.
pub fn exhaustive_sweep(alphabet: u8, max_len: usize) -> SweepResult {
    let seqs = all_sequences(alphabet, max_len);
    let dense: Vec<Dense> = seqs.iter().map(|s| Dense::new(s, alphabet as usize)).collect();
    let lib: Vec<NgramCounts<'_, u8>> = seqs.iter().map(|s| NgramCounts::new(s)).collect();
    let cfg = BleuConfig::<f64>::unsmoothed();
    let mut result = SweepResult::default();
    for (i, cand) in dense.iter().enumerate() {
        for (j, refr) in dense.iter().enumerate() {
            let (m, t) = cand.clipped(refr);
            let expected = score_from_counts(m, t, cand.len, refr.len);
            let got = BleuStats::between(&lib[i], &lib[j]).score(&cfg);
            result.pairs += 1;
            if got != expected {
                result.mismatches += 1;
                if result.first_mismatch.is_none() {
                    result.first_mismatch = Some((seqs[i].clone(), seqs[j].clone(), expected, got));
                }
            }
        }
    }
    result
}
