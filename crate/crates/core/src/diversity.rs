//! Sentence-level BLEU-4 and per-method diversity reports.
//!
//! Scores are generic over the float type. A lower BLEU between a seed and
//! its augmentation means the augmentation reuses fewer of the seed's
//! n-grams, i.e. it is structurally more diverse.

use std::cmp::Ordering;
use std::io::{Read, Write};

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::corpus::tokenize;
use crate::error::{Error, Result};

/// Highest n-gram order supported.
pub const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "epsilon")]
pub enum Smoothing<F> {
    /// Any order without a match makes the score zero.
    None,
    /// A zero match count contributes `epsilon / total` instead of zero.
    AddEpsilon(F),
    /// Zero match counts and zero totals are floored to one.
    FloorCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuConfig<F> {
    pub max_n: usize,
    pub smoothing: Smoothing<F>,
    pub weights: Vec<F>,
}

impl<F: Float> BleuConfig<F> {
    /// Uniform weights over orders `1..=max_n`.
    pub fn uniform(max_n: usize, smoothing: Smoothing<F>) -> Self {
        let w = F::one() / F::from(max_n).expect("small integer");
        Self {
            max_n,
            smoothing,
            weights: vec![w; max_n],
        }
    }

    /// Unsmoothed BLEU-4.
    pub fn unsmoothed() -> Self {
        Self::uniform(MAX_ORDER, Smoothing::None)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_n == 0 || self.max_n > MAX_ORDER {
            return Err(Error::Config(format!(
                "BLEU order {} outside 1..={MAX_ORDER}",
                self.max_n
            )));
        }
        if self.weights.len() != self.max_n {
            return Err(Error::Config(format!(
                "{} BLEU weights for order {}",
                self.weights.len(),
                self.max_n
            )));
        }
        let sum = self.weights.iter().fold(F::zero(), |a, &w| a + w);
        let tol = F::from(1e-6).expect("representable");
        if (sum - F::one()).abs() > tol || self.weights.iter().any(|w| *w < F::zero()) {
            return Err(Error::Config("BLEU weights must be non-negative and sum to 1".into()));
        }
        if let Smoothing::AddEpsilon(eps) = self.smoothing {
            if eps.is_nan() || eps < F::zero() {
                return Err(Error::Config("smoothing epsilon must be non-negative".into()));
            }
        }
        Ok(())
    }
}

impl<F: Float> Default for BleuConfig<F> {
    /// BLEU-4 with `add_epsilon(1e-9)`; short sentences rarely share 4-grams.
    fn default() -> Self {
        Self::uniform(
            MAX_ORDER,
            Smoothing::AddEpsilon(F::from(1e-9).expect("representable")),
        )
    }
}

/// Distinct n-grams of one token sequence with their counts, sorted so two
/// sequences can be compared by a linear merge. Build once per sentence when
/// scoring it against many others.
#[derive(Debug, Clone)]
pub struct NgramCounts<'a, T> {
    len: usize,
    orders: [Vec<(&'a [T], u32)>; MAX_ORDER],
}

impl<'a, T: Ord> NgramCounts<'a, T> {
    pub fn new(tokens: &'a [T]) -> Self {
        let orders = std::array::from_fn(|k| {
            let n = k + 1;
            if tokens.len() < n {
                return Vec::new();
            }
            let mut grams: Vec<&[T]> = tokens.windows(n).collect();
            grams.sort_unstable();
            let mut counted: Vec<(&[T], u32)> = Vec::with_capacity(grams.len());
            for g in grams {
                match counted.last_mut() {
                    Some((last, c)) if *last == g => *c += 1,
                    _ => counted.push((g, 1)),
                }
            }
            counted
        });
        Self {
            len: tokens.len(),
            orders,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Clipped match counts and candidate n-gram totals per order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BleuStats {
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub candidate_len: usize,
    pub reference_len: usize,
}

impl BleuStats {
    pub fn between<T: Ord>(candidate: &NgramCounts<'_, T>, reference: &NgramCounts<'_, T>) -> Self {
        let mut stats = BleuStats {
            candidate_len: candidate.len,
            reference_len: reference.len,
            ..Default::default()
        };
        for k in 0..MAX_ORDER {
            stats.totals[k] = candidate.len.saturating_sub(k);
            let (cand, refr) = (&candidate.orders[k], &reference.orders[k]);
            let (mut i, mut j, mut clipped) = (0, 0, 0usize);
            while i < cand.len() && j < refr.len() {
                match cand[i].0.cmp(refr[j].0) {
                    Ordering::Less => i += 1,
                    Ordering::Greater => j += 1,
                    Ordering::Equal => {
                        clipped += cand[i].1.min(refr[j].1) as usize;
                        i += 1;
                        j += 1;
                    }
                }
            }
            stats.matches[k] = clipped;
        }
        stats
    }

    /// Geometric mean of the modified precisions times the brevity penalty.
    pub fn score<F: Float>(&self, cfg: &BleuConfig<F>) -> F {
        let c = F::from(self.candidate_len).expect("length fits");
        let r = F::from(self.reference_len).expect("length fits");
        let mut log_sum = F::zero();
        for k in 0..cfg.max_n {
            let (m, t) = (self.matches[k], self.totals[k]);
            let p = if m > 0 {
                F::from(m).expect("count fits") / F::from(t).expect("count fits")
            } else {
                match cfg.smoothing {
                    Smoothing::None => return F::zero(),
                    Smoothing::AddEpsilon(eps) => eps / F::from(t.max(1)).expect("count fits"),
                    Smoothing::FloorCounts => F::one() / F::from(t.max(1)).expect("count fits"),
                }
            };
            log_sum = log_sum + cfg.weights[k] * p.ln();
        }
        let bp = if c < r {
            (F::one() - r / c).exp()
        } else {
            F::one()
        };
        bp * log_sum.exp()
    }
}

/// Sentence-level BLEU of `candidate` against a single `reference`.
pub fn bleu4<T: Ord, F: Float>(candidate: &[T], reference: &[T], cfg: &BleuConfig<F>) -> Result<F> {
    if candidate.is_empty() || reference.is_empty() {
        return Err(Error::EmptyInput);
    }
    cfg.validate()?;
    let stats = BleuStats::between(&NgramCounts::new(candidate), &NgramCounts::new(reference));
    Ok(stats.score(cfg))
}

/// Tokenization used for scoring: the corpus tokenizer, lowercased.
pub fn scoring_tokens(text: &str) -> Vec<String> {
    tokenize(text).into_iter().map(|t| t.to_lowercase()).collect()
}

/// An augmented sentence paired with the seed it is compared against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoringPair {
    pub method: String,
    pub seed_id: String,
    pub aug_id: String,
    pub seed_text: String,
    pub aug_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRow<F> {
    pub method: String,
    pub seed_id: String,
    pub aug_id: String,
    pub bleu4: F,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary<F> {
    pub method: String,
    pub pairs: usize,
    pub mean: F,
    pub median: F,
}

/// `(mean(method) - mean(baseline)) / mean(baseline)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodDelta<F> {
    pub method: String,
    pub baseline: String,
    pub relative: F,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report<F> {
    pub config: BleuConfig<F>,
    pub rows: Vec<PairRow<F>>,
    pub methods: Vec<MethodSummary<F>>,
    pub deltas: Vec<MethodDelta<F>>,
    pub warnings: Vec<String>,
}

/// Scores every pair and aggregates per method. Methods keep their order of
/// first appearance in `pairs`; `expected_methods` lists methods that should
/// be present and get a warning when they have no pairs.
pub fn diversity_report<F: Float>(
    pairs: &[ScoringPair],
    expected_methods: &[String],
    cfg: &BleuConfig<F>,
) -> Result<Report<F>> {
    cfg.validate()?;
    let mut warnings = Vec::new();
    let mut rows = Vec::with_capacity(pairs.len());
    for p in pairs {
        let (cand, refr) = (scoring_tokens(&p.aug_text), scoring_tokens(&p.seed_text));
        if cand.is_empty() || refr.is_empty() {
            warnings.push(format!(
                "{}: pair {} / {} has empty text, omitted",
                p.method, p.seed_id, p.aug_id
            ));
            continue;
        }
        rows.push(PairRow {
            method: p.method.clone(),
            seed_id: p.seed_id.clone(),
            aug_id: p.aug_id.clone(),
            bleu4: bleu4(&cand, &refr, cfg)?,
        });
    }

    let mut order: Vec<String> = Vec::new();
    for r in &rows {
        if !order.contains(&r.method) {
            order.push(r.method.clone());
        }
    }
    for m in expected_methods {
        if !order.contains(m) {
            warnings.push(format!("method {m} has no scored pairs, omitted"));
        }
    }

    let methods: Vec<MethodSummary<F>> = order
        .iter()
        .map(|m| {
            let mut scores: Vec<F> = rows
                .iter()
                .filter(|r| &r.method == m)
                .map(|r| r.bleu4)
                .collect();
            let n = scores.len();
            let mean = scores.iter().fold(F::zero(), |a, &b| a + b) / F::from(n).expect("fits");
            scores.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
            let two = F::one() + F::one();
            let median = if n % 2 == 1 {
                scores[n / 2]
            } else {
                (scores[n / 2 - 1] + scores[n / 2]) / two
            };
            MethodSummary {
                method: m.clone(),
                pairs: n,
                mean,
                median,
            }
        })
        .collect();

    let mut deltas = Vec::new();
    for a in &methods {
        for b in &methods {
            if a.method == b.method {
                continue;
            }
            if b.mean == F::zero() {
                warnings.push(format!(
                    "delta {} vs {} undefined: baseline mean is zero",
                    a.method, b.method
                ));
                continue;
            }
            deltas.push(MethodDelta {
                method: a.method.clone(),
                baseline: b.method.clone(),
                relative: (a.mean - b.mean) / b.mean,
            });
        }
    }

    Ok(Report {
        config: cfg.clone(),
        rows,
        methods,
        deltas,
        warnings,
    })
}

impl<F: Float + Serialize> Report<F> {
    pub fn mean_of(&self, method: &str) -> Option<F> {
        self.methods.iter().find(|m| m.method == method).map(|m| m.mean)
    }

    pub fn delta(&self, method: &str, baseline: &str) -> Option<F> {
        self.deltas
            .iter()
            .find(|d| d.method == method && d.baseline == baseline)
            .map(|d| d.relative)
    }

    /// Per-pair CSV: `method,seed_id,aug_id,bleu4`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["method", "seed_id", "aug_id", "bleu4"])?;
        for r in &self.rows {
            let score = r.bleu4.to_f64().expect("float converts to f64");
            w.write_record([
                r.method.as_str(),
                r.seed_id.as_str(),
                r.aug_id.as_str(),
                &format!("{score}"),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Writes pairs with their texts: `method,seed_id,aug_id,seed_text,aug_text`.
/// This is the file the external BERTScore harness reads.
pub fn write_pairs_csv<W: Write>(pairs: &[ScoringPair], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in pairs {
        w.serialize(p)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn read_pairs_csv<R: Read>(input: R) -> Result<Vec<ScoringPair>> {
    let mut r = csv::Reader::from_reader(input);
    let mut pairs = Vec::new();
    for rec in r.deserialize() {
        pairs.push(rec?);
    }
    Ok(pairs)
}
