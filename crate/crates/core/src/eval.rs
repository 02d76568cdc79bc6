//! Ranking the true target among all candidate entities and computing MRR
//! and Hits@{1,3,10} under raw and time-aware filtered protocols.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{augment_reciprocal, DatasetSplit, Query, Vocabularies};
use crate::ece::{build_ece, mask_batch, EceConfig, NeighborIndex};
use crate::error::Result;
use crate::model::{forward, BoundModel, ModelParams};
use crate::seed;
use crate::tensor::{Graph, Reduction, Scalar};

/// Queries per evaluation graph; fixed so results do not depend on thread
/// count.
const EVAL_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Raw,
    /// Time-aware filtering: other entities `e'` with `(s, p, e', t)` true in
    /// any split are removed from the candidate ranking.
    #[default]
    Filtered,
}

impl std::str::FromStr for Protocol {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_lowercase().as_str() {
            "raw" => Ok(Self::Raw),
            "filtered" => Ok(Self::Filtered),
            other => Err(crate::Error::Config(format!("unknown protocol {other:?}"))),
        }
    }
}

/// How the rank of a score tied with others is resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TiePolicy {
    /// `1 + #greater + #ties / 2`; deterministic and seed-free.
    #[default]
    Mean,
    Optimistic,
    Pessimistic,
}

/// Rank of the true target for one query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub query_index: usize,
    /// 1 is best; mean tie-breaking can produce half-integral ranks.
    pub rank: f64,
    /// True when the query predicts the original subject via a reciprocal
    /// predicate.
    pub reciprocal: bool,
}

/// Rank `scores[answer]` among all candidates. Entities in `filtered_out`
/// (minus the answer itself) are removed from the ranking first.
pub fn rank_target<T: Scalar>(
    scores: &[T],
    answer: usize,
    filtered_out: &[usize],
    policy: TiePolicy,
) -> f64 {
    let target = scores[answer];
    let mut skip = vec![false; scores.len()];
    for &e in filtered_out {
        if e != answer {
            skip[e] = true;
        }
    }
    let mut greater = 0usize;
    let mut ties = 0usize;
    for (i, &s) in scores.iter().enumerate() {
        if i == answer || skip[i] {
            continue;
        }
        if s > target {
            greater += 1;
        } else if s == target {
            ties += 1;
        }
    }
    match policy {
        TiePolicy::Mean => 1.0 + greater as f64 + ties as f64 / 2.0,
        TiePolicy::Optimistic => (1 + greater) as f64,
        TiePolicy::Pessimistic => (1 + greater + ties) as f64,
    }
}

/// MRR and Hits@{1,3,10} over a set of ranks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricSummary {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub count: usize,
}

impl MetricSummary {
    pub fn from_ranks(ranks: impl Iterator<Item = f64>) -> Self {
        let mut mrr = 0.0;
        let mut hits = [0usize; 3];
        let mut count = 0usize;
        for r in ranks {
            debug_assert!(r >= 1.0);
            mrr += 1.0 / r;
            for (slot, k) in hits.iter_mut().zip([1.0, 3.0, 10.0]) {
                if r <= k {
                    *slot += 1;
                }
            }
            count += 1;
        }
        if count == 0 {
            return Self::default();
        }
        let n = count as f64;
        Self {
            mrr: mrr / n,
            hits1: hits[0] as f64 / n,
            hits3: hits[1] as f64 / n,
            hits10: hits[2] as f64 / n,
            count,
        }
    }
}

/// Aggregate metrics plus the per-direction breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub all: MetricSummary,
    /// Queries predicting the object of an original quadruple.
    pub object_queries: MetricSummary,
    /// Reciprocal queries predicting the subject.
    pub subject_queries: MetricSummary,
}

/// Compute the report from per-query ranking results.
pub fn compute_metrics(results: &[RankingResult]) -> MetricReport {
    MetricReport {
        all: MetricSummary::from_ranks(results.iter().map(|r| r.rank)),
        object_queries: MetricSummary::from_ranks(
            results.iter().filter(|r| !r.reciprocal).map(|r| r.rank),
        ),
        subject_queries: MetricSummary::from_ranks(
            results.iter().filter(|r| r.reciprocal).map(|r| r.rank),
        ),
    }
}

/// Known true answers per `(subject, predicate, timestamp)` across all
/// splits, for the filtered protocol.
#[derive(Debug, Clone, Default)]
pub struct FilterSets {
    map: HashMap<(usize, usize, usize), Vec<usize>>,
}

impl FilterSets {
    pub fn build(splits: &DatasetSplit, vocabs: &Vocabularies) -> Result<Self> {
        let mut map: HashMap<(usize, usize, usize), Vec<usize>> = HashMap::new();
        for split in [&splits.train, &splits.valid, &splits.test] {
            for q in augment_reciprocal(split, vocabs)? {
                map.entry((q.subject, q.predicate, q.timestamp))
                    .or_default()
                    .push(q.answer);
            }
        }
        for answers in map.values_mut() {
            answers.sort_unstable();
            answers.dedup();
        }
        Ok(Self { map })
    }

    pub fn known(&self, subject: usize, predicate: usize, timestamp: usize) -> &[usize] {
        self.map
            .get(&(subject, predicate, timestamp))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub protocol: Protocol,
    pub tie_policy: TiePolicy,
    /// Masking rate applied to query timestamps, 0 for standard evaluation.
    /// Masked queries additionally produce a mean time-prediction loss.
    pub time_mask_rate: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::Filtered,
            tie_policy: TiePolicy::Mean,
            time_mask_rate: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: MetricReport,
    pub ranks: Vec<RankingResult>,
    /// Mean time-prediction cross-entropy over masked queries, when any.
    pub time_loss: Option<f64>,
}

/// Rank every query's answer under the model. Chains are rebuilt from the
/// train index with per-query seeds derived from `config.seed`, so repeated
/// evaluation of the same checkpoint is bit-identical.
pub fn evaluate<T: Scalar>(
    params: &ModelParams<T>,
    queries: &[Query],
    index: &NeighborIndex,
    ece_config: &EceConfig,
    filters: &FilterSets,
    base_relations: usize,
    config: &EvalConfig,
) -> Result<EvalOutcome> {
    let mask_flags = if config.time_mask_rate > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(config.seed, 3, 0));
        mask_batch(queries.len(), config.time_mask_rate, &mut rng)
    } else {
        vec![false; queries.len()]
    };

    let chunks: Vec<(usize, &[Query])> = queries
        .chunks(EVAL_CHUNK)
        .enumerate()
        .map(|(i, c)| (i * EVAL_CHUNK, c))
        .collect();

    let per_chunk: Vec<Result<(Vec<RankingResult>, f64, usize)>> = chunks
        .par_iter()
        .map(|&(start, chunk)| {
            let mut g: Graph<T> = Graph::new();
            let bound = BoundModel::bind(&mut g, params);
            let eces: Vec<_> = chunk
                .iter()
                .enumerate()
                .map(|(i, q)| {
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(seed::derive(config.seed, 4, (start + i) as u64));
                    build_ece(q, index, ece_config, mask_flags[start + i], &mut rng)
                })
                .collect();
            let scores = forward(&mut g, &bound, &eces)?;

            let link = g.value(scores.link);
            let mut results = Vec::with_capacity(chunk.len());
            for (i, q) in chunk.iter().enumerate() {
                let filtered_out: &[usize] = match config.protocol {
                    Protocol::Raw => &[],
                    Protocol::Filtered => filters.known(q.subject, q.predicate, q.timestamp),
                };
                results.push(RankingResult {
                    query_index: start + i,
                    rank: rank_target(link.row(i), q.answer, filtered_out, config.tie_policy),
                    reciprocal: q.is_reciprocal(base_relations),
                });
            }

            let (time_loss_sum, masked) = match scores.time {
                Some(t) => {
                    let n = scores.plan.masked_times.len();
                    let loss = g.cross_entropy(t, &scores.plan.masked_times, Reduction::Sum)?;
                    (g.value(loss).item()?.to_f64(), n)
                }
                None => (0.0, 0),
            };
            Ok((results, time_loss_sum, masked))
        })
        .collect();

    let mut ranks = Vec::with_capacity(queries.len());
    let mut time_loss_sum = 0.0;
    let mut masked_total = 0usize;
    for chunk in per_chunk {
        let (r, t, m) = chunk?;
        ranks.extend(r);
        time_loss_sum += t;
        masked_total += m;
    }

    Ok(EvalOutcome {
        report: compute_metrics(&ranks),
        ranks,
        time_loss: (masked_total > 0).then(|| time_loss_sum / masked_total as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Independent ranking oracle: sort the surviving candidates and locate
    /// the answer, averaging positions over its tie group.
    fn rank_by_sorting(scores: &[f64], answer: usize, filtered_out: &[usize]) -> f64 {
        let mut kept: Vec<(usize, f64)> = scores
            .iter()
            .copied()
            .enumerate()
            .filter(|(i, _)| *i == answer || !filtered_out.contains(i))
            .collect();
        kept.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let target = scores[answer];
        let first = kept.iter().position(|&(_, s)| s == target).unwrap();
        let last = kept.iter().rposition(|&(_, s)| s == target).unwrap();
        // Positions are 0-based; the mean tie rank averages 1-based ranks of
        // the tie group.
        (first + 1 + last + 1) as f64 / 2.0
    }

    #[test]
    fn strict_top_score_ranks_first() {
        let scores = [0.1, 0.9, 0.3];
        assert_eq!(rank_target(&scores, 1, &[], TiePolicy::Mean), 1.0);
    }

    #[test]
    fn full_tie_gives_mean_rank() {
        let n = 7;
        let scores = vec![2.5f64; n];
        let rank = rank_target(&scores, 3, &[], TiePolicy::Mean);
        assert_eq!(rank, (n as f64 + 1.0) / 2.0);
        assert_eq!(rank_target(&scores, 3, &[], TiePolicy::Optimistic), 1.0);
        assert_eq!(rank_target(&scores, 3, &[], TiePolicy::Pessimistic), n as f64);
    }

    #[test]
    fn ranks_match_sort_oracle_with_ties_and_filters() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for case in 0..1000 {
            let n = rng.gen_range(2..=50);
            // Coarse quantization forces frequent ties.
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.gen_range(-4i32..=4) as f64) / 2.0)
                .collect();
            let answer = rng.gen_range(0..n);
            let mut filtered: Vec<usize> = (0..n).filter(|_| rng.gen_bool(0.15)).collect();
            filtered.truncate(5);

            let got = rank_target(&scores, answer, &filtered, TiePolicy::Mean);
            let expected = rank_by_sorting(&scores, answer, &filtered);
            assert_eq!(got, expected, "case {case}: scores={scores:?} answer={answer}");
        }
    }

    #[test]
    fn filtered_rank_never_exceeds_raw() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = rng.gen_range(2..=30);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let answer = rng.gen_range(0..n);
            let filtered: Vec<usize> = (0..n).filter(|_| rng.gen_bool(0.3)).collect();
            let raw = rank_target(&scores, answer, &[], TiePolicy::Mean);
            let filt = rank_target(&scores, answer, &filtered, TiePolicy::Mean);
            assert!(filt <= raw);
        }
    }

    #[test]
    fn metrics_match_hand_computation() {
        let results: Vec<RankingResult> = [1.0, 2.0, 4.0, 20.0]
            .iter()
            .enumerate()
            .map(|(i, &rank)| RankingResult { query_index: i, rank, reciprocal: i % 2 == 1 })
            .collect();
        let report = compute_metrics(&results);
        assert!((report.all.mrr - 0.45).abs() < 1e-12);
        assert_eq!(report.all.hits1, 0.25);
        assert_eq!(report.all.hits3, 0.5);
        assert_eq!(report.all.hits10, 0.75);
        assert_eq!(report.all.count, 4);
        assert_eq!(report.object_queries.count, 2);
        assert_eq!(report.subject_queries.count, 2);
    }

    #[test]
    fn single_perfect_rank() {
        let results = [RankingResult { query_index: 0, rank: 1.0, reciprocal: false }];
        let report = compute_metrics(&results);
        assert_eq!(report.all.mrr, 1.0);
        assert_eq!(report.all.hits1, 1.0);
        assert_eq!(report.all.hits10, 1.0);
    }

    #[test]
    fn metrics_invariant_under_monotone_score_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let n = rng.gen_range(3..=20);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let answer = rng.gen_range(0..n);
            let transformed: Vec<f64> = scores.iter().map(|&s| (3.0 * s).exp() + 1.0).collect();
            assert_eq!(
                rank_target(&scores, answer, &[], TiePolicy::Mean),
                rank_target(&transformed, answer, &[], TiePolicy::Mean)
            );
        }
    }
}
