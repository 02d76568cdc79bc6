//! Per-entity chronological neighborhoods and query-specific evolutionary
//! event chains.
//!
//! The neighbor index is built from the train split only and is immutable
//! afterwards. Chain construction is a pure function of its arguments plus an
//! explicit seeded random source, so chains for different queries may be
//! built concurrently.

use rand::Rng;

use crate::data::{Quadruple, Query, Vocabularies};

/// One chain branch: an event `(entity, predicate, timestamp)` relative to
/// the chain's subject. When `time_masked` is set the timestamp token is
/// replaced by MASK at embedding time while the true time id stays available
/// for supervision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EventTriple {
    pub entity: usize,
    pub predicate: usize,
    pub timestamp: usize,
    pub time_masked: bool,
}

/// Neighbor record inside the index: the far endpoint, the (possibly
/// reciprocal) predicate, and the timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Neighbor {
    // Field order gives the chronological (timestamp, predicate, entity)
    // sort via the derived Ord.
    pub timestamp: usize,
    pub predicate: usize,
    pub entity: usize,
}

/// Chronologically sorted adjacency lists over train facts. Each train
/// quadruple `(s, p, o, t)` appears in `s`'s list as `(o, p, t)` and in
/// `o`'s list as `(s, p + |R|, t)`.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    lists: Vec<Vec<Neighbor>>,
}

impl NeighborIndex {
    pub fn build(train: &[Quadruple], vocabs: &Vocabularies) -> Self {
        let base = vocabs.relation_count();
        let mut lists: Vec<Vec<Neighbor>> = vec![Vec::new(); vocabs.entity_count()];
        for q in train {
            lists[q.subject].push(Neighbor {
                timestamp: q.timestamp,
                predicate: q.predicate,
                entity: q.object,
            });
            lists[q.object].push(Neighbor {
                timestamp: q.timestamp,
                predicate: q.predicate + base,
                entity: q.subject,
            });
        }
        for list in lists.iter_mut() {
            list.sort_unstable();
        }
        Self { lists }
    }

    pub fn neighbors(&self, entity: usize) -> &[Neighbor] {
        &self.lists[entity]
    }

    pub fn entity_count(&self) -> usize {
        self.lists.len()
    }

    /// Total number of index entries (twice the train size).
    pub fn entry_count(&self) -> usize {
        self.lists.iter().map(|l| l.len()).sum()
    }
}

/// A query branch plus up to `k` chronologically ordered neighbor branches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ece {
    pub query: EventTriple,
    pub neighbors: Vec<EventTriple>,
    pub answer: usize,
    pub answer_time: usize,
}

impl Ece {
    /// Number of branches including the query branch.
    pub fn branch_count(&self) -> usize {
        1 + self.neighbors.len()
    }
}

/// Chain construction knobs.
#[derive(Debug, Clone, Copy)]
pub struct EceConfig {
    /// Maximum number of neighbor branches (`k`).
    pub max_neighbors: usize,
    /// Restrict neighbors to `timestamp <= query timestamp`.
    pub history_only: bool,
    /// Drop every neighbor mentioning the answer entity instead of only the
    /// exact ground-truth event.
    pub strict_filtering: bool,
}

/// Build the chain for one query.
///
/// Candidates come from the subject's index list, optionally restricted to
/// history; the query's exact ground-truth event `(answer, p, t)` is always
/// removed. When more than `k` candidates remain, a uniform random subset of
/// size `k` is drawn and re-sorted chronologically.
pub fn build_ece<R: Rng>(
    query: &Query,
    index: &NeighborIndex,
    config: &EceConfig,
    mask_query_time: bool,
    rng: &mut R,
) -> Ece {
    let list = index.neighbors(query.subject);
    let upper = if config.history_only {
        // Lists are sorted by timestamp first, so history is a prefix.
        list.partition_point(|n| n.timestamp <= query.timestamp)
    } else {
        list.len()
    };
    let mut candidates: Vec<Neighbor> = list[..upper]
        .iter()
        .filter(|n| {
            if config.strict_filtering {
                n.entity != query.answer
            } else {
                !(n.entity == query.answer
                    && n.predicate == query.predicate
                    && n.timestamp == query.timestamp)
            }
        })
        .copied()
        .collect();

    if candidates.len() > config.max_neighbors {
        let picked = rand::seq::index::sample(rng, candidates.len(), config.max_neighbors);
        let mut sampled: Vec<Neighbor> = picked.iter().map(|i| candidates[i]).collect();
        sampled.sort_unstable();
        candidates = sampled;
    }

    Ece {
        query: EventTriple {
            entity: query.subject,
            predicate: query.predicate,
            timestamp: query.timestamp,
            time_masked: mask_query_time,
        },
        neighbors: candidates
            .into_iter()
            .map(|n| EventTriple {
                entity: n.entity,
                predicate: n.predicate,
                timestamp: n.timestamp,
                time_masked: false,
            })
            .collect(),
        answer: query.answer,
        answer_time: query.timestamp,
    }
}

/// Select exactly `round(rate * len)` queries uniformly without replacement
/// and return one mask flag per query.
pub fn mask_batch<R: Rng>(len: usize, rate: f64, rng: &mut R) -> Vec<bool> {
    let count = ((rate * len as f64).round() as usize).min(len);
    let mut flags = vec![false; len];
    if count > 0 {
        for i in rand::seq::index::sample(rng, len, count) {
            flags[i] = true;
        }
    }
    flags
}
