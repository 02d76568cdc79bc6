//! Scoring heads and the combined training loss.
//!
//! Scores are dot products of the unified representation against rows of the
//! shared semantic table (weight tying); probabilities appear only inside
//! the cross-entropy and metrics.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Reduction, Scalar, Var};

use super::ModelDims;

/// `batch x entities` scores: `score[q][e] = u_q . E[e]`.
pub fn score_entities<T: Scalar>(
    g: &mut Graph<T>,
    unified: Var,
    semantic: Var,
    dims: &ModelDims,
) -> Result<Var> {
    let table = g.slice_rows(semantic, 0, dims.entities)?;
    let table_t = g.transpose(table)?;
    g.matmul(unified, table_t)
}

/// `batch x times` scores over the timestamp rows of the table.
pub fn score_timestamps<T: Scalar>(
    g: &mut Graph<T>,
    unified: Var,
    semantic: Var,
    dims: &ModelDims,
) -> Result<Var> {
    let table = g.slice_rows(semantic, dims.time_row(0), dims.times)?;
    let table_t = g.transpose(table)?;
    g.matmul(unified, table_t)
}

/// Loss terms of one batch. `total = link + weight * time`; both components
/// are sums over queries divided by the same batch denominator, so the time
/// term contributes only for masked queries.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub link: Var,
    pub time: Option<Var>,
    pub total: Var,
}

pub fn combined_loss<T: Scalar>(
    g: &mut Graph<T>,
    link_scores: Var,
    answers: &[usize],
    time_scores: Option<Var>,
    masked_times: &[usize],
    time_loss_weight: f64,
    loss_denominator: usize,
) -> Result<LossVars> {
    if time_loss_weight < 0.0 {
        return Err(Error::Config(format!(
            "time loss weight must be non-negative, got {time_loss_weight}"
        )));
    }
    let inv = 1.0 / loss_denominator as f64;
    let link_sum = g.cross_entropy(link_scores, answers, Reduction::Sum)?;
    let link = g.scale(link_sum, inv)?;

    let (time, total) = match time_scores {
        Some(scores) => {
            let time_sum = g.cross_entropy(scores, masked_times, Reduction::Sum)?;
            let time = g.scale(time_sum, inv)?;
            let weighted = g.scale(time, time_loss_weight)?;
            (Some(time), g.add(link, weighted)?)
        }
        None => (None, link),
    };

    Ok(LossVars { link, time, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dims(entities: usize, times: usize, d: usize) -> ModelDims {
        ModelDims {
            width: d,
            heads: 1,
            hidden: 4,
            encoder_units: 1,
            mixer_units: 1,
            max_neighbors: 2,
            entities,
            base_relations: 2,
            times,
            ln_eps: 1e-5,
        }
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(rows, cols, data).unwrap()
    }

    #[test]
    fn self_similarity_wins_on_orthonormal_table() {
        // Entity rows = identity basis, so u = E[e] scores 1 for e, 0 else.
        let d = 5;
        let dm = dims(5, 3, d);
        let mut semantic = Tensor::zeros(dm.table_rows(), d);
        for e in 0..5 {
            semantic.set(e, e, 1.0);
        }
        let mut g = Graph::new();
        let sv = g.constant(&semantic);
        let u = g.constant(&Tensor::row_vector(vec![0.0, 0.0, 1.0, 0.0, 0.0]));
        let scores = score_entities(&mut g, u, sv, &dm).unwrap();
        let row = g.value(scores).row(0);
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, 2);
    }

    #[test]
    fn zero_representation_gives_uniform_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let d = 4;
        let n_entities = 100;
        let dm = dims(n_entities, 10, d);
        let semantic = rand_tensor(&mut rng, dm.table_rows(), d);
        let mut g = Graph::new();
        let sv = g.constant(&semantic);
        let u = g.constant(&Tensor::zeros(1, d));
        let scores = score_entities(&mut g, u, sv, &dm).unwrap();
        assert!(g.value(scores).data().iter().all(|&s| s == 0.0));
        let loss = combined_loss(&mut g, scores, &[17], None, &[], 1.0, 1).unwrap();
        let v = g.value(loss.total).item().unwrap();
        assert!((v - (n_entities as f64).ln()).abs() <= 1e-9);
    }

    #[test]
    fn entity_scores_match_dot_product_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let d = 6;
        let dm = dims(13, 4, d);
        let semantic = rand_tensor(&mut rng, dm.table_rows(), d);
        let u = rand_tensor(&mut rng, 1, d);
        let mut g = Graph::new();
        let sv = g.constant(&semantic);
        let uv = g.constant(&u);
        let scores = score_entities(&mut g, uv, sv, &dm).unwrap();
        for e in 0..13 {
            let mut dot = 0.0;
            for c in 0..d {
                dot += u.get(0, c) * semantic.get(e, c);
            }
            assert!((g.value(scores).get(0, e) - dot).abs() <= 1e-10);
        }
    }

    #[test]
    fn timestamp_scores_match_dot_product_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let d = 6;
        let dm = dims(5, 13, d);
        let semantic = rand_tensor(&mut rng, dm.table_rows(), d);
        let u = rand_tensor(&mut rng, 1, d);
        let mut g = Graph::new();
        let sv = g.constant(&semantic);
        let uv = g.constant(&u);
        let scores = score_timestamps(&mut g, uv, sv, &dm).unwrap();
        assert_eq!(g.value(scores).shape(), (1, 13));
        for t in 0..13 {
            let mut dot = 0.0;
            for c in 0..d {
                dot += u.get(0, c) * semantic.get(dm.time_row(t), c);
            }
            assert!((g.value(scores).get(0, t) - dot).abs() <= 1e-10);
        }

        // Degenerate and self-similarity cases mirror the entity head.
        let zero = g.constant(&Tensor::zeros(1, d));
        let scores = score_timestamps(&mut g, zero, sv, &dm).unwrap();
        let loss = g
            .cross_entropy(scores, &[3], crate::tensor::Reduction::Mean)
            .unwrap();
        assert!((g.value(loss).item().unwrap() - 13f64.ln()).abs() <= 1e-9);
    }

    #[test]
    fn scores_are_linear_in_u() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let d = 5;
        let dm = dims(9, 3, d);
        let semantic = rand_tensor(&mut rng, dm.table_rows(), d);
        let u = rand_tensor(&mut rng, 1, d);
        let alpha = 2.75;
        let mut g = Graph::new();
        let sv = g.constant(&semantic);
        let uv = g.constant(&u);
        let su = score_entities(&mut g, uv, sv, &dm).unwrap();
        let scaled_u = g.scale(uv, alpha).unwrap();
        let s_scaled = score_entities(&mut g, scaled_u, sv, &dm).unwrap();
        for e in 0..9 {
            let a = alpha * g.value(su).get(0, e);
            let b = g.value(s_scaled).get(0, e);
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn lambda_zero_reduces_to_link_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let link = rand_tensor(&mut rng, 2, 7);
        let time = rand_tensor(&mut rng, 1, 5);
        let mut g = Graph::new();
        let lv = g.constant(&link);
        let tv = g.constant(&time);
        let loss = combined_loss(&mut g, lv, &[1, 4], Some(tv), &[2], 0.0, 2).unwrap();
        assert_eq!(
            g.value(loss.total).item().unwrap(),
            g.value(loss.link).item().unwrap()
        );
        assert!(loss.time.is_some());
    }

    #[test]
    fn uniform_scores_give_log_cardinalities() {
        let mut g: Graph<f64> = Graph::new();
        let link = g.constant(&Tensor::zeros(1, 100));
        let time = g.constant(&Tensor::zeros(1, 10));
        let loss = combined_loss(&mut g, link, &[3], Some(time), &[7], 1.0, 1).unwrap();
        let got = g.value(loss.total).item().unwrap();
        let want = 100f64.ln() + 10f64.ln();
        assert!((got - want).abs() <= 1e-9);
    }

    #[test]
    fn batch_of_four_matches_per_query_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let link = rand_tensor(&mut rng, 4, 9);
        let answers = [2usize, 0, 8, 5];
        // Two of the four queries are time-masked.
        let time = rand_tensor(&mut rng, 2, 6);
        let times = [1usize, 4];
        let lambda = 0.7;

        let mut g = Graph::new();
        let lv = g.constant(&link);
        let tv = g.constant(&time);
        let loss = combined_loss(&mut g, lv, &answers, Some(tv), &times, lambda, 4).unwrap();

        let ce = |row: &[f64], t: usize| -> f64 {
            let sum: f64 = row.iter().map(|v| v.exp()).sum();
            -(row[t].exp() / sum).ln()
        };
        let mut want = 0.0;
        for (i, &a) in answers.iter().enumerate() {
            want += ce(link.row(i), a);
        }
        for (i, &t) in times.iter().enumerate() {
            want += lambda * ce(time.row(i), t);
        }
        want /= 4.0;
        let got = g.value(loss.total).item().unwrap();
        assert!((got - want).abs() <= 1e-10, "{got} vs {want}");

        // Component bookkeeping: total = link + lambda * time.
        let l = g.value(loss.link).item().unwrap();
        let t = g.value(loss.time.unwrap()).item().unwrap();
        assert!((l + lambda * t - got).abs() <= 1e-12);
    }

    #[test]
    fn negative_lambda_is_rejected() {
        let mut g: Graph<f64> = Graph::new();
        let link = g.constant(&Tensor::zeros(1, 4));
        let err = combined_loss(&mut g, link, &[0], None, &[], -0.5, 1).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
