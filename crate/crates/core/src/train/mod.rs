//! Training loop: Adamax with weight decay, linear warm-up/decay schedule,
//! per-epoch chain resampling, early stopping on validation MRR, and
//! checkpointing.

pub mod adamax;
pub mod checkpoint;

pub use adamax::{lr_schedule, Adamax, AdamaxConfig};
pub use checkpoint::{check_dataset_hash, file_sha256, Checkpoint};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{augment_reciprocal, Dataset, Granularity, Query};
use crate::ece::{build_ece, mask_batch, Ece, EceConfig, NeighborIndex};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, FilterSets, MetricSummary, Protocol, TiePolicy};
use crate::model::{forward_loss, BoundModel, ModelDims, ModelParams};
use crate::seed;
use crate::tensor::{Graph, ParameterGroup, Scalar};

/// Queries per training graph. Fixed (rather than derived from the thread
/// count) so gradient summation order, and therefore the loss trajectory,
/// does not depend on parallelism.
pub const TRAIN_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Single,
    Double,
}

/// All training knobs. Defaults follow the reference configuration:
/// `d=320, N=3, M=6, k=50`, hidden width 1024, batch 512, Adamax at lr 0.01
/// with weight decay 0.01, 300 epochs with 10% linear warm-up, full query
/// time masking, and unit time-loss weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Embedding width `d`.
    pub width: usize,
    pub heads: usize,
    /// Encoder units `N`.
    pub encoder_units: usize,
    /// Mixer units `M`.
    pub mixer_units: usize,
    /// Maximum neighbors per chain `k`.
    pub max_neighbors: usize,
    /// Hidden width of the feed-forward and mixer MLPs.
    pub hidden: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub decoupled_weight_decay: bool,
    pub max_epochs: usize,
    pub warmup_fraction: f64,
    /// Weight of the time-prediction loss term (lambda).
    pub time_loss_weight: f64,
    /// Fraction of queries per batch whose timestamp is masked (gamma).
    pub time_mask_rate: f64,
    pub seed: u64,
    /// Epochs without validation-MRR improvement before stopping.
    pub patience: usize,
    pub precision: Precision,
    /// Restrict chain neighbors to events at or before the query timestamp.
    /// Unset: enabled unless the dataset uses year granularity.
    pub history_only: Option<bool>,
    /// Drop every neighbor mentioning the answer entity instead of only the
    /// exact ground-truth event.
    pub strict_filtering: bool,
    pub ln_eps: f64,
    /// Protocol used for validation MRR and final evaluation.
    pub protocol: Protocol,
    pub tie_policy: TiePolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            width: 320,
            heads: 4,
            encoder_units: 3,
            mixer_units: 6,
            max_neighbors: 50,
            hidden: 1024,
            batch_size: 512,
            learning_rate: 0.01,
            weight_decay: 0.01,
            decoupled_weight_decay: true,
            max_epochs: 300,
            warmup_fraction: 0.10,
            time_loss_weight: 1.0,
            time_mask_rate: 1.0,
            seed: 42,
            patience: 20,
            precision: Precision::Single,
            history_only: None,
            strict_filtering: false,
            ln_eps: 1e-5,
            protocol: Protocol::Filtered,
            tie_policy: TiePolicy::Mean,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("width", self.width),
            ("heads", self.heads),
            ("encoder_units", self.encoder_units),
            ("mixer_units", self.mixer_units),
            ("hidden", self.hidden),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads ({}) must divide width ({})",
                self.heads, self.width
            )));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::Config(format!(
                "warmup_fraction must lie in (0, 1), got {}",
                self.warmup_fraction
            )));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.time_loss_weight < 0.0 {
            return Err(Error::Config("time_loss_weight must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.time_mask_rate) {
            return Err(Error::Config(format!(
                "time_mask_rate must lie in [0, 1], got {}",
                self.time_mask_rate
            )));
        }
        Ok(())
    }

    /// History restriction resolved against the dataset: timestamp-split
    /// timelines default to history-only, year-interval data does not.
    pub fn effective_history_only(&self, granularity: Granularity) -> bool {
        self.history_only
            .unwrap_or(!matches!(granularity, Granularity::Years(_)))
    }

    pub fn ece_config(&self, granularity: Granularity) -> EceConfig {
        EceConfig {
            max_neighbors: self.max_neighbors,
            history_only: self.effective_history_only(granularity),
            strict_filtering: self.strict_filtering,
        }
    }

    pub fn dims_for(&self, entities: usize, base_relations: usize, times: usize) -> ModelDims {
        ModelDims {
            width: self.width,
            heads: self.heads,
            hidden: self.hidden,
            encoder_units: self.encoder_units,
            mixer_units: self.mixer_units,
            max_neighbors: self.max_neighbors,
            entities,
            base_relations,
            times,
            ln_eps: self.ln_eps,
        }
    }

    pub fn adamax_config(&self) -> AdamaxConfig {
        AdamaxConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: self.weight_decay,
            decoupled: self.decoupled_weight_decay,
        }
    }

    /// Evaluation settings consistent with this training regime. A model
    /// trained fully masked has never seen a real timestamp token in the
    /// query slot, so its inference input keeps the timestamp masked;
    /// partially-masked or unmasked regimes evaluate with real timestamps.
    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            protocol: self.protocol,
            tie_policy: self.tie_policy,
            time_mask_rate: if self.time_mask_rate >= 1.0 { 1.0 } else { 0.0 },
            seed: self.seed,
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid: MetricSummary,
    pub lr: f64,
}

impl EpochLog {
    pub fn tsv_header() -> &'static str {
        "epoch\ttrain_loss\tvalid_mrr\tvalid_hits1\tvalid_hits3\tvalid_hits10\tlr"
    }

    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.8}",
            self.epoch,
            self.train_loss,
            self.valid.mrr,
            self.valid.hits1,
            self.valid.hits3,
            self.valid.hits10,
            self.lr
        )
    }
}

#[derive(Debug)]
pub struct FitOutcome {
    pub checkpoint: Checkpoint,
    pub epochs: Vec<EpochLog>,
    pub stopped_early: bool,
}

/// Train a model on the dataset's train split, evaluating validation MRR
/// each epoch and keeping the best checkpoint. `progress` is called once per
/// epoch.
pub fn fit(
    config: &TrainConfig,
    dataset: &Dataset,
    progress: &mut dyn FnMut(&EpochLog),
) -> Result<FitOutcome> {
    match config.precision {
        Precision::Single => fit_typed::<f32>(config, dataset, progress),
        Precision::Double => fit_typed::<f64>(config, dataset, progress),
    }
}

fn fit_typed<T: Scalar>(
    config: &TrainConfig,
    dataset: &Dataset,
    progress: &mut dyn FnMut(&EpochLog),
) -> Result<FitOutcome> {
    config.validate()?;
    if dataset.splits.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let vocabs = &dataset.vocabs;
    let dims = config.dims_for(
        vocabs.entity_count(),
        vocabs.relation_count(),
        vocabs.time_count(),
    );
    let granularity = dataset.splits.granularity;
    let ece_config = config.ece_config(granularity);

    let train_queries = augment_reciprocal(&dataset.splits.train, vocabs)?;
    let valid_queries = augment_reciprocal(&dataset.splits.valid, vocabs)?;
    let index = NeighborIndex::build(&dataset.splits.train, vocabs);
    let filters = FilterSets::build(&dataset.splits, vocabs)?;

    let mut params = ModelParams::<T>::init(dims, config.seed)?;
    let mut optimizer: Adamax<T> = Adamax::new(config.adamax_config());

    let steps_per_epoch = train_queries.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.max_epochs;
    let eval_config = config.eval_config();

    let mut order: Vec<usize> = (0..train_queries.len()).collect();
    let mut best: Option<(f64, usize, ModelParams<T>, Adamax<T>)> = None;
    let mut epochs_without_improvement = 0usize;
    let mut stopped_early = false;
    let mut global_step = 0usize;
    let mut epochs = Vec::new();

    for epoch in 0..config.max_epochs {
        let epoch_seed = seed::derive(config.seed, 10, epoch as u64);
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed::derive(epoch_seed, 0, 0));
        order.shuffle(&mut shuffle_rng);
        let mut mask_rng = ChaCha8Rng::seed_from_u64(seed::derive(epoch_seed, 1, 0));

        let mut epoch_loss_sum = 0.0f64;
        let mut last_lr = 0.0f64;
        for (batch_index, batch) in order.chunks(config.batch_size).enumerate() {
            let lr = lr_schedule(
                global_step,
                total_steps,
                config.learning_rate,
                config.warmup_fraction,
            );
            last_lr = lr;
            global_step += 1;

            let flags = mask_batch(batch.len(), config.time_mask_rate, &mut mask_rng);
            let batch_loss = run_batch(
                &mut params,
                &train_queries,
                batch,
                &flags,
                &index,
                &ece_config,
                config.time_loss_weight,
                epoch_seed,
                &mut optimizer,
                lr,
            )
            .map_err(|e| match e {
                // Overflow anywhere in the batch surfaces as a non-finite
                // op value; report it with the batch position.
                Error::NonFinite { .. } => Error::NonFiniteLoss { epoch, batch: batch_index },
                other => other,
            })?;
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: batch_index });
            }
            epoch_loss_sum += batch_loss * batch.len() as f64;
        }
        let train_loss = epoch_loss_sum / train_queries.len() as f64;

        let valid = if valid_queries.is_empty() {
            MetricSummary::default()
        } else {
            evaluate(
                &params,
                &valid_queries,
                &index,
                &ece_config,
                &filters,
                vocabs.relation_count(),
                &eval_config,
            )?
            .report
            .all
        };

        let log = EpochLog { epoch, train_loss, valid, lr: last_lr };
        progress(&log);
        epochs.push(log);

        let improved = match &best {
            Some((best_mrr, ..)) => valid.mrr > *best_mrr,
            None => true,
        };
        if improved {
            best = Some((valid.mrr, epoch, params.clone(), optimizer.clone()));
            epochs_without_improvement = 0;
        } else {
            epochs_without_improvement += 1;
            if !valid_queries.is_empty() && epochs_without_improvement >= config.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let (best_mrr, best_epoch, best_params, best_optimizer) =
        best.expect("at least one epoch ran");
    let checkpoint = Checkpoint::new(
        config,
        dims,
        &dataset.content_hash,
        &granularity.label(),
        ece_config.history_only,
        best_epoch,
        best_mrr,
        &best_params,
        &best_optimizer,
    );

    Ok(FitOutcome {
        checkpoint,
        epochs,
        stopped_early,
    })
}

/// Forward/backward over one batch in fixed-size chunks, then one optimizer
/// step. Returns the batch-mean loss. Chunks run in parallel; their losses
/// and gradients are reduced in chunk order so results are independent of
/// scheduling.
#[allow(clippy::too_many_arguments)]
fn run_batch<T: Scalar>(
    params: &mut ModelParams<T>,
    queries: &[Query],
    batch: &[usize],
    mask_flags: &[bool],
    index: &NeighborIndex,
    ece_config: &EceConfig,
    time_loss_weight: f64,
    epoch_seed: u64,
    optimizer: &mut Adamax<T>,
    lr: f64,
) -> Result<f64> {
    let denominator = batch.len();
    let params_view: &ModelParams<T> = params;
    let chunk_results: Vec<Result<(f64, ParameterGroup<T>)>> = batch
        .chunks(TRAIN_CHUNK)
        .enumerate()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(chunk_index, chunk)| {
            let eces: Vec<Ece> = chunk
                .iter()
                .enumerate()
                .map(|(i, &query_id)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(
                        epoch_seed,
                        2,
                        query_id as u64,
                    ));
                    build_ece(
                        &queries[query_id],
                        index,
                        ece_config,
                        mask_flags[chunk_index * TRAIN_CHUNK + i],
                        &mut rng,
                    )
                })
                .collect();

            let mut g: Graph<T> = Graph::new();
            let bound = BoundModel::bind(&mut g, params_view);
            let (_, loss) = forward_loss(&mut g, &bound, &eces, time_loss_weight, denominator)?;
            g.backward(loss.total)?;
            let loss_value = g.value(loss.total).item()?.to_f64();
            Ok((loss_value, bound.take_grads(&mut g)))
        })
        .collect();

    let mut total_loss = 0.0f64;
    let mut accumulated: Option<ParameterGroup<T>> = None;
    for result in chunk_results {
        let (loss, grads) = result?;
        total_loss += loss;
        match accumulated.as_mut() {
            Some(acc) => acc.add_assign(&grads),
            None => accumulated = Some(grads),
        }
    }
    let grads = accumulated.expect("non-empty batch");
    optimizer.step(params, &grads, lr)?;
    Ok(total_loss)
}
