//! Model parameters and the batched forward pass.
//!
//! One shared semantic table covers entities, base and reciprocal relations,
//! timestamps and the three special token roles (CLS, MASK, PAD). The same
//! table is reused as the output layer: link and time scores are dot
//! products of the unified representation against entity and timestamp rows.

pub mod encoder;
pub mod heads;
pub mod mixer;

use rand::distributions::Uniform;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ece::Ece;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParameterGroup, Scalar, Tensor, Var};

use encoder::BRANCH_TOKENS;

/// Structural hyperparameters plus vocabulary extents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Embedding and model width `d`.
    pub width: usize,
    /// Attention heads per encoder unit; must divide `width`.
    pub heads: usize,
    /// Hidden width of the encoder feed-forward and both mixer MLPs.
    pub hidden: usize,
    /// Number of stacked encoder units (`N`).
    pub encoder_units: usize,
    /// Number of stacked mixer units (`M`).
    pub mixer_units: usize,
    /// Maximum neighbor branches per chain (`k`).
    pub max_neighbors: usize,
    pub entities: usize,
    /// Base relation count; the embedding table holds `2 *` this many rows.
    pub base_relations: usize,
    pub times: usize,
    pub ln_eps: f64,
}

impl ModelDims {
    /// Rows of one context matrix: query branch plus `k` neighbor slots.
    pub fn branch_rows(&self) -> usize {
        1 + self.max_neighbors
    }

    pub fn entity_row(&self, e: usize) -> usize {
        debug_assert!(e < self.entities);
        e
    }

    /// Row of a possibly reciprocal predicate (`p < 2 * base_relations`).
    pub fn relation_row(&self, p: usize) -> usize {
        debug_assert!(p < 2 * self.base_relations);
        self.entities + p
    }

    pub fn time_row(&self, t: usize) -> usize {
        debug_assert!(t < self.times);
        self.entities + 2 * self.base_relations + t
    }

    pub fn cls_row(&self) -> usize {
        self.entities + 2 * self.base_relations + self.times
    }

    pub fn mask_row(&self) -> usize {
        self.cls_row() + 1
    }

    pub fn pad_row(&self) -> usize {
        self.cls_row() + 2
    }

    pub fn table_rows(&self) -> usize {
        self.entities + 2 * self.base_relations + self.times + 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads ({}) must divide width ({})",
                self.heads, self.width
            )));
        }
        if self.encoder_units == 0 {
            return Err(Error::Config("need at least one encoder unit".into()));
        }
        if self.mixer_units == 0 {
            return Err(Error::Config("need at least one mixer unit".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EncoderUnitParams<T> {
    pub attn_query: Tensor<T>,
    pub attn_key: Tensor<T>,
    pub attn_value: Tensor<T>,
    pub attn_out: Tensor<T>,
    pub attn_norm_gain: Tensor<T>,
    pub attn_norm_bias: Tensor<T>,
    pub ff_in: Tensor<T>,
    pub ff_out: Tensor<T>,
    pub ff_norm_gain: Tensor<T>,
    pub ff_norm_bias: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct MixerUnitParams<T> {
    /// `1 x (1+k)`: norm over one column of the context matrix.
    pub channel_norm_gain: Tensor<T>,
    pub channel_norm_bias: Tensor<T>,
    /// `(1+k) x hidden`: mixes across branches within one feature column.
    pub channel_in: Tensor<T>,
    pub channel_out: Tensor<T>,
    /// `1 x d`: norm over one branch row.
    pub patch_norm_gain: Tensor<T>,
    pub patch_norm_bias: Tensor<T>,
    /// `d x hidden`: mixes across features within one branch row.
    pub patch_in: Tensor<T>,
    pub patch_out: Tensor<T>,
}

/// All trainable state of the model.
#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    pub dims: ModelDims,
    /// Shared semantic embedding table, `table_rows x d`.
    pub semantic: Tensor<T>,
    /// Positional embeddings for the four branch tokens, `4 x d`.
    pub positional: Tensor<T>,
    pub encoder: Vec<EncoderUnitParams<T>>,
    pub mixer: Vec<MixerUnitParams<T>>,
}

/// How a parameter behaves under weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Embedding,
    Weight,
    /// Layer-norm gains and biases; excluded from weight decay.
    Norm,
}

impl<T: Scalar> ModelParams<T> {
    /// Fresh parameters: affine weights `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`,
    /// embeddings `N(0, 0.02)`, norm gains 1 and biases 0.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f64, 0.02).expect("valid stddev");
        let d = dims.width;
        let h = dims.hidden;
        let rows = dims.branch_rows();

        let mut embedding = |r: usize, c: usize| -> Tensor<T> {
            let data = (0..r * c)
                .map(|_| T::from_f64(normal.sample(&mut rng)))
                .collect();
            Tensor::new(r, c, data).expect("sized data")
        };
        let semantic = embedding(dims.table_rows(), d);
        let positional = embedding(BRANCH_TOKENS, d);

        let mut weight = |fan_in: usize, fan_out: usize| -> Tensor<T> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            let data = (0..fan_in * fan_out)
                .map(|_| T::from_f64(rng.sample(dist)))
                .collect();
            Tensor::new(fan_in, fan_out, data).expect("sized data")
        };

        let encoder = (0..dims.encoder_units)
            .map(|_| EncoderUnitParams {
                attn_query: weight(d, d),
                attn_key: weight(d, d),
                attn_value: weight(d, d),
                attn_out: weight(d, d),
                attn_norm_gain: Tensor::filled(1, d, T::one()),
                attn_norm_bias: Tensor::zeros(1, d),
                ff_in: weight(d, h),
                ff_out: weight(h, d),
                ff_norm_gain: Tensor::filled(1, d, T::one()),
                ff_norm_bias: Tensor::zeros(1, d),
            })
            .collect();

        let mixer = (0..dims.mixer_units)
            .map(|_| MixerUnitParams {
                channel_norm_gain: Tensor::filled(1, rows, T::one()),
                channel_norm_bias: Tensor::zeros(1, rows),
                channel_in: weight(rows, h),
                channel_out: weight(h, rows),
                patch_norm_gain: Tensor::filled(1, d, T::one()),
                patch_norm_bias: Tensor::zeros(1, d),
                patch_in: weight(d, h),
                patch_out: weight(h, d),
            })
            .collect();

        Ok(Self {
            dims,
            semantic,
            positional,
            encoder,
            mixer,
        })
    }

    /// Walk every parameter in a fixed order.
    pub fn visit(&self, mut f: impl FnMut(String, &Tensor<T>, ParamKind)) {
        f("semantic".into(), &self.semantic, ParamKind::Embedding);
        f("positional".into(), &self.positional, ParamKind::Embedding);
        for (i, u) in self.encoder.iter().enumerate() {
            let p = |s: &str| format!("encoder.{i}.{s}");
            f(p("attn_query"), &u.attn_query, ParamKind::Weight);
            f(p("attn_key"), &u.attn_key, ParamKind::Weight);
            f(p("attn_value"), &u.attn_value, ParamKind::Weight);
            f(p("attn_out"), &u.attn_out, ParamKind::Weight);
            f(p("attn_norm_gain"), &u.attn_norm_gain, ParamKind::Norm);
            f(p("attn_norm_bias"), &u.attn_norm_bias, ParamKind::Norm);
            f(p("ff_in"), &u.ff_in, ParamKind::Weight);
            f(p("ff_out"), &u.ff_out, ParamKind::Weight);
            f(p("ff_norm_gain"), &u.ff_norm_gain, ParamKind::Norm);
            f(p("ff_norm_bias"), &u.ff_norm_bias, ParamKind::Norm);
        }
        for (i, u) in self.mixer.iter().enumerate() {
            let p = |s: &str| format!("mixer.{i}.{s}");
            f(p("channel_norm_gain"), &u.channel_norm_gain, ParamKind::Norm);
            f(p("channel_norm_bias"), &u.channel_norm_bias, ParamKind::Norm);
            f(p("channel_in"), &u.channel_in, ParamKind::Weight);
            f(p("channel_out"), &u.channel_out, ParamKind::Weight);
            f(p("patch_norm_gain"), &u.patch_norm_gain, ParamKind::Norm);
            f(p("patch_norm_bias"), &u.patch_norm_bias, ParamKind::Norm);
            f(p("patch_in"), &u.patch_in, ParamKind::Weight);
            f(p("patch_out"), &u.patch_out, ParamKind::Weight);
        }
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<T>, ParamKind)) {
        f("semantic", &mut self.semantic, ParamKind::Embedding);
        f("positional", &mut self.positional, ParamKind::Embedding);
        for (i, u) in self.encoder.iter_mut().enumerate() {
            f(&format!("encoder.{i}.attn_query"), &mut u.attn_query, ParamKind::Weight);
            f(&format!("encoder.{i}.attn_key"), &mut u.attn_key, ParamKind::Weight);
            f(&format!("encoder.{i}.attn_value"), &mut u.attn_value, ParamKind::Weight);
            f(&format!("encoder.{i}.attn_out"), &mut u.attn_out, ParamKind::Weight);
            f(&format!("encoder.{i}.attn_norm_gain"), &mut u.attn_norm_gain, ParamKind::Norm);
            f(&format!("encoder.{i}.attn_norm_bias"), &mut u.attn_norm_bias, ParamKind::Norm);
            f(&format!("encoder.{i}.ff_in"), &mut u.ff_in, ParamKind::Weight);
            f(&format!("encoder.{i}.ff_out"), &mut u.ff_out, ParamKind::Weight);
            f(&format!("encoder.{i}.ff_norm_gain"), &mut u.ff_norm_gain, ParamKind::Norm);
            f(&format!("encoder.{i}.ff_norm_bias"), &mut u.ff_norm_bias, ParamKind::Norm);
        }
        for (i, u) in self.mixer.iter_mut().enumerate() {
            f(&format!("mixer.{i}.channel_norm_gain"), &mut u.channel_norm_gain, ParamKind::Norm);
            f(&format!("mixer.{i}.channel_norm_bias"), &mut u.channel_norm_bias, ParamKind::Norm);
            f(&format!("mixer.{i}.channel_in"), &mut u.channel_in, ParamKind::Weight);
            f(&format!("mixer.{i}.channel_out"), &mut u.channel_out, ParamKind::Weight);
            f(&format!("mixer.{i}.patch_norm_gain"), &mut u.patch_norm_gain, ParamKind::Norm);
            f(&format!("mixer.{i}.patch_norm_bias"), &mut u.patch_norm_bias, ParamKind::Norm);
            f(&format!("mixer.{i}.patch_in"), &mut u.patch_in, ParamKind::Weight);
            f(&format!("mixer.{i}.patch_out"), &mut u.patch_out, ParamKind::Weight);
        }
    }

    pub fn to_group(&self) -> ParameterGroup<T> {
        let mut group = ParameterGroup::new();
        self.visit(|name, tensor, _| group.push(name, tensor.clone(), true));
        group
    }

    /// Rebuild structured parameters from a named group (checkpoint load,
    /// gradient checking). Every parameter must be present with its shape.
    pub fn from_group(dims: ModelDims, group: &ParameterGroup<T>) -> Result<Self> {
        let mut template = Self::init(dims, 0)?;
        let mut missing = Vec::new();
        template.visit_mut(|name, tensor, _| match group.get(name) {
            Some(t) if t.shape() == tensor.shape() => *tensor = t.clone(),
            Some(t) => missing.push(format!(
                "{name}: shape {} != {}",
                t.shape_string(),
                tensor.shape_string()
            )),
            None => missing.push(format!("{name}: missing")),
        });
        if missing.is_empty() {
            Ok(template)
        } else {
            Err(Error::Checkpoint(format!(
                "parameter group does not match model: {}",
                missing.join("; ")
            )))
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            dims: self.dims,
            semantic: self.semantic.cast(),
            positional: self.positional.cast(),
            encoder: self
                .encoder
                .iter()
                .map(|u| EncoderUnitParams {
                    attn_query: u.attn_query.cast(),
                    attn_key: u.attn_key.cast(),
                    attn_value: u.attn_value.cast(),
                    attn_out: u.attn_out.cast(),
                    attn_norm_gain: u.attn_norm_gain.cast(),
                    attn_norm_bias: u.attn_norm_bias.cast(),
                    ff_in: u.ff_in.cast(),
                    ff_out: u.ff_out.cast(),
                    ff_norm_gain: u.ff_norm_gain.cast(),
                    ff_norm_bias: u.ff_norm_bias.cast(),
                })
                .collect(),
            mixer: self
                .mixer
                .iter()
                .map(|u| MixerUnitParams {
                    channel_norm_gain: u.channel_norm_gain.cast(),
                    channel_norm_bias: u.channel_norm_bias.cast(),
                    channel_in: u.channel_in.cast(),
                    channel_out: u.channel_out.cast(),
                    patch_norm_gain: u.patch_norm_gain.cast(),
                    patch_norm_bias: u.patch_norm_bias.cast(),
                    patch_in: u.patch_in.cast(),
                    patch_out: u.patch_out.cast(),
                })
                .collect(),
        }
    }
}

// ----------------------------------------------------------------------
// Graph binding
// ----------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BoundEncoderUnit {
    pub attn_query: Var,
    pub attn_key: Var,
    pub attn_value: Var,
    pub attn_out: Var,
    pub attn_norm_gain: Var,
    pub attn_norm_bias: Var,
    pub ff_in: Var,
    pub ff_out: Var,
    pub ff_norm_gain: Var,
    pub ff_norm_bias: Var,
}

#[derive(Debug, Clone)]
pub struct BoundMixerUnit {
    pub channel_norm_gain: Var,
    pub channel_norm_bias: Var,
    pub channel_in: Var,
    pub channel_out: Var,
    pub patch_norm_gain: Var,
    pub patch_norm_bias: Var,
    pub patch_in: Var,
    pub patch_out: Var,
}

/// Leaf vars for every parameter of one graph, in `visit` order.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub dims: ModelDims,
    pub semantic: Var,
    pub positional: Var,
    pub encoder: Vec<BoundEncoderUnit>,
    pub mixer: Vec<BoundMixerUnit>,
    named: Vec<(String, Var)>,
}

impl BoundModel {
    /// Bind every parameter as a trainable leaf on `g`.
    pub fn bind<T: Scalar>(g: &mut Graph<T>, params: &ModelParams<T>) -> Self {
        let mut named = Vec::new();
        let mut leaf = |g: &mut Graph<T>, name: String, t: &Tensor<T>| -> Var {
            let v = g.leaf(t);
            named.push((name, v));
            v
        };

        let semantic = leaf(g, "semantic".into(), &params.semantic);
        let positional = leaf(g, "positional".into(), &params.positional);
        let encoder = params
            .encoder
            .iter()
            .enumerate()
            .map(|(i, u)| BoundEncoderUnit {
                attn_query: leaf(g, format!("encoder.{i}.attn_query"), &u.attn_query),
                attn_key: leaf(g, format!("encoder.{i}.attn_key"), &u.attn_key),
                attn_value: leaf(g, format!("encoder.{i}.attn_value"), &u.attn_value),
                attn_out: leaf(g, format!("encoder.{i}.attn_out"), &u.attn_out),
                attn_norm_gain: leaf(g, format!("encoder.{i}.attn_norm_gain"), &u.attn_norm_gain),
                attn_norm_bias: leaf(g, format!("encoder.{i}.attn_norm_bias"), &u.attn_norm_bias),
                ff_in: leaf(g, format!("encoder.{i}.ff_in"), &u.ff_in),
                ff_out: leaf(g, format!("encoder.{i}.ff_out"), &u.ff_out),
                ff_norm_gain: leaf(g, format!("encoder.{i}.ff_norm_gain"), &u.ff_norm_gain),
                ff_norm_bias: leaf(g, format!("encoder.{i}.ff_norm_bias"), &u.ff_norm_bias),
            })
            .collect();
        let mixer = params
            .mixer
            .iter()
            .enumerate()
            .map(|(i, u)| BoundMixerUnit {
                channel_norm_gain: leaf(g, format!("mixer.{i}.channel_norm_gain"), &u.channel_norm_gain),
                channel_norm_bias: leaf(g, format!("mixer.{i}.channel_norm_bias"), &u.channel_norm_bias),
                channel_in: leaf(g, format!("mixer.{i}.channel_in"), &u.channel_in),
                channel_out: leaf(g, format!("mixer.{i}.channel_out"), &u.channel_out),
                patch_norm_gain: leaf(g, format!("mixer.{i}.patch_norm_gain"), &u.patch_norm_gain),
                patch_norm_bias: leaf(g, format!("mixer.{i}.patch_norm_bias"), &u.patch_norm_bias),
                patch_in: leaf(g, format!("mixer.{i}.patch_in"), &u.patch_in),
                patch_out: leaf(g, format!("mixer.{i}.patch_out"), &u.patch_out),
            })
            .collect();

        Self {
            dims: params.dims,
            semantic,
            positional,
            encoder,
            mixer,
            named,
        }
    }

    /// Move accumulated gradients out of the graph, in `visit` order.
    pub fn take_grads<T: Scalar>(&self, g: &mut Graph<T>) -> ParameterGroup<T> {
        let mut group = ParameterGroup::new();
        for (name, var) in &self.named {
            let grad = g
                .take_grad(*var)
                .unwrap_or_else(|| {
                    let v = g.value(*var);
                    Tensor::zeros(v.rows(), v.cols())
                });
            group.push(name.clone(), grad, true);
        }
        group
    }
}

// ----------------------------------------------------------------------
// Batch assembly
// ----------------------------------------------------------------------

/// Precomputed index plans for one batch of chains.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    /// Semantic-table rows for all branch tokens, `4 *` total branches.
    pub token_rows: Vec<usize>,
    /// Positional-table rows, same length.
    pub pos_rows: Vec<usize>,
    /// Rows into `[branch embeddings; pad row]` forming the padded context
    /// matrices, `batch * (1+k)` entries.
    pub context_rows: Vec<usize>,
    /// Pooling weights per context row: `1/branches` on live rows, 0 on pads.
    pub pool_weights: Vec<f64>,
    /// Link answers per query.
    pub answers: Vec<usize>,
    /// Indices of queries whose timestamp is masked.
    pub masked_queries: Vec<usize>,
    /// Time targets for the masked queries.
    pub masked_times: Vec<usize>,
    pub total_branches: usize,
}

impl BatchPlan {
    pub fn build(eces: &[Ece], dims: &ModelDims) -> Self {
        let rows = dims.branch_rows();
        let mut token_rows = Vec::with_capacity(4 * eces.len() * 2);
        let mut pos_rows = Vec::new();
        let mut context_rows = Vec::with_capacity(eces.len() * rows);
        let mut pool_weights = Vec::with_capacity(eces.len() * rows);
        let mut answers = Vec::with_capacity(eces.len());
        let mut masked_queries = Vec::new();
        let mut masked_times = Vec::new();

        let mut total_branches = 0usize;
        for ece in eces {
            total_branches += ece.branch_count();
        }
        // The pad branch embedding sits one past the last real branch.
        let pad_index = total_branches;

        let mut offset = 0usize;
        for (qi, ece) in eces.iter().enumerate() {
            let count = ece.branch_count();
            for branch in std::iter::once(&ece.query).chain(ece.neighbors.iter()) {
                token_rows.extend_from_slice(&encoder::branch_token_rows(branch, dims));
                pos_rows.extend_from_slice(&[0, 1, 2, 3]);
            }
            let live_weight = 1.0 / count as f64;
            for b in 0..rows {
                if b < count {
                    context_rows.push(offset + b);
                    pool_weights.push(live_weight);
                } else {
                    context_rows.push(pad_index);
                    pool_weights.push(0.0);
                }
            }
            answers.push(ece.answer);
            if ece.query.time_masked {
                masked_queries.push(qi);
                masked_times.push(ece.answer_time);
            }
            offset += count;
        }

        Self {
            token_rows,
            pos_rows,
            context_rows,
            pool_weights,
            answers,
            masked_queries,
            masked_times,
            total_branches,
        }
    }
}

/// Scores produced by one forward pass.
pub struct ForwardScores {
    /// `batch x entities` link scores.
    pub link: Var,
    /// `masked x times` time scores, present when any query is masked.
    pub time: Option<Var>,
    /// Pooled unified representations, `batch x d`.
    pub unified: Var,
    pub plan: BatchPlan,
}

/// Run the full encoder + mixer pipeline over a batch of chains.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    bound: &BoundModel,
    eces: &[Ece],
) -> Result<ForwardScores> {
    let dims = &bound.dims;
    let plan = BatchPlan::build(eces, dims);

    // Token embeddings for every branch, 4 rows per branch.
    let tokens = g.gather_rows(bound.semantic, &plan.token_rows)?;
    let pos = g.gather_rows(bound.positional, &plan.pos_rows)?;
    let embedded = g.add(tokens, pos)?;

    // Branch embeddings via the encoder stack (CLS row per branch).
    let branch_embeddings = encoder::encode_branches(
        g,
        embedded,
        &bound.encoder,
        dims.heads,
        dims.ln_eps,
    )?;

    // Padded context matrices, all queries stacked.
    let pad = g.slice_rows(bound.semantic, dims.pad_row(), 1)?;
    let with_pad = g.concat_rows(&[branch_embeddings, pad])?;
    let mut context = g.gather_rows(with_pad, &plan.context_rows)?;

    let rows = dims.branch_rows();
    for unit in &bound.mixer {
        context = mixer::mixer_unit(g, context, unit, rows, dims.ln_eps)?;
    }

    let weights: Vec<T> = plan.pool_weights.iter().map(|&w| T::from_f64(w)).collect();
    let unified = g.block_pool_rows(context, rows, &weights)?;

    let link = heads::score_entities(g, unified, bound.semantic, dims)?;
    let time = if plan.masked_queries.is_empty() {
        None
    } else {
        let masked = g.gather_rows(unified, &plan.masked_queries)?;
        Some(heads::score_timestamps(g, masked, bound.semantic, dims)?)
    };

    Ok(ForwardScores {
        link,
        time,
        unified,
        plan,
    })
}

/// Forward plus the combined training loss, normalized by `loss_denominator`
/// (the full batch size, which may exceed `eces.len()` when the batch is
/// processed in chunks).
pub fn forward_loss<T: Scalar>(
    g: &mut Graph<T>,
    bound: &BoundModel,
    eces: &[Ece],
    time_loss_weight: f64,
    loss_denominator: usize,
) -> Result<(ForwardScores, heads::LossVars)> {
    let scores = forward(g, bound, eces)?;
    let loss = heads::combined_loss(
        g,
        scores.link,
        &scores.plan.answers,
        scores.time,
        &scores.plan.masked_times,
        time_loss_weight,
        loss_denominator,
    )?;
    Ok((scores, loss))
}
