//! Branch encoder: each chain branch becomes a 4-token sequence
//! `[CLS, entity, predicate, timestamp]` and is encoded by a stack of
//! post-norm Transformer units; the CLS-position output is the branch
//! embedding.
//!
//! All branches share one set of encoder parameters. Batching stacks the
//! 4-row token blocks of many branches; attention never crosses the 4-token
//! block boundary.

use crate::ece::EventTriple;
use crate::error::Result;
use crate::tensor::{Graph, Scalar, Var};

use super::{BoundEncoderUnit, ModelDims};

/// Tokens per branch: CLS, entity, predicate, timestamp.
pub const BRANCH_TOKENS: usize = 4;

/// Semantic-table rows for one branch's tokens. A masked branch uses the
/// MASK row in the timestamp slot.
pub fn branch_token_rows(branch: &EventTriple, dims: &ModelDims) -> [usize; BRANCH_TOKENS] {
    [
        dims.cls_row(),
        dims.entity_row(branch.entity),
        dims.relation_row(branch.predicate),
        if branch.time_masked {
            dims.mask_row()
        } else {
            dims.time_row(branch.timestamp)
        },
    ]
}

/// Embed one branch as its `4 x d` input matrix: row `t` is
/// `semantic[token_t] + positional[t]`.
pub fn embed_branch<T: Scalar>(
    g: &mut Graph<T>,
    semantic: Var,
    positional: Var,
    branch: &EventTriple,
    dims: &ModelDims,
) -> Result<Var> {
    let tokens = g.gather_rows(semantic, &branch_token_rows(branch, dims))?;
    let pos = g.gather_rows(positional, &[0, 1, 2, 3])?;
    g.add(tokens, pos)
}

/// One post-norm encoder unit over stacked 4-row branch blocks:
/// `a = LN(MHA(x) + x); y = LN(FF(a) + a)` with multi-head scaled
/// dot-product attention and a GELU feed-forward.
pub fn encoder_unit<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    unit: &BoundEncoderUnit,
    heads: usize,
    ln_eps: f64,
) -> Result<Var> {
    let attn = multi_head_attention(g, x, unit, heads)?;
    let res1 = g.add(x, attn)?;
    let a = g.layer_norm(res1, unit.attn_norm_gain, unit.attn_norm_bias, ln_eps)?;

    let h = g.matmul(a, unit.ff_in)?;
    let h = g.gelu(h)?;
    let ff = g.matmul(h, unit.ff_out)?;
    let res2 = g.add(a, ff)?;
    g.layer_norm(res2, unit.ff_norm_gain, unit.ff_norm_bias, ln_eps)
}

/// Multi-head attention within each 4-token block, scale `1/sqrt(d/H)`.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    unit: &BoundEncoderUnit,
    heads: usize,
) -> Result<Var> {
    let d = g.value(x).cols();
    debug_assert_eq!(d % heads, 0);
    let head_width = d / heads;
    let scale = 1.0 / (head_width as f64).sqrt();

    let q = g.matmul(x, unit.attn_query)?;
    let k = g.matmul(x, unit.attn_key)?;
    let v = g.matmul(x, unit.attn_value)?;

    let mut outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * head_width, head_width)?;
        let kh = g.slice_cols(k, h * head_width, head_width)?;
        let vh = g.slice_cols(v, h * head_width, head_width)?;
        let scores = g.block_attn_scores(qh, kh, BRANCH_TOKENS, scale)?;
        let weights = g.softmax(scores)?;
        outputs.push(g.block_attn_combine(weights, vh, BRANCH_TOKENS)?);
    }
    let merged = g.concat_cols(&outputs)?;
    g.matmul(merged, unit.attn_out)
}

/// Apply the encoder stack and select the CLS-position output row of each
/// branch block, producing one `d`-wide embedding per branch.
pub fn encode_branches<T: Scalar>(
    g: &mut Graph<T>,
    embedded: Var,
    units: &[BoundEncoderUnit],
    heads: usize,
    ln_eps: f64,
) -> Result<Var> {
    let mut h = embedded;
    for unit in units {
        h = encoder_unit(g, h, unit, heads, ln_eps)?;
    }
    let branches = g.value(h).rows() / BRANCH_TOKENS;
    let cls_rows: Vec<usize> = (0..branches).map(|b| b * BRANCH_TOKENS).collect();
    g.gather_rows(h, &cls_rows)
}
