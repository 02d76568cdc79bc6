//! Context mixer: residual MLPs across branches (channel mix, per feature
//! column) and across features (patch mix, per branch row), each preceded by
//! its own row-wise layer norm, followed by masked average pooling into the
//! unified representation.
//!
//! Context matrices of many queries are processed stacked; the channel mix
//! realizes its per-column MLP by transposing each query's block, running
//! the shared row MLP, and transposing back, which is arithmetically the
//! per-column definition.

use crate::error::Result;
use crate::tensor::{Graph, Scalar, Var};

use super::BoundMixerUnit;

/// Residual mix across branches within each feature column:
/// `out[:, i] = m[:, i] + W_out . gelu(W_in . norm(m[:, i]))`.
///
/// The transposition precedes the norm, so each column is normalized
/// independently and the whole map is column-local. `m` stacks per-query
/// blocks of `branch_rows` rows.
pub fn channel_mix<T: Scalar>(
    g: &mut Graph<T>,
    m: Var,
    unit: &BoundMixerUnit,
    branch_rows: usize,
    ln_eps: f64,
) -> Result<Var> {
    let width = g.value(m).cols();
    // Per-block transpose turns columns into rows so the shared MLP batches
    // over (queries x features).
    let t = g.block_transpose(m, branch_rows)?;
    let normed = g.layer_norm(t, unit.channel_norm_gain, unit.channel_norm_bias, ln_eps)?;
    let h = g.matmul(normed, unit.channel_in)?;
    let h = g.gelu(h)?;
    let mixed_t = g.matmul(h, unit.channel_out)?;
    let mixed = g.block_transpose(mixed_t, width)?;
    g.add(m, mixed)
}

/// Residual mix across features within each branch row:
/// `out[j, :] = m[j, :] + gelu(norm(m)[j, :] . W_in) . W_out`.
pub fn patch_mix<T: Scalar>(
    g: &mut Graph<T>,
    m: Var,
    unit: &BoundMixerUnit,
    ln_eps: f64,
) -> Result<Var> {
    let normed = g.layer_norm(m, unit.patch_norm_gain, unit.patch_norm_bias, ln_eps)?;
    let h = g.matmul(normed, unit.patch_in)?;
    let h = g.gelu(h)?;
    let mixed = g.matmul(h, unit.patch_out)?;
    g.add(m, mixed)
}

/// One mixer unit: channel mix then patch mix.
pub fn mixer_unit<T: Scalar>(
    g: &mut Graph<T>,
    m: Var,
    unit: &BoundMixerUnit,
    branch_rows: usize,
    ln_eps: f64,
) -> Result<Var> {
    let mixed = channel_mix(g, m, unit, branch_rows, ln_eps)?;
    patch_mix(g, mixed, unit, ln_eps)
}

/// Pool a single unpadded context matrix into its unified representation:
/// the column-wise mean over all rows.
pub fn unify<T: Scalar>(g: &mut Graph<T>, m: Var) -> Result<Var> {
    g.mean_rows(m)
}

/// Pool stacked padded context matrices: weighted block sum with weight
/// `1/live_rows` on live rows and 0 on padding, one output row per query.
pub fn unify_masked<T: Scalar>(
    g: &mut Graph<T>,
    m: Var,
    branch_rows: usize,
    pool_weights: &[T],
) -> Result<Var> {
    g.block_pool_rows(m, branch_rows, pool_weights)
}
