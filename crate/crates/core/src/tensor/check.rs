//! Central-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParameterGroup, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckSettings {
    /// Finite-difference step.
    pub delta: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Check at most this many coordinates per tensor (0 = all).
    pub max_coords_per_tensor: usize,
    /// Seed for coordinate subsampling.
    pub seed: u64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        Self {
            delta: 1e-5,
            tolerance: 1e-4,
            max_coords_per_tensor: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `name[index]` of the worst coordinate.
    pub worst: String,
    pub coords_checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

/// Compare analytic gradients against central differences of `value_fn`.
///
/// `value_fn` must be a pure function of `params`; it is re-evaluated twice
/// per checked coordinate with the coordinate nudged by `+/- delta`.
/// `analytic` holds one gradient tensor per trainable entry, same names and
/// shapes. Runs in 64-bit only; that is what makes the tolerance meaningful.
pub fn grad_check<F>(
    mut value_fn: F,
    analytic: &ParameterGroup<f64>,
    params: &mut ParameterGroup<f64>,
    settings: &GradCheckSettings,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParameterGroup<f64>) -> Result<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut max_rel_err = 0.0f64;
    let mut worst = String::from("(none)");
    let mut coords_checked = 0usize;

    let names: Vec<String> = params
        .entries()
        .iter()
        .filter(|e| e.trainable)
        .map(|e| e.name.clone())
        .collect();

    for name in &names {
        let grad: Tensor<f64> = analytic
            .get(name)
            .ok_or_else(|| Error::Config(format!("grad_check: no analytic gradient for {name:?}")))?
            .clone();
        let n = grad.len();
        let coords: Vec<usize> =
            if settings.max_coords_per_tensor == 0 || n <= settings.max_coords_per_tensor {
                (0..n).collect()
            } else {
                let mut picked = sample(&mut rng, n, settings.max_coords_per_tensor).into_vec();
                picked.sort_unstable();
                picked
            };

        for idx in coords {
            let original = params.get(name).unwrap().data()[idx];

            params.get_mut(name).unwrap().data_mut()[idx] = original + settings.delta;
            let plus = value_fn(params)?;
            params.get_mut(name).unwrap().data_mut()[idx] = original - settings.delta;
            let minus = value_fn(params)?;
            params.get_mut(name).unwrap().data_mut()[idx] = original;

            let numeric = (plus - minus) / (2.0 * settings.delta);
            let exact = grad.data()[idx];
            let denom = exact.abs().max(numeric.abs()).max(1e-6);
            let rel = (exact - numeric).abs() / denom;
            coords_checked += 1;
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = format!("{name}[{idx}] analytic={exact:.6e} numeric={numeric:.6e}");
            }
        }
    }

    Ok(GradCheckReport {
        max_rel_err,
        worst,
        coords_checked,
        tolerance: settings.tolerance,
    })
}
