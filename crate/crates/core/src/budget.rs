//! Per-layer KV-cache budgets.
//!
//! The sparsity-aware allocator hands each layer a share of the global budget
//! `alpha * L` proportional to its density `1 - gamma`, then clips each share
//! to `[clip_lo, clip_hi]`. Clipping is not followed by renormalisation, so the
//! realised total can drift from the request; both are reported.
//!
//! The pyramid baseline is a linear stand-in for depth-decaying schedules:
//! layer 0 gets `alpha * (2 - decay_ratio)`, the last layer
//! `alpha * decay_ratio`, so the pre-clip mean stays `alpha`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetConfig {
    /// Global fraction of the prompt cache to keep, in (0, 1].
    pub alpha: f64,
    pub clip_lo: f64,
    pub clip_hi: f64,
    /// Stats window used when the trace has no post-vision segment.
    pub tau_fallback_window: usize,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            clip_lo: 0.01,
            clip_hi: 1.0,
            tau_fallback_window: 50,
        }
    }
}

impl BudgetConfig {
    pub fn with_alpha(alpha: f64) -> Self {
        Self {
            alpha,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if !(self.clip_lo > 0.0 && self.clip_lo < self.clip_hi && self.clip_hi <= 1.0) {
            return Err(Error::spec(
                "clip",
                format!("need 0 < clip_lo < clip_hi <= 1, got [{}, {}]", self.clip_lo, self.clip_hi),
            ));
        }
        if self.tau_fallback_window == 0 {
            return Err(Error::spec("tau_fallback_window", "must be positive"));
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(Error::spec("alpha", format!("{alpha} not in (0, 1]")))
    }
}

/// Tokens kept for a layer with fraction `beta` of an `m`-token prompt:
/// `ceil(beta * m)` clamped to `[1, m]`.
pub fn kept_count(beta: f64, prompt_len: usize) -> usize {
    // Absorb representation error such as 0.07 * 100 = 7.000000000000001.
    let raw = (beta * prompt_len as f64 - 1e-9).ceil();
    (raw.max(1.0) as usize).min(prompt_len)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocationMethod {
    SparsityAware,
    Uniform,
    Pyramid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetAllocation {
    pub method: AllocationMethod,
    pub alpha: f64,
    pub prompt_len: usize,
    /// Head-averaged sparsity the allocation was derived from, when any.
    pub gamma_mean: Option<Vec<f64>>,
    pub beta_preclip: Vec<f64>,
    pub beta: Vec<f64>,
    pub kept_counts: Vec<usize>,
}

/// One row of the allocation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationRow {
    pub layer: usize,
    pub gamma_mean: Option<f64>,
    pub beta_preclip: f64,
    pub beta: f64,
    pub kept_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationReport {
    pub method: AllocationMethod,
    pub alpha: f64,
    pub prompt_len: usize,
    /// `alpha * L`.
    pub requested_total: f64,
    /// Sum of post-clip `beta`.
    pub realized_total: f64,
    /// Kept tokens over `L * m`.
    pub realized_fraction: f64,
    pub layers: Vec<AllocationRow>,
}

impl BudgetAllocation {
    pub fn num_layers(&self) -> usize {
        self.beta.len()
    }

    pub fn requested_total(&self) -> f64 {
        self.alpha * self.num_layers() as f64
    }

    pub fn realized_total(&self) -> f64 {
        self.beta.iter().sum()
    }

    pub fn total_kept(&self) -> usize {
        self.kept_counts.iter().sum()
    }

    pub fn rows(&self) -> Vec<AllocationRow> {
        (0..self.num_layers())
            .map(|l| AllocationRow {
                layer: l,
                gamma_mean: self.gamma_mean.as_ref().map(|g| g[l]),
                beta_preclip: self.beta_preclip[l],
                beta: self.beta[l],
                kept_count: self.kept_counts[l],
            })
            .collect()
    }

    pub fn report(&self) -> AllocationReport {
        AllocationReport {
            method: self.method,
            alpha: self.alpha,
            prompt_len: self.prompt_len,
            requested_total: self.requested_total(),
            realized_total: self.realized_total(),
            realized_fraction: self.total_kept() as f64 / (self.num_layers() * self.prompt_len) as f64,
            layers: self.rows(),
        }
    }

    fn from_preclip(
        method: AllocationMethod,
        alpha: f64,
        prompt_len: usize,
        gamma_mean: Option<Vec<f64>>,
        beta_preclip: Vec<f64>,
        clip: (f64, f64),
    ) -> Self {
        let beta: Vec<f64> = beta_preclip.iter().map(|b| b.clamp(clip.0, clip.1)).collect();
        let kept_counts = beta.iter().map(|&b| kept_count(b, prompt_len)).collect();
        Self {
            method,
            alpha,
            prompt_len,
            gamma_mean,
            beta_preclip,
            beta,
            kept_counts,
        }
    }
}

fn check_layers_and_prompt(num_layers: usize, prompt_len: usize) -> Result<()> {
    if num_layers == 0 {
        return Err(Error::spec("num_layers", "must be positive"));
    }
    if prompt_len == 0 {
        return Err(Error::spec("prompt_len", "must be positive"));
    }
    Ok(())
}

/// Sparsity-aware allocation from head-averaged per-layer sparsity.
pub fn allocate_sparsity_aware(
    gamma_mean: &[f64],
    prompt_len: usize,
    config: &BudgetConfig,
) -> Result<BudgetAllocation> {
    config.validate()?;
    check_layers_and_prompt(gamma_mean.len(), prompt_len)?;
    if let Some(&bad) = gamma_mean.iter().find(|g| !(0.0..=1.0).contains(*g)) {
        return Err(Error::spec("gamma_mean", format!("{bad} not in [0, 1]")));
    }
    let num_layers = gamma_mean.len() as f64;
    let z: f64 = gamma_mean.iter().map(|g| 1.0 - g).sum();
    if z <= 0.0 {
        return Err(Error::DegenerateSparsity);
    }
    let beta_preclip = gamma_mean
        .iter()
        .map(|g| (1.0 - g) / z * config.alpha * num_layers)
        .collect();
    Ok(BudgetAllocation::from_preclip(
        AllocationMethod::SparsityAware,
        config.alpha,
        prompt_len,
        Some(gamma_mean.to_vec()),
        beta_preclip,
        (config.clip_lo, config.clip_hi),
    ))
}

/// Equal budget per layer.
pub fn allocate_uniform(num_layers: usize, prompt_len: usize, alpha: f64) -> Result<BudgetAllocation> {
    check_alpha(alpha)?;
    check_layers_and_prompt(num_layers, prompt_len)?;
    Ok(BudgetAllocation::from_preclip(
        AllocationMethod::Uniform,
        alpha,
        prompt_len,
        None,
        vec![alpha; num_layers],
        (f64::MIN_POSITIVE, 1.0),
    ))
}

/// Linearly decaying budget, largest at layer 0, clipped with the config's bounds.
pub fn allocate_pyramid(
    num_layers: usize,
    prompt_len: usize,
    decay_ratio: f64,
    config: &BudgetConfig,
) -> Result<BudgetAllocation> {
    config.validate()?;
    check_layers_and_prompt(num_layers, prompt_len)?;
    if !(decay_ratio > 0.0 && decay_ratio <= 1.0) {
        return Err(Error::spec("decay_ratio", format!("{decay_ratio} not in (0, 1]")));
    }
    let alpha = config.alpha;
    let top = alpha * (2.0 - decay_ratio);
    let bottom = alpha * decay_ratio;
    let beta_preclip = (0..num_layers)
        .map(|l| {
            if num_layers == 1 {
                alpha
            } else {
                top + (bottom - top) * l as f64 / (num_layers - 1) as f64
            }
        })
        .collect();
    Ok(BudgetAllocation::from_preclip(
        AllocationMethod::Pyramid,
        alpha,
        prompt_len,
        None,
        beta_preclip,
        (config.clip_lo, config.clip_hi),
    ))
}
