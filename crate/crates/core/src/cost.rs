//! Multiply-add accounting for standard and content-aware convolutions.
//!
//! For a stride-1 same-padded layer with `n × n` output, `k × k` kernel and
//! `c_in → c_out` channels, the dense cost is `Ω = c_in·c_out·k²·n²`. A CAC
//! layer with sharp fraction `ρ` costs
//!
//! ```text
//! Ω_CAC = (ρ + (1 − ρ)/k² + 13/(k²·c_in·c_out)) · Ω
//! ```
//!
//! where the last term is the score map: four length-3 Sobel passes on the
//! channel-averaged map (12) plus the affine gate (1). CAC is cheaper than the
//! dense layer exactly when `ρ ≤ ρ̄ = 1 − 13/((k² − 1)·c_in·c_out)`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{CacError, Result};

/// Score-map overhead constant: 4 separable passes × 3 taps + 1 affine.
pub const SCORE_MAP_OPS: f64 = 13.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCostSpec {
    pub layer_id: String,
    pub n: u64,
    pub k: u64,
    pub c_in: u64,
    pub c_out: u64,
    /// Whether the layer runs as CAC (and so carries a ρ and the score-map term).
    pub cac: bool,
}

impl LayerCostSpec {
    pub fn new(layer_id: impl Into<String>, n: u64, k: u64, c_in: u64, c_out: u64, cac: bool) -> Result<Self> {
        let spec = LayerCostSpec {
            layer_id: layer_id.into(),
            n,
            k,
            c_in,
            c_out,
            cac,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.k == 0 || self.c_in == 0 || self.c_out == 0 {
            return Err(CacError::invalid(format!(
                "layer {}: n, k, c_in, c_out must all be positive",
                self.layer_id
            )));
        }
        if self.cac && (self.k < 3 || self.k.is_multiple_of(2)) {
            return Err(CacError::invalid(format!(
                "layer {}: CAC layers need odd k >= 3, got {}",
                self.layer_id, self.k
            )));
        }
        Ok(())
    }
}

/// `Ω_Conv = c_in · c_out · k · k · n · n`, exactly.
pub fn madds_standard(spec: &LayerCostSpec) -> Result<u64> {
    spec.validate()?;
    [spec.c_out, spec.k, spec.k, spec.n, spec.n]
        .iter()
        .try_fold(spec.c_in, |acc, &f| acc.checked_mul(f))
        .ok_or_else(|| CacError::invalid(format!("layer {}: MAdds overflow u64", spec.layer_id)))
}

/// The three terms of `Ω_CAC`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CacCost {
    pub sharp: f64,
    pub smooth: f64,
    pub score_map: f64,
}

impl CacCost {
    pub fn total(&self) -> f64 {
        self.sharp + self.smooth + self.score_map
    }

    /// The two convolution branches without the score map.
    pub fn conv_branches(&self) -> f64 {
        self.sharp + self.smooth
    }
}

pub fn madds_cac(spec: &LayerCostSpec, rho: f64) -> Result<CacCost> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(CacError::invalid(format!("rho must lie in [0, 1], got {rho}")));
    }
    let omega = madds_standard(spec)? as f64;
    let k2 = (spec.k * spec.k) as f64;
    let cc = (spec.c_in * spec.c_out) as f64;
    Ok(CacCost {
        sharp: rho * omega,
        smooth: (1.0 - rho) * omega / k2,
        score_map: SCORE_MAP_OPS * omega / (k2 * cc),
    })
}

/// Break-even sharp fraction `ρ̄ = 1 − 13/((k² − 1)·c_in·c_out)`.
pub fn rho_upper_bound(spec: &LayerCostSpec) -> Result<f64> {
    if spec.k < 2 {
        return Err(CacError::invalid(format!(
            "layer {}: break-even ratio undefined for k = {}",
            spec.layer_id, spec.k
        )));
    }
    let k2m1 = (spec.k * spec.k - 1) as f64;
    Ok(1.0 - SCORE_MAP_OPS / (k2m1 * (spec.c_in * spec.c_out) as f64))
}

/// Mean and spread of the measured sharp fraction of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhoStats {
    pub mean: f64,
    pub std: f64,
}

impl From<f64> for RhoStats {
    fn from(mean: f64) -> Self {
        RhoStats { mean, std: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCostRow {
    pub layer_id: String,
    pub rho_mean: f64,
    pub rho_std: f64,
    pub omega_conv: f64,
    pub omega_cac: f64,
    /// `None` for layers that are not CAC.
    pub rho_bar: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostTotals {
    pub c_model: f64,
    pub c_baseline: f64,
    pub ratio: f64,
    pub reduction_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub layers: Vec<LayerCostRow>,
    pub totals: CostTotals,
}

pub const COST_CSV_HEADER: &str = "layer_id,rho_mean,rho_std,omega_conv,omega_cac,rho_bar";

impl CostReport {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{COST_CSV_HEADER}")?;
        for r in &self.layers {
            let rho_bar = r.rho_bar.map(|v| v.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.layer_id, r.rho_mean, r.rho_std, r.omega_conv, r.omega_cac, rho_bar
            )?;
        }
        Ok(())
    }

    pub fn totals_json(&self) -> serde_json::Value {
        serde_json::json!({ "totals": self.totals })
    }
}

/// Per-layer and total cost of a model whose CAC layers realise `rhos`.
/// Entries of `rhos` for non-CAC layers are ignored (treated as ρ = 1 with no score map).
pub fn model_cost<R: Into<RhoStats> + Copy>(specs: &[LayerCostSpec], rhos: &[R]) -> Result<CostReport> {
    if specs.len() != rhos.len() {
        return Err(CacError::invalid(format!(
            "model_cost: {} layer specs but {} ratios",
            specs.len(),
            rhos.len()
        )));
    }
    let mut layers = Vec::with_capacity(specs.len());
    for (spec, &rho) in specs.iter().zip(rhos) {
        let omega = madds_standard(spec)? as f64;
        let row = if spec.cac {
            let stats: RhoStats = rho.into();
            LayerCostRow {
                layer_id: spec.layer_id.clone(),
                rho_mean: stats.mean,
                rho_std: stats.std,
                omega_conv: omega,
                omega_cac: madds_cac(spec, stats.mean)?.total(),
                rho_bar: Some(rho_upper_bound(spec)?),
            }
        } else {
            LayerCostRow {
                layer_id: spec.layer_id.clone(),
                rho_mean: 1.0,
                rho_std: 0.0,
                omega_conv: omega,
                omega_cac: omega,
                rho_bar: None,
            }
        };
        layers.push(row);
    }
    let c_model: f64 = layers.iter().map(|r| r.omega_cac).sum();
    let c_baseline: f64 = layers.iter().map(|r| r.omega_conv).sum();
    let ratio = c_model / c_baseline;
    Ok(CostReport {
        layers,
        totals: CostTotals {
            c_model,
            c_baseline,
            ratio,
            reduction_percent: (1.0 - ratio) * 100.0,
        },
    })
}

/// Cost ratio `c(M)/c(M^b)` as a function of per-layer ρ (one entry per spec),
/// with its gradient `∂ratio/∂ρ_l` (zero for non-CAC layers).
pub fn cost_ratio_with_grad(specs: &[LayerCostSpec], rhos: &[f64]) -> Result<(f64, Vec<f64>)> {
    let report = model_cost(specs, rhos)?;
    let base = report.totals.c_baseline;
    let grad = specs
        .iter()
        .map(|s| {
            if s.cac {
                let k2 = (s.k * s.k) as f64;
                // ∂Ω_CAC/∂ρ = Ω (1 − 1/k²)
                madds_standard(s).map(|o| o as f64 * (1.0 - 1.0 / k2) / base)
            } else {
                Ok(0.0)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((report.totals.ratio, grad))
}

/// `(ratio^λ, λ·ratio^(λ−1))`.
pub fn cost_penalty(ratio: f64, lambda: f64) -> Result<(f64, f64)> {
    if !(ratio > 0.0) || !ratio.is_finite() {
        return Err(CacError::invalid(format!("cost ratio must be positive, got {ratio}")));
    }
    if !(lambda >= 0.0) {
        return Err(CacError::invalid(format!("lambda must be >= 0, got {lambda}")));
    }
    if lambda == 0.0 {
        return Ok((1.0, 0.0));
    }
    Ok((ratio.powf(lambda), lambda * ratio.powf(lambda - 1.0)))
}
