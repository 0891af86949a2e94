//! Analytic step-time model for layer-to-layer execution.
//!
//! Units: layer size `L` in MB, bandwidth `B` in GB/s, per-layer forward work
//! `c` in giga-operations, compute rate `F` in TFLOP/s. Then `X = L/B` and
//! `C = c/F` are both in milliseconds. The backward phase is taken to cost
//! one recompute plus a backward pass twice as long as the forward, so each
//! layer costs `4C` of compute per microbatch and two weight fetches.

use std::fmt;

use crate::error::{Error, Result};
use crate::layers::ModelSpec;
use crate::tensor::Precision;

/// Forward + recompute + backward, in units of one forward pass.
pub const COMPUTE_PASSES: f64 = 4.0;
/// Weight fetches per layer per minibatch (forward and backward).
pub const WEIGHT_FETCHES: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostParams {
    pub n_layers: u64,
    /// Layer size in MB.
    pub layer_mb: f64,
    /// Host-to-device bandwidth in GB/s.
    pub bandwidth_gbps: f64,
    /// Giga-operations for one layer's forward pass on `ub` samples.
    pub layer_gops: f64,
    /// Effective compute rate in TFLOP/s.
    pub tflops: f64,
    pub ub: u64,
    pub u: u64,
}

fn positive(param: &'static str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(Error::Domain {
            param,
            value,
            reason: "must be finite and strictly positive",
        })
    }
}

impl CostParams {
    /// A zero layer size is accepted and models the transfer-free limit.
    pub fn validate(&self) -> Result<()> {
        positive("N", self.n_layers as f64)?;
        if !(self.layer_mb.is_finite() && self.layer_mb >= 0.0) {
            return Err(Error::Domain {
                param: "L",
                value: self.layer_mb,
                reason: "must be finite and non-negative",
            });
        }
        positive("B", self.bandwidth_gbps)?;
        positive("c", self.layer_gops)?;
        positive("F", self.tflops)?;
        positive("ub", self.ub as f64)?;
        positive("u", self.u as f64)
    }

    pub fn with_u(self, u: u64) -> Self {
        CostParams { u, ..self }
    }

    /// Transfer time of one layer, ms.
    pub fn x_ms(&self) -> f64 {
        self.layer_mb / self.bandwidth_gbps
    }

    /// Forward compute time of one layer on `ub` samples, ms.
    pub fn c_ms(&self) -> f64 {
        self.layer_gops / self.tflops
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostReport {
    pub params: CostParams,
    pub x_ms: f64,
    pub c_ms: f64,
    /// Time for one minibatch of `u·ub` samples.
    pub total_ms: f64,
    /// Samples per second.
    pub t_forward: f64,
    /// Samples per second.
    pub t_training: f64,
    pub overhead_fraction: f64,
}

/// Evaluates the model with one microbatch per layer visit.
pub fn eval_no_innerloop(p: &CostParams) -> Result<CostReport> {
    if p.u != 1 {
        return Err(Error::Domain {
            param: "u",
            value: p.u as f64,
            reason: "the no-inner-loop model has u = 1",
        });
    }
    p.validate()?;
    let (x, c) = (p.x_ms(), p.c_ms());
    let n = p.n_layers as f64;
    let ub = p.ub as f64;
    let per_layer = COMPUTE_PASSES * c + WEIGHT_FETCHES * x;
    Ok(CostReport {
        params: *p,
        x_ms: x,
        c_ms: c,
        total_ms: n * per_layer,
        t_forward: 1000.0 * ub / (n * (c + x)),
        t_training: 1000.0 * ub / per_layer,
        overhead_fraction: WEIGHT_FETCHES * x / per_layer,
    })
}

/// Evaluates the model with `u` microbatches per layer visit.
///
/// The forward throughput keeps the printed form `1000·u·ub / (N·(C+X))`.
pub fn eval_innerloop(p: &CostParams) -> Result<CostReport> {
    p.validate()?;
    let (x, c) = (p.x_ms(), p.c_ms());
    let n = p.n_layers as f64;
    let u = p.u as f64;
    let ub = p.ub as f64;
    let per_layer = COMPUTE_PASSES * u * c + WEIGHT_FETCHES * x;
    Ok(CostReport {
        params: *p,
        x_ms: x,
        c_ms: c,
        total_ms: n * per_layer,
        t_forward: 1000.0 * u * ub / (n * (c + x)),
        t_training: 1000.0 * u * ub / per_layer,
        overhead_fraction: WEIGHT_FETCHES * x / per_layer,
    })
}

/// Transfer-free training throughput, the `u → ∞` asymptote.
pub fn training_limit(p: &CostParams) -> Result<f64> {
    p.validate()?;
    Ok(1000.0 * p.ub as f64 / (COMPUTE_PASSES * p.c_ms()))
}

fn overhead_at(x: f64, c: f64, u: u64) -> f64 {
    WEIGHT_FETCHES * x / (COMPUTE_PASSES * u as f64 * c + WEIGHT_FETCHES * x)
}

/// Smallest `u` whose overhead fraction is at most `target`.
pub fn min_u_for_overhead(p: &CostParams, target: f64) -> Result<u64> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::Domain {
            param: "target",
            value: target,
            reason: "must lie in (0, 1)",
        });
    }
    p.validate()?;
    let (x, c) = (p.x_ms(), p.c_ms());
    let closed = (x * (1.0 - target) / (2.0 * c * target)).ceil();
    let mut u = if closed.is_finite() && closed >= 1.0 {
        closed as u64
    } else {
        1
    };
    // The closed form can land one off after rounding; settle it exactly.
    while overhead_at(x, c, u) > target {
        u += 1;
    }
    while u > 1 && overhead_at(x, c, u - 1) <= target {
        u -= 1;
    }
    Ok(u)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct L2lpProjection {
    /// Reduce/update time left on the critical path, ms.
    pub exposed_ms: f64,
    /// Share of the reduce/update pipeline hidden behind compute.
    pub hidden_fraction: f64,
    /// Inner-loop minibatch time the projection sits alongside, ms.
    pub total_ms: f64,
}

/// Overlapped reduce/update: with a uniform per-layer reduce/update time `r`
/// only the final two layers' work stays exposed.
pub fn l2lp_projection(p: &CostParams, reduce_update_ms: f64) -> Result<L2lpProjection> {
    if !(reduce_update_ms.is_finite() && reduce_update_ms >= 0.0) {
        return Err(Error::Domain {
            param: "r",
            value: reduce_update_ms,
            reason: "must be finite and non-negative",
        });
    }
    let report = eval_innerloop(p)?;
    let n = p.n_layers as f64;
    Ok(L2lpProjection {
        exposed_ms: 2.0 * reduce_update_ms,
        hidden_fraction: (1.0 - 2.0 / n).max(0.0),
        total_ms: report.total_ms,
    })
}

/// Derives cost parameters from the first layer of `model`.
pub fn params_from_model(
    model: &ModelSpec,
    precision: Precision,
    bandwidth_gbps: f64,
    tflops: f64,
    ub: u64,
    u: u64,
) -> Result<CostParams> {
    model.validate()?;
    let layer = model.layers[0];
    let bytes = layer.param_count() as u64 * precision.bytes_per_element();
    let ops = 2 * ub * layer.macs_per_row() as u64;
    let p = CostParams {
        n_layers: model.n_layers() as u64,
        layer_mb: bytes as f64 / 1e6,
        bandwidth_gbps,
        layer_gops: ops as f64 / 1e9,
        tflops,
        ub,
        u,
    };
    p.validate()?;
    Ok(p)
}

pub const COST_CSV_HEADER: [&str; 13] = [
    "N", "L_MB", "B_GBps", "c_Gops", "F_TFLOPs", "ub", "u", "X_ms", "C_ms", "total_ms", "t_fwd",
    "t_train", "overhead",
];

impl CostReport {
    pub fn csv_row(&self) -> Vec<String> {
        let p = &self.params;
        vec![
            p.n_layers.to_string(),
            p.layer_mb.to_string(),
            p.bandwidth_gbps.to_string(),
            p.layer_gops.to_string(),
            p.tflops.to_string(),
            p.ub.to_string(),
            p.u.to_string(),
            self.x_ms.to_string(),
            self.c_ms.to_string(),
            self.total_ms.to_string(),
            self.t_forward.to_string(),
            self.t_training.to_string(),
            self.overhead_fraction.to_string(),
        ]
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = &self.params;
        writeln!(f, "{:<18}{}", "layers", p.n_layers)?;
        writeln!(f, "{:<18}{} MB", "layer size", p.layer_mb)?;
        writeln!(f, "{:<18}{} GB/s", "bandwidth", p.bandwidth_gbps)?;
        writeln!(f, "{:<18}{} Gop", "layer forward", p.layer_gops)?;
        writeln!(f, "{:<18}{} TFLOP/s", "compute rate", p.tflops)?;
        writeln!(f, "{:<18}{} x {}", "batch (u x ub)", p.u, p.ub)?;
        writeln!(f, "{:<18}{:.6} ms", "transfer X", self.x_ms)?;
        writeln!(f, "{:<18}{:.6} ms", "compute C", self.c_ms)?;
        writeln!(f, "{:<18}{:.6} ms", "minibatch time", self.total_ms)?;
        writeln!(f, "{:<18}{:.3} samples/s", "forward", self.t_forward)?;
        writeln!(f, "{:<18}{:.3} samples/s", "training", self.t_training)?;
        write!(
            f,
            "{:<18}{:.2}%",
            "overhead",
            100.0 * self.overhead_fraction
        )
    }
}
