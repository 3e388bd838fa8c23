//! Step curves with flip counts, expert-activation heatmaps, top-n coverage
//! and the cost table.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelShape;
use crate::optimizers::{flop_proxy, forward_equivalents, Context, OptimizationTrace, OptimizerSpec};
use crate::pathway::{sparsify_topk, topk_indices, Pathway, RoutingConfig};
use crate::plant::Sample;

use super::{evaluate, Arm};

/// Prediction changes relative to step 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlipStats {
    pub step: usize,
    pub n_correct: usize,
    /// Wrong at step 0, right at this step.
    pub n_i2c: usize,
    /// Right at step 0, wrong at this step.
    pub n_c2i: usize,
}

/// `predictions[t][i]` is sample `i`'s prediction after step `t`.
pub fn flip_stats(labels: &[usize], predictions: &[Vec<usize>]) -> Result<Vec<FlipStats>> {
    let Some(first) = predictions.first() else {
        return Ok(Vec::new());
    };
    for p in predictions {
        crate::error::check_dim("predictions per step", labels.len(), p.len())?;
    }
    Ok(predictions
        .iter()
        .enumerate()
        .map(|(step, p)| {
            let mut s = FlipStats {
                step,
                n_correct: 0,
                n_i2c: 0,
                n_c2i: 0,
            };
            for i in 0..labels.len() {
                let (was, is) = (first[i] == labels[i], p[i] == labels[i]);
                s.n_correct += is as usize;
                s.n_i2c += (!was && is) as usize;
                s.n_c2i += (was && !is) as usize;
            }
            s
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepPoint {
    pub step: usize,
    pub accuracy: f64,
    pub n_correct: usize,
    pub n_i2c: usize,
    pub n_c2i: usize,
}

/// Per-step predictions from gradient traces; row 0 is the router's.
pub fn trace_predictions(traces: &[OptimizationTrace]) -> Result<Vec<Vec<usize>>> {
    let steps = traces.first().map_or(0, |t| t.steps.len());
    if traces.iter().any(|t| t.steps.len() != steps && !t.no_neighbor) {
        return Err(Error::InvalidSpec("traces have different lengths".into()));
    }
    Ok((0..=steps)
        .map(|t| {
            traces
                .iter()
                .map(|tr| match t {
                    0 => tr.initial_prediction,
                    _ => tr.steps.get(t - 1).map_or(tr.initial_prediction, |s| s.prediction),
                })
                .collect()
        })
        .collect())
}

/// Accuracy and flip counts after every step of a gradient method.
pub fn step_curve(ctx: &Context<'_>, samples: &[Sample], spec: &OptimizerSpec) -> Result<Vec<StepPoint>> {
    if !spec.method.is_gradient() {
        return Err(Error::InvalidSpec(format!(
            "step curves need a gradient method, got {}",
            spec.method
        )));
    }
    let traces = evaluate(ctx, samples, spec)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let flips = flip_stats(&labels, &trace_predictions(&traces)?)?;
    let n = samples.len().max(1) as f64;
    Ok(flips
        .into_iter()
        .map(|f| StepPoint {
            step: f.step,
            accuracy: f.n_correct as f64 / n,
            n_correct: f.n_correct,
            n_i2c: f.n_i2c,
            n_c2i: f.n_c2i,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRow {
    pub layer: usize,
    pub expert: usize,
    pub before: f64,
    pub after: f64,
}

fn activation_counts(pathways: &[Pathway], layer: usize, top_k: usize, counts: &mut [usize]) -> Result<usize> {
    let mut rows = 0;
    for p in pathways {
        for t in 0..p.dims().tokens {
            for &e in &sparsify_topk(p.row(t, layer), top_k)?.experts {
                counts[e] += 1;
            }
            rows += 1;
        }
    }
    Ok(rows)
}

/// Fraction of token rows whose top-k support contains each expert, per
/// selected layer, before and after optimization.
pub fn expert_heatmap(before: &[Pathway], after: &[Pathway], layers: &[usize], top_k: usize) -> Result<Vec<HeatmapRow>> {
    crate::error::check_dim("pathways after optimization", before.len(), after.len())?;
    let Some(first) = before.first() else {
        return Ok(Vec::new());
    };
    let dims = first.dims();
    if before.iter().chain(after).any(|p| p.dims() != dims) {
        return Err(Error::InvalidSpec("pathways have inconsistent shapes".into()));
    }
    let mut out = Vec::with_capacity(layers.len() * dims.experts);
    for &layer in layers {
        if layer >= dims.layers {
            return Err(Error::InvalidSpec(format!("layer {layer} out of range")));
        }
        let mut b = vec![0; dims.experts];
        let mut a = vec![0; dims.experts];
        let rows = activation_counts(before, layer, top_k, &mut b)? as f64;
        activation_counts(after, layer, top_k, &mut a)?;
        out.extend((0..dims.experts).map(|e| HeatmapRow {
            layer,
            expert: e,
            before: b[e] as f64 / rows,
            after: a[e] as f64 / rows,
        }));
    }
    Ok(out)
}

/// Shannon entropy (nats) of activation frequencies normalized to sum 1.
pub fn frequency_entropy(freqs: &[f64]) -> f64 {
    let total: f64 = freqs.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    freqs
        .iter()
        .filter(|&&f| f > 0.0)
        .map(|&f| {
            let p = f / total;
            -p * p.ln()
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoveragePoint {
    pub n: usize,
    pub coverage: f64,
}

/// Optimizes with every expert in the core set, then reports, for each `n`,
/// the fraction of the final top-k experts on masked rows that were already
/// among the router's top-n.
pub fn coverage_analysis(
    ctx: &Context<'_>,
    samples: &[Sample],
    spec: &OptimizerSpec,
    n_values: &[usize],
) -> Result<Vec<CoveragePoint>> {
    let config = ctx.model.config;
    if let Some(n) = n_values.iter().find(|&&n| n < config.top_k || n > config.n_experts) {
        return Err(Error::InvalidSpec(format!(
            "coverage n = {n} outside [{}, {}]",
            config.top_k, config.n_experts
        )));
    }
    let mut full = spec.clone();
    full.mask.core_experts = config.n_experts;
    let traces = evaluate(ctx, samples, &full)?;
    let mut hits = vec![0usize; n_values.len()];
    let mut total = 0usize;
    for (s, trace) in samples.iter().zip(&traces) {
        let base = ctx.model.route(&s.input)?;
        let mask = full.mask.resolve(&base)?;
        for &t in mask.tokens() {
            for &l in mask.layers() {
                let chosen = topk_indices(trace.final_pathway.row(t, l), config.top_k);
                total += chosen.len();
                for (h, &n) in hits.iter_mut().zip(n_values) {
                    let prior = topk_indices(base.row(t, l), n);
                    *h += chosen.iter().filter(|e| prior.contains(e)).count();
                }
            }
        }
    }
    Ok(n_values
        .iter()
        .zip(hits)
        .map(|(&n, h)| CoveragePoint {
            n,
            coverage: if total == 0 { 1.0 } else { h as f64 / total as f64 },
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub arm: String,
    pub method: String,
    pub forward_equivalents: u64,
    pub flop_proxy: f64,
}

pub fn cost_table(arms: &[Arm], config: &RoutingConfig, shape: &ModelShape) -> Vec<CostRow> {
    arms.iter()
        .map(|a| CostRow {
            arm: a.name.clone(),
            method: a.spec.method.to_string(),
            forward_equivalents: forward_equivalents(&a.spec),
            flop_proxy: flop_proxy(&a.spec, config, shape),
        })
        .collect()
}
