//! Test-time pathway optimizers.
//!
//! * `oracle`: gradient descent on the true-label loss (an upper bound).
//! * `ngd`: gradient descent on the kernel-weighted loss of the sample's
//!   reference neighbors, with the candidate pathway applied to each
//!   neighbor at the same masked positions.
//! * `kernel_regression`: the kernel-weighted mean of the neighbors'
//!   pathways, interpolated with the router's pathway by the grid value of
//!   alpha that minimizes the neighbor surrogate loss.
//! * `mode_finding`: meanshift toward the kernel-weighted mean of the
//!   nearest stored pathways.
//!
//! Every method starts from the router's own pathway and only ever writes
//! the entries of the resolved [`OptimizationMask`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::model::{loss, MoeModel, ModelShape};
use crate::neighborhood::{select_neighbors, select_pathway_neighbors, NeighborSet, NeighborhoodSpec, Space};
use crate::pathway::{
    apply_masked_update, masked_distance, string_serde, MaskSpec, OptimizationMask, Pathway, RoutingConfig,
};
use crate::plant::Sample;
use crate::refstore::{EmbeddingProvider, ReferenceStore};
use crate::schedule::LrSchedule;

/// Meanshift stops once an iteration moves the pathway less than this.
pub const MEANSHIFT_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    None,
    Oracle,
    Ngd,
    KernelRegression,
    ModeFinding,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::None,
        Method::Oracle,
        Method::Ngd,
        Method::KernelRegression,
        Method::ModeFinding,
    ];

    pub fn is_gradient(&self) -> bool {
        matches!(self, Method::Oracle | Method::Ngd)
    }

    pub fn needs_store(&self) -> bool {
        matches!(self, Method::Ngd | Method::KernelRegression | Method::ModeFinding)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::None => "none",
            Method::Oracle => "oracle",
            Method::Ngd => "ngd",
            Method::KernelRegression => "kernel_regression",
            Method::ModeFinding => "mode_finding",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.to_string() == s.trim().replace('-', "_"))
            .ok_or_else(|| Error::InvalidSpec(format!("unknown method {s:?}")))
    }
}

string_serde!(Method);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerSpec {
    pub method: Method,
    pub steps: usize,
    pub lr: LrSchedule,
    pub alpha_grid: Vec<f64>,
    pub meanshift_iters: usize,
    pub meanshift_alpha: f64,
    pub kernel: KernelSpec,
    pub neighborhood: NeighborhoodSpec,
    pub mask: MaskSpec,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self {
            method: Method::Ngd,
            steps: 10,
            lr: LrSchedule::default(),
            alpha_grid: default_alpha_grid(),
            meanshift_iters: 5,
            meanshift_alpha: 0.5,
            kernel: KernelSpec::default(),
            neighborhood: NeighborhoodSpec::default(),
            mask: MaskSpec::default(),
        }
    }
}

/// `{0.0, 0.1, ..., 1.0}`.
pub fn default_alpha_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

impl OptimizerSpec {
    pub fn with_method(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::InvalidSpec("steps must be >= 1".into()));
        }
        self.lr.validate()?;
        if self.alpha_grid.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::InvalidSpec("alpha grid must lie in [0, 1]".into()));
        }
        if self.alpha_grid.is_empty() {
            return Err(Error::InvalidSpec("alpha grid is empty".into()));
        }
        if self.meanshift_iters < 1 {
            return Err(Error::InvalidSpec("meanshift_iters must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.meanshift_alpha) {
            return Err(Error::InvalidSpec("meanshift_alpha must lie in [0, 1]".into()));
        }
        self.kernel.validate()?;
        self.neighborhood.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    /// Learning rate (gradient methods).
    pub lr: Option<f64>,
    /// Interpolation weight on the router pathway (kernel regression).
    pub alpha: Option<f64>,
    /// Objective at the iterate this step started from: the surrogate or
    /// oracle loss for gradient methods and kernel regression, the local
    /// kernel density for mode finding.
    pub objective: f64,
    /// Digest of the pathway after the step.
    pub snapshot: String,
    /// Prediction under the pathway after the step.
    pub prediction: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationTrace {
    pub method: Method,
    pub initial_prediction: usize,
    pub steps: Vec<TraceStep>,
    pub final_pathway: Pathway,
    /// The method fell back to the router pathway because no reference
    /// neighbor was found.
    pub no_neighbor: bool,
    pub neighbor_ids: Vec<u64>,
    pub forward_passes: u64,
    pub backward_passes: u64,
}

impl OptimizationTrace {
    fn start(method: Method, initial_prediction: usize, base: &Pathway) -> Self {
        Self {
            method,
            initial_prediction,
            steps: Vec::new(),
            final_pathway: base.clone(),
            no_neighbor: false,
            neighbor_ids: Vec::new(),
            forward_passes: 1,
            backward_passes: 0,
        }
    }

    pub fn final_prediction(&self) -> usize {
        self.steps.last().map_or(self.initial_prediction, |s| s.prediction)
    }

    /// Backward passes count as two forwards.
    pub fn forward_equivalents(&self) -> u64 {
        self.forward_passes + 2 * self.backward_passes
    }

    /// 1-based index of the step with the lowest objective (highest density
    /// for mode finding); 0 when no step ran.
    pub fn steps_to_best(&self) -> usize {
        let better = |a: f64, b: f64| {
            if self.method == Method::ModeFinding {
                a > b
            } else {
                a < b
            }
        };
        let mut best: Option<(usize, f64)> = None;
        for (i, s) in self.steps.iter().enumerate() {
            if best.is_none_or(|(_, v)| better(s.objective, v)) {
                best = Some((i + 1, s.objective));
            }
        }
        best.map_or(0, |(i, _)| i)
    }
}

/// Everything an optimizer needs besides the sample itself.
pub struct Context<'a> {
    pub model: &'a MoeModel,
    pub store: Option<&'a ReferenceStore>,
    pub embedder: &'a dyn EmbeddingProvider,
}

/// Runs `spec.method` on one sample. The label is read only by the oracle.
pub fn optimize(ctx: &Context<'_>, sample: &Sample, spec: &OptimizerSpec) -> Result<(Pathway, OptimizationTrace)> {
    match spec.method {
        Method::None => {
            let (logits, base) = ctx.model.forward_base(&sample.input)?;
            let trace = OptimizationTrace::start(Method::None, crate::model::argmax(logits.as_slice()), &base);
            Ok((base, trace))
        }
        Method::Oracle => optimize_oracle(ctx.model, sample, spec),
        Method::Ngd => optimize_ngd(ctx.model, sample, require_store(ctx)?, ctx.embedder, spec),
        Method::KernelRegression => {
            optimize_kernel_regression(ctx.model, sample, require_store(ctx)?, ctx.embedder, spec)
        }
        Method::ModeFinding => optimize_mode_finding(ctx.model, sample, require_store(ctx)?, spec),
    }
}

fn require_store<'a>(ctx: &Context<'a>) -> Result<&'a ReferenceStore> {
    ctx.store
        .ok_or_else(|| Error::InvalidSpec("method requires a reference store".into()))
}

struct Start {
    base: Pathway,
    mask: OptimizationMask,
    prediction: usize,
}

fn start(model: &MoeModel, sample: &Sample, spec: &OptimizerSpec) -> Result<Start> {
    spec.validate()?;
    let (logits, base) = model.forward_base(&sample.input)?;
    let mask = spec.mask.resolve(&base)?;
    Ok(Start {
        base,
        mask,
        prediction: crate::model::argmax(logits.as_slice()),
    })
}

fn check_store(model: &MoeModel, store: &ReferenceStore) -> Result<()> {
    if store.pathway_dims() != model.dims() {
        return Err(Error::Schema("reference store pathways do not match the model".into()));
    }
    Ok(())
}

/// Plain gradient descent on the masked entries, shared by oracle and NGD.
/// `objective` returns the loss at an iterate and its gradient, and reports
/// how many forward/backward passes it used.
fn gradient_descent(
    model: &MoeModel,
    sample: &Sample,
    spec: &OptimizerSpec,
    st: &Start,
    trace: &mut OptimizationTrace,
    mut objective: impl FnMut(&Pathway) -> Result<(f64, Pathway, u64)>,
) -> Result<Pathway> {
    let mut omega = st.base.clone();
    for t in 0..spec.steps {
        let lr = spec.lr.lr_at(t, spec.steps)?;
        let (value, mut grad, passes) = objective(&omega)?;
        trace.forward_passes += passes;
        trace.backward_passes += passes;
        for g in grad.values_mut() {
            *g *= -lr;
        }
        omega = apply_masked_update(&omega, &grad, &st.mask)?;
        trace.steps.push(TraceStep {
            step: t + 1,
            lr: Some(lr),
            alpha: None,
            objective: value,
            snapshot: omega.digest(),
            prediction: model.predict(&sample.input, &omega, &st.mask)?,
        });
    }
    Ok(omega)
}

/// Gradient descent on `loss(f(x, omega), y)` with the true label.
pub fn optimize_oracle(model: &MoeModel, sample: &Sample, spec: &OptimizerSpec) -> Result<(Pathway, OptimizationTrace)> {
    let st = start(model, sample, spec)?;
    let mut trace = OptimizationTrace::start(Method::Oracle, st.prediction, &st.base);
    let omega = gradient_descent(model, sample, spec, &st, &mut trace, |w| {
        let (value, grad) = model.loss_and_grad(&sample.input, sample.label, w, &st.mask)?;
        Ok((value, grad, 1))
    })?;
    trace.final_pathway = omega.clone();
    Ok((omega, trace))
}

fn embedding_neighbors(
    model: &MoeModel,
    sample: &Sample,
    store: &ReferenceStore,
    embedder: &dyn EmbeddingProvider,
    spec: &OptimizerSpec,
    st: &Start,
) -> Result<NeighborSet> {
    match spec.neighborhood.space {
        Space::Embedding => {
            let query = embedder.embed(&sample.input)?;
            select_neighbors(&query, store, &spec.neighborhood, &spec.kernel)
        }
        Space::Pathway => {
            let _ = model;
            select_pathway_neighbors(&st.base, store, &st.mask, &spec.neighborhood, &spec.kernel)
        }
    }
}

/// Kernel-weighted neighbor loss `sum_i w_i loss(f(x_i, omega), y_i)`.
pub fn surrogate_loss(
    model: &MoeModel,
    store: &ReferenceStore,
    neighbors: &NeighborSet,
    omega: &Pathway,
    mask: &OptimizationMask,
) -> Result<f64> {
    let mut total = 0.0;
    for n in &neighbors.members {
        let e = &store.entries()[n.index];
        let logits = model.logits_with_pathway(&e.input, omega, mask)?;
        total += n.weight * loss(logits.as_slice(), e.label)?;
    }
    Ok(total)
}

/// Surrogate loss and its gradient with respect to the masked entries.
pub fn surrogate_loss_and_grad(
    model: &MoeModel,
    store: &ReferenceStore,
    neighbors: &NeighborSet,
    omega: &Pathway,
    mask: &OptimizationMask,
) -> Result<(f64, Pathway)> {
    let mut total = 0.0;
    let mut grad = Pathway::zeros(omega.dims());
    for n in &neighbors.members {
        let e = &store.entries()[n.index];
        let (value, g) = model.loss_and_grad(&e.input, e.label, omega, mask)?;
        total += n.weight * value;
        for &i in mask.entries() {
            grad.values_mut()[i] += n.weight * g.values()[i];
        }
    }
    Ok((total, grad))
}

fn fallback(mut trace: OptimizationTrace, base: Pathway) -> (Pathway, OptimizationTrace) {
    log::debug!("no reference neighbors; keeping the router pathway");
    trace.no_neighbor = true;
    trace.final_pathway = base.clone();
    (base, trace)
}

/// Neighborhood gradient descent.
pub fn optimize_ngd(
    model: &MoeModel,
    sample: &Sample,
    store: &ReferenceStore,
    embedder: &dyn EmbeddingProvider,
    spec: &OptimizerSpec,
) -> Result<(Pathway, OptimizationTrace)> {
    check_store(model, store)?;
    let st = start(model, sample, spec)?;
    let mut trace = OptimizationTrace::start(Method::Ngd, st.prediction, &st.base);
    let neighbors = match embedding_neighbors(model, sample, store, embedder, spec, &st) {
        Ok(n) => n,
        Err(Error::EmptyNeighborhood) => return Ok(fallback(trace, st.base)),
        Err(e) => return Err(e),
    };
    trace.neighbor_ids = neighbors.ids();
    let passes = neighbors.len() as u64;
    let omega = gradient_descent(model, sample, spec, &st, &mut trace, |w| {
        let (value, grad) = surrogate_loss_and_grad(model, store, &neighbors, w, &st.mask)?;
        Ok((value, grad, passes))
    })?;
    trace.final_pathway = omega.clone();
    Ok((omega, trace))
}

/// Kernel-weighted mean of the neighbors' pathways on the masked entries;
/// every other entry is copied from `base`.
pub fn neighbor_mean(store: &ReferenceStore, neighbors: &NeighborSet, base: &Pathway, mask: &OptimizationMask) -> Pathway {
    let mut out = base.clone();
    for &i in mask.entries() {
        let mut v = 0.0;
        for n in &neighbors.members {
            v += n.weight * store.entries()[n.index].pathway.values()[i];
        }
        out.values_mut()[i] = v;
    }
    out
}

/// `alpha * omega + (1 - alpha) * target` on the masked entries.
pub fn interpolate(omega: &Pathway, target: &Pathway, alpha: f64, mask: &OptimizationMask) -> Pathway {
    let mut out = omega.clone();
    for &i in mask.entries() {
        out.values_mut()[i] = alpha * omega.values()[i] + (1.0 - alpha) * target.values()[i];
    }
    out
}

/// Kernel regression with grid-searched interpolation toward the router.
pub fn optimize_kernel_regression(
    model: &MoeModel,
    sample: &Sample,
    store: &ReferenceStore,
    embedder: &dyn EmbeddingProvider,
    spec: &OptimizerSpec,
) -> Result<(Pathway, OptimizationTrace)> {
    check_store(model, store)?;
    let st = start(model, sample, spec)?;
    let mut trace = OptimizationTrace::start(Method::KernelRegression, st.prediction, &st.base);
    let neighbors = match embedding_neighbors(model, sample, store, embedder, spec, &st) {
        Ok(n) => n,
        Err(Error::EmptyNeighborhood) => return Ok(fallback(trace, st.base)),
        Err(e) => return Err(e),
    };
    trace.neighbor_ids = neighbors.ids();
    let estimate = neighbor_mean(store, &neighbors, &st.base, &st.mask);

    // Largest alpha first so that exact ties keep the pathway closer to the
    // router's.
    let mut alphas = spec.alpha_grid.clone();
    alphas.sort_by(|a, b| b.total_cmp(a));
    alphas.dedup();
    let mut best: Option<(f64, f64, Pathway)> = None;
    for &alpha in &alphas {
        let candidate = interpolate(&st.base, &estimate, alpha, &st.mask);
        let value = surrogate_loss(model, store, &neighbors, &candidate, &st.mask)?;
        trace.forward_passes += neighbors.len() as u64;
        if best.as_ref().is_none_or(|(v, _, _)| value < *v) {
            best = Some((value, alpha, candidate));
        }
    }
    let (value, alpha, omega) = best.expect("alpha grid is non-empty");
    trace.steps.push(TraceStep {
        step: 1,
        lr: None,
        alpha: Some(alpha),
        objective: value,
        snapshot: omega.digest(),
        prediction: model.predict(&sample.input, &omega, &st.mask)?,
    });
    trace.final_pathway = omega.clone();
    Ok((omega, trace))
}

/// Meanshift in pathway space.
pub fn optimize_mode_finding(
    model: &MoeModel,
    sample: &Sample,
    store: &ReferenceStore,
    spec: &OptimizerSpec,
) -> Result<(Pathway, OptimizationTrace)> {
    check_store(model, store)?;
    let st = start(model, sample, spec)?;
    let mut trace = OptimizationTrace::start(Method::ModeFinding, st.prediction, &st.base);
    let mut omega = st.base.clone();
    let mut ids = Vec::new();
    for it in 0..spec.meanshift_iters {
        let neighbors =
            match select_pathway_neighbors(&omega, store, &st.mask, &spec.neighborhood, &spec.kernel) {
                Ok(n) => n,
                Err(Error::EmptyNeighborhood) => return Ok(fallback(trace, st.base)),
                Err(e) => return Err(e),
            };
        ids.extend(neighbors.ids());
        let local_mean = neighbor_mean(store, &neighbors, &omega, &st.mask);
        let next = interpolate(&omega, &local_mean, spec.meanshift_alpha, &st.mask);
        let moved = masked_distance(&next, &omega, &st.mask)?;
        omega = next;
        trace.steps.push(TraceStep {
            step: it + 1,
            lr: None,
            alpha: Some(spec.meanshift_alpha),
            objective: neighbors.kernel_total,
            snapshot: omega.digest(),
            prediction: model.predict(&sample.input, &omega, &st.mask)?,
        });
        if moved < MEANSHIFT_TOLERANCE {
            break;
        }
    }
    ids.sort_unstable();
    ids.dedup();
    trace.neighbor_ids = ids;
    trace.final_pathway = omega.clone();
    Ok((omega, trace))
}

/// Model passes per test sample, in forward equivalents (a backward pass
/// counts as two forwards).
///
/// * none, mode finding: 1
/// * oracle: `1 + steps * 3`
/// * ngd: `1 + steps * k * 3`
/// * kernel regression: `1 + |alpha grid| * k`
///
/// `k` is the kNN size; for an epsilon ball the neighbor count is not known
/// in advance and `k = 1` is assumed.
pub fn forward_equivalents(spec: &OptimizerSpec) -> u64 {
    let k = match spec.neighborhood.selection {
        crate::neighborhood::Selection::Knn { k } => k as u64,
        crate::neighborhood::Selection::EpsBall { .. } => 1,
    };
    let steps = spec.steps as u64;
    let mut grid = spec.alpha_grid.clone();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    match spec.method {
        Method::None | Method::ModeFinding => 1,
        Method::Oracle => 1 + steps * 3,
        Method::Ngd => 1 + steps * k * 3,
        Method::KernelRegression => 1 + grid.len() as u64 * k,
    }
}

/// Cost proxy in multiply-accumulates: forward equivalents times the MAC
/// count of one forward pass.
pub fn flop_proxy(spec: &OptimizerSpec, config: &RoutingConfig, shape: &ModelShape) -> f64 {
    forward_equivalents(spec) as f64 * MoeModel::forward_macs(config, shape) as f64
}
