//! Fixtures, brute-force oracles and the property checks behind the
//! acceptance criteria. Each `check_*` returns a one-line summary on success
//! and a description of the first violation otherwise, so the same code
//! backs the per-topic integration tests and the acceptance runner.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use moe_pathway::harness::analysis::{coverage_analysis, flip_stats, trace_predictions, FlipStats};
use moe_pathway::harness::{evaluate, method_arms, SeedData};
use moe_pathway::kernels::KernelSpec;
use moe_pathway::model::{argmax, Input, ModelShape, MoeModel};
use moe_pathway::neighborhood::{
    cosine_similarity, select_neighbors, select_pathway_neighbors, NeighborhoodSpec, Selection,
};
use moe_pathway::optimizers::{
    interpolate, neighbor_mean, optimize, optimize_kernel_regression, optimize_mode_finding, surrogate_loss, Method,
    OptimizerSpec,
};
use moe_pathway::pathway::{
    masked_distance, LayerGroup, LayerSelect, MaskSpec, OptimizationMask, Pathway, PathwayDims, RoutingConfig,
    TokenSelect,
};
use moe_pathway::plant::{PlantSpec, Sample};
use moe_pathway::refstore::{self, Provenance, ReferenceEntry, ReferenceStore};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Check = Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_input(rng: &mut impl Rng, tokens: usize, width: usize) -> Input {
    Input::from_fn(tokens, width, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Random non-empty subset of `0..n`, sorted.
pub fn random_subset(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    let size = rng.random_range(1..=n);
    let mut all: Vec<usize> = (0..n).collect();
    all.shuffle(rng);
    all.truncate(size);
    all.sort_unstable();
    all
}

pub fn random_mask(rng: &mut impl Rng, dims: PathwayDims) -> OptimizationMask {
    let tokens = random_subset(rng, dims.tokens);
    let layers = random_subset(rng, dims.layers);
    let n = rng.random_range(1..=dims.experts);
    let core = (0..tokens.len() * layers.len())
        .map(|_| {
            let mut all: Vec<usize> = (0..dims.experts).collect();
            all.shuffle(rng);
            all.truncate(n);
            all
        })
        .collect();
    OptimizationMask::new(dims, tokens, layers, core).unwrap()
}

/// Declarative mask drawn over every selector form.
pub fn random_mask_spec(rng: &mut impl Rng, config: &RoutingConfig) -> MaskSpec {
    let tokens = match rng.random_range(0..4) {
        0 => TokenSelect::Last(rng.random_range(1..=config.n_tokens)),
        1 => TokenSelect::First(rng.random_range(1..=config.n_tokens)),
        2 => TokenSelect::All,
        _ => TokenSelect::List(random_subset(rng, config.n_tokens)),
    };
    let layers = match rng.random_range(0..3) {
        0 => {
            let group = [LayerGroup::First, LayerGroup::Middle, LayerGroup::Last][rng.random_range(0..3)];
            LayerSelect::Groups(vec![(group, rng.random_range(1..=config.n_layers))])
        }
        1 => LayerSelect::All,
        _ => LayerSelect::List(random_subset(rng, config.n_layers)),
    };
    MaskSpec {
        tokens,
        layers,
        core_experts: rng.random_range(1..=config.n_experts),
    }
}

/// Pathway with every entry jittered and kept positive.
pub fn perturbed(rng: &mut impl Rng, base: &Pathway, scale: f64) -> Pathway {
    let values = base
        .values()
        .iter()
        .map(|v| (v + scale * rng.random::<f64>()).max(1e-3))
        .collect();
    Pathway::from_values(base.dims(), values).unwrap()
}

/// Random pathway whose rows are probability vectors.
pub fn random_mixture(rng: &mut impl Rng, dims: PathwayDims) -> Pathway {
    let mut p = Pathway::zeros(dims);
    for t in 0..dims.tokens {
        for l in 0..dims.layers {
            let row = p.row_mut(t, l);
            for v in row.iter_mut() {
                *v = rng.random::<f64>() + 1e-3;
            }
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    p
}

pub fn unit_vector(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Store of `n` random entries. Every `dup_every`-th entry reuses the
/// previous embedding so that exact distance ties occur.
pub fn synthetic_store(
    rng: &mut impl Rng,
    n: usize,
    config: &RoutingConfig,
    shape: &ModelShape,
    dup_every: usize,
    pathway: impl Fn(&mut ChaCha8Rng, usize) -> Pathway,
) -> ReferenceStore {
    let mut prng = ChaCha8Rng::seed_from_u64(rng.random());
    let mut entries: Vec<ReferenceEntry> = Vec::with_capacity(n);
    for i in 0..n {
        let embedding = match entries.last() {
            Some(prev) if dup_every > 0 && i % dup_every == 0 => prev.embedding.clone(),
            _ => unit_vector(rng, shape.d_model),
        };
        entries.push(ReferenceEntry {
            id: i as u64,
            input: random_input(rng, config.n_tokens, shape.d_model),
            label: rng.random_range(0..shape.n_classes),
            embedding,
            pathway: pathway(&mut prng, i),
            meta: BTreeMap::from([("row".to_string(), i.to_string())]),
        });
    }
    ReferenceStore::new(
        entries,
        shape.d_model,
        (config.n_tokens, shape.d_model),
        config.dims(),
        Provenance {
            model_hash: "synthetic".into(),
            seed: None,
            built_at: None,
        },
    )
    .unwrap()
}

pub fn small_plant() -> PlantSpec {
    PlantSpec {
        pool_size: 400,
        test_size: 80,
        ..PlantSpec::default()
    }
}

// ---------------------------------------------------------------------------
// Gradient and self-override
// ---------------------------------------------------------------------------

pub struct GradInstance {
    pub model: MoeModel,
    pub input: Input,
    pub label: usize,
    pub omega: Pathway,
    pub mask: OptimizationMask,
}

pub fn grad_instance(seed: u64) -> GradInstance {
    let mut r = rng(seed);
    let config = RoutingConfig::default();
    let shape = ModelShape::default();
    let model = MoeModel::random(seed, config, shape).unwrap();
    let input = random_input(&mut r, config.n_tokens, shape.d_model);
    let base = model.route(&input).unwrap();
    let omega = perturbed(&mut r, &base, 0.2);
    let mask = random_mask(&mut r, base.dims());
    GradInstance {
        model,
        label: r.random_range(0..shape.n_classes),
        input,
        omega,
        mask,
    }
}

/// Largest `|g - fd| / max(|g|, |fd|)` over masked entries with `|g| > floor`,
/// and the number of entries compared.
pub fn max_relative_error(g: &Pathway, fd: &Pathway, mask: &OptimizationMask, floor: f64) -> (f64, usize) {
    let mut worst = 0.0f64;
    let mut n = 0;
    for &i in mask.entries() {
        let (a, b) = (g.values()[i], fd.values()[i]);
        if a.abs() > floor {
            worst = worst.max((a - b).abs() / a.abs().max(b.abs()));
            n += 1;
        }
    }
    (worst, n)
}

pub fn check_gradient(instances: u64) -> Check {
    let mut worst = 0.0f64;
    let mut compared = 0;
    for seed in 0..instances {
        let g = grad_instance(seed);
        let analytic = g.model.grad_pathway(&g.input, g.label, &g.omega, &g.mask).map_err(|e| e.to_string())?;
        let fd = g
            .model
            .finite_diff_grad(&g.input, g.label, &g.omega, &g.mask, 1e-5)
            .map_err(|e| e.to_string())?;
        let (err, n) = max_relative_error(&analytic, &fd, &g.mask, 1e-8);
        if err >= 1e-5 {
            return Err(format!("instance {seed}: relative error {err:.3e}"));
        }
        worst = worst.max(err);
        compared += n;
    }
    if compared == 0 {
        return Err("no coordinate above the gradient floor".into());
    }
    Ok(format!("{instances} instances, {compared} coords, max rel err {worst:.2e}"))
}

pub fn check_self_override(cases: u64) -> Check {
    let config = RoutingConfig::default();
    let shape = ModelShape::default();
    let mut r = rng(7);
    let mut model = MoeModel::random(0, config, shape).unwrap();
    for case in 0..cases {
        if case % 50 == 0 {
            model = MoeModel::random(case, config, shape).unwrap();
        }
        let x = random_input(&mut r, config.n_tokens, shape.d_model);
        let (base_logits, base) = model.forward_base(&x).unwrap();
        let mask = random_mask(&mut r, base.dims());
        let (logits, _) = model.forward_with_pathway(&x, &base, &mask).unwrap();
        let same = logits.iter().zip(base_logits.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(format!("case {case}: logits differ from the base forward"));
        }
    }
    Ok(format!("{cases} cases bit-identical"))
}

// ---------------------------------------------------------------------------
// Neighborhoods
// ---------------------------------------------------------------------------

/// Brute-force selection: full sort by (distance, id) after the duplicate
/// filter.
pub fn brute_force(distances: impl Iterator<Item = (f64, u64)>, selection: Selection) -> Vec<u64> {
    let mut all: Vec<(f64, u64)> = distances.collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    match selection {
        Selection::Knn { k } => all.into_iter().take(k).map(|p| p.1).collect(),
        Selection::EpsBall { epsilon } => all.into_iter().filter(|p| p.0 <= epsilon).map(|p| p.1).collect(),
    }
}

pub fn brute_force_embedding(query: &[f64], store: &ReferenceStore, spec: &NeighborhoodSpec) -> Vec<u64> {
    let d = store.entries().iter().filter_map(|e| {
        let s = cosine_similarity(query, &e.embedding);
        (s <= spec.dedup_threshold).then_some(((1.0 - s).max(0.0), e.id))
    });
    brute_force(d, spec.selection)
}

pub fn brute_force_pathway(omega: &Pathway, store: &ReferenceStore, mask: &OptimizationMask, spec: &NeighborhoodSpec) -> Vec<u64> {
    let d = store
        .entries()
        .iter()
        .map(|e| (masked_distance(omega, &e.pathway, mask).unwrap(), e.id));
    brute_force(d, spec.selection)
}

fn random_neighborhood(rng: &mut impl Rng, n: usize, eps_scale: f64) -> NeighborhoodSpec {
    let mut spec = if rng.random_bool(0.5) {
        NeighborhoodSpec::knn(rng.random_range(1..=n.min(50)))
    } else {
        NeighborhoodSpec::eps(eps_scale * rng.random_range(0.01..1.0))
    };
    spec.dedup_threshold = match rng.random_range(0..3) {
        0 => 0.95,
        1 => 1.0,
        _ => rng.random_range(0.3..1.0),
    };
    spec
}

/// `queries` embedding-space queries spread over stores of 10 to 10^4
/// entries, plus a tenth as many pathway-space queries.
pub fn check_neighborhoods(queries: usize) -> Check {
    let config = RoutingConfig::default();
    let shape = ModelShape::default();
    let mut r = rng(11);
    let sizes = [10, 100, 1000, 10_000];
    let kernel = KernelSpec::default();
    let mut nonempty = 0;
    for (si, &n) in sizes.iter().enumerate() {
        let store = synthetic_store(&mut r, n, &config, &shape, 7, |g, _| random_mixture(g, config.dims()));
        let per = queries / sizes.len() + usize::from(si < queries % sizes.len());
        for q in 0..per {
            let spec = random_neighborhood(&mut r, n, 2.0);
            // Half the queries sit exactly on a stored embedding.
            let query = if q % 2 == 0 {
                store.entries()[r.random_range(0..n)].embedding.clone()
            } else {
                unit_vector(&mut r, shape.d_model)
            };
            let expected = brute_force_embedding(&query, &store, &spec);
            let got = match select_neighbors(&query, &store, &spec, &kernel) {
                Ok(set) => set.ids(),
                Err(moe_pathway::Error::EmptyNeighborhood) => Vec::new(),
                Err(e) => return Err(e.to_string()),
            };
            if got != expected {
                return Err(format!("store {n}, query {q}, {spec:?}: {got:?} != {expected:?}"));
            }
            nonempty += usize::from(!got.is_empty());
        }
        let pathway_queries = (per / 10).max(1);
        for q in 0..pathway_queries {
            let spec = random_neighborhood(&mut r, n, 1.5);
            let omega = random_mixture(&mut r, config.dims());
            let mask = random_mask(&mut r, config.dims());
            let expected = brute_force_pathway(&omega, &store, &mask, &spec);
            let got = match select_pathway_neighbors(&omega, &store, &mask, &spec, &kernel) {
                Ok(set) => set.ids(),
                Err(moe_pathway::Error::EmptyNeighborhood) => Vec::new(),
                Err(e) => return Err(e.to_string()),
            };
            if got != expected {
                return Err(format!("store {n}, pathway query {q}, {spec:?}: {got:?} != {expected:?}"));
            }
        }
    }
    Ok(format!("{queries} queries over stores up to 1e4 matched, {nonempty} non-empty"))
}

// ---------------------------------------------------------------------------
// Kernel regression and mode finding
// ---------------------------------------------------------------------------

fn bits_equal(a: &Pathway, b: &Pathway) -> bool {
    a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits())
}

pub fn check_kernel_regression(seed: u64, samples: usize) -> Check {
    let data = SeedData::prepare(seed, &small_plant(), RoutingConfig::default()).map_err(|e| e.to_string())?;
    let ctx = data.context();
    let spec = OptimizerSpec::with_method(Method::KernelRegression);
    let embed = |s: &Sample| moe_pathway::refstore::EmbeddingProvider::embed(&data.embedder, &s.input).unwrap();
    let mut checked = 0;
    for s in data.bench.test.iter().take(samples) {
        let base = ctx.model.route(&s.input).unwrap();
        let mask = spec.mask.resolve(&base).unwrap();
        let neighbors = match select_neighbors(&embed(s), &data.store, &spec.neighborhood, &spec.kernel) {
            Ok(n) => n,
            Err(_) => continue,
        };
        let estimate = neighbor_mean(&data.store, &neighbors, &base, &mask);
        for &i in mask.entries() {
            let values = neighbors.members.iter().map(|n| data.store.entries()[n.index].pathway.values()[i]);
            let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            let v = estimate.values()[i];
            if v < lo || v > hi {
                return Err(format!("estimate {v} outside neighbor envelope [{lo}, {hi}]"));
            }
        }
        if !bits_equal(&interpolate(&base, &estimate, 1.0, &mask), &base) {
            return Err("alpha = 1 does not reproduce the base pathway".into());
        }
        if !bits_equal(&interpolate(&base, &estimate, 0.0, &mask), &estimate) {
            return Err("alpha = 0 does not reproduce the estimate".into());
        }

        let (omega, trace) = optimize_kernel_regression(ctx.model, s, &data.store, &data.embedder, &spec).unwrap();
        let step = &trace.steps[0];
        let chosen = step.alpha.unwrap();
        for &alpha in &spec.alpha_grid {
            let candidate = interpolate(&base, &estimate, alpha, &mask);
            let value = surrogate_loss(ctx.model, &data.store, &neighbors, &candidate, &mask).unwrap();
            if value < step.objective {
                return Err(format!("alpha {alpha} beats the chosen alpha {chosen}: {value} < {}", step.objective));
            }
        }
        if !bits_equal(&omega, &interpolate(&base, &estimate, chosen, &mask)) {
            return Err("returned pathway is not the interpolant at the chosen alpha".into());
        }

        let only_base = OptimizerSpec {
            alpha_grid: vec![1.0],
            ..spec.clone()
        };
        let (omega, _) = optimize_kernel_regression(ctx.model, s, &data.store, &data.embedder, &only_base).unwrap();
        if !bits_equal(&omega, &base) {
            return Err("alpha grid {1} does not return the base pathway".into());
        }
        checked += 1;
    }
    if checked == 0 {
        return Err("no sample had neighbors".into());
    }
    Ok(format!("{checked} samples: envelope, endpoints, argmin, grid {{1}}"))
}

pub struct MeanshiftFixture {
    pub model: MoeModel,
    pub sample: Sample,
    pub base: Pathway,
    pub mask: OptimizationMask,
}

pub fn meanshift_fixture(seed: u64) -> MeanshiftFixture {
    let config = RoutingConfig::default();
    let shape = ModelShape::default();
    let model = MoeModel::random(seed, config, shape).unwrap();
    let mut r = rng(seed);
    let sample = Sample {
        input: random_input(&mut r, config.n_tokens, shape.d_model),
        label: 0,
        cluster: 0,
    };
    let base = model.route(&sample.input).unwrap();
    let mask = MaskSpec::default().resolve(&base).unwrap();
    MeanshiftFixture {
        model,
        sample,
        base,
        mask,
    }
}

fn meanshift_spec(k: usize, alpha: f64, iters: usize) -> OptimizerSpec {
    OptimizerSpec {
        neighborhood: NeighborhoodSpec::knn(k),
        meanshift_alpha: alpha,
        meanshift_iters: iters,
        ..OptimizerSpec::with_method(Method::ModeFinding)
    }
}

/// `base` shifted by `offset` (plus uniform jitter) on the masked entries.
fn shifted(rng: &mut impl Rng, base: &Pathway, mask: &OptimizationMask, offset: f64, jitter: f64) -> Pathway {
    let mut p = base.clone();
    for &i in mask.entries() {
        p.values_mut()[i] += offset + jitter * rng.random_range(-1.0..1.0);
    }
    p
}

pub fn check_meanshift(seed: u64) -> Check {
    let f = meanshift_fixture(seed);
    let config = f.model.config;
    let shape = f.model.shape;
    let mut r = rng(seed + 1000);

    // Every stored pathway is the same point: one full step lands on it and
    // the next step does not move.
    let target = random_mixture(&mut r, config.dims());
    let store = synthetic_store(&mut r, 12, &config, &shape, 0, |_, _| target.clone());
    let (omega, trace) = optimize_mode_finding(&f.model, &f.sample, &store, &meanshift_spec(4, 0.0, 5)).unwrap();
    let gap = masked_distance(&omega, &target, &f.mask).unwrap();
    if trace.steps.len() != 2 || gap > 1e-12 {
        return Err(format!(
            "identical store: {} steps, distance to stored point {gap:e}",
            trace.steps.len()
        ));
    }
    let (omega, _) = optimize_mode_finding(&f.model, &f.sample, &store, &meanshift_spec(4, 1.0, 5)).unwrap();
    if !bits_equal(&omega, &f.base) {
        return Err("meanshift alpha = 1 moved the pathway".into());
    }

    // Two clusters at distances 0.2 and 0.6 per entry from the query; the
    // iterates must approach the nearer centroid monotonically.
    let per = 20;
    let (base, mask) = (f.base.clone(), f.mask.clone());
    let store = synthetic_store(&mut r, 2 * per, &config, &shape, 0, |g, i| {
        let offset = if i < per { 0.2 } else { 0.6 };
        shifted(g, &base, &mask, offset, 0.01)
    });
    let mut centroid = Pathway::zeros(config.dims());
    for e in &store.entries()[..per] {
        for (c, v) in centroid.values_mut().iter_mut().zip(e.pathway.values()) {
            *c += v / per as f64;
        }
    }
    let mut last = masked_distance(&f.base, &centroid, &f.mask).unwrap();
    let start = last;
    for iters in 1..=5 {
        let (omega, trace) =
            optimize_mode_finding(&f.model, &f.sample, &store, &meanshift_spec(per / 2, 0.5, iters)).unwrap();
        if trace.neighbor_ids.iter().any(|&id| id >= per as u64) {
            return Err("far cluster entered the neighborhood".into());
        }
        let d = masked_distance(&omega, &centroid, &f.mask).unwrap();
        if d >= last {
            return Err(format!("iteration {iters}: distance {d} did not decrease from {last}"));
        }
        last = d;
    }
    Ok(format!("fixed point in one step; distance to nearer centroid {start:.3} -> {last:.3} over 5 steps"))
}

// ---------------------------------------------------------------------------
// Mask isolation
// ---------------------------------------------------------------------------

pub fn check_mask_isolation(runs: usize) -> Check {
    let config = RoutingConfig::default();
    let data = SeedData::prepare(3, &small_plant(), config).map_err(|e| e.to_string())?;
    let ctx = data.context();
    let mut r = rng(5);
    for run in 0..runs {
        let method = Method::ALL[run % Method::ALL.len()];
        let sample = &data.bench.test[r.random_range(0..data.bench.test.len())];
        let spec = OptimizerSpec {
            steps: 3,
            mask: random_mask_spec(&mut r, &config),
            neighborhood: NeighborhoodSpec::knn(r.random_range(1..=5)),
            ..OptimizerSpec::with_method(method)
        };
        let base = ctx.model.route(&sample.input).unwrap();
        let mask = spec.mask.resolve(&base).unwrap();
        let (omega, _) = optimize(&ctx, sample, &spec).map_err(|e| format!("run {run} ({method}): {e}"))?;
        for (i, (a, b)) in omega.values().iter().zip(base.values()).enumerate() {
            if !mask.entries().contains(&i) && a.to_bits() != b.to_bits() {
                return Err(format!("run {run} ({method}, {:?}): unmasked entry {i} changed", spec.mask));
            }
        }
    }
    Ok(format!("{runs} runs over {} methods", Method::ALL.len()))
}

// ---------------------------------------------------------------------------
// Benchmark-level criteria
// ---------------------------------------------------------------------------

/// Accuracy of every method arm and NGD flip statistics for one seed.
pub struct SeedOutcome {
    pub seed: u64,
    pub accuracy: HashMap<Method, f64>,
    pub ngd_flips: Vec<FlipStats>,
}

pub fn accuracy(samples: &[Sample], predictions: impl Iterator<Item = usize>) -> f64 {
    let correct = samples.iter().zip(predictions).filter(|(s, p)| s.label == *p).count();
    correct as f64 / samples.len() as f64
}

pub fn run_seed(seed: u64, plant: &PlantSpec) -> moe_pathway::Result<SeedOutcome> {
    let data = SeedData::prepare(seed, plant, RoutingConfig::default())?;
    let ctx = data.context();
    let samples = &data.bench.test;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let mut outcome = SeedOutcome {
        seed,
        accuracy: HashMap::new(),
        ngd_flips: Vec::new(),
    };
    for arm in method_arms() {
        let traces = evaluate(&ctx, samples, &arm.spec)?;
        outcome
            .accuracy
            .insert(arm.spec.method, accuracy(samples, traces.iter().map(|t| t.final_prediction())));
        if arm.spec.method == Method::Ngd {
            outcome.ngd_flips = flip_stats(&labels, &trace_predictions(&traces)?)?;
        }
    }
    Ok(outcome)
}

pub fn run_seeds(seeds: impl IntoIterator<Item = u64>, plant: &PlantSpec) -> Result<Vec<SeedOutcome>, String> {
    seeds
        .into_iter()
        .map(|s| run_seed(s, plant).map_err(|e| format!("seed {s}: {e}")))
        .collect()
}

pub fn mean_accuracy(outcomes: &[SeedOutcome], method: Method) -> f64 {
    outcomes.iter().map(|o| o.accuracy[&method]).sum::<f64>() / outcomes.len() as f64
}

pub const ORDER: [Method; 5] = [
    Method::None,
    Method::ModeFinding,
    Method::KernelRegression,
    Method::Ngd,
    Method::Oracle,
];

pub fn check_ordering(outcomes: &[SeedOutcome], tolerance: f64, min_gain: f64) -> Check {
    let means: Vec<f64> = ORDER.iter().map(|&m| mean_accuracy(outcomes, m)).collect();
    let table = ORDER
        .iter()
        .zip(&means)
        .map(|(m, a)| format!("{m} {:.2}", 100.0 * a))
        .collect::<Vec<_>>()
        .join(", ");
    for w in 0..ORDER.len() - 1 {
        if means[w] > means[w + 1] + tolerance {
            return Err(format!("{} above {}: {table}", ORDER[w], ORDER[w + 1]));
        }
    }
    let gain = means[3] - means[0];
    if gain < min_gain {
        return Err(format!("ngd gain {:.2} points below {:.0}: {table}", 100.0 * gain, 100.0 * min_gain));
    }
    Ok(format!("{} seeds: {table}; ngd - base {:+.2} points", outcomes.len(), 100.0 * gain))
}

/// Oracle accuracy at each `eta` (mean over `seeds`), plus the base gap at
/// the default `eta`.
pub fn check_oracle_ceiling(default_runs: &[SeedOutcome], etas: &[f64], seeds: &[u64]) -> Check {
    let mut parts = Vec::new();
    for &eta in etas {
        let plant = PlantSpec {
            eta,
            ..PlantSpec::default()
        };
        let mut accs = Vec::new();
        for &seed in seeds {
            let data = SeedData::prepare(seed, &plant, RoutingConfig::default()).map_err(|e| e.to_string())?;
            let ctx = data.context();
            let traces = evaluate(&ctx, &data.bench.test, &OptimizerSpec::with_method(Method::Oracle))
                .map_err(|e| e.to_string())?;
            accs.push(accuracy(&data.bench.test, traces.iter().map(|t| t.final_prediction())));
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        if mean < 0.99 {
            return Err(format!("oracle {:.2}% at eta {eta}", 100.0 * mean));
        }
        parts.push(format!("eta {eta}: {:.2}%", 100.0 * mean));
    }
    let oracle = mean_accuracy(default_runs, Method::Oracle);
    if oracle < 0.99 {
        return Err(format!("oracle {:.2}% at the default eta", 100.0 * oracle));
    }
    let base = mean_accuracy(default_runs, Method::None);
    if base > 0.90 {
        return Err(format!("base {:.2}% at the default eta leaves no gap", 100.0 * base));
    }
    parts.push(format!("eta 0.5: {:.2}%", 100.0 * oracle));
    Ok(format!("oracle {}; base {:.2}% at eta 0.5", parts.join(", "), 100.0 * base))
}

pub fn check_coverage(seed: u64, plant: &PlantSpec) -> Check {
    let config = RoutingConfig::default();
    let data = SeedData::prepare(seed, plant, config).map_err(|e| e.to_string())?;
    let ns: Vec<usize> = (config.top_k..=config.n_experts).collect();
    let curve = coverage_analysis(&data.context(), &data.bench.test, &OptimizerSpec::default(), &ns)
        .map_err(|e| e.to_string())?;
    for w in curve.windows(2) {
        if w[1].coverage < w[0].coverage {
            return Err(format!("coverage drops from n={} to n={}", w[0].n, w[1].n));
        }
    }
    let first = curve.first().unwrap();
    let last = curve.last().unwrap();
    if last.coverage != 1.0 {
        return Err(format!("coverage(E) = {}", last.coverage));
    }
    if first.coverage >= last.coverage {
        return Err(format!("coverage(top_k) = {} is not below coverage(E)", first.coverage));
    }
    let points = curve
        .iter()
        .filter(|p| [4, 6, 8, 16].contains(&p.n))
        .map(|p| format!("{}:{:.4}", p.n, p.coverage))
        .collect::<Vec<_>>()
        .join(" ");
    Ok(format!("seed {seed}, coverage {points}"))
}

pub fn check_flips(outcomes: &[SeedOutcome], n_samples: usize) -> Check {
    let mut first = 0.0;
    let mut last = 0.0;
    for o in outcomes {
        for f in &o.ngd_flips {
            let expected = o.ngd_flips[0].n_correct as i64 + f.n_i2c as i64 - f.n_c2i as i64;
            if f.n_correct as i64 != expected {
                return Err(format!("seed {}, step {}: flip identity broken", o.seed, f.step));
            }
        }
        first += o.ngd_flips[0].n_correct as f64 / n_samples as f64;
        last += o.ngd_flips.last().unwrap().n_correct as f64 / n_samples as f64;
    }
    let n = outcomes.len() as f64;
    let (first, last) = (first / n, last / n);
    if last < first {
        return Err(format!("ngd accuracy fell from {:.2}% to {:.2}%", 100.0 * first, 100.0 * last));
    }
    let steps = outcomes[0].ngd_flips.len() - 1;
    Ok(format!(
        "identity holds on {} seeds; ngd {:.2}% -> {:.2}% after {steps} steps",
        outcomes.len(),
        100.0 * first,
        100.0 * last
    ))
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

pub fn check_persistence(entries: usize, dir: &Path) -> Check {
    let config = RoutingConfig::default();
    let shape = ModelShape::default();
    let mut r = rng(17);
    let store = synthetic_store(&mut r, entries, &config, &shape, 0, |g, _| random_mixture(g, config.dims()));
    store.verify(None).map_err(|e| e.to_string())?;
    let path = dir.join("store.jsonl");
    refstore::save(&store, &path).map_err(|e| e.to_string())?;
    let loaded = refstore::load(&path).map_err(|e| e.to_string())?;
    refstore::check_decimal_payloads(&path).map_err(|e| e.to_string())?;
    if loaded.digest() != store.digest() {
        return Err("digest changed across save/load".into());
    }
    if loaded != store {
        return Err("loaded store differs from the saved one".into());
    }
    let again = dir.join("again.jsonl");
    refstore::save(&loaded, &again).map_err(|e| e.to_string())?;
    if std::fs::read(&path).unwrap() != std::fs::read(&again).unwrap() {
        return Err("re-saving the loaded store changed the file".into());
    }
    Ok(format!("{entries} entries, digest {}", &store.digest()[..16]))
}

pub fn predictions_match_base(model: &MoeModel, samples: &[Sample]) -> bool {
    samples
        .iter()
        .all(|s| model.predict_base(&s.input).unwrap() == argmax(model.forward_base(&s.input).unwrap().0.as_slice()))
}
