//! Planted benchmarks: a random MoE network whose labels are defined by a
//! known per-cluster pathway, and whose routers are a noised copy of that
//! pathway.
//!
//! Construction, for a given seed:
//!
//! 1. Draw expert and readout parameters, `n_clusters` centers in input space
//!    and, per cluster and layer, a planted support of `top_k` experts. The
//!    planted row is `softmax(gate_gap * 1[support])`, shared by all tokens.
//! 2. Run each center through the network under its planted pathway and
//!    record the hidden state `H_l[:, c]` entering every layer.
//! 3. Fit the noise-free router by least squares, `R_l = P_l pinv(H_l)`, so
//!    that router logits at the centers equal the planted logits `P_l`.
//! 4. Add `eta * G_l (I - H_l pinv(H_l)) / s_l` with Gaussian `G_l`: the noise
//!    vanishes at the centers and scales with each sample's deviation from
//!    them; `s_l` normalizes it to unit standard deviation per logit at the
//!    states reached when routing by the noisy routers of earlier layers.
//! 5. Draw samples around the centers. A sample's label is the prediction
//!    under its cluster's planted pathway. Samples whose planted-label margin
//!    is below `min_margin`, or on which the noise-free router disagrees with
//!    the plant, are redrawn.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax, gaussian_matrix, random_experts, Input, ModelShape, MoeModel};
use crate::pathway::{OptimizationMask, Pathway, RoutingConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantSpec {
    pub n_clusters: usize,
    /// Router noise scale on the logits.
    pub eta: f64,
    pub pool_size: usize,
    pub test_size: usize,
    /// Jitter of the last token around its cluster center.
    pub jitter: f64,
    /// Jitter of the remaining tokens. They do not reach the readout but
    /// spread the pooled embeddings.
    pub context_jitter: f64,
    pub shape: ModelShape,
    /// Logit gap between planted and non-planted experts.
    pub gate_gap: f64,
    pub expert_input_gain: f64,
    /// Output gain of the last layer's experts.
    pub expert_output_gain: f64,
    /// Each earlier layer's expert output gain is this factor times the next
    /// layer's, so routing mistakes matter most near the readout.
    pub depth_decay: f64,
    pub readout_gain: f64,
    /// Minimum top-1 minus top-2 logit margin under the planted pathway.
    pub min_margin: f64,
}

impl Default for PlantSpec {
    fn default() -> Self {
        Self {
            n_clusters: 8,
            eta: 0.5,
            pool_size: 2000,
            test_size: 500,
            jitter: 0.1,
            context_jitter: 0.9,
            shape: ModelShape::default(),
            gate_gap: 3.0,
            expert_input_gain: 1.0,
            expert_output_gain: 6.0,
            depth_decay: 0.3,
            readout_gain: 5.0,
            min_margin: 0.5,
        }
    }
}

impl PlantSpec {
    pub fn validate(&self, config: &RoutingConfig) -> Result<()> {
        config.validate()?;
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.n_clusters == 0 {
            return bad("n_clusters must be >= 1".into());
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be >= 0, got {}", self.eta));
        }
        for (name, v) in [
            ("jitter", self.jitter),
            ("context_jitter", self.context_jitter),
            ("gate_gap", self.gate_gap),
            ("min_margin", self.min_margin),
            ("depth_decay", self.depth_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be >= 0, got {v}"));
            }
        }
        let s = self.shape;
        if s.d_model == 0 || s.d_hidden == 0 || s.n_classes < 2 {
            return bad("model shape needs d_model, d_hidden >= 1 and n_classes >= 2".into());
        }
        Ok(())
    }
}

/// A labeled input.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Input,
    pub label: usize,
    pub cluster: usize,
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub model: MoeModel,
    pub pool: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Planted pathway per cluster.
    pub planted: Vec<Pathway>,
    pub centers: Vec<DVector<f64>>,
}

impl Benchmark {
    pub fn planted_for(&self, sample: &Sample) -> &Pathway {
        &self.planted[sample.cluster]
    }
}

const STREAM_PARAMS: u64 = 0;
const STREAM_NOISE: u64 = 1;
const STREAM_CALIBRATION: u64 = 2;
const STREAM_POOL: u64 = 3;
const STREAM_TEST: u64 = 4;
const CALIBRATION_PER_CLUSTER: usize = 32;
const MAX_DRAWS_PER_SAMPLE: usize = 1000;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Deterministic in `seed`. Changing only `eta` leaves every other parameter,
/// the noise direction and the sampled inputs unchanged.
pub fn generate_planted_benchmark(seed: u64, spec: &PlantSpec, config: RoutingConfig) -> Result<Benchmark> {
    spec.validate(&config)?;
    let shape = spec.shape;
    let (d, l_count, e_count) = (shape.d_model, config.n_layers, config.n_experts);

    let mut rng = stream(seed, STREAM_PARAMS);
    let gains: Vec<f64> = (0..l_count)
        .map(|l| spec.expert_output_gain * spec.depth_decay.powi((l_count - 1 - l) as i32))
        .collect();
    let experts = random_experts(&mut rng, config, shape, spec.expert_input_gain, &gains);
    let readout = gaussian_matrix(&mut rng, shape.n_classes, d, spec.readout_gain / (d as f64).sqrt());
    // supports[c][l]
    let supports: Vec<Vec<Vec<usize>>> = (0..spec.n_clusters)
        .map(|_| {
            (0..l_count)
                .map(|_| rand::seq::index::sample(&mut rng, e_count, config.top_k).into_vec())
                .collect()
        })
        .collect();

    let planted_logits = |c: usize, l: usize| -> DVector<f64> {
        let mut z = DVector::zeros(e_count);
        for &e in &supports[c][l] {
            z[e] = spec.gate_gap;
        }
        z
    };
    let planted: Vec<Pathway> = (0..spec.n_clusters)
        .map(|c| {
            let mut p = Pathway::zeros(config.dims());
            for l in 0..l_count {
                let row = softmax(&planted_logits(c, l));
                for t in 0..config.n_tokens {
                    p.row_mut(t, l).copy_from_slice(&row);
                }
            }
            p
        })
        .collect();

    let mut model = MoeModel {
        config,
        shape,
        routers: vec![DMatrix::zeros(e_count, d); l_count],
        experts,
        readout,
    };
    let full = OptimizationMask::full(config.dims());

    // Centers are redrawn until their planted label clears twice the sample
    // margin, so that jittered samples around them can be accepted.
    let mut centers = Vec::with_capacity(spec.n_clusters);
    for (c, plant) in planted.iter().enumerate() {
        let mut found = None;
        for _ in 0..MAX_DRAWS_PER_SAMPLE {
            let center = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let input = Input::from_fn(config.n_tokens, d, |_, j| center[j]);
            if label_margin(model.logits_with_pathway(&input, plant, &full)?.as_slice()).1 >= 2.0 * spec.min_margin {
                found = Some(center);
                break;
            }
        }
        centers.push(found.ok_or_else(|| {
            Error::InvalidSpec(format!("no center for cluster {c} reaches margin {}", 2.0 * spec.min_margin))
        })?);
    }

    // Hidden states of the centers entering each layer under the plant.
    let center_states: Vec<Vec<DVector<f64>>> = centers
        .iter()
        .enumerate()
        .map(|(c, center)| layer_inputs(&model, center, &planted[c]))
        .collect::<Result<_>>()?;

    let mut complements = Vec::with_capacity(l_count);
    for l in 0..l_count {
        let h = DMatrix::from_columns(&center_states.iter().map(|s| s[l].clone()).collect::<Vec<_>>());
        let p = DMatrix::from_columns(&(0..spec.n_clusters).map(|c| planted_logits(c, l)).collect::<Vec<_>>());
        let pinv = h
            .clone()
            .pseudo_inverse(1e-10)
            .map_err(|e| Error::Numeric(format!("router fit failed: {e}")))?;
        model.routers[l] = &p * &pinv;
        complements.push(DMatrix::identity(d, d) - &h * &pinv);
    }
    let noise_free = model.clone();

    // Normalize the noise so that eta is its per-logit standard deviation at
    // the states the routed network actually reaches. Layers are calibrated
    // in order because noise in earlier layers moves the later states.
    let mut cal = stream(seed, STREAM_CALIBRATION);
    let calibration: Vec<Input> = centers
        .iter()
        .flat_map(|center| {
            (0..CALIBRATION_PER_CLUSTER)
                .map(|_| {
                    let x = center + DVector::from_fn(d, |_, _| spec.jitter * cal.sample::<f64, _>(StandardNormal));
                    Input::from_fn(config.n_tokens, d, |_, j| x[j])
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let mut noise_rng = stream(seed, STREAM_NOISE);
    for l in 0..l_count {
        let g = gaussian_matrix(&mut noise_rng, e_count, d, 1.0);
        let mut sq = 0.0;
        for input in &calibration {
            let x = input.row(0).transpose();
            let h = &layer_inputs(&model, &x, &model.route(input)?)?[l];
            sq += (&complements[l] * h).norm_squared();
        }
        let scale = (sq / calibration.len() as f64).sqrt();
        let scale = if scale > 1e-9 { scale } else { 1.0 };
        model.routers[l] += (&g * &complements[l]) * (spec.eta / scale);
    }
    model.validate()?;

    let draw = |id: u64, n: usize| -> Result<Vec<Sample>> {
        let mut rng = stream(seed, id);
        (0..n)
            .map(|i| {
                let c = i % spec.n_clusters;
                draw_sample(&mut rng, spec, &noise_free, &centers[c], c, &planted[c], &full)
            })
            .collect()
    };
    let pool = draw(STREAM_POOL, spec.pool_size)?;
    let test = draw(STREAM_TEST, spec.test_size)?;

    Ok(Benchmark {
        model,
        pool,
        test,
        planted,
        centers,
    })
}

fn draw_sample(
    rng: &mut ChaCha8Rng,
    spec: &PlantSpec,
    noise_free: &MoeModel,
    center: &DVector<f64>,
    cluster: usize,
    planted: &Pathway,
    full: &OptimizationMask,
) -> Result<Sample> {
    let t_count = noise_free.config.n_tokens;
    let d = spec.shape.d_model;
    for _ in 0..MAX_DRAWS_PER_SAMPLE {
        let input = Input::from_fn(t_count, d, |t, j| {
            let scale = if t + 1 == t_count { spec.jitter } else { spec.context_jitter };
            center[j] + scale * rng.sample::<f64, _>(StandardNormal)
        });
        let logits = noise_free.logits_with_pathway(&input, planted, full)?;
        let (label, margin) = label_margin(logits.as_slice());
        if margin < spec.min_margin {
            continue;
        }
        if noise_free.predict_base(&input)? != label {
            continue;
        }
        return Ok(Sample {
            input,
            label,
            cluster,
        });
    }
    Err(Error::InvalidSpec(format!(
        "could not draw a sample for cluster {cluster} with margin >= {}",
        spec.min_margin
    )))
}

/// Hidden state entering every layer when a single token `x` is routed by
/// `pathway`'s rows for the last token.
fn layer_inputs(model: &MoeModel, x: &DVector<f64>, pathway: &Pathway) -> Result<Vec<DVector<f64>>> {
    let t = model.config.n_tokens - 1;
    let mut h = x.clone();
    let mut out = Vec::with_capacity(model.config.n_layers);
    for l in 0..model.config.n_layers {
        out.push(h.clone());
        let sparse = crate::pathway::sparsify_topk(pathway.row(t, l), model.config.top_k)?;
        let mut next = h.clone();
        for (&e, &w) in sparse.experts.iter().zip(&sparse.weights) {
            let expert = &model.experts[l][e];
            next.axpy(w, &(&expert.w2 * (&expert.w1 * &h).map(f64::tanh)), 1.0);
        }
        h = next;
    }
    Ok(out)
}

/// Predicted class and its logit lead over the runner-up.
fn label_margin(logits: &[f64]) -> (usize, f64) {
    let label = argmax(logits);
    let runner_up = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != label)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    (label, logits[label] - runner_up)
}

fn softmax(z: &DVector<f64>) -> Vec<f64> {
    let m = z.max();
    let exps: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|v| v / s).collect()
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    cluster: usize,
    label: usize,
    tokens: usize,
    /// Row-major `tokens x width` input, hex-encoded.
    #[serde(with = "crate::hex64::vec")]
    input: Vec<f64>,
}

/// Writes samples as JSON lines, one sample per line.
pub fn save_samples(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        let record = SampleRecord {
            cluster: s.cluster,
            label: s.label,
            tokens: s.input.nrows(),
            input: s.input.transpose().as_slice().to_vec(),
        };
        serde_json::to_writer(&mut w, &record)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_samples(path: &Path) -> Result<Vec<Sample>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let r: SampleRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if r.tokens == 0 || !r.input.len().is_multiple_of(r.tokens) {
            return Err(parse_err(format!("{} values do not fill {} tokens", r.input.len(), r.tokens)));
        }
        out.push(Sample {
            input: Input::from_row_slice(r.tokens, r.input.len() / r.tokens, &r.input),
            label: r.label,
            cluster: r.cluster,
        });
    }
    Ok(out)
}
