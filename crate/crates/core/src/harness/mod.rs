//! Experiment runner: benchmarks per seed, one evaluation per arm, and
//! order-stable CSV/JSON reports.

pub mod ablation;
pub mod analysis;

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::optimizers::{flop_proxy, optimize, Context, Method, OptimizationTrace, OptimizerSpec};
use crate::pathway::RoutingConfig;
use crate::plant::{generate_planted_benchmark, Benchmark, PlantSpec, Sample};
use crate::refstore::{build_reference_set, MeanPoolEmbedder, ReferenceStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    #[serde(default)]
    pub spec: OptimizerSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub plant: PlantSpec,
    #[serde(default)]
    pub routing: RoutingConfig,
    pub arms: Vec<Arm>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<Format>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("reports")
}

fn default_formats() -> Vec<Format> {
    vec![Format::Csv, Format::Json]
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidSpec("experiment needs at least one seed".into()));
        }
        if self.arms.is_empty() {
            return Err(Error::InvalidSpec("experiment needs at least one arm".into()));
        }
        let mut names = BTreeSet::new();
        for arm in &self.arms {
            if !names.insert(arm.name.as_str()) {
                return Err(Error::InvalidSpec(format!("duplicate arm name {:?}", arm.name)));
            }
            arm.spec.validate()?;
        }
        self.plant.validate(&self.routing)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical JSON form. The output directory is not part
    /// of the experiment and is left out.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        let text = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Benchmark and reference store for one seed.
pub struct SeedData {
    pub seed: u64,
    pub bench: Benchmark,
    pub store: ReferenceStore,
    pub embedder: MeanPoolEmbedder,
}

impl SeedData {
    pub fn prepare(seed: u64, plant: &PlantSpec, routing: RoutingConfig) -> Result<Self> {
        let bench = generate_planted_benchmark(seed, plant, routing)?;
        let embedder = MeanPoolEmbedder {
            dim: plant.shape.d_model,
        };
        let store = build_reference_set(&bench.model, &bench.pool, &embedder, Some(seed))?;
        Ok(Self {
            seed,
            bench,
            store,
            embedder,
        })
    }

    pub fn context(&self) -> Context<'_> {
        Context {
            model: &self.bench.model,
            store: Some(&self.store),
            embedder: &self.embedder,
        }
    }
}

/// Runs `spec` on every sample, in parallel; traces come back in sample order.
pub fn evaluate(ctx: &Context<'_>, samples: &[Sample], spec: &OptimizerSpec) -> Result<Vec<OptimizationTrace>> {
    spec.validate()?;
    samples
        .par_iter()
        .map(|s| optimize(ctx, s, spec).map(|(_, trace)| trace))
        .collect()
}

/// One arm on one seed. Metric fields are empty when the seed failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub arm: String,
    pub seed: u64,
    pub method: String,
    pub accuracy: Option<f64>,
    /// Mean over samples of the last step's objective (surrogate loss for
    /// ngd and kernel regression, true loss for the oracle, kernel density
    /// for mode finding).
    pub mean_objective: Option<f64>,
    pub mean_steps_to_best: Option<f64>,
    /// Measured forward-pass equivalents per sample.
    pub forward_passes: Option<f64>,
    pub flop_proxy: Option<f64>,
    pub no_neighbor_rate: Option<f64>,
    pub error: Option<String>,
}

impl ReportRow {
    fn failed(arm: &Arm, seed: u64, err: &Error) -> Self {
        Self {
            arm: arm.name.clone(),
            seed,
            method: arm.spec.method.to_string(),
            accuracy: None,
            mean_objective: None,
            mean_steps_to_best: None,
            forward_passes: None,
            flop_proxy: None,
            no_neighbor_rate: None,
            error: Some(err.to_string()),
        }
    }

    pub fn from_traces(arm: &Arm, seed: u64, samples: &[Sample], traces: &[OptimizationTrace], flops: f64) -> Self {
        let n = traces.len().max(1) as f64;
        let correct = samples
            .iter()
            .zip(traces)
            .filter(|(s, t)| t.final_prediction() == s.label)
            .count();
        let objectives: Vec<f64> = traces.iter().filter_map(|t| t.steps.last().map(|s| s.objective)).collect();
        let mean_objective = (!objectives.is_empty()).then(|| objectives.iter().sum::<f64>() / objectives.len() as f64);
        Self {
            arm: arm.name.clone(),
            seed,
            method: arm.spec.method.to_string(),
            accuracy: Some(correct as f64 / n),
            mean_objective,
            mean_steps_to_best: Some(traces.iter().map(|t| t.steps_to_best() as f64).sum::<f64>() / n),
            forward_passes: Some(traces.iter().map(|t| t.forward_equivalents() as f64).sum::<f64>() / n),
            flop_proxy: Some(flops),
            no_neighbor_rate: Some(traces.iter().filter(|t| t.no_neighbor).count() as f64 / n),
            error: None,
        }
    }
}

/// Per-arm aggregate over the seeds that completed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub method: String,
    pub seeds_ok: usize,
    pub seeds_failed: usize,
    pub mean_accuracy: Option<f64>,
    /// Population standard deviation.
    pub std_accuracy: Option<f64>,
    pub flop_proxy: f64,
    pub mean_no_neighbor_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<ReportRow>,
    pub summary: Vec<ArmSummary>,
}

impl Report {
    pub fn summary_for(&self, arm: &str) -> Option<&ArmSummary> {
        self.summary.iter().find(|s| s.arm == arm)
    }

    /// `# config_hash=<hex> seeds=<comma list>`.
    pub fn header_comment(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        format!("# config_hash={} seeds={}", self.config_hash, seeds.join(","))
    }
}

pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

fn summarize(cfg: &ExperimentConfig, rows: &[ReportRow]) -> Vec<ArmSummary> {
    cfg.arms
        .iter()
        .map(|arm| {
            let mine: Vec<&ReportRow> = rows.iter().filter(|r| r.arm == arm.name).collect();
            let acc: Vec<f64> = mine.iter().filter_map(|r| r.accuracy).collect();
            let nn: Vec<f64> = mine.iter().filter_map(|r| r.no_neighbor_rate).collect();
            let stats = mean_std(&acc);
            ArmSummary {
                arm: arm.name.clone(),
                method: arm.spec.method.to_string(),
                seeds_ok: acc.len(),
                seeds_failed: mine.len() - acc.len(),
                mean_accuracy: stats.map(|s| s.0),
                std_accuracy: stats.map(|s| s.1),
                flop_proxy: flop_proxy(&arm.spec, &cfg.routing, &cfg.plant.shape),
                mean_no_neighbor_rate: mean_std(&nn).map(|s| s.0),
            }
        })
        .collect()
}

/// Evaluates every arm on every seed. A failing seed yields error rows for
/// its arms and does not stop the others.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let mut rows = Vec::with_capacity(cfg.seeds.len() * cfg.arms.len());
    for &seed in &cfg.seeds {
        let data = match SeedData::prepare(seed, &cfg.plant, cfg.routing) {
            Ok(d) => d,
            Err(e) => {
                log::warn!("seed {seed} failed: {e}");
                rows.extend(cfg.arms.iter().map(|arm| ReportRow::failed(arm, seed, &e)));
                continue;
            }
        };
        let ctx = data.context();
        for arm in &cfg.arms {
            let flops = flop_proxy(&arm.spec, &cfg.routing, &cfg.plant.shape);
            let row = match evaluate(&ctx, &data.bench.test, &arm.spec) {
                Ok(traces) => ReportRow::from_traces(arm, seed, &data.bench.test, &traces, flops),
                Err(e) => {
                    log::warn!("arm {} on seed {seed} failed: {e}", arm.name);
                    ReportRow::failed(arm, seed, &e)
                }
            };
            log::info!("seed {seed} arm {}: accuracy {:?}", arm.name, row.accuracy);
            rows.push(row);
        }
    }
    let summary = summarize(cfg, &rows);
    Ok(Report {
        config_hash: cfg.hash(),
        seeds: cfg.seeds.clone(),
        rows,
        summary,
    })
}

/// Writes a headed CSV table: the header comment line, then RFC 4180 rows.
pub fn write_csv<T: Serialize>(path: &Path, header: &str, rows: &[T]) -> Result<()> {
    let mut file = BufWriter::new(File::create(path)?);
    writeln!(file, "{header}")?;
    {
        let mut w = csv::Writer::from_writer(&mut file);
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    file.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut file = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut file, value)?;
    file.write_all(b"\n")?;
    file.flush()?;
    Ok(())
}

/// Writes `results.csv` and `summary.csv` and/or `report.json` into `dir`.
pub fn write_report(report: &Report, dir: &Path, formats: &[Format]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let header = report.header_comment();
    if formats.contains(&Format::Csv) {
        let rows = dir.join("results.csv");
        write_csv(&rows, &header, &report.rows)?;
        let summary = dir.join("summary.csv");
        write_csv(&summary, &header, &report.summary)?;
        written.extend([rows, summary]);
    }
    if formats.contains(&Format::Json) {
        let path = dir.join("report.json");
        write_json(&path, report)?;
        written.push(path);
    }
    Ok(written)
}

/// The five-arm method comparison with default settings.
pub fn method_arms() -> Vec<Arm> {
    [Method::None, Method::ModeFinding, Method::KernelRegression, Method::Ngd, Method::Oracle]
        .into_iter()
        .map(|m| Arm {
            name: m.to_string(),
            spec: OptimizerSpec::with_method(m),
        })
        .collect()
}
