use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context as _, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use moe_pathway::harness::ablation::AblationGrid;
use moe_pathway::harness::analysis::{coverage_analysis, cost_table, expert_heatmap, frequency_entropy, step_curve};
use moe_pathway::harness::{evaluate, method_arms, run_experiment, write_csv, write_report, ExperimentConfig, SeedData};
use moe_pathway::kernels::KernelSpec;
use moe_pathway::model::MoeModel;
use moe_pathway::neighborhood::{Selection, Space};
use moe_pathway::optimizers::{Method, OptimizerSpec};
use moe_pathway::pathway::{LayerSelect, RoutingConfig, TokenSelect};
use moe_pathway::plant::{generate_planted_benchmark, load_samples, save_samples, PlantSpec};
use moe_pathway::refstore::{self, build_reference_set, MeanPoolEmbedder};
use moe_pathway::schedule::LrSchedule;

const EXIT_USAGE: u8 = 1;
const EXIT_VERIFICATION: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "pathopt", version, about = "Test-time expert-pathway optimization on planted MoE benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Planted benchmarks.
    Bench {
        #[command(subcommand)]
        action: BenchAction,
    },
    /// Reference stores.
    Refstore {
        #[command(subcommand)]
        action: RefstoreAction,
    },
    /// Run an experiment config and write its reports.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Expand an ablation grid into arms and run it.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-step, heatmap, coverage and cost analyses.
    Analyze {
        #[arg(value_enum)]
        kind: AnalysisKind,
        #[command(flatten)]
        bench: BenchArgs,
        #[command(flatten)]
        spec: SpecArgs,
        /// Layers for the heatmap (comma list; default all).
        #[arg(long, value_delimiter = ',')]
        heatmap_layers: Vec<usize>,
        /// Top-n values for coverage (comma list; default top_k..=E).
        #[arg(long, value_delimiter = ',')]
        n: Vec<usize>,
        /// Experiment config whose arms the cost table lists (default: the
        /// five methods).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum BenchAction {
    /// Write model.json, pool.jsonl and test.jsonl for one seed.
    Gen {
        #[command(flatten)]
        bench: BenchArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum RefstoreAction {
    /// Build a store from a generated benchmark directory.
    Build {
        #[arg(long)]
        bench: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a store file, optionally against the model it was built with.
    Verify {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AnalysisKind {
    Steps,
    Heatmap,
    Coverage,
    Cost,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    pool_size: Option<usize>,
    #[arg(long)]
    test_size: Option<usize>,
}

impl BenchArgs {
    fn plant(&self) -> PlantSpec {
        let mut p = PlantSpec::default();
        if let Some(v) = self.eta {
            p.eta = v;
        }
        if let Some(v) = self.clusters {
            p.n_clusters = v;
        }
        if let Some(v) = self.pool_size {
            p.pool_size = v;
        }
        if let Some(v) = self.test_size {
            p.test_size = v;
        }
        p
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum KernelKind {
    Gaussian,
    Matern,
    Polynomial,
    Linear,
}

#[derive(Clone, Copy, ValueEnum)]
enum NeighborhoodKind {
    Knn,
    Eps,
}

#[derive(Clone, Copy, ValueEnum)]
enum SpaceKind {
    Embedding,
    Pathway,
}

/// Optimizer flags; anything unset keeps its default.
#[derive(Args)]
struct SpecArgs {
    #[arg(long, default_value = "ngd")]
    method: String,
    #[arg(long)]
    steps: Option<usize>,
    /// fixed:1e-3 | step:1e-2:0.1:3 | cosine:1e-2:1e-5
    #[arg(long)]
    lr: Option<String>,
    #[arg(long, value_delimiter = ',')]
    alpha_grid: Option<Vec<f64>>,
    #[arg(long)]
    ms_iters: Option<usize>,
    #[arg(long)]
    ms_alpha: Option<f64>,
    #[arg(long, value_enum)]
    kernel: Option<KernelKind>,
    #[arg(long)]
    bandwidth: Option<f64>,
    #[arg(long)]
    degree: Option<u32>,
    #[arg(long)]
    offset: Option<f64>,
    #[arg(long, value_enum)]
    neighborhood: Option<NeighborhoodKind>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    dedup_threshold: Option<f64>,
    #[arg(long, value_enum)]
    space: Option<SpaceKind>,
    /// last:1 | first:2 | all | 0,3
    #[arg(long)]
    tokens: Option<String>,
    /// L3 | F2L3 | M1 | all | 0,5
    #[arg(long)]
    layers: Option<String>,
    #[arg(long)]
    core_experts: Option<usize>,
}

impl SpecArgs {
    fn spec(&self) -> Result<OptimizerSpec> {
        let mut s = OptimizerSpec::with_method(self.method.parse::<Method>()?);
        if let Some(v) = self.steps {
            s.steps = v;
        }
        if let Some(v) = &self.lr {
            s.lr = v.parse::<LrSchedule>()?;
        }
        if let Some(v) = &self.alpha_grid {
            s.alpha_grid = v.clone();
        }
        if let Some(v) = self.ms_iters {
            s.meanshift_iters = v;
        }
        if let Some(v) = self.ms_alpha {
            s.meanshift_alpha = v;
        }
        if let Some(kind) = self.kernel {
            s.kernel = match kind {
                KernelKind::Gaussian => KernelSpec::Gaussian {
                    bandwidth: self.bandwidth,
                },
                KernelKind::Matern => KernelSpec::Matern {
                    bandwidth: self.bandwidth,
                },
                KernelKind::Polynomial => KernelSpec::Polynomial {
                    degree: self.degree.unwrap_or(2),
                    offset: self.offset.unwrap_or(1.0),
                },
                KernelKind::Linear => KernelSpec::Linear,
            };
        } else if self.bandwidth.is_some() {
            s.kernel = KernelSpec::Gaussian {
                bandwidth: self.bandwidth,
            };
        }
        match self.neighborhood {
            Some(NeighborhoodKind::Eps) => {
                let Some(epsilon) = self.epsilon else {
                    bail!("--neighborhood eps needs --epsilon");
                };
                s.neighborhood.selection = Selection::EpsBall { epsilon };
            }
            Some(NeighborhoodKind::Knn) | None => {
                if let Some(k) = self.k {
                    s.neighborhood.selection = Selection::Knn { k };
                }
            }
        }
        if let Some(v) = self.dedup_threshold {
            s.neighborhood.dedup_threshold = v;
        }
        if let Some(v) = self.space {
            s.neighborhood.space = match v {
                SpaceKind::Embedding => Space::Embedding,
                SpaceKind::Pathway => Space::Pathway,
            };
        }
        if let Some(v) = &self.tokens {
            s.mask.tokens = v.parse::<TokenSelect>()?;
        }
        if let Some(v) = &self.layers {
            s.mask.layers = v.parse::<LayerSelect>()?;
        }
        if let Some(v) = self.core_experts {
            s.mask.core_experts = v;
        }
        s.validate()?;
        Ok(s)
    }
}

fn bench_gen(args: &BenchArgs, out: &Path) -> Result<()> {
    let plant = args.plant();
    let routing = RoutingConfig::default();
    let bench = generate_planted_benchmark(args.seed, &plant, routing)?;
    std::fs::create_dir_all(out)?;
    bench.model.save(&out.join("model.json"))?;
    save_samples(&out.join("pool.jsonl"), &bench.pool)?;
    save_samples(&out.join("test.jsonl"), &bench.test)?;
    let meta = serde_json::json!({ "seed": args.seed, "plant": plant, "routing": routing });
    std::fs::write(out.join("bench.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
    println!(
        "wrote {} pool and {} test samples to {}",
        bench.pool.len(),
        bench.test.len(),
        out.display()
    );
    Ok(())
}

fn refstore_build(bench: &Path, out: &Path) -> Result<()> {
    let model = MoeModel::load(&bench.join("model.json"))?;
    let pool = load_samples(&bench.join("pool.jsonl"))?;
    let seed = std::fs::read_to_string(bench.join("bench.json"))
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .and_then(|v| v["seed"].as_u64());
    let embedder = MeanPoolEmbedder {
        dim: model.shape.d_model,
    };
    let store = build_reference_set(&model, &pool, &embedder, seed)?;
    refstore::save(&store, out)?;
    println!("{} entries, digest {}", store.len(), store.digest());
    Ok(())
}

fn refstore_verify(store: &Path, model: Option<&Path>) -> Result<()> {
    let s = refstore::load(store)?;
    refstore::check_decimal_payloads(store)?;
    let model = model.map(MoeModel::load).transpose()?;
    s.verify(model.as_ref())?;
    println!("ok: {} entries, digest {}", s.len(), s.digest());
    Ok(())
}

fn run_config(mut cfg: ExperimentConfig, out: Option<PathBuf>) -> Result<()> {
    if let Some(out) = out {
        cfg.output_dir = out;
    }
    let report = run_experiment(&cfg)?;
    for s in &report.summary {
        match (s.mean_accuracy, s.std_accuracy) {
            (Some(m), Some(sd)) => println!("{:<32} {:.4} ± {:.4}", s.arm, m, sd),
            _ => println!("{:<32} failed on every seed", s.arm),
        }
    }
    for path in write_report(&report, &cfg.output_dir, &cfg.formats)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn analyze(
    kind: AnalysisKind,
    bench: &BenchArgs,
    spec: &SpecArgs,
    heatmap_layers: &[usize],
    n: &[usize],
    config: Option<&Path>,
    out: &Path,
) -> Result<()> {
    if let AnalysisKind::Cost = kind {
        let (arms, routing, shape) = match config {
            Some(p) => {
                let cfg = ExperimentConfig::load(p)?;
                (cfg.arms, cfg.routing, cfg.plant.shape)
            }
            None => (method_arms(), RoutingConfig::default(), PlantSpec::default().shape),
        };
        let rows = cost_table(&arms, &routing, &shape);
        write_csv(out, "# cost in multiply-accumulates per test sample", &rows)?;
        println!("wrote {}", out.display());
        return Ok(());
    }
    let spec = spec.spec()?;
    let plant = bench.plant();
    let data = SeedData::prepare(bench.seed, &plant, RoutingConfig::default())?;
    let ctx = data.context();
    let test = &data.bench.test;
    let header = format!("# seed={} method={} eta={}", bench.seed, spec.method, plant.eta);
    match kind {
        AnalysisKind::Steps => {
            let points = step_curve(&ctx, test, &spec)?;
            for p in &points {
                println!("step {:>2}: accuracy {:.4}", p.step, p.accuracy);
            }
            write_csv(out, &header, &points)?;
        }
        AnalysisKind::Heatmap => {
            let config = data.bench.model.config;
            let layers: Vec<usize> = if heatmap_layers.is_empty() {
                (0..config.n_layers).collect()
            } else {
                heatmap_layers.to_vec()
            };
            let before = test
                .iter()
                .map(|s| data.bench.model.route(&s.input))
                .collect::<moe_pathway::Result<Vec<_>>>()?;
            let after: Vec<_> = evaluate(&ctx, test, &spec)?.into_iter().map(|t| t.final_pathway).collect();
            let rows = expert_heatmap(&before, &after, &layers, config.top_k)?;
            for &l in &layers {
                let b: Vec<f64> = rows.iter().filter(|r| r.layer == l).map(|r| r.before).collect();
                let a: Vec<f64> = rows.iter().filter(|r| r.layer == l).map(|r| r.after).collect();
                println!(
                    "layer {l}: entropy {:.4} -> {:.4}",
                    frequency_entropy(&b),
                    frequency_entropy(&a)
                );
            }
            write_csv(out, &header, &rows)?;
        }
        AnalysisKind::Coverage => {
            let config = data.bench.model.config;
            let n_values: Vec<usize> = if n.is_empty() {
                (config.top_k..=config.n_experts).collect()
            } else {
                n.to_vec()
            };
            let points = coverage_analysis(&ctx, test, &spec, &n_values)?;
            for p in &points {
                println!("top-{:>2}: {:.4}", p.n, p.coverage);
            }
            write_csv(out, &header, &points)?;
        }
        AnalysisKind::Cost => unreachable!("handled above"),
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Bench {
            action: BenchAction::Gen { bench, out },
        } => bench_gen(&bench, &out),
        Command::Refstore { action } => match action {
            RefstoreAction::Build { bench, out } => refstore_build(&bench, &out),
            RefstoreAction::Verify { store, model } => refstore_verify(&store, model.as_deref()),
        },
        Command::Run { config, out } => {
            let cfg = ExperimentConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            run_config(cfg, out)
        }
        Command::Ablate { grid, out } => {
            let text = std::fs::read_to_string(&grid).with_context(|| format!("reading {}", grid.display()))?;
            let grid: AblationGrid = serde_json::from_str(&text)?;
            run_config(grid.experiment()?, out)
        }
        Command::Analyze {
            kind,
            bench,
            spec,
            heatmap_layers,
            n,
            config,
            out,
        } => analyze(kind, &bench, &spec, &heatmap_layers, &n, config.as_deref(), &out),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use moe_pathway::Error as E;
    match err.chain().find_map(|e| e.downcast_ref::<E>()) {
        Some(E::Verification(_) | E::Schema(_) | E::Parse { .. }) => EXIT_VERIFICATION,
        Some(E::Numeric(_) | E::DegenerateEmbedding) => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
