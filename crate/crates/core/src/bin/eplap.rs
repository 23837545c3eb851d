use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use eplap::dataset::{load_features_csv, make_two_moons, mask_labels, CsvSchema, Dataset};
use eplap::ensemble::CandidateSet;
use eplap::eval::{accuracy, average_precision, mean_average_precision, RankedScores};
use eplap::experiment::{
    cmd_experiment, cmd_pgrid_validate, cmd_plap_cache, obtain_plap, ExperimentConfig, CACHE_DIR_ENV,
};
use eplap::graph::{build_knn_graph, laplacian, Graph, GraphSpec, WeightScheme};
use eplap::kernel::{KernelKind, KernelSpec, DEFAULT_JITTER};
use eplap::learn::{train_one_vs_rest, LossKind, ModelFile, RegParams, TrainConfig};
use eplap::linalg::Bandwidth;
use eplap::plap::{default_embed_dim, PLapConfig};
use eplap::{Error, Result};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "eplap", version, about = "Ensemble p-Laplacian semi-supervised classifiers")]
struct Cli {
    /// Log at info level (RUST_LOG takes precedence).
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a two-moons dataset as CSV.
    Gen {
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 0.08)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a kNN graph from a CSV and dump it as COO text.
    Graph {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        csv: CsvArgs,
        #[command(flatten)]
        graph: GraphArgs,
        /// Defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute or verify cached p-Laplacians for every p in the config's p_grid.
    PlapCache {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train one-vs-rest classifiers on a CSV and save the model as JSON.
    Train(TrainArgs),
    /// Score a saved model on a labeled CSV.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        csv: CsvArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every method × labeled fraction × repetition cell of a config.
    Experiment {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        csv_output: Option<PathBuf>,
        #[arg(long)]
        repetitions: Option<usize>,
        /// `kls` or `svm`.
        #[arg(long)]
        loss: Option<String>,
    },
    /// Sweep the p_grid with single-candidate regularization and report the best p.
    Pgrid {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        validation_fraction: Option<f64>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment config; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = CACHE_DIR_ENV)]
    cache_dir: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if self.cache_dir.is_some() {
            cfg.cache_dir = self.cache_dir.clone();
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct CsvArgs {
    #[arg(long, default_value = "label")]
    label_column: String,
    /// Used when present in the header.
    #[arg(long, default_value = "id")]
    id_column: String,
}

impl CsvArgs {
    fn load(&self, path: &Path) -> Result<Dataset> {
        load_features_csv(
            path,
            &CsvSchema {
                label_column: self.label_column.clone(),
                id_column: Some(self.id_column.clone()),
            },
        )
    }
}

#[derive(Args)]
struct GraphArgs {
    #[arg(long, default_value_t = 10)]
    k_neighbors: usize,
    /// `heat` or `binary`.
    #[arg(long, default_value = "heat")]
    weight_scheme: WeightScheme,
    /// `auto` or a positive number.
    #[arg(long, default_value = "auto")]
    graph_bandwidth: Bandwidth,
}

impl GraphArgs {
    fn spec(&self) -> GraphSpec {
        GraphSpec {
            k_neighbors: self.k_neighbors,
            weight_scheme: self.weight_scheme,
            bandwidth: self.graph_bandwidth,
            ..Default::default()
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    csv: CsvArgs,
    #[command(flatten)]
    graph: GraphArgs,
    /// Share of each class that keeps its label; the rest train as unlabeled.
    #[arg(long, default_value_t = 1.0)]
    labeled_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Candidate p values, comma separated. Empty uses the standard Laplacian.
    #[arg(long, value_delimiter = ',')]
    p: Vec<f64>,
    #[arg(long)]
    embed_dim: Option<usize>,
    /// `kls` or `svm`.
    #[arg(long, default_value = "kls")]
    loss: String,
    #[arg(long, default_value_t = 1e-4)]
    gamma_a: f64,
    #[arg(long, default_value_t = 1.0)]
    gamma_i: f64,
    #[arg(long, default_value_t = 2.0)]
    gamma_exp: f64,
    /// `rbf` or `linear`.
    #[arg(long, default_value = "rbf")]
    kernel: KernelKind,
    #[arg(long, default_value = "auto")]
    kernel_bandwidth: Bandwidth,
    #[arg(long, default_value_t = DEFAULT_JITTER)]
    jitter: f64,
    #[arg(long, env = CACHE_DIR_ENV)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_loss(s: &str) -> Result<LossKind> {
    match s {
        "kls" | "squared" => Ok(LossKind::Squared),
        "svm" | "hinge" => Ok(LossKind::Hinge),
        other => Err(Error::InvalidArgument(format!("unknown loss `{other}`; use kls or svm"))),
    }
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(path) => std::fs::write(path, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    n: usize,
    per_class_ap: Vec<(usize, f64)>,
    map: f64,
    accuracy: f64,
}

fn train(args: &TrainArgs) -> Result<()> {
    let ds = mask_labels(&args.csv.load(&args.data)?, args.labeled_fraction, args.seed)?;
    let g = build_knn_graph(ds.features(), &args.graph.spec())?;
    let cands = if args.p.is_empty() {
        CandidateSet::new(vec![laplacian(&g)], vec![2.0])?
    } else {
        let k = args.embed_dim.unwrap_or_else(|| default_embed_dim(g.n()));
        let mats = args
            .p
            .iter()
            .map(|&p| {
                let cfg = PLapConfig {
                    embed_dim: Some(k),
                    ..PLapConfig::with_p(p)
                };
                obtain_plap(&g, &cfg, args.cache_dir.as_deref()).map(|r| r.0)
            })
            .collect::<Result<Vec<_>>>()?;
        CandidateSet::new(mats, args.p.clone())?
    };
    let kspec = KernelSpec {
        kind: args.kernel,
        bandwidth: args.kernel_bandwidth,
        jitter: args.jitter,
    };
    let params = RegParams::new(args.gamma_a, args.gamma_i)?;
    let model = train_one_vs_rest(
        &ds,
        &cands,
        &kspec,
        &params,
        args.gamma_exp,
        &TrainConfig::default(),
        parse_loss(&args.loss)?,
    )?;
    for (c, m) in model.classes.iter().zip(&model.models) {
        log::info!("class {c}: μ = {:?}, {} outer iterations", m.mu, m.iterations);
    }
    ModelFile::from_ovr(&model)?.save(&args.out)
}

fn evaluate(model: &Path, data: &Path, csv: &CsvArgs, out: Option<&Path>) -> Result<()> {
    let model = ModelFile::load(model)?.into_ovr()?;
    let ds = csv.load(data)?;
    let scores = model.scores(ds.features())?;
    let mut per_class_ap = Vec::new();
    for (c, &class) in model.classes.iter().enumerate() {
        let rel: Vec<bool> = ds.labels().iter().map(|&l| l == class).collect();
        if rel.iter().any(|&r| r) {
            let rs = RankedScores::new(scores.column(c).iter().copied().collect(), rel)?;
            per_class_ap.push((class, average_precision(&rs)?));
        }
    }
    let report = EvalReport {
        n: ds.len(),
        map: mean_average_precision(&per_class_ap.iter().map(|a| a.1).collect::<Vec<_>>())?,
        accuracy: accuracy(&model.decide(&scores), ds.labels())?,
        per_class_ap,
    };
    emit(&report, out)
}

fn write_graph(g: &Graph, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => {
            let mut w = BufWriter::new(File::create(path)?);
            g.write_coo(&mut w)?;
            w.flush()?;
        }
        None => g.write_coo(std::io::stdout().lock())?,
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gen { n, noise, seed, out } => {
            make_two_moons(n, noise, seed)?.write_csv(&out)?;
        }
        Command::Graph {
            data,
            csv,
            graph,
            out,
        } => {
            let g = build_knn_graph(csv.load(&data)?.features(), &graph.spec())?;
            eprintln!("{} nodes, {} edges, digest {}", g.n(), g.n_edges(), g.digest_hex());
            write_graph(&g, out.as_deref())?;
            if let Some(path) = &out {
                // Parse the dump back so a bad write fails here.
                Graph::read_coo(BufReader::new(File::open(path)?))?;
            }
        }
        Command::PlapCache { run } => {
            let report = cmd_plap_cache(&run.load()?)?;
            emit(&report, None)?;
        }
        Command::Train(args) => train(&args)?,
        Command::Eval {
            model,
            data,
            csv,
            out,
        } => evaluate(&model, &data, &csv, out.as_deref())?,
        Command::Experiment {
            run,
            output,
            csv_output,
            repetitions,
            loss,
        } => {
            let mut cfg = run.load()?;
            if let Some(r) = repetitions {
                cfg.repetitions = r;
                cfg.seeds.clear();
            }
            if let Some(l) = loss {
                cfg.loss = parse_loss(&l)?;
            }
            let output = output.or(cfg.output.clone());
            let csv_output = csv_output.or(cfg.csv_output.clone());
            let report = cmd_experiment(&cfg)?;
            match &output {
                Some(path) => report.write(path, csv_output.as_deref())?,
                None => emit(&report, None)?,
            }
            let failed = report.failed_cells();
            if failed > 0 {
                eprintln!("{failed} of {} cells failed", report.payload.cells.len());
                return Ok(false);
            }
        }
        Command::Pgrid {
            run,
            output,
            validation_fraction,
        } => {
            let mut cfg = run.load()?;
            if let Some(f) = validation_fraction {
                cfg.validation_fraction = f;
            }
            let report = cmd_pgrid_validate(&cfg)?;
            emit(&report, output.as_deref())?;
            if report.failed_cells > 0 {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
