//! Command-line front end.
//!
//! Every subcommand writes its artifact to `--out` and a manifest next to
//! it (`<out>.manifest.json`) holding the fully resolved configuration and
//! format versions. Nothing time-dependent goes into artifacts or
//! manifests, so equal manifests mean equal outputs.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::cluster::{cluster_links, sweep_threshold, threshold_grid, ClusterPartition, LinkageSet};
use crate::data::io::{load_features, load_graph, load_labels, save_features, save_graph, FORMAT_VERSION};
use crate::data::{generate, SyntheticSpec};
use crate::error::{LinkError, Result};
use crate::graph::{build_knn, FeatureStore, NeighborGraph};
use crate::metrics::{auc, evaluate, roc_points, write_roc};
use crate::model::{enhance_all, Variant};
use crate::numcore::checkpoint::CHECKPOINT_VERSION;
use crate::pipeline::{ablate, load_model, save_model, score_graph, write_ablation};
use crate::train::{train_with, write_trace, OptimizerKind, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "ctxlink", version, about = "Transformer linkage clustering of embeddings")]
pub struct Cli {
    /// Worker threads for the parallel stages.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate a labeled synthetic embedding set.
    GenData(GenDataArgs),
    /// Build and cache exact KNN neighbor lists.
    BuildKnn(BuildKnnArgs),
    /// Train a model variant and write a checkpoint.
    Train(TrainArgs),
    /// Score every node's candidates and write the links CSV.
    Predict(PredictArgs),
    /// Threshold links and write the cluster assignment.
    Cluster(ClusterArgs),
    /// Score a cluster assignment against labels.
    Evaluate(EvaluateArgs),
    /// Evaluate a grid of thresholds.
    Sweep(SweepArgs),
    /// ROC curve of the link scores.
    Roc(RocArgs),
    /// Train and compare all model variants.
    Ablate(AblateArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    /// TOML generator spec; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub identities: Option<usize>,
    #[arg(long)]
    pub samples_min: Option<usize>,
    #[arg(long)]
    pub samples_max: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub sigma_clean: Option<f64>,
    #[arg(long)]
    pub hard_fraction: Option<f64>,
    #[arg(long)]
    pub sigma_hard: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Label file; defaults to the output path with a `.labels` extension.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct HopArgs {
    #[arg(long, default_value_t = 20)]
    pub hop1: usize,
    #[arg(long, default_value_t = 5)]
    pub hop2: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct BuildKnnArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[command(flatten)]
    pub hops: HopArgs,
    #[arg(long)]
    pub out: PathBuf,
}

/// Training hyper-parameters; unset flags fall back to `--config`, then to
/// built-in defaults.
#[derive(Debug, Args, Serialize)]
pub struct HyperArgs {
    /// TOML training config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    /// sgd or adamw.
    #[arg(long)]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub head_dim: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    /// Classifier hidden width.
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub query_in_predictor: Option<bool>,
    /// Random rotation of the features at every training step.
    #[arg(long)]
    pub rotate: Option<bool>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl HyperArgs {
    fn resolve(&self, hop1: usize, hop2: usize) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| LinkError::io(path, e))?;
                toml::from_str(&text).map_err(|e| LinkError::format(0, format!("{}: {e}", path.display())))?
            }
            None => TrainConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {$(
                if let Some(v) = self.$flag { cfg.$field = v; }
            )*};
        }
        set!(epochs => epochs, batch_size => batch_size, lr => base_lr, warmup_steps => warmup_steps,
             weight_decay => weight_decay, momentum => momentum, optimizer => optimizer, dropout => dropout,
             heads => heads, head_dim => head_dim, depth => depth, rotate => rotate, query_in_predictor => query_in_predictor, seed => seed);
        if self.hidden.is_some() {
            cfg.hidden = self.hidden;
        }
        cfg.hop1 = hop1;
        cfg.hop2 = hop2;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// Cached graph; built from --hop1/--hop2 when absent.
    #[arg(long)]
    pub graph: Option<PathBuf>,
    #[command(flatten)]
    pub hops: HopArgs,
    #[arg(long, default_value = "full")]
    pub variant: Variant,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Also write `<out>.epoch<N>` every this many epochs.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub graph: Option<PathBuf>,
    #[command(flatten)]
    pub hops: HopArgs,
    /// Required unless --variant naive.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Checked against the checkpoint when both are given.
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Also write the enhanced features as CSV.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ClusterArgs {
    #[arg(long)]
    pub links: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,
    /// Node count is taken from this store; otherwise from the links.
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub partition: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub links: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// `lo:hi:step` or a comma-separated list.
    #[arg(long, default_value = "0.01:0.99:0.01")]
    pub tau_grid: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct RocArgs {
    #[arg(long)]
    pub links: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, default_value_t = 80)]
    pub top_k: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct AblateArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// Held-out evaluation set; the training set is reused when absent.
    #[arg(long)]
    pub test_features: Option<PathBuf>,
    #[arg(long)]
    pub test_labels: Option<PathBuf>,
    #[command(flatten)]
    pub hops: HopArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[arg(long, default_value = "0.01:0.99:0.01")]
    pub tau_grid: String,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parse `lo:hi:step` or `a,b,c`.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let bad = || LinkError::Usage(format!("bad threshold grid {text:?}"));
    let grid = if let [lo, hi, step] = text.split(':').collect::<Vec<_>>()[..] {
        let (lo, hi, step): (f64, f64, f64) = (
            lo.trim().parse().map_err(|_| bad())?,
            hi.trim().parse().map_err(|_| bad())?,
            step.trim().parse().map_err(|_| bad())?,
        );
        if !(step > 0.0) || hi < lo {
            return Err(bad());
        }
        threshold_grid(lo, hi, ((hi - lo) / step).round() as usize + 1)
    } else {
        text.split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?
    };
    if grid.is_empty() || grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(LinkError::Config(format!("threshold grid {text:?} must lie in [0, 1]")));
    }
    Ok(grid)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| LinkError::io(path, e))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w).and_then(|_| w.flush()).map_err(|e| LinkError::io(path, e))
}

fn write_manifest(out: &Path, command: &Command, workers: usize, extra: serde_json::Value) -> Result<()> {
    let manifest = json!({
        "tool": "ctxlink",
        "version": env!("CARGO_PKG_VERSION"),
        "workers": workers,
        "command": command,
        "resolved": extra,
        "formats": {
            "features": FORMAT_VERSION,
            "labels": FORMAT_VERSION,
            "graph": FORMAT_VERSION,
            "checkpoint": CHECKPOINT_VERSION,
        },
    });
    let text = serde_json::to_string_pretty(&manifest).expect("manifest is valid JSON");
    write_with(&sibling(out, ".manifest.json"), |w| writeln!(w, "{text}"))
}

fn graph_for(store: &FeatureStore, cached: Option<&Path>, hops: &HopArgs) -> Result<NeighborGraph> {
    match cached {
        Some(path) => {
            let g = load_graph(path)?;
            if g.len() != store.len() {
                return Err(LinkError::Usage(format!(
                    "graph {} covers {} nodes, features have {}",
                    path.display(),
                    g.len(),
                    store.len()
                )));
            }
            Ok(g)
        }
        None => build_knn(store, hops.hop1, hops.hop2),
    }
}

fn execute(command: &Command, workers: usize) -> Result<()> {
    match command {
        Command::GenData(a) => {
            let mut spec = match &a.config {
                Some(path) => {
                    SyntheticSpec::from_toml(&std::fs::read_to_string(path).map_err(|e| LinkError::io(path, e))?)?
                }
                None => SyntheticSpec::default(),
            };
            macro_rules! set {
                ($($f:ident),*) => {$( if let Some(v) = a.$f { spec.$f = v; } )*};
            }
            set!(
                identities,
                samples_min,
                samples_max,
                dim,
                sigma_clean,
                hard_fraction,
                sigma_hard,
                seed
            );
            if a.samples_min.is_some() && a.samples_max.is_none() {
                spec.samples_max = spec.samples_max.max(spec.samples_min);
            }
            spec.validate()?;
            log::info!("generator spec: {}", serde_json::to_string(&spec).unwrap_or_default());
            let store = generate(&spec)?;
            let labels = a.labels.clone().unwrap_or_else(|| a.out.with_extension("labels"));
            save_features(&store, &a.out, Some(&labels))?;
            println!(
                "wrote {} samples of dimension {} to {}",
                store.len(),
                store.dim(),
                a.out.display()
            );
            write_manifest(&a.out, command, workers, json!({ "spec": spec, "labels": labels }))
        }
        Command::BuildKnn(a) => {
            let store = load_features(&a.features, None)?;
            let graph = build_knn(&store, a.hops.hop1, a.hops.hop2)?;
            save_graph(&graph, &a.out)?;
            println!("wrote neighbor lists for {} nodes to {}", graph.len(), a.out.display());
            write_manifest(&a.out, command, workers, json!({}))
        }
        Command::Train(a) => {
            let store = load_features(&a.features, Some(&a.labels))?;
            let graph = graph_for(&store, a.graph.as_deref(), &a.hops)?;
            let cfg = a.hyper.resolve(graph.hop1_size(), graph.hop2_size())?;
            log::info!("training config: {}", serde_json::to_string(&cfg).unwrap_or_default());
            let every = a.checkpoint_every.unwrap_or(0);
            let outcome = train_with(&store, &graph, &cfg, a.variant, |stats, model| {
                if every > 0 && (stats.epoch + 1) % every == 0 {
                    save_model(model, &sibling(&a.out, &format!(".epoch{}", stats.epoch + 1)))?;
                }
                Ok(())
            })?;
            save_model(&outcome.model, &a.out)?;
            let trace_path = sibling(&a.out, ".loss.csv");
            write_with(&trace_path, |w| write_trace(w, &outcome.trace))?;
            if let Some(last) = outcome.trace.last() {
                println!("final epoch mean loss {:.6}", last.mean_loss);
            }
            write_manifest(
                &a.out,
                command,
                workers,
                json!({ "train": cfg, "model": outcome.model.config, "loss_trace": trace_path }),
            )
        }
        Command::Predict(a) => {
            let store = load_features(&a.features, None)?;
            let graph = graph_for(&store, a.graph.as_deref(), &a.hops)?;
            let model = match (&a.checkpoint, a.variant) {
                (Some(path), v) => {
                    let m = load_model(path, store.dim())?;
                    if let Some(v) = v.filter(|v| *v != m.variant) {
                        return Err(LinkError::Usage(format!(
                            "checkpoint holds a {} model, not {}",
                            m.variant, v
                        )));
                    }
                    m
                }
                (None, Some(Variant::Naive)) => crate::model::ModelParameters::init(
                    Variant::Naive,
                    crate::model::ModelConfig::new(store.dim(), 1, 1, 1),
                    0,
                )?,
                (None, _) => {
                    return Err(LinkError::Usage(
                        "--checkpoint is required unless --variant naive".into(),
                    ))
                }
            };
            let links = score_graph(&model, &store, &graph)?;
            write_with(&a.out, |w| links.write_csv(w))?;
            if let Some(path) = &a.embeddings {
                let g = enhance_all(&model, &store, &graph)?;
                write_with(path, |w| {
                    for (i, row) in g.chunks(store.dim()).enumerate() {
                        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                        writeln!(w, "{i},{}", cells.join(","))?;
                    }
                    Ok(())
                })?;
            }
            println!("wrote {} links to {}", links.len(), a.out.display());
            write_manifest(
                &a.out,
                command,
                workers,
                json!({ "variant": model.variant, "model": model.config }),
            )
        }
        Command::Cluster(a) => {
            let links = read_links(&a.links, a.tau)?;
            let n = match &a.features {
                Some(path) => load_features(path, None)?.len(),
                None => links.node_bound(),
            };
            let partition = cluster_links(n, &links, a.tau)?;
            write_with(&a.out, |w| partition.write_tsv(w))?;
            println!("{} clusters over {n} nodes", partition.count());
            write_manifest(&a.out, command, workers, json!({ "nodes": n }))
        }
        Command::Evaluate(a) => {
            let file = File::open(&a.partition).map_err(|e| LinkError::io(&a.partition, e))?;
            let partition = ClusterPartition::read_tsv(BufReader::new(file))?;
            let labels = load_labels(&a.labels)?;
            let report = evaluate(&partition, &labels)?;
            write_with(&a.out, |w| w.write_all(report.to_text().as_bytes()))?;
            write_with(&a.out.with_extension("csv"), |w| report.write_csv(w))?;
            print!("{}", report.to_text());
            write_manifest(&a.out, command, workers, json!({}))
        }
        Command::Sweep(a) => {
            let grid = parse_grid(&a.tau_grid)?;
            let links = read_links(&a.links, 0.5)?;
            let labels = load_labels(&a.labels)?;
            let sweep = sweep_threshold(&links, &labels, &grid)?;
            write_with(&a.out, |w| sweep.write_csv(w))?;
            let best = sweep.best_row();
            println!("best tau {} pairwise F {:.6}", best.threshold, best.report.pairwise_f);
            write_manifest(
                &a.out,
                command,
                workers,
                json!({ "grid": grid, "best_tau": best.threshold }),
            )
        }
        Command::Roc(a) => {
            let links = read_links(&a.links, 0.5)?;
            let labels = load_labels(&a.labels)?;
            let points = roc_points(&links, &labels, a.top_k)?;
            write_with(&a.out, |w| write_roc(w, &points))?;
            let area = auc(&points);
            println!("auc {area:.6}");
            write_manifest(&a.out, command, workers, json!({ "auc": area }))
        }
        Command::Ablate(a) => {
            let grid = parse_grid(&a.tau_grid)?;
            let train_store = load_features(&a.features, Some(&a.labels))?;
            let train_graph = build_knn(&train_store, a.hops.hop1, a.hops.hop2)?;
            let test_store = match (&a.test_features, &a.test_labels) {
                (Some(f), Some(l)) => Some(load_features(f, Some(l))?),
                (None, None) => None,
                _ => return Err(LinkError::Usage("--test-features and --test-labels go together".into())),
            };
            let test_graph = match &test_store {
                Some(s) => Some(build_knn(s, a.hops.hop1, a.hops.hop2)?),
                None => None,
            };
            let test = (
                test_store.as_ref().unwrap_or(&train_store),
                test_graph.as_ref().unwrap_or(&train_graph),
            );
            let cfg = a.hyper.resolve(a.hops.hop1, a.hops.hop2)?;
            log::info!("training config: {}", serde_json::to_string(&cfg).unwrap_or_default());
            let rows: Vec<_> = ablate((&train_store, &train_graph), test, &cfg, &Variant::ALL, &grid)?
                .into_iter()
                .map(|(row, _)| row)
                .collect();
            write_with(&a.out, |w| write_ablation(w, &rows))?;
            for r in &rows {
                println!(
                    "{:<8} tau {:.2}  F_P {:.4}  F_B {:.4}  NMI {:.4}",
                    r.variant.to_string(),
                    r.best_tau,
                    r.report.pairwise_f,
                    r.report.bcubed_f,
                    r.report.nmi
                );
            }
            write_manifest(&a.out, command, workers, json!({ "train": cfg, "grid": grid }))
        }
    }
}

fn read_links(path: &Path, tau: f64) -> Result<LinkageSet> {
    let file = File::open(path).map_err(|e| LinkError::io(path, e))?;
    LinkageSet::read_csv(BufReader::new(file), tau)
}

/// Parse `args`, run the subcommand and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    if cli.workers == 0 {
        eprintln!("error: --workers must be at least 1");
        return 1;
    }
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return 1;
        }
    };
    match pool.install(|| execute(&cli.command, cli.workers)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
