//! CLI simulator: dataset fixtures, vertical partitioning, training in all
//! four regimes, evaluation of checkpoints, convergence-bound reports, and
//! message-count accounting.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use glasu::error::GlasuError;
use glasu::fixture::{make_sbm_fixture, SbmParams};
use glasu::graph::{load_dataset, partition_dataset, save_dataset, Dataset};
use glasu::harness::{
    apply_preset, evaluate_checkpoints, run_experiment, AggChoice, Backbone, ExperimentConfig,
    LabelModeChoice, Preset,
};
use glasu::sampling::LayerPlan;
use glasu::theory::{
    c0, grad_norm_bound, max_step_size, sigma_var, suggested_step, BoundInputs,
    SmoothnessConstants,
};
use glasu::transport::{expected_counts, KIND_NAMES};

#[derive(Parser)]
#[command(name = "glasu", version, about = "Vertical federated GNN training simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a stochastic-block-model dataset fixture.
    Fixture(FixtureArgs),
    /// Split a dataset into per-client shards and write them out.
    Partition(PartitionArgs),
    /// Train a model (optionally under a preset regime).
    Train(TrainArgs),
    /// Evaluate saved checkpoints on the test mask.
    Eval(EvalArgs),
    /// Evaluate the convergence-bound formulas.
    Bound(BoundArgs),
    /// Print expected message counts for a configuration.
    CountComm(CountCommArgs),
}

#[derive(Args)]
struct FixtureArgs {
    #[arg(long, default_value_t = 2)]
    blocks: usize,
    #[arg(long, default_value_t = 20)]
    nodes_per_block: usize,
    #[arg(long, default_value_t = 0.5)]
    p_in: f64,
    #[arg(long, default_value_t = 0.05)]
    p_out: f64,
    #[arg(long, default_value_t = 4)]
    dim: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PartitionArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, short = 'm')]
    clients: usize,
    #[arg(long, default_value_t = 0.8)]
    edge_keep_prob: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON config file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, short = 'm')]
    clients: Option<usize>,
    #[arg(long)]
    edge_keep_prob: Option<f64>,
    #[arg(long, short = 'l')]
    layers: Option<usize>,
    /// Comma-separated aggregation layer indices (must be contiguous).
    #[arg(long, value_delimiter = ',')]
    agg_layers: Option<Vec<usize>>,
    /// Number of aggregation layers, placed as the last k layers.
    #[arg(long, short = 'k')]
    agg_count: Option<usize>,
    #[arg(long)]
    backbone: Option<String>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    agg_kind: Option<String>,
    #[arg(long, short = 's')]
    batch_size: Option<usize>,
    #[arg(long)]
    fanout: Option<usize>,
    #[arg(long, short = 't')]
    rounds: Option<usize>,
    #[arg(long, short = 'q')]
    local_iters: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    label_mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    gcnii_alpha: Option<f64>,
    #[arg(long)]
    gcnii_lambda: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// "inproc" or "tcp".
    #[arg(long)]
    transport: Option<String>,
    #[arg(long)]
    port: Option<u16>,
    /// Divide each feature row by its L1 mass after loading.
    #[arg(long)]
    row_normalize: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// centralized | standalone | sim-centralized | glasu
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long)]
    save_models: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    models: PathBuf,
}

#[derive(Args)]
struct BoundArgs {
    #[arg(long)]
    g_ell: f64,
    #[arg(long)]
    l_ell: f64,
    #[arg(long)]
    g_f: f64,
    #[arg(long)]
    l_f: f64,
    #[arg(long, short = 'm')]
    clients: usize,
    #[arg(long, short = 'q')]
    local_iters: usize,
    #[arg(long, short = 't')]
    rounds: usize,
    #[arg(long, short = 's')]
    batch_size: usize,
    #[arg(long, short = 'd')]
    dim: usize,
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    #[arg(long)]
    delta_l: f64,
    #[arg(long)]
    eta: Option<f64>,
}

#[derive(Args)]
struct CountCommArgs {
    #[arg(long, short = 'l')]
    layers: usize,
    #[arg(long, short = 'k')]
    agg_count: usize,
    #[arg(long, short = 'm')]
    clients: usize,
    #[arg(long, short = 't')]
    rounds: usize,
    #[arg(long, short = 'q', default_value_t = 1)]
    local_iters: usize,
    #[arg(long, default_value = "all_clients")]
    label_mode: String,
}

fn parse_backbone(s: &str) -> Result<Backbone, GlasuError> {
    match s {
        "gcn" => Ok(Backbone::Gcn),
        "gcnii" => Ok(Backbone::Gcnii),
        other => Err(GlasuError::Config(format!("unknown backbone '{other}'"))),
    }
}

fn parse_agg(s: &str) -> Result<AggChoice, GlasuError> {
    match s {
        "average" => Ok(AggChoice::Average),
        "concat" => Ok(AggChoice::Concat),
        other => Err(GlasuError::Config(format!("unknown agg kind '{other}'"))),
    }
}

fn parse_label_mode(s: &str) -> Result<LabelModeChoice, GlasuError> {
    match s {
        "all_clients" | "all-clients" => Ok(LabelModeChoice::AllClients),
        "single_holder" | "single-holder" => Ok(LabelModeChoice::SingleHolder),
        other => Err(GlasuError::Config(format!("unknown label mode '{other}'"))),
    }
}

fn build_config(args: &ConfigArgs, seed_required: bool) -> Result<ExperimentConfig, GlasuError> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::from_json_file(path)?,
        None => ExperimentConfig {
            dataset_path: PathBuf::new(),
            m_clients: 2,
            edge_keep_prob: 0.8,
            layers: 2,
            agg_layers: None,
            backbone: Backbone::Gcn,
            hidden_dim: 16,
            agg_kind: AggChoice::Average,
            batch_size: 16,
            fanout: 3,
            rounds: 100,
            local_iters: 1,
            eta: 0.1,
            label_mode: LabelModeChoice::AllClients,
            seed: 0,
            gcnii_alpha: 0.1,
            gcnii_lambda: 0.5,
            standalone: false,
            row_normalize: false,
            eval_every: None,
            transport: None,
            port: None,
            smoothness: None,
        },
    };
    if let Some(p) = &args.dataset {
        cfg.dataset_path = p.clone();
    }
    if let Some(v) = args.clients {
        cfg.m_clients = v;
    }
    if let Some(v) = args.edge_keep_prob {
        cfg.edge_keep_prob = v;
    }
    if let Some(v) = args.layers {
        cfg.layers = v;
    }
    if let Some(v) = &args.agg_layers {
        cfg.agg_layers = Some(v.clone());
    }
    if let Some(k) = args.agg_count {
        if k == 0 || k > cfg.layers {
            return Err(GlasuError::Config(format!("agg count {k} not in 1..={}", cfg.layers)));
        }
        cfg.agg_layers = Some((cfg.layers - k..cfg.layers).collect());
    }
    if let Some(v) = &args.backbone {
        cfg.backbone = parse_backbone(v)?;
    }
    if let Some(v) = args.hidden_dim {
        cfg.hidden_dim = v;
    }
    if let Some(v) = &args.agg_kind {
        cfg.agg_kind = parse_agg(v)?;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.fanout {
        cfg.fanout = v;
    }
    if let Some(v) = args.rounds {
        cfg.rounds = v;
    }
    if let Some(v) = args.local_iters {
        cfg.local_iters = v;
    }
    if let Some(v) = args.eta {
        cfg.eta = v;
    }
    if let Some(v) = &args.label_mode {
        cfg.label_mode = parse_label_mode(v)?;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.gcnii_alpha {
        cfg.gcnii_alpha = v;
    }
    if let Some(v) = args.gcnii_lambda {
        cfg.gcnii_lambda = v;
    }
    if let Some(v) = args.eval_every {
        cfg.eval_every = Some(v);
    }
    if let Some(v) = &args.transport {
        cfg.transport = Some(v.clone());
    }
    if let Some(v) = args.port {
        cfg.port = Some(v);
    }
    if args.row_normalize {
        cfg.row_normalize = true;
    }
    if cfg.dataset_path.as_os_str().is_empty() {
        return Err(GlasuError::Config("a dataset path is required (--dataset or config)".into()));
    }
    if seed_required && args.seed.is_none() && args.config.is_none() {
        return Err(GlasuError::Config("--seed is required for training".into()));
    }
    Ok(cfg)
}

fn parse_preset(s: &str, cfg: &ExperimentConfig) -> Result<Preset, GlasuError> {
    match s {
        "centralized" => Ok(Preset::Centralized),
        "standalone" => Ok(Preset::Standalone),
        "sim-centralized" => Ok(Preset::SimCentralized),
        "glasu" => Ok(Preset::Glasu {
            k: cfg.agg_layers.as_ref().map_or(cfg.layers, |v| v.len()),
            q: cfg.local_iters,
        }),
        other => Err(GlasuError::Config(format!("unknown preset '{other}'"))),
    }
}

fn run(cli: Cli) -> Result<(), GlasuError> {
    match cli.command {
        Command::Fixture(a) => {
            let params = SbmParams {
                blocks: a.blocks,
                nodes_per_block: a.nodes_per_block,
                p_in: a.p_in,
                p_out: a.p_out,
                dim: a.dim,
                seed: a.seed,
            };
            let ds = make_sbm_fixture(&params, &a.out)?;
            println!(
                "wrote fixture: {} nodes, {} edges, {} features, {} classes -> {}",
                ds.num_nodes(),
                ds.graph.num_edges(),
                ds.feature_dim(),
                ds.num_classes,
                a.out.display()
            );
        }
        Command::Partition(a) => {
            let ds = load_dataset(&a.dataset)?;
            let part = partition_dataset(&ds, a.clients, a.edge_keep_prob, a.seed)?;
            for (m, shard) in part.shards.iter().enumerate() {
                let dir = a.out.join(format!("client_{m}"));
                let client_ds = Dataset {
                    graph: shard.graph.clone(),
                    features: shard.features.clone(),
                    labels: part.labels.clone(),
                    num_classes: part.num_classes,
                    train_mask: part.train_mask.clone(),
                    val_mask: part.val_mask.clone(),
                    test_mask: part.test_mask.clone(),
                };
                save_dataset(&client_ds, &dir)?;
                println!(
                    "client {m}: {} edges, feature block width {} (offset {})",
                    shard.graph.num_edges(),
                    shard.features.cols(),
                    shard.col_offset
                );
            }
        }
        Command::Train(a) => {
            let mut cfg = build_config(&a.config, true)?;
            if let Some(p) = &a.preset {
                let preset = parse_preset(p, &cfg)?;
                cfg = apply_preset(preset, cfg)?;
            }
            let report = run_experiment(&cfg, &a.out_dir, a.save_models.as_deref())?;
            println!("final train accuracy: {:.4}", report.final_train_accuracy);
            println!("final test accuracy:  {:.4}", report.final_test_accuracy);
            if let Some(per) = &report.per_client_test_accuracy {
                for (m, acc) in per.iter().enumerate() {
                    println!("  client {m} test accuracy: {acc:.4}");
                }
            }
            println!("messages: {}  bytes: {}", report.total_messages, report.total_bytes);
            println!("history: {}", report.loss_history_path.display());
        }
        Command::Eval(a) => {
            let cfg = build_config(&a.config, false)?;
            let acc = evaluate_checkpoints(&cfg, &a.models)?;
            println!("test accuracy: {acc:.4}");
        }
        Command::Bound(a) => {
            let k = SmoothnessConstants { g_ell: a.g_ell, l_ell: a.l_ell, g_f: a.g_f, l_f: a.l_f };
            k.validate()?;
            let c = c0(&k);
            let sigma = sigma_var(&k, a.batch_size, a.dim, a.delta);
            let cap = max_step_size(c, a.local_iters, a.clients);
            println!("c0: {c}");
            println!("sigma: {sigma}");
            println!("max_step_size: {cap}");
            let inputs = BoundInputs {
                m_clients: a.clients,
                local_iters: a.local_iters,
                rounds: a.rounds,
                batch_size: a.batch_size,
                dim: a.dim,
                delta: a.delta,
                delta_l: a.delta_l,
                eta: a.eta.unwrap_or(cap),
            };
            match suggested_step(&inputs, c, sigma) {
                Ok(eta) => println!("suggested_step: {eta}"),
                Err(e) => println!("suggested_step: unavailable ({e})"),
            }
            match grad_norm_bound(&inputs, c, sigma) {
                Ok(b) => println!("grad_norm_bound(eta={}): {b}", inputs.eta),
                Err(e) => println!("grad_norm_bound: invalid ({e})"),
            }
        }
        Command::CountComm(a) => {
            let plan = LayerPlan::suffix(a.layers, a.agg_count)?;
            let mode = parse_label_mode(&a.label_mode)?;
            let counts = expected_counts(&plan, a.clients, a.rounds, a.local_iters, mode.into());
            let mut total = 0u64;
            for (name, c) in KIND_NAMES.iter().zip(counts) {
                println!("{name}: {c}");
                total += c;
            }
            println!("total: {total}");
            println!(
                "aggregation messages per model update: {}",
                (counts[3] + counts[4]) as f64 / (a.rounds * a.local_iters) as f64
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
