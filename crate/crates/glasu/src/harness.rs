//! Experiment configuration, the four training-regime presets, and the
//! end-to-end experiment runner with CSV/report emission.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{GlasuError, Result};
use crate::federation::{
    build_clients, evaluate, train, AggKind, LabelMode, RoundConfig, TrainHistory, TrainOpts,
    TrainOutput, Transport,
};
use crate::graph::{load_dataset, partition_dataset, PartitionedDataset};
use crate::model::{save_checkpoint, LayerKind};
use crate::sampling::{LayerPlan, SamplerConfig};
use crate::theory::{c0, max_step_size, SmoothnessConstants};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    Gcn,
    Gcnii,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggChoice {
    Average,
    Concat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelModeChoice {
    AllClients,
    SingleHolder,
}

impl From<LabelModeChoice> for LabelMode {
    fn from(v: LabelModeChoice) -> Self {
        match v {
            LabelModeChoice::AllClients => LabelMode::AllClients,
            LabelModeChoice::SingleHolder => LabelMode::SingleHolder,
        }
    }
}

/// Experiment configuration; JSON keys follow the protocol's symbols
/// (M clients, T rounds, Q local iterations).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset_path: PathBuf,
    #[serde(rename = "M")]
    pub m_clients: usize,
    pub edge_keep_prob: f64,
    pub layers: usize,
    /// Aggregation layer indices; when absent, the contiguous suffix of
    /// length `k` (default: all layers).
    #[serde(default)]
    pub agg_layers: Option<Vec<usize>>,
    pub backbone: Backbone,
    pub hidden_dim: usize,
    pub agg_kind: AggChoice,
    pub batch_size: usize,
    pub fanout: usize,
    #[serde(rename = "T")]
    pub rounds: usize,
    #[serde(rename = "Q")]
    pub local_iters: usize,
    pub eta: f64,
    pub label_mode: LabelModeChoice,
    pub seed: u64,

    #[serde(default = "default_alpha")]
    pub gcnii_alpha: f64,
    #[serde(default = "default_lambda")]
    pub gcnii_lambda: f64,
    /// Train each client on its own shard with no communication.
    #[serde(default)]
    pub standalone: bool,
    /// Divide each feature row by its L1 mass after loading.
    #[serde(default)]
    pub row_normalize: bool,
    #[serde(default)]
    pub eval_every: Option<usize>,
    /// "inproc" (default) or "tcp".
    #[serde(default)]
    pub transport: Option<String>,
    #[serde(default)]
    pub port: Option<u16>,
    /// Optional smoothness constants (g_ell, l_ell, g_f, l_f) for a step-size
    /// advisory at startup.
    #[serde(default)]
    pub smoothness: Option<[f64; 4]>,
}

fn default_alpha() -> f64 {
    0.1
}

fn default_lambda() -> f64 {
    0.5
}

impl ExperimentConfig {
    pub fn plan(&self) -> Result<LayerPlan> {
        match &self.agg_layers {
            Some(layers) => LayerPlan::new(self.layers, layers.clone()),
            None => LayerPlan::suffix(self.layers, self.layers),
        }
    }

    pub fn layer_kind(&self) -> LayerKind {
        match self.backbone {
            Backbone::Gcn => LayerKind::Gcn,
            Backbone::Gcnii => LayerKind::Gcnii { alpha: self.gcnii_alpha, lambda: self.gcnii_lambda },
        }
    }

    pub fn agg(&self, m_clients: usize) -> AggKind {
        match self.agg_kind {
            AggChoice::Average => AggKind::Average,
            AggChoice::Concat => AggKind::concat_uniform(m_clients, self.hidden_dim),
        }
    }

    pub fn round_config(&self) -> RoundConfig {
        RoundConfig {
            rounds: self.rounds,
            local_iters: self.local_iters,
            eta: self.eta,
            label_mode: self.label_mode.into(),
        }
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig { batch_size: self.batch_size, fanout: self.fanout }
    }

    pub fn transport(&self) -> Result<Transport> {
        match self.transport.as_deref() {
            None | Some("inproc") => Ok(Transport::InProcess),
            Some("tcp") => Ok(Transport::Tcp {
                port: self.port.unwrap_or(crate::transport::DEFAULT_PORT),
            }),
            Some(other) => Err(GlasuError::Config(format!("unknown transport '{other}'"))),
        }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| GlasuError::Config(format!("config parse: {e}")))
    }
}

/// The four training regimes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Centralized,
    Standalone,
    SimCentralized,
    Glasu { k: usize, q: usize },
}

/// Rewrites a base configuration into one of the named regimes.
pub fn apply_preset(preset: Preset, mut cfg: ExperimentConfig) -> Result<ExperimentConfig> {
    match preset {
        Preset::Centralized => {
            cfg.m_clients = 1;
            cfg.edge_keep_prob = 1.0;
            cfg.agg_layers = Some((0..cfg.layers).collect());
            cfg.standalone = false;
        }
        Preset::Standalone => {
            cfg.standalone = true;
            cfg.label_mode = LabelModeChoice::AllClients;
        }
        Preset::SimCentralized => {
            cfg.edge_keep_prob = 1.0;
            cfg.agg_layers = Some((0..cfg.layers).collect());
            cfg.local_iters = 1;
            cfg.standalone = false;
        }
        Preset::Glasu { k, q } => {
            if k == 0 || k > cfg.layers {
                return Err(GlasuError::Config(format!(
                    "aggregation count {k} not in 1..={}",
                    cfg.layers
                )));
            }
            cfg.agg_layers = Some((cfg.layers - k..cfg.layers).collect());
            cfg.local_iters = q;
            cfg.standalone = false;
        }
    }
    Ok(cfg)
}

/// Result summary of one experiment.
#[derive(Clone, Debug, Serialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub final_train_accuracy: f64,
    pub final_test_accuracy: f64,
    /// Standalone runs: per-client test accuracy (mean is the headline number).
    pub per_client_test_accuracy: Option<Vec<f64>>,
    pub loss_history_path: PathBuf,
    pub accuracy_history_path: PathBuf,
    pub ledger_summary: String,
    /// Present when supplied smoothness constants flag the step size.
    pub step_size_advisory: Option<String>,
    pub total_messages: u64,
    pub total_bytes: u64,
    pub wall_time_secs: f64,
}

pub fn write_history_csvs(history: &TrainHistory, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let loss_path = dir.join("loss_history.csv");
    let mut text = String::from("t,q,client,loss\n");
    for r in &history.losses {
        writeln!(text, "{},{},{},{}", r.round, r.local_iter, r.client, r.loss).unwrap();
    }
    std::fs::write(&loss_path, text)?;

    let acc_path = dir.join("accuracy_history.csv");
    let mut text = String::from("t,accuracy\n");
    for (t, acc) in &history.accuracy {
        writeln!(text, "{t},{acc}").unwrap();
    }
    std::fs::write(&acc_path, text)?;
    Ok((loss_path, acc_path))
}

fn advise_step_size(cfg: &ExperimentConfig) -> Option<String> {
    let [g_ell, l_ell, g_f, l_f] = cfg.smoothness?;
    let k = SmoothnessConstants { g_ell, l_ell, g_f, l_f };
    k.validate().ok()?;
    let cap = max_step_size(c0(&k), cfg.local_iters, cfg.m_clients);
    if cfg.eta > cap {
        let msg = format!(
            "step size {} exceeds the admissible bound {cap:.3e} for the supplied smoothness \
             constants; convergence guarantees do not apply",
            cfg.eta
        );
        log::warn!("{msg}");
        Some(msg)
    } else {
        None
    }
}

/// Loads, partitions, trains, evaluates, and writes CSVs plus a JSON report.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    save_models: Option<&Path>,
) -> Result<ExperimentReport> {
    let started = Instant::now();
    let advisory = advise_step_size(cfg);
    let mut dataset = load_dataset(&cfg.dataset_path)?;
    if cfg.row_normalize {
        crate::graph::row_normalize_features(&mut dataset);
    }
    let part = partition_dataset(&dataset, cfg.m_clients, cfg.edge_keep_prob, cfg.seed)?;
    let plan = cfg.plan()?;
    let kind = cfg.layer_kind();
    let round_cfg = cfg.round_config();
    let sampler = cfg.sampler();

    let (history, final_train, final_test, per_client, models) = if cfg.standalone {
        run_standalone(cfg, &part, &plan, kind, &round_cfg, &sampler)?
    } else {
        let agg = cfg.agg(part.num_clients());
        let opts = TrainOpts {
            transport: cfg.transport()?,
            eval_every: cfg.eval_every,
            final_eval: true,
            record_ledger: true,
        };
        let out = train(&part, &plan, kind, &agg, cfg.hidden_dim, &round_cfg, &sampler, cfg.seed, &opts)?;
        (
            out.history,
            out.final_train_accuracy.unwrap_or(0.0),
            out.final_test_accuracy.unwrap_or(0.0),
            None,
            out.models,
        )
    };

    if let Some(dir) = save_models {
        std::fs::create_dir_all(dir)?;
        for (m, model) in models.iter().enumerate() {
            save_checkpoint(model, dir.join(format!("client_{m}.bin")))?;
        }
    }

    let (loss_path, acc_path) = write_history_csvs(&history, out_dir)?;
    let report = ExperimentReport {
        config: cfg.clone(),
        final_train_accuracy: final_train,
        final_test_accuracy: final_test,
        per_client_test_accuracy: per_client,
        loss_history_path: loss_path,
        accuracy_history_path: acc_path,
        ledger_summary: history.ledger.summary(),
        step_size_advisory: advisory,
        total_messages: history.ledger.total_message_count(),
        total_bytes: history.ledger.total_byte_count(),
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| GlasuError::Config(format!("report serialization: {e}")))?;
    std::fs::write(out_dir.join("report.json"), json)?;
    Ok(report)
}

type StandaloneOut = (TrainHistory, f64, f64, Option<Vec<f64>>, Vec<crate::model::ClientModel>);

/// Standalone regime: every client trains alone on its shard (no aggregation
/// traffic by construction); reported accuracy is the mean across clients.
fn run_standalone(
    cfg: &ExperimentConfig,
    part: &PartitionedDataset,
    plan: &LayerPlan,
    kind: LayerKind,
    round_cfg: &RoundConfig,
    sampler: &SamplerConfig,
) -> Result<StandaloneOut> {
    let mut history = TrainHistory::default();
    let mut models = Vec::new();
    let mut train_accs = Vec::new();
    let mut test_accs = Vec::new();
    for m in 0..part.num_clients() {
        let solo = part.solo(m);
        let agg = AggKind::Average;
        let solo_cfg = RoundConfig { label_mode: LabelMode::AllClients, ..*round_cfg };
        let opts = TrainOpts { final_eval: true, ..TrainOpts::default() };
        let out: TrainOutput = train(
            &solo,
            plan,
            kind,
            &agg,
            cfg.hidden_dim,
            &solo_cfg,
            sampler,
            cfg.seed.wrapping_add(m as u64),
            &opts,
        )?;
        for mut r in out.history.losses {
            r.client = m;
            history.losses.push(r);
        }
        train_accs.push(out.final_train_accuracy.unwrap_or(0.0));
        test_accs.push(out.final_test_accuracy.unwrap_or(0.0));
        models.extend(out.models);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let (tr, te) = (mean(&train_accs), mean(&test_accs));
    Ok((history, tr, te, Some(test_accs), models))
}

/// Convenience wrapper used by tests: standalone mean test accuracy.
pub fn standalone_mean_test_accuracy(
    part: &PartitionedDataset,
    plan: &LayerPlan,
    kind: LayerKind,
    hidden: usize,
    round_cfg: &RoundConfig,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<f64> {
    let mut accs = Vec::new();
    for m in 0..part.num_clients() {
        let solo = part.solo(m);
        let solo_cfg = RoundConfig { label_mode: LabelMode::AllClients, ..*round_cfg };
        let out = train(
            &solo,
            plan,
            kind,
            &AggKind::Average,
            hidden,
            &solo_cfg,
            sampler,
            seed.wrapping_add(m as u64),
            &TrainOpts { final_eval: true, ..TrainOpts::default() },
        )?;
        accs.push(out.final_test_accuracy.unwrap_or(0.0));
    }
    Ok(accs.iter().sum::<f64>() / accs.len().max(1) as f64)
}

/// Evaluates checkpointed models on a node set.
pub fn evaluate_checkpoints(
    cfg: &ExperimentConfig,
    models_dir: &Path,
) -> Result<f64> {
    let mut dataset = load_dataset(&cfg.dataset_path)?;
    if cfg.row_normalize {
        crate::graph::row_normalize_features(&mut dataset);
    }
    let part = partition_dataset(&dataset, cfg.m_clients, cfg.edge_keep_prob, cfg.seed)?;
    let plan = cfg.plan()?;
    let agg = cfg.agg(part.num_clients());
    let (ctxs, fresh) = build_clients(
        &part,
        &plan,
        cfg.layer_kind(),
        &agg,
        cfg.hidden_dim,
        cfg.label_mode.into(),
        cfg.seed,
    )?;
    let mut models = Vec::with_capacity(fresh.len());
    for (m, template) in fresh.into_iter().enumerate() {
        let mats = crate::model::load_checkpoint(models_dir.join(format!("client_{m}.bin")))?;
        let model = crate::model::model_from_matrices(
            cfg.layer_kind(),
            template.input_proj.is_some(),
            template.classifier.is_some(),
            mats,
        )?;
        models.push(model);
    }
    evaluate(&ctxs, &models, &part.test_mask, cfg.batch_size)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_cfg() -> ExperimentConfig {
        ExperimentConfig {
            dataset_path: PathBuf::from("unused"),
            m_clients: 3,
            edge_keep_prob: 0.8,
            layers: 4,
            agg_layers: None,
            backbone: Backbone::Gcn,
            hidden_dim: 8,
            agg_kind: AggChoice::Average,
            batch_size: 16,
            fanout: 3,
            rounds: 10,
            local_iters: 4,
            eta: 0.1,
            label_mode: LabelModeChoice::AllClients,
            seed: 5,
            gcnii_alpha: 0.1,
            gcnii_lambda: 0.5,
            standalone: false,
            row_normalize: false,
            eval_every: None,
            transport: None,
            port: None,
            smoothness: None,
        }
    }

    #[test]
    fn centralized_preset_is_single_client_full_aggregation() {
        let cfg = apply_preset(Preset::Centralized, base_cfg()).unwrap();
        assert_eq!(cfg.m_clients, 1);
        assert_eq!(cfg.edge_keep_prob, 1.0);
        assert_eq!(cfg.agg_layers.as_deref(), Some(&[0, 1, 2, 3][..]));
    }

    #[test]
    fn glasu_full_depth_q1_equals_sim_centralized_config() {
        let mut base = base_cfg();
        base.edge_keep_prob = 1.0;
        let a = apply_preset(Preset::Glasu { k: 4, q: 1 }, base.clone()).unwrap();
        let b = apply_preset(Preset::SimCentralized, base).unwrap();
        assert_eq!(a.agg_layers, b.agg_layers);
        assert_eq!(a.local_iters, b.local_iters);
        assert_eq!(a.edge_keep_prob, b.edge_keep_prob);
        assert_eq!(a.m_clients, b.m_clients);
    }

    #[test]
    fn config_json_roundtrip_uses_protocol_keys() {
        let cfg = base_cfg();
        let json = serde_json::to_string(&cfg).unwrap();
        assert!(json.contains("\"M\":3"));
        assert!(json.contains("\"T\":10"));
        assert!(json.contains("\"Q\":4"));
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back.m_clients, 3);
        assert_eq!(back.rounds, 10);
        assert_eq!(back.local_iters, 4);
    }

    #[test]
    fn glasu_preset_places_suffix_layers() {
        let cfg = apply_preset(Preset::Glasu { k: 2, q: 8 }, base_cfg()).unwrap();
        assert_eq!(cfg.agg_layers.as_deref(), Some(&[2, 3][..]));
        assert_eq!(cfg.local_iters, 8);
        assert!(apply_preset(Preset::Glasu { k: 9, q: 1 }, base_cfg()).is_err());
    }
}
