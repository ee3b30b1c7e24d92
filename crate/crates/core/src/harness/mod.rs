//! Experiment orchestration: configuration, training runs, metrics reports,
//! attention traces and model files.
//!
//! A run writes, under its output directory:
//!
//! ```text
//! config.toml           the resolved configuration
//! report.json           MetricsReport
//! seed-<s>/model.fkm    checkpoint of each successful seed
//! seed-<s>/trace.csv    attention trace of test sequence 0 (fusion families)
//! ```

mod checkpoint;
mod trace;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::{OptimizerConfig, ParameterStore};
use crate::colearn::CoLearnConfig;
use crate::embedding::{evaluate_pipeline, pipeline_data, run_pipeline, PipelineConfig, PipelineEval, PipelineReport};
use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::fusion::{evaluate, train_gradient, FusionConfig, FusionModel, TrainConfig};
use crate::mvrnn::{evaluate_elbo, train_mvrnn, MvrnnConfig, MvrnnModel, MvrnnTrainConfig};
use crate::synth::{derive_seed, gen_scenario, rng_for, Dataset, ModalSequence, ScenarioConfig};

pub use checkpoint::{
    decode_checkpoint, decode_model, encode_checkpoint, encode_model, load_model, save_model, SavedModel, MODEL_MAGIC,
    MODEL_VERSION,
};
pub use trace::{emit_attention_trace, trace_csv, trace_header, TraceRow};

pub const REPORT_SCHEMA: u32 = 1;

/// Which model an experiment trains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelFamily {
    /// One expert on data modality `modality`; `network.modalities` and
    /// `network.dims` are replaced.
    Unimodal {
        modality: usize,
        #[serde(default)]
        network: FusionConfig,
    },
    /// `network.dims` is filled from the scenario. A non-empty `lambda_grid`
    /// trains one model per co-learning weight and keeps the one with the
    /// best validation accuracy.
    Fusion {
        #[serde(default)]
        network: FusionConfig,
        #[serde(default)]
        colearn: Option<CoLearnConfig>,
        #[serde(default)]
        lambda_grid: Vec<f64>,
    },
    /// `network.dims` is filled from the scenario.
    Mvrnn {
        #[serde(default)]
        network: MvrnnConfig,
        #[serde(default = "one")]
        samples: usize,
    },
    /// Uses its own data, step counts and optimizer; the seed replaces
    /// `pipeline.seed` and `epochs = 0` skips every training stage.
    Embedding {
        #[serde(default)]
        pipeline: PipelineConfig,
    },
}

fn one() -> usize {
    1
}

impl Default for ModelFamily {
    fn default() -> Self {
        ModelFamily::Fusion {
            network: FusionConfig::default(),
            colearn: None,
            lambda_grid: Vec::new(),
        }
    }
}

impl ModelFamily {
    pub fn name(&self) -> &'static str {
        match self {
            ModelFamily::Unimodal { .. } => "unimodal",
            ModelFamily::Fusion { .. } => "fusion",
            ModelFamily::Mvrnn { .. } => "mvrnn",
            ModelFamily::Embedding { .. } => "embedding",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    /// Minibatch size for the gradient-trained families.
    pub batch_size: usize,
    /// Truncated backpropagation window in frames.
    pub tbptt: usize,
    pub out: Option<PathBuf>,
    pub optimizer: OptimizerConfig,
    /// Its seed is replaced by each run seed.
    pub scenario: ScenarioConfig,
    pub model: ModelFamily,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seeds: vec![0],
            epochs: 10,
            batch_size: 16,
            tbptt: 5,
            out: None,
            optimizer: OptimizerConfig::adam(3e-3),
            scenario: ScenarioConfig::default(),
            model: ModelFamily::default(),
        }
    }
}

fn invalid(e: Error) -> Error {
    match e {
        Error::Validation(_) => e,
        other => Error::Validation(other.to_string()),
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Validation(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Contract(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| Path::new("runs").join(&self.name))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Validation("at least one seed is required".into()));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::Validation("seeds must be distinct".into()));
        }
        if self.batch_size == 0 || self.tbptt == 0 {
            return Err(Error::Validation("batch size and truncation window must be >= 1".into()));
        }
        if !(self.optimizer.lr >= 0.0 && self.optimizer.lr.is_finite()) {
            return Err(Error::Validation(format!("learning rate {} must be finite and >= 0", self.optimizer.lr)));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Validation("name must be non-empty and contain no path separators".into()));
        }
        self.scenario.validate().map_err(invalid)?;
        let modalities = self.scenario.modalities.len();
        let check_index = |m: usize| {
            if m >= modalities {
                Err(Error::Validation(format!("modality {m} does not exist ({modalities} modalities)")))
            } else {
                Ok(())
            }
        };
        match &self.model {
            ModelFamily::Unimodal { modality, .. } => check_index(*modality)?,
            ModelFamily::Fusion {
                network,
                colearn,
                lambda_grid,
            } => {
                network.modalities.iter().try_for_each(|&m| check_index(m))?;
                if let Some(c) = colearn {
                    c.lambdas(network.modalities.len()).map_err(invalid)?;
                }
                if lambda_grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
                    return Err(Error::Validation("co-learning weights must be finite and >= 0".into()));
                }
            }
            ModelFamily::Mvrnn { samples, .. } => {
                if *samples == 0 {
                    return Err(Error::Validation("at least one sample per step is required".into()));
                }
            }
            ModelFamily::Embedding { pipeline } => {
                if pipeline.noises.is_empty() || pipeline.k == 0 || pipeline.batch_size == 0 {
                    return Err(Error::Validation("embedding needs noise models, k >= 1 and a batch size".into()));
                }
                if !(pipeline.test_fraction > 0.0 && pipeline.test_fraction < 1.0) {
                    return Err(Error::Validation("test fraction must lie in (0, 1)".into()));
                }
            }
        }
        match self.resolved_model(0)? {
            Resolved::Fusion(c) => c.validate().map_err(invalid),
            Resolved::Mvrnn(c) => c.validate().map_err(invalid),
            Resolved::Embedding(_) => Ok(()),
        }
    }

    fn resolved_model(&self, seed: u64) -> Result<Resolved> {
        let dims = self.scenario.dims();
        let widths = |mods: &[usize]| mods.iter().map(|&m| dims[m]).collect::<Vec<_>>();
        Ok(match &self.model {
            ModelFamily::Unimodal { modality, network } => Resolved::Fusion(FusionConfig {
                modalities: vec![*modality],
                dims: vec![dims[*modality]],
                ..network.clone()
            }),
            ModelFamily::Fusion { network, .. } => Resolved::Fusion(FusionConfig {
                dims: widths(&network.modalities),
                ..network.clone()
            }),
            ModelFamily::Mvrnn { network, .. } => Resolved::Mvrnn(MvrnnConfig {
                dims,
                ..network.clone()
            }),
            ModelFamily::Embedding { pipeline } => {
                let mut p = PipelineConfig {
                    seed,
                    ..pipeline.clone()
                };
                if self.epochs == 0 {
                    p.dae_steps = 0;
                    p.gate_steps = 0;
                    p.finetune_steps = 0;
                    p.siamese.epochs = 0;
                }
                Resolved::Embedding(p)
            }
        })
    }

    /// Row label in comparison tables.
    pub fn label(&self) -> String {
        match &self.model {
            ModelFamily::Unimodal { modality, .. } => {
                let name = self.scenario.modalities.get(*modality).map_or("?", |m| m.name.as_str());
                format!("unimodal:{name}")
            }
            ModelFamily::Fusion {
                network,
                colearn,
                lambda_grid,
            } => {
                let variant = serde_json::to_value(network.variant)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_string))
                    .unwrap_or_default();
                let suffix = if colearn.is_some() || !lambda_grid.is_empty() { "+colearn" } else { "" };
                format!("fusion:{variant}{suffix}")
            }
            ModelFamily::Mvrnn { .. } => "mvrnn".into(),
            ModelFamily::Embedding { .. } => "embedding".into(),
        }
    }
}

enum Resolved {
    Fusion(FusionConfig),
    Mvrnn(MvrnnConfig),
    Embedding(PipelineConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Fused NLL (plus co-learning term) for fusion families, negative
    /// ELBO for the MVRNN, contrastive loss for the embedding.
    pub train_loss: f64,
    /// Percent.
    pub train_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum RunDetail {
    Fusion {
        /// Selected co-learning weight, if any.
        lambda: Option<f64>,
        test_nll: f64,
        /// Percent, per expert.
        expert_accuracy: Vec<f64>,
        gate_inside: Vec<Option<f64>>,
        gate_outside: Vec<Option<f64>>,
        shared_variance: f64,
    },
    Mvrnn {
        /// Mean per-sequence bound on the test split.
        test_elbo: f64,
        kl_shared: f64,
        kl_specific: Vec<f64>,
        /// Smallest KL value seen during training.
        min_kl: f64,
    },
    Embedding(PipelineReport),
    /// Re-evaluation of a saved embedding model.
    EmbeddingEval(PipelineEval),
}

/// Outcome of one seed. Accuracies are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub status: RunStatus,
    pub error: Option<String>,
    pub epochs: Vec<EpochMetrics>,
    pub train_accuracy: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub detail: Option<RunDetail>,
}

impl SeedRun {
    fn failed(seed: u64, e: &Error) -> Self {
        Self {
            seed,
            status: RunStatus::Failed,
            error: Some(e.to_string()),
            epochs: Vec::new(),
            train_accuracy: None,
            val_accuracy: None,
            test_accuracy: None,
            detail: None,
        }
    }
}

/// One row of a comparison table: median accuracies over successful seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub model: String,
    pub train: Option<f64>,
    pub test: Option<f64>,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema: u32,
    pub name: String,
    pub family: String,
    pub status: RunStatus,
    pub row: TableRow,
    pub runs: Vec<SeedRun>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::Contract(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Load(e.to_string()))
    }

    pub fn failed(&self) -> bool {
        self.status == RunStatus::Failed
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn table_row(model: String, runs: &[SeedRun]) -> TableRow {
    let ok: Vec<&SeedRun> = runs.iter().filter(|r| r.status == RunStatus::Ok).collect();
    let pick = |f: fn(&SeedRun) -> Option<f64>| median(&ok.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
    TableRow {
        model,
        train: pick(|r| r.train_accuracy),
        test: pick(|r| r.test_accuracy),
        seeds: ok.len(),
    }
}

/// Errors that mark a seed as diverged rather than aborting the experiment.
pub fn is_divergence(e: &Error) -> bool {
    match e {
        Error::NonFinite { .. } | Error::Numerical { .. } => true,
        Error::Domain { value, .. } => !value.is_finite(),
        _ => false,
    }
}

fn percent(x: f64) -> f64 {
    100.0 * x
}

fn fusion_metrics(
    model: &FusionModel,
    store: &ParameterStore,
    data: &Dataset,
    colearn: Option<&CoLearnConfig>,
) -> Result<(f64, Option<f64>, f64, RunDetail)> {
    fn refs(s: &[ModalSequence]) -> Vec<&ModalSequence> {
        s.iter().collect()
    }
    let train = evaluate(model, store, &refs(&data.train), colearn)?;
    let val = if data.val.is_empty() {
        None
    } else {
        Some(percent(evaluate(model, store, &refs(&data.val), colearn)?.accuracy))
    };
    let test = evaluate(model, store, &refs(&data.test), colearn)?;
    if !test.nll.is_finite() || !train.nll.is_finite() {
        return Err(Error::NonFinite {
            term: "evaluation likelihood".into(),
            frame: 0,
        });
    }
    let detail = RunDetail::Fusion {
        lambda: colearn.and_then(|c| c.lambda.first().copied()),
        test_nll: test.nll,
        expert_accuracy: test.expert_accuracy.iter().map(|&a| percent(a)).collect(),
        gate_inside: test.gate_inside,
        gate_outside: test.gate_outside,
        shared_variance: test.shared_variance,
    };
    Ok((percent(train.accuracy), val, percent(test.accuracy), detail))
}

struct SeedOutput {
    run: SeedRun,
    model: SavedModel,
    /// Sequence whose attention trace is written.
    trace: Option<ModalSequence>,
}

fn scenario_data(config: &ExperimentConfig, seed: u64) -> Result<Dataset> {
    let data = gen_scenario(&ScenarioConfig {
        seed,
        ..config.scenario.clone()
    })?;
    if data.train.is_empty() || data.test.is_empty() {
        return Err(Error::Validation("scenario split leaves no training or test sequences".into()));
    }
    Ok(data)
}

fn train_fusion(
    config: &ExperimentConfig,
    network: &FusionConfig,
    colearn: Option<CoLearnConfig>,
    data: &Dataset,
    seed: u64,
) -> Result<(FusionModel, ParameterStore, Vec<EpochMetrics>)> {
    let model = FusionModel::new(network.clone())?;
    let mut store = ParameterStore::new();
    model.init(&mut store, &mut rng_for(seed, 100));
    let log = train_gradient(
        &model,
        &mut store,
        &data.train,
        &TrainConfig {
            epochs: config.epochs,
            batch_size: config.batch_size,
            optimizer: config.optimizer,
            tbptt: config.tbptt,
            colearn,
            seed: derive_seed(seed, 101),
        },
    )?;
    let epochs = log
        .epochs
        .iter()
        .map(|e| EpochMetrics {
            epoch: e.epoch,
            train_loss: e.loss,
            train_accuracy: Some(percent(e.accuracy)),
        })
        .collect();
    Ok((model, store, epochs))
}

fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<SeedOutput> {
    let ok = |epochs, train, val, test, detail| SeedRun {
        seed,
        status: RunStatus::Ok,
        error: None,
        epochs,
        train_accuracy: train,
        val_accuracy: val,
        test_accuracy: test,
        detail: Some(detail),
    };
    match (config.resolved_model(seed)?, &config.model) {
        (Resolved::Fusion(network), family) => {
            let data = scenario_data(config, seed)?;
            let (colearn, grid) = match family {
                ModelFamily::Fusion {
                    colearn, lambda_grid, ..
                } => (colearn.clone(), lambda_grid.clone()),
                _ => (None, Vec::new()),
            };
            let candidates: Vec<Option<CoLearnConfig>> = if grid.is_empty() {
                vec![colearn]
            } else {
                let base = colearn.unwrap_or_default();
                grid.iter()
                    .map(|&l| {
                        Some(CoLearnConfig {
                            lambda: vec![l],
                            ..base.clone()
                        })
                    })
                    .collect()
            };
            let mut best: Option<(f64, SeedOutput)> = None;
            for cl in candidates {
                let (model, store, epochs) = train_fusion(config, &network, cl.clone(), &data, seed)?;
                let (train, val, test, detail) = fusion_metrics(&model, &store, &data, cl.as_ref())?;
                let score = val.unwrap_or(train);
                if best.as_ref().is_none_or(|(s, _)| score > *s) {
                    let run = ok(epochs, Some(train), val, Some(test), detail);
                    best = Some((score, SeedOutput {
                        run,
                        model: SavedModel::Fusion { model, store },
                        trace: data.test.first().cloned(),
                    }));
                }
            }
            Ok(best.expect("at least one candidate").1)
        }
        (Resolved::Mvrnn(network), ModelFamily::Mvrnn { samples, .. }) => {
            let data = scenario_data(config, seed)?;
            let model = MvrnnModel::new(network)?;
            let mut store = ParameterStore::new();
            model.init(&mut store, &mut rng_for(seed, 100));
            let log = train_mvrnn(
                &model,
                &mut store,
                &data.train,
                &MvrnnTrainConfig {
                    epochs: config.epochs,
                    batch_size: config.batch_size,
                    samples: *samples,
                    optimizer: config.optimizer,
                    seed: derive_seed(seed, 101),
                },
            )?;
            let test = evaluate_elbo(&model, &store, &data.test, *samples, derive_seed(seed, 102))?;
            if !test.total.is_finite() {
                return Err(Error::NonFinite {
                    term: "test ELBO".into(),
                    frame: 0,
                });
            }
            let epochs = log
                .iter()
                .map(|e| EpochMetrics {
                    epoch: e.epoch,
                    train_loss: -e.elbo,
                    train_accuracy: None,
                })
                .collect();
            let detail = RunDetail::Mvrnn {
                test_elbo: test.total,
                kl_shared: test.kl_shared,
                kl_specific: test.kl_specific.clone(),
                min_kl: log.iter().map(|e| e.min_kl).fold(f64::INFINITY, f64::min),
            };
            Ok(SeedOutput {
                run: ok(epochs, None, None, None, detail),
                model: SavedModel::Mvrnn { model, store },
                trace: None,
            })
        }
        (Resolved::Embedding(pipeline), _) => {
            let (report, model) = run_pipeline(&pipeline)?;
            let epochs = report
                .siamese_loss
                .iter()
                .enumerate()
                .map(|(i, &l)| EpochMetrics {
                    epoch: i + 1,
                    train_loss: l,
                    train_accuracy: None,
                })
                .collect();
            let test = Some(percent(report.denoised_accuracy));
            Ok(SeedOutput {
                run: ok(epochs, None, None, test, RunDetail::Embedding(report)),
                model: SavedModel::Embedding(model),
                trace: None,
            })
        }
        (Resolved::Mvrnn(_), _) => unreachable!("resolved from the same family"),
    }
}

/// Validates, trains and evaluates every seed, then writes the artifacts.
/// A seed that diverges is recorded as failed and the others still run.
pub fn run_experiment(config: &ExperimentConfig) -> Result<MetricsReport> {
    config.validate()?;
    let out = config.out_dir();
    std::fs::create_dir_all(&out)?;
    atomic_write(&out.join("config.toml"), config.to_toml()?.as_bytes())?;
    let mut runs = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        match run_seed(config, seed) {
            Ok(output) => {
                let dir = out.join(format!("seed-{seed}"));
                save_model(&dir.join("model.fkm"), &output.model)?;
                if let Some(seq) = &output.trace {
                    let rows = emit_attention_trace(&output.model, seq)?;
                    atomic_write(&dir.join("trace.csv"), trace_csv(&rows)?.as_bytes())?;
                }
                runs.push(output.run);
            }
            Err(e) if is_divergence(&e) => runs.push(SeedRun::failed(seed, &e)),
            Err(e) => return Err(e),
        }
    }
    let status = if runs.iter().all(|r| r.status == RunStatus::Ok) {
        RunStatus::Ok
    } else {
        RunStatus::Failed
    };
    let report = MetricsReport {
        schema: REPORT_SCHEMA,
        name: config.name.clone(),
        family: config.model.name().into(),
        status,
        row: table_row(config.label(), &runs),
        runs,
    };
    atomic_write(&out.join("report.json"), report.to_json()?.as_bytes())?;
    Ok(report)
}

/// Evaluates a saved model on the data that `config` generates for `seed`,
/// without training.
pub fn evaluate_saved(model: &SavedModel, config: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    config.validate()?;
    let ok = |train, val, test, detail| SeedRun {
        seed,
        status: RunStatus::Ok,
        error: None,
        epochs: Vec::new(),
        train_accuracy: train,
        val_accuracy: val,
        test_accuracy: test,
        detail: Some(detail),
    };
    match model {
        SavedModel::Fusion { model, store } => {
            let data = scenario_data(config, seed)?;
            check_modalities(&model.config.modalities, &model.config.dims, &data)?;
            let colearn = match &config.model {
                ModelFamily::Fusion { colearn, .. } => colearn.as_ref(),
                _ => None,
            };
            let (train, val, test, detail) = fusion_metrics(model, store, &data, colearn)?;
            Ok(ok(Some(train), val, Some(test), detail))
        }
        SavedModel::Mvrnn { model, store } => {
            let data = scenario_data(config, seed)?;
            let all: Vec<usize> = (0..model.config.dims.len()).collect();
            check_modalities(&all, &model.config.dims, &data)?;
            let samples = match &config.model {
                ModelFamily::Mvrnn { samples, .. } => *samples,
                _ => 1,
            };
            let test = evaluate_elbo(model, store, &data.test, samples, derive_seed(seed, 102))?;
            let detail = RunDetail::Mvrnn {
                test_elbo: test.total,
                kl_shared: test.kl_shared,
                kl_specific: test.kl_specific.clone(),
                min_kl: test.min_kl,
            };
            Ok(ok(None, None, None, detail))
        }
        SavedModel::Embedding(p) => {
            let ModelFamily::Embedding { pipeline } = &config.model else {
                return Err(Error::Validation("an embedding model needs an embedding config".into()));
            };
            let pipeline = PipelineConfig {
                seed,
                ..pipeline.clone()
            };
            let eval = evaluate_pipeline(p, &pipeline_data(&pipeline)?, pipeline.k)?;
            let test = Some(percent(eval.denoised_accuracy));
            Ok(ok(None, None, test, RunDetail::EmbeddingEval(eval)))
        }
    }
}

fn check_modalities(modalities: &[usize], dims: &[usize], data: &Dataset) -> Result<()> {
    let seq = data.train.first().ok_or_else(|| Error::Validation("no training sequences".into()))?;
    for (&m, &d) in modalities.iter().zip(dims) {
        if m >= seq.modalities() || seq.x[m].cols() != d {
            return Err(Error::Validation(format!("model expects modality {m} of width {d}, data differs")));
        }
    }
    Ok(())
}

/// Table rows of several reports, in order.
pub fn compare(reports: &[MetricsReport]) -> Vec<TableRow> {
    reports.iter().map(|r| r.row.clone()).collect()
}

pub fn table_csv(rows: &[TableRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["model", "train", "test", "seeds"]).map_err(trace::csv_error)?;
    let cell = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in rows {
        w.write_record([r.model.clone(), cell(r.train), cell(r.test), r.seeds.to_string()])
            .map_err(trace::csv_error)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Contract(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv of UTF-8 fields"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modality_index_must_exist() {
        let config = ExperimentConfig {
            model: ModelFamily::Unimodal {
                modality: 3,
                network: FusionConfig::default(),
            },
            ..ExperimentConfig::default()
        };
        assert!(matches!(config.validate(), Err(Error::Validation(_))));
        let config = ExperimentConfig {
            model: ModelFamily::Fusion {
                network: FusionConfig {
                    modalities: vec![0, 5],
                    ..FusionConfig::default()
                },
                colearn: None,
                lambda_grid: Vec::new(),
            },
            ..ExperimentConfig::default()
        };
        assert!(matches!(config.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn default_config_survives_toml() {
        let config = ExperimentConfig::default();
        config.validate().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&config.to_toml().unwrap()).unwrap(), config);
    }

    #[test]
    fn sparse_toml_fills_defaults() {
        let config = ExperimentConfig::from_toml(
            "name = \"audio\"\nseeds = [1, 2]\n[model]\nfamily = \"unimodal\"\nmodality = 0\n",
        )
        .unwrap();
        config.validate().unwrap();
        assert_eq!(config.seeds, [1, 2]);
        assert_eq!(config.label(), "unimodal:audio");
        assert_eq!(config.out_dir(), Path::new("runs/audio"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(ExperimentConfig::from_toml("epoch = 3\n"), Err(Error::Validation(_))));
    }

    #[test]
    fn dims_come_from_the_scenario() {
        let mut config = ExperimentConfig::default();
        config.scenario.modalities[2].dim = 5;
        let Resolved::Fusion(f) = config.resolved_model(0).unwrap() else {
            panic!("wrong family");
        };
        assert_eq!(f.dims, [8, 8, 5]);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn table_row_skips_failed_seeds() {
        let ok = SeedRun {
            seed: 0,
            status: RunStatus::Ok,
            error: None,
            epochs: Vec::new(),
            train_accuracy: Some(90.0),
            val_accuracy: None,
            test_accuracy: Some(80.0),
            detail: None,
        };
        let bad = SeedRun::failed(1, &Error::NonFinite {
            term: "loss".into(),
            frame: 0,
        });
        let row = table_row("m".into(), &[ok, bad]);
        assert_eq!((row.train, row.test, row.seeds), (Some(90.0), Some(80.0), 1));
        assert_eq!(table_csv(&[row]).unwrap(), "model,train,test,seeds\nm,90,80,1\n");
    }
}
