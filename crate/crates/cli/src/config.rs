//! Declarative run configuration (JSON).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use slimbio_core::bench::{EnergyConfig, Mode};
use slimbio_core::datagen::Task;
use slimbio_core::metrics::MetricKind;
use slimbio_core::pruner::Criterion;
use slimbio_core::quantizer::ObserverKind;
use slimbio_core::trainer::{LossKind, SgdConfig};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Compress,
    Infer,
    Sweep,
    Bench,
    Datagen,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Compress => "compress",
            Command::Infer => "infer",
            Command::Sweep => "sweep",
            Command::Bench => "bench",
            Command::Datagen => "datagen",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    /// Task label used in report rows; defaults to the dataset's task.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prune: Option<PruneSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quant: Option<QuantSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub infer: Option<InferSection>,
    #[serde(default)]
    pub metric: MetricSection,
    #[serde(default)]
    pub energy: EnergyConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bench: Option<BenchSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub datagen: Option<DatagenSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

fn default_mode() -> Mode {
    Mode::Fp32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSection {
    #[serde(default = "default_criterion")]
    pub criterion: Criterion,
    pub sparsity: f64,
    /// Fine-tuning after pruning; absent or null means off.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetune: Option<SgdConfig>,
    /// Dataset directory used for fine-tuning.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_data: Option<PathBuf>,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
}

fn default_criterion() -> Criterion {
    Criterion::L1
}

fn default_loss() -> LossKind {
    LossKind::Mse
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObserverName {
    MinMax,
    EmaMinMax,
    Quantile,
    EmaQuantile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantSection {
    #[serde(default = "default_observer")]
    pub observer: ObserverName,
    #[serde(default = "default_quantile")]
    pub quantile: f64,
    #[serde(default = "default_momentum")]
    pub ema_momentum: f64,
    #[serde(default = "default_calib_samples")]
    pub calib_samples: usize,
    pub calib_data: PathBuf,
}

fn default_observer() -> ObserverName {
    ObserverName::EmaQuantile
}
fn default_quantile() -> f64 {
    0.9999
}
fn default_momentum() -> f64 {
    0.9
}
fn default_calib_samples() -> usize {
    8
}

impl QuantSection {
    pub fn observer_kind(&self) -> ObserverKind {
        match self.observer {
            ObserverName::MinMax => ObserverKind::MinMax,
            ObserverName::EmaMinMax => ObserverKind::EmaMinMax {
                momentum: self.ema_momentum,
            },
            ObserverName::Quantile => ObserverKind::Quantile {
                quantile: self.quantile,
            },
            ObserverName::EmaQuantile => ObserverKind::EmaQuantile {
                quantile: self.quantile,
                momentum: self.ema_momentum,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferSection {
    pub data: PathBuf,
    /// Spatial window extents; absent means whole-image inference.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<Vec<usize>>,
    #[serde(default = "default_overlap")]
    pub overlap: f64,
}

fn default_overlap() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSection {
    #[serde(default = "default_metric")]
    pub kind: MetricKind,
    /// Foreground threshold for dice and for instance extraction in ap50.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_metric() -> MetricKind {
    MetricKind::Pearson
}
fn default_threshold() -> f64 {
    0.5
}

impl Default for MetricSection {
    fn default() -> Self {
        Self {
            kind: default_metric(),
            threshold: default_threshold(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default = "default_criteria")]
    pub criteria: Vec<Criterion>,
    #[serde(default = "default_ratios")]
    pub ratios: Vec<f64>,
    /// Minimum fraction of parameters a recommended cell must remove.
    #[serde(default = "default_floor")]
    pub min_params_reduction: f64,
    /// Fine-tune every cell with the `prune.finetune` settings.
    #[serde(default)]
    pub finetune: bool,
}

fn default_criteria() -> Vec<Criterion> {
    Criterion::ALL.to_vec()
}
fn default_ratios() -> Vec<f64> {
    vec![0.0, 0.25, 0.5, 0.75]
}
fn default_floor() -> f64 {
    0.5
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            criteria: default_criteria(),
            ratios: default_ratios(),
            min_params_reduction: default_floor(),
            finetune: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchEntry {
    pub model: PathBuf,
    pub mode: Mode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    /// Models to compare; empty means the top-level `model` and `mode`.
    #[serde(default)]
    pub entries: Vec<BenchEntry>,
}

fn default_runs() -> usize {
    5
}
fn default_warmup() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatagenSection {
    pub task: Task,
    /// Split name -> phantom count. Seeds run consecutively across splits in
    /// name order, so splits never share a phantom.
    pub splits: BTreeMap<String, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_sigma: Option<f64>,
}

fn config_err(path: &str, message: impl Into<String>) -> CliError {
    CliError::Config {
        path: path.to_string(),
        message: message.into(),
    }
}

impl RunConfig {
    /// Parses JSON, reporting the field path of the first error.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            config_err(&path, e.into_inner().to_string())
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Reads, parses, resolves relative paths against the config file's
    /// directory and validates for `cmd`.
    pub fn load(path: &Path, cmd: Command) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err("", format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.resolve(path.parent().unwrap_or(Path::new(".")));
        cfg.validate(cmd)?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = &mut self.model {
            fix(p);
        }
        if let Some(p) = self.prune.as_mut().and_then(|s| s.train_data.as_mut()) {
            fix(p);
        }
        if let Some(q) = &mut self.quant {
            fix(&mut q.calib_data);
        }
        if let Some(i) = &mut self.infer {
            fix(&mut i.data);
        }
        if let Some(b) = &mut self.bench {
            b.entries.iter_mut().for_each(|e| fix(&mut e.model));
        }
        if let Some(p) = &mut self.output {
            fix(p);
        }
        if let EnergyConfig::CounterFile { root: Some(r), .. } = &mut self.energy {
            fix(r);
        }
    }

    /// Checks that the sections `cmd` needs are present and every input path
    /// exists.
    pub fn validate(&self, cmd: Command) -> Result<(), CliError> {
        let exists = |field: &str, p: &Path| {
            if p.exists() {
                Ok(())
            } else {
                Err(config_err(field, format!("{} does not exist", p.display())))
            }
        };
        let need_model = || match &self.model {
            Some(m) => exists("model", m),
            None => Err(config_err("model", "required")),
        };
        let need_infer = || match &self.infer {
            Some(i) => {
                exists("infer.data", &i.data)?;
                if let Some(w) = &i.window {
                    if w.is_empty() || w.contains(&0) {
                        return Err(config_err("infer.window", "extents must be positive"));
                    }
                }
                if !(0.0..1.0).contains(&i.overlap) {
                    return Err(config_err("infer.overlap", "must be in [0, 1)"));
                }
                Ok(())
            }
            None => Err(config_err("infer", "required")),
        };
        let check_prune = |p: &PruneSection| {
            if !(0.0..1.0).contains(&p.sparsity) {
                return Err(config_err("prune.sparsity", "must be in [0, 1)"));
            }
            if let Some(ft) = &p.finetune {
                ft.validate().map_err(|e| config_err("prune.finetune", e.to_string()))?;
                match &p.train_data {
                    Some(d) => exists("prune.train_data", d)?,
                    None => return Err(config_err("prune.train_data", "required when finetune is set")),
                }
            }
            Ok(())
        };
        if let Some(p) = &self.prune {
            check_prune(p)?;
        }
        if let Some(q) = &self.quant {
            q.observer_kind().validate().map_err(|e| config_err("quant.observer", e.to_string()))?;
            if q.calib_samples == 0 {
                return Err(config_err("quant.calib_samples", "must be positive"));
            }
        }
        if let EnergyConfig::TdpModel { tdp_watts } = self.energy {
            if tdp_watts.is_nan() || tdp_watts <= 0.0 {
                return Err(config_err("energy.tdp_watts", "must be positive"));
            }
        }
        match cmd {
            Command::Compress => {
                need_model()?;
                if self.mode.prunes() && self.prune.is_none() {
                    return Err(config_err("prune", format!("required for mode {}", self.mode.name())));
                }
                if self.mode.quantizes() {
                    match &self.quant {
                        Some(q) => exists("quant.calib_data", &q.calib_data)?,
                        None => return Err(config_err("quant", format!("required for mode {}", self.mode.name()))),
                    }
                }
            }
            Command::Infer => {
                need_model()?;
                need_infer()?;
            }
            Command::Sweep => {
                need_model()?;
                need_infer()?;
                let s = self.sweep.clone().unwrap_or_default();
                if s.criteria.is_empty() || s.ratios.is_empty() {
                    return Err(config_err("sweep", "criteria and ratios must be non-empty"));
                }
                if let Some(r) = s.ratios.iter().find(|r| !(0.0..1.0).contains(*r)) {
                    return Err(config_err("sweep.ratios", format!("{r} is outside [0, 1)")));
                }
                if s.finetune && self.prune.as_ref().and_then(|p| p.finetune.as_ref()).is_none() {
                    return Err(config_err("sweep.finetune", "needs prune.finetune and prune.train_data"));
                }
            }
            Command::Bench => {
                need_infer()?;
                let b = self.bench.as_ref();
                match b.map(|b| b.entries.as_slice()) {
                    Some(entries) if !entries.is_empty() => {
                        for (i, e) in entries.iter().enumerate() {
                            exists(&format!("bench.entries[{i}].model"), &e.model)?;
                        }
                    }
                    _ => need_model()?,
                }
                if b.is_some_and(|b| b.runs == 0) {
                    return Err(config_err("bench.runs", "must be positive"));
                }
            }
            Command::Datagen => {
                let d = self.datagen.as_ref().ok_or_else(|| config_err("datagen", "required"))?;
                if d.splits.is_empty() {
                    return Err(config_err("datagen.splits", "must name at least one split"));
                }
            }
        }
        Ok(())
    }

    /// Benchmark entries, falling back to the top-level model and mode.
    pub fn bench_entries(&self) -> Vec<BenchEntry> {
        match &self.bench {
            Some(b) if !b.entries.is_empty() => b.entries.clone(),
            _ => self
                .model
                .iter()
                .map(|m| BenchEntry {
                    model: m.clone(),
                    mode: self.mode,
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FULL: &str = r#"{
        "model": "m.ebm",
        "mode": "prune+int8",
        "task": "denoise3d",
        "prune": {"criterion": "FPGM", "sparsity": 0.5, "finetune": {"lr": 0.01, "epochs": 3}, "train_data": "train"},
        "quant": {"observer": "min_max", "calib_samples": 4, "calib_data": "calib"},
        "infer": {"data": "test", "window": [224, 224], "overlap": 0.1},
        "metric": {"kind": "dice", "threshold": 0.4},
        "energy": {"backend": "tdp_model", "tdp_watts": 35.0},
        "sweep": {"ratios": [0.0, 0.5]},
        "bench": {"runs": 3, "entries": [{"model": "a.ebm", "mode": "fp32"}]},
        "datagen": {"task": "instance2d", "splits": {"test": 2}},
        "output": "out",
        "seed": 7
    }"#;

    #[test]
    fn round_trip() {
        let cfg = RunConfig::from_json(FULL).unwrap();
        assert_eq!(cfg.mode, Mode::PruneInt8);
        assert_eq!(cfg.prune.as_ref().unwrap().finetune.as_ref().unwrap().momentum, 0.9);
        assert_eq!(cfg.quant.as_ref().unwrap().observer_kind(), ObserverKind::MinMax);
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        let minimal = RunConfig::from_json("{}").unwrap();
        assert_eq!(RunConfig::from_json(&minimal.to_json()).unwrap(), minimal);
    }

    #[test]
    fn errors_carry_field_paths() {
        let err = RunConfig::from_json(r#"{"prune": {"sparsity": "half"}}"#).unwrap_err();
        assert!(matches!(&err, CliError::Config { path, .. } if path == "prune.sparsity"), "{err}");
        let err = RunConfig::from_json(r#"{"infer": {"data": "x", "windw": [1]}}"#).unwrap_err();
        assert!(matches!(&err, CliError::Config { path, .. } if path.starts_with("infer")), "{err}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn mode_sections_and_paths_are_checked() {
        let dir = tempfile::tempdir().unwrap();
        let model = dir.path().join("m.ebm");
        std::fs::write(&model, b"x").unwrap();
        let mut cfg = RunConfig::from_json("{}").unwrap();
        assert!(matches!(cfg.validate(Command::Compress), Err(CliError::Config { path, .. }) if path == "model"));
        cfg.model = Some(model);
        cfg.validate(Command::Compress).unwrap();
        cfg.mode = Mode::Int8;
        assert!(matches!(cfg.validate(Command::Compress), Err(CliError::Config { path, .. }) if path == "quant"));
        cfg.quant = Some(QuantSection {
            observer: ObserverName::MinMax,
            quantile: 0.9999,
            ema_momentum: 0.9,
            calib_samples: 2,
            calib_data: dir.path().join("missing"),
        });
        assert!(
            matches!(cfg.validate(Command::Compress), Err(CliError::Config { path, .. }) if path == "quant.calib_data")
        );
        assert!(matches!(cfg.validate(Command::Datagen), Err(CliError::Config { path, .. }) if path == "datagen"));
    }
}
