//! Run configuration: TOML file, `key=value` overrides, then typed access.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::conversion::{ConvertOptions, LnStatsMode};
use crate::energy::EnergyConstants;
use crate::error::{Error, Result};
use crate::finetune::{FinetuneConfig, SurrogateKind};
use crate::model::{Nonlinearity, SnnSettings, TrainSettings, TransformerConfig};
use crate::neuron::{NeuronParams, ResetMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_layer: usize,
    pub n_head: usize,
    pub d_model: usize,
    pub block_size: usize,
    pub ffn_mult: usize,
    pub nonlinearity: Nonlinearity,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            n_layer: 4,
            n_head: 4,
            d_model: 128,
            block_size: 64,
            ffn_mult: 4,
            nonlinearity: Nonlinearity::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: Option<u64>,
    pub warmup: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub eval_windows: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainSettings::default();
        Self {
            steps: 1500,
            lr: t.lr,
            batch: t.batch,
            seed: None,
            warmup: t.warmup,
            weight_decay: t.weight_decay,
            grad_clip: t.grad_clip,
            eval_windows: t.eval_windows,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SnnSection {
    pub time_window: usize,
    pub threshold: f64,
    pub reset: ResetMode,
    pub leak_tau: Option<f64>,
    pub encoder_clip: Option<f64>,
    pub score_threshold: Option<f64>,
}

impl Default for SnnSection {
    fn default() -> Self {
        Self {
            time_window: 64,
            threshold: 1.0,
            reset: ResetMode::Subtract,
            leak_tau: None,
            encoder_clip: None,
            score_threshold: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvertSection {
    pub calib_sequences: usize,
    pub percentile: Option<f64>,
    pub ln_stats: LnStatsMode,
    pub seed: Option<u64>,
}

impl Default for ConvertSection {
    fn default() -> Self {
        Self {
            calib_sequences: 8,
            percentile: None,
            ln_stats: LnStatsMode::Token,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub slope_k: f64,
    pub kind: SurrogateKind,
    pub seed: Option<u64>,
    /// Training windows the batches are drawn from.
    pub windows: usize,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let f = FinetuneConfig::default();
        Self {
            lr: f.lr,
            steps: f.steps,
            batch: f.batch,
            slope_k: f.k,
            kind: f.kind,
            seed: None,
            windows: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub windows: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { windows: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergySection {
    pub e_mac_pj: f64,
    pub e_ac_pj: f64,
}

impl Default for EnergySection {
    fn default() -> Self {
        let c = EnergyConstants::default();
        Self {
            e_mac_pj: c.e_mac_pj,
            e_ac_pj: c.e_ac_pj,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub corpus_path: PathBuf,
    pub split_ratio: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            corpus_path: PathBuf::from("data/shakespeare.txt"),
            split_ratio: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; a section seed left unset falls back to it.
    pub seed: u64,
    pub model: ModelSection,
    pub train: TrainSection,
    pub snn: SnnSection,
    pub convert: ConvertSection,
    pub finetune: FinetuneSection,
    pub eval: EvalSection,
    pub energy: EnergySection,
    pub data: DataSection,
}

/// Parses an override value as a TOML literal, or as a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `section.key=value` to a raw TOML table.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let mut cur = table;
    for part in &path[..path.len() - 1] {
        let entry = cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not a section")))?;
    }
    cur.insert(path[path.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Builds a config from optional file text and ordered overrides.
    pub fn from_layers(file_text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = match file_text {
            Some(text) => text.parse().map_err(|e| Error::Config(format!("{e}")))?,
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => Some(fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?),
            None => None,
        };
        Self::from_layers(text.as_deref(), overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.data.split_ratio > 0.0 && self.data.split_ratio < 1.0) {
            return Err(Error::Config(format!("data.split_ratio must lie in (0, 1), got {}", self.data.split_ratio)));
        }
        if let Some(p) = self.convert.percentile {
            if !(p > 0.0 && p <= 100.0) {
                return Err(Error::Config(format!("convert.percentile must lie in (0, 100], got {p}")));
            }
        }
        if self.convert.calib_sequences == 0 || self.eval.windows == 0 || self.finetune.windows == 0 {
            return Err(Error::Config("calibration, evaluation and finetune window counts must be positive".into()));
        }
        self.transformer(1).validate().map_err(|e| Error::Config(e.to_string()))?;
        self.train_settings().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.finetune_config().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.energy_constants().validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Sets the root seed and every section seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = Some(seed);
        self.convert.seed = Some(seed);
        self.finetune.seed = Some(seed);
    }

    pub fn transformer(&self, vocab_size: usize) -> TransformerConfig {
        let m = &self.model;
        let mut cfg = TransformerConfig::new(m.n_layer, m.n_head, m.d_model, m.block_size, vocab_size);
        cfg.ffn_mult = m.ffn_mult;
        cfg.nonlinearity = m.nonlinearity;
        cfg.snn = SnnSettings {
            time_window: self.snn.time_window,
            neuron: NeuronParams {
                threshold: self.snn.threshold,
                leak_tau: self.snn.leak_tau,
                reset: self.snn.reset,
                bipolar: true,
            },
            encoder_clip: self.snn.encoder_clip,
            score_threshold: self.snn.score_threshold,
        };
        cfg
    }

    pub fn train_settings(&self) -> TrainSettings {
        let t = &self.train;
        TrainSettings {
            steps: t.steps,
            lr: t.lr,
            batch: t.batch,
            seed: t.seed.unwrap_or(self.seed),
            weight_decay: t.weight_decay,
            warmup: t.warmup,
            grad_clip: t.grad_clip,
            eval_windows: t.eval_windows,
            ..TrainSettings::default()
        }
    }

    pub fn convert_options(&self) -> ConvertOptions {
        ConvertOptions {
            ln_stats: self.convert.ln_stats,
            percentile: self.convert.percentile,
            seed: self.convert.seed.unwrap_or(self.seed),
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        let f = &self.finetune;
        FinetuneConfig {
            lr: f.lr,
            steps: f.steps,
            batch: f.batch,
            k: f.slope_k,
            kind: f.kind,
            seed: f.seed.unwrap_or(self.seed),
        }
    }

    pub fn energy_constants(&self) -> EnergyConstants {
        EnergyConstants {
            e_mac_pj: self.energy.e_mac_pj,
            e_ac_pj: self.energy.e_ac_pj,
        }
    }
}
