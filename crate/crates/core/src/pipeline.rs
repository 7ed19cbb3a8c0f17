//! End-to-end stages driven by a [`RunConfig`].

use crate::config::RunConfig;
use crate::conversion::{calibration_batch, convert, ConversionReport};
use crate::data::{ingest_corpus, Corpus, Vocab};
use crate::energy::{count_asa_flops, count_spike_ops, estimate, EnergyReport, OpCounters, SpikeOpCount};
use crate::error::{Error, Result};
use crate::finetune::{finetune_ssa, LossCurve};
use crate::metrics::{evaluate, EvalReport};
use crate::model::{eval_windows, forward_snn_traced, train_baseline, AnnParams, CheckpointKind, ModelCheckpoint, SnnModel, TrainReport};

/// Seed offsets keep the calibration and fine-tuning draws independent.
const CALIB_STREAM: u64 = 0xca11b;
const FINETUNE_STREAM: u64 = 0xf17e;

pub fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    ingest_corpus(&cfg.data.corpus_path, cfg.data.split_ratio)
}

/// Checks that `ck` was trained on the same character table as `corpus`.
pub fn check_vocab(ck: &ModelCheckpoint, corpus: &Corpus) -> Result<()> {
    match &ck.vocab {
        Some(table) if Vocab::from_table(table)? != corpus.vocab => Err(Error::Corpus(
            "checkpoint vocabulary differs from the corpus vocabulary".into(),
        )),
        _ if ck.config.vocab_size != corpus.vocab.len() => Err(Error::Corpus(format!(
            "checkpoint expects {} symbols, corpus has {}",
            ck.config.vocab_size,
            corpus.vocab.len()
        ))),
        _ => Ok(()),
    }
}

pub fn train(cfg: &RunConfig, corpus: &Corpus) -> Result<(ModelCheckpoint, TrainReport)> {
    let model = cfg.transformer(corpus.vocab.len());
    let (p, report) = train_baseline(&corpus.train, &corpus.val, &model, &cfg.train_settings())?;
    Ok((p.to_checkpoint(&model, Some(corpus.vocab.table())), report))
}

/// Applies the run's spiking settings to an analog checkpoint's config.
fn with_snn_settings(cfg: &RunConfig, ann: &ModelCheckpoint) -> ModelCheckpoint {
    let mut ck = ann.clone();
    ck.config.snn = cfg.transformer(ann.config.vocab_size).snn;
    ck
}

pub fn convert_stage(cfg: &RunConfig, corpus: &Corpus, ann: &ModelCheckpoint) -> Result<(ModelCheckpoint, ConversionReport)> {
    ann.require_kind(CheckpointKind::Analog)?;
    check_vocab(ann, corpus)?;
    let opts = cfg.convert_options();
    let calib = calibration_batch(&corpus.train, cfg.convert.calib_sequences, ann.config.block_size, opts.seed ^ CALIB_STREAM)?;
    convert(&with_snn_settings(cfg, ann), &calib, &opts)
}

pub fn finetune_stage(cfg: &RunConfig, corpus: &Corpus, ann: &ModelCheckpoint, snn: &ModelCheckpoint) -> Result<(ModelCheckpoint, LossCurve)> {
    check_vocab(ann, corpus)?;
    let fc = cfg.finetune_config();
    let windows = calibration_batch(&corpus.train, cfg.finetune.windows, ann.config.block_size, fc.seed ^ FINETUNE_STREAM)?;
    finetune_ssa(snn, ann, &windows, &fc)
}

/// Held-out fidelity report; the spiking fields are filled only when a
/// spiking checkpoint is given.
pub fn eval_stage(cfg: &RunConfig, corpus: &Corpus, ann: &ModelCheckpoint, snn: Option<&ModelCheckpoint>) -> Result<EvalReport> {
    ann.require_kind(CheckpointKind::Analog)?;
    check_vocab(ann, corpus)?;
    let p = AnnParams::from_checkpoint(ann)?;
    let windows = eval_windows(&corpus.val, ann.config.block_size, cfg.eval.windows);
    if windows.is_empty() {
        return Err(Error::Corpus("validation split is shorter than one block".into()));
    }
    let model = match snn {
        Some(ck) => {
            ck.require_kind(CheckpointKind::Spiking)?;
            Some(SnnModel::from_checkpoint(ck)?)
        }
        None => None,
    };
    let steps = cfg.snn.time_window;
    evaluate(&p, &ann.config, model.as_ref().map(|m| (m, steps)), &windows, corpus.bytes_per_token, "val")
}

/// Energy of one block-length validation window through both attention paths.
pub fn energy_stage(cfg: &RunConfig, corpus: &Corpus, snn: &ModelCheckpoint) -> Result<(EnergyReport, SpikeOpCount)> {
    snn.require_kind(CheckpointKind::Spiking)?;
    let m = SnnModel::from_checkpoint(snn)?;
    let n = m.config.block_size.min(corpus.val.len());
    if n == 0 {
        return Err(Error::Corpus("validation split is empty".into()));
    }
    let tokens = &corpus.val[..n];
    let (_, trace) = forward_snn_traced(&m, tokens, cfg.snn.time_window)?;
    let ssa = trace.ssa_total();
    let asa = count_asa_flops(&m.config, n)?;
    let report = estimate(&OpCounters::from_runs(&asa, &ssa), &cfg.energy_constants())?;
    Ok((report, count_spike_ops(&ssa)))
}
