//! Analog-to-spiking conversion.
//!
//! Calibration runs the analog model on a fixed token batch, records the
//! largest activation magnitude feeding every spiking layer, and rescales
//! weights so each layer's spike rates carry its activations in units of
//! that maximum. Block LayerNorms are replaced by fixed affines computed
//! from calibration statistics and merged into the linear layer after them.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{forward_batch, AnnParams, CheckpointKind, LnAffine, LnMode, ModelCheckpoint, Nonlinearity, Tensor, TransformerConfig, LN_EPS};
use crate::neuron::{NeuronLayerState, NeuronParams, SpikeTrain};

/// How LayerNorm statistics are pooled over the calibration batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LnStatsMode {
    /// Per-token mean and variance across channels, averaged over tokens
    /// and broadcast to every channel.
    #[default]
    Token,
    /// Mean and variance of each channel across tokens.
    Channel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleEntry {
    pub name: String,
    /// Largest observed activation magnitude.
    pub a_l: f64,
    /// Scale actually used; equals `a_l` unless a percentile was requested.
    pub s_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LnFoldStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Channels whose calibration variance was zero.
    pub degenerate_channels: Vec<usize>,
    /// Largest absolute difference, over the calibration batch, between the
    /// true LayerNorm path and its fold, measured after the next linear layer.
    pub max_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationInfo {
    /// SHA-256 of the calibration token ids.
    pub id: String,
    pub seed: u64,
    pub sequences: usize,
    pub positions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionReport {
    pub scales: Vec<ScaleEntry>,
    pub layer_norms: Vec<LnFoldStats>,
    pub ln_stats: LnStatsMode,
    pub encoder_clip: f64,
    pub percentile: Option<f64>,
    pub threshold: f64,
    pub calibration: CalibrationInfo,
}

impl ConversionReport {
    pub fn scale(&self, name: &str) -> Result<f64> {
        self.scales
            .iter()
            .find(|e| e.name == name)
            .map(|e| e.s_norm)
            .ok_or_else(|| Error::Format(format!("conversion report has no scale `{name}`")))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Scale-table key of a site inside block `layer`.
pub fn scale_name(layer: usize, site: &str) -> String {
    format!("h.{layer}.{site}")
}

/// One dense layer `y = x · W + b` of a ReLU network.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

fn relu_forward(layers: &[DenseLayer], x: ArrayView2<'_, f64>) -> Vec<Array2<f64>> {
    let mut pre = Vec::with_capacity(layers.len());
    let mut h = x.to_owned();
    for l in layers {
        let z = h.dot(&l.w) + &l.b;
        h = z.mapv(|v| v.max(0.0));
        pre.push(z);
    }
    pre
}

fn positive_scale(s: f64, what: &str) -> Result<()> {
    if s.is_finite() && s > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParam(format!("{what} must be positive, got {s}")))
    }
}

/// Largest value of `xs`, or the given percentile of it.
fn extreme(xs: impl Iterator<Item = f64>, percentile: Option<f64>) -> f64 {
    match percentile {
        None => xs.fold(f64::NEG_INFINITY, f64::max),
        Some(p) => {
            let mut v: Vec<f64> = xs.collect();
            if v.is_empty() {
                return f64::NEG_INFINITY;
            }
            v.sort_by(f64::total_cmp);
            let rank = ((p / 100.0) * (v.len() - 1) as f64).round() as usize;
            v[rank.min(v.len() - 1)]
        }
    }
}

/// Per-layer maximum positive pre-activation of a ReLU network.
pub fn collect_max_activations(layers: &[DenseLayer], calib: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    collect_max_activations_with(layers, calib, None)
}

pub fn collect_max_activations_with(layers: &[DenseLayer], calib: ArrayView2<'_, f64>, percentile: Option<f64>) -> Result<Vec<f64>> {
    if calib.nrows() == 0 {
        return Err(Error::InvalidParam("calibration batch is empty".into()));
    }
    relu_forward(layers, calib)
        .iter()
        .enumerate()
        .map(|(i, z)| {
            let a = extreme(z.iter().copied(), percentile);
            if a > 0.0 {
                Ok(a)
            } else {
                Err(Error::DeadLayer(format!("layer {i} never activates on the calibration batch")))
            }
        })
        .collect()
}

/// `W · s_prev / s_cur` and `b / s_cur`.
pub fn normalize_layer(w: &Array2<f64>, b: &Array1<f64>, s_prev: f64, s_cur: f64) -> Result<(Array2<f64>, Array1<f64>)> {
    positive_scale(s_prev, "previous-layer scale")?;
    positive_scale(s_cur, "layer scale")?;
    Ok((w * (s_prev / s_cur), b / s_cur))
}

/// Normalizes every layer of a ReLU network whose inputs arrive divided by
/// `input_scale`. Returns the normalized layers and the scales used.
pub fn convert_mlp(layers: &[DenseLayer], calib: ArrayView2<'_, f64>, input_scale: f64) -> Result<(Vec<DenseLayer>, Vec<f64>)> {
    let scales = collect_max_activations(layers, calib)?;
    let mut prev = input_scale;
    let mut out = Vec::with_capacity(layers.len());
    for (l, &s) in layers.iter().zip(&scales) {
        let (w, b) = normalize_layer(&l.w, &l.b, prev, s)?;
        out.push(DenseLayer { w, b });
        prev = s;
    }
    Ok((out, scales))
}

/// Runs a normalized ReLU network as unipolar IF layers over `steps` steps,
/// driving the first layer with the constant input `x`. Returns the output
/// layer's rates.
pub fn run_converted_mlp(layers: &[DenseLayer], x: ArrayView2<'_, f64>, steps: usize, v_th: f64) -> Result<Array2<f64>> {
    if steps == 0 {
        return Err(Error::InvalidParam("time window must be at least one step".into()));
    }
    let n = x.nrows();
    let mut states = layers
        .iter()
        .map(|l| NeuronLayerState::new(NeuronParams::unipolar_if(v_th), n, l.w.ncols()))
        .collect::<Result<Vec<_>>>()?;
    let mut trains: Vec<SpikeTrain> = layers.iter().map(|l| SpikeTrain::zeros(steps, n, l.w.ncols())).collect();
    let first = x.dot(&layers[0].w) + &layers[0].b;
    for t in 0..steps {
        for i in 0..layers.len() {
            let current = if i == 0 {
                first.clone()
            } else {
                let s = trains[i - 1].step(t).mapv(f64::from);
                s.dot(&layers[i].w) + &layers[i].b
            };
            states[i].step_into((current * v_th).view(), trains[i].step_mut(t))?;
        }
    }
    Ok(trains.last().expect("at least one layer").rates())
}

/// Affine stand-in for a LayerNorm with fixed statistics.
pub fn fold_layernorm(gamma: &Array1<f64>, beta: &Array1<f64>, mean: &Array1<f64>, var: &Array1<f64>, eps: f64) -> Result<(Array1<f64>, Array1<f64>)> {
    let d = gamma.len();
    for (what, a) in [("beta", beta), ("mean", mean), ("var", var)] {
        if a.len() != d {
            return Err(Error::shape(what, &[d], &[a.len()]));
        }
    }
    if var.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidParam("calibration variance must be finite and non-negative".into()));
    }
    let rstd = var.mapv(|v| 1.0 / (v + eps).sqrt());
    let scale = gamma * &rstd;
    let shift = beta - &(gamma * mean * &rstd);
    Ok((scale, shift))
}

/// Merges `x * scale + shift` into the following linear layer `u · W + b`:
/// row `j` of `W` is multiplied by `scale[j]` and `shift · W` joins the bias.
pub fn fold_into_linear(scale: &Array1<f64>, shift: &Array1<f64>, w: &Array2<f64>, b: &Array1<f64>) -> (Array2<f64>, Array1<f64>) {
    let w2 = w * &scale.view().insert_axis(Axis(1));
    let b2 = b + &shift.dot(w);
    (w2, b2)
}

fn f64_1(a: &Array1<f32>) -> Array1<f64> {
    a.mapv(f64::from)
}

fn f64_2(a: &Array2<f32>) -> Array2<f64> {
    a.mapv(f64::from)
}

fn ln_stats(x: &Array2<f32>, mode: LnStatsMode) -> (Array1<f64>, Array1<f64>) {
    let (rows, d) = x.dim();
    let x = x.mapv(f64::from);
    match mode {
        LnStatsMode::Token => {
            let mut mean = 0.0;
            let mut var = 0.0;
            for r in x.outer_iter() {
                let m = r.sum() / d as f64;
                mean += m;
                var += r.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d as f64;
            }
            (Array1::from_elem(d, mean / rows as f64), Array1::from_elem(d, var / rows as f64))
        }
        LnStatsMode::Channel => {
            let mean = x.mean_axis(Axis(0)).expect("non-empty calibration batch");
            let var = x.var_axis(Axis(0), 0.0);
            (mean, var)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvertOptions {
    pub ln_stats: LnStatsMode,
    /// Replace maxima with this percentile (for example 99.9).
    pub percentile: Option<f64>,
    /// Seed that selected the calibration batch; recorded only.
    pub seed: u64,
}

impl Default for ConvertOptions {
    fn default() -> Self {
        Self {
            ln_stats: LnStatsMode::Token,
            percentile: None,
            seed: 0,
        }
    }
}

fn calibration_id(calib: &[Vec<usize>]) -> String {
    let mut h = Sha256::new();
    for seq in calib {
        for &t in seq {
            h.update((t as u64).to_le_bytes());
        }
        h.update(u64::MAX.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Folded LayerNorm affines and their statistics for every block.
pub fn fold_model_layernorms(
    p: &AnnParams,
    cfg: &TransformerConfig,
    calib_tokens: &[usize],
    batch: usize,
    mode: LnStatsMode,
) -> Result<(Vec<(LnAffine, LnAffine)>, Vec<LnFoldStats>)> {
    let (_, cache) = forward_batch(p, cfg, calib_tokens, batch, LnMode::Exact)?;
    let mut folds = Vec::with_capacity(cfg.n_layer);
    let mut stats = Vec::with_capacity(2 * cfg.n_layer);
    for (i, (l, a)) in p.layers.iter().zip(&cache.layers).enumerate() {
        let mut pair = Vec::with_capacity(2);
        for (tag, x, g, b, u, w) in [
            ("ln1", &a.x_in, &l.ln1_g, &l.ln1_b, &a.u1, &l.w_q),
            ("ln2", &a.h, &l.ln2_g, &l.ln2_b, &a.u2, &l.w_in),
        ] {
            let (mean, var) = ln_stats(x, mode);
            let (scale, shift) = fold_layernorm(&f64_1(g), &f64_1(b), &mean, &var, f64::from(LN_EPS))?;
            let wd = f64_2(w);
            let true_out = f64_2(u).dot(&wd);
            let folded_out = (f64_2(x) * &scale + &shift).dot(&wd);
            let max_deviation = (&true_out - &folded_out).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let degenerate_channels = var.iter().enumerate().filter(|(_, &v)| v == 0.0).map(|(j, _)| j).collect();
            stats.push(LnFoldStats {
                name: format!("h.{i}.{tag}"),
                mean: mean.to_vec(),
                var: var.to_vec(),
                degenerate_channels,
                max_deviation,
            });
            pair.push(LnAffine {
                scale: scale.mapv(|v| v as f32),
                shift: shift.mapv(|v| v as f32),
            });
        }
        let ln2 = pair.pop().expect("two folds");
        let ln1 = pair.pop().expect("two folds");
        folds.push((ln1, ln2));
    }
    Ok((folds, stats))
}

/// Converts an analog checkpoint into a spiking one.
pub fn convert(ann: &ModelCheckpoint, calib: &[Vec<usize>], opts: &ConvertOptions) -> Result<(ModelCheckpoint, ConversionReport)> {
    ann.require_kind(CheckpointKind::Analog)?;
    let cfg = &ann.config;
    if cfg.nonlinearity != Nonlinearity::Relu {
        return Err(Error::UnsupportedNonlinearity(format!(
            "checkpoint uses {}; retrain with the relu nonlinearity to convert",
            cfg.nonlinearity.name()
        )));
    }
    if calib.is_empty() {
        return Err(Error::InvalidParam("calibration batch is empty".into()));
    }
    let n = calib[0].len();
    if calib.iter().any(|s| s.len() != n) {
        return Err(Error::InvalidParam("calibration sequences must share one length".into()));
    }
    if let Some(p) = opts.percentile {
        if !(p > 0.0 && p <= 100.0) {
            return Err(Error::InvalidParam(format!("percentile must lie in (0, 100], got {p}")));
        }
    }
    let p = AnnParams::from_checkpoint(ann)?;
    let tokens: Vec<usize> = calib.concat();
    let (folds, ln_fold_stats) = fold_model_layernorms(&p, cfg, &tokens, calib.len(), opts.ln_stats)?;
    let (_, cache) = forward_batch(&p, cfg, &tokens, calib.len(), LnMode::Folded(&folds))?;

    let pct = opts.percentile;
    let abs_max = |a: &Array2<f32>| extreme(a.iter().map(|v| f64::from(v.abs())), pct);
    let a_max = |a: &Array2<f32>| extreme(a.iter().map(|&v| f64::from(v)), pct);
    let encoder_clip = match cfg.snn.encoder_clip {
        Some(c) => c,
        None => abs_max(&cache.layers[0].x_in),
    };
    positive_scale(encoder_clip, "encoder clip")?;
    let theta = cfg.snn.neuron.threshold;

    let mut scales = vec![ScaleEntry {
        name: "encoder".to_string(),
        a_l: encoder_clip,
        s_norm: encoder_clip,
    }];
    let mut push = |name: String, a: &Array2<f32>, signed: bool| -> Result<f64> {
        let (s_norm, a_l) = if signed {
            (a_max(a), a.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(f64::from(v))))
        } else {
            (abs_max(a), a.iter().fold(0.0f64, |m, &v| m.max(f64::from(v.abs()))))
        };
        if !(s_norm > 0.0 && s_norm.is_finite()) {
            return Err(Error::DeadLayer(format!("`{name}` never activates on the calibration batch")));
        }
        scales.push(ScaleEntry { name, a_l, s_norm });
        Ok(s_norm)
    };

    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut put = |name: String, a: ndarray::ArrayD<f64>| {
        let shape = a.shape().to_vec();
        let data = a.iter().map(|&v| v as f32).collect();
        tensors.insert(name, Tensor { shape, data });
    };

    for (i, ((l, acts), (ln1, ln2))) in p.layers.iter().zip(&cache.layers).zip(&folds).enumerate() {
        let lambda = push(scale_name(i, "attn_in"), &acts.u1, false)?;
        let s_q = push(scale_name(i, "q"), &acts.q, false)?;
        let s_k = push(scale_name(i, "k"), &acts.k, false)?;
        let s_v = push(scale_name(i, "v"), &acts.v, false)?;
        let lambda_mid = push(scale_name(i, "mlp_in"), &acts.u2, false)?;
        let s_hid = push(scale_name(i, "hidden"), &acts.z, true)?;

        for (tag, a) in [("ln1", ln1), ("ln2", ln2)] {
            put(format!("h.{i}.{tag}.scale"), f64_1(&a.scale).into_dyn());
            put(format!("h.{i}.{tag}.shift"), f64_1(&a.shift).into_dyn());
        }
        for (tag, w, b, s) in [("q", &l.w_q, &l.b_q, s_q), ("k", &l.w_k, &l.b_k, s_k), ("v", &l.w_v, &l.b_v, s_v)] {
            let (wn, bn) = normalize_layer(&f64_2(w), &f64_1(b), lambda, s)?;
            put(format!("h.{i}.attn.w_{tag}"), (wn * theta).into_dyn());
            put(format!("h.{i}.attn.b_{tag}"), (bn * theta).into_dyn());
        }
        put(format!("h.{i}.attn.w_o"), (f64_2(&l.w_o) * s_v).into_dyn());
        put(format!("h.{i}.attn.b_o"), f64_1(&l.b_o).into_dyn());

        let (wn, bn) = normalize_layer(&f64_2(&l.w_in), &f64_1(&l.b_in), lambda_mid, s_hid)?;
        put(format!("h.{i}.mlp.w_in"), (wn * theta).into_dyn());
        put(format!("h.{i}.mlp.b_in"), (bn * theta).into_dyn());
        put(format!("h.{i}.mlp.w_out"), (f64_2(&l.w_out) * s_hid).into_dyn());
        put(format!("h.{i}.mlp.b_out"), f64_1(&l.b_out).into_dyn());
    }
    for name in ["tok_emb", "pos_emb", "ln_f.weight", "ln_f.bias", "lm_head"] {
        tensors.insert(name.to_string(), ann.tensor(name)?.clone());
    }

    let report = ConversionReport {
        scales,
        layer_norms: ln_fold_stats,
        ln_stats: opts.ln_stats,
        encoder_clip,
        percentile: opts.percentile,
        threshold: theta,
        calibration: CalibrationInfo {
            id: calibration_id(calib),
            seed: opts.seed,
            sequences: calib.len(),
            positions: n,
        },
    };
    let mut config = cfg.clone();
    config.snn.encoder_clip = Some(encoder_clip);
    let snn = ModelCheckpoint {
        config,
        kind: CheckpointKind::Spiking,
        vocab: ann.vocab.clone(),
        tensors,
        report: Some(report.clone()),
        report_ref: None,
    };
    snn.validate()?;
    Ok((snn, report))
}

/// `count` windows of `len` tokens starting at seeded offsets.
pub fn calibration_batch(tokens: &[usize], count: usize, len: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    use rand::{Rng, SeedableRng};
    if tokens.len() < len || count == 0 || len == 0 {
        return Err(Error::Corpus(format!("cannot draw {count} windows of {len} tokens from {} tokens", tokens.len())));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let s = rng.random_range(0..=tokens.len() - len);
            tokens[s..s + len].to_vec()
        })
        .collect())
}
