//! Analog softmax attention and its spiking counterpart.
//!
//! The spiking path never multiplies on its score or value paths: Q, K, V,
//! and attention-score spikes are ternary, so every product reduces to a
//! sign-gated add or subtract. The counters in [`SsaTrace`] record each
//! accumulate so energy estimates can be computed from what actually ran.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayViewMut1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuron::{NeuronLayerState, NeuronParams, SpikeTrain};

/// Projection weights of one multi-head attention block.
///
/// `w_q`, `w_k`, `w_v` are `d_model x d_model`; head `h` owns columns
/// `h*d_head .. (h+1)*d_head`. Weights are stored input-major, so a
/// projection is `x · W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
    pub b_q: Array1<f64>,
    pub b_k: Array1<f64>,
    pub b_v: Array1<f64>,
    pub b_o: Array1<f64>,
    pub n_heads: usize,
}

impl AttentionWeights {
    /// Bias-free weights.
    pub fn new(w_q: Array2<f64>, w_k: Array2<f64>, w_v: Array2<f64>, w_o: Array2<f64>, n_heads: usize) -> Result<Self> {
        let d = w_q.nrows();
        let w = Self {
            w_q,
            w_k,
            w_v,
            w_o,
            b_q: Array1::zeros(d),
            b_k: Array1::zeros(d),
            b_v: Array1::zeros(d),
            b_o: Array1::zeros(d),
            n_heads,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn d_model(&self) -> usize {
        self.w_q.nrows()
    }

    pub fn d_head(&self) -> usize {
        self.d_model() / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_model();
        if self.n_heads == 0 || d == 0 || !d.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidParam(format!(
                "d_model {d} must be a positive multiple of n_heads {}",
                self.n_heads
            )));
        }
        for (name, m) in [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v), ("w_o", &self.w_o)] {
            if m.dim() != (d, d) {
                return Err(Error::shape(
                    match name {
                        "w_q" => "attention w_q",
                        "w_k" => "attention w_k",
                        "w_v" => "attention w_v",
                        _ => "attention w_o",
                    },
                    &[d, d],
                    &[m.nrows(), m.ncols()],
                ));
            }
            if m.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("attention weights"));
            }
        }
        for b in [&self.b_q, &self.b_k, &self.b_v, &self.b_o] {
            if b.len() != d {
                return Err(Error::shape("attention bias", &[d], &[b.len()]));
            }
        }
        Ok(())
    }
}

/// Softmax attention probabilities indexed by `(head, query, key)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalogScores {
    pub probs: Array3<f64>,
    pub causal: bool,
}

/// Attention-score spikes per head plus their rate readout.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikingScores {
    /// One `(T, query, key)` train per head; unipolar.
    pub trains: Vec<SpikeTrain>,
    /// `(head, query, key)` spike rates in `[0, 1]`.
    pub rates: Array3<f64>,
    pub causal: bool,
}

/// Multiply-accumulate tally of an analog attention pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AsaCounter {
    pub mac: u64,
    pub exp: u64,
}

/// Spike and operation statistics of one spiking population.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpikeStat {
    /// Neuron-steps observed (neurons x T).
    pub opportunities: u64,
    /// Nonzero spikes emitted.
    pub spikes: u64,
}

impl SpikeStat {
    pub fn rate(&self) -> f64 {
        if self.opportunities == 0 {
            0.0
        } else {
            self.spikes as f64 / self.opportunities as f64
        }
    }

    fn observe(&mut self, spikes: ArrayView2<'_, i8>) {
        self.opportunities += spikes.len() as u64;
        self.spikes += spikes.iter().filter(|&&s| s != 0).count() as u64;
    }

    fn merge(&mut self, o: &SpikeStat) {
        self.opportunities += o.opportunities;
        self.spikes += o.spikes;
    }
}

/// Instrumented record of a spiking attention pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SsaTrace {
    pub steps: u64,
    pub positions: u64,
    pub d_model: u64,
    pub n_heads: u64,
    /// Unmasked (query, key) pairs per head.
    pub score_pairs: u64,
    pub input: SpikeStat,
    pub q: SpikeStat,
    pub k: SpikeStat,
    pub v: SpikeStat,
    pub scores: SpikeStat,
    /// Spike-triggered weight-row additions in the Q/K/V projections.
    pub projection_ac: u64,
    /// Per-step bias additions in the Q/K/V projections.
    pub projection_bias_ac: u64,
    /// Q-K coincidence accumulates.
    pub score_ac: u64,
    /// Attention-spike-gated value accumulates.
    pub value_ac: u64,
    /// Row additions applying the output projection to aggregated counts.
    pub output_ac: u64,
    pub output_bias_ac: u64,
    /// Multiplications on the score and value paths. Always zero.
    pub mul: u64,
}

impl SsaTrace {
    pub fn total_ac(&self) -> u64 {
        self.projection_ac + self.projection_bias_ac + self.score_ac + self.value_ac + self.output_ac + self.output_bias_ac
    }

    /// Associative merge of traces from independent runs.
    pub fn merge(&mut self, o: &SsaTrace) {
        if self.steps == 0 {
            self.steps = o.steps;
            self.d_model = o.d_model;
            self.n_heads = o.n_heads;
        }
        self.positions += o.positions;
        self.score_pairs += o.score_pairs;
        for (a, b) in [
            (&mut self.input, &o.input),
            (&mut self.q, &o.q),
            (&mut self.k, &o.k),
            (&mut self.v, &o.v),
            (&mut self.scores, &o.scores),
        ] {
            a.merge(b);
        }
        self.projection_ac += o.projection_ac;
        self.projection_bias_ac += o.projection_bias_ac;
        self.score_ac += o.score_ac;
        self.value_ac += o.value_ac;
        self.output_ac += o.output_ac;
        self.output_bias_ac += o.output_bias_ac;
        self.mul += o.mul;
    }
}

fn check_finite(x: ArrayView2<'_, f64>, what: &'static str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

fn counted_matmul(x: ArrayView2<'_, f64>, w: ArrayView2<'_, f64>, b: ArrayView1<'_, f64>, c: &mut AsaCounter) -> Array2<f64> {
    let (n, d_in) = x.dim();
    let d_out = w.ncols();
    let mut out = Array2::zeros((n, d_out));
    for i in 0..n {
        for o in 0..d_out {
            let mut acc = b[o];
            for j in 0..d_in {
                acc += x[[i, j]] * w[[j, o]];
            }
            out[[i, o]] = acc;
        }
    }
    c.mac += (n * d_in * d_out) as u64;
    out
}

/// Analog multi-head attention.
///
/// Per head, `probs = softmax(Q Kᵀ / sqrt(d_head) + mask)`; the output is
/// `concat_h(probs_h V_h) · W_o + b_o`. Masked probabilities are exactly 0.
pub fn asa_forward(x: ArrayView2<'_, f64>, w: &AttentionWeights, causal: bool) -> Result<(AnalogScores, Array2<f64>)> {
    asa_forward_counted(x, w, causal, &mut AsaCounter::default())
}

pub fn asa_forward_counted(
    x: ArrayView2<'_, f64>,
    w: &AttentionWeights,
    causal: bool,
    counter: &mut AsaCounter,
) -> Result<(AnalogScores, Array2<f64>)> {
    w.validate()?;
    let (n, d) = x.dim();
    if n == 0 {
        return Err(Error::InvalidParam("attention needs at least one position".into()));
    }
    if d != w.d_model() {
        return Err(Error::shape("asa_forward input", &[n, w.d_model()], &[n, d]));
    }
    check_finite(x, "asa_forward input")?;
    let q = counted_matmul(x, w.w_q.view(), w.b_q.view(), counter);
    let k = counted_matmul(x, w.w_k.view(), w.b_k.view(), counter);
    let v = counted_matmul(x, w.w_v.view(), w.b_v.view(), counter);
    let dh = w.d_head();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = Array3::zeros((w.n_heads, n, n));
    let mut y = Array2::zeros((n, d));
    for h in 0..w.n_heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..n {
            let mut logits = vec![f64::NEG_INFINITY; n];
            for (j, l) in logits.iter_mut().enumerate() {
                let mut acc = 0.0;
                for c in cols.clone() {
                    acc += q[[i, c]] * k[[j, c]];
                }
                if !(causal && j > i) {
                    *l = acc * scale;
                }
            }
            counter.mac += (n * dh) as u64;
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for l in logits.iter_mut() {
                *l = (*l - m).exp();
                z += *l;
            }
            counter.exp += n as u64;
            for j in 0..n {
                probs[[h, i, j]] = logits[j] / z;
            }
            for c in cols.clone() {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += probs[[h, i, j]] * v[[j, c]];
                }
                y[[i, c]] = acc;
            }
            counter.mac += (n * dh) as u64;
        }
    }
    let out = counted_matmul(y.view(), w.w_o.view(), w.b_o.view(), counter);
    Ok((AnalogScores { probs, causal }, out))
}

/// `out += ±row` for every nonzero spike; one accumulate per weight touched.
fn accumulate_spiking_rows(spikes: ArrayView1<'_, i8>, w: ArrayView2<'_, f64>, mut out: ArrayViewMut1<'_, f64>) -> u64 {
    let mut ops = 0;
    let out = out.as_slice_mut().expect("contiguous accumulator");
    for (j, &s) in spikes.iter().enumerate() {
        if s == 0 {
            continue;
        }
        let row = w.row(j);
        let row = row.as_slice().expect("standard-layout weights");
        if s > 0 {
            out.iter_mut().zip(row).for_each(|(o, r)| *o += r);
        } else {
            out.iter_mut().zip(row).for_each(|(o, r)| *o -= r);
        }
        ops += row.len() as u64;
    }
    ops
}

/// Q, K, V spike trains from a ternary input train.
///
/// Each step's projection current is `W_{q|k|v}ᵀ s_in(t) + b` computed by
/// sign-gated row additions, and drives its own spiking layer.
pub fn ssa_qkv(s_in: &SpikeTrain, w: &AttentionWeights, np: &NeuronParams) -> Result<(SpikeTrain, SpikeTrain, SpikeTrain)> {
    ssa_qkv_traced(s_in, w, np, &mut SsaTrace::default())
}

pub fn ssa_qkv_traced(
    s_in: &SpikeTrain,
    w: &AttentionWeights,
    np: &NeuronParams,
    trace: &mut SsaTrace,
) -> Result<(SpikeTrain, SpikeTrain, SpikeTrain)> {
    w.validate()?;
    let [steps, n, d_in] = s_in.dims();
    let d = w.d_model();
    if d_in != d {
        return Err(Error::shape("ssa_qkv input", &[steps, n, d], &[steps, n, d_in]));
    }
    let mut states = [
        NeuronLayerState::new(*np, n, d)?,
        NeuronLayerState::new(*np, n, d)?,
        NeuronLayerState::new(*np, n, d)?,
    ];
    let mut trains = [SpikeTrain::zeros(steps, n, d), SpikeTrain::zeros(steps, n, d), SpikeTrain::zeros(steps, n, d)];
    let weights = [(&w.w_q, &w.b_q), (&w.w_k, &w.b_k), (&w.w_v, &w.b_v)];
    let mut current = Array2::<f64>::zeros((n, d));
    for t in 0..steps {
        let x = s_in.step(t);
        trace.input.observe(x);
        for (i, (wm, b)) in weights.iter().enumerate() {
            for p in 0..n {
                let mut row = current.row_mut(p);
                row.assign(b);
                trace.projection_ac += accumulate_spiking_rows(x.row(p), wm.view(), row);
            }
            trace.projection_bias_ac += (n * d) as u64;
            states[i].step_into(current.view(), trains[i].step_mut(t))?;
        }
        trace.q.observe(trains[0].step(t));
        trace.k.observe(trains[1].step(t));
        trace.v.observe(trains[2].step(t));
    }
    trace.steps = steps as u64;
    trace.positions = n as u64;
    trace.d_model = d as u64;
    trace.n_heads = w.n_heads as u64;
    let [q, k, v] = trains;
    Ok((q, k, v))
}

/// Attention-score spikes from Q and K trains.
///
/// At every step the current at `(query, key)` of head `h` is the signed
/// coincidence count `Σ_c Q(t,query,c)·K(t,key,c)` over the head's channels.
/// Masked entries (`key > query`) receive no current.
pub fn ssa_scores(q: &SpikeTrain, k: &SpikeTrain, n_heads: usize, np_as: &NeuronParams, causal: bool) -> Result<SpikingScores> {
    ssa_scores_traced(q, k, n_heads, np_as, causal, &mut SsaTrace::default())
}

pub fn ssa_scores_traced(
    q: &SpikeTrain,
    k: &SpikeTrain,
    n_heads: usize,
    np_as: &NeuronParams,
    causal: bool,
    trace: &mut SsaTrace,
) -> Result<SpikingScores> {
    if q.dims() != k.dims() {
        return Err(Error::shape("ssa_scores key train", &q.dims(), &k.dims()));
    }
    let [steps, n, d] = q.dims();
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::InvalidParam(format!("{d} channels do not split into {n_heads} heads")));
    }
    let dh = d / n_heads;
    let mut trains = Vec::with_capacity(n_heads);
    let mut current = Array2::<f64>::zeros((n, n));
    let mut pairs = 0;
    for h in 0..n_heads {
        let mut state = NeuronLayerState::new(*np_as, n, n)?;
        let mut train = SpikeTrain::zeros(steps, n, n);
        for t in 0..steps {
            let qs = q.step(t);
            let ks = k.step(t);
            let qh = qs.slice(s![.., h * dh..(h + 1) * dh]);
            let kh = ks.slice(s![.., h * dh..(h + 1) * dh]);
            for i in 0..n {
                let qi = qh.row(i);
                for j in 0..n {
                    let mut acc = 0.0;
                    if !(causal && j > i) {
                        for (a, b) in qi.iter().zip(kh.row(j).iter()) {
                            if *a != 0 && *b != 0 {
                                if a == b {
                                    acc += 1.0;
                                } else {
                                    acc -= 1.0;
                                }
                                trace.score_ac += 1;
                            }
                        }
                    }
                    current[[i, j]] = acc;
                }
            }
            state.step_into(current.view(), train.step_mut(t))?;
            let spikes = train.step(t);
            for i in 0..n {
                let keys = if causal { i + 1 } else { n };
                trace.scores.opportunities += keys as u64;
                trace.scores.spikes += spikes.row(i).iter().take(keys).filter(|&&s| s != 0).count() as u64;
            }
        }
        trains.push(train);
    }
    for i in 0..n {
        pairs += if causal { i + 1 } else { n };
    }
    trace.score_pairs = pairs as u64;
    let mut rates = Array3::zeros((n_heads, n, n));
    for (h, tr) in trains.iter().enumerate() {
        rates.index_axis_mut(Axis(0), h).assign(&tr.rates());
    }
    Ok(SpikingScores { trains, rates, causal })
}

/// Integer value aggregation `c(t, query, :) = Σ_key AS(t,query,key) · V(t,key,:)`
/// per head, before the output projection.
pub fn ssa_aggregate(scores: &SpikingScores, v: &SpikeTrain) -> Result<Array3<i32>> {
    ssa_aggregate_traced(scores, v, &mut SsaTrace::default())
}

fn ssa_aggregate_traced(scores: &SpikingScores, v: &SpikeTrain, trace: &mut SsaTrace) -> Result<Array3<i32>> {
    let n_heads = scores.trains.len();
    let [steps, n, d] = v.dims();
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::InvalidParam(format!("{d} value channels do not split into {n_heads} heads")));
    }
    for tr in &scores.trains {
        if tr.dims() != [steps, n, n] {
            return Err(Error::shape("ssa_output scores", &[steps, n, n], &tr.dims()));
        }
    }
    let dh = d / n_heads;
    let mut agg = Array3::<i32>::zeros((steps, n, d));
    for (h, tr) in scores.trains.iter().enumerate() {
        for t in 0..steps {
            let a = tr.step(t);
            let vs = v.step(t);
            let mut out = agg.index_axis_mut(Axis(0), t);
            for i in 0..n {
                for j in 0..n {
                    if a[[i, j]] == 0 {
                        continue;
                    }
                    let gate_positive = a[[i, j]] > 0;
                    for c in h * dh..(h + 1) * dh {
                        let val = vs[[j, c]];
                        if val == 0 {
                            continue;
                        }
                        if (val > 0) == gate_positive {
                            out[[i, c]] += 1;
                        } else {
                            out[[i, c]] -= 1;
                        }
                        trace.value_ac += 1;
                    }
                }
            }
        }
    }
    Ok(agg)
}

/// Per-step output currents `(T, positions, d_model)` of the spiking block:
/// the integer aggregation of [`ssa_aggregate`] pushed through the analog
/// output projection by repeated row addition, plus `b_o` every step.
pub fn ssa_output(scores: &SpikingScores, v: &SpikeTrain, w_o: ArrayView2<'_, f64>, b_o: ArrayView1<'_, f64>) -> Result<Array3<f64>> {
    ssa_output_traced(scores, v, w_o, b_o, &mut SsaTrace::default())
}

pub fn ssa_output_traced(
    scores: &SpikingScores,
    v: &SpikeTrain,
    w_o: ArrayView2<'_, f64>,
    b_o: ArrayView1<'_, f64>,
    trace: &mut SsaTrace,
) -> Result<Array3<f64>> {
    let [steps, n, d] = v.dims();
    if w_o.nrows() != d || b_o.len() != w_o.ncols() {
        return Err(Error::shape("ssa_output projection", &[d, b_o.len()], &[w_o.nrows(), w_o.ncols()]));
    }
    let agg = ssa_aggregate_traced(scores, v, trace)?;
    let d_out = w_o.ncols();
    let mut out = Array3::zeros((steps, n, d_out));
    for t in 0..steps {
        for i in 0..n {
            let mut row = out.slice_mut(s![t, i, ..]);
            row.assign(&b_o);
            let row = row.as_slice_mut().expect("contiguous output row");
            for c in 0..d {
                let count = agg[[t, i, c]];
                if count == 0 {
                    continue;
                }
                let w_row = w_o.row(c);
                let w_row = w_row.as_slice().expect("standard-layout projection");
                for _ in 0..count.unsigned_abs() {
                    if count > 0 {
                        row.iter_mut().zip(w_row).for_each(|(o, w)| *o += w);
                    } else {
                        row.iter_mut().zip(w_row).for_each(|(o, w)| *o -= w);
                    }
                }
                trace.output_ac += u64::from(count.unsigned_abs()) * d_out as u64;
            }
        }
    }
    trace.output_bias_ac += (steps * n * d_out) as u64;
    Ok(out)
}

/// Full spiking attention block: Q/K/V generation, score spikes, and output
/// currents, with every accumulate recorded in the returned trace.
pub fn ssa_forward(
    s_in: &SpikeTrain,
    w: &AttentionWeights,
    np: &NeuronParams,
    np_as: &NeuronParams,
    causal: bool,
) -> Result<(SpikingScores, Array3<f64>, SsaTrace)> {
    let mut trace = SsaTrace::default();
    let (q, k, v) = ssa_qkv_traced(s_in, w, np, &mut trace)?;
    let scores = ssa_scores_traced(&q, &k, w.n_heads, np_as, causal, &mut trace)?;
    let out = ssa_output_traced(&scores, &v, w.w_o.view(), w.b_o.view(), &mut trace)?;
    Ok((scores, out, trace))
}

/// Default score-neuron parameters for a head of width `d_head`: unipolar
/// IF with threshold `sqrt(d_head) * v_th`, the spiking stand-in for the
/// `1/sqrt(d_head)` logit scale.
pub fn score_neuron_params(d_head: usize, base: &NeuronParams) -> NeuronParams {
    NeuronParams {
        threshold: (d_head as f64).sqrt() * base.threshold,
        bipolar: false,
        ..*base
    }
}
