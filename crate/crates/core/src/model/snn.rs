//! Spiking forward pass of a converted checkpoint.
//!
//! The residual stream is a per-step current `R(t)`. Each block re-encodes
//! it into bipolar spikes, runs spiking attention on them, adds the output
//! currents back, re-encodes again for the IF feed-forward layer, and adds
//! that layer's output currents. The head averages `R(t)` over the window
//! and applies the analog final LayerNorm and unembedding.

use ndarray::{Array1, Array2, Array3, Axis};

use super::ann::head_logits;
use super::checkpoint::{CheckpointKind, ModelCheckpoint};
use super::{check_tokens, TransformerConfig};
use crate::attention::{ssa_qkv_traced, ssa_scores_traced, ssa_output_traced, AttentionWeights, SpikeStat, SsaTrace};
use crate::coding::{rate_encode, EncodingConfig};
use crate::conversion::scale_name;
use crate::error::{Error, Result};
use crate::neuron::{NeuronLayerState, NeuronParams, SpikeTrain};
use crate::par;

#[derive(Debug, Clone, PartialEq)]
pub struct SnnLayer {
    /// Normalized attention weights driving the Q/K/V spike generators.
    pub attn: AttentionWeights,
    /// Folded LayerNorm in front of the attention block, `(scale, shift)`.
    pub ln1: (Array1<f64>, Array1<f64>),
    /// Largest magnitude of the folded LayerNorm output feeding attention.
    pub attn_clip: f64,
    pub ln2: (Array1<f64>, Array1<f64>),
    /// Largest magnitude of the folded LayerNorm output feeding the MLP.
    pub mlp_clip: f64,
    pub w_in: Array2<f64>,
    pub b_in: Array1<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnnModel {
    pub config: TransformerConfig,
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub encoder_clip: f64,
    pub layers: Vec<SnnLayer>,
    pub lnf_g: Array1<f32>,
    pub lnf_b: Array1<f32>,
    pub head: Array2<f32>,
}

/// Per-block record of a traced spiking forward.
#[derive(Debug, Clone)]
pub struct SnnLayerTrace {
    /// Spikes entering the attention block, `(T, positions, d_model)`.
    pub input: SpikeTrain,
    /// Attention-score rates `(head, query, key)`.
    pub score_rates: Array3<f64>,
    pub ssa: SsaTrace,
    /// Feed-forward hidden rates `(positions, d_ff)`.
    pub hidden_rates: Array2<f64>,
    pub hidden: SpikeStat,
}

#[derive(Debug, Clone)]
pub struct SnnTrace {
    pub layers: Vec<SnnLayerTrace>,
}

impl SnnTrace {
    /// All attention-block counters merged.
    pub fn ssa_total(&self) -> SsaTrace {
        let mut t = SsaTrace::default();
        for l in &self.layers {
            t.merge(&l.ssa);
        }
        t
    }
}

fn tensor2(ck: &ModelCheckpoint, name: &str) -> Result<Array2<f32>> {
    let t = ck.tensor(name)?;
    if t.shape.len() != 2 {
        return Err(Error::Format(format!("tensor `{name}` should be 2-d, has shape {:?}", t.shape)));
    }
    Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data.clone()).map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))
}

fn tensor1(ck: &ModelCheckpoint, name: &str) -> Result<Array1<f32>> {
    let t = ck.tensor(name)?;
    if t.shape.len() != 1 {
        return Err(Error::Format(format!("tensor `{name}` should be 1-d, has shape {:?}", t.shape)));
    }
    Ok(Array1::from(t.data.clone()))
}

fn wide(a: Array2<f32>) -> Array2<f64> {
    a.mapv(f64::from)
}

impl SnnModel {
    pub fn from_checkpoint(ck: &ModelCheckpoint) -> Result<Self> {
        ck.require_kind(CheckpointKind::Spiking)?;
        ck.validate()?;
        let cfg = ck.config.clone();
        let report = ck.report.as_ref().expect("validated spiking checkpoint has a report");
        let d = cfg.d_model;
        let f = cfg.d_ff();
        let mut layers = Vec::with_capacity(cfg.n_layer);
        for i in 0..cfg.n_layer {
            let g2 = |n: &str| tensor2(ck, &format!("h.{i}.{n}")).map(wide);
            let g1 = |n: &str| tensor1(ck, &format!("h.{i}.{n}")).map(|a| a.mapv(f64::from));
            let mut attn = AttentionWeights::new(g2("attn.w_q")?, g2("attn.w_k")?, g2("attn.w_v")?, g2("attn.w_o")?, cfg.n_head)?;
            attn.b_q = g1("attn.b_q")?;
            attn.b_k = g1("attn.b_k")?;
            attn.b_v = g1("attn.b_v")?;
            attn.b_o = g1("attn.b_o")?;
            attn.validate()?;
            let layer = SnnLayer {
                attn,
                ln1: (g1("ln1.scale")?, g1("ln1.shift")?),
                attn_clip: report.scale(&scale_name(i, "attn_in"))?,
                ln2: (g1("ln2.scale")?, g1("ln2.shift")?),
                mlp_clip: report.scale(&scale_name(i, "mlp_in"))?,
                w_in: g2("mlp.w_in")?,
                b_in: g1("mlp.b_in")?,
                w_out: g2("mlp.w_out")?,
                b_out: g1("mlp.b_out")?,
            };
            if [&layer.ln1.0, &layer.ln1.1, &layer.ln2.0, &layer.ln2.1].iter().any(|a| a.len() != d) {
                return Err(Error::Format(format!("folded LayerNorm tensors of block {i} disagree with the config")));
            }
            if layer.w_in.dim() != (d, f) || layer.w_out.dim() != (f, d) || layer.b_in.len() != f || layer.b_out.len() != d {
                return Err(Error::Format(format!("feed-forward tensors of block {i} disagree with the config")));
            }
            layers.push(layer);
        }
        Ok(Self {
            tok_emb: wide(tensor2(ck, "tok_emb")?),
            pos_emb: wide(tensor2(ck, "pos_emb")?),
            encoder_clip: report.encoder_clip,
            layers,
            lnf_g: tensor1(ck, "ln_f.weight")?,
            lnf_b: tensor1(ck, "ln_f.bias")?,
            head: tensor2(ck, "lm_head")?,
            config: cfg,
        })
    }

    /// Writes the attention projection weights back into a checkpoint.
    pub(crate) fn store_attention(&self, ck: &mut ModelCheckpoint) -> Result<()> {
        for (i, l) in self.layers.iter().enumerate() {
            for (tag, w) in [("w_q", &l.attn.w_q), ("w_k", &l.attn.w_k), ("w_v", &l.attn.w_v)] {
                let name = format!("h.{i}.attn.{tag}");
                let t = ck
                    .tensors
                    .get_mut(&name)
                    .ok_or_else(|| Error::Format(format!("checkpoint has no tensor `{name}`")))?;
                t.data = w.iter().map(|&v| v as f32).collect();
            }
        }
        Ok(())
    }
}

/// Drives a fresh layer with `gain * (currents(t) * scale + shift)` at every step.
fn encode(currents: &Array3<f64>, affine: &(Array1<f64>, Array1<f64>), gain: f64, np: NeuronParams) -> Result<SpikeTrain> {
    let (steps, n, d) = currents.dim();
    let mut state = NeuronLayerState::new(np, n, d)?;
    let mut train = SpikeTrain::zeros(steps, n, d);
    let scale = &affine.0 * gain;
    let shift = &affine.1 * gain;
    for t in 0..steps {
        let c = &currents.index_axis(Axis(0), t) * &scale + &shift;
        state.step_into(c.view(), train.step_mut(t))?;
    }
    Ok(train)
}

fn spikes_f64(s: &SpikeTrain, t: usize) -> Array2<f64> {
    s.step(t).mapv(f64::from)
}

fn run(m: &SnnModel, tokens: &[usize], steps: usize, keep: bool) -> Result<(Array2<f32>, Vec<SnnLayerTrace>)> {
    let cfg = &m.config;
    check_tokens(cfg, tokens)?;
    if steps == 0 {
        return Err(Error::InvalidParam("time window must be at least one step".into()));
    }
    let n = tokens.len();
    let d = cfg.d_model;
    let np = cfg.snn.neuron;
    let np_as = cfg.score_neuron();
    let np_hidden = NeuronParams { bipolar: false, ..np };
    let theta = np.threshold;

    let mut x0 = Array2::zeros((n, d));
    for (t, &tok) in tokens.iter().enumerate() {
        let mut row = x0.row_mut(t);
        row += &m.tok_emb.row(tok);
        row += &m.pos_emb.row(t);
    }
    let x0_spikes = rate_encode(x0.view(), &EncodingConfig::new(steps, m.encoder_clip))?;
    let mut resid: Array3<f64> = x0_spikes.values().mapv(|s| f64::from(s) * m.encoder_clip);

    let mut traces = Vec::new();
    for l in &m.layers {
        let s_in = encode(&resid, &l.ln1, theta / l.attn_clip, np)?;
        let mut ssa = SsaTrace::default();
        let (q, k, v) = ssa_qkv_traced(&s_in, &l.attn, &np, &mut ssa)?;
        let scores = ssa_scores_traced(&q, &k, l.attn.n_heads, &np_as, true, &mut ssa)?;
        let a = ssa_output_traced(&scores, &v, l.attn.w_o.view(), l.attn.b_o.view(), &mut ssa)?;
        let h = resid + &a;
        let x2 = encode(&h, &l.ln2, theta / l.mlp_clip, np)?;

        let f = l.w_in.ncols();
        let mut state = NeuronLayerState::new(np_hidden, n, f)?;
        let mut hs = SpikeTrain::zeros(steps, n, f);
        let mut next = h;
        for t in 0..steps {
            let cur = spikes_f64(&x2, t).dot(&l.w_in) + &l.b_in;
            state.step_into(cur.view(), hs.step_mut(t))?;
            let m_out = spikes_f64(&hs, t).dot(&l.w_out) + &l.b_out;
            let mut r = next.index_axis_mut(Axis(0), t);
            r += &m_out;
        }
        resid = next;
        if keep {
            let hidden = SpikeStat {
                opportunities: (steps * n * f) as u64,
                spikes: hs.spike_count(),
            };
            traces.push(SnnLayerTrace {
                input: s_in,
                score_rates: scores.rates,
                ssa,
                hidden_rates: hs.rates(),
                hidden,
            });
        }
    }
    let mean = resid.mean_axis(Axis(0)).expect("non-empty window").mapv(|v| v as f32);
    Ok((head_logits(&mean, &m.lnf_g, &m.lnf_b, &m.head), traces))
}

/// Logits `(positions, vocab)` of the spiking model over a `steps`-step window.
pub fn forward_snn(m: &SnnModel, tokens: &[usize], steps: usize) -> Result<Array2<f32>> {
    Ok(run(m, tokens, steps, false)?.0)
}

/// Like [`forward_snn`], also returning per-block spikes and counters.
pub fn forward_snn_traced(m: &SnnModel, tokens: &[usize], steps: usize) -> Result<(Array2<f32>, SnnTrace)> {
    let (logits, layers) = run(m, tokens, steps, true)?;
    Ok((logits, SnnTrace { layers }))
}

/// [`forward_snn`] over many sequences, fanned out across the worker pool.
pub fn forward_snn_batch(m: &SnnModel, seqs: &[Vec<usize>], steps: usize) -> Result<Vec<Array2<f32>>> {
    par::map(seqs, |s| forward_snn(m, s, steps)).into_iter().collect()
}
