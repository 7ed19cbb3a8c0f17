//! Surrogate-gradient fine-tuning of the spiking attention projections.
//!
//! The loss compares attention-score spike rates with the analog model's
//! softmax probabilities. Gradients are obtained by unrolling the Q/K and
//! score neurons over the time window, replacing the derivative of the hard
//! threshold with a smooth surrogate. Only `W_q` and `W_k` receive non-zero
//! gradient: the value path does not reach the score rates.

use ndarray::{s, Array1, Array2, Array3, ArrayView3, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AnalogScores, AttentionWeights, SpikingScores};
use crate::error::{Error, Result};
use crate::model::{forward_batch, forward_snn_traced, AnnParams, CheckpointKind, LnMode, ModelCheckpoint, SnnModel};
use crate::neuron::{NeuronParams, ResetMode};
use crate::par;

pub const MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateKind {
    #[default]
    FastSigmoid,
    Arctan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub steps: usize,
    /// Windows per update.
    pub batch: usize,
    /// Surrogate slope.
    pub k: f64,
    pub kind: SurrogateKind,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lr: 50.0,
            steps: 150,
            batch: 2,
            k: 25.0,
            kind: SurrogateKind::FastSigmoid,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    /// `lr = 0` is accepted so that a run can be used as a dry pass.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::InvalidParam(format!("finetune lr must be non-negative, got {}", self.lr)));
        }
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::InvalidParam("finetune steps and batch must be at least 1".into()));
        }
        if !(self.k.is_finite() && self.k > 0.0) {
            return Err(Error::InvalidParam(format!("surrogate slope must be positive, got {}", self.k)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub losses: Vec<f64>,
}

impl LossCurve {
    pub fn initial(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    pub fn last(&self) -> Option<f64> {
        self.losses.last().copied()
    }

    pub fn improved(&self) -> bool {
        matches!((self.initial(), self.last()), (Some(a), Some(b)) if b <= a)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            out.push_str(&format!("{i},{l}\n"));
        }
        out
    }
}

pub fn surrogate_derivative(v: f64, v_th: f64, k: f64, kind: SurrogateKind) -> f64 {
    let x = v - v_th;
    match kind {
        SurrogateKind::FastSigmoid => 1.0 / (1.0 + k * x.abs()).powi(2),
        SurrogateKind::Arctan => k / (std::f64::consts::PI * (1.0 + (k * x).powi(2))),
    }
}

/// Smooth step whose derivative is the surrogate, zero at `-inf`.
fn relaxed_step(x: f64, k: f64, kind: SurrogateKind) -> f64 {
    match kind {
        SurrogateKind::FastSigmoid => x / (1.0 + k * x.abs()) + 1.0 / k,
        SurrogateKind::Arctan => (k * x).atan() / std::f64::consts::PI + 0.5,
    }
}

fn alignment(teacher: ArrayView3<'_, f64>, rates: ArrayView3<'_, f64>, causal: bool) -> Result<f64> {
    if teacher.dim() != rates.dim() {
        let (a, b, c) = teacher.dim();
        let (x, y, z) = rates.dim();
        return Err(Error::shape("attention_alignment_loss", &[a, b, c], &[x, y, z]));
    }
    let (_, n, m) = teacher.dim();
    let mut total = 0.0;
    let mut count = 0usize;
    for (pt, pr) in teacher.outer_iter().zip(rates.outer_iter()) {
        for i in 0..n {
            let keys = if causal { (i + 1).min(m) } else { m };
            for j in 0..keys {
                let d = pt[[i, j]] - pr[[i, j]];
                total += d * d;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::InvalidParam("no unmasked attention entries".into()));
    }
    Ok(total / count as f64)
}

/// Mean squared difference between analog probabilities and spike rates
/// over the unmasked `(head, query, key)` entries.
pub fn attention_alignment_loss(asa: &AnalogScores, ssa: &SpikingScores) -> Result<f64> {
    if asa.causal != ssa.causal {
        return Err(Error::InvalidParam("analog and spiking scores disagree on causal masking".into()));
    }
    alignment(asa.probs.view(), ssa.rates.view(), asa.causal)
}

/// One population of neurons seen by the unrolled gradient.
#[derive(Clone, Copy)]
struct Unit {
    np: NeuronParams,
    k: f64,
    kind: SurrogateKind,
    relaxed: bool,
}

impl Unit {
    fn spike(&self, u: f64) -> f64 {
        if self.relaxed {
            let th = self.np.threshold;
            let up = relaxed_step(u - th, self.k, self.kind);
            if self.np.bipolar {
                up - relaxed_step(-u - th, self.k, self.kind)
            } else {
                up
            }
        } else {
            f64::from(self.np.fire(u))
        }
    }

    fn dspike(&self, u: f64) -> f64 {
        let th = self.np.threshold;
        let up = surrogate_derivative(u, th, self.k, self.kind);
        if self.np.bipolar {
            up + surrogate_derivative(-u, th, self.k, self.kind)
        } else {
            up
        }
    }

    /// Membrane after reset and `dv/du`. The hard unit treats the spike as
    /// a constant in the reset.
    fn reset(&self, u: f64, s: f64) -> (f64, f64) {
        let th = self.np.threshold;
        match (self.np.reset, self.relaxed) {
            (ResetMode::Subtract, false) => (u - s * th, 1.0),
            (ResetMode::Subtract, true) => (u - s * th, 1.0 - th * self.dspike(u)),
            (ResetMode::Zero, false) => {
                if s != 0.0 {
                    (0.0, 0.0)
                } else {
                    (u, 1.0)
                }
            }
            (ResetMode::Zero, true) => {
                let (a, da) = if self.np.bipolar {
                    let up = relaxed_step(u - th, self.k, self.kind);
                    let dn = relaxed_step(-u - th, self.k, self.kind);
                    (up + dn, surrogate_derivative(u, th, self.k, self.kind) - surrogate_derivative(-u, th, self.k, self.kind))
                } else {
                    (relaxed_step(u - th, self.k, self.kind), surrogate_derivative(u, th, self.k, self.kind))
                };
                (u * (1.0 - a), 1.0 - a - u * da)
            }
        }
    }
}

/// Forward record of one neuron population over the window.
struct Rollout {
    /// Pre-reset membrane per step.
    u: Vec<Array2<f64>>,
    s: Vec<Array2<f64>>,
    /// `dv/du` per step.
    dv: Vec<Array2<f64>>,
}

fn roll(unit: Unit, currents: impl Iterator<Item = Array2<f64>>) -> Rollout {
    let decay = unit.np.decay();
    let mut r = Rollout { u: Vec::new(), s: Vec::new(), dv: Vec::new() };
    let mut v: Option<Array2<f64>> = None;
    for cur in currents {
        let u = match v.take() {
            Some(prev) => prev * decay + &cur,
            None => cur,
        };
        let s = u.mapv(|x| unit.spike(x));
        let mut next = Array2::zeros(u.dim());
        let mut dv = Array2::zeros(u.dim());
        Zip::from(&mut next).and(&mut dv).and(&u).and(&s).for_each(|nv, d, &x, &sp| {
            let (a, b) = unit.reset(x, sp);
            *nv = a;
            *d = b;
        });
        v = Some(next);
        r.u.push(u);
        r.s.push(s);
        r.dv.push(dv);
    }
    r
}

/// Gradient w.r.t. each step's input current given `dL/ds(t)`.
fn unroll_back(unit: Unit, r: &Rollout, gs: &[Array2<f64>]) -> Vec<Array2<f64>> {
    let decay = unit.np.decay();
    let steps = r.u.len();
    let mut out = vec![Array2::zeros(r.u[0].dim()); steps];
    let mut carry: Option<Array2<f64>> = None;
    for t in (0..steps).rev() {
        let mut gu = Array2::zeros(r.u[t].dim());
        Zip::from(&mut gu).and(&gs[t]).and(&r.u[t]).for_each(|g, &gsv, &u| *g = gsv * unit.dspike(u));
        if let Some(c) = carry.take() {
            Zip::from(&mut gu).and(&c).and(&r.dv[t]).for_each(|g, &cv, &d| *g += cv * d * decay);
        }
        carry = Some(gu.clone());
        out[t] = gu;
    }
    out
}

/// Loss and gradients of one attention block on one window.
#[derive(Debug, Clone)]
pub(crate) struct BlockGrad {
    pub loss: f64,
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
}

/// Unrolled alignment gradient for one block.
///
/// `x` holds the block's input spikes `(T, positions, d_model)` and
/// `teacher` the analog probabilities `(head, query, key)`.
fn block_grad(
    x: ArrayView3<'_, f64>,
    w: &AttentionWeights,
    np: NeuronParams,
    np_as: NeuronParams,
    teacher: ArrayView3<'_, f64>,
    k: f64,
    kind: SurrogateKind,
    relaxed: bool,
) -> Result<BlockGrad> {
    let (steps, n, d) = x.dim();
    let heads = w.n_heads;
    let dh = w.d_head();
    if teacher.dim() != (heads, n, n) {
        let (a, b, c) = teacher.dim();
        return Err(Error::shape("finetune teacher scores", &[heads, n, n], &[a, b, c]));
    }
    let unit = Unit { np, k, kind, relaxed };
    let unit_as = Unit { np: np_as, ..unit };
    let proj = |wm: &Array2<f64>, b: &Array1<f64>| roll(unit, x.outer_iter().map(|xt| xt.dot(wm) + b));
    let rq = proj(&w.w_q, &w.b_q);
    let rk = proj(&w.w_k, &w.b_k);

    let mask = Array2::from_shape_fn((n, n), |(i, j)| if j <= i { 1.0 } else { 0.0 });
    let count = (heads * n * (n + 1) / 2) as f64;
    let mut loss = 0.0;
    let mut gq = vec![Array2::<f64>::zeros((n, d)); steps];
    let mut gk = vec![Array2::<f64>::zeros((n, d)); steps];
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let ra = roll(
            unit_as,
            (0..steps).map(|t| rq.s[t].slice(cols).dot(&rk.s[t].slice(cols).t()) * &mask),
        );
        let rates = ra.s.iter().fold(Array2::<f64>::zeros((n, n)), |acc, s| acc + s) / steps as f64;
        let diff = (&rates - &teacher.index_axis(Axis(0), h)) * &mask;
        loss += diff.iter().map(|v| v * v).sum::<f64>();
        let g_rate = diff * (2.0 / (count * steps as f64));
        let gs = vec![g_rate; steps];
        let gc = unroll_back(unit_as, &ra, &gs);
        for t in 0..steps {
            let gct = &gc[t] * &mask;
            gq[t].slice_mut(cols).assign(&gct.dot(&rk.s[t].slice(cols)));
            gk[t].slice_mut(cols).assign(&gct.t().dot(&rq.s[t].slice(cols)));
        }
    }
    let gi_q = unroll_back(unit, &rq, &gq);
    let gi_k = unroll_back(unit, &rk, &gk);
    let mut w_q = Array2::zeros((d, d));
    let mut w_k = Array2::zeros((d, d));
    for t in 0..steps {
        let xt = x.index_axis(Axis(0), t);
        w_q += &xt.t().dot(&gi_q[t]);
        w_k += &xt.t().dot(&gi_k[t]);
    }
    Ok(BlockGrad {
        loss: loss / count,
        w_q,
        w_k,
        w_v: Array2::zeros((d, d)),
    })
}

/// Alignment loss of the relaxed block (every threshold replaced by the
/// surrogate's primitive, resets kept in the graph).
pub fn relaxed_alignment_loss(
    x: ArrayView3<'_, f64>,
    w: &AttentionWeights,
    np: NeuronParams,
    np_as: NeuronParams,
    teacher: ArrayView3<'_, f64>,
    k: f64,
    kind: SurrogateKind,
) -> Result<f64> {
    Ok(block_grad(x, w, np, np_as, teacher, k, kind, true)?.loss)
}

/// Worst relative error between the unrolled gradient of the relaxed block
/// and central differences, over `samples` entries each of `W_q` and `W_k`.
///
/// Entries whose gradient and difference are both below `1e-12` are skipped.
#[allow(clippy::too_many_arguments)]
pub fn relaxed_grad_check(
    w: &AttentionWeights,
    x: ArrayView3<'_, f64>,
    np: NeuronParams,
    np_as: NeuronParams,
    teacher: ArrayView3<'_, f64>,
    k: f64,
    kind: SurrogateKind,
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::InvalidParam(format!("eps must lie in [1e-6, 1e-3], got {eps}")));
    }
    let g = block_grad(x, w, np, np_as, teacher, k, kind, true)?;
    let d = w.d_model();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for which in 0..2 {
        for _ in 0..samples {
            let (r, c) = (rng.random_range(0..d), rng.random_range(0..d));
            let eval = |delta: f64| -> Result<f64> {
                let mut w2 = w.clone();
                let m = if which == 0 { &mut w2.w_q } else { &mut w2.w_k };
                m[[r, c]] += delta;
                relaxed_alignment_loss(x, &w2, np, np_as, teacher, k, kind)
            };
            let fd = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
            let an = if which == 0 { g.w_q[[r, c]] } else { g.w_k[[r, c]] };
            let scale = fd.abs().max(an.abs());
            if scale < 1e-12 {
                continue;
            }
            worst = worst.max((fd - an).abs() / scale);
        }
    }
    Ok(worst)
}

pub(crate) fn teacher_probs(p: &AnnParams, snn: &SnnModel, tokens: &[usize]) -> Result<Vec<Array3<f64>>> {
    let cfg = &snn.config;
    let (_, cache) = forward_batch(p, cfg, tokens, 1, LnMode::Exact)?;
    let n = tokens.len();
    Ok(cache
        .layers
        .iter()
        .map(|l| {
            let mut out = Array3::zeros((cfg.n_head, n, n));
            for (h, pr) in l.probs.iter().take(cfg.n_head).enumerate() {
                out.index_axis_mut(Axis(0), h).assign(&pr.mapv(f64::from));
            }
            out
        })
        .collect())
}

fn window_grads(p: &AnnParams, m: &SnnModel, tokens: &[usize], fc: &FinetuneConfig) -> Result<Vec<BlockGrad>> {
    let cfg = &m.config;
    let steps = cfg.snn.time_window;
    let teacher = teacher_probs(p, m, tokens)?;
    let (_, trace) = forward_snn_traced(m, tokens, steps)?;
    let np = cfg.snn.neuron;
    let np_as = cfg.score_neuron();
    m.layers
        .iter()
        .zip(&trace.layers)
        .zip(&teacher)
        .map(|((l, tr), t)| {
            let x = tr.input.values().mapv(f64::from);
            block_grad(x.view(), &l.attn, np, np_as, t.view(), fc.k, fc.kind, false)
        })
        .collect()
}

/// Mean alignment loss of the spiking model over `windows`.
pub fn evaluate_alignment(ann: &ModelCheckpoint, snn: &ModelCheckpoint, windows: &[Vec<usize>]) -> Result<f64> {
    let p = AnnParams::from_checkpoint(ann)?;
    let m = SnnModel::from_checkpoint(snn)?;
    let fc = FinetuneConfig::default();
    let per = par::map(windows, |w| window_grads(&p, &m, w, &fc)).into_iter().collect::<Result<Vec<_>>>()?;
    let all: Vec<f64> = per.iter().flatten().map(|g| g.loss).collect();
    Ok(all.iter().sum::<f64>() / all.len().max(1) as f64)
}

/// Fine-tunes `W_q`, `W_k` (and nominally `W_v`) of every spiking attention
/// block. Each step draws `batch` windows from `data`, records the mean
/// alignment loss before the update, and applies momentum SGD.
pub fn finetune_ssa(
    snn: &ModelCheckpoint,
    ann: &ModelCheckpoint,
    data: &[Vec<usize>],
    fc: &FinetuneConfig,
) -> Result<(ModelCheckpoint, LossCurve)> {
    fc.validate()?;
    snn.require_kind(CheckpointKind::Spiking)?;
    ann.require_kind(CheckpointKind::Analog)?;
    if data.is_empty() || data.iter().any(|w| w.is_empty()) {
        return Err(Error::InvalidParam("finetune needs at least one non-empty token window".into()));
    }
    let (a, b) = (&snn.config, &ann.config);
    if (a.n_layer, a.n_head, a.d_model, a.block_size, a.vocab_size, a.ffn_mult) != (b.n_layer, b.n_head, b.d_model, b.block_size, b.vocab_size, b.ffn_mult) {
        return Err(Error::InvalidParam("spiking and analog checkpoints have different model configs".into()));
    }
    let p = AnnParams::from_checkpoint(ann)?;
    let mut m = SnnModel::from_checkpoint(snn)?;
    let mut rng = ChaCha8Rng::seed_from_u64(fc.seed);
    let d = m.config.d_model;
    let mut vel: Vec<[Array2<f64>; 3]> = (0..m.layers.len()).map(|_| [Array2::zeros((d, d)), Array2::zeros((d, d)), Array2::zeros((d, d))]).collect();
    let mut curve = LossCurve::default();
    for step in 0..fc.steps {
        let picks: Vec<&Vec<usize>> = (0..fc.batch).map(|_| &data[rng.random_range(0..data.len())]).collect();
        let per = par::map(&picks, |w| window_grads(&p, &m, w, fc)).into_iter().collect::<Result<Vec<_>>>()?;
        let scale = 1.0 / per.len() as f64;
        let mut loss = 0.0;
        for (li, layer) in m.layers.iter_mut().enumerate() {
            let mut g = [Array2::<f64>::zeros((d, d)), Array2::zeros((d, d)), Array2::zeros((d, d))];
            for w in &per {
                let bg = &w[li];
                loss += bg.loss;
                g[0].scaled_add(scale, &bg.w_q);
                g[1].scaled_add(scale, &bg.w_k);
                g[2].scaled_add(scale, &bg.w_v);
            }
            let targets = [&mut layer.attn.w_q, &mut layer.attn.w_k, &mut layer.attn.w_v];
            for ((wm, v), gm) in targets.into_iter().zip(vel[li].iter_mut()).zip(&g) {
                *v *= MOMENTUM;
                *v += gm;
                wm.scaled_add(-fc.lr, v);
            }
        }
        let loss = loss * scale / m.layers.len() as f64;
        if !loss.is_finite() || m.layers.iter().any(|l| l.attn.w_q.iter().chain(l.attn.w_k.iter()).any(|v| !v.is_finite())) {
            return Err(Error::Diverged { step, loss });
        }
        curve.losses.push(loss);
    }
    let mut out = snn.clone();
    m.store_attention(&mut out)?;
    Ok((out, curve))
}

/// Relaxed gradient check on a seeded single attention block
/// (`d_model = 16`, 2 heads, 6 positions, 8 steps).
pub fn toy_grad_check(np: NeuronParams, k: f64, kind: SurrogateKind, eps: f64, seed: u64) -> Result<f64> {
    let (steps, n, d, heads) = (8, 6, 16, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = || Array2::from_shape_fn((d, d), |_| rng.random_range(-0.5..0.5));
    let w = AttentionWeights::new(g(), g(), g(), g(), heads)?;
    let (x, teacher) = toy_block_inputs(steps, n, d, heads, seed.wrapping_add(1));
    let np_as = crate::attention::score_neuron_params(d / heads, &np);
    relaxed_grad_check(&w, x.view(), np, np_as, teacher.view(), k, kind, eps, 16, seed)
}

/// Input spikes and teacher probabilities for a standalone block check.
pub fn toy_block_inputs(steps: usize, n: usize, d: usize, heads: usize, seed: u64) -> (Array3<f64>, Array3<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array3::from_shape_fn((steps, n, d), |_| f64::from(rng.random_range(-1i8..=1)));
    let mut t = Array3::zeros((heads, n, n));
    for h in 0..heads {
        for i in 0..n {
            let raw: Vec<f64> = (0..=i).map(|_| rng.random::<f64>()).collect();
            let z: f64 = raw.iter().sum();
            for (j, r) in raw.iter().enumerate() {
                t[[h, i, j]] = r / z;
            }
        }
    }
    (x, t)
}
