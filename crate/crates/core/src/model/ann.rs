//! Analog decoder forward and backward passes.
//!
//! Pre-LayerNorm GPT block: `h = x + Attn(LN1(x))`, `x' = h + MLP(LN2(h))`,
//! with causal softmax attention and a ReLU (or GeLU) MLP. Activations are
//! kept in an [`AnnCache`] so training can backpropagate and conversion can
//! read per-layer statistics.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use super::params::{AnnParams, LayerParams};
use super::{check_tokens, Nonlinearity, TransformerConfig, LN_EPS};
use crate::error::{Error, Result};

/// Per-channel affine `x * scale + shift` standing in for a LayerNorm.
#[derive(Debug, Clone, PartialEq)]
pub struct LnAffine {
    pub scale: Array1<f32>,
    pub shift: Array1<f32>,
}

/// How block LayerNorms are evaluated.
#[derive(Debug, Clone, Copy)]
pub enum LnMode<'a> {
    /// True per-token LayerNorm.
    Exact,
    /// Fixed affines per block, `(ln1, ln2)`; the final LayerNorm stays exact.
    Folded(&'a [(LnAffine, LnAffine)]),
}

#[derive(Debug, Clone)]
pub struct LnCache {
    pub xhat: Array2<f32>,
    pub mean: Array1<f32>,
    pub rstd: Array1<f32>,
}

/// Activations of one block over a batch, rows ordered `(sequence, position)`.
#[derive(Debug, Clone)]
pub struct LayerActivations {
    /// Residual stream entering the block.
    pub x_in: Array2<f32>,
    pub ln1: LnCache,
    pub u1: Array2<f32>,
    pub q: Array2<f32>,
    pub k: Array2<f32>,
    pub v: Array2<f32>,
    /// Attention probabilities, indexed `sequence * n_head + head`.
    pub probs: Vec<Array2<f32>>,
    /// Concatenated head outputs before `w_o`.
    pub y: Array2<f32>,
    /// Residual stream after the attention sub-block.
    pub h: Array2<f32>,
    pub ln2: LnCache,
    pub u2: Array2<f32>,
    /// MLP pre-activation.
    pub z: Array2<f32>,
    pub act: Array2<f32>,
}

#[derive(Debug, Clone)]
pub struct AnnCache {
    pub batch: usize,
    pub seq_len: usize,
    pub tokens: Vec<usize>,
    pub layers: Vec<LayerActivations>,
    pub x_final: Array2<f32>,
    pub lnf: LnCache,
    pub uf: Array2<f32>,
}

pub(crate) fn layer_norm(x: &Array2<f32>, g: &Array1<f32>, b: &Array1<f32>) -> (Array2<f32>, LnCache) {
    let (rows, d) = x.dim();
    let mut xhat = Array2::zeros((rows, d));
    let mut mean = Array1::zeros(rows);
    let mut rstd = Array1::zeros(rows);
    for r in 0..rows {
        let row = x.row(r);
        let m = row.sum() / d as f32;
        let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f32>() / d as f32;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        mean[r] = m;
        rstd[r] = rs;
        Zip::from(xhat.row_mut(r)).and(row).for_each(|o, &v| *o = (v - m) * rs);
    }
    let out = &xhat * g + b;
    (out, LnCache { xhat, mean, rstd })
}

fn layer_norm_backward(dy: &Array2<f32>, cache: &LnCache, g: &Array1<f32>, dg: &mut Array1<f32>, db: &mut Array1<f32>) -> Array2<f32> {
    *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0));
    let dxhat = dy * g;
    let d = dy.ncols() as f32;
    let mut dx = Array2::zeros(dy.dim());
    for r in 0..dy.nrows() {
        let dxh = dxhat.row(r);
        let xh = cache.xhat.row(r);
        let m1 = dxh.sum() / d;
        let m2 = dxh.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f32>() / d;
        let rs = cache.rstd[r];
        Zip::from(dx.row_mut(r))
            .and(dxh)
            .and(xh)
            .for_each(|o, &a, &b| *o = rs * (a - m1 - b * m2));
    }
    dx
}

fn affine(x: &Array2<f32>, a: &LnAffine) -> (Array2<f32>, LnCache) {
    let out = x * &a.scale + &a.shift;
    let rows = x.nrows();
    (
        out,
        LnCache {
            xhat: Array2::zeros((0, 0)),
            mean: Array1::zeros(rows),
            rstd: Array1::zeros(rows),
        },
    )
}

fn linear(x: &Array2<f32>, w: &Array2<f32>, b: &Array1<f32>) -> Array2<f32> {
    x.dot(w) + b
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

fn activate(z: &Array2<f32>, nl: Nonlinearity) -> Array2<f32> {
    match nl {
        Nonlinearity::Relu => z.mapv(|v| v.max(0.0)),
        Nonlinearity::Gelu => z.mapv(|v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh())),
    }
}

fn activate_grad(z: f32, nl: Nonlinearity) -> f32 {
    match nl {
        Nonlinearity::Relu => {
            if z > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Nonlinearity::Gelu => {
            let u = GELU_C * (z + 0.044715 * z * z * z);
            let t = u.tanh();
            0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * z * z)
        }
    }
}

/// Causal softmax attention of one head of one sequence.
fn head_probs(q: ArrayView2<'_, f32>, k: ArrayView2<'_, f32>, scale: f32) -> Array2<f32> {
    let mut s = q.dot(&k.t());
    let n = s.nrows();
    for i in 0..n {
        let mut row = s.row_mut(i);
        let mut m = f32::NEG_INFINITY;
        for j in 0..=i {
            row[j] *= scale;
            m = m.max(row[j]);
        }
        let mut z = 0.0;
        for j in 0..n {
            if j <= i {
                row[j] = (row[j] - m).exp();
                z += row[j];
            } else {
                row[j] = 0.0;
            }
        }
        row.mapv_inplace(|v| v / z);
    }
    s
}

fn embed(p: &AnnParams, tokens: &[usize], batch: usize, n: usize) -> Array2<f32> {
    let d = p.tok_emb.ncols();
    let mut x = Array2::zeros((batch * n, d));
    for b in 0..batch {
        for t in 0..n {
            let r = b * n + t;
            let tok = tokens[r];
            Zip::from(x.row_mut(r))
                .and(p.tok_emb.row(tok))
                .and(p.pos_emb.row(t))
                .for_each(|o, &a, &c| *o = a + c);
        }
    }
    x
}

fn block_forward(l: &LayerParams, cfg: &TransformerConfig, x: Array2<f32>, batch: usize, n: usize, fold: Option<&(LnAffine, LnAffine)>) -> LayerActivations {
    let d = cfg.d_model;
    let heads = cfg.n_head;
    let dh = cfg.d_head();
    let (u1, ln1) = match fold {
        Some((a, _)) => affine(&x, a),
        None => layer_norm(&x, &l.ln1_g, &l.ln1_b),
    };
    let q = linear(&u1, &l.w_q, &l.b_q);
    let k = linear(&u1, &l.w_k, &l.b_k);
    let v = linear(&u1, &l.w_v, &l.b_v);
    let scale = 1.0 / (dh as f32).sqrt();
    let mut y = Array2::zeros((batch * n, d));
    let mut probs = Vec::with_capacity(batch * heads);
    for b in 0..batch {
        let rows = b * n..(b + 1) * n;
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let p = head_probs(
                q.slice(s![rows.clone(), cols.clone()]),
                k.slice(s![rows.clone(), cols.clone()]),
                scale,
            );
            let yh = p.dot(&v.slice(s![rows.clone(), cols.clone()]));
            y.slice_mut(s![rows.clone(), cols]).assign(&yh);
            probs.push(p);
        }
    }
    let a = linear(&y, &l.w_o, &l.b_o);
    let hres = &x + &a;
    let (u2, ln2) = match fold {
        Some((_, a2)) => affine(&hres, a2),
        None => layer_norm(&hres, &l.ln2_g, &l.ln2_b),
    };
    let z = linear(&u2, &l.w_in, &l.b_in);
    let act = activate(&z, cfg.nonlinearity);
    LayerActivations {
        x_in: x,
        ln1,
        u1,
        q,
        k,
        v,
        probs,
        y,
        h: hres,
        ln2,
        u2,
        z,
        act,
    }
}

/// Batched forward over `batch` sequences of equal length, `tokens` laid
/// out sequence-major. Returns logits `(batch * n, vocab)` and the cache.
pub fn forward_batch(p: &AnnParams, cfg: &TransformerConfig, tokens: &[usize], batch: usize, mode: LnMode<'_>) -> Result<(Array2<f32>, AnnCache)> {
    if batch == 0 || !tokens.len().is_multiple_of(batch) {
        return Err(Error::InvalidParam(format!("{} tokens do not split into {batch} sequences", tokens.len())));
    }
    let n = tokens.len() / batch;
    for seq in tokens.chunks(n) {
        check_tokens(cfg, seq)?;
    }
    if let LnMode::Folded(f) = mode {
        if f.len() != cfg.n_layer {
            return Err(Error::shape("folded layer norms", &[cfg.n_layer], &[f.len()]));
        }
    }
    let mut x = embed(p, tokens, batch, n);
    let mut layers = Vec::with_capacity(cfg.n_layer);
    for (i, l) in p.layers.iter().enumerate() {
        let fold = match mode {
            LnMode::Exact => None,
            LnMode::Folded(f) => Some(&f[i]),
        };
        let acts = block_forward(l, cfg, x, batch, n, fold);
        x = &acts.h + &linear(&acts.act, &l.w_out, &l.b_out);
        layers.push(acts);
    }
    let (uf, lnf) = layer_norm(&x, &p.lnf_g, &p.lnf_b);
    let logits = uf.dot(&p.head);
    Ok((
        logits,
        AnnCache {
            batch,
            seq_len: n,
            tokens: tokens.to_vec(),
            layers,
            x_final: x,
            lnf,
            uf,
        },
    ))
}

/// Logits `(positions, vocab)` for one sequence of at most `block_size` tokens.
pub fn forward_ann(p: &AnnParams, cfg: &TransformerConfig, tokens: &[usize]) -> Result<Array2<f32>> {
    check_tokens(cfg, tokens)?;
    Ok(forward_batch(p, cfg, tokens, 1, LnMode::Exact)?.0)
}

/// Final LayerNorm and unembedding applied to a residual stream.
pub(crate) fn head_logits(x: &Array2<f32>, g: &Array1<f32>, b: &Array1<f32>, head: &Array2<f32>) -> Array2<f32> {
    let (uf, _) = layer_norm(x, g, b);
    uf.dot(head)
}

/// Gradients of a scalar loss given `dlogits`, for a cache produced with
/// [`LnMode::Exact`].
pub fn backward(p: &AnnParams, cfg: &TransformerConfig, cache: &AnnCache, dlogits: &Array2<f32>) -> AnnParams {
    let mut g = p.zeros_like();
    let n = cache.seq_len;
    let batch = cache.batch;
    let heads = cfg.n_head;
    let dh = cfg.d_head();
    let scale = 1.0 / (dh as f32).sqrt();

    g.head = cache.uf.t().dot(dlogits);
    let duf = dlogits.dot(&p.head.t());
    let mut dx = layer_norm_backward(&duf, &cache.lnf, &p.lnf_g, &mut g.lnf_g, &mut g.lnf_b);

    for (li, l) in p.layers.iter().enumerate().rev() {
        let a = &cache.layers[li];
        let gl = &mut g.layers[li];
        // MLP
        gl.w_out = a.act.t().dot(&dx);
        gl.b_out = dx.sum_axis(Axis(0));
        let dact = dx.dot(&l.w_out.t());
        let mut dz = dact;
        Zip::from(&mut dz).and(&a.z).for_each(|d, &z| *d *= activate_grad(z, cfg.nonlinearity));
        gl.w_in = a.u2.t().dot(&dz);
        gl.b_in = dz.sum_axis(Axis(0));
        let du2 = dz.dot(&l.w_in.t());
        let dh_res = &dx + &layer_norm_backward(&du2, &a.ln2, &l.ln2_g, &mut gl.ln2_g, &mut gl.ln2_b);
        // attention
        gl.w_o = a.y.t().dot(&dh_res);
        gl.b_o = dh_res.sum_axis(Axis(0));
        let dy = dh_res.dot(&l.w_o.t());
        let mut dq = Array2::zeros(a.q.dim());
        let mut dk = Array2::zeros(a.k.dim());
        let mut dv = Array2::zeros(a.v.dim());
        for b in 0..batch {
            let rows = b * n..(b + 1) * n;
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let probs = &a.probs[b * heads + h];
                let dyh = dy.slice(s![rows.clone(), cols.clone()]);
                let vh = a.v.slice(s![rows.clone(), cols.clone()]);
                let dp = dyh.dot(&vh.t());
                dv.slice_mut(s![rows.clone(), cols.clone()]).assign(&probs.t().dot(&dyh));
                let mut ds = Array2::zeros((n, n));
                for i in 0..n {
                    let pr = probs.row(i);
                    let dpr = dp.row(i);
                    let dot: f32 = pr.iter().zip(dpr.iter()).map(|(x, y)| x * y).sum();
                    Zip::from(ds.row_mut(i))
                        .and(pr)
                        .and(dpr)
                        .for_each(|o, &pv, &dpv| *o = pv * (dpv - dot) * scale);
                }
                let qh = a.q.slice(s![rows.clone(), cols.clone()]);
                let kh = a.k.slice(s![rows.clone(), cols.clone()]);
                dq.slice_mut(s![rows.clone(), cols.clone()]).assign(&ds.dot(&kh));
                dk.slice_mut(s![rows.clone(), cols]).assign(&ds.t().dot(&qh));
            }
        }
        gl.w_q = a.u1.t().dot(&dq);
        gl.b_q = dq.sum_axis(Axis(0));
        gl.w_k = a.u1.t().dot(&dk);
        gl.b_k = dk.sum_axis(Axis(0));
        gl.w_v = a.u1.t().dot(&dv);
        gl.b_v = dv.sum_axis(Axis(0));
        let du1 = dq.dot(&l.w_q.t()) + dk.dot(&l.w_k.t()) + dv.dot(&l.w_v.t());
        dx = &dh_res + &layer_norm_backward(&du1, &a.ln1, &l.ln1_g, &mut gl.ln1_g, &mut gl.ln1_b);
    }
    for b in 0..batch {
        for t in 0..n {
            let r = b * n + t;
            let tok = cache.tokens[r];
            let row = dx.row(r);
            let mut te = g.tok_emb.row_mut(tok);
            te += &row;
            let mut pe = g.pos_emb.row_mut(t);
            pe += &row;
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::train::cross_entropy;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> TransformerConfig {
        TransformerConfig::new(2, 2, 8, 6, 7)
    }

    fn perturbed(cfg: &TransformerConfig, seed: u64) -> AnnParams {
        let mut p = AnnParams::init(cfg, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for s in p.slices_mut() {
            for v in s.iter_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        p
    }

    /// Straight-line f64 decoder written without ndarray matmuls.
    fn oracle_forward(p: &AnnParams, cfg: &TransformerConfig, tokens: &[usize]) -> Vec<Vec<f64>> {
        let n = tokens.len();
        let d = cfg.d_model;
        let f64v = |a: &Array1<f32>| a.iter().map(|&v| v as f64).collect::<Vec<_>>();
        let mat = |a: &Array2<f32>| -> Vec<Vec<f64>> { a.outer_iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect() };
        let ln = |x: &Vec<f64>, g: &[f64], b: &[f64]| -> Vec<f64> {
            let m = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / d as f64;
            x.iter().enumerate().map(|(j, v)| (v - m) / (var + LN_EPS as f64).sqrt() * g[j] + b[j]).collect()
        };
        let lin = |x: &Vec<f64>, w: &Vec<Vec<f64>>, b: &[f64]| -> Vec<f64> {
            (0..b.len()).map(|o| b[o] + (0..x.len()).map(|i| x[i] * w[i][o]).sum::<f64>()).collect()
        };
        let te = mat(&p.tok_emb);
        let pe = mat(&p.pos_emb);
        let mut xs: Vec<Vec<f64>> = (0..n).map(|t| (0..d).map(|j| te[tokens[t]][j] + pe[t][j]).collect()).collect();
        let dh = cfg.d_head();
        for l in &p.layers {
            let u: Vec<Vec<f64>> = xs.iter().map(|x| ln(x, &f64v(&l.ln1_g), &f64v(&l.ln1_b))).collect();
            let q: Vec<Vec<f64>> = u.iter().map(|x| lin(x, &mat(&l.w_q), &f64v(&l.b_q))).collect();
            let k: Vec<Vec<f64>> = u.iter().map(|x| lin(x, &mat(&l.w_k), &f64v(&l.b_k))).collect();
            let v: Vec<Vec<f64>> = u.iter().map(|x| lin(x, &mat(&l.w_v), &f64v(&l.b_v))).collect();
            let mut y = vec![vec![0.0; d]; n];
            for h in 0..cfg.n_head {
                for i in 0..n {
                    let e: Vec<f64> = (0..=i)
                        .map(|j| ((h * dh..(h + 1) * dh).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt()).exp())
                        .collect();
                    let z: f64 = e.iter().sum();
                    for j in 0..=i {
                        for c in h * dh..(h + 1) * dh {
                            y[i][c] += e[j] / z * v[j][c];
                        }
                    }
                }
            }
            for i in 0..n {
                let a = lin(&y[i], &mat(&l.w_o), &f64v(&l.b_o));
                let hres: Vec<f64> = (0..d).map(|j| xs[i][j] + a[j]).collect();
                let u2 = ln(&hres, &f64v(&l.ln2_g), &f64v(&l.ln2_b));
                let z: Vec<f64> = lin(&u2, &mat(&l.w_in), &f64v(&l.b_in)).into_iter().map(|v| v.max(0.0)).collect();
                let m = lin(&z, &mat(&l.w_out), &f64v(&l.b_out));
                xs[i] = (0..d).map(|j| hres[j] + m[j]).collect();
            }
        }
        let zeros = vec![0.0; cfg.vocab_size];
        xs.iter().map(|x| lin(&ln(x, &f64v(&p.lnf_g), &f64v(&p.lnf_b)), &mat(&p.head), &zeros)).collect()
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        let cfg = tiny_cfg();
        let p = perturbed(&cfg, 5);
        let tokens = [3, 1, 4, 1, 5, 2];
        let logits = forward_ann(&p, &cfg, &tokens).unwrap();
        let oracle = oracle_forward(&p, &cfg, &tokens);
        for (i, row) in oracle.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert!((logits[[i, j]] as f64 - v).abs() < 1e-5, "{i},{j}: {} vs {v}", logits[[i, j]]);
            }
        }
    }

    #[test]
    fn zero_weights_give_uniform_logits() {
        let cfg = tiny_cfg();
        let mut p = AnnParams::init(&cfg, 1);
        for s in p.slices_mut() {
            s.fill(0.0);
        }
        let logits = forward_ann(&p, &cfg, &[1, 2, 3]).unwrap();
        assert!(logits.iter().all(|&v| v == logits[[0, 0]]));
        let one = forward_ann(&p, &cfg, &[4]).unwrap();
        assert_eq!(one.dim(), (1, cfg.vocab_size));
    }

    #[test]
    fn rejects_overlong_and_out_of_range_input() {
        let cfg = tiny_cfg();
        let p = AnnParams::init(&cfg, 1);
        assert!(matches!(forward_ann(&p, &cfg, &[0; 7]), Err(Error::SequenceTooLong { .. })));
        assert!(matches!(forward_ann(&p, &cfg, &[9]), Err(Error::TokenOutOfRange { .. })));
    }

    #[test]
    fn later_tokens_never_change_earlier_logits() {
        let cfg = tiny_cfg();
        let p = perturbed(&cfg, 9);
        let a = forward_ann(&p, &cfg, &[1, 2, 3, 4, 5]).unwrap();
        let b = forward_ann(&p, &cfg, &[1, 2, 3, 6, 0]).unwrap();
        for i in 0..3 {
            for j in 0..cfg.vocab_size {
                assert_eq!(a[[i, j]].to_bits(), b[[i, j]].to_bits());
            }
        }
    }

    /// Loss and the sign pattern of every MLP pre-activation.
    fn loss_of(p: &AnnParams, cfg: &TransformerConfig, x: &[usize], y: &[usize]) -> (f64, Vec<bool>) {
        let (logits, cache) = forward_batch(p, cfg, x, 2, LnMode::Exact).unwrap();
        let signs = cache.layers.iter().flat_map(|l| l.z.iter().map(|&v| v > 0.0)).collect();
        (cross_entropy(&logits, y).0, signs)
    }

    #[test]
    fn backward_matches_finite_differences() {
        for nl in [Nonlinearity::Gelu, Nonlinearity::Relu] {
            let mut cfg = tiny_cfg();
            cfg.nonlinearity = nl;
            let p = perturbed(&cfg, 21);
            let x = [1, 2, 3, 4, 0, 6, 5, 4];
            let y = [2, 3, 4, 0, 6, 5, 4, 1];
            let (logits, cache) = forward_batch(&p, &cfg, &x, 2, LnMode::Exact).unwrap();
            let (_, dl) = cross_entropy(&logits, &y);
            let g = backward(&p, &cfg, &cache, &dl);
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let grads = g.slices();
            let eps = 1e-2f32;
            let base = loss_of(&p, &cfg, &x, &y).1;
            let mut worst = 0.0f64;
            let mut checked = 0;
            for (ti, gs) in grads.iter().enumerate() {
                for _ in 0..3 {
                    let idx = rng.random_range(0..gs.len());
                    let mut pp = p.clone();
                    pp.slices_mut()[ti][idx] += eps;
                    let (lp, sp) = loss_of(&pp, &cfg, &x, &y);
                    pp.slices_mut()[ti][idx] -= 2.0 * eps;
                    let (lm, sm) = loss_of(&pp, &cfg, &x, &y);
                    if nl == Nonlinearity::Relu && (sp != base || sm != base) {
                        // a ReLU kink lies inside the difference stencil
                        continue;
                    }
                    checked += 1;
                    let fd = (lp - lm) / (2.0 * eps as f64);
                    let an = gs[idx] as f64;
                    let err = (fd - an).abs() / (fd.abs().max(an.abs()).max(1e-2));
                    worst = worst.max(err);
                }
            }
            assert!(checked > grads.len(), "{nl:?}: only {checked} samples avoided kinks");
            assert!(worst < 2e-2, "{nl:?}: worst relative gradient error {worst}");
        }
    }
}
