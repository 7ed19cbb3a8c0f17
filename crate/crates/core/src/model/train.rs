//! Baseline next-token training with AdamW.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ann::{backward, forward_batch, LnMode};
use super::params::AnnParams;
use super::TransformerConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub warmup: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Number of fixed validation windows used for the reported loss.
    pub eval_windows: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr: 3e-3,
            batch: 16,
            seed: 1337,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.99,
            warmup: 50,
            grad_clip: 1.0,
            eval_windows: 32,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::InvalidParam(format!("learning rate must be non-negative, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::InvalidParam("batch must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidParam("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.steps.saturating_sub(self.warmup).max(1) as f64;
        let progress = ((step - self.warmup) as f64 / span).min(1.0);
        let min_lr = 0.1 * self.lr;
        min_lr + 0.5 * (self.lr - min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub initial_val_loss: f64,
    pub final_train_loss: f64,
    pub val_loss: f64,
    /// Training loss at every step.
    pub losses: Vec<f64>,
}

/// Mean next-token cross-entropy (nats) and its gradient w.r.t. `logits`.
pub fn cross_entropy(logits: &Array2<f32>, targets: &[usize]) -> (f64, Array2<f32>) {
    let rows = logits.nrows();
    assert_eq!(rows, targets.len(), "one target per logit row");
    let mut grad = Array2::zeros(logits.dim());
    let mut total = 0.0f64;
    for r in 0..rows {
        let row = logits.row(r);
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let z: f64 = row.iter().map(|&v| f64::from(v - m).exp()).sum();
        let lse = f64::from(m) + z.ln();
        total += lse - f64::from(row[targets[r]]);
        let mut g = grad.row_mut(r);
        for (j, &v) in row.iter().enumerate() {
            g[j] = ((f64::from(v) - lse).exp() / rows as f64) as f32;
        }
        g[targets[r]] -= 1.0 / rows as f32;
    }
    (total / rows as f64, grad)
}

fn sample_batch(data: &[usize], n: usize, batch: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut x = Vec::with_capacity(batch * n);
    let mut y = Vec::with_capacity(batch * n);
    for _ in 0..batch {
        let start = rng.random_range(0..data.len() - n);
        x.extend_from_slice(&data[start..start + n]);
        y.extend_from_slice(&data[start + 1..start + n + 1]);
    }
    (x, y)
}

/// Evenly spaced, non-overlapping evaluation windows `(inputs, targets)`.
pub fn eval_windows(data: &[usize], n: usize, count: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    if data.len() <= n {
        return Vec::new();
    }
    let available = (data.len() - 1) / n;
    let count = count.min(available).max(1);
    let stride = (data.len() - 1 - n) / count.max(1);
    (0..count)
        .map(|i| {
            let s = (i * stride.max(1)).min(data.len() - 1 - n);
            (data[s..s + n].to_vec(), data[s + 1..s + n + 1].to_vec())
        })
        .collect()
}

fn mean_loss(p: &AnnParams, cfg: &TransformerConfig, windows: &[(Vec<usize>, Vec<usize>)]) -> Result<f64> {
    let mut total = 0.0;
    for (x, y) in windows {
        let (logits, _) = forward_batch(p, cfg, x, 1, LnMode::Exact)?;
        total += cross_entropy(&logits, y).0;
    }
    Ok(total / windows.len() as f64)
}

fn decays(name: &str) -> bool {
    !(name.ends_with(".weight") || name.ends_with(".bias") || name.contains(".b_"))
}

/// Trains a fresh model on `train` tokens, reporting loss on `val` tokens.
pub fn train_baseline(train: &[usize], val: &[usize], cfg: &TransformerConfig, s: &TrainSettings) -> Result<(AnnParams, TrainReport)> {
    cfg.validate()?;
    s.validate()?;
    let n = cfg.block_size;
    if train.len() < 10 * n {
        return Err(Error::Corpus(format!(
            "training split has {} tokens; at least {} (10 x block_size) are required",
            train.len(),
            10 * n
        )));
    }
    if val.len() <= n {
        return Err(Error::Corpus(format!("validation split has {} tokens; more than {n} are required", val.len())));
    }
    if let Some(&id) = train.iter().chain(val).find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange { id, vocab_size: cfg.vocab_size });
    }
    let mut p = AnnParams::init(cfg, s.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed ^ 0x5eed_da7a);
    let windows = eval_windows(val, n, s.eval_windows);
    let initial_val_loss = mean_loss(&p, cfg, &windows)?;
    let names = p.names();
    let mut m = p.zeros_like();
    let mut v = p.zeros_like();
    let mut losses = Vec::with_capacity(s.steps);
    for step in 0..s.steps {
        let (x, y) = sample_batch(train, n, s.batch, &mut rng);
        let (logits, cache) = forward_batch(&p, cfg, &x, s.batch, LnMode::Exact)?;
        let (loss, dlogits) = cross_entropy(&logits, &y);
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        losses.push(loss);
        let g = backward(&p, cfg, &cache, &dlogits);
        let norm: f64 = g.slices().iter().flat_map(|s| s.iter()).map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
        let clip = if s.grad_clip > 0.0 && norm > s.grad_clip { s.grad_clip / norm } else { 1.0 };
        let lr = s.lr_at(step);
        let t = (step + 1) as i32;
        let bc1 = 1.0 - s.beta1.powi(t);
        let bc2 = 1.0 - s.beta2.powi(t);
        for ((((pw, gw), mw), vw), name) in p
            .slices_mut()
            .into_iter()
            .zip(g.slices())
            .zip(m.slices_mut())
            .zip(v.slices_mut())
            .zip(&names)
        {
            let wd = if decays(name) { s.weight_decay } else { 0.0 };
            for i in 0..pw.len() {
                let gi = f64::from(gw[i]) * clip;
                let mi = s.beta1 * f64::from(mw[i]) + (1.0 - s.beta1) * gi;
                let vi = s.beta2 * f64::from(vw[i]) + (1.0 - s.beta2) * gi * gi;
                mw[i] = mi as f32;
                vw[i] = vi as f32;
                let update = (mi / bc1) / ((vi / bc2).sqrt() + 1e-8) + wd * f64::from(pw[i]);
                pw[i] = (f64::from(pw[i]) - lr * update) as f32;
            }
        }
    }
    let val_loss = mean_loss(&p, cfg, &windows)?;
    let final_train_loss = losses.iter().rev().take(20).sum::<f64>() / losses.len().clamp(1, 20) as f64;
    Ok((
        p,
        TrainReport {
            steps: s.steps,
            initial_val_loss,
            final_train_loss: if losses.is_empty() { initial_val_loss } else { final_train_loss },
            val_loss,
            losses,
        },
    ))
}
