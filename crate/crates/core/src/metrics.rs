//! Fidelity metrics between the analog and spiking models.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax, forward_ann, forward_snn_batch, AnnParams, SnnModel, TransformerConfig};
use crate::par;

/// Fraction of positions where `a` and `b` hold the same token.
pub fn token_accuracy(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("token_accuracy", &[a.len()], &[b.len()]));
    }
    if a.is_empty() {
        return Err(Error::InvalidParam("token_accuracy needs at least one token".into()));
    }
    Ok(a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64)
}

pub fn cosine_similarity(u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape("cosine_similarity", &[u.len()], &[v.len()]));
    }
    let nu = u.dot(&u).sqrt();
    let nv = v.dot(&v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::InvalidParam("cosine similarity of a zero vector".into()));
    }
    Ok((u.dot(&v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Mean negative log-likelihood in nats of `targets` under row-wise softmax.
pub fn mean_nll(logits: &Array2<f32>, targets: &[usize]) -> Result<f64> {
    if logits.nrows() != targets.len() {
        return Err(Error::shape("mean_nll targets", &[logits.nrows()], &[targets.len()]));
    }
    if targets.is_empty() {
        return Err(Error::InvalidParam("no targets to score".into()));
    }
    let mut total = 0.0;
    for (row, &t) in logits.outer_iter().zip(targets) {
        if t >= row.len() {
            return Err(Error::TokenOutOfRange { id: t, vocab_size: row.len() });
        }
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(f64::from(b)));
        let lse = m + row.iter().map(|&v| (f64::from(v) - m).exp()).sum::<f64>().ln();
        total += lse - f64::from(row[t]);
    }
    Ok(total / targets.len() as f64)
}

/// `exp` of the mean natural-log NLL.
pub fn perplexity(logits: &Array2<f32>, targets: &[usize]) -> Result<f64> {
    Ok(mean_nll(logits, targets)?.exp())
}

pub fn bits_per_byte(nll_nats: f64, bytes_per_token: f64) -> Result<f64> {
    if !(bytes_per_token > 0.0) {
        return Err(Error::InvalidParam(format!("bytes_per_token must be positive, got {bytes_per_token}")));
    }
    Ok(nll_nats / std::f64::consts::LN_2 / bytes_per_token)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub windows: usize,
    pub positions: usize,
    pub perplexity_ann: f64,
    pub bpb_ann: f64,
    /// Spiking fields are absent when only an analog model was evaluated.
    pub time_window: Option<usize>,
    pub token_accuracy: Option<f64>,
    pub cosine_similarity: Option<f64>,
    pub perplexity_snn: Option<f64>,
    pub bpb_snn: Option<f64>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn csv_header() -> &'static str {
        "dataset,windows,positions,time_window,token_accuracy,cosine_similarity,perplexity_ann,perplexity_snn,bpb_ann,bpb_snn"
    }

    pub fn csv_row(&self) -> String {
        fn opt<T: ToString>(v: Option<T>) -> String {
            v.map(|x| x.to_string()).unwrap_or_default()
        }
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.dataset,
            self.windows,
            self.positions,
            opt(self.time_window),
            opt(self.token_accuracy),
            opt(self.cosine_similarity),
            self.perplexity_ann,
            opt(self.perplexity_snn),
            self.bpb_ann,
            opt(self.bpb_snn)
        )
    }
}

fn stack(rows: &[Array2<f32>]) -> Array2<f32> {
    let views: Vec<_> = rows.iter().map(|a| a.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).expect("logit blocks share a vocabulary width")
}

/// Scores both models on held-out `(inputs, targets)` windows.
///
/// Token accuracy compares the greedy next-token choices of the two models
/// at every position given the same true context. Cosine similarity is taken
/// between the flattened logit tensors of all windows.
pub fn evaluate(
    ann: &AnnParams,
    cfg: &TransformerConfig,
    snn: Option<(&SnnModel, usize)>,
    windows: &[(Vec<usize>, Vec<usize>)],
    bytes_per_token: f64,
    dataset: &str,
) -> Result<EvalReport> {
    if windows.is_empty() {
        return Err(Error::InvalidParam("no evaluation windows".into()));
    }
    let ann_logits = par::map(windows, |(x, _)| forward_ann(ann, cfg, x)).into_iter().collect::<Result<Vec<_>>>()?;
    let targets: Vec<usize> = windows.iter().flat_map(|(_, y)| y.iter().copied()).collect();
    let a = stack(&ann_logits);
    let nll_ann = mean_nll(&a, &targets)?;
    let mut report = EvalReport {
        dataset: dataset.to_string(),
        windows: windows.len(),
        positions: targets.len(),
        perplexity_ann: nll_ann.exp(),
        bpb_ann: bits_per_byte(nll_ann, bytes_per_token)?,
        time_window: None,
        token_accuracy: None,
        cosine_similarity: None,
        perplexity_snn: None,
        bpb_snn: None,
    };
    if let Some((m, steps)) = snn {
        let inputs: Vec<Vec<usize>> = windows.iter().map(|(x, _)| x.clone()).collect();
        let s = stack(&forward_snn_batch(m, &inputs, steps)?);
        let nll_snn = mean_nll(&s, &targets)?;
        let pick = |l: &Array2<f32>| -> Vec<usize> { l.outer_iter().map(|r| argmax(r.as_slice().expect("contiguous row"))).collect() };
        let av = a.iter().map(|&v| f64::from(v)).collect::<ndarray::Array1<f64>>();
        let sv = s.iter().map(|&v| f64::from(v)).collect::<ndarray::Array1<f64>>();
        report.time_window = Some(steps);
        report.token_accuracy = Some(token_accuracy(&pick(&a), &pick(&s))?);
        report.cosine_similarity = Some(cosine_similarity(av.view(), sv.view())?);
        report.perplexity_snn = Some(nll_snn.exp());
        report.bpb_snn = Some(bits_per_byte(nll_snn, bytes_per_token)?);
    }
    Ok(report)
}
