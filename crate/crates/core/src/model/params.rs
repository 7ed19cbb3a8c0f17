use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::checkpoint::{CheckpointKind, ModelCheckpoint, Tensor};
use super::TransformerConfig;
use crate::error::{Error, Result};

/// Weights of one decoder block. Linear weights are input-major (`x · W`).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Array1<f32>,
    pub ln1_b: Array1<f32>,
    pub w_q: Array2<f32>,
    pub b_q: Array1<f32>,
    pub w_k: Array2<f32>,
    pub b_k: Array1<f32>,
    pub w_v: Array2<f32>,
    pub b_v: Array1<f32>,
    pub w_o: Array2<f32>,
    pub b_o: Array1<f32>,
    pub ln2_g: Array1<f32>,
    pub ln2_b: Array1<f32>,
    pub w_in: Array2<f32>,
    pub b_in: Array1<f32>,
    pub w_out: Array2<f32>,
    pub b_out: Array1<f32>,
}

/// Analog model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnParams {
    pub tok_emb: Array2<f32>,
    pub pos_emb: Array2<f32>,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Array1<f32>,
    pub lnf_b: Array1<f32>,
    pub head: Array2<f32>,
}

fn normal(shape: (usize, usize), std: f32, rng: &mut ChaCha8Rng) -> Array2<f32> {
    let dist = Normal::new(0.0f32, std).expect("positive std");
    Array2::from_shape_simple_fn(shape, || dist.sample(rng))
}

impl LayerParams {
    fn names(i: usize) -> [String; 16] {
        let p = |s: &str| format!("h.{i}.{s}");
        [
            p("ln1.weight"),
            p("ln1.bias"),
            p("attn.w_q"),
            p("attn.b_q"),
            p("attn.w_k"),
            p("attn.b_k"),
            p("attn.w_v"),
            p("attn.b_v"),
            p("attn.w_o"),
            p("attn.b_o"),
            p("ln2.weight"),
            p("ln2.bias"),
            p("mlp.w_in"),
            p("mlp.b_in"),
            p("mlp.w_out"),
            p("mlp.b_out"),
        ]
    }

    fn slices(&self) -> [&[f32]; 16] {
        [
            self.ln1_g.as_slice().unwrap(),
            self.ln1_b.as_slice().unwrap(),
            self.w_q.as_slice().unwrap(),
            self.b_q.as_slice().unwrap(),
            self.w_k.as_slice().unwrap(),
            self.b_k.as_slice().unwrap(),
            self.w_v.as_slice().unwrap(),
            self.b_v.as_slice().unwrap(),
            self.w_o.as_slice().unwrap(),
            self.b_o.as_slice().unwrap(),
            self.ln2_g.as_slice().unwrap(),
            self.ln2_b.as_slice().unwrap(),
            self.w_in.as_slice().unwrap(),
            self.b_in.as_slice().unwrap(),
            self.w_out.as_slice().unwrap(),
            self.b_out.as_slice().unwrap(),
        ]
    }

    fn slices_mut(&mut self) -> [&mut [f32]; 16] {
        [
            self.ln1_g.as_slice_mut().unwrap(),
            self.ln1_b.as_slice_mut().unwrap(),
            self.w_q.as_slice_mut().unwrap(),
            self.b_q.as_slice_mut().unwrap(),
            self.w_k.as_slice_mut().unwrap(),
            self.b_k.as_slice_mut().unwrap(),
            self.w_v.as_slice_mut().unwrap(),
            self.b_v.as_slice_mut().unwrap(),
            self.w_o.as_slice_mut().unwrap(),
            self.b_o.as_slice_mut().unwrap(),
            self.ln2_g.as_slice_mut().unwrap(),
            self.ln2_b.as_slice_mut().unwrap(),
            self.w_in.as_slice_mut().unwrap(),
            self.b_in.as_slice_mut().unwrap(),
            self.w_out.as_slice_mut().unwrap(),
            self.b_out.as_slice_mut().unwrap(),
        ]
    }

    fn shapes(d: usize, f: usize) -> [Vec<usize>; 16] {
        [
            vec![d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d],
            vec![d, f],
            vec![f],
            vec![f, d],
            vec![d],
        ]
    }
}

impl AnnParams {
    /// Scaled-normal init: std 0.02, residual-writing projections scaled
    /// by `1/sqrt(2 n_layer)`, LayerNorm gains 1, biases 0.
    pub fn init(cfg: &TransformerConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let f = cfg.d_ff();
        let std = 0.02;
        let proj_std = std / (2.0 * cfg.n_layer as f32).sqrt();
        let tok_emb = normal((cfg.vocab_size, d), std, &mut rng);
        let pos_emb = normal((cfg.block_size, d), std, &mut rng);
        let layers = (0..cfg.n_layer)
            .map(|_| LayerParams {
                ln1_g: Array1::ones(d),
                ln1_b: Array1::zeros(d),
                w_q: normal((d, d), std, &mut rng),
                b_q: Array1::zeros(d),
                w_k: normal((d, d), std, &mut rng),
                b_k: Array1::zeros(d),
                w_v: normal((d, d), std, &mut rng),
                b_v: Array1::zeros(d),
                w_o: normal((d, d), proj_std, &mut rng),
                b_o: Array1::zeros(d),
                ln2_g: Array1::ones(d),
                ln2_b: Array1::zeros(d),
                w_in: normal((d, f), std, &mut rng),
                b_in: Array1::zeros(f),
                w_out: normal((f, d), proj_std, &mut rng),
                b_out: Array1::zeros(d),
            })
            .collect();
        Self {
            tok_emb,
            pos_emb,
            layers,
            lnf_g: Array1::ones(d),
            lnf_b: Array1::zeros(d),
            head: normal((d, cfg.vocab_size), std, &mut rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for s in z.slices_mut() {
            s.fill(0.0);
        }
        z
    }

    pub fn names(&self) -> Vec<String> {
        let mut v = vec!["tok_emb".to_string(), "pos_emb".to_string()];
        for i in 0..self.layers.len() {
            v.extend(LayerParams::names(i));
        }
        v.extend(["ln_f.weight".to_string(), "ln_f.bias".to_string(), "lm_head".to_string()]);
        v
    }

    /// Every parameter buffer, in [`AnnParams::names`] order.
    pub fn slices(&self) -> Vec<&[f32]> {
        let mut v: Vec<&[f32]> = vec![self.tok_emb.as_slice().unwrap(), self.pos_emb.as_slice().unwrap()];
        for l in &self.layers {
            v.extend(l.slices());
        }
        v.extend([
            self.lnf_g.as_slice().unwrap(),
            self.lnf_b.as_slice().unwrap(),
            self.head.as_slice().unwrap(),
        ]);
        v
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f32]> {
        let mut v: Vec<&mut [f32]> = vec![self.tok_emb.as_slice_mut().unwrap(), self.pos_emb.as_slice_mut().unwrap()];
        for l in &mut self.layers {
            v.extend(l.slices_mut());
        }
        v.extend([
            self.lnf_g.as_slice_mut().unwrap(),
            self.lnf_b.as_slice_mut().unwrap(),
            self.head.as_slice_mut().unwrap(),
        ]);
        v
    }

    fn shapes(&self) -> Vec<Vec<usize>> {
        let d = self.tok_emb.ncols();
        let f = self.layers.first().map_or(0, |l| l.w_in.ncols());
        let mut v = vec![self.tok_emb.shape().to_vec(), self.pos_emb.shape().to_vec()];
        for _ in &self.layers {
            v.extend(LayerParams::shapes(d, f));
        }
        v.extend([vec![d], vec![d], self.head.shape().to_vec()]);
        v
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn to_checkpoint(&self, cfg: &TransformerConfig, vocab: Option<String>) -> ModelCheckpoint {
        let tensors: BTreeMap<String, Tensor> = self
            .names()
            .into_iter()
            .zip(self.shapes())
            .zip(self.slices())
            .map(|((name, shape), data)| (name, Tensor { shape, data: data.to_vec() }))
            .collect();
        ModelCheckpoint {
            config: cfg.clone(),
            kind: CheckpointKind::Analog,
            vocab,
            tensors,
            report: None,
            report_ref: None,
        }
    }

    pub fn from_checkpoint(ck: &ModelCheckpoint) -> Result<Self> {
        ck.require_kind(CheckpointKind::Analog)?;
        ck.config.validate()?;
        let mut p = Self::init(&ck.config, 0);
        let names = p.names();
        let shapes = p.shapes();
        for ((name, shape), dst) in names.iter().zip(shapes).zip(p.slices_mut()) {
            let t = ck.tensor(name)?;
            if t.shape != shape {
                return Err(Error::Format(format!(
                    "tensor `{name}` has shape {:?}, config implies {shape:?}",
                    t.shape
                )));
            }
            dst.copy_from_slice(&t.data);
        }
        Ok(p)
    }
}
