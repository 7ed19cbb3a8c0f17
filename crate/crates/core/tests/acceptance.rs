//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use ndarray::{s, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use spikelm::attention::{score_neuron_params, ssa_forward, ssa_output, ssa_scores, AttentionWeights};
use spikelm::config::RunConfig;
use spikelm::conversion::{calibration_batch, collect_max_activations, convert, convert_mlp, run_converted_mlp, ConvertOptions, DenseLayer};
use spikelm::data::Corpus;
use spikelm::energy::{count_asa_flops, count_spike_ops, estimate, EnergyConstants, OpCounters};
use spikelm::finetune::{evaluate_alignment, finetune_ssa, toy_grad_check, FinetuneConfig, SurrogateKind};
use spikelm::metrics::{bits_per_byte, cosine_similarity, mean_nll, perplexity};
use spikelm::model::{forward_snn_traced, AnnParams, ModelCheckpoint, SnnModel, TransformerConfig};
use spikelm::neuron::{neuron_step, run_window, NeuronParams, SpikeTrain};
use spikelm::pipeline;

type Check = std::result::Result<(bool, String), String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Check + 'a>);

fn repo() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn c1_rate_fidelity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xs: Vec<f64> = (0..1000).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let steps = 128;
    let mut currents = Array3::zeros((steps, 1, xs.len()));
    for (c, &x) in xs.iter().enumerate() {
        currents.slice_mut(s![.., 0, c]).fill(x);
    }
    let (_, rates) = run_window(NeuronParams::bipolar_if(1.0), currents.view()).map_err(|e| e.to_string())?;
    let worst = xs.iter().enumerate().map(|(c, &x)| (rates[[0, c]] - x).abs()).fold(0.0, f64::max);
    Ok((worst <= 1.0 / 128.0, format!("max |rate - x| = {worst:.6} (bound {:.6})", 1.0 / 128.0)))
}

fn c2_charge_conservation() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let steps = rng.random_range(1..64);
        let th = rng.random_range(0.25..2.0);
        let currents = Array3::from_shape_fn((steps, 1, 1), |_| rng.random_range(-1.5..1.5) * th);
        let np = NeuronParams::bipolar_if(th);
        let mut state = spikelm::neuron::NeuronLayerState::new(np, 1, 1).map_err(|e| e.to_string())?;
        let mut signed = 0.0;
        for t in 0..steps {
            let out = neuron_step(&mut state, currents.index_axis(Axis(0), t)).map_err(|e| e.to_string())?;
            signed += f64::from(out[[0, 0]]);
        }
        let total: f64 = currents.sum();
        worst = worst.max((total - (state.v_mem()[[0, 0]] + th * signed)).abs());
    }
    Ok((worst <= 1e-9, format!("max |sum I - v_final - v_th * count| = {worst:.2e} over 100 windows")))
}

fn c3_conversion_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let he = |fan_in: usize| Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
    let mut layer = |i: usize, o: usize| {
        let d = he(i);
        DenseLayer {
            w: Array2::from_shape_fn((i, o), |_| d.sample(&mut rng)),
            b: ndarray::Array1::from_shape_fn(o, |_| 0.0),
        }
    };
    let layers = vec![layer(64, 64), layer(64, 10)];
    let mut xr = ChaCha8Rng::seed_from_u64(33);
    let calib = Array2::from_shape_fn((128, 64), |_| xr.random_range(0.0..1.0));
    let (norm, scales) = convert_mlp(&layers, calib.view(), 1.0).map_err(|e| e.to_string())?;
    let x = calib.slice(s![..32, ..]).to_owned();
    let mut h = x.clone();
    for l in &layers {
        h = (h.dot(&l.w) + &l.b).mapv(|v| v.max(0.0));
    }
    let ann = h / *scales.last().unwrap();
    let rates = run_converted_mlp(&norm, x.view(), 256, 1.0).map_err(|e| e.to_string())?;
    let mae = (&ann - &rates).mapv(f64::abs).mean().unwrap();
    let a = ann.iter().copied().collect::<ndarray::Array1<f64>>();
    let r = rates.iter().copied().collect::<ndarray::Array1<f64>>();
    let cos = cosine_similarity(a.view(), r.view()).map_err(|e| e.to_string())?;
    let _ = collect_max_activations(&layers, calib.view()).map_err(|e| e.to_string())?;
    Ok((mae <= 0.02 && cos >= 0.99, format!("MAE {mae:.4} (<= 0.02), cosine {cos:.5} (>= 0.99) at T=256")))
}

fn ternary(rng: &mut ChaCha8Rng, steps: usize, n: usize, d: usize) -> SpikeTrain {
    SpikeTrain::from_values(Array3::from_shape_fn((steps, n, d), |_| rng.random_range(-1i8..=1))).unwrap()
}

fn c4_ssa_oracle() -> Check {
    let (steps, n, heads, dh) = (8, 6, 2, 4);
    let d = heads * dh;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let q = ternary(&mut rng, steps, n, d);
    let k = ternary(&mut rng, steps, n, d);
    let v = ternary(&mut rng, steps, n, d);
    let w_o = Array2::from_shape_fn((d, d), |_| f64::from(rng.random_range(-16i32..=16)) / 8.0);
    let b_o = ndarray::Array1::from_shape_fn(d, |_| f64::from(rng.random_range(-8i32..=8)) / 8.0);
    let np_as = score_neuron_params(dh, &NeuronParams::default());
    let scores = ssa_scores(&q, &k, heads, &np_as, true).map_err(|e| e.to_string())?;
    let out = ssa_output(&scores, &v, w_o.view(), b_o.view()).map_err(|e| e.to_string())?;

    let th = np_as.threshold;
    let mut ok = true;
    let mut oracle_out = Array3::<f64>::zeros((steps, n, d));
    for h in 0..heads {
        let mut vm = Array2::<f64>::zeros((n, n));
        for t in 0..steps {
            let mut agg = Array2::<f64>::zeros((n, d));
            for i in 0..n {
                for j in 0..n {
                    let mut cur = 0.0;
                    if j <= i {
                        for c in h * dh..(h + 1) * dh {
                            cur += f64::from(q.step(t)[[i, c]]) * f64::from(k.step(t)[[j, c]]);
                        }
                    }
                    vm[[i, j]] += cur;
                    let spike = vm[[i, j]] >= th * (1.0 - spikelm::neuron::THRESHOLD_TOLERANCE);
                    if spike {
                        vm[[i, j]] -= th;
                    }
                    if scores.trains[h].step(t)[[i, j]] != i8::from(spike) {
                        ok = false;
                    }
                    if spike {
                        for c in h * dh..(h + 1) * dh {
                            agg[[i, c]] += f64::from(v.step(t)[[j, c]]);
                        }
                    }
                }
            }
            let mut o = oracle_out.index_axis_mut(Axis(0), t);
            o += &agg.dot(&w_o);
        }
    }
    for t in 0..steps {
        let mut o = oracle_out.index_axis_mut(Axis(0), t);
        o += &b_o;
    }
    let outputs_equal = out.iter().zip(oracle_out.iter()).all(|(a, b)| a == b);
    Ok((ok && outputs_equal, format!("score spikes equal: {ok}; output currents bit-equal: {outputs_equal}")))
}

fn c5_multiplication_free() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (steps, n, d, heads) = (16, 8, 16, 2);
    let s_in = ternary(&mut rng, steps, n, d);
    let mut g = || Array2::from_shape_fn((d, d), |_| rng.random_range(-0.6..0.6));
    let w = AttentionWeights::new(g(), g(), g(), g(), heads).map_err(|e| e.to_string())?;
    let np = NeuronParams::default();
    let (_, _, tr) = ssa_forward(&s_in, &w, &np, &score_neuron_params(d / heads, &np), true).map_err(|e| e.to_string())?;
    let active = tr.score_ac > 0 && tr.value_ac > 0;
    Ok((tr.mul == 0 && active, format!("mul = {}, score AC = {}, value AC = {}", tr.mul, tr.score_ac, tr.value_ac)))
}

fn c6_gradient_check() -> Check {
    let mut worst = 0.0f64;
    for kind in [SurrogateKind::FastSigmoid, SurrogateKind::Arctan] {
        for seed in 0..3 {
            worst = worst.max(toy_grad_check(NeuronParams::default(), 5.0, kind, 1e-4, seed).map_err(|e| e.to_string())?);
        }
    }
    Ok((worst <= 1e-4, format!("max relative error {worst:.2e} at eps 1e-4, slope 5")))
}

fn toy_model() -> (ModelCheckpoint, ModelCheckpoint, Vec<usize>) {
    let mut cfg = TransformerConfig::new(1, 2, 64, 32, 16);
    cfg.snn.time_window = 16;
    let ann = AnnParams::init(&cfg, 7).to_checkpoint(&cfg, None);
    let text: Vec<usize> = (0..4000).map(|i| (i * 5 + i / 11) % 16).collect();
    let calib = calibration_batch(&text, 8, 32, 1).unwrap();
    let (snn, _) = convert(&ann, &calib, &ConvertOptions::default()).unwrap();
    (ann, snn, text)
}

fn c7_finetune_efficacy() -> Check {
    let (ann, snn, text) = toy_model();
    let data = calibration_batch(&text, 32, 32, 2).map_err(|e| e.to_string())?;
    let held = calibration_batch(&text, 8, 32, 5).map_err(|e| e.to_string())?;
    let before = evaluate_alignment(&ann, &snn, &held).map_err(|e| e.to_string())?;
    let fc = FinetuneConfig {
        lr: 300.0,
        steps: 200,
        batch: 4,
        seed: 7,
        ..FinetuneConfig::default()
    };
    let (tuned, _) = finetune_ssa(&snn, &ann, &data, &fc).map_err(|e| e.to_string())?;
    let after = evaluate_alignment(&ann, &tuned, &held).map_err(|e| e.to_string())?;
    let frozen = |n: &str| !(n.ends_with("attn.w_q") || n.ends_with("attn.w_k") || n.ends_with("attn.w_v"));
    let same = snn.digest(frozen) == tuned.digest(frozen);
    let changed = snn.digest(|n| !frozen(n)) != tuned.digest(|n| !frozen(n));
    let ratio = after / before;
    Ok((
        ratio <= 0.5 && same && changed,
        format!("held-out alignment {before:.5} -> {after:.5} (ratio {ratio:.3}, <= 0.5); non-SSA checksum unchanged: {same}"),
    ))
}

fn c8_end_to_end(corpus: &Corpus, cfg: &RunConfig) -> Check {
    let e = |e: spikelm::Error| e.to_string();
    let (ann, _) = pipeline::train(cfg, corpus).map_err(e)?;
    let (snn, _) = pipeline::convert_stage(cfg, corpus, &ann).map_err(e)?;
    let (tuned, _) = pipeline::finetune_stage(cfg, corpus, &ann, &snn).map_err(e)?;
    let r = pipeline::eval_stage(cfg, corpus, &ann, Some(&tuned)).map_err(e)?;
    let cos = r.cosine_similarity.unwrap_or(0.0);
    let agree = r.token_accuracy.unwrap_or(0.0);
    let ppl_snn = r.perplexity_snn.unwrap_or(f64::INFINITY);
    let rise = ppl_snn / r.perplexity_ann - 1.0;
    Ok((
        cos >= 0.8 && agree >= 0.7 && rise <= 0.35,
        format!(
            "cosine {cos:.3} (>= 0.8), agreement {agree:.3} (>= 0.7), perplexity {:.2} -> {ppl_snn:.2} (+{:.1}%, <= 35%)",
            r.perplexity_ann,
            100.0 * rise
        ),
    ))
}

fn c9_energy() -> Check {
    let k = EnergyConstants::default();
    let (ann, snn, text) = toy_model();
    let m = SnnModel::from_checkpoint(&snn).map_err(|e| e.to_string())?;
    let tokens = &text[..32];
    let (_, tr) = forward_snn_traced(&m, tokens, 16).map_err(|e| e.to_string())?;
    let ssa = tr.ssa_total();
    let ops = count_spike_ops(&ssa);
    let asa = count_asa_flops(&ann.config, 32).map_err(|e| e.to_string())?;
    let counters = OpCounters::from_runs(&asa, &ssa);
    let r = estimate(&counters, &k).map_err(|e| e.to_string())?;
    let exact = r.e_asa_pj == 4.6 * counters.mac_count as f64 && r.e_ssa_pj == 0.9 * counters.ac_count as f64;
    let rate = counters.avg_rate();
    let cheaper = r.e_ssa_pj < r.e_asa_pj;
    Ok((
        exact && ops.relative_gap <= 0.10 && rate <= 0.15 && cheaper,
        format!(
            "identities exact: {exact}; rate-based estimate gap {:.2}% (<= 10%); attention spike rate {rate:.3} (<= 0.15); E_SSA {:.3} uJ vs E_ASA {:.3} uJ",
            100.0 * ops.relative_gap,
            r.e_ssa_uj,
            r.e_asa_uj
        ),
    ))
}

fn c10_metric_identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let logits = Array2::from_shape_fn((40, 65), |_| rng.random_range(-3.0f32..3.0));
    let targets: Vec<usize> = (0..40).map(|_| rng.random_range(0..65)).collect();
    let bpt = 1.37;
    let nll = mean_nll(&logits, &targets).map_err(|e| e.to_string())?;
    let bpb = bits_per_byte(nll, bpt).map_err(|e| e.to_string())?;
    let ppl = perplexity(&logits, &targets).map_err(|e| e.to_string())?;
    let gap = (ppl.log2() - bpb * bpt).abs();
    let uniform = perplexity(&Array2::zeros((10, 65)), &targets[..10]).map_err(|e| e.to_string())?;
    Ok((gap <= 1e-9 && (uniform / 65.0 - 1.0).abs() <= 1e-12, format!("|log2 ppl - bpb * bytes| = {gap:.1e}; uniform perplexity = {uniform}")))
}

fn c11_determinism(corpus: &Corpus) -> Check {
    let e = |e: spikelm::Error| e.to_string();
    let cfg = RunConfig::load(Some(&repo().join("configs/tiny.toml")), &[]).map_err(e)?;
    let once = || -> std::result::Result<Vec<Vec<u8>>, String> {
        let (ann, _) = pipeline::train(&cfg, corpus).map_err(e)?;
        let (snn, report) = pipeline::convert_stage(&cfg, corpus, &ann).map_err(e)?;
        let (tuned, curve) = pipeline::finetune_stage(&cfg, corpus, &ann, &snn).map_err(e)?;
        let eval = pipeline::eval_stage(&cfg, corpus, &ann, Some(&tuned)).map_err(e)?;
        Ok(vec![
            ann.to_bytes().map_err(e)?,
            snn.to_bytes().map_err(e)?,
            tuned.to_bytes().map_err(e)?,
            report.to_json().map_err(e)?.into_bytes(),
            curve.to_csv().into_bytes(),
            eval.to_json().map_err(e)?.into_bytes(),
        ])
    };
    let a = once()?;
    let b = once()?;
    let identical = a == b;
    let ck = ModelCheckpoint::from_bytes(&a[2]).map_err(e)?;
    let roundtrip = ck.to_bytes().map_err(e)? == a[2];
    Ok((identical && roundtrip, format!("two seeded runs byte-identical: {identical}; checkpoint roundtrip bit-exact: {roundtrip}")))
}

fn main() -> ExitCode {
    let data = repo().join("data/shakespeare.txt");
    let mut profile = RunConfig::load(Some(&repo().join("configs/shakespeare.toml")), &[]).expect("shakespeare profile");
    profile.data.corpus_path = data.clone();
    let corpus = spikelm::data::ingest_corpus(&data, profile.data.split_ratio).expect("corpus");

    let checks: Vec<Criterion> = vec![
        ("1 neuron rate fidelity", Box::new(c1_rate_fidelity)),
        ("2 charge conservation", Box::new(c2_charge_conservation)),
        ("3 conversion equivalence", Box::new(c3_conversion_equivalence)),
        ("4 SSA oracle equivalence", Box::new(c4_ssa_oracle)),
        ("5 multiplication-free attention", Box::new(c5_multiplication_free)),
        ("6 surrogate gradient check", Box::new(c6_gradient_check)),
        ("7 fine-tuning efficacy", Box::new(c7_finetune_efficacy)),
        ("8 end-to-end Shakespeare fidelity", Box::new(|| c8_end_to_end(&corpus, &profile))),
        ("9 energy identities", Box::new(c9_energy)),
        ("10 metric identities", Box::new(c10_metric_identities)),
        ("11 determinism and checkpoint I/O", Box::new(|| c11_determinism(&corpus))),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let t0 = Instant::now();
        let (pass, detail) = match check() {
            Ok(r) => r,
            Err(msg) => (false, format!("error: {msg}")),
        };
        if !pass {
            failed += 1;
        }
        println!("[{}] criterion {name}: {detail} ({:.1} s)", if pass { "PASS" } else { "FAIL" }, t0.elapsed().as_secs_f64());
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
