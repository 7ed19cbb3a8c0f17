//! Operation counts and energy estimates for analog vs spiking attention.

use serde::{Deserialize, Serialize};

use crate::attention::{AsaCounter, SpikeStat, SsaTrace};
use crate::error::{Error, Result};
use crate::model::TransformerConfig;

/// Energy per operation in picojoules (45 nm CMOS figures).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyConstants {
    pub e_mac_pj: f64,
    pub e_ac_pj: f64,
}

impl Default for EnergyConstants {
    fn default() -> Self {
        Self { e_mac_pj: 4.6, e_ac_pj: 0.9 }
    }
}

impl EnergyConstants {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("e_mac_pj", self.e_mac_pj), ("e_ac_pj", self.e_ac_pj)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParam(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Closed-form MACs (and softmax exponentials) of the analog attention
/// blocks of `cfg` over one sequence of `n` positions.
///
/// Per block: `3·n·d²` for Q/K/V, `n²·d` for scores, `n²·d` for the value
/// mix and `n·d²` for the output projection.
pub fn count_asa_flops(cfg: &TransformerConfig, n: usize) -> Result<AsaCounter> {
    if n == 0 || n > cfg.block_size {
        return Err(Error::InvalidParam(format!("sequence length must lie in 1..={}, got {n}", cfg.block_size)));
    }
    let (n, d, l) = (n as u64, cfg.d_model as u64, cfg.n_layer as u64);
    Ok(AsaCounter {
        mac: l * (3 * n * d * d + 2 * n * n * d + n * d * d),
        exp: l * cfg.n_head as u64 * n * n,
    })
}

/// Expected accumulates of one stage: `inputs × T × rate × fan-out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEstimate {
    pub stage: String,
    pub inputs: f64,
    pub rate: f64,
    pub ops_per_spike: f64,
    pub estimate: f64,
    pub exact: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeOpCount {
    /// Accumulates actually performed.
    pub ac_count: u64,
    /// Spikes over spike opportunities across all attention populations.
    pub avg_rate: f64,
    /// Sum of the per-stage rate-based estimates.
    pub estimate: f64,
    /// `|estimate - ac_count| / ac_count` (0 when both are 0).
    pub relative_gap: f64,
    pub stages: Vec<StageEstimate>,
}

fn total_stat(t: &SsaTrace) -> SpikeStat {
    let mut s = SpikeStat::default();
    for p in [t.input, t.q, t.k, t.v, t.scores] {
        s.opportunities += p.opportunities;
        s.spikes += p.spikes;
    }
    s
}

/// Exact and rate-estimated accumulate counts of an instrumented run.
///
/// Each stage is estimated from mean rates alone: projections fan each
/// input spike out to `3·d` weights, coincidences need a Q and a K spike
/// on the same channel, value accumulates need a score spike and a V spike,
/// and every aggregated value spike touches one row of `W_o`. Bias
/// additions are deterministic.
pub fn count_spike_ops(trace: &SsaTrace) -> SpikeOpCount {
    let t = trace.steps as f64;
    let d = trace.d_model as f64;
    let heads = trace.n_heads.max(1) as f64;
    let dh = d / heads;
    let positions = trace.positions as f64;
    let (rq, rk, rv) = (trace.q.rate(), trace.k.rate(), trace.v.rate());
    let pairs = trace.score_pairs as f64 * heads;
    let value_est = pairs * t * trace.scores.rate() * dh * rv;
    let stage = |name: &str, inputs: f64, rate: f64, fan: f64, exact: u64| StageEstimate {
        stage: name.to_string(),
        inputs,
        rate,
        ops_per_spike: fan,
        estimate: inputs * t * rate * fan,
        exact,
    };
    let stages = vec![
        stage("projection", positions * d, trace.input.rate(), 3.0 * d, trace.projection_ac),
        stage("projection_bias", positions * 3.0 * d, 1.0, 1.0, trace.projection_bias_ac),
        stage("score", pairs * dh, rq * rk, 1.0, trace.score_ac),
        stage("value", pairs, trace.scores.rate(), dh * rv, trace.value_ac),
        StageEstimate {
            stage: "output".into(),
            inputs: value_est,
            rate: 1.0,
            ops_per_spike: d,
            estimate: value_est * d,
            exact: trace.output_ac,
        },
        stage("output_bias", positions * d, 1.0, 1.0, trace.output_bias_ac),
    ];
    let ac_count = trace.total_ac();
    let estimate: f64 = stages.iter().map(|s| s.estimate).sum();
    let relative_gap = if ac_count == 0 {
        if estimate == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (estimate - ac_count as f64).abs() / ac_count as f64
    };
    SpikeOpCount {
        ac_count,
        avg_rate: total_stat(trace).rate(),
        estimate,
        relative_gap,
        stages,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounters {
    pub mac_count: u64,
    /// Softmax exponentials of the analog path.
    pub exp_count: u64,
    pub ac_count: u64,
    pub spike_opportunities: u64,
    pub spikes: u64,
}

impl OpCounters {
    pub fn from_runs(asa: &AsaCounter, ssa: &SsaTrace) -> Self {
        let s = total_stat(ssa);
        Self {
            mac_count: asa.mac,
            exp_count: asa.exp,
            ac_count: ssa.total_ac(),
            spike_opportunities: s.opportunities,
            spikes: s.spikes,
        }
    }

    pub fn avg_rate(&self) -> f64 {
        SpikeStat {
            opportunities: self.spike_opportunities,
            spikes: self.spikes,
        }
        .rate()
    }

    pub fn merge(&mut self, o: &OpCounters) {
        self.mac_count += o.mac_count;
        self.exp_count += o.exp_count;
        self.ac_count += o.ac_count;
        self.spike_opportunities += o.spike_opportunities;
        self.spikes += o.spikes;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub e_mac_pj: f64,
    pub e_ac_pj: f64,
    pub mac_count: u64,
    pub exp_count: u64,
    pub ac_count: u64,
    pub avg_spike_rate: f64,
    pub e_asa_pj: f64,
    /// Exponentials priced at the MAC energy, kept out of `e_asa_pj`.
    pub e_softmax_pj: f64,
    pub e_ssa_pj: f64,
    pub e_asa_uj: f64,
    pub e_ssa_uj: f64,
    /// `1 - E_SSA / E_ASA`.
    pub reduction: f64,
}

pub fn estimate(c: &OpCounters, k: &EnergyConstants) -> Result<EnergyReport> {
    k.validate()?;
    let e_asa = k.e_mac_pj * c.mac_count as f64;
    let e_ssa = k.e_ac_pj * c.ac_count as f64;
    Ok(EnergyReport {
        e_mac_pj: k.e_mac_pj,
        e_ac_pj: k.e_ac_pj,
        mac_count: c.mac_count,
        exp_count: c.exp_count,
        ac_count: c.ac_count,
        avg_spike_rate: c.avg_rate(),
        e_asa_pj: e_asa,
        e_softmax_pj: k.e_mac_pj * c.exp_count as f64,
        e_ssa_pj: e_ssa,
        e_asa_uj: e_asa * 1e-6,
        e_ssa_uj: e_ssa * 1e-6,
        reduction: if e_asa > 0.0 { 1.0 - e_ssa / e_asa } else { 0.0 },
    })
}

impl EnergyReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn csv_header() -> &'static str {
        "e_mac_pj,e_ac_pj,mac_count,exp_count,ac_count,avg_spike_rate,e_asa_pj,e_softmax_pj,e_ssa_pj,reduction"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.e_mac_pj,
            self.e_ac_pj,
            self.mac_count,
            self.exp_count,
            self.ac_count,
            self.avg_spike_rate,
            self.e_asa_pj,
            self.e_softmax_pj,
            self.e_ssa_pj,
            self.reduction
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{asa_forward_counted, score_neuron_params, ssa_forward, AttentionWeights};
    use crate::neuron::{NeuronParams, SpikeTrain};
    use ndarray::{Array2, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn weights(d: usize, heads: usize, rng: &mut ChaCha8Rng) -> AttentionWeights {
        let mut g = || Array2::from_shape_fn((d, d), |_| rng.random_range(-0.5..0.5));
        AttentionWeights::new(g(), g(), g(), g(), heads).unwrap()
    }

    #[test]
    fn single_position_single_channel() {
        let cfg = TransformerConfig::new(1, 1, 1, 4, 3);
        assert_eq!(count_asa_flops(&cfg, 1).unwrap(), AsaCounter { mac: 6, exp: 1 });
        assert!(count_asa_flops(&cfg, 5).is_err());
        assert!(count_asa_flops(&cfg, 0).is_err());
    }

    #[test]
    fn quadratic_terms_scale_by_four() {
        let cfg = TransformerConfig::new(1, 2, 8, 64, 3);
        let quad = |n: usize| {
            let total = count_asa_flops(&cfg, n).unwrap().mac;
            total - 4 * (n * 64) as u64
        };
        assert_eq!(quad(20), 4 * quad(10));
    }

    #[test]
    fn closed_form_matches_instrumented_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (d, heads, n) in [(8, 2, 5), (12, 3, 7), (4, 1, 1)] {
            let w = weights(d, heads, &mut rng);
            let x = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
            let mut c = AsaCounter::default();
            asa_forward_counted(x.view(), &w, true, &mut c).unwrap();
            let cfg = TransformerConfig::new(1, heads, d, n, 3);
            assert_eq!(count_asa_flops(&cfg, n).unwrap(), c);
        }
    }

    #[test]
    fn silent_trace_costs_nothing_but_biases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut w = weights(4, 2, &mut rng);
        for b in [&mut w.b_q, &mut w.b_k, &mut w.b_v] {
            b.fill(0.0);
        }
        let s = SpikeTrain::zeros(5, 3, 4);
        let np = NeuronParams::default();
        let (_, _, tr) = ssa_forward(&s, &w, &np, &score_neuron_params(2, &np), true).unwrap();
        let c = count_spike_ops(&tr);
        assert_eq!(c.ac_count, tr.projection_bias_ac + tr.output_bias_ac);
        assert_eq!(tr.projection_ac + tr.score_ac + tr.value_ac + tr.output_ac, 0);
        assert_eq!(c.relative_gap, 0.0);
        let zero = estimate(&OpCounters::default(), &EnergyConstants::default()).unwrap();
        assert_eq!(zero.e_ssa_pj, 0.0);
    }

    #[test]
    fn saturated_input_touches_every_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = weights(6, 2, &mut rng);
        let s = SpikeTrain::from_values(Array3::from_elem((4, 3, 6), 1)).unwrap();
        let np = NeuronParams::default();
        let (_, _, tr) = ssa_forward(&s, &w, &np, &score_neuron_params(3, &np), true).unwrap();
        assert_eq!(tr.projection_ac, 4 * 3 * 6 * 3 * 6);
        let c = count_spike_ops(&tr);
        let proj = &c.stages[0];
        assert_eq!(proj.estimate, proj.exact as f64);
    }

    #[test]
    fn energy_examples() {
        let k = EnergyConstants::default();
        let r = estimate(&OpCounters { mac_count: 1000, ..Default::default() }, &k).unwrap();
        assert!((r.e_asa_pj - 4600.0).abs() < 1e-9);
        let r = estimate(&OpCounters { ac_count: 1000, ..Default::default() }, &k).unwrap();
        assert!((r.e_ssa_pj - 900.0).abs() < 1e-9);
        let r = estimate(&OpCounters { mac_count: 1000, ac_count: 1000, ..Default::default() }, &k).unwrap();
        assert!((r.reduction - (1.0 - 0.9 / 4.6)).abs() < 1e-12);
        assert!(estimate(&OpCounters::default(), &EnergyConstants { e_mac_pj: 0.0, e_ac_pj: 1.0 }).is_err());
        assert!(r.csv_row().split(',').count() == EnergyReport::csv_header().split(',').count());
    }
}
