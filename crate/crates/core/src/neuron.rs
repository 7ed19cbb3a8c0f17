//! Integrate-and-fire neuron layers.
//!
//! Membrane dynamics are integrated with a unit time step: each step the
//! membrane decays (leaky mode only), receives the step's input current, and
//! is compared against a symmetric threshold. Bipolar layers emit `-1` when
//! the membrane falls to `-v_th`; unipolar layers only ever emit `0`/`1`.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, ArrayViewMut2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative slack on threshold comparisons. Accumulating `k/T`-sized
/// currents in floating point can land one ulp short of the threshold; the
/// slack keeps exact-grid inputs firing on schedule.
pub const THRESHOLD_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ResetMode {
    /// `v -= s * v_th`: residual charge carries over to the next step.
    #[default]
    Subtract,
    /// `v = 0` wherever a spike was emitted.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeuronParams {
    pub threshold: f64,
    /// Membrane time constant in steps. `None` disables the leak (pure IF).
    pub leak_tau: Option<f64>,
    pub reset: ResetMode,
    pub bipolar: bool,
}

impl Default for NeuronParams {
    fn default() -> Self {
        Self {
            threshold: 1.0,
            leak_tau: None,
            reset: ResetMode::Subtract,
            bipolar: true,
        }
    }
}

impl NeuronParams {
    pub fn bipolar_if(threshold: f64) -> Self {
        Self {
            threshold,
            ..Self::default()
        }
    }

    pub fn unipolar_if(threshold: f64) -> Self {
        Self {
            threshold,
            bipolar: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold.is_finite() && self.threshold > 0.0) {
            return Err(Error::InvalidParam(format!(
                "neuron threshold must be positive, got {}",
                self.threshold
            )));
        }
        if let Some(tau) = self.leak_tau {
            if !(tau.is_finite() && tau > 0.0) {
                return Err(Error::InvalidParam(format!(
                    "leak time constant must be positive, got {tau}"
                )));
            }
        }
        Ok(())
    }

    /// Per-step membrane retention factor, `exp(-1/tau)` or 1 without leak.
    pub fn decay(&self) -> f64 {
        self.leak_tau.map_or(1.0, |tau| (-1.0 / tau).exp())
    }

    #[inline]
    pub(crate) fn fire(&self, v: f64) -> i8 {
        let th = self.threshold * (1.0 - THRESHOLD_TOLERANCE);
        if v >= th {
            1
        } else if self.bipolar && v <= -th {
            -1
        } else {
            0
        }
    }

    #[inline]
    pub(crate) fn after_spike(&self, v: f64, s: i8) -> f64 {
        match (s, self.reset) {
            (0, _) => v,
            (_, ResetMode::Subtract) => v - f64::from(s) * self.threshold,
            (_, ResetMode::Zero) => 0.0,
        }
    }
}

/// Ternary spike tensor indexed by `(step, position, channel)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpikeTrain {
    values: Array3<i8>,
}

impl SpikeTrain {
    pub fn zeros(steps: usize, positions: usize, channels: usize) -> Self {
        Self {
            values: Array3::zeros((steps, positions, channels)),
        }
    }

    /// Wrap raw values, rejecting anything outside `{-1, 0, 1}`.
    pub fn from_values(values: Array3<i8>) -> Result<Self> {
        if values.len_of(Axis(0)) == 0 {
            return Err(Error::InvalidParam("spike train needs at least one step".into()));
        }
        if values.iter().any(|&s| !(-1..=1).contains(&s)) {
            return Err(Error::InvalidParam("spike values must lie in {-1, 0, 1}".into()));
        }
        Ok(Self { values })
    }

    pub fn steps(&self) -> usize {
        self.values.len_of(Axis(0))
    }

    pub fn positions(&self) -> usize {
        self.values.len_of(Axis(1))
    }

    pub fn channels(&self) -> usize {
        self.values.len_of(Axis(2))
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.steps(), self.positions(), self.channels()]
    }

    pub fn values(&self) -> ArrayView3<'_, i8> {
        self.values.view()
    }

    pub fn step(&self, t: usize) -> ArrayView2<'_, i8> {
        self.values.index_axis(Axis(0), t)
    }

    pub(crate) fn step_mut(&mut self, t: usize) -> ArrayViewMut2<'_, i8> {
        self.values.index_axis_mut(Axis(0), t)
    }

    pub fn into_values(self) -> Array3<i8> {
        self.values
    }

    pub fn is_unipolar(&self) -> bool {
        self.values.iter().all(|&s| s >= 0)
    }

    /// Number of nonzero entries over the whole window.
    pub fn spike_count(&self) -> u64 {
        self.values.iter().filter(|&&s| s != 0).count() as u64
    }

    /// Signed spike count per `(position, channel)`.
    pub fn signed_counts(&self) -> Array2<i64> {
        self.values
            .map(|&s| i64::from(s))
            .sum_axis(Axis(0))
    }

    /// Signed mean over the time window, in `[-1, 1]`.
    pub fn rates(&self) -> Array2<f64> {
        let t = self.steps() as f64;
        self.signed_counts().mapv(|c| c as f64 / t)
    }
}

/// Membrane state of one spiking layer over `(position, channel)`.
#[derive(Debug, Clone)]
pub struct NeuronLayerState {
    v_mem: Array2<f64>,
    params: NeuronParams,
}

impl NeuronLayerState {
    pub fn new(params: NeuronParams, positions: usize, channels: usize) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            v_mem: Array2::zeros((positions, channels)),
            params,
        })
    }

    pub fn params(&self) -> &NeuronParams {
        &self.params
    }

    pub fn v_mem(&self) -> ArrayView2<'_, f64> {
        self.v_mem.view()
    }

    pub fn reset(&mut self) {
        self.v_mem.fill(0.0);
    }

    /// Advance one step, writing spikes into `out`.
    pub fn step_into(&mut self, current: ArrayView2<'_, f64>, mut out: ArrayViewMut2<'_, i8>) -> Result<()> {
        if current.dim() != self.v_mem.dim() {
            let (p, c) = self.v_mem.dim();
            let (cp, cc) = current.dim();
            return Err(Error::shape("neuron_step current", &[p, c], &[cp, cc]));
        }
        if current.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("neuron input current"));
        }
        let p = self.params;
        let decay = p.decay();
        let leaky = p.leak_tau.is_some();
        Zip::from(&mut self.v_mem)
            .and(&current)
            .and(&mut out)
            .for_each(|v, &i, s| {
                let mut vm = if leaky { *v * decay } else { *v };
                vm += i;
                let spike = p.fire(vm);
                *v = p.after_spike(vm, spike);
                *s = spike;
            });
        Ok(())
    }
}

/// One simulation step of a layer: integrate `current`, emit spikes, reset.
pub fn neuron_step(state: &mut NeuronLayerState, current: ArrayView2<'_, f64>) -> Result<Array2<i8>> {
    let mut out = Array2::zeros(state.v_mem.dim());
    state.step_into(current, out.view_mut())?;
    Ok(out)
}

/// Zero the membrane. Idempotent.
pub fn reset(state: &mut NeuronLayerState) {
    state.reset();
}

/// Simulate a freshly reset layer over a `(T, positions, channels)` current
/// tensor. Returns the spike train and the signed rates (count / T).
pub fn run_window(params: NeuronParams, currents: ArrayView3<'_, f64>) -> Result<(SpikeTrain, Array2<f64>)> {
    let (steps, positions, channels) = currents.dim();
    if steps == 0 {
        return Err(Error::InvalidParam("time window must be at least one step".into()));
    }
    let mut state = NeuronLayerState::new(params, positions, channels)?;
    let mut train = SpikeTrain::zeros(steps, positions, channels);
    for t in 0..steps {
        state.step_into(currents.index_axis(Axis(0), t), train.step_mut(t))?;
    }
    let rates = train.rates();
    Ok((train, rates))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;

    fn constant(x: f64, steps: usize) -> Array3<f64> {
        Array3::from_elem((steps, 1, 1), x)
    }

    /// Hand simulation: cumulative charge, subtract one threshold per spike.
    fn hand_spike_steps(x: f64, steps: usize) -> Vec<(usize, i8)> {
        let mut v = 0.0;
        let mut out = vec![];
        for t in 1..=steps {
            v += x;
            if v >= 1.0 - 1e-12 {
                v -= 1.0;
                out.push((t, 1));
            } else if v <= -1.0 + 1e-12 {
                v += 1.0;
                out.push((t, -1));
            }
        }
        out
    }

    fn fired(train: &SpikeTrain) -> Vec<(usize, i8)> {
        (0..train.steps())
            .filter_map(|t| {
                let s = train.step(t)[[0, 0]];
                (s != 0).then_some((t + 1, s))
            })
            .collect()
    }

    #[test]
    fn constant_point_three_fires_at_four_seven_ten() {
        let (train, rates) = run_window(NeuronParams::unipolar_if(1.0), constant(0.3, 10).view()).unwrap();
        assert_eq!(fired(&train), vec![(4, 1), (7, 1), (10, 1)]);
        assert_eq!(fired(&train), hand_spike_steps(0.3, 10));
        assert!((rates[[0, 0]] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn negative_half_fires_negative_every_other_step() {
        let (train, rates) = run_window(NeuronParams::bipolar_if(1.0), constant(-0.5, 4).view()).unwrap();
        assert_eq!(fired(&train), vec![(2, -1), (4, -1)]);
        assert_eq!(rates[[0, 0]], -0.5);
    }

    #[test]
    fn zero_current_leaves_subthreshold_state_alone() {
        let mut st = NeuronLayerState::new(NeuronParams::bipolar_if(1.0), 2, 2).unwrap();
        neuron_step(&mut st, Array2::from_elem((2, 2), 0.4).view()).unwrap();
        let before = st.v_mem().to_owned();
        let s = neuron_step(&mut st, Array2::zeros((2, 2)).view()).unwrap();
        assert!(s.iter().all(|&x| x == 0));
        assert_eq!(st.v_mem(), before.view());
    }

    #[test]
    fn saturating_current_fires_every_step() {
        let (_, rates) = run_window(NeuronParams::bipolar_if(1.0), constant(1.7, 9).view()).unwrap();
        assert_eq!(rates[[0, 0]], 1.0);
        let (_, rates) = run_window(NeuronParams::bipolar_if(1.0), constant(0.0, 9).view()).unwrap();
        assert_eq!(rates[[0, 0]], 0.0);
    }

    #[test]
    fn zero_reset_discards_residual() {
        let p = NeuronParams {
            reset: ResetMode::Zero,
            ..NeuronParams::unipolar_if(1.0)
        };
        let mut st = NeuronLayerState::new(p, 1, 1).unwrap();
        let s = neuron_step(&mut st, Array2::from_elem((1, 1), 1.5).view()).unwrap();
        assert_eq!(s[[0, 0]], 1);
        assert_eq!(st.v_mem()[[0, 0]], 0.0);
    }

    #[test]
    fn leak_decays_membrane() {
        let p = NeuronParams {
            leak_tau: Some(2.0),
            ..NeuronParams::unipolar_if(1.0)
        };
        let mut st = NeuronLayerState::new(p, 1, 1).unwrap();
        neuron_step(&mut st, Array2::from_elem((1, 1), 0.5).view()).unwrap();
        neuron_step(&mut st, Array2::zeros((1, 1)).view()).unwrap();
        assert!((st.v_mem()[[0, 0]] - 0.5 * (-0.5f64).exp()).abs() < 1e-15);
        // Leaky neurons need more than (1 - decay) * v_th per step to ever fire.
        let (_, r) = run_window(p, constant(0.3, 50).view()).unwrap();
        assert_eq!(r[[0, 0]], 0.0);
    }

    #[test]
    fn errors_are_structured() {
        let mut st = NeuronLayerState::new(NeuronParams::default(), 2, 3).unwrap();
        assert!(matches!(
            neuron_step(&mut st, Array2::zeros((3, 2)).view()),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            neuron_step(&mut st, Array2::from_elem((2, 3), f64::NAN).view()),
            Err(Error::NonFinite(_))
        ));
        assert!(run_window(NeuronParams::default(), Array3::zeros((0, 1, 1)).view()).is_err());
        assert!(NeuronParams::bipolar_if(0.0).validate().is_err());
        assert!(NeuronParams {
            leak_tau: Some(-1.0),
            ..NeuronParams::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn reset_is_idempotent_and_silences_layer() {
        let mut st = NeuronLayerState::new(NeuronParams::default(), 1, 3).unwrap();
        neuron_step(&mut st, Array2::from_elem((1, 3), 0.7).view()).unwrap();
        reset(&mut st);
        let once = st.v_mem().to_owned();
        reset(&mut st);
        assert_eq!(st.v_mem(), once.view());
        assert!(once.iter().all(|&v| v == 0.0));
        for _ in 0..5 {
            let s = neuron_step(&mut st, Array2::zeros((1, 3)).view()).unwrap();
            assert!(s.iter().all(|&x| x == 0));
        }
    }

    proptest! {
        #[test]
        fn rate_within_one_over_t(x in -1.0f64..=1.0, steps in 1usize..200) {
            let (_, r) = run_window(NeuronParams::bipolar_if(1.0), constant(x, steps).view()).unwrap();
            prop_assert!((r[[0, 0]] - x).abs() <= 1.0 / steps as f64 + 1e-12);
        }

        #[test]
        fn charge_is_conserved(currents in proptest::collection::vec(-2.0f64..2.0, 1..64)) {
            let steps = currents.len();
            let input = Array3::from_shape_vec((steps, 1, 1), currents.clone()).unwrap();
            let p = NeuronParams::bipolar_if(1.0);
            let mut st = NeuronLayerState::new(p, 1, 1).unwrap();
            let mut count = 0i64;
            for t in 0..steps {
                count += i64::from(neuron_step(&mut st, input.index_axis(Axis(0), t)).unwrap()[[0, 0]]);
            }
            let total: f64 = currents.iter().sum();
            prop_assert!((total - (st.v_mem()[[0, 0]] + count as f64)).abs() < 1e-9);
        }

        #[test]
        fn membrane_stays_bounded(currents in proptest::collection::vec(-1.0f64..1.0, 1..64)) {
            let steps = currents.len();
            let max_in = currents.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let input = Array3::from_shape_vec((steps, 1, 1), currents).unwrap();
            let mut st = NeuronLayerState::new(NeuronParams::bipolar_if(1.0), 1, 1).unwrap();
            for t in 0..steps {
                neuron_step(&mut st, input.index_axis(Axis(0), t)).unwrap();
                prop_assert!(st.v_mem()[[0, 0]].abs() < 1.0 + max_in + 1e-12);
            }
        }

        #[test]
        fn rate_is_monotone(a in 0.0f64..1.5, b in 0.0f64..1.5, steps in 1usize..128) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let p = NeuronParams::unipolar_if(1.0);
            let (_, rl) = run_window(p, constant(lo, steps).view()).unwrap();
            let (_, rh) = run_window(p, constant(hi, steps).view()).unwrap();
            prop_assert!(rh[[0, 0]] >= rl[[0, 0]]);
        }

        #[test]
        fn simulation_is_deterministic(currents in proptest::collection::vec(-1.5f64..1.5, 12)) {
            let input = Array3::from_shape_vec((4, 1, 3), currents).unwrap();
            let a = run_window(NeuronParams::default(), input.view()).unwrap().0;
            let b = run_window(NeuronParams::default(), input.view()).unwrap().0;
            prop_assert_eq!(a, b);
        }
    }
}
