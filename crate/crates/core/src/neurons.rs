//! Spiking neuron models and surrogate spike derivatives.
//!
//! Every model follows the same three-phase step: charge the hidden potential
//! `h` from the carried potential `u` and the input current, fire where
//! `h >= threshold`, then hard-reset fired units to the model's reset
//! potential. The PLIF leak is parameterised by an unconstrained scalar `w`
//! with `beta = sigmoid(w)`, so any update of `w` keeps `0 < beta < 1`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Argument clamp for the EIF exponential term.
pub const EIF_EXP_CLAMP: f64 = 20.0;

const BETA_LOGIT_LIMIT: f64 = 30.0;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurrogateVariant {
    Sigmoid,
    Arctan,
}

/// Smooth stand-in for the Heaviside derivative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateKind {
    pub variant: SurrogateVariant,
    pub alpha: f64,
}

impl Default for SurrogateKind {
    fn default() -> Self {
        Self {
            variant: SurrogateVariant::Sigmoid,
            alpha: 4.0,
        }
    }
}

impl SurrogateKind {
    pub fn sigmoid(alpha: f64) -> Self {
        Self {
            variant: SurrogateVariant::Sigmoid,
            alpha,
        }
    }

    pub fn arctan(alpha: f64) -> Self {
        Self {
            variant: SurrogateVariant::Arctan,
            alpha,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha > 0.0 && self.alpha.is_finite() {
            Ok(())
        } else {
            Err(Error::config("surrogate_alpha", "must be finite and > 0"))
        }
    }

    /// Derivative of the smoothed step at `x = h - v_th`. Floored at the
    /// smallest positive normal so it never vanishes exactly.
    pub fn grad(&self, x: f64) -> f64 {
        let z = self.alpha * x;
        let g = match self.variant {
            SurrogateVariant::Sigmoid => {
                let e = (-z.abs()).exp();
                self.alpha * e / ((1.0 + e) * (1.0 + e))
            }
            SurrogateVariant::Arctan => self.alpha / (PI * (1.0 + z * z)),
        };
        if g.is_finite() {
            g.max(f64::MIN_POSITIVE)
        } else {
            f64::MIN_POSITIVE
        }
    }

    /// The smoothed step itself, whose derivative is [`SurrogateKind::grad`].
    pub fn primitive(&self, x: f64) -> f64 {
        let z = self.alpha * x;
        match self.variant {
            SurrogateVariant::Sigmoid => sigmoid(z),
            SurrogateVariant::Arctan => 0.5 + z.atan() / PI,
        }
    }
}

/// Veltkamp split of `a` into two halves with at most 26 significant bits.
fn split(a: f64) -> (f64, f64) {
    let c = 134_217_729.0 * a;
    let hi = c - (c - a);
    (hi, a - hi)
}

/// Product and its exact rounding error (Dekker). Falls back to `mul_add`
/// where the split could overflow; without hardware FMA that call is slow.
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    if a.abs() < 1e290 && b.abs() < 1e290 {
        let (ah, al) = split(a);
        let (bh, bl) = split(b);
        (p, ((ah * bh - p) + ah * bl + al * bh) + al * bl)
    } else {
        (p, a.mul_add(b, -p))
    }
}

/// `a*b + c*d` rounded toward negative infinity.
///
/// The threshold test `h >= v_th` on a round-down result agrees with the test
/// on the exact value for any representable `v_th`, so a neuron whose exact
/// potential approaches the threshold from below never fires on a rounding
/// artifact.
pub fn dot2_round_down(a: f64, b: f64, c: f64, d: f64) -> f64 {
    let (p, ep) = two_prod(a, b);
    let (q, eq) = two_prod(c, d);
    let s = p + q;
    // two-sum error of p + q
    let bb = s - p;
    let es = (p - (s - bb)) + (q - bb);
    let err = (ep + eq) + es;
    if s.is_finite() && err < 0.0 {
        s.next_down()
    } else {
        s
    }
}

pub fn surrogate_grad(kind: SurrogateKind, h: f64, v_th: f64) -> f64 {
    kind.grad(h - v_th)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlifParams {
    /// Unconstrained leak parameter; `beta = sigmoid(w)`.
    pub w: f64,
    pub v_th: f64,
    pub u_reset: f64,
}

impl Default for PlifParams {
    fn default() -> Self {
        Self {
            w: 0.0,
            v_th: 1.0,
            u_reset: 0.0,
        }
    }
}

impl PlifParams {
    pub fn from_beta(beta: f64, v_th: f64, u_reset: f64) -> Result<Self> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::config("beta_init", "must lie in (0, 1)"));
        }
        if !(v_th > u_reset) {
            return Err(Error::config("v_th", "must exceed u_reset"));
        }
        Ok(Self {
            w: beta_to_logit(beta),
            v_th,
            u_reset,
        })
    }

    pub fn beta(&self) -> f64 {
        logit_to_beta(self.w)
    }

    /// `tau = 1 / (1 - beta)`, always > 1.
    pub fn tau(&self) -> f64 {
        1.0 / (1.0 - self.beta())
    }
}

pub fn beta_to_logit(beta: f64) -> f64 {
    (beta / (1.0 - beta)).ln()
}

pub fn logit_to_beta(w: f64) -> f64 {
    sigmoid(w.clamp(-BETA_LOGIT_LIMIT, BETA_LOGIT_LIMIT))
}

/// `d beta / d w`, zero where the logit is clamped.
pub fn logit_to_beta_grad(w: f64) -> f64 {
    if w.abs() >= BETA_LOGIT_LIMIT {
        0.0
    } else {
        let b = sigmoid(w);
        b * (1.0 - b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QifParams {
    pub v_th: f64,
    pub u_reset: f64,
    pub u_rest: f64,
    pub u_c: f64,
    pub tau: f64,
}

impl Default for QifParams {
    fn default() -> Self {
        Self {
            v_th: 1.0,
            u_reset: 0.0,
            u_rest: 0.0,
            u_c: 0.8,
            tau: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EifParams {
    pub v_th: f64,
    pub u_reset: f64,
    pub u_rest: f64,
    pub delta_t: f64,
    pub theta_t: f64,
    pub tau: f64,
}

impl Default for EifParams {
    fn default() -> Self {
        Self {
            v_th: 1.0,
            u_reset: 0.0,
            u_rest: 0.0,
            delta_t: 0.5,
            theta_t: 0.8,
            tau: 2.0,
        }
    }
}

/// Regular-spiking constants by default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IzhikevichParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub v_peak: f64,
}

impl Default for IzhikevichParams {
    fn default() -> Self {
        Self {
            a: 0.02,
            b: 0.2,
            c: -65.0,
            d: 8.0,
            v_peak: 30.0,
        }
    }
}

impl IzhikevichParams {
    /// Stable fixed point `(v, recovery)` under zero input.
    pub fn rest(&self) -> (f64, f64) {
        // 0.04 v^2 + (5 - b) v + 140 = 0, lower root
        let p = 5.0 - self.b;
        let disc = (p * p - 4.0 * 0.04 * 140.0).max(0.0);
        let v = (-p - disc.sqrt()) / (2.0 * 0.04);
        (v, self.b * v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeuronKind {
    Plif,
    Lif,
    Qif,
    Eif,
    Izhikevich,
}

impl NeuronKind {
    pub const ALL: [NeuronKind; 5] = [
        NeuronKind::Plif,
        NeuronKind::Lif,
        NeuronKind::Qif,
        NeuronKind::Eif,
        NeuronKind::Izhikevich,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            NeuronKind::Plif => "plif",
            NeuronKind::Lif => "lif",
            NeuronKind::Qif => "qif",
            NeuronKind::Eif => "eif",
            NeuronKind::Izhikevich => "izhikevich",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
    }
}

impl std::fmt::Display for NeuronKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Step rule of one neuron population. PLIF and LIF share the leaky update;
/// only PLIF exposes its leak to the optimiser.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Dynamics {
    Plif(PlifParams),
    Lif(PlifParams),
    Qif(QifParams),
    Eif(EifParams),
    Izhikevich(IzhikevichParams),
}

/// Hidden potential after charging, with its partial derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Charge {
    pub h: f64,
    pub dh_du: f64,
    pub dh_daux: f64,
    pub dh_dinput: f64,
    /// Derivative with respect to the leak `beta` (leaky models only).
    pub dh_dbeta: f64,
    pub clamped: bool,
}

impl Dynamics {
    pub fn kind(&self) -> NeuronKind {
        match self {
            Dynamics::Plif(_) => NeuronKind::Plif,
            Dynamics::Lif(_) => NeuronKind::Lif,
            Dynamics::Qif(_) => NeuronKind::Qif,
            Dynamics::Eif(_) => NeuronKind::Eif,
            Dynamics::Izhikevich(_) => NeuronKind::Izhikevich,
        }
    }

    pub fn threshold(&self) -> f64 {
        match self {
            Dynamics::Plif(p) | Dynamics::Lif(p) => p.v_th,
            Dynamics::Qif(p) => p.v_th,
            Dynamics::Eif(p) => p.v_th,
            Dynamics::Izhikevich(p) => p.v_peak,
        }
    }

    pub fn reset(&self) -> f64 {
        match self {
            Dynamics::Plif(p) | Dynamics::Lif(p) => p.u_reset,
            Dynamics::Qif(p) => p.u_reset,
            Dynamics::Eif(p) => p.u_reset,
            Dynamics::Izhikevich(p) => p.c,
        }
    }

    pub fn has_aux(&self) -> bool {
        matches!(self, Dynamics::Izhikevich(_))
    }

    /// Potential and recovery variable at the start of a sequence.
    pub fn initial(&self) -> (f64, f64) {
        match self {
            Dynamics::Izhikevich(p) => p.rest(),
            other => (other.reset(), 0.0),
        }
    }

    pub fn initial_state(&self, n: usize) -> NeuronState {
        let (u, aux) = self.initial();
        NeuronState {
            u: vec![u; n],
            aux: self.has_aux().then(|| vec![aux; n]),
        }
    }

    /// Charges with an explicit leak, so layers can substitute a per-channel
    /// learned `beta` for the one stored in the parameters.
    pub fn charge_with_beta(&self, beta: f64, u: f64, aux: f64, input: f64) -> Charge {
        match self {
            Dynamics::Plif(_) | Dynamics::Lif(_) => Charge {
                h: dot2_round_down(beta, u, 1.0 - beta, input),
                dh_du: beta,
                dh_daux: 0.0,
                dh_dinput: 1.0 - beta,
                dh_dbeta: u - input,
                clamped: false,
            },
            Dynamics::Qif(p) => Charge {
                h: u + (u - p.u_rest) * (u - p.u_c) / p.tau + input,
                dh_du: 1.0 + (2.0 * u - p.u_rest - p.u_c) / p.tau,
                dh_daux: 0.0,
                dh_dinput: 1.0,
                dh_dbeta: 0.0,
                clamped: false,
            },
            Dynamics::Eif(p) => {
                let arg = (u - p.theta_t) / p.delta_t;
                let clamped = arg > EIF_EXP_CLAMP;
                let e = arg.min(EIF_EXP_CLAMP).exp();
                let de = if clamped { 0.0 } else { e };
                Charge {
                    h: u + (-(u - p.u_rest) + p.delta_t * e + input) / p.tau,
                    dh_du: 1.0 + (-1.0 + de) / p.tau,
                    dh_daux: 0.0,
                    dh_dinput: 1.0 / p.tau,
                    dh_dbeta: 0.0,
                    clamped,
                }
            }
            Dynamics::Izhikevich(_) => Charge {
                h: u + 0.04 * u * u + 5.0 * u + 140.0 - aux + input,
                dh_du: 6.0 + 0.08 * u,
                dh_daux: -1.0,
                dh_dinput: 1.0,
                dh_dbeta: 0.0,
                clamped: false,
            },
        }
    }

    pub fn charge(&self, u: f64, aux: f64, input: f64) -> Charge {
        let beta = match self {
            Dynamics::Plif(p) | Dynamics::Lif(p) => p.beta(),
            _ => 0.0,
        };
        self.charge_with_beta(beta, u, aux, input)
    }

    /// Recovery-variable update given the pre-step potential and the (possibly
    /// soft) spike value. Returns `(aux', d aux'/du, d aux'/daux, d aux'/dspike)`.
    pub fn recovery(&self, u: f64, aux: f64, spike: f64) -> (f64, f64, f64, f64) {
        match self {
            Dynamics::Izhikevich(p) => (
                aux + p.a * (p.b * u - aux) + spike * p.d,
                p.a * p.b,
                1.0 - p.a,
                p.d,
            ),
            _ => (0.0, 0.0, 0.0, 0.0),
        }
    }

    /// One discrete step over a population.
    pub fn step(&self, state: &NeuronState, input: &[f64]) -> Result<StepOutput> {
        if state.u.len() != input.len() {
            return Err(Error::Shape {
                op: "neuron step",
                expected: vec![state.u.len()],
                actual: vec![input.len()],
            });
        }
        if self.has_aux() && state.aux.as_ref().map(Vec::len) != Some(state.u.len()) {
            return Err(Error::InvalidArgument(
                "izhikevich state needs a recovery variable per unit".into(),
            ));
        }
        let threshold = self.threshold();
        let reset = self.reset();
        let n = input.len();
        let mut spikes = vec![0u8; n];
        let mut u_next = vec![0.0; n];
        let mut aux_next = state.aux.as_ref().map(|_| vec![0.0; n]);
        let mut clamped = 0;
        for i in 0..n {
            let aux = state.aux.as_ref().map_or(0.0, |a| a[i]);
            let ch = self.charge(state.u[i], aux, input[i]);
            if !ch.h.is_finite() {
                return Err(Error::Overflow { step: 0 });
            }
            clamped += usize::from(ch.clamped);
            let fired = ch.h >= threshold;
            spikes[i] = u8::from(fired);
            u_next[i] = if fired { reset } else { ch.h };
            if let Some(a) = aux_next.as_mut() {
                a[i] = self.recovery(state.u[i], aux, f64::from(spikes[i])).0;
            }
        }
        Ok(StepOutput {
            spikes,
            state: NeuronState {
                u: u_next,
                aux: aux_next,
            },
            clamped,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuronState {
    pub u: Vec<f64>,
    /// Recovery variable, Izhikevich only.
    pub aux: Option<Vec<f64>>,
}

impl NeuronState {
    pub fn resting(n: usize, u_reset: f64) -> Self {
        Self {
            u: vec![u_reset; n],
            aux: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub spikes: Vec<u8>,
    pub state: NeuronState,
    /// Units whose EIF exponential hit the clamp this step.
    pub clamped: usize,
}

pub fn plif_step(state: &NeuronState, params: &PlifParams, input: &[f64]) -> Result<StepOutput> {
    Dynamics::Plif(*params).step(state, input)
}

pub fn lif_step(state: &NeuronState, params: &PlifParams, input: &[f64]) -> Result<StepOutput> {
    Dynamics::Lif(*params).step(state, input)
}

pub fn qif_step(state: &NeuronState, params: &QifParams, input: &[f64]) -> Result<StepOutput> {
    Dynamics::Qif(*params).step(state, input)
}

pub fn eif_step(state: &NeuronState, params: &EifParams, input: &[f64]) -> Result<StepOutput> {
    Dynamics::Eif(*params).step(state, input)
}

pub fn izhikevich_step(
    state: &NeuronState,
    params: &IzhikevichParams,
    input: &[f64],
) -> Result<StepOutput> {
    Dynamics::Izhikevich(*params).step(state, input)
}

/// Runs a population over a sequence of input vectors. Overflow errors carry
/// the index of the failing step.
pub fn simulate(
    dynamics: &Dynamics,
    initial: NeuronState,
    inputs: &[Vec<f64>],
) -> Result<(Vec<Vec<u8>>, NeuronState)> {
    let mut state = initial;
    let mut trains = Vec::with_capacity(inputs.len());
    for (t, input) in inputs.iter().enumerate() {
        let out = dynamics.step(&state, input).map_err(|e| match e {
            Error::Overflow { .. } => Error::Overflow { step: t },
            other => other,
        })?;
        trains.push(out.spikes);
        state = out.state;
    }
    Ok((trains, state))
}

/// `sum_{s} beta^(n-1-s) (1 - beta) z_s` for a spike-free stretch starting
/// from a zero carried potential.
pub fn plif_unroll_closed_form(beta: f64, z: &[f64]) -> f64 {
    let n = z.len();
    z.iter()
        .enumerate()
        .map(|(s, &zs)| beta.powi((n - 1 - s) as i32) * (1.0 - beta) * zs)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn half() -> PlifParams {
        PlifParams::from_beta(0.5, 1.0, 0.0).unwrap()
    }

    #[test]
    fn beta_half_is_zero_logit() {
        let p = half();
        assert_eq!(p.w, 0.0);
        assert_eq!(p.beta(), 0.5);
        assert_eq!(p.tau(), 2.0);
    }

    #[test]
    fn plif_fires_and_resets() {
        let out = plif_step(&NeuronState::resting(1, 0.0), &half(), &[2.0]).unwrap();
        assert_eq!(out.spikes, vec![1]);
        assert_eq!(out.state.u, vec![0.0]);
    }

    #[test]
    fn plif_unit_input_never_reaches_threshold() {
        let p = half();
        let mut state = NeuronState::resting(1, 0.0);
        for _ in 0..10_000 {
            let out = plif_step(&state, &p, &[1.0]).unwrap();
            assert_eq!(out.spikes[0], 0);
            state = out.state;
        }
        assert!(state.u[0] < 1.0);
    }

    #[test]
    fn zero_input_keeps_every_model_silent() {
        let models = [
            Dynamics::Plif(half()),
            Dynamics::Lif(half()),
            Dynamics::Qif(QifParams::default()),
            Dynamics::Eif(EifParams::default()),
            Dynamics::Izhikevich(IzhikevichParams::default()),
        ];
        for m in models {
            let inputs = vec![vec![0.0; 3]; 1000];
            let (trains, _) = simulate(&m, m.initial_state(3), &inputs).unwrap();
            assert!(
                trains.iter().flatten().all(|&s| s == 0),
                "{:?} spiked at rest",
                m.kind()
            );
        }
    }

    #[test]
    fn izhikevich_regular_spiking_fires() {
        let m = Dynamics::Izhikevich(IzhikevichParams::default());
        let inputs = vec![vec![10.0]; 1000];
        let (trains, _) = simulate(&m, m.initial_state(1), &inputs).unwrap();
        assert!(trains.iter().any(|s| s[0] == 1));
    }

    #[test]
    fn izhikevich_rest_is_fixed_point() {
        let (v, u) = IzhikevichParams::default().rest();
        assert!((v + 70.0).abs() < 1e-9);
        assert!((u + 14.0).abs() < 1e-9);
    }

    #[test]
    fn lif_matches_plif_with_same_tau() {
        let p = PlifParams::from_beta(0.7, 1.0, 0.0).unwrap();
        let inputs: Vec<Vec<f64>> = (0..200)
            .map(|t| vec![(t as f64 * 0.37).sin() * 2.5, ((t * 7 % 13) as f64) / 5.0])
            .collect();
        let a = simulate(&Dynamics::Plif(p), NeuronState::resting(2, 0.0), &inputs).unwrap();
        let b = simulate(&Dynamics::Lif(p), NeuronState::resting(2, 0.0), &inputs).unwrap();
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let err = plif_step(&NeuronState::resting(2, 0.0), &half(), &[1.0]).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn qif_divergence_reports_step() {
        // A reset far above threshold keeps pushing the quadratic term up.
        let p = QifParams {
            v_th: f64::INFINITY,
            ..QifParams::default()
        };
        let m = Dynamics::Qif(p);
        let inputs = vec![vec![5.0]; 100];
        match simulate(&m, m.initial_state(1), &inputs) {
            Err(Error::Overflow { step }) => assert!(step > 0 && step < 100),
            other => panic!("expected overflow, got {other:?}"),
        }
    }

    #[test]
    fn eif_clamp_is_reported() {
        let m = Dynamics::Eif(EifParams {
            v_th: f64::MAX,
            ..EifParams::default()
        });
        let state = NeuronState {
            u: vec![50.0, 0.0],
            aux: None,
        };
        let out = m.step(&state, &[0.0, 0.0]).unwrap();
        assert_eq!(out.clamped, 1);
    }

    #[test]
    fn round_down_dot_is_exact_or_one_below() {
        assert_eq!(dot2_round_down(0.5, 0.0, 0.5, 2.0), 1.0);
        let u = 1.0 - f64::EPSILON / 2.0;
        // exact 1 - 2^-54 is not representable; round-to-nearest gives 1.0
        assert_eq!(0.5 * u + 0.5, 1.0);
        assert_eq!(dot2_round_down(0.5, u, 0.5, 1.0), u);
        // exact value of 0.1*0.3 + 0.7*0.9 in binary lies just below the double 0.66
        assert_eq!(dot2_round_down(0.1, 0.3, 0.7, 0.9), 0.66f64.next_down());
        assert_eq!(dot2_round_down(0.25, 3.0, 0.5, 0.5), 1.0);
    }

    #[test]
    fn closed_form_examples() {
        assert_eq!(plif_unroll_closed_form(0.5, &[3.0]), 1.5);
        assert_eq!(plif_unroll_closed_form(0.5, &[1.0, 1.0, 1.0]), 0.875);
    }

    #[test]
    fn surrogate_values() {
        let s = SurrogateKind::sigmoid(1.0);
        assert_eq!(surrogate_grad(s, 1.0, 1.0), 0.25);
        let a = SurrogateKind::arctan(2.0);
        assert!((surrogate_grad(a, 1.0, 1.0) - 2.0 / PI).abs() < 1e-15);
        for k in [s, a, SurrogateKind::default()] {
            assert!(k.grad(1e300) > 0.0 && k.grad(1e300) < 1e-200);
            assert!(k.grad(-1e300) > 0.0 && k.grad(-1e300) < 1e-200);
            assert!(k.grad(f64::INFINITY).is_finite());
            for d in [0.01, 0.3, 2.0, 17.0] {
                assert_eq!(k.grad(d), k.grad(-d));
                assert!(k.grad(d) < k.grad(0.0));
            }
        }
    }

    #[test]
    fn surrogate_grad_is_derivative_of_primitive() {
        for k in [SurrogateKind::sigmoid(4.0), SurrogateKind::arctan(3.0)] {
            for x in [-1.3, -0.2, 0.0, 0.4, 2.2] {
                let h = 1e-6;
                let fd = (k.primitive(x + h) - k.primitive(x - h)) / (2.0 * h);
                assert!((fd - k.grad(x)).abs() < 1e-8);
            }
        }
    }
}
