//! Reduced coordinates, single-input backstepping control laws and Lyapunov
//! certificates for cyclic competition networks driven through species 1.
//!
//! Indexing follows the biology: species are numbered `1..=N` in the public
//! helpers that take a species number, and vectors are 0-based (`eta[0]` is
//! the log-amplitude of species 1). The backstepping errors are
//! `z_1 = η_3 - η_2`, `z_i = η_{i+2} - z_{i-1}` and `z_{N-1} = η_1 - z_{N-2}`.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::equilibrium::Equilibrium;
use crate::error::{Error, Result};
use crate::grid::{AgeGrid, Kernel};
use crate::transport::{ControlSample, Controller, GeneralNetworkSpec, PopulationState};

/// Default small-denominator guard on `φ_1(z_{N-1})`.
pub const DEFAULT_EPSILON_Z: f64 = 1e-9;
/// Tolerance of the gain ratio pattern.
pub const GAIN_TOLERANCE: f64 = 1e-12;

/// Deviation map `φ(x) = λ (e^x - 1)`.
pub fn phi(lambda: f64, x: f64) -> f64 {
    lambda * x.exp_m1()
}

/// Relative entropy term `e^x - 1 - x` (nonnegative, zero only at 0).
fn entropy(x: f64) -> f64 {
    x.exp_m1() - x
}

/// Interaction integrals and equilibrium control seen by the reduced system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedSystem {
    /// `λ_i`, the intensity with which species `i` suppresses its prey at rest.
    pub lambdas: Vec<f64>,
    pub u_star: f64,
}

impl ReducedSystem {
    pub fn new(lambdas: Vec<f64>, u_star: f64) -> Result<Self> {
        if lambdas.len() < 3 {
            return Err(Error::Config(format!("need at least 3 species, got {}", lambdas.len())));
        }
        if lambdas.iter().any(|&l| !(l.is_finite() && l > 0.0)) {
            return Err(Error::Config("interaction integrals must be positive".into()));
        }
        if !(u_star.is_finite() && u_star > 0.0) {
            return Err(Error::Config(format!("equilibrium control must be positive, got {u_star}")));
        }
        Ok(Self { lambdas, u_star })
    }

    pub fn from_equilibrium(eq: &Equilibrium) -> Result<Self> {
        Self::new(eq.lambdas(), eq.u_star)
    }

    pub fn species(&self) -> usize {
        self.lambdas.len()
    }

    /// `λ_k` for species number `k` (1-based, taken mod N).
    pub fn lambda(&self, k: usize) -> f64 {
        let n = self.species();
        self.lambdas[(k + n - 1) % n]
    }

    /// `φ_k(x)` for species number `k`.
    pub fn phi(&self, k: usize, x: f64) -> f64 {
        phi(self.lambda(k), x)
    }
}

/// Gains, saturation bounds and guard of the backstepping controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub theta: f64,
    /// `c_1 .. c_{N-1}`.
    pub gains: Vec<f64>,
    /// `c_N`; the combined gain on the last error is `c_N + 1`.
    pub terminal_gain: f64,
    pub u_min: f64,
    pub u_max: f64,
    pub epsilon_z: f64,
}

/// Gains `c_i = λ_{i+2} / λ_{i+1}` for `i = 1..N-1` (indices mod N).
pub fn ratio_gains(lambdas: &[f64]) -> Vec<f64> {
    let n = lambdas.len();
    (1..n).map(|i| lambdas[(i + 1) % n] / lambdas[i]).collect()
}

impl ControllerConfig {
    /// Gains derived from the interaction integrals, saturation `[0, 10 u*]`.
    pub fn from_system(system: &ReducedSystem, theta: f64, terminal_gain: f64) -> Result<Self> {
        let cfg = Self {
            theta,
            gains: ratio_gains(&system.lambdas),
            terminal_gain,
            u_min: 0.0,
            u_max: 10.0 * system.u_star,
            epsilon_z: DEFAULT_EPSILON_Z,
        };
        cfg.validate(system)?;
        Ok(cfg)
    }

    pub fn from_equilibrium(eq: &Equilibrium, theta: f64, terminal_gain: f64) -> Result<Self> {
        Self::from_system(&ReducedSystem::from_equilibrium(eq)?, theta, terminal_gain)
    }

    pub fn species(&self) -> usize {
        self.gains.len() + 1
    }

    /// `c_i` for `i = 1..=N`, where `c_N` is the terminal gain.
    pub fn gain(&self, i: usize) -> f64 {
        if i == self.species() {
            self.terminal_gain
        } else {
            self.gains[i - 1]
        }
    }

    /// `c_N + 1`.
    pub fn combined_terminal_gain(&self) -> f64 {
        self.terminal_gain + 1.0
    }

    /// Largest relative deviation of the gains from the ratio pattern.
    pub fn gain_residual(&self, lambdas: &[f64]) -> f64 {
        ratio_gains(lambdas)
            .iter()
            .zip(&self.gains)
            .map(|(a, b)| ((a - b) / a).abs())
            .fold(0.0, f64::max)
    }

    pub fn validate(&self, system: &ReducedSystem) -> Result<()> {
        let mut errors = Vec::new();
        if self.species() != system.species() {
            errors.push(format!("{} gains for {} species", self.gains.len(), system.species()));
        } else if self.gain_residual(&system.lambdas) > GAIN_TOLERANCE {
            errors.push("gains do not follow the interaction ratio pattern".into());
        }
        if !(self.theta > 0.0) {
            errors.push(format!("theta must be positive, got {}", self.theta));
        }
        if self.gains.iter().any(|&c| !(c > 0.0)) || !(self.terminal_gain > 0.0) {
            errors.push("all gains must be positive".into());
        }
        if !(self.u_min < system.u_star && system.u_star < self.u_max) {
            errors.push(format!(
                "saturation [{}, {}] must contain u* = {} strictly",
                self.u_min, self.u_max, system.u_star
            ));
        }
        if !(self.epsilon_z > 0.0) {
            errors.push("epsilon_z must be positive".into());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errors))
        }
    }
}

/// Backstepping errors `z_1 .. z_{N-1}` from the log-amplitudes.
pub fn backstepping_errors(eta: &[f64]) -> Vec<f64> {
    let n = eta.len();
    let mut z = Vec::with_capacity(n - 1);
    let mut prev = eta[1];
    for i in 1..n - 1 {
        let zi = eta[i + 1] - prev;
        z.push(zi);
        prev = zi;
    }
    z.push(eta[0] - prev);
    z
}

/// Inverse of [`backstepping_errors`] given `η_2`.
pub fn eta_from_errors(eta2: f64, z: &[f64]) -> Vec<f64> {
    let n = z.len() + 1;
    let mut eta = vec![0.0; n];
    eta[1] = eta2;
    let mut prev = eta2;
    for i in 1..n - 1 {
        eta[i + 1] = z[i - 1] + prev;
        prev = z[i - 1];
    }
    eta[0] = z[n - 2] + prev;
    eta
}

/// Chain `w_0 = η_2, w_i = z_i`, convenient for the sums below.
fn chain(eta: &[f64]) -> Vec<f64> {
    let mut w = Vec::with_capacity(eta.len());
    w.push(eta[1]);
    w.extend(backstepping_errors(eta));
    w
}

/// Reduced description of a network state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedState {
    /// Log-amplitudes `η_1 .. η_N`.
    pub eta: Vec<f64>,
    /// Backstepping errors `z_1 .. z_{N-1}`.
    pub z: Vec<f64>,
    /// `psi[i][j] = ψ_i(t - a_j)`; empty when the shape deviation is ignored.
    pub psi: Vec<Vec<f64>>,
    pub u: Option<f64>,
    pub lyapunov: Option<f64>,
}

impl ReducedState {
    /// State with no shape deviation.
    pub fn from_eta(eta: Vec<f64>) -> Self {
        let z = backstepping_errors(&eta);
        Self { eta, z, psi: Vec::new(), u: None, lyapunov: None }
    }
}

/// Weighted amplitude `⟨π₀, x⟩` of each species.
fn weighted_amplitudes(state: &PopulationState, eq: &Equilibrium) -> Result<Vec<f64>> {
    if state.densities.len() != eq.species.len() {
        return Err(Error::Config(format!(
            "state has {} species, equilibrium {}",
            state.densities.len(),
            eq.species.len()
        )));
    }
    eq.species
        .iter()
        .zip(&state.densities)
        .enumerate()
        .map(|(i, (s, x))| {
            eq.grid.check_len(x.len(), "density")?;
            let num = eq.grid.trapezoid_product(&s.adjoint, x);
            let den = eq.grid.trapezoid_product(&s.adjoint, &s.profile);
            if !(num > 0.0 && den > 0.0) {
                return Err(Error::Transform(format!(
                    "weighted amplitude of species {} is not positive ({num:e})",
                    i + 1
                )));
            }
            Ok(num / den)
        })
        .collect()
}

/// Log-amplitudes `η_i = ln(⟨π₀ᵢ, xᵢ⟩ / ⟨π₀ᵢ, x*ᵢ⟩)`.
pub fn log_amplitudes(state: &PopulationState, eq: &Equilibrium) -> Result<Vec<f64>> {
    Ok(weighted_amplitudes(state, eq)?.into_iter().map(f64::ln).collect())
}

/// Maps a network state to reduced coordinates.
///
/// Nodes where the equilibrium profile underflows to zero carry no shape
/// information and are given `ψ = 0`.
pub fn to_reduced(state: &PopulationState, eq: &Equilibrium) -> Result<ReducedState> {
    let amplitudes = weighted_amplitudes(state, eq)?;
    let psi = eq
        .species
        .iter()
        .zip(&state.densities)
        .zip(&amplitudes)
        .map(|((s, x), &p)| {
            x.iter()
                .zip(&s.profile)
                .map(|(&xi, &xs)| if xs > 0.0 { xi / (xs * p) - 1.0 } else { 0.0 })
                .collect()
        })
        .collect();
    let eta: Vec<f64> = amplitudes.iter().map(|p| p.ln()).collect();
    let mut red = ReducedState::from_eta(eta);
    red.psi = psi;
    Ok(red)
}

/// Reconstructs densities `x_i(a) = x*_i(a) (1 + ψ_i) e^{η_i}`.
pub fn from_reduced(red: &ReducedState, eq: &Equilibrium, t: f64) -> Result<PopulationState> {
    let n = eq.species.len();
    if red.eta.len() != n {
        return Err(Error::Config(format!("reduced state has {} species, equilibrium {n}", red.eta.len())));
    }
    let densities = (0..n)
        .map(|i| {
            let scale = red.eta[i].exp();
            let profile = &eq.species[i].profile;
            match red.psi.get(i) {
                Some(psi) => {
                    eq.grid.check_len(psi.len(), "shape deviation")?;
                    if let Some(j) = psi.iter().position(|&p| !(p > -1.0)) {
                        return Err(Error::Domain(format!(
                            "shape deviation of species {} is {} <= -1 at age {}",
                            i + 1,
                            psi[j],
                            eq.grid.age(j)
                        )));
                    }
                    Ok(profile.iter().zip(psi).map(|(x, p)| x * (1.0 + p) * scale).collect())
                }
                None => Ok(profile.iter().map(|x| x * scale).collect()),
            }
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok(PopulationState { t, densities })
}

/// Pieces of the general control law `u = u* + (F + D) / φ_1(z_{N-1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct LawTerms {
    /// `φ_1(z_{N-1})`.
    pub pivot: f64,
    /// Drift part `F`.
    pub drift: f64,
    /// Damping part `D`; the target Lyapunov derivative is `-D`.
    pub damping: f64,
    /// Coefficient multiplying `φ_i(η_i)` in `F`, for `i = 1..=N`.
    pub coefficients: Vec<f64>,
}

/// Evaluates the drift, damping and pivot of the general-N law.
pub fn law_terms(system: &ReducedSystem, cfg: &ControllerConfig, eta: &[f64]) -> LawTerms {
    let n = system.species();
    let theta = cfg.theta;
    let w = chain(eta);
    let pivot = system.phi(1, w[n - 1]);
    // Shape terms on the chain: φ_2(η_2), then φ_{i+2}(z_i).
    let chain_phi = |i: usize| system.phi(i + 2, w[i]);
    let mut damping = theta * cfg.gain(1) * chain_phi(0).powi(2) + cfg.terminal_gain * pivot.powi(2);
    for i in 1..=n - 2 {
        damping += theta * cfg.gain(i + 1) * chain_phi(i).powi(2);
    }
    let mut coefficients = vec![0.0; n];
    coefficients[0] = pivot - theta * chain_phi(n - 2);
    coefficients[1] = -pivot;
    for k in 3..=n {
        let mut c = 0.0;
        for i in k.saturating_sub(3).max(1)..=n - 2 {
            let sign = if (i + k) % 2 == 0 { 1.0 } else { -1.0 };
            c += sign * chain_phi(i);
        }
        c *= theta;
        if k == 3 {
            c -= theta * chain_phi(0);
        }
        let parity = if (n - k).is_multiple_of(2) { 1.0 } else { -1.0 };
        c -= parity * pivot;
        coefficients[k - 1] = c;
    }
    let drift = coefficients
        .iter()
        .enumerate()
        .map(|(k, c)| c * system.phi(k + 1, eta[k]))
        .sum();
    LawTerms { pivot, drift, damping, coefficients }
}

/// Unclamped general-N law, or `None` when the pivot is below the guard.
pub fn control_general(system: &ReducedSystem, cfg: &ControllerConfig, eta: &[f64]) -> Option<f64> {
    let t = law_terms(system, cfg, eta);
    (t.pivot.abs() > cfg.epsilon_z).then(|| system.u_star + (t.drift + t.damping) / t.pivot)
}

/// Dedicated three-species law, written out in the shape terms.
pub fn control_three(system: &ReducedSystem, cfg: &ControllerConfig, eta: &[f64]) -> Result<Option<f64>> {
    if system.species() != 3 {
        return Err(Error::Config("the three-species law needs N = 3".into()));
    }
    let w = chain(eta);
    let (l1, l3) = (system.lambda(1), system.lambda(3));
    let p2 = system.phi(2, w[0]);
    let p3 = system.phi(3, w[1]);
    let p1 = system.phi(1, w[2]);
    if p1.abs() <= cfg.epsilon_z {
        return Ok(None);
    }
    let (c1, c2, th) = (cfg.gain(1), cfg.gain(2), cfg.theta);
    let u = system.u_star + cfg.combined_terminal_gain() * p1 - th * c2 / l1 * p3 * p3 + (c2 - 1.0 - th) * p3
        + c2 / l1 * p3 * p1
        - c1 / l3 * p3 * p2
        - (c1 + 1.0) * p2
        + th * p3 / p1 * (c1 / l3 * p3 * p2 - c1 / l3 * p2 * p2 + (c1 - 1.0) * p2 + p3);
    Ok(Some(u))
}

/// Dedicated four-species law, written out in the shape terms.
pub fn control_four(system: &ReducedSystem, cfg: &ControllerConfig, eta: &[f64]) -> Result<Option<f64>> {
    if system.species() != 4 {
        return Err(Error::Config("the four-species law needs N = 4".into()));
    }
    let w = chain(eta);
    let (l1, l3, l4) = (system.lambda(1), system.lambda(3), system.lambda(4));
    let p2 = system.phi(2, w[0]);
    let p3 = system.phi(3, w[1]);
    let p4 = system.phi(4, w[2]);
    let p1 = system.phi(1, w[3]);
    if p1.abs() <= cfg.epsilon_z {
        return Ok(None);
    }
    let (c1, c2, c3, th) = (cfg.gain(1), cfg.gain(2), cfg.gain(3), cfg.theta);
    let u = system.u_star + cfg.combined_terminal_gain() * p1 - th * c3 / l1 * p4 * p4
        + (c3 - 1.0 - th) * p4
        + (c1 - 1.0) * p2
        + c3 / l1 * p4 * p1
        - c2 / l4 * p3 * p4
        - (c2 - 1.0) * p3
        + c1 / l3 * p2 * p3
        + th / p1 * (p4 * p4 - c1 * p2 * p4 + p3 * p3)
        + th * p3 / p1
            * (c1 / l3 * p3 * p2 - c1 / l3 * p2 * p2 - c2 / l4 * p3 * p4
                + (c1 - 1.0) * p2
                + (c2 - 2.0) * p4
                + c2 / l4 * p4 * p4
                - c1 / l3 * p2 * p4);
    Ok(Some(u))
}

/// Result of one evaluation of the saturated, guarded control law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlOutcome {
    /// Applied control.
    pub u: f64,
    /// Unclamped law value, `None` when the guard fired.
    pub raw: Option<f64>,
    pub clamped: bool,
    pub guarded: bool,
}

/// Saturated control law. At the equilibrium it returns `u*`; when the pivot
/// `φ_1(z_{N-1})` is below the guard elsewhere it holds `previous`.
pub fn control_law(system: &ReducedSystem, cfg: &ControllerConfig, eta: &[f64], previous: f64) -> ControlOutcome {
    if eta.iter().all(|&e| e == 0.0) {
        return ControlOutcome { u: system.u_star, raw: Some(system.u_star), clamped: false, guarded: false };
    }
    match control_general(system, cfg, eta) {
        Some(raw) if raw.is_finite() => {
            let u = raw.clamp(cfg.u_min, cfg.u_max);
            ControlOutcome { u, raw: Some(raw), clamped: u != raw, guarded: false }
        }
        _ => ControlOutcome { u: previous, raw: None, clamped: false, guarded: true },
    }
}

/// `V_N = θλ_2 e(η_2) + θ Σ λ_{i+2} e(z_i) + λ_1 e(z_{N-1})` with `e(x) = e^x - 1 - x`.
pub fn lyapunov_vn(system: &ReducedSystem, cfg: &ControllerConfig, eta: &[f64]) -> f64 {
    let n = system.species();
    let w = chain(eta);
    let mut v = cfg.theta * system.lambda(2) * entropy(w[0]);
    for (i, wi) in w.iter().enumerate().take(n - 1).skip(1) {
        v += cfg.theta * system.lambda(i + 2) * entropy(*wi);
    }
    v + system.lambda(1) * entropy(w[n - 1])
}

/// Target derivative `-D` that the unsaturated law enforces.
pub fn lyapunov_target_rate(system: &ReducedSystem, cfg: &ControllerConfig, eta: &[f64]) -> f64 {
    -law_terms(system, cfg, eta).damping
}

/// Derivative of `V_N` along an arbitrary velocity `η̇` (chain rule).
pub fn lyapunov_rate_along(system: &ReducedSystem, cfg: &ControllerConfig, eta: &[f64], eta_dot: &[f64]) -> f64 {
    let n = system.species();
    let w = chain(eta);
    let mut w_dot = vec![0.0; n];
    w_dot[0] = eta_dot[1];
    for i in 1..n - 1 {
        w_dot[i] = eta_dot[i + 1] - w_dot[i - 1];
    }
    w_dot[n - 1] = eta_dot[0] - w_dot[n - 2];
    let mut rate = cfg.theta * system.phi(2, w[0]) * w_dot[0];
    for i in 1..n - 1 {
        rate += cfg.theta * system.phi(i + 2, w[i]) * w_dot[i];
    }
    rate + system.phi(1, w[n - 1]) * w_dot[n - 1]
}

/// Right-hand side of the reduced system. `shift[i]` is the shape correction
/// added inside `φ_i` (zero when the shape deviation vanishes).
pub fn reduced_rhs(system: &ReducedSystem, eta: &[f64], u: f64, shift: &[f64]) -> Vec<f64> {
    let n = system.species();
    let hat = |k: usize| system.phi(k, eta[(k + n - 1) % n] + shift[(k + n - 1) % n]);
    let mut d = vec![0.0; n];
    d[0] = system.u_star - u - hat(2);
    for (k, dk) in d.iter_mut().enumerate().take(n - 1).skip(1) {
        *dk = -hat(k + 2);
    }
    d[n - 1] = -hat(1);
    d
}

/// Residuals of the fictitious-control identities, for `k = 3..=N` and then
/// for species 1:
/// `φ_k(η_k) = c_{k-2} φ_{k-1}(w_{k-3}) + φ_k(w_{k-2}) + (c_{k-2}/λ_k) φ_k(w_{k-2}) φ_{k-1}(w_{k-3})`
/// with `w_0 = η_2`, `w_i = z_i`, and
/// `φ_1(η_1) = c_{N-1} φ_N(z_{N-2}) + φ_1(z_{N-1}) + (c_{N-1}/λ_1) φ_1(z_{N-1}) φ_N(z_{N-2})`.
pub fn fictitious_identity_residuals(system: &ReducedSystem, eta: &[f64]) -> Vec<f64> {
    let n = system.species();
    let gains = ratio_gains(&system.lambdas);
    let w = chain(eta);
    let mut out = Vec::with_capacity(n - 1);
    for k in 3..=n {
        let c = gains[k - 3];
        let inner = system.phi(k - 1, w[k - 3]);
        let outer = system.phi(k, w[k - 2]);
        let rhs = c * inner + outer + c / system.lambda(k) * outer * inner;
        out.push(system.phi(k, eta[k - 1]) - rhs);
    }
    let c = gains[n - 2];
    let inner = system.phi(n, w[n - 2]);
    let outer = system.phi(1, w[n - 1]);
    let rhs = c * inner + outer + c / system.lambda(1) * outer * inner;
    out.push(system.phi(1, eta[0]) - rhs);
    out
}

/// Power series `∫_0^p (e^z - 1)^2 / z dz` truncated after the fifth power.
fn h_series(p: f64) -> f64 {
    p * p * (0.5 + p * (1.0 / 3.0 + p * (7.0 / 48.0 + p / 20.0)))
}

fn h_integrand(z: f64) -> f64 {
    if z == 0.0 {
        0.0
    } else {
        z.exp_m1().powi(2) / z
    }
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn adaptive_simpson(
    f: &impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        left + right + delta / 15.0
    } else {
        adaptive_simpson(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + adaptive_simpson(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
}

/// Switch point between the power series and adaptive quadrature.
const H_SERIES_LIMIT: f64 = 1e-4;

/// `h(p) = ∫_0^p (e^z - 1)^2 / z dz`.
pub fn h_function(p: f64) -> f64 {
    if p.abs() <= H_SERIES_LIMIT {
        return h_series(p);
    }
    let start = H_SERIES_LIMIT.copysign(p);
    let f = h_integrand;
    let (fa, fb, fm) = (f(start), f(p), f(0.5 * (start + p)));
    let whole = simpson(start, p, fa, fm, fb);
    h_series(start) + adaptive_simpson(&f, start, p, fa, fm, fb, whole, 1e-14, 50)
}

/// `G(ψ) = max_a |ψ(t-a)| e^{-σa} / (1 + max(0, min_a ψ(t-a)))` over the grid nodes.
pub fn g_functional(history: &[f64], grid: &AgeGrid, sigma: f64) -> Result<f64> {
    if history.is_empty() {
        return Err(Error::Domain("empty shape-deviation history".into()));
    }
    grid.check_len(history.len(), "shape-deviation history")?;
    let peak = history
        .iter()
        .enumerate()
        .map(|(j, p)| p.abs() * (-sigma * grid.age(j)).exp())
        .fold(0.0, f64::max);
    let floor = history.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(peak / (1.0 + floor.max(0.0)))
}

/// Weights of the delay part of the composite Lyapunov function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovWeights {
    /// `γ_i`.
    pub gamma: Vec<f64>,
    /// Decay rates `σ_i`.
    pub sigma: Vec<f64>,
    /// Bounds `C_i` on the mismatch coefficients.
    pub bound: Vec<f64>,
}

impl LyapunovWeights {
    /// `γ_i = 2 C_i λ_i`, which puts every amplitude cap at `ln 2`.
    pub fn with_default_gamma(system: &ReducedSystem, bound: Vec<f64>, sigma: Vec<f64>) -> Self {
        let gamma = bound.iter().zip(&system.lambdas).map(|(c, l)| 2.0 * c * l).collect();
        Self { gamma, sigma, bound }
    }

    /// Caps `ln(γ_i / (C_i λ_i))`; `None` where `γ_i <= C_i λ_i`.
    pub fn caps(&self, system: &ReducedSystem) -> Vec<Option<f64>> {
        self.gamma
            .iter()
            .zip(&self.bound)
            .zip(&system.lambdas)
            .map(|((g, c), l)| (*g > c * l).then(|| (g / (c * l)).ln()))
            .collect()
    }
}

/// `V_G = V_N + Σ (γ_i / σ_i) h(G_i(ψ_i))`.
pub fn lyapunov_vg(
    system: &ReducedSystem,
    cfg: &ControllerConfig,
    red: &ReducedState,
    grid: &AgeGrid,
    weights: &LyapunovWeights,
) -> Result<f64> {
    let n = system.species();
    if red.psi.len() != n {
        return Err(Error::Domain("composite Lyapunov function needs every shape history".into()));
    }
    let mut v = lyapunov_vn(system, cfg, &red.eta);
    for i in 0..n {
        if !(weights.sigma[i] > 0.0) {
            return Err(Error::Config("decay rates must be positive".into()));
        }
        let g = g_functional(&red.psi[i], grid, weights.sigma[i])?;
        v += weights.gamma[i] / weights.sigma[i] * h_function(g);
    }
    Ok(v)
}

/// Outcome of the contraction check on a normalized renewal kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct H6Report {
    pub holds: bool,
    /// Minimizing `κ`.
    pub kappa: f64,
    /// Minimal weighted integral.
    pub value: f64,
    /// `1 - value`.
    pub margin: f64,
    /// `(∫ a k̃(a) da)^{-1}`.
    pub inverse_mean_age: f64,
}

/// Upper end of the `κ` scan.
pub const KAPPA_MAX: f64 = 4.0;
const KAPPA_SCAN: usize = 400;

/// Rescales a kernel to unit trapezoid integral.
pub fn normalize_kernel(kernel: &Kernel) -> Result<Kernel> {
    let total = kernel.integral();
    if !(total > 0.0) {
        return Err(Error::Domain("kernel has no mass to normalize".into()));
    }
    Ok(kernel.scaled(1.0 / total))
}

/// Checks `min_κ ∫ |k̃(a) - z κ ∫_a^A k̃| e^{σa} da < 1` by a scan over
/// `[0, KAPPA_MAX]` refined by ternary search (the integral is convex in `κ`).
pub fn check_h6(normalized: &Kernel, sigma: f64) -> Result<H6Report> {
    let grid = normalized.grid();
    let k = normalized.values();
    let total = grid.trapezoid(k);
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Domain(format!("kernel must integrate to 1, got {total}")));
    }
    let ages = grid.ages();
    let first_moment = grid.trapezoid_product(&ages, k);
    if !(first_moment > 0.0) {
        return Err(Error::Domain("kernel has zero mean age: contraction check is degenerate".into()));
    }
    let rate = 1.0 / first_moment;
    let cum = grid.cumulative(k);
    let tail: Vec<f64> = cum.iter().map(|c| total - c).collect();
    let weight: Vec<f64> = ages.iter().map(|a| (sigma * a).exp()).collect();
    let value = |kappa: f64| {
        let f: Vec<f64> = (0..k.len()).map(|j| (k[j] - rate * kappa * tail[j]).abs() * weight[j]).collect();
        grid.trapezoid(&f)
    };
    let step = KAPPA_MAX / KAPPA_SCAN as f64;
    let (mut best_kappa, mut best) = (0.0, value(0.0));
    for s in 1..=KAPPA_SCAN {
        let kappa = s as f64 * step;
        let v = value(kappa);
        if v < best {
            best = v;
            best_kappa = kappa;
        }
    }
    let (mut lo, mut hi) = ((best_kappa - step).max(0.0), (best_kappa + step).min(KAPPA_MAX));
    for _ in 0..100 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if value(m1) <= value(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let refined = 0.5 * (lo + hi);
    if value(refined) < best {
        best = value(refined);
        best_kappa = refined;
    }
    Ok(H6Report { holds: best < 1.0, kappa: best_kappa, value: best, margin: 1.0 - best, inverse_mean_age: rate })
}

/// Largest decay rate (up to `cap`) for which the contraction check holds,
/// or `None` when it fails already at `σ = 0`.
pub fn largest_contraction_rate(normalized: &Kernel, cap: f64) -> Result<Option<f64>> {
    if !check_h6(normalized, 0.0)?.holds {
        return Ok(None);
    }
    if check_h6(normalized, cap)?.holds {
        return Ok(Some(cap));
    }
    let (mut lo, mut hi) = (0.0, cap);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if check_h6(normalized, mid)?.holds {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Some(lo))
}

/// Decay rate used by default: half of the largest admissible one.
pub fn suggested_decay_rate(normalized: &Kernel) -> Result<Option<f64>> {
    Ok(largest_contraction_rate(normalized, 10.0)?.map(|s| 0.5 * s))
}

/// Per-constraint membership of a reduced state in the feasible set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub inside: bool,
    /// The unclamped control is positive.
    pub control_positive: bool,
    pub raw_control: Option<f64>,
    /// Amplitude caps `ln(γ_i/(C_i λ_i))` (empty when not checked).
    pub caps: Vec<f64>,
    pub cap_satisfied: Vec<bool>,
    /// The guard fired, so the control expression is undefined here.
    pub on_guard_boundary: bool,
    pub lyapunov: f64,
}

/// Evaluates the defining inequalities of the feasible set at `eta`.
pub fn feasible_set_check(
    system: &ReducedSystem,
    cfg: &ControllerConfig,
    eta: &[f64],
    weights: Option<&LyapunovWeights>,
) -> FeasibilityReport {
    let at_rest = eta.iter().all(|&e| e == 0.0);
    let raw = if at_rest { Some(system.u_star) } else { control_general(system, cfg, eta) };
    let control_positive = raw.is_some_and(|u| u > 0.0);
    let (caps, cap_satisfied) = match weights {
        Some(w) => {
            let caps: Vec<f64> = w.caps(system).into_iter().map(|c| c.unwrap_or(f64::NEG_INFINITY)).collect();
            let ok = caps.iter().zip(eta).map(|(c, e)| e <= c).collect();
            (caps, ok)
        }
        None => (Vec::new(), Vec::new()),
    };
    let inside = control_positive && cap_satisfied.iter().all(|&b| b);
    FeasibilityReport {
        inside,
        control_positive,
        raw_control: raw,
        caps,
        cap_satisfied,
        on_guard_boundary: raw.is_none(),
        lyapunov: lyapunov_vn(system, cfg, eta),
    }
}

/// Witness `(ε, 0, …, 0)` of a nonempty feasible set.
pub fn feasibility_witness(system: &ReducedSystem, epsilon: f64) -> Vec<f64> {
    let mut eta = vec![0.0; system.species()];
    eta[0] = epsilon;
    eta
}

/// Estimates the largest level `c` such that sampled states with `V_N <= c`
/// lie in the feasible set: the smallest `V_N` over infeasible samples in the
/// box `[-radius, radius]^N`.
pub fn feasible_level_estimate(
    system: &ReducedSystem,
    cfg: &ControllerConfig,
    weights: Option<&LyapunovWeights>,
    radius: f64,
    samples: usize,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = system.species();
    let mut level = f64::INFINITY;
    for _ in 0..samples {
        let eta: Vec<f64> = (0..n).map(|_| rng.random_range(-radius..=radius)).collect();
        let report = feasible_set_check(system, cfg, &eta, weights);
        if !report.inside {
            level = level.min(report.lyapunov);
        }
    }
    level
}

/// Bounds `C_i = 1.5 · max_t |A_i(t)|` on the mismatch coefficients, taken
/// over a calibration run without shape deviation. A tiny floor keeps them
/// positive when the run starts at rest.
pub fn calibrate_bounds(
    system: &ReducedSystem,
    cfg: &ControllerConfig,
    eta0: &[f64],
    horizon: f64,
    dt: f64,
) -> Result<Vec<f64>> {
    let traj = closed_loop_reduced(
        system,
        cfg,
        eta0,
        &mut ShapeMode::Zero,
        &ClosedLoopOptions { horizon, dt, weights: None },
    )?;
    let mut max = vec![0.0f64; system.species()];
    for eta in &traj.eta {
        for (m, c) in max.iter_mut().zip(law_terms(system, cfg, eta).coefficients) {
            *m = m.max(c.abs());
        }
    }
    Ok(max.into_iter().map(|m| (1.5 * m).max(1e-12)).collect())
}

/// Shape-deviation channel of one species for the delay-driven reduced system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeChannel {
    pub grid: AgeGrid,
    /// Normalized renewal kernel `k̃(a) = k(a) x*(a) / x*(0)`.
    pub renewal_kernel: Vec<f64>,
    /// Normalized interaction weight `g(a) x*(a) / λ`, unit integral.
    pub interaction_weight: Vec<f64>,
    /// `history[j] = ψ(t - a_j)`.
    pub history: Vec<f64>,
}

impl ShapeChannel {
    /// Channel of species `i` (0-based) around the steady state.
    pub fn from_equilibrium(spec: &GeneralNetworkSpec, eq: &Equilibrium, i: usize, history: Vec<f64>) -> Result<Self> {
        let n = spec.len();
        let grid = eq.grid;
        grid.check_len(history.len(), "shape history")?;
        if history.iter().any(|&p| !(p > -1.0)) {
            return Err(Error::Domain("shape history must stay above -1".into()));
        }
        let s = &eq.species[i];
        let renewal_kernel =
            spec.species[i].fertility.values().iter().zip(&s.normalized).map(|(k, x)| k * x).collect();
        let g = spec.species[(i + n - 1) % n].interaction.values();
        let interaction_weight = g.iter().zip(&s.profile).map(|(g, x)| g * x / s.lambda).collect();
        Ok(Self { grid, renewal_kernel, interaction_weight, history })
    }

    /// Shift `v = ln(1 + ∫ ḡ ψ)` added inside `φ`.
    pub fn shift(&self) -> f64 {
        self.grid.trapezoid_product(&self.interaction_weight, &self.history).ln_1p()
    }

    /// Advances the history by one cell using `ψ(t) = ∫ k̃(a) ψ(t - a) da`;
    /// the `a = 0` trapezoid weight is solved implicitly.
    pub fn advance(&mut self) {
        let n = self.grid.cells();
        let h = self.grid.step();
        let k = &self.renewal_kernel;
        let mut sum = 0.5 * k[n] * self.history[n - 1];
        for j in 1..n {
            sum += k[j] * self.history[j - 1];
        }
        let fresh = h * sum / (1.0 - 0.5 * h * k[0]);
        self.history.rotate_right(1);
        self.history[0] = fresh;
    }
}

/// How the shape deviation enters the reduced closed loop.
#[derive(Debug, Clone, PartialEq)]
pub enum ShapeMode {
    /// `ψ ≡ 0`.
    Zero,
    /// Histories evolved by their renewal recursion, one channel per species.
    KernelDriven(Vec<ShapeChannel>),
}

/// Options of the reduced closed-loop integration.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopOptions {
    pub horizon: f64,
    pub dt: f64,
    /// When present, `V_G` is recorded in the kernel-driven mode.
    pub weights: Option<LyapunovWeights>,
}

/// Recorded closed-loop trajectory of the reduced system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedTrajectory {
    pub times: Vec<f64>,
    pub eta: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
    pub u: Vec<f64>,
    pub lyapunov: Vec<f64>,
    /// Exact derivative of `V_N` along the applied flow.
    pub vdot_analytic: Vec<f64>,
    /// Target derivative `-D` of the unsaturated law.
    pub vdot_target: Vec<f64>,
    /// Central difference of the recorded `V_N`.
    pub vdot_numeric: Vec<f64>,
    /// Sign of `z_{N-1}`.
    pub zlast_sign: Vec<i8>,
    /// Composite Lyapunov value (kernel-driven mode with weights only).
    pub composite: Vec<f64>,
    /// `G_i` per step (kernel-driven mode only).
    pub g_values: Vec<Vec<f64>>,
    /// Steps where the law was clamped or guarded.
    pub clamped: Vec<bool>,
    pub guarded: Vec<bool>,
    pub clamp_events: usize,
    pub guard_events: usize,
    /// Number of sign changes of `z_{N-1}` and the first time one occurred.
    pub sign_changes: usize,
    pub first_sign_change: Option<f64>,
    pub initially_feasible: bool,
}

/// Integrates the reduced closed loop with classical RK4 on `η`, evaluating
/// the saturated law at every stage. In the kernel-driven mode `dt` must equal
/// the age step and the histories advance one cell per step; the shape shift
/// is interpolated linearly across the step.
pub fn closed_loop_reduced(
    system: &ReducedSystem,
    cfg: &ControllerConfig,
    eta0: &[f64],
    mode: &mut ShapeMode,
    options: &ClosedLoopOptions,
) -> Result<ReducedTrajectory> {
    let n = system.species();
    cfg.validate(system)?;
    if eta0.len() != n {
        return Err(Error::Config(format!("initial state has {} entries, expected {n}", eta0.len())));
    }
    let dt = options.dt;
    if !(dt > 0.0 && options.horizon > 0.0) {
        return Err(Error::Config("time step and horizon must be positive".into()));
    }
    if let ShapeMode::KernelDriven(channels) = mode {
        if channels.len() != n {
            return Err(Error::Config("one shape channel per species is required".into()));
        }
        for c in channels.iter() {
            if ((c.grid.step() - dt) / dt).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "kernel-driven mode needs dt = age step {}, got {dt}",
                    c.grid.step()
                )));
            }
        }
    }
    let start = feasible_set_check(system, cfg, eta0, None);
    if !start.inside {
        warn!("initial reduced state lies outside the feasible set (control expression not positive)");
    }
    let steps = (options.horizon / dt).round().max(1.0) as usize;
    let mut traj = ReducedTrajectory {
        times: Vec::with_capacity(steps + 1),
        eta: Vec::with_capacity(steps + 1),
        z: Vec::with_capacity(steps + 1),
        u: Vec::with_capacity(steps + 1),
        lyapunov: Vec::with_capacity(steps + 1),
        vdot_analytic: Vec::with_capacity(steps + 1),
        vdot_target: Vec::with_capacity(steps + 1),
        vdot_numeric: Vec::new(),
        zlast_sign: Vec::with_capacity(steps + 1),
        composite: Vec::new(),
        g_values: Vec::new(),
        clamped: Vec::with_capacity(steps + 1),
        guarded: Vec::with_capacity(steps + 1),
        clamp_events: 0,
        guard_events: 0,
        sign_changes: 0,
        first_sign_change: None,
        initially_feasible: start.inside,
    };
    let mut eta = eta0.to_vec();
    let mut previous = system.u_star;
    let shifts = |mode: &ShapeMode| -> Vec<f64> {
        match mode {
            ShapeMode::Zero => vec![0.0; n],
            ShapeMode::KernelDriven(ch) => ch.iter().map(ShapeChannel::shift).collect(),
        }
    };
    let mut shift_now = shifts(mode);
    for k in 0..=steps {
        let t = k as f64 * dt;
        let outcome = control_law(system, cfg, &eta, previous);
        let velocity = reduced_rhs(system, &eta, outcome.u, &shift_now);
        let z = backstepping_errors(&eta);
        let last = z[n - 2];
        let sign = if last > 0.0 {
            1
        } else if last < 0.0 {
            -1
        } else {
            0
        };
        if let Some(&prev_sign) = traj.zlast_sign.last() {
            if prev_sign != 0 && sign != prev_sign {
                traj.sign_changes += 1;
                traj.first_sign_change.get_or_insert(t);
            }
        }
        traj.times.push(t);
        traj.lyapunov.push(lyapunov_vn(system, cfg, &eta));
        traj.vdot_analytic.push(lyapunov_rate_along(system, cfg, &eta, &velocity));
        traj.vdot_target.push(lyapunov_target_rate(system, cfg, &eta));
        traj.u.push(outcome.u);
        traj.zlast_sign.push(sign);
        traj.clamped.push(outcome.clamped);
        traj.guarded.push(outcome.guarded);
        traj.clamp_events += usize::from(outcome.clamped);
        traj.guard_events += usize::from(outcome.guarded);
        if let ShapeMode::KernelDriven(channels) = mode {
            let mut gs = Vec::with_capacity(n);
            let mut red = ReducedState::from_eta(eta.clone());
            for (i, c) in channels.iter().enumerate() {
                let sigma = options.weights.as_ref().map_or(0.0, |w| w.sigma[i]);
                gs.push(g_functional(&c.history, &c.grid, sigma)?);
                red.psi.push(c.history.clone());
            }
            traj.g_values.push(gs);
            if let Some(w) = &options.weights {
                traj.composite.push(lyapunov_vg(system, cfg, &red, &channels[0].grid, w)?);
            }
        }
        traj.eta.push(eta.clone());
        traj.z.push(z);
        if k == steps {
            break;
        }
        if let ShapeMode::KernelDriven(channels) = mode {
            for c in channels.iter_mut() {
                c.advance();
            }
        }
        let shift_next = shifts(mode);
        let shift_mid: Vec<f64> = shift_now.iter().zip(&shift_next).map(|(a, b)| 0.5 * (a + b)).collect();
        let stage = |e: &[f64], s: &[f64], prev: f64| {
            let o = control_law(system, cfg, e, prev);
            reduced_rhs(system, e, o.u, s)
        };
        let axpy = |base: &[f64], d: &[f64], h: f64| -> Vec<f64> { base.iter().zip(d).map(|(b, v)| b + h * v).collect() };
        let k1 = velocity;
        let k2 = stage(&axpy(&eta, &k1, 0.5 * dt), &shift_mid, outcome.u);
        let k3 = stage(&axpy(&eta, &k2, 0.5 * dt), &shift_mid, outcome.u);
        let k4 = stage(&axpy(&eta, &k3, dt), &shift_next, outcome.u);
        for j in 0..n {
            eta[j] += dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        if eta.iter().any(|e| !e.is_finite()) {
            return Err(Error::Numeric(format!("reduced state diverged at t = {}", t + dt)));
        }
        previous = outcome.u;
        shift_now = shift_next;
    }
    traj.vdot_numeric = central_difference(&traj.lyapunov, dt);
    Ok(traj)
}

/// Central differences with one-sided ends.
pub fn central_difference(values: &[f64], dt: f64) -> Vec<f64> {
    let m = values.len();
    if m < 2 {
        return vec![0.0; m];
    }
    (0..m)
        .map(|k| {
            if k == 0 {
                (values[1] - values[0]) / dt
            } else if k == m - 1 {
                (values[m - 1] - values[m - 2]) / dt
            } else {
                (values[k + 1] - values[k - 1]) / (2.0 * dt)
            }
        })
        .collect()
}

/// Feedback controller acting on the full network state.
#[derive(Debug, Clone)]
pub struct BacksteppingController {
    pub system: ReducedSystem,
    pub config: ControllerConfig,
    equilibrium: Equilibrium,
    previous: f64,
}

impl BacksteppingController {
    pub fn new(eq: &Equilibrium, config: ControllerConfig) -> Result<Self> {
        let system = ReducedSystem::from_equilibrium(eq)?;
        config.validate(&system)?;
        Ok(Self { previous: system.u_star, system, config, equilibrium: eq.clone() })
    }
}

impl Controller for BacksteppingController {
    fn control(&mut self, state: &PopulationState) -> Result<ControlSample> {
        let eta = log_amplitudes(state, &self.equilibrium)?;
        let outcome = control_law(&self.system, &self.config, &eta, self.previous);
        self.previous = outcome.u;
        Ok(ControlSample {
            u: outcome.u,
            lyapunov: Some(lyapunov_vn(&self.system, &self.config, &eta)),
            clamped: outcome.clamped,
            guarded: outcome.guarded,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::build_equilibrium;
    use crate::grid::SpeciesSpec;
    use approx::assert_relative_eq;

    fn system(lambdas: &[f64], u_star: f64) -> ReducedSystem {
        ReducedSystem::new(lambdas.to_vec(), u_star).unwrap()
    }

    #[test]
    fn gains_follow_ratio_pattern() {
        let sys = system(&[2.0, 4.0, 8.0], 0.5);
        let cfg = ControllerConfig::from_system(&sys, 1.0, 1.0).unwrap();
        assert_eq!(cfg.gains, vec![2.0, 0.25]);
        assert_eq!(cfg.combined_terminal_gain(), 2.0);
        assert!(cfg.gain_residual(&sys.lambdas) <= GAIN_TOLERANCE);
        let mut bad = cfg.clone();
        bad.gains[0] = 3.0;
        assert!(bad.validate(&sys).is_err());
    }

    #[test]
    fn error_chain_round_trips() {
        let eta = vec![0.3, -0.2, 0.5, 0.1, -0.4];
        let z = backstepping_errors(&eta);
        assert_relative_eq!(z[0], 0.5 - (-0.2));
        assert_relative_eq!(z[1], 0.1 - z[0]);
        assert_relative_eq!(z[3], 0.3 - z[2]);
        let back = eta_from_errors(eta[1], &z);
        for (a, b) in back.iter().zip(&eta) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn law_at_rest_is_equilibrium_control() {
        let sys = system(&[1.0, 1.0, 1.0], 0.5);
        let cfg = ControllerConfig::from_system(&sys, 1.0, 1.0).unwrap();
        let out = control_law(&sys, &cfg, &[0.0; 3], 0.0);
        assert_eq!(out.u, 0.5);
        assert!(!out.guarded);
    }

    #[test]
    fn guard_holds_previous_value() {
        let sys = system(&[1.0, 1.0, 1.0], 0.5);
        let cfg = ControllerConfig::from_system(&sys, 1.0, 1.0).unwrap();
        // z_2 = η_1 - z_1 = 0 with η ≠ 0.
        let eta = [0.1, 0.0, 0.1];
        let out = control_law(&sys, &cfg, &eta, 0.7);
        assert!(out.guarded);
        assert_eq!(out.u, 0.7);
    }

    #[test]
    fn lyapunov_single_term() {
        let sys = system(&[1.0, 1.0, 1.0], 0.5);
        let cfg = ControllerConfig::from_system(&sys, 1.0, 1.0).unwrap();
        assert_eq!(lyapunov_vn(&sys, &cfg, &[0.0; 3]), 0.0);
        // η_2 = 1 with z = 0 means η_3 = -1 … chosen through the inverse map.
        let eta = eta_from_errors(1.0, &[0.0, 0.0]);
        assert_relative_eq!(lyapunov_vn(&sys, &cfg, &eta), std::f64::consts::E - 2.0, epsilon = 1e-14);
    }

    #[test]
    fn law_enforces_target_rate() {
        let sys = system(&[1.2, 0.8, 1.5, 0.9], 0.4);
        let cfg = ControllerConfig::from_system(&sys, 1.3, 0.7).unwrap();
        let eta = [0.1, -0.2, 0.15, 0.05];
        let u = control_general(&sys, &cfg, &eta).unwrap();
        let v = reduced_rhs(&sys, &eta, u, &[0.0; 4]);
        let rate = lyapunov_rate_along(&sys, &cfg, &eta, &v);
        assert_relative_eq!(rate, lyapunov_target_rate(&sys, &cfg, &eta), epsilon = 1e-12);
        // Finite-difference check of the chain rule.
        let h = 1e-6;
        let plus: Vec<f64> = eta.iter().zip(&v).map(|(e, d)| e + h * d).collect();
        let minus: Vec<f64> = eta.iter().zip(&v).map(|(e, d)| e - h * d).collect();
        let fd = (lyapunov_vn(&sys, &cfg, &plus) - lyapunov_vn(&sys, &cfg, &minus)) / (2.0 * h);
        assert!((fd - rate).abs() < 1e-8);
    }

    #[test]
    fn dedicated_laws_match_general_law() {
        let sys3 = system(&[1.2, 0.8, 1.5], 0.4);
        let cfg3 = ControllerConfig::from_system(&sys3, 1.3, 0.7).unwrap();
        let eta = [0.1, -0.2, 0.15];
        let a = control_three(&sys3, &cfg3, &eta).unwrap().unwrap();
        let b = control_general(&sys3, &cfg3, &eta).unwrap();
        assert!((a - b).abs() < 1e-12);
        let sys4 = system(&[1.2, 0.8, 1.5, 0.6], 0.4);
        let cfg4 = ControllerConfig::from_system(&sys4, 0.9, 1.4).unwrap();
        let eta = [0.1, -0.2, 0.15, 0.3];
        let a = control_four(&sys4, &cfg4, &eta).unwrap().unwrap();
        let b = control_general(&sys4, &cfg4, &eta).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    /// Independent series `h(p) = Σ_{n≥2} (2^n - 2) p^n / (n · n!)`.
    fn h_oracle(p: f64) -> f64 {
        let mut sum = 0.0;
        let mut fact = 1.0;
        for n in 1..60 {
            fact *= n as f64;
            if n >= 2 {
                sum += (2f64.powi(n) - 2.0) * p.powi(n) / (n as f64 * fact);
            }
        }
        sum
    }

    #[test]
    fn h_function_values() {
        assert_eq!(h_function(0.0), 0.0);
        // Frozen from the independent series below and a second adaptive rule.
        assert!((h_function(1.0) - 1.048_067_207_631_6).abs() < 1e-12);
        // The neighbouring integral ∫_0^1 (e^z - 1)/z dz = 1.31790… is a different quantity.
        assert!((h_function(1.0) - 1.31790).abs() > 0.2);
        for p in [1e-5, 5e-5, 1e-4, 2e-4, 0.01, 0.3, 1.0, 2.5, -0.5] {
            assert!((h_function(p) - h_oracle(p)).abs() <= 1e-12 * (1.0 + h_oracle(p).abs()), "p = {p}");
        }
    }

    #[test]
    fn g_functional_examples() {
        let grid = AgeGrid::new(2.0, 200).unwrap();
        assert_eq!(g_functional(&vec![0.0; 201], &grid, 1.0).unwrap(), 0.0);
        let g = g_functional(&vec![0.1; 201], &grid, 1.0).unwrap();
        assert!((g - 0.1 / 1.1).abs() < 1e-15);
        assert!(g_functional(&[], &grid, 1.0).is_err());
    }

    #[test]
    fn h6_examples() {
        let grid = AgeGrid::new(2.0, 2000).unwrap();
        // κ = 0 with σ = 0 is exactly the unit normalization: boundary, not strict.
        let bump = |w: f64| normalize_kernel(&Kernel::from_fn(grid, |a| (-(a - 1.0).powi(2) / (2.0 * w * w)).exp()).unwrap()).unwrap();
        let k = bump(0.6);
        let k_vals = k.values();
        let plain = grid.trapezoid(k_vals);
        assert!((plain - 1.0).abs() < 1e-12);
        let spread = check_h6(&k, 0.01).unwrap();
        assert!(spread.holds && spread.kappa > 0.0);
        // A sharply concentrated kernel behaves like a pure delay and cannot contract.
        assert!(!check_h6(&bump(0.05), 0.01).unwrap().holds);
        // A very large exponential weight defeats any κ.
        assert!(!check_h6(&k, 50.0).unwrap().holds);
        // Uniform kernel: closed-form minimum √2 - 1 at σ = 0.
        let uniform = normalize_kernel(&Kernel::constant(grid, 1.0)).unwrap();
        let r = check_h6(&uniform, 0.0).unwrap();
        assert!((r.value - (2f64.sqrt() - 1.0)).abs() < 1e-5);
        assert!((r.kappa - 1.0 / 2f64.sqrt()).abs() < 1e-3);
    }

    #[test]
    fn witness_is_feasible() {
        let sys = system(&[1.0, 2.0, 0.5, 1.5], 0.3);
        let cfg = ControllerConfig::from_system(&sys, 1.0, 1.0).unwrap();
        let eps = 1e-3;
        let eta = feasibility_witness(&sys, eps);
        let rep = feasible_set_check(&sys, &cfg, &eta, None);
        assert!(rep.inside);
        let expected = sys.u_star + cfg.combined_terminal_gain() * phi(1.0, eps);
        assert!((rep.raw_control.unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn negative_control_is_flagged() {
        let sys = system(&[1.0, 1.0, 1.0], 0.1);
        let cfg = ControllerConfig::from_system(&sys, 1.0, 1.0).unwrap();
        let eta = feasibility_witness(&sys, -1.0);
        let rep = feasible_set_check(&sys, &cfg, &eta, None);
        assert!(!rep.control_positive && !rep.inside);
    }

    #[test]
    fn cap_violation_is_flagged() {
        let sys = system(&[1.0, 1.0, 1.0], 0.5);
        let cfg = ControllerConfig::from_system(&sys, 1.0, 1.0).unwrap();
        let w = LyapunovWeights::with_default_gamma(&sys, vec![1.0; 3], vec![0.1; 3]);
        let cap = 2f64.ln();
        let eta = feasibility_witness(&sys, cap + 1e-6);
        let rep = feasible_set_check(&sys, &cfg, &eta, Some(&w));
        assert!(!rep.cap_satisfied[0] && !rep.inside);
        assert!((rep.caps[0] - cap).abs() < 1e-15);
    }

    #[test]
    fn fictitious_identities_hold() {
        let sys = system(&[1.3, 0.7, 2.1, 0.9, 1.6], 0.2);
        let eta = [0.4, -0.3, 0.2, 0.7, -0.1];
        for r in fictitious_identity_residuals(&sys, &eta) {
            assert!(r.abs() < 1e-12);
        }
    }

    #[test]
    fn origin_is_invariant() {
        let sys = system(&[1.0, 1.0, 1.0], 0.5);
        let cfg = ControllerConfig::from_system(&sys, 1.0, 1.0).unwrap();
        let opts = ClosedLoopOptions { horizon: 5.0, dt: 0.01, weights: None };
        let traj = closed_loop_reduced(&sys, &cfg, &[0.0; 3], &mut ShapeMode::Zero, &opts).unwrap();
        assert!(traj.eta.iter().flatten().all(|&e| e == 0.0));
        assert!(traj.u.iter().all(|&u| u == 0.5));
    }

    fn network(n: usize) -> (GeneralNetworkSpec, Equilibrium) {
        let grid = AgeGrid::new(4.0, 80).unwrap();
        let sp = SpeciesSpec::new(
            Kernel::constant(grid, 0.3),
            Kernel::from_fn(grid, |a| if a < 3.0 { 1.2 } else { 0.0 }).unwrap(),
            Kernel::constant(grid, 1.0),
            4.0,
        )
        .unwrap();
        let spec = GeneralNetworkSpec::cyclic(vec![sp; n]).unwrap();
        let z = crate::equilibrium::solve_zeta(&spec.species[0].fertility, &spec.species[0].mortality).unwrap();
        let eq = build_equilibrium(&spec, 0.5 * z).unwrap();
        (spec, eq)
    }

    #[test]
    fn transform_examples() {
        let (_, eq) = network(3);
        let state = PopulationState { t: 0.0, densities: eq.species.iter().map(|s| s.profile.clone()).collect() };
        let red = to_reduced(&state, &eq).unwrap();
        assert!(red.eta.iter().all(|e| e.abs() < 1e-14));
        assert!(red.psi.iter().flatten().all(|p| p.abs() < 1e-14));
        let doubled = PopulationState {
            t: 0.0,
            densities: eq.species.iter().map(|s| s.profile.iter().map(|x| 2.0 * x).collect()).collect(),
        };
        let red = to_reduced(&doubled, &eq).unwrap();
        assert!(red.eta.iter().all(|e| (e - 2f64.ln()).abs() < 1e-14));
        assert!(red.psi.iter().flatten().all(|p| p.abs() < 1e-14));
        let mut tripled = ReducedState::from_eta(vec![3f64.ln(), 0.0, 0.0]);
        tripled.psi = vec![vec![0.0; 81]; 3];
        let back = from_reduced(&tripled, &eq, 0.0).unwrap();
        for (a, b) in back.densities[0].iter().zip(&eq.species[0].profile) {
            assert!((a - 3.0 * b).abs() < 1e-13 * b.max(1.0));
        }
        let mut bad = tripled.clone();
        bad.psi[1][4] = -1.0;
        assert!(from_reduced(&bad, &eq, 0.0).is_err());
        let zero = PopulationState::zeros(&eq.grid, 3);
        assert!(matches!(to_reduced(&zero, &eq), Err(Error::Transform(_))));
    }

    #[test]
    fn kernel_channel_preserves_constant_history() {
        let (spec, eq) = network(3);
        let mut c = ShapeChannel::from_equilibrium(&spec, &eq, 0, vec![0.2; 81]).unwrap();
        for _ in 0..200 {
            c.advance();
        }
        assert!(c.history.iter().all(|p| (p - 0.2).abs() < 1e-9));
        assert!((c.shift() - 1.2f64.ln()).abs() < 1e-9);
    }
}
