//! Mosquito population models with an aquatic stage and adult stages:
//! biological control of the aquatic stage through an extra mortality `P(t)`,
//! and genetic control through releases of sterile males.

use log::warn;
use nalgebra::{Matrix2, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::backstepping::{g_functional, h_function};
use crate::error::{Error, Result};
use crate::grid::{AgeGrid, Kernel, TimeFunction};
use crate::transport::{
    simulate, transport_compartment, AgeModel, ControlSample, Controller, OutputOptions, PopulationState, SimOutput,
};

/// An impulsive release of sterile males.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Release {
    pub time: f64,
    pub mass: f64,
}

/// Parameters shared by the biological and the genetic model.
#[derive(Debug, Clone, PartialEq)]
pub struct MosquitoSpec {
    pub grid: AgeGrid,
    /// Length `τ` of the aquatic age window that crowds the larvae.
    pub aquatic_window: f64,
    /// Density-independent aquatic mortality `μ₀(a)`.
    pub aquatic_mortality: Kernel,
    /// Crowding coefficient `μ₁(a)`: the aquatic mortality is `μ₀ + μ₁ p`.
    pub crowding_mortality: Kernel,
    /// Adult female mortality of the biological model.
    pub female_mortality: Kernel,
    /// Fertile male mortality (both models).
    pub male_mortality: Kernel,
    /// Young (unmated) female mortality of the genetic model.
    pub young_female_mortality: Kernel,
    /// Mated female mortality of the genetic model.
    pub mated_female_mortality: Kernel,
    /// Sterile male mortality of the genetic model.
    pub sterile_male_mortality: Kernel,
    /// Fraction of emerging adults that are female.
    pub sex_ratio: f64,
    /// Emergence rate `w(a)` from the aquatic stage.
    pub emergence: Kernel,
    /// Male mating weight `λ(a)`.
    pub male_weight: Kernel,
    /// Baseline egg-laying rate `β₀(a)`.
    pub base_fertility: Kernel,
    /// Half-saturation constant of the fertile-male signal.
    pub saturation: f64,
    /// Inhibition strength of the sterile-male signal.
    pub inhibition: f64,
    pub carrying_capacity: TimeFunction,
    pub growth_rate: TimeFunction,
    pub competition: TimeFunction,
    pub releases: Vec<Release>,
    /// Age window `(0, release_window)` over which a released cohort is spread.
    pub release_window: f64,
}

impl MosquitoSpec {
    /// Collects every structural problem of the specification.
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        let g = self.grid;
        let kernels = [
            ("aquatic mortality", &self.aquatic_mortality),
            ("crowding mortality", &self.crowding_mortality),
            ("female mortality", &self.female_mortality),
            ("male mortality", &self.male_mortality),
            ("young female mortality", &self.young_female_mortality),
            ("mated female mortality", &self.mated_female_mortality),
            ("sterile male mortality", &self.sterile_male_mortality),
            ("emergence", &self.emergence),
            ("male weight", &self.male_weight),
            ("base fertility", &self.base_fertility),
        ];
        for (name, k) in kernels {
            if *k.grid() != g {
                errors.push(format!("{name}: kernel grid differs from the model grid"));
            } else if !k.is_nonnegative() {
                errors.push(format!("{name}: must be nonnegative"));
            }
        }
        if !(self.sex_ratio > 0.0 && self.sex_ratio < 1.0) {
            errors.push(format!("sex ratio must lie in (0, 1), got {}", self.sex_ratio));
        }
        if !(self.saturation > 0.0) {
            errors.push("saturation constant must be positive".into());
        }
        if !(self.inhibition > 0.0) {
            errors.push("inhibition strength must be positive".into());
        }
        if !(self.aquatic_window > 0.0 && self.aquatic_window <= g.max_age() + 1e-12) {
            errors.push(format!("aquatic window must lie in (0, {}]", g.max_age()));
        }
        if !(self.release_window >= g.step() - 1e-12 && self.release_window < g.max_age()) {
            errors.push(format!("release window must lie in [{}, {})", g.step(), g.max_age()));
        }
        self.carrying_capacity.validate("carrying capacity", &mut errors);
        self.growth_rate.validate("growth rate", &mut errors);
        self.competition.validate("competition", &mut errors);
        if !(self.carrying_capacity.lower_bound() > 0.0) {
            errors.push("carrying capacity must stay bounded away from zero".into());
        }
        if self.growth_rate.lower_bound() < 0.0 {
            errors.push("growth rate must be nonnegative".into());
        }
        if self.competition.lower_bound() < 0.0 {
            errors.push("competition must be nonnegative".into());
        }
        for w in self.releases.windows(2) {
            if w[1].time <= w[0].time {
                errors.push("release times must be strictly increasing".into());
                break;
            }
        }
        for r in &self.releases {
            if !(r.time > 0.0) {
                errors.push(format!("release time {} must be positive", r.time));
            }
            if !(r.mass >= 0.0) {
                errors.push(format!("release mass {} must be nonnegative", r.mass));
            }
        }
        if !errors.is_empty() {
            return Err(Error::Validation(errors));
        }
        if self
            .sterile_male_mortality
            .values()
            .iter()
            .zip(self.male_mortality.values())
            .any(|(s, m)| s < m)
        {
            warn!("sterile male mortality is below fertile male mortality somewhere");
        }
        Ok(())
    }

    /// Grid index of the end of the aquatic window.
    pub fn window_index(&self) -> usize {
        self.grid.nearest_index(self.aquatic_window)
    }

    /// Mean carrying capacity, growth rate and competition.
    pub fn means(&self) -> (f64, f64, f64) {
        (self.carrying_capacity.mean(), self.growth_rate.mean(), self.competition.mean())
    }

    /// Environment `(K, Γ, γ)` at time `t`.
    pub fn environment(&self, t: f64) -> Result<(f64, f64, f64)> {
        Ok((self.carrying_capacity.eval(t)?, self.growth_rate.eval(t)?, self.competition.eval(t)?))
    }

    /// Copy with every release mass multiplied by `factor`.
    pub fn with_scaled_releases(&self, factor: f64) -> Self {
        let mut s = self.clone();
        for r in &mut s.releases {
            r.mass *= factor;
        }
        s
    }

    /// Crowding load `p = ∫_0^τ I`.
    pub fn crowding_load(&self, aquatic: &[f64]) -> f64 {
        self.grid.trapezoid_to(aquatic, self.window_index())
    }

    /// Fertile-male signal `m = ∫ λ M`.
    pub fn male_signal(&self, males: &[f64]) -> f64 {
        self.grid.trapezoid_product(self.male_weight.values(), males)
    }

    /// Aquatic mortality profile `μ₀ + μ₁ p`.
    fn aquatic_loss(&self, load: f64) -> Vec<f64> {
        self.aquatic_mortality
            .values()
            .iter()
            .zip(self.crowding_mortality.values())
            .map(|(a, b)| a + b * load)
            .collect()
    }

    /// Emergence integral `∫ w I`.
    fn emergence_flux(&self, aquatic: &[f64]) -> f64 {
        self.grid.trapezoid_product(self.emergence.values(), aquatic)
    }
}

/// Modulated fertility `β₀ · m/(m + ι) · e^{-δ m_s}`.
pub fn fertility_modulated(base: f64, male: f64, sterile: f64, saturation: f64, inhibition: f64) -> f64 {
    base * male / (male + saturation) * (-inhibition * sterile).exp()
}

/// Mating probability `∫M / (1 + ∫M + ∫M_s)`.
pub fn mating_probability(fertile_total: f64, sterile_total: f64) -> f64 {
    fertile_total / (1.0 + fertile_total + sterile_total)
}

fn shifted(values: &[f64], offset: f64) -> Vec<f64> {
    values.iter().map(|v| v + offset).collect()
}

/// Aquatic stage regulated logistically by its own total, adult females and
/// males regulated by their own totals. The control is the extra aquatic
/// mortality `P`.
#[derive(Debug, Clone)]
pub struct BiologicalModel {
    pub spec: MosquitoSpec,
}

impl BiologicalModel {
    pub fn new(spec: MosquitoSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec })
    }
}

impl AgeModel for BiologicalModel {
    fn grid(&self) -> &AgeGrid {
        &self.spec.grid
    }

    fn compartment_names(&self) -> Vec<String> {
        ["aquatic", "female", "male"].map(String::from).to_vec()
    }

    fn advance(&self, state: &PopulationState, control: f64) -> Result<PopulationState> {
        let s = &self.spec;
        let g = &s.grid;
        let (aq, fe, ma) = (&state.densities[0], &state.densities[1], &state.densities[2]);
        let (k, growth, comp) = s.environment(state.t)?;
        let aquatic_total = g.trapezoid(aq);
        let extra = -growth * (1.0 - comp / k * aquatic_total) + control;
        let aq_rate = shifted(&s.aquatic_loss(s.crowding_load(aq)), extra);
        let fe_rate = shifted(s.female_mortality.values(), comp * g.trapezoid(fe));
        let ma_rate = shifted(s.male_mortality.values(), comp * g.trapezoid(ma));
        let m = s.male_signal(ma);
        let eggs: Vec<f64> = s
            .base_fertility
            .values()
            .iter()
            .map(|b| fertility_modulated(*b, m, 0.0, s.saturation, s.inhibition))
            .collect();
        let aq_births = g.trapezoid_product(&eggs, fe);
        let emerging = s.emergence_flux(aq);
        Ok(PopulationState {
            t: state.t + g.step(),
            densities: vec![
                transport_compartment(g, aq, &aq_rate, aq_births),
                transport_compartment(g, fe, &fe_rate, s.sex_ratio * emerging),
                transport_compartment(g, ma, &ma_rate, (1.0 - s.sex_ratio) * emerging),
            ],
        })
    }
}

/// Five-compartment model with unmated and mated females, fertile males and
/// released sterile males.
#[derive(Debug, Clone)]
pub struct GeneticModel {
    pub spec: MosquitoSpec,
}

impl GeneticModel {
    pub fn new(spec: MosquitoSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec })
    }

    /// Adds the releases falling in `(t, t + da]` to the sterile-male profile
    /// of the state at `t + da`, spread uniformly over the release window so
    /// that the trapezoid total rises by exactly the released mass.
    fn apply_releases(&self, t: f64, sterile: &mut [f64]) {
        let g = &self.spec.grid;
        let h = g.step();
        let width = ((self.spec.release_window / h).round() as usize).clamp(1, g.cells() - 1);
        let tol = 1e-9 * h;
        for r in &self.spec.releases {
            if r.time > t + tol && r.time <= t + h + tol {
                let level = r.mass / (width as f64 * h);
                for v in &mut sterile[1..=width] {
                    *v += level;
                }
            }
        }
    }
}

/// Compartment order of the genetic model.
pub const GENETIC_COMPARTMENTS: [&str; 5] = ["aquatic", "young_female", "mated_female", "male", "sterile_male"];

impl AgeModel for GeneticModel {
    fn grid(&self) -> &AgeGrid {
        &self.spec.grid
    }

    fn compartment_names(&self) -> Vec<String> {
        GENETIC_COMPARTMENTS.map(String::from).to_vec()
    }

    fn advance(&self, state: &PopulationState, _control: f64) -> Result<PopulationState> {
        let s = &self.spec;
        let g = &s.grid;
        let d = &state.densities;
        let (aq, young, mated, male, sterile) = (&d[0], &d[1], &d[2], &d[3], &d[4]);
        let (k, growth, comp) = s.environment(state.t)?;
        let m = s.male_signal(male);
        let m_s = s.male_signal(sterile);
        let eggs: Vec<f64> = s
            .base_fertility
            .values()
            .iter()
            .map(|b| fertility_modulated(*b, m, m_s, s.saturation, s.inhibition))
            .collect();
        let laid = g.trapezoid_product(&eggs, mated);
        let extra = -growth * (1.0 - laid / k);
        let aq_rate = shifted(&s.aquatic_loss(s.crowding_load(aq)), extra);
        let (young_total, mated_total) = (g.trapezoid(young), g.trapezoid(mated));
        let (male_total, sterile_total) = (g.trapezoid(male), g.trapezoid(sterile));
        let young_rate = shifted(s.young_female_mortality.values(), comp * young_total);
        let mated_rate = shifted(s.mated_female_mortality.values(), comp * mated_total);
        let male_rate = shifted(s.male_mortality.values(), comp * sterile_total);
        let sterile_rate = shifted(s.sterile_male_mortality.values(), comp * male_total);
        let emerging = s.emergence_flux(aq);
        let mating = mating_probability(male_total, sterile_total);
        let mut sterile_next = transport_compartment(g, sterile, &sterile_rate, 0.0);
        self.apply_releases(state.t, &mut sterile_next);
        Ok(PopulationState {
            t: state.t + g.step(),
            densities: vec![
                transport_compartment(g, aq, &aq_rate, laid),
                transport_compartment(g, young, &young_rate, s.sex_ratio * emerging),
                transport_compartment(g, mated, &mated_rate, mating * young_total),
                transport_compartment(g, male, &male_rate, (1.0 - s.sex_ratio) * emerging),
                sterile_next,
            ],
        })
    }
}

/// Steady state of the biological model under constant control `P*` and the
/// mean environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MosquitoEquilibrium {
    pub p_star: f64,
    pub zeta_aquatic: f64,
    pub zeta_female: f64,
    pub zeta_male: f64,
    /// Aquatic total `k_I = ∫ I*`.
    pub k_aquatic: f64,
    pub crowding_load: f64,
    pub male_signal: f64,
    pub newborn_aquatic: f64,
    pub newborn_female: f64,
    pub newborn_male: f64,
    pub aquatic: Vec<f64>,
    pub female: Vec<f64>,
    pub male: Vec<f64>,
    /// Residual of `r ∫ w Ĩ · ∫ β F̃ = 1`.
    pub residual: f64,
    /// Mean `(K, Γ, γ)` used.
    pub environment: (f64, f64, f64),
}

impl MosquitoEquilibrium {
    /// Equilibrium profiles as a model state.
    pub fn state(&self) -> PopulationState {
        PopulationState { t: 0.0, densities: vec![self.aquatic.clone(), self.female.clone(), self.male.clone()] }
    }

    /// State with each compartment scaled.
    pub fn scaled_state(&self, aquatic: f64, female: f64, male: f64) -> PopulationState {
        let sc = |v: &[f64], s: f64| v.iter().map(|x| x * s).collect();
        PopulationState {
            t: 0.0,
            densities: vec![sc(&self.aquatic, aquatic), sc(&self.female, female), sc(&self.male, male)],
        }
    }

    /// Starting state for the genetic model built from these profiles: the
    /// female profile seeds both female classes and no sterile males exist.
    pub fn genetic_state(&self, scale: f64) -> PopulationState {
        let sc = |v: &[f64]| v.iter().map(|x| x * scale).collect::<Vec<f64>>();
        PopulationState {
            t: 0.0,
            densities: vec![sc(&self.aquatic), sc(&self.female), sc(&self.female), sc(&self.male), vec![0.0; self.aquatic.len()]],
        }
    }
}

/// Normalized profile `exp(-∫(rate + ζ))`.
fn profile(grid: &AgeGrid, rate: &[f64], zeta: f64) -> Vec<f64> {
    grid.cumulative(rate).iter().enumerate().map(|(j, c)| (-(c + zeta * grid.age(j))).exp()).collect()
}

/// Solves `ζ = γ N₀ ∫ exp(-∫(μ + ζ))` for an adult class with newborn value `N₀`.
fn adult_exponent(grid: &AgeGrid, mortality: &Kernel, competition: f64, newborn: f64) -> f64 {
    let f = |z: f64| z - competition * newborn * grid.trapezoid(&profile(grid, mortality.values(), z));
    let mut hi = competition * newborn * grid.trapezoid(&profile(grid, mortality.values(), 0.0));
    if hi <= 0.0 {
        return 0.0;
    }
    let mut lo = 0.0;
    while f(hi) < 0.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if hi - lo <= 1e-15 * hi {
            break;
        }
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Aquatic newborn value `I*(0) = K (ζ + Γ - P) / (Γ γ ∫ Ĩ)` for a given
/// exponent, normalized profile integral and environment.
pub fn aquatic_newborn(zeta: f64, p_star: f64, profile_integral: f64, environment: (f64, f64, f64)) -> f64 {
    let (k, growth, comp) = environment;
    k * (zeta + growth - p_star) / (growth * comp * profile_integral)
}

struct Candidate {
    eq: MosquitoEquilibrium,
}

fn candidate(spec: &MosquitoSpec, p_star: f64, zeta: f64) -> Candidate {
    let g = &spec.grid;
    let env = spec.means();
    let (k, growth, comp) = env;
    let total = k * (zeta + growth - p_star) / (growth * comp);
    let jt = spec.window_index();
    // Crowding load fixed point p = total · ∫_0^τ Ĩ(p) / ∫ Ĩ(p) on [0, total].
    let shape = |load: f64| profile(g, &spec.aquatic_loss(load), zeta);
    let fixed = |load: f64| {
        let s = shape(load);
        load - total * g.trapezoid_to(&s, jt) / g.trapezoid(&s)
    };
    let (mut lo, mut hi) = (0.0, total.max(0.0));
    let load = if spec.crowding_mortality.values().iter().all(|&v| v == 0.0) || hi == 0.0 {
        let s = shape(0.0);
        total * g.trapezoid_to(&s, jt) / g.trapezoid(&s)
    } else {
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if hi - lo <= 1e-15 * hi {
                break;
            }
            if fixed(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };
    let aq_shape = shape(load);
    let aq_integral = g.trapezoid(&aq_shape);
    let newborn_aquatic = total / aq_integral;
    let emergence = g.trapezoid_product(spec.emergence.values(), &aq_shape);
    let newborn_female = spec.sex_ratio * newborn_aquatic * emergence;
    let newborn_male = (1.0 - spec.sex_ratio) * newborn_aquatic * emergence;
    let zeta_female = adult_exponent(g, &spec.female_mortality, comp, newborn_female);
    let zeta_male = adult_exponent(g, &spec.male_mortality, comp, newborn_male);
    let fe_shape = profile(g, spec.female_mortality.values(), zeta_female);
    let ma_shape = profile(g, spec.male_mortality.values(), zeta_male);
    let male: Vec<f64> = ma_shape.iter().map(|x| x * newborn_male).collect();
    let m = spec.male_signal(&male);
    let eggs: Vec<f64> = spec
        .base_fertility
        .values()
        .iter()
        .map(|b| fertility_modulated(*b, m, 0.0, spec.saturation, spec.inhibition))
        .collect();
    let residual = spec.sex_ratio * emergence * g.trapezoid_product(&eggs, &fe_shape) - 1.0;
    Candidate {
        eq: MosquitoEquilibrium {
            p_star,
            zeta_aquatic: zeta,
            zeta_female,
            zeta_male,
            k_aquatic: total,
            crowding_load: load,
            male_signal: m,
            newborn_aquatic,
            newborn_female,
            newborn_male,
            aquatic: aq_shape.iter().map(|x| x * newborn_aquatic).collect(),
            female: fe_shape.iter().map(|x| x * newborn_female).collect(),
            male,
            residual,
            environment: env,
        },
    }
}

/// Residual of the coupled reproduction condition at aquatic exponent `zeta`.
pub fn mosquito_residual(spec: &MosquitoSpec, p_star: f64, zeta: f64) -> f64 {
    candidate(spec, p_star, zeta).eq.residual
}

/// Number of scan points per decade when bracketing the aquatic exponent.
const SCAN_PER_DECADE: usize = 40;

/// Computes the steady state by a scan-and-bisect search over the aquatic
/// exponent `ζ_I > P* - Γ*`. The mating saturation can create two positive
/// equilibria; the one with the largest aquatic total is returned.
pub fn mosquito_equilibrium(spec: &MosquitoSpec, p_star: f64) -> Result<MosquitoEquilibrium> {
    spec.validate()?;
    let (k, growth, comp) = spec.means();
    if !(growth > 0.0 && comp > 0.0 && k > 0.0) {
        return Err(Error::Infeasible("mean growth rate and competition must be positive".into()));
    }
    if !(p_star >= 0.0) {
        return Err(Error::Infeasible(format!("equilibrium control must be nonnegative, got {p_star}")));
    }
    let floor = p_star - growth;
    let offsets: Vec<f64> = (0..=12 * SCAN_PER_DECADE)
        .map(|i| 10f64.powf(-8.0 + i as f64 / SCAN_PER_DECADE as f64))
        .collect();
    let res = |z: f64| mosquito_residual(spec, p_star, z);
    let mut brackets = Vec::new();
    let mut prev = (floor + offsets[0], res(floor + offsets[0]));
    for &o in &offsets[1..] {
        let z = floor + o;
        let r = res(z);
        if r.is_finite() && prev.1.is_finite() && (r > 0.0) != (prev.1 > 0.0) {
            brackets.push((prev.0, z, prev.1 > 0.0));
        }
        prev = (z, r);
    }
    let mut best: Option<MosquitoEquilibrium> = None;
    for (mut lo, mut hi, positive_at_lo) in brackets {
        for _ in 0..300 {
            let mid = 0.5 * (lo + hi);
            let r = res(mid);
            if r.abs() <= 1e-13 || mid == lo || mid == hi {
                lo = mid;
                hi = mid;
                break;
            }
            if (r > 0.0) == positive_at_lo {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let cand = candidate(spec, p_star, 0.5 * (lo + hi)).eq;
        if cand.residual.abs() <= 1e-10 && best.as_ref().is_none_or(|b| cand.k_aquatic > b.k_aquatic) {
            best = Some(cand);
        }
    }
    let eq = best.ok_or_else(|| {
        Error::Infeasible(format!("no positive steady state for equilibrium control {p_star}"))
    })?;
    if eq.residual.abs() > 1e-10 {
        return Err(Error::Numeric(format!("steady-state residual {:e} above tolerance", eq.residual)));
    }
    if !(eq.newborn_aquatic > 0.0) {
        return Err(Error::Infeasible("steady state has no aquatic recruitment".into()));
    }
    Ok(eq)
}

/// Feedforward and feedback control
/// `P(t) = P* + k_I (Γ*γ*/K* - Γγ/K) - k_I (Γ*/k_I - Γ/k_I)`, unclamped.
pub fn control_p(t: f64, eq: &MosquitoEquilibrium, spec: &MosquitoSpec) -> Result<f64> {
    let (k, growth, comp) = spec.environment(t)?;
    Ok(control_p_from(eq, (k, growth, comp)))
}

fn control_p_from(eq: &MosquitoEquilibrium, env: (f64, f64, f64)) -> f64 {
    let (k, growth, comp) = env;
    let (k0, growth0, comp0) = eq.environment;
    let ki = eq.k_aquatic;
    eq.p_star + ki * (growth0 * comp0 / k0 - growth * comp / k) - ki * (growth0 / ki - growth / ki)
}

/// Positive-definiteness report for the quadratic form of the aquatic Lyapunov rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityCondition {
    /// `K² / γ < Γ`.
    pub holds: bool,
    /// Closed-form smallest eigenvalue (NaN when degenerate).
    pub lambda_min: f64,
    /// `λ_min > 0`.
    pub positive_definite: bool,
    /// `Γ + γ - 2K = 0`, where the matrix is undefined.
    pub degenerate: bool,
}

/// Quadratic-form matrix `Q = Γγ/(K D) [[Γ, -K], [-K, γ]]` with `D = Γ + γ - 2K`.
pub fn q_matrix(growth: f64, comp: f64, k: f64) -> Option<Matrix2<f64>> {
    let d = growth + comp - 2.0 * k;
    if d == 0.0 || k == 0.0 {
        return None;
    }
    let s = growth * comp / (k * d);
    Some(Matrix2::new(s * growth, -s * k, -s * k, s * comp))
}

/// Closed-form smallest eigenvalue of `Q`.
pub fn lambda_min_closed_form(growth: f64, comp: f64, k: f64) -> f64 {
    let d = growth + comp - 2.0 * k;
    let sum = growth + comp;
    let num = 2.0 * growth * comp / k * (growth * comp - k * k);
    let den = d * sum + (d * d * ((growth - comp).powi(2) + 4.0 * k * k)).sqrt();
    num / den
}

/// Smallest eigenvalue of `Q` by symmetric eigen-decomposition.
pub fn lambda_min_eigen(growth: f64, comp: f64, k: f64) -> Option<f64> {
    q_matrix(growth, comp, k).map(|q| SymmetricEigen::new(q).eigenvalues.min())
}

/// Evaluates the stability condition for one environment.
pub fn stability_condition(growth: f64, comp: f64, k: f64) -> StabilityCondition {
    let degenerate = growth + comp - 2.0 * k == 0.0;
    let lambda_min = if degenerate { f64::NAN } else { lambda_min_closed_form(growth, comp, k) };
    StabilityCondition { holds: k * k / comp < growth, lambda_min, positive_definite: lambda_min > 0.0, degenerate }
}

/// Stability condition of the environment at time `t`.
pub fn stability_condition_at(spec: &MosquitoSpec, t: f64) -> Result<StabilityCondition> {
    let (k, growth, comp) = spec.environment(t)?;
    Ok(stability_condition(growth, comp, k))
}

/// `V_I = k_I (e^η - η - 1)`.
pub fn lyapunov_vi(eta: f64, k_aquatic: f64) -> f64 {
    k_aquatic * (eta.exp_m1() - eta)
}

/// `V = V_I + (γ₁/σ) h(G(ψ))`.
pub fn lyapunov_v_delay(eta: f64, k_aquatic: f64, psi: &[f64], grid: &AgeGrid, gamma1: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Domain("decay rate must be positive".into()));
    }
    if psi.iter().any(|&p| !(p > -1.0)) {
        return Err(Error::Domain("shape deviation must stay above -1".into()));
    }
    Ok(lyapunov_vi(eta, k_aquatic) + gamma1 / sigma * h_function(g_functional(psi, grid, sigma)?))
}

/// Aquatic log-amplitude `η_I = ln(∫ I / k_I)`.
pub fn aquatic_log_amplitude(state: &PopulationState, eq: &MosquitoEquilibrium, grid: &AgeGrid) -> Result<f64> {
    let total = grid.trapezoid(&state.densities[0]);
    if !(total > 0.0) {
        return Err(Error::Transform("aquatic population vanished".into()));
    }
    Ok((total / eq.k_aquatic).ln())
}

/// Aquatic shape deviation `ψ_I(t - a) = I(a,t) / (I*(a) Π) - 1`.
pub fn aquatic_shape(state: &PopulationState, eq: &MosquitoEquilibrium, grid: &AgeGrid) -> Result<Vec<f64>> {
    let pi = aquatic_log_amplitude(state, eq, grid)?.exp();
    Ok(state.densities[0]
        .iter()
        .zip(&eq.aquatic)
        .map(|(x, s)| if *s > 0.0 { x / (s * pi) - 1.0 } else { 0.0 })
        .collect())
}

/// Threshold `(Γγ + K λ_min) / (2K)` that `γ₁` must exceed.
pub fn gamma1_threshold(growth: f64, comp: f64, k: f64) -> f64 {
    (growth * comp + k * lambda_min_closed_form(growth, comp, k)) / (2.0 * k)
}

/// Default `γ₁`: twice the largest threshold over `[0, horizon]`
/// (sampled at 400 points, or one period when the environment is periodic).
pub fn default_gamma1(spec: &MosquitoSpec, horizon: f64) -> Result<f64> {
    let span = [spec.carrying_capacity.period(), spec.growth_rate.period(), spec.competition.period()]
        .into_iter()
        .flatten()
        .fold(0.0, f64::max);
    let span = if span > 0.0 { span.min(horizon) } else { horizon };
    let mut worst: f64 = 0.0;
    for i in 0..=400 {
        let t = span * i as f64 / 400.0;
        let (k, growth, comp) = spec.environment(t)?;
        let th = gamma1_threshold(growth, comp, k);
        if th.is_finite() {
            worst = worst.max(th);
        }
    }
    Ok(2.0 * worst)
}

/// Membership of the aquatic state in the admissible set at time `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmissibleReport {
    pub inside: bool,
    pub eta_cap: f64,
    pub eta_ok: bool,
    pub gamma_ok: bool,
    pub control_positive: bool,
}

/// Checks `η ≤ ln √(2γ₁K/(Γγ + Kλ_min))`, `γ₁ > (Γγ + Kλ_min)/(2K)` and `P(t) > 0`.
pub fn admissible_check(spec: &MosquitoSpec, eq: &MosquitoEquilibrium, t: f64, eta: f64, gamma1: f64) -> Result<AdmissibleReport> {
    let (k, growth, comp) = spec.environment(t)?;
    let lam = lambda_min_closed_form(growth, comp, k);
    let denom = growth * comp + k * lam;
    let eta_cap = if denom > 0.0 { (2.0 * gamma1 * k / denom).sqrt().ln() } else { f64::INFINITY };
    let eta_ok = eta <= eta_cap;
    let gamma_ok = gamma1 > denom / (2.0 * k);
    let control_positive = control_p_from(eq, (k, growth, comp)) > 0.0;
    Ok(AdmissibleReport { inside: eta_ok && gamma_ok && control_positive, eta_cap, eta_ok, gamma_ok, control_positive })
}

/// Control strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// No intervention: `P ≡ 0` and no releases.
    None,
    /// Feedforward and feedback aquatic mortality.
    Biological,
    /// Constant aquatic mortality `P*`.
    BiologicalStatic,
    /// Sterile-male releases on the five-compartment model.
    Genetic,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Strategy::None),
            "bio" | "biological" => Ok(Strategy::Biological),
            "bio-static" | "biological-static" => Ok(Strategy::BiologicalStatic),
            "genetic" => Ok(Strategy::Genetic),
            other => Err(Error::Config(format!("unknown strategy '{other}' (none, bio, bio-static, genetic)"))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::None => "none",
            Strategy::Biological => "bio",
            Strategy::BiologicalStatic => "bio-static",
            Strategy::Genetic => "genetic",
        })
    }
}

/// Per-step diagnostics of a mosquito run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MosquitoDiagnostics {
    pub times: Vec<f64>,
    pub control: Vec<f64>,
    pub aquatic_total: Vec<f64>,
    /// Aquatic recruitment `I(0, t)`.
    pub recruitment: Vec<f64>,
    /// Mating probability (genetic model only, otherwise NaN).
    pub mating: Vec<f64>,
    pub eta: Vec<f64>,
    pub lyapunov: Vec<f64>,
    pub admissible: Vec<bool>,
    pub stability_holds: Vec<bool>,
    pub clamped: Vec<bool>,
}

/// Certificate summary of a mosquito run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub strategy: Strategy,
    /// `V_I(t + dt) ≤ V_I(t) + 10 dt²` at every step (biological strategies only).
    pub lyapunov_monotone: Option<bool>,
    pub max_lyapunov_increase: Option<f64>,
    pub max_positivity_violation: f64,
    pub stability_condition_fraction: f64,
    pub admissible_fraction: Option<f64>,
    /// `|∫I(T) - k_I| / k_I` at the final time.
    pub final_relative_gap: Option<f64>,
    pub clamp_events: usize,
    pub gamma1: Option<f64>,
}

/// Result of [`run_strategy`].
#[derive(Debug, Clone, PartialEq)]
pub struct MosquitoRun {
    pub output: SimOutput,
    pub equilibrium: Option<MosquitoEquilibrium>,
    pub diagnostics: MosquitoDiagnostics,
    pub certificate: Certificate,
}

/// Run options.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyOptions {
    pub horizon: f64,
    pub p_star: f64,
    /// Initial state; defaults to the steady state (or its genetic analogue).
    pub initial: Option<PopulationState>,
    pub output: OutputOptions,
    /// `γ₁` of the admissible set; defaults to [`default_gamma1`].
    pub gamma1: Option<f64>,
}

/// Slack factor of the Lyapunov monotonicity check, in units of `dt²`.
pub const LYAPUNOV_SLACK: f64 = 10.0;

struct Recorder<'a> {
    spec: &'a MosquitoSpec,
    eq: Option<&'a MosquitoEquilibrium>,
    strategy: Strategy,
    gamma1: f64,
    diag: MosquitoDiagnostics,
}

impl Controller for Recorder<'_> {
    fn control(&mut self, state: &PopulationState) -> Result<ControlSample> {
        let g = &self.spec.grid;
        let t = state.t;
        let (raw, clamped) = match (self.strategy, self.eq) {
            (Strategy::Biological, Some(eq)) => {
                let p = control_p(t, eq, self.spec)?;
                (p.max(0.0), p < 0.0)
            }
            (Strategy::BiologicalStatic, Some(eq)) => (eq.p_star, false),
            _ => (0.0, false),
        };
        if clamped {
            warn!("aquatic control clamped at 0 at t = {t}");
        }
        let d = &mut self.diag;
        d.times.push(t);
        d.control.push(raw);
        d.clamped.push(clamped);
        d.aquatic_total.push(g.trapezoid(&state.densities[0]));
        d.recruitment.push(state.densities[0][0]);
        d.stability_holds.push(stability_condition_at(self.spec, t)?.holds);
        d.mating.push(if self.strategy == Strategy::Genetic {
            mating_probability(g.trapezoid(&state.densities[3]), g.trapezoid(&state.densities[4]))
        } else {
            f64::NAN
        });
        let mut lyapunov = None;
        match self.eq {
            Some(eq) if self.strategy != Strategy::Genetic => {
                let eta = aquatic_log_amplitude(state, eq, g)?;
                let v = lyapunov_vi(eta, eq.k_aquatic);
                d.eta.push(eta);
                d.lyapunov.push(v);
                d.admissible.push(admissible_check(self.spec, eq, t, eta, self.gamma1)?.inside);
                lyapunov = Some(v);
            }
            _ => {
                d.eta.push(f64::NAN);
                d.lyapunov.push(f64::NAN);
            }
        }
        Ok(ControlSample { u: raw, lyapunov, clamped, guarded: false })
    }
}

/// Simulates one strategy and assembles its certificate.
pub fn run_strategy(spec: &MosquitoSpec, strategy: Strategy, options: &StrategyOptions) -> Result<MosquitoRun> {
    spec.validate()?;
    let genetic = strategy == Strategy::Genetic;
    let eq = if genetic {
        mosquito_equilibrium(spec, options.p_star).ok()
    } else {
        Some(mosquito_equilibrium(spec, options.p_star)?)
    };
    let initial = match (&options.initial, &eq) {
        (Some(s), _) => s.clone(),
        (None, Some(e)) if genetic => e.genetic_state(1.0),
        (None, Some(e)) => e.state(),
        (None, None) => return Err(Error::Config("an initial state is required when no steady state exists".into())),
    };
    let gamma1 = match options.gamma1 {
        Some(g) => g,
        None => default_gamma1(spec, options.horizon)?,
    };
    let mut recorder =
        Recorder { spec, eq: if genetic { None } else { eq.as_ref() }, strategy, gamma1, diag: MosquitoDiagnostics::default() };
    let output = if genetic {
        simulate(&GeneticModel::new(spec.clone())?, &initial, options.horizon, Some(&mut recorder), options.output)?
    } else {
        simulate(&BiologicalModel::new(spec.clone())?, &initial, options.horizon, Some(&mut recorder), options.output)?
    };
    let diag = recorder.diag;
    let dt = spec.grid.step();
    let steps = diag.times.len().max(1) as f64;
    let stability_condition_fraction = diag.stability_holds.iter().filter(|&&b| b).count() as f64 / steps;
    let biological = matches!(strategy, Strategy::Biological | Strategy::BiologicalStatic);
    let (lyapunov_monotone, max_lyapunov_increase) = if biological {
        let worst = diag.lyapunov.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
        (Some(worst <= LYAPUNOV_SLACK * dt * dt), Some(worst))
    } else {
        (None, None)
    };
    let admissible_fraction =
        biological.then(|| diag.admissible.iter().filter(|&&b| b).count() as f64 / steps);
    let final_relative_gap = match (&eq, diag.aquatic_total.last()) {
        (Some(e), Some(&total)) if !genetic => Some((total - e.k_aquatic).abs() / e.k_aquatic),
        _ => None,
    };
    let certificate = Certificate {
        strategy,
        lyapunov_monotone,
        max_lyapunov_increase,
        max_positivity_violation: (-output.min_density).max(0.0),
        stability_condition_fraction,
        admissible_fraction,
        final_relative_gap,
        clamp_events: diag.clamped.iter().filter(|&&b| b).count(),
        gamma1: biological.then_some(gamma1),
    };
    Ok(MosquitoRun { output, equilibrium: eq, diagnostics: diag, certificate })
}

/// Relative oscillation amplitude `(max - min) / (2 mean)` of `values` over
/// the samples with `times >= from`.
pub fn oscillation_amplitude(times: &[f64], values: &[f64], from: f64) -> f64 {
    let window: Vec<f64> = times.iter().zip(values).filter(|(t, _)| **t >= from).map(|(_, v)| *v).collect();
    if window.is_empty() {
        return 0.0;
    }
    let max = window.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = window.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = window.iter().sum::<f64>() / window.len() as f64;
    (max - min) / (2.0 * mean)
}
