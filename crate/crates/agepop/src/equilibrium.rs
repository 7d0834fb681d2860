//! Growth exponents, steady states of cyclic networks, adjoint weights and
//! reproduction numbers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{survival_profile, AgeGrid, Kernel, SpeciesSpec};
use crate::transport::GeneralNetworkSpec;

/// Target accuracy of the characteristic-equation residual.
pub const ZETA_TOLERANCE: f64 = 1e-12;

/// Residual `G(ζ) = ∫ k(a) exp(-∫_0^a (μ + ζ)) da - 1` by the trapezoid rule.
pub fn characteristic_residual(fertility: &Kernel, mortality: &Kernel, zeta: f64) -> f64 {
    let grid = fertility.grid();
    let cum = grid.cumulative(mortality.values());
    let k = fertility.values();
    let n = grid.cells();
    let term = |j: usize| k[j] * (-(cum[j] + zeta * grid.age(j))).exp();
    let inner: f64 = (1..n).map(term).sum();
    grid.step() * (0.5 * (term(0) + term(n)) + inner) - 1.0
}

/// Unique real root of the characteristic equation, by bracketing and
/// bisection. The residual is strictly decreasing in `ζ`.
pub fn solve_zeta(fertility: &Kernel, mortality: &Kernel) -> Result<f64> {
    fertility.same_grid(mortality)?;
    if fertility.values().iter().all(|&v| v == 0.0) {
        return Err(Error::Numeric("fertility vanishes identically: no root".into()));
    }
    if !fertility.is_nonnegative() {
        return Err(Error::Domain("fertility must be nonnegative".into()));
    }
    let g = |z: f64| characteristic_residual(fertility, mortality, z);
    let mut lo = -mortality.min() + 1e-6;
    let mut hi = 10.0 * fertility.max();
    if hi <= lo {
        hi = lo + 1.0;
    }
    let mut width = hi - lo;
    let mut expansions = 0;
    while g(lo) <= 0.0 {
        lo -= width;
        width *= 2.0;
        expansions += 1;
        if expansions > 200 || !g(lo).is_finite() {
            return Err(Error::Numeric("could not bracket the growth exponent from below".into()));
        }
    }
    let mut width = hi - lo;
    while g(hi) >= 0.0 {
        hi += width;
        width *= 2.0;
        expansions += 1;
        if expansions > 400 {
            return Err(Error::Numeric("could not bracket the growth exponent from above".into()));
        }
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        let r = g(mid);
        if r.abs() <= ZETA_TOLERANCE || mid == lo || mid == hi {
            return Ok(mid);
        }
        if r > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Normalized profile `exp(-∫_0^a (μ + ζ))` at every node.
pub fn normalized_profile(mortality: &Kernel, zeta: f64) -> Vec<f64> {
    let grid = mortality.grid();
    grid.cumulative(mortality.values())
        .iter()
        .enumerate()
        .map(|(j, c)| (-(c + zeta * grid.age(j))).exp())
        .collect()
}

/// Adjoint weight `π₀(a) = ∫_a^A k(s) exp(-∫_a^s (μ + ζ)) ds`.
///
/// Built backwards one cell at a time so that no exponential ever exceeds 1.
/// The result is exactly the trapezoid rule applied to each tail integral.
pub fn adjoint_function(fertility: &Kernel, mortality: &Kernel, zeta: f64) -> Vec<f64> {
    let grid = fertility.grid();
    let n = grid.cells();
    let k = fertility.values();
    let mu = mortality.values();
    let h = grid.step();
    let mut out = vec![0.0; n + 1];
    for j in (0..n).rev() {
        let decay = (-(0.5 * h * (mu[j] + mu[j + 1]) + zeta * h)).exp();
        out[j] = decay * out[j + 1] + 0.5 * h * (k[j] + k[j + 1] * decay);
    }
    out
}

/// Steady-state data of one species in a cyclic network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeciesEquilibrium {
    pub zeta: f64,
    pub newborn: f64,
    /// `x*(a)` at every node.
    pub profile: Vec<f64>,
    /// `x*(a) / x*(0)`.
    pub normalized: Vec<f64>,
    /// Interaction integral with which this species suppresses its prey.
    pub lambda: f64,
    pub adjoint: Vec<f64>,
}

/// Steady state of a cyclic network under constant control `u*`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Equilibrium {
    pub grid: AgeGrid,
    pub species: Vec<SpeciesEquilibrium>,
    pub u_star: f64,
}

impl Equilibrium {
    pub fn lambdas(&self) -> Vec<f64> {
        self.species.iter().map(|s| s.lambda).collect()
    }

    pub fn zetas(&self) -> Vec<f64> {
        self.species.iter().map(|s| s.zeta).collect()
    }

    pub fn totals(&self) -> Vec<f64> {
        self.species.iter().map(|s| self.grid.trapezoid(&s.profile)).collect()
    }
}

/// Tolerance for the coupling relations of the steady state.
pub const COUPLING_TOLERANCE: f64 = 1e-8;

/// Builds the steady state of the cyclic network.
///
/// Species `i` is suppressed by species `i + 1` through its own interaction
/// kernel, and the control acts on species 1. The growth exponents come from
/// each species' own characteristic equation; the newborn values then follow
/// from `ζ_1 = λ_2 + u*` and `ζ_i = λ_{i+1}` (indices mod N).
pub fn build_equilibrium(spec: &GeneralNetworkSpec, u_star: f64) -> Result<Equilibrium> {
    spec.validate()?;
    let n = spec.len();
    let grid = *spec.grid();
    let zetas = spec
        .species
        .iter()
        .map(|s| solve_zeta(&s.fertility, &s.mortality))
        .collect::<Result<Vec<_>>>()?;
    if !(u_star > 0.0 && u_star < zetas[0]) {
        return Err(Error::Infeasible(format!(
            "equilibrium control {u_star} must lie in (0, {}), the growth exponent of species 1",
            zetas[0]
        )));
    }
    // Interaction integral of species i with its prey's kernel, per unit newborn.
    let mut species = Vec::with_capacity(n);
    for i in 0..n {
        let prev = (i + n - 1) % n;
        let normalized = normalized_profile(&spec.species[i].mortality, zetas[i]);
        let g = &spec.species[prev].interaction;
        let weight = grid.trapezoid_product(g.values(), &normalized);
        let target = if i == 1 { zetas[0] - u_star } else { zetas[prev] };
        if !(target > 0.0) {
            return Err(Error::Infeasible(format!(
                "species {} would need a nonpositive interaction intensity {target}",
                i + 1
            )));
        }
        if !(weight > 0.0) {
            return Err(Error::Infeasible(format!(
                "interaction kernel of species {} does not see species {}",
                prev + 1,
                i + 1
            )));
        }
        let newborn = target / weight;
        let profile: Vec<f64> = normalized.iter().map(|v| v * newborn).collect();
        let adjoint = adjoint_function(&spec.species[i].fertility, &spec.species[i].mortality, zetas[i]);
        species.push(SpeciesEquilibrium {
            zeta: zetas[i],
            newborn,
            profile,
            normalized,
            lambda: target,
            adjoint,
        });
    }
    for i in 0..n {
        let prev = (i + n - 1) % n;
        let lam = grid.trapezoid_product(spec.species[prev].interaction.values(), &species[i].profile);
        species[i].lambda = lam;
    }
    let eq = Equilibrium { grid, species, u_star };
    let residual = coupling_residual(&eq);
    if residual > COUPLING_TOLERANCE {
        return Err(Error::Numeric(format!("steady-state coupling residual {residual:e} too large")));
    }
    Ok(eq)
}

/// Largest violation of `ζ_1 = λ_2 + u*`, `ζ_i = λ_{i+1}`.
pub fn coupling_residual(eq: &Equilibrium) -> f64 {
    let n = eq.species.len();
    (0..n)
        .map(|i| {
            let next = eq.species[(i + 1) % n].lambda;
            let rhs = if i == 0 { next + eq.u_star } else { next };
            (eq.species[i].zeta - rhs).abs()
        })
        .fold(0.0, f64::max)
}

/// Stability class from the reproduction-number threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StabilityClass {
    Stable,
    Unstable,
    Critical,
}

impl std::fmt::Display for StabilityClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            StabilityClass::Stable => "stable",
            StabilityClass::Unstable => "unstable",
            StabilityClass::Critical => "critical",
        };
        f.write_str(s)
    }
}

/// Tolerance around 1 inside which the threshold is declared critical.
pub const CRITICAL_TOLERANCE: f64 = 1e-9;

/// Classifies a reproduction number against the threshold 1.
pub fn classify(r0: f64) -> StabilityClass {
    if (r0 - 1.0).abs() <= CRITICAL_TOLERANCE {
        StabilityClass::Critical
    } else if r0 < 1.0 {
        StabilityClass::Stable
    } else {
        StabilityClass::Unstable
    }
}

/// `R0 = ∫ β(a) exp(-∫_0^a loss)` for a caller-supplied linearized loss rate.
pub fn reproduction_number(spec: &SpeciesSpec, linearized_loss: &Kernel) -> Result<(f64, StabilityClass)> {
    spec.fertility.same_grid(linearized_loss)?;
    let pi = survival_profile(linearized_loss);
    let r0 = spec.grid().trapezoid_product(spec.fertility.values(), &pi);
    Ok((r0, classify(r0)))
}

/// Reproduction numbers of every species around a cyclic steady state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub r0: Vec<f64>,
    pub classification: Vec<StabilityClass>,
    /// True when all `R0` lie on the same side of 1.
    pub uniform_side: bool,
}

/// Linearizes each species around the steady state: its loss rate is its
/// mortality plus the constant nonlocal rate it experiences there.
pub fn stability_report(spec: &GeneralNetworkSpec, eq: &Equilibrium) -> Result<StabilityReport> {
    let n = spec.len();
    let mut r0 = Vec::with_capacity(n);
    let mut classification = Vec::with_capacity(n);
    for i in 0..n {
        let next = eq.species[(i + 1) % n].lambda;
        let rate = next + if i == 0 { eq.u_star } else { 0.0 };
        let loss = spec.species[i].mortality.shifted(rate);
        let (r, c) = reproduction_number(&spec.species[i], &loss)?;
        r0.push(r);
        classification.push(c);
    }
    let uniform_side = r0.iter().all(|&r| r < 1.0) || r0.iter().all(|&r| r > 1.0);
    Ok(StabilityReport { r0, classification, uniform_side })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn species(grid: AgeGrid, mu: f64, k: f64, g: f64) -> SpeciesSpec {
        SpeciesSpec::new(
            Kernel::constant(grid, mu),
            Kernel::constant(grid, k),
            Kernel::constant(grid, g),
            grid.max_age(),
        )
        .unwrap()
    }

    /// Independent oracle: bisection on the closed-form residual for constant
    /// coefficients, `k (1 - e^{-(μ+ζ)A}) / (μ+ζ) - 1`.
    fn closed_form_zeta(k: f64, mu: f64, a: f64) -> f64 {
        let g = |z: f64| {
            let s = mu + z;
            if s.abs() < 1e-14 {
                k * a - 1.0
            } else {
                k * (1.0 - (-s * a).exp()) / s - 1.0
            }
        };
        let (mut lo, mut hi) = (-mu + 1e-9, 100.0);
        for _ in 0..200 {
            let m = 0.5 * (lo + hi);
            if g(m) > 0.0 {
                lo = m
            } else {
                hi = m
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn zeta_examples_match_closed_form() {
        let g = AgeGrid::new(10.0, 20_000).unwrap();
        let z = solve_zeta(&Kernel::constant(g, 3.0), &Kernel::constant(g, 1.0)).unwrap();
        let oracle = closed_form_zeta(3.0, 1.0, 10.0);
        assert!((oracle - 2.0).abs() < 1e-8);
        assert_relative_eq!(z, oracle, epsilon = 1e-4);

        let g = AgeGrid::new(1.0, 4000).unwrap();
        let z = solve_zeta(&Kernel::constant(g, 2.0), &Kernel::zeros(g)).unwrap();
        let oracle = closed_form_zeta(2.0, 0.0, 1.0);
        assert!((oracle - 1.59362).abs() < 1e-5);
        assert_relative_eq!(z, oracle, epsilon = 1e-5);
        // Newton iteration on the closed form as a second opinion.
        let mut x: f64 = 1.0;
        for _ in 0..50 {
            let f = 2.0 * (1.0 - (-x).exp()) / x - 1.0;
            let df = 2.0 * ((-x).exp() * x - (1.0 - (-x).exp())) / (x * x);
            x -= f / df;
        }
        assert!((x - oracle).abs() < 1e-10);
    }

    #[test]
    fn zeta_residual_meets_tolerance() {
        let g = AgeGrid::new(5.0, 500).unwrap();
        let k = Kernel::from_fn(g, |a| if (1.0..4.0).contains(&a) { 1.5 } else { 0.0 }).unwrap();
        let mu = Kernel::from_fn(g, |a| 0.1 + 0.05 * a).unwrap();
        let z = solve_zeta(&k, &mu).unwrap();
        assert!(characteristic_residual(&k, &mu, z).abs() <= 1e-12);
    }

    #[test]
    fn zeta_is_zero_for_unit_reproduction() {
        let g = AgeGrid::new(2.0, 100).unwrap();
        let k = Kernel::constant(g, 0.5);
        let z = solve_zeta(&k, &Kernel::zeros(g)).unwrap();
        assert!(z.abs() < 1e-10);
    }

    #[test]
    fn zeta_requires_fertility() {
        let g = AgeGrid::new(2.0, 100).unwrap();
        assert!(solve_zeta(&Kernel::zeros(g), &Kernel::zeros(g)).is_err());
    }

    #[test]
    fn adjoint_closed_form() {
        let g = AgeGrid::new(3.0, 3000).unwrap();
        let (k, mu, zeta) = (2.0, 0.4, 0.3);
        let pi0 = adjoint_function(&Kernel::constant(g, k), &Kernel::constant(g, mu), zeta);
        assert_eq!(pi0[g.cells()], 0.0);
        let s = zeta + mu;
        for j in (0..=g.cells()).step_by(300) {
            let exact = k * (1.0 - (-s * (3.0 - g.age(j))).exp()) / s;
            assert!((pi0[j] - exact).abs() <= 1e-6);
        }
    }

    #[test]
    fn adjoint_at_zero_matches_characteristic_equation() {
        let g = AgeGrid::new(4.0, 400).unwrap();
        let k = Kernel::from_fn(g, |a| a * (4.0 - a)).unwrap();
        let mu = Kernel::constant(g, 0.2);
        let z = solve_zeta(&k, &mu).unwrap();
        let pi0 = adjoint_function(&k, &mu, z);
        assert!((pi0[0] - 1.0).abs() <= 1e-8);
    }

    #[test]
    fn reproduction_number_examples() {
        let g = AgeGrid::new(10.0, 20_000).unwrap();
        let s = species(g, 1.0, 2.0, 0.0);
        let (r0, class) = reproduction_number(&s, &Kernel::constant(g, 1.0)).unwrap();
        assert_relative_eq!(r0, 2.0 * (1.0 - (-10.0f64).exp()), max_relative = 1e-6);
        assert!((r0 - 1.99991).abs() < 1e-5);
        assert_eq!(class, StabilityClass::Unstable);
        let (r0, class) = reproduction_number(&s, &Kernel::constant(g, 1e6)).unwrap();
        assert!(r0 < 1e-3);
        assert_eq!(class, StabilityClass::Stable);
        // Loss tuned to unit reproduction: β ≡ 1/A with zero loss.
        let s = species(g, 0.0, 0.1, 0.0);
        let (r0, class) = reproduction_number(&s, &Kernel::zeros(g)).unwrap();
        assert!((r0 - 1.0).abs() < 1e-12);
        assert_eq!(class, StabilityClass::Critical);
    }

    #[test]
    fn symmetric_cyclic_equilibrium() {
        let g = AgeGrid::new(5.0, 500).unwrap();
        let sp = species(g, 0.2, 1.0, 1.0);
        let spec = GeneralNetworkSpec::cyclic(vec![sp.clone(), sp.clone(), sp]).unwrap();
        let z = solve_zeta(&spec.species[0].fertility, &spec.species[0].mortality).unwrap();
        let eq = build_equilibrium(&spec, 0.25 * z).unwrap();
        let zs = eq.zetas();
        assert!(zs.iter().all(|&v| (v - zs[0]).abs() < 1e-14));
        assert!(coupling_residual(&eq) <= 1e-8);
        assert!((eq.species[1].lambda - (zs[0] - 0.25 * z)).abs() < 1e-8);
    }

    #[test]
    fn newborn_closed_form_for_unit_kernel() {
        let g = AgeGrid::new(5.0, 50_000).unwrap();
        let sp = species(g, 0.2, 1.0, 1.0);
        let spec = GeneralNetworkSpec::cyclic(vec![sp.clone(), sp.clone(), sp]).unwrap();
        let eq = build_equilibrium(&spec, 0.1).unwrap();
        let z = eq.species[0].zeta;
        let s = 0.2 + z;
        let expected = z * s / (1.0 - (-s * 5.0).exp());
        assert_relative_eq!(eq.species[0].newborn, expected, max_relative = 1e-6);
    }

    #[test]
    fn infeasible_control_is_rejected() {
        let g = AgeGrid::new(5.0, 100).unwrap();
        let sp = species(g, 0.2, 1.0, 1.0);
        let spec = GeneralNetworkSpec::cyclic(vec![sp.clone(), sp.clone(), sp]).unwrap();
        assert!(matches!(build_equilibrium(&spec, 0.0), Err(Error::Infeasible(_))));
        assert!(matches!(build_equilibrium(&spec, 10.0), Err(Error::Infeasible(_))));
        let z = solve_zeta(&spec.species[0].fertility, &spec.species[0].mortality).unwrap();
        let eq = build_equilibrium(&spec, z * (1.0 - 1e-9)).unwrap();
        assert!(eq.species[1].newborn < 1e-7);
    }
}
