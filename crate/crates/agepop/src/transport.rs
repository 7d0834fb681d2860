//! Time stepping of age-structured transport systems along characteristics.
//!
//! Every compartment obeys `∂_t x + ∂_a x = -r(a, t) x` with a renewal
//! condition at `a = 0`. With `dt = da` the density moves exactly one cell
//! per step, so the update is a shift followed by the exact decay factor of
//! the frozen rate along the characteristic. Rates are averaged over the two
//! end nodes of each characteristic segment, which makes the discrete
//! survival match the trapezoid survival used by the equilibrium module.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{AgeGrid, Kernel, SpeciesSpec};

/// Densities of every compartment at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationState {
    pub t: f64,
    pub densities: Vec<Vec<f64>>,
}

impl PopulationState {
    /// All-zero state with `compartments` rows.
    pub fn zeros(grid: &AgeGrid, compartments: usize) -> Self {
        Self { t: 0.0, densities: vec![vec![0.0; grid.len()]; compartments] }
    }

    /// Per-compartment totals `∫ x da`.
    pub fn totals(&self, grid: &AgeGrid) -> Vec<f64> {
        self.densities.iter().map(|d| grid.trapezoid(d)).collect()
    }

    /// Smallest density and its (compartment, node) location.
    pub fn min_density(&self) -> (f64, usize, usize) {
        let mut best = (f64::INFINITY, 0, 0);
        for (i, row) in self.densities.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v < best.0 {
                    best = (v, i, j);
                }
            }
        }
        best
    }
}

/// Advances one compartment by one step of length `da`.
///
/// `rate[j]` is the total loss rate at node `j` (negative values are gains).
/// The node `a = 0` receives `newborn` and the node `a = A` is emptied.
pub fn transport_compartment(grid: &AgeGrid, density: &[f64], rate: &[f64], newborn: f64) -> Vec<f64> {
    let n = grid.cells();
    let dt = grid.step();
    let mut out = vec![0.0; n + 1];
    out[0] = newborn;
    for j in 1..n {
        let r = 0.5 * (rate[j - 1] + rate[j]);
        out[j] = density[j - 1] * (-r * dt).exp();
    }
    out
}

/// Checks that a freshly computed state is finite and nonnegative.
pub fn audit_positivity(grid: &AgeGrid, state: &PopulationState) -> Result<()> {
    for (i, row) in state.densities.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Invariant {
                    t: state.t,
                    age: grid.age(j),
                    compartment: i,
                    message: format!("density {v} is negative or not finite"),
                });
            }
        }
    }
    Ok(())
}

/// Common interface of every age-structured model driven by a scalar control.
pub trait AgeModel: Sync {
    fn grid(&self) -> &AgeGrid;

    /// Column labels, one per compartment.
    fn compartment_names(&self) -> Vec<String>;

    /// Advances `state` by one step of length `da` under control value `control`.
    fn advance(&self, state: &PopulationState, control: f64) -> Result<PopulationState>;

    /// Advances `state` by `dt`, which must equal the grid step.
    fn step(&self, state: &PopulationState, dt: f64, control: f64) -> Result<PopulationState> {
        let da = self.grid().step();
        if (dt - da).abs() > 1e-12 * da {
            return Err(Error::Config(format!(
                "time step {dt} must equal the age step {da}"
            )));
        }
        let next = self.advance(state, control)?;
        audit_positivity(self.grid(), &next)?;
        Ok(next)
    }
}

/// Single-species linear model `∂_t Y + ∂_a Y = -μ Y`, `Y(0,t) = ∫ β Y`.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub species: SpeciesSpec,
}

impl AgeModel for LinearModel {
    fn grid(&self) -> &AgeGrid {
        self.species.grid()
    }

    fn compartment_names(&self) -> Vec<String> {
        vec!["1".into()]
    }

    fn advance(&self, state: &PopulationState, control: f64) -> Result<PopulationState> {
        let grid = self.grid();
        let y = &state.densities[0];
        let births = grid.trapezoid_product(self.species.fertility.values(), y);
        let rate: Vec<f64> = self.species.mortality.values().iter().map(|m| m + control).collect();
        Ok(PopulationState {
            t: state.t + grid.step(),
            densities: vec![transport_compartment(grid, y, &rate, births)],
        })
    }
}

/// Multi-species network with nonlocal interaction `γ_ij = ∫ g_ij x_j`.
#[derive(Debug, Clone)]
pub struct GeneralNetworkSpec {
    pub species: Vec<SpeciesSpec>,
    /// `adjacency[i][j] = 1` when species `j` suppresses species `i`.
    pub adjacency: Vec<Vec<u8>>,
    /// Interaction kernel for every nonzero adjacency entry.
    pub kernels: Vec<Vec<Option<Kernel>>>,
    /// Which species receive the control as an extra loss rate.
    pub control_placement: Vec<u8>,
}

impl GeneralNetworkSpec {
    /// Cyclic preset: species `i` is suppressed by species `i + 1` (mod N)
    /// through its own interaction kernel; the control acts on species 1.
    pub fn cyclic(species: Vec<SpeciesSpec>) -> Result<Self> {
        let n = species.len();
        if n < 2 {
            return Err(Error::Config("a cyclic network needs at least two species".into()));
        }
        let mut adjacency = vec![vec![0u8; n]; n];
        let mut kernels = vec![vec![None; n]; n];
        for i in 0..n {
            let j = (i + 1) % n;
            adjacency[i][j] = 1;
            kernels[i][j] = Some(species[i].interaction.clone());
        }
        let mut control_placement = vec![0u8; n];
        control_placement[0] = 1;
        let spec = Self { species, adjacency, kernels, control_placement };
        spec.validate()?;
        Ok(spec)
    }

    pub fn len(&self) -> usize {
        self.species.len()
    }

    pub fn is_empty(&self) -> bool {
        self.species.is_empty()
    }

    pub fn grid(&self) -> &AgeGrid {
        self.species[0].grid()
    }

    /// Checks dimensions and 0/1 entries, reporting every problem.
    pub fn validate(&self) -> Result<()> {
        let n = self.species.len();
        let mut errors = Vec::new();
        if n == 0 {
            errors.push("network has no species".to_string());
        }
        if self.adjacency.len() != n || self.adjacency.iter().any(|r| r.len() != n) {
            errors.push(format!("adjacency must be {n}x{n}"));
        }
        if self.kernels.len() != n || self.kernels.iter().any(|r| r.len() != n) {
            errors.push(format!("interaction kernel table must be {n}x{n}"));
        }
        if self.control_placement.len() != n {
            errors.push(format!("control placement must have {n} entries"));
        }
        if self.adjacency.iter().flatten().chain(&self.control_placement).any(|&v| v > 1) {
            errors.push("adjacency and control placement entries must be 0 or 1".to_string());
        }
        if errors.is_empty() {
            for i in 0..n {
                for j in 0..n {
                    if self.adjacency[i][j] == 1 && self.kernels[i][j].is_none() {
                        errors.push(format!("missing interaction kernel for entry ({}, {})", i + 1, j + 1));
                    }
                }
            }
        }
        if n > 0 {
            let grid = self.species[0].grid();
            if self.species.iter().any(|s| s.grid() != grid) {
                errors.push("all species must share one grid".to_string());
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errors))
        }
    }
}

/// Interaction intensities `γ_ij(t) = ∫ g_ij(a) x_j(a, t) da`.
pub fn interaction_intensities(spec: &GeneralNetworkSpec, state: &PopulationState) -> Result<Vec<Vec<f64>>> {
    let n = spec.len();
    if state.densities.len() != n {
        return Err(Error::Config(format!(
            "state has {} rows but the network has {n} species",
            state.densities.len()
        )));
    }
    let grid = spec.grid();
    for row in &state.densities {
        grid.check_len(row.len(), "density")?;
    }
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if spec.adjacency[i][j] == 1 {
                let g = spec.kernels[i][j].as_ref().expect("validated kernel");
                out[i][j] = grid.trapezoid_product(g.values(), &state.densities[j]);
            }
        }
    }
    Ok(out)
}

/// Network model driven by a scalar control on the placed species.
#[derive(Debug, Clone)]
pub struct NetworkModel {
    pub spec: GeneralNetworkSpec,
}

impl AgeModel for NetworkModel {
    fn grid(&self) -> &AgeGrid {
        self.spec.grid()
    }

    fn compartment_names(&self) -> Vec<String> {
        (1..=self.spec.len()).map(|i| i.to_string()).collect()
    }

    fn advance(&self, state: &PopulationState, control: f64) -> Result<PopulationState> {
        let grid = self.grid();
        let gamma = interaction_intensities(&self.spec, state)?;
        let densities = self
            .spec
            .species
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let x = &state.densities[i];
                let births = grid.trapezoid_product(s.fertility.values(), x);
                let extra: f64 =
                    gamma[i].iter().sum::<f64>() + f64::from(self.spec.control_placement[i]) * control;
                let rate: Vec<f64> = s.mortality.values().iter().map(|m| m + extra).collect();
                transport_compartment(grid, x, &rate, births)
            })
            .collect();
        Ok(PopulationState { t: state.t + grid.step(), densities })
    }
}

/// Output of a controller at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlSample {
    /// Control value applied during the next step.
    pub u: f64,
    /// Lyapunov value at the current state, when the controller tracks one.
    pub lyapunov: Option<f64>,
    /// The raw law was clamped to the saturation bounds.
    pub clamped: bool,
    /// The small-denominator guard fired.
    pub guarded: bool,
}

impl ControlSample {
    pub fn plain(u: f64) -> Self {
        Self { u, lyapunov: None, clamped: false, guarded: false }
    }
}

/// A feedback or feedforward policy evaluated once per step.
pub trait Controller {
    fn control(&mut self, state: &PopulationState) -> Result<ControlSample>;
}

/// Constant control.
#[derive(Debug, Clone, Copy)]
pub struct ConstantControl(pub f64);

impl Controller for ConstantControl {
    fn control(&mut self, _state: &PopulationState) -> Result<ControlSample> {
        Ok(ControlSample::plain(self.0))
    }
}

/// Output thinning options.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutputOptions {
    /// Record totals every `stride` steps.
    pub stride: usize,
    /// Record a full profile snapshot every `snapshot_stride` steps (0 = never).
    pub snapshot_stride: usize,
}

impl Default for OutputOptions {
    fn default() -> Self {
        Self { stride: 1, snapshot_stride: 0 }
    }
}

/// Time series produced by [`simulate`].
#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub compartment_names: Vec<String>,
    pub times: Vec<f64>,
    /// `totals[k][i]`: total of compartment `i` at recorded time `k`.
    pub totals: Vec<Vec<f64>>,
    /// Control applied from each recorded time onwards.
    pub controls: Vec<f64>,
    /// Lyapunov values (NaN when no controller tracks one).
    pub lyapunov: Vec<f64>,
    pub snapshots: Vec<PopulationState>,
    pub final_state: PopulationState,
    /// Smallest density seen over every step, with its location.
    pub min_density: f64,
    pub min_location: (f64, f64, usize),
    pub clamp_events: usize,
    pub guard_events: usize,
}

/// Runs `model` from `initial` up to `horizon` (rounded to whole steps).
pub fn simulate(
    model: &dyn AgeModel,
    initial: &PopulationState,
    horizon: f64,
    mut controller: Option<&mut dyn Controller>,
    options: OutputOptions,
) -> Result<SimOutput> {
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::Config(format!("horizon must be positive, got {horizon}")));
    }
    let grid = *model.grid();
    let names = model.compartment_names();
    if initial.densities.len() != names.len() {
        return Err(Error::Config(format!(
            "initial state has {} rows, model expects {}",
            initial.densities.len(),
            names.len()
        )));
    }
    for row in &initial.densities {
        grid.check_len(row.len(), "initial density")?;
    }
    audit_positivity(&grid, initial)?;
    let stride = options.stride.max(1);
    let steps = (horizon / grid.step()).round().max(1.0) as usize;
    let mut out = SimOutput {
        compartment_names: names,
        times: Vec::new(),
        totals: Vec::new(),
        controls: Vec::new(),
        lyapunov: Vec::new(),
        snapshots: Vec::new(),
        final_state: initial.clone(),
        min_density: f64::INFINITY,
        min_location: (0.0, 0.0, 0),
        clamp_events: 0,
        guard_events: 0,
    };
    let mut state = initial.clone();
    for k in 0..=steps {
        let sample = match controller.as_deref_mut() {
            Some(c) => c.control(&state)?,
            None => ControlSample::plain(0.0),
        };
        if !sample.u.is_finite() {
            return Err(Error::Numeric(format!("controller returned {} at t = {}", sample.u, state.t)));
        }
        out.clamp_events += usize::from(sample.clamped);
        out.guard_events += usize::from(sample.guarded);
        let (m, i, j) = state.min_density();
        if m < out.min_density {
            out.min_density = m;
            out.min_location = (state.t, grid.age(j), i);
        }
        if k % stride == 0 || k == steps {
            out.times.push(state.t);
            out.totals.push(state.totals(&grid));
            out.controls.push(sample.u);
            out.lyapunov.push(sample.lyapunov.unwrap_or(f64::NAN));
        }
        if options.snapshot_stride > 0 && k % options.snapshot_stride == 0 {
            out.snapshots.push(state.clone());
        }
        if k == steps {
            break;
        }
        let mut next = model.step(&state, grid.step(), sample.u)?;
        next.t = (k + 1) as f64 * grid.step() + initial.t;
        state = next;
    }
    out.final_state = state;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::SpeciesSpec;

    fn linear(grid: AgeGrid, mu: f64, beta: f64) -> LinearModel {
        let s = SpeciesSpec::new(
            Kernel::constant(grid, mu),
            Kernel::constant(grid, beta),
            Kernel::zeros(grid),
            grid.max_age(),
        )
        .unwrap();
        LinearModel { species: s }
    }

    #[test]
    fn pure_advection_shifts_one_cell() {
        let g = AgeGrid::new(1.0, 10).unwrap();
        let m = linear(g, 0.0, 0.0);
        let mut s = PopulationState::zeros(&g, 1);
        s.densities[0][3] = 1.0;
        let next = m.step(&s, g.step(), 0.0).unwrap();
        let mut expected = vec![0.0; 11];
        expected[4] = 1.0;
        assert_eq!(next.densities[0], expected);
    }

    #[test]
    fn constant_mortality_is_exact() {
        let g = AgeGrid::new(4.0, 40).unwrap();
        let m = linear(g, 0.5, 0.0);
        let mut s = PopulationState::zeros(&g, 1);
        for j in 0..=g.cells() {
            s.densities[0][j] = (1.0 + g.age(j)).recip();
        }
        let steps = 10;
        let mut cur = s.clone();
        for _ in 0..steps {
            cur = m.step(&cur, g.step(), 0.0).unwrap();
        }
        let t = steps as f64 * g.step();
        for j in steps..g.cells() {
            let exact = s.densities[0][j - steps] * (-0.5 * t).exp();
            assert!((cur.densities[0][j] - exact).abs() <= 1e-10 * exact);
        }
    }

    #[test]
    fn wrong_time_step_is_rejected() {
        let g = AgeGrid::new(1.0, 10).unwrap();
        let m = linear(g, 0.0, 0.0);
        let s = PopulationState::zeros(&g, 1);
        assert!(matches!(m.step(&s, 0.05, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn interaction_intensity_of_constant() {
        let g = AgeGrid::new(1.0, 10).unwrap();
        let sp = |gval: f64| {
            SpeciesSpec::new(Kernel::zeros(g), Kernel::zeros(g), Kernel::constant(g, gval), 1.0).unwrap()
        };
        let spec = GeneralNetworkSpec::cyclic(vec![sp(1.0), sp(1.0), sp(1.0)]).unwrap();
        let mut s = PopulationState::zeros(&g, 3);
        assert!(interaction_intensities(&spec, &s).unwrap().iter().flatten().all(|&v| v == 0.0));
        s.densities[1] = vec![1.0; 11];
        let gm = interaction_intensities(&spec, &s).unwrap();
        assert!((gm[0][1] - 1.0).abs() < 1e-14);
        s.densities[1] = vec![2.0; 11];
        let gm2 = interaction_intensities(&spec, &s).unwrap();
        assert!((gm2[0][1] - 2.0 * gm[0][1]).abs() < 1e-14);
        let bad = PopulationState::zeros(&g, 2);
        assert!(interaction_intensities(&spec, &bad).is_err());
    }

    #[test]
    fn zero_initial_data_stays_zero() {
        let g = AgeGrid::new(1.0, 10).unwrap();
        let m = linear(g, 0.3, 2.0);
        let out = simulate(&m, &PopulationState::zeros(&g, 1), 2.0, None, OutputOptions::default()).unwrap();
        assert!(out.totals.iter().flatten().all(|&v| v == 0.0));
        assert_eq!(out.times.len(), 21);
    }

    #[test]
    fn mass_conserved_without_mortality_until_outflow() {
        let g = AgeGrid::new(1.0, 100).unwrap();
        let m = linear(g, 0.0, 0.0);
        let mut s = PopulationState::zeros(&g, 1);
        for j in 10..40 {
            s.densities[0][j] = 1.0;
        }
        let before = s.totals(&g)[0];
        let mut cur = s;
        for _ in 0..20 {
            cur = m.step(&cur, g.step(), 0.0).unwrap();
        }
        assert!((cur.totals(&g)[0] - before).abs() < 1e-12);
    }
}
