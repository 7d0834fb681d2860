//! Uniform age grids, sampled kernels, survival and reproduction summaries,
//! and scalar time functions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform discretization of the age interval `[0, A]` with `n` cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgeGrid {
    max_age: f64,
    cells: usize,
    step: f64,
}

impl AgeGrid {
    /// Builds a grid with `cells` cells over `[0, max_age]`.
    pub fn new(max_age: f64, cells: usize) -> Result<Self> {
        if !(max_age.is_finite() && max_age > 0.0) {
            return Err(Error::Config(format!("max age must be positive, got {max_age}")));
        }
        if cells < 2 {
            return Err(Error::Config(format!("a grid needs at least 2 cells, got {cells}")));
        }
        Ok(Self { max_age, cells, step: max_age / cells as f64 })
    }

    /// Builds a grid with a single cell. Only useful for exactness checks of
    /// the quadrature on constant integrands.
    pub fn single_cell(max_age: f64) -> Result<Self> {
        if !(max_age.is_finite() && max_age > 0.0) {
            return Err(Error::Config(format!("max age must be positive, got {max_age}")));
        }
        Ok(Self { max_age, cells: 1, step: max_age })
    }

    pub fn max_age(&self) -> f64 {
        self.max_age
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    /// Number of nodes, `n + 1`.
    pub fn len(&self) -> usize {
        self.cells + 1
    }

    /// Always false: a grid has at least two nodes.
    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    /// Age of node `j`.
    pub fn age(&self, j: usize) -> f64 {
        if j == self.cells {
            self.max_age
        } else {
            j as f64 * self.step
        }
    }

    /// All node ages.
    pub fn ages(&self) -> Vec<f64> {
        (0..self.len()).map(|j| self.age(j)).collect()
    }

    /// Index of the node nearest to `a` (clamped to the grid).
    pub fn nearest_index(&self, a: f64) -> usize {
        let j = (a / self.step).round();
        if j <= 0.0 {
            0
        } else {
            (j as usize).min(self.cells)
        }
    }

    /// Trapezoid rule for nodal values over the whole grid.
    pub fn trapezoid(&self, values: &[f64]) -> f64 {
        self.trapezoid_to(values, self.cells)
    }

    /// Trapezoid rule over the nodes `0..=last`.
    pub fn trapezoid_to(&self, values: &[f64], last: usize) -> f64 {
        debug_assert!(values.len() > last);
        if last == 0 {
            return 0.0;
        }
        let inner: f64 = values[1..last].iter().sum();
        self.step * (0.5 * (values[0] + values[last]) + inner)
    }

    /// Trapezoid rule for the product of two nodal sequences.
    pub fn trapezoid_product(&self, f: &[f64], g: &[f64]) -> f64 {
        debug_assert_eq!(f.len(), g.len());
        let n = self.cells;
        let inner: f64 = (1..n).map(|j| f[j] * g[j]).sum();
        self.step * (0.5 * (f[0] * g[0] + f[n] * g[n]) + inner)
    }

    /// Running trapezoid integral `C_j = ∫_0^{a_j} f`.
    pub fn cumulative(&self, values: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(values.len());
        let mut acc = 0.0;
        out.push(0.0);
        for j in 1..values.len() {
            acc += 0.5 * self.step * (values[j - 1] + values[j]);
            out.push(acc);
        }
        out
    }

    pub(crate) fn check_len(&self, len: usize, what: &str) -> Result<()> {
        if len != self.len() {
            return Err(Error::Config(format!(
                "{what} has {len} samples but the grid has {} nodes",
                self.len()
            )));
        }
        Ok(())
    }
}

/// Nodal samples of an age-dependent coefficient on a fixed grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    grid: AgeGrid,
    values: Vec<f64>,
}

impl Kernel {
    /// Wraps nodal values; the length must match the grid.
    pub fn new(grid: AgeGrid, values: Vec<f64>) -> Result<Self> {
        grid.check_len(values.len(), "kernel")?;
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Config(format!("kernel sample {v} is not finite")));
        }
        Ok(Self { grid, values })
    }

    /// Samples `f` at every node.
    pub fn from_fn(grid: AgeGrid, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(grid, grid.ages().into_iter().map(f).collect())
    }

    pub fn constant(grid: AgeGrid, value: f64) -> Self {
        Self { grid, values: vec![value; grid.len()] }
    }

    pub fn zeros(grid: AgeGrid) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn grid(&self) -> &AgeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_nonnegative(&self) -> bool {
        self.values.iter().all(|&v| v >= 0.0)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Piecewise-linear interpolation between nodes.
    pub fn eval(&self, a: f64) -> Result<f64> {
        let grid = &self.grid;
        if !(0.0..=grid.max_age()).contains(&a) {
            return Err(Error::Domain(format!("age {a} outside [0, {}]", grid.max_age())));
        }
        let x = a / grid.step();
        let j = (x.floor() as usize).min(grid.cells() - 1);
        let w = x - j as f64;
        Ok((1.0 - w) * self.values[j] + w * self.values[j + 1])
    }

    /// Trapezoid integral over the whole grid.
    pub fn integral(&self) -> f64 {
        self.grid.trapezoid(&self.values)
    }

    /// Pointwise sum with another kernel on the same grid.
    pub fn add(&self, other: &Kernel) -> Result<Kernel> {
        self.same_grid(other)?;
        Ok(Self {
            grid: self.grid,
            values: self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect(),
        })
    }

    /// Pointwise scaling.
    pub fn scaled(&self, factor: f64) -> Kernel {
        Self { grid: self.grid, values: self.values.iter().map(|v| v * factor).collect() }
    }

    /// Adds a constant to every sample.
    pub fn shifted(&self, offset: f64) -> Kernel {
        Self { grid: self.grid, values: self.values.iter().map(|v| v + offset).collect() }
    }

    pub(crate) fn same_grid(&self, other: &Kernel) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::Config("kernels live on different grids".into()));
        }
        Ok(())
    }
}

/// Named analytic kernel shapes accepted by scenario files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "kebab-case")]
pub enum KernelForm {
    Constant { value: f64 },
    /// `height` on `[lo, hi]`, zero elsewhere.
    Window { lo: f64, hi: f64, height: f64 },
    /// `height · exp(-((a - center) / width)^2)`.
    GaussianBump { center: f64, width: f64, height: f64 },
    /// Piecewise-linear through the given points, constant beyond them.
    Sampled { ages: Vec<f64>, values: Vec<f64> },
    /// `base + slope · a`.
    Linear { base: f64, slope: f64 },
    /// `Σ_k coefficients[k] · a^k`.
    Polynomial { coefficients: Vec<f64> },
    /// `slope · max(0, a - start)`.
    Ramp { start: f64, slope: f64 },
    /// Sum of several forms.
    Sum { terms: Vec<KernelForm> },
}

impl KernelForm {
    /// Evaluates the analytic form at age `a`.
    pub fn eval(&self, a: f64) -> f64 {
        match self {
            KernelForm::Constant { value } => *value,
            KernelForm::Window { lo, hi, height } => {
                if a >= *lo && a <= *hi {
                    *height
                } else {
                    0.0
                }
            }
            KernelForm::GaussianBump { center, width, height } => {
                let x = (a - center) / width;
                height * (-x * x).exp()
            }
            KernelForm::Sampled { ages, values } => interpolate(ages, values, a),
            KernelForm::Linear { base, slope } => base + slope * a,
            KernelForm::Polynomial { coefficients } => coefficients.iter().rev().fold(0.0, |acc, c| acc * a + c),
            KernelForm::Ramp { start, slope } => slope * (a - start).max(0.0),
            KernelForm::Sum { terms } => terms.iter().map(|t| t.eval(a)).sum(),
        }
    }

    /// Collects structural problems with the form.
    pub fn validate(&self, what: &str, errors: &mut Vec<String>) {
        match self {
            KernelForm::Window { lo, hi, .. } if lo > hi => {
                errors.push(format!("{what}: window lower bound {lo} exceeds upper bound {hi}"));
            }
            KernelForm::GaussianBump { width, .. } if *width <= 0.0 => {
                errors.push(format!("{what}: gaussian width must be positive"));
            }
            KernelForm::Sampled { ages, values } => {
                if ages.is_empty() || ages.len() != values.len() {
                    errors.push(format!(
                        "{what}: sampled kernel needs matching non-empty ages and values"
                    ));
                } else if ages.windows(2).any(|w| w[1] <= w[0]) {
                    errors.push(format!("{what}: sampled ages must be strictly increasing"));
                }
            }
            KernelForm::Sum { terms } => {
                for t in terms {
                    t.validate(what, errors);
                }
            }
            _ => {}
        }
    }

    /// Samples the form at the grid nodes.
    pub fn sample(&self, grid: AgeGrid) -> Result<Kernel> {
        Kernel::from_fn(grid, |a| self.eval(a))
    }
}

fn interpolate(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if x <= xs[0] {
        return ys[0];
    }
    if x >= xs[xs.len() - 1] {
        return ys[ys.len() - 1];
    }
    let k = xs.partition_point(|&v| v <= x);
    let (x0, x1, y0, y1) = (xs[k - 1], xs[k], ys[k - 1], ys[k]);
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

/// Demographic description of one species on the shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeciesSpec {
    pub mortality: Kernel,
    pub fertility: Kernel,
    /// Kernel through which this species is suppressed by its predator.
    pub interaction: Kernel,
    /// Species life span, snapped to the grid.
    pub max_age: f64,
}

impl SpeciesSpec {
    /// Builds and validates a species. An off-grid life span is snapped to
    /// the nearest node with a warning.
    pub fn new(mortality: Kernel, fertility: Kernel, interaction: Kernel, max_age: f64) -> Result<Self> {
        let grid = *mortality.grid();
        mortality.same_grid(&fertility)?;
        mortality.same_grid(&interaction)?;
        let mut errors = Vec::new();
        if !mortality.is_nonnegative() {
            errors.push("mortality must be nonnegative".to_string());
        }
        if !fertility.is_nonnegative() {
            errors.push("fertility must be nonnegative".to_string());
        }
        if !interaction.is_nonnegative() {
            errors.push("interaction kernel must be nonnegative".to_string());
        }
        if !(max_age > 0.0 && max_age <= grid.max_age() + 1e-12) {
            errors.push(format!(
                "species life span {max_age} must lie in (0, {}]",
                grid.max_age()
            ));
        }
        if !errors.is_empty() {
            return Err(Error::Validation(errors));
        }
        let j = grid.nearest_index(max_age);
        let snapped = grid.age(j);
        if (snapped - max_age).abs() > 1e-9 * grid.max_age() {
            log::warn!("species life span {max_age} snapped to grid node {snapped}");
        }
        if fertility.values()[j + 1..].iter().any(|&v| v != 0.0) {
            return Err(Error::Validation(vec![format!(
                "fertility must vanish beyond the life span {snapped}"
            )]));
        }
        Ok(Self { mortality, fertility, interaction, max_age: snapped })
    }

    pub fn grid(&self) -> &AgeGrid {
        self.mortality.grid()
    }
}

/// Survival probability `π(a) = exp(-∫_0^a μ)` by the trapezoid rule.
pub fn survival_probability(mortality: &Kernel, a: f64) -> Result<f64> {
    let grid = mortality.grid();
    if !(0.0..=grid.max_age() * (1.0 + 1e-12)).contains(&a) {
        return Err(Error::Domain(format!("age {a} outside [0, {}]", grid.max_age())));
    }
    let a = a.min(grid.max_age());
    let mu = mortality.values();
    let x = a / grid.step();
    let j = (x.floor() as usize).min(grid.cells());
    let mut integral = 0.0;
    for i in 0..j {
        integral += 0.5 * grid.step() * (mu[i] + mu[i + 1]);
    }
    let rest = a - grid.age(j);
    if rest > 0.0 && j < grid.cells() {
        let end = mortality.eval(a)?;
        integral += 0.5 * rest * (mu[j] + end);
    }
    Ok((-integral).exp())
}

/// Survival probability at every node.
pub fn survival_profile(mortality: &Kernel) -> Vec<f64> {
    mortality
        .grid()
        .cumulative(mortality.values())
        .into_iter()
        .map(|c| (-c).exp())
        .collect()
}

/// Expected lifetime offspring `R = ∫ β π`.
pub fn net_reproduction(spec: &SpeciesSpec) -> f64 {
    let pi = survival_profile(&spec.mortality);
    spec.grid().trapezoid_product(spec.fertility.values(), &pi)
}

/// A scalar function of time used for environmental parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TimeFunction {
    Constant { value: f64 },
    /// `mean + amplitude · sin(2π (t - phase) / period)`.
    Periodic { mean: f64, amplitude: f64, period: f64, phase: f64 },
    /// Piecewise-linear interpolation through `(times, values)`.
    Sampled { times: Vec<f64>, values: Vec<f64> },
}

impl TimeFunction {
    pub fn constant(value: f64) -> Self {
        TimeFunction::Constant { value }
    }

    /// Evaluates the function at time `t`.
    pub fn eval(&self, t: f64) -> Result<f64> {
        match self {
            TimeFunction::Constant { value } => Ok(*value),
            TimeFunction::Periodic { mean, amplitude, period, phase } => {
                Ok(mean + amplitude * (2.0 * std::f64::consts::PI * (t - phase) / period).sin())
            }
            TimeFunction::Sampled { times, values } => {
                let (first, last) = (times[0], times[times.len() - 1]);
                if t < first || t > last {
                    return Err(Error::Domain(format!(
                        "time {t} outside the sampled range [{first}, {last}]"
                    )));
                }
                Ok(interpolate(times, values, t))
            }
        }
    }

    /// Time average over one period (periodic), the sampled range (sampled),
    /// or the value itself (constant).
    pub fn mean(&self) -> f64 {
        match self {
            TimeFunction::Constant { value } => *value,
            TimeFunction::Periodic { mean, .. } => *mean,
            TimeFunction::Sampled { times, values } => {
                if times.len() == 1 {
                    return values[0];
                }
                let area: f64 = times
                    .windows(2)
                    .zip(values.windows(2))
                    .map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1]))
                    .sum();
                area / (times[times.len() - 1] - times[0])
            }
        }
    }

    /// Lower bound of the function over all admissible times.
    pub fn lower_bound(&self) -> f64 {
        match self {
            TimeFunction::Constant { value } => *value,
            TimeFunction::Periodic { mean, amplitude, .. } => mean - amplitude.abs(),
            TimeFunction::Sampled { values, .. } => values.iter().copied().fold(f64::INFINITY, f64::min),
        }
    }

    /// Period of the function when it has one.
    pub fn period(&self) -> Option<f64> {
        match self {
            TimeFunction::Periodic { period, .. } => Some(*period),
            _ => None,
        }
    }

    /// Collects structural problems.
    pub fn validate(&self, what: &str, errors: &mut Vec<String>) {
        match self {
            TimeFunction::Constant { value } if !value.is_finite() => {
                errors.push(format!("{what}: constant must be finite"));
            }
            TimeFunction::Periodic { period, .. } if *period <= 0.0 => {
                errors.push(format!("{what}: period must be positive"));
            }
            TimeFunction::Sampled { times, values } => {
                if times.is_empty() || times.len() != values.len() {
                    errors.push(format!("{what}: sampled function needs matching non-empty times and values"));
                } else if times.windows(2).any(|w| w[1] <= w[0]) {
                    errors.push(format!("{what}: sample times must be strictly increasing"));
                }
            }
            _ => {}
        }
    }
}

/// Evaluates a time function.
pub fn eval_time_function(f: &TimeFunction, t: f64) -> Result<f64> {
    f.eval(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn grid_nodes_are_uniform() {
        let g = AgeGrid::new(2.0, 4).unwrap();
        assert_eq!(g.ages(), vec![0.0, 0.5, 1.0, 1.5, 2.0]);
        assert!(AgeGrid::new(1.0, 1).is_err());
        assert!(AgeGrid::new(-1.0, 10).is_err());
    }

    #[test]
    fn survival_zero_mortality_is_one() {
        let g = AgeGrid::new(5.0, 50).unwrap();
        let mu = Kernel::zeros(g);
        for a in [0.0, 1.3, 5.0] {
            assert_eq!(survival_probability(&mu, a).unwrap(), 1.0);
        }
    }

    #[test]
    fn survival_constant_mortality() {
        let g = AgeGrid::new(2.0, 1000).unwrap();
        let mu = Kernel::constant(g, 0.5);
        assert_relative_eq!(survival_probability(&mu, 2.0).unwrap(), (-1.0f64).exp(), max_relative = 1e-6);
        let single = AgeGrid::single_cell(2.0).unwrap();
        let mu = Kernel::constant(single, 0.5);
        assert!((survival_probability(&mu, 2.0).unwrap() - (-1.0f64).exp()).abs() <= 1e-12);
    }

    #[test]
    fn survival_rejects_out_of_range() {
        let g = AgeGrid::new(2.0, 10).unwrap();
        let mu = Kernel::constant(g, 0.5);
        assert!(matches!(survival_probability(&mu, 2.5), Err(Error::Domain(_))));
        assert!(matches!(survival_probability(&mu, -0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn net_reproduction_examples() {
        let g = AgeGrid::new(1.0, 100).unwrap();
        let s = SpeciesSpec::new(Kernel::zeros(g), Kernel::constant(g, 2.0), Kernel::zeros(g), 1.0).unwrap();
        assert_relative_eq!(net_reproduction(&s), 2.0, epsilon = 1e-12);

        let g = AgeGrid::new(10.0, 20_000).unwrap();
        let s = SpeciesSpec::new(Kernel::constant(g, 1.0), Kernel::constant(g, 3.0), Kernel::zeros(g), 10.0).unwrap();
        let oracle = 3.0 * (1.0 - (-10.0f64).exp());
        assert_relative_eq!(net_reproduction(&s), oracle, max_relative = 1e-6);
        assert!((oracle - 2.999864).abs() < 1e-6);

        let s = SpeciesSpec::new(Kernel::constant(g, 1.0), Kernel::zeros(g), Kernel::zeros(g), 10.0).unwrap();
        assert_eq!(net_reproduction(&s), 0.0);
    }

    #[test]
    fn fertility_beyond_life_span_is_rejected() {
        let g = AgeGrid::new(2.0, 20).unwrap();
        let res = SpeciesSpec::new(Kernel::zeros(g), Kernel::constant(g, 1.0), Kernel::zeros(g), 1.0);
        assert!(res.is_err());
    }

    #[test]
    fn time_function_examples() {
        assert_eq!(TimeFunction::constant(5.0).eval(17.0).unwrap(), 5.0);
        let p = TimeFunction::Periodic { mean: 1.0, amplitude: 0.5, period: 2.0, phase: 0.0 };
        assert_relative_eq!(p.eval(0.5).unwrap(), 1.5, epsilon = 1e-15);
        let s = TimeFunction::Sampled { times: vec![0.0, 1.0], values: vec![0.0, 2.0] };
        assert_relative_eq!(s.eval(0.25).unwrap(), 0.5, epsilon = 1e-15);
        assert!(s.eval(1.5).is_err());
        assert_relative_eq!(s.mean(), 1.0);
    }

    #[test]
    fn kernel_forms_sample_on_grid() {
        let g = AgeGrid::new(4.0, 4).unwrap();
        let w = KernelForm::Window { lo: 1.0, hi: 2.0, height: 3.0 }.sample(g).unwrap();
        assert_eq!(w.values(), &[0.0, 3.0, 3.0, 0.0, 0.0]);
        let s = KernelForm::Sampled { ages: vec![0.0, 4.0], values: vec![0.0, 4.0] }.sample(g).unwrap();
        assert_eq!(s.values(), &[0.0, 1.0, 2.0, 3.0, 4.0]);
        assert_relative_eq!(s.eval(2.5).unwrap(), 2.5);
        let p = KernelForm::Polynomial { coefficients: vec![0.2, 0.0, 0.1] }.sample(g).unwrap();
        assert_eq!(p.values(), &[0.2, 0.30000000000000004, 0.6000000000000001, 1.1, 1.8]);
        let r = KernelForm::Ramp { start: 2.0, slope: 1.5 }.sample(g).unwrap();
        assert_eq!(r.values(), &[0.0, 0.0, 0.0, 1.5, 3.0]);
    }
}
