//! Scenario files: a TOML description of one run (model, grid, horizon,
//! controller or strategy, initial condition, output options and seed).

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::equilibrium::Equilibrium;
use crate::error::{Error, Result};
use crate::grid::{AgeGrid, KernelForm, SpeciesSpec, TimeFunction};
use crate::mosquito::{MosquitoEquilibrium, MosquitoSpec, Release, Strategy};
use crate::transport::{GeneralNetworkSpec, OutputOptions, PopulationState};
use crate::verification::{Tolerances, TOLERANCES};

/// Version of the scenario schema understood by this build.
pub const SCHEMA_VERSION: u32 = 1;

/// Model families a scenario can describe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "general-network")]
    GeneralNetwork,
    #[serde(rename = "cyclic-N")]
    Cyclic,
    #[serde(rename = "mosquito-bio")]
    MosquitoBio,
    #[serde(rename = "mosquito-genetic")]
    MosquitoGenetic,
    #[serde(rename = "linear-demographic")]
    LinearDemographic,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::GeneralNetwork => "general-network",
            ModelKind::Cyclic => "cyclic-N",
            ModelKind::MosquitoBio => "mosquito-bio",
            ModelKind::MosquitoGenetic => "mosquito-genetic",
            ModelKind::LinearDemographic => "linear-demographic",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub max_age: f64,
    pub cells: usize,
}

/// Demographic kernels of one species. Every kernel is optional at parse
/// time so that validation can list all missing ones at once.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeciesConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mortality: Option<KernelForm>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fertility: Option<KernelForm>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interaction: Option<KernelForm>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_age: Option<f64>,
}

/// One suppression link: `predator` lowers the survival of `prey` (1-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InteractionConfig {
    pub prey: usize,
    pub predator: usize,
    pub kernel: KernelForm,
}

/// Structure of a general network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub adjacency: Vec<Vec<u8>>,
    pub control_placement: Vec<u8>,
    #[serde(default)]
    pub interactions: Vec<InteractionConfig>,
}

/// Controller settings for network models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    /// Equilibrium control.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_star: Option<f64>,
    /// Equilibrium control as a fraction of the first growth exponent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_star_fraction: Option<f64>,
    #[serde(default = "one")]
    pub theta: f64,
    #[serde(default = "one")]
    pub terminal_gain: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon_z: Option<f64>,
    /// `false` applies the equilibrium control open loop.
    #[serde(default = "yes")]
    pub feedback: bool,
    /// Constant control for linear and general-network models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constant: Option<f64>,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

impl Default for ControllerSection {
    fn default() -> Self {
        Self {
            u_star: None,
            u_star_fraction: None,
            theta: 1.0,
            terminal_gain: 1.0,
            u_min: None,
            u_max: None,
            epsilon_z: None,
            feedback: true,
            constant: None,
        }
    }
}

/// Mosquito parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MosquitoConfig {
    pub aquatic_window: f64,
    pub aquatic_mortality: Option<KernelForm>,
    pub crowding_mortality: Option<KernelForm>,
    pub female_mortality: Option<KernelForm>,
    pub male_mortality: Option<KernelForm>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub young_female_mortality: Option<KernelForm>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mated_female_mortality: Option<KernelForm>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sterile_male_mortality: Option<KernelForm>,
    pub emergence: Option<KernelForm>,
    pub male_weight: Option<KernelForm>,
    pub base_fertility: Option<KernelForm>,
    pub sex_ratio: f64,
    pub saturation: f64,
    pub inhibition: f64,
    pub carrying_capacity: TimeFunction,
    pub growth_rate: TimeFunction,
    pub competition: TimeFunction,
    #[serde(default)]
    pub releases: Vec<Release>,
    /// Release age window; defaults to five age steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub release_window: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<Strategy>,
    /// Equilibrium aquatic control `P*`.
    #[serde(default)]
    pub p_star: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma1: Option<f64>,
    /// Also run the uncontrolled twin for comparison.
    #[serde(default = "yes")]
    pub twin: bool,
}

/// Initial-condition recipes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "recipe", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialCondition {
    /// Steady state scaled by `e^{η_i}` and, optionally, multiplied by
    /// `1 + shape_amplitude · sin(shape_frequency · a)`.
    Equilibrium {
        #[serde(default)]
        eta: Vec<f64>,
        #[serde(default)]
        shape_amplitude: f64,
        #[serde(default = "one")]
        shape_frequency: f64,
    },
    /// Steady state scaled by `e^{η_i}` with `η_i` uniform in `[-radius, radius]`,
    /// drawn from the scenario seed.
    RandomEquilibrium { radius: f64 },
    /// `scale · e^{-rate a}` in every compartment.
    Exponential { scale: f64, rate: f64 },
    /// Nodal values, one row per compartment.
    Sampled { profiles: Vec<Vec<f64>> },
    /// Mosquito steady state with one scale per compartment (a single value
    /// applies to all).
    MosquitoEquilibrium {
        #[serde(default)]
        scale: Vec<f64>,
    },
}

impl Default for InitialCondition {
    fn default() -> Self {
        InitialCondition::Equilibrium { eta: Vec::new(), shape_amplitude: 0.0, shape_frequency: 1.0 }
    }
}

/// Output options of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "one_usize")]
    pub stride: usize,
    #[serde(default)]
    pub snapshot_stride: usize,
    /// Relative L¹ distance to the steady state counted as converged.
    #[serde(default = "default_convergence")]
    pub convergence_tolerance: f64,
}

fn one_usize() -> usize {
    1
}

fn default_convergence() -> f64 {
    0.05
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { stride: 1, snapshot_stride: 0, convergence_tolerance: default_convergence() }
    }
}

impl OutputConfig {
    pub fn options(&self) -> OutputOptions {
        OutputOptions { stride: self.stride, snapshot_stride: self.snapshot_stride }
    }
}

/// Per-scenario tolerance overrides.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToleranceOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positivity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lyapunov_slack: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sign_floor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_l1: Option<f64>,
}

/// A complete run description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    pub kind: ModelKind,
    #[serde(default)]
    pub seed: u64,
    pub horizon: f64,
    pub grid: GridConfig,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub species: Vec<SpeciesConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<NetworkConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controller: Option<ControllerSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mosquito: Option<MosquitoConfig>,
    #[serde(default)]
    pub initial: InitialCondition,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub tolerances: ToleranceOverrides,
}

/// Parses and validates a scenario from TOML text.
pub fn parse_scenario(text: &str) -> Result<Scenario> {
    let scenario: Scenario = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    scenario.validate()?;
    Ok(scenario)
}

/// Loads and validates a scenario file.
pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_scenario(&text)
}

/// Writes a scenario as TOML.
pub fn save_scenario(scenario: &Scenario, path: &Path) -> Result<()> {
    std::fs::write(path, scenario.to_toml()?).map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
}

fn check_form(form: &Option<KernelForm>, what: &str, errors: &mut Vec<String>) {
    match form {
        None => errors.push(format!("missing kernel: {what}")),
        Some(f) => f.validate(what, errors),
    }
}

impl Scenario {
    /// Canonical TOML text.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// SHA-256 of the canonical TOML text, in hex.
    pub fn config_hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Tolerance table with the scenario overrides applied.
    pub fn tolerances(&self) -> Tolerances {
        let o = &self.tolerances;
        Tolerances {
            positivity: o.positivity.unwrap_or(TOLERANCES.positivity),
            lyapunov_slack: o.lyapunov_slack.unwrap_or(TOLERANCES.lyapunov_slack),
            sign_floor: o.sign_floor.unwrap_or(TOLERANCES.sign_floor),
            oracle_l1: o.oracle_l1.unwrap_or(TOLERANCES.oracle_l1),
            ..TOLERANCES
        }
    }

    /// Checks the whole scenario and reports every problem found.
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            errors.push(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if !(self.grid.max_age > 0.0 && self.grid.max_age.is_finite()) {
            errors.push("grid.max_age must be positive".into());
        }
        if self.grid.cells == 0 {
            errors.push("grid.cells must be positive".into());
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            errors.push("horizon must be positive".into());
        }
        if self.output.stride == 0 {
            errors.push("output.stride must be positive".into());
        }
        match self.kind {
            ModelKind::LinearDemographic | ModelKind::GeneralNetwork | ModelKind::Cyclic => {
                self.validate_species(&mut errors);
            }
            ModelKind::MosquitoBio | ModelKind::MosquitoGenetic => self.validate_mosquito(&mut errors),
        }
        match self.kind {
            ModelKind::LinearDemographic if self.species.len() != 1 => {
                errors.push(format!("linear-demographic needs exactly one species, found {}", self.species.len()));
            }
            ModelKind::Cyclic => {
                if self.species.len() < 3 {
                    errors.push(format!("cyclic-N needs at least three species, found {}", self.species.len()));
                }
                match &self.controller {
                    None => errors.push("missing section: controller".into()),
                    Some(c) => match (c.u_star, c.u_star_fraction) {
                        (None, None) => errors.push("controller needs u_star or u_star_fraction".into()),
                        (Some(_), Some(_)) => errors.push("controller.u_star and u_star_fraction are exclusive".into()),
                        (_, Some(f)) if !(f > 0.0 && f < 1.0) => {
                            errors.push("controller.u_star_fraction must lie in (0, 1)".into())
                        }
                        _ => {}
                    },
                }
            }
            ModelKind::GeneralNetwork => self.validate_network(&mut errors),
            _ => {}
        }
        self.validate_initial(&mut errors);
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errors))
        }
    }

    fn validate_species(&self, errors: &mut Vec<String>) {
        if self.species.is_empty() {
            errors.push("missing section: species".into());
        }
        let network = self.kind != ModelKind::LinearDemographic;
        for (i, s) in self.species.iter().enumerate() {
            let label = format!("species[{}]", i + 1);
            check_form(&s.mortality, &format!("{label}.mortality"), errors);
            check_form(&s.fertility, &format!("{label}.fertility"), errors);
            if network && self.kind == ModelKind::Cyclic {
                check_form(&s.interaction, &format!("{label}.interaction"), errors);
            }
        }
    }

    fn validate_network(&self, errors: &mut Vec<String>) {
        let n = self.species.len();
        let Some(net) = &self.network else {
            errors.push("missing section: network".into());
            return;
        };
        if net.adjacency.len() != n || net.adjacency.iter().any(|r| r.len() != n) {
            errors.push(format!("network.adjacency must be {n}x{n}"));
            return;
        }
        for (i, row) in net.adjacency.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v == 1
                    && !net.interactions.iter().any(|c| c.prey == i + 1 && c.predator == j + 1)
                    && self.species[i].interaction.is_none()
                {
                    errors.push(format!("missing kernel: interaction for prey {} and predator {}", i + 1, j + 1));
                }
            }
        }
        for c in &net.interactions {
            if c.prey == 0 || c.prey > n || c.predator == 0 || c.predator > n {
                errors.push(format!("interaction ({}, {}) refers to a missing species", c.prey, c.predator));
            }
            c.kernel.validate("network interaction", errors);
        }
    }

    fn validate_mosquito(&self, errors: &mut Vec<String>) {
        let Some(m) = &self.mosquito else {
            errors.push("missing section: mosquito".into());
            return;
        };
        check_form(&m.aquatic_mortality, "mosquito.aquatic_mortality", errors);
        check_form(&m.crowding_mortality, "mosquito.crowding_mortality", errors);
        check_form(&m.female_mortality, "mosquito.female_mortality", errors);
        check_form(&m.male_mortality, "mosquito.male_mortality", errors);
        check_form(&m.emergence, "mosquito.emergence", errors);
        check_form(&m.male_weight, "mosquito.male_weight", errors);
        check_form(&m.base_fertility, "mosquito.base_fertility", errors);
        if self.kind == ModelKind::MosquitoGenetic {
            check_form(&m.young_female_mortality, "mosquito.young_female_mortality", errors);
            check_form(&m.mated_female_mortality, "mosquito.mated_female_mortality", errors);
            check_form(&m.sterile_male_mortality, "mosquito.sterile_male_mortality", errors);
        }
        if !(m.p_star >= 0.0) {
            errors.push("mosquito.p_star must be nonnegative".into());
        }
    }

    fn validate_initial(&self, errors: &mut Vec<String>) {
        let compartments = self.compartments();
        match &self.initial {
            InitialCondition::Equilibrium { eta, shape_amplitude, .. } => {
                if !matches!(self.kind, ModelKind::Cyclic) {
                    errors.push(format!("initial recipe 'equilibrium' is only available for cyclic-N, not {}", self.kind));
                } else if !eta.is_empty() && eta.len() != compartments {
                    errors.push(format!("initial.eta needs {compartments} entries, found {}", eta.len()));
                }
                if !(shape_amplitude.abs() < 1.0) {
                    errors.push("initial.shape_amplitude must lie in (-1, 1)".into());
                }
            }
            InitialCondition::RandomEquilibrium { radius } => {
                if self.kind != ModelKind::Cyclic {
                    errors.push("initial recipe 'random-equilibrium' is only available for cyclic-N".into());
                }
                if !(*radius >= 0.0) {
                    errors.push("initial.radius must be nonnegative".into());
                }
            }
            InitialCondition::Exponential { scale, .. } => {
                if !(*scale >= 0.0) {
                    errors.push("initial.scale must be nonnegative".into());
                }
            }
            InitialCondition::Sampled { profiles } => {
                if profiles.len() != compartments {
                    errors.push(format!("initial.profiles needs {compartments} rows, found {}", profiles.len()));
                }
                if profiles.iter().any(|p| p.len() != self.grid.cells + 1) {
                    errors.push(format!("every initial profile needs {} nodal values", self.grid.cells + 1));
                }
                if profiles.iter().flatten().any(|v| !(*v >= 0.0)) {
                    errors.push("initial profiles must be nonnegative".into());
                }
            }
            InitialCondition::MosquitoEquilibrium { scale } => {
                if !matches!(self.kind, ModelKind::MosquitoBio | ModelKind::MosquitoGenetic) {
                    errors.push("initial recipe 'mosquito-equilibrium' needs a mosquito model".into());
                }
                if !(scale.is_empty() || scale.len() == 1 || scale.len() == compartments) {
                    errors.push(format!("initial.scale needs 1 or {compartments} entries"));
                }
                if scale.iter().any(|s| !(*s > 0.0)) {
                    errors.push("initial.scale entries must be positive".into());
                }
            }
        }
    }

    /// Number of compartments of the model.
    pub fn compartments(&self) -> usize {
        match self.kind {
            ModelKind::MosquitoBio => 3,
            ModelKind::MosquitoGenetic => 5,
            _ => self.species.len(),
        }
    }

    pub fn grid(&self) -> Result<AgeGrid> {
        AgeGrid::new(self.grid.max_age, self.grid.cells)
    }

    /// Species specifications sampled on the grid.
    pub fn build_species(&self) -> Result<Vec<SpeciesSpec>> {
        let grid = self.grid()?;
        self.species
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let missing = |what: &str| Error::Validation(vec![format!("missing kernel: species[{}].{what}", i + 1)]);
                let mortality = s.mortality.as_ref().ok_or_else(|| missing("mortality"))?.sample(grid)?;
                let fertility = s.fertility.as_ref().ok_or_else(|| missing("fertility"))?.sample(grid)?;
                let interaction = match &s.interaction {
                    Some(f) => f.sample(grid)?,
                    None => crate::grid::Kernel::zeros(grid),
                };
                SpeciesSpec::new(mortality, fertility, interaction, s.max_age.unwrap_or(grid.max_age()))
            })
            .collect()
    }

    /// Network specification (cyclic preset or general adjacency).
    pub fn build_network(&self) -> Result<GeneralNetworkSpec> {
        let species = self.build_species()?;
        match (self.kind, &self.network) {
            (ModelKind::GeneralNetwork, Some(net)) => {
                let grid = self.grid()?;
                let n = species.len();
                let mut kernels = vec![vec![None; n]; n];
                for i in 0..n {
                    for j in 0..n {
                        if net.adjacency[i][j] == 1 {
                            let explicit = net.interactions.iter().find(|c| c.prey == i + 1 && c.predator == j + 1);
                            kernels[i][j] = Some(match explicit {
                                Some(c) => c.kernel.sample(grid)?,
                                None => species[i].interaction.clone(),
                            });
                        }
                    }
                }
                let spec = GeneralNetworkSpec {
                    species,
                    adjacency: net.adjacency.clone(),
                    kernels,
                    control_placement: net.control_placement.clone(),
                };
                spec.validate()?;
                Ok(spec)
            }
            _ => GeneralNetworkSpec::cyclic(species),
        }
    }

    /// Mosquito specification sampled on the grid.
    pub fn build_mosquito(&self) -> Result<MosquitoSpec> {
        let grid = self.grid()?;
        let m = self.mosquito.as_ref().ok_or_else(|| Error::Validation(vec!["missing section: mosquito".into()]))?;
        let sample = |f: &Option<KernelForm>, what: &str, fallback: Option<&Option<KernelForm>>| -> Result<crate::grid::Kernel> {
            match (f, fallback) {
                (Some(f), _) => f.sample(grid),
                (None, Some(Some(g))) => g.sample(grid),
                _ => Err(Error::Validation(vec![format!("missing kernel: mosquito.{what}")])),
            }
        };
        let spec = MosquitoSpec {
            grid,
            aquatic_window: m.aquatic_window,
            aquatic_mortality: sample(&m.aquatic_mortality, "aquatic_mortality", None)?,
            crowding_mortality: sample(&m.crowding_mortality, "crowding_mortality", None)?,
            female_mortality: sample(&m.female_mortality, "female_mortality", None)?,
            male_mortality: sample(&m.male_mortality, "male_mortality", None)?,
            young_female_mortality: sample(&m.young_female_mortality, "young_female_mortality", Some(&m.female_mortality))?,
            mated_female_mortality: sample(&m.mated_female_mortality, "mated_female_mortality", Some(&m.female_mortality))?,
            sterile_male_mortality: sample(&m.sterile_male_mortality, "sterile_male_mortality", Some(&m.male_mortality))?,
            sex_ratio: m.sex_ratio,
            emergence: sample(&m.emergence, "emergence", None)?,
            male_weight: sample(&m.male_weight, "male_weight", None)?,
            base_fertility: sample(&m.base_fertility, "base_fertility", None)?,
            saturation: m.saturation,
            inhibition: m.inhibition,
            carrying_capacity: m.carrying_capacity.clone(),
            growth_rate: m.growth_rate.clone(),
            competition: m.competition.clone(),
            releases: m.releases.clone(),
            release_window: m.release_window.unwrap_or(5.0 * grid.step()),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Strategy of a mosquito scenario.
    pub fn strategy(&self) -> Strategy {
        match (self.kind, self.mosquito.as_ref().and_then(|m| m.strategy)) {
            (_, Some(s)) => s,
            (ModelKind::MosquitoGenetic, None) => Strategy::Genetic,
            _ => Strategy::Biological,
        }
    }

    /// Log-amplitudes requested by the initial recipe of a cyclic scenario.
    pub fn initial_eta(&self) -> Vec<f64> {
        let n = self.compartments();
        match &self.initial {
            InitialCondition::Equilibrium { eta, .. } if !eta.is_empty() => eta.clone(),
            InitialCondition::RandomEquilibrium { radius } => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                (0..n).map(|_| rng.random_range(-*radius..=*radius)).collect()
            }
            _ => vec![0.0; n],
        }
    }

    /// Initial state for a network or linear scenario. Recipes built on the
    /// steady state need `equilibrium`.
    pub fn initial_state(&self, equilibrium: Option<&Equilibrium>) -> Result<PopulationState> {
        let grid = self.grid()?;
        let ages = grid.ages();
        let densities = match &self.initial {
            InitialCondition::Exponential { scale, rate } => {
                vec![ages.iter().map(|a| scale * (-rate * a).exp()).collect(); self.compartments()]
            }
            InitialCondition::Sampled { profiles } => profiles.clone(),
            InitialCondition::Equilibrium { shape_amplitude, shape_frequency, .. } => {
                let eq = equilibrium.ok_or_else(|| Error::Config("initial recipe needs the steady state".into()))?;
                let eta = self.initial_eta();
                eq.species
                    .iter()
                    .zip(&eta)
                    .map(|(s, e)| {
                        s.profile
                            .iter()
                            .zip(&ages)
                            .map(|(x, a)| x * e.exp() * (1.0 + shape_amplitude * (shape_frequency * a).sin()))
                            .collect()
                    })
                    .collect()
            }
            InitialCondition::RandomEquilibrium { .. } => {
                let eq = equilibrium.ok_or_else(|| Error::Config("initial recipe needs the steady state".into()))?;
                let eta = self.initial_eta();
                eq.species.iter().zip(&eta).map(|(s, e)| s.profile.iter().map(|x| x * e.exp()).collect()).collect()
            }
            InitialCondition::MosquitoEquilibrium { .. } => {
                return Err(Error::Config("mosquito recipe used on a network model".into()));
            }
        };
        Ok(PopulationState { t: 0.0, densities })
    }

    /// Initial state for a mosquito scenario.
    pub fn mosquito_initial_state(&self, eq: &MosquitoEquilibrium) -> Result<PopulationState> {
        let genetic = self.strategy() == Strategy::Genetic;
        let compartments = if genetic { 5 } else { 3 };
        match &self.initial {
            InitialCondition::MosquitoEquilibrium { scale } => {
                let base = if genetic { eq.genetic_state(1.0) } else { eq.state() };
                let s = |i: usize| match scale.len() {
                    0 => 1.0,
                    1 => scale[0],
                    _ => scale.get(i).copied().unwrap_or(1.0),
                };
                let densities = base.densities.iter().enumerate().map(|(i, row)| row.iter().map(|x| x * s(i)).collect()).collect();
                Ok(PopulationState { t: 0.0, densities })
            }
            InitialCondition::Sampled { profiles } if profiles.len() == compartments => {
                Ok(PopulationState { t: 0.0, densities: profiles.clone() })
            }
            InitialCondition::Exponential { scale, rate } => {
                let grid = self.grid()?;
                let row: Vec<f64> = grid.ages().iter().map(|a| scale * (-rate * a).exp()).collect();
                let mut densities = vec![row; compartments];
                if genetic {
                    densities[4] = vec![0.0; grid.len()];
                }
                Ok(PopulationState { t: 0.0, densities })
            }
            _ => Err(Error::Config("initial recipe does not fit a mosquito model".into())),
        }
    }

    /// Sets a named parameter, used by sweeps.
    pub fn set_parameter(&mut self, name: &str, value: f64) -> Result<()> {
        fn controller(s: &mut Scenario) -> &mut ControllerSection {
            s.controller.get_or_insert_with(ControllerSection::default)
        }
        match name {
            "theta" => controller(self).theta = value,
            "terminal_gain" => controller(self).terminal_gain = value,
            "u_star" => {
                let c = controller(self);
                c.u_star = Some(value);
                c.u_star_fraction = None;
            }
            "u_star_fraction" => {
                let c = controller(self);
                c.u_star_fraction = Some(value);
                c.u_star = None;
            }
            "constant" => controller(self).constant = Some(value),
            "horizon" => self.horizon = value,
            "seed" => self.seed = value as u64,
            "p_star" | "release_scale" => {
                let m = self.mosquito.as_mut().ok_or_else(|| Error::Config(format!("parameter {name} needs a mosquito model")))?;
                if name == "p_star" {
                    m.p_star = value;
                } else {
                    for r in &mut m.releases {
                        r.mass *= value;
                    }
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown sweep parameter '{other}' (theta, terminal_gain, u_star, u_star_fraction, constant, horizon, seed, p_star, release_scale)"
                )))
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
schema_version = 1
kind = "linear-demographic"
horizon = 2.0

[grid]
max_age = 4.0
cells = 40

[[species]]
mortality = { form = "constant", value = 0.5 }
fertility = { form = "window", lo = 1.0, hi = 3.0, height = 0.8 }

[initial]
recipe = "exponential"
scale = 1.0
rate = 1.0
"#;

    #[test]
    fn minimal_linear_file_loads() {
        let s = parse_scenario(MINIMAL).unwrap();
        assert_eq!(s.kind, ModelKind::LinearDemographic);
        assert_eq!(s.build_species().unwrap().len(), 1);
        let state = s.initial_state(None).unwrap();
        assert_eq!(state.densities[0].len(), 41);
    }

    #[test]
    fn missing_fertility_is_listed() {
        let text = MINIMAL.replace("fertility = { form = \"window\", lo = 1.0, hi = 3.0, height = 0.8 }\n", "");
        let text = text.replace("horizon = 2.0", "horizon = -1.0");
        match parse_scenario(&text) {
            Err(Error::Validation(errors)) => {
                assert!(errors.iter().any(|e| e.contains("species[1].fertility")), "{errors:?}");
                assert!(errors.iter().any(|e| e.contains("horizon")), "{errors:?}");
            }
            other => panic!("expected validation errors, got {other:?}"),
        }
    }

    #[test]
    fn wrong_schema_version_is_rejected() {
        let text = MINIMAL.replace("schema_version = 1", "schema_version = 7");
        assert!(matches!(parse_scenario(&text), Err(Error::Validation(_))));
    }

    #[test]
    fn unknown_keys_are_parse_errors() {
        let text = MINIMAL.replace("horizon = 2.0", "horizon = 2.0\nhorizn = 3.0");
        assert!(matches!(parse_scenario(&text), Err(Error::Parse(_))));
    }

    #[test]
    fn round_trip_and_hash_are_stable() {
        let s = parse_scenario(MINIMAL).unwrap();
        let again = parse_scenario(&s.to_toml().unwrap()).unwrap();
        assert_eq!(s, again);
        assert_eq!(s.config_hash().unwrap(), again.config_hash().unwrap());
        assert_eq!(s.config_hash().unwrap().len(), 64);
    }

    #[test]
    fn sweep_parameters() {
        let mut s = parse_scenario(MINIMAL).unwrap();
        s.set_parameter("theta", 2.0).unwrap();
        assert_eq!(s.controller.as_ref().unwrap().theta, 2.0);
        assert!(s.set_parameter("p_star", 0.1).is_err());
        assert!(s.set_parameter("bogus", 1.0).is_err());
    }
}
