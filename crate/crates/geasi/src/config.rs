//! Run configuration: scenario selection, solver and optimizer settings, and
//! the translation into the per-module option structs. Files are TOML first
//! with a JSON fallback, and every field has an embedded default.

use crate::ecg::{EcgFitOptions, TimeGrid, TorsoOptions, WaveformParams};
use crate::eikonal::{EasSet, EasSite, FimOptions};
use crate::error::{GeasiError, Result};
use crate::mesh::search::MeshSearch;
use crate::mesh::setup::{
    generate_box3d_setup, generate_lv_slice_setup, generate_square_setup, LvSliceParams,
    SquareVelocity,
};
use crate::mesh::vtk::read_vtk;
use crate::mesh::{ConductionTensorField, MeasurementSet, SimplicialMesh};
use crate::optimizer::FitOptions;
use crate::topo::TopoConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

fn default_resolution() -> usize {
    50
}

fn default_speed() -> f64 {
    0.7
}

/// Which geometry and conduction field to run on.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScenarioConfig {
    /// 2 cm square with a smooth sinusoidal velocity field.
    Square {
        #[serde(default = "default_resolution")]
        resolution: usize,
        #[serde(default)]
        velocity: SquareVelocity,
    },
    /// Annular slice with transmurally rotating fibers.
    LvSlice {
        #[serde(default = "default_resolution")]
        n_radial: usize,
        #[serde(default = "default_resolution")]
        n_angular: usize,
        #[serde(default)]
        params: LvSliceParams,
    },
    /// Isotropic tetrahedral box.
    Box3d {
        #[serde(default = "default_resolution")]
        resolution: usize,
        #[serde(default = "default_speed")]
        speed: f64,
        #[serde(default = "default_side")]
        side: f64,
    },
    /// Externally supplied legacy-ASCII VTK mesh with isotropic conduction.
    CustomMesh {
        mesh_file: String,
        #[serde(default = "default_speed")]
        speed: f64,
    },
}

fn default_side() -> f64 {
    20.0
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig::Square {
            resolution: default_resolution(),
            velocity: SquareVelocity::default(),
        }
    }
}

/// Eikonal solver settings (serializable mirror of [`FimOptions`]).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EikonalConfig {
    pub tol: f64,
    pub max_update_factor: usize,
    pub tol_compat: f64,
    pub source_ball_radius: f64,
}

impl Default for EikonalConfig {
    fn default() -> Self {
        let o = FimOptions::default();
        Self {
            tol: o.tol,
            max_update_factor: o.max_update_factor,
            tol_compat: o.tol_compat,
            source_ball_radius: o.source_ball_radius,
        }
    }
}

impl EikonalConfig {
    pub fn to_options(&self) -> FimOptions {
        FimOptions {
            tol: self.tol,
            max_update_factor: self.max_update_factor,
            tol_compat: self.tol_compat,
            source_ball_radius: self.source_ball_radius,
        }
    }
}

/// A candidate or ground-truth activation site.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SiteConfig {
    pub position: [f64; 3],
    #[serde(default)]
    pub time: f64,
}

/// Activation-time fitting settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub beta_a: f64,
    pub beta_s: f64,
    pub max_iterations: usize,
    /// Number of sites fitted when not growing adaptively.
    pub n_sites: usize,
    pub restarts: usize,
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        let o = FitOptions::default();
        Self {
            beta_a: o.beta_a,
            beta_s: o.beta_s,
            max_iterations: o.max_iterations,
            n_sites: 2,
            restarts: 3,
            t_min: 0.0,
            t_max: 200.0,
        }
    }
}

impl FitConfig {
    pub fn to_options(&self, eikonal: &EikonalConfig) -> FitOptions {
        FitOptions {
            beta_a: self.beta_a,
            beta_s: self.beta_s,
            max_iterations: self.max_iterations,
            fim: eikonal.to_options(),
            ..FitOptions::default()
        }
    }
}

/// Site-growth settings (serializable mirror of [`TopoConfig`]).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TopoSection {
    pub directions_2d: usize,
    pub directions_3d: usize,
    pub ratio_threshold_2d: f64,
    pub ratio_threshold_3d: f64,
    pub n_max: usize,
    pub worst_case_reading: bool,
}

impl Default for TopoSection {
    fn default() -> Self {
        let c = TopoConfig::default();
        Self {
            directions_2d: c.directions_2d,
            directions_3d: c.directions_3d,
            ratio_threshold_2d: c.ratio_threshold_2d,
            ratio_threshold_3d: c.ratio_threshold_3d,
            n_max: c.n_max,
            worst_case_reading: c.worst_case_reading,
        }
    }
}

impl TopoSection {
    pub fn to_config(&self) -> TopoConfig {
        TopoConfig {
            directions_2d: self.directions_2d,
            directions_3d: self.directions_3d,
            ratio_threshold_2d: self.ratio_threshold_2d,
            ratio_threshold_3d: self.ratio_threshold_3d,
            n_max: self.n_max,
            worst_case_reading: self.worst_case_reading,
            ..TopoConfig::default()
        }
    }
}

/// ECG forward-model and fitting settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EcgConfig {
    pub torso_padding: f64,
    pub grid_resolution: usize,
    pub torso_sigma: f64,
    pub t0: f64,
    pub t1: f64,
    pub dt: f64,
    pub beta_s: f64,
    pub max_iterations: usize,
    pub k0: f64,
    pub k1: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub apd: f64,
    pub alpha_sq: f64,
    pub beta: f64,
    pub lambda: f64,
}

impl Default for EcgConfig {
    fn default() -> Self {
        let t = TorsoOptions::default();
        let g = TimeGrid::default();
        let w = WaveformParams::default();
        let f = EcgFitOptions::default();
        Self {
            torso_padding: t.padding,
            grid_resolution: t.resolution,
            torso_sigma: t.torso_sigma,
            t0: g.t0,
            t1: g.t1,
            dt: g.dt,
            beta_s: f.beta_s,
            max_iterations: f.max_iterations,
            k0: w.k0,
            k1: w.k1,
            tau1: w.tau1,
            tau2: w.tau2,
            apd: w.apd,
            alpha_sq: w.alpha_sq,
            beta: w.beta,
            lambda: w.lambda,
        }
    }
}

impl EcgConfig {
    pub fn torso_options(&self) -> TorsoOptions {
        TorsoOptions {
            padding: self.torso_padding,
            resolution: self.grid_resolution,
            torso_sigma: self.torso_sigma,
        }
    }

    pub fn time_grid(&self) -> TimeGrid {
        TimeGrid {
            t0: self.t0,
            t1: self.t1,
            dt: self.dt,
        }
    }

    pub fn waveform_params(&self) -> WaveformParams {
        WaveformParams {
            k0: self.k0,
            k1: self.k1,
            tau1: self.tau1,
            tau2: self.tau2,
            apd: self.apd,
            alpha_sq: self.alpha_sq,
            beta: self.beta,
            lambda: self.lambda,
        }
    }

    pub fn fit_options(&self, eikonal: &EikonalConfig) -> EcgFitOptions {
        EcgFitOptions {
            beta_s: self.beta_s,
            max_iterations: self.max_iterations,
            fim: eikonal.to_options(),
            ..EcgFitOptions::default()
        }
    }
}

/// Top-level run configuration with all defaults embedded.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub scenario: ScenarioConfig,
    /// Ground-truth sites used to forward-simulate targets, and the solve
    /// sources for `solve-eikonal` and `simulate-ecg`.
    pub sites: Vec<SiteConfig>,
    pub eikonal: EikonalConfig,
    pub fit: FitConfig,
    pub topo: TopoSection,
    pub ecg: EcgConfig,
    pub seed: u64,
    pub output_dir: String,
}

impl RunConfig {
    /// Two interior sites on the default square scenario.
    pub fn with_default_sites(mut self) -> Self {
        if self.sites.is_empty() {
            self.sites = vec![
                SiteConfig {
                    position: [6.0, 10.0, 0.0],
                    time: 0.0,
                },
                SiteConfig {
                    position: [14.0, 10.0, 0.0],
                    time: 0.0,
                },
            ];
        }
        if self.output_dir.is_empty() {
            self.output_dir = "out".into();
        }
        self
    }

    /// Parses TOML (or JSON when the extension says so) with field defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let is_json = path
            .extension()
            .map_or(false, |e| e.eq_ignore_ascii_case("json"));
        let cfg: RunConfig = if is_json {
            serde_json::from_str(&text)
                .map_err(|e| GeasiError::Config(format!("{}: {e}", path.display())))?
        } else {
            match toml::from_str(&text) {
                Ok(c) => c,
                Err(toml_err) => serde_json::from_str(&text).map_err(|_| {
                    GeasiError::Config(format!("{}: {toml_err}", path.display()))
                })?,
            }
        };
        let cfg = cfg.with_default_sites();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(GeasiError::Config(m.into()));
        match &self.scenario {
            ScenarioConfig::Square { resolution, .. } if *resolution < 8 => {
                return fail("scenario.resolution must be at least 8");
            }
            ScenarioConfig::LvSlice {
                n_radial,
                n_angular,
                ..
            } if *n_radial < 3 || *n_angular < 16 => {
                return fail("lv-slice needs n_radial >= 3 and n_angular >= 16");
            }
            ScenarioConfig::CustomMesh { mesh_file, .. } => {
                if !Path::new(mesh_file).exists() {
                    return Err(GeasiError::Config(format!(
                        "mesh file not found: {mesh_file}"
                    )));
                }
            }
            _ => {}
        }
        if self.fit.t_max <= self.fit.t_min {
            return fail("fit.t_max must exceed fit.t_min");
        }
        if !(0.0..=1.0).contains(&self.fit.beta_a) || !(0.0..=1.0).contains(&self.fit.beta_s) {
            return fail("fit.beta_a and fit.beta_s must lie in [0, 1]");
        }
        if self.fit.max_iterations == 0 || self.fit.n_sites == 0 || self.fit.restarts == 0 {
            return fail("fit.max_iterations, fit.n_sites and fit.restarts must be positive");
        }
        if self.ecg.torso_padding < 1.0 {
            return fail("ecg.torso_padding must be at least 1");
        }
        if self.ecg.grid_resolution < 3 {
            return fail("ecg.grid_resolution must be at least 3");
        }
        if self.ecg.dt <= 0.0 || self.ecg.t1 <= self.ecg.t0 {
            return fail("ecg time grid must be increasing with positive dt");
        }
        if self.ecg.max_iterations == 0 {
            return fail("ecg.max_iterations must be positive");
        }
        if self.eikonal.tol <= 0.0 || self.eikonal.tol_compat <= 0.0 {
            return fail("eikonal tolerances must be positive");
        }
        for (i, s) in self.sites.iter().enumerate() {
            if !(self.fit.t_min..=self.fit.t_max).contains(&s.time) {
                return Err(GeasiError::Config(format!(
                    "site {i} timing outside [t_min, t_max]"
                )));
            }
        }
        Ok(())
    }

    /// Instantiates the scenario geometry and conduction field.
    pub fn build_scenario(
        &self,
    ) -> Result<(SimplicialMesh, ConductionTensorField, MeasurementSet)> {
        match &self.scenario {
            ScenarioConfig::Square {
                resolution,
                velocity,
            } => generate_square_setup(*resolution, velocity),
            ScenarioConfig::LvSlice {
                n_radial,
                n_angular,
                params,
            } => generate_lv_slice_setup(*n_radial, *n_angular, params),
            ScenarioConfig::Box3d {
                resolution,
                speed,
                side,
            } => generate_box3d_setup(*side, *resolution, *speed),
            ScenarioConfig::CustomMesh { mesh_file, speed } => {
                let (mesh, _) = read_vtk(Path::new(mesh_file))?;
                let tensors = vec![
                    crate::linalg::SymTensor::isotropic(mesh.dim, speed * speed);
                    mesh.cell_count()
                ];
                let nodes = mesh.boundary_nodes();
                let times = vec![0.0; nodes.len()];
                Ok((mesh, tensors, MeasurementSet { nodes, times }))
            }
        }
    }

    /// The configured sites as a validated activation-site set.
    pub fn site_set(&self, search: &MeshSearch) -> Result<EasSet> {
        if self.sites.is_empty() {
            return Err(GeasiError::Config("no sites configured".into()));
        }
        let sites = self
            .sites
            .iter()
            .map(|s| EasSite {
                position: search.project_to_domain(s.position),
                time: s.time,
            })
            .collect();
        EasSet::new(sites, self.fit.t_min, self.fit.t_max)
    }
}
