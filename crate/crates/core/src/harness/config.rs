//! Experiment configuration.
//!
//! Every physical and numerical parameter of an experiment lives in one
//! structured text file (TOML: `key = value` lines grouped into tables).
//! Missing keys take the defaults documented on each field; unknown keys
//! are rejected so a typo cannot silently fall back to a default. The
//! `Default` implementation doubles as the built-in configuration used
//! when no file is given.

use std::path::Path;
use std::sync::Arc;

use serde::Deserialize;

use crate::carleman::CarlemanParams;
use crate::grid::GridSpec;
use crate::inversion::SolveOptions;
use crate::mfg::{DataMode, PicardConfig};

use super::noise::Channel;
use super::{HarnessError, Result};

/// Top-level experiment description.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub grid: GridTable,
    pub instance: InstanceTable,
    pub forward: ForwardTable,
    pub weights: WeightsTable,
    pub inversion: InversionTable,
    pub data: DataTable,
    pub noise: NoiseTable,
    pub sweep: SweepTable,
    pub transform: TransformTable,
    pub carleman: CarlemanTable,
}

/// `[grid]` table: the space-time lattice.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridTable {
    /// Space dimension, 1 or 2. Default 1.
    pub n: usize,
    /// Half-width per axis; the domain is the product of `(-a, a)`. Default `[1.0]`.
    pub half_widths: Vec<f64>,
    /// Time horizon. Default 1.0.
    pub t_max: f64,
    /// Nodes per axis. Default `[201]`.
    pub nx: Vec<usize>,
    /// Time levels. Default 201.
    pub nt: usize,
    /// Width of the unobserved collar at the data-poor face. Default 0.5.
    pub gamma: f64,
}

impl Default for GridTable {
    fn default() -> Self {
        GridTable { n: 1, half_widths: vec![1.0], t_max: 1.0, nx: vec![201], nt: 201, gamma: 0.5 }
    }
}

/// One smooth compactly supported component of the true amplitude.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BumpTable {
    /// Center along the first axis. Default 0.45.
    pub center: f64,
    /// Support half-width. Default 0.35.
    pub radius: f64,
    /// Peak height. Default 0.1.
    pub amplitude: f64,
}

impl Default for BumpTable {
    fn default() -> Self {
        BumpTable { center: 0.45, radius: 0.35, amplitude: 0.1 }
    }
}

/// `[instance]` table: coefficients and data of the solved instance pair.
///
/// The reference amplitude is `(base_offset + base_slope * x_1)` times a
/// boundary taper; the true amplitude adds the listed bumps before
/// tapering. Everything else is shared between the pair.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InstanceTable {
    /// Affine base of the amplitude profile. Defaults 0.8 and 0.2.
    pub base_offset: f64,
    pub base_slope: f64,
    /// Bumps the true amplitude adds on top of the base. Default: one bump
    /// at 0.45 with radius 0.35 and height 0.1.
    pub bumps: Vec<BumpTable>,
    /// Scale of the tapered quadratic-cost coefficient. Default 0.55.
    pub a_scale: f64,
    /// Reaction coefficient `s = s_offset + s_slope * x_1 * t`. Defaults 0.1, 0.05.
    pub s_offset: f64,
    pub s_slope: f64,
    /// Slice kernel sample (one dimension) or constant matrix value (two).
    /// Default 1.0.
    pub k1_value: f64,
    /// Constant tail kernel sample. Default 0.3.
    pub k2_value: f64,
    /// A-priori sup bound the kernel construction enforces. Default 1e4.
    pub kernel_bound: f64,
    /// Cosine amplitude of the initial density. Default 0.3.
    pub q_amplitude: f64,
    /// Scale of the tapered terminal value. Default 0.5.
    pub terminal_scale: f64,
    /// Constant added to the initial density but not to its lateral traces.
    /// Zero keeps the data consistent; any other value plants a corner
    /// contradiction for validation testing. Default 0.0.
    pub m_initial_offset: f64,
}

impl Default for InstanceTable {
    fn default() -> Self {
        InstanceTable {
            base_offset: 0.8,
            base_slope: 0.2,
            bumps: vec![BumpTable::default()],
            a_scale: 0.55,
            s_offset: 0.1,
            s_slope: 0.05,
            k1_value: 1.0,
            k2_value: 0.3,
            kernel_bound: 1e4,
            q_amplitude: 0.3,
            terminal_scale: 0.5,
            m_initial_offset: 0.0,
        }
    }
}

/// `[forward]` table: fixed-point iteration controls.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForwardTable {
    /// Damping of the density update. Default 0.5.
    pub theta: f64,
    /// Relative fixed-point gap at convergence. Default 1e-10.
    pub tol: f64,
    /// Iteration cap. Default 200.
    pub max_iters: usize,
}

impl Default for ForwardTable {
    fn default() -> Self {
        let p = PicardConfig::default();
        ForwardTable { theta: p.theta, tol: p.tol, max_iters: p.max_iters }
    }
}

/// `[weights]` table: exponential weight parameters.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightsTable {
    /// Weight strength; must exceed 1. Default 1.01.
    pub lambda: f64,
    /// Weight exponent; must exceed 2. Default 2.01.
    pub nu: f64,
}

impl Default for WeightsTable {
    fn default() -> Self {
        WeightsTable { lambda: 1.01, nu: 2.01 }
    }
}

/// `[inversion]` table: reconstruction solver controls.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionTable {
    /// Regularization weight at zero noise. Default 1e-5.
    pub eps: f64,
    /// Noise-dependent regularization: the weight used at level `delta` is
    /// `max(eps, eps_level_scale * delta^2)`. Default 1.0.
    pub eps_level_scale: f64,
    /// Relinearization sweeps. Default 8.
    pub outer_iters: usize,
    /// Normal-equation solver tolerance and iteration cap. Defaults 1e-10, 8000.
    pub cg_tol: f64,
    pub cg_max_iters: usize,
    /// Identifiability floor on the interaction response. Default 1e-8.
    pub c_min: f64,
}

impl Default for InversionTable {
    fn default() -> Self {
        let o = SolveOptions::default();
        InversionTable {
            eps: 1e-5,
            eps_level_scale: 1.0,
            outer_iters: o.outer_iters,
            cg_tol: o.cg_tol,
            cg_max_iters: o.cg_max_iters,
            c_min: o.c_min,
        }
    }
}

/// `[data]` table: which lateral faces are observed.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataTable {
    /// `"complete"` (all faces) or `"incomplete"` (the face `x_1 = -A_1`
    /// unobserved). Default `"complete"`.
    pub mode: String,
}

impl Default for DataTable {
    fn default() -> Self {
        DataTable { mode: "complete".into() }
    }
}

/// `[noise]` table: single-run noise request (`make-data`, `invert`).
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseTable {
    /// Level in `[0, 1)`; zero disables noise. Default 0.0.
    pub delta: f64,
    /// Seed; also the base seed of sweep points. Default 7.
    pub seed: u64,
    /// Channel names to perturb; omit for all eight.
    pub channels: Option<Vec<String>>,
}

impl Default for NoiseTable {
    fn default() -> Self {
        NoiseTable { delta: 0.0, seed: 7, channels: None }
    }
}

/// `[sweep]` table: the level ladder.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepTable {
    /// Noise levels. Default `[1e-4, 3e-4, 1e-3, 3e-3, 1e-2]`.
    pub deltas: Vec<f64>,
    /// Seeds per level. Default `[1, 2, 3]`.
    pub seeds: Vec<u64>,
    /// Optional solver budget overrides for sweep points; unset means the
    /// `[inversion]` values.
    pub outer_iters: Option<usize>,
    pub cg_max_iters: Option<usize>,
}

impl Default for SweepTable {
    fn default() -> Self {
        SweepTable {
            deltas: vec![1e-4, 3e-4, 1e-3, 3e-3, 1e-2],
            seeds: vec![1, 2, 3],
            outer_iters: None,
            cg_max_iters: None,
        }
    }
}

/// `[transform]` table: endpoint-identity tolerance for `transform-check`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformTable {
    /// Sup-norm tolerance on the endpoint identities. Default 1e-3.
    pub tol: f64,
}

impl Default for TransformTable {
    fn default() -> Self {
        TransformTable { tol: 1e-3 }
    }
}

/// `[carleman]` table: estimate verification controls.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CarlemanTable {
    /// Calibration search ceiling. Default 30.0.
    pub lambda_max: f64,
    /// Width of the verified window above the calibrated floor. Default 10.0.
    pub lambda_window: f64,
    /// Grid points across the window. Default 11.
    pub lambda_steps: usize,
}

impl Default for CarlemanTable {
    fn default() -> Self {
        CarlemanTable { lambda_max: 30.0, lambda_window: 10.0, lambda_steps: 11 }
    }
}

impl ExperimentConfig {
    /// Parse a TOML file. Any syntax or schema problem is a configuration
    /// error carrying the file path.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Range checks beyond what the typed constructors enforce later.
    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if g.n == 0 || g.n > 2 {
            return Err(HarnessError::Config(format!("grid.n must be 1 or 2, got {}", g.n)));
        }
        if g.half_widths.len() != g.n || g.nx.len() != g.n {
            return Err(HarnessError::Config(format!(
                "grid.half_widths and grid.nx must each hold {} entries",
                g.n
            )));
        }
        if !self.noise.delta.is_finite() || !(0.0..1.0).contains(&self.noise.delta) {
            return Err(HarnessError::Config(format!(
                "noise.delta must lie in [0, 1), got {}",
                self.noise.delta
            )));
        }
        for &d in &self.sweep.deltas {
            if !d.is_finite() || !(0.0..1.0).contains(&d) {
                return Err(HarnessError::Config(format!("sweep.deltas entry {d} outside [0, 1)")));
            }
        }
        if self.sweep.deltas.is_empty() || self.sweep.seeds.is_empty() {
            return Err(HarnessError::Config("sweep.deltas and sweep.seeds must be nonempty".into()));
        }
        if self.carleman.lambda_steps < 2 {
            return Err(HarnessError::Config("carleman.lambda_steps must be at least 2".into()));
        }
        self.mode()?;
        self.noise_channels()?;
        for b in &self.instance.bumps {
            if !(b.radius > 0.0) {
                return Err(HarnessError::Config(format!("bump radius must be positive, got {}", b.radius)));
            }
        }
        Ok(())
    }

    pub fn grid_spec(&self) -> Result<Arc<GridSpec>> {
        let g = &self.grid;
        Ok(Arc::new(GridSpec::new(g.n, &g.half_widths, g.t_max, &g.nx, g.nt, g.gamma)?))
    }

    pub fn picard(&self) -> PicardConfig {
        PicardConfig {
            theta: self.forward.theta,
            tol: self.forward.tol,
            max_iters: self.forward.max_iters,
            ..PicardConfig::default()
        }
    }

    pub fn carleman_params(&self) -> Result<CarlemanParams> {
        let g = &self.grid;
        Ok(CarlemanParams::new(self.weights.lambda, self.weights.nu, g.gamma, g.half_widths[0])?)
    }

    /// Full-budget solver controls (single inversions).
    pub fn solve_options(&self) -> SolveOptions {
        let i = &self.inversion;
        SolveOptions {
            outer_iters: i.outer_iters,
            cg_tol: i.cg_tol,
            cg_max_iters: i.cg_max_iters,
            c_min: i.c_min,
        }
    }

    /// Sweep-point solver controls: the `[sweep]` overrides where present.
    pub fn sweep_solve_options(&self) -> SolveOptions {
        let mut opts = self.solve_options();
        if let Some(n) = self.sweep.outer_iters {
            opts.outer_iters = n;
        }
        if let Some(n) = self.sweep.cg_max_iters {
            opts.cg_max_iters = n;
        }
        opts
    }

    pub fn mode(&self) -> Result<DataMode> {
        parse_mode(&self.data.mode)
    }

    pub fn noise_channels(&self) -> Result<Vec<Channel>> {
        match &self.noise.channels {
            None => Ok(Channel::ALL.to_vec()),
            Some(names) => {
                let mut out = Vec::with_capacity(names.len());
                for name in names {
                    let c = Channel::parse(name).ok_or_else(|| {
                        HarnessError::Config(format!(
                            "unknown noise channel {name:?}; valid names: {}",
                            Channel::ALL.map(|c| c.name()).join(", ")
                        ))
                    })?;
                    if out.contains(&c) {
                        return Err(HarnessError::Config(format!("noise channel {name:?} listed twice")));
                    }
                    out.push(c);
                }
                Ok(out)
            }
        }
    }
}

pub fn parse_mode(s: &str) -> Result<DataMode> {
    match s {
        "complete" => Ok(DataMode::Complete),
        "incomplete" => Ok(DataMode::Incomplete),
        other => Err(HarnessError::Config(format!(
            "data.mode must be \"complete\" or \"incomplete\", got {other:?}"
        ))),
    }
}

pub fn mode_name(mode: DataMode) -> &'static str {
    match mode {
        DataMode::Complete => "complete",
        DataMode::Incomplete => "incomplete",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_build() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let g = cfg.grid_spec().unwrap();
        assert_eq!(g.nx(0), 201);
        assert_eq!(cfg.mode().unwrap(), DataMode::Complete);
        assert_eq!(cfg.noise_channels().unwrap().len(), 8);
    }

    #[test]
    fn toml_round_trip_overrides() {
        let text = r#"
            [grid]
            nx = [41]
            nt = 31

            [instance]
            bumps = [
                { center = 0.45, radius = 0.35, amplitude = 0.1 },
                { center = -0.6, radius = 0.3, amplitude = 0.08 },
            ]

            [data]
            mode = "incomplete"

            [sweep]
            deltas = [1e-3]
            seeds = [5]
            cg_max_iters = 500
        "#;
        let cfg: ExperimentConfig = toml::from_str(text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.grid.nx, vec![41]);
        assert_eq!(cfg.instance.bumps.len(), 2);
        assert_eq!(cfg.mode().unwrap(), DataMode::Incomplete);
        assert_eq!(cfg.sweep_solve_options().cg_max_iters, 500);
        assert_eq!(cfg.sweep_solve_options().outer_iters, cfg.inversion.outer_iters);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<ExperimentConfig>("[grid]\nnodes = 10\n");
        assert!(err.is_err());
    }

    #[test]
    fn bad_mode_and_bad_channel_are_config_errors() {
        let mut cfg = ExperimentConfig::default();
        cfg.data.mode = "partial".into();
        assert!(matches!(cfg.validate(), Err(HarnessError::Config(_))));

        let mut cfg = ExperimentConfig::default();
        cfg.noise.channels = Some(vec!["u_initial".into(), "bogus".into()]);
        assert!(matches!(cfg.validate(), Err(HarnessError::Config(_))));
    }

    #[test]
    fn dimension_mismatch_is_a_config_error() {
        let mut cfg = ExperimentConfig::default();
        cfg.grid.n = 2;
        assert!(matches!(cfg.validate(), Err(HarnessError::Config(_))));
    }
}
