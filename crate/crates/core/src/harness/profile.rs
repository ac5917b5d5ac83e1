//! Instance construction: from a configuration to a solved pair.
//!
//! An experiment holds two forward-solved instances of the same game that
//! differ only in the kernel amplitude: the "truth" (base profile plus
//! bumps) supplies observations, the bump-free "reference" anchors the
//! linearized reconstruction. The coefficient family is chosen so the data
//! are corner-compatible on any rectangle: the drift coefficient and the
//! amplitude vanish to first order at the lateral boundary, the value's
//! lateral trace is zero, and the density's trace matches its initial
//! slice, which is time-independent on the boundary.

use std::sync::Arc;

use crate::carleman::{self, CarlemanParams};
use crate::grid::{Field, GridSpec};
use crate::inversion::{InverseProblemSpec, SolveOptions};
use crate::kernel::{K1Samples, KernelSpec};
use crate::mfg::{self, CipData, DataMode, LateralData, MfgCoefficients, MfgSolution};

use super::config::ExperimentConfig;
use super::Result;

/// Solved instance pair plus everything an inversion run needs.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub grid: Arc<GridSpec>,
    pub coeffs_true: MfgCoefficients,
    pub coeffs_ref: MfgCoefficients,
    pub b_true: Field,
    pub b_ref: Field,
    pub truth: MfgSolution,
    pub reference: MfgSolution,
    /// Weight parameters at the fixed calibrated strength.
    pub carleman: CarlemanParams,
    /// Regularization weight at zero noise.
    pub eps0: f64,
    /// Scale of the level-dependent weight `max(eps0, scale * delta^2)`.
    pub eps_level_scale: f64,
    /// Full-budget solver controls (single inversions).
    pub solve: SolveOptions,
    /// Trimmed controls for sweep points.
    pub sweep_solve: SolveOptions,
}

impl Experiment {
    pub fn gamma(&self) -> f64 {
        self.grid.gamma()
    }

    /// Weight exponent; doubles as the exponent of the level-to-strength map.
    pub fn nu0(&self) -> f64 {
        self.carleman.nu()
    }

    /// Observation bundle of the truth in the given mode.
    pub fn observed(&self, mode: DataMode) -> Result<CipData> {
        Ok(mfg::generate_cip_data(&self.truth.u, &self.truth.m, mode)?)
    }

    /// Regularization weight for one noise level.
    pub fn eps_for_level(&self, delta: f64) -> f64 {
        self.eps0.max(self.eps_level_scale * delta * delta)
    }

    /// Weight strength for one run: fixed when every face is observed,
    /// level-driven (but never below the fixed strength) otherwise.
    pub fn lambda_for(&self, mode: DataMode, delta: f64) -> Result<f64> {
        let fixed = self.carleman.lambda();
        if mode == DataMode::Incomplete && delta > 0.0 {
            let from_level =
                carleman::lambda_of_delta(delta, self.gamma(), self.grid.a(0), self.nu0())?;
            Ok(fixed.max(from_level))
        } else {
            Ok(fixed)
        }
    }

    /// Assemble the inverse problem for one observation bundle.
    pub fn problem(
        &self,
        observed: CipData,
        lambda: f64,
        eps: f64,
        opts: SolveOptions,
    ) -> Result<InverseProblemSpec> {
        let carleman = self.carleman.with_lambda(lambda)?;
        Ok(InverseProblemSpec::new(
            observed,
            &self.reference,
            self.coeffs_ref.clone(),
            carleman,
            eps,
            opts,
        )?)
    }
}

/// Smooth compactly supported profile on `|x - center| < radius`.
pub fn compact_bump(x: f64, center: f64, radius: f64) -> f64 {
    let r = (x - center) / radius;
    if r * r >= 1.0 {
        0.0
    } else {
        (1.0 - 1.0 / (1.0 - r * r)).exp()
    }
}

/// Quartic boundary taper, one factor per axis.
fn taper(x: &[f64], spec: &GridSpec) -> f64 {
    (0..spec.n())
        .map(|d| {
            let r = x[d] / spec.a(d);
            let t = 1.0 - r * r;
            t * t
        })
        .product()
}

/// Coefficients of one instance; `with_bumps` selects truth vs reference.
/// Returns the (tapered) amplitude alongside.
pub fn instance_coefficients(
    cfg: &ExperimentConfig,
    grid: &Arc<GridSpec>,
    with_bumps: bool,
) -> Result<(MfgCoefficients, Field)> {
    let inst = cfg.instance.clone();
    let bumps = if with_bumps { inst.bumps.clone() } else { Vec::new() };
    let b = Field::from_space_fn(grid.clone(), {
        let inst = inst.clone();
        let grid = grid.clone();
        move |x| {
            let mut profile = inst.base_offset + inst.base_slope * x[0];
            for bump in &bumps {
                profile += bump.amplitude * compact_bump(x[0], bump.center, bump.radius);
            }
            profile * taper(x, &grid)
        }
    })?;
    let a = Field::from_space_fn(grid.clone(), {
        let grid = grid.clone();
        let scale = inst.a_scale;
        move |x| scale * taper(x, &grid)
    })?;
    let s = Field::from_spacetime_fn(grid.clone(), move |x, t| inst.s_offset + inst.s_slope * x[0] * t)?;

    let k1 = if grid.n() == 1 {
        K1Samples::Scalar(inst.k1_value)
    } else {
        let len = grid.nx(1);
        K1Samples::Matrix { len, values: vec![inst.k1_value; len * len] }
    };
    let sl = grid.space_len();
    let kernel = KernelSpec::new(k1, vec![inst.k2_value; sl * sl], b.clone(), inst.kernel_bound)?;
    Ok((MfgCoefficients::new(a, s, kernel)?, b))
}

/// Endpoint and lateral data shared by the pair. The optional offset on the
/// initial density is not mirrored into its traces; a nonzero value is a
/// deliberate corner contradiction.
pub struct InstanceData {
    pub m_initial: Field,
    pub u_terminal: Field,
    pub u_dirichlet: LateralData,
    pub m_dirichlet: LateralData,
}

pub fn instance_data(cfg: &ExperimentConfig, grid: &Arc<GridSpec>) -> Result<InstanceData> {
    let inst = &cfg.instance;
    let q_amp = inst.q_amplitude;
    let half_widths: Vec<f64> = (0..grid.n()).map(|d| grid.a(d)).collect();
    let q = move |x: &[f64]| {
        1.0 + q_amp
            * half_widths
                .iter()
                .zip(x)
                .map(|(a, xi)| (std::f64::consts::FRAC_PI_2 * xi / a).cos())
                .product::<f64>()
    };
    let m_initial = {
        let off = inst.m_initial_offset;
        let q = q.clone();
        Field::from_space_fn(grid.clone(), move |x| q(x) + off)?
    };
    let u_terminal = {
        let scale = inst.terminal_scale;
        let grid2 = grid.clone();
        Field::from_space_fn(grid.clone(), move |x| {
            scale
                * (0..grid2.n())
                    .map(|d| {
                        let r = x[d] / grid2.a(d);
                        1.0 - r * r
                    })
                    .product::<f64>()
        })?
    };
    let u_dirichlet = mfg::constant_lateral(grid, 0.0)?;
    let m_dirichlet = mfg::lateral_from_fn(grid, move |x, _| q(x))?;
    Ok(InstanceData { m_initial, u_terminal, u_dirichlet, m_dirichlet })
}

/// Forward-solve one instance with the configured fixed-point controls.
pub fn solve_instance(cfg: &ExperimentConfig, coeffs: &MfgCoefficients) -> Result<MfgSolution> {
    let grid = coeffs.grid().clone();
    let data = instance_data(cfg, &grid)?;
    Ok(mfg::picard_solve(
        coeffs,
        &data.m_initial,
        &data.u_terminal,
        &data.u_dirichlet,
        &data.m_dirichlet,
        None,
        None,
        &cfg.picard(),
    )?)
}

/// Build and solve the full pair.
pub fn build_experiment(cfg: &ExperimentConfig) -> Result<Experiment> {
    cfg.validate()?;
    let grid = cfg.grid_spec()?;
    let (coeffs_true, b_true) = instance_coefficients(cfg, &grid, true)?;
    let (coeffs_ref, b_ref) = instance_coefficients(cfg, &grid, false)?;
    let truth = solve_instance(cfg, &coeffs_true)?;
    let reference = solve_instance(cfg, &coeffs_ref)?;
    Ok(Experiment {
        grid,
        coeffs_true,
        coeffs_ref,
        b_true,
        b_ref,
        truth,
        reference,
        carleman: cfg.carleman_params()?,
        eps0: cfg.inversion.eps,
        eps_level_scale: cfg.inversion.eps_level_scale,
        solve: cfg.solve_options(),
        sweep_solve: cfg.sweep_solve_options(),
    })
}
