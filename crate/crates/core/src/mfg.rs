//! Forward solvers for the coupled mean field game system on the box.
//!
//! Both equations are advanced with Crank–Nicolson steps. The value equation
//!
//! `u_t + lap(u) - a(x)|grad u|^2/2 + b(x) I[m] + s(x,t) m = f`
//!
//! is backward in time; it is reflected and marched as a forward heat-type
//! equation. The density equation
//!
//! `m_t - lap(m) - div(a(x) m grad(u)) = g`
//!
//! marches forward directly. Every step solves only the symmetric
//! constant-coefficient system `(I/tau - lap/2)`; the gradient square and the
//! drift divergence stay on the explicit side and are refined by a few
//! per-step sweeps, so a settled step also satisfies the implicit midpoint
//! form of those terms. One sweep reproduces the plain lagged scheme.

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use crate::grid::{self, DomainTag, FaceId, Field, GridError, GridSpec};
use crate::kernel::{self, KernelError, KernelSpec};

/// Relative tolerance for data-compatibility checks at domain corners and
/// shared face edges.
pub const CORNER_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum MfgError {
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("coefficient bound violated: discrete {norm} norm of {name} is {value:.6e}, bound {bound:.6e}")]
    CoefficientBound { name: &'static str, norm: &'static str, value: f64, bound: f64 },
    #[error("missing Dirichlet trace on face {0}")]
    MissingFace(FaceId),
    #[error("incompatible data at {what}: gap {gap:.3e} exceeds {tol:.3e}")]
    CornerMismatch { what: String, gap: f64, tol: f64 },
    #[error("linear step solve failed: {0}")]
    LinearSolve(String),
    #[error("fixed point iteration did not converge after {iters} iterations (last gap {last:.3e})")]
    Diverged { iters: usize, last: f64, history: Vec<f64> },
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

pub type Result<T> = std::result::Result<T, MfgError>;

/// Dirichlet traces, one field per lateral face.
pub type LateralData = BTreeMap<FaceId, Field>;

/// Coefficients of the system together with their smoothness budget.
///
/// Construction checks the a-priori bounds on the grid: `a` up to third
/// divided differences, `s` up to second in space and first in time, and the
/// kernel amplitude up to fourth, all strictly below the kernel bound.
#[derive(Debug, Clone)]
pub struct MfgCoefficients {
    a: Field,
    s: Field,
    kernel: KernelSpec,
}

impl MfgCoefficients {
    pub fn new(a: Field, s: Field, kernel: KernelSpec) -> Result<Self> {
        if a.tag() != DomainTag::Space {
            return Err(MfgError::GridMismatch(format!("a must be a space field, got {}", a.tag())));
        }
        if s.tag() != DomainTag::Spacetime {
            return Err(MfgError::GridMismatch(format!("s must be a spacetime field, got {}", s.tag())));
        }
        if *a.spec().as_ref() != *kernel.grid().as_ref() || *s.spec().as_ref() != *kernel.grid().as_ref() {
            return Err(MfgError::GridMismatch("a, s, kernel live on different grids".into()));
        }
        let bound = kernel.bound();
        let ca = grid::norm_c_space(&a, 3)?;
        if !(ca < bound) {
            return Err(MfgError::CoefficientBound { name: "a", norm: "C^3", value: ca, bound });
        }
        let cs = grid::norm_c_spacetime(&s, 2, 1)?;
        if !(cs < bound) {
            return Err(MfgError::CoefficientBound { name: "s", norm: "C^{2,1}", value: cs, bound });
        }
        let cb = grid::norm_c_space(kernel.b(), 4)?;
        if !(cb < bound) {
            return Err(MfgError::CoefficientBound { name: "b", norm: "C^4", value: cb, bound });
        }
        Ok(MfgCoefficients { a, s, kernel })
    }

    pub fn a(&self) -> &Field {
        &self.a
    }

    pub fn s(&self) -> &Field {
        &self.s
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        self.kernel.grid()
    }
}

/// Per-step controls shared by both marches.
#[derive(Debug, Clone, Copy)]
pub struct StepOptions {
    /// Minimum number of explicit-term sweeps per step. One sweep is the
    /// lagged scheme (first order in time); two restore second order.
    pub sweeps: usize,
    /// Hard cap on sweeps per step.
    pub sweep_cap: usize,
    /// Sweep exit: stop once the slice increment falls below
    /// `step_tol * max(1, |previous slice|_inf)`.
    pub step_tol: f64,
    /// Relative residual target for the inner conjugate-gradient solve
    /// (two space dimensions; the one-dimensional solve is direct).
    pub linear_tol: f64,
}

impl Default for StepOptions {
    fn default() -> Self {
        StepOptions { sweeps: 2, sweep_cap: 12, step_tol: 1e-11, linear_tol: 1e-13 }
    }
}

/// Controls for the outer fixed-point iteration on the coupled system.
#[derive(Debug, Clone, Copy)]
pub struct PicardConfig {
    /// Damping: the density iterate moves by `theta` of the fixed-point map
    /// increment. `1.0` is undamped.
    pub theta: f64,
    /// Convergence threshold on the relative fixed-point gap.
    pub tol: f64,
    pub max_iters: usize,
    pub step: StepOptions,
}

impl Default for PicardConfig {
    fn default() -> Self {
        PicardConfig { theta: 0.5, tol: 1e-10, max_iters: 200, step: StepOptions::default() }
    }
}

/// Converged solution pair with the fixed-point gap history.
#[derive(Debug, Clone)]
pub struct MfgSolution {
    pub u: Field,
    pub m: Field,
    /// Relative gap per outer iteration, last entry at or below the tolerance.
    pub picard_residuals: Vec<f64>,
}

/// Which lateral faces carry measurements.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataMode {
    /// All faces observed.
    Complete,
    /// The face `x_1 = -A_1` is not observed.
    Incomplete,
}

/// Observation bundle extracted from a solution pair: endpoint slices in time
/// plus Dirichlet and outward Neumann traces on the observed faces.
#[derive(Debug, Clone)]
pub struct CipData {
    pub mode: DataMode,
    pub u_initial: Field,
    pub u_final: Field,
    pub m_initial: Field,
    pub m_final: Field,
    pub u_dirichlet: LateralData,
    pub u_neumann: LateralData,
    pub m_dirichlet: LateralData,
    pub m_neumann: LateralData,
}

// ---------------------------------------------------------------------------
// step geometry

/// Precomputed index geometry for one grid: interior node list and per-axis
/// (stride, 1/h^2) pairs.
struct StepGeometry {
    spec: Arc<GridSpec>,
    interior: Vec<usize>,
    boundary: Vec<usize>,
    axes: Vec<(usize, f64)>,
}

impl StepGeometry {
    fn new(spec: &Arc<GridSpec>) -> Self {
        let sl = spec.space_len();
        let mut interior = Vec::new();
        let mut boundary = Vec::new();
        for s in 0..sl {
            if spec.is_space_boundary(s) {
                boundary.push(s);
            } else {
                interior.push(s);
            }
        }
        let axes = (0..spec.n()).map(|d| (spec.space_stride(d), 1.0 / (spec.h(d) * spec.h(d)))).collect();
        StepGeometry { spec: spec.clone(), interior, boundary, axes }
    }

    /// Second-difference sum at one interior node.
    #[inline]
    fn lap_at(&self, w: &[f64], s: usize) -> f64 {
        let mut acc = 0.0;
        for &(str_d, inv_h2) in &self.axes {
            acc += (w[s - str_d] - 2.0 * w[s] + w[s + str_d]) * inv_h2;
        }
        acc
    }
}

// ---------------------------------------------------------------------------
// linear step solvers

/// Solver for the interior system `(I/tau - lap/2) x = rhs`.
enum StepSolver {
    /// Prefactored constant tridiagonal solve, one space dimension.
    Thomas { off: f64, inv_denom: Vec<f64>, c_prime: Vec<f64> },
    /// Matrix-free conjugate gradients, two space dimensions.
    Cg { tol: f64, max_iters: usize },
}

impl StepSolver {
    fn new(geo: &StepGeometry, opts: &StepOptions) -> Self {
        let spec = &geo.spec;
        let tau = spec.tau();
        if spec.n() == 1 {
            let inv_h2 = geo.axes[0].1;
            let diag = 1.0 / tau + inv_h2;
            let off = -0.5 * inv_h2;
            let n_int = geo.interior.len();
            let mut inv_denom = Vec::with_capacity(n_int);
            let mut c_prime = Vec::with_capacity(n_int);
            let mut denom = diag;
            for _ in 0..n_int {
                inv_denom.push(1.0 / denom);
                let cp = off / denom;
                c_prime.push(cp);
                denom = diag - off * cp;
            }
            StepSolver::Thomas { off, inv_denom, c_prime }
        } else {
            let n_int = geo.interior.len();
            StepSolver::Cg { tol: opts.linear_tol, max_iters: 40 * n_int.max(100) }
        }
    }

    fn solve(&self, geo: &StepGeometry, rhs: &[f64], out: &mut [f64]) -> Result<()> {
        match self {
            StepSolver::Thomas { off, inv_denom, c_prime } => {
                let n = rhs.len();
                out[0] = rhs[0] * inv_denom[0];
                for i in 1..n {
                    out[i] = (rhs[i] - off * out[i - 1]) * inv_denom[i];
                }
                for i in (0..n - 1).rev() {
                    out[i] -= c_prime[i] * out[i + 1];
                }
                Ok(())
            }
            StepSolver::Cg { tol, max_iters } => cg_solve(geo, rhs, out, *tol, *max_iters),
        }
    }
}

/// Apply `(I/tau - lap/2)` to an interior vector, zero outside.
fn apply_step_operator(geo: &StepGeometry, v: &[f64], full: &mut [f64], out: &mut [f64]) {
    let tau = geo.spec.tau();
    full.iter_mut().for_each(|x| *x = 0.0);
    for (i, &s) in geo.interior.iter().enumerate() {
        full[s] = v[i];
    }
    for (i, &s) in geo.interior.iter().enumerate() {
        out[i] = v[i] / tau - 0.5 * geo.lap_at(full, s);
    }
}

fn cg_solve(geo: &StepGeometry, rhs: &[f64], x: &mut [f64], tol: f64, max_iters: usize) -> Result<()> {
    let n = rhs.len();
    let mut full = vec![0.0; geo.spec.space_len()];
    let mut r = rhs.to_vec();
    x.iter_mut().for_each(|v| *v = 0.0);
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let rhs_norm = dot(&r, &r).sqrt().max(f64::MIN_POSITIVE);
    let mut rs = dot(&r, &r);
    if rs.sqrt() <= tol * rhs_norm {
        return Ok(());
    }
    for _ in 0..max_iters {
        apply_step_operator(geo, &p, &mut full, &mut ap);
        let alpha = rs / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rs_new = dot(&r, &r);
        if rs_new.sqrt() <= tol * rhs_norm {
            return Ok(());
        }
        let beta = rs_new / rs;
        rs = rs_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    Err(MfgError::LinearSolve(format!(
        "conjugate gradients stalled: residual {:.3e} of {:.3e} after {max_iters} iterations",
        rs.sqrt(),
        tol * rhs_norm
    )))
}

// ---------------------------------------------------------------------------
// boundary overlays

/// Per-level full slices holding Dirichlet values at boundary nodes and zero
/// in the interior, in marching orientation.
fn build_overlays(spec: &Arc<GridSpec>, dirichlet: &LateralData, scale: f64) -> Result<Vec<Vec<f64>>> {
    let n = spec.n();
    let sl = spec.space_len();
    let nt = spec.nt();
    let tol = CORNER_TOL * scale;
    let mut levels = vec![vec![0.0; sl]; nt];
    let mut filled = vec![false; sl];
    for face in grid::all_faces(spec) {
        let f = dirichlet.get(&face).ok_or(MfgError::MissingFace(face))?;
        if f.tag() != DomainTag::LateralFace(face) {
            return Err(MfgError::GridMismatch(format!("trace tagged {} supplied for face {face}", f.tag())));
        }
        if *f.spec().as_ref() != *spec.as_ref() {
            return Err(MfgError::GridMismatch(format!("trace on face {face} lives on a different grid")));
        }
        let flen = spec.face_space_len(face.axis);
        let pinned = if face.positive { spec.nx(face.axis) - 1 } else { 0 };
        for fs in 0..flen {
            let mut ix = [0usize; grid::MAX_DIM];
            let mut rem = fs;
            for a in (0..n).rev() {
                if a == face.axis {
                    continue;
                }
                ix[a] = rem % spec.nx(a);
                rem /= spec.nx(a);
            }
            ix[face.axis] = pinned;
            let sidx = spec.space_flat_index(&ix[..n]);
            for k in 0..nt {
                let v = f.values()[k * flen + fs];
                if filled[sidx] {
                    let gap = (levels[k][sidx] - v).abs();
                    if gap > tol {
                        return Err(MfgError::CornerMismatch {
                            what: format!("shared edge of face {face}"),
                            gap,
                            tol,
                        });
                    }
                } else {
                    levels[k][sidx] = v;
                }
            }
            filled[sidx] = true;
        }
    }
    Ok(levels)
}

fn lateral_scale(dirichlet: &LateralData) -> f64 {
    dirichlet.values().map(|f| f.linf()).fold(1.0, f64::max)
}

/// Check that an endpoint slice agrees with the overlay at boundary nodes.
fn check_endpoint_compatibility(
    geo: &StepGeometry,
    slice: &[f64],
    overlay: &[f64],
    what: &str,
    scale: f64,
) -> Result<()> {
    let tol = CORNER_TOL * scale;
    for &s in &geo.boundary {
        let gap = (slice[s] - overlay[s]).abs();
        if gap > tol {
            return Err(MfgError::CornerMismatch { what: what.to_string(), gap, tol });
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// the march

/// Crank–Nicolson march of `w_t = lap(w) + nl(w) + source` in the buffer's own
/// time orientation. `init` is the level-0 slice; `overlays` carry Dirichlet
/// values per level; `nl` evaluates the explicit term on a slice (interior
/// entries only). Returns the full spacetime buffer.
fn cn_march(
    geo: &StepGeometry,
    solver: &StepSolver,
    opts: &StepOptions,
    init: &[f64],
    overlays: &[Vec<f64>],
    source: &[f64],
    nl: &dyn Fn(usize, &[f64]) -> Vec<f64>,
) -> Result<Vec<f64>> {
    let spec = &geo.spec;
    let sl = spec.space_len();
    let nt = spec.nt();
    let tau = spec.tau();
    let n_int = geo.interior.len();

    let mut out = vec![0.0; sl * nt];
    let mut w = init.to_vec();
    for &s in &geo.boundary {
        w[s] = overlays[0][s];
    }
    out[..sl].copy_from_slice(&w);

    let mut base = vec![0.0; n_int];
    let mut rhs = vec![0.0; n_int];
    let mut sol = vec![0.0; n_int];
    for j in 0..nt - 1 {
        let nl_j = nl(j, &w);
        let src_j = &source[j * sl..(j + 1) * sl];
        let src_j1 = &source[(j + 1) * sl..(j + 2) * sl];
        let bnd = &overlays[j + 1];
        for (i, &s) in geo.interior.iter().enumerate() {
            let mut v = w[s] / tau + 0.5 * (geo.lap_at(&w, s) + nl_j[s] + src_j[s] + src_j1[s]);
            for &(str_d, inv_h2) in &geo.axes {
                v += 0.5 * (bnd[s - str_d] + bnd[s + str_d]) * inv_h2;
            }
            base[i] = v;
        }
        let w_scale = w.iter().fold(1.0f64, |m, &v| m.max(v.abs()));

        let mut guess = w.clone();
        for &s in &geo.boundary {
            guess[s] = bnd[s];
        }
        for sweep in 0..opts.sweep_cap {
            let nl_g = nl(j + 1, &guess);
            for (i, &s) in geo.interior.iter().enumerate() {
                rhs[i] = base[i] + 0.5 * nl_g[s];
            }
            solver.solve(geo, &rhs, &mut sol)?;
            let mut inc = 0.0f64;
            for (i, &s) in geo.interior.iter().enumerate() {
                inc = inc.max((sol[i] - guess[s]).abs());
                guess[s] = sol[i];
            }
            if sweep + 1 >= opts.sweeps && inc <= opts.step_tol * w_scale {
                break;
            }
        }
        w = guess;
        out[(j + 1) * sl..(j + 2) * sl].copy_from_slice(&w);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// explicit terms

/// `-a |grad w|^2 / 2` at interior nodes, central differences.
fn grad_square_term(geo: &StepGeometry, a: &[f64], w: &[f64]) -> Vec<f64> {
    let spec = &geo.spec;
    let mut out = vec![0.0; w.len()];
    let axes: Vec<(usize, f64)> = (0..spec.n()).map(|d| (spec.space_stride(d), 0.5 / spec.h(d))).collect();
    for &s in &geo.interior {
        let mut g2 = 0.0;
        for &(str_d, inv_2h) in &axes {
            let g = (w[s + str_d] - w[s - str_d]) * inv_2h;
            g2 += g * g;
        }
        out[s] = -0.5 * a[s] * g2;
    }
    out
}

/// `div(a m grad u)` at interior nodes via centered fluxes with arithmetic
/// means at the half points.
fn drift_divergence_term(geo: &StepGeometry, a: &[f64], m: &[f64], u: &[f64]) -> Vec<f64> {
    let spec = &geo.spec;
    let mut out = vec![0.0; m.len()];
    let axes: Vec<(usize, f64)> = (0..spec.n()).map(|d| (spec.space_stride(d), spec.h(d))).collect();
    for &s in &geo.interior {
        let mut acc = 0.0;
        for &(str_d, h) in &axes {
            let flux_p = 0.25 * (a[s] + a[s + str_d]) * (m[s] + m[s + str_d]) * (u[s + str_d] - u[s]) / h;
            let flux_m = 0.25 * (a[s - str_d] + a[s]) * (m[s - str_d] + m[s]) * (u[s] - u[s - str_d]) / h;
            acc += (flux_p - flux_m) / h;
        }
        out[s] = acc;
    }
    out
}

// ---------------------------------------------------------------------------
// public solvers

fn expect_spacetime(f: &Field, spec: &Arc<GridSpec>, what: &str) -> Result<()> {
    if f.tag() != DomainTag::Spacetime {
        return Err(MfgError::GridMismatch(format!("{what} must be a spacetime field, got {}", f.tag())));
    }
    if *f.spec().as_ref() != *spec.as_ref() {
        return Err(MfgError::GridMismatch(format!("{what} lives on a different grid")));
    }
    Ok(())
}

fn expect_slice(f: &Field, spec: &Arc<GridSpec>, what: &str) -> Result<()> {
    match f.tag() {
        DomainTag::Space | DomainTag::TimeSlice(_) => {}
        tag => return Err(MfgError::GridMismatch(format!("{what} must be a spatial slice, got {tag}"))),
    }
    if *f.spec().as_ref() != *spec.as_ref() {
        return Err(MfgError::GridMismatch(format!("{what} lives on a different grid")));
    }
    Ok(())
}

/// Source of the value equation in forward form: `b I[m] + s m - f`.
fn hjb_source(coeffs: &MfgCoefficients, m: &Field, forcing: Option<&Field>) -> Result<Field> {
    let mut source = kernel::apply_interaction(coeffs.kernel(), m)?;
    source = source.add(&coeffs.s.mul(m)?)?;
    if let Some(f) = forcing {
        source = source.sub(f)?;
    }
    Ok(source)
}

/// Solve the value equation backward from `terminal` given the density `m`.
///
/// The optional forcing is the right-hand side `f` of the equation as written
/// in the module docs; manufactured-solution studies use it.
pub fn solve_hjb_backward(
    coeffs: &MfgCoefficients,
    m: &Field,
    terminal: &Field,
    dirichlet: &LateralData,
    forcing: Option<&Field>,
    opts: &StepOptions,
) -> Result<Field> {
    let spec = coeffs.grid().clone();
    expect_spacetime(m, &spec, "density")?;
    expect_slice(terminal, &spec, "terminal value")?;
    if let Some(f) = forcing {
        expect_spacetime(f, &spec, "forcing")?;
    }

    let source = hjb_source(coeffs, m, forcing)?;
    let source_rev = grid::reflect_time(&source)?;
    let mut dir_rev = LateralData::new();
    for (face, f) in dirichlet {
        dir_rev.insert(*face, grid::reflect_time(f)?);
    }
    let scale = lateral_scale(&dir_rev).max(terminal.linf());
    let geo = StepGeometry::new(&spec);
    let overlays = build_overlays(&spec, &dir_rev, scale)?;
    check_endpoint_compatibility(&geo, terminal.values(), &overlays[0], "terminal value vs lateral traces", scale)?;

    let solver = StepSolver::new(&geo, opts);
    let a = coeffs.a.values();
    let nl = |_j: usize, w: &[f64]| grad_square_term(&geo, a, w);
    let buf = cn_march(&geo, &solver, opts, terminal.values(), &overlays, source_rev.values(), &nl)?;
    let rev = Field::from_values(spec, DomainTag::Spacetime, buf)?;
    Ok(grid::reflect_time(&rev)?)
}

/// Solve the density equation forward from `initial` given the value `u`.
///
/// The optional forcing is the right-hand side `g` of the equation as written
/// in the module docs.
pub fn solve_fp_forward(
    coeffs: &MfgCoefficients,
    u: &Field,
    initial: &Field,
    dirichlet: &LateralData,
    forcing: Option<&Field>,
    opts: &StepOptions,
) -> Result<Field> {
    let spec = coeffs.grid().clone();
    expect_spacetime(u, &spec, "value field")?;
    expect_slice(initial, &spec, "initial density")?;
    if let Some(g) = forcing {
        expect_spacetime(g, &spec, "forcing")?;
    }

    let source = match forcing {
        Some(g) => g.clone(),
        None => Field::zeros(spec.clone(), DomainTag::Spacetime)?,
    };
    let scale = lateral_scale(dirichlet).max(initial.linf());
    let geo = StepGeometry::new(&spec);
    let overlays = build_overlays(&spec, dirichlet, scale)?;
    check_endpoint_compatibility(&geo, initial.values(), &overlays[0], "initial density vs lateral traces", scale)?;

    let solver = StepSolver::new(&geo, opts);
    let a = coeffs.a.values();
    let sl = spec.space_len();
    let uv = u.values();
    let nl = |j: usize, mslice: &[f64]| drift_divergence_term(&geo, a, mslice, &uv[j * sl..(j + 1) * sl]);
    let buf = cn_march(&geo, &solver, opts, initial.values(), &overlays, source.values(), &nl)?;
    Ok(Field::from_values(spec, DomainTag::Spacetime, buf)?)
}

// ---------------------------------------------------------------------------
// discrete residuals

/// Step-cell L2 norm of the per-step residual rows.
fn residual_norm(
    geo: &StepGeometry,
    field: &Field,
    lam: &dyn Fn(usize, &[f64]) -> Vec<f64>,
    backward: bool,
) -> f64 {
    let spec = &geo.spec;
    let sl = spec.space_len();
    let nt = spec.nt();
    let tau = spec.tau();
    let cell: f64 = (0..spec.n()).map(|d| spec.h(d)).product();
    let v = field.values();
    let sign = if backward { 1.0 } else { -1.0 };
    let mut acc = 0.0;
    let mut lam_k = lam(0, &v[..sl]);
    for k in 0..nt - 1 {
        let lam_k1 = lam(k + 1, &v[(k + 1) * sl..(k + 2) * sl]);
        let wk = &v[k * sl..(k + 1) * sl];
        let wk1 = &v[(k + 1) * sl..(k + 2) * sl];
        for &s in &geo.interior {
            let r = (wk1[s] - wk[s]) / tau + sign * 0.5 * (lam_k[s] + lam_k1[s]);
            acc += tau * cell * r * r;
        }
        lam_k = lam_k1;
    }
    acc.sqrt()
}

/// Discrete residual of the Crank–Nicolson rows of the value equation for the
/// pair `(u, m)`, measured in the step-cell L2 norm over interior nodes.
pub fn cn_residual_hjb(
    coeffs: &MfgCoefficients,
    u: &Field,
    m: &Field,
    forcing: Option<&Field>,
) -> Result<f64> {
    let spec = coeffs.grid().clone();
    expect_spacetime(u, &spec, "value field")?;
    expect_spacetime(m, &spec, "density")?;
    let source = hjb_source(coeffs, m, forcing)?;
    let geo = StepGeometry::new(&spec);
    let a = coeffs.a.values();
    let sl = spec.space_len();
    let sv = source.values();
    let lam = |k: usize, w: &[f64]| {
        let mut t = grad_square_term(&geo, a, w);
        let src = &sv[k * sl..(k + 1) * sl];
        for &s in &geo.interior {
            t[s] += geo.lap_at(w, s) + src[s];
        }
        t
    };
    Ok(residual_norm(&geo, u, &lam, true))
}

/// Discrete residual of the Crank–Nicolson rows of the density equation for
/// the pair `(m, u)`, measured in the step-cell L2 norm over interior nodes.
pub fn cn_residual_fp(
    coeffs: &MfgCoefficients,
    m: &Field,
    u: &Field,
    forcing: Option<&Field>,
) -> Result<f64> {
    let spec = coeffs.grid().clone();
    expect_spacetime(u, &spec, "value field")?;
    expect_spacetime(m, &spec, "density")?;
    if let Some(g) = forcing {
        expect_spacetime(g, &spec, "forcing")?;
    }
    let geo = StepGeometry::new(&spec);
    let a = coeffs.a.values();
    let sl = spec.space_len();
    let uv = u.values();
    let lam = |k: usize, w: &[f64]| {
        let mut t = drift_divergence_term(&geo, a, w, &uv[k * sl..(k + 1) * sl]);
        for &s in &geo.interior {
            t[s] += geo.lap_at(w, s);
            if let Some(g) = forcing {
                t[s] += g.values()[k * sl + s];
            }
        }
        t
    };
    Ok(residual_norm(&geo, m, &lam, false))
}

// ---------------------------------------------------------------------------
// coupled fixed point

fn qt_l2(f: &Field) -> f64 {
    grid::norm_l2(f)
}

/// Solve the coupled system by damped fixed-point iteration on the density.
///
/// Each iteration solves the value equation for the current density iterate,
/// then the density equation for that value. On convergence the returned pair
/// is `(u, FP(u))`: the density rows hold to solver precision and the value
/// rows to a small multiple of the fixed-point tolerance.
pub fn picard_solve(
    coeffs: &MfgCoefficients,
    m_initial: &Field,
    u_terminal: &Field,
    u_dirichlet: &LateralData,
    m_dirichlet: &LateralData,
    hjb_forcing: Option<&Field>,
    fp_forcing: Option<&Field>,
    config: &PicardConfig,
) -> Result<MfgSolution> {
    let spec = coeffs.grid().clone();
    expect_slice(m_initial, &spec, "initial density")?;
    expect_slice(u_terminal, &spec, "terminal value")?;

    let mut m_k = grid::broadcast_in_time(m_initial)?;
    let mut history = Vec::new();
    for _ in 0..config.max_iters {
        let u_k = solve_hjb_backward(coeffs, &m_k, u_terminal, u_dirichlet, hjb_forcing, &config.step)?;
        let m_new = solve_fp_forward(coeffs, &u_k, m_initial, m_dirichlet, fp_forcing, &config.step)?;
        let diff = m_new.sub(&m_k)?;
        let gap = qt_l2(&diff) / qt_l2(&m_new).max(1.0);
        history.push(gap);
        if gap <= config.tol {
            return Ok(MfgSolution { u: u_k, m: m_new, picard_residuals: history });
        }
        // Stagnation: six consecutive gaps within a relative band and still
        // above tolerance means the damped map is not contracting.
        let n = history.len();
        if n >= 6 {
            let window = &history[n - 6..];
            let lo = window.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = window.iter().cloned().fold(0.0f64, f64::max);
            if hi - lo <= 1e-3 * hi {
                return Err(MfgError::Diverged { iters: n, last: gap, history });
            }
        }
        m_k = m_k.add(&diff.scale(config.theta))?;
    }
    let last = *history.last().unwrap_or(&f64::NAN);
    Err(MfgError::Diverged { iters: config.max_iters, last, history })
}

// ---------------------------------------------------------------------------
// observation extraction

/// Extract endpoint slices and lateral traces from a solution pair. Neumann
/// traces use the grid's one-sided second-order boundary stencils and point
/// along the outward normal. In the incomplete mode the face `x_1 = -A_1`
/// is omitted from all four trace maps.
pub fn generate_cip_data(u: &Field, m: &Field, mode: DataMode) -> Result<CipData> {
    let spec = u.spec().clone();
    expect_spacetime(u, &spec, "value field")?;
    expect_spacetime(m, &spec, "density")?;
    if *m.spec().as_ref() != *spec.as_ref() {
        return Err(MfgError::GridMismatch("value and density grids differ".into()));
    }
    let nt = spec.nt();

    let mut data = CipData {
        mode,
        u_initial: grid::time_slice_space(u, 0)?,
        u_final: grid::time_slice_space(u, nt - 1)?,
        m_initial: grid::time_slice_space(m, 0)?,
        m_final: grid::time_slice_space(m, nt - 1)?,
        u_dirichlet: LateralData::new(),
        u_neumann: LateralData::new(),
        m_dirichlet: LateralData::new(),
        m_neumann: LateralData::new(),
    };

    for face in grid::all_faces(&spec) {
        if mode == DataMode::Incomplete && face.axis == 0 && !face.positive {
            continue;
        }
        let sign = if face.positive { 1.0 } else { -1.0 };
        for (f, dir_map, neu_map) in [
            (u, &mut data.u_dirichlet, &mut data.u_neumann),
            (m, &mut data.m_dirichlet, &mut data.m_neumann),
        ] {
            let trace = grid::restrict_to_face(f, face)?;
            let d = grid::derivative(f, grid::Axis::Spatial(face.axis))?;
            let normal = grid::restrict_to_face(&d, face)?.scale(sign);
            dir_map.insert(face, trace);
            neu_map.insert(face, normal);
        }
    }
    Ok(data)
}

/// Dirichlet maps holding one constant on every face.
pub fn constant_lateral(spec: &Arc<GridSpec>, c: f64) -> Result<LateralData> {
    let mut out = LateralData::new();
    for face in grid::all_faces(spec) {
        out.insert(face, Field::from_face_fn(spec.clone(), face, |_, _| c)?);
    }
    Ok(out)
}

/// Dirichlet maps sampled from a spacetime function on every face.
pub fn lateral_from_fn(
    spec: &Arc<GridSpec>,
    f: impl Fn(&[f64], f64) -> f64,
) -> Result<LateralData> {
    let mut out = LateralData::new();
    for face in grid::all_faces(spec) {
        out.insert(face, Field::from_face_fn(spec.clone(), face, &f)?);
    }
    Ok(out)
}
