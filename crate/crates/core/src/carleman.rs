//! Carleman weight machinery for the operators `d_t - Lap` and `d_t + Lap`.
//!
//! The weight is pseudo-convex in the `x_1` direction only:
//! `psi(x) = x_1 + A_1 + 2`, `phi(x) = exp(2 lambda psi^nu)`. Raw `phi`
//! overflows 64-bit floats once `lambda psi^nu` passes ~350, so every
//! computation here uses the max-normalized weight
//! `exp(2 lambda psi^nu - 2 lambda (2 A_1 + 2)^nu) <= 1` and carries
//! boundary prefactors in log space. All the inequalities being checked are
//! homogeneous in `phi`, so the normalization changes no verdict.
//!
//! The pointwise estimate decomposes the weighted square of the operator into
//! coercive terms plus an exact time derivative `dt(V)` and an exact
//! divergence `div(U)`; `eval_v` and `eval_u` evaluate those carriers
//! verbatim. `V` contains no time derivative of the argument, which is what
//! makes the endpoint contributions cancel for fields with matching initial
//! and terminal slices.

use std::sync::Arc;

use thiserror::Error;

use crate::grid::{
    self, all_faces, Axis, DomainTag, FaceId, Field, GridError, GridSpec, LateralTraces,
};

#[derive(Debug, Error)]
pub enum CarlemanError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("coordinate {x1} outside [-{a1}, {a1}]")]
    OutOfDomain { x1: f64, a1: f64 },
    #[error("field endpoints differ: max |u(.,0)-u(.,T)| = {gap}, tolerance {tol}")]
    NotTimePeriodic { gap: f64, tol: f64 },
    #[error("noise level {0} outside (0, 1)")]
    BadDelta(f64),
    #[error("calibration failed: {0}")]
    Calibration(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

pub type Result<T> = std::result::Result<T, CarlemanError>;

/// Which parabolic operator a check targets. `Backward` is the native
/// `d_t - Lap`; `Forward` is `d_t + Lap`, handled by the substitution
/// `t -> T - t`, under which the two operators trade places exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorSign {
    Backward,
    Forward,
}

/// Weight parameters. `lambda0` is the empirically calibrated validity
/// threshold, filled in by [`calibrate_lambda0`].
#[derive(Debug, Clone, PartialEq)]
pub struct CarlemanParams {
    lambda: f64,
    nu: f64,
    gamma: f64,
    a1: f64,
    pub lambda0: Option<f64>,
}

impl CarlemanParams {
    pub fn new(lambda: f64, nu: f64, gamma: f64, a1: f64) -> Result<Self> {
        if !lambda.is_finite() || lambda <= 1.0 {
            return Err(CarlemanError::InvalidParams(format!("lambda must exceed 1, got {lambda}")));
        }
        if !nu.is_finite() || nu <= 2.0 {
            return Err(CarlemanError::InvalidParams(format!("nu must exceed 2, got {nu}")));
        }
        if !a1.is_finite() || a1 <= 0.0 {
            return Err(CarlemanError::InvalidParams(format!("A_1 must be positive, got {a1}")));
        }
        if !gamma.is_finite() || gamma <= 0.0 || gamma >= 2.0 * a1 {
            return Err(CarlemanError::InvalidParams(format!(
                "gamma must lie in (0, {}), got {gamma}",
                2.0 * a1
            )));
        }
        Ok(CarlemanParams { lambda, nu, gamma, a1, lambda0: None })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn a1(&self) -> f64 {
        self.a1
    }

    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        let mut p = CarlemanParams::new(lambda, self.nu, self.gamma, self.a1)?;
        p.lambda0 = self.lambda0;
        Ok(p)
    }

    /// `psi(x_1) = x_1 + A_1 + 2`, ranging over `[2, 2 A_1 + 2]`.
    pub fn psi(&self, x1: f64) -> Result<f64> {
        if x1 < -self.a1 - 1e-12 || x1 > self.a1 + 1e-12 {
            return Err(CarlemanError::OutOfDomain { x1, a1: self.a1 });
        }
        Ok(x1 + self.a1 + 2.0)
    }

    #[inline]
    fn psi_unchecked(&self, x1: f64) -> f64 {
        debug_assert!(x1 >= -self.a1 - 1e-9 && x1 <= self.a1 + 1e-9);
        x1 + self.a1 + 2.0
    }

    /// `log phi = 2 lambda psi^nu` (unscaled).
    pub fn log_cwf(&self, x1: f64) -> Result<f64> {
        Ok(2.0 * self.lambda * self.psi(x1)?.powf(self.nu))
    }

    /// Log of the normalizer `2 lambda (2 A_1 + 2)^nu`, the weight's maximum.
    pub fn log_normalizer(&self) -> f64 {
        2.0 * self.lambda * (2.0 * self.a1 + 2.0).powf(self.nu)
    }

    /// Max-normalized weight in `(0, 1]`, equal to 1 at `x_1 = +A_1`.
    pub fn cwf_scaled(&self, x1: f64) -> Result<f64> {
        Ok((self.log_cwf(x1)? - self.log_normalizer()).exp())
    }
}

/// Noise-to-weight schedule `lambda(delta) = ln(delta^{-1/d})` with
/// `d = 1.5 [(gamma+2)^nu - 2^nu + (2 A_1 + 2)^nu]`.
pub fn lambda_of_delta(delta: f64, gamma: f64, a1: f64, nu0: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(CarlemanError::BadDelta(delta));
    }
    let d = 1.5 * ((gamma + 2.0).powf(nu0) - 2.0f64.powf(nu0) + (2.0 * a1 + 2.0).powf(nu0));
    Ok((1.0 / delta).ln() / d)
}

/// Stability exponent
/// `alpha = ((gamma+2)^nu - 2^nu) / ((gamma+2)^nu - 2^nu + (2 A_1 + 2)^nu)`,
/// always in (0, 1).
pub fn holder_exponent(gamma: f64, a1: f64, nu0: f64) -> Result<f64> {
    if !(gamma > 0.0 && gamma < 2.0 * a1) {
        return Err(CarlemanError::InvalidParams(format!(
            "gamma must lie in (0, {}), got {gamma}",
            2.0 * a1
        )));
    }
    let num = (gamma + 2.0).powf(nu0) - 2.0f64.powf(nu0);
    Ok(num / (num + (2.0 * a1 + 2.0).powf(nu0)))
}

// ---------------------------------------------------------------------------
// Weight tables and the V / U carriers
// ---------------------------------------------------------------------------

/// Per-`x_1`-node values of every weight expression the carriers use.
struct WeightTables {
    /// Scaled weight `phi`.
    phi: Vec<f64>,
    /// `psi^{1 - nu}`.
    psi_m: Vec<f64>,
    /// `psi^{nu - 1}`.
    psi_p: Vec<f64>,
    /// `psi^{2 nu - 2}`.
    psi_pp: Vec<f64>,
    /// `1 - 2 psi^{-nu} (nu - 1) / (lambda nu)`.
    bfac: Vec<f64>,
}

impl WeightTables {
    fn build(spec: &GridSpec, p: &CarlemanParams) -> WeightTables {
        let nx1 = spec.nx(0);
        let mut t = WeightTables {
            phi: Vec::with_capacity(nx1),
            psi_m: Vec::with_capacity(nx1),
            psi_p: Vec::with_capacity(nx1),
            psi_pp: Vec::with_capacity(nx1),
            bfac: Vec::with_capacity(nx1),
        };
        let log_norm = p.log_normalizer();
        for i in 0..nx1 {
            let psi = p.psi_unchecked(spec.coord(0, i));
            t.phi.push((2.0 * p.lambda * psi.powf(p.nu) - log_norm).exp());
            t.psi_m.push(psi.powf(1.0 - p.nu));
            t.psi_p.push(psi.powf(p.nu - 1.0));
            t.psi_pp.push(psi.powf(2.0 * p.nu - 2.0));
            t.bfac.push(1.0 - 2.0 * psi.powf(-p.nu) * (p.nu - 1.0) / (p.lambda * p.nu));
        }
        t
    }
}

#[inline]
fn x1_index(spec: &GridSpec, sidx: usize) -> usize {
    sidx / spec.space_stride(0)
}

/// Derivative bundle shared by the carrier evaluations.
struct DerivPack {
    ut: Field,
    grad: Vec<Field>,
    /// `hess[i][j]`, ordered pairs.
    hess: Vec<Vec<Field>>,
}

impl DerivPack {
    fn build(u: &Field) -> Result<DerivPack> {
        let ut = grid::dt(u)?;
        let grad = grid::gradient(u)?;
        let n = u.spec().n();
        let mut hess = Vec::with_capacity(n);
        for gi in grad.iter() {
            let mut row = Vec::with_capacity(n);
            for j in 0..n {
                row.push(grid::derivative(gi, Axis::Spatial(j))?);
            }
            hess.push(row);
        }
        Ok(DerivPack { ut, grad, hess })
    }
}

/// The endpoint carrier `V`: the quantity whose time derivative appears in
/// the pointwise estimate. Contains no time derivative of `u`, so fields
/// with `u(.,0) = u(.,T)` have exactly matching `V` slices.
pub fn eval_v(u: &Field, p: &CarlemanParams) -> Result<Field> {
    let groups = eval_v_groups(u, p)?;
    let mut acc = groups[0].clone();
    acc = acc.add(&groups[1])?;
    acc = acc.add(&groups[2])?;
    Ok(acc)
}

/// The three grouped terms of `V`, kept separate for unit checks:
/// the gradient group, the negative zeroth-order group, and the
/// low-order remainder group.
pub(crate) fn eval_v_groups(u: &Field, p: &CarlemanParams) -> Result<[Field; 3]> {
    if u.tag() != DomainTag::Spacetime {
        return Err(CarlemanError::Grid(GridError::DomainMismatch {
            expected: "spacetime".into(),
            got: u.tag().to_string(),
        }));
    }
    let spec = u.spec().clone();
    let tabs = WeightTables::build(&spec, p);
    let d = DerivPack::build(u)?;
    let n = spec.n();
    let lam = p.lambda;
    let nu = p.nu;
    let q2l = 2.0 * lam / (2.0 * lam + 1.0);
    let q1 = 1.0 / (2.0 * lam + 1.0);

    let len = u.len();
    let sl = spec.space_len();
    let mut g0 = vec![0.0; len];
    let mut g1 = vec![0.0; len];
    let mut g2 = vec![0.0; len];
    for idx in 0..len {
        let sidx = idx % sl;
        let i1 = x1_index(&spec, sidx);
        let phi = tabs.phi[i1];
        let uv = u.at(idx);
        let ux1 = d.grad[0].at(idx);
        let e = ux1 + lam * nu * tabs.psi_p[i1] * uv;
        let mut tang_sq = 0.0;
        let mut grad_sq = ux1 * ux1;
        for gi in d.grad.iter().take(n).skip(1) {
            let g = gi.at(idx);
            tang_sq += g * g;
            grad_sq += g * g;
        }
        g0[idx] = q2l * (e * e + tang_sq) * tabs.psi_m[i1] * phi;
        g1[idx] = -q2l * lam * lam * nu * nu * tabs.psi_p[i1] * tabs.bfac[i1] * uv * uv * phi;
        g2[idx] = (lam * lam * q1) * uv * uv * phi + q1 * grad_sq * phi;
    }
    Ok([
        Field::from_values(spec.clone(), DomainTag::Spacetime, g0)?,
        Field::from_values(spec.clone(), DomainTag::Spacetime, g1)?,
        Field::from_values(spec, DomainTag::Spacetime, g2)?,
    ])
}

/// The flux carrier `U`: one spacetime component per spatial axis, whose
/// divergence appears in the pointwise estimate.
pub fn eval_u(u: &Field, p: &CarlemanParams) -> Result<Vec<Field>> {
    if u.tag() != DomainTag::Spacetime {
        return Err(CarlemanError::Grid(GridError::DomainMismatch {
            expected: "spacetime".into(),
            got: u.tag().to_string(),
        }));
    }
    let spec = u.spec().clone();
    let tabs = WeightTables::build(&spec, p);
    let d = DerivPack::build(u)?;
    let n = spec.n();
    let lam = p.lambda;
    let nu = p.nu;
    let q2l = 2.0 * lam / (2.0 * lam + 1.0);
    let q1 = 1.0 / (2.0 * lam + 1.0);

    let len = u.len();
    let sl = spec.space_len();
    let mut comps: Vec<Vec<f64>> = vec![vec![0.0; len]; n];
    for idx in 0..len {
        let sidx = idx % sl;
        let i1 = x1_index(&spec, sidx);
        let phi = tabs.phi[i1];
        let uv = u.at(idx);
        let ut = d.ut.at(idx);
        let ux1 = d.grad[0].at(idx);
        let e = ux1 + lam * nu * tabs.psi_p[i1] * uv;

        let mut tang_sq = 0.0;
        for gi in d.grad.iter().take(n).skip(1) {
            let g = gi.at(idx);
            tang_sq += g * g;
        }

        // x_1 component: six brackets target it.
        let mut c0 = q2l * (-2.0 * ut * e * tabs.psi_m[i1]);
        c0 += q2l * (-2.0 * lam * nu * e * e + 2.0 * lam * nu * tang_sq);
        c0 += q2l * (-2.0 * lam.powi(3) * nu.powi(3) * tabs.psi_pp[i1] * tabs.bfac[i1] * uv * uv);
        c0 += q2l * (-lam * ux1 * uv + lam * lam * nu * tabs.psi_p[i1] * uv * uv);
        c0 += q1 * (-2.0 * ut * ux1);
        for i in 1..n {
            c0 += q1 * (-2.0 * d.hess[0][i].at(idx) * d.grad[i].at(idx));
        }
        comps[0][idx] = c0 * phi;

        // Tangential components.
        for i in 1..n {
            let uxi = d.grad[i].at(idx);
            let mut ci = q2l * (-4.0 * lam * nu * e * uxi - 2.0 * ut * uxi * tabs.psi_m[i1]);
            ci += q2l * (-lam * uxi * uv);
            ci += q1 * (-2.0 * ut * uxi);
            ci += q1 * (2.0 * d.hess[0][0].at(idx) * uxi);
            for j in 1..n {
                ci += q1 * (d.hess[j][j].at(idx) * uxi - d.hess[i][j].at(idx) * d.grad[j].at(idx));
            }
            comps[i][idx] = ci * phi;
        }
    }
    comps
        .into_iter()
        .map(|vals| Ok(Field::from_values(spec.clone(), DomainTag::Spacetime, vals)?))
        .collect()
}

// ---------------------------------------------------------------------------
// Pointwise check
// ---------------------------------------------------------------------------

pub struct PointwiseReport {
    /// Minimum slack over strictly interior nodes.
    pub min_slack: f64,
    /// Fraction of strictly interior nodes with negative slack.
    pub neg_fraction: f64,
    /// The full slack field (boundary nodes included, informational).
    pub slack: Field,
}

/// Node-wise slack of the pointwise estimate at a supplied constant `c`:
/// `(u_t -+ Lap u)^2 phi - (c/lambda)(u_t^2 + sum u_ij^2) phi
///  - c (lambda |grad u|^2 + lambda^3 u^2) phi - dt(V) - div(U)`.
/// Negative slack is a report outcome, not an error. The second-derivative
/// block uses the full index range over all axis pairs.
pub fn check_pointwise(u: &Field, p: &CarlemanParams, sign: OperatorSign, c: f64) -> Result<PointwiseReport> {
    match sign {
        OperatorSign::Backward => check_pointwise_native(u, p, c),
        OperatorSign::Forward => {
            let w = grid::reflect_time(u)?;
            let rep = check_pointwise_native(&w, p, c)?;
            Ok(PointwiseReport {
                min_slack: rep.min_slack,
                neg_fraction: rep.neg_fraction,
                slack: grid::reflect_time(&rep.slack)?,
            })
        }
    }
}

fn check_pointwise_native(u: &Field, p: &CarlemanParams, c: f64) -> Result<PointwiseReport> {
    let spec = u.spec().clone();
    let tabs = WeightTables::build(&spec, p);
    let d = DerivPack::build(u)?;
    let n = spec.n();
    let lam = p.lambda;
    let sl = spec.space_len();

    let lap = {
        let mut acc = d.hess[0][0].clone();
        for i in 1..n {
            acc = acc.add(&d.hess[i][i])?;
        }
        acc
    };
    let dtv = grid::dt(&eval_v(u, p)?)?;
    let divu = grid::divergence(&eval_u(u, p)?)?;

    let mut slack = vec![0.0; u.len()];
    for idx in 0..u.len() {
        let sidx = idx % sl;
        let i1 = x1_index(&spec, sidx);
        let phi = tabs.phi[i1];
        let op = d.ut.at(idx) - lap.at(idx);
        let mut hess_sq = 0.0;
        for row in &d.hess {
            for hij in row {
                let h = hij.at(idx);
                hess_sq += h * h;
            }
        }
        let mut grad_sq = 0.0;
        for gi in &d.grad {
            let g = gi.at(idx);
            grad_sq += g * g;
        }
        let uv = u.at(idx);
        slack[idx] = op * op * phi
            - (c / lam) * (d.ut.at(idx).powi(2) + hess_sq) * phi
            - c * (lam * grad_sq + lam.powi(3) * uv * uv) * phi
            - dtv.at(idx)
            - divu.at(idx);
    }

    let mut min_slack = f64::INFINITY;
    let mut neg = 0usize;
    let mut count = 0usize;
    for k in 1..spec.nt() - 1 {
        for s in 0..sl {
            if spec.is_space_boundary(s) {
                continue;
            }
            let v = slack[k * sl + s];
            min_slack = min_slack.min(v);
            if v < 0.0 {
                neg += 1;
            }
            count += 1;
        }
    }
    Ok(PointwiseReport {
        min_slack,
        neg_fraction: neg as f64 / count.max(1) as f64,
        slack: Field::from_values(spec, DomainTag::Spacetime, slack)?,
    })
}

// ---------------------------------------------------------------------------
// Integral check
// ---------------------------------------------------------------------------

/// All quantities are natural logs of the (scaled-weight) terms; `NEG_INFINITY`
/// marks an exactly zero term.
pub struct IntegralReport {
    /// Data block on the observation-free face, weighted `exp(3 lambda 2^nu)`.
    pub ln_data_gamma: f64,
    /// Data block on the remaining lateral boundary, weighted
    /// `exp(3 lambda (2 A_1 + 2)^nu)`.
    pub ln_data_rest: f64,
    /// Weighted square of the parabolic operator over the cylinder.
    pub ln_operator: f64,
    /// Energy block `(1/lambda) int (u_t^2 + sum_{i,j >= 2} u_ij^2) phi`.
    pub ln_energy: f64,
    /// Same with the second-derivative sum over all axis pairs.
    pub ln_energy_full: f64,
    /// Lower-order block `int (lambda |grad u|^2 + lambda^3 u^2) phi`.
    pub ln_lower: f64,
    /// Largest constant for which the estimate holds with the reduced
    /// second-derivative range; infinite when the data side dominates.
    pub admissible_c: f64,
    /// Same with the full second-derivative range.
    pub admissible_c_full: f64,
}

/// `ln(exp(a) + exp(b))` without overflow.
fn ln_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// `ln(exp(a) - exp(b))`, requiring `a > b`; `None` when `a <= b`.
fn ln_sub(a: f64, b: f64) -> Option<f64> {
    if b == f64::NEG_INFINITY {
        return Some(a);
    }
    if a <= b {
        return None;
    }
    Some(a + (-((b - a).exp())).ln_1p())
}

fn ln_or_neg_inf(v: f64) -> f64 {
    if v > 0.0 {
        v.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// Relative endpoint mismatch tolerance for the periodicity precondition.
const PERIODICITY_TOL: f64 = 1e-10;

/// Integral estimate check. The argument must satisfy `u(.,0) = u(.,T)`;
/// both faces' anisotropic trace norms are computed from the full spacetime
/// field (normal derivatives included).
pub fn check_integral(u: &Field, p: &CarlemanParams, sign: OperatorSign) -> Result<IntegralReport> {
    let w = match sign {
        OperatorSign::Backward => u.clone(),
        OperatorSign::Forward => grid::reflect_time(u)?,
    };
    let spec = w.spec().clone();
    let sl = spec.space_len();
    let last = (spec.nt() - 1) * sl;
    let mut gap = 0.0f64;
    for s in 0..sl {
        gap = gap.max((w.at(s) - w.at(last + s)).abs());
    }
    let scale = w.linf().max(1.0);
    if gap > PERIODICITY_TOL * scale {
        return Err(CarlemanError::NotTimePeriodic { gap, tol: PERIODICITY_TOL * scale });
    }

    let tabs = WeightTables::build(&spec, p);
    let d = DerivPack::build(&w)?;
    let n = spec.n();
    let lam = p.lambda;

    // Interior integrals with the scaled weight, accumulated in fixed order.
    let lap = {
        let mut acc = d.hess[0][0].clone();
        for i in 1..n {
            acc = acc.add(&d.hess[i][i])?;
        }
        acc
    };
    let mut int_op = 0.0;
    let mut int_energy_red = 0.0;
    let mut int_energy_full = 0.0;
    let mut int_lower = 0.0;
    for idx in 0..w.len() {
        let qw = grid::quad_weight(&w, idx);
        let i1 = x1_index(&spec, idx % sl);
        let phi = tabs.phi[i1];
        let op = d.ut.at(idx) - lap.at(idx);
        let ut2 = d.ut.at(idx).powi(2);
        let mut hess_red = 0.0;
        let mut hess_full = 0.0;
        for (i, row) in d.hess.iter().enumerate() {
            for (j, hij) in row.iter().enumerate() {
                let h2 = hij.at(idx).powi(2);
                hess_full += h2;
                if i >= 1 && j >= 1 {
                    hess_red += h2;
                }
            }
        }
        let mut grad_sq = 0.0;
        for gi in &d.grad {
            grad_sq += gi.at(idx).powi(2);
        }
        let uv = w.at(idx);
        int_op += qw * op * op * phi;
        int_energy_red += qw * (ut2 + hess_red) * phi;
        int_energy_full += qw * (ut2 + hess_full) * phi;
        int_lower += qw * (lam * grad_sq + lam.powi(3) * uv * uv) * phi;
    }

    // Boundary blocks: anisotropic trace norms of u and of its normal
    // derivative, per face, in log space with the scaled prefactors.
    let log_norm = p.log_normalizer();
    let gamma_face = FaceId { axis: 0, positive: false };
    let mut sq_gamma = 0.0f64;
    let mut sq_rest = 0.0f64;
    for face in all_faces(&spec) {
        let tr_u = LateralTraces::from_spacetime(&w, face)?;
        let normal = &d.grad[face.axis];
        let tr_n = LateralTraces::from_spacetime(normal, face)?;
        let block = tr_u.norm_h21().powi(2) + tr_n.norm_h10().powi(2);
        if face == gamma_face {
            sq_gamma += block;
        } else {
            sq_rest += block;
        }
    }
    let ln_data_gamma = 3.0 * lam * 2.0f64.powf(p.nu) - log_norm + ln_or_neg_inf(sq_gamma);
    let ln_data_rest =
        3.0 * lam * (2.0 * p.a1 + 2.0).powf(p.nu) - log_norm + ln_or_neg_inf(sq_rest);

    let ln_operator = ln_or_neg_inf(int_op);
    let ln_energy = ln_or_neg_inf(int_energy_red / lam);
    let ln_energy_full = ln_or_neg_inf(int_energy_full / lam);
    let ln_lower = ln_or_neg_inf(int_lower);

    let ln_data = ln_add(ln_data_gamma, ln_data_rest);
    let admissible = |ln_energy_term: f64| -> f64 {
        let ln_rhs = ln_add(ln_energy_term, ln_lower);
        match ln_sub(ln_rhs, ln_data) {
            None => f64::INFINITY,
            Some(ln_margin) => (ln_operator - ln_margin).exp(),
        }
    };

    Ok(IntegralReport {
        ln_data_gamma,
        ln_data_rest,
        ln_operator,
        ln_energy,
        ln_energy_full,
        ln_lower,
        admissible_c: admissible(ln_energy),
        admissible_c_full: admissible(ln_energy_full),
    })
}

// ---------------------------------------------------------------------------
// Test battery and lambda calibration
// ---------------------------------------------------------------------------

/// Fixed battery of smooth fields with matching endpoint slices, mixing
/// boundary-supported, interior-supported, and sign-varying members. All
/// time dependence is a single full period so endpoint cancellation is exact.
pub fn standard_battery(spec: &Arc<GridSpec>) -> Result<Vec<Field>> {
    let n = spec.n();
    let t_max = spec.t_max();
    let a1 = spec.a(0);
    let a2 = if n > 1 { spec.a(1) } else { 1.0 };
    let tp = move |t: f64| (2.0 * std::f64::consts::PI * t / t_max).sin();
    let tc = move |t: f64| (2.0 * std::f64::consts::PI * t / t_max).cos();
    let sect = move |x: &[f64]| {
        if x.len() > 1 {
            (std::f64::consts::FRAC_PI_2 * x[1] / a2).cos()
        } else {
            1.0
        }
    };
    let members: Vec<Box<dyn Fn(&[f64], f64) -> f64>> = vec![
        Box::new(move |x, t| tp(t) * (std::f64::consts::FRAC_PI_2 * x[0] / a1).cos() * sect(x)),
        Box::new(move |x, t| tc(t) * (0.5 * x[0]).exp() * (1.0 + if x.len() > 1 { 0.1 * x[1] } else { 0.0 })),
        Box::new(move |x, t| (0.3 + tp(t)) * (0.5 + 0.5 * x[0] / a1).powi(2) * sect(x)),
        Box::new(move |x, t| tp(t) * (-4.0 * (x[0] / a1).powi(2)).exp() * sect(x)),
    ];
    members
        .into_iter()
        .map(|f| Ok(Field::from_spacetime_fn(spec.clone(), |x, t| f(x, t))?))
        .collect()
}

/// The zero-constant integrated verdict: the weighted operator square
/// integrated over the cylinder dominates the integrated carrier terms.
fn integrated_verdict(battery: &[Field], p: &CarlemanParams) -> Result<bool> {
    for u in battery {
        let spec = u.spec().clone();
        let tabs = WeightTables::build(&spec, p);
        let d = DerivPack::build(u)?;
        let n = spec.n();
        let sl = spec.space_len();
        let lap = {
            let mut acc = d.hess[0][0].clone();
            for i in 1..n {
                acc = acc.add(&d.hess[i][i])?;
            }
            acc
        };
        let mut int_op = 0.0;
        for idx in 0..u.len() {
            let qw = grid::quad_weight(u, idx);
            let phi = tabs.phi[x1_index(&spec, idx % sl)];
            let op = d.ut.at(idx) - lap.at(idx);
            int_op += qw * op * op * phi;
        }
        let dtv = grid::dt(&eval_v(u, p)?)?;
        let divu = grid::divergence(&eval_u(u, p)?)?;
        let int_carriers = grid::integrate(&dtv.add(&divu)?);
        if int_op < int_carriers {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Smallest lambda in `[1 + eps, lambda_max]` for which the integrated
/// zero-constant verdict holds on the battery, found by bisection. The
/// verdict must hold at `lambda_max`, else calibration fails.
pub fn calibrate_lambda0(battery: &[Field], p: &CarlemanParams, lambda_max: f64) -> Result<f64> {
    let lo0 = 1.0001f64;
    if !integrated_verdict(battery, &p.with_lambda(lambda_max)?)? {
        return Err(CarlemanError::Calibration(format!(
            "integrated verdict fails even at lambda = {lambda_max}"
        )));
    }
    if integrated_verdict(battery, &p.with_lambda(lo0)?)? {
        return Ok(lo0);
    }
    let mut lo = lo0;
    let mut hi = lambda_max;
    while hi - lo > 1e-3 {
        let mid = 0.5 * (lo + hi);
        if integrated_verdict(battery, &p.with_lambda(mid)?)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec_1d(nx: usize, nt: usize) -> Arc<GridSpec> {
        Arc::new(GridSpec::new(1, &[1.0], 1.0, &[nx], nt, 1.0).unwrap())
    }

    fn params(lambda: f64, nu: f64) -> CarlemanParams {
        CarlemanParams::new(lambda, nu, 1.0, 1.0).unwrap()
    }

    #[test]
    fn psi_endpoints_and_midpoint() {
        let p = params(2.0, 3.0);
        assert_eq!(p.psi(-1.0).unwrap(), 2.0);
        assert_eq!(p.psi(1.0).unwrap(), 4.0);
        assert_eq!(p.psi(0.0).unwrap(), 3.0);
        assert!(p.psi(1.5).is_err());
    }

    #[test]
    fn log_cwf_frozen_value() {
        // 2 * 1 * psi(-1)^2 = 2 * 4 = 8 at lambda=1, nu=2 is the hand value;
        // the constructor demands lambda > 1 and nu > 2, so evaluate the
        // formula through a params instance at the limit-adjacent values and
        // compare against the direct expression instead.
        let p = CarlemanParams { lambda: 1.0, nu: 2.0, gamma: 1.0, a1: 1.0, lambda0: None };
        assert_eq!(p.log_cwf(-1.0).unwrap(), 8.0);
    }

    #[test]
    fn scaled_weight_normalization_and_bounds() {
        let p = params(3.0, 3.0);
        assert!((p.cwf_scaled(1.0).unwrap() - 1.0).abs() < 1e-15);
        // (4.2) scaled: exp(2 lambda (2^nu - (2A+2)^nu)) <= phi <= 1.
        let lo = (2.0f64 * 3.0 * (8.0 - 64.0)).exp();
        for i in 0..=20 {
            let x = -1.0 + 0.1 * i as f64;
            let v = p.cwf_scaled(x).unwrap();
            assert!(v >= lo - 1e-300 && v <= 1.0 + 1e-15);
        }
    }

    proptest! {
        #[test]
        fn scaled_weight_monotone(lambda in 1.01f64..20.0, nu in 2.01f64..6.0,
                                  x_lo in -1.0f64..0.99) {
            let p = CarlemanParams::new(lambda, nu, 1.0, 1.0).unwrap();
            let x_hi = x_lo + 0.01;
            prop_assert!(p.cwf_scaled(x_hi).unwrap() >= p.cwf_scaled(x_lo).unwrap());
        }

        #[test]
        fn schedule_monotone_in_delta(d1 in 1e-12f64..0.9, step in 1.0001f64..10.0) {
            let d2 = (d1 * step).min(0.9999);
            let l1 = lambda_of_delta(d1, 1.0, 1.0, 3.0).unwrap();
            let l2 = lambda_of_delta(d2, 1.0, 1.0, 3.0).unwrap();
            prop_assert!(l1 >= l2);
        }
    }

    #[test]
    fn schedule_frozen_values() {
        // d = 1.5 (27 - 8 + 64) = 124.5; delta = e^{-d} gives lambda = 1.
        let lam = lambda_of_delta((-124.5f64).exp(), 1.0, 1.0, 3.0).unwrap();
        assert!((lam - 1.0).abs() < 1e-12);
        assert!(lambda_of_delta(0.0, 1.0, 1.0, 3.0).is_err());
        assert!(lambda_of_delta(1.0, 1.0, 1.0, 3.0).is_err());
        // alpha = 19/83 at the reference configuration.
        let alpha = holder_exponent(1.0, 1.0, 3.0).unwrap();
        assert!((alpha - 19.0 / 83.0).abs() < 1e-15);
        // alpha increasing in gamma.
        let mut prev = 0.0;
        for k in 1..20 {
            let a = holder_exponent(0.1 * k as f64, 1.0, 3.0).unwrap();
            assert!(a > prev && a < 1.0);
            prev = a;
        }
        assert!(holder_exponent(0.05, 1.0, 3.0).unwrap() < 0.02);
    }

    #[test]
    fn v_vanishes_for_zero_and_is_time_flat_for_static_u() {
        let spec = spec_1d(31, 11);
        let p = params(2.5, 3.0);
        let z = Field::zeros(spec.clone(), DomainTag::Spacetime).unwrap();
        assert_eq!(eval_v(&z, &p).unwrap().linf(), 0.0);

        let u = Field::from_spacetime_fn(spec, |x, _| (x[0] * 1.7).cos()).unwrap();
        let v = eval_v(&u, &p).unwrap();
        let dv = grid::dt(&v).unwrap();
        assert!(dv.linf() < 1e-13, "static field must give flat V, got {}", dv.linf());
    }

    #[test]
    fn v_endpoint_slices_match_for_periodic_u() {
        let spec = spec_1d(25, 17);
        let p = params(3.0, 3.0);
        let u = Field::from_spacetime_fn(spec.clone(), |x, t| {
            (2.0 * std::f64::consts::PI * t).sin() * (x[0] * 2.0).cos() + 0.3
        })
        .unwrap();
        let v = eval_v(&u, &p).unwrap();
        let sl = spec.space_len();
        let last = (spec.nt() - 1) * sl;
        for s in 0..sl {
            assert!((v.at(s) - v.at(last + s)).abs() < 1e-12);
        }
    }

    #[test]
    fn u_carrier_spatially_constant_hand_expansion() {
        // For u = g(t), all spatial derivatives vanish and the x1 component
        // collapses to
        //   q2l [ -2 lam nu g g' - 2 lam^3 nu^3 psi^{2nu-2} g^2 (1 + B)
        //         + lam^2 nu psi^{nu-1} g^2 ] phi
        // with B = 1 - 2 psi^{-nu}(nu-1)/(lam nu).
        let spec = spec_1d(9, 13);
        let lam = 2.0;
        let nu = 2.5;
        let p = params(lam, nu);
        let u = Field::from_spacetime_fn(spec.clone(), |_, t| 1.0 + 0.5 * t * t).unwrap();
        let comps = eval_u(&u, &p).unwrap();
        assert_eq!(comps.len(), 1);
        let q2l = 2.0 * lam / (2.0 * lam + 1.0);
        let log_norm = 2.0 * lam * 4.0f64.powf(nu);
        for k in 1..spec.nt() - 1 {
            let t = spec.time(k);
            let g = 1.0 + 0.5 * t * t;
            let gp = t;
            for s in 0..spec.space_len() {
                let psi = spec.coord(0, s) + 3.0;
                let phi = (2.0 * lam * psi.powf(nu) - log_norm).exp();
                let b = 1.0 - 2.0 * psi.powf(-nu) * (nu - 1.0) / (lam * nu);
                let expect = q2l
                    * (-2.0 * lam * nu * g * gp
                        - 2.0 * lam.powi(3) * nu.powi(3) * psi.powf(2.0 * nu - 2.0) * g * g * (1.0 + b)
                        + lam * lam * nu * psi.powf(nu - 1.0) * g * g)
                    * phi;
                let got = comps[0].at(k * spec.space_len() + s);
                // Interior dt stencil is exact for the quadratic g.
                assert!(
                    (got - expect).abs() < 1e-12 * expect.abs().max(1.0),
                    "node ({k},{s}): got {got}, expected {expect}"
                );
            }
        }
    }

    #[test]
    fn u_carrier_tangential_component_vanishes_for_x1_only_fields() {
        let spec = Arc::new(GridSpec::new(2, &[1.0, 1.0], 1.0, &[9, 9], 7, 1.0).unwrap());
        let p = params(2.0, 3.0);
        let u = Field::from_spacetime_fn(spec, |x, t| (x[0] + t).cos()).unwrap();
        let comps = eval_u(&u, &p).unwrap();
        assert_eq!(comps.len(), 2);
        assert!(comps[1].linf() < 1e-12);
    }

    #[test]
    fn divergence_flux_balance_refines_at_second_order() {
        // Integral of div U over the cylinder vs the lateral flux of U.
        // The weight must be resolved for the asymptotic regime: its log
        // slope near the data face is 2 lambda nu (2A+2)^{nu-1}, bounded
        // below by 16 on the unit domain, so the check runs near the
        // (lambda, nu) -> (1, 2) corner and refines in x only (the time
        // quadrature cancels exactly between the two sides).
        let gap = |nx: usize, nt: usize, lam: f64, nu: f64, face_zero: bool| -> f64 {
            let spec = spec_1d(nx, nt);
            let p = params(lam, nu);
            let u = Field::from_spacetime_fn(spec.clone(), |x, t| {
                let profile = if face_zero {
                    (std::f64::consts::FRAC_PI_2 * x[0]).cos()
                } else {
                    (0.5 * x[0]).exp() * (1.0 + 0.3 * (2.0 * x[0]).sin())
                };
                (2.0 * std::f64::consts::PI * t).sin() * profile
            })
            .unwrap();
            let comps = eval_u(&u, &p).unwrap();
            let div = grid::divergence(&comps).unwrap();
            let interior = grid::integrate(&div);
            let mut flux = 0.0;
            let mut denom = grid::integrate(&div.map(f64::abs));
            for face in all_faces(&spec) {
                let restr = grid::restrict_to_face(&comps[face.axis], face).unwrap();
                let sgn = if face.positive { 1.0 } else { -1.0 };
                flux += sgn * grid::integrate(&restr);
                denom += grid::integrate(&restr.map(f64::abs));
            }
            (interior - flux).abs() / denom.max(1e-300)
        };
        let e1 = gap(201, 21, 1.2, 2.1, true);
        let e2 = gap(401, 21, 1.2, 2.1, true);
        assert!(e1 / e2 > 3.0, "flux balance should refine at second order: {e1} vs {e2}");
        // Generic profiles (no face zero) keep a 2-3x margin under 1e-2 at
        // the default mesh; face-degenerate profiles sit right at the line.
        let tight = gap(201, 21, 1.01, 2.01, false);
        assert!(tight < 1e-2, "relative flux gap {tight} too large at the default mesh");
    }

    #[test]
    fn pointwise_zero_field_and_reflection_equivalence() {
        let spec = spec_1d(21, 15);
        let p = params(4.0, 3.0);
        let z = Field::zeros(spec.clone(), DomainTag::Spacetime).unwrap();
        let rep = check_pointwise(&z, &p, OperatorSign::Backward, 0.1).unwrap();
        assert_eq!(rep.min_slack, 0.0);
        assert_eq!(rep.neg_fraction, 0.0);

        let u = Field::from_spacetime_fn(spec, |x, t| (x[0] * 2.0 + 0.3).sin() * (1.0 + t * t)).unwrap();
        let fwd = check_pointwise(&u, &p, OperatorSign::Forward, 0.05).unwrap();
        let refl = grid::reflect_time(&u).unwrap();
        let bwd = check_pointwise(&refl, &p, OperatorSign::Backward, 0.05).unwrap();
        assert!((fwd.min_slack - bwd.min_slack).abs() < 1e-12);
        let diff = grid::reflect_time(&fwd.slack).unwrap().sub(&bwd.slack).unwrap().linf();
        assert!(diff < 1e-12);
    }

    #[test]
    fn calibration_finds_threshold_and_verdict_stays_valid_above() {
        let spec = spec_1d(41, 41);
        let battery = standard_battery(&spec).unwrap();
        let p = params(2.0, 3.0);
        let lam0 = calibrate_lambda0(&battery, &p, 64.0).unwrap();
        assert!(lam0 >= 1.0 && lam0 <= 64.0, "lambda0 = {lam0}");
        for bump in [0.0, 1.0, 4.0] {
            let pv = p.with_lambda((lam0 + bump).max(1.0001)).unwrap();
            assert!(integrated_verdict(&battery, &pv).unwrap(), "verdict fails at lambda0 + {bump}");
        }
    }

    #[test]
    fn pointwise_negative_slack_shrinks_under_refinement() {
        // At c = 0 the continuum slack is nonnegative; discrete negatives
        // are discretization error and must shrink roughly 4x per doubling.
        let most_negative = |nx: usize, nt: usize| -> f64 {
            let spec = spec_1d(nx, nt);
            let p = params(6.0, 3.0);
            let u = Field::from_spacetime_fn(spec, |x, t| {
                (2.0 * std::f64::consts::PI * t).sin() * (std::f64::consts::FRAC_PI_2 * x[0]).cos()
            })
            .unwrap();
            let rep = check_pointwise(&u, &p, OperatorSign::Backward, 0.0).unwrap();
            (-rep.min_slack).max(0.0)
        };
        let e1 = most_negative(31, 31);
        let e2 = most_negative(61, 61);
        if e1 > 1e-14 {
            assert!(e1 / e2.max(1e-300) > 2.5, "negative slack should shrink: {e1} vs {e2}");
        }
    }

    #[test]
    fn integral_check_homogeneity_and_periodicity_guard() {
        let spec = spec_1d(31, 31);
        let p = params(3.0, 3.0);
        let u = Field::from_spacetime_fn(spec.clone(), |x, t| {
            (2.0 * std::f64::consts::PI * t).sin() * (std::f64::consts::FRAC_PI_2 * x[0]).cos()
        })
        .unwrap();
        let r1 = check_integral(&u, &p, OperatorSign::Backward).unwrap();
        let r2 = check_integral(&u.scale(2.0), &p, OperatorSign::Backward).unwrap();
        if r1.admissible_c.is_finite() {
            assert!((r1.admissible_c - r2.admissible_c).abs() < 1e-9 * r1.admissible_c.max(1.0));
        } else {
            assert!(r2.admissible_c.is_infinite());
        }

        let bad = Field::from_spacetime_fn(spec, |x, t| t + x[0]).unwrap();
        assert!(matches!(
            check_integral(&bad, &p, OperatorSign::Backward),
            Err(CarlemanError::NotTimePeriodic { .. })
        ));
    }

    #[test]
    fn integral_check_admissible_constant_positive_on_battery_member() {
        let spec = spec_1d(41, 41);
        let battery = standard_battery(&spec).unwrap();
        let base = params(2.0, 3.0);
        let lam0 = calibrate_lambda0(&battery, &base, 64.0).unwrap();
        for step in 0..3 {
            let lam = lam0.max(1.0001) + 2.0 * step as f64;
            let p = base.with_lambda(lam).unwrap();
            let rep = check_integral(&battery[0], &p, OperatorSign::Backward).unwrap();
            assert!(
                rep.admissible_c > 0.0,
                "admissible constant must be positive at lambda {lam}: {}",
                rep.admissible_c
            );
        }
    }

    #[test]
    fn integral_report_reconstructs_boundary_blocks() {
        // Term-for-term check of the data blocks against independently
        // computed trace norms with the stated prefactors.
        let spec = spec_1d(21, 21);
        let p = params(2.5, 3.0);
        let u = Field::from_spacetime_fn(spec.clone(), |x, t| {
            (2.0 * std::f64::consts::PI * t).cos() * (0.4 * x[0]).exp()
        })
        .unwrap();
        let rep = check_integral(&u, &p, OperatorSign::Backward).unwrap();

        let ux1 = grid::derivative(&u, Axis::Spatial(0)).unwrap();
        let neg = FaceId { axis: 0, positive: false };
        let pos = FaceId { axis: 0, positive: true };
        let tr_u_neg = LateralTraces::from_spacetime(&u, neg).unwrap();
        let tr_n_neg = LateralTraces::from_spacetime(&ux1, neg).unwrap();
        let tr_u_pos = LateralTraces::from_spacetime(&u, pos).unwrap();
        let tr_n_pos = LateralTraces::from_spacetime(&ux1, pos).unwrap();
        let lam = p.lambda();
        let expect_gamma = 3.0 * lam * 8.0 - p.log_normalizer()
            + (tr_u_neg.norm_h21().powi(2) + tr_n_neg.norm_h10().powi(2)).ln();
        let expect_rest = 3.0 * lam * 64.0 - p.log_normalizer()
            + (tr_u_pos.norm_h21().powi(2) + tr_n_pos.norm_h10().powi(2)).ln();
        assert!((rep.ln_data_gamma - expect_gamma).abs() < 1e-10);
        assert!((rep.ln_data_rest - expect_rest).abs() < 1e-10);
    }

    #[test]
    fn cancellation_integral_small_relative_to_magnitude() {
        let spec = spec_1d(61, 101);
        let p = params(3.0, 3.0);
        for u in standard_battery(&spec).unwrap() {
            let dtv = grid::dt(&eval_v(&u, &p).unwrap()).unwrap();
            let net = grid::integrate(&dtv).abs();
            let mag = grid::integrate(&dtv.map(f64::abs));
            if mag > 1e-12 {
                assert!(net / mag < 1e-2, "cancellation ratio {} too large", net / mag);
            }
        }
    }

    #[test]
    fn params_validation() {
        assert!(CarlemanParams::new(1.0, 3.0, 1.0, 1.0).is_err());
        assert!(CarlemanParams::new(2.0, 2.0, 1.0, 1.0).is_err());
        assert!(CarlemanParams::new(2.0, 3.0, 2.0, 1.0).is_err());
        assert!(CarlemanParams::new(2.0, 3.0, 0.0, 1.0).is_err());
    }
}

