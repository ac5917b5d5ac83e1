//! Reduction of a pair of solved instances to two time-differentiated
//! difference fields with known endpoint values.
//!
//! Given two solution pairs `(u_1, m_1)` and `(u_2, m_2)` of the system for
//! amplitudes `b_1` and `b_2` (same `a`, `s`, kernels, and forcing),
//! subtracting the two value equations and writing each product difference
//! as `y_1 z_1 - y_2 z_2 = y_tilde z_1 + z_tilde y_2` yields, for
//! `u_tilde = u_1 - u_2`, `m_tilde = m_1 - m_2`, `b_tilde = b_1 - b_2`:
//!
//! `dt(u_tilde) + lap(u_tilde) - (a/2) grad(u_1+u_2).grad(u_tilde)
//!    + b_1 <m_tilde> + s m_tilde + b_tilde R = 0`
//!
//! where `<.>` is the interaction bracket (without the amplitude) and
//! `R = <m_2>` is the response of the known solution. Dividing by `R`, with
//! `u_bar = u_tilde / R` and the quotient rule
//!
//! `dt(u_tilde) = R_t u_bar + R dt(u_bar)`,
//! `lap(u_tilde) = R lap(u_bar) + 2 grad(R).grad(u_bar) + u_bar lap(R)`,
//! `grad(u_tilde) = R grad(u_bar) + u_bar grad(R)`,
//!
//! produces the divided form
//!
//! `dt(u_bar) + lap(u_bar) + P.grad(u_bar) + Q u_bar
//!    + (b_1 <m_tilde> + s m_tilde)/R = -b_tilde`,
//! `P = 2 grad(R)/R - (a/2) grad(u_1+u_2)`,
//! `Q = (R_t + lap(R) - (a/2) grad(u_1+u_2).grad(R)) / R`.
//!
//! The zero-order coupling `s m_tilde` rides along with the bracket term
//! since both are linear in `m_tilde`. The density difference satisfies
//!
//! `dt(m_tilde) - lap(m_tilde) - div(a m_tilde grad(u_2))
//!    - div(a m_1 grad(u_tilde)) = 0`,
//!
//! which is amplitude-free. Differentiating both divided equations in time
//! removes the time-independent `b_tilde` from the interiors and leaves it
//! only in the endpoint values of `v_bar = dt(u_bar)`. Subtracting affine
//! ramps built from the endpoint fields gives functions `v` and `w` with
//!
//! `v(. , 0) = v(. , T) = -b_tilde`, `w(. , 0) = w(. , T) = 0`,
//!
//! which is the shape the weighted energy estimates need. The ramp fades the
//! start anchor out and the end anchor in; the anchors are chosen so the
//! displayed identities hold exactly in the continuum and to consistency
//! order on the grid.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use crate::grid::{self, Axis, DomainTag, Field, GridError, GridSpec};
use crate::kernel::{self, KernelError, KernelSpec};
use crate::mfg::{CipData, MfgCoefficients, MfgError, MfgSolution};

#[derive(Debug, Error)]
pub enum TransformError {
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("observation modes differ between the two data bundles")]
    ModeMismatch,
    #[error("interaction response too small: min |R| = {min_abs:.3e}, required {required:.3e}")]
    ResponseBound { min_abs: f64, required: f64 },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Mfg(#[from] MfgError),
}

pub type Result<T> = std::result::Result<T, TransformError>;

/// Node-wise differences of two solved instances and their observations.
#[derive(Debug, Clone)]
pub struct DifferenceBundle {
    pub u_tilde: Field,
    pub m_tilde: Field,
    pub b_tilde: Field,
    /// Differences of the two observation bundles, field by field.
    pub data: CipData,
}

/// Drift vector and reaction scalar of the divided difference equation.
#[derive(Debug, Clone)]
pub struct PqCoefficients {
    /// One spacetime component per spatial axis.
    pub drift: Vec<Field>,
    pub reaction: Field,
}

/// Endpoint source fields of the subtracted ramps: `v_start`/`v_end` anchor
/// the value-difference derivative at `t = 0` and `t = T` (each equals the
/// endpoint value plus `b_tilde`), `w_start`/`w_end` anchor the density
/// derivative (each equals the endpoint value itself).
#[derive(Debug, Clone)]
pub struct EndpointAnchors {
    pub v_start: Field,
    pub v_end: Field,
    pub w_start: Field,
    pub w_end: Field,
}

/// Everything the transformation produces.
#[derive(Debug, Clone)]
pub struct TransformedFields {
    pub u_tilde: Field,
    pub m_tilde: Field,
    pub b_tilde: Field,
    /// Interaction response of the known solution; the division guard.
    pub r_hat: Field,
    /// `u_tilde / r_hat`.
    pub u_bar: Field,
    /// Time derivatives of `u_bar` and `m_tilde`.
    pub v_bar: Field,
    pub w_bar: Field,
    /// Ramp-subtracted fields carrying the endpoint identities.
    pub v: Field,
    pub w: Field,
    pub anchors: EndpointAnchors,
    pub pq: PqCoefficients,
}

/// Pointwise sides of the two differential inequalities the transformed
/// fields satisfy.
#[derive(Debug, Clone)]
pub struct ResidualBounds {
    pub lhs_v: Field,
    pub rhs_v: Field,
    pub lhs_w: Field,
    pub rhs_w: Field,
}

fn expect_same_grid(a: &Arc<GridSpec>, b: &Arc<GridSpec>, what: &str) -> Result<()> {
    if *a.as_ref() != *b.as_ref() {
        return Err(TransformError::GridMismatch(format!("{what} lives on a different grid")));
    }
    Ok(())
}

fn diff_map(
    m1: &BTreeMap<grid::FaceId, Field>,
    m2: &BTreeMap<grid::FaceId, Field>,
    what: &str,
) -> Result<BTreeMap<grid::FaceId, Field>> {
    if m1.len() != m2.len() || m1.keys().any(|k| !m2.contains_key(k)) {
        return Err(TransformError::GridMismatch(format!("{what}: face sets differ")));
    }
    let mut out = BTreeMap::new();
    for (face, f) in m1 {
        out.insert(*face, f.sub(&m2[face])?);
    }
    Ok(out)
}

/// Form all node-wise differences of two instances.
pub fn diff_triple(
    sol1: &MfgSolution,
    sol2: &MfgSolution,
    b1: &Field,
    b2: &Field,
    data1: &CipData,
    data2: &CipData,
) -> Result<DifferenceBundle> {
    let spec = sol1.u.spec().clone();
    expect_same_grid(&spec, sol2.u.spec(), "second solution")?;
    expect_same_grid(&spec, b1.spec(), "first amplitude")?;
    expect_same_grid(&spec, b2.spec(), "second amplitude")?;
    if data1.mode != data2.mode {
        return Err(TransformError::ModeMismatch);
    }
    let data = CipData {
        mode: data1.mode,
        u_initial: data1.u_initial.sub(&data2.u_initial)?,
        u_final: data1.u_final.sub(&data2.u_final)?,
        m_initial: data1.m_initial.sub(&data2.m_initial)?,
        m_final: data1.m_final.sub(&data2.m_final)?,
        u_dirichlet: diff_map(&data1.u_dirichlet, &data2.u_dirichlet, "value Dirichlet traces")?,
        u_neumann: diff_map(&data1.u_neumann, &data2.u_neumann, "value Neumann traces")?,
        m_dirichlet: diff_map(&data1.m_dirichlet, &data2.m_dirichlet, "density Dirichlet traces")?,
        m_neumann: diff_map(&data1.m_neumann, &data2.m_neumann, "density Neumann traces")?,
    };
    Ok(DifferenceBundle {
        u_tilde: sol1.u.sub(&sol2.u)?,
        m_tilde: sol1.m.sub(&sol2.m)?,
        b_tilde: b1.sub(b2)?,
        data,
    })
}

/// Interaction response of the known solution, with the division guard.
pub fn compute_response(kernel: &KernelSpec, m2: &Field, c_min: f64) -> Result<Field> {
    let r_hat = kernel::interaction_bracket(kernel, m2)?;
    let rep = kernel::check_r_bound(&r_hat, c_min);
    if !rep.ok {
        return Err(TransformError::ResponseBound { min_abs: rep.min_abs, required: c_min });
    }
    Ok(r_hat)
}

/// Build the drift and reaction coefficients of the divided equation.
pub fn build_pq_coefficients(
    sol1: &MfgSolution,
    sol2: &MfgSolution,
    coeffs: &MfgCoefficients,
    r_hat: &Field,
    c_min: f64,
) -> Result<PqCoefficients> {
    let spec = coeffs.grid().clone();
    expect_same_grid(&spec, sol1.u.spec(), "first solution")?;
    expect_same_grid(&spec, sol2.u.spec(), "second solution")?;
    expect_same_grid(&spec, r_hat.spec(), "response")?;
    let rep = kernel::check_r_bound(r_hat, c_min);
    if !rep.ok {
        return Err(TransformError::ResponseBound { min_abs: rep.min_abs, required: c_min });
    }

    let n = spec.n();
    let u_sum = sol1.u.add(&sol2.u)?;
    let a_st = grid::broadcast_in_time(coeffs.a())?;
    let mut drift = Vec::with_capacity(n);
    let mut cross = Field::zeros(spec.clone(), DomainTag::Spacetime)?;
    for i in 0..n {
        let dr = grid::derivative(r_hat, Axis::Spatial(i))?;
        let du = grid::derivative(&u_sum, Axis::Spatial(i))?;
        let adv = a_st.mul(&du)?;
        let p_i = dr.zip_with(r_hat, |g, r| 2.0 * g / r)?.sub(&adv.scale(0.5))?;
        drift.push(p_i);
        cross = cross.add(&adv.mul(&dr)?.scale(0.5))?;
    }
    let numer = grid::dt(r_hat)?.add(&grid::laplacian(r_hat)?)?.sub(&cross)?;
    let reaction = numer.zip_with(r_hat, |a, b| a / b)?;
    Ok(PqCoefficients { drift, reaction })
}

/// `(b_1 <m_slice> + s(., k) m_slice) / r_slice` as a space field.
fn coupling_slice(
    coeffs: &MfgCoefficients,
    r_slice: &Field,
    m_slice: &Field,
    k: usize,
) -> Result<Field> {
    let st = grid::broadcast_in_time(m_slice)?;
    let br = kernel::apply_interaction(coeffs.kernel(), &st)?;
    let br0 = grid::time_slice_space(&br, 0)?;
    let s_k = grid::time_slice_space(coeffs.s(), k)?;
    let total = br0.add(&s_k.mul(m_slice)?)?;
    Ok(total.zip_with(r_slice, |num, den| num / den)?)
}

/// Value-side anchor at time index `k` from the endpoint difference slices.
fn value_anchor(
    coeffs: &MfgCoefficients,
    r_hat: &Field,
    pq: &PqCoefficients,
    u_diff: &Field,
    m_diff: &Field,
    k: usize,
) -> Result<Field> {
    let r_k = grid::time_slice_space(r_hat, k)?;
    let u_bar_k = u_diff.zip_with(&r_k, |n, d| n / d)?;
    let mut out = grid::laplacian(&u_bar_k)?.scale(-1.0);
    for (i, p_i) in pq.drift.iter().enumerate() {
        let p_k = grid::time_slice_space(p_i, k)?;
        let du = grid::derivative(&u_bar_k, Axis::Spatial(i))?;
        out = out.sub(&p_k.mul(&du)?)?;
    }
    let q_k = grid::time_slice_space(&pq.reaction, k)?;
    out = out.sub(&q_k.mul(&u_bar_k)?)?;
    out = out.sub(&coupling_slice(coeffs, &r_k, m_diff, k)?)?;
    Ok(out)
}

/// Density-side anchor at an endpoint: the density equation solved for the
/// time derivative, evaluated on the endpoint slices.
fn density_anchor(
    coeffs: &MfgCoefficients,
    m_diff: &Field,
    u_diff: &Field,
    u2_slice: &Field,
    m1_slice: &Field,
) -> Result<Field> {
    let n = coeffs.grid().n();
    let mut out = grid::laplacian(m_diff)?;
    let am_diff = coeffs.a().mul(m_diff)?;
    let am1 = coeffs.a().mul(m1_slice)?;
    let mut flux1 = Vec::with_capacity(n);
    let mut flux2 = Vec::with_capacity(n);
    for i in 0..n {
        flux1.push(am_diff.mul(&grid::derivative(u2_slice, Axis::Spatial(i))?)?);
        flux2.push(am1.mul(&grid::derivative(u_diff, Axis::Spatial(i))?)?);
    }
    out = out.add(&grid::divergence(&flux1)?)?;
    out = out.add(&grid::divergence(&flux2)?)?;
    Ok(out)
}

/// Evaluate the four endpoint anchor fields from difference data, known
/// endpoint slices, the response, and the divided-equation coefficients.
pub fn endpoint_fields(
    bundle: &DifferenceBundle,
    coeffs: &MfgCoefficients,
    r_hat: &Field,
    pq: &PqCoefficients,
    data1: &CipData,
    data2: &CipData,
) -> Result<EndpointAnchors> {
    let nt = coeffs.grid().nt();
    let d = &bundle.data;
    Ok(EndpointAnchors {
        v_start: value_anchor(coeffs, r_hat, pq, &d.u_initial, &d.m_initial, 0)?,
        v_end: value_anchor(coeffs, r_hat, pq, &d.u_final, &d.m_final, nt - 1)?,
        w_start: density_anchor(coeffs, &d.m_initial, &d.u_initial, &data2.u_initial, &data1.m_initial)?,
        w_end: density_anchor(coeffs, &d.m_final, &d.u_final, &data2.u_final, &data1.m_final)?,
    })
}

fn subtract_ramp(f: &Field, start: &Field, end: &Field) -> Result<Field> {
    let spec = f.spec().clone();
    let t_max = spec.t_max();
    let sl = spec.space_len();
    let mut vals = f.values().to_vec();
    for k in 0..spec.nt() {
        let frac = spec.time(k) / t_max;
        for s in 0..sl {
            vals[k * sl + s] -= start.values()[s] * (1.0 - frac) + end.values()[s] * frac;
        }
    }
    Ok(Field::from_values(spec, DomainTag::Spacetime, vals)?)
}

/// Differentiate in time and subtract the affine anchor ramps.
/// Returns `(v_bar, w_bar, v, w)`.
pub fn make_vw(
    u_bar: &Field,
    m_tilde: &Field,
    anchors: &EndpointAnchors,
) -> Result<(Field, Field, Field, Field)> {
    let v_bar = grid::dt(u_bar)?;
    let w_bar = grid::dt(m_tilde)?;
    let v = subtract_ramp(&v_bar, &anchors.v_start, &anchors.v_end)?;
    let w = subtract_ramp(&w_bar, &anchors.w_start, &anchors.w_end)?;
    Ok((v_bar, w_bar, v, w))
}

/// Run the whole transformation for one instance pair. `coeffs` carries the
/// first amplitude inside its kernel; `b2` is the second amplitude.
pub fn transform(
    coeffs: &MfgCoefficients,
    b2: &Field,
    sol1: &MfgSolution,
    sol2: &MfgSolution,
    data1: &CipData,
    data2: &CipData,
    c_min: f64,
) -> Result<TransformedFields> {
    let bundle = diff_triple(sol1, sol2, coeffs.kernel().b(), b2, data1, data2)?;
    let r_hat = compute_response(coeffs.kernel(), &sol2.m, c_min)?;
    let pq = build_pq_coefficients(sol1, sol2, coeffs, &r_hat, c_min)?;
    let u_bar = bundle.u_tilde.zip_with(&r_hat, |n, d| n / d)?;
    let anchors = endpoint_fields(&bundle, coeffs, &r_hat, &pq, data1, data2)?;
    let (v_bar, w_bar, v, w) = make_vw(&u_bar, &bundle.m_tilde, &anchors)?;
    Ok(TransformedFields {
        u_tilde: bundle.u_tilde,
        m_tilde: bundle.m_tilde,
        b_tilde: bundle.b_tilde,
        r_hat,
        u_bar,
        v_bar,
        w_bar,
        v,
        w,
        anchors,
        pq,
    })
}

// ---------------------------------------------------------------------------
// inequality sides

/// Trapezoid weight of node `j` on the tail `[lo, len)` of a line with step
/// `h`; zero-length tails carry no weight.
fn tail_weight(j: usize, lo: usize, len: usize, h: f64) -> f64 {
    debug_assert!(j >= lo && j < len);
    if lo == len - 1 {
        0.0
    } else if j == lo || j == len - 1 {
        0.5 * h
    } else {
        h
    }
}

/// Cumulative trapezoid of `|f|` from time zero, as a spacetime field.
fn volterra_abs(f: &Field) -> Field {
    let spec = f.spec().clone();
    let sl = spec.space_len();
    let tau = spec.tau();
    let mut vals = vec![0.0; f.len()];
    for k in 1..spec.nt() {
        for s in 0..sl {
            vals[k * sl + s] = vals[(k - 1) * sl + s]
                + 0.5 * tau * (f.values()[(k - 1) * sl + s].abs() + f.values()[k * sl + s].abs());
        }
    }
    Field::from_values(spec, DomainTag::Spacetime, vals).expect("same layout")
}

/// Integral of `|f|` over the section at fixed first coordinate, as a profile
/// table indexed `[k][i1]`. In one dimension the section carries unit point
/// mass, so the profile is just `|f|` itself.
fn section_abs_profile(f: &Field) -> Vec<Vec<f64>> {
    let spec = f.spec();
    let sl = spec.space_len();
    let nx1 = spec.nx(0);
    let mut out = vec![vec![0.0; nx1]; spec.nt()];
    if spec.n() == 1 {
        for k in 0..spec.nt() {
            for i1 in 0..nx1 {
                out[k][i1] = f.values()[k * sl + i1].abs();
            }
        }
    } else {
        let nx2 = spec.nx(1);
        let h2 = spec.h(1);
        let str1 = spec.space_stride(0);
        let str2 = spec.space_stride(1);
        for k in 0..spec.nt() {
            for i1 in 0..nx1 {
                let mut acc = 0.0;
                for i2 in 0..nx2 {
                    let wq = if i2 == 0 || i2 == nx2 - 1 { 0.5 * h2 } else { h2 };
                    acc += wq * f.values()[k * sl + i1 * str1 + i2 * str2].abs();
                }
                out[k][i1] = acc;
            }
        }
    }
    out
}

/// Tail integral along the first coordinate of a profile table.
fn tail_of_profile(spec: &GridSpec, prof: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let nx1 = spec.nx(0);
    let h1 = spec.h(0);
    let mut out = vec![vec![0.0; nx1]; prof.len()];
    for (k, row) in prof.iter().enumerate() {
        for i1 in 0..nx1 {
            let mut acc = 0.0;
            for j1 in i1..nx1 {
                acc += tail_weight(j1, i1, nx1, h1) * row[j1];
            }
            out[k][i1] = acc;
        }
    }
    out
}

fn profile_to_field(spec: &Arc<GridSpec>, prof: &[Vec<f64>]) -> Field {
    let sl = spec.space_len();
    let str1 = spec.space_stride(0);
    let mut vals = vec![0.0; sl * spec.nt()];
    for (k, row) in prof.iter().enumerate() {
        for s in 0..sl {
            vals[k * sl + s] = row[s / str1];
        }
    }
    Field::from_values(spec.clone(), DomainTag::Spacetime, vals).expect("same layout")
}

fn grad_norm(f: &Field) -> Result<Field> {
    let comps = grid::gradient(f)?;
    let mut acc = Field::zeros(f.spec().clone(), f.tag())?;
    for c in &comps {
        acc = acc.add(&c.mul(c)?)?;
    }
    Ok(acc.map(f64::sqrt))
}

/// Evaluate both sides of the two pointwise inequalities the transformed
/// fields satisfy, for a supplied constant `c1`. The endpoint-data remainder
/// is only norm-controlled, so it enters as the uniform allowance
/// `c1 * sqrt(sum of squared fourth-order Sobolev norms of the endpoint
/// differences)` on both right-hand sides.
pub fn residual_bounds(tf: &TransformedFields, bundle: &DifferenceBundle, c1: f64) -> Result<ResidualBounds> {
    let spec = tf.v.spec().clone();
    let v = &tf.v;
    let w = &tf.w;

    let lap_v = grid::laplacian(v)?;
    let lhs_v = grid::dt(v)?.add(&lap_v)?.map(f64::abs);
    let lhs_w = grid::dt(w)?.sub(&grid::laplacian(w)?)?.map(f64::abs);

    let d = &bundle.data;
    let x_bar = c1
        * (grid::norm_hk_space(&d.u_initial, 4)?.powi(2)
            + grid::norm_hk_space(&d.m_initial, 4)?.powi(2)
            + grid::norm_hk_space(&d.u_final, 4)?.powi(2)
            + grid::norm_hk_space(&d.m_final, 4)?.powi(2))
        .sqrt();

    // First inequality: gradient and value of v, then section and tail
    // integrals of |w| and of its running time integral.
    let gv = grad_norm(v)?;
    let abs_v = v.map(f64::abs);
    let w_volt = volterra_abs(w);
    let sec_w = section_abs_profile(w);
    let sec_wv = section_abs_profile(&w_volt);
    let tail_w = tail_of_profile(&spec, &sec_w);
    let tail_wv = tail_of_profile(&spec, &sec_wv);
    let mut rhs_v = gv.add(&abs_v)?;
    rhs_v = rhs_v.add(&profile_to_field(&spec, &sec_w))?;
    rhs_v = rhs_v.add(&profile_to_field(&spec, &sec_wv))?;
    rhs_v = rhs_v.add(&profile_to_field(&spec, &tail_w))?;
    rhs_v = rhs_v.add(&profile_to_field(&spec, &tail_wv))?;
    let rhs_v = rhs_v.scale(c1).map(|x| x + x_bar);

    // Second inequality: w terms with their running integrals, plus first and
    // second derivatives of v with theirs.
    let gw = grad_norm(w)?;
    let abs_w = w.map(f64::abs);
    let gw_w = gw.add(&abs_w)?;
    let abs_lap_v = lap_v.map(f64::abs);
    let mut rhs_w = gw_w.add(&volterra_abs(&gw_w))?;
    rhs_w = rhs_w.add(&gv.add(&volterra_abs(&gv))?)?;
    rhs_w = rhs_w.add(&abs_lap_v.add(&volterra_abs(&abs_lap_v))?)?;
    let rhs_w = rhs_w.scale(c1).map(|x| x + x_bar);

    Ok(ResidualBounds { lhs_v, rhs_v, lhs_w, rhs_w })
}

/// Fraction of strict-interior spatial nodes (all time levels) where
/// `lhs <= rhs` holds up to roundoff.
pub fn satisfied_fraction(lhs: &Field, rhs: &Field) -> f64 {
    let spec = lhs.spec();
    let sl = spec.space_len();
    let scale = lhs.linf().max(rhs.linf()).max(1.0);
    let mut hit = 0usize;
    let mut total = 0usize;
    for s in 0..sl {
        if spec.is_space_boundary(s) {
            continue;
        }
        for k in 0..spec.nt() {
            total += 1;
            if lhs.values()[k * sl + s] <= rhs.values()[k * sl + s] + 1e-12 * scale {
                hit += 1;
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        hit as f64 / total as f64
    }
}

// ---------------------------------------------------------------------------
// serialization

const MANIFEST: &str = "manifest.txt";

fn field_entries(tf: &TransformedFields) -> Vec<(&'static str, &Field)> {
    let mut v = vec![
        ("u_tilde", &tf.u_tilde),
        ("m_tilde", &tf.m_tilde),
        ("b_tilde", &tf.b_tilde),
        ("r_hat", &tf.r_hat),
        ("u_bar", &tf.u_bar),
        ("v_bar", &tf.v_bar),
        ("w_bar", &tf.w_bar),
        ("v", &tf.v),
        ("w", &tf.w),
        ("v_start", &tf.anchors.v_start),
        ("v_end", &tf.anchors.v_end),
        ("w_start", &tf.anchors.w_start),
        ("w_end", &tf.anchors.w_end),
        ("reaction", &tf.pq.reaction),
    ];
    for (i, d) in tf.pq.drift.iter().enumerate() {
        v.push((if i == 0 { "drift_0" } else { "drift_1" }, d));
    }
    v
}

/// Write all transformed fields into a directory with a manifest.
pub fn save_transformed(tf: &TransformedFields, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::from("version=1\n");
    manifest.push_str(&format!("gamma={}\n", tf.u_tilde.spec().gamma()));
    manifest.push_str(&format!("n_drift={}\n", tf.pq.drift.len()));
    for (name, f) in field_entries(tf) {
        let file = format!("{name}.field");
        grid::write_field(f, &dir.join(&file))?;
        manifest.push_str(&format!("field {name} {file}\n"));
    }
    let mut out = fs::File::create(dir.join(MANIFEST))?;
    out.write_all(manifest.as_bytes())?;
    Ok(())
}

/// Read back a directory written by [`save_transformed`].
pub fn load_transformed(dir: &Path) -> Result<TransformedFields> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let mut gamma = None;
    let mut files = BTreeMap::new();
    for line in text.lines() {
        if let Some(g) = line.strip_prefix("gamma=") {
            gamma = Some(g.parse::<f64>().map_err(|_| TransformError::Manifest("bad gamma".into()))?);
        } else if let Some(rest) = line.strip_prefix("field ") {
            let mut it = rest.split_whitespace();
            let name = it.next().ok_or_else(|| TransformError::Manifest("missing field name".into()))?;
            let file = it.next().ok_or_else(|| TransformError::Manifest("missing field file".into()))?;
            files.insert(name.to_string(), file.to_string());
        }
    }
    let has_second_drift = files.contains_key("drift_1");
    let mut take = |name: &str| -> Result<Field> {
        let file = files
            .remove(name)
            .ok_or_else(|| TransformError::Manifest(format!("manifest lacks field {name}")))?;
        Ok(grid::read_field(&dir.join(file), gamma)?)
    };
    let u_tilde = take("u_tilde")?;
    let m_tilde = take("m_tilde")?;
    let b_tilde = take("b_tilde")?;
    let r_hat = take("r_hat")?;
    let u_bar = take("u_bar")?;
    let v_bar = take("v_bar")?;
    let w_bar = take("w_bar")?;
    let v = take("v")?;
    let w = take("w")?;
    let anchors = EndpointAnchors {
        v_start: take("v_start")?,
        v_end: take("v_end")?,
        w_start: take("w_start")?,
        w_end: take("w_end")?,
    };
    let reaction = take("reaction")?;
    let mut drift = vec![take("drift_0")?];
    if has_second_drift {
        drift.push(take("drift_1")?);
    }
    Ok(TransformedFields {
        u_tilde,
        m_tilde,
        b_tilde,
        r_hat,
        u_bar,
        v_bar,
        w_bar,
        v,
        w,
        anchors,
        pq: PqCoefficients { drift, reaction },
    })
}
