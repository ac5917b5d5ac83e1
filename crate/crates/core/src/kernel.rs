//! Nonlocal interaction kernels of the form
//! `K(x, y) = b(x) { delta(x_1 - y_1) K_1(xbar, ybar) + H(y_1 - x_1) K_2(x, y) }`
//! where `xbar` collects the coordinates orthogonal to `x_1` and `H` is the
//! Heaviside step. The delta factor is never discretized: its integral
//! collapses to a fixed-`x_1` slice integral, which is evaluated analytically.
//! The Heaviside tail is a truncated integral from `x_1` to `A_1`, computed
//! with trapezoid weights on the tail subinterval.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use crate::grid::{self, DomainTag, Field, GridError, GridSpec};

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("kernel/grid mismatch: {0}")]
    GridMismatch(String),
    #[error("kernel samples out of bound: max |{which}| = {max} >= M = {bound}")]
    BoundViolated { which: &'static str, max: f64, bound: f64 },
    #[error("invalid kernel: {0}")]
    Invalid(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad kernel manifest: {0}")]
    Manifest(String),
}

pub type Result<T> = std::result::Result<T, KernelError>;

/// Samples of the delta-slice factor `K_1(xbar, ybar)` on the orthogonal
/// section. In one spatial dimension the section degenerates to a point of
/// unit measure and `K_1` is a plain scalar.
#[derive(Debug, Clone, PartialEq)]
pub enum K1Samples {
    Scalar(f64),
    /// Row-major `len x len` matrix over the orthogonal axis nodes;
    /// `values[i * len + j] = K_1(xbar_i, ybar_j)`.
    Matrix { len: usize, values: Vec<f64> },
}

impl K1Samples {
    fn max_abs(&self) -> f64 {
        match self {
            K1Samples::Scalar(v) => v.abs(),
            K1Samples::Matrix { values, .. } => values.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        }
    }
}

/// Full kernel specification: slice factor, tail factor, amplitude, and the
/// shared a-priori sup bound `M`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    k1: K1Samples,
    /// Row-major `space_len x space_len` matrix: `k2[xs * L + ys] = K_2(x, y)`.
    k2: Vec<f64>,
    b: Field,
    bound: f64,
}

impl KernelSpec {
    pub fn new(k1: K1Samples, k2: Vec<f64>, b: Field, bound: f64) -> Result<Self> {
        if b.tag() != DomainTag::Space {
            return Err(KernelError::GridMismatch(format!(
                "amplitude b must be a space field, got {}",
                b.tag()
            )));
        }
        let spec = b.spec();
        if !bound.is_finite() || bound <= 0.0 {
            return Err(KernelError::Invalid(format!("bound M must be positive, got {bound}")));
        }
        match &k1 {
            K1Samples::Scalar(v) => {
                if spec.n() != 1 {
                    return Err(KernelError::Invalid("scalar K1 requires n=1".into()));
                }
                if !v.is_finite() {
                    return Err(KernelError::Invalid("K1 scalar must be finite".into()));
                }
            }
            K1Samples::Matrix { len, values } => {
                if spec.n() != 2 {
                    return Err(KernelError::Invalid("matrix K1 requires n=2".into()));
                }
                if *len != spec.nx(1) || values.len() != len * len {
                    return Err(KernelError::GridMismatch(format!(
                        "K1 matrix must be {0}x{0} for Nx2={0}",
                        spec.nx(1)
                    )));
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(KernelError::Invalid("K1 samples must be finite".into()));
                }
            }
        }
        let sl = spec.space_len();
        if k2.len() != sl * sl {
            return Err(KernelError::GridMismatch(format!(
                "K2 must hold {} = {sl}^2 samples, got {}",
                sl * sl,
                k2.len()
            )));
        }
        if k2.iter().any(|v| !v.is_finite()) {
            return Err(KernelError::Invalid("K2 samples must be finite".into()));
        }
        let k1_max = k1.max_abs();
        if k1_max >= bound {
            return Err(KernelError::BoundViolated { which: "K1", max: k1_max, bound });
        }
        let k2_max = k2.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if k2_max >= bound {
            return Err(KernelError::BoundViolated { which: "K2", max: k2_max, bound });
        }
        let b_max = b.linf();
        if b_max >= bound {
            return Err(KernelError::BoundViolated { which: "b", max: b_max, bound });
        }
        Ok(KernelSpec { k1, k2, b, bound })
    }

    /// Kernel with all samples zero and `b = 0`; the interaction vanishes.
    pub fn zero(spec: Arc<GridSpec>, bound: f64) -> Result<Self> {
        let sl = spec.space_len();
        let k1 = if spec.n() == 1 {
            K1Samples::Scalar(0.0)
        } else {
            K1Samples::Matrix { len: spec.nx(1), values: vec![0.0; spec.nx(1) * spec.nx(1)] }
        };
        let b = Field::zeros(spec, DomainTag::Space)?;
        KernelSpec::new(k1, vec![0.0; sl * sl], b, bound)
    }

    pub fn k1(&self) -> &K1Samples {
        &self.k1
    }

    pub fn k2(&self) -> &[f64] {
        &self.k2
    }

    pub fn b(&self) -> &Field {
        &self.b
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        self.b.spec()
    }

    /// Same kernel with a different amplitude on the same grid.
    pub fn with_amplitude(&self, b: Field) -> Result<Self> {
        KernelSpec::new(self.k1.clone(), self.k2.clone(), b, self.bound)
    }
}

fn expect_spacetime_on(k: &KernelSpec, m: &Field, what: &str) -> Result<()> {
    if m.tag() != DomainTag::Spacetime {
        return Err(KernelError::GridMismatch(format!("{what} must be a spacetime field, got {}", m.tag())));
    }
    if *m.spec().as_ref() != *k.grid().as_ref() {
        return Err(KernelError::GridMismatch(format!("{what} lives on a different grid")));
    }
    Ok(())
}

/// Trapezoid weights over nodes `[lo, len)` of a line with step `h`.
/// The subinterval always starts at a grid node, so no partial cells arise.
#[inline]
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

/// The bracketed interaction
/// `I(m)(x, t) = slice + tail` with
/// `slice = int_{section} K_1(xbar, ybar) m(x_1, ybar, t) dybar` and
/// `tail  = int_{x_1}^{A_1} int_{section} K_2(x, y) m(y, t) dybar dy_1`.
///
/// No amplitude factor; this is the quantity both `apply_interaction` and
/// `compute_r` are built from.
pub fn interaction_bracket(k: &KernelSpec, m: &Field) -> Result<Field> {
    expect_spacetime_on(k, m, "density m")?;
    let spec = m.spec().clone();
    let n = spec.n();
    let sl = spec.space_len();
    let nx1 = spec.nx(0);
    let h1 = spec.h(0);
    let mut out = vec![0.0; spec.spacetime_len()];

    match n {
        1 => {
            let k1 = match k.k1 {
                K1Samples::Scalar(v) => v,
                _ => unreachable!("validated at construction"),
            };
            for kt in 0..spec.nt() {
                let msl = &m.values()[kt * sl..(kt + 1) * sl];
                let osl = &mut out[kt * sl..(kt + 1) * sl];
                for i in 0..nx1 {
                    let mut acc = k1 * msl[i];
                    let row = &k.k2[i * sl..(i + 1) * sl];
                    for j in i..nx1 {
                        acc += tail_weight(j, i, nx1, h1) * row[j] * msl[j];
                    }
                    osl[i] = acc;
                }
            }
        }
        2 => {
            let nx2 = spec.nx(1);
            let h2 = spec.h(1);
            let k1m = match &k.k1 {
                K1Samples::Matrix { values, .. } => values.as_slice(),
                _ => unreachable!("validated at construction"),
            };
            let w2 = |j: usize| grid_trap_weight(j, nx2, h2);
            for kt in 0..spec.nt() {
                let msl = &m.values()[kt * sl..(kt + 1) * sl];
                let osl = &mut out[kt * sl..(kt + 1) * sl];
                for i1 in 0..nx1 {
                    for i2 in 0..nx2 {
                        let xs = i1 * nx2 + i2;
                        // Delta slice: integral over the section at fixed x1.
                        let mut slice = 0.0;
                        for j2 in 0..nx2 {
                            slice += w2(j2) * k1m[i2 * nx2 + j2] * msl[i1 * nx2 + j2];
                        }
                        // Heaviside tail: x1 <= y1 <= A1, full section in y2.
                        let mut tail = 0.0;
                        let row = &k.k2[xs * sl..(xs + 1) * sl];
                        for j1 in i1..nx1 {
                            let w1 = tail_weight(j1, i1, nx1, h1);
                            if w1 == 0.0 {
                                continue;
                            }
                            let mut sec = 0.0;
                            for j2 in 0..nx2 {
                                let ys = j1 * nx2 + j2;
                                sec += w2(j2) * row[ys] * msl[ys];
                            }
                            tail += w1 * sec;
                        }
                        osl[xs] = slice + tail;
                    }
                }
            }
        }
        _ => unreachable!("GridSpec enforces n <= 2"),
    }
    Ok(Field::from_values(spec, DomainTag::Spacetime, out)?)
}

#[inline]
fn grid_trap_weight(j: usize, len: usize, h: f64) -> f64 {
    if j == 0 || j == len - 1 {
        0.5 * h
    } else {
        h
    }
}

/// Full interaction term `b(x) * I(m)(x, t)`, the nonlocal term of the
/// value-function equation.
pub fn apply_interaction(k: &KernelSpec, m: &Field) -> Result<Field> {
    let bracket = interaction_bracket(k, m)?;
    let b_st = grid::broadcast_in_time(&k.b)?;
    Ok(bracket.mul(&b_st)?)
}

/// Normalizing function `R(x, t) = -I(m2)(x, t)`: the interaction evaluated
/// with amplitude fixed at `-1`, no `b` factor.
pub fn compute_r(k: &KernelSpec, m2: &Field) -> Result<Field> {
    Ok(interaction_bracket(k, m2)?.scale(-1.0))
}

/// Lower-bound check `min |R| >= c` over all nodes; reports the minimum.
pub struct RBoundReport {
    pub ok: bool,
    pub min_abs: f64,
}

pub fn check_r_bound(r: &Field, c: f64) -> RBoundReport {
    let min_abs = r.values().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    RBoundReport { ok: min_abs >= c, min_abs }
}

/// Product-Gaussian kernel: each axis contributes a unit-mass factor
/// `(2 pi sigma_i^2)^{-1/2} exp(-(x_i - y_i)^2 / (2 sigma_i^2))`.
/// The slice factor `K_1` takes the orthogonal-axis factors only (an empty
/// product, hence 1, when n = 1); `K_2` takes the full product.
pub fn gaussian_kernel(spec: Arc<GridSpec>, sigma: &[f64], b: Field, bound: f64) -> Result<KernelSpec> {
    let n = spec.n();
    if sigma.len() != n {
        return Err(KernelError::Invalid(format!("need {n} sigma values, got {}", sigma.len())));
    }
    for (i, &s) in sigma.iter().enumerate() {
        if !s.is_finite() || s <= 0.0 {
            return Err(KernelError::Invalid(format!("sigma[{i}] must be positive, got {s}")));
        }
    }
    let g = |d: f64, s: f64| (-d * d / (2.0 * s * s)).exp() / (2.0 * std::f64::consts::PI * s * s).sqrt();
    let sl = spec.space_len();
    let mut k2 = vec![0.0; sl * sl];
    for xs in 0..sl {
        let x = spec.space_coords(xs);
        for ys in 0..sl {
            let y = spec.space_coords(ys);
            let mut v = 1.0;
            for i in 0..n {
                v *= g(x[i] - y[i], sigma[i]);
            }
            k2[xs * sl + ys] = v;
        }
    }
    let k1 = if n == 1 {
        K1Samples::Scalar(1.0)
    } else {
        let len = spec.nx(1);
        let mut values = vec![0.0; len * len];
        for i in 0..len {
            for j in 0..len {
                values[i * len + j] = g(spec.coord(1, i) - spec.coord(1, j), sigma[1]);
            }
        }
        K1Samples::Matrix { len, values }
    };
    KernelSpec::new(k1, k2, b, bound)
}

// ---------------------------------------------------------------------------
// Serialization: manifest + raw sample blobs + amplitude field file
// ---------------------------------------------------------------------------

/// Write the kernel into a directory: `manifest.txt`, `b.field`,
/// `k1.f64le` (matrix form only), `k2.f64le`.
pub fn save_kernel(k: &KernelSpec, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (k1_kind, k1_len) = match &k.k1 {
        K1Samples::Scalar(v) => ("scalar".to_string(), format!("{v}")),
        K1Samples::Matrix { len, .. } => ("matrix".to_string(), format!("{len}")),
    };
    let sl = k.grid().space_len();
    let manifest = format!(
        "version=1\nk1_kind={k1_kind}\nk1_param={k1_len}\nk2_rows={sl}\nbound={}\n",
        k.bound
    );
    fs::write(dir.join("manifest.txt"), manifest)?;
    grid::write_field(&k.b, &dir.join("b.field"))?;
    if let K1Samples::Matrix { values, .. } = &k.k1 {
        write_f64_blob(&dir.join("k1.f64le"), values)?;
    }
    write_f64_blob(&dir.join("k2.f64le"), &k.k2)?;
    Ok(())
}

pub fn load_kernel(dir: &Path, gamma: Option<f64>) -> Result<KernelSpec> {
    let manifest = fs::read_to_string(dir.join("manifest.txt"))?;
    let mut kv = std::collections::HashMap::new();
    for line in manifest.lines() {
        if let Some((a, b)) = line.split_once('=') {
            kv.insert(a.trim().to_string(), b.trim().to_string());
        }
    }
    let get = |key: &str| -> Result<&String> {
        kv.get(key).ok_or_else(|| KernelError::Manifest(format!("missing key {key}")))
    };
    if get("version")? != "1" {
        return Err(KernelError::Manifest("unsupported version".into()));
    }
    let b = grid::read_field(&dir.join("b.field"), gamma)?;
    let bound: f64 = get("bound")?.parse().map_err(|_| KernelError::Manifest("bad bound".into()))?;
    let k1 = match get("k1_kind")?.as_str() {
        "scalar" => K1Samples::Scalar(
            get("k1_param")?.parse().map_err(|_| KernelError::Manifest("bad k1 scalar".into()))?,
        ),
        "matrix" => {
            let len: usize =
                get("k1_param")?.parse().map_err(|_| KernelError::Manifest("bad k1 len".into()))?;
            let values = read_f64_blob(&dir.join("k1.f64le"), len * len)?;
            K1Samples::Matrix { len, values }
        }
        other => return Err(KernelError::Manifest(format!("unknown k1_kind {other:?}"))),
    };
    let rows: usize = get("k2_rows")?.parse().map_err(|_| KernelError::Manifest("bad k2_rows".into()))?;
    let k2 = read_f64_blob(&dir.join("k2.f64le"), rows * rows)?;
    KernelSpec::new(k1, k2, b, bound)
}

fn write_f64_blob(path: &Path, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(8 * values.len());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

fn read_f64_blob(path: &Path, count: usize) -> Result<Vec<f64>> {
    let mut raw = Vec::new();
    fs::File::open(path)?.read_to_end(&mut raw)?;
    if raw.len() != 8 * count {
        return Err(KernelError::Manifest(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            raw.len(),
            8 * count
        )));
    }
    Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_1d(nx: usize, nt: usize) -> Arc<GridSpec> {
        Arc::new(GridSpec::new(1, &[1.0], 1.0, &[nx], nt, 1.0).unwrap())
    }

    fn const_kernel_1d(spec: &Arc<GridSpec>, k1: f64, k2: f64, b: f64) -> KernelSpec {
        let sl = spec.space_len();
        let bf = Field::constant(spec.clone(), DomainTag::Space, b).unwrap();
        KernelSpec::new(K1Samples::Scalar(k1), vec![k2; sl * sl], bf, 100.0).unwrap()
    }

    #[test]
    fn delta_part_reproduces_amplitude() {
        let spec = spec_1d(21, 5);
        let b = Field::from_space_fn(spec.clone(), |x| 1.0 + 0.5 * x[0]).unwrap();
        let sl = spec.space_len();
        let k = KernelSpec::new(K1Samples::Scalar(1.0), vec![0.0; sl * sl], b.clone(), 100.0).unwrap();
        let m = Field::constant(spec.clone(), DomainTag::Spacetime, 1.0).unwrap();
        let out = apply_interaction(&k, &m).unwrap();
        for kt in 0..spec.nt() {
            for s in 0..sl {
                assert!((out.at(kt * sl + s) - b.at(s)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn heaviside_tail_integrates_exactly_for_constants() {
        // K1=0, K2=1, m=1: bracket = A1 - x1 (exact for trapezoid on a
        // constant integrand). b scales it.
        let spec = spec_1d(41, 4);
        let k = const_kernel_1d(&spec, 0.0, 1.0, 2.0);
        let m = Field::constant(spec.clone(), DomainTag::Spacetime, 1.0).unwrap();
        let out = apply_interaction(&k, &m).unwrap();
        let sl = spec.space_len();
        for s in 0..sl {
            let x1 = spec.coord(0, s);
            assert!((out.at(s) - 2.0 * (1.0 - x1)).abs() < 1e-13, "x1={x1}");
        }
        // At the far face the tail is empty.
        assert_eq!(out.at(sl - 1), 0.0);
    }

    #[test]
    fn tail_converges_for_smooth_kernels() {
        // K2(x,y) = cos(y1), m = 1: tail = sin(A1) - sin(x1). Trapezoid
        // error is O(h^2).
        let err_at = |nx: usize| -> f64 {
            let spec = spec_1d(nx, 3);
            let sl = spec.space_len();
            let mut k2 = vec![0.0; sl * sl];
            for i in 0..sl {
                for j in 0..sl {
                    k2[i * sl + j] = spec.coord(0, j).cos();
                }
            }
            let b = Field::constant(spec.clone(), DomainTag::Space, 1.0).unwrap();
            let k = KernelSpec::new(K1Samples::Scalar(0.0), k2, b, 100.0).unwrap();
            let m = Field::constant(spec.clone(), DomainTag::Spacetime, 1.0).unwrap();
            let out = apply_interaction(&k, &m).unwrap();
            let mut e = 0.0f64;
            for s in 0..sl {
                let x1 = spec.coord(0, s);
                let exact = (1.0f64).sin() - x1.sin();
                e = e.max((out.at(s) - exact).abs());
            }
            e
        };
        let e1 = err_at(51);
        let e2 = err_at(101);
        assert!(e1 / e2 > 3.5, "tail quadrature should be second order: {e1} vs {e2}");
    }

    #[test]
    fn bracket_linearity() {
        let spec = spec_1d(17, 6);
        let k = const_kernel_1d(&spec, 0.7, 0.3, 1.0);
        let m1 = Field::from_spacetime_fn(spec.clone(), |x, t| (x[0] + t).cos()).unwrap();
        let m2 = Field::from_spacetime_fn(spec.clone(), |x, t| x[0] * x[0] - t).unwrap();
        let comb = m1.scale(2.0).add(&m2.scale(-0.5)).unwrap();
        let lhs = interaction_bracket(&k, &comb).unwrap();
        let rhs = interaction_bracket(&k, &m1)
            .unwrap()
            .scale(2.0)
            .add(&interaction_bracket(&k, &m2).unwrap().scale(-0.5))
            .unwrap();
        let gap = lhs.sub(&rhs).unwrap().linf();
        assert!(gap < 1e-12, "linearity gap {gap}");
    }

    #[test]
    fn apply_equals_minus_b_times_r() {
        let spec = spec_1d(19, 5);
        let b = Field::from_space_fn(spec.clone(), |x| 0.4 * (3.0 * x[0]).sin() + 0.2).unwrap();
        let sl = spec.space_len();
        let mut k2 = vec![0.0; sl * sl];
        for i in 0..sl {
            for j in 0..sl {
                k2[i * sl + j] = 0.5 + 0.25 * spec.coord(0, i) * spec.coord(0, j);
            }
        }
        let k = KernelSpec::new(K1Samples::Scalar(0.8), k2, b.clone(), 100.0).unwrap();
        let m = Field::from_spacetime_fn(spec.clone(), |x, t| 1.0 + 0.3 * x[0] * t).unwrap();
        let lhs = apply_interaction(&k, &m).unwrap();
        let r = compute_r(&k, &m).unwrap();
        let rhs = grid::broadcast_in_time(&b).unwrap().mul(&r.scale(-1.0)).unwrap();
        assert!(lhs.sub(&rhs).unwrap().linf() < 1e-14);
    }

    #[test]
    fn r_sign_and_bound_check() {
        let spec = spec_1d(21, 4);
        let k = const_kernel_1d(&spec, 1.0, 0.0, 1.0);
        let m2 = Field::constant(spec.clone(), DomainTag::Spacetime, 1.0).unwrap();
        let r = compute_r(&k, &m2).unwrap();
        for &v in r.values() {
            assert!((v + 1.0).abs() < 1e-15);
        }
        let rep = check_r_bound(&r, 0.5);
        assert!(rep.ok);
        assert!((rep.min_abs - 1.0).abs() < 1e-15);

        // Tail-only kernel vanishes at the far face: no positive c works.
        let kt = const_kernel_1d(&spec, 0.0, 1.0, 1.0);
        let rt = compute_r(&kt, &m2).unwrap();
        let rep2 = check_r_bound(&rt, 1e-9);
        assert!(!rep2.ok);
        assert_eq!(rep2.min_abs, 0.0);
    }

    #[test]
    fn r_min_respects_positive_density_floor() {
        // K1 >= k_min > 0, m2 >= m_min > 0, K2 >= 0: |R| >= k_min * m_min
        // in one dimension. Brute-force scan agrees.
        let spec = spec_1d(31, 6);
        let k = const_kernel_1d(&spec, 0.6, 0.2, 1.0);
        let m2 = Field::from_spacetime_fn(spec.clone(), |x, t| 0.5 + 0.1 * (x[0] * 2.0 + t).sin()).unwrap();
        let r = compute_r(&k, &m2).unwrap();
        let rep = check_r_bound(&r, 0.6 * 0.4);
        assert!(rep.ok, "min |R| = {} below k_min*m_min", rep.min_abs);
        let brute = r.values().iter().fold(f64::INFINITY, |mn, v| mn.min(v.abs()));
        assert_eq!(rep.min_abs, brute);
    }

    #[test]
    fn tail_part_monotone_in_x1_for_nonnegative_data() {
        let spec = spec_1d(25, 4);
        let sl = spec.space_len();
        let mut k2 = vec![0.0; sl * sl];
        for i in 0..sl {
            for j in 0..sl {
                k2[i * sl + j] = 1.0 + 0.5 * (spec.coord(0, i) + spec.coord(0, j)).cos();
            }
        }
        let b = Field::constant(spec.clone(), DomainTag::Space, 1.0).unwrap();
        let k = KernelSpec::new(K1Samples::Scalar(0.0), k2, b, 100.0).unwrap();
        let m = Field::from_spacetime_fn(spec.clone(), |x, _| 1.0 + x[0] * x[0]).unwrap();
        let out = interaction_bracket(&k, &m).unwrap();
        for s in 1..sl {
            assert!(out.at(s) <= out.at(s - 1) + 1e-14, "tail must not grow with x1");
        }
    }

    #[test]
    fn gaussian_kernel_values() {
        let spec = spec_1d(11, 3);
        let b = Field::constant(spec.clone(), DomainTag::Space, 1.0).unwrap();
        let sigma = 0.3;
        let k = gaussian_kernel(spec.clone(), &[sigma], b, 100.0).unwrap();
        // n=1: the slice factor is the empty product.
        assert_eq!(*k.k1(), K1Samples::Scalar(1.0));
        // On the diagonal K2 = (2 pi sigma^2)^{-1/2}.
        let sl = spec.space_len();
        let peak = 1.0 / (2.0 * std::f64::consts::PI * sigma * sigma).sqrt();
        for i in 0..sl {
            assert!((k.k2()[i * sl + i] - peak).abs() < 1e-14);
        }
        // Symmetry.
        for i in 0..sl {
            for j in 0..sl {
                assert_eq!(k.k2()[i * sl + j], k.k2()[j * sl + i]);
            }
        }
        // Unit mass per axis: integral over y of K2(x, .) at interior x
        // approaches 1 when the domain captures the mass.
        assert!(gaussian_kernel(spec, &[-0.1], Field::constant(spec_1d(11, 3), DomainTag::Space, 1.0).unwrap(), 10.0).is_err());
    }

    #[test]
    fn bound_violations_rejected() {
        let spec = spec_1d(9, 3);
        let sl = spec.space_len();
        let b = Field::constant(spec.clone(), DomainTag::Space, 1.0).unwrap();
        assert!(matches!(
            KernelSpec::new(K1Samples::Scalar(5.0), vec![0.0; sl * sl], b.clone(), 5.0),
            Err(KernelError::BoundViolated { which: "K1", .. })
        ));
        assert!(matches!(
            KernelSpec::new(K1Samples::Scalar(0.0), vec![7.0; sl * sl], b.clone(), 5.0),
            Err(KernelError::BoundViolated { which: "K2", .. })
        ));
        let big_b = Field::constant(spec, DomainTag::Space, 9.0).unwrap();
        assert!(matches!(
            KernelSpec::new(K1Samples::Scalar(0.0), vec![0.0; sl * sl], big_b, 5.0),
            Err(KernelError::BoundViolated { which: "b", .. })
        ));
    }

    #[test]
    fn kernel_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = spec_1d(13, 4);
        let b = Field::from_space_fn(spec.clone(), |x| 0.5 + 0.1 * x[0]).unwrap();
        let k = gaussian_kernel(spec, &[0.4], b, 50.0).unwrap();
        save_kernel(&k, dir.path()).unwrap();
        let k2 = load_kernel(dir.path(), Some(1.0)).unwrap();
        assert_eq!(k, k2);
    }

    #[test]
    fn two_dimensional_bracket_slice_and_tail() {
        let spec = Arc::new(GridSpec::new(2, &[1.0, 1.0], 1.0, &[9, 9], 3, 1.0).unwrap());
        let nx2 = spec.nx(1);
        // K1 = 1 on the section; K2 = 0. m = 1. The slice integral is the
        // section measure 2*A2 = 2.
        let k1 = K1Samples::Matrix { len: nx2, values: vec![1.0; nx2 * nx2] };
        let sl = spec.space_len();
        let b = Field::constant(spec.clone(), DomainTag::Space, 1.0).unwrap();
        let k = KernelSpec::new(k1, vec![0.0; sl * sl], b, 100.0).unwrap();
        let m = Field::constant(spec.clone(), DomainTag::Spacetime, 1.0).unwrap();
        let out = interaction_bracket(&k, &m).unwrap();
        for &v in out.values() {
            assert!((v - 2.0).abs() < 1e-13);
        }

        // K1 = 0, K2 = 1: tail = (A1 - x1) * 2.
        let k1z = K1Samples::Matrix { len: nx2, values: vec![0.0; nx2 * nx2] };
        let b2 = Field::constant(spec.clone(), DomainTag::Space, 1.0).unwrap();
        let kt = KernelSpec::new(k1z, vec![1.0; sl * sl], b2, 100.0).unwrap();
        let out2 = interaction_bracket(&kt, &m).unwrap();
        for s in 0..sl {
            let x = spec.space_coords(s);
            assert!((out2.at(s) - 2.0 * (1.0 - x[0])).abs() < 1e-13);
        }
    }
}
