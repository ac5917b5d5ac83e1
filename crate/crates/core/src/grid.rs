//! Rectangular space-time grids and the discrete calculus used everywhere else.
//!
//! The domain is a rectangular prism `Omega = prod_i (-A_i, A_i)` in one or two
//! spatial dimensions, crossed with the time interval `(0, T)`. Grid functions
//! live on uniform tensor grids over the full cylinder, over `Omega` alone,
//! over one lateral face of the cylinder, or on a single time slice. All
//! first/second derivative stencils are second order: central differences in
//! the interior and one-sided three/four point stencils at the ends, so that
//! polynomials of degree two per axis are differentiated exactly at every node.
//! Quadrature is the tensor trapezoidal rule.

use std::fmt;
use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

/// Maximum supported spatial dimension.
pub const MAX_DIM: usize = 2;

/// Absolute tolerance used when matching grid coordinates and corner data.
pub const GRID_COORD_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid grid spec: {0}")]
    InvalidSpec(String),
    #[error("domain mismatch: expected {expected}, got {got}")]
    DomainMismatch { expected: String, got: String },
    #[error("value count {got} does not match domain size {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("operation {op} is not defined on domain {tag}")]
    UnsupportedDomain { op: &'static str, tag: String },
    #[error("axis {axis} out of range for n={n}")]
    AxisOutOfRange { axis: usize, n: usize },
    #[error("time index {index} out of range for Nt={nt}")]
    TimeIndexOutOfRange { index: usize, nt: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad field file: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, GridError>;

// ---------------------------------------------------------------------------
// Grid specification
// ---------------------------------------------------------------------------

/// Uniform tensor grid over `prod_i (-A_i, A_i) x (0, T)`.
///
/// `gamma` selects the observation subdomain `Omega_gamma`, the part of
/// `Omega` with `x_1 > -A_1 + gamma`; error reports are split along it.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    n: usize,
    a: [f64; MAX_DIM],
    t_max: f64,
    nx: [usize; MAX_DIM],
    nt: usize,
    gamma: f64,
}

impl GridSpec {
    pub fn new(n: usize, a: &[f64], t_max: f64, nx: &[usize], nt: usize, gamma: f64) -> Result<Self> {
        if n == 0 || n > MAX_DIM {
            return Err(GridError::InvalidSpec(format!("n must be 1 or 2, got {n}")));
        }
        if a.len() != n || nx.len() != n {
            return Err(GridError::InvalidSpec(format!(
                "A and Nx must each have {n} entries, got {} and {}",
                a.len(),
                nx.len()
            )));
        }
        for (i, &ai) in a.iter().enumerate() {
            if !ai.is_finite() || ai <= 0.0 {
                return Err(GridError::InvalidSpec(format!("A[{i}] must be positive, got {ai}")));
            }
        }
        for (i, &ni) in nx.iter().enumerate() {
            if ni < 3 {
                return Err(GridError::InvalidSpec(format!("Nx[{i}] must be >= 3, got {ni}")));
            }
        }
        if !t_max.is_finite() || t_max <= 0.0 {
            return Err(GridError::InvalidSpec(format!("T must be positive, got {t_max}")));
        }
        if nt < 3 {
            return Err(GridError::InvalidSpec(format!("Nt must be >= 3, got {nt}")));
        }
        if !gamma.is_finite() || gamma <= 0.0 || gamma >= 2.0 * a[0] {
            return Err(GridError::InvalidSpec(format!(
                "gamma must lie in (0, 2*A_1) = (0, {}), got {gamma}",
                2.0 * a[0]
            )));
        }
        let mut aa = [0.0; MAX_DIM];
        let mut nn = [1usize; MAX_DIM];
        aa[..n].copy_from_slice(a);
        nn[..n].copy_from_slice(nx);
        Ok(GridSpec { n, a: aa, t_max, nx: nn, nt, gamma })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn a(&self, axis: usize) -> f64 {
        debug_assert!(axis < self.n);
        self.a[axis]
    }

    pub fn half_widths(&self) -> &[f64] {
        &self.a[..self.n]
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn nx(&self, axis: usize) -> usize {
        debug_assert!(axis < self.n);
        self.nx[axis]
    }

    pub fn nx_all(&self) -> &[usize] {
        &self.nx[..self.n]
    }

    pub fn nt(&self) -> usize {
        self.nt
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Spatial mesh width along `axis`.
    pub fn h(&self, axis: usize) -> f64 {
        2.0 * self.a[axis] / (self.nx[axis] - 1) as f64
    }

    /// Time step.
    pub fn tau(&self) -> f64 {
        self.t_max / (self.nt - 1) as f64
    }

    pub fn space_len(&self) -> usize {
        self.nx[..self.n].iter().product()
    }

    pub fn spacetime_len(&self) -> usize {
        self.space_len() * self.nt
    }

    /// Number of spatial nodes on a face orthogonal to `axis`.
    pub fn face_space_len(&self, axis: usize) -> usize {
        self.space_len() / self.nx[axis]
    }

    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        -self.a[axis] + self.h(axis) * i as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        self.tau() * k as f64
    }

    /// Spatial coordinates of the flat spatial index; trailing entries zero.
    pub fn space_coords(&self, sidx: usize) -> [f64; MAX_DIM] {
        let mut x = [0.0; MAX_DIM];
        let mut rem = sidx;
        for axis in (0..self.n).rev() {
            let i = rem % self.nx[axis];
            rem /= self.nx[axis];
            x[axis] = self.coord(axis, i);
        }
        x
    }

    /// Multi-index of the flat spatial index.
    pub fn space_multi_index(&self, sidx: usize) -> [usize; MAX_DIM] {
        let mut ix = [0usize; MAX_DIM];
        let mut rem = sidx;
        for axis in (0..self.n).rev() {
            ix[axis] = rem % self.nx[axis];
            rem /= self.nx[axis];
        }
        ix
    }

    pub fn space_flat_index(&self, ix: &[usize]) -> usize {
        debug_assert_eq!(ix.len(), self.n);
        let mut idx = 0usize;
        for axis in 0..self.n {
            idx = idx * self.nx[axis] + ix[axis];
        }
        idx
    }

    /// Stride of `axis` inside one flat spatial slice.
    pub fn space_stride(&self, axis: usize) -> usize {
        self.nx[axis + 1..self.n].iter().product()
    }

    /// True when the spatial node lies on the boundary of `Omega`.
    pub fn is_space_boundary(&self, sidx: usize) -> bool {
        let ix = self.space_multi_index(sidx);
        (0..self.n).any(|a| ix[a] == 0 || ix[a] == self.nx[a] - 1)
    }

    /// Number of nodes with `x_1 >= -A_1 + gamma - tol`, i.e. inside the
    /// closed observation subdomain.
    pub fn first_index_in_gamma(&self) -> usize {
        let cut = -self.a[0] + self.gamma;
        let h = self.h(0);
        let mut i = ((cut + self.a[0]) / h).ceil() as usize;
        while i > 0 && self.coord(0, i - 1) >= cut - GRID_COORD_TOL {
            i -= 1;
        }
        i.min(self.nx[0] - 1)
    }
}

// ---------------------------------------------------------------------------
// Domain tags and fields
// ---------------------------------------------------------------------------

/// Identifies one lateral face of the cylinder: `x_axis = +-A_axis`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FaceId {
    pub axis: usize,
    pub positive: bool,
}

impl fmt::Display for FaceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.axis, if self.positive { '+' } else { '-' })
    }
}

/// Domain a grid function is defined on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainTag {
    /// The full cylinder `Omega x [0, T]`, stored time-major.
    Spacetime,
    /// `Omega` alone.
    Space,
    /// One lateral face crossed with `[0, T]`, stored time-major.
    LateralFace(FaceId),
    /// `Omega` at a fixed time index.
    TimeSlice(usize),
}

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DomainTag::Spacetime => write!(f, "spacetime"),
            DomainTag::Space => write!(f, "space"),
            DomainTag::LateralFace(id) => write!(f, "lateral_face{id}"),
            DomainTag::TimeSlice(k) => write!(f, "time_slice({k})"),
        }
    }
}

/// One logical dimension of a stored field: length, stride in the flat
/// buffer, mesh width, and which axis of the problem it represents.
#[derive(Debug, Clone, Copy)]
pub struct LogicalDim {
    pub len: usize,
    pub stride: usize,
    pub step: f64,
    pub axis: Axis,
}

/// Differentiation direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Spatial(usize),
    Time,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Axis::Spatial(a) => write!(f, "x{}", a + 1),
            Axis::Time => write!(f, "t"),
        }
    }
}

/// Immutable scalar grid function on one of the tagged domains.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    spec: Arc<GridSpec>,
    tag: DomainTag,
    values: Vec<f64>,
}

/// Expected buffer length for a tag.
pub fn domain_len(spec: &GridSpec, tag: DomainTag) -> Result<usize> {
    Ok(match tag {
        DomainTag::Spacetime => spec.spacetime_len(),
        DomainTag::Space => spec.space_len(),
        DomainTag::LateralFace(id) => {
            if id.axis >= spec.n() {
                return Err(GridError::AxisOutOfRange { axis: id.axis, n: spec.n() });
            }
            spec.face_space_len(id.axis) * spec.nt()
        }
        DomainTag::TimeSlice(k) => {
            if k >= spec.nt() {
                return Err(GridError::TimeIndexOutOfRange { index: k, nt: spec.nt() });
            }
            spec.space_len()
        }
    })
}

impl Field {
    pub fn from_values(spec: Arc<GridSpec>, tag: DomainTag, values: Vec<f64>) -> Result<Self> {
        let expected = domain_len(&spec, tag)?;
        if values.len() != expected {
            return Err(GridError::LengthMismatch { expected, got: values.len() });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFinite(i));
        }
        Ok(Field { spec, tag, values })
    }

    /// Internal constructor for values produced by finite arithmetic on
    /// already-validated fields.
    pub(crate) fn from_values_unchecked(spec: Arc<GridSpec>, tag: DomainTag, values: Vec<f64>) -> Self {
        debug_assert_eq!(domain_len(&spec, tag).expect("valid tag"), values.len());
        Field { spec, tag, values }
    }

    pub fn zeros(spec: Arc<GridSpec>, tag: DomainTag) -> Result<Self> {
        let len = domain_len(&spec, tag)?;
        Ok(Field { spec, tag, values: vec![0.0; len] })
    }

    pub fn constant(spec: Arc<GridSpec>, tag: DomainTag, c: f64) -> Result<Self> {
        let len = domain_len(&spec, tag)?;
        if !c.is_finite() {
            return Err(GridError::NonFinite(0));
        }
        Ok(Field { spec, tag, values: vec![c; len] })
    }

    pub fn from_space_fn(spec: Arc<GridSpec>, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let n = spec.n();
        let mut values = Vec::with_capacity(spec.space_len());
        for s in 0..spec.space_len() {
            let x = spec.space_coords(s);
            values.push(f(&x[..n]));
        }
        Field::from_values(spec, DomainTag::Space, values)
    }

    pub fn from_spacetime_fn(spec: Arc<GridSpec>, f: impl Fn(&[f64], f64) -> f64) -> Result<Self> {
        let n = spec.n();
        let mut values = Vec::with_capacity(spec.spacetime_len());
        for k in 0..spec.nt() {
            let t = spec.time(k);
            for s in 0..spec.space_len() {
                let x = spec.space_coords(s);
                values.push(f(&x[..n], t));
            }
        }
        Field::from_values(spec, DomainTag::Spacetime, values)
    }

    pub fn from_time_slice_fn(spec: Arc<GridSpec>, k: usize, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let n = spec.n();
        let mut values = Vec::with_capacity(spec.space_len());
        for s in 0..spec.space_len() {
            let x = spec.space_coords(s);
            values.push(f(&x[..n]));
        }
        Field::from_values(spec, DomainTag::TimeSlice(k), values)
    }

    /// Build a face field; the closure receives full spatial coordinates
    /// (face coordinate already pinned) and time.
    pub fn from_face_fn(
        spec: Arc<GridSpec>,
        face: FaceId,
        f: impl Fn(&[f64], f64) -> f64,
    ) -> Result<Self> {
        let n = spec.n();
        if face.axis >= n {
            return Err(GridError::AxisOutOfRange { axis: face.axis, n });
        }
        let fixed = if face.positive { spec.a(face.axis) } else { -spec.a(face.axis) };
        let flen = spec.face_space_len(face.axis);
        let mut values = Vec::with_capacity(flen * spec.nt());
        for k in 0..spec.nt() {
            let t = spec.time(k);
            for fs in 0..flen {
                let x = face_coords(&spec, face, fs, fixed);
                values.push(f(&x[..n], t));
            }
        }
        Field::from_values(spec, DomainTag::LateralFace(face), values)
    }

    pub fn spec(&self) -> &Arc<GridSpec> {
        &self.spec
    }

    pub fn tag(&self) -> DomainTag {
        self.tag
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Flat spacetime index.
    pub fn st_index(&self, k: usize, sidx: usize) -> usize {
        debug_assert_eq!(self.tag, DomainTag::Spacetime);
        k * self.spec.space_len() + sidx
    }

    pub fn at(&self, idx: usize) -> f64 {
        self.values[idx]
    }

    /// Logical dimensions of the stored layout, outermost first.
    pub fn dims(&self) -> Vec<LogicalDim> {
        let spec = &self.spec;
        let n = spec.n();
        match self.tag {
            DomainTag::Spacetime => {
                let mut dims = Vec::with_capacity(n + 1);
                dims.push(LogicalDim {
                    len: spec.nt(),
                    stride: spec.space_len(),
                    step: spec.tau(),
                    axis: Axis::Time,
                });
                for a in 0..n {
                    dims.push(LogicalDim {
                        len: spec.nx(a),
                        stride: spec.space_stride(a),
                        step: spec.h(a),
                        axis: Axis::Spatial(a),
                    });
                }
                dims
            }
            DomainTag::Space | DomainTag::TimeSlice(_) => (0..n)
                .map(|a| LogicalDim {
                    len: spec.nx(a),
                    stride: spec.space_stride(a),
                    step: spec.h(a),
                    axis: Axis::Spatial(a),
                })
                .collect(),
            DomainTag::LateralFace(id) => {
                let flen = spec.face_space_len(id.axis);
                let mut dims = Vec::with_capacity(n);
                dims.push(LogicalDim { len: spec.nt(), stride: flen, step: spec.tau(), axis: Axis::Time });
                let mut stride = 1usize;
                let mut tang: Vec<LogicalDim> = Vec::new();
                for a in (0..n).rev() {
                    if a == id.axis {
                        continue;
                    }
                    tang.push(LogicalDim { len: spec.nx(a), stride, step: spec.h(a), axis: Axis::Spatial(a) });
                    stride *= spec.nx(a);
                }
                tang.reverse();
                dims.extend(tang);
                dims
            }
        }
    }

    fn expect_same_domain(&self, other: &Field, op: &'static str) -> Result<()> {
        if self.tag != other.tag || *self.spec != *other.spec {
            return Err(GridError::DomainMismatch {
                expected: format!("{op}: {} on matching grid", self.tag),
                got: other.tag.to_string(),
            });
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        let values = self.values.iter().map(|&v| f(v)).collect();
        Field::from_values_unchecked(self.spec.clone(), self.tag, values)
    }

    pub fn zip_with(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Result<Field> {
        self.expect_same_domain(other, "zip_with")?;
        let values = self
            .values
            .iter()
            .zip(other.values.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Field::from_values_unchecked(self.spec.clone(), self.tag, values))
    }

    pub fn add(&self, other: &Field) -> Result<Field> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Field) -> Result<Field> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Field) -> Result<Field> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Field {
        self.map(|v| c * v)
    }

    pub fn linf(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
    }

    /// Verify all entries are finite.
    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFinite(i));
        }
        Ok(())
    }
}

/// Spatial coordinates of a face node, with the face coordinate pinned.
fn face_coords(spec: &GridSpec, face: FaceId, fs: usize, fixed: f64) -> [f64; MAX_DIM] {
    let n = spec.n();
    let mut x = [0.0; MAX_DIM];
    let mut rem = fs;
    for a in (0..n).rev() {
        if a == face.axis {
            continue;
        }
        let i = rem % spec.nx(a);
        rem /= spec.nx(a);
        x[a] = spec.coord(a, i);
    }
    x[face.axis] = fixed;
    x
}

// ---------------------------------------------------------------------------
// Derivatives
// ---------------------------------------------------------------------------

/// Second-order first derivative of a strided line evaluated at `pos`.
#[inline]
fn d1_at(values: &[f64], base: usize, pos: usize, len: usize, stride: usize, h: f64) -> f64 {
    let v = |p: usize| values[base + p * stride];
    if len < 3 {
        // Nx >= 3 and Nt >= 3 are enforced by GridSpec.
        unreachable!("lines always have at least 3 nodes");
    }
    if pos == 0 {
        (-3.0 * v(0) + 4.0 * v(1) - v(2)) / (2.0 * h)
    } else if pos == len - 1 {
        (3.0 * v(len - 1) - 4.0 * v(len - 2) + v(len - 3)) / (2.0 * h)
    } else {
        (v(pos + 1) - v(pos - 1)) / (2.0 * h)
    }
}

/// Second derivative; one-sided four-point stencils at the ends when the line
/// is long enough, three-point otherwise (still exact for quadratics).
#[inline]
fn d2_at(values: &[f64], base: usize, pos: usize, len: usize, stride: usize, h: f64) -> f64 {
    let v = |p: usize| values[base + p * stride];
    let h2 = h * h;
    if pos > 0 && pos < len - 1 {
        (v(pos + 1) - 2.0 * v(pos) + v(pos - 1)) / h2
    } else if pos == 0 {
        if len >= 4 {
            (2.0 * v(0) - 5.0 * v(1) + 4.0 * v(2) - v(3)) / h2
        } else {
            (v(0) - 2.0 * v(1) + v(2)) / h2
        }
    } else if len >= 4 {
        (2.0 * v(len - 1) - 5.0 * v(len - 2) + 4.0 * v(len - 3) - v(len - 4)) / h2
    } else {
        (v(len - 1) - 2.0 * v(len - 2) + v(len - 3)) / h2
    }
}

fn derive_along(f: &Field, dim: &LogicalDim, order: u8) -> Field {
    let values = f.values();
    let total = values.len();
    let mut out = vec![0.0; total];
    let span = dim.len * dim.stride;
    for idx in 0..total {
        let pos = (idx / dim.stride) % dim.len;
        let base = (idx / span) * span + (idx % dim.stride);
        out[idx] = match order {
            1 => d1_at(values, base, pos, dim.len, dim.stride, dim.step),
            _ => d2_at(values, base, pos, dim.len, dim.stride, dim.step),
        };
    }
    Field::from_values_unchecked(f.spec().clone(), f.tag(), out)
}

fn find_dim(f: &Field, axis: Axis, op: &'static str) -> Result<LogicalDim> {
    f.dims()
        .into_iter()
        .find(|d| d.axis == axis)
        .ok_or(GridError::UnsupportedDomain { op, tag: format!("{} (axis {axis})", f.tag()) })
}

/// First derivative along an arbitrary axis present in the field's domain.
pub fn derivative(f: &Field, axis: Axis) -> Result<Field> {
    let dim = find_dim(f, axis, "derivative")?;
    Ok(derive_along(f, &dim, 1))
}

/// Second derivative along an arbitrary axis present in the field's domain.
pub fn second_derivative(f: &Field, axis: Axis) -> Result<Field> {
    let dim = find_dim(f, axis, "second_derivative")?;
    Ok(derive_along(f, &dim, 2))
}

/// Spatial gradient; defined on domains carrying all spatial axes.
pub fn gradient(f: &Field) -> Result<Vec<Field>> {
    match f.tag() {
        DomainTag::Spacetime | DomainTag::Space | DomainTag::TimeSlice(_) => {}
        tag => return Err(GridError::UnsupportedDomain { op: "gradient", tag: tag.to_string() }),
    }
    (0..f.spec().n()).map(|a| derivative(f, Axis::Spatial(a))).collect()
}

/// Spatial Laplacian.
pub fn laplacian(f: &Field) -> Result<Field> {
    match f.tag() {
        DomainTag::Spacetime | DomainTag::Space | DomainTag::TimeSlice(_) => {}
        tag => return Err(GridError::UnsupportedDomain { op: "laplacian", tag: tag.to_string() }),
    }
    let spec = f.spec().clone();
    let mut acc = Field::zeros(spec, f.tag()).expect("tag is valid");
    for a in 0..f.spec().n() {
        let d2 = second_derivative(f, Axis::Spatial(a))?;
        acc = acc.add(&d2)?;
    }
    Ok(acc)
}

/// Time derivative; defined on spacetime and lateral-face fields.
pub fn dt(f: &Field) -> Result<Field> {
    match f.tag() {
        DomainTag::Spacetime | DomainTag::LateralFace(_) => {}
        tag => return Err(GridError::UnsupportedDomain { op: "dt", tag: tag.to_string() }),
    }
    derivative(f, Axis::Time)
}

/// Divergence of a spatial vector field (one component per axis).
pub fn divergence(v: &[Field]) -> Result<Field> {
    if v.is_empty() {
        return Err(GridError::InvalidSpec("divergence of empty vector".into()));
    }
    let n = v[0].spec().n();
    if v.len() != n {
        return Err(GridError::InvalidSpec(format!("divergence needs {n} components, got {}", v.len())));
    }
    let mut acc = Field::zeros(v[0].spec().clone(), v[0].tag())?;
    for (a, comp) in v.iter().enumerate() {
        v[0].expect_same_domain(comp, "divergence")?;
        acc = acc.add(&derivative(comp, Axis::Spatial(a))?)?;
    }
    Ok(acc)
}

/// Reverse the time axis: `out(x, t) = f(x, T - t)`.
pub fn reflect_time(f: &Field) -> Result<Field> {
    match f.tag() {
        DomainTag::Spacetime | DomainTag::LateralFace(_) => {}
        tag => return Err(GridError::UnsupportedDomain { op: "reflect_time", tag: tag.to_string() }),
    }
    let spec = f.spec().clone();
    let nt = spec.nt();
    let slice = f.len() / nt;
    let mut out = vec![0.0; f.len()];
    for k in 0..nt {
        let src = &f.values()[k * slice..(k + 1) * slice];
        out[(nt - 1 - k) * slice..(nt - k) * slice].copy_from_slice(src);
    }
    Ok(Field::from_values_unchecked(spec, f.tag(), out))
}

// ---------------------------------------------------------------------------
// Quadrature and norms
// ---------------------------------------------------------------------------

#[inline]
fn trapezoid_weight(pos: usize, len: usize, step: f64) -> f64 {
    if pos == 0 || pos == len - 1 {
        0.5 * step
    } else {
        step
    }
}

/// Trapezoidal quadrature weight of a flat index.
pub fn quad_weight(f: &Field, idx: usize) -> f64 {
    let mut w = 1.0;
    for dim in f.dims() {
        let pos = (idx / dim.stride) % dim.len;
        w *= trapezoid_weight(pos, dim.len, dim.step);
    }
    w
}

/// Tensor trapezoidal rule over the tagged domain. For a face in one spatial
/// dimension the face itself is a point of unit measure, so the integral
/// reduces to the time integral alone.
pub fn integrate(f: &Field) -> f64 {
    let dims = f.dims();
    let mut acc = 0.0;
    for (idx, &v) in f.values().iter().enumerate() {
        let mut w = 1.0;
        for dim in &dims {
            let pos = (idx / dim.stride) % dim.len;
            w *= trapezoid_weight(pos, dim.len, dim.step);
        }
        acc += w * v;
    }
    acc
}

/// Integral of a product without materializing it.
pub fn integrate_product(f: &Field, g: &Field) -> Result<f64> {
    f.expect_same_domain(g, "integrate_product")?;
    let dims = f.dims();
    let mut acc = 0.0;
    for (idx, (&a, &b)) in f.values().iter().zip(g.values()).enumerate() {
        let mut w = 1.0;
        for dim in &dims {
            let pos = (idx / dim.stride) % dim.len;
            w *= trapezoid_weight(pos, dim.len, dim.step);
        }
        acc += w * a * b;
    }
    Ok(acc)
}

/// Discrete L2 norm over the tagged domain.
pub fn norm_l2(f: &Field) -> f64 {
    integrate_product(f, f).expect("same field").max(0.0).sqrt()
}

fn multi_indices(n: usize, max_order: usize) -> Vec<[usize; MAX_DIM]> {
    let mut out = Vec::new();
    if n == 1 {
        for d in 0..=max_order {
            out.push([d, 0]);
        }
    } else {
        for d1 in 0..=max_order {
            for d2 in 0..=(max_order - d1) {
                out.push([d1, d2]);
            }
        }
    }
    out
}

fn repeated_spatial_derivative(f: &Field, alpha: &[usize; MAX_DIM]) -> Result<Field> {
    let mut g = f.clone();
    for axis in 0..f.spec().n() {
        for _ in 0..alpha[axis] {
            g = derivative(&g, Axis::Spatial(axis))?;
        }
    }
    Ok(g)
}

/// Sobolev `H^k(Omega)` norm of a spatial field, `k <= 4`: the root of the sum
/// of squared L2 norms of all derivatives up to total order `k`.
pub fn norm_hk_space(f: &Field, k: usize) -> Result<f64> {
    match f.tag() {
        DomainTag::Space | DomainTag::TimeSlice(_) => {}
        tag => return Err(GridError::UnsupportedDomain { op: "norm_hk_space", tag: tag.to_string() }),
    }
    if k > 4 {
        return Err(GridError::InvalidSpec(format!("H^k norms supported up to k=4, got {k}")));
    }
    let mut acc = 0.0;
    for alpha in multi_indices(f.spec().n(), k) {
        let d = repeated_spatial_derivative(f, &alpha)?;
        let nrm = norm_l2(&d);
        acc += nrm * nrm;
    }
    Ok(acc.sqrt())
}

/// Discrete sup-norm over all spatial derivatives of total order `<= k`.
pub fn norm_c_space(f: &Field, k: usize) -> Result<f64> {
    match f.tag() {
        DomainTag::Space | DomainTag::TimeSlice(_) => {}
        tag => return Err(GridError::UnsupportedDomain { op: "norm_c_space", tag: tag.to_string() }),
    }
    let mut best = 0.0f64;
    for alpha in multi_indices(f.spec().n(), k) {
        let d = repeated_spatial_derivative(f, &alpha)?;
        best = best.max(d.linf());
    }
    Ok(best)
}

/// Discrete sup-norm over spatial derivatives of order `<= k_space` combined
/// with time derivatives of order `<= k_time` (the parabolic C-norm shape).
pub fn norm_c_spacetime(f: &Field, k_space: usize, k_time: usize) -> Result<f64> {
    if f.tag() != DomainTag::Spacetime {
        return Err(GridError::UnsupportedDomain { op: "norm_c_spacetime", tag: f.tag().to_string() });
    }
    let mut best = 0.0f64;
    for jt in 0..=k_time {
        let mut g = f.clone();
        for _ in 0..jt {
            g = derivative(&g, Axis::Time)?;
        }
        for alpha in multi_indices(f.spec().n(), k_space) {
            let d = repeated_spatial_derivative(&g, &alpha)?;
            best = best.max(d.linf());
        }
    }
    Ok(best)
}

/// Restrict a spacetime field to one lateral face.
pub fn restrict_to_face(f: &Field, face: FaceId) -> Result<Field> {
    if f.tag() != DomainTag::Spacetime {
        return Err(GridError::DomainMismatch { expected: "spacetime".into(), got: f.tag().to_string() });
    }
    let spec = f.spec().clone();
    let n = spec.n();
    if face.axis >= n {
        return Err(GridError::AxisOutOfRange { axis: face.axis, n });
    }
    let pinned = if face.positive { spec.nx(face.axis) - 1 } else { 0 };
    let flen = spec.face_space_len(face.axis);
    let mut out = Vec::with_capacity(flen * spec.nt());
    let mut ix = [0usize; MAX_DIM];
    for k in 0..spec.nt() {
        for fs in 0..flen {
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
            out.push(f.values()[k * spec.space_len() + sidx]);
        }
    }
    Field::from_values(spec, DomainTag::LateralFace(face), out)
}

/// Extract the spatial slice at time index `k` as a `Space` field.
pub fn time_slice_space(f: &Field, k: usize) -> Result<Field> {
    if f.tag() != DomainTag::Spacetime {
        return Err(GridError::DomainMismatch { expected: "spacetime".into(), got: f.tag().to_string() });
    }
    let spec = f.spec().clone();
    if k >= spec.nt() {
        return Err(GridError::TimeIndexOutOfRange { index: k, nt: spec.nt() });
    }
    let sl = spec.space_len();
    let vals = f.values()[k * sl..(k + 1) * sl].to_vec();
    Field::from_values(spec, DomainTag::Space, vals)
}

/// Promote a spatial field to a time-constant spacetime field.
pub fn broadcast_in_time(f: &Field) -> Result<Field> {
    match f.tag() {
        DomainTag::Space | DomainTag::TimeSlice(_) => {}
        tag => return Err(GridError::DomainMismatch { expected: "space".into(), got: tag.to_string() }),
    }
    let spec = f.spec().clone();
    let mut out = Vec::with_capacity(spec.spacetime_len());
    for _ in 0..spec.nt() {
        out.extend_from_slice(f.values());
    }
    Field::from_values(spec, DomainTag::Spacetime, out)
}

/// Full first/second derivative traces of a spacetime field on one face.
///
/// Holds the restriction of the field, of its time derivative, of all first
/// spatial derivatives, and of all ordered second spatial derivatives, which
/// is what the anisotropic face norms consume.
pub struct LateralTraces {
    pub face: FaceId,
    pub f: Field,
    pub ft: Field,
    pub d1: Vec<Field>,
    pub d2: Vec<Vec<Field>>,
}

impl LateralTraces {
    pub fn from_spacetime(u: &Field, face: FaceId) -> Result<Self> {
        let n = u.spec().n();
        let f = restrict_to_face(u, face)?;
        let ft = restrict_to_face(&dt(u)?, face)?;
        let grads = gradient(u)?;
        let mut d1 = Vec::with_capacity(n);
        for g in &grads {
            d1.push(restrict_to_face(g, face)?);
        }
        let mut d2 = Vec::with_capacity(n);
        for g in &grads {
            let mut row = Vec::with_capacity(n);
            for s in 0..n {
                row.push(restrict_to_face(&derivative(g, Axis::Spatial(s))?, face)?);
            }
            d2.push(row);
        }
        Ok(LateralTraces { face, f, ft, d1, d2 })
    }

    /// Anisotropic second-order face norm: tangential first derivatives, all
    /// ordered second-derivative pairs except the doubled normal one, the
    /// trace itself, and its time derivative.
    pub fn norm_h21(&self) -> f64 {
        let i = self.face.axis;
        let n = self.d1.len();
        let mut acc = 0.0;
        for (j, g) in self.d1.iter().enumerate() {
            if j != i {
                let v = norm_l2(g);
                acc += v * v;
            }
        }
        for j in 0..n {
            for s in 0..n {
                if j == i && s == i {
                    continue;
                }
                let v = norm_l2(&self.d2[j][s]);
                acc += v * v;
            }
        }
        let v0 = norm_l2(&self.f);
        let v1 = norm_l2(&self.ft);
        acc += v0 * v0 + v1 * v1;
        acc.sqrt()
    }

    /// First-order face norm: tangential first derivatives plus the trace.
    pub fn norm_h10(&self) -> f64 {
        let i = self.face.axis;
        let mut acc = 0.0;
        for (j, g) in self.d1.iter().enumerate() {
            if j != i {
                let v = norm_l2(g);
                acc += v * v;
            }
        }
        let v0 = norm_l2(&self.f);
        acc += v0 * v0;
        acc.sqrt()
    }
}

/// Face norms computable from face data alone: tangential and time
/// derivatives only. Used for measured boundary channels, where no normal
/// derivative information exists on the face itself.
pub fn face_norm_h21_intrinsic(f: &Field) -> Result<f64> {
    let face = match f.tag() {
        DomainTag::LateralFace(id) => id,
        tag => {
            return Err(GridError::DomainMismatch { expected: "lateral_face".into(), got: tag.to_string() })
        }
    };
    let n = f.spec().n();
    let mut acc = 0.0;
    let tang: Vec<usize> = (0..n).filter(|&a| a != face.axis).collect();
    for &a in &tang {
        let g = derivative(f, Axis::Spatial(a))?;
        let v = norm_l2(&g);
        acc += v * v;
        for &b in &tang {
            let gg = derivative(&g, Axis::Spatial(b))?;
            let v2 = norm_l2(&gg);
            acc += v2 * v2;
        }
    }
    let v0 = norm_l2(f);
    let v1 = norm_l2(&dt(f)?);
    acc += v0 * v0 + v1 * v1;
    Ok(acc.sqrt())
}

pub fn face_norm_h10_intrinsic(f: &Field) -> Result<f64> {
    let face = match f.tag() {
        DomainTag::LateralFace(id) => id,
        tag => {
            return Err(GridError::DomainMismatch { expected: "lateral_face".into(), got: tag.to_string() })
        }
    };
    let n = f.spec().n();
    let mut acc = 0.0;
    for a in (0..n).filter(|&a| a != face.axis) {
        let g = derivative(f, Axis::Spatial(a))?;
        let v = norm_l2(&g);
        acc += v * v;
    }
    let v0 = norm_l2(f);
    acc += v0 * v0;
    Ok(acc.sqrt())
}

/// All faces of the spatial domain, in a fixed deterministic order.
pub fn all_faces(spec: &GridSpec) -> Vec<FaceId> {
    let mut out = Vec::with_capacity(2 * spec.n());
    for axis in 0..spec.n() {
        for positive in [false, true] {
            out.push(FaceId { axis, positive });
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Field file format
// ---------------------------------------------------------------------------

fn format_f64_list(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(",")
}

fn format_usize_list(xs: &[usize]) -> String {
    xs.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(",")
}

fn tag_to_token(tag: DomainTag) -> String {
    match tag {
        DomainTag::Spacetime => "spacetime".into(),
        DomainTag::Space => "space".into(),
        DomainTag::LateralFace(id) => {
            format!("lateral_face({},{})", id.axis, if id.positive { "+" } else { "-" })
        }
        DomainTag::TimeSlice(k) => format!("time_slice({k})"),
    }
}

fn tag_from_token(tok: &str) -> Result<DomainTag> {
    if tok == "spacetime" {
        return Ok(DomainTag::Spacetime);
    }
    if tok == "space" {
        return Ok(DomainTag::Space);
    }
    if let Some(rest) = tok.strip_prefix("lateral_face(").and_then(|r| r.strip_suffix(')')) {
        let mut parts = rest.split(',');
        let axis: usize = parts
            .next()
            .ok_or_else(|| GridError::Format("missing face axis".into()))?
            .parse()
            .map_err(|_| GridError::Format("bad face axis".into()))?;
        let sign = parts.next().ok_or_else(|| GridError::Format("missing face sign".into()))?;
        let positive = match sign {
            "+" => true,
            "-" => false,
            other => return Err(GridError::Format(format!("bad face sign {other:?}"))),
        };
        return Ok(DomainTag::LateralFace(FaceId { axis, positive }));
    }
    if let Some(rest) = tok.strip_prefix("time_slice(").and_then(|r| r.strip_suffix(')')) {
        let k: usize = rest.parse().map_err(|_| GridError::Format("bad time slice index".into()))?;
        return Ok(DomainTag::TimeSlice(k));
    }
    Err(GridError::Format(format!("unknown domain_tag {tok:?}")))
}

/// Write a field: one UTF-8 header line, then raw little-endian f64 values.
pub fn write_field(f: &Field, path: &Path) -> Result<()> {
    let spec = f.spec();
    let header = format!(
        "version=1 n={} A={} T={} Nx={} Nt={} domain_tag={} dtype=f64le count={}\n",
        spec.n(),
        format_f64_list(spec.half_widths()),
        spec.t_max(),
        format_usize_list(spec.nx_all()),
        spec.nt(),
        tag_to_token(f.tag()),
        f.len()
    );
    let mut buf = Vec::with_capacity(header.len() + 8 * f.len());
    buf.extend_from_slice(header.as_bytes());
    for v in f.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Read a field written by [`write_field`]. The header does not carry the
/// observation offset, so `gamma` may be supplied; it defaults to `A_1`.
pub fn read_field(path: &Path, gamma: Option<f64>) -> Result<Field> {
    let mut raw = Vec::new();
    fs::File::open(path)?.read_to_end(&mut raw)?;
    let nl = raw
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| GridError::Format("missing header line".into()))?;
    let header = std::str::from_utf8(&raw[..nl]).map_err(|_| GridError::Format("header not UTF-8".into()))?;
    let mut kv = std::collections::HashMap::new();
    for tok in header.split_whitespace() {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| GridError::Format(format!("bad header token {tok:?}")))?;
        kv.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| -> Result<&String> {
        kv.get(k).ok_or_else(|| GridError::Format(format!("missing header key {k}")))
    };
    if get("version")? != "1" {
        return Err(GridError::Format(format!("unsupported version {}", get("version")?)));
    }
    if get("dtype")? != "f64le" {
        return Err(GridError::Format(format!("unsupported dtype {}", get("dtype")?)));
    }
    let n: usize = get("n")?.parse().map_err(|_| GridError::Format("bad n".into()))?;
    let a: Vec<f64> = get("A")?
        .split(',')
        .map(|s| s.parse::<f64>().map_err(|_| GridError::Format("bad A".into())))
        .collect::<Result<_>>()?;
    let t_max: f64 = get("T")?.parse().map_err(|_| GridError::Format("bad T".into()))?;
    let nx: Vec<usize> = get("Nx")?
        .split(',')
        .map(|s| s.parse::<usize>().map_err(|_| GridError::Format("bad Nx".into())))
        .collect::<Result<_>>()?;
    let nt: usize = get("Nt")?.parse().map_err(|_| GridError::Format("bad Nt".into()))?;
    let count: usize = get("count")?.parse().map_err(|_| GridError::Format("bad count".into()))?;
    let tag = tag_from_token(get("domain_tag")?)?;
    let g = gamma.unwrap_or(a[0]);
    let spec = Arc::new(GridSpec::new(n, &a, t_max, &nx, nt, g)?);
    let expected = domain_len(&spec, tag)?;
    if count != expected {
        return Err(GridError::Format(format!(
            "count {count} does not match domain size {expected} for {tag}"
        )));
    }
    let body = &raw[nl + 1..];
    if body.len() != 8 * count {
        return Err(GridError::Format(format!(
            "payload holds {} bytes, expected {}",
            body.len(),
            8 * count
        )));
    }
    let mut values = Vec::with_capacity(count);
    for ch in body.chunks_exact(8) {
        values.push(f64::from_le_bytes(ch.try_into().expect("chunk of 8")));
    }
    Field::from_values(spec, tag, values)
}
