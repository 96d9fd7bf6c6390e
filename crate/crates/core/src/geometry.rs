//! Point clouds, camera rotations and set distances.
//!
//! Frame convention: world `+z` is up. A viewpoint at azimuth `a` and
//! elevation `e` puts the camera at `d·(cos e cos a, cos e sin a, sin e)`
//! looking at the origin. Camera coordinates are `x` right, `y` down and `z`
//! forward, so azimuth 0 / elevation 0 sits on the `+x` axis.

use std::f64::consts::PI;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::assignment;
use crate::diffcore::{CustomOp, DiffError, Tensor, Var};

/// Camera distance from the origin shared by every viewpoint.
pub const CAMERA_DISTANCE: f64 = 2.0;

/// Largest cloud solved with the exact assignment method in [`emd`].
pub const EMD_EXACT_LIMIT: usize = 256;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("clouds differ in size: {0} vs {1}")]
    SizeMismatch(usize, usize),
    #[error("{0} colors for {1} points")]
    ColorCount(usize, usize),
    #[error("{0} labels for {1} points")]
    LabelCount(usize, usize),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Unordered set of 3D points with optional per-point RGB and part labels.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub colors: Option<Vec<[f64; 3]>>,
    pub labels: Option<Vec<u32>>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        Self {
            points,
            colors: None,
            labels: None,
        }
    }

    pub fn with_colors(points: Vec<[f64; 3]>, colors: Vec<[f64; 3]>) -> Result<Self, GeometryError> {
        if colors.len() != points.len() {
            return Err(GeometryError::ColorCount(colors.len(), points.len()));
        }
        Ok(Self {
            points,
            colors: Some(colors),
            labels: None,
        })
    }

    pub fn with_labels(mut self, labels: Vec<u32>) -> Result<Self, GeometryError> {
        if labels.len() != self.points.len() {
            return Err(GeometryError::LabelCount(labels.len(), self.points.len()));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Positions as an `[N, 3]` tensor.
    pub fn positions_tensor(&self) -> Tensor {
        Tensor::from_rows(&self.points)
    }

    pub fn colors_tensor(&self) -> Option<Tensor> {
        self.colors.as_ref().map(|c| Tensor::from_rows(c))
    }

    /// Builds a cloud from `[N, 3]` position (and optional color) tensors.
    pub fn from_tensors(positions: &Tensor, colors: Option<&Tensor>) -> Result<Self, GeometryError> {
        let rows = |t: &Tensor| -> Result<Vec<[f64; 3]>, GeometryError> {
            if t.ndim() != 2 || t.shape()[1] != 3 {
                return Err(DiffError::ShapeMismatch {
                    op: "point cloud",
                    lhs: t.shape().to_vec(),
                    rhs: vec![t.len() / 3, 3],
                }
                .into());
            }
            Ok(t.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
        };
        let points = rows(positions)?;
        match colors {
            Some(c) => Self::with_colors(points, rows(c)?),
            None => Ok(Self::new(points)),
        }
    }

    /// Applies `R·p` to every point.
    pub fn rotated(&self, r: &RigidRotation) -> Self {
        Self {
            points: self.points.iter().map(|p| r.apply(*p)).collect(),
            colors: self.colors.clone(),
            labels: self.labels.clone(),
        }
    }

    /// Selects points by index, carrying colors and labels along.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            colors: self
                .colors
                .as_ref()
                .map(|c| indices.iter().map(|&i| c[i]).collect()),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }
}

/// Camera placement on the viewing sphere, angles in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Viewpoint {
    pub azimuth: f64,
    pub elevation: f64,
    pub distance: f64,
}

impl Viewpoint {
    /// A viewpoint at the shared camera distance, with azimuth wrapped into `[0, 360)`.
    pub fn new(azimuth: f64, elevation: f64) -> Self {
        Self {
            azimuth: wrap_degrees(azimuth),
            elevation,
            distance: CAMERA_DISTANCE,
        }
    }

    /// Unit vector from the origin towards the camera.
    pub fn direction(&self) -> [f64; 3] {
        let (a, e) = (self.azimuth.to_radians(), self.elevation.to_radians());
        [e.cos() * a.cos(), e.cos() * a.sin(), e.sin()]
    }

    /// Viewpoint whose camera direction is `dir` (need not be normalized).
    pub fn from_direction(dir: [f64; 3]) -> Self {
        let n = norm(dir);
        let el = (dir[2] / n).clamp(-1.0, 1.0).asin().to_degrees();
        let az = dir[1].atan2(dir[0]).to_degrees();
        Self::new(az, el)
    }
}

/// Wraps an angle in degrees into `[0, 360)`.
pub fn wrap_degrees(a: f64) -> f64 {
    let w = a.rem_euclid(360.0);
    if w >= 360.0 {
        0.0
    } else {
        w
    }
}

/// Signed smallest difference `a - b` in degrees, in `(-180, 180]`.
pub fn angle_difference(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    if d > 180.0 {
        d - 360.0
    } else {
        d
    }
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// A proper rotation (orthonormal, determinant +1).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidRotation(pub [[f64; 3]; 3]);

impl RigidRotation {
    pub fn identity() -> Self {
        Self([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    /// Rotation by `degrees` about world `+z`.
    pub fn about_z(degrees: f64) -> Self {
        let (s, c) = degrees.to_radians().sin_cos();
        Self([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    }

    /// Rotation by `degrees` about world `+x`.
    pub fn about_x(degrees: f64) -> Self {
        let (s, c) = degrees.to_radians().sin_cos();
        Self([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.0;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2],
            m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2],
        ]
    }

    pub fn transpose(&self) -> Self {
        let m = &self.0;
        Self([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn compose(&self, other: &Self) -> Self {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.0[i][k] * other.0[k][j]).sum();
            }
        }
        Self(out)
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Largest entry of `RᵀR − I`.
    pub fn orthonormality_error(&self) -> f64 {
        let p = self.transpose().compose(self);
        let mut err = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                err = err.max((p.0[i][j] - target).abs());
            }
        }
        err
    }

    /// Rotation angle in degrees.
    pub fn angle_degrees(&self) -> f64 {
        let tr = self.0[0][0] + self.0[1][1] + self.0[2][2];
        ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees()
    }
}

/// World-to-camera rotation for `v`; rows are camera right, down and forward.
pub fn view_rotation(v: &Viewpoint) -> RigidRotation {
    let (sa, ca) = v.azimuth.to_radians().sin_cos();
    let (se, ce) = v.elevation.to_radians().sin_cos();
    RigidRotation([
        [-sa, ca, 0.0],
        [se * ca, se * sa, -ce],
        [-ce * ca, -ce * sa, -se],
    ])
}

/// `R(v)·p + (0, 0, d)` for every point.
pub fn transform_to_camera(cloud: &PointCloud, v: &Viewpoint) -> PointCloud {
    let r = view_rotation(v);
    PointCloud {
        points: cloud
            .points
            .iter()
            .map(|&p| {
                let q = r.apply(p);
                [q[0], q[1], q[2] + v.distance]
            })
            .collect(),
        colors: cloud.colors.clone(),
        labels: cloud.labels.clone(),
    }
}

/// Differentiable `[3, 3]` world-to-camera rotation from azimuth/elevation scalars in degrees.
pub fn view_rotation_var<'t>(azimuth: Var<'t>, elevation: Var<'t>) -> Result<Var<'t>, DiffError> {
    let tape = azimuth.tape();
    let a = azimuth.reshape(&[])?.mul_scalar(PI / 180.0);
    let e = elevation.reshape(&[])?.mul_scalar(PI / 180.0);
    let (sa, ca, se, ce) = (a.sin(), a.cos(), e.sin(), e.cos());
    let zero = tape.scalar(0.0);
    let entries = [
        sa.neg(),
        ca,
        zero,
        se.mul(ca)?,
        se.mul(sa)?,
        ce.neg(),
        ce.mul(ca)?.neg(),
        ce.mul(sa)?.neg(),
        se.neg(),
    ];
    tape.stack_scalars(&entries)?.reshape(&[3, 3])
}

/// Differentiable camera-frame coordinates of `[N, 3]` points.
pub fn transform_to_camera_var<'t>(
    points: Var<'t>,
    azimuth: Var<'t>,
    elevation: Var<'t>,
    distance: f64,
) -> Result<Var<'t>, DiffError> {
    let tape = points.tape();
    let r = view_rotation_var(azimuth, elevation)?;
    let rotated = points.matmul(r.t()?)?;
    let offset = tape.constant(Tensor::from_vec(vec![0.0, 0.0, distance]));
    rotated.add(offset)
}

/// Squared distance from each point of `a` to its nearest point in `b`, with
/// the (lowest-index) nearest partner.
fn nearest_sq(a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<usize>, Vec<f64>, Vec<usize>) {
    let (n, m) = (a.len() / 3, b.len() / 3);
    let mut da = vec![f64::INFINITY; n];
    let mut ia = vec![0usize; n];
    let mut db = vec![f64::INFINITY; m];
    let mut ib = vec![0usize; m];
    for i in 0..n {
        let (x, y, z) = (a[3 * i], a[3 * i + 1], a[3 * i + 2]);
        let mut best = f64::INFINITY;
        let mut best_j = 0;
        for j in 0..m {
            let dx = x - b[3 * j];
            let dy = y - b[3 * j + 1];
            let dz = z - b[3 * j + 2];
            let d = dx * dx + dy * dy + dz * dz;
            if d < best {
                best = d;
                best_j = j;
            }
            if d < db[j] {
                db[j] = d;
                ib[j] = i;
            }
        }
        da[i] = best;
        ia[i] = best_j;
    }
    (da, ia, db, ib)
}

/// Chamfer distance: summed squared nearest-neighbour distances in both directions.
pub fn chamfer(p: &PointCloud, q: &PointCloud) -> Result<f64, GeometryError> {
    if p.is_empty() || q.is_empty() {
        return Err(GeometryError::EmptyCloud);
    }
    let a: Vec<f64> = p.points.iter().flatten().copied().collect();
    let b: Vec<f64> = q.points.iter().flatten().copied().collect();
    let (da, _, db, _) = nearest_sq(&a, &b);
    Ok(da.iter().sum::<f64>() + db.iter().sum::<f64>())
}

struct ChamferOp {
    nn_pq: Vec<usize>,
    nn_qp: Vec<usize>,
}

impl CustomOp for ChamferOp {
    fn name(&self) -> &'static str {
        "chamfer"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let g = grad.item();
        let (p, q) = (inputs[0], inputs[1]);
        let mut gp = Tensor::zeros(p.shape());
        let mut gq = Tensor::zeros(q.shape());
        let (pd, qd) = (p.data(), q.data());
        {
            let gpd = gp.data_mut();
            let gqd = gq.data_mut();
            for (i, &j) in self.nn_pq.iter().enumerate() {
                for c in 0..3 {
                    let d = 2.0 * g * (pd[3 * i + c] - qd[3 * j + c]);
                    gpd[3 * i + c] += d;
                    gqd[3 * j + c] -= d;
                }
            }
            for (j, &i) in self.nn_qp.iter().enumerate() {
                for c in 0..3 {
                    let d = 2.0 * g * (qd[3 * j + c] - pd[3 * i + c]);
                    gqd[3 * j + c] += d;
                    gpd[3 * i + c] -= d;
                }
            }
        }
        vec![Some(gp), Some(gq)]
    }
}

/// Differentiable Chamfer distance between `[N, 3]` and `[M, 3]` point sets.
///
/// Gradients follow the argmin partner of every point (lowest index on ties).
pub fn chamfer_var<'t>(p: Var<'t>, q: Var<'t>) -> Result<Var<'t>, DiffError> {
    let (pv, qv) = (p.value(), q.value());
    for v in [&pv, &qv] {
        if v.ndim() != 2 || v.shape()[1] != 3 {
            return Err(DiffError::ShapeMismatch {
                op: "chamfer",
                lhs: pv.shape().to_vec(),
                rhs: qv.shape().to_vec(),
            });
        }
        if v.shape()[0] == 0 {
            return Err(DiffError::Invalid {
                op: "chamfer",
                msg: "empty point cloud".into(),
            });
        }
    }
    let (da, ia, db, ib) = nearest_sq(pv.data(), qv.data());
    let value = da.iter().sum::<f64>() + db.iter().sum::<f64>();
    let op = Rc::new(ChamferOp { nn_pq: ia, nn_qp: ib });
    Ok(p.tape().custom(op, &[p, q], Tensor::scalar(value)))
}

/// Chamfer distance composed from tape primitives (pairwise matrix + min
/// reductions). Quadratic memory; used to cross-check the fused kernel.
pub fn chamfer_reference<'t>(p: Var<'t>, q: Var<'t>) -> Result<Var<'t>, DiffError> {
    let (n, m) = (p.shape()[0], q.shape()[0]);
    let pe = p.reshape(&[n, 1, 3])?;
    let qe = q.reshape(&[1, m, 3])?;
    let d = pe.sub(qe)?.square().sum_axis(2)?;
    let forward = d.min_last()?.0.sum();
    let backward = d.t()?.min_last()?.0.sum();
    forward.add(backward)
}

/// Earth mover's distance with Euclidean ground cost.
///
/// Exact for clouds of at most [`EMD_EXACT_LIMIT`] points; larger clouds use
/// the auction solver with a certified 1% optimality gap.
pub fn emd(p: &PointCloud, q: &PointCloud) -> Result<EmdResult, GeometryError> {
    if p.len() != q.len() {
        return Err(GeometryError::SizeMismatch(p.len(), q.len()));
    }
    if p.len() > EMD_EXACT_LIMIT {
        emd_auction(p, q, 0.01)
    } else {
        emd_exact(p, q)
    }
}

/// EMD value and how it was obtained.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmdResult {
    pub value: f64,
    pub exact: bool,
    /// Certified relative optimality gap (0 for the exact solver).
    pub gap: f64,
}

fn cost_matrix(p: &PointCloud, q: &PointCloud) -> Vec<f64> {
    let mut cost = Vec::with_capacity(p.len() * q.len());
    for a in &p.points {
        for b in &q.points {
            cost.push(norm([a[0] - b[0], a[1] - b[1], a[2] - b[2]]));
        }
    }
    cost
}

pub fn emd_exact(p: &PointCloud, q: &PointCloud) -> Result<EmdResult, GeometryError> {
    if p.len() != q.len() {
        return Err(GeometryError::SizeMismatch(p.len(), q.len()));
    }
    let n = p.len();
    let cost = cost_matrix(p, q);
    let a = assignment::hungarian(n, &cost);
    let value = a.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Ok(EmdResult {
        value,
        exact: true,
        gap: 0.0,
    })
}

pub fn emd_auction(p: &PointCloud, q: &PointCloud, max_gap: f64) -> Result<EmdResult, GeometryError> {
    if p.len() != q.len() {
        return Err(GeometryError::SizeMismatch(p.len(), q.len()));
    }
    let r = assignment::auction(p.len(), &cost_matrix(p, q), max_gap);
    Ok(EmdResult {
        value: r.cost,
        exact: false,
        gap: r.gap,
    })
}

/// Splits a cloud at the xz-plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Reflection {
    /// Indices of points with `y >= 0`.
    pub positive: Vec<usize>,
    /// Indices of points with `y < 0`.
    pub negative: Vec<usize>,
}

impl Reflection {
    /// True when either half is empty.
    pub fn degenerate(&self) -> bool {
        self.positive.is_empty() || self.negative.is_empty()
    }
}

pub fn partition_xz(points: &[[f64; 3]]) -> Reflection {
    let (mut positive, mut negative) = (Vec::new(), Vec::new());
    for (i, p) in points.iter().enumerate() {
        if p[1] >= 0.0 {
            positive.push(i);
        } else {
            negative.push(i);
        }
    }
    Reflection { positive, negative }
}

/// Returns the `y >= 0` half and the mirror image of the `y < 0` half, plus
/// a flag set when either half is empty.
pub fn reflect_xz(cloud: &PointCloud) -> (PointCloud, PointCloud, bool) {
    let split = partition_xz(&cloud.points);
    let plus = cloud.select(&split.positive);
    let mut minus = cloud.select(&split.negative);
    for p in &mut minus.points {
        p[1] = -p[1];
    }
    (plus, minus, split.degenerate())
}

/// Great-circle angle between the two camera directions, in degrees.
pub fn angular_error(a: &Viewpoint, b: &Viewpoint) -> f64 {
    let (u, v) = (a.direction(), b.direction());
    let dot = u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
    let cross = [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ];
    norm(cross).atan2(dot).to_degrees()
}

/// Uniform sampler over azimuth `[0, 360)` and a fixed elevation band.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewSampler {
    pub elevation_min: f64,
    pub elevation_max: f64,
}

impl Default for ViewSampler {
    fn default() -> Self {
        Self {
            elevation_min: -20.0,
            elevation_max: 40.0,
        }
    }
}

impl ViewSampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Viewpoint {
        let azimuth = rng.gen_range(0.0..360.0);
        let elevation = if self.elevation_max > self.elevation_min {
            rng.gen_range(self.elevation_min..=self.elevation_max)
        } else {
            self.elevation_min
        };
        Viewpoint::new(azimuth, elevation)
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.elevation_min + self.elevation_max)
    }

    pub fn half_range(&self) -> f64 {
        0.5 * (self.elevation_max - self.elevation_min)
    }
}

/// Draws one viewpoint from `sampler`.
pub fn sample_random_viewpoint<R: Rng + ?Sized>(rng: &mut R, sampler: &ViewSampler) -> Viewpoint {
    sampler.sample(rng)
}
