//! Geometric graphs and trajectories, rigid motions, and the
//! translation-removing projection onto the zero-mean subspace.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::exec::seeded_rng;
use crate::numerics::{center_rows, Tensor};

pub type Mat3 = [[f64; 3]; 3];
pub type Vec3 = [f64; 3];

pub const IDENTITY3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Node features, one coordinate set, and directed edges.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometricGraph {
    pub features: Tensor,
    pub coords: Tensor,
    pub edges: Vec<(usize, usize)>,
}

impl GeometricGraph {
    pub fn new(features: Tensor, coords: Tensor, edges: Vec<(usize, usize)>) -> Result<Self> {
        let n = coords.rows();
        if coords.shape() != [n, 3] {
            return Err(Error::Shape(format!(
                "graph coords must be N×3, got {:?}",
                coords.shape()
            )));
        }
        check_features(&features, n)?;
        check_edges(&edges, n)?;
        Ok(Self {
            features,
            coords,
            edges,
        })
    }

    pub fn into_trajectory(self) -> GeometricTrajectory {
        let n = self.coords.rows();
        GeometricTrajectory {
            features: self.features,
            coords: self.coords.reshape(&[n, 1, 3]).expect("same element count"),
            edges: self.edges,
        }
    }
}

/// Node features, per-node coordinate sequences over `T` frames
/// (stored `N×T×3`), and directed edges.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometricTrajectory {
    pub features: Tensor,
    pub coords: Tensor,
    pub edges: Vec<(usize, usize)>,
}

impl GeometricTrajectory {
    pub fn new(features: Tensor, coords: Tensor, edges: Vec<(usize, usize)>) -> Result<Self> {
        let s = coords.shape();
        if s.len() != 3 || s[2] != 3 || s[1] == 0 {
            return Err(Error::Shape(format!(
                "trajectory coords must be N×T×3 with T ≥ 1, got {s:?}"
            )));
        }
        let n = s[0];
        check_features(&features, n)?;
        check_edges(&edges, n)?;
        Ok(Self {
            features,
            coords,
            edges,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.coords.shape()[0]
    }

    pub fn n_frames(&self) -> usize {
        self.coords.shape()[1]
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Copy with the coordinates replaced (same shape required).
    pub fn with_coords(&self, coords: Tensor) -> Result<Self> {
        self.coords.check_same_shape(&coords)?;
        Ok(Self {
            features: self.features.clone(),
            coords,
            edges: self.edges.clone(),
        })
    }

    /// Frame `t` as an `N×3` graph.
    pub fn frame(&self, t: usize) -> GeometricGraph {
        let (n, tt) = (self.n_nodes(), self.n_frames());
        let c = Tensor::from_fn(&[n, 3], |k| {
            let (i, d) = (k / 3, k % 3);
            self.coords.data()[(i * tt + t) * 3 + d]
        });
        GeometricGraph {
            features: self.features.clone(),
            coords: c,
            edges: self.edges.clone(),
        }
    }
}

fn check_features(features: &Tensor, n: usize) -> Result<()> {
    if features.shape().len() != 2 || features.rows() != n || features.cols() == 0 {
        return Err(Error::Shape(format!(
            "features must be N×H with N = {n} and H > 0, got {:?}",
            features.shape()
        )));
    }
    Ok(())
}

fn check_edges(edges: &[(usize, usize)], n: usize) -> Result<()> {
    for &(i, j) in edges {
        if i >= n || j >= n {
            return Err(Error::Shape(format!("edge ({i}, {j}) out of range for {n} nodes")));
        }
        if i == j {
            return Err(Error::Shape(format!("self-loop ({i}, {i}) not allowed")));
        }
    }
    Ok(())
}

/// All ordered pairs `(i, j)`, `i ≠ j`.
pub fn fully_connected(n: usize) -> Vec<(usize, usize)> {
    let mut e = Vec::with_capacity(n * n.saturating_sub(1));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                e.push((i, j));
            }
        }
    }
    e
}

/// Proper rotation plus translation: `x ↦ R·x + d`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidMotion {
    rotation: Mat3,
    translation: Vec3,
}

impl RigidMotion {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let rtr = mat_mul(&transpose(&rotation), &rotation);
        let mut dev = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                dev = dev.max((rtr[i][j] - IDENTITY3[i][j]).abs());
            }
        }
        let det = determinant(&rotation);
        if dev > 1e-10 || (det - 1.0).abs() > 1e-10 {
            return Err(Error::Invalid(format!(
                "not a proper rotation: ‖RᵀR − I‖ = {dev:.3e}, det = {det}"
            )));
        }
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("translation".into()));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self {
            rotation: IDENTITY3,
            translation: [0.0; 3],
        }
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    /// Random rotation and a translation with standard-normal entries scaled by `scale`.
    pub fn random(seed: u64, scale: f64) -> Self {
        let mut rng = seeded_rng(seed ^ 0x005E_ED0F_D15C);
        let d = [0; 3].map(|_| scale * rng.sample::<f64, _>(StandardNormal));
        Self {
            rotation: random_rotation(seed),
            translation: d,
        }
    }

    /// `self ∘ first`: apply `first`, then `self`.
    pub fn after(&self, first: &RigidMotion) -> RigidMotion {
        let r = mat_mul(&self.rotation, &first.rotation);
        let rd = mat_vec(&self.rotation, &first.translation);
        RigidMotion {
            rotation: r,
            translation: [
                rd[0] + self.translation[0],
                rd[1] + self.translation[1],
                rd[2] + self.translation[2],
            ],
        }
    }

    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        let r = mat_vec(&self.rotation, p);
        [
            r[0] + self.translation[0],
            r[1] + self.translation[1],
            r[2] + self.translation[2],
        ]
    }

    /// Maps every trailing 3-vector of `coords` as a point.
    pub fn apply_points(&self, coords: &Tensor) -> Tensor {
        map_rows3(coords, |p| self.apply_point(p))
    }

    /// Rotates every trailing 3-vector of `v` (no translation).
    pub fn apply_vectors(&self, v: &Tensor) -> Tensor {
        rotate_vectors(v, &self.rotation)
    }
}

/// Applies `g` to every coordinate; features and edges are untouched.
pub fn apply_rigid_motion(traj: &GeometricTrajectory, g: &RigidMotion) -> GeometricTrajectory {
    GeometricTrajectory {
        features: traj.features.clone(),
        coords: g.apply_points(&traj.coords),
        edges: traj.edges.clone(),
    }
}

pub fn rotate_vectors(v: &Tensor, r: &Mat3) -> Tensor {
    map_rows3(v, |p| mat_vec(r, p))
}

pub fn translate(v: &Tensor, d: &Vec3) -> Tensor {
    map_rows3(v, |p| [p[0] + d[0], p[1] + d[1], p[2] + d[2]])
}

fn map_rows3(v: &Tensor, f: impl Fn(&Vec3) -> Vec3) -> Tensor {
    assert_eq!(v.len() % 3, 0, "trailing dimension must be 3");
    let mut out = v.clone();
    for ch in out.data_mut().chunks_mut(3) {
        let m = f(&[ch[0], ch[1], ch[2]]);
        ch.copy_from_slice(&m);
    }
    out
}

/// Haar-random rotation: QR of a standard Gaussian 3×3 matrix with a
/// positive-diagonal `R` factor, with one column negated if `det = −1`.
pub fn random_rotation(seed: u64) -> Mat3 {
    let mut rng = seeded_rng(seed);
    let mut cols = [[0.0f64; 3]; 3];
    for c in cols.iter_mut() {
        for v in c.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
    }
    // Modified Gram-Schmidt on the columns; equals QR with diag(R) > 0.
    let mut q = [[0.0f64; 3]; 3];
    for k in 0..3 {
        let mut v = cols[k];
        for qj in q.iter().take(k) {
            let d = dot(qj, &v);
            for i in 0..3 {
                v[i] -= d * qj[i];
            }
        }
        let n = dot(&v, &v).sqrt();
        q[k] = [v[0] / n, v[1] / n, v[2] / n];
    }
    // Re-orthogonalize once; keeps ‖QᵀQ − I‖ at rounding level.
    for k in 0..3 {
        let mut v = q[k];
        for j in 0..k {
            let d = dot(&q[j], &v);
            for i in 0..3 {
                v[i] -= d * q[j][i];
            }
        }
        let n = dot(&v, &v).sqrt();
        q[k] = [v[0] / n, v[1] / n, v[2] / n];
    }
    let mut m = [[0.0; 3]; 3];
    for (c, col) in q.iter().enumerate() {
        for r in 0..3 {
            m[r][c] = col[r];
        }
    }
    if determinant(&m) < 0.0 {
        for row in m.iter_mut() {
            row[2] = -row[2];
        }
    }
    m
}

/// Rotation by `angle` radians about the unit `axis`.
pub fn axis_angle(axis: &Vec3, angle: f64) -> Mat3 {
    let n = dot(axis, axis).sqrt();
    let [x, y, z] = [axis[0] / n, axis[1] / n, axis[2] / n];
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

/// Arithmetic mean of the rows of an `N×3` (or `N×T×3`) coordinate tensor.
pub fn center_of_mass(coords: &Tensor) -> Result<Vec3> {
    let rows = coords.len() / 3;
    if rows == 0 || !coords.len().is_multiple_of(3) {
        return Err(Error::Invalid("center of mass of an empty node set".into()));
    }
    let mut m = [0.0; 3];
    for ch in coords.data().chunks(3) {
        for d in 0..3 {
            m[d] += ch[d];
        }
    }
    Ok(m.map(|v| v / rows as f64))
}

/// Subtracts the mean over all `T·N` (node, frame) rows. This is the
/// projection `P = I₃ ⊗ (I − 𝟏𝟏ᵀ/TN)`.
pub fn com_project(coords: &Tensor) -> Tensor {
    let rows = coords.len() / 3;
    Tensor::from_parts(coords.shape().to_vec(), center_rows(coords.data(), rows, 3))
}

/// Squared edge lengths `‖x_i − x_j‖²` of an `N×3` coordinate tensor.
pub fn pairwise_sq_dist(coords: &Tensor, edges: &[(usize, usize)]) -> Result<Vec<f64>> {
    let n = coords.len() / 3;
    check_edges(edges, n)?;
    let x = coords.data();
    Ok(edges
        .iter()
        .map(|&(i, j)| (0..3).map(|d| (x[i * 3 + d] - x[j * 3 + d]).powi(2)).sum())
        .collect())
}

pub fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn mat_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    [dot(&m[0], v), dot(&m[1], v), dot(&m[2], v)]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

pub fn determinant(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}
