//! State representations and the small amount of rigid-body kinematics the
//! rest of the crate needs.
//!
//! Conventions used everywhere:
//!
//! * quaternions are scalar-first `[w, x, y, z]`;
//! * angular velocities are expressed in the world frame;
//! * quaternion rates follow `q̇ = ½ (0, ω) ⊗ q`, which fixes the 4×3 matrix
//!   returned by [`quat_rate_matrix`].
//!
//! The end configuration vector is `r = [p1; q1; p2; q2] ∈ R¹⁴` and the end
//! velocity vector is `ν = [v1; ω1; v2; ω2] ∈ R¹²`.

use nalgebra::{DMatrix, DVector, Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::datasets::DataTuple;
use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Minimum separation between consecutive points of a valid state (meters).
pub const MIN_SEPARATION: f64 = 1e-9;

/// Tolerance on `‖q‖ − 1` accepted by [`quat_rate_and_c`].
pub const UNIT_QUAT_TOL: f64 = 1e-6;

pub const IDENTITY_QUAT: [f64; 4] = [1.0, 0.0, 0.0, 0.0];

pub fn quat_to_na(q: &[f64; 4]) -> UnitQuaternion<f64> {
    UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]))
}

pub fn quat_from_na(q: &UnitQuaternion<f64>) -> [f64; 4] {
    [q.w, q.i, q.j, q.k]
}

pub fn quat_norm(q: &[f64; 4]) -> f64 {
    q.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn normalize_quat(q: [f64; 4]) -> [f64; 4] {
    let n = quat_norm(&q);
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Hamilton product `a ⊗ b`, scalar-first.
pub fn quat_mul(a: &[f64; 4], b: &[f64; 4]) -> [f64; 4] {
    let [aw, ax, ay, az] = *a;
    let [bw, bx, by, bz] = *b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

/// Rotation of `v` by the unit quaternion `q`.
pub fn quat_rotate(q: &[f64; 4], v: &Vec3) -> Vec3 {
    quat_to_na(q) * v
}

/// The 4×3 matrix `M(q)` with `q̇ = M(q) ω` for a world-frame `ω`.
pub fn quat_rate_matrix(q: &[f64; 4]) -> nalgebra::Matrix4x3<f64> {
    let [w, x, y, z] = *q;
    // ½ (0, ω) ⊗ q = ½ (−ω·v, w ω + ω × v)
    nalgebra::Matrix4x3::new(
        -x, -y, -z, //
        w, z, -y, //
        -z, w, x, //
        y, -x, w,
    ) * 0.5
}

/// Advances `q` by a constant world-frame angular velocity over `dt`.
///
/// Uses the exact exponential map so constant-`ω` motions land exactly on
/// their target orientation; to first order this is `q + M(q) ω dt`.
pub fn integrate_quat(q: &[f64; 4], omega: &Vec3, dt: f64) -> [f64; 4] {
    let half = omega * (0.5 * dt);
    let angle = half.norm();
    let dq = if angle < 1e-300 {
        IDENTITY_QUAT
    } else {
        let s = angle.sin() / angle;
        [angle.cos(), half.x * s, half.y * s, half.z * s]
    };
    normalize_quat(quat_mul(&dq, q))
}

/// Constant world-frame angular velocity that rotates `from` onto `to` in
/// time `duration`.
pub fn angular_velocity_between(from: &[f64; 4], to: &[f64; 4], duration: f64) -> Vec3 {
    let delta = quat_to_na(to) * quat_to_na(from).inverse();
    delta.scaled_axis() / duration
}

/// Gripper configuration `r = [p1; q1; p2; q2]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndPose {
    pub p1: Vec3,
    pub q1: [f64; 4],
    pub p2: Vec3,
    pub q2: [f64; 4],
}

impl EndPose {
    pub const DIM: usize = 14;

    pub fn to_vector(&self) -> DVector<f64> {
        let mut r = DVector::zeros(Self::DIM);
        r.rows_mut(0, 3).copy_from(&self.p1);
        r.rows_mut(3, 4).copy_from_slice(&self.q1);
        r.rows_mut(7, 3).copy_from(&self.p2);
        r.rows_mut(10, 4).copy_from_slice(&self.q2);
        r
    }

    pub fn from_slice(r: &[f64]) -> Result<Self> {
        if r.len() != Self::DIM {
            return Err(Error::DimensionMismatch {
                expected: Self::DIM,
                got: r.len(),
            });
        }
        Ok(Self {
            p1: Vec3::new(r[0], r[1], r[2]),
            q1: [r[3], r[4], r[5], r[6]],
            p2: Vec3::new(r[7], r[8], r[9]),
            q2: [r[10], r[11], r[12], r[13]],
        })
    }

    pub fn separation(&self) -> f64 {
        (self.p2 - self.p1).norm()
    }

    /// Moves the ends by `ν` for `dt` seconds: `p += v dt`, quaternions by the
    /// exponential map of the world-frame `ω`.
    pub fn advanced(&self, nu: &EndVelocity, dt: f64) -> Self {
        Self {
            p1: self.p1 + nu.v1 * dt,
            q1: integrate_quat(&self.q1, &nu.w1, dt),
            p2: self.p2 + nu.v2 * dt,
            q2: integrate_quat(&self.q2, &nu.w2, dt),
        }
    }

    pub fn translated(&self, t: &Vec3) -> Self {
        Self {
            p1: self.p1 + t,
            p2: self.p2 + t,
            ..self.clone()
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }
}

/// End velocities `ν = [v1; ω1; v2; ω2]`, world frame.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EndVelocity {
    pub v1: Vec3,
    pub w1: Vec3,
    pub v2: Vec3,
    pub w2: Vec3,
}

impl EndVelocity {
    pub const DIM: usize = 12;

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_slice(nu: &[f64]) -> Result<Self> {
        if nu.len() != Self::DIM {
            return Err(Error::DimensionMismatch {
                expected: Self::DIM,
                got: nu.len(),
            });
        }
        let b = |i: usize| Vec3::new(nu[i], nu[i + 1], nu[i + 2]);
        Ok(Self {
            v1: b(0),
            w1: b(3),
            v2: b(6),
            w2: b(9),
        })
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let mut nu = DVector::zeros(Self::DIM);
        for (i, block) in [&self.v1, &self.w1, &self.v2, &self.w2].iter().enumerate() {
            nu.rows_mut(3 * i, 3).copy_from(*block);
        }
        nu
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }
}

/// Checks both quaternions are unit within [`UNIT_QUAT_TOL`].
pub fn check_unit_quats(ends: &EndPose) -> Result<()> {
    for q in [&ends.q1, &ends.q2] {
        let n = quat_norm(q);
        if !n.is_finite() || (n - 1.0).abs() > UNIT_QUAT_TOL {
            return Err(Error::NonUnitQuaternion(n));
        }
    }
    Ok(())
}

/// Returns `(M(q1), M(q2), C(r))` with `ṙ = C(r) ν`.
pub fn quat_rate_and_c(
    ends: &EndPose,
) -> Result<(nalgebra::Matrix4x3<f64>, nalgebra::Matrix4x3<f64>, DMatrix<f64>)> {
    check_unit_quats(ends)?;
    let m1 = quat_rate_matrix(&ends.q1);
    let m2 = quat_rate_matrix(&ends.q2);
    let mut c = DMatrix::zeros(EndPose::DIM, EndVelocity::DIM);
    c.view_mut((0, 0), (3, 3)).copy_from(&Matrix3::identity());
    c.view_mut((3, 3), (4, 3)).copy_from(&m1);
    c.view_mut((7, 6), (3, 3)).copy_from(&Matrix3::identity());
    c.view_mut((10, 9), (4, 3)).copy_from(&m2);
    Ok((m1, m2, c))
}

/// Diagonal of the scale matrix `T = diag[I₃, L I₃, I₃, L I₃]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleMatrix {
    length: f64,
}

impl ScaleMatrix {
    pub fn new(length: f64) -> Result<Self> {
        if !(length > 0.0 && length.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "scale matrix needs a positive length, got {length}"
            )));
        }
        Ok(Self { length })
    }

    /// `T = I`, used by the un-normalized ablation.
    pub fn identity() -> Self {
        Self { length: 1.0 }
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    /// `T_i` for `i = 0..12`.
    pub fn entry(&self, i: usize) -> f64 {
        if (3..6).contains(&i) || (9..12).contains(&i) {
            self.length
        } else {
            1.0
        }
    }

    pub fn diagonal(&self) -> [f64; 12] {
        std::array::from_fn(|i| self.entry(i))
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_row_slice(&self.diagonal()))
    }

    /// `T ν` as a plain array.
    pub fn apply(&self, nu: &[f64]) -> [f64; 12] {
        std::array::from_fn(|i| self.entry(i) * nu[i])
    }
}

pub fn scale_matrix(length: f64) -> Result<ScaleMatrix> {
    ScaleMatrix::new(length)
}

/// Scale- and translation-normalized state `s̃`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelativeState {
    /// `x̃_1..x̃_m`, unit vectors.
    pub directions: Vec<Vec3>,
    /// `(p2 − p1)/‖p2 − p1‖`.
    pub chord: Vec3,
    pub q1: [f64; 4],
    pub q2: [f64; 4],
}

impl RelativeState {
    pub fn dim(&self) -> usize {
        3 * self.directions.len() + 11
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let m = self.directions.len();
        let mut s = DVector::zeros(self.dim());
        for (k, d) in self.directions.iter().enumerate() {
            s.rows_mut(3 * k, 3).copy_from(d);
        }
        s.rows_mut(3 * m, 3).copy_from(&self.chord);
        s.rows_mut(3 * m + 3, 4).copy_from_slice(&self.q1);
        s.rows_mut(3 * m + 7, 4).copy_from_slice(&self.q2);
        s
    }
}

/// How positions enter the network input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateEncoding {
    /// Unit direction vectors and `T = diag[I, L I, I, L I]`.
    #[default]
    ScaleNormalized,
    /// Raw relative position vectors and `T = I` (ablation).
    Unnormalized,
}

/// Dimension of the network input for `m` features.
pub fn input_dim(m: usize) -> usize {
    3 * m + 11
}

/// Quaternion with a non-negative scalar part; `q` and `−q` describe the same
/// orientation and the network input must be a function of the orientation.
pub fn canonical_quat(q: &[f64; 4]) -> [f64; 4] {
    if q[0] < 0.0 {
        [-q[0], -q[1], -q[2], -q[3]]
    } else {
        *q
    }
}

fn feature(x: &[f64], k: usize) -> Vec3 {
    Vec3::new(x[3 * k], x[3 * k + 1], x[3 * k + 2])
}

fn relative_vectors(x: &[f64], ends: &EndPose) -> Result<(Vec<Vec3>, Vec3)> {
    if x.len() % 3 != 0 || x.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "feature vector length {} is not a positive multiple of 3",
            x.len()
        )));
    }
    let m = x.len() / 3;
    let mut out = Vec::with_capacity(m);
    let mut prev = ends.p1;
    for k in 0..m {
        let cur = feature(x, k);
        let d = cur - prev;
        if !(d.norm() >= MIN_SEPARATION) {
            return Err(Error::DegenerateState(format!(
                "feature {k} coincides with its left neighbour (separation {:.3e} m)",
                d.norm()
            )));
        }
        out.push(d);
        prev = cur;
    }
    let chord = ends.p2 - ends.p1;
    if !(chord.norm() >= MIN_SEPARATION) {
        return Err(Error::DegenerateState(format!(
            "gripper positions coincide (separation {:.3e} m)",
            chord.norm()
        )));
    }
    Ok((out, chord))
}

/// `s̃ = [x̃_1; …; x̃_m; r̃]` with `r̃ = [(p2 − p1)/‖p2 − p1‖; q1; q2]`.
pub fn relative_state(x: &[f64], ends: &EndPose) -> Result<RelativeState> {
    let (dirs, chord) = relative_vectors(x, ends)?;
    Ok(RelativeState {
        directions: dirs.iter().map(|d| d / d.norm()).collect(),
        chord: chord / chord.norm(),
        q1: canonical_quat(&ends.q1),
        q2: canonical_quat(&ends.q2),
    })
}

/// Network input vector under the given encoding.
pub fn encode_input(x: &[f64], ends: &EndPose, encoding: StateEncoding) -> Result<DVector<f64>> {
    match encoding {
        StateEncoding::ScaleNormalized => Ok(relative_state(x, ends)?.to_vector()),
        StateEncoding::Unnormalized => {
            let (dirs, chord) = relative_vectors(x, ends)?;
            Ok(RelativeState {
                directions: dirs,
                chord,
                q1: canonical_quat(&ends.q1),
                q2: canonical_quat(&ends.q2),
            }
            .to_vector())
        }
    }
}

/// Scale matrix to pair with an encoding for a DLO of length `length`.
pub fn encoding_scale(encoding: StateEncoding, length: f64) -> Result<ScaleMatrix> {
    match encoding {
        StateEncoding::ScaleNormalized => ScaleMatrix::new(length),
        StateEncoding::Unnormalized => Ok(ScaleMatrix::identity()),
    }
}

/// Rotation about the vertical (+z) axis.
pub fn rotation_z(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

pub fn rotation_z_quat(angle: f64) -> [f64; 4] {
    let (s, c) = (0.5 * angle).sin_cos();
    [c, 0.0, 0.0, s]
}

/// Rotates every 3-vector block of `v` in place.
pub fn rotate_blocks(v: &mut [f64], rot: &Matrix3<f64>) {
    for chunk in v.chunks_exact_mut(3) {
        let r = rot * Vec3::new(chunk[0], chunk[1], chunk[2]);
        chunk.copy_from_slice(r.as_slice());
    }
}

/// Block-diagonal `R_blk` applying `rot` to each of `blocks` 3-vectors.
pub fn block_rotation(rot: &Matrix3<f64>, blocks: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(3 * blocks, 3 * blocks);
    for b in 0..blocks {
        out.view_mut((3 * b, 3 * b), (3, 3)).copy_from(rot);
    }
    out
}

pub fn rotate_ends(ends: &EndPose, angle: f64) -> EndPose {
    let rot = rotation_z(angle);
    let qz = rotation_z_quat(angle);
    EndPose {
        p1: rot * ends.p1,
        q1: normalize_quat(quat_mul(&qz, &ends.q1)),
        p2: rot * ends.p2,
        q2: normalize_quat(quat_mul(&qz, &ends.q2)),
    }
}

/// Views a data tuple from a world frame rotated by `angle` about +z.
pub fn rotate_sample(tuple: &DataTuple, angle: f64) -> DataTuple {
    let rot = rotation_z(angle);
    let mut out = tuple.clone();
    rotate_blocks(&mut out.x, &rot);
    rotate_blocks(&mut out.x_dot, &rot);
    rotate_blocks(&mut out.nu, &rot);
    let ends = EndPose::from_slice(&tuple.r).expect("data tuple r has 14 entries");
    out.r = rotate_ends(&ends, angle).to_vector().as_slice().to_vec();
    out
}

/// Translates every 3-vector block of `x` by `t`.
pub fn translate_blocks(x: &mut [f64], t: &Vec3) {
    for chunk in x.chunks_exact_mut(3) {
        chunk[0] += t.x;
        chunk[1] += t.y;
        chunk[2] += t.z;
    }
}
