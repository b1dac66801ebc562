//! Quasi-static elastic rod.
//!
//! The rod is a chain of `n` nodes. Its potential energy is
//!
//! ```text
//! E = Σ_segments ½ (k_s / l0) (|e_i| − l0)²
//!   + Σ_interior ½ (k_b / l0³) |x_{i−1} − 2 x_i + x_{i+1}|²
//!   − Σ_nodes m_i g · x_i
//! ```
//!
//! For inextensible segments the bending term equals `(k_b / l0)(1 − cos φ)`,
//! i.e. `½ k_b φ² / l0` for small turning angles `φ`. There is no twist term.
//!
//! Nodes `0` and `n−1` are clamped to the gripper positions and nodes `1` and
//! `n−2` sit one rest segment along the gripper tangent axes (local `+x` of
//! each gripper frame), which is how end orientations enter the energy. All
//! other nodes are free; an equilibrium is a stationary point of `E` over
//! them, and its sensitivity to the grippers gives the ground-truth Jacobian
//! `J = −A⁻¹ B C`.

use nalgebra::{DMatrix, Matrix3};
use serde::{Deserialize, Serialize};

use crate::banded::{BandedCholesky, BandedSym};
use crate::error::{Error, Result};
use crate::state::{quat_rotate, EndPose, EndVelocity, Vec3, IDENTITY_QUAT};

/// Physical description of one DLO.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DloParams {
    /// Meters.
    pub length: f64,
    /// Millimeters.
    pub diameter: f64,
    /// Overrides the config-derived stretch stiffness (N).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stretch_stiffness: Option<f64>,
    /// Overrides the config-derived bending stiffness (N·m²).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bend_stiffness: Option<f64>,
    /// Overrides the linear mass density (kg/m).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linear_density: Option<f64>,
}

/// Lengths (m) and diameters (mm) of the eleven benchmark DLOs.
pub const DLO_TABLE: [(f64, f64); 11] = [
    (0.5, 10.0),
    (0.3, 16.0),
    (0.4, 6.0),
    (0.5, 18.0),
    (0.6, 8.0),
    (0.7, 20.0),
    (0.8, 10.0),
    (0.9, 22.0),
    (1.0, 12.0),
    (1.1, 24.0),
    (1.2, 14.0),
];

impl DloParams {
    pub fn new(length: f64, diameter: f64) -> Self {
        Self {
            length,
            diameter,
            stretch_stiffness: None,
            bend_stiffness: None,
            linear_density: None,
        }
    }

    /// DLO `index` (0..=10) of the benchmark table.
    pub fn table(index: usize) -> Result<Self> {
        DLO_TABLE
            .get(index)
            .map(|&(l, d)| Self::new(l, d))
            .ok_or_else(|| Error::InvalidArgument(format!("no DLO with index {index}")))
    }

    /// DLOs 1–10, the default domain-randomization set.
    pub fn training_set() -> Vec<Self> {
        (1..=10).map(|i| Self::table(i).unwrap()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.1..=2.0).contains(&self.length) {
            return Err(Error::InvalidArgument(format!(
                "DLO length {} m outside [0.1, 2.0]",
                self.length
            )));
        }
        if !(self.diameter > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "DLO diameter must be positive, got {}",
                self.diameter
            )));
        }
        for (name, v) in [
            ("stretch_stiffness", self.stretch_stiffness),
            ("bend_stiffness", self.bend_stiffness),
            ("linear_density", self.linear_density),
        ] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::InvalidArgument(format!("{name} must be positive")));
                }
            }
        }
        Ok(())
    }
}

/// Simulator-wide defaults; per-DLO values derive from these.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub node_count: usize,
    pub feature_count: usize,
    /// Stretch stiffness `k_s` (N).
    pub stretch_stiffness: f64,
    /// Bending stiffness of a 10 mm rod; scales with `(d / 10 mm)⁴`.
    pub bend_stiffness: f64,
    /// kg/m.
    pub linear_density: f64,
    pub gravity: [f64; 3],
    /// Largest admissible `‖p2 − p1‖ / L − 1`.
    pub strain_cap: f64,
    /// Equilibrium tolerance on the free-node gradient norm (N).
    pub gradient_tolerance: f64,
    pub max_iterations: usize,
    /// Rod resting on a horizontal table: free nodes keep their height.
    pub planar: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            node_count: 41,
            feature_count: 8,
            stretch_stiffness: 1e4,
            bend_stiffness: 1e-2,
            linear_density: 0.05,
            gravity: [0.0, 0.0, -9.81],
            strain_cap: 0.2,
            gradient_tolerance: 1e-9,
            max_iterations: 200,
            planar: false,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.node_count < 10 {
            return Err(Error::InvalidArgument(format!(
                "node_count must be at least 10, got {}",
                self.node_count
            )));
        }
        if self.feature_count == 0 || self.node_count < self.feature_count + 2 {
            return Err(Error::InvalidArgument(format!(
                "need 1 ≤ feature_count ≤ node_count − 2, got {} features on {} nodes",
                self.feature_count, self.node_count
            )));
        }
        let positive = [
            ("stretch_stiffness", self.stretch_stiffness),
            ("bend_stiffness", self.bend_stiffness),
            ("linear_density", self.linear_density),
            ("strain_cap", self.strain_cap),
            ("gradient_tolerance", self.gradient_tolerance),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("sim.{name} must be positive")));
            }
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidArgument("sim.max_iterations must be positive".into()));
        }
        Ok(())
    }
}

/// Newton iteration record, exposed for diagnostics and tests.
#[derive(Clone, Debug, Default)]
pub struct SolveReport {
    pub iterations: usize,
    pub residual: f64,
    /// Energy before the first and after every accepted iteration.
    pub energies: Vec<f64>,
    /// Roundoff allowance used by the line search (J).
    pub energy_slack: f64,
}

/// A discretized elastic rod together with its current node positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RodSystem {
    pub node_count: usize,
    pub feature_count: usize,
    /// Total rest length `L` (m).
    pub rest_length: f64,
    /// Meters.
    pub diameter: f64,
    pub stretch_stiffness: f64,
    pub bend_stiffness: f64,
    pub linear_density: f64,
    pub gravity: Vec3,
    pub strain_cap: f64,
    pub gradient_tolerance: f64,
    pub max_iterations: usize,
    #[serde(default)]
    pub planar: bool,
    pub nodes: Vec<Vec3>,
}

/// Half bandwidth of the free-node Hessian: bending couples nodes two apart.
const BANDWIDTH: usize = 8;

impl RodSystem {
    /// Builds a rod for `dlo` with nodes evenly spaced along `+x`, centered at
    /// the origin. Call [`RodSystem::settle`] to obtain an equilibrium.
    pub fn new(sim: &SimConfig, dlo: &DloParams) -> Result<Self> {
        sim.validate()?;
        dlo.validate()?;
        let ratio = dlo.diameter / 10.0;
        let n = sim.node_count;
        let length = dlo.length;
        let nodes = (0..n)
            .map(|i| Vec3::new(length * (i as f64 / (n - 1) as f64 - 0.5), 0.0, 0.0))
            .collect();
        Ok(Self {
            node_count: n,
            feature_count: sim.feature_count,
            rest_length: length,
            diameter: dlo.diameter * 1e-3,
            stretch_stiffness: dlo.stretch_stiffness.unwrap_or(sim.stretch_stiffness),
            bend_stiffness: dlo
                .bend_stiffness
                .unwrap_or(sim.bend_stiffness * ratio.powi(4)),
            linear_density: dlo.linear_density.unwrap_or(sim.linear_density),
            gravity: Vec3::from(sim.gravity),
            strain_cap: sim.strain_cap,
            gradient_tolerance: sim.gradient_tolerance,
            max_iterations: sim.max_iterations,
            planar: sim.planar,
            nodes,
        })
    }

    /// Segment rest length `l0 = L / (n − 1)`.
    pub fn segment_length(&self) -> f64 {
        self.rest_length / (self.node_count - 1) as f64
    }

    fn node_mass(&self, i: usize) -> f64 {
        let m = self.linear_density * self.segment_length();
        if i == 0 || i + 1 == self.node_count {
            0.5 * m
        } else {
            m
        }
    }

    fn free_count(&self) -> usize {
        self.node_count - 4
    }

    /// Straight-rod gripper poses: ends on the `x` axis around `center`,
    /// `separation` apart, identity orientations.
    pub fn straight_ends(center: &Vec3, separation: f64) -> EndPose {
        EndPose {
            p1: center - Vec3::new(0.5 * separation, 0.0, 0.0),
            q1: IDENTITY_QUAT,
            p2: center + Vec3::new(0.5 * separation, 0.0, 0.0),
            q2: IDENTITY_QUAT,
        }
    }

    /// Positions of the four clamped nodes `0, 1, n−2, n−1`.
    pub fn clamp_nodes(&self, ends: &EndPose) -> [Vec3; 4] {
        let l0 = self.segment_length();
        let t1 = quat_rotate(&ends.q1, &Vec3::x());
        let t2 = quat_rotate(&ends.q2, &Vec3::x());
        [ends.p1, ends.p1 + t1 * l0, ends.p2 - t2 * l0, ends.p2]
    }

    fn apply_clamp(&self, nodes: &mut [Vec3], ends: &EndPose) {
        let n = self.node_count;
        let c = self.clamp_nodes(ends);
        nodes[0] = c[0];
        nodes[1] = c[1];
        nodes[n - 2] = c[2];
        nodes[n - 1] = c[3];
    }

    /// Total potential energy of `nodes`.
    pub fn energy(&self, nodes: &[Vec3]) -> f64 {
        self.energy_terms(nodes).0
    }

    /// `(energy, Σ |term|)`; the second value scales roundoff allowances.
    fn energy_terms(&self, nodes: &[Vec3]) -> (f64, f64) {
        let l0 = self.segment_length();
        let ks = self.stretch_stiffness / l0;
        let kb = self.bend_stiffness / (l0 * l0 * l0);
        let mut e = 0.0;
        let mut mag = 0.0;
        for w in nodes.windows(2) {
            let d = (w[1] - w[0]).norm() - l0;
            let t = 0.5 * ks * d * d;
            e += t;
            mag += t;
        }
        for w in nodes.windows(3) {
            let t = 0.5 * kb * (w[0] - 2.0 * w[1] + w[2]).norm_squared();
            e += t;
            mag += t;
        }
        for (i, x) in nodes.iter().enumerate() {
            let t = -self.node_mass(i) * self.gravity.dot(x);
            e += t;
            mag += t.abs();
        }
        (e, mag)
    }

    /// `∂E/∂x` for every node.
    pub fn gradient(&self, nodes: &[Vec3]) -> Vec<Vec3> {
        let l0 = self.segment_length();
        let ks = self.stretch_stiffness / l0;
        let kb = self.bend_stiffness / (l0 * l0 * l0);
        let mut g: Vec<Vec3> = (0..nodes.len())
            .map(|i| -self.node_mass(i) * self.gravity)
            .collect();
        for i in 0..nodes.len() - 1 {
            let e = nodes[i + 1] - nodes[i];
            let len = e.norm();
            let f = e * (ks * (len - l0) / len.max(f64::MIN_POSITIVE));
            g[i] -= f;
            g[i + 1] += f;
        }
        for i in 1..nodes.len() - 1 {
            let d = (nodes[i - 1] - 2.0 * nodes[i] + nodes[i + 1]) * kb;
            g[i - 1] += d;
            g[i] -= 2.0 * d;
            g[i + 1] += d;
        }
        g
    }

    fn free_gradient(&self, nodes: &[Vec3]) -> Vec<f64> {
        let g = self.gradient(nodes);
        let keep_z = if self.planar { 0.0 } else { 1.0 };
        g[2..self.node_count - 2]
            .iter()
            .flat_map(|v| [v.x, v.y, keep_z * v.z])
            .collect()
    }

    /// Free-node Hessian `A` (banded) and the free/clamped coupling block
    /// (`3f × 12`, clamped nodes ordered `0, 1, n−2, n−1`).
    ///
    /// With `projected`, the transverse stretch stiffness of compressed
    /// segments is dropped, which keeps the matrix positive semidefinite.
    /// For a planar rod the free `z` coordinates are fixed: their rows and
    /// columns are replaced by a scaled identity and carry no coupling.
    fn hessian(&self, nodes: &[Vec3], projected: bool) -> (BandedSym, DMatrix<f64>) {
        let n = self.node_count;
        let f = self.free_count();
        let l0 = self.segment_length();
        let ks = self.stretch_stiffness / l0;
        let kb = self.bend_stiffness / (l0 * l0 * l0);
        let mut a = BandedSym::zeros(3 * f, BANDWIDTH);
        let mut coupling = DMatrix::zeros(3 * f, 12);

        // slot of node i: Ok(free index) or Err(clamp index)
        let slot = |i: usize| -> std::result::Result<usize, usize> {
            match i {
                0 => Err(0),
                1 => Err(1),
                _ if i == n - 2 => Err(2),
                _ if i == n - 1 => Err(3),
                _ => Ok(i - 2),
            }
        };
        let dims = if self.planar { 2 } else { 3 };
        let mut add_block = |i: usize, j: usize, h: &Matrix3<f64>| match (slot(i), slot(j)) {
            (Ok(fi), Ok(fj)) => {
                if fi >= fj {
                    for r in 0..dims {
                        for c in 0..dims {
                            if 3 * fi + r >= 3 * fj + c {
                                a.add(3 * fi + r, 3 * fj + c, h[(r, c)]);
                            }
                        }
                    }
                }
            }
            (Ok(fi), Err(cj)) => {
                let mut view = coupling.view_mut((3 * fi, 3 * cj), (dims, 3));
                view += h.rows(0, dims);
            }
            _ => {}
        };

        for i in 0..n - 1 {
            let e = nodes[i + 1] - nodes[i];
            let len = e.norm().max(f64::MIN_POSITIVE);
            let u = e / len;
            let uu = u * u.transpose();
            let mut transverse = 1.0 - l0 / len;
            if projected {
                transverse = transverse.max(0.0);
            }
            let h = (uu + (Matrix3::identity() - uu) * transverse) * ks;
            add_block(i, i, &h);
            add_block(i + 1, i + 1, &h);
            add_block(i, i + 1, &(-h));
            add_block(i + 1, i, &(-h));
        }
        let coef = [1.0, -2.0, 1.0];
        for c in 1..n - 1 {
            for (ai, &ca) in coef.iter().enumerate() {
                for (bi, &cb) in coef.iter().enumerate() {
                    let h = Matrix3::identity() * (kb * ca * cb);
                    add_block(c - 1 + ai, c - 1 + bi, &h);
                }
            }
        }
        if self.planar {
            for k in 0..f {
                a.add(3 * k + 2, 3 * k + 2, ks);
            }
        }
        (a, coupling)
    }

    /// Maps `ν` to the velocities of the four clamped nodes (`12 × 12`).
    fn clamp_velocity_map(&self, ends: &EndPose) -> DMatrix<f64> {
        let l0 = self.segment_length();
        let a1 = quat_rotate(&ends.q1, &Vec3::x()) * l0;
        let a2 = quat_rotate(&ends.q2, &Vec3::x()) * (-l0);
        let mut d = DMatrix::zeros(12, 12);
        let eye = Matrix3::identity();
        d.view_mut((0, 0), (3, 3)).copy_from(&eye);
        d.view_mut((3, 0), (3, 3)).copy_from(&eye);
        // ω × a = −[a]× ω
        d.view_mut((3, 3), (3, 3)).copy_from(&(-a1.cross_matrix()));
        d.view_mut((6, 6), (3, 3)).copy_from(&eye);
        d.view_mut((6, 9), (3, 3)).copy_from(&(-a2.cross_matrix()));
        d.view_mut((9, 6), (3, 3)).copy_from(&eye);
        d
    }

    fn check_clamp(&self, ends: &EndPose) -> Result<()> {
        if !ends.is_finite() {
            return Err(Error::InvalidArgument("non-finite gripper pose".into()));
        }
        let sep = ends.separation();
        let max = self.rest_length * (1.0 + self.strain_cap);
        if sep >= max {
            return Err(Error::InfeasibleClamp {
                separation: sep,
                max,
            });
        }
        Ok(())
    }

    /// Local energy minimizer over the free nodes with the ends clamped at
    /// `ends`, started from `warm_start`.
    pub fn solve_equilibrium(&self, ends: &EndPose, warm_start: &[Vec3]) -> Result<Vec<Vec3>> {
        self.solve_equilibrium_report(ends, warm_start).map(|(n, _)| n)
    }

    /// Damped Newton with backtracking on the free nodes.
    pub fn solve_equilibrium_report(
        &self,
        ends: &EndPose,
        warm_start: &[Vec3],
    ) -> Result<(Vec<Vec3>, SolveReport)> {
        if warm_start.len() != self.node_count {
            return Err(Error::DimensionMismatch {
                expected: self.node_count,
                got: warm_start.len(),
            });
        }
        self.check_clamp(ends)?;
        let mut nodes = warm_start.to_vec();
        self.apply_clamp(&mut nodes, ends);
        let f = self.free_count();

        let (mut energy, mag) = self.energy_terms(&nodes);
        let slack = 64.0 * f64::EPSILON * mag.max(1e-300);
        let mut report = SolveReport {
            energies: vec![energy],
            energy_slack: slack,
            ..Default::default()
        };
        let mut grad = self.free_gradient(&nodes);
        let mut gnorm = norm(&grad);
        for iter in 0..self.max_iterations {
            if !gnorm.is_finite() {
                break;
            }
            if gnorm < self.gradient_tolerance {
                report.iterations = iter;
                report.residual = gnorm;
                return Ok((nodes, report));
            }
            let mut dir = grad.iter().map(|g| -g).collect::<Vec<_>>();
            let factor = self.newton_factor(&nodes);
            factor.solve_in_place(&mut dir);
            let mut slope = dot(&grad, &dir);
            if !(slope < 0.0) {
                dir = grad.iter().map(|g| -g).collect();
                slope = -gnorm * gnorm;
            }

            let mut alpha = 1.0;
            let mut accepted = None;
            while alpha > 1e-12 {
                let mut trial = nodes.clone();
                for k in 0..f {
                    trial[k + 2] += Vec3::new(dir[3 * k], dir[3 * k + 1], dir[3 * k + 2]) * alpha;
                }
                let e = self.energy(&trial);
                if e.is_finite() && e <= energy + 1e-4 * alpha * slope + slack {
                    accepted = Some((trial, e));
                    break;
                }
                alpha *= 0.5;
            }
            let Some((trial, e)) = accepted else {
                break;
            };
            nodes = trial;
            energy = e;
            report.energies.push(e);
            grad = self.free_gradient(&nodes);
            gnorm = norm(&grad);
            report.iterations = iter + 1;
        }
        report.residual = gnorm;
        if gnorm < self.gradient_tolerance {
            return Ok((nodes, report));
        }
        Err(Error::NoConvergence {
            iterations: report.iterations,
            residual: gnorm,
        })
    }

    /// Exact Hessian if positive definite, else the projected one, else the
    /// projected one with growing diagonal damping.
    fn newton_factor(&self, nodes: &[Vec3]) -> BandedCholesky {
        let (exact, _) = self.hessian(nodes, false);
        if let Some(c) = exact.cholesky() {
            return c;
        }
        let (mut projected, _) = self.hessian(nodes, true);
        if let Some(c) = projected.cholesky() {
            return c;
        }
        let mut mu = 1e-10 * projected.max_diagonal().max(1e-300);
        loop {
            projected.add_diagonal(mu);
            if let Some(c) = projected.cholesky() {
                return c;
            }
            mu *= 10.0;
        }
    }

    /// Re-solves the current equilibrium for `ends` starting from the current
    /// nodes.
    pub fn settle(&mut self, ends: &EndPose) -> Result<()> {
        self.nodes = self.solve_equilibrium(ends, &self.nodes)?;
        Ok(())
    }

    /// Velocities of every node per unit `ν` at the current equilibrium
    /// (`3n × 12`).
    pub fn node_jacobian(&self, ends: &EndPose) -> Result<DMatrix<f64>> {
        let n = self.node_count;
        let f = self.free_count();
        let (a, coupling) = self.hessian(&self.nodes, false);
        let chol = a.cholesky().ok_or_else(|| Error::IndefiniteHessian {
            context: format!(
                "rod with ends p1={:?} p2={:?} (separation {:.4} m)",
                ends.p1.as_slice(),
                ends.p2.as_slice(),
                ends.separation()
            ),
        })?;
        let d = self.clamp_velocity_map(ends);
        let rhs = coupling * &d;
        let mut out = DMatrix::zeros(3 * n, 12);
        for col in 0..12 {
            let mut b: Vec<f64> = rhs.column(col).iter().map(|v| -v).collect();
            chol.solve_in_place(&mut b);
            for k in 0..3 * f {
                out[(6 + k, col)] = b[k];
            }
        }
        for (slot, node) in [0, 1, n - 2, n - 1].into_iter().enumerate() {
            out.view_mut((3 * node, 0), (3, 12))
                .copy_from(&d.view((3 * slot, 0), (3, 12)));
        }
        Ok(out)
    }

    /// Ground-truth feature Jacobian `J = −A⁻¹ B C` (`3m × 12`) at the current
    /// equilibrium. Columns for rotation about a gripper's own tangent axis
    /// are zero because the energy carries no twist.
    pub fn ground_truth_jacobian(&self, ends: &EndPose) -> Result<DMatrix<f64>> {
        let full = self.node_jacobian(ends)?;
        let idx = feature_indices(self.node_count, self.feature_count);
        let mut out = DMatrix::zeros(3 * idx.len(), 12);
        for (k, &i) in idx.iter().enumerate() {
            out.view_mut((3 * k, 0), (3, 12))
                .copy_from(&full.view((3 * i, 0), (3, 12)));
        }
        Ok(out)
    }

    /// Advances the grippers by `ν` for `dt` and returns the new equilibrium.
    ///
    /// The warm start is the previous equilibrium moved along the node
    /// Jacobian (a first-order continuation predictor), which keeps the solve
    /// on the same equilibrium branch.
    pub fn step(&self, ends: &EndPose, nu: &EndVelocity, dt: f64) -> Result<(RodSystem, EndPose)> {
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
        }
        let next_ends = ends.advanced(nu, dt);
        let mut warm = self.nodes.clone();
        let nu_vec = nu.to_vector();
        if nu_vec.norm() > 0.0 {
            if let Ok(jn) = self.node_jacobian(ends) {
                let dx = jn * nu_vec * dt;
                for (i, w) in warm.iter_mut().enumerate() {
                    *w += Vec3::new(dx[3 * i], dx[3 * i + 1], dx[3 * i + 2]);
                }
            }
        } else if ends == &next_ends {
            return Ok((self.clone(), next_ends));
        }
        let nodes = match self.solve_equilibrium(&next_ends, &warm) {
            Ok(nodes) => nodes,
            Err(Error::NoConvergence { .. }) => self.solve_equilibrium(&next_ends, &self.nodes)?,
            Err(e) => return Err(e),
        };
        let mut next = self.clone();
        next.nodes = nodes;
        Ok((next, next_ends))
    }

    pub fn features(&self) -> Vec<f64> {
        extract_features(&self.nodes, self.feature_count)
    }

    pub fn max_strain(&self) -> f64 {
        strain_check(&self.nodes, self.segment_length())
    }

    /// Free-node gradient norm of the current nodes.
    pub fn residual(&self) -> f64 {
        norm(&self.free_gradient(&self.nodes))
    }
}

/// Node indices of `m` features: interior points of `linspace(0, n−1, m+2)`
/// rounded half away from zero.
pub fn feature_indices(n: usize, m: usize) -> Vec<usize> {
    let step = (n - 1) as f64 / (m + 1) as f64;
    (1..=m).map(|k| (k as f64 * step).round() as usize).collect()
}

/// Stacked feature positions `x ∈ R³ᵐ`.
pub fn extract_features(nodes: &[Vec3], m: usize) -> Vec<f64> {
    feature_indices(nodes.len(), m)
        .into_iter()
        .flat_map(|i| [nodes[i].x, nodes[i].y, nodes[i].z])
        .collect()
}

/// Largest segment strain `(|e_i| − l0) / l0`.
pub fn strain_check(nodes: &[Vec3], segment_rest_length: f64) -> f64 {
    nodes
        .windows(2)
        .map(|w| ((w[1] - w[0]).norm() - segment_rest_length) / segment_rest_length)
        .fold(f64::NEG_INFINITY, f64::max)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// A rod together with its gripper pose; the simulated plant.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RodSim {
    pub rod: RodSystem,
    pub ends: EndPose,
    pub time: f64,
}

impl RodSim {
    /// Straight start: ends `separation_ratio · L` apart on the `x` axis
    /// through `center`, settled to equilibrium.
    pub fn straight(sim: &SimConfig, dlo: &DloParams, center: &Vec3, separation_ratio: f64) -> Result<Self> {
        let mut rod = RodSystem::new(sim, dlo)?;
        for node in rod.nodes.iter_mut() {
            *node += center;
        }
        let ends = RodSystem::straight_ends(center, separation_ratio * rod.rest_length);
        if separation_ratio < 1.0 {
            // start from a shallow arc so compression buckles one way:
            // downward when hanging, sideways on a table
            let n = rod.node_count;
            let sag = rod.rest_length * (1.0 - separation_ratio).max(0.0).sqrt() * 0.3;
            for (i, node) in rod.nodes.iter_mut().enumerate() {
                let s = i as f64 / (n - 1) as f64;
                let bow = sag * (std::f64::consts::PI * s).sin();
                node.x = center.x + (s - 0.5) * separation_ratio * rod.rest_length;
                if rod.planar {
                    node.y = center.y - bow;
                } else {
                    node.z = center.z - bow;
                }
            }
        }
        rod.settle(&ends)?;
        Ok(Self {
            rod,
            ends,
            time: 0.0,
        })
    }

    pub fn features(&self) -> Vec<f64> {
        self.rod.features()
    }

    pub fn feature_count(&self) -> usize {
        self.rod.feature_count
    }

    pub fn length(&self) -> f64 {
        self.rod.rest_length
    }

    pub fn apply(&mut self, nu: &EndVelocity, dt: f64) -> Result<()> {
        let (rod, ends) = self.rod.step(&self.ends, nu, dt)?;
        self.rod = rod;
        self.ends = ends;
        self.time += dt;
        Ok(())
    }

    pub fn jacobian(&self) -> Result<DMatrix<f64>> {
        self.rod.ground_truth_jacobian(&self.ends)
    }
}
