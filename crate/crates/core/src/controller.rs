//! Shape controller: saturated task error, ideal target velocity,
//! overstretch constraints and the damped least-squares QCQP
//!
//! ```text
//! min ½‖ẋ_ide − Ĵᶜν‖² + ½λ‖ν‖²   s.t. ‖ν‖ ≤ ν_max,  C₁ν ≤ 0,  C₂ν = 0.
//! ```

use nalgebra::{DMatrix, DVector, RowSVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::datasets::DofMask;
use crate::error::{Error, Result};
use crate::rbfn::JacobianModel;
use crate::state::{EndPose, EndVelocity};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub alpha: f64,
    pub lambda0: f64,
    /// Saturation threshold on the stacked target error (m).
    pub eps_x: f64,
    /// Cosine slack defining near-overstretched states.
    pub eps_s: f64,
    pub nu_max: f64,
    /// Target feature indices (0-based); `None` targets every feature.
    pub targets: Option<Vec<usize>>,
    pub dof_mask: DofMask,
    /// Disable to drop the overstretch constraints (ablation).
    pub overstretch_guard: bool,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            lambda0: 0.1,
            eps_x: 0.2,
            eps_s: 0.002,
            nu_max: 0.2,
            targets: None,
            dof_mask: DofMask::full(),
            overstretch_guard: true,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self, m: usize) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("lambda0", self.lambda0),
            ("eps_x", self.eps_x),
            ("eps_s", self.eps_s),
            ("nu_max", self.nu_max),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "controller.{name} must be positive, got {v}"
                )));
            }
        }
        if let Some(t) = &self.targets {
            if t.is_empty() {
                return Err(Error::InvalidArgument("controller.targets must not be empty".into()));
            }
            if let Some(k) = t.iter().find(|&&k| k >= m) {
                return Err(Error::InvalidArgument(format!(
                    "controller.targets contains {k}, but there are only {m} features"
                )));
            }
        }
        Ok(())
    }

    pub fn target_indices(&self, m: usize) -> Vec<usize> {
        self.targets.clone().unwrap_or_else(|| (0..m).collect())
    }
}

/// `Δx` clipped to norm `eps_x`.
pub fn saturate_error(dx: &DVector<f64>, eps_x: f64) -> DVector<f64> {
    let n = dx.norm();
    if n <= eps_x {
        dx.clone()
    } else {
        dx * (eps_x / n)
    }
}

pub fn ideal_velocity(dx_sat: &DVector<f64>, alpha: f64) -> DVector<f64> {
    -dx_sat * alpha
}

/// Stacked rows of `x` for the listed features.
pub fn select_rows(x: &[f64], targets: &[usize]) -> DVector<f64> {
    DVector::from_iterator(
        3 * targets.len(),
        targets.iter().flat_map(|&k| [x[3 * k], x[3 * k + 1], x[3 * k + 2]]),
    )
}

/// Linear constraints active in near-overstretched states.
#[derive(Clone, Debug, PartialEq)]
pub struct OverstretchConstraints {
    /// `C₁ = [−p_dᵀ, 0, p_dᵀ, 0]`.
    pub c1: RowSVector<f64, 12>,
    /// `C₂` as a coordinate selector: the six angular components.
    pub c2_zeroed: [bool; 12],
}

impl OverstretchConstraints {
    pub fn c2_matrix(&self) -> DMatrix<f64> {
        let idx: Vec<usize> = (0..12).filter(|&i| self.c2_zeroed[i]).collect();
        DMatrix::from_fn(idx.len(), 12, |r, c| if idx[r] == c { 1.0 } else { 0.0 })
    }
}

/// True when every interior feature turns by less than `acos(1 − eps_s)`.
pub fn is_near_overstretched(x: &[f64], eps_s: f64) -> bool {
    let m = x.len() / 3;
    if m < 3 {
        return false;
    }
    let seg = |k: usize| {
        nalgebra::Vector3::new(
            x[3 * k + 3] - x[3 * k],
            x[3 * k + 4] - x[3 * k + 1],
            x[3 * k + 5] - x[3 * k + 2],
        )
    };
    (1..m - 1).all(|k| {
        let a = seg(k - 1);
        let b = seg(k);
        let denom = a.norm() * b.norm();
        denom > 0.0 && a.dot(&b) / denom > 1.0 - eps_s
    })
}

pub fn overstretch_constraints(x: &[f64], ends: &EndPose, eps_s: f64) -> Option<OverstretchConstraints> {
    if !is_near_overstretched(x, eps_s) {
        return None;
    }
    let pd = ends.p2 - ends.p1;
    let mut c1 = RowSVector::<f64, 12>::zeros();
    for j in 0..3 {
        c1[j] = -pd[j];
        c1[6 + j] = pd[j];
    }
    let mut c2_zeroed = [false; 12];
    for i in (3..6).chain(9..12) {
        c2_zeroed[i] = true;
    }
    Some(OverstretchConstraints { c1, c2_zeroed })
}

/// One instance of the control QCQP.
#[derive(Clone, Debug)]
pub struct Qcqp {
    /// `Ĵᶜ`, `r × 12`.
    pub jacobian: DMatrix<f64>,
    /// `ẋ_ide`.
    pub target: DVector<f64>,
    pub lambda: f64,
    pub nu_max: f64,
    pub inequality: Option<RowSVector<f64, 12>>,
    /// Coordinates forced to zero (equality rows and masked DoFs).
    pub zeroed: [bool; 12],
}

#[derive(Clone, Debug, PartialEq)]
pub struct QcqpSolution {
    pub nu: DVector<f64>,
    pub objective: f64,
    pub ball_multiplier: f64,
    pub inequality_multiplier: f64,
    pub ball_active: bool,
    pub inequality_active: bool,
    pub kkt_residual: f64,
}

impl Qcqp {
    pub fn objective(&self, nu: &DVector<f64>) -> f64 {
        0.5 * (&self.target - &self.jacobian * nu).norm_squared() + 0.5 * self.lambda * nu.norm_squared()
    }

    fn free(&self) -> Vec<usize> {
        (0..12).filter(|&i| !self.zeroed[i]).collect()
    }

    /// Global minimizer. The equality rows are eliminated; the remaining
    /// problem is a trust-region subproblem, re-solved on the hyperplane
    /// `C₁ν = 0` when its solution violates the inequality.
    pub fn solve(&self) -> Result<QcqpSolution> {
        if self.jacobian.ncols() != 12 || self.jacobian.nrows() != self.target.len() {
            return Err(Error::DimensionMismatch {
                expected: self.target.len(),
                got: self.jacobian.nrows(),
            });
        }
        if !(self.lambda >= 0.0) || !(self.nu_max > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "QCQP needs λ ≥ 0 and ν_max > 0, got λ = {}, ν_max = {}",
                self.lambda, self.nu_max
            )));
        }
        let free = self.free();
        let n = free.len();
        let mut nu = DVector::zeros(12);
        if n == 0 {
            return Ok(self.finish(nu, 0.0, 0.0));
        }
        let a = self.jacobian.select_columns(&free);
        let mut h = a.transpose() * &a;
        for i in 0..n {
            h[(i, i)] += self.lambda;
        }
        let g = a.transpose() * &self.target;
        let c = self
            .inequality
            .as_ref()
            .map(|c| DVector::from_iterator(n, free.iter().map(|&i| c[i])))
            .filter(|c| c.norm() > 0.0);

        let (mut z, mut mu) = trust_region(&h, &g, self.nu_max);
        let mut xi = 0.0;
        if let Some(c) = &c {
            if c.dot(&z) > 0.0 {
                let q = hyperplane_basis(c);
                let hy = q.transpose() * &h * &q;
                let gy = q.transpose() * &g;
                let (y, mu_y) = trust_region(&hy, &gy, self.nu_max);
                z = &q * y;
                mu = mu_y;
                let mut hm = h.clone();
                for i in 0..n {
                    hm[(i, i)] += mu;
                }
                xi = (c.dot(&(&g - hm * &z)) / c.norm_squared()).max(0.0);
            }
        }
        for (k, &i) in free.iter().enumerate() {
            nu[i] = z[k];
        }
        Ok(self.finish(nu, mu, xi))
    }

    fn finish(&self, nu: DVector<f64>, mu: f64, xi: f64) -> QcqpSolution {
        let kkt = self.kkt_residual(&nu, mu, xi);
        QcqpSolution {
            objective: self.objective(&nu),
            ball_active: mu > 0.0,
            inequality_active: xi > 0.0,
            ball_multiplier: mu,
            inequality_multiplier: xi,
            kkt_residual: kkt,
            nu,
        }
    }

    /// Largest violation among stationarity on the free coordinates, primal
    /// feasibility, dual feasibility and complementary slackness. `mu` is
    /// the multiplier of `½(‖ν‖² − ν_max²) ≤ 0`.
    pub fn kkt_residual(&self, nu: &DVector<f64>, mu: f64, xi: f64) -> f64 {
        let mut grad = self.jacobian.transpose() * (&self.jacobian * nu - &self.target) + nu * (self.lambda + mu);
        if let Some(c) = &self.inequality {
            grad += c.transpose() * xi;
        }
        let mut r: f64 = 0.0;
        for i in 0..12 {
            if self.zeroed[i] {
                r = r.max(nu[i].abs());
            } else {
                r = r.max(grad[i].abs());
            }
        }
        let ball = 0.5 * (nu.norm_squared() - self.nu_max * self.nu_max);
        r = r.max(ball.max(0.0)).max((mu * ball).abs()).max((-mu).max(0.0));
        if let Some(c) = &self.inequality {
            let cv = (c * nu)[0];
            r = r.max(cv.max(0.0)).max((xi * cv).abs()).max((-xi).max(0.0));
        }
        r
    }
}

/// `argmin ½zᵀHz − gᵀz` over `‖z‖ ≤ radius` for positive semidefinite `H`,
/// with its ball multiplier.
fn trust_region(h: &DMatrix<f64>, g: &DVector<f64>, radius: f64) -> (DVector<f64>, f64) {
    let n = g.len();
    if n == 0 || g.norm() == 0.0 {
        return (DVector::zeros(n), 0.0);
    }
    let eig = SymmetricEigen::new(h.clone());
    let lam = eig.eigenvalues.map(|l| l.max(0.0));
    let v = eig.eigenvectors;
    let gp = v.transpose() * g;
    let lmax = lam.max();
    let zero_tol = 1e-13 * lmax.max(1.0);

    let norm_at = |mu: f64| -> f64 {
        (0..n)
            .map(|i| {
                let d = lam[i] + mu;
                if d > 0.0 {
                    (gp[i] / d).powi(2)
                } else {
                    0.0
                }
            })
            .sum::<f64>()
            .sqrt()
    };
    let point = |mu: f64| -> DVector<f64> {
        let coef = DVector::from_iterator(
            n,
            (0..n).map(|i| {
                let d = lam[i] + mu;
                if d > zero_tol || (mu > 0.0 && d > 0.0) {
                    gp[i] / d
                } else {
                    0.0
                }
            }),
        );
        &v * coef
    };

    // interior solution when H is (numerically) regular on g's support
    let unbounded = (0..n).any(|i| lam[i] <= zero_tol && gp[i].abs() > 1e-14 * g.norm());
    if !unbounded {
        let z = point(0.0);
        if z.norm() <= radius {
            return (z, 0.0);
        }
    }

    // boundary: ‖z(μ)‖ = radius with μ > 0
    let mut lo = 0.0;
    let mut hi = g.norm() / radius;
    let mut mu = if unbounded { hi * 1e-3 } else { 0.0 };
    for _ in 0..200 {
        let nz = norm_at(mu);
        if nz > radius {
            lo = mu;
        } else {
            hi = mu;
        }
        if (nz - radius).abs() <= 1e-15 * radius || hi - lo <= 1e-16 * hi {
            break;
        }
        // Newton on 1/radius − 1/‖z(μ)‖
        let dn: f64 = -(0..n)
            .map(|i| {
                let d = lam[i] + mu;
                if d > 0.0 {
                    gp[i] * gp[i] / (d * d * d)
                } else {
                    0.0
                }
            })
            .sum::<f64>()
            / nz.max(f64::MIN_POSITIVE);
        let phi = 1.0 / radius - 1.0 / nz;
        let dphi = dn / (nz * nz);
        let mut next = if dphi != 0.0 && nz.is_finite() { mu - phi / dphi } else { f64::NAN };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        mu = next;
    }
    let mut z = point(mu);
    let nz = z.norm();
    if nz > radius {
        z *= radius / nz;
    }
    (z, mu)
}

/// Orthonormal basis (`n × (n−1)`) of the hyperplane orthogonal to `c`,
/// from the Householder reflector that maps `c` onto a coordinate axis.
fn hyperplane_basis(c: &DVector<f64>) -> DMatrix<f64> {
    let n = c.len();
    let u = c / c.norm();
    let s = if u[0] >= 0.0 { 1.0 } else { -1.0 };
    let mut w = u.clone();
    w[0] += s;
    let wn2 = w.norm_squared();
    // H = I − 2wwᵀ/‖w‖²; H e_0 = −s u, so columns 1.. span u⊥
    DMatrix::from_fn(n, n - 1, |r, col| {
        let j = col + 1;
        let e = if r == j { 1.0 } else { 0.0 };
        e - 2.0 * w[r] * w[j] / wn2
    })
}

/// Everything the loop needs to know about one control step.
#[derive(Clone, Debug)]
pub struct ControlOutput {
    pub nu: EndVelocity,
    /// `Δx̃ᶜ`.
    pub error_sat: DVector<f64>,
    /// `‖Δxᶜ‖`.
    pub error_norm: f64,
    pub lambda: f64,
    pub near_overstretch: bool,
    pub solution: QcqpSolution,
    /// `(Δx̃ᶜ)ᵀ Ĵᶜ ν`.
    pub descent: f64,
}

/// Control law for a given target Jacobian `Ĵᶜ` and target error
/// `Δxᶜ = xᶜ − x_desᶜ`.
pub fn control_from_jacobian(
    jc: &DMatrix<f64>,
    dx: &DVector<f64>,
    x: &[f64],
    ends: &EndPose,
    config: &ControllerConfig,
) -> Result<ControlOutput> {
    let error_sat = saturate_error(dx, config.eps_x);
    let lambda = config.lambda0 * error_sat.norm();
    let mut zeroed = [false; 12];
    for (i, z) in zeroed.iter_mut().enumerate() {
        *z = !config.dof_mask.allows(i);
    }
    let guard = if config.overstretch_guard {
        overstretch_constraints(x, ends, config.eps_s)
    } else {
        None
    };
    let mut inequality = None;
    if let Some(g) = &guard {
        for i in 0..12 {
            zeroed[i] |= g.c2_zeroed[i];
        }
        inequality = Some(g.c1);
    }
    let problem = Qcqp {
        jacobian: jc.clone(),
        target: ideal_velocity(&error_sat, config.alpha),
        lambda,
        nu_max: config.nu_max,
        inequality,
        zeroed,
    };
    let solution = problem.solve()?;
    let nu = EndVelocity::from_slice(solution.nu.as_slice())?;
    let descent = error_sat.dot(&(jc * &solution.nu));
    Ok(ControlOutput {
        nu,
        error_norm: dx.norm(),
        error_sat,
        lambda,
        near_overstretch: guard.is_some(),
        solution,
        descent,
    })
}

/// Full pipeline: target Jacobian from `model`, then the control law.
pub fn control_step<M: JacobianModel + ?Sized>(
    model: &M,
    x: &[f64],
    ends: &EndPose,
    x_des: &[f64],
    length: f64,
    config: &ControllerConfig,
) -> Result<ControlOutput> {
    if x.len() != x_des.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: x_des.len(),
        });
    }
    let targets = config.target_indices(x.len() / 3);
    let dx = select_rows(x, &targets) - select_rows(x_des, &targets);
    let j = model.jacobian(x, ends, length)?;
    let jc = DMatrix::from_fn(3 * targets.len(), 12, |r, c| j[(3 * targets[r / 3] + r % 3, c)]);
    control_from_jacobian(&jc, &dx, x, ends, config)
}
