//! Online adaptation of the RBFN output weights during control.
//!
//! For every target feature `k`, velocity component `i` and axis `j`:
//!
//! ```text
//! dŴ_kij/dt = η [ θ(s̃) T_i ν_i Δx̃_kj
//!               + (γ/T_w) Σ_τ θ(s̃(τ)) T_i ν_i(τ)/n_v(τ) · e_kj(τ,t)/n_v(τ) ]
//! ```
//!
//! where `e(τ,t)` is the prediction error of stored sample `τ` under the
//! current weights. The task term does not depend on `Ŵ`, so the law is a
//! linear ODE in `Ŵ`; it is integrated with backward Euler by default, which
//! stays stable when small `n_v` makes the window term stiff. Explicit Euler
//! is available for comparison.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rbfn::RbfnJacobianModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    /// Learning rate `η`.
    pub eta: f64,
    /// Window-term weight `γ`.
    pub gamma: f64,
    /// Window length `T_w` (samples).
    pub window: usize,
    /// Velocity floor `ε_v` (m/s).
    pub eps_v: f64,
    /// Weight updates per control step.
    pub substeps: usize,
    pub integrator: Integrator,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Integrator {
    Explicit,
    #[default]
    Implicit,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            eta: 1.0,
            gamma: 10.0,
            window: 20,
            eps_v: 0.01,
            substeps: 5,
            integrator: Integrator::Implicit,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidArgument(format!("adaptation.eta must be non-negative, got {}", self.eta)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "adaptation.gamma must be non-negative, got {}",
                self.gamma
            )));
        }
        if self.window == 0 || self.substeps == 0 {
            return Err(Error::InvalidArgument(
                "adaptation.window and adaptation.substeps must be positive".into(),
            ));
        }
        if !(self.eps_v > 0.0) {
            return Err(Error::InvalidArgument(format!("adaptation.eps_v must be positive, got {}", self.eps_v)));
        }
        Ok(())
    }
}

/// One stored sample.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowEntry {
    pub t: f64,
    /// `θ(s̃(τ))`.
    pub theta: DVector<f64>,
    /// `T ν(τ)`.
    pub u: [f64; 12],
    /// Measured feature velocity (all features).
    pub x_dot: DVector<f64>,
    pub n_v: f64,
}

#[derive(Clone, Debug)]
pub struct SlidingWindow {
    capacity: usize,
    eps_v: f64,
    entries: VecDeque<WindowEntry>,
}

impl SlidingWindow {
    pub fn new(capacity: usize, eps_v: f64) -> Self {
        Self {
            capacity,
            eps_v,
            entries: VecDeque::with_capacity(capacity + 1),
        }
    }

    pub fn from_config(config: &AdaptConfig) -> Self {
        Self::new(config.window, config.eps_v)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> impl Iterator<Item = &WindowEntry> {
        self.entries.iter()
    }

    /// `max(‖ẋ‖, ε_v)`.
    pub fn normalization(&self, x_dot: &DVector<f64>) -> f64 {
        x_dot.norm().max(self.eps_v)
    }

    /// Appends a sample, evicting the oldest beyond capacity.
    pub fn push(&mut self, t: f64, theta: DVector<f64>, u: [f64; 12], x_dot: DVector<f64>) -> Result<()> {
        if let Some(last) = self.entries.back() {
            if !(t > last.t) {
                return Err(Error::InvalidArgument(format!(
                    "window timestamps must increase: {t} after {}",
                    last.t
                )));
            }
        }
        let n_v = self.normalization(&x_dot);
        self.entries.push_back(WindowEntry { t, theta, u, x_dot, n_v });
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        Ok(())
    }
}

/// The control-step quantities held fixed during the adaptation substeps.
#[derive(Clone, Debug)]
pub struct CurrentStep {
    pub theta: DVector<f64>,
    /// `T ν(t)`.
    pub u: [f64; 12],
    /// Saturated target error `Δx̃ᶜ`, stacked over `targets`.
    pub error_sat: DVector<f64>,
    pub targets: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateStats {
    /// `Σ_τ ‖eᶜ(τ,t) / n_v(τ)‖²` before the update.
    pub window_loss: f64,
    /// `−(γ/T_w) Σ_τ ‖eᶜ/n_v‖²`, the window term of the Lyapunov derivative.
    pub window_term: f64,
    /// Frobenius norm of the weight increment.
    pub update_norm: f64,
}

/// `φ = θ ⊗ u` laid out to match the weight columns `i·q + h`.
fn regressor(theta: &DVector<f64>, u: &[f64; 12]) -> DVector<f64> {
    let q = theta.len();
    DVector::from_fn(12 * q, |c, _| u[c / q] * theta[c % q])
}

/// Target rows of the weight matrix (`3|C| × 12q`).
fn target_rows(targets: &[usize]) -> Vec<usize> {
    targets.iter().flat_map(|&k| 3 * k..3 * k + 3).collect()
}

/// Window samples as stacked regressors and scaled targets, built once per
/// control step and reused across substeps.
pub struct WindowSystem {
    /// `N × 12q`, rows `φ(τ)/n_v(τ)`.
    phi: DMatrix<f64>,
    /// `N × 3|C|`, rows `ẋᶜ(τ)/n_v(τ)`.
    y: DMatrix<f64>,
    /// `Φ_w Φ_wᵀ`.
    gram: DMatrix<f64>,
}

impl WindowSystem {
    pub fn new(window: &SlidingWindow, targets: &[usize]) -> Self {
        let n = window.len();
        let q12 = window.entries.front().map_or(0, |e| 12 * e.theta.len());
        let mut phi = DMatrix::zeros(n, q12);
        let mut y = DMatrix::zeros(n, 3 * targets.len());
        for (r, e) in window.entries.iter().enumerate() {
            let row = regressor(&e.theta, &e.u) / e.n_v;
            phi.set_row(r, &row.transpose());
            for (t, &k) in targets.iter().enumerate() {
                for j in 0..3 {
                    y[(r, 3 * t + j)] = e.x_dot[3 * k + j] / e.n_v;
                }
            }
        }
        let gram = &phi * phi.transpose();
        Self { phi, y, gram }
    }
}

/// One integration step of the update law with step `dt_update`.
/// Weights of non-target features are untouched.
pub fn update_weights(
    model: &mut RbfnJacobianModel,
    window: &WindowSystem,
    current: &CurrentStep,
    config: &AdaptConfig,
    dt_update: f64,
) -> Result<UpdateStats> {
    let rows = target_rows(&current.targets);
    if current.error_sat.len() != rows.len() {
        return Err(Error::DimensionMismatch {
            expected: rows.len(),
            got: current.error_sat.len(),
        });
    }
    let q12 = 12 * model.q();
    let w_c = model.weights.select_rows(&rows);

    // task-error term: Δx̃ φᵀ
    let phi_now = regressor(&current.theta, &current.u);
    let mut grad = &current.error_sat * phi_now.transpose();

    let mut stats = UpdateStats::default();
    let h = config.eta * dt_update;
    let c = config.gamma / config.window as f64;
    let delta = if window.phi.nrows() > 0 {
        if window.phi.ncols() != q12 {
            return Err(Error::DimensionMismatch {
                expected: q12,
                got: window.phi.ncols(),
            });
        }
        // e(τ)/n_v = ẋ/n_v − Ŵ φ/n_v
        let e = &window.y - &window.phi * w_c.transpose();
        stats.window_loss = e.norm_squared();
        stats.window_term = -c * stats.window_loss;
        match config.integrator {
            Integrator::Explicit => {
                grad += e.transpose() * &window.phi * c;
                grad * h
            }
            Integrator::Implicit => {
                // Ŵ⁺ (I + hc ΦᵀΦ) = Ŵ + h·task + hc·YᵀΦ, solved through the
                // N × N system (I + hc ΦΦᵀ) by the Woodbury identity
                let rhs = &w_c + grad * h + window.y.transpose() * &window.phi * (h * c);
                let n = window.gram.nrows();
                let m = DMatrix::identity(n, n) + &window.gram * (h * c);
                let chol = m.cholesky().ok_or_else(|| {
                    Error::NonFiniteUpdate("window system is not positive definite".into())
                })?;
                let z = chol.solve(&(&window.phi * rhs.transpose()));
                let next = &rhs - (z.transpose() * &window.phi) * (h * c);
                next - &w_c
            }
        }
    } else {
        grad * h
    };
    if delta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteUpdate(format!(
            "weight increment is not finite (window loss {:.3e}, error norm {:.3e})",
            stats.window_loss,
            current.error_sat.norm()
        )));
    }
    stats.update_norm = delta.norm();
    for (r, &row) in rows.iter().enumerate() {
        let mut dst = model.weights.row_mut(row);
        dst += delta.row(r);
    }
    Ok(stats)
}

/// `substeps` updates of length `dt / substeps`, emulating an adaptation
/// rate `substeps` times the control rate. Returns the statistics of the
/// first substep (the state at the control instant).
pub fn adaptation_loop_step(
    model: &mut RbfnJacobianModel,
    window: &SlidingWindow,
    current: &CurrentStep,
    config: &AdaptConfig,
    dt: f64,
) -> Result<UpdateStats> {
    let system = WindowSystem::new(window, &current.targets);
    let h = dt / config.substeps as f64;
    let mut first = None;
    for _ in 0..config.substeps {
        let s = update_weights(model, &system, current, config, h)?;
        first.get_or_insert(s);
    }
    Ok(first.unwrap_or_default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::input_dim;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(m: usize, q: usize, rng: &mut ChaCha8Rng) -> RbfnJacobianModel {
        let centers = DMatrix::from_fn(q, input_dim(m), |_, _| rng.gen_range(-1.0..1.0));
        let mut model = RbfnJacobianModel::new(centers, DVector::from_element(q, 1.5), m).unwrap();
        *model.weights_mut() = DMatrix::from_fn(3 * m, 12 * q, |_, _| rng.gen_range(-0.5..0.5));
        model
    }

    fn random_theta(q: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
        DVector::from_fn(q, |_, _| rng.gen_range(0.0..1.0))
    }

    fn random_u(rng: &mut ChaCha8Rng) -> [f64; 12] {
        std::array::from_fn(|_| rng.gen_range(-0.2..0.2))
    }

    #[test]
    fn window_evicts_oldest() {
        let mut w = SlidingWindow::new(20, 0.01);
        for i in 0..25 {
            w.push(i as f64, DVector::zeros(2), [0.0; 12], DVector::zeros(3)).unwrap();
        }
        assert_eq!(w.len(), 20);
        assert_eq!(w.entries().next().unwrap().t, 5.0);
        assert!(w.push(3.0, DVector::zeros(2), [0.0; 12], DVector::zeros(3)).is_err());
    }

    #[test]
    fn normalization_floor() {
        let w = SlidingWindow::new(20, 0.01);
        assert_eq!(w.normalization(&DVector::from_vec(vec![0.005, 0.0, 0.0])), 0.01);
        assert_eq!(w.normalization(&DVector::from_vec(vec![0.0, 0.5, 0.0])), 0.5);
    }

    #[test]
    fn stationary_and_zero_rate_leave_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = model(3, 4, &mut rng);
        let before = m.weights().clone();
        let cfg = AdaptConfig::default();
        // window samples generated by the model itself: zero prediction error
        let mut w = SlidingWindow::from_config(&cfg);
        for t in 0..5 {
            let theta = random_theta(4, &mut rng);
            let u = random_u(&mut rng);
            let x_dot = m.weights() * regressor(&theta, &u);
            w.push(t as f64, theta, u, x_dot).unwrap();
        }
        let current = CurrentStep {
            theta: random_theta(4, &mut rng),
            u: [0.0; 12],
            error_sat: DVector::from_element(9, 0.1),
            targets: vec![0, 1, 2],
        };
        let stats = adaptation_loop_step(&mut m, &w, &current, &cfg, 0.1).unwrap();
        assert!(stats.window_loss < 1e-28);
        assert!((m.weights() - &before).amax() < 1e-15);

        let zero = AdaptConfig { eta: 0.0, ..cfg };
        let current = CurrentStep {
            u: random_u(&mut rng),
            ..current
        };
        adaptation_loop_step(&mut m, &w, &current, &zero, 0.1).unwrap();
        assert!((m.weights() - &before).amax() < 1e-15);
    }

    #[test]
    fn only_target_rows_change() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = model(4, 3, &mut rng);
        let before = m.weights().clone();
        let cfg = AdaptConfig::default();
        let mut w = SlidingWindow::from_config(&cfg);
        for t in 0..6 {
            let x_dot = DVector::from_fn(12, |_, _| rng.gen_range(-0.1..0.1));
            w.push(t as f64, random_theta(3, &mut rng), random_u(&mut rng), x_dot).unwrap();
        }
        let current = CurrentStep {
            theta: random_theta(3, &mut rng),
            u: random_u(&mut rng),
            error_sat: DVector::from_element(6, 0.05),
            targets: vec![1, 3],
        };
        adaptation_loop_step(&mut m, &w, &current, &cfg, 0.1).unwrap();
        for row in 0..12 {
            let changed = m.weights().row(row) != before.row(row);
            assert_eq!(changed, (3..6).contains(&row) || (9..12).contains(&row), "row {row}");
        }
    }

    #[test]
    fn window_term_descends_its_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = model(2, 3, &mut rng);
        let teacher = DMatrix::from_fn(6, 36, |_, _| rng.gen_range(-0.5..0.5));
        let cfg = AdaptConfig {
            eta: 0.05,
            ..Default::default()
        };
        let mut w = SlidingWindow::from_config(&cfg);
        for t in 0..20 {
            let theta = random_theta(3, &mut rng);
            let u = random_u(&mut rng);
            let x_dot = &teacher * regressor(&theta, &u);
            w.push(t as f64, theta, u, x_dot).unwrap();
        }
        let current = CurrentStep {
            theta: random_theta(3, &mut rng),
            u: [0.0; 12],
            error_sat: DVector::zeros(6),
            targets: vec![0, 1],
        };
        let system = WindowSystem::new(&w, &current.targets);
        let mut last = f64::INFINITY;
        for _ in 0..50 {
            let s = update_weights(&mut m, &system, &current, &cfg, 0.02).unwrap();
            assert!(s.window_loss <= last);
            assert!(s.window_term <= 0.0);
            last = s.window_loss;
        }
    }

    #[test]
    fn substeps_match_one_scaled_step_to_first_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = model(2, 3, &mut rng);
        let cfg = AdaptConfig {
            eta: 1e-6,
            ..Default::default()
        };
        let mut w = SlidingWindow::from_config(&cfg);
        for t in 0..8 {
            let x_dot = DVector::from_fn(6, |_, _| rng.gen_range(-0.1..0.1));
            w.push(t as f64, random_theta(3, &mut rng), random_u(&mut rng), x_dot).unwrap();
        }
        let current = CurrentStep {
            theta: random_theta(3, &mut rng),
            u: random_u(&mut rng),
            error_sat: DVector::from_element(6, 0.1),
            targets: vec![0, 1],
        };
        let mut a = base.clone();
        adaptation_loop_step(&mut a, &w, &current, &cfg, 0.1).unwrap();
        let mut b = base.clone();
        let one = AdaptConfig {
            eta: 5e-6,
            substeps: 1,
            ..cfg.clone()
        };
        adaptation_loop_step(&mut b, &w, &current, &one, 0.02).unwrap();
        assert!((a.weights() - b.weights()).amax() < 1e-6);

        let mut c = base.clone();
        let single = AdaptConfig { substeps: 1, ..cfg.clone() };
        let mut d = base.clone();
        adaptation_loop_step(&mut c, &w, &current, &single, 0.1).unwrap();
        update_weights(&mut d, &WindowSystem::new(&w, &current.targets), &current, &single, 0.1).unwrap();
        assert_eq!(c.weights(), d.weights());
    }

    #[test]
    fn integrators_agree_for_small_steps_and_implicit_stays_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = model(2, 3, &mut rng);
        let mut w = SlidingWindow::new(20, 0.01);
        for t in 0..10 {
            // tiny velocities: n_v sits on the floor and the rows φ/n_v are large
            let x_dot = DVector::from_fn(6, |_, _| rng.gen_range(-1e-3..1e-3));
            w.push(t as f64, random_theta(3, &mut rng), random_u(&mut rng), x_dot).unwrap();
        }
        let current = CurrentStep {
            theta: random_theta(3, &mut rng),
            u: random_u(&mut rng),
            error_sat: DVector::from_element(6, 0.1),
            targets: vec![0, 1],
        };
        let system = WindowSystem::new(&w, &current.targets);
        let explicit = AdaptConfig {
            integrator: Integrator::Explicit,
            ..Default::default()
        };
        let implicit = AdaptConfig::default();

        let (mut a, mut b) = (base.clone(), base.clone());
        update_weights(&mut a, &system, &current, &explicit, 1e-7).unwrap();
        update_weights(&mut b, &system, &current, &implicit, 1e-7).unwrap();
        let step = (a.weights() - base.weights()).amax();
        assert!((a.weights() - b.weights()).amax() < 1e-3 * step, "{} vs {step}", (a.weights() - b.weights()).amax());

        // a control-rate step: explicit Euler overshoots, backward Euler does not
        let frozen = CurrentStep {
            u: [0.0; 12],
            ..current
        };
        let (mut a, mut b) = (base.clone(), base.clone());
        let mut last_a = f64::INFINITY;
        let mut last_b = f64::INFINITY;
        let mut grew = false;
        for _ in 0..5 {
            let sa = update_weights(&mut a, &system, &frozen, &explicit, 0.02).unwrap();
            let sb = update_weights(&mut b, &system, &frozen, &implicit, 0.02).unwrap();
            grew |= sa.window_loss > last_a;
            assert!(sb.window_loss <= last_b);
            last_a = sa.window_loss;
            last_b = sb.window_loss;
        }
        assert!(grew);
    }
}
