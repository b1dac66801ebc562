//! Comparison controllers: sliding-window weighted least-squares Jacobian
//! estimation, MPPI over a learned model, and the undamped pseudoinverse
//! P controller.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::{saturate_error, select_rows};
use crate::datasets::DofMask;
use crate::error::{Error, Result};
use crate::plant::Plant;
use crate::rbfn::{predict_shape_rollout, JacobianModel};
use crate::state::{EndPose, EndVelocity};

// ---------------------------------------------------------------- WLS

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WlsConfig {
    pub window: usize,
    /// Per-step age decay of the sample weights.
    pub decay: f64,
    /// Displacement per probe step (m or rad).
    pub probe_amplitude: f64,
    /// Ridge added when the weighted Gram matrix is rank-deficient.
    pub ridge: f64,
}

impl Default for WlsConfig {
    fn default() -> Self {
        Self {
            window: 50,
            decay: 0.95,
            probe_amplitude: 0.005,
            ridge: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct WlsEstimator {
    config: WlsConfig,
    /// Newest first: (ẋ, ν).
    samples: VecDeque<(DVector<f64>, DVector<f64>)>,
    estimate: Option<DMatrix<f64>>,
}

impl WlsEstimator {
    pub fn new(config: WlsConfig) -> Self {
        Self {
            config,
            samples: VecDeque::new(),
            estimate: None,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The estimate is trusted once the window holds one sample per DoF.
    pub fn is_valid(&self) -> bool {
        self.samples.len() >= 12 && self.estimate.is_some()
    }

    pub fn estimate(&self) -> Option<&DMatrix<f64>> {
        self.estimate.as_ref()
    }

    /// Adds a measured `(ẋ, ν)` pair.
    pub fn push(&mut self, x_dot: DVector<f64>, nu: DVector<f64>) {
        self.samples.push_front((x_dot, nu));
        self.samples.truncate(self.config.window);
    }

    /// Weighted least squares `Ĵ = Σ w ẋ νᵀ (Σ w ν νᵀ)⁻¹`, `w = ρ^age`.
    pub fn refit(&mut self) -> Result<&DMatrix<f64>> {
        let rows = match self.samples.front() {
            Some((xd, _)) => xd.len(),
            None => return Err(Error::InvalidArgument("WLS window is empty".into())),
        };
        let mut gram = DMatrix::<f64>::zeros(12, 12);
        let mut cross = DMatrix::<f64>::zeros(rows, 12);
        let mut w = 1.0;
        for (xd, nu) in &self.samples {
            gram += nu * nu.transpose() * w;
            cross += xd * nu.transpose() * w;
            w *= self.config.decay;
        }
        let eig = gram.clone().symmetric_eigen();
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        if !(min > 1e-12 * max.max(f64::MIN_POSITIVE)) {
            for i in 0..12 {
                gram[(i, i)] += self.config.ridge * max.max(1.0);
            }
        }
        let inv = gram
            .cholesky()
            .ok_or_else(|| Error::IndefiniteHessian {
                context: "WLS Gram matrix".into(),
            })?
            .inverse();
        self.estimate = Some(cross * inv);
        Ok(self.estimate.as_ref().unwrap())
    }
}

/// Moves the ends once along each DoF (one control step per probe) and fits
/// the first estimate. Returns the estimator and the time spent probing.
pub fn wls_initialize<P: Plant + ?Sized>(
    plant: &mut P,
    config: &WlsConfig,
    mask: &DofMask,
    dt: f64,
) -> Result<(WlsEstimator, f64)> {
    if !(config.probe_amplitude > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "WLS probe amplitude must be positive, got {}",
            config.probe_amplitude
        )));
    }
    let mut est = WlsEstimator::new(config.clone());
    let mut elapsed = 0.0;
    for i in (0..12).filter(|&i| mask.allows(i)) {
        let mut v = [0.0; 12];
        v[i] = config.probe_amplitude / dt;
        let nu = EndVelocity::from_slice(&v)?;
        let x0 = DVector::from_vec(plant.features());
        plant.apply(&nu, dt)?;
        let x1 = DVector::from_vec(plant.features());
        est.push((x1 - x0) / dt, nu.to_vector());
        elapsed += dt;
    }
    est.refit()?;
    Ok((est, elapsed))
}

// ---------------------------------------------------------------- naive P

/// `ν = −α (Ĵᶜ)† Δx̃ᶜ` with the Moore–Penrose pseudoinverse; no damping and
/// no speed limit. Masked DoFs are removed from `Ĵᶜ`.
pub fn naive_p_control(jc: &DMatrix<f64>, dx_sat: &DVector<f64>, alpha: f64, mask: &DofMask) -> Result<EndVelocity> {
    let mut j = jc.clone();
    for i in 0..12 {
        if !mask.allows(i) {
            j.column_mut(i).fill(0.0);
        }
    }
    let svd = j.svd(true, true);
    let tol = f64::EPSILON * jc.nrows().max(12) as f64 * svd.singular_values.max();
    let pinv = svd
        .pseudo_inverse(tol)
        .map_err(|e| Error::InvalidArgument(format!("pseudoinverse failed: {e}")))?;
    let nu = pinv * dx_sat * -alpha;
    EndVelocity::from_slice(nu.as_slice())
}

// ---------------------------------------------------------------- MPPI

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MppiConfig {
    pub horizon: usize,
    pub samples: usize,
    /// Standard deviation of the action perturbations per ν component.
    pub noise_std: f64,
    pub temperature: f64,
    /// Action-cost weight `λ`.
    pub action_weight: f64,
    pub nu_max: f64,
    /// Rollouts whose gripper separation exceeds this multiple of the DLO
    /// length are rejected.
    pub max_separation_ratio: f64,
}

impl Default for MppiConfig {
    fn default() -> Self {
        Self {
            horizon: 10,
            samples: 1000,
            noise_std: 0.05,
            temperature: 0.1,
            action_weight: 0.01,
            nu_max: 0.2,
            max_separation_ratio: 1.0,
        }
    }
}

impl MppiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.samples == 0 {
            return Err(Error::InvalidArgument("mppi.horizon and mppi.samples must be at least 1".into()));
        }
        if !(self.temperature > 0.0) || !(self.nu_max > 0.0) || !(self.noise_std >= 0.0) {
            return Err(Error::InvalidArgument(
                "mppi.temperature and mppi.nu_max must be positive, mppi.noise_std non-negative".into(),
            ));
        }
        Ok(())
    }
}

fn clamp_ball(v: &mut [f64], radius: f64) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > radius {
        for x in v.iter_mut() {
            *x *= radius / n;
        }
    }
}

/// Normalized information-theoretic weights `exp(−(c − c_min)/T)`; `None`
/// costs (invalid rollouts) get weight zero.
pub fn mppi_weights(costs: &[Option<f64>], temperature: f64) -> Vec<f64> {
    let min = costs.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return vec![0.0; costs.len()];
    }
    let raw: Vec<f64> = costs
        .iter()
        .map(|c| c.map_or(0.0, |c| (-(c - min) / temperature).exp()))
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Sampling MPC with a warm-started nominal action sequence.
#[derive(Clone, Debug)]
pub struct Mppi {
    pub config: MppiConfig,
    nominal: Vec<[f64; 12]>,
    rng: ChaCha8Rng,
}

impl Mppi {
    pub fn new(config: MppiConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            nominal: vec![[0.0; 12]; config.horizon],
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// First action of the cost-weighted mean of `K` perturbed sequences.
    #[allow(clippy::too_many_arguments)]
    pub fn plan<M: JacobianModel + Sync + ?Sized>(
        &mut self,
        model: &M,
        x: &[f64],
        ends: &EndPose,
        x_des: &[f64],
        targets: &[usize],
        mask: &DofMask,
        length: f64,
        dt: f64,
    ) -> Result<EndVelocity> {
        let cfg = &self.config;
        let th = cfg.horizon;
        let normal = Normal::new(0.0, cfg.noise_std.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let seqs: Vec<Vec<[f64; 12]>> = (0..cfg.samples)
            .map(|_| {
                self.nominal
                    .iter()
                    .map(|a| {
                        let mut v: [f64; 12] = std::array::from_fn(|i| {
                            if mask.allows(i) {
                                a[i] + if cfg.noise_std > 0.0 { normal.sample(&mut self.rng) } else { 0.0 }
                            } else {
                                0.0
                            }
                        });
                        clamp_ball(&mut v, cfg.nu_max);
                        v
                    })
                    .collect()
            })
            .collect();
        let des = select_rows(x_des, targets);
        let max_sep = cfg.max_separation_ratio * length;
        let costs: Vec<Option<f64>> = seqs
            .par_iter()
            .map(|seq| {
                let actions: Vec<EndVelocity> = seq
                    .iter()
                    .map(|a| EndVelocity::from_slice(a).expect("12 entries"))
                    .collect();
                let roll = predict_shape_rollout(model, x, ends, &actions, dt, length).ok()?;
                if roll.truncated_at.is_some() || roll.ends.iter().any(|e| e.separation() > max_sep) {
                    return None;
                }
                let last = roll.shapes.last()?;
                if last.iter().any(|v| !v.is_finite()) {
                    return None;
                }
                let terminal = (select_rows(last, targets) - &des).norm_squared();
                let effort: f64 = seq.iter().map(|a| a.iter().map(|v| v * v).sum::<f64>()).sum();
                Some(0.5 * terminal + 0.5 * cfg.action_weight * effort)
            })
            .collect();
        let weights = mppi_weights(&costs, cfg.temperature);
        let mut mean = vec![[0.0; 12]; th];
        if weights.iter().any(|&w| w > 0.0) {
            for (seq, &w) in seqs.iter().zip(&weights) {
                for (m, a) in mean.iter_mut().zip(seq) {
                    for i in 0..12 {
                        m[i] += w * a[i];
                    }
                }
            }
        }
        for m in mean.iter_mut() {
            clamp_ball(m, cfg.nu_max);
        }
        let first = mean[0];
        // shift the plan for the next call
        self.nominal = mean[1..].to_vec();
        self.nominal.push([0.0; 12]);
        EndVelocity::from_slice(&first)
    }
}

/// One MPPI plan from a zero nominal sequence.
#[allow(clippy::too_many_arguments)]
pub fn mppi_plan<M: JacobianModel + Sync + ?Sized>(
    model: &M,
    x: &[f64],
    ends: &EndPose,
    x_des: &[f64],
    targets: &[usize],
    mask: &DofMask,
    length: f64,
    dt: f64,
    config: &MppiConfig,
    seed: u64,
) -> Result<EndVelocity> {
    Mppi::new(config.clone(), seed)?.plan(model, x, ends, x_des, targets, mask, length, dt)
}

/// Saturated target error helper shared by the baselines.
pub fn target_error(x: &[f64], x_des: &[f64], targets: &[usize], eps_x: f64) -> DVector<f64> {
    saturate_error(&(select_rows(x, targets) - select_rows(x_des, targets)), eps_x)
}
