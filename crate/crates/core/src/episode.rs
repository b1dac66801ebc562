//! Closed-loop shape-control episodes on a plant, for every method.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adapt::{adaptation_loop_step, AdaptConfig, CurrentStep, SlidingWindow};
use crate::baselines::{naive_p_control, wls_initialize, Mppi, MppiConfig, WlsConfig, WlsEstimator};
use crate::controller::{control_from_jacobian, saturate_error, select_rows, ControllerConfig};
use crate::datasets::{DofMask, Workspace, START_SEPARATION};
use crate::error::{Error, Result};
use crate::metrics::{relative_deformation, translation, EpisodeResult};
use crate::plant::Plant;
use crate::rbfn::RbfnJacobianModel;
use crate::rod::{extract_features, DloParams, RodSim, RodSystem, SimConfig};
use crate::state::{angular_velocity_between, encoding_scale, EndPose, EndVelocity, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Ours,
    OursNoAdapt,
    Wls,
    Mppi,
    NaiveP,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Ours, Method::OursNoAdapt, Method::Wls, Method::Mppi, Method::NaiveP];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::OursNoAdapt => "ours-no-adapt",
            Method::Wls => "wls",
            Method::Mppi => "mppi",
            Method::NaiveP => "naive-p",
        }
    }

    pub fn needs_model(self) -> bool {
        !matches!(self, Method::Wls)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeConfig {
    /// Seconds.
    pub duration: f64,
    pub dt: f64,
    /// Standard deviation of the Gaussian noise on observed feature
    /// positions (m).
    pub noise_std: f64,
    pub controller: ControllerConfig,
    pub adaptation: AdaptConfig,
    pub wls: WlsConfig,
    pub mppi: MppiConfig,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            duration: 30.0,
            dt: 0.1,
            noise_std: 0.0,
            controller: ControllerConfig::default(),
            adaptation: AdaptConfig::default(),
            wls: WlsConfig::default(),
            mppi: MppiConfig::default(),
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self, m: usize) -> Result<()> {
        if !(self.dt > 0.0) || !(self.duration >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "episode needs dt > 0 and duration ≥ 0 (dt {}, duration {})",
                self.dt, self.duration
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::InvalidArgument("noise_std must be non-negative".into()));
        }
        self.controller.validate(m)?;
        self.adaptation.validate()?;
        self.mppi.validate()
    }
}

/// Per-control-step record, one JSONL line each.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub t: f64,
    /// `‖Δxᶜ‖` on the true shape.
    pub error: f64,
    pub nu: Vec<f64>,
    pub nu_norm: f64,
    /// `(Δx̃ᶜ)ᵀ Ĵᶜ ν`, when the QCQP law was used.
    pub descent: Option<f64>,
    pub window_loss: Option<f64>,
    pub window_term: Option<f64>,
    pub update_norm: Option<f64>,
    pub near_overstretch: bool,
    pub max_strain: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub method: Method,
    pub result: EpisodeResult,
    pub steps: Vec<StepLog>,
    /// Time spent probing before control starts (WLS only).
    pub init_time: f64,
    pub max_nu_norm: f64,
    pub max_strain: Option<f64>,
    /// Plant failure that ended the episode early.
    pub aborted: Option<String>,
}

impl EpisodeLog {
    /// Steps with `(Δx̃ᶜ)ᵀĴᶜν > tol` or a positive window term.
    pub fn lyapunov_violations(&self, tol: f64) -> usize {
        self.steps
            .iter()
            .filter(|s| s.descent.is_some_and(|d| d > tol) || s.window_term.is_some_and(|w| w > 0.0))
            .count()
    }
}

fn observe(x: &[f64], noise: Option<&Normal<f64>>, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match noise {
        Some(n) => x.iter().map(|v| v + n.sample(rng)).collect(),
        None => x.to_vec(),
    }
}

fn error_norm(x: &[f64], x_des: &[f64], targets: &[usize]) -> f64 {
    (select_rows(x, targets) - select_rows(x_des, targets)).norm()
}

/// Runs one episode of `method` toward `x_des`. Methods other than WLS need
/// `model`; only `Ours` modifies its copy.
pub fn run_episode<P: Plant + ?Sized>(
    plant: &mut P,
    model: Option<&RbfnJacobianModel>,
    x_des: &[f64],
    method: Method,
    config: &EpisodeConfig,
    seed: u64,
) -> Result<EpisodeLog> {
    let x0 = plant.features();
    let m = x0.len() / 3;
    config.validate(m)?;
    if x_des.len() != x0.len() {
        return Err(Error::DimensionMismatch {
            expected: x0.len(),
            got: x_des.len(),
        });
    }
    let mut model = match (method.needs_model(), model) {
        (true, Some(mo)) => Some(mo.clone()),
        (true, None) => return Err(Error::InvalidArgument(format!("method {} needs a model", method.name()))),
        (false, _) => None,
    };
    let ctrl = &config.controller;
    let targets = ctrl.target_indices(m);
    let length = plant.length();
    let dt = config.dt;
    let steps = (config.duration / dt).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = (config.noise_std > 0.0).then(|| Normal::new(0.0, config.noise_std).expect("positive std"));

    let mut init_time = 0.0;
    let mut wls: Option<WlsEstimator> = None;
    if method == Method::Wls {
        let (est, t) = wls_initialize(plant, &config.wls, &ctrl.dof_mask, dt)?;
        wls = Some(est);
        init_time = t;
    }
    let mut mppi = (method == Method::Mppi).then(|| Mppi::new(config.mppi.clone(), rng.gen())).transpose()?;
    let mut window = SlidingWindow::from_config(&config.adaptation);
    let scale = match &model {
        Some(mo) => Some(encoding_scale(mo.encoding(), length)?),
        None => None,
    };

    let start = plant.features();
    let mut trace = Vec::with_capacity(steps + 1);
    let mut logs = Vec::with_capacity(steps);
    let mut max_nu: f64 = 0.0;
    let mut max_strain = plant.max_strain();
    let mut aborted = None;
    let mut x_obs = observe(&start, normal.as_ref(), &mut rng);
    trace.push((0.0, error_norm(&start, x_des, &targets)));

    for step in 0..steps {
        let t = step as f64 * dt;
        let ends = plant.ends();
        let dx = select_rows(&x_obs, &targets) - select_rows(x_des, &targets);
        let mut log = StepLog {
            t,
            error: trace.last().map_or(0.0, |&(_, e)| e),
            ..Default::default()
        };
        let mut theta = None;
        let mut error_sat = None;

        let nu = match method {
            Method::Ours | Method::OursNoAdapt | Method::NaiveP => {
                let mo = model.as_ref().unwrap();
                let s = mo.input(&x_obs, &ends)?;
                let th = mo.activations(s.as_slice())?;
                let jc = mo.target_jacobian_from_activations(&th, length, &targets)?;
                if method == Method::NaiveP {
                    naive_p_control(&jc, &saturate_error(&dx, ctrl.eps_x), ctrl.alpha, &ctrl.dof_mask)?
                } else {
                    let out = control_from_jacobian(&jc, &dx, &x_obs, &ends, ctrl)?;
                    log.descent = Some(out.descent);
                    log.near_overstretch = out.near_overstretch;
                    theta = Some(th);
                    error_sat = Some(out.error_sat);
                    out.nu
                }
            }
            Method::Wls => {
                let est = wls.as_ref().unwrap();
                let j = est.estimate().expect("initialized");
                let rows: Vec<usize> = targets.iter().flat_map(|&k| 3 * k..3 * k + 3).collect();
                let jc = j.select_rows(&rows);
                let out = control_from_jacobian(&jc, &dx, &x_obs, &ends, ctrl)?;
                log.descent = Some(out.descent);
                log.near_overstretch = out.near_overstretch;
                out.nu
            }
            Method::Mppi => {
                let planner = mppi.as_mut().unwrap();
                planner.plan(
                    model.as_ref().unwrap(),
                    &x_obs,
                    &ends,
                    x_des,
                    &targets,
                    &ctrl.dof_mask,
                    length,
                    dt,
                )?
            }
        };
        log.nu = nu.to_vector().as_slice().to_vec();
        log.nu_norm = nu.norm();
        max_nu = max_nu.max(log.nu_norm);

        if let Err(e) = plant.apply(&nu, dt) {
            aborted = Some(e.to_string());
            logs.push(log);
            break;
        }
        let x_true = plant.features();
        let x_next = observe(&x_true, normal.as_ref(), &mut rng);
        let x_dot = (DVector::from_row_slice(&x_next) - DVector::from_row_slice(&x_obs)) / dt;
        log.max_strain = plant.max_strain();
        if let (Some(a), Some(b)) = (max_strain, log.max_strain) {
            max_strain = Some(a.max(b));
        }

        match method {
            Method::Ours => {
                let mo = model.as_mut().unwrap();
                let u = scale.as_ref().unwrap().apply(nu.to_vector().as_slice());
                let theta = theta.unwrap();
                window.push(t, theta.clone(), u, x_dot)?;
                let current = CurrentStep {
                    theta,
                    u,
                    error_sat: error_sat.unwrap(),
                    targets: targets.clone(),
                };
                let stats = adaptation_loop_step(mo, &window, &current, &config.adaptation, dt)?;
                log.window_loss = Some(stats.window_loss);
                log.window_term = Some(stats.window_term);
                log.update_norm = Some(stats.update_norm);
            }
            Method::Wls => {
                let est = wls.as_mut().unwrap();
                est.push(x_dot, nu.to_vector());
                est.refit()?;
            }
            _ => {}
        }
        x_obs = x_next;
        trace.push((t + dt, error_norm(&x_true, x_des, &targets)));
        logs.push(log);
    }

    let result = EpisodeResult::from_trace(
        trace,
        translation(&start, x_des)?,
        relative_deformation(&start, x_des)?,
    );
    Ok(EpisodeLog {
        method,
        result,
        steps: logs,
        init_time,
        max_nu_norm: max_nu,
        max_strain,
        aborted,
    })
}

/// Where a desired shape came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesiredShape {
    pub features: Vec<f64>,
    pub ends: EndPose,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DesiredShapeConfig {
    /// Random end motions from the straight start.
    pub legs: usize,
    /// Seconds per leg.
    pub leg_duration: f64,
    pub dt: f64,
    /// Destination gripper separation bound, as a fraction of `L`.
    pub separation_guard: f64,
    /// Euler offset half-range (degrees).
    pub orientation_range_deg: f64,
    /// Workspace radius as a fraction of `L`.
    pub workspace_radius: f64,
}

impl Default for DesiredShapeConfig {
    fn default() -> Self {
        Self {
            legs: 2,
            leg_duration: 3.0,
            dt: 0.1,
            separation_guard: 0.9,
            orientation_range_deg: 30.0,
            workspace_radius: 0.5,
        }
    }
}

/// Initial shape of every episode: straight, ends nearly `L` apart.
pub fn start_sim(sim: &SimConfig, dlo: &DloParams, planar: bool) -> Result<RodSim> {
    let mut cfg = sim.clone();
    if planar {
        cfg.gravity = [0.0; 3];
        cfg.planar = true;
    }
    RodSim::straight(&cfg, dlo, &Vec3::zeros(), START_SEPARATION)
}

/// A feasible desired shape: the equilibrium reached by moving the ends
/// of `dlo` from the straight start through random destinations.
pub fn random_desired_shape(
    sim: &SimConfig,
    dlo: &DloParams,
    config: &DesiredShapeConfig,
    mask: &DofMask,
    seed: u64,
) -> Result<DesiredShape> {
    let planar = mask.is_planar();
    let mut rod = start_sim(sim, dlo, planar)?;
    let mut ws = Workspace::for_length(Vec3::zeros(), dlo.length);
    ws.radius = config.workspace_radius * dlo.length;
    ws.orientation_range = [config.orientation_range_deg.to_radians(); 3];
    if planar {
        ws = ws.planar();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = (config.leg_duration / config.dt).round().max(1.0) as usize;
    let period = steps as f64 * config.dt;
    for _ in 0..config.legs {
        let (p1, q1, p2, q2) = loop {
            let p1 = ws.sample_position(&mut rng, true);
            let p2 = ws.sample_position(&mut rng, false);
            if (p2 - p1).norm() <= config.separation_guard * dlo.length {
                break (p1, ws.sample_orientation(&mut rng), p2, ws.sample_orientation(&mut rng));
            }
        };
        let mut nu = EndVelocity {
            v1: (p1 - rod.ends.p1) / period,
            w1: angular_velocity_between(&rod.ends.q1, &q1, period),
            v2: (p2 - rod.ends.p2) / period,
            w2: angular_velocity_between(&rod.ends.q2, &q2, period),
        };
        mask.apply(&mut nu);
        for _ in 0..steps {
            rod.apply(&nu, config.dt)?;
        }
    }
    Ok(DesiredShape {
        features: rod.features(),
        ends: rod.ends.clone(),
    })
}

/// `count` desired shapes with seeds derived from `seed`.
pub fn desired_shapes(
    sim: &SimConfig,
    dlo: &DloParams,
    config: &DesiredShapeConfig,
    mask: &DofMask,
    count: usize,
    seed: u64,
) -> Result<Vec<DesiredShape>> {
    use rayon::prelude::*;
    (0..count)
        .into_par_iter()
        .map(|i| random_desired_shape(sim, dlo, config, mask, crate::datasets::derive_seed(seed, i as u64)))
        .collect()
}

/// Straight line of chord `ratio · L` between the straight-start grippers,
/// with the features at their rest fractions along it.
pub fn stretched_shape(sim: &SimConfig, dlo: &DloParams, ratio: f64) -> Result<DesiredShape> {
    if !(ratio > 0.0) {
        return Err(Error::InvalidArgument(format!("chord ratio must be positive, got {ratio}")));
    }
    let n = sim.node_count;
    let chord = ratio * dlo.length;
    let nodes: Vec<Vec3> = (0..n)
        .map(|i| Vec3::new((i as f64 / (n - 1) as f64 - 0.5) * chord, 0.0, 0.0))
        .collect();
    Ok(DesiredShape {
        features: extract_features(&nodes, sim.feature_count),
        ends: RodSystem::straight_ends(&Vec3::zeros(), chord),
    })
}

/// One episode per desired shape, each on a fresh straight-start plant of
/// `dlo`; results are in shape order.
pub fn run_battery(
    sim: &SimConfig,
    dlo: &DloParams,
    model: Option<&RbfnJacobianModel>,
    shapes: &[DesiredShape],
    method: Method,
    config: &EpisodeConfig,
    seed: u64,
) -> Result<Vec<EpisodeLog>> {
    use rayon::prelude::*;
    let planar = config.controller.dof_mask.is_planar();
    shapes
        .par_iter()
        .enumerate()
        .map(|(i, d)| {
            let mut plant = start_sim(sim, dlo, planar)?;
            run_episode(
                &mut plant,
                model,
                &d.features,
                method,
                config,
                crate::datasets::derive_seed(seed, i as u64),
            )
        })
        .collect()
}
