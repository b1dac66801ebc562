//! Offline data collection in the simulator and JSONL persistence.
//!
//! Collection follows the hemispherical-workspace procedure: the workspace is
//! a sphere of radius `L/2` split by the vertical plane normal to the rod's
//! rest axis; at the start of every period each end draws a destination in
//! its own half (position uniform, orientation uniform in a per-axis Euler
//! range) and moves there at constant velocity. Tuples are recorded every
//! `dt` without resets.
//!
//! # JSONL schema
//!
//! One tuple per line:
//!
//! ```json
//! {"t": 0.1, "x": [..3m..], "x_dot": [..3m..], "r": [..14..], "nu": [..12..],
//!  "dlo": {"length": 0.5, "diameter": 10.0}}
//! ```
//!
//! `x_dot` is the backward difference `(x(t) − x(t − dt)) / dt` and `nu` the
//! end velocity applied over `[t − dt, t]`.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rod::{DloParams, RodSim, SimConfig};
use crate::state::{
    angular_velocity_between, quat_from_na, EndPose, EndVelocity, Vec3,
};

/// One `(x, ẋ, r, ν)` record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataTuple {
    pub t: f64,
    pub x: Vec<f64>,
    pub x_dot: Vec<f64>,
    pub r: Vec<f64>,
    pub nu: Vec<f64>,
    pub dlo: DloParams,
}

impl DataTuple {
    pub fn ends(&self) -> EndPose {
        EndPose::from_slice(&self.r).expect("r has 14 entries")
    }

    pub fn feature_count(&self) -> usize {
        self.x.len() / 3
    }

    pub fn is_finite(&self) -> bool {
        [&self.x, &self.x_dot, &self.r, &self.nu]
            .iter()
            .all(|v| v.iter().all(|a| a.is_finite()))
            && self.t.is_finite()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub tuples: Vec<DataTuple>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn extend(&mut self, other: Dataset) {
        self.tuples.extend(other.tuples);
    }

    /// First `n` tuples.
    pub fn truncated(&self, n: usize) -> Dataset {
        Dataset {
            tuples: self.tuples[..n.min(self.len())].to_vec(),
        }
    }
}

impl FromIterator<DataTuple> for Dataset {
    fn from_iter<I: IntoIterator<Item = DataTuple>>(iter: I) -> Self {
        Dataset {
            tuples: iter.into_iter().collect(),
        }
    }
}

/// Which end-velocity components may be non-zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DofMask(pub [bool; 12]);

impl DofMask {
    pub fn full() -> Self {
        Self([true; 12])
    }

    /// In-plane translation (x, y) and rotation about z for both ends.
    pub fn planar() -> Self {
        let mut m = [false; 12];
        for i in [0, 1, 5, 6, 7, 11] {
            m[i] = true;
        }
        Self(m)
    }

    pub fn allows(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn apply(&self, nu: &mut EndVelocity) {
        let mut v = nu.to_vector();
        for i in 0..12 {
            if !self.0[i] {
                v[i] = 0.0;
            }
        }
        *nu = EndVelocity::from_slice(v.as_slice()).unwrap();
    }

    pub fn is_planar(&self) -> bool {
        *self == Self::planar()
    }
}

impl Default for DofMask {
    fn default() -> Self {
        Self::full()
    }
}

/// Gripper sampling region.
#[derive(Clone, Debug, PartialEq)]
pub struct Workspace {
    pub center: Vec3,
    pub radius: f64,
    /// Normal of the vertical plane separating the two halves; the left end
    /// lives on the negative side.
    pub split_normal: Vec3,
    /// Half-range of the uniform per-axis Euler offsets (rad).
    pub orientation_range: [f64; 3],
    /// Restricts sampling to the horizontal plane through `center`.
    pub planar: bool,
}

impl Workspace {
    /// Sphere of radius `L/2` around `center`, split by the plane normal to
    /// `+x`, ±45° orientation offsets.
    pub fn for_length(center: Vec3, length: f64) -> Self {
        Self {
            center,
            radius: 0.5 * length,
            split_normal: Vec3::x(),
            orientation_range: [std::f64::consts::FRAC_PI_4; 3],
            planar: false,
        }
    }

    pub fn planar(mut self) -> Self {
        self.planar = true;
        self.orientation_range[0] = 0.0;
        self.orientation_range[1] = 0.0;
        self
    }

    /// Uniform point in the left (`left = true`) or right half.
    pub fn sample_position<R: Rng>(&self, rng: &mut R, left: bool) -> Vec3 {
        let offset = loop {
            let v = Vec3::new(
                rng.gen_range(-1.0..=1.0),
                rng.gen_range(-1.0..=1.0),
                if self.planar { 0.0 } else { rng.gen_range(-1.0..=1.0) },
            );
            if v.norm_squared() <= 1.0 {
                break v * self.radius;
            }
        };
        let n = self.split_normal.normalize();
        let side = offset.dot(&n);
        let flipped = if (left && side > 0.0) || (!left && side < 0.0) {
            offset - n * (2.0 * side)
        } else {
            offset
        };
        self.center + flipped
    }

    pub fn sample_orientation<R: Rng>(&self, rng: &mut R) -> [f64; 4] {
        let a: [f64; 3] = std::array::from_fn(|i| {
            let r = self.orientation_range[i];
            if r > 0.0 {
                rng.gen_range(-r..=r)
            } else {
                0.0
            }
        });
        quat_from_na(&nalgebra::UnitQuaternion::from_euler_angles(a[0], a[1], a[2]))
    }

    pub fn contains_left(&self, p: &Vec3) -> bool {
        (p - self.center).norm() <= self.radius * (1.0 + 1e-12)
            && (p - self.center).dot(&self.split_normal) <= 1e-12
    }

    pub fn contains_right(&self, p: &Vec3) -> bool {
        (p - self.center).norm() <= self.radius * (1.0 + 1e-12)
            && (p - self.center).dot(&self.split_normal) >= -1e-12
    }
}

/// Collection schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectionConfig {
    /// Seconds per destination.
    pub period: f64,
    /// Sampling interval (s).
    pub dt: f64,
    /// Destinations with `‖p2 − p1‖` above this fraction of `L` are resampled.
    pub separation_guard: f64,
    /// Euler offset half-range (degrees).
    pub orientation_range_deg: f64,
}

impl Default for CollectionConfig {
    fn default() -> Self {
        Self {
            period: 2.0,
            dt: 0.1,
            separation_guard: 0.95,
            orientation_range_deg: 45.0,
        }
    }
}

impl CollectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !(self.period > self.dt) {
            return Err(Error::InvalidArgument(format!(
                "collection needs period > dt > 0 (period {}, dt {})",
                self.period, self.dt
            )));
        }
        if !(self.separation_guard > 0.0 && self.separation_guard <= 1.0) {
            return Err(Error::InvalidArgument("separation_guard must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Duration giving exactly `samples` tuples at interval `dt`.
pub fn duration_for_samples(samples: usize, dt: f64) -> f64 {
    (samples + 1) as f64 * dt
}

/// Number of tuples recorded over `duration`: one per `dt`, minus the first
/// instant, which has no previous frame to difference against.
pub fn samples_for_duration(duration: f64, dt: f64) -> usize {
    ((duration / dt).round() as usize).saturating_sub(1)
}

/// Gripper separation of the straight start, as a fraction of `L`. Exactly
/// `L` leaves stiff rods in a degenerate taut state the Newton solve cannot
/// resolve below its tolerance.
pub const START_SEPARATION: f64 = 0.99;

/// A fresh straight rod for collection on `dlo`, 2D or 3D.
pub fn collection_sim(sim: &SimConfig, dlo: &DloParams, planar: bool) -> Result<RodSim> {
    let mut cfg = sim.clone();
    if planar {
        // on a table: gravity is carried by the support
        cfg.gravity = [0.0; 3];
        cfg.planar = true;
    }
    RodSim::straight(&cfg, dlo, &Vec3::zeros(), START_SEPARATION)
}

/// Random-destination collection on a running simulator.
pub fn collect_random(
    sim: &mut RodSim,
    duration: f64,
    workspace: &Workspace,
    config: &CollectionConfig,
    mask: &DofMask,
    dlo: &DloParams,
    seed: u64,
) -> Result<Dataset> {
    config.validate()?;
    let dt = config.dt;
    let total = samples_for_duration(duration, dt);
    let steps_per_period = (config.period / dt).round().max(1.0) as usize;
    let period = steps_per_period as f64 * dt;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(total);
    let mut x_prev = sim.features();
    let mut consecutive_failures = 0usize;

    while out.len() < total {
        let (p1, q1, p2, q2) = loop {
            let p1 = workspace.sample_position(&mut rng, true);
            let p2 = workspace.sample_position(&mut rng, false);
            let q1 = workspace.sample_orientation(&mut rng);
            let q2 = workspace.sample_orientation(&mut rng);
            if (p2 - p1).norm() <= config.separation_guard * sim.length() {
                break (p1, q1, p2, q2);
            }
        };
        let mut nu = EndVelocity {
            v1: (p1 - sim.ends.p1) / period,
            w1: angular_velocity_between(&sim.ends.q1, &q1, period),
            v2: (p2 - sim.ends.p2) / period,
            w2: angular_velocity_between(&sim.ends.q2, &q2, period),
        };
        mask.apply(&mut nu);
        let nu_vec = nu.to_vector().as_slice().to_vec();

        for _ in 0..steps_per_period {
            if out.len() >= total {
                break;
            }
            if let Err(e) = sim.apply(&nu, dt) {
                warn!("collection step failed at t = {:.2} s: {e}; resampling", sim.time);
                consecutive_failures += 1;
                if consecutive_failures > 100 {
                    return Err(e);
                }
                break;
            }
            consecutive_failures = 0;
            let x = sim.features();
            let x_dot = x.iter().zip(&x_prev).map(|(a, b)| (a - b) / dt).collect();
            out.push(DataTuple {
                t: sim.time,
                x: x.clone(),
                x_dot,
                r: sim.ends.to_vector().as_slice().to_vec(),
                nu: nu_vec.clone(),
                dlo: dlo.clone(),
            });
            x_prev = x;
        }
    }
    Ok(Dataset { tuples: out })
}

/// Per-DLO collections, concatenated in list order. DLO `i` uses a seed
/// derived from `seed` and `i`.
pub fn collect_domain_randomized(
    sim_config: &SimConfig,
    dlos: &[DloParams],
    per_dlo_duration: f64,
    config: &CollectionConfig,
    planar: bool,
    seed: u64,
) -> Result<Dataset> {
    if dlos.is_empty() {
        return Err(Error::InvalidArgument("empty DLO list".into()));
    }
    use rayon::prelude::*;
    let parts = dlos
        .par_iter()
        .enumerate()
        .map(|(i, dlo)| collect_one(sim_config, dlo, per_dlo_duration, config, planar, derive_seed(seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Dataset::default();
    for p in parts {
        out.extend(p);
    }
    Ok(out)
}

/// Straight start plus [`collect_random`] on a single DLO.
pub fn collect_one(
    sim_config: &SimConfig,
    dlo: &DloParams,
    duration: f64,
    config: &CollectionConfig,
    planar: bool,
    seed: u64,
) -> Result<Dataset> {
    let mut sim = collection_sim(sim_config, dlo, planar)?;
    let mut ws = Workspace::for_length(Vec3::zeros(), dlo.length);
    ws.orientation_range = [config.orientation_range_deg.to_radians(); 3];
    let mask = if planar {
        ws = ws.planar();
        DofMask::planar()
    } else {
        DofMask::full()
    };
    collect_random(&mut sim, duration, &ws, config, &mask, dlo, seed)
}

/// SplitMix64 mixing of `(seed, index)`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for t in &dataset.tuples {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    parse_dataset(std::io::BufReader::new(file), &path.display().to_string())
}

/// Parses JSONL from any reader; `origin` labels errors.
pub fn parse_dataset<R: BufRead>(reader: R, origin: &str) -> Result<Dataset> {
    let mut tuples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: DataTuple = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: origin.to_string(),
            line: i + 1,
            detail: e.to_string(),
        })?;
        let m3 = t.x.len();
        if m3 == 0 || m3 % 3 != 0 || t.x_dot.len() != m3 || t.r.len() != 14 || t.nu.len() != 12 {
            return Err(Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                detail: "inconsistent vector lengths".into(),
            });
        }
        tuples.push(t);
    }
    Ok(Dataset { tuples })
}
