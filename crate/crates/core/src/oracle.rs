//! Implicit-function Jacobian against central differences of the
//! equilibrium map.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::derive_seed;
use crate::error::Result;
use crate::metrics::{mean, median};
use crate::rod::{extract_features, DloParams, RodSim, SimConfig};
use crate::state::{EndVelocity, Vec3};

/// Equilibrium reached by `steps` random bounded end motions from a
/// slackened straight start; motions that fail or separate the ends beyond
/// `0.9 L` are skipped.
pub fn random_equilibrium(sim: &SimConfig, dlo: &DloParams, seed: u64, steps: usize) -> Result<RodSim> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = RodSim::straight(sim, dlo, &Vec3::zeros(), 0.8)?;
    for _ in 0..steps {
        let v: Vec<f64> = (0..12).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let nu = EndVelocity::from_slice(&v)?;
        let mut trial = s.clone();
        if trial.apply(&nu, 0.1).is_ok() && trial.ends.separation() < 0.9 * dlo.length {
            s = trial;
        }
    }
    Ok(s)
}

/// Central differences of the feature equilibrium along each of the 12
/// end-velocity directions.
pub fn finite_difference_jacobian(s: &RodSim, eps: f64) -> Result<DMatrix<f64>> {
    let m = s.feature_count();
    let mut j = DMatrix::zeros(3 * m, 12);
    for i in 0..12 {
        let mut e = [0.0; 12];
        e[i] = 1.0;
        let nu = EndVelocity::from_slice(&e)?;
        let xp = extract_features(&s.rod.solve_equilibrium(&s.ends.advanced(&nu, eps), &s.rod.nodes)?, m);
        let xm = extract_features(&s.rod.solve_equilibrium(&s.ends.advanced(&nu, -eps), &s.rod.nodes)?, m);
        for r in 0..3 * m {
            j[(r, i)] = (xp[r] - xm[r]) / (2.0 * eps);
        }
    }
    Ok(j)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub states: usize,
    pub max_relative_error: f64,
    pub median_relative_error: f64,
    pub mean_relative_error: f64,
    /// `‖J − J_fd‖_F / ‖J_fd‖_F` per state.
    pub relative_errors: Vec<f64>,
}

/// Compares the two Jacobians on `count` random equilibria.
pub fn jacobian_oracle(sim: &SimConfig, dlo: &DloParams, count: usize, seed: u64, eps: f64) -> Result<OracleReport> {
    use rayon::prelude::*;
    let errors = (0..count)
        .into_par_iter()
        .map(|i| {
            let s = random_equilibrium(sim, dlo, derive_seed(seed, i as u64), 15)?;
            let j = s.jacobian()?;
            let fd = finite_difference_jacobian(&s, eps)?;
            Ok((&j - &fd).norm() / fd.norm())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(OracleReport {
        states: count,
        max_relative_error: errors.iter().copied().fold(0.0, f64::max),
        median_relative_error: median(&errors),
        mean_relative_error: mean(&errors),
        relative_errors: errors,
    })
}
