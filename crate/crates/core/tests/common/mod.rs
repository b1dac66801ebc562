#![allow(dead_code)]

use dlo_core::controller::Qcqp;
use dlo_core::rod::{extract_features, DloParams, RodSim, SimConfig};
use dlo_core::state::{EndVelocity, Vec3};
use nalgebra::{DMatrix, DVector, RowSVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Projection onto {ν : ν_i = 0 for zeroed i, cᵀν ≤ 0, ‖ν‖ ≤ R}: the
/// subspace and the half-space through the origin are cones, so projecting
/// onto them in turn and then scaling into the ball is exact.
pub fn project(p: &Qcqp, v: &DVector<f64>) -> DVector<f64> {
    let mut out = v.clone();
    for i in 0..12 {
        if p.zeroed[i] {
            out[i] = 0.0;
        }
    }
    if let Some(c) = &p.inequality {
        let mut c = c.transpose();
        for i in 0..12 {
            if p.zeroed[i] {
                c[i] = 0.0;
            }
        }
        let cc = c.norm_squared();
        let viol = c.dot(&out);
        if cc > 0.0 && viol > 0.0 {
            out -= c * (viol / cc);
        }
    }
    let n = out.norm();
    if n > p.nu_max {
        out *= p.nu_max / n;
    }
    out
}

/// Accelerated projected gradient with restarts, run to a tight stationarity
/// tolerance.
pub fn fista(p: &Qcqp, iterations: usize) -> DVector<f64> {
    let h = p.jacobian.transpose() * &p.jacobian + DMatrix::identity(12, 12) * p.lambda;
    let g = p.jacobian.transpose() * &p.target;
    let lip = h.clone().symmetric_eigen().eigenvalues.max().max(1e-12);
    let step = 1.0 / lip;
    let mut x = DVector::zeros(12);
    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut best = p.objective(&x);
    for _ in 0..iterations {
        let grad = &h * &y - &g;
        let next = project(p, &(&y - grad * step));
        let f = p.objective(&next);
        if f > best {
            // restart momentum
            y = x.clone();
            t = 1.0;
            continue;
        }
        best = f;
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = &next + (&next - &x) * ((t - 1.0) / t_next);
        let moved = (&next - &x).norm();
        x = next;
        t = t_next;
        if moved < 1e-15 {
            break;
        }
    }
    x
}

/// Random instance mixing active and inactive ball and half-space
/// constraints, with and without zeroed coordinates.
pub fn random_qcqp(rng: &mut ChaCha8Rng) -> Qcqp {
    let rows = [3, 6, 12, 24][rng.gen_range(0..4)];
    let scale = 10f64.powf(rng.gen_range(-1.0..0.5));
    let jacobian = DMatrix::from_fn(rows, 12, |_, _| rng.gen_range(-1.0..1.0) * scale);
    let mag = 10f64.powf(rng.gen_range(-3.0..0.0));
    let target = DVector::from_fn(rows, |_, _| rng.gen_range(-1.0..1.0) * mag);
    let lambda = if rng.gen_bool(0.3) { 0.0 } else { 10f64.powf(rng.gen_range(-4.0..0.0)) };
    let mut zeroed = [false; 12];
    let inequality = if rng.gen_bool(0.5) {
        let pd: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.5..0.5));
        let mut c = RowSVector::<f64, 12>::zeros();
        for j in 0..3 {
            c[j] = -pd[j];
            c[6 + j] = pd[j];
        }
        for i in (3..6).chain(9..12) {
            zeroed[i] = true;
        }
        Some(c)
    } else {
        if rng.gen_bool(0.2) {
            // planar mask
            for i in [2, 3, 4, 8, 9, 10] {
                zeroed[i] = true;
            }
        }
        None
    };
    Qcqp {
        jacobian,
        target,
        lambda,
        nu_max: 0.2,
        inequality,
        zeroed,
    }
}

pub fn random_nu(rng: &mut ChaCha8Rng, scale: f64) -> EndVelocity {
    let v: Vec<f64> = (0..12).map(|_| rng.gen_range(-scale..scale)).collect();
    EndVelocity::from_slice(&v).unwrap()
}

/// Drives a straight rod with random bounded motions and returns the state.
pub fn random_equilibrium(sim: &SimConfig, dlo: &DloParams, seed: u64, steps: usize) -> RodSim {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = RodSim::straight(sim, dlo, &Vec3::zeros(), 0.8).unwrap();
    for _ in 0..steps {
        let nu = random_nu(&mut rng, 0.1);
        let mut trial = s.clone();
        if trial.apply(&nu, 0.1).is_ok() && trial.ends.separation() < 0.9 * dlo.length {
            s = trial;
        }
    }
    s
}

/// Central differences of the equilibrium map along each end-velocity
/// direction.
pub fn fd_jacobian(s: &RodSim, eps: f64) -> DMatrix<f64> {
    let m = s.feature_count();
    let mut j = DMatrix::zeros(3 * m, 12);
    for i in 0..12 {
        let mut e = [0.0; 12];
        e[i] = 1.0;
        let nu = EndVelocity::from_slice(&e).unwrap();
        let plus = s.ends.advanced(&nu, eps);
        let minus = s.ends.advanced(&nu, -eps);
        let xp = extract_features(&s.rod.solve_equilibrium(&plus, &s.rod.nodes).unwrap(), m);
        let xm = extract_features(&s.rod.solve_equilibrium(&minus, &s.rod.nodes).unwrap(), m);
        for r in 0..3 * m {
            j[(r, i)] = (xp[r] - xm[r]) / (2.0 * eps);
        }
    }
    j
}

