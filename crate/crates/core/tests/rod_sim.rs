mod common;

use common::{fd_jacobian, random_equilibrium, random_nu};
use dlo_core::rod::{strain_check, DloParams, RodSystem, SimConfig};
use dlo_core::state::{block_rotation, rotate_ends, rotation_z, EndPose, EndVelocity, Vec3};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn jacobian_matches_finite_differences() {
    let dlo = DloParams::table(0).unwrap();
    let sim = SimConfig::default();
    for seed in 0..4 {
        let s = random_equilibrium(&sim, &dlo, seed, 15);
        let j = s.jacobian().unwrap();
        let fd = fd_jacobian(&s, 1e-5);
        let rel = (&j - &fd).norm() / fd.norm();
        assert!(rel < 1e-3, "seed {seed}: relative error {rel:e}");
    }
}

#[test]
fn equilibria_have_small_residual_and_lower_energy_than_warm_start() {
    let dlo = DloParams::table(0).unwrap();
    let sim = SimConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let s = random_equilibrium(&sim, &dlo, 3, 10);
    for _ in 0..5 {
        let ends = s.ends.advanced(&random_nu(&mut rng, 0.1), 0.2);
        let warm = s.rod.nodes.clone();
        let (nodes, report) = s.rod.solve_equilibrium_report(&ends, &warm).unwrap();
        assert!(report.residual < 1e-8, "residual {}", report.residual);
        let mut clamped = warm.clone();
        let c = s.rod.clamp_nodes(&ends);
        let n = clamped.len();
        clamped[0] = c[0];
        clamped[1] = c[1];
        clamped[n - 2] = c[2];
        clamped[n - 1] = c[3];
        assert!(s.rod.energy(&nodes) <= s.rod.energy(&clamped));
        for w in report.energies.windows(2) {
            assert!(w[1] <= w[0] + report.energy_slack, "energy rose {} -> {}", w[0], w[1]);
        }
    }
}

#[test]
fn strain_check_matches_direct_recomputation() {
    let dlo = DloParams::table(0).unwrap();
    let s = random_equilibrium(&SimConfig::default(), &dlo, 5, 8);
    let l0 = s.rod.segment_length();
    let mut brute = f64::NEG_INFINITY;
    for i in 0..s.rod.nodes.len() - 1 {
        let e = s.rod.nodes[i + 1] - s.rod.nodes[i];
        brute = brute.max((e.norm() - l0) / l0);
    }
    assert_eq!(strain_check(&s.rod.nodes, l0), brute);
}

#[test]
fn rigid_translation_moves_every_node() {
    let sim = SimConfig {
        gravity: [0.0; 3],
        ..Default::default()
    };
    let dlo = DloParams::table(0).unwrap();
    let s = random_equilibrium(&sim, &dlo, 7, 10);
    let v = Vec3::new(0.03, -0.02, 0.05);
    let nu = EndVelocity {
        v1: v,
        v2: v,
        ..Default::default()
    };
    let (next, _) = s.rod.step(&s.ends, &nu, 0.1).unwrap();
    for (a, b) in next.nodes.iter().zip(&s.rod.nodes) {
        assert!((a - b - v * 0.1).norm() < 1e-8);
    }

    let j = s.jacobian().unwrap();
    let out = j * nu.to_vector();
    for k in 0..s.feature_count() {
        assert!((out.fixed_rows::<3>(3 * k) - v).norm() < 1e-8);
    }
}

#[test]
fn rotation_about_vertical_conjugates_the_jacobian() {
    let dlo = DloParams::table(0).unwrap();
    let sim = SimConfig::default();
    let s = random_equilibrium(&sim, &dlo, 9, 10);
    let j = s.jacobian().unwrap();
    for angle in [0.7, -2.1, std::f64::consts::PI] {
        let rot = rotation_z(angle);
        let ends = rotate_ends(&s.ends, angle);
        let mut rod = s.rod.clone();
        for node in rod.nodes.iter_mut() {
            *node = rot * *node;
        }
        rod.settle(&ends).unwrap();
        let jr = rod.ground_truth_jacobian(&ends).unwrap();
        let expected = block_rotation(&rot, s.feature_count()) * &j * block_rotation(&rot, 4).transpose();
        let err = (&jr - &expected).amax();
        assert!(err < 1e-6, "angle {angle}: {err:e}");
    }
}

#[test]
fn scaling_without_gravity_is_exact() {
    let base = DloParams::table(0).unwrap();
    let sim = SimConfig {
        gravity: [0.0; 3],
        ..Default::default()
    };
    let s = random_equilibrium(&sim, &base, 13, 10);
    let j = s.jacobian().unwrap();
    let ks = sim.stretch_stiffness;
    let kb = RodSystem::new(&sim, &base).unwrap().bend_stiffness;
    for lambda in [0.6, 2.0] {
        let mut dlo = DloParams::new(base.length * lambda, base.diameter);
        dlo.stretch_stiffness = Some(ks * lambda * lambda);
        dlo.bend_stiffness = Some(kb * lambda.powi(4));
        let mut rod = RodSystem::new(&sim, &dlo).unwrap();
        rod.nodes = s.rod.nodes.iter().map(|p| p * lambda).collect();
        let ends = EndPose {
            p1: s.ends.p1 * lambda,
            p2: s.ends.p2 * lambda,
            ..s.ends.clone()
        };
        rod.settle(&ends).unwrap();
        let js = rod.ground_truth_jacobian(&ends).unwrap();
        for col in 0..12 {
            let factor = if (3..6).contains(&col) || (9..12).contains(&col) { lambda } else { 1.0 };
            let err = (js.column(col) - j.column(col) * factor).amax();
            assert!(err < 1e-6, "lambda {lambda}, column {col}: {err:e}");
        }
    }
}

#[test]
fn feature_velocity_converges_at_first_order() {
    let dlo = DloParams::table(0).unwrap();
    let s = random_equilibrium(&SimConfig::default(), &dlo, 17, 10);
    let j = s.jacobian().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let nu = random_nu(&mut rng, 0.1);
    let predicted = &j * nu.to_vector();
    let x0 = DVector::from_vec(s.features());
    let errs: Vec<f64> = [1e-2, 1e-3, 1e-4]
        .iter()
        .map(|&dt| {
            let (next, _) = s.rod.step(&s.ends, &nu, dt).unwrap();
            let v = (DVector::from_vec(next.features()) - &x0) / dt;
            (v - &predicted).norm()
        })
        .collect();
    for w in errs.windows(2) {
        let ratio = w[0] / w[1];
        assert!(ratio > 5.0 && ratio < 20.0, "errors {errs:?}");
    }
}

#[test]
fn quaternion_update_matches_small_angle_kinematics() {
    let ends = RodSystem::straight_ends(&Vec3::zeros(), 0.4);
    let nu = EndVelocity {
        w1: Vec3::new(0.0, 0.0, 1.0),
        ..Default::default()
    };
    let dt = 1e-4;
    let next = ends.advanced(&nu, dt);
    let expected = [1.0, 0.0, 0.0, dt / 2.0];
    for (a, b) in next.q1.iter().zip(expected) {
        assert!((a - b).abs() < 1e-8);
    }
}
