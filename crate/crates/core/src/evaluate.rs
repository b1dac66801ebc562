//! Offline model evaluation on recorded datasets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{DataTuple, Dataset};
use crate::error::Result;
use crate::metrics::{mean, median, shape_prediction_error, velocity_relative_error};
use crate::rbfn::{predict_shape_rollout, JacobianModel};
use crate::state::{rotate_sample, translate_blocks, EndVelocity, Vec3};

/// Velocity errors (percent) of every tuple with `ẋ ≠ 0`.
pub fn velocity_errors<M: JacobianModel + ?Sized>(model: &M, data: &Dataset) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(data.len());
    for t in &data.tuples {
        let j = model.jacobian(&t.x, &t.ends(), t.dlo.length)?;
        let nu = EndVelocity::from_slice(&t.nu)?;
        let pred = j * nu.to_vector();
        if let Some(e) = velocity_relative_error(&t.x_dot, pred.as_slice())? {
            out.push(e);
        }
    }
    Ok(out)
}

fn follows(prev: &DataTuple, next: &DataTuple, dt: f64) -> bool {
    prev.dlo == next.dlo && ((next.t - prev.t) - dt).abs() < 1e-6 * dt.max(1.0)
}

/// Start indices of the maximal runs of consecutive tuples.
pub fn trajectory_starts(data: &Dataset, dt: f64) -> Vec<usize> {
    let mut starts = vec![];
    for (i, t) in data.tuples.iter().enumerate() {
        if i == 0 || !follows(&data.tuples[i - 1], t, dt) {
            starts.push(i);
        }
    }
    starts
}

/// `‖x̂(t+n) − x(t+n)‖` from rolling the model over the recorded actions,
/// one window every `stride` tuples inside each trajectory.
pub fn n_step_shape_errors<M: JacobianModel + Sync + ?Sized>(
    model: &M,
    data: &Dataset,
    n: usize,
    stride: usize,
    dt: f64,
) -> Result<Vec<f64>> {
    let stride = stride.max(1);
    let mut bounds = trajectory_starts(data, dt);
    bounds.push(data.len());
    let mut out = vec![];
    for w in bounds.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let mut i = lo;
        while i + n < hi {
            let start = &data.tuples[i];
            let actions = data.tuples[i + 1..=i + n]
                .iter()
                .map(|t| EndVelocity::from_slice(&t.nu))
                .collect::<Result<Vec<_>>>()?;
            let roll = predict_shape_rollout(model, &start.x, &start.ends(), &actions, dt, start.dlo.length)?;
            if roll.truncated_at.is_none() {
                out.push(shape_prediction_error(roll.shapes.last().unwrap(), &data.tuples[i + n].x)?);
            }
            i += stride;
        }
    }
    Ok(out)
}

/// Applies one random rotation about +z and one random translation to each
/// trajectory of the dataset.
pub fn transformed_dataset(data: &Dataset, dt: f64, max_translation: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let starts = trajectory_starts(data, dt);
    let mut out = Vec::with_capacity(data.len());
    let mut angle = 0.0;
    let mut shift = Vec3::zeros();
    for (i, t) in data.tuples.iter().enumerate() {
        if starts.binary_search(&i).is_ok() {
            angle = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            shift = Vec3::from_fn(|_, _| rng.gen_range(-max_translation..=max_translation));
        }
        let mut r = rotate_sample(t, angle);
        translate_blocks(&mut r.x, &shift);
        translate_blocks(&mut r.r[0..3], &shift);
        translate_blocks(&mut r.r[7..10], &shift);
        out.push(r);
    }
    Dataset { tuples: out }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tuples: usize,
    pub velocity_error_median: f64,
    pub velocity_error_mean: f64,
    pub shape_error_steps: usize,
    pub shape_error_mean: f64,
    pub shape_error_median: f64,
    /// Tuples with `ẋ = 0`, left out of the velocity statistics.
    pub excluded: usize,
}

pub fn evaluate<M: JacobianModel + Sync + ?Sized>(
    model: &M,
    data: &Dataset,
    steps: usize,
    dt: f64,
) -> Result<EvalReport> {
    let vel = velocity_errors(model, data)?;
    let shape = n_step_shape_errors(model, data, steps, steps, dt)?;
    Ok(EvalReport {
        tuples: data.len(),
        velocity_error_median: median(&vel),
        velocity_error_mean: mean(&vel),
        shape_error_steps: steps,
        shape_error_mean: mean(&shape),
        shape_error_median: median(&shape),
        excluded: data.len() - vel.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rod::DloParams;
    use crate::state::EndPose;
    use nalgebra::DMatrix;

    /// `ẋ = A ν` everywhere.
    struct Constant(DMatrix<f64>);

    impl JacobianModel for Constant {
        fn feature_count(&self) -> usize {
            self.0.nrows() / 3
        }
        fn jacobian(&self, _: &[f64], _: &EndPose, _: f64) -> Result<DMatrix<f64>> {
            Ok(self.0.clone())
        }
    }

    fn linear_data(a: &DMatrix<f64>, n: usize, t0: f64) -> Vec<DataTuple> {
        let ends = EndPose {
            p1: Vec3::new(-0.25, 0.0, 0.0),
            q1: [1.0, 0.0, 0.0, 0.0],
            p2: Vec3::new(0.25, 0.0, 0.0),
            q2: [1.0, 0.0, 0.0, 0.0],
        };
        let mut x = vec![0.1, 0.0, 0.0, -0.1, 0.0, 0.0];
        (0..n)
            .map(|i| {
                let nu: Vec<f64> = (0..12).map(|k| 0.01 * ((i * 7 + k) % 5) as f64 - 0.02).collect();
                let xd = a * nalgebra::DVector::from_vec(nu.clone());
                for (xi, v) in x.iter_mut().zip(xd.iter()) {
                    *xi += v * 0.1;
                }
                DataTuple {
                    t: t0 + 0.1 * i as f64,
                    x: x.clone(),
                    x_dot: xd.as_slice().to_vec(),
                    r: ends.to_vector().as_slice().to_vec(),
                    nu,
                    dlo: DloParams::table(0).unwrap(),
                }
            })
            .collect()
    }

    #[test]
    fn exact_model_has_zero_errors() {
        let a = DMatrix::from_fn(6, 12, |i, j| ((i * 12 + j) as f64 * 0.37).sin());
        let mut tuples = linear_data(&a, 25, 0.1);
        tuples.extend(linear_data(&a, 12, 0.1));
        let data = Dataset { tuples };
        assert_eq!(trajectory_starts(&data, 0.1), vec![0, 25]);
        let shape = n_step_shape_errors(&Constant(a.clone()), &data, 10, 1, 0.1).unwrap();
        // 15 windows in the first run, 2 in the second
        assert_eq!(shape.len(), 17);
        assert!(shape.iter().all(|e| *e < 1e-12));
        let vel = velocity_errors(&Constant(a.clone()), &data).unwrap();
        assert!(vel.iter().all(|e| *e < 1e-10));
        let zero = velocity_errors(&Constant(DMatrix::zeros(6, 12)), &data).unwrap();
        assert!(zero.iter().all(|e| (e - 100.0).abs() < 1e-10));
    }

    #[test]
    fn transform_is_rigid_per_trajectory() {
        let a = DMatrix::from_fn(6, 12, |i, j| ((i + 2 * j) as f64).cos());
        let data = Dataset {
            tuples: linear_data(&a, 10, 0.0),
        };
        let moved = transformed_dataset(&data, 0.1, 0.2, 3);
        let dist = |x: &[f64]| ((x[0] - x[3]).powi(2) + (x[1] - x[4]).powi(2) + (x[2] - x[5]).powi(2)).sqrt();
        for (a, b) in data.tuples.iter().zip(&moved.tuples) {
            assert!((dist(&a.x) - dist(&b.x)).abs() < 1e-12);
            let xd: f64 = a.x_dot.iter().map(|v| v * v).sum();
            let yd: f64 = b.x_dot.iter().map(|v| v * v).sum();
            assert!((xd - yd).abs() < 1e-12);
            assert!((a.x[2] - (b.x[2] - (b.r[2] - a.r[2]))).abs() < 1e-12);
        }
        // consecutive shapes differ by the rotated ẋ·dt, so the rigid motion is shared
        for w in moved.tuples.windows(2) {
            for k in 0..6 {
                assert!((w[1].x[k] - w[0].x[k] - 0.1 * w[1].x_dot[k]).abs() < 1e-12);
            }
        }
    }
}
