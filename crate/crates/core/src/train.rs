//! Offline RBFN training: smooth-L1 loss on feature velocities, Adam on
//! weights, centers and log-widths, optional rotation augmentation.

use log::{debug, info};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{DataTuple, Dataset};
use crate::error::{Error, Result};
use crate::kmeans::{kmeans, squared_distances};
use crate::rbfn::RbfnJacobianModel;
use crate::state::{encode_input, encoding_scale, rotate_sample, StateEncoding};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Hidden neurons `q`.
    pub hidden: usize,
    /// Smooth-L1 transition point.
    pub beta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Optional cap on the total number of optimizer steps.
    pub max_steps: Option<usize>,
    pub validation_fraction: f64,
    pub kmeans_subset: usize,
    pub kmeans_max_iter: usize,
    pub augmentation: bool,
    pub encoding: StateEncoding,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            beta: 1.0,
            learning_rate: 1e-3,
            batch_size: 256,
            epochs: 200,
            max_steps: None,
            validation_fraction: 0.1,
            kmeans_subset: 10_000,
            kmeans_max_iter: 100,
            augmentation: true,
            encoding: StateEncoding::ScaleNormalized,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.hidden == 0 {
            return bad("training.hidden must be positive".into());
        }
        if !(self.beta > 0.0) {
            return bad(format!("training.beta must be positive, got {}", self.beta));
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("training.learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("training.batch_size and training.epochs must be positive".into());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad(format!(
                "training.validation_fraction must be in [0, 1), got {}",
                self.validation_fraction
            ));
        }
        if self.kmeans_subset == 0 {
            return bad("training.kmeans_subset must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss per epoch.
    pub train_loss: Vec<f64>,
    /// Validation loss after each epoch (training loss when there is no
    /// validation split).
    pub validation_loss: Vec<f64>,
    pub best_epoch: usize,
    pub steps: usize,
}

/// One training example in network coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub input: Vec<f64>,
    /// `T ν`.
    pub u: [f64; 12],
    pub target: Vec<f64>,
}

pub fn prepare_sample(tuple: &DataTuple, encoding: StateEncoding) -> Result<PreparedSample> {
    let ends = tuple.ends();
    let input = encode_input(&tuple.x, &ends, encoding)?;
    let t = encoding_scale(encoding, tuple.dlo.length)?;
    Ok(PreparedSample {
        input: input.as_slice().to_vec(),
        u: t.apply(&tuple.nu),
        target: tuple.x_dot.clone(),
    })
}

/// A stacked mini-batch.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `B × d`.
    pub s: DMatrix<f64>,
    /// `B × 12`.
    pub u: DMatrix<f64>,
    /// `B × 3m`.
    pub y: DMatrix<f64>,
}

impl Batch {
    pub fn from_samples<'a, I>(samples: I) -> Self
    where
        I: IntoIterator<Item = &'a PreparedSample>,
    {
        let samples: Vec<&PreparedSample> = samples.into_iter().collect();
        let b = samples.len();
        let d = samples.first().map_or(0, |s| s.input.len());
        let o = samples.first().map_or(0, |s| s.target.len());
        Self {
            s: DMatrix::from_fn(b, d, |r, c| samples[r].input[c]),
            u: DMatrix::from_fn(b, 12, |r, c| samples[r].u[c]),
            y: DMatrix::from_fn(b, o, |r, c| samples[r].target[c]),
        }
    }

    pub fn len(&self) -> usize {
        self.s.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub struct Gradients {
    pub weights: DMatrix<f64>,
    pub centers: DMatrix<f64>,
    pub log_widths: DVector<f64>,
}

pub fn smooth_l1(e: f64, beta: f64) -> f64 {
    if e.abs() < beta {
        0.5 * e * e / beta
    } else {
        e.abs() - 0.5 * beta
    }
}

fn smooth_l1_grad(e: f64, beta: f64) -> f64 {
    if e.abs() < beta {
        e / beta
    } else {
        e.signum()
    }
}

struct Forward {
    d2: DMatrix<f64>,
    theta: DMatrix<f64>,
    phi: DMatrix<f64>,
    err: DMatrix<f64>,
}

fn forward(model: &RbfnJacobianModel, batch: &Batch) -> Forward {
    let q = model.q();
    let inv_s2: Vec<f64> = model.log_widths.iter().map(|l| (-2.0 * l).exp()).collect();
    let d2 = squared_distances(&batch.s, &model.centers);
    let theta = DMatrix::from_fn(d2.nrows(), q, |b, h| (-d2[(b, h)] * inv_s2[h]).exp());
    let phi = DMatrix::from_fn(d2.nrows(), 12 * q, |b, c| batch.u[(b, c / q)] * theta[(b, c % q)]);
    let pred = &phi * model.weights.transpose();
    let err = &batch.y - pred;
    Forward { d2, theta, phi, err }
}

/// Mean smooth-L1 loss over all entries of the batch residual.
pub fn batch_loss(model: &RbfnJacobianModel, batch: &Batch, beta: f64) -> f64 {
    let f = forward(model, batch);
    f.err.iter().map(|&e| smooth_l1(e, beta)).sum::<f64>() / f.err.len().max(1) as f64
}

/// Loss and its gradient with respect to weights, centers and log-widths.
pub fn loss_and_gradient(model: &RbfnJacobianModel, batch: &Batch, beta: f64) -> (f64, Gradients) {
    let q = model.q();
    let f = forward(model, batch);
    let count = f.err.len().max(1) as f64;
    let loss = f.err.iter().map(|&e| smooth_l1(e, beta)).sum::<f64>() / count;
    // dL/dŶ
    let g = f.err.map(|e| -smooth_l1_grad(e, beta) / count);
    let grad_w = g.transpose() * &f.phi;
    let dphi = &g * &model.weights;

    let inv_s2: Vec<f64> = model.log_widths.iter().map(|l| (-2.0 * l).exp()).collect();
    let bsz = batch.len();
    // a = dL/d(D2), r = dL/dρ contributions
    let mut a = DMatrix::zeros(bsz, q);
    let mut grad_rho = DVector::zeros(q);
    for b in 0..bsz {
        for h in 0..q {
            let mut dtheta = 0.0;
            for i in 0..12 {
                dtheta += batch.u[(b, i)] * dphi[(b, i * q + h)];
            }
            let th = f.theta[(b, h)];
            a[(b, h)] = -dtheta * th * inv_s2[h];
            grad_rho[h] += dtheta * th * 2.0 * f.d2[(b, h)] * inv_s2[h];
        }
    }
    // D2 = |s|² + |μ|² − 2 s·μ  ⇒  dD2/dμ = 2(μ − s)
    let col_sums: Vec<f64> = (0..q).map(|h| a.column(h).sum()).collect();
    let mut grad_c = a.transpose() * &batch.s * -2.0;
    for h in 0..q {
        let mut row = grad_c.row_mut(h);
        row += model.centers.row(h) * (2.0 * col_sums[h]);
    }
    (
        loss,
        Gradients {
            weights: grad_w,
            centers: grad_c,
            log_widths: grad_rho,
        },
    )
}

struct Adam {
    lr: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(lr: f64, n: usize) -> Self {
        Self {
            lr,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let mut k = 0;
        for (p, g) in params.iter_mut().zip(grads) {
            for (pi, gi) in p.iter_mut().zip(g.iter()) {
                self.m[k] = Self::B1 * self.m[k] + (1.0 - Self::B1) * gi;
                self.v[k] = Self::B2 * self.v[k] + (1.0 - Self::B2) * gi * gi;
                *pi -= self.lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + Self::EPS);
                k += 1;
            }
        }
    }
}

fn apply_adam(adam: &mut Adam, model: &mut RbfnJacobianModel, g: &Gradients) {
    let RbfnJacobianModel {
        weights,
        centers,
        log_widths,
        ..
    } = model;
    adam.step(
        &mut [weights.as_mut_slice(), centers.as_mut_slice(), log_widths.as_mut_slice()],
        &[g.weights.as_slice(), g.centers.as_slice(), g.log_widths.as_slice()],
    );
}

fn prepare_all(tuples: &[&DataTuple], encoding: StateEncoding) -> Vec<PreparedSample> {
    tuples.iter().filter_map(|t| prepare_sample(t, encoding).ok()).collect()
}

fn mean_loss(model: &RbfnJacobianModel, samples: &[PreparedSample], beta: f64, chunk: usize) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for c in samples.chunks(chunk.max(1)) {
        let batch = Batch::from_samples(c);
        let n = batch.y.len();
        total += batch_loss(model, &batch, beta) * n as f64;
        count += n;
    }
    total / count.max(1) as f64
}

/// Centers and widths from k-means on (a random subset of) the training
/// inputs, zero weights.
pub fn initialize_model(
    train: &[&DataTuple],
    config: &TrainConfig,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<RbfnJacobianModel> {
    let mut pool: Vec<&DataTuple> = train.to_vec();
    pool.shuffle(rng);
    pool.truncate(config.kmeans_subset);
    let inputs: Vec<Vec<f64>> = pool
        .iter()
        .filter_map(|t| {
            // the subset sees the same rotations the training batches will
            let tuple = if config.augmentation {
                rotate_sample(t, rng.gen_range(0.0..std::f64::consts::TAU))
            } else {
                (*t).clone()
            };
            encode_input(&tuple.x, &tuple.ends(), config.encoding)
                .ok()
                .map(|v| v.as_slice().to_vec())
        })
        .collect();
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("no usable samples for k-means".into()));
    }
    let d = inputs[0].len();
    let pts = DMatrix::from_fn(inputs.len(), d, |r, c| inputs[r][c]);
    let km = kmeans(&pts, config.hidden, config.kmeans_max_iter, rng.gen())?;
    info!(
        "k-means: {} centers from {} points, {} iterations, inertia {:.4e}",
        config.hidden,
        inputs.len(),
        km.iterations,
        km.inertia
    );
    let mut model = RbfnJacobianModel::new(km.centers, km.widths, m)?;
    model.provenance.encoding = config.encoding;
    Ok(model)
}

/// Trains a model on `dataset`; returns the parameters with the lowest
/// validation loss seen at the end of any epoch.
pub fn train_offline(
    dataset: &Dataset,
    config: &TrainConfig,
    seed: u64,
) -> Result<(RbfnJacobianModel, TrainReport)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    let m = dataset.tuples[0].feature_count();
    if let Some(bad) = dataset.tuples.iter().find(|t| t.feature_count() != m) {
        return Err(Error::DimensionMismatch {
            expected: 3 * m,
            got: bad.x.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<&DataTuple> = dataset.tuples.iter().collect();
    order.shuffle(&mut rng);
    let n_val = if order.len() >= 10 {
        (order.len() as f64 * config.validation_fraction).round() as usize
    } else {
        0
    };
    let (val_tuples, train_tuples) = order.split_at(n_val);

    let mut model = initialize_model(train_tuples, config, m, &mut rng)?;
    let val = prepare_all(val_tuples, config.encoding);
    let fixed_train = if config.augmentation {
        Vec::new()
    } else {
        prepare_all(train_tuples, config.encoding)
    };

    let n_params = model.weights.len() + model.centers.len() + model.log_widths.len();
    let mut adam = Adam::new(config.learning_rate, n_params);
    let mut report = TrainReport::default();
    let mut best = (f64::INFINITY, model.clone());
    let mut idx: Vec<usize> = (0..train_tuples.len()).collect();
    let step_cap = config.max_steps.unwrap_or(usize::MAX);

    'epochs: for epoch in 0..config.epochs {
        idx.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        for chunk in idx.chunks(config.batch_size) {
            if report.steps >= step_cap {
                break;
            }
            let samples: Vec<PreparedSample> = if config.augmentation {
                chunk
                    .iter()
                    .filter_map(|&i| {
                        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                        prepare_sample(&rotate_sample(train_tuples[i], angle), config.encoding).ok()
                    })
                    .collect()
            } else {
                chunk
                    .iter()
                    .filter_map(|&i| fixed_train.get(i).cloned())
                    .collect()
            };
            if samples.is_empty() {
                continue;
            }
            let batch = Batch::from_samples(&samples);
            let (loss, grads) = loss_and_gradient(&model, &batch, config.beta);
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged {
                    epoch,
                    step: report.steps,
                    detail: format!("loss is {loss}"),
                });
            }
            apply_adam(&mut adam, &mut model, &grads);
            report.steps += 1;
            epoch_loss += loss;
            epoch_batches += 1;
        }
        if epoch_batches == 0 {
            break 'epochs;
        }
        let train_loss = epoch_loss / epoch_batches as f64;
        let val_loss = if val.is_empty() {
            train_loss
        } else {
            mean_loss(&model, &val, config.beta, 1024)
        };
        if !val_loss.is_finite() {
            return Err(Error::TrainingDiverged {
                epoch,
                step: report.steps,
                detail: format!("validation loss is {val_loss}"),
            });
        }
        report.train_loss.push(train_loss);
        report.validation_loss.push(val_loss);
        if val_loss < best.0 {
            best = (val_loss, model.clone());
            report.best_epoch = epoch;
        }
        debug!("epoch {epoch}: train {train_loss:.4e}, validation {val_loss:.4e}");
        if report.steps >= step_cap {
            break;
        }
    }

    let mut model = best.1;
    model.provenance.encoding = config.encoding;
    model.provenance.augmentation = config.augmentation;
    model.provenance.samples = dataset.len();
    model.provenance.seed = seed;
    model.provenance.epochs = report.train_loss.len();
    model.provenance.steps = report.steps;
    model.provenance.best_validation_loss = best.0;
    info!(
        "trained on {} samples: {} epochs, {} steps, best validation loss {:.4e} at epoch {}",
        dataset.len(),
        report.train_loss.len(),
        report.steps,
        best.0,
        report.best_epoch
    );
    Ok((model, report))
}
