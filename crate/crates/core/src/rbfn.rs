//! Radial-basis-function network for the deformation Jacobian.
//!
//! For feature `k` the network gives `vec(N̂_k(s̃)) = Ŵ_k θ(s̃)`, with Gaussian
//! activations `θ_h(s̃) = exp(−‖s̃ − μ_h‖² / σ_h²)`. The estimated Jacobian rows
//! of feature `k` are `Ĵ_k = N̂_k(s̃) T`.
//!
//! Weights are held as one `3m × 12q` matrix: row `3k + j` is output
//! component `j` of feature `k`, column `i·q + h` pairs end-velocity
//! component `i` with neuron `h`. The file format nests them as
//! `weights[k][i][j][h]`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::{
    encode_input, encoding_scale, input_dim, integrate_quat, EndPose, EndVelocity,
    StateEncoding,
};

/// Anything that maps a state to a `3m × 12` deformation Jacobian.
pub trait JacobianModel {
    fn feature_count(&self) -> usize;

    /// Jacobian at shape `x` and gripper pose `ends` of a DLO of `length`.
    fn jacobian(&self, x: &[f64], ends: &EndPose, length: f64) -> Result<DMatrix<f64>>;
}

/// Training metadata carried in the model file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Provenance {
    pub encoding: StateEncoding,
    pub augmentation: bool,
    pub samples: usize,
    pub seed: u64,
    pub epochs: usize,
    pub steps: usize,
    pub best_validation_loss: f64,
    pub note: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RbfnJacobianModel {
    m: usize,
    q: usize,
    dim: usize,
    /// `q × d`, one center per row.
    pub(crate) centers: DMatrix<f64>,
    /// `ln σ_h`; widths are trained in log space to stay positive.
    pub(crate) log_widths: DVector<f64>,
    /// `3m × 12q`.
    pub(crate) weights: DMatrix<f64>,
    pub provenance: Provenance,
}

impl RbfnJacobianModel {
    pub fn new(centers: DMatrix<f64>, widths: DVector<f64>, m: usize) -> Result<Self> {
        let q = centers.nrows();
        let dim = centers.ncols();
        if widths.len() != q {
            return Err(Error::DimensionMismatch {
                expected: q,
                got: widths.len(),
            });
        }
        if dim != input_dim(m) {
            return Err(Error::DimensionMismatch {
                expected: input_dim(m),
                got: dim,
            });
        }
        if let Some(w) = widths.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidArgument(format!("RBF widths must be positive, got {w}")));
        }
        Ok(Self {
            m,
            q,
            dim,
            centers,
            log_widths: widths.map(f64::ln),
            weights: DMatrix::zeros(3 * m, 12 * q),
            provenance: Provenance::default(),
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn input_dim(&self) -> usize {
        self.dim
    }

    pub fn encoding(&self) -> StateEncoding {
        self.provenance.encoding
    }

    pub fn centers(&self) -> &DMatrix<f64> {
        &self.centers
    }

    pub fn widths(&self) -> DVector<f64> {
        self.log_widths.map(f64::exp)
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.weights
    }

    /// `Ŵ_{ki}` entry for output component `j` and neuron `h`.
    pub fn weight(&self, k: usize, i: usize, j: usize, h: usize) -> f64 {
        self.weights[(3 * k + j, i * self.q + h)]
    }

    pub fn set_weight(&mut self, k: usize, i: usize, j: usize, h: usize, v: f64) {
        self.weights[(3 * k + j, i * self.q + h)] = v;
    }

    /// `θ(s̃) ∈ (0, 1]^q`.
    pub fn activations(&self, s: &[f64]) -> Result<DVector<f64>> {
        if s.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: s.len(),
            });
        }
        Ok(DVector::from_iterator(
            self.q,
            (0..self.q).map(|h| {
                let d2: f64 = self
                    .centers
                    .row(h)
                    .iter()
                    .zip(s)
                    .map(|(c, v)| (v - c) * (v - c))
                    .sum();
                (-d2 * (-2.0 * self.log_widths[h]).exp()).exp()
            }),
        ))
    }

    /// Network input for a state.
    pub fn input(&self, x: &[f64], ends: &EndPose) -> Result<DVector<f64>> {
        if x.len() != 3 * self.m {
            return Err(Error::DimensionMismatch {
                expected: 3 * self.m,
                got: x.len(),
            });
        }
        encode_input(x, ends, self.encoding())
    }

    /// `Ĵ = [N̂_1 T; …; N̂_m T]` from precomputed activations.
    pub fn jacobian_from_activations(&self, theta: &DVector<f64>, length: f64) -> Result<DMatrix<f64>> {
        let t = encoding_scale(self.encoding(), length)?;
        let mut j = DMatrix::zeros(3 * self.m, 12);
        for i in 0..12 {
            let block = self.weights.columns(i * self.q, self.q);
            let col = block * theta * t.entry(i);
            j.set_column(i, &col);
        }
        Ok(j)
    }

    /// Jacobian rows of the features listed in `targets` only.
    pub fn target_jacobian_from_activations(
        &self,
        theta: &DVector<f64>,
        length: f64,
        targets: &[usize],
    ) -> Result<DMatrix<f64>> {
        let t = encoding_scale(self.encoding(), length)?;
        let mut j = DMatrix::zeros(3 * targets.len(), 12);
        for i in 0..12 {
            for (row, &k) in targets.iter().enumerate() {
                for c in 0..3 {
                    let w = self.weights.view((3 * k + c, i * self.q), (1, self.q));
                    j[(3 * row + c, i)] = (w * theta)[0] * t.entry(i);
                }
            }
        }
        Ok(j)
    }

    pub fn predict_jacobian(&self, x: &[f64], ends: &EndPose, length: f64) -> Result<DMatrix<f64>> {
        let s = self.input(x, ends)?;
        let theta = self.activations(s.as_slice())?;
        self.jacobian_from_activations(&theta, length)
    }

    /// `ẋ_k = Σ_i Ŵ_{ki} θ T_i ν_i`, evaluated without forming `Ĵ`.
    pub fn predict_velocity(
        &self,
        x: &[f64],
        ends: &EndPose,
        length: f64,
        nu: &EndVelocity,
    ) -> Result<DVector<f64>> {
        let s = self.input(x, ends)?;
        let theta = self.activations(s.as_slice())?;
        let t = encoding_scale(self.encoding(), length)?;
        let tnu = t.apply(nu.to_vector().as_slice());
        let phi = DVector::from_iterator(
            12 * self.q,
            (0..12).flat_map(|i| theta.iter().map(move |th| th * tnu[i])),
        );
        Ok(&self.weights * phi)
    }

    pub fn to_file(&self) -> ModelFile {
        let weights = (0..self.m)
            .map(|k| {
                (0..12)
                    .map(|i| {
                        (0..3)
                            .map(|j| (0..self.q).map(|h| self.weight(k, i, j, h)).collect())
                            .collect()
                    })
                    .collect()
            })
            .collect();
        ModelFile {
            m: self.m,
            q: self.q,
            input_dim: self.dim,
            centers: self.centers.row_iter().map(|r| r.iter().copied().collect()).collect(),
            widths: self.widths().iter().copied().collect(),
            weights,
            provenance: self.provenance.clone(),
        }
    }

    pub fn from_file(file: ModelFile) -> Result<Self> {
        let bad = |what: &str| Error::InvalidArgument(format!("model file: inconsistent {what}"));
        if file.centers.len() != file.q || file.centers.iter().any(|c| c.len() != file.input_dim) {
            return Err(bad("centers"));
        }
        if file.weights.len() != file.m
            || file.weights.iter().any(|wk| {
                wk.len() != 12
                    || wk
                        .iter()
                        .any(|wi| wi.len() != 3 || wi.iter().any(|wj| wj.len() != file.q))
            })
        {
            return Err(bad("weights"));
        }
        let centers = DMatrix::from_fn(file.q, file.input_dim, |h, c| file.centers[h][c]);
        let mut model = Self::new(centers, DVector::from_vec(file.widths), file.m)?;
        // exact round trip: keep the stored widths' logarithms untouched
        for k in 0..file.m {
            for i in 0..12 {
                for j in 0..3 {
                    for h in 0..file.q {
                        model.set_weight(k, i, j, h, file.weights[k][i][j][h]);
                    }
                }
            }
        }
        model.provenance = file.provenance;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, &self.to_file())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let file: ModelFile = serde_json::from_reader(f)?;
        Self::from_file(file)
    }
}

impl JacobianModel for RbfnJacobianModel {
    fn feature_count(&self) -> usize {
        self.m
    }

    fn jacobian(&self, x: &[f64], ends: &EndPose, length: f64) -> Result<DMatrix<f64>> {
        self.predict_jacobian(x, ends, length)
    }
}

/// On-disk model representation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub m: usize,
    pub q: usize,
    pub input_dim: usize,
    pub centers: Vec<Vec<f64>>,
    pub widths: Vec<f64>,
    /// `weights[k][i][j][h]`: feature, end-velocity component, output axis,
    /// neuron.
    pub weights: Vec<Vec<Vec<Vec<f64>>>>,
    pub provenance: Provenance,
}

/// Shape sequence from iterating `x ← x + Ĵ(s) ν dt`.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    /// `shapes[0] = x0`, then one entry per applied action.
    pub shapes: Vec<Vec<f64>>,
    pub ends: Vec<EndPose>,
    /// Index of the action at which the state became degenerate, if any.
    pub truncated_at: Option<usize>,
}

/// Euler rollout of the learned state equation; the gripper pose is
/// integrated alongside.
pub fn predict_shape_rollout<M: JacobianModel + ?Sized>(
    model: &M,
    x0: &[f64],
    ends0: &EndPose,
    actions: &[EndVelocity],
    dt: f64,
    length: f64,
) -> Result<Rollout> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    let mut shapes = vec![x0.to_vec()];
    let mut poses = vec![ends0.clone()];
    let mut truncated_at = None;
    for (step, nu) in actions.iter().enumerate() {
        let x = shapes.last().unwrap();
        let ends = poses.last().unwrap();
        let j = match model.jacobian(x, ends, length) {
            Ok(j) => j,
            Err(Error::DegenerateState(_)) => {
                truncated_at = Some(step);
                break;
            }
            Err(e) => return Err(e),
        };
        let dx = j * nu.to_vector() * dt;
        shapes.push(x.iter().zip(dx.iter()).map(|(a, b)| a + b).collect());
        poses.push(EndPose {
            p1: ends.p1 + nu.v1 * dt,
            q1: integrate_quat(&ends.q1, &nu.w1, dt),
            p2: ends.p2 + nu.v2 * dt,
            q2: integrate_quat(&ends.q2, &nu.w2, dt),
        });
    }
    Ok(Rollout {
        shapes,
        ends: poses,
        truncated_at,
    })
}
