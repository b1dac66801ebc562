//! The manipulated system as seen by a controller.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::rod::RodSim;
use crate::state::{EndPose, EndVelocity};

pub trait Plant {
    /// Stacked feature positions.
    fn features(&self) -> Vec<f64>;
    fn ends(&self) -> EndPose;
    fn length(&self) -> f64;
    /// Applies `ν` for `dt` seconds.
    fn apply(&mut self, nu: &EndVelocity, dt: f64) -> Result<()>;
    /// Largest segment strain, when the plant has one.
    fn max_strain(&self) -> Option<f64> {
        None
    }
}

impl Plant for RodSim {
    fn features(&self) -> Vec<f64> {
        RodSim::features(self)
    }

    fn ends(&self) -> EndPose {
        self.ends.clone()
    }

    fn length(&self) -> f64 {
        RodSim::length(self)
    }

    fn apply(&mut self, nu: &EndVelocity, dt: f64) -> Result<()> {
        RodSim::apply(self, nu, dt)
    }

    fn max_strain(&self) -> Option<f64> {
        Some(self.rod.max_strain())
    }
}

/// `ẋ = J ν` with a constant `J`; the ends move kinematically.
#[derive(Clone, Debug)]
pub struct LinearPlant {
    pub jacobian: DMatrix<f64>,
    pub x: DVector<f64>,
    pub ends: EndPose,
    pub length: f64,
}

impl Plant for LinearPlant {
    fn features(&self) -> Vec<f64> {
        self.x.as_slice().to_vec()
    }

    fn ends(&self) -> EndPose {
        self.ends.clone()
    }

    fn length(&self) -> f64 {
        self.length
    }

    fn apply(&mut self, nu: &EndVelocity, dt: f64) -> Result<()> {
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
        }
        self.x += &self.jacobian * nu.to_vector() * dt;
        self.ends = self.ends.advanced(nu, dt);
        Ok(())
    }
}
