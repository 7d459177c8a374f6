//! Chief classification losses, classifier heads, center loss and the
//! discriminative sequence-agent (DSA) auxiliary loss.

mod centers;
mod dsa;
mod heads;
mod softmax;

pub use centers::{center_loss, center_update, CenterTable, DistanceMode};
pub use dsa::{
    dsa_center_update, dsa_distance, dsa_distance_grad, dsa_loss, dsa_loss_with_mask, dsa_pair_loss, sample_candidates,
    CandidateMask, DsaConfig,
};
pub use heads::{AnnealSchedule, AngularMarginConfig, AngularMarginHead, ClassifierHead, HeadGradients, LinearHead};
pub use softmax::{cross_entropy, lsr_cross_entropy, softmax};

use crate::error::{bail, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// A scalar loss and its gradient w.r.t. the loss input (features or logits).
#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput<T> {
    pub loss: T,
    pub grad: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointLossConfig {
    /// Weight of the auxiliary loss.
    pub eta: f64,
    /// Whether sequence samples enter the chief loss with a uniform target.
    pub lsr_enabled: bool,
}

impl Default for JointLossConfig {
    fn default() -> Self {
        JointLossConfig {
            eta: 0.04,
            lsr_enabled: true,
        }
    }
}

impl JointLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            bail!(Parameter, "auxiliary weight must be finite and >= 0, got {}", self.eta);
        }
        Ok(())
    }
}

/// `chief + eta * auxiliary`, for both the value and the gradient.
pub fn joint_loss<T: Scalar>(chief: &LossOutput<T>, auxiliary: &LossOutput<T>, eta: f64) -> Result<LossOutput<T>> {
    if chief.grad.shape() != auxiliary.grad.shape() {
        bail!(
            Shape,
            "chief gradient {:?} and auxiliary gradient {:?} differ",
            chief.grad.shape(),
            auxiliary.grad.shape()
        );
    }
    let eta = T::lit(eta);
    let mut grad = chief.grad.clone();
    grad.axpy(eta, &auxiliary.grad)?;
    Ok(LossOutput {
        loss: chief.loss + eta * auxiliary.loss,
        grad,
    })
}
