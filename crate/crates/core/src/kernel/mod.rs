//! NNGP covariance and NTK propagation through the simplified transformer
//! block (attention, LayerNorm, single-nonlinearity MLP) and the
//! fully-connected baseline kernel.

pub mod attention;
pub mod dual;
pub mod fcn;
pub mod norm;
pub mod softmax;
mod transformer;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;
use crate::linalg::Matrix;
use crate::sampler::{PsdRepair, SamplerError};

pub use attention::{attention_cov_update, attention_ntk_update};
pub use dual::{dual_activation, DualValue};
pub use fcn::fcn_kernel;
pub use norm::{layernorm_cov, mlp_cov_update, mlp_ntk_update};
pub use softmax::{softmax_jacobian_trace, softmax_rows};
pub use transformer::{embed_covariance, propagate_transformer, EmbedPe, KernelOutput};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("NTK blocks are required but absent")]
    MissingNtk,
    #[error("negative variance {value} on a diagonal block")]
    NegativeVariance { value: f64 },
    #[error("2x2 covariance [[{k11}, {k12}], [{k12}, {k22}]] is not PSD")]
    NotPsd2x2 { k11: f64, k12: f64, k22: f64 },
    #[error("row is not a probability vector")]
    NotProbabilityVector,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelMode {
    #[default]
    Nngp,
    Ntk,
}

/// Per-block hyperparameters of the MLP and LayerNorm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlockParams {
    /// Weight standard deviation; weights are `N(0, sigma_w^2 / d_model)`.
    pub sigma_w: f64,
    /// Bias standard deviation.
    pub sigma_b: f64,
    pub activation: Activation,
    pub ln_epsilon: f64,
    pub gauss_hermite_order: usize,
    /// Add the LayerNorm gain/bias gradient contribution to the NTK.
    pub ln_param_ntk: bool,
}

impl Default for BlockParams {
    fn default() -> Self {
        Self {
            sigma_w: std::f64::consts::SQRT_2,
            sigma_b: 0.0,
            activation: Activation::Relu,
            ln_epsilon: 1e-5,
            gauss_hermite_order: 32,
            ln_param_ntk: true,
        }
    }
}

impl BlockParams {
    pub fn validate(&self) -> Result<(), KernelError> {
        if !(self.sigma_w >= 0.0 && self.sigma_w.is_finite()) {
            return Err(KernelError::InvalidParams("sigma_w must be finite and >= 0".into()));
        }
        if !(self.sigma_b >= 0.0 && self.sigma_b.is_finite()) {
            return Err(KernelError::InvalidParams("sigma_b must be finite and >= 0".into()));
        }
        if !(0.0..=1e-2).contains(&self.ln_epsilon) {
            return Err(KernelError::InvalidParams("ln_epsilon must lie in [0, 1e-2]".into()));
        }
        if self.gauss_hermite_order < 8 {
            return Err(KernelError::InvalidParams("gauss_hermite_order must be >= 8".into()));
        }
        Ok(())
    }
}

/// Monte-Carlo settings for the attention expectation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McConfig {
    pub n_mc: usize,
    pub seed: u64,
    /// Pair each draw with its sign-flipped partner.
    pub antithetic: bool,
    pub exec: Exec,
    pub repair: PsdRepair,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            n_mc: 1024,
            seed: 0,
            antithetic: false,
            exec: Exec::default(),
            repair: PsdRepair::default(),
        }
    }
}

impl McConfig {
    pub fn new(n_mc: usize, seed: u64) -> Self {
        Self {
            n_mc,
            seed,
            ..Self::default()
        }
    }
}

/// Block index of `(X1, X1)`, `(X1, X2)` and `(X2, X2)` in a [`KernelState`].
pub const B11: usize = 0;
pub const B12: usize = 1;
pub const B22: usize = 2;

/// Inputs `(i, j)` of each block.
pub const BLOCK_INPUTS: [(usize, usize); 3] = [(0, 0), (0, 1), (1, 1)];

/// Block holding the self-covariance of input `i`.
pub fn diag_block(i: usize) -> usize {
    if i == 0 {
        B11
    } else {
        B22
    }
}

/// Covariance and NTK blocks of a pair of inputs, with per-entry standard
/// errors accumulated along the propagation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelState {
    pub sigma: [Matrix; 3],
    pub sigma_se: [Matrix; 3],
    pub theta: Option<[Matrix; 3]>,
    pub theta_se: Option<[Matrix; 3]>,
    pub layer_index: usize,
}

impl KernelState {
    pub fn from_blocks(sigma11: Matrix, sigma12: Matrix, sigma22: Matrix) -> Result<Self, KernelError> {
        let t = sigma11.nrows();
        for m in [&sigma11, &sigma12, &sigma22] {
            if m.shape() != (t, t) {
                return Err(KernelError::ShapeMismatch("blocks must all be TxT".into()));
            }
        }
        let zero = Matrix::zeros(t, t);
        Ok(Self {
            sigma: [sigma11, sigma12, sigma22],
            sigma_se: [zero.clone(), zero.clone(), zero],
            theta: None,
            theta_se: None,
            layer_index: 0,
        })
    }

    pub fn with_theta(mut self, theta11: Matrix, theta12: Matrix, theta22: Matrix) -> Result<Self, KernelError> {
        let t = self.t();
        for m in [&theta11, &theta12, &theta22] {
            if m.shape() != (t, t) {
                return Err(KernelError::ShapeMismatch("NTK blocks must all be TxT".into()));
            }
        }
        let zero = Matrix::zeros(t, t);
        self.theta = Some([theta11, theta12, theta22]);
        self.theta_se = Some([zero.clone(), zero.clone(), zero]);
        Ok(self)
    }

    pub fn t(&self) -> usize {
        self.sigma[B11].nrows()
    }

    pub fn sigma11(&self) -> &Matrix {
        &self.sigma[B11]
    }

    pub fn sigma12(&self) -> &Matrix {
        &self.sigma[B12]
    }

    pub fn sigma22(&self) -> &Matrix {
        &self.sigma[B22]
    }

    pub fn has_ntk(&self) -> bool {
        self.theta.is_some()
    }

    pub(crate) fn theta_blocks(&self) -> Result<(&[Matrix; 3], &[Matrix; 3]), KernelError> {
        match (&self.theta, &self.theta_se) {
            (Some(t), Some(se)) => Ok((t, se)),
            _ => Err(KernelError::MissingNtk),
        }
    }
}
