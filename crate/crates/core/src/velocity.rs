//! The velocity-field contract shared by analytic test fields and the toy
//! transformer.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::attention::{AttentionHook, HookError};
use crate::latent::{LatentState, Shape};
use crate::linalg::Mat;

#[derive(Clone, Debug, PartialEq)]
pub enum VelocityError {
    ShapeMismatch { expected: Shape, got: Shape },
    BadParams { message: String },
    TokenOutOfRange { id: u32, vocab: u32 },
    PromptTooLong { len: usize, max: usize },
    MissingCondition,
    Hook(HookError),
}

impl fmt::Display for VelocityError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VelocityError::ShapeMismatch { expected, got } => {
                write!(f, "latent shape {got} does not match model shape {expected}")
            }
            VelocityError::BadParams { message } => write!(f, "invalid field parameters: {message}"),
            VelocityError::TokenOutOfRange { id, vocab } => {
                write!(f, "token id {id} outside vocabulary 0..{vocab}")
            }
            VelocityError::PromptTooLong { len, max } => {
                write!(f, "prompt holds {len} tokens, limit is {max}")
            }
            VelocityError::MissingCondition => write!(f, "this field requires a prompt embedding"),
            VelocityError::Hook(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for VelocityError {}

impl From<HookError> for VelocityError {
    fn from(e: HookError) -> Self {
        VelocityError::Hook(e)
    }
}

/// Deterministic prompt embedding: padded token ids plus their vector rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptEmbedding {
    /// Padded to the model's text length with the reserved pad id.
    pub tokens: Vec<u32>,
    /// n_text x d_model.
    pub vectors: Mat,
}

/// A velocity field v(z, t, condition, guidance).
///
/// Implementations must be pure and deterministic given their construction
/// parameters, must return the input shape, and must accept any
/// t in [-0.1, 1.1] (stage nodes of some tableaus step slightly outside the
/// current interval).
pub trait VelocityField {
    fn eval(
        &self,
        z: &LatentState,
        t: f64,
        condition: Option<&PromptEmbedding>,
        guidance: f64,
        hook: Option<&mut dyn AttentionHook>,
    ) -> Result<LatentState, VelocityError>;

    /// Lipschitz constant in z, when known.
    fn lipschitz(&self) -> Option<f64> {
        None
    }

    /// Closed-form solution z(t) of the ODE started at z0 at t = 0.
    fn exact_solution(&self, _z0: &LatentState, _t: f64) -> Option<LatentState> {
        None
    }
}
