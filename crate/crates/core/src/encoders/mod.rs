//! Image backbone with pyramid aggregation, the causal text stack, and the
//! shared contrastive temperature.

mod image;
mod text;

pub use image::{Aggregator, ImageEncoder, ImageEncoderConfig, MultiScaleFeatures};
pub use text::{CausalLayer, TextEncoder, TextEncoding, TextStackConfig};

use candle_core::{Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{Init, Scope};

pub const TAU_MIN: f64 = 1e-3;
pub const TAU_MAX: f64 = 1e2;
pub const TAU_INIT: f64 = 0.07;

/// Learnable contrastive temperature stored as `log_tau`.
#[derive(Clone, Debug)]
pub struct Temperature {
    log_tau: Tensor,
}

impl Temperature {
    pub fn new(vs: &Scope, init: f64) -> Result<Self> {
        if !(TAU_MIN..=TAU_MAX).contains(&init) {
            return Err(Error::Config(format!(
                "temperature {init} outside [{TAU_MIN}, {TAU_MAX}]"
            )));
        }
        Ok(Self {
            log_tau: vs.get("log_tau", &[], Init::Const(init.ln()))?,
        })
    }

    /// `exp(clamp(log_tau))`, differentiable w.r.t. `log_tau` inside the range.
    pub fn tau(&self) -> Result<Tensor> {
        Ok(self
            .log_tau
            .clamp(TAU_MIN.ln(), TAU_MAX.ln())?
            .exp()?)
    }

    pub fn value(&self) -> Result<f64> {
        Ok(self.tau()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
    }

    /// Writes the clamped value back into the variable.
    pub fn enforce(&self, var: &Var) -> Result<()> {
        let clamped = self.log_tau.clamp(TAU_MIN.ln(), TAU_MAX.ln())?.detach();
        var.set(&clamped)?;
        Ok(())
    }

    pub fn log_tau(&self) -> &Tensor {
        &self.log_tau
    }
}

/// Everything the contrastive objectives consume for one batch.
#[derive(Clone, Debug)]
pub struct EmbeddingBundle {
    /// `[N, D]` unit rows.
    pub image_global: Tensor,
    /// `[N, n1, D]` unit rows.
    pub image_tokens: Tensor,
    /// `[N, D]` unit rows.
    pub text_global: Tensor,
    /// `[N, n2, D]` unit rows.
    pub findings_tokens: Tensor,
    /// `[N, n2]` 1.0 on real findings words.
    pub findings_mask: Tensor,
}
