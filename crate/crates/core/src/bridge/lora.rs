//! Bias-free linear layers, optionally with a low-rank trainable delta.
//!
//! The delta form is `W_eff = W + (alpha/r) * A @ B` where `A` is `[in, r]`
//! and `B` is `[r, out]`. `B` starts at zero, so a freshly constructed layer
//! computes exactly `x @ W`; training moves only `A` and `B` while the base
//! weight stays frozen.

use crate::error::Result;
use crate::tensor::xavier_uniform;
use crate::tensor::{Parameter, Tensor};
use rand::Rng;

#[derive(Debug)]
pub struct Linear {
    pub weight: Parameter,
}

impl Linear {
    pub fn new<R: Rng>(rng: &mut R, name: &str, in_dim: usize, out_dim: usize) -> Result<Linear> {
        Linear::with_gain(rng, name, in_dim, out_dim, 1.0)
    }

    /// Fan-in/fan-out init scaled by `gain`. Residual-stream output
    /// projections use a gain below one so each block contributes a small
    /// increment, keeping the stream's magnitude in a range that adapter
    /// signals can compete with.
    pub fn with_gain<R: Rng>(
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        gain: f64,
    ) -> Result<Linear> {
        let w = xavier_uniform(rng, in_dim, out_dim, &[in_dim, out_dim]).scale(gain);
        Ok(Linear {
            weight: Parameter::new(name, w)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(self.weight.tensor())
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![&self.weight]
    }
}

#[derive(Debug)]
pub struct LoraLinear {
    pub base: Parameter,
    pub lora_a: Parameter,
    pub lora_b: Parameter,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraLinear {
    /// `name` is the namespace: parameters are `{name}.weight`,
    /// `{name}.lora_a`, `{name}.lora_b`.
    pub fn new<R: Rng>(
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rank: usize,
        alpha: f64,
    ) -> Result<LoraLinear> {
        let base = xavier_uniform(rng, in_dim, out_dim, &[in_dim, out_dim]);
        let a = xavier_uniform(rng, in_dim, rank, &[in_dim, rank]);
        let b = Tensor::zeros(&[rank, out_dim]);
        Ok(LoraLinear {
            base: Parameter::new(format!("{name}.weight"), base)?,
            lora_a: Parameter::new(format!("{name}.lora_a"), a)?,
            lora_b: Parameter::new(format!("{name}.lora_b"), b)?,
            rank,
            alpha,
        })
    }

    /// `x @ W + (alpha/r) * (x @ A) @ B`. With `B = 0` this adds an exact
    /// zero matrix, so the output equals the plain projection.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let main = x.matmul(self.base.tensor())?;
        let low = x
            .matmul(self.lora_a.tensor())?
            .matmul(self.lora_b.tensor())?
            .scale(self.alpha / self.rank as f64);
        main.add(&low)
    }

    /// Materializes the effective weight `W + (alpha/r) * A @ B`.
    pub fn effective_weight(&self) -> Result<Tensor> {
        let delta = self
            .lora_a
            .tensor()
            .matmul(self.lora_b.tensor())?
            .scale(self.alpha / self.rank as f64);
        self.base.tensor().add(&delta)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![&self.base, &self.lora_a, &self.lora_b]
    }
}

/// Standalone form of the effective-weight computation for arbitrary parts.
pub fn lora_apply(base: &Tensor, a: &Tensor, b: &Tensor, rank: usize, alpha: f64) -> Result<Tensor> {
    let delta = a.matmul(b)?.scale(alpha / rank as f64);
    base.add(&delta)
}
