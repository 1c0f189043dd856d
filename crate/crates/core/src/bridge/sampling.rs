//! Temperature plus nucleus (top-p) sampling over a logit row.

use crate::error::{Error, Result};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            temperature: 0.6,
            top_p: 0.8,
        }
    }
}

impl SamplingParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be finite and positive, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!(
                "top_p must lie in (0, 1], got {}",
                self.top_p
            )));
        }
        Ok(())
    }
}

/// Returns the nucleus distribution implied by `logits`: probabilities after
/// temperature scaling, restricted to the smallest prefix of the
/// descending-sorted distribution whose mass reaches `top_p`, renormalized.
/// Entries are `(token id, probability)` in descending probability order.
pub fn nucleus(logits: &[f64], params: &SamplingParams) -> Result<Vec<(usize, f64)>> {
    params.validate()?;
    if logits.is_empty() {
        return Err(Error::EmptyInput("sampling over empty logits".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logit while sampling".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|&v| ((v - max) / params.temperature).exp())
        .collect();
    let z: f64 = exps.iter().sum();
    let mut order: Vec<usize> = (0..logits.len()).collect();
    // Ties break toward the lower token id to keep the cut deterministic.
    order.sort_by(|&a, &b| exps[b].partial_cmp(&exps[a]).unwrap().then(a.cmp(&b)));
    let mut kept: Vec<(usize, f64)> = Vec::new();
    let mut cum = 0.0;
    for &i in &order {
        let p = exps[i] / z;
        kept.push((i, p));
        cum += p;
        if cum >= params.top_p - 1e-12 {
            break;
        }
    }
    let mass: f64 = kept.iter().map(|(_, p)| p).sum();
    for (_, p) in &mut kept {
        *p /= mass;
    }
    Ok(kept)
}

/// Draws one token id from the nucleus distribution.
pub fn sample<R: Rng>(logits: &[f64], params: &SamplingParams, rng: &mut R) -> Result<usize> {
    let kept = nucleus(logits, params)?;
    let u: f64 = rng.random::<f64>();
    let mut cum = 0.0;
    for &(id, p) in &kept {
        cum += p;
        if u < cum {
            return Ok(id);
        }
    }
    Ok(kept.last().expect("nucleus is non-empty").0)
}
