//! Stand-in music synthesizer: renders a conditioning embedding as a sum of
//! eight exponentially decaying sinusoids.
//!
//! The conditioning vector maps through a fixed random projection to eight
//! (frequency, amplitude, decay) triples. Frequencies always land inside
//! [110, 1760] Hz, the output peak is normalized to 0.9, and the sample
//! count is exactly `round(duration * sample_rate)`. The same conditioning
//! always renders the same audio; different conditioning renders different
//! audio through the fixed projection.

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::projector::ConditioningEmbedding;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Number of sinusoidal partials.
pub const N_PARTIALS: usize = 8;

/// Caps render length to keep memory bounded.
const MAX_SAMPLES: usize = 16_000_000;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One partial of the rendered tone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Partial {
    pub freq_hz: f64,
    pub amplitude: f64,
    /// Exponential decay rate in 1/s.
    pub decay: f64,
}

/// Maps conditioning values to the eight partials. Exposed separately so
/// the frequency-range and determinism contracts can be checked directly.
pub fn partials_for(cond: &ConditioningEmbedding) -> Result<Vec<Partial>> {
    let c = cond.to_vec();
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(
            "non-finite conditioning value in synthesizer".into(),
        ));
    }
    let n = c.len();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED ^ n as u64);
    let scale = 1.0 / (n as f64).sqrt();
    let mut raw = [0.0f64; 3 * N_PARTIALS];
    for slot in raw.iter_mut() {
        let mut v = 0.0;
        for &x in &c {
            v += x * rng.random_range(-1.0..1.0);
        }
        *slot = v * scale + rng.random_range(-1.0..1.0);
    }
    Ok((0..N_PARTIALS)
        .map(|i| {
            let f = sigmoid(raw[3 * i]);
            let a = sigmoid(raw[3 * i + 1]);
            let d = sigmoid(raw[3 * i + 2]);
            Partial {
                // 110 * 2^(4f) spans [110, 1760] as f spans [0, 1].
                freq_hz: 110.0 * (4.0 * f).exp2(),
                amplitude: 0.2 + 0.8 * a,
                decay: 0.3 + 3.0 * d,
            }
        })
        .collect())
}

/// Renders `duration_secs` of audio at `sample_rate` from the conditioning
/// embedding. The peak amplitude is normalized to 0.9.
pub fn stub_synthesize(
    cond: &ConditioningEmbedding,
    duration_secs: f64,
    sample_rate: u32,
) -> Result<Waveform> {
    if !(duration_secs > 0.0) || !duration_secs.is_finite() {
        return Err(Error::Config(format!(
            "synthesis duration must be positive, got {duration_secs}"
        )));
    }
    if sample_rate == 0 {
        return Err(Error::Config("sample rate must be positive".into()));
    }
    let n_samples = (duration_secs * sample_rate as f64).round() as usize;
    if n_samples == 0 || n_samples > MAX_SAMPLES {
        return Err(Error::Config(format!(
            "synthesis of {n_samples} samples is out of range"
        )));
    }
    let partials = partials_for(cond)?;
    let dt = 1.0 / sample_rate as f64;
    let mut samples = vec![0.0f64; n_samples];
    for (i, s) in samples.iter_mut().enumerate() {
        let t = i as f64 * dt;
        let mut v = 0.0;
        for p in &partials {
            v += p.amplitude * (-p.decay * t).exp() * (2.0 * std::f64::consts::PI * p.freq_hz * t).sin();
        }
        *s = v;
    }
    let peak = samples.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if peak > 0.0 {
        let g = 0.9 / peak;
        for s in samples.iter_mut() {
            *s *= g;
        }
    }
    Ok(Waveform::new(samples, sample_rate))
}
