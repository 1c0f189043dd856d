//! Audio I/O and analysis: PCM16 WAV files, short-time Fourier transform,
//! onset strength, tempo estimation, and chroma features.
//!
//! All analysis runs on mono `f64` samples in `[-1, 1]`. The STFT geometry
//! is fixed at 1024-point frames with hop 256 and a Hann window; every
//! consumer in the crate shares it so spectra are comparable.

use crate::error::{Error, Result};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use std::io::{Read, Write};
use std::path::Path;

pub const FFT_SIZE: usize = 1024;
pub const HOP: usize = 256;
/// Frequency bins per STFT frame, DC through Nyquist.
pub const N_BINS: usize = FFT_SIZE / 2 + 1;

/// Mono audio buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Waveform {
        Waveform {
            samples,
            sample_rate,
        }
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64).sqrt()
    }

    /// Truncates or zero-pads to an exact duration.
    pub fn fit_duration(&self, secs: f64) -> Waveform {
        let n = (secs * self.sample_rate as f64).round() as usize;
        let mut samples = self.samples.clone();
        samples.resize(n, 0.0);
        Waveform::new(samples, self.sample_rate)
    }
}

// ---- WAV I/O ----

/// Reads a RIFF/WAVE file holding 16-bit PCM, mono or stereo. Stereo is
/// downmixed by averaging the channels. Unknown chunks are skipped.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    parse_wav(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn parse_wav(bytes: &[u8]) -> Result<Waveform> {
    fn rd_u16(b: &[u8], off: usize) -> u16 {
        u16::from_le_bytes([b[off], b[off + 1]])
    }
    fn rd_u32(b: &[u8], off: usize) -> u32 {
        u32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
    }

    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::Format("not a RIFF/WAVE file".into()));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u32)> = None; // (channels, sample_rate)
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = rd_u32(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        if body_start + size > bytes.len() {
            return Err(Error::Format("truncated WAV chunk".into()));
        }
        let body = &bytes[body_start..body_start + size];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::Format("fmt chunk too short".into()));
                }
                let audio_format = rd_u16(body, 0);
                let channels = rd_u16(body, 2);
                let sample_rate = rd_u32(body, 4);
                let bits = rd_u16(body, 14);
                if audio_format != 1 || bits != 16 {
                    return Err(Error::Format(format!(
                        "only 16-bit PCM is supported, got format {audio_format} with {bits} bits"
                    )));
                }
                if channels == 0 || channels > 2 {
                    return Err(Error::Format(format!(
                        "unsupported channel count {channels}"
                    )));
                }
                fmt = Some((channels, sample_rate));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // Chunks are word-aligned.
        pos = body_start + size + (size & 1);
    }
    let (channels, sample_rate) = fmt.ok_or_else(|| Error::Format("missing fmt chunk".into()))?;
    let data = data.ok_or_else(|| Error::Format("missing data chunk".into()))?;
    if sample_rate == 0 {
        return Err(Error::Format("zero sample rate".into()));
    }
    let frame_bytes = 2 * channels as usize;
    let n_frames = data.len() / frame_bytes;
    let mut samples = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let mut acc = 0.0;
        for c in 0..channels as usize {
            let off = i * frame_bytes + 2 * c;
            let v = i16::from_le_bytes([data[off], data[off + 1]]);
            acc += v as f64 / 32768.0;
        }
        samples.push(acc / channels as f64);
    }
    Ok(Waveform::new(samples, sample_rate))
}

/// Writes a mono 16-bit PCM WAV file. Samples are clamped to `[-1, 1]`.
pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let path = path.as_ref();
    if wave.sample_rate == 0 {
        return Err(Error::Config("zero sample rate".into()));
    }
    let n = wave.samples.len();
    let data_len = 2 * n as u32;
    let mut out = Vec::with_capacity(44 + 2 * n);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&wave.sample_rate.to_le_bytes());
    out.extend_from_slice(&(2 * wave.sample_rate).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &wave.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

// ---- spectral analysis ----

/// Magnitude spectrogram: `frames[t][bin]` for bins DC through Nyquist.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub frames: Vec<Vec<f64>>,
    pub sample_rate: u32,
}

impl Spectrogram {
    /// Center frequency of a bin in Hz.
    pub fn bin_freq(&self, bin: usize) -> f64 {
        bin as f64 * self.sample_rate as f64 / FFT_SIZE as f64
    }

    /// Frames per second along the time axis.
    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / HOP as f64
    }
}

/// Short-time Fourier transform with the crate-wide geometry. The input
/// must hold at least one full frame; no padding is applied.
pub fn stft(wave: &Waveform) -> Result<Spectrogram> {
    let n = wave.samples.len();
    if n < FFT_SIZE {
        return Err(Error::EmptyInput(format!(
            "need at least {FFT_SIZE} samples for one frame, got {n}"
        )));
    }
    let window: Vec<f64> = (0..FFT_SIZE)
        .map(|i| {
            0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / (FFT_SIZE - 1) as f64).cos())
        })
        .collect();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(FFT_SIZE);
    let n_frames = (n - FFT_SIZE) / HOP + 1;
    let mut frames = Vec::with_capacity(n_frames);
    let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
    for t in 0..n_frames {
        let start = t * HOP;
        for i in 0..FFT_SIZE {
            buf[i] = Complex::new(wave.samples[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        frames.push(buf[..N_BINS].iter().map(|c| c.norm()).collect());
    }
    Ok(Spectrogram {
        frames,
        sample_rate: wave.sample_rate,
    })
}

/// Onset strength per frame: half-wave rectified spectral flux. The first
/// frame's strength is its total magnitude.
pub fn onset_envelope(spec: &Spectrogram) -> Vec<f64> {
    let mut env = Vec::with_capacity(spec.frames.len());
    for (t, frame) in spec.frames.iter().enumerate() {
        if t == 0 {
            env.push(frame.iter().sum());
        } else {
            let prev = &spec.frames[t - 1];
            env.push(
                frame
                    .iter()
                    .zip(prev)
                    .map(|(a, b)| (a - b).max(0.0))
                    .sum(),
            );
        }
    }
    env
}

/// Tempo in BPM via autocorrelation of the onset envelope over beat periods
/// between 0.25 s and 1.5 s (40 to 240 BPM), with parabolic peak refinement.
/// Returns 0.0 when the envelope carries no periodicity (flat or too short).
pub fn estimate_tempo(wave: &Waveform) -> Result<f64> {
    let spec = stft(wave)?;
    let env = onset_envelope(&spec);
    let frame_rate = spec.frame_rate();
    Ok(tempo_from_envelope(&env, frame_rate))
}

fn tempo_from_envelope(env: &[f64], frame_rate: f64) -> f64 {
    let n = env.len();
    let mean = env.iter().sum::<f64>() / n.max(1) as f64;
    let centered: Vec<f64> = env.iter().map(|v| v - mean).collect();
    let power: f64 = centered.iter().map(|v| v * v).sum();
    if power < 1e-12 {
        return 0.0; // flat envelope, no rhythm to find
    }
    let min_lag = (0.25 * frame_rate).ceil() as usize;
    let max_lag = ((1.5 * frame_rate).floor() as usize).min(n.saturating_sub(1));
    if min_lag == 0 || min_lag > max_lag {
        return 0.0;
    }
    let ac = |lag: usize| -> f64 {
        (0..n - lag).map(|i| centered[i] * centered[i + lag]).sum()
    };
    let mut best_lag = min_lag;
    let mut best_val = f64::NEG_INFINITY;
    let mut values = vec![0.0; max_lag + 2];
    for lag in min_lag..=max_lag {
        let v = ac(lag);
        values[lag] = v;
        if v > best_val {
            best_val = v;
            best_lag = lag;
        }
    }
    if best_val <= 0.0 {
        return 0.0;
    }
    // Parabolic refinement around the peak when both neighbors exist.
    let mut lag = best_lag as f64;
    if best_lag > min_lag && best_lag < max_lag {
        let (ym, y0, yp) = (
            values[best_lag - 1],
            values[best_lag],
            values[best_lag + 1],
        );
        let denom = ym - 2.0 * y0 + yp;
        if denom.abs() > 1e-12 {
            let delta = 0.5 * (ym - yp) / denom;
            if delta.abs() <= 1.0 {
                lag += delta;
            }
        }
    }
    60.0 * frame_rate / lag
}

/// Twelve-bin chroma profile summed over frames, normalized to unit mass.
/// Uses A4 = 440 Hz with pitch class 9 for A (so 0 is C). Bins below 30 Hz
/// are skipped. A silent spectrogram yields the uniform profile.
pub fn chroma(spec: &Spectrogram) -> [f64; 12] {
    let mut acc = [0.0; 12];
    for frame in &spec.frames {
        for (bin, &mag) in frame.iter().enumerate().skip(1) {
            let f = spec.bin_freq(bin);
            if f < 30.0 {
                continue;
            }
            let semitone = (12.0 * (f / 440.0).log2()).round() as i64;
            let pc = ((9 + semitone) % 12 + 12) % 12;
            acc[pc as usize] += mag;
        }
    }
    let total: f64 = acc.iter().sum();
    if total <= 0.0 {
        return [1.0 / 12.0; 12];
    }
    for v in acc.iter_mut() {
        *v /= total;
    }
    acc
}

// ---- summary features ----

/// Compact rhythm and pitch summary used by captioners and pair selection.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RhythmFeatures {
    pub tempo_bpm: f64,
    pub beat_count: u32,
    /// Dominant pitch class, 0 = C through 11 = B.
    pub pitch_class: usize,
    pub rms: f64,
    pub duration_secs: f64,
    pub chroma: Vec<f64>,
}

pub const PITCH_CLASS_NAMES: [&str; 12] = [
    "C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B",
];

/// Analyzes a waveform into [`RhythmFeatures`].
pub fn rhythm_features(wave: &Waveform) -> Result<RhythmFeatures> {
    if wave.samples.is_empty() {
        return Err(Error::EmptyInput("empty waveform".into()));
    }
    let spec = stft(wave)?;
    let env = onset_envelope(&spec);
    let tempo_bpm = tempo_from_envelope(&env, spec.frame_rate());
    let ch = chroma(&spec);
    let pitch_class = ch
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0);
    let duration_secs = wave.duration_secs();
    let beat_count = (tempo_bpm * duration_secs / 60.0).round() as u32;
    Ok(RhythmFeatures {
        tempo_bpm,
        beat_count,
        pitch_class,
        rms: wave.rms(),
        duration_secs,
        chroma: ch.to_vec(),
    })
}

/// Distance between two pitch classes on the circle of semitones, 0 to 6.
pub fn pitch_circle_distance(a: usize, b: usize) -> usize {
    let d = (a as i64 - b as i64).rem_euclid(12) as usize;
    d.min(12 - d)
}

// ---- deterministic test and demo signals ----

/// Amplitude-modulated sine: carrier `freq_hz`, envelope raised-cosine at
/// `mod_hz`. A 2 Hz modulation reads as 120 BPM.
pub fn am_tone(freq_hz: f64, mod_hz: f64, secs: f64, sample_rate: u32) -> Waveform {
    let n = (secs * sample_rate as f64).round() as usize;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / sample_rate as f64;
            let env = 0.5 * (1.0 - (2.0 * std::f64::consts::PI * mod_hz * t).cos());
            0.8 * env * (2.0 * std::f64::consts::PI * freq_hz * t).sin()
        })
        .collect();
    Waveform::new(samples, sample_rate)
}

/// Steady sine tone.
pub fn tone(freq_hz: f64, secs: f64, sample_rate: u32) -> Waveform {
    let n = (secs * sample_rate as f64).round() as usize;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / sample_rate as f64;
            0.5 * (2.0 * std::f64::consts::PI * freq_hz * t).sin()
        })
        .collect();
    Waveform::new(samples, sample_rate)
}
