//! Frozen feature encoders for music, image, and video payloads.
//!
//! Each encoder summarizes its payload as a fixed-shape embedding matrix:
//! the payload's scalar stream is split into `rows` windows, each window is
//! reduced to three statistics (mean, RMS, energy), and the stats are mixed
//! through a fixed seeded matrix into `dim` columns. The encoders hold no
//! trainable state and the same input always produces the same embedding;
//! nearby inputs produce nearby embeddings.

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::tensor::{m2te, xavier_uniform, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// Seed for the fixed stats-to-embedding mixing matrix, shared by all kinds.
const MIX_SEED: u64 = 0x4D32;
/// Number of per-window summary statistics.
const N_STATS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityKind {
    Music,
    Image,
    Video,
}

impl ModalityKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModalityKind::Music => "music",
            ModalityKind::Image => "image",
            ModalityKind::Video => "video",
        }
    }

    pub fn parse(s: &str) -> Result<ModalityKind> {
        match s.to_ascii_lowercase().as_str() {
            "music" => Ok(ModalityKind::Music),
            "image" => Ok(ModalityKind::Image),
            "video" => Ok(ModalityKind::Video),
            other => Err(Error::Format(format!("unknown modality kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for ModalityKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A single RGB8 video frame.
#[derive(Debug, Clone)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

/// Raw input to an encoder.
#[derive(Debug, Clone)]
pub enum RawPayload {
    Music(Waveform),
    Image {
        width: usize,
        height: usize,
        rgb: Vec<u8>,
    },
    Video {
        frames: Vec<Frame>,
    },
}

impl RawPayload {
    pub fn kind(&self) -> ModalityKind {
        match self {
            RawPayload::Music(_) => ModalityKind::Music,
            RawPayload::Image { .. } => ModalityKind::Image,
            RawPayload::Video { .. } => ModalityKind::Video,
        }
    }
}

/// Output geometry of one encoder: `rows x dim`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    pub rows: usize,
    pub dim: usize,
}

/// Per-kind encoder geometries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EncoderShapes {
    pub music: EncoderConfig,
    pub image: EncoderConfig,
    pub video: EncoderConfig,
}

impl EncoderShapes {
    pub fn for_kind(&self, kind: ModalityKind) -> EncoderConfig {
        match kind {
            ModalityKind::Music => self.music,
            ModalityKind::Image => self.image,
            ModalityKind::Video => self.video,
        }
    }
}

/// A fixed-shape embedding of one modality payload.
#[derive(Debug, Clone)]
pub struct ModalityEmbedding {
    pub kind: ModalityKind,
    pub tensor: Tensor,
    /// Free-form origin label, carried into the sidecar on save.
    pub source: String,
}

fn scalar_stream(payload: &RawPayload) -> Result<Vec<f64>> {
    match payload {
        RawPayload::Music(wave) => {
            if wave.samples.is_empty() {
                return Err(Error::EmptyInput("music payload has no samples".into()));
            }
            Ok(wave.samples.clone())
        }
        RawPayload::Image { width, height, rgb } => {
            if rgb.is_empty() {
                return Err(Error::EmptyInput("image payload has no pixels".into()));
            }
            if rgb.len() != 3 * width * height {
                return Err(Error::Data(format!(
                    "image payload holds {} bytes, expected {} for {}x{} RGB",
                    rgb.len(),
                    3 * width * height,
                    width,
                    height
                )));
            }
            Ok(rgb.iter().map(|&b| b as f64 / 255.0).collect())
        }
        RawPayload::Video { frames } => {
            if frames.is_empty() {
                return Err(Error::EmptyInput("video payload has no frames".into()));
            }
            let mut stream = Vec::new();
            for (i, f) in frames.iter().enumerate() {
                if f.rgb.is_empty() {
                    return Err(Error::EmptyInput(format!("video frame {i} is empty")));
                }
                if f.rgb.len() != 3 * f.width * f.height {
                    return Err(Error::Data(format!(
                        "video frame {i} holds {} bytes, expected {}",
                        f.rgb.len(),
                        3 * f.width * f.height
                    )));
                }
                stream.extend(f.rgb.iter().map(|&b| b as f64 / 255.0));
            }
            Ok(stream)
        }
    }
}

/// Encodes a payload into a `rows x dim` embedding. The payload's modality
/// must match `kind`.
pub fn encode(
    kind: ModalityKind,
    cfg: EncoderConfig,
    payload: &RawPayload,
) -> Result<ModalityEmbedding> {
    if payload.kind() != kind {
        return Err(Error::ModalityMismatch {
            expected: kind.as_str(),
            got: payload.kind().as_str(),
        });
    }
    if cfg.rows == 0 || cfg.dim == 0 {
        return Err(Error::Config(format!(
            "encoder shape ({}, {}) must be positive",
            cfg.rows, cfg.dim
        )));
    }
    let stream = scalar_stream(payload)?;
    let n = stream.len();

    // Per-window stats: mean, RMS, energy (mean square). Windows are the
    // `rows` near-equal chunks of the stream; an empty chunk is all zeros.
    let mut stats = vec![0.0; cfg.rows * N_STATS];
    for w in 0..cfg.rows {
        let start = w * n / cfg.rows;
        let end = (w + 1) * n / cfg.rows;
        if start >= end {
            continue;
        }
        let win = &stream[start..end];
        let len = win.len() as f64;
        let mean = win.iter().sum::<f64>() / len;
        let energy = win.iter().map(|v| v * v).sum::<f64>() / len;
        stats[w * N_STATS] = mean;
        stats[w * N_STATS + 1] = energy.sqrt();
        stats[w * N_STATS + 2] = energy;
    }

    // The mix is scaled up from fan-based init so feature rows land at a
    // magnitude comparable to token embeddings; downstream adapters then
    // start from inputs that are neither vanishing nor saturating.
    let mut rng = ChaCha8Rng::seed_from_u64(MIX_SEED);
    let mix = xavier_uniform(&mut rng, N_STATS, cfg.dim, &[N_STATS, cfg.dim]).scale(4.0);
    let stats_t = Tensor::from_vec(&[cfg.rows, N_STATS], stats)?;
    let tensor = stats_t.matmul(&mix)?;
    Ok(ModalityEmbedding {
        kind,
        tensor,
        source: String::new(),
    })
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Sidecar {
    kind: String,
    source: String,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    std::path::PathBuf::from(s)
}

/// Writes the embedding tensor plus a one-line JSON sidecar naming the kind
/// and source. The sidecar lives at `<path>.json`.
pub fn save_embedding(path: impl AsRef<Path>, emb: &ModalityEmbedding) -> Result<()> {
    let path = path.as_ref();
    m2te::write_file(path, emb.tensor.shape(), &emb.tensor.data())?;
    let side = Sidecar {
        kind: emb.kind.as_str().to_string(),
        source: emb.source.clone(),
    };
    let text = serde_json::to_string(&side)
        .map_err(|e| Error::Format(format!("sidecar serialization failed: {e}")))?;
    std::fs::write(sidecar_path(path), text).map_err(|e| Error::io(sidecar_path(path), e))
}

/// Loads an embedding written by [`save_embedding`], checking the sidecar's
/// kind and the tensor shape against the expected geometry.
pub fn load_embedding(path: impl AsRef<Path>, shapes: &EncoderShapes) -> Result<ModalityEmbedding> {
    let path = path.as_ref();
    let side_path = sidecar_path(path);
    let side_text =
        std::fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
    let side: Sidecar = serde_json::from_str(&side_text)
        .map_err(|e| Error::Format(format!("bad sidecar {}: {e}", side_path.display())))?;
    let kind = ModalityKind::parse(&side.kind)?;
    let (shape, data) = m2te::read_file(path)?;
    let cfg = shapes.for_kind(kind);
    if shape != [cfg.rows, cfg.dim] {
        return Err(Error::Shape {
            op: "load_embedding",
            lhs: shape,
            rhs: vec![cfg.rows, cfg.dim],
        });
    }
    Ok(ModalityEmbedding {
        kind,
        tensor: Tensor::from_vec(&shape, data)?,
        source: side.source,
    })
}
