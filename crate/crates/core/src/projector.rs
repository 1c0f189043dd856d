//! Output projector: turns the hidden states of a generated audio-token
//! block into a conditioning embedding for the synthesizer.
//!
//! The projector input combines, position by position, the bridge's final
//! hidden rows for the eight audio tokens with those tokens' input
//! embeddings (elementwise sum). One self-attention block mixes the eight
//! rows, then a flavor-specific head emits either a single conditioning
//! vector or a fixed-length conditioning sequence.
//!
//! `stub_text_encode` is a deterministic hash-based stand-in for a text
//! conditioning encoder: it gives training a stable regression target per
//! caption without any external model.

use crate::bridge::vocab::N_AUDIO;
use crate::bridge::TokenSeq;
use crate::error::{Error, Result};
use crate::tensor::{uniform, xavier_uniform, Parameter, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Shape of the conditioning signal the downstream synthesizer expects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CondFlavor {
    /// One vector of width `dim`.
    Vec { dim: usize },
    /// `len` vectors of width `dim`.
    Seq { len: usize, dim: usize },
}

impl CondFlavor {
    pub fn numel(&self) -> usize {
        match *self {
            CondFlavor::Vec { dim } => dim,
            CondFlavor::Seq { len, dim } => len * dim,
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        match *self {
            CondFlavor::Vec { dim } => vec![dim],
            CondFlavor::Seq { len, dim } => vec![len, dim],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            CondFlavor::Vec { dim } => dim > 0,
            CondFlavor::Seq { len, dim } => len > 0 && dim > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config("conditioning dimensions must be positive".into()))
        }
    }
}

/// A conditioning signal plus the flavor it satisfies.
#[derive(Debug, Clone)]
pub struct ConditioningEmbedding {
    pub flavor: CondFlavor,
    pub tensor: Tensor,
}

impl ConditioningEmbedding {
    pub fn new(flavor: CondFlavor, tensor: Tensor) -> Result<ConditioningEmbedding> {
        if tensor.shape() != flavor.shape().as_slice() {
            return Err(Error::Shape {
                op: "conditioning embedding",
                lhs: tensor.shape().to_vec(),
                rhs: flavor.shape(),
            });
        }
        Ok(ConditioningEmbedding { flavor, tensor })
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.tensor.to_vec()
    }
}

/// Sums the final hidden rows of the trailing audio block with the audio
/// tokens' own input embeddings, yielding the `[8, d_model]` projector
/// input. The sequence must end with a complete audio block.
pub fn combine_audio_hidden(
    final_hidden: &Tensor,
    seq: &TokenSeq,
    embed_table: &Tensor,
) -> Result<Tensor> {
    if !seq.has_audio_block {
        return Err(Error::Contract(
            "projector input requires a sequence ending in a complete audio block".into(),
        ));
    }
    let t = final_hidden.shape()[0];
    if t != seq.ids.len() {
        return Err(Error::Shape {
            op: "combine audio hidden",
            lhs: final_hidden.shape().to_vec(),
            rhs: vec![seq.ids.len()],
        });
    }
    let block = &seq.ids[t - N_AUDIO..];
    let hidden_rows = final_hidden.slice_rows(t - N_AUDIO, N_AUDIO)?;
    let embed_rows = embed_table.embedding(block)?;
    hidden_rows.add(&embed_rows)
}

#[derive(Debug)]
pub struct Projector {
    pub d_model: usize,
    pub flavor: CondFlavor,
    pub norm: Parameter,
    pub wq: Parameter,
    pub wk: Parameter,
    pub wv: Parameter,
    pub wo: Parameter,
    /// Learned cross-attention queries, sequence flavor only.
    pub queries: Option<Parameter>,
    pub cross_k: Option<Parameter>,
    pub cross_v: Option<Parameter>,
    pub out_w: Parameter,
    pub out_b: Parameter,
}

impl Projector {
    pub fn new<R: Rng>(rng: &mut R, d_model: usize, flavor: CondFlavor) -> Result<Projector> {
        flavor.validate()?;
        let d = d_model;
        let lin = |rng: &mut R, name: &str| -> Result<Parameter> {
            Parameter::new(name, xavier_uniform(rng, d, d, &[d, d]))
        };
        let norm = Parameter::new("projector.norm.gain", Tensor::full(&[d], 1.0))?;
        let wq = lin(rng, "projector.attn.q.weight")?;
        let wk = lin(rng, "projector.attn.k.weight")?;
        let wv = lin(rng, "projector.attn.v.weight")?;
        let wo = lin(rng, "projector.attn.o.weight")?;
        let (queries, cross_k, cross_v) = match flavor {
            CondFlavor::Vec { .. } => (None, None, None),
            CondFlavor::Seq { len, .. } => {
                let q = Parameter::new(
                    "projector.queries",
                    uniform(rng, -0.5, 0.5, &[len, d]),
                )?;
                let ck = lin(rng, "projector.cross.k.weight")?;
                let cv = lin(rng, "projector.cross.v.weight")?;
                (Some(q), Some(ck), Some(cv))
            }
        };
        let dim = match flavor {
            CondFlavor::Vec { dim } | CondFlavor::Seq { dim, .. } => dim,
        };
        let out_w = Parameter::new(
            "projector.out.weight",
            xavier_uniform(rng, d, dim, &[d, dim]),
        )?;
        let out_b = Parameter::new("projector.out.bias", Tensor::zeros(&[dim]))?;
        Ok(Projector {
            d_model,
            flavor,
            norm,
            wq,
            wk,
            wv,
            wo,
            queries,
            cross_k,
            cross_v,
            out_w,
            out_b,
        })
    }

    /// Maps the `[8, d_model]` combined block to a conditioning embedding.
    pub fn forward(&self, combined: &Tensor) -> Result<ConditioningEmbedding> {
        if combined.shape() != [N_AUDIO, self.d_model] {
            return Err(Error::Shape {
                op: "projector forward",
                lhs: combined.shape().to_vec(),
                rhs: vec![N_AUDIO, self.d_model],
            });
        }
        let scale = 1.0 / (self.d_model as f64).sqrt();
        let normed = combined.rms_norm(self.norm.tensor())?;
        let q = normed.matmul(self.wq.tensor())?;
        let k = normed.matmul(self.wk.tensor())?;
        let v = normed.matmul(self.wv.tensor())?;
        let attn = q
            .matmul(&k.transpose()?)?
            .scale(scale)
            .softmax_rows()?
            .matmul(&v)?
            .matmul(self.wo.tensor())?;
        let h = combined.add(&attn)?;

        let tensor = match self.flavor {
            CondFlavor::Vec { dim } => h
                .mean_rows()?
                .matmul(self.out_w.tensor())?
                .add_row(self.out_b.tensor())?
                .reshape(&[dim])?,
            CondFlavor::Seq { .. } => {
                let queries = self.queries.as_ref().expect("sequence flavor has queries");
                let ck = self.cross_k.as_ref().expect("sequence flavor has keys");
                let cv = self.cross_v.as_ref().expect("sequence flavor has values");
                let kc = h.matmul(ck.tensor())?;
                let vc = h.matmul(cv.tensor())?;
                queries
                    .tensor()
                    .matmul(&kc.transpose()?)?
                    .scale(scale)
                    .softmax_rows()?
                    .matmul(&vc)?
                    .matmul(self.out_w.tensor())?
                    .add_row(self.out_b.tensor())?
            }
        };
        ConditioningEmbedding::new(self.flavor, tensor)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut ps = vec![&self.norm, &self.wq, &self.wk, &self.wv, &self.wo];
        if let Some(q) = &self.queries {
            ps.push(q);
        }
        if let Some(k) = &self.cross_k {
            ps.push(k);
        }
        if let Some(v) = &self.cross_v {
            ps.push(v);
        }
        ps.push(&self.out_w);
        ps.push(&self.out_b);
        ps
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministic caption encoder used as a regression target. Each
/// (token, position) pair contributes a pseudo-random 32-wide vector; the
/// mean of those vectors expands through a fixed matrix to the flavor
/// shape. Changing, reordering, or repeating words all change the output.
pub fn stub_text_encode(caption: &str, flavor: CondFlavor) -> Result<ConditioningEmbedding> {
    flavor.validate()?;
    const WIDTH: usize = 32;
    let tokens: Vec<&str> = caption.split_whitespace().collect();
    if tokens.is_empty() {
        return Err(Error::EmptyInput("caption with no words".into()));
    }
    let mut acc = vec![0.0f64; WIDTH];
    for (pos, tok) in tokens.iter().enumerate() {
        let seed = fnv1a64(tok.as_bytes()) ^ (0x9E3779B97F4A7C15u64.wrapping_mul(pos as u64 + 1));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for slot in acc.iter_mut() {
            *slot += rng.random_range(-1.0..1.0);
        }
    }
    for slot in acc.iter_mut() {
        *slot /= tokens.len() as f64;
    }
    let numel = flavor.numel();
    let mut rng = ChaCha8Rng::seed_from_u64(0x7E47 ^ numel as u64);
    let mut out = vec![0.0f64; numel];
    let scale = 1.0 / (WIDTH as f64).sqrt();
    for slot in out.iter_mut() {
        let mut v = 0.0;
        for &a in &acc {
            v += a * rng.random_range(-1.0..1.0);
        }
        *slot = v * scale;
    }
    ConditioningEmbedding::new(flavor, Tensor::from_vec(&flavor.shape(), out)?)
}
