//! Full model assembly and the checkpoint container.
//!
//! A model is three modality adapters, the language-model bridge, and the
//! output projector, built around one vocabulary. Checkpoints are a flat
//! binary archive: a JSON manifest describing the architecture and
//! vocabulary, followed by one tensor entry per parameter in sorted name
//! order. The archive holds no timestamps or training-progress fields, so
//! retraining that changes no parameter rewrites a byte-identical file.

use crate::adapter::{Adapter, AdapterConfig};
use crate::bridge::sampling::SamplingParams;
use crate::bridge::vocab::TokenSeq;
use crate::bridge::{Bridge, ModelConfig, Prefixes, Vocab};
use crate::config::Profile;
use crate::encoders::{EncoderShapes, ModalityEmbedding, ModalityKind};
use crate::error::{Error, Result};
use crate::projector::{CondFlavor, Projector};
use crate::tensor::{m2te, Parameter, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

/// Which parameters each training stage may move. Everything outside the
/// stage set stays frozen, including the bridge base weights, embeddings,
/// and the output head.
pub fn stage_trainable(name: &str, stage: u8) -> bool {
    let adapters = name.starts_with("adapter.") || name.ends_with(".attn.gate");
    let projector = name.starts_with("projector.");
    let lora = name.contains(".lora_");
    match stage {
        1 => adapters,
        2 => projector,
        3 => adapters || projector || lora,
        _ => false,
    }
}

/// Encoded modality features awaiting adaptation.
#[derive(Debug, Default)]
pub struct EncodedInputs {
    pub music: Option<ModalityEmbedding>,
    pub image: Option<ModalityEmbedding>,
    pub video: Option<ModalityEmbedding>,
}

impl EncodedInputs {
    pub fn set(&mut self, emb: ModalityEmbedding) {
        match emb.kind {
            ModalityKind::Music => self.music = Some(emb),
            ModalityKind::Image => self.image = Some(emb),
            ModalityKind::Video => self.video = Some(emb),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &ModalityEmbedding> {
        [self.music.as_ref(), self.image.as_ref(), self.video.as_ref()]
            .into_iter()
            .flatten()
    }

    pub fn is_empty(&self) -> bool {
        self.music.is_none() && self.image.is_none() && self.video.is_none()
    }
}

/// Architecture description stored in every checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub model: ModelConfig,
    pub encoders: EncoderShapes,
    pub prefix_len: usize,
    pub flavor: CondFlavor,
    pub vocab: Vec<String>,
}

#[derive(Debug)]
pub struct Model {
    pub vocab: Vocab,
    pub music_adapter: Adapter,
    pub image_adapter: Adapter,
    pub video_adapter: Adapter,
    pub bridge: Bridge,
    pub projector: Projector,
    pub encoders: EncoderShapes,
    pub prefix_len: usize,
}

impl Model {
    pub fn new(profile: &Profile, vocab: Vocab, seed: u64) -> Result<Model> {
        Model::from_parts(
            profile.model_config(vocab.len()),
            profile.encoders,
            profile.prefix_len,
            profile.flavor,
            vocab,
            seed,
        )
    }

    pub fn from_parts(
        cfg: ModelConfig,
        encoders: EncoderShapes,
        prefix_len: usize,
        flavor: CondFlavor,
        vocab: Vocab,
        seed: u64,
    ) -> Result<Model> {
        if vocab.len() != cfg.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary of {} tokens does not match configured size {}",
                vocab.len(),
                cfg.vocab_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let adapter = |rng: &mut ChaCha8Rng, kind: ModalityKind| -> Result<Adapter> {
            let enc = encoders.for_kind(kind);
            Adapter::new(
                &format!("adapter.{kind}"),
                AdapterConfig {
                    in_dim: enc.dim,
                    model_dim: cfg.d_model,
                    prefix_len,
                    seq_len: enc.rows,
                },
                rng,
            )
        };
        let music_adapter = adapter(&mut rng, ModalityKind::Music)?;
        let image_adapter = adapter(&mut rng, ModalityKind::Image)?;
        let video_adapter = adapter(&mut rng, ModalityKind::Video)?;
        let bridge = Bridge::new(&mut rng, cfg.clone())?;
        let projector = Projector::new(&mut rng, cfg.d_model, flavor)?;
        Ok(Model {
            vocab,
            music_adapter,
            image_adapter,
            video_adapter,
            bridge,
            projector,
            encoders,
            prefix_len,
        })
    }

    pub fn adapter_for(&self, kind: ModalityKind) -> &Adapter {
        match kind {
            ModalityKind::Music => &self.music_adapter,
            ModalityKind::Image => &self.image_adapter,
            ModalityKind::Video => &self.video_adapter,
        }
    }

    /// Adapts every provided modality embedding into a bridge prefix.
    pub fn prefixes(&self, inputs: &EncodedInputs) -> Result<Prefixes> {
        let mut prefixes = Prefixes::none();
        for emb in inputs.iter() {
            prefixes.set(emb.kind, self.adapter_for(emb.kind).forward(emb)?);
        }
        Ok(prefixes)
    }

    pub fn forward(&self, ids: &[usize], prefixes: &Prefixes) -> Result<(Tensor, Tensor)> {
        self.bridge.forward(ids, prefixes)
    }

    pub fn generate<R: rand::Rng>(
        &self,
        prompt: &[usize],
        inputs: &EncodedInputs,
        max_new: usize,
        params: &SamplingParams,
        rng: &mut R,
    ) -> Result<TokenSeq> {
        let prefixes = self.prefixes(inputs)?;
        self.bridge.generate(prompt, &prefixes, max_new, params, rng)
    }

    /// All parameters: adapters, bridge, projector, in stable order. The
    /// returned handles share storage with the model, so freezing or
    /// stepping them updates the model in place.
    pub fn params(&self) -> Vec<Parameter> {
        let mut ps = self.music_adapter.params();
        ps.extend(self.image_adapter.params());
        ps.extend(self.video_adapter.params());
        ps.extend(self.bridge.params().into_iter().cloned());
        ps.extend(self.projector.params().into_iter().cloned());
        ps
    }

    /// Freezes everything outside the stage's trainable set.
    pub fn set_stage(&self, stage: u8) -> Result<()> {
        if !(1..=3).contains(&stage) {
            return Err(Error::Config(format!("training stage must be 1..=3, got {stage}")));
        }
        for p in self.params() {
            p.set_trainable(stage_trainable(p.name(), stage));
        }
        Ok(())
    }

    /// Freezes every parameter (inference configuration).
    pub fn freeze_all(&self) {
        for p in self.params() {
            p.set_trainable(false);
        }
    }

    pub fn trainable_params(&self) -> Vec<Parameter> {
        self.params().into_iter().filter(|p| p.trainable()).collect()
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            model: self.bridge.cfg.clone(),
            encoders: self.encoders,
            prefix_len: self.prefix_len,
            flavor: self.projector.flavor,
            vocab: (0..self.vocab.len())
                .map(|i| self.vocab.token(i).unwrap().to_string())
                .collect(),
        }
    }

    /// Errors when this model's architecture disagrees with the profile
    /// (vocabulary size aside, which is data-dependent).
    pub fn verify_matches(&self, profile: &Profile) -> Result<()> {
        let got = &self.bridge.cfg;
        let want = profile.model_config(got.vocab_size);
        if *got != want
            || self.encoders != profile.encoders
            || self.prefix_len != profile.prefix_len
            || self.projector.flavor != profile.flavor
        {
            return Err(Error::Config(format!(
                "checkpoint incompatible with profile {}: architecture differs",
                profile.name
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let manifest =
            serde_json::to_vec(&self.manifest()).expect("manifest serializes");
        let mut entries: Vec<(String, Vec<u8>)> = vec![(MANIFEST_NAME.to_string(), manifest)];
        let mut tensors = BTreeMap::new();
        for p in self.params() {
            let t = p.tensor();
            let bytes = m2te::encode(t.shape(), &t.to_vec(), m2te::Dtype::F64)?;
            if tensors.insert(p.name().to_string(), bytes).is_some() {
                return Err(Error::Contract(format!(
                    "duplicate parameter name {:?} while saving",
                    p.name()
                )));
            }
        }
        entries.extend(tensors);
        write_archive(path.as_ref(), &entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Model> {
        let path = path.as_ref();
        let entries = read_archive(path)?;
        let mut map: BTreeMap<String, Vec<u8>> = BTreeMap::new();
        for (name, bytes) in entries {
            if map.insert(name.clone(), bytes).is_some() {
                return Err(Error::Format(format!(
                    "duplicate checkpoint entry {name:?}"
                )));
            }
        }
        let manifest_bytes = map.remove(MANIFEST_NAME).ok_or_else(|| {
            Error::Format("checkpoint is missing its manifest entry".into())
        })?;
        let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
            .map_err(|e| Error::Format(format!("malformed checkpoint manifest: {e}")))?;
        let vocab = Vocab::from_tokens(manifest.vocab.clone())?;
        let model = Model::from_parts(
            manifest.model,
            manifest.encoders,
            manifest.prefix_len,
            manifest.flavor,
            vocab,
            0,
        )?;
        for p in model.params() {
            let bytes = map.remove(p.name()).ok_or_else(|| {
                Error::Format(format!("checkpoint is missing parameter {:?}", p.name()))
            })?;
            let (shape, data) = m2te::decode(&bytes)?;
            if shape != p.tensor().shape() {
                return Err(Error::Format(format!(
                    "checkpoint parameter {:?} has shape {:?}, expected {:?}",
                    p.name(),
                    shape,
                    p.tensor().shape()
                )));
            }
            p.tensor().set_data(data)?;
        }
        if let Some(extra) = map.keys().next() {
            return Err(Error::Format(format!(
                "checkpoint contains unknown entry {extra:?}"
            )));
        }
        model.freeze_all();
        Ok(model)
    }
}

const MAGIC: &[u8; 4] = b"M2AR";
const MANIFEST_NAME: &str = "manifest.json";

/// Writes the flat archive: magic, version, entry count, then
/// length-prefixed (name, payload) pairs.
fn write_archive(path: &Path, entries: &[(String, Vec<u8>)]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(1u8);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, payload) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(payload);
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Reads every (name, payload) pair from a checkpoint archive.
pub fn read_archive(path: impl AsRef<Path>) -> Result<Vec<(String, Vec<u8>)>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur: &[u8] = &bytes;
    let take = |cur: &mut &[u8], n: usize| -> Result<Vec<u8>> {
        if cur.len() < n {
            return Err(Error::Format("checkpoint archive truncated".into()));
        }
        let (head, tail) = cur.split_at(n);
        *cur = tail;
        Ok(head.to_vec())
    };
    let magic = take(&mut cur, 4)?;
    if magic != MAGIC {
        return Err(Error::Format("not a checkpoint archive".into()));
    }
    let version = take(&mut cur, 1)?[0];
    if version != 1 {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let n = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
    let mut entries = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut cur, name_len)?)
            .map_err(|_| Error::Format("checkpoint entry name is not UTF-8".into()))?;
        let payload_len = u64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap()) as usize;
        let payload = take(&mut cur, payload_len)?;
        entries.push((name, payload));
    }
    if !cur.is_empty() {
        return Err(Error::Format(
            "trailing bytes after checkpoint entries".into(),
        ));
    }
    Ok(entries)
}
