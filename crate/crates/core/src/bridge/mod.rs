//! Decoder-only language model bridging text with modality prefixes.
//!
//! The model is a stack of `n_layers` pre-norm transformer blocks with
//! multi-head causal self-attention and SwiGLU feed-forward. Three layers,
//! one per modality, additionally attend to a fixed-length prefix of adapted
//! modality embeddings through a separately softmaxed attention path whose
//! per-head contribution is scaled by `tanh(gate)`. Gates start at zero, so
//! an untrained model ignores prefixes exactly. Query and value projections
//! carry low-rank deltas for light fine-tuning while base weights stay
//! frozen.
//!
//! Layer indexing is zero-based from the bottom. With spacing `L`, music
//! injects at `N-L`, image at `N-2L`, video at `N-3L`, and every layer from
//! `N-(3L+1)` up starts with zeroed gates; the `N-3L-1` layers below stay
//! plain.

pub mod lora;
pub mod sampling;
pub mod vocab;

pub use vocab::{TokenSeq, Vocab};

use crate::encoders::ModalityKind;
use crate::error::{Error, Result};
use crate::tensor::{no_grad, uniform, Parameter, Tensor};
use lora::{Linear, LoraLinear};
use rand::Rng;
use sampling::{sample, SamplingParams};
use serde::{Deserialize, Serialize};
use vocab::{ends_with_audio_block, EOS, N_AUDIO};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    /// Spacing between modality injection layers.
    pub l_spacing: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l_spacing == 0 {
            return Err(Error::Config("layer spacing must be at least 1".into()));
        }
        if self.n_layers <= 3 * self.l_spacing {
            return Err(Error::Config(format!(
                "{} layers cannot hold three injection points spaced {} apart; need more than {}",
                self.n_layers,
                self.l_spacing,
                3 * self.l_spacing
            )));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model width {} is not divisible into {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size <= N_AUDIO {
            return Err(Error::Config(format!(
                "vocabulary of {} cannot reserve {} audio tokens",
                self.vocab_size, N_AUDIO
            )));
        }
        if self.max_seq_len == 0 {
            return Err(Error::Config("max sequence length must be positive".into()));
        }
        if self.lora_rank == 0 {
            return Err(Error::Config("low-rank delta rank must be positive".into()));
        }
        if !(self.lora_alpha > 0.0) {
            return Err(Error::Config("low-rank delta alpha must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        2 * self.d_model
    }

    /// First audio token id: the block occupies the last eight ids.
    pub fn audio_base(&self) -> usize {
        self.vocab_size - N_AUDIO
    }
}

/// Where each modality's prefix enters and where gating begins.
/// All indices are zero-based from the bottom layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionSchedule {
    pub music_layer: usize,
    pub image_layer: usize,
    pub video_layer: usize,
    /// Layers at or above this index carry gated prefix attention.
    pub zero_init_start: usize,
}

impl InjectionSchedule {
    pub fn new(cfg: &ModelConfig) -> Result<InjectionSchedule> {
        cfg.validate()?;
        let n = cfg.n_layers;
        let l = cfg.l_spacing;
        Ok(InjectionSchedule {
            music_layer: n - l,
            image_layer: n - 2 * l,
            video_layer: n - 3 * l,
            zero_init_start: n - (3 * l + 1),
        })
    }

    pub fn layer_for(&self, kind: ModalityKind) -> usize {
        match kind {
            ModalityKind::Music => self.music_layer,
            ModalityKind::Image => self.image_layer,
            ModalityKind::Video => self.video_layer,
        }
    }

    pub fn kind_at(&self, layer: usize) -> Option<ModalityKind> {
        if layer == self.music_layer {
            Some(ModalityKind::Music)
        } else if layer == self.image_layer {
            Some(ModalityKind::Image)
        } else if layer == self.video_layer {
            Some(ModalityKind::Video)
        } else {
            None
        }
    }

    pub fn is_gated(&self, layer: usize) -> bool {
        layer >= self.zero_init_start
    }
}

/// Adapted modality prefixes available to one forward pass. Each tensor is
/// `[prefix_len, d_model]`.
#[derive(Debug, Default, Clone)]
pub struct Prefixes {
    pub music: Option<Tensor>,
    pub image: Option<Tensor>,
    pub video: Option<Tensor>,
}

impl Prefixes {
    pub fn none() -> Prefixes {
        Prefixes::default()
    }

    pub fn with(kind: ModalityKind, t: Tensor) -> Prefixes {
        let mut p = Prefixes::default();
        p.set(kind, t);
        p
    }

    pub fn set(&mut self, kind: ModalityKind, t: Tensor) {
        match kind {
            ModalityKind::Music => self.music = Some(t),
            ModalityKind::Image => self.image = Some(t),
            ModalityKind::Video => self.video = Some(t),
        }
    }

    pub fn get(&self, kind: ModalityKind) -> Option<&Tensor> {
        match kind {
            ModalityKind::Music => self.music.as_ref(),
            ModalityKind::Image => self.image.as_ref(),
            ModalityKind::Video => self.video.as_ref(),
        }
    }

    pub fn is_none(&self) -> bool {
        self.music.is_none() && self.image.is_none() && self.video.is_none()
    }
}

/// One transformer block. `gate` is present only on layers inside the gated
/// region; passing a prefix to an ungated layer is a contract violation.
#[derive(Debug)]
pub struct BridgeLayer {
    pub attn_norm: Parameter,
    pub q: LoraLinear,
    pub k: Linear,
    pub v: LoraLinear,
    pub o: Linear,
    /// Per-head prefix gate, `[n_heads]`, zero-initialized.
    pub gate: Option<Parameter>,
    pub mlp_norm: Parameter,
    pub w1: Linear,
    pub w2: Linear,
    pub w3: Linear,
    n_heads: usize,
}

impl BridgeLayer {
    fn new<R: Rng>(rng: &mut R, cfg: &ModelConfig, index: usize, gated: bool) -> Result<BridgeLayer> {
        let d = cfg.d_model;
        let h = cfg.mlp_hidden();
        let ns = format!("bridge.layer{index}");
        let ones = Tensor::full(&[d], 1.0);
        let attn_norm = Parameter::new(format!("{ns}.attn.norm.gain"), ones.clone())?;
        let q = LoraLinear::new(
            rng,
            &format!("{ns}.attn.q"),
            d,
            d,
            cfg.lora_rank,
            cfg.lora_alpha,
        )?;
        let k = Linear::new(rng, &format!("{ns}.attn.k.weight"), d, d)?;
        let v = LoraLinear::new(
            rng,
            &format!("{ns}.attn.v"),
            d,
            d,
            cfg.lora_rank,
            cfg.lora_alpha,
        )?;
        // Output-side projections are damped so a frozen random layer adds
        // only a modest increment to the residual stream; otherwise the
        // stream's norm grows so fast that injected prefixes need enormous
        // magnitudes before they can steer the final hidden state.
        let o = Linear::with_gain(rng, &format!("{ns}.attn.o.weight"), d, d, 0.0625)?;
        let gate = gated
            .then(|| Parameter::new(format!("{ns}.attn.gate"), Tensor::zeros(&[cfg.n_heads])))
            .transpose()?;
        let mlp_norm = Parameter::new(format!("{ns}.mlp.norm.gain"), ones)?;
        let w1 = Linear::new(rng, &format!("{ns}.mlp.w1.weight"), d, h)?;
        let w2 = Linear::with_gain(rng, &format!("{ns}.mlp.w2.weight"), h, d, 0.0625)?;
        let w3 = Linear::new(rng, &format!("{ns}.mlp.w3.weight"), d, h)?;
        Ok(BridgeLayer {
            attn_norm,
            q,
            k,
            v,
            o,
            gate,
            mlp_norm,
            w1,
            w2,
            w3,
            n_heads: cfg.n_heads,
        })
    }

    /// Full block: gated-prefix causal attention plus SwiGLU feed-forward,
    /// both with residual connections.
    pub fn forward(&self, x: &Tensor, prefix: Option<&Tensor>) -> Result<Tensor> {
        let attn = self.attention(x, prefix)?;
        let x = x.add(&attn)?;
        let normed = x.rms_norm(self.mlp_norm.tensor())?;
        let gate_path = self.w1.forward(&normed)?.silu();
        let lin_path = self.w3.forward(&normed)?;
        let mlp = self.w2.forward(&gate_path.mul(&lin_path)?)?;
        x.add(&mlp)
    }

    /// Multi-head causal self-attention. When `prefix` is given the layer
    /// also attends from every position to the prefix rows through a second
    /// softmax, and adds that result scaled per head by `tanh(gate)`.
    pub fn attention(&self, x: &Tensor, prefix: Option<&Tensor>) -> Result<Tensor> {
        if prefix.is_some() && self.gate.is_none() {
            return Err(Error::Contract(
                "modality prefix supplied to an ungated layer".into(),
            ));
        }
        let t = x.shape()[0];
        let d = x.shape()[1];
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let normed = x.rms_norm(self.attn_norm.tensor())?;
        let q = self.q.forward(&normed)?;
        let k = self.k.forward(&normed)?;
        let v = self.v.forward(&normed)?;

        let pkv = match prefix {
            Some(p) => {
                if p.shape().len() != 2 || p.shape()[1] != d {
                    return Err(Error::Shape {
                        op: "prefix attention".into(),
                        lhs: p.shape().to_vec(),
                        rhs: vec![0, d],
                    });
                }
                // Prefix rows enter the key/value projections raw: their
                // scale is produced by a trained adapter, and normalizing
                // here would cap the energy a modality can inject.
                Some((self.k.forward(p)?, self.v.forward(p)?))
            }
            None => None,
        };

        let mask = causal_mask(t);
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = q.slice_cols(h * dh, dh)?;
            let kh = k.slice_cols(h * dh, dh)?;
            let vh = v.slice_cols(h * dh, dh)?;
            let scores = qh.matmul(&kh.transpose()?)?.scale(scale).add(&mask)?;
            let mut ctx = scores.softmax_rows()?.matmul(&vh)?;
            if let (Some((pk, pv)), Some(gate)) = (&pkv, &self.gate) {
                let pkh = pk.slice_cols(h * dh, dh)?;
                let pvh = pv.slice_cols(h * dh, dh)?;
                let pscores = qh.matmul(&pkh.transpose()?)?.scale(scale);
                let pctx = pscores.softmax_rows()?.matmul(&pvh)?;
                let g = gate
                    .tensor()
                    .reshape(&[self.n_heads, 1])?
                    .slice_rows(h, 1)?
                    .tanh();
                ctx = ctx.add(&pctx.scale_by(&g)?)?;
            }
            heads.push(ctx);
        }
        let merged = Tensor::concat_cols(&heads)?;
        self.o.forward(&merged)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut ps = vec![&self.attn_norm];
        ps.extend(self.q.params());
        ps.extend(self.k.params());
        ps.extend(self.v.params());
        ps.extend(self.o.params());
        if let Some(g) = &self.gate {
            ps.push(g);
        }
        ps.push(&self.mlp_norm);
        ps.extend(self.w1.params());
        ps.extend(self.w2.params());
        ps.extend(self.w3.params());
        ps
    }
}

fn causal_mask(t: usize) -> Tensor {
    let mut data = vec![0.0; t * t];
    for i in 0..t {
        for j in i + 1..t {
            data[i * t + j] = -1e30;
        }
    }
    Tensor::from_vec(&[t, t], data).expect("mask shape matches data")
}

#[derive(Debug)]
pub struct Bridge {
    pub cfg: ModelConfig,
    pub schedule: InjectionSchedule,
    pub embed: Parameter,
    pub pos: Parameter,
    pub layers: Vec<BridgeLayer>,
    pub norm_f: Parameter,
    pub lm_head: Parameter,
}

impl Bridge {
    pub fn new<R: Rng>(rng: &mut R, cfg: ModelConfig) -> Result<Bridge> {
        let schedule = InjectionSchedule::new(&cfg)?;
        let bound = 1.0 / (cfg.d_model as f64).sqrt();
        let embed = Parameter::new(
            "bridge.embed.weight",
            uniform(rng, -bound, bound, &[cfg.vocab_size, cfg.d_model]),
        )?;
        let pos = Parameter::new(
            "bridge.pos.weight",
            uniform(rng, -bound, bound, &[cfg.max_seq_len, cfg.d_model]),
        )?;
        let layers = (0..cfg.n_layers)
            .map(|i| BridgeLayer::new(rng, &cfg, i, schedule.is_gated(i)))
            .collect::<Result<Vec<_>>>()?;
        let norm_f = Parameter::new("bridge.norm_f.gain", Tensor::full(&[cfg.d_model], 1.0))?;
        // The head reads an RMS-normalized hidden state (norm sqrt(D)), so
        // its scale bounds the reachable logit range: a column of norm c
        // caps the aligned logit at c*sqrt(D). Fan-in scaling would cap
        // logits near ln(vocab), making confident predictions unreachable;
        // 0.35 leaves them comfortably representable, standing in for the
        // well-trained head this module replaces.
        let lm_head = Parameter::new(
            "bridge.lm_head.weight",
            uniform(rng, -0.35, 0.35, &[cfg.d_model, cfg.vocab_size]),
        )?;
        Ok(Bridge {
            cfg,
            schedule,
            embed,
            pos,
            layers,
            norm_f,
            lm_head,
        })
    }

    /// Runs the stack over a token sequence. Returns `(logits, hidden)`
    /// where `logits` is `[T, vocab]` and `hidden` is the final normalized
    /// hidden state `[T, d_model]` that feeds the output head.
    pub fn forward(&self, ids: &[usize], prefixes: &Prefixes) -> Result<(Tensor, Tensor)> {
        if ids.is_empty() {
            return Err(Error::EmptyInput("forward over empty token sequence".into()));
        }
        if ids.len() > self.cfg.max_seq_len {
            return Err(Error::Data(format!(
                "sequence of {} tokens exceeds maximum length {}",
                ids.len(),
                self.cfg.max_seq_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.cfg.vocab_size) {
            return Err(Error::Data(format!(
                "token id {} outside vocabulary of {}",
                bad, self.cfg.vocab_size
            )));
        }
        let positions: Vec<usize> = (0..ids.len()).collect();
        let tok = self.embed.tensor().embedding(ids)?;
        let pos = self.pos.tensor().embedding(&positions)?;
        let mut h = tok.add(&pos)?;
        for (i, layer) in self.layers.iter().enumerate() {
            let prefix = self
                .schedule
                .kind_at(i)
                .and_then(|kind| prefixes.get(kind));
            h = layer.forward(&h, prefix)?;
        }
        let hidden = h.rms_norm(self.norm_f.tensor())?;
        let logits = hidden.matmul(self.lm_head.tensor())?;
        Ok((logits, hidden))
    }

    /// Samples a continuation of `prompt`. Generation stops on the end
    /// token, when `max_new` tokens have been produced, or when an audio
    /// block completes. Any sampled audio token starts a block, which is
    /// force-completed as `[AUD_0]..[AUD_7]` immediately; a block started
    /// near the budget may overrun `max_new` by up to seven tokens. A block
    /// that cannot fit below the model's maximum sequence length is not
    /// started.
    pub fn generate<R: Rng>(
        &self,
        prompt: &[usize],
        prefixes: &Prefixes,
        max_new: usize,
        params: &SamplingParams,
        rng: &mut R,
    ) -> Result<TokenSeq> {
        if prompt.is_empty() {
            return Err(Error::EmptyInput("generation from empty prompt".into()));
        }
        params.validate()?;
        let audio_base = self.cfg.audio_base();
        let mut ids = prompt.to_vec();
        let mut generated = 0usize;
        while generated < max_new && ids.len() < self.cfg.max_seq_len {
            let next = {
                let row = no_grad(|| -> Result<Vec<f64>> {
                    let (logits, _) = self.forward(&ids, prefixes)?;
                    let t = logits.shape()[0];
                    logits.slice_rows(t - 1, 1).map(|r| r.to_vec())
                })?;
                sample(&row, params, rng)?
            };
            if next == EOS {
                ids.push(EOS);
                break;
            }
            if next >= audio_base {
                if ids.len() + N_AUDIO > self.cfg.max_seq_len {
                    break;
                }
                ids.extend((0..N_AUDIO).map(|i| audio_base + i));
                break;
            }
            ids.push(next);
            generated += 1;
        }
        let has_audio_block = ends_with_audio_block(&ids, audio_base);
        Ok(TokenSeq {
            ids,
            has_audio_block,
        })
    }

    /// All parameters in a stable canonical order.
    pub fn params(&self) -> Vec<&Parameter> {
        let mut ps = vec![&self.embed, &self.pos];
        for layer in &self.layers {
            ps.extend(layer.params());
        }
        ps.push(&self.norm_f);
        ps.push(&self.lm_head);
        ps
    }
}
