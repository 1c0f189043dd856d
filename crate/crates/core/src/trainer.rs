//! Three-stage training: adapters first, the projector second, then a joint
//! pass that also opens the low-rank attention updates. The backbone bridge
//! weights, encoders, and synthesizer stay frozen throughout.
//!
//! The loss is token cross-entropy over the answer span, plus, for samples
//! whose answer ends in a complete audio block, the mean squared error
//! between the projected conditioning and the encoding of the target
//! caption, summed with weight one.

use crate::bridge::vocab::{BOS, EOS, N_AUDIO, SEP};
use crate::bridge::{TokenSeq, Vocab};
use crate::error::{Error, Result};
use crate::model::{EncodedInputs, Model};
use crate::projector::{combine_audio_hidden, stub_text_encode};
use crate::tensor::{Adam, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

/// Hyperparameters for one stage of the regimen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: u8,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl StageConfig {
    pub fn from_profile(profile: &crate::config::Profile, stage: u8) -> Result<StageConfig> {
        if !(1..=3).contains(&stage) {
            return Err(Error::Config(format!("training stage must be 1..=3, got {stage}")));
        }
        Ok(StageConfig {
            stage,
            epochs: profile.epochs[stage as usize - 1],
            lr: profile.lr,
            batch_size: profile.batch_size,
            seed: profile.seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.stage) {
            return Err(Error::Config(format!(
                "training stage must be 1..=3, got {}",
                self.stage
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// One instruction-following example, tokenized and ready for the bridge.
///
/// The token sequence is `<bos> instruction <sep> answer`, ending either
/// with `<eos>` (text answers) or with the complete audio block (music
/// answers). A sample needs music exactly when its answer ends with the
/// full block, and such samples must carry the caption whose encoding the
/// projector is trained to match.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub instruction: String,
    pub answer: String,
    pub caption: Option<String>,
    pub inputs: std::rc::Rc<EncodedInputs>,
    ids: Vec<usize>,
    sep_pos: usize,
    needs_music: bool,
}

impl TrainSample {
    pub fn new(
        vocab: &Vocab,
        instruction: impl Into<String>,
        answer: impl Into<String>,
        caption: Option<String>,
        inputs: EncodedInputs,
    ) -> Result<TrainSample> {
        let instruction = instruction.into();
        let answer = answer.into();
        let mut ids = vec![BOS];
        ids.extend(vocab.encode_text(&instruction));
        let sep_pos = ids.len();
        ids.push(SEP);
        let answer_ids = vocab.encode_text(&answer);
        if answer_ids.is_empty() {
            return Err(Error::Data(format!(
                "sample answer {answer:?} produced no tokens"
            )));
        }
        ids.extend(&answer_ids);
        let needs_music = TokenSeq::from_ids(ids.clone(), vocab).has_audio_block;
        if !needs_music {
            ids.push(EOS);
        }
        if needs_music && caption.is_none() {
            return Err(Error::Data(
                "a sample whose answer ends in an audio block must carry a target caption".into(),
            ));
        }
        Ok(TrainSample {
            instruction,
            answer,
            caption,
            inputs: std::rc::Rc::new(inputs),
            ids,
            sep_pos,
            needs_music,
        })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn sep_pos(&self) -> usize {
        self.sep_pos
    }

    pub fn needs_music(&self) -> bool {
        self.needs_music
    }

    /// Number of predicted positions (everything after `<sep>` plus the
    /// terminator, each predicted from its predecessor).
    pub fn target_len(&self) -> usize {
        self.ids.len() - 1 - self.sep_pos
    }
}

/// Loss values for one optimizer step.
///
/// `ce` and `mse` are means over the step's batch (music-free samples
/// contribute zero squared error), and `total = ce + mse` is exactly the
/// quantity the optimizer descends. `mse` is absent when no sample in the
/// batch needed music.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossReport {
    pub ce: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
    pub total: f64,
    pub step: usize,
    pub stage: u8,
    pub wall_time_secs: f64,
}

/// Differentiable loss for one sample, with the detached component values.
pub struct SampleLoss {
    pub loss: Tensor,
    pub ce: f64,
    pub mse: Option<f64>,
}

pub fn compute_loss(model: &Model, sample: &TrainSample) -> Result<SampleLoss> {
    let prefixes = model.prefixes(&sample.inputs)?;
    let (logits, hidden) = model.forward(sample.ids(), &prefixes)?;
    let t = sample.ids().len();
    let span = t - 1 - sample.sep_pos;
    let pred_rows = logits.slice_rows(sample.sep_pos, span)?;
    let targets = &sample.ids()[sample.sep_pos + 1..];
    let ce_t = pred_rows.cross_entropy(targets)?;
    let ce = ce_t.item()?;
    if !sample.needs_music {
        return Ok(SampleLoss { loss: ce_t, ce, mse: None });
    }
    let caption = sample.caption.as_deref().ok_or_else(|| {
        Error::Data("music sample lost its caption before loss computation".into())
    })?;
    let seq = TokenSeq::from_ids(sample.ids().to_vec(), &model.vocab);
    let combined = combine_audio_hidden(&hidden, &seq, model.bridge.embed.tensor())?;
    let pred_cond = model.projector.forward(&combined)?;
    let target_cond = stub_text_encode(caption, model.projector.flavor)?;
    let mse_t = pred_cond.tensor.mse(&target_cond.tensor)?;
    let mse = mse_t.item()?;
    Ok(SampleLoss {
        loss: ce_t.add(&mse_t)?,
        ce,
        mse: Some(mse),
    })
}

/// Runs one stage over the dataset: seeded shuffle each epoch, one Adam
/// update per batch, one report per update. A non-finite loss aborts with
/// the offending step in the error.
pub fn run_stage(
    model: &Model,
    cfg: &StageConfig,
    data: &[TrainSample],
) -> Result<Vec<LossReport>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("training dataset is empty".into()));
    }
    model.set_stage(cfg.stage)?;
    let params = model.trainable_params();
    let mut opt = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut reports = Vec::new();
    let mut step = 0;
    let start = Instant::now();
    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            for p in &params {
                p.tensor().clear_grad();
            }
            let mut ce_sum = 0.0;
            let mut mse_sum = 0.0;
            let mut any_music = false;
            let mut batch_loss: Option<Tensor> = None;
            for &i in batch {
                let s = compute_loss(model, &data[i])?;
                ce_sum += s.ce;
                if let Some(m) = s.mse {
                    mse_sum += m;
                    any_music = true;
                }
                batch_loss = Some(match batch_loss {
                    Some(acc) => acc.add(&s.loss)?,
                    None => s.loss,
                });
            }
            let n = batch.len() as f64;
            let loss = batch_loss.expect("non-empty batch").scale(1.0 / n);
            let ce = ce_sum / n;
            let mse = any_music.then_some(mse_sum / n);
            let total = ce + mse.unwrap_or(0.0);
            if !total.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at stage {} step {step}: ce {ce}, mse {mse:?}",
                    cfg.stage
                )));
            }
            loss.backward()?;
            opt.step(&params)?;
            reports.push(LossReport {
                ce,
                mse,
                total,
                step,
                stage: cfg.stage,
                wall_time_secs: start.elapsed().as_secs_f64(),
            });
            step += 1;
        }
    }
    Ok(reports)
}

/// Appends one JSON object per report to `path`.
pub fn write_loss_log(reports: &[LossReport], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for r in reports {
        let line = serde_json::to_string(r).expect("report serializes");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// The eight audio markers as literal text, for building music answers.
pub fn audio_marker_text() -> String {
    (0..N_AUDIO)
        .map(|i| format!("[AUD_{i}]"))
        .collect::<Vec<_>>()
        .join(" ")
}
