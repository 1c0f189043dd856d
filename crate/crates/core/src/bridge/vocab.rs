//! Toy vocabulary and tokenizer: whitespace words with byte fallback, three
//! specials, and the eight reserved audio tokens at the end of the id space.
//!
//! Id layout: 0 `<bos>`, 1 `<eos>`, 2 `<sep>`, 3..=258 byte fallback tokens
//! `<0x00>`..`<0xFF>`, then sorted corpus words, and the last eight ids are
//! always `[AUD_0]`..`[AUD_7]` in order.

use crate::error::{Error, Result};
use std::collections::{BTreeSet, HashMap};
use std::path::Path;

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const SEP: usize = 2;
const BYTE_BASE: usize = 3;
/// Audio block length K.
pub const N_AUDIO: usize = 8;

#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

fn audio_marker(i: usize) -> String {
    format!("[AUD_{i}]")
}

fn is_audio_marker(s: &str) -> bool {
    (0..N_AUDIO).any(|i| s == audio_marker(i))
}

impl Vocab {
    /// Builds a vocabulary from a corpus of text lines. Words are the
    /// whitespace tokens of the corpus, deduplicated and sorted; audio
    /// markers inside the corpus are not treated as words since they map to
    /// the reserved trailing ids.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Vocab {
        let mut words = BTreeSet::new();
        for line in corpus {
            for tok in line.split_whitespace() {
                if !is_audio_marker(tok) {
                    words.insert(tok.to_string());
                }
            }
        }
        let mut tokens = Vec::with_capacity(259 + words.len() + N_AUDIO);
        tokens.push("<bos>".to_string());
        tokens.push("<eos>".to_string());
        tokens.push("<sep>".to_string());
        for b in 0..=255u8 {
            tokens.push(format!("<0x{b:02X}>"));
        }
        tokens.extend(words);
        for i in 0..N_AUDIO {
            tokens.push(audio_marker(i));
        }
        Vocab::from_tokens(tokens).expect("constructed layout is valid")
    }

    /// Wraps an explicit token list. The last eight entries must be the
    /// audio markers in order.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        if tokens.len() < BYTE_BASE + 256 + N_AUDIO {
            return Err(Error::Format(format!(
                "vocabulary too small: {} entries",
                tokens.len()
            )));
        }
        let base = tokens.len() - N_AUDIO;
        for i in 0..N_AUDIO {
            if tokens[base + i] != audio_marker(i) {
                return Err(Error::Format(format!(
                    "vocabulary entry {} is {:?}, expected {:?}",
                    base + i,
                    tokens[base + i],
                    audio_marker(i)
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// First audio token id; the block is `audio_base()..audio_base()+8`.
    pub fn audio_base(&self) -> usize {
        self.tokens.len() - N_AUDIO
    }

    pub fn audio_id(&self, i: usize) -> usize {
        debug_assert!(i < N_AUDIO);
        self.audio_base() + i
    }

    pub fn is_audio(&self, id: usize) -> bool {
        id >= self.audio_base() && id < self.len()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    /// Encodes text as word ids where possible, raw bytes otherwise. Audio
    /// markers written literally in the text map to their reserved ids.
    pub fn encode_text(&self, text: &str) -> Vec<usize> {
        let mut ids = Vec::new();
        for tok in text.split_whitespace() {
            if let Some(&id) = self.index.get(tok) {
                ids.push(id);
            } else {
                ids.extend(tok.bytes().map(|b| BYTE_BASE + b as usize));
            }
        }
        ids
    }

    /// Renders ids back to text. Specials are dropped, byte runs are decoded
    /// as UTF-8 (lossily), everything else joins with single spaces.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut pieces: Vec<String> = Vec::new();
        let mut byte_run: Vec<u8> = Vec::new();
        let flush = |run: &mut Vec<u8>, pieces: &mut Vec<String>| {
            if !run.is_empty() {
                pieces.push(String::from_utf8_lossy(run).into_owned());
                run.clear();
            }
        };
        for &id in ids {
            if (BYTE_BASE..BYTE_BASE + 256).contains(&id) {
                byte_run.push((id - BYTE_BASE) as u8);
                continue;
            }
            flush(&mut byte_run, &mut pieces);
            match id {
                BOS | EOS | SEP => {}
                _ => {
                    if let Some(t) = self.tokens.get(id) {
                        pieces.push(t.clone());
                    }
                }
            }
        }
        flush(&mut byte_run, &mut pieces);
        pieces.join(" ")
    }

    /// Serializes as a JSON list of token strings.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.tokens).expect("strings serialize")
    }

    pub fn from_json(text: &str) -> Result<Vocab> {
        let tokens: Vec<String> = serde_json::from_str(text)
            .map_err(|e| Error::Format(format!("vocabulary is not a JSON string list: {e}")))?;
        Vocab::from_tokens(tokens)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Vocab> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocab::from_json(&text)
    }
}

/// A token id sequence plus the derived audio-block flag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
    /// True iff the sequence ends with `[AUD_0]..[AUD_7]` in order.
    pub has_audio_block: bool,
}

impl TokenSeq {
    pub fn from_ids(ids: Vec<usize>, vocab: &Vocab) -> TokenSeq {
        let has_audio_block = ends_with_audio_block(&ids, vocab.audio_base());
        TokenSeq {
            ids,
            has_audio_block,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// True when `ids` ends with the full audio block in increasing order.
pub fn ends_with_audio_block(ids: &[usize], audio_base: usize) -> bool {
    ids.len() >= N_AUDIO
        && ids[ids.len() - N_AUDIO..]
            .iter()
            .enumerate()
            .all(|(i, &id)| id == audio_base + i)
}
