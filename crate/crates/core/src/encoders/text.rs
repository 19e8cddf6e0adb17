//! Word-level vocabulary, tokenizer and the BERT-style question encoder.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SequenceFeatures;
use crate::error::{Error, Result};
use crate::tensor::nn::{LayerNorm, TransformerStack};
use crate::tensor::{Init, ParamBuilder, ParamId, Real, Tape, Tensor};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";

/// Token-to-id map. Ids are contiguous from 0; `[PAD]`, `[UNK]` and `[CLS]`
/// occupy ids 0, 1 and 2.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl TryFrom<VocabFile> for Vocabulary {
    type Error = Error;

    fn try_from(f: VocabFile) -> Result<Self> {
        if f.tokens.len() < 3 || f.tokens[..3] != [PAD, UNK, CLS] {
            return Err(Error::config("vocabulary must start with [PAD], [UNK], [CLS]"));
        }
        let index: HashMap<String, usize> =
            f.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if index.len() != f.tokens.len() {
            return Err(Error::config("vocabulary contains duplicate tokens"));
        }
        Ok(Self {
            tokens: f.tokens,
            index,
        })
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        VocabFile { tokens: v.tokens }
    }
}

impl Vocabulary {
    /// Builds a vocabulary from every word of `texts`, sorted for determinism.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(split_words).collect();
        let tokens: Vec<String> = [PAD, UNK, CLS]
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        Vocabulary::try_from(VocabFile { tokens }).expect("specials are first and words are unique")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn pad_id(&self) -> usize {
        0
    }

    pub fn unk_id(&self) -> usize {
        1
    }

    pub fn cls_id(&self) -> usize {
        2
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(self.unk_id())
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&raw)?)
    }
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn split_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// `[CLS]` followed by the word ids of `text`, padded or truncated so the
/// result has `1 + content_len` ids.
pub fn tokenize(text: &str, vocab: &Vocabulary, content_len: usize) -> Vec<usize> {
    let mut ids = Vec::with_capacity(1 + content_len);
    ids.push(vocab.cls_id());
    ids.extend(split_words(text).iter().take(content_len).map(|w| vocab.id(w)));
    ids.resize(1 + content_len, vocab.pad_id());
    ids
}

/// Key mask for a padded id sequence.
pub fn padding_mask(ids: &[usize], pad_id: usize) -> Vec<bool> {
    ids.iter().map(|&i| i != pad_id).collect()
}

#[derive(Clone, Debug)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
    /// Maximum sequence length including `[CLS]`.
    pub max_len: usize,
}

/// Token + learned positional embeddings, an embedding layer norm, and a
/// stack of masked self-attention layers. Used both for questions and for
/// CLIP-branch prompts.
#[derive(Clone, Debug)]
pub struct QuestionEncoder {
    pub cfg: TextEncoderConfig,
    pub token_emb: ParamId,
    pub pos_emb: ParamId,
    pub ln_emb: LayerNorm,
    pub stack: TransformerStack,
}

impl QuestionEncoder {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, name: &str, cfg: TextEncoderConfig) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self {
                token_emb: b.add("token_emb", &[cfg.vocab_size, cfg.dim], Init::Normal(0.02))?,
                pos_emb: b.add("pos_emb", &[cfg.max_len, cfg.dim], Init::Normal(0.02))?,
                ln_emb: LayerNorm::new(b, "ln_emb", cfg.dim)?,
                stack: TransformerStack::new(b, "encoder", cfg.layers, cfg.dim, cfg.heads, cfg.mlp_hidden)?,
                cfg,
            })
        })
    }

    /// Encodes `[CLS] w_1 .. w_N [PAD]..` into `(1 + N) x dim`; padding is
    /// excluded from attention.
    pub fn encode<T: Real>(&self, tape: &mut Tape<'_, T>, ids: &[usize]) -> Result<SequenceFeatures> {
        if ids.is_empty() || ids.len() > self.cfg.max_len {
            return Err(Error::config(format!(
                "sequence of {} ids does not fit max length {}",
                ids.len(),
                self.cfg.max_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.cfg.vocab_size) {
            return Err(Error::contract(format!("token id {bad} outside the vocabulary")));
        }
        let mask = padding_mask(ids, 0);
        let emb = tape.param(self.token_emb);
        let x = tape.gather_rows(emb, ids)?;
        let pos = tape.param(self.pos_emb);
        let pos = tape.rows(pos, 0, ids.len())?;
        let x = tape.add(x, pos)?;
        let x = self.ln_emb.forward(tape, x)?;
        let tokens = self.stack.forward(tape, x, Some(&mask))?;
        Ok(SequenceFeatures {
            tokens,
            len: ids.len(),
            width: self.cfg.dim,
            key_mask: Some(mask),
        })
    }

    /// Embedding rows as a plain tensor, for tests that perturb one token.
    pub fn token_embeddings<'s, T: Real>(&self, tape: &Tape<'s, T>) -> &'s Tensor<T> {
        tape.params().tensor(self.token_emb)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::ParamStore;

    fn vocab() -> Vocabulary {
        Vocabulary::from_texts(["what is red", "what shape"])
    }

    #[test]
    fn specials_come_first() {
        let v = vocab();
        assert_eq!(v.token(0), Some(PAD));
        assert_eq!(v.token(1), Some(UNK));
        assert_eq!(v.token(2), Some(CLS));
        assert_eq!(v.len(), 3 + 4);
    }

    #[test]
    fn empty_question_is_cls_then_pads() {
        assert_eq!(tokenize("", &vocab(), 4), vec![2, 0, 0, 0, 0]);
    }

    #[test]
    fn known_words_map_in_order() {
        let v = vocab();
        let ids = tokenize("What is RED?", &v, 5);
        assert_eq!(ids, vec![2, v.id("what"), v.id("is"), v.id("red"), 0, 0]);
    }

    #[test]
    fn unknown_word_maps_to_unk() {
        let v = vocab();
        assert_eq!(tokenize("what is blue", &v, 3)[3], v.unk_id());
    }

    #[test]
    fn long_questions_truncate() {
        let v = vocab();
        assert_eq!(tokenize("what is red what is red", &v, 2).len(), 3);
    }

    #[test]
    fn json_round_trip_and_validation() {
        let v = vocab();
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<Vocabulary>(&json).unwrap(), v);
        assert!(serde_json::from_str::<Vocabulary>(r#"{"tokens":["a","b","c"]}"#).is_err());
    }

    fn encoder() -> (ParamStore<f64>, QuestionEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = QuestionEncoder::new(
            &mut ParamBuilder::new(&mut store, &mut rng),
            "question",
            TextEncoderConfig {
                vocab_size: 7,
                dim: 8,
                heads: 2,
                layers: 2,
                mlp_hidden: 16,
                max_len: 10,
            },
        )
        .unwrap();
        (store, enc)
    }

    #[test]
    fn extra_padding_leaves_cls_identical() {
        let (store, enc) = encoder();
        let mut tape = Tape::new(&store);
        let short = enc.encode(&mut tape, &[2, 3, 4, 0, 0]).unwrap();
        let long = enc.encode(&mut tape, &[2, 3, 4, 0, 0, 0, 0, 0, 0]).unwrap();
        let a = short.cls(&mut tape).unwrap();
        let b = long.cls(&mut tape).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
        assert_eq!(tape.shape(long.tokens), &[9, 8]);
    }

    #[test]
    fn rejects_out_of_range_ids() {
        let (store, enc) = encoder();
        let mut tape = Tape::new(&store);
        assert!(enc.encode(&mut tape, &[2, 99]).is_err());
        assert!(enc.encode(&mut tape, &[2; 11]).is_err());
    }
}
