//! Toy text conditioning: whitespace tokenizer, frozen random embedding
//! table with a sinusoidal position mix, and per-subject learnable word
//! tokens ("<new1>", "<new2>", ...) whose rows are the only trainable text
//! parameters.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::rng::Rng;

/// The paper-shape prompt templates shipped with the crate, one per line;
/// two-subject templates use slots [c1]/[c2], three-subject ones add [c3].
pub const DEFAULT_TEMPLATES: &str = include_str!("../data/prompt_templates.txt");

/// Token identity. Base and learnable indices are disjoint by construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenId {
    Base(usize),
    Learnable(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenInit {
    /// Copy the class word's frozen embedding (the default).
    ClassWordCopy,
    /// Fresh random row, kept for ablation.
    Random,
}

#[derive(Debug, Clone)]
struct LearnableToken {
    name: String,
    embedding: Tensor,
}

/// Frozen base table + learnable rows + tokenizer.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    width: usize,
    base_rows: Vec<Tensor>,
    base_index: BTreeMap<String, usize>,
    learnable: Vec<LearnableToken>,
    learnable_index: BTreeMap<String, usize>,
    init_rng: Rng,
}

pub const UNK_WORD: &str = "<unk>";
/// Stand-in token for the encoded empty prompt used by guidance.
pub const UNCOND_WORD: &str = "<uncond>";

impl TextEncoder {
    pub fn new(width: usize, seed: u64) -> TextEncoder {
        let mut enc = TextEncoder {
            width,
            base_rows: Vec::new(),
            base_index: BTreeMap::new(),
            learnable: Vec::new(),
            learnable_index: BTreeMap::new(),
            init_rng: Rng::new(seed),
        };
        enc.add_base_word(UNK_WORD);
        enc.add_base_word(UNCOND_WORD);
        enc
    }

    /// Seeded encoder preloaded with every word in the shipped templates
    /// plus common composition vocabulary.
    pub fn with_default_vocabulary(width: usize, seed: u64) -> TextEncoder {
        let mut enc = TextEncoder::new(width, seed);
        for word in ["a", "and", "photo", "of", "very", "small", "close", "up", "with", "the"] {
            enc.add_base_word(word);
        }
        for class in crate::compose::known_classes() {
            enc.add_base_word(class);
        }
        for line in DEFAULT_TEMPLATES.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            for word in line.split_whitespace() {
                let w = normalize_word(word);
                if !w.is_empty() && !w.starts_with("[c") {
                    enc.add_base_word(&w);
                }
            }
        }
        enc
    }

    /// Rebuild an encoder from raw rows (checkpoint load path). Base and
    /// learnable rows arrive in index order.
    pub fn from_parts(
        width: usize,
        base: Vec<(String, Tensor)>,
        learnable: Vec<(String, Tensor)>,
    ) -> Result<TextEncoder> {
        let mut enc = TextEncoder {
            width,
            base_rows: Vec::new(),
            base_index: BTreeMap::new(),
            learnable: Vec::new(),
            learnable_index: BTreeMap::new(),
            init_rng: Rng::new(0),
        };
        for (word, row) in base {
            if row.shape() != [width] {
                return Err(Error::invalid(format!("base row '{word}' width mismatch")));
            }
            enc.base_rows.push(row);
            enc.base_index.insert(word, enc.base_rows.len() - 1);
        }
        if !enc.base_index.contains_key(UNK_WORD) || !enc.base_index.contains_key(UNCOND_WORD) {
            return Err(Error::invalid("vocabulary is missing reserved tokens"));
        }
        for (name, row) in learnable {
            if row.shape() != [width] {
                return Err(Error::invalid(format!("token row '{name}' width mismatch")));
            }
            enc.learnable.push(LearnableToken { name: name.clone(), embedding: row });
            enc.learnable_index.insert(name, enc.learnable.len() - 1);
        }
        Ok(enc)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// The normalized form a word takes inside the vocabulary.
    pub fn canonical(word: &str) -> String {
        normalize_word(word)
    }

    /// Base vocabulary words in index order.
    pub fn base_words(&self) -> Vec<String> {
        let mut words = vec![String::new(); self.base_rows.len()];
        for (w, &i) in &self.base_index {
            words[i] = w.clone();
        }
        words
    }

    /// Append a base word if absent; returns its index. Base rows are
    /// frozen at creation and never change afterwards.
    pub fn add_base_word(&mut self, word: &str) -> usize {
        let w = normalize_word(word);
        if let Some(&i) = self.base_index.get(&w) {
            return i;
        }
        let sigma = 1.0 / (self.width as f64).sqrt();
        let row = Tensor::randn_scaled(&[self.width], sigma, &mut self.init_rng);
        self.base_rows.push(row);
        let idx = self.base_rows.len() - 1;
        self.base_index.insert(w, idx);
        idx
    }

    pub fn base_row(&self, index: usize) -> &Tensor {
        &self.base_rows[index]
    }

    /// Register a new learnable word token.
    pub fn register_learnable_token(
        &mut self,
        name: &str,
        init: TokenInit,
        class_word: &str,
    ) -> Result<usize> {
        let key = normalize_word(name);
        if self.learnable_index.contains_key(&key) {
            return Err(Error::AlreadyExists(format!("learnable token '{name}'")));
        }
        if self.base_index.contains_key(&key) {
            return Err(Error::AlreadyExists(format!("'{name}' is already a base word")));
        }
        let embedding = match init {
            TokenInit::ClassWordCopy => {
                let class_idx = self
                    .base_index
                    .get(&normalize_word(class_word))
                    .copied()
                    .ok_or_else(|| {
                        Error::invalid(format!("class word '{class_word}' not in vocabulary"))
                    })?;
                self.base_rows[class_idx].clone()
            }
            TokenInit::Random => {
                let sigma = 1.0 / (self.width as f64).sqrt();
                Tensor::randn_scaled(&[self.width], sigma, &mut self.init_rng)
            }
        };
        self.learnable.push(LearnableToken { name: key.clone(), embedding });
        let idx = self.learnable.len() - 1;
        self.learnable_index.insert(key, idx);
        Ok(idx)
    }

    pub fn learnable_names(&self) -> Vec<String> {
        self.learnable.iter().map(|t| t.name.clone()).collect()
    }

    pub fn has_learnable(&self, name: &str) -> bool {
        self.learnable_index.contains_key(&normalize_word(name))
    }

    pub fn learnable_row(&self, name: &str) -> Option<&Tensor> {
        self.learnable_index.get(&normalize_word(name)).map(|&i| &self.learnable[i].embedding)
    }

    pub fn learnable_row_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = *self.learnable_index.get(&normalize_word(name))?;
        Some(&mut self.learnable[i].embedding)
    }

    pub fn set_learnable_row(&mut self, name: &str, row: Tensor) -> Result<()> {
        if row.shape() != [self.width] {
            return Err(Error::invalid("embedding row width mismatch"));
        }
        match self.learnable_row_mut(name) {
            Some(slot) => {
                *slot = row;
                Ok(())
            }
            None => Err(Error::invalid(format!("unknown learnable token '{name}'"))),
        }
    }

    pub fn tokenize(&self, prompt: &str) -> Vec<TokenId> {
        prompt
            .split_whitespace()
            .map(normalize_word)
            .filter(|w| !w.is_empty())
            .map(|w| {
                if let Some(&i) = self.learnable_index.get(&w) {
                    TokenId::Learnable(i)
                } else if let Some(&i) = self.base_index.get(&w) {
                    TokenId::Base(i)
                } else {
                    TokenId::Base(self.base_index[UNK_WORD])
                }
            })
            .collect()
    }

    /// Embed a prompt. Returns the [tokens, width] embedding matrix and
    /// the positions of learnable tokens in prompt order.
    pub fn encode_prompt(&self, prompt: &str) -> Result<(Tensor, Vec<usize>)> {
        let ids = self.tokenize(prompt);
        if ids.is_empty() {
            return Err(Error::invalid("empty prompt"));
        }
        let n = ids.len();
        let mut data = Vec::with_capacity(n * self.width);
        let mut positions = Vec::new();
        for (pos, id) in ids.iter().enumerate() {
            let row = match id {
                TokenId::Base(i) => &self.base_rows[*i],
                TokenId::Learnable(i) => {
                    positions.push(pos);
                    &self.learnable[*i].embedding
                }
            };
            let pe = position_mix(pos, self.width);
            data.extend(row.data().iter().zip(&pe).map(|(&e, &p)| e + p));
        }
        Ok((Tensor::from_vec(&[n, self.width], data)?, positions))
    }

    /// The unconditional ("empty prompt") encoding used by classifier-free
    /// guidance: a single reserved token.
    pub fn encode_unconditional(&self) -> Tensor {
        let row = &self.base_rows[self.base_index[UNCOND_WORD]];
        let pe = position_mix(0, self.width);
        let data = row.data().iter().zip(&pe).map(|(&e, &p)| e + p).collect();
        Tensor::from_vec(&[1, self.width], data).unwrap()
    }

    /// Tape version of `encode_prompt`: learnable rows come from the
    /// caller's parameter vars so gradients reach them; base rows enter as
    /// frozen values. Also returns learnable positions.
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape,
        prompt: &str,
        token_vars: &BTreeMap<String, Var>,
    ) -> Result<(Var, Vec<usize>)> {
        let ids = self.tokenize(prompt);
        if ids.is_empty() {
            return Err(Error::invalid("empty prompt"));
        }
        let mut rows = Vec::with_capacity(ids.len());
        let mut positions = Vec::new();
        let mut pos_rows = Vec::with_capacity(ids.len() * self.width);
        for (pos, id) in ids.iter().enumerate() {
            let row = match id {
                TokenId::Base(i) => tape.value(self.base_rows[*i].clone()),
                TokenId::Learnable(i) => {
                    positions.push(pos);
                    let name = &self.learnable[*i].name;
                    match token_vars.get(name) {
                        Some(&v) => v,
                        None => tape.value(self.learnable[*i].embedding.clone()),
                    }
                }
            };
            rows.push(row);
            pos_rows.extend(position_mix(pos, self.width));
        }
        let stacked = tape.stack_rows(&rows);
        let pos = tape.value(Tensor::from_vec(&[ids.len(), self.width], pos_rows)?);
        Ok((tape.add(stacked, pos), positions))
    }
}

fn normalize_word(word: &str) -> String {
    word.trim_matches(|c: char| ".,!?;:\"'()".contains(c)).to_lowercase()
}

/// Fixed sinusoidal position encoding, scaled down so token identity
/// dominates position.
fn position_mix(pos: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; width];
    let scale = 0.1 / (width as f64).sqrt();
    for k in 0..width / 2 {
        let freq = 1.0 / 10000f64.powf(2.0 * k as f64 / width as f64);
        out[2 * k] = scale * (pos as f64 * freq).sin();
        out[2 * k + 1] = scale * (pos as f64 * freq).cos();
    }
    out
}

// ---------------------------------------------------------------------------
// Prompt templates
// ---------------------------------------------------------------------------

/// A template with [c1]/[c2]/[c3] slots plus ordered (class, token) bindings.
#[derive(Debug, Clone)]
pub struct PromptSpec {
    pub template: String,
    pub bindings: Vec<(String, String)>, // (class name, learnable token name)
}

impl PromptSpec {
    pub fn new(template: impl Into<String>, bindings: Vec<(String, String)>) -> PromptSpec {
        PromptSpec { template: template.into(), bindings }
    }

    /// Replace each slot [cK] with "<tokenK> classK". Deterministic;
    /// unbound or missing slots are invalid.
    pub fn render(&self) -> Result<String> {
        let slots = slot_count(&self.template);
        if slots != self.bindings.len() {
            return Err(Error::invalid(format!(
                "template has {slots} slots but {} bindings given",
                self.bindings.len()
            )));
        }
        let mut out = self.template.clone();
        for (k, (class, token)) in self.bindings.iter().enumerate() {
            let slot = format!("[c{}]", k + 1);
            if !out.contains(&slot) {
                return Err(Error::invalid(format!("template missing slot {slot}")));
            }
            out = out.replace(&slot, &format!("{token} {class}"));
        }
        Ok(out)
    }
}

/// Number of distinct [cK] slots in a template.
pub fn slot_count(template: &str) -> usize {
    let mut k = 0;
    while template.contains(&format!("[c{}]", k + 1)) {
        k += 1;
    }
    k
}

/// Parse a template file: one template per line, blank lines skipped.
pub fn parse_templates(text: &str) -> Vec<String> {
    text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect()
}

/// Templates grouped by subject count (slot count).
pub fn templates_with_slots(text: &str, slots: usize) -> Vec<String> {
    parse_templates(text).into_iter().filter(|t| slot_count(t) == slots).collect()
}
