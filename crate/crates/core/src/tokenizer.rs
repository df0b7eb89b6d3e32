// SPDX-License-Identifier: MIT OR Apache-2.0

//! GPT-2 byte-level BPE.
//!
//! Reads the standard `vocab.json` / `merges.txt` pair. Every one of the 256
//! byte symbols must be in the vocabulary, which makes [`BpeVocab::encode`]
//! total: a word whose merged pieces are unknown falls back to byte tokens.

use std::collections::HashMap;
use std::path::Path;

use fancy_regex::Regex;

use crate::error::{DlensError, Result};

pub type TokenId = u32;

const PRETOKEN_PATTERN: &str = r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

/// The reversible byte → printable-char table GPT-2 uses.
pub fn bytes_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut printable = vec![false; 256];
    for b in (b'!'..=b'~').chain(0xA1..=0xAC).chain(0xAE..=0xFF) {
        printable[b as usize] = true;
    }
    let mut n = 0u32;
    for b in 0..256usize {
        table[b] = if printable[b] {
            char::from_u32(b as u32).unwrap()
        } else {
            n += 1;
            char::from_u32(255 + n).unwrap()
        };
    }
    table
}

/// Vocabulary, merge ranks and byte tables.
#[derive(Debug, Clone)]
pub struct BpeVocab {
    token_to_id: HashMap<String, TokenId>,
    id_to_token: Vec<String>,
    ranks: HashMap<(String, String), usize>,
    merges: Vec<(String, String)>,
    byte_encoder: [char; 256],
    byte_decoder: HashMap<char, u8>,
    pretokenizer: Regex,
}

impl BpeVocab {
    /// Build from a token map and an ordered merge list.
    ///
    /// Ids must be dense in `[0, vocab_size)`; all 256 byte symbols must be
    /// present.
    pub fn from_parts(token_to_id: HashMap<String, TokenId>, merges: Vec<(String, String)>) -> Result<Self> {
        let n = token_to_id.len();
        let mut id_to_token = vec![None; n];
        for (tok, &id) in &token_to_id {
            let slot = id_to_token
                .get_mut(id as usize)
                .ok_or_else(|| DlensError::Format(format!("token id {id} not dense in [0, {n})")))?;
            if slot.is_some() {
                return Err(DlensError::Format(format!("duplicate token id {id}")));
            }
            *slot = Some(tok.clone());
        }
        let id_to_token: Vec<String> = id_to_token.into_iter().map(Option::unwrap).collect();

        let byte_encoder = bytes_to_unicode();
        for c in byte_encoder {
            if !token_to_id.contains_key(&c.to_string()) {
                return Err(DlensError::Format(format!("byte symbol {c:?} missing from vocabulary")));
            }
        }
        let byte_decoder = byte_encoder.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();
        let ranks = merges.iter().enumerate().map(|(i, m)| (m.clone(), i)).collect();
        Ok(BpeVocab {
            token_to_id,
            id_to_token,
            ranks,
            merges,
            byte_encoder,
            byte_decoder,
            pretokenizer: Regex::new(PRETOKEN_PATTERN).expect("static pattern"),
        })
    }

    /// Load `vocab.json` and `merges.txt`.
    pub fn load(vocab_json: &Path, merges_txt: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(vocab_json).map_err(|e| DlensError::io(vocab_json, e))?;
        let token_to_id: HashMap<String, TokenId> = serde_json::from_str(&raw)?;
        let raw = std::fs::read_to_string(merges_txt).map_err(|e| DlensError::io(merges_txt, e))?;
        Self::from_parts(token_to_id, parse_merges(&raw)?)
    }

    /// Load `vocab.json` and `merges.txt` from a directory.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        Self::load(&dir.join("vocab.json"), &dir.join("merges.txt"))
    }

    /// Write `vocab.json` and `merges.txt` into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        let vocab = serde_json::to_string(&self.token_to_id)?;
        let p = dir.join("vocab.json");
        std::fs::write(&p, vocab).map_err(|e| DlensError::io(&p, e))?;
        let mut merges = String::from("#version: 0.2\n");
        for (a, b) in &self.merges {
            merges.push_str(a);
            merges.push(' ');
            merges.push_str(b);
            merges.push('\n');
        }
        let p = dir.join("merges.txt");
        std::fs::write(&p, merges).map_err(|e| DlensError::io(&p, e))
    }

    pub fn vocab_size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token_id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    /// Raw (byte-encoded) symbol for an id.
    pub fn token_str(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    /// Encode text to token ids.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        for m in self.pretokenizer.find_iter(text) {
            let piece = m.expect("pretokenizer regex cannot backtrack-overflow on this pattern");
            let symbols: Vec<String> = piece
                .as_str()
                .bytes()
                .map(|b| self.byte_encoder[b as usize].to_string())
                .collect();
            for sym in self.bpe(symbols) {
                match self.token_to_id.get(&sym) {
                    Some(&id) => out.push(id),
                    None => out.extend(sym.chars().map(|c| self.token_to_id[&c.to_string()])),
                }
            }
        }
        out
    }

    /// Encode text, requiring it to be exactly one token.
    pub fn single_token(&self, text: &str) -> Result<TokenId> {
        match self.encode(text).as_slice() {
            [id] => Ok(*id),
            ids => Err(DlensError::Invalid(format!(
                "{text:?} is {} tokens, expected a single token",
                ids.len()
            ))),
        }
    }

    fn bpe(&self, mut word: Vec<String>) -> Vec<String> {
        while word.len() > 1 {
            let best = word
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, i)))
                .min();
            let Some((rank, _)) = best else { break };
            let (a, b) = &self.merges[rank];
            let mut merged = Vec::with_capacity(word.len());
            let mut i = 0;
            while i < word.len() {
                if i + 1 < word.len() && &word[i] == a && &word[i + 1] == b {
                    merged.push(format!("{a}{b}"));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut word[i]));
                    i += 1;
                }
            }
            word = merged;
        }
        word
    }

    /// Decode ids back to raw bytes.
    pub fn decode_bytes(&self, ids: &[TokenId]) -> Result<Vec<u8>> {
        let mut bytes = Vec::new();
        for &id in ids {
            let tok = self
                .token_str(id)
                .ok_or_else(|| DlensError::Index(format!("token id {id} >= vocab size {}", self.vocab_size())))?;
            for c in tok.chars() {
                let b = self
                    .byte_decoder
                    .get(&c)
                    .ok_or_else(|| DlensError::Format(format!("symbol {c:?} is not a byte-level character")))?;
                bytes.push(*b);
            }
        }
        Ok(bytes)
    }

    /// Decode ids to text (invalid UTF-8 sequences are replaced).
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }

    /// Build a vocabulary containing the 256 byte symbols plus, for every word
    /// given, a left-to-right merge chain that turns the word into one token.
    ///
    /// Chains for space-prefixed words are ranked before all others so that a
    /// leading `Ġ` always merges first. Used for toy fixtures.
    pub fn with_word_chains<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let enc = bytes_to_unicode();
        let mut token_to_id: HashMap<String, TokenId> = HashMap::new();
        for c in enc {
            let next = token_to_id.len() as TokenId;
            token_to_id.entry(c.to_string()).or_insert(next);
        }
        let mut merges: Vec<(String, String)> = Vec::new();
        let mut seen: std::collections::HashSet<(String, String)> = Default::default();
        let (spaced, bare): (Vec<&str>, Vec<&str>) = words.iter().map(|w| w.as_ref()).partition(|w| w.starts_with(' '));
        for w in spaced.into_iter().chain(bare) {
            let syms: Vec<String> = w.bytes().map(|b| enc[b as usize].to_string()).collect();
            let mut acc = match syms.first() {
                Some(s) => s.clone(),
                None => continue,
            };
            for s in &syms[1..] {
                let pair = (acc.clone(), s.clone());
                acc.push_str(s);
                if seen.insert(pair.clone()) {
                    merges.push(pair);
                }
                let next = token_to_id.len() as TokenId;
                token_to_id.entry(acc.clone()).or_insert(next);
            }
        }
        Self::from_parts(token_to_id, merges)
    }
}

fn parse_merges(raw: &str) -> Result<Vec<(String, String)>> {
    let mut merges = Vec::new();
    for (n, line) in raw.lines().enumerate() {
        if line.starts_with("#version") || line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(' ');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) => merges.push((a.to_string(), b.to_string())),
            _ => {
                return Err(DlensError::Format(format!(
                    "merges.txt line {}: expected two symbols, got {line:?}",
                    n + 1
                )))
            }
        }
    }
    Ok(merges)
}
