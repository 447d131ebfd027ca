//! Onomatopoeic word to phoneme sequence conversion.
//!
//! Words are lowercase romaji. Tokenization is greedy longest-match with the
//! digraphs {ch, sh, ts} tried before single letters, a doubled consonant
//! mapped to the geminate Q plus the consonant, a doubled vowel (or explicit
//! ':') mapped to the vowel plus the long-vowel marker, and 'n' before a
//! consonant or at the end of the word mapped to the moraic nasal N.
//!
//! The rule table is a stand-in: the corpus this replaces does not document
//! its phoneme set or G2P method, so any fixed deterministic scheme serves.

use ndarray::Array2;
use std::collections::HashMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PhonemeError {
    #[error("unparseable character '{ch}' at offset {offset} in \"{word}\"")]
    Parse { word: String, ch: char, offset: usize },
    #[error("empty word")]
    EmptyWord,
    #[error("symbol \"{0}\" not in inventory")]
    UnknownSymbol(String),
    #[error("invalid inventory: {0}")]
    InvalidInventory(String),
    #[error("inventory i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PhonemeError>;

const VOWELS: [&str; 5] = ["a", "i", "u", "e", "o"];
const CONSONANTS: [&str; 19] = [
    "k", "g", "s", "z", "t", "d", "n", "h", "b", "p", "m", "y", "r", "w", "f", "j", "ch", "sh",
    "ts",
];

/// Ordered phoneme alphabet; position defines the one-hot index.
#[derive(Debug, Clone)]
pub struct PhonemeInventory {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl PhonemeInventory {
    /// The fixed 27-symbol default: 5 vowels, 19 consonants, moraic nasal N,
    /// geminate Q, long-vowel marker ':'.
    pub fn default_inventory() -> Self {
        let mut symbols: Vec<String> = VOWELS.iter().map(|s| s.to_string()).collect();
        symbols.extend(CONSONANTS.iter().map(|s| s.to_string()));
        symbols.push("N".into());
        symbols.push("Q".into());
        symbols.push(":".into());
        Self::from_symbols(symbols).expect("default inventory is valid")
    }

    pub fn from_symbols(symbols: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, s) in symbols.iter().enumerate() {
            if s.is_empty() {
                return Err(PhonemeError::InvalidInventory("empty symbol".into()));
            }
            if index.insert(s.clone(), i).is_some() {
                return Err(PhonemeError::InvalidInventory(format!(
                    "duplicate symbol \"{s}\""
                )));
            }
        }
        Ok(Self { symbols, index })
    }

    /// One symbol per line, UTF-8; file order defines one-hot indices.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_symbols(
            text.lines()
                .map(|l| l.trim().to_string())
                .filter(|l| !l.is_empty())
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn index_of(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, index: usize) -> Option<&str> {
        self.symbols.get(index).map(|s| s.as_str())
    }
}

/// A romaji onomatopoeic word: lowercase ASCII letters plus ':'.
#[derive(Debug, Clone, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct OnomatopoeicWord(String);

impl OnomatopoeicWord {
    pub fn new(text: &str) -> Result<Self> {
        if text.is_empty() {
            return Err(PhonemeError::EmptyWord);
        }
        for (offset, ch) in text.char_indices() {
            if !(ch.is_ascii_lowercase() || ch == ':') {
                return Err(PhonemeError::Parse {
                    word: text.into(),
                    ch,
                    offset,
                });
            }
        }
        Ok(Self(text.into()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for OnomatopoeicWord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhonemeSequence {
    pub phonemes: Vec<String>,
}

impl PhonemeSequence {
    pub fn len(&self) -> usize {
        self.phonemes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phonemes.is_empty()
    }
}

/// N x |inventory| one-hot rows.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHotSequence {
    pub matrix: Array2<f32>,
}

fn is_vowel(ch: char) -> bool {
    matches!(ch, 'a' | 'i' | 'u' | 'e' | 'o')
}

fn is_consonant(ch: char) -> bool {
    ch.is_ascii_lowercase() && !is_vowel(ch)
}

/// Greedy deterministic grapheme-to-phoneme conversion.
pub fn g2p(word: &OnomatopoeicWord, inv: &PhonemeInventory) -> Result<PhonemeSequence> {
    let chars: Vec<char> = word.as_str().chars().collect();
    let mut phonemes = Vec::new();
    let mut i = 0;
    let parse_err = |i: usize| PhonemeError::Parse {
        word: word.as_str().into(),
        ch: chars[i],
        offset: i,
    };
    while i < chars.len() {
        let c = chars[i];
        let next = chars.get(i + 1).copied();
        if c == ':' {
            phonemes.push(":".to_string());
            i += 1;
        } else if c == 'n' && !next.map(is_vowel).unwrap_or(false) {
            // Moraic nasal: 'n' before a consonant, ':' or the word end.
            phonemes.push("N".to_string());
            i += 1;
        } else if is_consonant(c) && next == Some(c) && c != 'n' {
            // Geminate: doubled consonant.
            phonemes.push("Q".to_string());
            i += 1;
        } else {
            // Digraphs before single letters.
            let digraph = chars.get(i..i + 2).map(|s| s.iter().collect::<String>());
            let tok: String = match digraph.as_deref() {
                Some("ch") | Some("sh") | Some("ts") => digraph.unwrap(),
                _ => c.to_string(),
            };
            if inv.index_of(&tok).is_none() || (tok.len() == 1 && !c.is_ascii_lowercase()) {
                return Err(parse_err(i));
            }
            if is_vowel(c) {
                phonemes.push(tok);
                // Doubled vowel contracts to vowel + long marker.
                if next == Some(c) {
                    phonemes.push(":".to_string());
                    i += 1;
                }
                i += 1;
            } else {
                i += tok.len();
                phonemes.push(tok);
            }
        }
    }
    debug_assert!(phonemes.len() <= chars.len());
    Ok(PhonemeSequence { phonemes })
}

/// Inverse of the tokenizer's Q/:/N expansions; reproduces the input word.
pub fn detokenize(p: &PhonemeSequence) -> String {
    let mut out = String::new();
    let toks = &p.phonemes;
    for (i, t) in toks.iter().enumerate() {
        match t.as_str() {
            "N" => out.push('n'),
            "Q" => {
                // Geminate surfaces as the first letter of the next token.
                if let Some(next) = toks.get(i + 1) {
                    out.push(next.chars().next().unwrap());
                }
            }
            ":" => {
                // A ':' right after a vowel came from a doubled vowel.
                match toks.get(i.wrapping_sub(1)) {
                    Some(prev) if i > 0 && prev.len() == 1 && is_vowel(prev.chars().next().unwrap()) => {
                        out.push(prev.chars().next().unwrap())
                    }
                    _ => out.push(':'),
                }
            }
            other => out.push_str(other),
        }
    }
    out
}

pub fn encode_one_hot(p: &PhonemeSequence, inv: &PhonemeInventory) -> Result<OneHotSequence> {
    if p.is_empty() {
        return Err(PhonemeError::EmptyWord);
    }
    let mut matrix = Array2::zeros((p.len(), inv.len()));
    for (row, sym) in p.phonemes.iter().enumerate() {
        let idx = inv
            .index_of(sym)
            .ok_or_else(|| PhonemeError::UnknownSymbol(sym.clone()))?;
        matrix[(row, idx)] = 1.0;
    }
    Ok(OneHotSequence { matrix })
}

pub fn decode_one_hot(oh: &OneHotSequence, inv: &PhonemeInventory) -> Result<PhonemeSequence> {
    let mut phonemes = Vec::with_capacity(oh.matrix.nrows());
    for row in oh.matrix.rows() {
        let idx = row
            .iter()
            .position(|&v| v == 1.0)
            .ok_or_else(|| PhonemeError::UnknownSymbol("<no hot index>".into()))?;
        phonemes.push(
            inv.symbol(idx)
                .ok_or_else(|| PhonemeError::UnknownSymbol(format!("index {idx}")))?
                .to_string(),
        );
    }
    Ok(PhonemeSequence { phonemes })
}
