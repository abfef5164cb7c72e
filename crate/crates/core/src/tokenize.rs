//! Byte-level BPE tokenizer, vocabulary-size planning and fertility.
//!
//! Id layout of a [`Vocabulary`]: special tokens first, then the 256 byte
//! tokens, then one token per run of 2..=16 spaces, then merged tokens in
//! merge order. Special tokens and space runs are matched before BPE and are
//! never produced or split by merges.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::mixture::{Document, Lang};
use crate::par::{self, Exec};
use crate::{Error, Result, Warning};

/// Anything that can count tokens in a text.
pub trait TokenCount: Sync {
    fn count_tokens(&self, text: &str) -> usize;
}

/// One token per whitespace-separated word.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl TokenCount for WhitespaceTokenizer {
    fn count_tokens(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

pub const VOCAB_ALIGNMENT: u64 = 64;

/// Round a predicted vocabulary size up to the next multiple of 64.
pub fn plan_vocab(predicted_optimal: u64) -> Result<u64> {
    if predicted_optimal == 0 {
        return Err(Error::config("plan_vocab: predicted size must be > 0"));
    }
    Ok(predicted_optimal.div_ceil(VOCAB_ALIGNMENT) * VOCAB_ALIGNMENT)
}

// ---------------------------------------------------------------------------
// Optimal-vocabulary prediction

/// A fitted predictor of the compute-optimal vocabulary size.
pub trait VocabFit {
    fn predict(&self, flops_budget: f64, data_budget_tokens: u64) -> Result<f64>;
}

/// Piecewise power law through fitted anchor points, interpolated in log-log
/// space and extrapolated with the end segments' exponents. Monotone whenever
/// the anchors are.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchoredPowerFit {
    /// (FLOPs budget, optimal vocabulary), sorted by budget.
    pub anchors: Vec<(f64, f64)>,
    /// Data budget the anchors were fitted for.
    pub data_budget_tokens: u64,
}

/// Data budget used when the shipped anchors were fitted.
pub const FIXTURE_DATA_BUDGET: u64 = 400_000_000_000;

impl AnchoredPowerFit {
    pub fn new(mut anchors: Vec<(f64, f64)>, data_budget_tokens: u64) -> Result<Self> {
        if anchors.len() < 2 {
            return Err(Error::config("vocab fit: need at least two anchors"));
        }
        if anchors.iter().any(|&(c, v)| !(c > 0.0 && v > 0.0)) {
            return Err(Error::config("vocab fit: anchors must be positive"));
        }
        anchors.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(AnchoredPowerFit {
            anchors,
            data_budget_tokens,
        })
    }

    /// Anchors for the three model sizes, keyed by the compute budget
    /// `6 * non_embedding_params * 400e9` of each size's encoder preset.
    pub fn fixture() -> Self {
        use crate::encoder::{EncoderConfig, EncoderPreset};
        let anchors = [
            (EncoderPreset::Tiny, 27_224.0),
            (EncoderPreset::Base, 42_200.0),
            (EncoderPreset::Large, 55_571.0),
        ]
        .into_iter()
        .map(|(p, v)| (fixture_flops_budget(&EncoderConfig::preset(p)), v))
        .collect();
        AnchoredPowerFit::new(anchors, FIXTURE_DATA_BUDGET).expect("fixture anchors are valid")
    }
}

/// Compute budget assigned to an encoder configuration in the fixture fit.
pub fn fixture_flops_budget(config: &crate::encoder::EncoderConfig) -> f64 {
    6.0 * config.non_embedding_params() as f64 * FIXTURE_DATA_BUDGET as f64
}

impl VocabFit for AnchoredPowerFit {
    fn predict(&self, flops_budget: f64, data_budget_tokens: u64) -> Result<f64> {
        if !(flops_budget.is_finite() && flops_budget > 0.0) {
            return Err(Error::config("vocab fit: flops budget must be > 0"));
        }
        if data_budget_tokens != self.data_budget_tokens {
            return Err(Error::config(format!(
                "vocab fit: anchors were fitted for a data budget of {} tokens, got {data_budget_tokens}",
                self.data_budget_tokens
            )));
        }
        let a = &self.anchors;
        if let Some(&(_, v)) = a.iter().find(|(c, _)| *c == flops_budget) {
            return Ok(v);
        }
        let seg = match a.iter().position(|(c, _)| *c > flops_budget) {
            Some(0) => 0,
            Some(i) => i - 1,
            None => a.len() - 2,
        };
        let (c0, v0) = a[seg];
        let (c1, v1) = a[seg + 1];
        let slope = (v1.ln() - v0.ln()) / (c1.ln() - c0.ln());
        Ok((v0.ln() + slope * (flops_budget.ln() - c0.ln())).exp())
    }
}

pub fn predict_optimal_vocab(
    flops_budget: f64,
    data_budget_tokens: u64,
    fit: Option<&dyn VocabFit>,
) -> Result<u64> {
    let fit = fit.ok_or_else(|| Error::config("predict_optimal_vocab: no parametric fit supplied"))?;
    let v = fit.predict(flops_budget, data_budget_tokens)?;
    if !(v.is_finite() && v >= 1.0) {
        return Err(Error::config(format!("predict_optimal_vocab: fit returned {v}")));
    }
    Ok(v.round() as u64)
}

// ---------------------------------------------------------------------------
// Pretokenization

pub const DEFAULT_SPECIALS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];
pub const MAX_SPACE_RUN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Piece<'a> {
    Special(usize),
    Spaces(usize),
    Bytes(&'a str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CharClass {
    Alpha,
    Digit,
    Other,
}

fn class(c: char) -> CharClass {
    if c.is_alphabetic() {
        CharClass::Alpha
    } else if c.is_numeric() {
        CharClass::Digit
    } else {
        CharClass::Other
    }
}

/// Split a special-free segment into BPE words, space runs and other
/// whitespace. A single space before a word is attached to the word.
fn split_segment<'a>(seg: &'a str, out: &mut Vec<Piece<'a>>) {
    let bytes = seg.as_bytes();
    let mut i = 0;
    while i < seg.len() {
        let c = seg[i..].chars().next().expect("in bounds");
        if c == ' ' {
            let mut j = i;
            while j < bytes.len() && bytes[j] == b' ' {
                j += 1;
            }
            let next_is_word = seg[j..].chars().next().is_some_and(|n| !n.is_whitespace());
            if next_is_word {
                if j - 1 > i {
                    out.push(Piece::Spaces(j - 1 - i));
                }
                i = j - 1;
            } else {
                out.push(Piece::Spaces(j - i));
                i = j;
                continue;
            }
        } else if c.is_whitespace() {
            let mut j = i + c.len_utf8();
            while seg[j..].starts_with(c) {
                j += c.len_utf8();
            }
            out.push(Piece::Bytes(&seg[i..j]));
            i = j;
            continue;
        }
        let start = i;
        if bytes[i] == b' ' {
            i += 1;
        }
        let first = seg[i..].chars().next().expect("word follows space");
        let cls = class(first);
        let mut j = i + first.len_utf8();
        for ch in seg[j..].chars() {
            if ch.is_whitespace() || class(ch) != cls {
                break;
            }
            j += ch.len_utf8();
        }
        out.push(Piece::Bytes(&seg[start..j]));
        i = j;
    }
}

fn pretokenize<'a>(text: &'a str, specials: &[String]) -> Vec<Piece<'a>> {
    let mut out = Vec::new();
    let mut rest = text;
    loop {
        let next = specials
            .iter()
            .enumerate()
            .filter(|(_, s)| !s.is_empty())
            .filter_map(|(i, s)| rest.find(s.as_str()).map(|pos| (pos, std::cmp::Reverse(s.len()), i)))
            .min();
        match next {
            Some((pos, std::cmp::Reverse(len), i)) => {
                split_segment(&rest[..pos], &mut out);
                out.push(Piece::Special(i));
                rest = &rest[pos + len..];
            }
            None => {
                split_segment(rest, &mut out);
                break;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Vocabulary

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Token {
    Special(String),
    /// A run of 2..=16 spaces.
    Spaces(usize),
    Bytes(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    specials: Vec<String>,
    tokens: Vec<Token>,
    /// Merge list in rank order: (left id, right id, result id).
    merges: Vec<(u32, u32, u32)>,
    merge_rank: HashMap<(u32, u32), (usize, u32)>,
    bytes_to_id: HashMap<Vec<u8>, u32>,
}

impl Vocabulary {
    /// Specials, bytes and space runs, with no merges.
    pub fn base(specials: &[&str]) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in specials {
            if s.is_empty() || !seen.insert(*s) {
                return Err(Error::config(format!("specials: empty or duplicate token '{s}'")));
            }
        }
        let mut tokens: Vec<Token> = specials.iter().map(|s| Token::Special(s.to_string())).collect();
        let mut bytes_to_id = HashMap::new();
        for b in 0..=255u8 {
            bytes_to_id.insert(vec![b], tokens.len() as u32);
            tokens.push(Token::Bytes(vec![b]));
        }
        for n in 2..=MAX_SPACE_RUN {
            tokens.push(Token::Spaces(n));
        }
        Ok(Vocabulary {
            specials: specials.iter().map(|s| s.to_string()).collect(),
            tokens,
            merges: Vec::new(),
            merge_rank: HashMap::new(),
            bytes_to_id,
        })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    /// Size before any merges.
    pub fn base_size(&self) -> usize {
        self.specials.len() + 256 + (MAX_SPACE_RUN - 1)
    }

    pub fn specials(&self) -> &[String] {
        &self.specials
    }

    pub fn special_id(&self, name: &str) -> Option<u32> {
        self.specials.iter().position(|s| s == name).map(|i| i as u32)
    }

    pub fn special_ids(&self) -> Vec<u32> {
        (0..self.specials.len() as u32).collect()
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < self.specials.len()
    }

    pub fn token(&self, id: u32) -> Option<&Token> {
        self.tokens.get(id as usize)
    }

    pub fn id_of(&self, token: &Token) -> Option<u32> {
        match token {
            Token::Special(s) => self.special_id(s),
            Token::Spaces(n) if (2..=MAX_SPACE_RUN).contains(n) => {
                Some((self.specials.len() + 256 + n - 2) as u32)
            }
            Token::Spaces(_) => None,
            Token::Bytes(b) => self.bytes_to_id.get(b).copied(),
        }
    }

    fn space_id(&self, n: usize) -> u32 {
        (self.specials.len() + 256 + n - 2) as u32
    }

    fn byte_id(&self, b: u8) -> u32 {
        (self.specials.len() + b as usize) as u32
    }

    pub fn merges(&self) -> impl Iterator<Item = (&Token, &Token)> {
        self.merges
            .iter()
            .map(|&(l, r, _)| (&self.tokens[l as usize], &self.tokens[r as usize]))
    }

    pub fn num_merges(&self) -> usize {
        self.merges.len()
    }

    fn token_bytes(&self, id: u32) -> &[u8] {
        match &self.tokens[id as usize] {
            Token::Bytes(b) => b,
            _ => &[],
        }
    }

    fn push_merge(&mut self, left: u32, right: u32) -> u32 {
        let mut bytes = self.token_bytes(left).to_vec();
        bytes.extend_from_slice(self.token_bytes(right));
        let id = match self.bytes_to_id.get(&bytes) {
            Some(&id) => id,
            None => {
                let id = self.tokens.len() as u32;
                self.bytes_to_id.insert(bytes.clone(), id);
                self.tokens.push(Token::Bytes(bytes));
                id
            }
        };
        self.merge_rank.insert((left, right), (self.merges.len(), id));
        self.merges.push((left, right, id));
        id
    }

    /// The same vocabulary with only its first `n` merges.
    pub fn truncated(&self, n: usize) -> Self {
        let mut v = Vocabulary::base(&self.specials.iter().map(String::as_str).collect::<Vec<_>>())
            .expect("specials already validated");
        for &(l, r, _) in self.merges.iter().take(n) {
            v.push_merge(l, r);
        }
        v
    }

    fn encode_word(&self, word: &[u8], out: &mut Vec<u32>) {
        let mut syms: Vec<u32> = word.iter().map(|&b| self.byte_id(b)).collect();
        while syms.len() > 1 {
            let best = syms
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.merge_rank.get(&(w[0], w[1])).map(|&(rank, id)| (rank, i, id)))
                .min();
            let Some((rank, _, new_id)) = best else { break };
            let (l, r, _) = self.merges[rank];
            let mut merged = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == l && syms[i + 1] == r {
                    merged.push(new_id);
                    i += 2;
                } else {
                    merged.push(syms[i]);
                    i += 1;
                }
            }
            syms = merged;
        }
        out.extend(syms);
    }

    fn push_spaces(&self, mut n: usize, out: &mut Vec<u32>) {
        while n > 0 {
            let take = n.min(MAX_SPACE_RUN);
            if take == 1 {
                out.push(self.byte_id(b' '));
            } else {
                out.push(self.space_id(take));
            }
            n -= take;
        }
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for piece in pretokenize(text, &self.specials) {
            match piece {
                Piece::Special(i) => out.push(i as u32),
                Piece::Spaces(n) => self.push_spaces(n, &mut out),
                Piece::Bytes(s) => self.encode_word(s.as_bytes(), &mut out),
            }
        }
        out
    }

    pub fn decode_bytes(&self, ids: &[u32]) -> Vec<u8> {
        let mut out = Vec::new();
        for &id in ids {
            match self.tokens.get(id as usize) {
                Some(Token::Special(s)) => out.extend_from_slice(s.as_bytes()),
                Some(Token::Spaces(n)) => out.extend(std::iter::repeat_n(b' ', *n)),
                Some(Token::Bytes(b)) => out.extend_from_slice(b),
                None => {}
            }
        }
        out
    }

    /// Inverse of [`encode`](Self::encode); unknown ids are skipped and
    /// invalid UTF-8 is replaced.
    pub fn decode(&self, ids: &[u32]) -> String {
        String::from_utf8_lossy(&self.decode_bytes(ids)).into_owned()
    }

    // -- file format ---------------------------------------------------------

    pub fn to_text(&self) -> String {
        let mut out = String::from("#bpe-vocab v1\n");
        let _ = writeln!(out, "#max-space-run {MAX_SPACE_RUN}");
        for s in &self.specials {
            let _ = writeln!(out, "special {}", escape_bytes(s.as_bytes()));
        }
        for &(l, r, _) in &self.merges {
            let _ = writeln!(
                out,
                "{} {}",
                escape_bytes(self.token_bytes(l)),
                escape_bytes(self.token_bytes(r))
            );
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: "vocab".into(),
            line,
            message: msg,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "#bpe-vocab v1")) => {}
            _ => return Err(err(1, "missing '#bpe-vocab v1' header".into())),
        }
        let mut specials = Vec::new();
        let mut merges = Vec::new();
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("#max-space-run ") {
                if rest.trim() != MAX_SPACE_RUN.to_string() {
                    return Err(err(i + 1, format!("unsupported max-space-run {rest}")));
                }
                continue;
            }
            if let Some(rest) = line.strip_prefix("special ") {
                let bytes = unescape_bytes(rest).map_err(|m| err(i + 1, m))?;
                specials.push(String::from_utf8(bytes).map_err(|_| err(i + 1, "special is not UTF-8".into()))?);
                continue;
            }
            let (l, r) = line
                .split_once(' ')
                .ok_or_else(|| err(i + 1, "expected '<left> <right>'".into()))?;
            merges.push((
                i + 1,
                unescape_bytes(l).map_err(|m| err(i + 1, m))?,
                unescape_bytes(r).map_err(|m| err(i + 1, m))?,
            ));
        }
        let names: Vec<&str> = specials.iter().map(String::as_str).collect();
        let mut v = Vocabulary::base(&names)?;
        for (line, l, r) in merges {
            let lid = *v
                .bytes_to_id
                .get(&l)
                .ok_or_else(|| err(line, "left side is not a known token".into()))?;
            let rid = *v
                .bytes_to_id
                .get(&r)
                .ok_or_else(|| err(line, "right side is not a known token".into()))?;
            v.push_merge(lid, rid);
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

impl TokenCount for Vocabulary {
    fn count_tokens(&self, text: &str) -> usize {
        self.encode(text).len()
    }
}

fn escape_bytes(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len());
    for &b in bytes {
        if (0x21..=0x7e).contains(&b) && b != b'\\' {
            s.push(b as char);
        } else {
            let _ = write!(s, "\\x{b:02x}");
        }
    }
    s
}

fn unescape_bytes(s: &str) -> std::result::Result<Vec<u8>, String> {
    let raw = s.as_bytes();
    let mut out = Vec::with_capacity(raw.len());
    let mut i = 0;
    while i < raw.len() {
        if raw[i] == b'\\' {
            let hex = s
                .get(i + 2..i + 4)
                .filter(|_| raw.get(i + 1) == Some(&b'x'))
                .ok_or_else(|| format!("bad escape in '{s}'"))?;
            out.push(u8::from_str_radix(hex, 16).map_err(|_| format!("bad escape in '{s}'"))?);
            i += 4;
        } else {
            out.push(raw[i]);
            i += 1;
        }
    }
    if out.is_empty() {
        return Err("empty token".into());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Training

#[derive(PartialEq, Eq)]
struct HeapEntry {
    count: i64,
    key: (Vec<u8>, Vec<u8>),
    pair: (u32, u32),
}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.count
            .cmp(&other.count)
            .then_with(|| other.key.cmp(&self.key))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Count BPE words (pretokenized byte chunks) over a corpus.
pub fn count_words_with(texts: &[&str], specials: &[String], exec: Exec) -> HashMap<Vec<u8>, u64> {
    let partials = par::map_chunks(exec, texts, 64, |chunk| {
        let mut counts: HashMap<Vec<u8>, u64> = HashMap::new();
        for text in chunk {
            for piece in pretokenize(text, specials) {
                if let Piece::Bytes(s) = piece {
                    *counts.entry(s.as_bytes().to_vec()).or_default() += 1;
                }
            }
        }
        counts
    });
    let mut total: HashMap<Vec<u8>, u64> = HashMap::new();
    for part in partials {
        for (w, c) in part {
            *total.entry(w).or_default() += c;
        }
    }
    total
}

fn pair_counts_of(syms: &[u32], count: i64, acc: &mut HashMap<(u32, u32), i64>) {
    for w in syms.windows(2) {
        *acc.entry((w[0], w[1])).or_default() += count;
    }
}

/// Train merges by repeatedly merging the most frequent adjacent pair until
/// the vocabulary reaches `target_size`. Ties go to the lexicographically
/// smaller pair of token byte strings.
pub fn bpe_train_with(texts: &[&str], target_size: usize, specials: &[&str], exec: Exec) -> Result<Vocabulary> {
    if texts.is_empty() {
        return Err(Error::input("bpe_train: corpus is empty"));
    }
    let mut vocab = Vocabulary::base(specials)?;
    if target_size <= vocab.base_size() {
        return Err(Error::config(format!(
            "bpe_train: target size {target_size} must exceed specials + base alphabet ({})",
            vocab.base_size()
        )));
    }

    let counts = count_words_with(texts, &vocab.specials, exec);
    let mut words: Vec<(Vec<u8>, u64)> = counts.into_iter().collect();
    words.sort_unstable();
    let mut syms: Vec<Vec<u32>> = words
        .iter()
        .map(|(w, _)| w.iter().map(|&b| vocab.byte_id(b)).collect())
        .collect();
    let freq: Vec<i64> = words.iter().map(|(_, c)| *c as i64).collect();

    let mut pair_counts: HashMap<(u32, u32), i64> = HashMap::new();
    let mut pair_words: HashMap<(u32, u32), Vec<usize>> = HashMap::new();
    for (wi, s) in syms.iter().enumerate() {
        pair_counts_of(s, freq[wi], &mut pair_counts);
        for w in s.windows(2) {
            let list = pair_words.entry((w[0], w[1])).or_default();
            if list.last() != Some(&wi) {
                list.push(wi);
            }
        }
    }
    let key_of = |v: &Vocabulary, p: (u32, u32)| (v.token_bytes(p.0).to_vec(), v.token_bytes(p.1).to_vec());
    let mut heap: BinaryHeap<HeapEntry> = pair_counts
        .iter()
        .map(|(&pair, &count)| HeapEntry {
            count,
            key: key_of(&vocab, pair),
            pair,
        })
        .collect();

    while vocab.size() < target_size {
        let Some(top) = heap.pop() else { break };
        let current = pair_counts.get(&top.pair).copied().unwrap_or(0);
        if current != top.count {
            if current > 0 {
                heap.push(HeapEntry { count: current, ..top });
            }
            continue;
        }
        if current <= 0 {
            break;
        }
        let (l, r) = top.pair;
        let new_id = vocab.push_merge(l, r);
        let affected = pair_words.remove(&top.pair).unwrap_or_default();
        let mut delta: HashMap<(u32, u32), i64> = HashMap::new();
        for wi in affected {
            let old = &syms[wi];
            if !old.windows(2).any(|w| w[0] == l && w[1] == r) {
                continue;
            }
            let mut merged = Vec::with_capacity(old.len());
            let mut i = 0;
            while i < old.len() {
                if i + 1 < old.len() && old[i] == l && old[i + 1] == r {
                    merged.push(new_id);
                    i += 2;
                } else {
                    merged.push(old[i]);
                    i += 1;
                }
            }
            pair_counts_of(old, -freq[wi], &mut delta);
            pair_counts_of(&merged, freq[wi], &mut delta);
            for w in merged.windows(2) {
                if w[0] == new_id || w[1] == new_id {
                    let list = pair_words.entry((w[0], w[1])).or_default();
                    if list.last() != Some(&wi) {
                        list.push(wi);
                    }
                }
            }
            syms[wi] = merged;
        }
        let mut changed: Vec<((u32, u32), i64)> = delta.into_iter().filter(|(_, d)| *d != 0).collect();
        changed.sort_unstable();
        for (pair, d) in changed {
            let c = pair_counts.entry(pair).or_default();
            *c += d;
            if d > 0 {
                heap.push(HeapEntry {
                    count: *c,
                    key: key_of(&vocab, pair),
                    pair,
                });
            }
        }
        pair_counts.remove(&top.pair);
    }
    Ok(vocab)
}

pub fn bpe_train(corpus: &[Document], target_size: usize, specials: &[&str]) -> Result<Vocabulary> {
    let texts: Vec<&str> = corpus.iter().map(|d| d.text.as_str()).collect();
    bpe_train_with(&texts, target_size, specials, Exec::default())
}

// ---------------------------------------------------------------------------
// Fertility

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LangFertility {
    pub tokens: u64,
    pub words: u64,
    pub fertility: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FertilityReport {
    pub per_language: BTreeMap<Lang, LangFertility>,
    pub warnings: Vec<Warning>,
}

impl FertilityReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("language\ttokens\twords\tfertility\n");
        for (lang, f) in &self.per_language {
            let _ = writeln!(out, "{lang}\t{}\t{}\t{:.4}", f.tokens, f.words, f.fertility);
        }
        out
    }
}

/// Tokens per whitespace word for each language in the corpus.
pub fn fertility_with(tokenizer: &dyn TokenCount, corpus: &[Document], exec: Exec) -> FertilityReport {
    let counts = par::map(exec, corpus, |d| {
        (d.lang, tokenizer.count_tokens(&d.text) as u64, d.text.split_whitespace().count() as u64)
    });
    let mut acc: BTreeMap<Lang, (u64, u64)> = BTreeMap::new();
    for (lang, t, w) in counts {
        let e = acc.entry(lang).or_default();
        e.0 += t;
        e.1 += w;
    }
    let mut report = FertilityReport::default();
    for (lang, (tokens, words)) in acc {
        if words == 0 {
            report
                .warnings
                .push(Warning::new("fertility", format!("language {lang} has no words; omitted")));
            continue;
        }
        report.per_language.insert(
            lang,
            LangFertility {
                tokens,
                words,
                fertility: tokens as f64 / words as f64,
            },
        );
    }
    report
}

pub fn fertility(tokenizer: &dyn TokenCount, corpus: &[Document]) -> FertilityReport {
    fertility_with(tokenizer, corpus, Exec::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> Vocabulary {
        Vocabulary::base(&DEFAULT_SPECIALS).unwrap()
    }

    #[test]
    fn plan_vocab_examples() {
        assert_eq!(plan_vocab(27_224).unwrap(), 27_264);
        assert_eq!(plan_vocab(42_200).unwrap(), 42_240);
        assert_eq!(plan_vocab(55_571).unwrap(), 55_616);
        assert_eq!(plan_vocab(64).unwrap(), 64);
        assert_eq!(plan_vocab(1).unwrap(), 64);
        assert!(plan_vocab(0).is_err());
    }

    #[test]
    fn fixture_fit_reproduces_predictions() {
        use crate::encoder::{EncoderConfig, EncoderPreset};
        let fit = AnchoredPowerFit::fixture();
        for (preset, want) in [
            (EncoderPreset::Tiny, 27_224),
            (EncoderPreset::Base, 42_200),
            (EncoderPreset::Large, 55_571),
        ] {
            let c = fixture_flops_budget(&EncoderConfig::preset(preset));
            assert_eq!(predict_optimal_vocab(c, FIXTURE_DATA_BUDGET, Some(&fit)).unwrap(), want);
        }
        assert!(predict_optimal_vocab(1e20, FIXTURE_DATA_BUDGET, None).is_err());
        assert!(predict_optimal_vocab(1e20, 1, Some(&fit)).is_err());
    }

    #[test]
    fn fit_is_monotone_in_budget() {
        let fit = AnchoredPowerFit::fixture();
        let mut prev = 0;
        for k in 0..40 {
            let c = 1e18 * 2f64.powi(k);
            let v = predict_optimal_vocab(c, FIXTURE_DATA_BUDGET, Some(&fit)).unwrap();
            let doubled = predict_optimal_vocab(2.0 * c, FIXTURE_DATA_BUDGET, Some(&fit)).unwrap();
            assert!(doubled >= v);
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn pretokenize_pieces() {
        let specials: Vec<String> = DEFAULT_SPECIALS.iter().map(|s| s.to_string()).collect();
        let p = pretokenize("Hei  maailma!\n\n[MASK]x   ", &specials);
        assert_eq!(
            p,
            vec![
                Piece::Bytes("Hei"),
                Piece::Spaces(1),
                Piece::Bytes(" maailma"),
                Piece::Bytes("!"),
                Piece::Bytes("\n\n"),
                Piece::Special(4),
                Piece::Bytes("x"),
                Piece::Spaces(3),
            ]
        );
    }

    #[test]
    fn encode_edge_cases() {
        let v = base();
        assert!(v.encode("").is_empty());
        assert_eq!(v.encode("[MASK]"), vec![v.special_id("[MASK]").unwrap()]);
        let text = "a".to_string() + &" ".repeat(40) + "b";
        let ids = v.encode(&text);
        assert_eq!(v.decode(&ids), text);
        // 39 spaces as runs 16 + 16 + 7, then " b"
        assert_eq!(ids.len(), 1 + 3 + 2);
        assert_eq!(v.decode(&v.encode("ääkköset ŋ ŧ 😀")), "ääkköset ŋ ŧ 😀");
    }

    #[test]
    fn first_merge_is_only_candidate() {
        let texts = vec!["aaaa"; 10];
        let v = bpe_train_with(&texts, base().base_size() + 1, &DEFAULT_SPECIALS, Exec::Sequential).unwrap();
        let merges: Vec<_> = v.merges().collect();
        assert_eq!(merges.len(), 1);
        assert_eq!(merges[0], (&Token::Bytes(b"a".to_vec()), &Token::Bytes(b"a".to_vec())));
    }

    #[test]
    fn ties_break_lexicographically() {
        let texts = vec!["cd ab", "cd ab"];
        let v = bpe_train_with(&texts, base().base_size() + 1, &DEFAULT_SPECIALS, Exec::Sequential).unwrap();
        let (l, r) = v.merges().next().unwrap();
        // " a"+"b"? no: pairs are (' ','a'),('a','b'),('c','d'); ' ' < 'a' < 'c'
        assert_eq!((l, r), (&Token::Bytes(b" ".to_vec()), &Token::Bytes(b"a".to_vec())));
    }

    #[test]
    fn target_too_small_is_config_error() {
        let err = bpe_train_with(&["abc"], 10, &DEFAULT_SPECIALS, Exec::Sequential).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(matches!(
            bpe_train_with(&[], 1000, &DEFAULT_SPECIALS, Exec::Sequential),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn specials_never_merged_or_split() {
        let texts = vec!["[MASK][MASK] x[SEP]y"; 20];
        let v = bpe_train_with(&texts, base().base_size() + 20, &DEFAULT_SPECIALS, Exec::Sequential).unwrap();
        for (l, r) in v.merges() {
            for t in [l, r] {
                if let Token::Bytes(b) = t {
                    assert!(!b.contains(&b'['), "merge touched special bytes: {b:?}");
                }
            }
        }
        let ids = v.encode("[MASK][MASK]");
        assert_eq!(ids, vec![4, 4]);
    }

    #[test]
    fn modes_produce_identical_vocabularies() {
        let texts: Vec<String> = (0..300).map(|i| format!("sana{} toinen{} kolmas", i % 17, i % 5)).collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let a = bpe_train_with(&refs, 400, &DEFAULT_SPECIALS, Exec::Sequential).unwrap();
        let b = bpe_train_with(&refs, 400, &DEFAULT_SPECIALS, Exec::Parallel).unwrap();
        assert_eq!(a.to_text(), b.to_text());
    }

    #[test]
    fn vocab_file_round_trip() {
        let texts = vec!["hello world, hello there\tok  ok\n", "väinö ja äiti"];
        let v = bpe_train_with(&texts, base().base_size() + 25, &DEFAULT_SPECIALS, Exec::Sequential).unwrap();
        let again = Vocabulary::from_text(&v.to_text()).unwrap();
        assert_eq!(again, v);
        assert!(Vocabulary::from_text("nope\n").is_err());
        assert!(Vocabulary::from_text("#bpe-vocab v1\nzz qq\n").is_err());
    }

    #[test]
    fn whitespace_fertility_is_one_on_single_words() {
        use crate::mixture::Document;
        let docs: Vec<Document> = ["yksi", "kaksi", "kolme"]
            .iter()
            .map(|w| Document::new(*w, Lang::Fin, *w, "t", &WhitespaceTokenizer))
            .collect();
        let r = fertility(&WhitespaceTokenizer, &docs);
        assert_eq!(r.per_language[&Lang::Fin].fertility, 1.0);
    }

    #[test]
    fn wordless_language_is_omitted() {
        use crate::mixture::Document;
        let docs = vec![
            Document::new("a", Lang::Fin, "sana", "t", &WhitespaceTokenizer),
            Document::new("b", Lang::Swe, "   ", "t", &WhitespaceTokenizer),
        ];
        let r = fertility(&base(), &docs);
        assert!(r.per_language.contains_key(&Lang::Fin));
        assert!(!r.per_language.contains_key(&Lang::Swe));
        assert_eq!(r.warnings.len(), 1);
    }
}
