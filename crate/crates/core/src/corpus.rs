//! Byte-level tokenizer with optional greedy pair merges, document splitting and packing
//! into fixed-length sequences.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::io::{Read, Write};

use crate::embedding::TokenId;
use crate::error::{Error, Result};

pub const BYTE_TOKENS: usize = 256;
pub const SPECIAL_NAMES: [&str; 3] = ["<eod>", "<pad>", "<mask>"];
pub const BASE_VOCAB: usize = BYTE_TOKENS + SPECIAL_NAMES.len();
pub const EOD: TokenId = 256;
pub const PAD: TokenId = 257;
pub const MASK: TokenId = 258;
pub const VALIDATION_FRACTION: f64 = 0.05;

const DATASET_MAGIC: &[u8; 4] = b"PLDS";
const DATASET_VERSION: u32 = 1;
const VOCAB_HEADER: &str = "plaid-vocab 1";

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Token {
    Bytes(Vec<u8>),
    Special(&'static str),
}

/// Dense id to token bijection. Ids `0..256` are bytes, `256..259` specials, and any
/// further ids are merges in the order they were learned.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<Token>,
    merges: Vec<(TokenId, TokenId)>,
}

impl Vocabulary {
    pub fn byte_level() -> Self {
        let mut tokens: Vec<Token> = (0..=255u8).map(|b| Token::Bytes(vec![b])).collect();
        tokens.extend(SPECIAL_NAMES.iter().map(|s| Token::Special(s)));
        Self { tokens, merges: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn eod(&self) -> TokenId {
        EOD
    }

    pub fn token(&self, id: TokenId) -> Option<&Token> {
        self.tokens.get(id as usize)
    }

    pub fn merges(&self) -> &[(TokenId, TokenId)] {
        &self.merges
    }

    /// Id of a token's byte string, if present.
    pub fn id_of(&self, bytes: &[u8]) -> Option<TokenId> {
        if bytes.len() == 1 {
            return Some(bytes[0] as TokenId);
        }
        self.tokens.iter().position(|t| matches!(t, Token::Bytes(b) if b == bytes)).map(|i| i as TokenId)
    }

    fn push_merge(&mut self, a: TokenId, b: TokenId) {
        let mut bytes = self.bytes_of(a).to_vec();
        bytes.extend_from_slice(self.bytes_of(b));
        self.tokens.push(Token::Bytes(bytes));
        self.merges.push((a, b));
    }

    fn bytes_of(&self, id: TokenId) -> &[u8] {
        match &self.tokens[id as usize] {
            Token::Bytes(b) => b,
            Token::Special(s) => s.as_bytes(),
        }
    }

    /// Applies the learned merges in order.
    pub fn encode(&self, bytes: &[u8]) -> Vec<TokenId> {
        let mut ids: Vec<TokenId> = bytes.iter().map(|&b| b as TokenId).collect();
        for (k, &(a, b)) in self.merges.iter().enumerate() {
            ids = merge_pair(&ids, a, b, (BASE_VOCAB + k) as TokenId);
        }
        ids
    }

    /// Concatenated token bytes; specials render as their names.
    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            if id as usize >= self.len() {
                return Err(Error::TokenRange { id: id as usize, vocab: self.len() });
            }
            out.extend_from_slice(self.bytes_of(id));
        }
        Ok(out)
    }

    /// Decoding for display: end-of-document becomes a blank line, other specials vanish.
    pub fn render(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = Vec::new();
        for &id in ids {
            match self.token(id) {
                None => return Err(Error::TokenRange { id: id as usize, vocab: self.len() }),
                Some(Token::Special(_)) if id == EOD => out.extend_from_slice(b"\n\n"),
                Some(Token::Special(_)) => {}
                Some(Token::Bytes(b)) => out.extend_from_slice(b),
            }
        }
        Ok(String::from_utf8_lossy(&out).into_owned())
    }

    /// Line-oriented serialization: ordered, one token per line.
    pub fn to_text(&self) -> String {
        let mut s = format!("{VOCAB_HEADER}\n");
        for (id, t) in self.tokens.iter().enumerate() {
            match t {
                Token::Special(name) => {
                    let _ = writeln!(s, "special {name}");
                }
                Token::Bytes(b) if id < BYTE_TOKENS => {
                    let _ = writeln!(s, "byte {:02x}", b[0]);
                }
                Token::Bytes(_) => {
                    let (a, b) = self.merges[id - BASE_VOCAB];
                    let _ = writeln!(s, "merge {a} {b}");
                }
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(VOCAB_HEADER) {
            return Err(Error::Format("missing vocabulary header".into()));
        }
        let mut vocab = Self { tokens: Vec::new(), merges: Vec::new() };
        for (i, line) in lines.enumerate() {
            let bad = || Error::Format(format!("vocabulary line {}: {line:?}", i + 2));
            let (kind, rest) = line.split_once(' ').ok_or_else(bad)?;
            let expected = vocab.tokens.len();
            match kind {
                "byte" if expected < BYTE_TOKENS => {
                    let b = u8::from_str_radix(rest, 16).map_err(|_| bad())?;
                    if b as usize != expected {
                        return Err(bad());
                    }
                    vocab.tokens.push(Token::Bytes(vec![b]));
                }
                "special" if (BYTE_TOKENS..BASE_VOCAB).contains(&expected) => {
                    if rest != SPECIAL_NAMES[expected - BYTE_TOKENS] {
                        return Err(bad());
                    }
                    vocab.tokens.push(Token::Special(SPECIAL_NAMES[expected - BYTE_TOKENS]));
                }
                "merge" if expected >= BASE_VOCAB => {
                    let (a, b) = rest.split_once(' ').ok_or_else(bad)?;
                    let a: TokenId = a.parse().map_err(|_| bad())?;
                    let b: TokenId = b.parse().map_err(|_| bad())?;
                    let ok = |x: TokenId| (x as usize) < expected && !matches!(vocab.tokens[x as usize], Token::Special(_));
                    if !ok(a) || !ok(b) {
                        return Err(bad());
                    }
                    vocab.push_merge(a, b);
                }
                _ => return Err(bad()),
            }
        }
        if vocab.tokens.len() < BASE_VOCAB {
            return Err(Error::Format(format!("vocabulary has {} tokens; need at least {BASE_VOCAB}", vocab.tokens.len())));
        }
        Ok(vocab)
    }
}

fn merge_pair(ids: &[TokenId], a: TokenId, b: TokenId, new: TokenId) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && ids[i] == a && ids[i + 1] == b {
            out.push(new);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    out
}

/// Byte-level vocabulary extended by greedy most-frequent-pair merges until it has
/// `target_size` tokens. Pair counts are taken within documents; ties go to the
/// smallest pair. Stops early when no pair occurs twice.
pub fn build_vocab(corpus: &[u8], target_size: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::Input("empty corpus".into()));
    }
    if target_size < BASE_VOCAB {
        return Err(Error::Config(format!("vocabulary size {target_size} below the byte-level base of {BASE_VOCAB}")));
    }
    let mut vocab = Vocabulary::byte_level();
    let mut docs: Vec<Vec<TokenId>> = split_documents(corpus).iter().map(|d| vocab.encode(d)).collect();
    let mut known: HashSet<Vec<u8>> = HashSet::new();
    while vocab.len() < target_size {
        let mut counts: HashMap<(TokenId, TokenId), usize> = HashMap::new();
        for d in &docs {
            let mut i = 0;
            while i + 1 < d.len() {
                *counts.entry((d[i], d[i + 1])).or_default() += 1;
                // "aaa" holds one non-overlapping (a, a), matching what a merge replaces
                if i + 2 < d.len() && d[i] == d[i + 1] && d[i + 1] == d[i + 2] {
                    i += 2;
                } else {
                    i += 1;
                }
            }
        }
        let best = counts
            .into_iter()
            .filter(|&((a, b), _)| {
                let mut s = vocab.bytes_of(a).to_vec();
                s.extend_from_slice(vocab.bytes_of(b));
                !known.contains(&s)
            })
            .max_by(|x, y| x.1.cmp(&y.1).then(y.0.cmp(&x.0)));
        let Some(((a, b), n)) = best else { break };
        if n < 2 && !vocab.merges.is_empty() {
            break;
        }
        let new = vocab.len() as TokenId;
        vocab.push_merge(a, b);
        if let Some(Token::Bytes(s)) = vocab.tokens.last() {
            known.insert(s.clone());
        }
        for d in &mut docs {
            *d = merge_pair(d, a, b, new);
        }
    }
    Ok(vocab)
}

/// Documents are maximal runs of non-blank lines.
pub fn split_documents(text: &[u8]) -> Vec<Vec<u8>> {
    let mut docs = Vec::new();
    let mut cur: Vec<u8> = Vec::new();
    for line in text.split(|&b| b == b'\n') {
        if line.iter().all(|b| b.is_ascii_whitespace()) {
            if !cur.is_empty() {
                docs.push(std::mem::take(&mut cur));
            }
        } else {
            if !cur.is_empty() {
                cur.push(b'\n');
            }
            cur.extend_from_slice(line);
        }
    }
    if !cur.is_empty() {
        docs.push(cur);
    }
    docs
}

/// Number of trailing documents held out for validation.
pub fn validation_count(documents: usize) -> usize {
    if documents < 2 {
        0
    } else {
        ((documents as f64 * VALIDATION_FRACTION).ceil() as usize).min(documents - 1)
    }
}

/// Encodes documents into one stream with an end-of-document id after each.
pub fn encode_documents(vocab: &Vocabulary, docs: &[Vec<u8>]) -> Vec<TokenId> {
    let mut out = Vec::new();
    for d in docs {
        out.extend(vocab.encode(d));
        out.push(vocab.eod());
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

impl Split {
    fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Validation => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedDataset {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub split: Split,
    /// Tokens left over after the last full sequence.
    pub dropped: usize,
    tokens: Vec<TokenId>,
}

/// Non-overlapping consecutive sequences of `seq_len`; the partial tail is dropped.
pub fn pack_sequences(stream: &[TokenId], seq_len: usize, vocab_size: usize, split: Split) -> Result<PackedDataset> {
    if seq_len == 0 {
        return Err(Error::Config("seq_len must be positive".into()));
    }
    if stream.len() < seq_len {
        return Err(Error::Input(format!("stream of {} tokens is shorter than seq_len {seq_len}", stream.len())));
    }
    if let Some(&bad) = stream.iter().find(|&&t| t as usize >= vocab_size) {
        return Err(Error::TokenRange { id: bad as usize, vocab: vocab_size });
    }
    let n = stream.len() / seq_len;
    Ok(PackedDataset { vocab_size, seq_len, split, dropped: stream.len() - n * seq_len, tokens: stream[..n * seq_len].to_vec() })
}

impl PackedDataset {
    pub fn num_sequences(&self) -> usize {
        self.tokens.len() / self.seq_len
    }

    pub fn sequence(&self, i: usize) -> &[TokenId] {
        &self.tokens[i * self.seq_len..(i + 1) * self.seq_len]
    }

    pub fn sequences(&self) -> impl Iterator<Item = &[TokenId]> {
        self.tokens.chunks_exact(self.seq_len)
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(33 + 4 * self.tokens.len());
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.vocab_size as u32).to_le_bytes());
        out.extend_from_slice(&(self.seq_len as u32).to_le_bytes());
        out.push(self.split.code());
        out.extend_from_slice(&(self.num_sequences() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dropped as u64).to_le_bytes());
        for t in &self.tokens {
            out.extend_from_slice(&t.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| Error::Format("truncated dataset header".into()))?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format("not a packed dataset".into()));
        }
        let u32_at = |r: &mut &[u8]| -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| Error::Format("truncated dataset header".into()))?;
            Ok(u32::from_le_bytes(b))
        };
        let u64_at = |r: &mut &[u8]| -> Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|_| Error::Format("truncated dataset header".into()))?;
            Ok(u64::from_le_bytes(b))
        };
        let version = u32_at(&mut r)?;
        if version != DATASET_VERSION {
            return Err(Error::Version { found: version, expected: DATASET_VERSION });
        }
        let vocab_size = u32_at(&mut r)? as usize;
        let seq_len = u32_at(&mut r)? as usize;
        let mut code = [0u8; 1];
        r.read_exact(&mut code).map_err(|_| Error::Format("truncated dataset header".into()))?;
        let split = match code[0] {
            0 => Split::Train,
            1 => Split::Validation,
            c => return Err(Error::Format(format!("unknown split code {c}"))),
        };
        let count = u64_at(&mut r)? as usize;
        let dropped = u64_at(&mut r)? as usize;
        if seq_len == 0 || r.len() != 4 * count * seq_len {
            return Err(Error::Format(format!("dataset body has {} bytes; header promises {count} x {seq_len} tokens", r.len())));
        }
        let tokens: Vec<TokenId> = r.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::TokenRange { id: bad as usize, vocab: vocab_size });
        }
        Ok(Self { vocab_size, seq_len, split, dropped, tokens })
    }

    pub fn save(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(r: &mut impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

/// Vocabulary plus train and validation packings of one corpus.
#[derive(Clone, Debug)]
pub struct TokenizedCorpus {
    pub vocab: Vocabulary,
    pub train: PackedDataset,
    pub validation: PackedDataset,
    pub documents: usize,
    pub validation_documents: usize,
    /// Raw bytes of the validation documents, for bits-per-character.
    pub validation_chars: usize,
}

/// Splits into documents, holds out the final ones for validation and packs both sides.
/// The vocabulary is learned on the training documents only.
pub fn tokenize_corpus(corpus: &[u8], target_size: usize, seq_len: usize) -> Result<TokenizedCorpus> {
    let docs = split_documents(corpus);
    if docs.is_empty() {
        return Err(Error::Input("corpus contains no documents".into()));
    }
    let n_val = validation_count(docs.len());
    let (train_docs, val_docs) = docs.split_at(docs.len() - n_val);
    let joined: Vec<u8> = train_docs.join(&b"\n\n"[..]);
    let vocab = build_vocab(&joined, target_size)?;
    let train = pack_sequences(&encode_documents(&vocab, train_docs), seq_len, vocab.len(), Split::Train)?;
    let val_stream = encode_documents(&vocab, val_docs);
    let validation = pack_sequences(&val_stream, seq_len, vocab.len(), Split::Validation)?;
    let kept = validation.tokens.len();
    // bytes represented by the packed validation tokens; end-of-document counts as one
    let validation_chars =
        val_stream[..kept].iter().map(|&t| if t >= EOD && t < BASE_VOCAB as TokenId { 1 } else { vocab.bytes_of(t).len() }).sum();
    Ok(TokenizedCorpus { vocab, train, validation, documents: docs.len(), validation_documents: n_val, validation_chars })
}
