//! Byte-level BPE tokenizer with T5-style control and sentinel tokens.
//!
//! Id layout: `<pad>`=0, `</s>`=1, `<unk>`=2, then the base byte alphabet,
//! then learned merges in the order they were learned, and finally the 100
//! sentinels at the top of the range (`<extra_id_0>` has the largest id).
//!
//! Whitespace rule: text is normalized by collapsing every whitespace run to a
//! single space, trimming both ends, and surrounding each control or sentinel
//! literal with single spaces. Every word is encoded with a leading space byte
//! as its word-boundary marker; decoding drops the one leading space of the
//! result. `decode(encode(t)) == normalize(t)` for text whose bytes are all in
//! the alphabet, and `normalize` is idempotent.
//!
//! Encoding repeatedly merges the adjacent pair whose concatenation is the
//! vocabulary entry with the smallest id, so the vocabulary file alone fully
//! determines the tokenizer.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
pub const UNK_ID: u32 = 2;
pub const NUM_SENTINELS: usize = 100;
pub const NUM_RESERVED: usize = 3 + NUM_SENTINELS;
pub const DEFAULT_VOCAB_SIZE: usize = 32000;

const PAD: &str = "<pad>";
const EOS: &str = "</s>";
const UNK: &str = "<unk>";
const HEADER: &str = "memt5-vocab";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
enum Token {
    Special(String),
    Bytes(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<Token>,
    by_bytes: HashMap<Vec<u8>, u32>,
}

fn sentinel_literal(k: usize) -> String {
    format!("<extra_id_{k}>")
}

/// Parses a control/sentinel literal at the start of `s`, returning its
/// length in bytes and the sentinel index (or `None` for pad/eos/unk).
fn special_prefix(s: &str) -> Option<(usize, SpecialKind)> {
    for (lit, kind) in [
        (PAD, SpecialKind::Pad),
        (EOS, SpecialKind::Eos),
        (UNK, SpecialKind::Unk),
    ] {
        if s.starts_with(lit) {
            return Some((lit.len(), kind));
        }
    }
    let rest = s.strip_prefix("<extra_id_")?;
    let digits = rest.bytes().take_while(u8::is_ascii_digit).count();
    if digits == 0 || digits > 2 || rest.as_bytes().get(digits) != Some(&b'>') {
        return None;
    }
    let k: usize = rest[..digits].parse().ok()?;
    if k >= NUM_SENTINELS || (digits == 2 && rest.starts_with('0')) {
        return None;
    }
    Some(("<extra_id_".len() + digits + 1, SpecialKind::Sentinel(k)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum SpecialKind {
    Pad,
    Eos,
    Unk,
    Sentinel(usize),
}

enum Piece<'a> {
    Text(&'a str),
    Special(SpecialKind),
}

fn split_specials(text: &str) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < text.len() {
        if text.as_bytes()[i] == b'<' {
            if let Some((len, kind)) = special_prefix(&text[i..]) {
                if start < i {
                    out.push(Piece::Text(&text[start..i]));
                }
                out.push(Piece::Special(kind));
                i += len;
                start = i;
                continue;
            }
        }
        i += 1;
    }
    if start < text.len() {
        out.push(Piece::Text(&text[start..]));
    }
    out
}

/// Canonical form produced by `decode(encode(text))`.
pub fn normalize(text: &str) -> String {
    let mut words: Vec<String> = Vec::new();
    for piece in split_specials(text) {
        match piece {
            Piece::Text(t) => words.extend(t.split_whitespace().map(str::to_string)),
            Piece::Special(k) => words.push(special_text(k)),
        }
    }
    words.join(" ")
}

fn special_text(kind: SpecialKind) -> String {
    match kind {
        SpecialKind::Pad => PAD.to_string(),
        SpecialKind::Eos => EOS.to_string(),
        SpecialKind::Unk => UNK.to_string(),
        SpecialKind::Sentinel(k) => sentinel_literal(k),
    }
}

fn words_of(text: &str) -> impl Iterator<Item = Vec<u8>> + '_ {
    text.split_whitespace().map(|w| {
        let mut b = Vec::with_capacity(w.len() + 1);
        b.push(b' ');
        b.extend_from_slice(w.as_bytes());
        b
    })
}

#[derive(PartialEq, Eq)]
struct Candidate {
    count: u64,
    left: Vec<u8>,
    right: Vec<u8>,
    pair: (u32, u32),
}

impl Ord for Candidate {
    // Max-heap on count; ties go to the lexicographically smallest pair.
    fn cmp(&self, other: &Self) -> Ordering {
        self.count
            .cmp(&other.count)
            .then_with(|| other.left.cmp(&self.left))
            .then_with(|| other.right.cmp(&self.right))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Vocab {
    /// Learns a byte-level BPE vocabulary of exactly `vocab_size` entries.
    pub fn train<'a>(corpus: impl IntoIterator<Item = &'a str>, vocab_size: usize) -> Result<Self> {
        let mut word_counts: HashMap<Vec<u8>, u64> = HashMap::new();
        let mut total_chars = 0usize;
        for text in corpus {
            for piece in split_specials(text) {
                if let Piece::Text(t) = piece {
                    for w in words_of(t) {
                        total_chars += w.len();
                        *word_counts.entry(w).or_default() += 1;
                    }
                }
            }
        }
        if total_chars == 0 {
            return Err(Error::Tokenizer("training corpus is empty".into()));
        }

        let mut alphabet: Vec<u8> = (0x20..=0x7e).collect();
        let seen: HashSet<u8> = word_counts.keys().flatten().copied().collect();
        let mut extra: Vec<u8> = seen.into_iter().filter(|b| !(0x20..=0x7e).contains(b)).collect();
        extra.sort_unstable();
        alphabet.extend(extra);

        let floor = NUM_RESERVED + alphabet.len();
        if vocab_size < floor {
            return Err(Error::Config(format!(
                "vocab_size {vocab_size} is below the {floor} reserved and byte entries"
            )));
        }

        let mut tokens = vec![
            Token::Special(PAD.into()),
            Token::Special(EOS.into()),
            Token::Special(UNK.into()),
        ];
        let mut by_bytes: HashMap<Vec<u8>, u32> = HashMap::new();
        for &b in &alphabet {
            by_bytes.insert(vec![b], tokens.len() as u32);
            tokens.push(Token::Bytes(vec![b]));
        }

        // Sort words so every pass over them is in a fixed order.
        let mut sorted: Vec<(Vec<u8>, u64)> = word_counts.into_iter().collect();
        sorted.sort();
        let mut words: Vec<(Vec<u32>, u64)> = sorted
            .into_iter()
            .map(|(w, c)| (w.iter().map(|b| by_bytes[&vec![*b]]).collect(), c))
            .collect();

        let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
        let mut where_: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
        for (i, (syms, c)) in words.iter().enumerate() {
            for p in syms.windows(2) {
                *pair_counts.entry((p[0], p[1])).or_default() += c;
                where_.entry((p[0], p[1])).or_default().insert(i);
            }
        }
        let bytes_of = |tokens: &[Token], id: u32| match &tokens[id as usize] {
            Token::Bytes(b) => b.clone(),
            Token::Special(_) => unreachable!("merges only involve byte tokens"),
        };
        let mut heap: BinaryHeap<Candidate> = pair_counts
            .iter()
            .map(|(&pair, &count)| Candidate {
                count,
                left: bytes_of(&tokens, pair.0),
                right: bytes_of(&tokens, pair.1),
                pair,
            })
            .collect();

        let target_learned = vocab_size - NUM_SENTINELS;
        while tokens.len() < target_learned {
            let Some(top) = heap.pop() else {
                return Err(Error::CorpusTooSmall {
                    achieved: tokens.len() + NUM_SENTINELS,
                    requested: vocab_size,
                });
            };
            let current = pair_counts.get(&top.pair).copied().unwrap_or(0);
            if current != top.count {
                if current > 0 {
                    heap.push(Candidate { count: current, ..top });
                }
                continue;
            }
            if current == 0 {
                continue;
            }
            let mut merged = top.left.clone();
            merged.extend_from_slice(&top.right);
            let new_id = match by_bytes.get(&merged) {
                Some(&id) => id,
                None => {
                    let id = tokens.len() as u32;
                    by_bytes.insert(merged.clone(), id);
                    tokens.push(Token::Bytes(merged));
                    id
                }
            };
            let mut affected: Vec<usize> = where_
                .remove(&top.pair)
                .unwrap_or_default()
                .into_iter()
                .collect();
            affected.sort_unstable();
            let mut grown: HashSet<(u32, u32)> = HashSet::new();
            for wi in affected {
                let (syms, c) = &mut words[wi];
                let c = *c;
                for p in syms.windows(2) {
                    if let Some(v) = pair_counts.get_mut(&(p[0], p[1])) {
                        *v -= c;
                    }
                }
                let mut next = Vec::with_capacity(syms.len());
                let mut j = 0;
                while j < syms.len() {
                    if j + 1 < syms.len() && (syms[j], syms[j + 1]) == top.pair {
                        next.push(new_id);
                        j += 2;
                    } else {
                        next.push(syms[j]);
                        j += 1;
                    }
                }
                *syms = next;
                for p in syms.windows(2) {
                    let key = (p[0], p[1]);
                    *pair_counts.entry(key).or_default() += c;
                    where_.entry(key).or_default().insert(wi);
                    grown.insert(key);
                }
            }
            pair_counts.retain(|_, v| *v > 0);
            let mut grown: Vec<(u32, u32)> = grown.into_iter().collect();
            grown.sort_unstable();
            for pair in grown {
                if let Some(&count) = pair_counts.get(&pair) {
                    heap.push(Candidate {
                        count,
                        left: bytes_of(&tokens, pair.0),
                        right: bytes_of(&tokens, pair.1),
                        pair,
                    });
                }
            }
        }
        for k in (0..NUM_SENTINELS).rev() {
            tokens.push(Token::Special(sentinel_literal(k)));
        }
        Ok(Vocab { tokens, by_bytes })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `<extra_id_k>`; sentinels count down from the top of the range.
    pub fn sentinel_id(&self, k: usize) -> u32 {
        assert!(k < NUM_SENTINELS);
        (self.tokens.len() - 1 - k) as u32
    }

    pub fn is_sentinel(&self, id: u32) -> bool {
        (id as usize) < self.tokens.len() && (id as usize) >= self.tokens.len() - NUM_SENTINELS
    }

    fn special_id(&self, kind: SpecialKind) -> u32 {
        match kind {
            SpecialKind::Pad => PAD_ID,
            SpecialKind::Eos => EOS_ID,
            SpecialKind::Unk => UNK_ID,
            SpecialKind::Sentinel(k) => self.sentinel_id(k),
        }
    }

    pub fn token_to_id(&self, token: &str) -> Option<u32> {
        if let Some((len, kind)) = special_prefix(token) {
            if len == token.len() {
                return Some(self.special_id(kind));
            }
        }
        self.by_bytes.get(token.as_bytes()).copied()
    }

    fn encode_word(&self, word: &[u8], out: &mut Vec<u32>) {
        let mut syms: Vec<Option<u32>> = word
            .iter()
            .map(|b| self.by_bytes.get(std::slice::from_ref(b)).copied())
            .collect();
        let mut pieces: Vec<Vec<u8>> = word.iter().map(|&b| vec![b]).collect();
        loop {
            let mut best: Option<(u32, usize)> = None;
            for j in 0..syms.len().saturating_sub(1) {
                if syms[j].is_none() || syms[j + 1].is_none() {
                    continue;
                }
                let mut cat = pieces[j].clone();
                cat.extend_from_slice(&pieces[j + 1]);
                if let Some(&id) = self.by_bytes.get(&cat) {
                    if best.is_none_or(|(b, _)| id < b) {
                        best = Some((id, j));
                    }
                }
            }
            let Some((id, j)) = best else { break };
            let right = pieces.remove(j + 1);
            pieces[j].extend_from_slice(&right);
            syms.remove(j + 1);
            syms[j] = Some(id);
        }
        out.extend(syms.into_iter().map(|s| s.unwrap_or(UNK_ID)));
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for piece in split_specials(text) {
            match piece {
                Piece::Text(t) => {
                    for w in words_of(t) {
                        self.encode_word(&w, &mut out);
                    }
                }
                Piece::Special(kind) => out.push(self.special_id(kind)),
            }
        }
        out
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            match self.tokens.get(id as usize) {
                Some(Token::Bytes(b)) => bytes.extend_from_slice(b),
                Some(Token::Special(s)) => {
                    bytes.push(b' ');
                    bytes.extend_from_slice(s.as_bytes());
                }
                None => {
                    return Err(Error::IdOutOfRange {
                        id,
                        size: self.tokens.len(),
                    })
                }
            }
        }
        let text = String::from_utf8_lossy(&bytes);
        Ok(text.strip_prefix(' ').unwrap_or(&text).to_string())
    }

    /// Decodes up to (excluding) the first `</s>`, skipping padding.
    pub fn decode_until_eos(&self, ids: &[u32]) -> Result<String> {
        let end = ids.iter().position(|&i| i == EOS_ID).unwrap_or(ids.len());
        let kept: Vec<u32> = ids[..end].iter().copied().filter(|&i| i != PAD_ID).collect();
        self.decode(&kept)
    }

    pub fn to_file_string(&self) -> String {
        let mut s = format!("{HEADER} {FORMAT_VERSION} {}\n", self.tokens.len());
        for t in &self.tokens {
            match t {
                Token::Special(lit) => s.push_str(lit),
                Token::Bytes(b) => {
                    for &c in b {
                        match c {
                            b'\\' => s.push_str("\\\\"),
                            b'<' => s.push_str("\\x3c"),
                            0x20..=0x7e => s.push(c as char),
                            _ => {
                                let _ = write!(s, "\\x{c:02x}");
                            }
                        }
                    }
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        let bad = |line: usize, why: &str| Error::Tokenizer(format!("vocab line {line}: {why}"));
        let mut lines = text.split('\n');
        let header = lines.next().unwrap_or_default();
        let parts: Vec<&str> = header.split(' ').collect();
        if parts.len() != 3 || parts[0] != HEADER {
            return Err(bad(0, "missing header"));
        }
        if parts[1] != FORMAT_VERSION.to_string() {
            return Err(bad(0, "unsupported version"));
        }
        let size: usize = parts[2].parse().map_err(|_| bad(0, "bad size"))?;
        let mut tokens = Vec::with_capacity(size);
        let mut by_bytes = HashMap::new();
        for (i, line) in lines.enumerate().take(size) {
            if line.starts_with('<') {
                let Some((len, _)) = special_prefix(line).filter(|(l, _)| *l == line.len()) else {
                    return Err(bad(i + 1, "unknown control token"));
                };
                tokens.push(Token::Special(line[..len].to_string()));
                continue;
            }
            let raw = line.as_bytes();
            let mut b = Vec::with_capacity(raw.len());
            let mut j = 0;
            while j < raw.len() {
                if raw[j] == b'\\' {
                    match raw.get(j + 1) {
                        Some(b'\\') => {
                            b.push(b'\\');
                            j += 2;
                        }
                        Some(b'x') if j + 4 <= raw.len() => {
                            let hex = std::str::from_utf8(&raw[j + 2..j + 4])
                                .ok()
                                .and_then(|h| u8::from_str_radix(h, 16).ok())
                                .ok_or_else(|| bad(i + 1, "bad escape"))?;
                            b.push(hex);
                            j += 4;
                        }
                        _ => return Err(bad(i + 1, "bad escape")),
                    }
                } else {
                    b.push(raw[j]);
                    j += 1;
                }
            }
            if b.is_empty() || by_bytes.insert(b.clone(), tokens.len() as u32).is_some() {
                return Err(bad(i + 1, "empty or duplicate token"));
            }
            tokens.push(Token::Bytes(b));
        }
        if tokens.len() != size {
            return Err(bad(tokens.len() + 1, "file shorter than declared size"));
        }
        let vocab = Vocab { tokens, by_bytes };
        let expected_prefix = [PAD, EOS, UNK];
        for (i, lit) in expected_prefix.iter().enumerate() {
            if vocab.tokens[i] != Token::Special(lit.to_string()) {
                return Err(bad(i + 1, "reserved ids out of place"));
            }
        }
        for k in 0..NUM_SENTINELS {
            if vocab.tokens[vocab.sentinel_id(k) as usize] != Token::Special(sentinel_literal(k)) {
                return Err(bad(vocab.sentinel_id(k) as usize + 1, "sentinel out of place"));
            }
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file_string(&text)
    }

    /// CRC32 of the serialized vocabulary; recorded in checkpoints.
    pub fn fingerprint(&self) -> u32 {
        crc32fast::hash(self.to_file_string().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_corpus() -> String {
        "the quick brown fox jumps over the lazy dog. the dog sleeps; the fox runs! "
            .repeat(20)
    }

    fn small_vocab() -> Vocab {
        Vocab::train([small_corpus().as_str()], 230).unwrap()
    }

    #[test]
    fn first_merge_is_the_most_frequent_pair() {
        // " aaaa" twice: (a,a) occurs 6 times, (" ",a) twice.
        let v = Vocab::train(["aaaa aaaa"], NUM_RESERVED + 95 + 1).unwrap();
        let first_merge = NUM_RESERVED - NUM_SENTINELS + 95;
        assert_eq!(v.token_to_id("aa"), Some(first_merge as u32));
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(matches!(Vocab::train([""], 300), Err(Error::Tokenizer(_))));
        assert!(matches!(Vocab::train(["   \n"], 300), Err(Error::Tokenizer(_))));
    }

    #[test]
    fn too_small_corpus_reports_achievable_size() {
        match Vocab::train(["ab"], 1000) {
            Err(Error::CorpusTooSmall {
                achieved,
                requested,
            }) => {
                assert_eq!(requested, 1000);
                // " ab" allows two merges.
                assert_eq!(achieved, NUM_RESERVED + 95 + 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn reserved_tokens_present() {
        let v = small_vocab();
        assert_eq!(v.len(), 230);
        assert_eq!(v.token_to_id("<pad>"), Some(PAD_ID));
        assert_eq!(v.token_to_id("</s>"), Some(EOS_ID));
        assert_eq!(v.token_to_id("<unk>"), Some(UNK_ID));
        for k in 0..NUM_SENTINELS {
            assert_eq!(v.token_to_id(&format!("<extra_id_{k}>")), Some(229 - k as u32));
        }
    }

    #[test]
    fn encode_decode_examples() {
        let v = small_vocab();
        assert!(v.encode("").is_empty());
        assert_eq!(v.decode(&v.encode("hello world")).unwrap(), "hello world");
        assert_eq!(v.encode("<extra_id_0>"), vec![v.sentinel_id(0)]);
        assert_eq!(
            v.decode(&v.encode("a  <extra_id_3>b\n</s>")).unwrap(),
            "a <extra_id_3> b </s>"
        );
        assert!(matches!(
            v.decode(&[230]),
            Err(Error::IdOutOfRange { id: 230, size: 230 })
        ));
    }

    #[test]
    fn unseen_bytes_map_to_unk() {
        let v = small_vocab();
        let ids = v.encode("é");
        assert!(ids.contains(&UNK_ID));
    }

    #[test]
    fn training_is_deterministic() {
        let a = small_vocab();
        let b = small_vocab();
        assert_eq!(a.to_file_string(), b.to_file_string());
    }

    #[test]
    fn file_roundtrip() {
        let v = Vocab::train(["naïve \\ café <tag> x<y"], NUM_RESERVED + 100 + 8).unwrap();
        let text = v.to_file_string();
        let back = Vocab::from_file_string(&text).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.to_file_string(), text);
        assert!(Vocab::from_file_string("bogus\n").is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_ascii(s in "[ -~\t\n]{0,60}") {
            let v = small_vocab();
            let n = normalize(&s);
            prop_assert_eq!(v.decode(&v.encode(&s)).unwrap(), n.clone());
            prop_assert_eq!(normalize(&n), n);
        }
    }
}
