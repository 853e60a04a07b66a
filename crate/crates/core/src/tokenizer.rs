//! Character-level BPE over symbol strings.
//!
//! The synthetic language has no word boundaries, so merges are learned
//! over whole lines. Ids `0..5` are reserved for special tokens, the base
//! alphabet follows in alphabet order, and every learned merge that yields
//! a new string appends one id.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::quantizer::Alphabet;

pub const BOS: u32 = 0;
pub const PAD: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const MASK: u32 = 4;
pub const SPECIAL_TOKENS: [&str; 5] = ["<s>", "<pad>", "</s>", "<unk>", "<mask>"];
pub const NUM_SPECIALS: usize = SPECIAL_TOKENS.len();

pub const DEFAULT_VOCAB_SIZE: usize = 52_000;
pub const MAX_SEQ_LEN: usize = 512;

const FILE_MAGIC: &str = "HBT v1";

pub fn is_special(id: u32) -> bool {
    (id as usize) < NUM_SPECIALS
}

type Pair = (u32, u32);

#[derive(Debug, Clone, PartialEq)]
pub struct BpeTokenizer {
    /// Token strings by id; the first `NUM_SPECIALS` entries are the specials.
    tokens: Vec<String>,
    /// Non-special token string to id.
    vocab: HashMap<String, u32>,
    merges: Vec<(String, String)>,
    ranks: HashMap<Pair, (usize, u32)>,
    alphabet: Alphabet,
    max_seq_len: usize,
}

/// Token ids of one sequence with its attention mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedSequence {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
    /// The body was cut to fit `max_seq_len`.
    pub overflow: bool,
}

impl TokenizedSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of non-pad positions.
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    /// Wraps already-segmented body ids with BOS/EOS.
    pub fn from_body(body: &[u32], max_seq_len: usize) -> Self {
        let keep = body.len().min(max_seq_len.saturating_sub(2));
        let mut ids = Vec::with_capacity(keep + 2);
        ids.push(BOS);
        ids.extend_from_slice(&body[..keep]);
        ids.push(EOS);
        let attention_mask = vec![1; ids.len()];
        Self {
            ids,
            attention_mask,
            overflow: keep < body.len(),
        }
    }

    pub fn pad_to(&mut self, len: usize) {
        while self.ids.len() < len {
            self.ids.push(PAD);
            self.attention_mask.push(0);
        }
    }
}

/// Character-length statistics over the learned (non-special) vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenStats {
    pub min_len: usize,
    pub max_len: usize,
    pub mean_len: f64,
    /// Token count per character length.
    pub histogram: BTreeMap<usize, usize>,
}

#[derive(Debug, PartialEq, Eq)]
struct Candidate {
    count: u64,
    concat: String,
    left: String,
    pair: Pair,
}

impl Ord for Candidate {
    // Highest count first; ties go to the lexicographically smallest
    // concatenation, then the smallest left part.
    fn cmp(&self, other: &Self) -> Ordering {
        self.count
            .cmp(&other.count)
            .then_with(|| other.concat.cmp(&self.concat))
            .then_with(|| other.left.cmp(&self.left))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

const NIL: u32 = u32::MAX;

/// Doubly linked symbol list over the whole corpus; lines are separated by
/// `NIL` links so pairs never cross a line boundary.
struct Corpus {
    sym: Vec<u32>,
    prev: Vec<u32>,
    next: Vec<u32>,
    alive: Vec<bool>,
}

struct PairIndex {
    counts: HashMap<Pair, u64>,
    positions: HashMap<Pair, Vec<u32>>,
}

impl PairIndex {
    fn add(&mut self, pair: Pair, pos: u32) {
        *self.counts.entry(pair).or_insert(0) += 1;
        self.positions.entry(pair).or_default().push(pos);
    }

    fn remove(&mut self, pair: Pair) {
        if let Some(c) = self.counts.get_mut(&pair) {
            *c = c.saturating_sub(1);
        }
    }
}

impl BpeTokenizer {
    /// Learns merges greedily until the vocabulary reaches `vocab_size` or no
    /// adjacent pair occurs at least twice.
    pub fn train<'a, I>(corpus: I, alphabet: &Alphabet, vocab_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let base = NUM_SPECIALS + alphabet.len();
        if vocab_size < base {
            return Err(Error::Parameter(format!(
                "vocab size {vocab_size} is below specials + alphabet = {base}"
            )));
        }
        let mut tok = Self::base(alphabet.clone());

        let mut corpus_links = Corpus {
            sym: Vec::new(),
            prev: Vec::new(),
            next: Vec::new(),
            alive: Vec::new(),
        };
        let mut lines = 0usize;
        for line in corpus {
            lines += 1;
            let start = corpus_links.sym.len() as u32;
            for (i, c) in line.chars().enumerate() {
                let id = tok.char_id(c)?;
                let pos = start + i as u32;
                corpus_links.sym.push(id);
                corpus_links.prev.push(if i == 0 { NIL } else { pos - 1 });
                corpus_links.next.push(pos + 1);
                corpus_links.alive.push(true);
            }
            if let Some(last) = corpus_links.next.last_mut() {
                if corpus_links.sym.len() as u32 > start {
                    *last = NIL;
                }
            }
        }
        if lines == 0 {
            return Err(Error::EmptyInput("tokenizer corpus has no lines".into()));
        }

        let mut index = PairIndex {
            counts: HashMap::new(),
            positions: HashMap::new(),
        };
        for pos in 0..corpus_links.sym.len() {
            let nx = corpus_links.next[pos];
            if nx != NIL {
                index.add((corpus_links.sym[pos], corpus_links.sym[nx as usize]), pos as u32);
            }
        }
        let mut heap: BinaryHeap<Candidate> = index
            .counts
            .iter()
            .filter(|(_, &c)| c >= 2)
            .map(|(&pair, &count)| tok.candidate(pair, count))
            .collect();

        while tok.tokens.len() < vocab_size {
            let Some(best) = pop_valid(&mut heap, &index.counts) else {
                break;
            };
            let (a, b) = best.pair;
            let merged = tok.push_merge(a, b);

            let mut positions = index.positions.remove(&best.pair).unwrap_or_default();
            positions.sort_unstable();
            positions.dedup();
            let mut touched = Vec::new();
            let links = &mut corpus_links;
            for pos in positions {
                let p = pos as usize;
                if !links.alive[p] || links.sym[p] != a {
                    continue;
                }
                let nx = links.next[p];
                if nx == NIL || links.sym[nx as usize] != b {
                    continue;
                }
                let pv = links.prev[p];
                let nn = links.next[nx as usize];
                if pv != NIL {
                    let left = links.sym[pv as usize];
                    index.remove((left, a));
                    index.add((left, merged), pv);
                    touched.push((left, a));
                    touched.push((left, merged));
                }
                if nn != NIL {
                    let right = links.sym[nn as usize];
                    index.remove((b, right));
                    index.add((merged, right), pos);
                    touched.push((b, right));
                    touched.push((merged, right));
                }
                links.sym[p] = merged;
                links.alive[nx as usize] = false;
                links.next[p] = nn;
                if nn != NIL {
                    links.prev[nn as usize] = pos;
                }
            }
            index.counts.remove(&best.pair);
            touched.sort_unstable();
            touched.dedup();
            for pair in touched {
                if let Some(&count) = index.counts.get(&pair) {
                    if count >= 2 {
                        heap.push(tok.candidate(pair, count));
                    }
                }
            }
        }
        Ok(tok)
    }

    /// Specials plus one token per alphabet symbol, no merges.
    pub fn base(alphabet: Alphabet) -> Self {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut vocab = HashMap::new();
        for &c in alphabet.chars() {
            vocab.insert(c.to_string(), tokens.len() as u32);
            tokens.push(c.to_string());
        }
        Self {
            tokens,
            vocab,
            merges: Vec::new(),
            ranks: HashMap::new(),
            alphabet,
            max_seq_len: MAX_SEQ_LEN,
        }
    }

    /// Rebuilds a tokenizer by replaying `merges` over the base alphabet.
    pub fn from_merges(alphabet: Alphabet, merges: &[(String, String)]) -> Result<Self> {
        let mut tok = Self::base(alphabet);
        for (left, right) in merges {
            let a = *tok
                .vocab
                .get(left)
                .ok_or_else(|| Error::Format(format!("merge uses unknown token {left:?}")))?;
            let b = *tok
                .vocab
                .get(right)
                .ok_or_else(|| Error::Format(format!("merge uses unknown token {right:?}")))?;
            tok.push_merge(a, b);
        }
        Ok(tok)
    }

    fn push_merge(&mut self, a: u32, b: u32) -> u32 {
        let left = self.tokens[a as usize].clone();
        let right = self.tokens[b as usize].clone();
        let joined = format!("{left}{right}");
        let id = match self.vocab.get(&joined) {
            Some(&id) => id,
            None => {
                let id = self.tokens.len() as u32;
                self.tokens.push(joined.clone());
                self.vocab.insert(joined, id);
                id
            }
        };
        self.ranks.insert((a, b), (self.merges.len(), id));
        self.merges.push((left, right));
        id
    }

    fn candidate(&self, pair: Pair, count: u64) -> Candidate {
        let left = self.tokens[pair.0 as usize].clone();
        let concat = format!("{left}{}", self.tokens[pair.1 as usize]);
        Candidate {
            count,
            concat,
            left,
            pair,
        }
    }

    fn char_id(&self, c: char) -> Result<u32> {
        self.alphabet
            .index_of(c)
            .map(|i| (NUM_SPECIALS + i) as u32)
            .ok_or(Error::Symbol(c))
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    pub fn max_seq_len(&self) -> usize {
        self.max_seq_len
    }

    pub fn with_max_seq_len(mut self, max_seq_len: usize) -> Result<Self> {
        if max_seq_len < 2 {
            return Err(Error::Parameter("max_seq_len must leave room for BOS/EOS".into()));
        }
        self.max_seq_len = max_seq_len;
        Ok(self)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.vocab.get(token).copied()
    }

    /// Segments `text` into token ids without specials or truncation.
    pub fn segment(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids: Vec<u32> = text.chars().map(|c| self.char_id(c)).collect::<Result<_>>()?;
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&(rank, _)| (rank, (w[0], w[1]))))
                .min();
            let Some((_, pair)) = best else { break };
            let merged = self.ranks[&pair].1;
            let mut out = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && (ids[i], ids[i + 1]) == pair {
                    out.push(merged);
                    i += 2;
                } else {
                    out.push(ids[i]);
                    i += 1;
                }
            }
            ids = out;
        }
        Ok(ids)
    }

    /// BOS + segmented body (head kept on overflow) + EOS, optionally padded.
    pub fn encode(&self, text: &str, pad_to: Option<usize>) -> Result<TokenizedSequence> {
        if let Some(len) = pad_to {
            if len > self.max_seq_len {
                return Err(Error::Parameter(format!(
                    "pad length {len} exceeds max sequence length {}",
                    self.max_seq_len
                )));
            }
        }
        let body = self.segment(text)?;
        let mut seq = TokenizedSequence::from_body(&body, self.max_seq_len);
        if let Some(len) = pad_to {
            seq.pad_to(len);
        }
        Ok(seq)
    }

    /// Concatenates token strings, dropping specials.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let token = self.token(id).ok_or(Error::TokenId(id))?;
            if !is_special(id) {
                out.push_str(token);
            }
        }
        Ok(out)
    }

    pub fn token_stats(&self) -> TokenStats {
        let mut histogram = BTreeMap::new();
        let mut total = 0usize;
        for token in &self.tokens[NUM_SPECIALS..] {
            let len = token.chars().count();
            *histogram.entry(len).or_insert(0) += 1;
            total += len;
        }
        let count = self.tokens.len() - NUM_SPECIALS;
        TokenStats {
            min_len: histogram.keys().next().copied().unwrap_or(0),
            max_len: histogram.keys().next_back().copied().unwrap_or(0),
            mean_len: if count == 0 {
                0.0
            } else {
                total as f64 / count as f64
            },
            histogram,
        }
    }

    fn header(&self) -> String {
        format!("{FILE_MAGIC} vocab={}", self.tokens.len())
    }

    pub fn vocab_text(&self) -> String {
        let mut out = self.header();
        out.push('\n');
        for (id, token) in self.tokens.iter().enumerate() {
            writeln!(out, "{token}\t{id}").unwrap();
        }
        out
    }

    pub fn merges_text(&self) -> String {
        let mut out = self.header();
        out.push('\n');
        for (left, right) in &self.merges {
            writeln!(out, "{left}\t{right}").unwrap();
        }
        out
    }

    /// Parses vocab and merges files and checks that replaying the merges
    /// reproduces the vocabulary exactly.
    pub fn from_texts(vocab_text: &str, merges_text: &str) -> Result<Self> {
        let mut vocab_lines = vocab_text.lines();
        let n = parse_header(vocab_lines.next())?;
        let mut tokens = Vec::with_capacity(n);
        for line in vocab_lines {
            let (token, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::Format(format!("bad vocab line {line:?}")))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::Format(format!("bad vocab id in {line:?}")))?;
            if id != tokens.len() {
                return Err(Error::Format(format!(
                    "vocab ids must be dense and ordered; found {id} at row {}",
                    tokens.len()
                )));
            }
            tokens.push(token.to_string());
        }
        if tokens.len() != n {
            return Err(Error::Format(format!(
                "header says {n} tokens, file has {}",
                tokens.len()
            )));
        }
        if tokens.len() < NUM_SPECIALS || tokens[..NUM_SPECIALS] != SPECIAL_TOKENS {
            return Err(Error::Format("special tokens missing or out of place".into()));
        }
        let alphabet = Alphabet::new(
            tokens[NUM_SPECIALS..]
                .iter()
                .take_while(|t| t.chars().count() == 1)
                .map(|t| t.chars().next().unwrap()),
        )
        .map_err(|e| Error::Format(format!("vocab alphabet: {e}")))?;

        let mut merge_lines = merges_text.lines();
        let m = parse_header(merge_lines.next())?;
        if m != n {
            return Err(Error::Format(format!(
                "merges file is for a {m}-token vocab, vocab file has {n}"
            )));
        }
        let merges = merge_lines
            .map(|line| {
                line.split_once('\t')
                    .map(|(l, r)| (l.to_string(), r.to_string()))
                    .ok_or_else(|| Error::Format(format!("bad merge line {line:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let tok = Self::from_merges(alphabet, &merges)?;
        if tok.tokens != tokens {
            return Err(Error::Format(
                "replaying merges does not reproduce the vocab".into(),
            ));
        }
        Ok(tok)
    }

    pub fn save(&self, vocab_path: &Path, merges_path: &Path) -> Result<()> {
        fs::write(vocab_path, self.vocab_text()).map_err(|e| Error::io(vocab_path, e))?;
        fs::write(merges_path, self.merges_text()).map_err(|e| Error::io(merges_path, e))
    }

    pub fn load(vocab_path: &Path, merges_path: &Path) -> Result<Self> {
        let vocab = fs::read_to_string(vocab_path).map_err(|e| Error::io(vocab_path, e))?;
        let merges = fs::read_to_string(merges_path).map_err(|e| Error::io(merges_path, e))?;
        Self::from_texts(&vocab, &merges)
    }
}

fn pop_valid(heap: &mut BinaryHeap<Candidate>, counts: &HashMap<Pair, u64>) -> Option<Candidate> {
    while let Some(c) = heap.pop() {
        if counts.get(&c.pair) == Some(&c.count) {
            return Some(c);
        }
    }
    None
}

fn parse_header(line: Option<&str>) -> Result<usize> {
    line.and_then(|l| l.strip_prefix(FILE_MAGIC))
        .and_then(|rest| rest.trim().strip_prefix("vocab="))
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| Error::Format(format!("expected `{FILE_MAGIC} vocab=<n>` header")))
}
