//! Labeled bag-of-words corpora.
//!
//! Two line formats are read, optionally gzip-compressed (detected from the
//! magic bytes):
//!
//! * `label-tokens`: `LABEL tok tok tok ...`
//! * `label-counts`: `LABEL word:count word:count ...`
//!
//! Tokens are lowercased. Word and label ids are assigned in first-seen order,
//! so the same file bytes always give the same ids.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use flate2::read::GzDecoder;
use indexmap::IndexSet;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::LabeledInstance;

/// Sparse word counts sorted by word id. Every count is at least 1.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Document {
    entries: Vec<(u32, u32)>,
}

impl Document {
    /// Builds a document from `(word, count)` pairs, merging repeated words.
    /// Zero counts are rejected.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (u32, u32)>) -> Result<Self> {
        let mut entries: Vec<(u32, u32)> = pairs.into_iter().collect();
        if let Some((w, _)) = entries.iter().find(|(_, c)| *c == 0) {
            return Err(Error::config(format!("word {w} has count 0")));
        }
        entries.sort_unstable_by_key(|(w, _)| *w);
        let mut merged: Vec<(u32, u32)> = Vec::with_capacity(entries.len());
        for (w, c) in entries {
            match merged.last_mut() {
                Some((lw, lc)) if *lw == w => *lc += c,
                _ => merged.push((w, c)),
            }
        }
        Ok(Self { entries: merged })
    }

    pub fn from_tokens(tokens: impl IntoIterator<Item = u32>) -> Self {
        Self::from_pairs(tokens.into_iter().map(|w| (w, 1))).expect("unit counts")
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[(u32, u32)] {
        &self.entries
    }

    /// Number of distinct words, `|d|`.
    pub fn distinct(&self) -> usize {
        self.entries.len()
    }

    pub fn tokens(&self) -> u64 {
        self.entries.iter().map(|(_, c)| *c as u64).sum()
    }

    pub fn count(&self, word: u32) -> u32 {
        self.entries
            .binary_search_by_key(&word, |(w, _)| *w)
            .map(|i| self.entries[i].1)
            .unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max_word(&self) -> Option<u32> {
        self.entries.last().map(|(w, _)| *w)
    }
}

/// String to dense id map with stable first-seen order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    items: IndexSet<String>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_words<S: Into<String>>(words: impl IntoIterator<Item = S>) -> Self {
        Self {
            items: words.into_iter().map(Into::into).collect(),
        }
    }

    pub fn intern(&mut self, word: &str) -> u32 {
        if let Some(i) = self.items.get_index_of(word) {
            return i as u32;
        }
        self.items.insert(word.to_string());
        (self.items.len() - 1) as u32
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.items.get_index_of(word).map(|i| i as u32)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.items.get_index(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusFormat {
    LabelTokens,
    LabelCounts,
}

impl fmt::Display for CorpusFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CorpusFormat::LabelTokens => "label-tokens",
            CorpusFormat::LabelCounts => "label-counts",
        })
    }
}

impl FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "label-tokens" | "tokens" => Ok(CorpusFormat::LabelTokens),
            "label-counts" | "counts" => Ok(CorpusFormat::LabelCounts),
            other => Err(Error::config(format!("unknown corpus format '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub docs: Vec<LabeledInstance<Document>>,
    pub vocab: Vocabulary,
    pub labels: Vocabulary,
    /// Blank lines skipped while parsing.
    pub skipped_lines: usize,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn tokens(&self) -> u64 {
        self.docs.iter().map(|d| d.x.tokens()).sum()
    }
}

fn open_maybe_gzip(path: &Path) -> Result<Box<dyn BufRead>> {
    let mut file = BufReader::new(File::open(path)?);
    let magic = file.fill_buf()?;
    if magic.starts_with(&[0x1f, 0x8b]) {
        Ok(Box::new(BufReader::new(GzDecoder::new(file))))
    } else {
        Ok(Box::new(file))
    }
}

pub fn parse_corpus(path: impl AsRef<Path>, format: CorpusFormat) -> Result<Corpus> {
    parse_reader(open_maybe_gzip(path.as_ref())?, format)
}

pub fn parse_str(text: &str, format: CorpusFormat) -> Result<Corpus> {
    parse_reader(text.as_bytes(), format)
}

pub fn parse_reader<R: BufRead>(input: R, format: CorpusFormat) -> Result<Corpus> {
    let mut corpus = Corpus::default();
    let mut pairs: Vec<(u32, u32)> = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| match e.kind() {
            std::io::ErrorKind::InvalidData => Error::Parse {
                line: line_no,
                message: "invalid UTF-8".into(),
            },
            _ => Error::Io(e),
        })?;
        let mut fields = line.split_whitespace();
        let Some(label) = fields.next() else {
            corpus.skipped_lines += 1;
            continue;
        };
        pairs.clear();
        for field in fields {
            let (word, count) = match format {
                CorpusFormat::LabelTokens => (field, 1),
                CorpusFormat::LabelCounts => parse_count_field(field, line_no)?,
            };
            let id = corpus.vocab.intern(&word.to_lowercase());
            pairs.push((id, count));
        }
        let label = corpus.labels.intern(label);
        let doc = Document::from_pairs(pairs.iter().copied()).expect("counts validated");
        corpus.docs.push(LabeledInstance::new(label as usize, doc));
    }
    if corpus.skipped_lines > 0 {
        log::warn!("skipped {} blank lines", corpus.skipped_lines);
    }
    Ok(corpus)
}

fn parse_count_field(field: &str, line: usize) -> Result<(&str, u32)> {
    let bad = |m: String| Error::Parse { line, message: m };
    let (word, count) = field
        .rsplit_once(':')
        .ok_or_else(|| bad(format!("expected word:count, got '{field}'")))?;
    if word.is_empty() {
        return Err(bad(format!("empty word in '{field}'")));
    }
    let count: i64 = count
        .parse()
        .map_err(|_| bad(format!("bad count in '{field}'")))?;
    if count <= 0 {
        return Err(bad(format!("count must be positive in '{field}'")));
    }
    let count = u32::try_from(count).map_err(|_| bad(format!("count too large in '{field}'")))?;
    Ok((word, count))
}

/// Re-indexes `corpus` against a training vocabulary and label set.
///
/// Unseen words are dropped; documents left empty are kept. A label missing
/// from `labels` is an error because no class can score it.
pub fn apply_vocabulary(corpus: &Corpus, vocab: &Vocabulary, labels: &Vocabulary) -> Result<Corpus> {
    let mut docs = Vec::with_capacity(corpus.docs.len());
    let mut dropped = 0u64;
    for inst in &corpus.docs {
        let name = corpus.labels.word(inst.label as u32).expect("label id in range");
        let label = labels
            .id(name)
            .ok_or_else(|| Error::Vocabulary(format!("label '{name}' does not occur in training data")))?;
        let mut pairs = Vec::with_capacity(inst.x.distinct());
        for &(w, c) in inst.x.entries() {
            let word = corpus.vocab.word(w).expect("word id in range");
            match vocab.id(word) {
                Some(id) => pairs.push((id, c)),
                None => dropped += c as u64,
            }
        }
        docs.push(LabeledInstance::new(
            label as usize,
            Document::from_pairs(pairs).expect("counts validated"),
        ));
    }
    if dropped > 0 {
        log::info!("dropped {dropped} out-of-vocabulary tokens");
    }
    Ok(Corpus {
        docs,
        vocab: vocab.clone(),
        labels: labels.clone(),
        skipped_lines: corpus.skipped_lines,
    })
}

/// Writes the corpus in `label-counts` format. Parsing the output of a parsed
/// corpus yields an identical corpus.
pub fn write_corpus<W: Write>(mut out: W, corpus: &Corpus) -> Result<()> {
    for inst in &corpus.docs {
        let label = corpus
            .labels
            .word(inst.label as u32)
            .ok_or_else(|| Error::Vocabulary(format!("label id {} has no name", inst.label)))?;
        write!(out, "{label}")?;
        for &(w, c) in inst.x.entries() {
            let word = corpus
                .vocab
                .word(w)
                .ok_or_else(|| Error::Vocabulary(format!("word id {w} has no name")))?;
            write!(out, " {word}:{c}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Reads everything from `reader`, decompressing when it starts with the gzip magic.
pub fn read_all_maybe_gzip<R: Read>(mut reader: R) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    reader.read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}
