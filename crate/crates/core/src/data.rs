//! Episode data model and the line-delimited JSON episode format.
//!
//! Each line of an episode file is one record:
//!
//! ```json
//! {"types": ["PER", "LOC"],
//!  "support": [{"tokens": ["Jim", "sang"], "spans": [[0, 0, "PER"]]}],
//!  "query":   [{"tokens": ["in", "Rome"], "spans": [[1, 1, "LOC"]]}]}
//! ```
//!
//! Span indices are 0-based and inclusive on both ends.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A token range, inclusive on both ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    /// True when `0 <= start <= end < sentence_len`.
    pub fn is_valid_for(&self, sentence_len: usize) -> bool {
        self.start <= self.end && self.end < sentence_len
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.start, self.end)
    }
}

/// A typed gold span.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Mention {
    pub span: Span,
    pub label: String,
}

impl Mention {
    pub fn new(start: usize, end: usize, label: impl Into<String>) -> Self {
        Mention {
            span: Span::new(start, end),
            label: label.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "RawSentence", from = "RawSentence")]
pub struct LabeledSentence {
    pub tokens: Vec<String>,
    pub mentions: Vec<Mention>,
}

#[derive(Serialize, Deserialize)]
struct RawSentence {
    tokens: Vec<String>,
    spans: Vec<(usize, usize, String)>,
}

impl From<LabeledSentence> for RawSentence {
    fn from(s: LabeledSentence) -> Self {
        RawSentence {
            tokens: s.tokens,
            spans: s
                .mentions
                .into_iter()
                .map(|m| (m.span.start, m.span.end, m.label))
                .collect(),
        }
    }
}

impl From<RawSentence> for LabeledSentence {
    fn from(raw: RawSentence) -> Self {
        LabeledSentence {
            tokens: raw.tokens,
            mentions: raw
                .spans
                .into_iter()
                .map(|(start, end, label)| Mention::new(start, end, label))
                .collect(),
        }
    }
}

impl LabeledSentence {
    pub fn new(tokens: Vec<String>, mentions: Vec<Mention>) -> Self {
        LabeledSentence { tokens, mentions }
    }

    /// Builds a sentence from whitespace-separated text.
    pub fn from_text(text: &str, mentions: Vec<Mention>) -> Self {
        LabeledSentence {
            tokens: text.split_whitespace().map(str::to_owned).collect(),
            mentions,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn gold_spans(&self) -> HashSet<Span> {
        self.mentions.iter().map(|m| m.span).collect()
    }

    /// Checks token and mention invariants, returning a message on failure.
    pub fn check(&self) -> std::result::Result<(), String> {
        if self.tokens.is_empty() {
            return Err("sentence has no tokens".into());
        }
        let mut seen = HashSet::new();
        for m in &self.mentions {
            if !m.span.is_valid_for(self.tokens.len()) {
                return Err(format!(
                    "span {} out of range for {} tokens",
                    m.span,
                    self.tokens.len()
                ));
            }
            if !seen.insert((m.span, m.label.as_str())) {
                return Err(format!("duplicate mention {} {}", m.span, m.label));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub types: Vec<String>,
    pub support: Vec<LabeledSentence>,
    pub query: Vec<LabeledSentence>,
}

impl Episode {
    pub fn ways(&self) -> usize {
        self.types.len()
    }

    pub fn type_index(&self, label: &str) -> Option<usize> {
        self.types.iter().position(|t| t == label)
    }

    /// Validates the episode, naming `index` and the offending field in errors.
    pub fn validate(&self, index: usize) -> Result<()> {
        if self.types.is_empty() {
            return Err(Error::validation(index, "types", "episode has no types"));
        }
        let mut distinct = HashSet::new();
        for t in &self.types {
            if !distinct.insert(t.as_str()) {
                return Err(Error::validation(index, "types", format!("duplicate type `{t}`")));
            }
        }
        if self.support.is_empty() {
            return Err(Error::validation(index, "support", "support set is empty"));
        }
        if self.query.is_empty() {
            return Err(Error::validation(index, "query", "query set is empty"));
        }
        for (field, set) in [("support", &self.support), ("query", &self.query)] {
            for (i, sentence) in set.iter().enumerate() {
                sentence
                    .check()
                    .map_err(|msg| Error::validation(index, format!("{field}[{i}]"), msg))?;
                for m in &sentence.mentions {
                    if !distinct.contains(m.label.as_str()) {
                        return Err(Error::validation(
                            index,
                            format!("{field}[{i}]"),
                            format!("mention type `{}` is not in episode types", m.label),
                        ));
                    }
                }
            }
        }
        for t in &self.types {
            let labeled = self
                .support
                .iter()
                .flat_map(|s| &s.mentions)
                .any(|m| &m.label == t);
            if !labeled {
                return Err(Error::validation(
                    index,
                    "support",
                    format!("type `{t}` labels no support mention"),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    /// Infers the split from a file stem such as `train.jsonl`; anything that
    /// is neither train nor dev is treated as test data.
    pub fn from_path(path: &Path) -> Split {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().to_lowercase())
            .unwrap_or_default();
        if stem.contains("train") {
            Split::Train
        } else if stem.contains("dev") || stem.contains("valid") {
            Split::Dev
        } else {
            Split::Test
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpisodeDataset {
    pub split: Split,
    pub episodes: Vec<Episode>,
    /// Non-fatal conditions noticed while reading, e.g. an empty file.
    pub warnings: Vec<String>,
}

impl PartialEq for EpisodeDataset {
    fn eq(&self, other: &Self) -> bool {
        self.split == other.split && self.episodes == other.episodes
    }
}

impl EpisodeDataset {
    pub fn new(split: Split, episodes: Vec<Episode>) -> Self {
        EpisodeDataset {
            split,
            episodes,
            warnings: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        self.episodes
            .iter()
            .enumerate()
            .try_for_each(|(i, e)| e.validate(i))
    }

    /// All sentences, support first, in episode order.
    pub fn sentences(&self) -> impl Iterator<Item = &LabeledSentence> {
        self.episodes
            .iter()
            .flat_map(|e| e.support.iter().chain(e.query.iter()))
    }
}

/// Reads an episode file. The split tag is inferred from the file name.
pub fn read_episodes(path: impl AsRef<Path>) -> Result<EpisodeDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut episodes = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let episode: Episode = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        episode.validate(episodes.len())?;
        episodes.push(episode);
    }
    let mut dataset = EpisodeDataset::new(Split::from_path(path), episodes);
    if dataset.is_empty() {
        log::warn!("{}: no episodes", path.display());
        dataset.warnings.push(format!("{}: no episodes", path.display()));
    }
    Ok(dataset)
}

pub fn write_episodes(dataset: &EpisodeDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for episode in &dataset.episodes {
        serde_json::to_writer(&mut out, episode)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}
