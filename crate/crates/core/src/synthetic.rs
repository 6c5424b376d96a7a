//! Synthetic N-way K-shot episodes from type lexicons and sentence templates.
//!
//! Fine-grained types belong to coarse groups. Train, dev and test draw from
//! disjoint sets of fine types; in `intra` mode whole coarse groups are
//! held out, in `inter` mode every coarse group contributes fine types to
//! each split. Query sentences may carry distractor mentions of types outside
//! the episode. Distractors are left unlabeled in the episode, as an
//! out-of-episode entity would be, and reported separately.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Episode, EpisodeDataset, LabeledSentence, Mention, Split};
use crate::error::{Error, Result};

/// Slot marker inside templates.
pub const SLOT: &str = "{}";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeLexicon {
    pub name: String,
    pub coarse: String,
    /// Whitespace-tokenized entity phrases.
    pub phrases: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Disjointness {
    Intra,
    Inter,
}

impl std::str::FromStr for Disjointness {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "intra" => Ok(Disjointness::Intra),
            "inter" => Ok(Disjointness::Inter),
            other => Err(format!("unknown mode `{other}`, expected intra or inter")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub ways: usize,
    pub shots: usize,
    /// Query sentences per episode.
    pub query_count: usize,
    pub episodes: usize,
    pub split: Split,
    pub mode: Disjointness,
    /// Chance that a query sentence carries one distractor mention.
    pub distractor_prob: f64,
    pub lexicons: Vec<TypeLexicon>,
    /// Sentences with `{}` slots.
    pub templates: Vec<String>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            ways: 5,
            shots: 1,
            query_count: 5,
            episodes: 50,
            split: Split::Train,
            mode: Disjointness::Inter,
            distractor_prob: 0.3,
            lexicons: builtin_lexicons(),
            templates: BUILTIN_TEMPLATES.iter().map(|t| t.to_string()).collect(),
        }
    }
}

/// Generated episodes plus the distractor mentions planted in each query
/// sentence, indexed `[episode][query sentence]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticEpisodes {
    pub dataset: EpisodeDataset,
    pub distractors: Vec<Vec<Vec<Mention>>>,
}

struct Template {
    tokens: Vec<String>,
    slots: usize,
}

impl GeneratorConfig {
    fn templates(&self) -> Result<Vec<Template>> {
        let parsed: Vec<Template> = self
            .templates
            .iter()
            .map(|t| {
                let tokens: Vec<String> = t.split_whitespace().map(str::to_owned).collect();
                let slots = tokens.iter().filter(|t| *t == SLOT).count();
                Template { tokens, slots }
            })
            .filter(|t| t.slots > 0)
            .collect();
        if !parsed.iter().any(|t| t.slots == 1) {
            return Err(Error::Config("need at least one single-slot template".into()));
        }
        if self.distractor_prob > 0.0 && !parsed.iter().any(|t| t.slots >= 2) {
            return Err(Error::Config("distractors need a template with two or more slots".into()));
        }
        Ok(parsed)
    }

    /// Lexicon indices available to each split, in train/dev/test order.
    pub fn split_types(&self) -> Result<[Vec<usize>; 3]> {
        let mut groups: Vec<&str> = Vec::new();
        for lex in &self.lexicons {
            if !groups.contains(&lex.coarse.as_str()) {
                groups.push(&lex.coarse);
            }
        }
        let mut out: [Vec<usize>; 3] = Default::default();
        match self.mode {
            Disjointness::Intra => {
                let n = groups.len();
                if n < 3 {
                    return Err(Error::Config(format!("intra mode needs 3 coarse groups, have {n}")));
                }
                let test = (n / 4).max(1);
                let dev = (n / 8).max(1);
                for (i, lex) in self.lexicons.iter().enumerate() {
                    let g = groups.iter().position(|c| *c == lex.coarse).expect("group listed");
                    let slot = if g >= n - test {
                        2
                    } else if g >= n - test - dev {
                        1
                    } else {
                        0
                    };
                    out[slot].push(i);
                }
            }
            Disjointness::Inter => {
                for group in &groups {
                    let members: Vec<usize> = (0..self.lexicons.len())
                        .filter(|&i| self.lexicons[i].coarse == *group)
                        .collect();
                    let m = members.len();
                    if m < 3 {
                        return Err(Error::Config(format!(
                            "inter mode needs 3 fine types in group `{group}`, have {m}"
                        )));
                    }
                    let test = (m / 4).max(1);
                    let dev = (m / 8).max(1);
                    for (k, &i) in members.iter().enumerate() {
                        let slot = if k >= m - test {
                            2
                        } else if k >= m - test - dev {
                            1
                        } else {
                            0
                        };
                        out[slot].push(i);
                    }
                }
            }
        }
        Ok(out)
    }

    fn validate(&self, pool: &[usize]) -> Result<()> {
        if self.ways == 0 || self.shots == 0 {
            return Err(Error::Config("ways and shots must be positive".into()));
        }
        if self.query_count == 0 {
            return Err(Error::Config("need at least one query sentence per episode".into()));
        }
        if !(0.0..=1.0).contains(&self.distractor_prob) {
            return Err(Error::Config("distractor probability must lie in [0, 1]".into()));
        }
        let names: BTreeSet<&str> = self.lexicons.iter().map(|l| l.name.as_str()).collect();
        if names.len() != self.lexicons.len() {
            return Err(Error::Config("lexicon type names must be unique".into()));
        }
        if self.ways > pool.len() {
            return Err(Error::Config(format!(
                "{} ways requested but the {} split has {} lexicon types",
                self.ways,
                self.split,
                pool.len()
            )));
        }
        if self.distractor_prob > 0.0 && self.ways == pool.len() {
            return Err(Error::Config(format!(
                "no types outside the episode remain for distractors in the {} split",
                self.split
            )));
        }
        for &i in pool {
            let lex = &self.lexicons[i];
            if self.shots > lex.phrases.len() {
                return Err(Error::Config(format!(
                    "{} shots exceed the {} phrases of `{}`",
                    self.shots,
                    lex.phrases.len(),
                    lex.name
                )));
            }
        }
        Ok(())
    }
}

/// Episodes for `config.split`, a pure function of `(config, seed)`.
pub fn generate_synthetic(config: &GeneratorConfig, seed: u64) -> Result<EpisodeDataset> {
    generate_with_distractors(config, seed).map(|s| s.dataset)
}

pub fn generate_with_distractors(config: &GeneratorConfig, seed: u64) -> Result<SyntheticEpisodes> {
    let split_index = Split::ALL.iter().position(|s| *s == config.split).expect("known split");
    let pool = config.split_types()?[split_index].clone();
    config.validate(&pool)?;
    let templates = config.templates()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split_index as u64);

    let mut episodes = Vec::with_capacity(config.episodes);
    let mut distractors = Vec::with_capacity(config.episodes);
    for _ in 0..config.episodes {
        let (episode, planted) = episode(config, &pool, &templates, &mut rng);
        episodes.push(episode);
        distractors.push(planted);
    }
    Ok(SyntheticEpisodes {
        dataset: EpisodeDataset::new(config.split, episodes),
        distractors,
    })
}

/// Train, dev and test episodes; dev and test get `eval_episodes` each.
pub fn generate_splits(config: &GeneratorConfig, eval_episodes: usize, seed: u64) -> Result<Vec<EpisodeDataset>> {
    Split::ALL
        .iter()
        .map(|&split| {
            let cfg = GeneratorConfig {
                split,
                episodes: if split == Split::Train {
                    config.episodes
                } else {
                    eval_episodes
                },
                ..config.clone()
            };
            generate_synthetic(&cfg, seed)
        })
        .collect()
}

fn episode(
    config: &GeneratorConfig,
    pool: &[usize],
    templates: &[Template],
    rng: &mut ChaCha8Rng,
) -> (Episode, Vec<Vec<Mention>>) {
    let chosen: Vec<usize> = pool.choose_multiple(rng, config.ways).copied().collect();
    let outside: Vec<usize> = pool.iter().copied().filter(|i| !chosen.contains(i)).collect();
    let lexicon = |i: usize| &config.lexicons[i];

    let mut pending: Vec<usize> = chosen.iter().flat_map(|&t| std::iter::repeat_n(t, config.shots)).collect();
    pending.shuffle(rng);
    let mut support = Vec::new();
    while !pending.is_empty() {
        let fitting: Vec<&Template> = templates.iter().filter(|t| t.slots <= pending.len()).collect();
        let template = fitting.choose(rng).expect("single-slot template exists");
        let fill: Vec<(usize, bool)> = pending.drain(..template.slots).map(|t| (t, false)).collect();
        let (sentence, _) = fill_template(template, &fill, &|i| lexicon(i), rng);
        support.push(sentence);
    }

    let mut query = Vec::with_capacity(config.query_count);
    let mut planted = Vec::with_capacity(config.query_count);
    for _ in 0..config.query_count {
        let with_distractor = config.distractor_prob > 0.0 && rng.random::<f64>() < config.distractor_prob;
        let template = if with_distractor {
            let multi: Vec<&Template> = templates.iter().filter(|t| t.slots >= 2).collect();
            *multi.choose(rng).expect("multi-slot template exists")
        } else {
            templates.choose(rng).expect("templates exist")
        };
        let mut fill: Vec<(usize, bool)> = (0..template.slots)
            .map(|_| (*chosen.choose(rng).expect("ways > 0"), false))
            .collect();
        if with_distractor {
            let slot = rng.random_range(0..template.slots);
            fill[slot] = (*outside.choose(rng).expect("validated"), true);
        }
        let (sentence, extra) = fill_template(template, &fill, &|i| lexicon(i), rng);
        query.push(sentence);
        planted.push(extra);
    }

    let types = chosen.iter().map(|&i| lexicon(i).name.clone()).collect();
    (Episode { types, support, query }, planted)
}

/// Fills slots in order. Entries flagged `true` become unlabeled distractors,
/// returned as the second value.
fn fill_template<'a>(
    template: &Template,
    fill: &[(usize, bool)],
    lexicon: &dyn Fn(usize) -> &'a TypeLexicon,
    rng: &mut ChaCha8Rng,
) -> (LabeledSentence, Vec<Mention>) {
    let mut tokens = Vec::new();
    let mut mentions = Vec::new();
    let mut distractors = Vec::new();
    let mut next = fill.iter();
    for tok in &template.tokens {
        if tok != SLOT {
            tokens.push(tok.clone());
            continue;
        }
        let &(type_index, distractor) = next.next().expect("one fill per slot");
        let lex = lexicon(type_index);
        let phrase = lex.phrases.choose(rng).expect("non-empty lexicon");
        let start = tokens.len();
        tokens.extend(phrase.split_whitespace().map(str::to_owned));
        let mention = Mention::new(start, tokens.len() - 1, lex.name.clone());
        if distractor {
            distractors.push(mention);
        } else {
            mentions.push(mention);
        }
    }
    (LabeledSentence::new(tokens, mentions), distractors)
}

const COARSE_TYPES: [(&str, [(&str, &str); 6]); 8] = [
    (
        "location",
        [
            ("lake", "lake"),
            ("river", "river"),
            ("mountain", "peak"),
            ("island", "isle"),
            ("bay", "bay"),
            ("valley", "valley"),
        ],
    ),
    (
        "organization",
        [
            ("company", "corp"),
            ("union", "union"),
            ("party", "party"),
            ("league", "league"),
            ("agency", "agency"),
            ("bank", "bank"),
        ],
    ),
    (
        "person",
        [
            ("actor", "jr"),
            ("athlete", "sr"),
            ("scholar", "phd"),
            ("doctor", "md"),
            ("lawyer", "esq"),
            ("monarch", "iii"),
        ],
    ),
    (
        "building",
        [
            ("tower", "tower"),
            ("hall", "hall"),
            ("stadium", "stadium"),
            ("airport", "airport"),
            ("hospital", "clinic"),
            ("library", "library"),
        ],
    ),
    (
        "art",
        [
            ("film", "film"),
            ("album", "album"),
            ("novel", "novel"),
            ("opera", "opera"),
            ("painting", "canvas"),
            ("poem", "poem"),
        ],
    ),
    (
        "product",
        [
            ("phone", "phone"),
            ("car", "motor"),
            ("engine", "engine"),
            ("weapon", "rifle"),
            ("ship", "ship"),
            ("software", "os"),
        ],
    ),
    (
        "event",
        [
            ("war", "war"),
            ("festival", "fest"),
            ("summit", "summit"),
            ("election", "vote"),
            ("tournament", "cup"),
            ("storm", "storm"),
        ],
    ),
    (
        "other",
        [
            ("disease", "syndrome"),
            ("law", "act"),
            ("language", "tongue"),
            ("currency", "coin"),
            ("award", "prize"),
            ("medal", "medal"),
        ],
    ),
];

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "ven", "mir", "tas", "dor", "eli", "quon", "ra", "shi", "bel", "tor", "nu", "fa", "gri", "zel",
];

const PHRASES_PER_TYPE: usize = 20;

/// The default world: 8 coarse groups of 6 fine types, each phrase one or two
/// shared name words followed by a type-specific head word.
pub fn builtin_lexicons() -> Vec<TypeLexicon> {
    let names: Vec<String> = SYLLABLES
        .iter()
        .flat_map(|a| SYLLABLES.iter().map(move |b| format!("{a}{b}")))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut out = Vec::new();
    for (coarse, fine) in COARSE_TYPES {
        for (name, head) in fine {
            let mut phrases = BTreeSet::new();
            while phrases.len() < PHRASES_PER_TYPE {
                let first = names.choose(&mut rng).expect("names");
                let phrase = if rng.random::<bool>() {
                    format!("{first} {head}")
                } else {
                    let second = names.choose(&mut rng).expect("names");
                    format!("{first} {second} {head}")
                };
                phrases.insert(phrase);
            }
            out.push(TypeLexicon {
                name: format!("{coarse}-{name}"),
                coarse: coarse.to_string(),
                phrases: phrases.into_iter().collect(),
            });
        }
    }
    out
}

pub const BUILTIN_TEMPLATES: [&str; 24] = [
    "reports about {} reached the office on monday .",
    "{} was mentioned twice during the long meeting .",
    "we heard that {} will be discussed again tomorrow .",
    "according to the notes , {} changed very little .",
    "nobody expected {} to appear in the final list .",
    "the committee wrote a short letter about {} .",
    "my neighbour keeps talking about {} every evening .",
    "in the old archive there is a file on {} .",
    "after the visit to {} , officials praised {} in public .",
    "many people compared {} with {} last year .",
    "the guide linked {} to {} without any evidence .",
    "{} and {} were both covered in the weekly review .",
    "a reporter asked whether {} had ever met {} .",
    "the story of {} reminded everyone of {} .",
    "students wrote essays on {} and later on {} .",
    "before winter , {} replaced {} in most discussions .",
    "{} , {} and {} were listed in the final notes .",
    "the panel ranked {} above {} but below {} .",
    "visitors asked about {} , then {} , and finally {} .",
    "we read about {} while waiting for news on {} and {} .",
    "people say {} is overrated .",
    "it took years before {} became widely known .",
    "a new book describes {} in great detail .",
    "the radio briefly covered {} this morning .",
];
