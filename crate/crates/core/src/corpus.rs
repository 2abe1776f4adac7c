//! Report ingestion: tokenization, lexicon entity matching, descriptor
//! extraction and corpus-level descriptor statistics.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of words preceding an entity treated as its descriptor.
pub const DEFAULT_BETA: usize = 2;

/// Entity list used for string matching. Lowercased; `COPD` becomes `copd`.
pub const DEFAULT_ENTITIES: [&str; 44] = [
    "abnormality",
    "abscess",
    "aerate",
    "aorta",
    "atelectasis",
    "bronchiectasis",
    "calcification",
    "cardiomediastinal",
    "cardiomegaly",
    "catheter",
    "chf",
    "collapse",
    "congestion",
    "consolidation",
    "contour",
    "copd",
    "deformity",
    "dilation",
    "distention",
    "edema",
    "effusion",
    "embolism",
    "emphysema",
    "engorgement",
    "fibrosis",
    "fracture",
    "granuloma",
    "hernia",
    "hilar",
    "hyperinflate",
    "hemidiaphragm",
    "infiltrate",
    "mass",
    "nodule",
    "obscure",
    "opacity",
    "perihilar",
    "pneumonia",
    "pneumothorax",
    "sarcoidosis",
    "silhouette",
    "thickening",
    "tuberculosis",
    "vasculature",
];

pub const DEFAULT_NEGATION_TERMS: [&str; 8] = [
    "no",
    "not",
    "without",
    "clear",
    "free",
    "negative",
    "unremarkable",
    "resolved",
];

/// Tokens that end a sentence; descriptor spans never cross them.
pub const SENTENCE_TERMINATORS: [&str; 4] = [".", "!", "?", ";"];

pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const MASK_TOKEN: &str = "[MASK]";
pub const SEP_TOKEN: &str = "[SEP]";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("empty report")]
    EmptyReport,
    #[error("report `{0}` has empty text")]
    EmptyReportText(String),
    #[error("duplicate report id `{0}`")]
    DuplicateId(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("invalid lexicon: {0}")]
    Lexicon(String),
}

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One paired free-text report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub id: String,
    pub text: String,
    pub image_ref: String,
}

/// Read a line-delimited corpus of `{id, text, image_ref}` records.
pub fn read_corpus(path: &Path) -> Result<Vec<Report>, CorpusError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut reports = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let report: Report = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        if report.text.split_whitespace().next().is_none() {
            return Err(CorpusError::EmptyReportText(report.id));
        }
        if !seen.insert(report.id.clone()) {
            return Err(CorpusError::DuplicateId(report.id));
        }
        reports.push(report);
    }
    Ok(reports)
}

pub fn write_corpus(path: &Path, reports: &[Report]) -> Result<(), CorpusError> {
    let mut out = String::new();
    for r in reports {
        out.push_str(&serde_json::to_string(r).expect("report serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Word-level vocabulary with four reserved ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub const PAD: usize = 0;
    pub const UNK: usize = 1;
    pub const MASK: usize = 2;
    pub const SEP: usize = 3;

    /// A vocabulary holding only the reserved tokens.
    pub fn specials() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in [PAD_TOKEN, UNK_TOKEN, MASK_TOKEN, SEP_TOKEN] {
            v.insert(t);
        }
        v
    }

    /// Vocabulary over every surface produced by tokenizing `texts`, plus
    /// `extra` words, in sorted order after the reserved ids.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, extra: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = BTreeSet::new();
        for t in texts {
            words.extend(split_words(t));
        }
        words.extend(extra.into_iter().map(|w| w.to_lowercase()));
        let mut v = Self::specials();
        for w in words {
            v.insert(&w);
        }
        v
    }

    fn insert(&mut self, surface: &str) -> usize {
        if let Some(&id) = self.index.get(surface) {
            return id;
        }
        self.tokens.push(surface.to_string());
        self.index.insert(surface.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, surface: &str) -> Option<usize> {
        self.index.get(surface).copied()
    }

    /// Id of `surface`, or the unknown-word id.
    pub fn id(&self, surface: &str) -> usize {
        self.get(surface).unwrap_or(Self::UNK)
    }

    pub fn surface(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line, in id order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, CorpusError> {
        let tokens: Vec<&str> = text.lines().collect();
        let expected = [PAD_TOKEN, UNK_TOKEN, MASK_TOKEN, SEP_TOKEN];
        if tokens.len() < 4 || tokens[..4] != expected {
            return Err(CorpusError::Lexicon("vocabulary must start with the reserved tokens".into()));
        }
        let mut v = Self::specials();
        for t in &tokens[4..] {
            v.insert(t);
        }
        Ok(v)
    }
}

/// Lowercase and split on whitespace; every other non-alphanumeric
/// character becomes a token of its own.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeqSource {
    Original,
    Distilled,
    Concatenated,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub surface: String,
    pub vocab_id: usize,
    pub position: usize,
}

/// A tokenized report. Padding, when present, is a suffix of `[PAD]` tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub tokens: Vec<Token>,
    pub source: SeqSource,
    /// First position of the distilled segment in a concatenated sequence.
    pub boundary: Option<usize>,
}

impl TokenSeq {
    pub fn from_surfaces(surfaces: &[&str], vocab: &Vocab, source: SeqSource) -> Self {
        let tokens = surfaces
            .iter()
            .enumerate()
            .map(|(position, s)| Token {
                surface: s.to_string(),
                vocab_id: vocab.id(s),
                position,
            })
            .collect();
        Self {
            tokens,
            source,
            boundary: None,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.vocab_id).collect()
    }

    pub fn surfaces(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.surface.as_str()).collect()
    }

    pub fn is_pad(&self, i: usize) -> bool {
        self.tokens[i].vocab_id == Vocab::PAD
    }

    /// Number of leading non-pad tokens.
    pub fn content_len(&self) -> usize {
        self.tokens.iter().take_while(|t| t.vocab_id != Vocab::PAD).count()
    }

    /// Copy extended with `[PAD]` tokens up to `max_len`.
    pub fn padded(&self, max_len: usize) -> Self {
        let mut out = self.clone();
        while out.tokens.len() < max_len {
            let position = out.tokens.len();
            out.tokens.push(Token {
                surface: PAD_TOKEN.to_string(),
                vocab_id: Vocab::PAD,
                position,
            });
        }
        out
    }

    /// Copy cut to at most `max_len` tokens.
    pub fn truncated(&self, max_len: usize) -> Self {
        let mut out = self.clone();
        out.tokens.truncate(max_len);
        if let Some(b) = out.boundary {
            if b > out.tokens.len() {
                out.boundary = Some(out.tokens.len());
            }
        }
        out
    }
}

/// Tokenize `text` word by word. The result is truncated to `max_len`;
/// padding is applied separately with [`TokenSeq::padded`].
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> Result<TokenSeq, CorpusError> {
    let words = split_words(text);
    if words.is_empty() {
        return Err(CorpusError::EmptyReport);
    }
    let refs: Vec<&str> = words.iter().take(max_len).map(String::as_str).collect();
    Ok(TokenSeq::from_surfaces(&refs, vocab, SeqSource::Original))
}

/// Entities located by string matching plus the terms marking negation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityLexicon {
    entities: BTreeSet<String>,
    negation_terms: BTreeSet<String>,
}

impl Default for EntityLexicon {
    fn default() -> Self {
        Self::new(DEFAULT_ENTITIES, DEFAULT_NEGATION_TERMS).expect("default lexicon is valid")
    }
}

impl EntityLexicon {
    pub fn new<E, N>(entities: E, negation_terms: N) -> Result<Self, CorpusError>
    where
        E: IntoIterator,
        E::Item: AsRef<str>,
        N: IntoIterator,
        N::Item: AsRef<str>,
    {
        let clean = |s: &str| -> Result<String, CorpusError> {
            let t = s.trim();
            if t.is_empty() || t != s {
                return Err(CorpusError::Lexicon(format!("entry `{s}` is empty or padded")));
            }
            Ok(t.to_lowercase())
        };
        let entities = entities
            .into_iter()
            .map(|e| clean(e.as_ref()))
            .collect::<Result<BTreeSet<_>, _>>()?;
        let negation_terms = negation_terms
            .into_iter()
            .map(|e| clean(e.as_ref()))
            .collect::<Result<BTreeSet<_>, _>>()?;
        if entities.is_empty() {
            return Err(CorpusError::Lexicon("no entities".into()));
        }
        Ok(Self {
            entities,
            negation_terms,
        })
    }

    /// Load one-entry-per-line files; the negation file is optional.
    pub fn from_files(entities: &Path, negation: Option<&Path>) -> Result<Self, CorpusError> {
        let read_list = |p: &Path| -> Result<Vec<String>, CorpusError> {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            Ok(text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_string)
                .collect())
        };
        let ents = read_list(entities)?;
        let neg = match negation {
            Some(p) => read_list(p)?,
            None => DEFAULT_NEGATION_TERMS.iter().map(|s| s.to_string()).collect(),
        };
        Self::new(ents, neg)
    }

    pub fn entities(&self) -> &BTreeSet<String> {
        &self.entities
    }

    pub fn negation_terms(&self) -> &BTreeSet<String> {
        &self.negation_terms
    }

    pub fn contains(&self, entity: &str) -> bool {
        self.entities.contains(entity)
    }

    pub fn is_negation(&self, surface: &str) -> bool {
        self.negation_terms.contains(&surface.to_lowercase())
    }

    /// Canonical entity for a token surface, folding a trailing plural `s`.
    pub fn lookup(&self, surface: &str) -> Option<&str> {
        let lower = surface.to_lowercase();
        if let Some(e) = self.entities.get(&lower) {
            return Some(e);
        }
        lower
            .strip_suffix('s')
            .and_then(|stem| self.entities.get(stem))
            .map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityMention {
    pub entity: String,
    pub token_index: usize,
}

/// One mention per token matching a lexicon entity, in position order.
pub fn match_entities(seq: &TokenSeq, lex: &EntityLexicon) -> Vec<EntityMention> {
    seq.tokens
        .iter()
        .enumerate()
        .filter(|(i, _)| !seq.is_pad(*i))
        .filter_map(|(i, t)| {
            lex.lookup(&t.surface).map(|e| EntityMention {
                entity: e.to_string(),
                token_index: i,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Negative,
    Other,
}

/// Up to β contiguous token positions directly preceding one mention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DescriptorSpan {
    pub mention_index: usize,
    pub token_indices: Vec<usize>,
    pub polarity: Polarity,
}

impl DescriptorSpan {
    pub fn surface(&self, seq: &TokenSeq) -> String {
        self.token_indices
            .iter()
            .map(|&i| seq.tokens[i].surface.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn is_terminator(surface: &str) -> bool {
    SENTENCE_TERMINATORS.contains(&surface)
}

/// Walk back from each mention over at most `beta` tokens, stopping at the
/// sequence start, the concatenation boundary, a sentence terminator, a
/// padding token or another entity mention. Stopping at mentions assigns
/// every position to the nearest following mention, so spans never overlap.
///
/// Spans are returned with polarity [`Polarity::Other`]; see
/// [`classify_polarity`].
pub fn extract_descriptors(seq: &TokenSeq, mentions: &[EntityMention], beta: usize) -> Vec<DescriptorSpan> {
    assert!(beta >= 1, "beta must be at least 1");
    let mention_positions: HashSet<usize> = mentions.iter().map(|m| m.token_index).collect();
    mentions
        .iter()
        .map(|m| {
            let mut indices = Vec::new();
            let mut i = m.token_index;
            while indices.len() < beta && i > 0 {
                if seq.boundary == Some(i) {
                    break;
                }
                let j = i - 1;
                if mention_positions.contains(&j) || seq.is_pad(j) || is_terminator(&seq.tokens[j].surface) {
                    break;
                }
                indices.push(j);
                i = j;
            }
            indices.reverse();
            DescriptorSpan {
                mention_index: m.token_index,
                token_indices: indices,
                polarity: Polarity::Other,
            }
        })
        .collect()
}

/// Negative when any span token is a negation term.
pub fn classify_polarity(span: &DescriptorSpan, seq: &TokenSeq, lex: &EntityLexicon) -> Polarity {
    if span
        .token_indices
        .iter()
        .any(|&i| lex.is_negation(&seq.tokens[i].surface))
    {
        Polarity::Negative
    } else {
        Polarity::Other
    }
}

/// A token sequence with its mentions and polarized descriptor spans.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatedSeq {
    pub id: String,
    pub seq: TokenSeq,
    pub mentions: Vec<EntityMention>,
    pub spans: Vec<DescriptorSpan>,
}

pub fn annotate(id: &str, seq: TokenSeq, lex: &EntityLexicon, beta: usize) -> AnnotatedSeq {
    let mentions = match_entities(&seq, lex);
    let mut spans = extract_descriptors(&seq, &mentions, beta);
    for s in &mut spans {
        s.polarity = classify_polarity(s, &seq, lex);
    }
    AnnotatedSeq {
        id: id.to_string(),
        seq,
        mentions,
        spans,
    }
}

/// Corpus-level frequencies. Spans with no tokens are not counted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub entity_counts: BTreeMap<String, u64>,
    /// Keyed by the space-joined span surface (the whole ≤β-word span).
    pub descriptor_counts: BTreeMap<String, u64>,
    pub n_neg: u64,
    pub n_oth: u64,
    /// Token counts inside negative / other spans.
    pub neg_tokens: u64,
    pub oth_tokens: u64,
    /// `n_neg / max(n_oth, 1)`.
    pub ratio: f64,
}

impl CorpusStats {
    pub fn total_spans(&self) -> u64 {
        self.n_neg + self.n_oth
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>8}", "entity", "count");
        for (e, c) in &self.entity_counts {
            let _ = writeln!(s, "{e:<24} {c:>8}");
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<24} {:>8}", "descriptor", "count");
        for (d, c) in &self.descriptor_counts {
            let _ = writeln!(s, "{d:<24} {c:>8}");
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "n_neg {}  n_oth {}  ratio {:.4}", self.n_neg, self.n_oth, self.ratio);
        s
    }
}

pub fn compute_stats(corpus: &[AnnotatedSeq]) -> Result<CorpusStats, CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let mut stats = CorpusStats {
        entity_counts: BTreeMap::new(),
        descriptor_counts: BTreeMap::new(),
        n_neg: 0,
        n_oth: 0,
        neg_tokens: 0,
        oth_tokens: 0,
        ratio: 0.0,
    };
    for doc in corpus {
        for m in &doc.mentions {
            *stats.entity_counts.entry(m.entity.clone()).or_default() += 1;
        }
        for span in doc.spans.iter().filter(|s| !s.token_indices.is_empty()) {
            *stats.descriptor_counts.entry(span.surface(&doc.seq)).or_default() += 1;
            let n = span.token_indices.len() as u64;
            match span.polarity {
                Polarity::Negative => {
                    stats.n_neg += 1;
                    stats.neg_tokens += n;
                }
                Polarity::Other => {
                    stats.n_oth += 1;
                    stats.oth_tokens += n;
                }
            }
        }
    }
    stats.ratio = stats.n_neg as f64 / stats.n_oth.max(1) as f64;
    Ok(stats)
}

pub fn write_stats_json(path: &Path, stats: &CorpusStats) -> Result<(), CorpusError> {
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let body = serde_json::to_string_pretty(stats).expect("stats serialize");
    f.write_all(body.as_bytes()).map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(words: &[&str]) -> TokenSeq {
        let vocab = Vocab::build(words.iter().copied(), []);
        TokenSeq::from_surfaces(words, &vocab, SeqSource::Original)
    }

    #[test]
    fn tokenizes_the_example_sentence() {
        let vocab = Vocab::build(["there is mild pneumonia ."], []);
        let s = tokenize("There is mild pneumonia.", &vocab, 64).unwrap();
        assert_eq!(s.surfaces(), ["there", "is", "mild", "pneumonia", "."]);
        assert!(s.ids().iter().all(|&id| id >= 4 && id < vocab.len()));
        assert_eq!(s.tokens.iter().map(|t| t.position).collect::<Vec<_>>(), [0, 1, 2, 3, 4]);
    }

    #[test]
    fn empty_text_is_rejected() {
        let vocab = Vocab::specials();
        assert!(matches!(tokenize("", &vocab, 64), Err(CorpusError::EmptyReport)));
        assert!(matches!(tokenize("   \n", &vocab, 64), Err(CorpusError::EmptyReport)));
    }

    #[test]
    fn unknown_words_map_to_oov() {
        let vocab = Vocab::build(["pneumonia"], []);
        let s = tokenize("xqzv pneumonia", &vocab, 64).unwrap();
        assert_eq!(s.ids(), [Vocab::UNK, vocab.id("pneumonia")]);
    }

    #[test]
    fn truncates_and_pads() {
        let vocab = Vocab::build(["a b c d e"], []);
        let s = tokenize("a b c d e", &vocab, 3).unwrap();
        assert_eq!(s.len(), 3);
        let p = s.padded(6);
        assert_eq!(p.len(), 6);
        assert_eq!(p.content_len(), 3);
        assert!(p.is_pad(5) && !p.is_pad(2));
    }

    #[test]
    fn default_lexicon_has_44_entities() {
        let lex = EntityLexicon::default();
        assert_eq!(lex.entities().len(), 44);
        assert!(lex.contains("copd"));
        assert!(EntityLexicon::new([" mass"], ["no"]).is_err());
        assert!(EntityLexicon::new(Vec::<&str>::new(), ["no"]).is_err());
    }

    #[test]
    fn matches_entities_per_occurrence() {
        let lex = EntityLexicon::default();
        let m = match_entities(&seq(&["no", "pneumothorax", "is", "seen"]), &lex);
        assert_eq!(
            m,
            [EntityMention {
                entity: "pneumothorax".into(),
                token_index: 1
            }]
        );
        assert!(match_entities(&seq(&["lungs", "are", "fine"]), &lex).is_empty());
        let m = match_entities(&seq(&["effusion", "and", "effusion"]), &lex);
        assert_eq!(m.iter().map(|m| m.token_index).collect::<Vec<_>>(), [0, 2]);
        let m = match_entities(&seq(&["small", "nodules"]), &lex);
        assert_eq!(m[0].entity, "nodule");
        let m = match_entities(&seq(&["abscess"]), &lex);
        assert_eq!(m[0].entity, "abscess");
    }

    #[test]
    fn descriptor_windows() {
        let lex = EntityLexicon::default();
        let s = seq(&["there", "is", "mild", "pneumonia"]);
        let spans = extract_descriptors(&s, &match_entities(&s, &lex), 2);
        assert_eq!(spans[0].token_indices, [1, 2]);

        let s = seq(&["pneumonia", "is", "seen"]);
        let spans = extract_descriptors(&s, &match_entities(&s, &lex), 2);
        assert!(spans[0].token_indices.is_empty());

        let s = seq(&["no", "edema", "no", "effusion"]);
        let spans = extract_descriptors(&s, &match_entities(&s, &lex), 2);
        assert_eq!(spans[0].token_indices, [0]);
        assert_eq!(spans[1].token_indices, [2]);
    }

    #[test]
    fn descriptor_stops_at_sentence_and_segment_boundaries() {
        let lex = EntityLexicon::default();
        let s = seq(&["stable", ".", "effusion"]);
        let spans = extract_descriptors(&s, &match_entities(&s, &lex), 2);
        assert!(spans[0].token_indices.is_empty());

        let mut s = seq(&["there", "is", "mild", "edema"]);
        s.boundary = Some(3);
        let spans = extract_descriptors(&s, &match_entities(&s, &lex), 2);
        assert!(spans[0].token_indices.is_empty());
    }

    #[test]
    fn polarity_rules() {
        let lex = EntityLexicon::default();
        let s = seq(&["is", "no", "there", "is"]);
        let span = |idx: Vec<usize>| DescriptorSpan {
            mention_index: 4,
            token_indices: idx,
            polarity: Polarity::Other,
        };
        assert_eq!(classify_polarity(&span(vec![0, 1]), &s, &lex), Polarity::Negative);
        assert_eq!(classify_polarity(&span(vec![2, 3]), &s, &lex), Polarity::Other);
        assert_eq!(classify_polarity(&span(vec![]), &s, &lex), Polarity::Other);
    }

    #[test]
    fn stats_ratio() {
        let lex = EntityLexicon::default();
        let vocab = Vocab::build(["there is no mild effusion ."], []);
        let mut docs = Vec::new();
        for i in 0..21 {
            let text = if i == 0 {
                "there is mild effusion."
            } else {
                "there is no effusion."
            };
            docs.push(annotate(&i.to_string(), tokenize(text, &vocab, 64).unwrap(), &lex, 2));
        }
        let stats = compute_stats(&docs).unwrap();
        assert_eq!((stats.n_neg, stats.n_oth), (20, 1));
        assert_eq!(stats.ratio, 20.0);
        assert_eq!(stats.descriptor_counts["is no"], 20);
        assert_eq!(stats.neg_tokens, 40);

        let all_other = vec![docs[0].clone()];
        assert_eq!(compute_stats(&all_other).unwrap().ratio, 0.0);
        assert!(matches!(compute_stats(&[]), Err(CorpusError::EmptyCorpus)));
    }

    #[test]
    fn corpus_file_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let reports = vec![Report {
            id: "a".into(),
            text: "There is no effusion.".into(),
            image_ref: "a.f32".into(),
        }];
        write_corpus(&p, &reports).unwrap();
        assert_eq!(read_corpus(&p).unwrap(), reports);

        fs::write(&p, "{\"id\":\"a\",\"text\":\"x\",\"image_ref\":\"\"}\n{\"id\":\"a\",\"text\":\"y\",\"image_ref\":\"\"}\n").unwrap();
        assert!(matches!(read_corpus(&p), Err(CorpusError::DuplicateId(_))));
        fs::write(&p, "{\"id\":\"a\",\"text\":\"  \",\"image_ref\":\"\"}\n").unwrap();
        assert!(matches!(read_corpus(&p), Err(CorpusError::EmptyReportText(_))));
        let err = read_corpus(&dir.path().join("missing.jsonl")).unwrap_err();
        assert!(err.to_string().contains("missing.jsonl"));
    }

    #[test]
    fn vocab_text_round_trip() {
        let v = Vocab::build(["there is no effusion"], ["mild"]);
        assert_eq!(Vocab::from_text(&v.to_text()).unwrap(), v);
    }
}
