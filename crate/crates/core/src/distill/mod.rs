//! Report distillation: the one-shot prompt, the constrained output grammar
//! `There is|may [a] [b].`, an offline rule-based distiller, and the
//! concatenated text input `[original, distilled]`.

mod remote;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{AnnotatedSeq, EntityLexicon, EntityMention, Polarity, Report, SeqSource, Token, TokenSeq};

pub use remote::{
    distill_batch, distill_remote, ChatMessage, ChatTransport, DistillCache, EndpointConfig, HttpChatClient,
    TransportError, DEFAULT_API_KEY_ENV,
};

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("unparseable distillation: {raw:?}")]
    Unparseable { raw: String },
    #[error("chat endpoint failed after {attempts} attempts: {last}")]
    Endpoint { attempts: usize, last: String },
    #[error("credential variable `{0}` is not set")]
    MissingCredential(String),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("template: {0}")]
    Template(String),
}

const DEFAULT_SYSTEM: &str = "You are a knowledgeable and veteran doctor.";

const DEFAULT_INSTRUCTION: &str = "Please help me analysis the medical reports and conclude them briefly. Now, I will give you a medical report, as well as the mentioned entities. Please write brief and clear conclusions according to the reports as the following format: 'There is [a] [b].' when you are sure whether the entity exists in the report, or 'There may [a] [b].', when you are not sure whether the entity exists in the report. [a] represents adjective words describing the severeness or existence of the entity [b]. Please generate conclusions for the entities mentioned above one by one, according to the format and do not generate other words. Please keep only one entity in a sentence, there is no need of using 'and' or 'or' to connect two or more words.";

const DEFAULT_EXAMPLE: &str = "---Example----
Report: As compared to _, the lung volumes have slightly decreased. Signs of mild over inflation and moderate pleural effusion persist. Elongation of the descending aorta.
Entities:  aorta, inflation, effusion
Conclusion:
There is moderate pleural effusion.
There is mild over inflation.
There is descending aorta.
---Example END----
";

const DEFAULT_QUERY: &str = "Given the report:
{report}
Entities: {entity}.
Conclusion:
";

/// Prompt strings. `query` must contain the `{report}` and `{entity}` slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistillTemplate {
    pub system: String,
    pub instruction: String,
    pub example: String,
    pub query: String,
}

impl Default for DistillTemplate {
    fn default() -> Self {
        Self {
            system: DEFAULT_SYSTEM.into(),
            instruction: DEFAULT_INSTRUCTION.into(),
            example: DEFAULT_EXAMPLE.into(),
            query: DEFAULT_QUERY.into(),
        }
    }
}

impl DistillTemplate {
    /// Load a TOML file with `system`, `instruction`, `example`, `query` keys;
    /// missing keys keep their defaults.
    pub fn from_file(path: &Path) -> Result<Self, DistillError> {
        #[derive(Deserialize)]
        struct Partial {
            system: Option<String>,
            instruction: Option<String>,
            example: Option<String>,
            query: Option<String>,
        }
        let text = fs::read_to_string(path).map_err(|e| DistillError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        let p: Partial = toml::from_str(&text).map_err(|e| DistillError::Template(e.to_string()))?;
        let d = Self::default();
        let t = Self {
            system: p.system.unwrap_or(d.system),
            instruction: p.instruction.unwrap_or(d.instruction),
            example: p.example.unwrap_or(d.example),
            query: p.query.unwrap_or(d.query),
        };
        if !t.query.contains("{report}") || !t.query.contains("{entity}") {
            return Err(DistillError::Template("query needs {report} and {entity} slots".into()));
        }
        Ok(t)
    }

    /// Hex SHA-256 over all template strings.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for part in [&self.system, &self.instruction, &self.example, &self.query] {
            h.update(part.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistillPrompt {
    pub system: String,
    pub instruction: String,
    pub example_block: String,
    pub report: String,
    pub entities: Vec<String>,
    query: String,
    template_hash: String,
}

impl DistillPrompt {
    /// The comma-joined entity slot.
    pub fn entity_slot(&self) -> String {
        self.entities.join(", ")
    }

    pub fn template_hash(&self) -> &str {
        &self.template_hash
    }

    /// System message, instruction, then the example followed by the query.
    pub fn messages(&self) -> Vec<ChatMessage> {
        let query = self
            .query
            .replace("{report}", &self.report)
            .replace("{entity}", &self.entity_slot());
        vec![
            ChatMessage::new("system", &self.system),
            ChatMessage::new("user", &self.instruction),
            ChatMessage::new("user", &format!("{}{}", self.example_block, query)),
        ]
    }
}

/// Entities are listed once each, in order of first mention.
pub fn build_prompt(report: &Report, mentions: &[EntityMention], template: &DistillTemplate) -> DistillPrompt {
    let mut entities: Vec<String> = Vec::new();
    for m in mentions {
        if !entities.contains(&m.entity) {
            entities.push(m.entity.clone());
        }
    }
    DistillPrompt {
        system: template.system.clone(),
        instruction: template.instruction.clone(),
        example_block: template.example.clone(),
        report: report.text.clone(),
        entities,
        query: template.query.clone(),
        template_hash: template.hash(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Is,
    May,
}

impl Modality {
    fn as_str(self) -> &'static str {
        match self {
            Modality::Is => "is",
            Modality::May => "may",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistilledSentence {
    pub modality: Modality,
    /// The `[a]` slot; may hold several words or none.
    pub descriptor: String,
    /// The `[b]` slot.
    pub entity: String,
    /// False when `entity` is not a lexicon entry.
    pub on_lexicon: bool,
}

impl DistilledSentence {
    pub fn render(&self) -> String {
        if self.descriptor.is_empty() {
            format!("There {} {}.", self.modality.as_str(), self.entity)
        } else {
            format!("There {} {} {}.", self.modality.as_str(), self.descriptor, self.entity)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Remote,
    RuleBased,
    Cached,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistilledReport {
    pub sentences: Vec<DistilledSentence>,
    pub raw: String,
    pub provenance: Provenance,
}

impl DistilledReport {
    pub fn text(&self) -> String {
        self.sentences
            .iter()
            .map(DistilledSentence::render)
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedDistillation {
    pub sentences: Vec<DistilledSentence>,
    /// Candidates that did not match either template.
    pub dropped: usize,
}

/// Split `raw` into line/period-delimited candidates and match each against
/// `There is [a] [b].` / `There may [a] [b].`. `[b]` binds the longest word
/// suffix found in the lexicon (else the last word, flagged off-lexicon).
pub fn parse_distilled(raw: &str, lex: &EntityLexicon) -> Result<ParsedDistillation, DistillError> {
    let mut sentences = Vec::new();
    let mut dropped = 0;
    let candidates = raw
        .lines()
        .flat_map(|line| line.split('.'))
        .map(str::trim)
        .filter(|c| !c.is_empty());
    for cand in candidates {
        match parse_sentence(cand, lex) {
            Some(s) => sentences.push(s),
            None => dropped += 1,
        }
    }
    if dropped > 0 {
        log::warn!("parse_distilled: dropped {dropped} candidate(s) not matching the template");
    }
    if sentences.is_empty() && !raw.trim().is_empty() {
        return Err(DistillError::Unparseable { raw: raw.to_string() });
    }
    Ok(ParsedDistillation { sentences, dropped })
}

fn parse_sentence(cand: &str, lex: &EntityLexicon) -> Option<DistilledSentence> {
    let words: Vec<&str> = cand.split_whitespace().collect();
    if words.len() < 3 || !words[0].eq_ignore_ascii_case("there") {
        return None;
    }
    let modality = match words[1].to_ascii_lowercase().as_str() {
        "is" => Modality::Is,
        "may" => Modality::May,
        _ => return None,
    };
    let rest = &words[2..];
    let lexicon_suffix = (1..=rest.len()).rev().find_map(|k| {
        let phrase = rest[rest.len() - k..].join(" ").to_lowercase();
        let hit = if k == 1 {
            lex.lookup(&phrase).map(str::to_string)
        } else {
            lex.contains(&phrase).then_some(phrase)
        };
        hit.map(|e| (k, e))
    });
    let (k, entity, on_lexicon) = match lexicon_suffix {
        Some((k, e)) => (k, e, true),
        None => (1, rest[rest.len() - 1].to_lowercase(), false),
    };
    Some(DistilledSentence {
        modality,
        descriptor: rest[..rest.len() - k].join(" "),
        entity,
        on_lexicon,
    })
}

/// Copulas removed from the front of a descriptor span when it is rendered
/// into the `[a]` slot, so `is mild` becomes `mild`.
const LEADING_COPULAS: [&str; 7] = ["there", "is", "are", "was", "were", "be", "may"];

/// Offline distiller: one sentence per mention, driven by its descriptor.
///
/// * negative span: `There is no {entity}.`
/// * other, non-empty span: `There is {span words} {entity}.`
/// * empty span: `There may be {entity}.`
pub fn distill_rule_based(annotated: &AnnotatedSeq) -> DistilledReport {
    let sentences: Vec<DistilledSentence> = annotated
        .spans
        .iter()
        .zip(&annotated.mentions)
        .map(|(span, mention)| {
            let (modality, descriptor) = if span.token_indices.is_empty() {
                (Modality::May, "be".to_string())
            } else if span.polarity == Polarity::Negative {
                (Modality::Is, "no".to_string())
            } else {
                let words: Vec<&str> = span
                    .token_indices
                    .iter()
                    .map(|&i| annotated.seq.tokens[i].surface.as_str())
                    .skip_while(|w| LEADING_COPULAS.contains(w))
                    .collect();
                (Modality::Is, words.join(" "))
            };
            DistilledSentence {
                modality,
                descriptor,
                entity: mention.entity.clone(),
                on_lexicon: true,
            }
        })
        .collect();
    let raw = sentences
        .iter()
        .map(DistilledSentence::render)
        .collect::<Vec<_>>()
        .join(" ");
    DistilledReport {
        sentences,
        raw,
        provenance: Provenance::RuleBased,
    }
}

/// `[original, distilled]` with the boundary recorded; the distilled part is
/// truncated first when the total exceeds `max_len`.
pub fn concat_input(original: &TokenSeq, distilled: &TokenSeq, max_len: usize) -> TokenSeq {
    let orig_len = original.content_len().min(max_len);
    let room = max_len - orig_len;
    let tokens: Vec<Token> = original.tokens[..orig_len]
        .iter()
        .chain(distilled.tokens[..distilled.content_len()].iter().take(room))
        .enumerate()
        .map(|(position, t)| Token {
            surface: t.surface.clone(),
            vocab_id: t.vocab_id,
            position,
        })
        .collect();
    TokenSeq {
        tokens,
        source: SeqSource::Concatenated,
        boundary: Some(orig_len),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{annotate, tokenize, Vocab};

    fn lex() -> EntityLexicon {
        EntityLexicon::default()
    }

    fn mention(e: &str, i: usize) -> EntityMention {
        EntityMention {
            entity: e.into(),
            token_index: i,
        }
    }

    fn report(text: &str) -> Report {
        Report {
            id: "r".into(),
            text: text.into(),
            image_ref: String::new(),
        }
    }

    #[test]
    fn prompt_entity_slot() {
        let t = DistillTemplate::default();
        let p = build_prompt(
            &report("x"),
            &[mention("aorta", 0), mention("inflation", 1), mention("effusion", 2), mention("effusion", 5)],
            &t,
        );
        assert_eq!(p.entity_slot(), "aorta, inflation, effusion");
        let msgs = p.messages();
        assert_eq!(msgs.len(), 3);
        assert_eq!(msgs[0].role, "system");
        assert!(msgs[2].content.ends_with("Entities: aorta, inflation, effusion.\nConclusion:\n"));
        assert!(msgs[2].content.starts_with(&t.example));
        assert_eq!(p.instruction, t.instruction);

        let p = build_prompt(&report("x"), &[], &t);
        assert_eq!(p.entity_slot(), "");
    }

    #[test]
    fn template_file_overrides_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.toml");
        fs::write(&path, "system = \"sys\"\n").unwrap();
        let t = DistillTemplate::from_file(&path).unwrap();
        assert_eq!(t.system, "sys");
        assert_eq!(t.instruction, DistillTemplate::default().instruction);
        assert_ne!(t.hash(), DistillTemplate::default().hash());
        fs::write(&path, "query = \"no slots\"\n").unwrap();
        assert!(DistillTemplate::from_file(&path).is_err());
    }

    #[test]
    fn parses_grammar_sentences() {
        let p = parse_distilled("There is moderate pleural effusion.", &lex()).unwrap();
        assert_eq!(
            p.sentences,
            [DistilledSentence {
                modality: Modality::Is,
                descriptor: "moderate pleural".into(),
                entity: "effusion".into(),
                on_lexicon: true
            }]
        );
        let p = parse_distilled("There is no pneumothorax.", &lex()).unwrap();
        assert_eq!(p.sentences[0].descriptor, "no");
        assert_eq!(p.sentences[0].entity, "pneumothorax");

        let p = parse_distilled("There is mild left base atelectasis.\nThere is no pleural effusion.", &lex()).unwrap();
        assert_eq!(p.sentences.len(), 2);
        assert_eq!(p.dropped, 0);
    }

    #[test]
    fn drops_non_template_candidates() {
        let p = parse_distilled("Lungs look fine. There may be pneumonia.", &lex()).unwrap();
        assert_eq!(p.dropped, 1);
        assert_eq!(p.sentences[0].modality, Modality::May);
        assert!(matches!(
            parse_distilled("Lungs look fine.", &lex()),
            Err(DistillError::Unparseable { .. })
        ));
        assert!(parse_distilled("  ", &lex()).unwrap().sentences.is_empty());
    }

    #[test]
    fn off_lexicon_entities_are_kept_and_flagged() {
        let p = parse_distilled("There is no acute cardio pulmonary process.", &lex()).unwrap();
        assert_eq!(p.sentences[0].entity, "process");
        assert!(!p.sentences[0].on_lexicon);
    }

    #[test]
    fn multi_word_lexicon_entries_bind_longest_suffix() {
        let lex = EntityLexicon::new(["effusion", "pleural effusion"], ["no"]).unwrap();
        let p = parse_distilled("There is small pleural effusion.", &lex).unwrap();
        assert_eq!(p.sentences[0].entity, "pleural effusion");
        assert_eq!(p.sentences[0].descriptor, "small");
    }

    fn annotated(text: &str) -> AnnotatedSeq {
        let vocab = Vocab::build([text], []);
        annotate("r", tokenize(text, &vocab, 64).unwrap(), &lex(), 2)
    }

    #[test]
    fn rule_based_sentences() {
        let a = annotated("there is no pneumonia. there is mild edema. mass.");
        let d = distill_rule_based(&a);
        let rendered: Vec<String> = d.sentences.iter().map(DistilledSentence::render).collect();
        assert_eq!(rendered, ["There is no pneumonia.", "There is mild edema.", "There may be mass."]);
        assert_eq!(d.provenance, Provenance::RuleBased);
        let parsed = parse_distilled(&d.raw, &lex()).unwrap();
        assert_eq!(parsed.dropped, 0);
        assert_eq!(parsed.sentences, d.sentences);
        assert_eq!(distill_rule_based(&a), d);
    }

    #[test]
    fn concatenation() {
        let vocab = Vocab::build(["a b c d e f g h i j"], []);
        let words = |n: usize| vec!["a"; n];
        let s = |n: usize, src| TokenSeq::from_surfaces(&words(n), &vocab, src);
        let c = concat_input(&s(10, SeqSource::Original), &s(6, SeqSource::Distilled), 64);
        assert_eq!((c.len(), c.boundary), (16, Some(10)));
        assert_eq!(c.source, SeqSource::Concatenated);
        let c = concat_input(&s(60, SeqSource::Original), &s(10, SeqSource::Distilled), 64);
        assert_eq!((c.len(), c.boundary), (64, Some(60)));
        let orig = s(5, SeqSource::Original);
        let empty = TokenSeq {
            tokens: vec![],
            source: SeqSource::Distilled,
            boundary: None,
        };
        let c = concat_input(&orig, &empty, 64);
        assert_eq!(c.ids(), orig.ids());
        assert_eq!(c.boundary, Some(5));
    }
}
