//! Question datasets: cue-word extraction of binary causal questions,
//! dataset files and the effective-training-set filter.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::CausalGraph;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Yes,
    No,
}

impl Label {
    pub fn is_yes(self) -> bool {
        self == Label::Yes
    }
}

impl From<bool> for Label {
    fn from(yes: bool) -> Self {
        if yes {
            Label::Yes
        } else {
            Label::No
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Yes => "yes",
            Label::No => "no",
        })
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "yes" => Ok(Label::Yes),
            "no" => Ok(Label::No),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "validation" | "valid" | "dev" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAExample {
    pub id: String,
    pub question: String,
    pub cause: String,
    pub effect: String,
    pub label: Label,
    pub split: Split,
}

impl QAExample {
    pub fn new(id: &str, question: &str, cause: &str, effect: &str, label: Label) -> Self {
        QAExample {
            id: id.to_string(),
            question: question.to_string(),
            cause: cause.to_string(),
            effect: effect.to_string(),
            label,
            split: Split::Train,
        }
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CueWord {
    /// Space-separated words, first word is the verb that inflects.
    pub words: Vec<String>,
    pub preposition: Option<String>,
}

impl CueWord {
    /// Cues read as "effect <cue> cause": "result from", "stem from", ...
    pub fn inverts_roles(&self) -> bool {
        self.preposition.as_deref() == Some("from") || self.words[0] == "originate"
    }

    fn parse(line: &str) -> std::result::Result<Self, String> {
        let (words, preposition) = match line.find('(') {
            Some(open) => {
                let close = line[open..]
                    .find(')')
                    .ok_or_else(|| format!("unbalanced parenthesis in {line:?}"))?;
                let prep = line[open + 1..open + close].trim().to_lowercase();
                (&line[..open], Some(prep))
            }
            None => (line, None),
        };
        let words: Vec<String> = words.split_whitespace().map(str::to_lowercase).collect();
        if words.is_empty() {
            return Err(format!("empty cue word in {line:?}"));
        }
        Ok(CueWord { words, preposition })
    }
}

impl fmt::Display for CueWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.words.join(" "))?;
        if let Some(p) = &self.preposition {
            write!(f, " ({p})")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CueLexicon {
    pub cue_words: Vec<CueWord>,
    pub question_words: Vec<String>,
    pub excluded_pos: Vec<String>,
}

const CUE_WORDS: &str = include_str!("../lexicon/cue_words.txt");
const QUESTION_WORDS: &str = include_str!("../lexicon/question_words.txt");
const EXCLUDED_POS: &str = include_str!("../lexicon/excluded_pos.txt");

fn list_lines(text: &str) -> impl Iterator<Item = &str> {
    text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'))
}

impl Default for CueLexicon {
    fn default() -> Self {
        CueLexicon::parse(CUE_WORDS, QUESTION_WORDS, EXCLUDED_POS).expect("bundled lexicon is valid")
    }
}

impl CueLexicon {
    pub fn parse(cue_words: &str, question_words: &str, excluded_pos: &str) -> std::result::Result<Self, String> {
        Ok(CueLexicon {
            cue_words: list_lines(cue_words).map(CueWord::parse).collect::<std::result::Result<_, _>>()?,
            question_words: list_lines(question_words).map(str::to_lowercase).collect(),
            excluded_pos: list_lines(excluded_pos).map(str::to_uppercase).collect(),
        })
    }

    /// Loads `cue_words.txt`, `question_words.txt` and `excluded_pos.txt` from a directory.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let read = |name: &str| {
            let p = dir.join(name);
            std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
        };
        CueLexicon::parse(
            &read("cue_words.txt")?,
            &read("question_words.txt")?,
            &read("excluded_pos.txt")?,
        )
        .map_err(|m| Error::parse(dir, 0, m))
    }
}

/// Surface variants of a cue verb: base, third person, past, participle, progressive.
pub fn verb_forms(base: &str) -> Vec<String> {
    let irregular: &[&str] = match base {
        "lead" => &["lead", "leads", "led", "leading"],
        "bring" => &["bring", "brings", "brought", "bringing"],
        "give" => &["give", "gives", "gave", "given", "giving"],
        "stem" => &["stem", "stems", "stemmed", "stemming"],
        _ => &[],
    };
    if !irregular.is_empty() {
        return irregular.iter().map(|s| s.to_string()).collect();
    }
    if let Some(stem) = base.strip_suffix('e') {
        vec![
            base.to_string(),
            format!("{base}s"),
            format!("{base}d"),
            format!("{stem}ing"),
        ]
    } else {
        vec![
            base.to_string(),
            format!("{base}s"),
            format!("{base}ed"),
            format!("{base}ing"),
        ]
    }
}

// Approximates the excluded POS tags when the corpus carries none.
const FUNCTION_WORDS: &[&str] = &[
    // CC
    "and", "or", "but", "nor", "yet", "either", "neither", "&",
    // IN
    "about", "above", "across", "after", "against", "along", "although", "among", "around", "as", "at",
    "because", "before", "behind", "below", "beneath", "beside", "between", "beyond", "by", "despite",
    "during", "except", "for", "from", "if", "in", "inside", "into", "like", "near", "of", "off", "on",
    "onto", "out", "outside", "over", "since", "than", "that", "though", "through", "throughout",
    "till", "toward", "towards", "under", "unless", "until", "upon", "via", "whereas", "whether",
    "while", "with", "within", "without",
    // TO
    "to",
    // WDT, WP
    "which", "whatever", "whichever", "who", "whom", "what", "whoever", "whomever",
    // WRB
    "how", "when", "where", "why", "whenever", "wherever",
];

const PASSIVE_AUX: &[&str] = &["be", "been", "being", "is", "are", "was", "were", "get", "gets", "got"];

#[derive(Clone, Debug, Deserialize)]
pub struct CorpusRecord {
    pub id: serde_json::Value,
    pub question: String,
    pub answer: String,
    #[serde(default)]
    pub pos_tags: Option<Vec<String>>,
    #[serde(default)]
    pub split: Option<Split>,
}

impl CorpusRecord {
    pub fn id_string(&self) -> String {
        match &self.id {
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ExtractionReport {
    pub examples: Vec<QAExample>,
    pub no_pattern: usize,
    pub no_answer: usize,
    pub excluded_pos: usize,
    /// Ids of records with more than one cue word; the leftmost cue was used.
    pub multi_cue: Vec<String>,
}

fn strip_token(token: &str) -> String {
    token
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase()
}

fn normalize_answer(answer: &str) -> Option<Label> {
    let first = answer.split_whitespace().next()?;
    strip_token(first).parse().ok()
}

struct CueMatch {
    start: usize,
    /// First token after the cue (and any preposition / "by").
    end: usize,
    inverted: bool,
}

impl CueLexicon {
    fn match_at(&self, tokens: &[String], at: usize) -> Option<CueMatch> {
        let mut best: Option<(usize, CueMatch)> = None;
        for cue in &self.cue_words {
            if !verb_forms(&cue.words[0]).iter().any(|f| *f == tokens[at]) {
                continue;
            }
            let rest = &cue.words[1..];
            if tokens.len() < at + 1 + rest.len() || tokens[at + 1..at + 1 + rest.len()] != *rest {
                continue;
            }
            let mut end = at + 1 + rest.len();
            let mut inverted = cue.inverts_roles();
            let mut preps: Vec<&str> = cue.preposition.iter().map(String::as_str).collect();
            if cue.words[0] == "originate" {
                preps.extend(["from", "in"]);
            }
            if end < tokens.len() && tokens[end] == "by" {
                end += 1;
                inverted = !inverted;
            } else if end < tokens.len() && preps.contains(&tokens[end].as_str()) {
                end += 1;
            }
            let len = cue.words.len();
            if best.as_ref().map_or(true, |(l, _)| len > *l) {
                best = Some((
                    len,
                    CueMatch {
                        start: at,
                        end,
                        inverted,
                    },
                ));
            }
        }
        best.map(|(_, m)| m)
    }

    /// Extracts one example or the reason it was skipped.
    fn extract_one(&self, record: &CorpusRecord) -> std::result::Result<(QAExample, bool), Skip> {
        let raw: Vec<&str> = record.question.split_whitespace().collect();
        let tokens: Vec<String> = raw.iter().map(|t| strip_token(t)).collect();
        if tokens.is_empty() {
            return Err(Skip::NoPattern);
        }
        let first = usize::from(self.question_words.contains(&tokens[0]));

        let mut matches = (first..tokens.len()).filter_map(|i| self.match_at(&tokens, i));
        let cue = matches.next().ok_or(Skip::NoPattern)?;
        let multi = matches.any(|m| m.start >= cue.end);

        let mut left_end = cue.start;
        while left_end > first && PASSIVE_AUX.contains(&tokens[left_end - 1].as_str()) {
            left_end -= 1;
        }
        let left = first..left_end;
        let right = cue.end..tokens.len();
        let left_text = tokens[left.clone()].join(" ");
        let right_text = tokens[right.clone()].join(" ");
        if left_text.trim().is_empty() || right_text.trim().is_empty() {
            return Err(Skip::NoPattern);
        }

        let excluded = match &record.pos_tags {
            Some(tags) if tags.len() == raw.len() => left
                .clone()
                .chain(right.clone())
                .any(|i| self.excluded_pos.iter().any(|x| x.eq_ignore_ascii_case(tags[i].trim()))),
            _ => left
                .clone()
                .chain(right.clone())
                .any(|i| FUNCTION_WORDS.contains(&tokens[i].as_str())),
        };
        if excluded {
            return Err(Skip::ExcludedPos);
        }

        let label = normalize_answer(&record.answer).ok_or(Skip::NoAnswer)?;
        let (cause, effect) = if cue.inverted {
            (right_text, left_text)
        } else {
            (left_text, right_text)
        };
        let example = QAExample {
            id: record.id_string(),
            question: record.question.trim().to_string(),
            cause,
            effect,
            label,
            split: record.split.unwrap_or_default(),
        };
        Ok((example, multi))
    }

    /// Cause and effect of a free-text question, or `None` when no cue pattern matches.
    pub fn parse_question(&self, text: &str) -> Option<(String, String)> {
        let record = CorpusRecord {
            id: serde_json::Value::Null,
            question: text.to_string(),
            answer: "yes".into(),
            pos_tags: None,
            split: None,
        };
        self.extract_one(&record).ok().map(|(ex, _)| (ex.cause, ex.effect))
    }
}

enum Skip {
    NoPattern,
    NoAnswer,
    ExcludedPos,
}

/// Applies the pattern `[question word]? [cause/effect] [cue word] [cause/effect]`
/// to every record, preserving corpus order.
pub fn extract_questions<'a>(
    corpus: impl IntoIterator<Item = &'a CorpusRecord>,
    lexicon: &CueLexicon,
) -> ExtractionReport {
    let mut report = ExtractionReport::default();
    for record in corpus {
        match lexicon.extract_one(record) {
            Ok((example, multi)) => {
                if multi {
                    report.multi_cue.push(example.id.clone());
                }
                report.examples.push(example);
            }
            Err(Skip::NoPattern) => report.no_pattern += 1,
            Err(Skip::NoAnswer) => report.no_answer += 1,
            Err(Skip::ExcludedPos) => report.excluded_pos += 1,
        }
    }
    report
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<CorpusRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?);
    }
    Ok(out)
}

const DATASET_HEADER: &str = "id\tquestion\tcause\teffect\tlabel\tsplit";

fn tsv_field(s: &str) -> String {
    s.replace(['\t', '\n', '\r'], " ")
}

pub fn write_dataset(path: impl AsRef<Path>, examples: &[QAExample]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{DATASET_HEADER}").map_err(io)?;
    for ex in examples {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}",
            tsv_field(&ex.id),
            tsv_field(&ex.question),
            tsv_field(&ex.cause),
            tsv_field(&ex.effect),
            ex.label,
            ex.split
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<QAExample>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() || (i == 0 && line.starts_with("id\t")) {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(Error::parse(path, i + 1, format!("expected 6 fields, found {}", fields.len())));
        }
        let bad = |m: String| Error::parse(path, i + 1, m);
        out.push(QAExample {
            id: fields[0].to_string(),
            question: fields[1].to_string(),
            cause: fields[2].to_string(),
            effect: fields[3].to_string(),
            label: fields[4].parse().map_err(bad)?,
            split: fields[5].parse().map_err(|m| Error::parse(path, i + 1, m))?,
        });
    }
    Ok(out)
}

/// Positive train/validation examples whose cause and effect both link.
pub fn filter_training_set(graph: &CausalGraph, examples: &[QAExample]) -> Vec<QAExample> {
    examples
        .iter()
        .filter(|ex| ex.label == Label::Yes && ex.split != Split::Test)
        .filter(|ex| graph.link(&ex.cause).is_some() && graph.link(&ex.effect).is_some())
        .cloned()
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CorpusStats {
    pub count: usize,
    pub empty: bool,
    pub mean_chars: f64,
    pub mean_words: f64,
    /// (yes, no) counts per split.
    pub labels: BTreeMap<Split, (usize, usize)>,
}

pub fn corpus_stats(examples: &[QAExample]) -> CorpusStats {
    if examples.is_empty() {
        return CorpusStats {
            empty: true,
            ..CorpusStats::default()
        };
    }
    let n = examples.len() as f64;
    let chars: usize = examples.iter().map(|e| e.question.chars().count()).sum();
    let words: usize = examples.iter().map(|e| e.question.split_whitespace().count()).sum();
    let mut labels = BTreeMap::new();
    for ex in examples {
        let entry: &mut (usize, usize) = labels.entry(ex.split).or_default();
        match ex.label {
            Label::Yes => entry.0 += 1,
            Label::No => entry.1 += 1,
        }
    }
    CorpusStats {
        count: examples.len(),
        empty: false,
        mean_chars: chars as f64 / n,
        mean_words: words as f64 / n,
        labels,
    }
}
