//! Record types, JSON-lines IO, the pair-score filter and the
//! classification-to-retrieval conversion.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: invalid JSON: {message}")]
    ParseError { line: usize, message: String },
    #[error("line {line}: field `{field}`: {reason}")]
    SchemaViolation {
        line: usize,
        field: String,
        reason: String,
    },
    #[error("threshold {0} outside [0, 1]")]
    ThresholdOutOfRange(f64),
    #[error("scorer returned {score} for pair {index}, outside [0, 1]")]
    ScorerOutOfRange { index: usize, score: f64 },
    #[error("need at least two labels, found {0}")]
    InsufficientLabels(usize),
    #[error("no label has two members to form a positive pair (e.g. `{0}`)")]
    SingletonLabel(String),
    #[error("invalid size: {0}")]
    InvalidSize(String),
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schema {
    Pair,
    Retrieval,
    Sts,
    Classification,
    Passage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    Text,
    OptionalText,
    Number,
    TextList,
}

/// A record stored one JSON object per line.
pub trait JsonlRecord: Serialize + DeserializeOwned {
    const SCHEMA: Schema;
    const FIELDS: &'static [(&'static str, FieldKind)];

    /// Semantic checks after the shape is known to be right; returns the
    /// offending field and reason.
    fn check(&self) -> Result<(), (&'static str, String)>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub query: String,
    pub passage: String,
    /// Source tag such as "news" or "community_qa".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRecord {
    pub query: String,
    pub positive: String,
    #[serde(default)]
    pub negatives: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StsRecord {
    pub text_a: String,
    pub text_b: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationRecord {
    pub text: String,
    pub label: String,
}

/// One corpus passage; its corpus id is its position in the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassageRecord {
    pub text: String,
}

fn non_empty(field: &'static str, s: &str) -> Result<(), (&'static str, String)> {
    if s.trim().is_empty() {
        return Err((field, "must be non-empty".into()));
    }
    Ok(())
}

impl JsonlRecord for PairRecord {
    const SCHEMA: Schema = Schema::Pair;
    const FIELDS: &'static [(&'static str, FieldKind)] = &[
        ("query", FieldKind::Text),
        ("passage", FieldKind::Text),
        ("category", FieldKind::OptionalText),
    ];

    fn check(&self) -> Result<(), (&'static str, String)> {
        non_empty("query", &self.query)?;
        non_empty("passage", &self.passage)
    }
}

impl JsonlRecord for RetrievalRecord {
    const SCHEMA: Schema = Schema::Retrieval;
    const FIELDS: &'static [(&'static str, FieldKind)] = &[
        ("query", FieldKind::Text),
        ("positive", FieldKind::Text),
        ("negatives", FieldKind::TextList),
    ];

    fn check(&self) -> Result<(), (&'static str, String)> {
        non_empty("query", &self.query)?;
        non_empty("positive", &self.positive)?;
        let mut seen = BTreeSet::new();
        for n in &self.negatives {
            non_empty("negatives", n)?;
            if *n == self.positive {
                return Err(("negatives", "contains the positive".into()));
            }
            if !seen.insert(n.as_str()) {
                return Err(("negatives", format!("duplicate negative `{n}`")));
            }
        }
        Ok(())
    }
}

impl JsonlRecord for StsRecord {
    const SCHEMA: Schema = Schema::Sts;
    const FIELDS: &'static [(&'static str, FieldKind)] = &[
        ("text_a", FieldKind::Text),
        ("text_b", FieldKind::Text),
        ("score", FieldKind::Number),
    ];

    fn check(&self) -> Result<(), (&'static str, String)> {
        non_empty("text_a", &self.text_a)?;
        non_empty("text_b", &self.text_b)?;
        if !self.score.is_finite() {
            return Err(("score", "must be finite".into()));
        }
        Ok(())
    }
}

impl JsonlRecord for ClassificationRecord {
    const SCHEMA: Schema = Schema::Classification;
    const FIELDS: &'static [(&'static str, FieldKind)] = &[("text", FieldKind::Text), ("label", FieldKind::Text)];

    fn check(&self) -> Result<(), (&'static str, String)> {
        non_empty("text", &self.text)?;
        non_empty("label", &self.label)
    }
}

impl JsonlRecord for PassageRecord {
    const SCHEMA: Schema = Schema::Passage;
    const FIELDS: &'static [(&'static str, FieldKind)] = &[("text", FieldKind::Text)];

    fn check(&self) -> Result<(), (&'static str, String)> {
        non_empty("text", &self.text)
    }
}

/// A record with the 1-based line it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Numbered<R> {
    pub line: usize,
    pub record: R,
}

fn kind_matches(kind: FieldKind, v: &Value) -> bool {
    match kind {
        FieldKind::Text => v.is_string(),
        FieldKind::OptionalText => v.is_string() || v.is_null(),
        FieldKind::Number => v.is_number(),
        FieldKind::TextList => v.as_array().is_some_and(|a| a.iter().all(Value::is_string)),
    }
}

fn parse_line<R: JsonlRecord>(line: usize, text: &str, strict: bool) -> Result<R, DataError> {
    let value: Value = serde_json::from_str(text).map_err(|e| DataError::ParseError {
        line,
        message: e.to_string(),
    })?;
    let obj = value.as_object().ok_or_else(|| DataError::ParseError {
        line,
        message: "expected a JSON object".into(),
    })?;
    for &(field, kind) in R::FIELDS {
        match obj.get(field) {
            None if matches!(kind, FieldKind::OptionalText) => {}
            // negatives may be omitted before mining
            None if matches!(kind, FieldKind::TextList) => {}
            None => {
                return Err(DataError::SchemaViolation {
                    line,
                    field: field.into(),
                    reason: "missing".into(),
                })
            }
            Some(v) if !kind_matches(kind, v) => {
                return Err(DataError::SchemaViolation {
                    line,
                    field: field.into(),
                    reason: format!("expected {kind:?}"),
                })
            }
            Some(_) => {}
        }
    }
    if strict {
        if let Some(key) = obj.keys().find(|k| !R::FIELDS.iter().any(|(f, _)| f == k)) {
            return Err(DataError::SchemaViolation {
                line,
                field: key.clone(),
                reason: "unknown field".into(),
            });
        }
    }
    let known: serde_json::Map<String, Value> = obj
        .iter()
        .filter(|(k, _)| R::FIELDS.iter().any(|(f, _)| f == k))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let record: R = serde_json::from_value(Value::Object(known)).map_err(|e| DataError::SchemaViolation {
        line,
        field: "?".into(),
        reason: e.to_string(),
    })?;
    record.check().map_err(|(field, reason)| DataError::SchemaViolation {
        line,
        field: field.into(),
        reason,
    })?;
    Ok(record)
}

/// Parses JSON lines from a reader. Blank lines are skipped; `strict` rejects
/// unknown fields.
pub fn parse_jsonl<R: JsonlRecord, In: Read>(input: In, strict: bool) -> Result<Vec<Numbered<R>>, DataError> {
    let reader = BufReader::new(input);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let text = line.map_err(|e| DataError::ParseError {
            line: line_no,
            message: e.to_string(),
        })?;
        if text.trim().is_empty() {
            continue;
        }
        out.push(Numbered {
            line: line_no,
            record: parse_line::<R>(line_no, &text, strict)?,
        });
    }
    Ok(out)
}

pub fn load_jsonl<R: JsonlRecord>(path: &Path, strict: bool) -> Result<Vec<Numbered<R>>, DataError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    parse_jsonl(file, strict)
}

/// Loads and drops line numbers.
pub fn load_records<R: JsonlRecord>(path: &Path, strict: bool) -> Result<Vec<R>, DataError> {
    Ok(load_jsonl(path, strict)?.into_iter().map(|n| n.record).collect())
}

pub fn write_jsonl<R: Serialize, W: Write>(out: W, records: &[R]) -> std::io::Result<()> {
    let mut w = BufWriter::new(out);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn save_jsonl<R: Serialize>(path: &Path, records: &[R]) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    write_jsonl(file, records).map_err(|e| io_err(path, e))
}

/// Scores a (query, passage) pair in `[0, 1]`.
pub trait PairScorer {
    fn score(&self, query: &str, passage: &str) -> f64;
}

impl<F: Fn(&str, &str) -> f64> PairScorer for F {
    fn score(&self, query: &str, passage: &str) -> f64 {
        self(query, passage)
    }
}

/// Jaccard overlap of lowercased whitespace token sets.
#[derive(Debug, Clone, Copy, Default)]
pub struct JaccardScorer;

impl PairScorer for JaccardScorer {
    fn score(&self, query: &str, passage: &str) -> f64 {
        let a: BTreeSet<String> = query.split_whitespace().map(str::to_lowercase).collect();
        let b: BTreeSet<String> = passage.split_whitespace().map(str::to_lowercase).collect();
        let union = a.union(&b).count();
        if union == 0 {
            return 0.0;
        }
        a.intersection(&b).count() as f64 / union as f64
    }
}

pub const HISTOGRAM_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub threshold: f64,
    pub input: usize,
    pub kept: usize,
    pub discarded: usize,
    /// Counts of scores in ten equal bins over `[0, 1]`; 1.0 falls in the last bin.
    pub histogram: Vec<usize>,
}

/// Keeps pairs scoring at least `threshold`, preserving input order.
pub fn filter_pairs<S: PairScorer + ?Sized>(
    pairs: &[PairRecord],
    scorer: &S,
    threshold: f64,
) -> Result<(Vec<PairRecord>, FilterReport), DataError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(DataError::ThresholdOutOfRange(threshold));
    }
    let mut kept = Vec::new();
    let mut histogram = vec![0usize; HISTOGRAM_BINS];
    for (index, pair) in pairs.iter().enumerate() {
        let score = scorer.score(&pair.query, &pair.passage);
        if !(0.0..=1.0).contains(&score) {
            return Err(DataError::ScorerOutOfRange { index, score });
        }
        let bin = ((score * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        histogram[bin] += 1;
        if score >= threshold {
            kept.push(pair.clone());
        }
    }
    let report = FilterReport {
        threshold,
        input: pairs.len(),
        kept: kept.len(),
        discarded: pairs.len() - kept.len(),
        histogram,
    };
    Ok((kept, report))
}

/// Turns labelled texts into retrieval triples: the positive is another text
/// with the same label, negatives come from other labels. Labels with a
/// single member still supply negatives but produce no anchors.
pub fn classification_to_retrieval(
    records: &[ClassificationRecord],
    seed: u64,
    negatives_per_anchor: usize,
) -> Result<Vec<RetrievalRecord>, DataError> {
    let mut order: Vec<&str> = Vec::new();
    let mut members: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        let entry = members.entry(r.label.as_str()).or_default();
        if entry.is_empty() {
            order.push(r.label.as_str());
        }
        entry.push(i);
    }
    if order.len() < 2 {
        return Err(DataError::InsufficientLabels(order.len()));
    }
    if order.iter().all(|l| members[l].len() < 2) {
        return Err(DataError::SingletonLabel(order[0].to_string()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (i, anchor) in records.iter().enumerate() {
        let same = &members[anchor.label.as_str()];
        if same.len() < 2 {
            continue;
        }
        let others: Vec<usize> = same.iter().copied().filter(|&j| j != i).collect();
        let positive = &records[*others.choose(&mut rng).expect("label has two members")].text;

        let mut pool: Vec<&str> = Vec::new();
        let mut seen = BTreeSet::new();
        for label in &order {
            if *label == anchor.label {
                continue;
            }
            for &j in &members[label] {
                let t = records[j].text.as_str();
                if t != positive && t != anchor.text && seen.insert(t) {
                    pool.push(t);
                }
            }
        }
        pool.shuffle(&mut rng);
        pool.truncate(negatives_per_anchor);
        out.push(RetrievalRecord {
            query: anchor.text.clone(),
            positive: positive.clone(),
            negatives: pool.into_iter().map(str::to_string).collect(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(q: &str, p: &str) -> PairRecord {
        PairRecord {
            query: q.into(),
            passage: p.into(),
            category: None,
        }
    }

    #[test]
    fn parses_valid_pair_file() {
        let text = "{\"query\":\"a\",\"passage\":\"b\"}\n{\"query\":\"c\",\"passage\":\"d\",\"category\":\"news\"}\n{\"query\":\"e\",\"passage\":\"f\"}\n";
        let recs = parse_jsonl::<PairRecord, _>(text.as_bytes(), true).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[1].line, 2);
        assert_eq!(recs[1].record.category.as_deref(), Some("news"));
    }

    #[test]
    fn missing_field_reports_line() {
        let text = "{\"query\":\"a\",\"passage\":\"b\"}\n{\"passage\":\"d\"}\n";
        match parse_jsonl::<PairRecord, _>(text.as_bytes(), false) {
            Err(DataError::SchemaViolation { line, field, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(field, "query");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_empty() {
        assert!(parse_jsonl::<StsRecord, _>("".as_bytes(), true).unwrap().is_empty());
    }

    #[test]
    fn strictness_controls_unknown_fields() {
        let text = "{\"text\":\"a\",\"label\":\"x\",\"extra\":1}";
        assert!(parse_jsonl::<ClassificationRecord, _>(text.as_bytes(), false).is_ok());
        assert!(matches!(
            parse_jsonl::<ClassificationRecord, _>(text.as_bytes(), true),
            Err(DataError::SchemaViolation { field, .. }) if field == "extra"
        ));
    }

    #[test]
    fn bad_json_and_bad_types() {
        assert!(matches!(
            parse_jsonl::<StsRecord, _>("{nope".as_bytes(), true),
            Err(DataError::ParseError { line: 1, .. })
        ));
        let text = "{\"text_a\":\"a\",\"text_b\":\"b\",\"score\":\"high\"}";
        assert!(matches!(
            parse_jsonl::<StsRecord, _>(text.as_bytes(), true),
            Err(DataError::SchemaViolation { field, .. }) if field == "score"
        ));
        let text = "{\"query\":\"q\",\"positive\":\"p\",\"negatives\":[\"p\"]}";
        assert!(matches!(
            parse_jsonl::<RetrievalRecord, _>(text.as_bytes(), true),
            Err(DataError::SchemaViolation { field, .. }) if field == "negatives"
        ));
        let text = "{\"query\":\"q\",\"positive\":\"p\"}";
        let r = parse_jsonl::<RetrievalRecord, _>(text.as_bytes(), true).unwrap();
        assert!(r[0].record.negatives.is_empty());
    }

    #[test]
    fn round_trip() {
        let recs = vec![
            StsRecord { text_a: "a b".into(), text_b: "c".into(), score: 0.1 + 0.2 },
            StsRecord { text_a: "é".into(), text_b: "\"q\"".into(), score: -3.5e-7 },
        ];
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &recs).unwrap();
        let back: Vec<StsRecord> = parse_jsonl(buf.as_slice(), true).unwrap().into_iter().map(|n| n.record).collect();
        assert_eq!(back, recs);
    }

    #[test]
    fn filter_threshold_boundary() {
        let pairs = vec![pair("a", "x"), pair("b", "y"), pair("c", "z")];
        let scores = [0.39, 0.40, 0.41];
        let scorer = |q: &str, _: &str| scores[(q.as_bytes()[0] - b'a') as usize];
        let (kept, report) = filter_pairs(&pairs, &scorer, 0.4).unwrap();
        assert_eq!(kept, pairs[1..].to_vec());
        assert_eq!((report.input, report.kept, report.discarded), (3, 2, 1));
        assert_eq!(report.histogram.iter().sum::<usize>(), 3);

        let (all, _) = filter_pairs(&pairs, &scorer, 0.0).unwrap();
        assert_eq!(all.len(), 3);

        let bad = |_: &str, _: &str| 1.2;
        assert!(matches!(filter_pairs(&pairs, &bad, 0.4), Err(DataError::ScorerOutOfRange { index: 0, .. })));
        assert!(matches!(filter_pairs(&pairs, &scorer, 1.5), Err(DataError::ThresholdOutOfRange(_))));
    }

    #[test]
    fn jaccard() {
        assert_eq!(JaccardScorer.score("a b", "A B"), 1.0);
        assert_eq!(JaccardScorer.score("a b", "b c"), 1.0 / 3.0);
        assert_eq!(JaccardScorer.score("a", "z"), 0.0);
    }

    fn cls(text: &str, label: &str) -> ClassificationRecord {
        ClassificationRecord {
            text: text.into(),
            label: label.into(),
        }
    }

    #[test]
    fn classification_conversion_forced_case() {
        let recs = vec![cls("t1", "A"), cls("t2", "A"), cls("t3", "B")];
        let out = classification_to_retrieval(&recs, 0, 4).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].query, "t1");
        assert_eq!(out[0].positive, "t2");
        assert_eq!(out[0].negatives, vec!["t3".to_string()]);
        assert_eq!(out[1].positive, "t1");
    }

    #[test]
    fn classification_conversion_errors_and_determinism() {
        assert!(matches!(
            classification_to_retrieval(&[cls("a", "A"), cls("b", "A")], 0, 1),
            Err(DataError::InsufficientLabels(1))
        ));
        assert!(matches!(
            classification_to_retrieval(&[cls("a", "A"), cls("b", "B")], 0, 1),
            Err(DataError::SingletonLabel(_))
        ));
        let recs: Vec<_> = (0..30).map(|i| cls(&format!("t{i}"), &format!("L{}", i % 4))).collect();
        let a = classification_to_retrieval(&recs, 9, 3).unwrap();
        assert_eq!(a, classification_to_retrieval(&recs, 9, 3).unwrap());
        let label_of = |t: &str| recs.iter().find(|r| r.text == t).unwrap().label.clone();
        for r in &a {
            assert_eq!(label_of(&r.positive), label_of(&r.query));
            assert_ne!(r.positive, r.query);
            assert_eq!(r.negatives.len(), 3);
            assert!(r.negatives.iter().all(|n| label_of(n) != label_of(&r.query)));
        }
    }
}
