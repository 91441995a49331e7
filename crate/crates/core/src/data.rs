//! Examples, episodes and task sampling.
//!
//! A corpus maps dense label ids to span-annotated examples. Event types in the
//! synthetic generator are realized as disjoint sets of signature trigger
//! tokens embedded in random background contexts, so that types are learnable
//! without a pretrained language model.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::hash::{Hash, Hasher};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::seeded_rng;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const MASK: &str = "<mask>";

/// Words used by the built-in prompt templates. They are always present in a
/// vocabulary so that every template can be tokenized.
pub const PROMPT_WORDS: [&str; 13] = [
    "A", "event", "This", "text", "describes", "a", "topic", "is", "about", "[", "Event", ":", "]",
];

const MAX_VOCAB: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::with_reserved()
    }
}

impl Vocabulary {
    /// Special tokens followed by the prompt words.
    pub fn with_reserved() -> Self {
        let mut v = Self::from(Vec::new());
        for t in [PAD, UNK, MASK].into_iter().chain(PROMPT_WORDS) {
            v.insert(t);
        }
        v
    }

    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or_else(|| self.id(UNK).expect("reserved <unk>"))
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn mask_id(&self) -> usize {
        self.id(MASK).expect("reserved <mask>")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TriggerSpan {
    pub start: usize,
    pub end: usize,
}

impl TriggerSpan {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn is_valid_for(&self, len: usize) -> bool {
        self.start < self.end && self.end <= len
    }

    /// 0/1 target per context token.
    pub fn mask(&self, len: usize) -> Vec<usize> {
        (0..len).map(|i| usize::from(i >= self.start && i < self.end)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub trigger_span: TriggerSpan,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_text: Option<String>,
}

impl Example {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if !self.trigger_span.is_valid_for(self.tokens.len()) {
            return Err(Error::Contract(format!(
                "trigger span [{}, {}) invalid for context of length {}",
                self.trigger_span.start,
                self.trigger_span.end,
                self.tokens.len()
            )));
        }
        if let Some(&t) = self.tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::Contract(format!("token id {t} outside vocabulary of {vocab_size}")));
        }
        Ok(())
    }
}

/// Label id → examples of that label.
pub type LabelPool = BTreeMap<usize, Vec<Example>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub label_names: Vec<String>,
    pub pool: LabelPool,
}

impl Corpus {
    pub fn num_examples(&self) -> usize {
        self.pool.values().map(Vec::len).sum()
    }

    pub fn num_labels(&self) -> usize {
        self.label_names.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub num_event_types: usize,
    pub triggers_per_type: usize,
    pub background_vocab: usize,
    pub context_len_range: (usize, usize),
    pub examples_per_type: usize,
    pub trigger_noise: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            num_event_types: 20,
            triggers_per_type: 2,
            background_vocab: 60,
            context_len_range: (8, 14),
            examples_per_type: 60,
            trigger_noise: 0.0,
            seed: 7,
        }
    }
}

impl CorpusSpec {
    pub fn vocab_size(&self) -> usize {
        Vocabulary::with_reserved().len() + self.num_event_types * self.triggers_per_type + self.background_vocab
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("corpus: {m}")));
        if self.num_event_types == 0 || self.triggers_per_type == 0 {
            return fail("num_event_types and triggers_per_type must be positive");
        }
        if self.background_vocab == 0 {
            return fail("background_vocab must be positive");
        }
        let (lo, hi) = self.context_len_range;
        if lo == 0 || lo > hi {
            return fail("context_len_range must satisfy 1 <= min <= max");
        }
        if self.examples_per_type == 0 {
            return fail("examples_per_type must be positive");
        }
        if !(0.0..=1.0).contains(&self.trigger_noise) {
            return fail("trigger_noise must lie in [0, 1]");
        }
        if self.trigger_noise > 0.0 && self.num_event_types < 2 {
            return fail("trigger_noise needs at least two event types");
        }
        if self.vocab_size() > MAX_VOCAB {
            return fail(&format!(
                "{} signature triggers plus {} background tokens exceed the vocabulary limit of {MAX_VOCAB}",
                self.num_event_types * self.triggers_per_type,
                self.background_vocab
            ));
        }
        Ok(())
    }

    pub fn trigger_token_name(event_type: usize, k: usize) -> String {
        format!("trg{event_type}_{k}")
    }

    pub fn background_token_name(j: usize) -> String {
        format!("w{j}")
    }
}

/// Deterministic synthetic corpus. Token layout: reserved tokens, then the
/// signature triggers type-major, then background words.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut vocab = Vocabulary::with_reserved();
    let mut signatures = Vec::with_capacity(spec.num_event_types);
    for t in 0..spec.num_event_types {
        let ids: Vec<usize> = (0..spec.triggers_per_type)
            .map(|k| vocab.insert(&CorpusSpec::trigger_token_name(t, k)))
            .collect();
        signatures.push(ids);
    }
    let background: Vec<usize> = (0..spec.background_vocab)
        .map(|j| vocab.insert(&CorpusSpec::background_token_name(j)))
        .collect();

    let mut rng = seeded_rng(spec.seed, &[0xC0_4B05]);
    let mut pool = LabelPool::new();
    let (lo, hi) = spec.context_len_range;
    for label in 0..spec.num_event_types {
        let mut examples = Vec::with_capacity(spec.examples_per_type);
        for _ in 0..spec.examples_per_type {
            let len = rng.gen_range(lo..=hi);
            let mut tokens: Vec<usize> = (0..len).map(|_| background[rng.gen_range(0..background.len())]).collect();
            let pos = rng.gen_range(0..len);
            let source = if spec.trigger_noise > 0.0 && rng.gen_bool(spec.trigger_noise) {
                let other = rng.gen_range(0..spec.num_event_types - 1);
                if other >= label {
                    other + 1
                } else {
                    other
                }
            } else {
                label
            };
            tokens[pos] = signatures[source][rng.gen_range(0..spec.triggers_per_type)];
            let raw = tokens.iter().map(|&t| vocab.token(t)).collect::<Vec<_>>().join(" ");
            examples.push(Example {
                tokens,
                trigger_span: TriggerSpan::new(pos, pos + 1),
                label,
                raw_text: Some(raw),
            });
        }
        pool.insert(label, examples);
    }
    let label_names = (0..spec.num_event_types).map(|t| format!("type{t}")).collect();
    Ok(Corpus {
        vocab,
        label_names,
        pool,
    })
}

#[derive(Debug, Deserialize)]
struct JsonRecord {
    tokens: Vec<String>,
    trigger_start: usize,
    trigger_end: usize,
    label: String,
}

#[derive(Debug, Serialize)]
struct JsonRecordOut<'a> {
    tokens: Vec<&'a str>,
    trigger_start: usize,
    trigger_end: usize,
    label: &'a str,
}

/// How labels and tokens of an ingested file map to ids.
#[derive(Clone, Debug)]
pub enum LabelIndex {
    /// Build a fresh vocabulary and dense label ids in order of first appearance.
    Build,
    /// Reuse an existing vocabulary (unknown tokens map to `<unk>`) and label
    /// set (unknown labels are rejected).
    Fixed { vocab: Vocabulary, label_names: Vec<String> },
}

pub fn load_jsonl(path: &Path, index: LabelIndex) -> Result<Corpus> {
    let file = std::fs::File::open(path)?;
    let (mut vocab, mut label_names, building) = match index {
        LabelIndex::Build => (Vocabulary::with_reserved(), Vec::new(), true),
        LabelIndex::Fixed { vocab, label_names } => (vocab, label_names, false),
    };
    let mut label_ids: HashMap<String, usize> =
        label_names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
    let mut pool = LabelPool::new();
    let ingest = |line: usize, message: String| Error::Ingest {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut count = 0;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonRecord = serde_json::from_str(&line).map_err(|e| ingest(lineno, e.to_string()))?;
        let span = TriggerSpan::new(rec.trigger_start, rec.trigger_end);
        if !span.is_valid_for(rec.tokens.len()) {
            return Err(ingest(
                lineno,
                format!(
                    "trigger span [{}, {}) out of range for {} tokens",
                    rec.trigger_start,
                    rec.trigger_end,
                    rec.tokens.len()
                ),
            ));
        }
        let label = match label_ids.get(&rec.label) {
            Some(&id) => id,
            None if building => {
                label_names.push(rec.label.clone());
                label_ids.insert(rec.label.clone(), label_names.len() - 1);
                label_names.len() - 1
            }
            None => return Err(ingest(lineno, format!("unknown label {:?}", rec.label))),
        };
        let tokens = rec
            .tokens
            .iter()
            .map(|t| if building { vocab.insert(t) } else { vocab.id_or_unk(t) })
            .collect();
        pool.entry(label).or_default().push(Example {
            tokens,
            trigger_span: span,
            label,
            raw_text: Some(rec.tokens.join(" ")),
        });
        count += 1;
    }
    if count == 0 {
        return Err(ingest(1, "file contains no records".into()));
    }
    Ok(Corpus {
        vocab,
        label_names,
        pool,
    })
}

pub fn export_jsonl(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for examples in corpus.pool.values() {
        for ex in examples {
            let rec = JsonRecordOut {
                tokens: ex.tokens.iter().map(|&t| corpus.vocab.token(t)).collect(),
                trigger_start: ex.trigger_span.start,
                trigger_end: ex.trigger_span.end,
                label: &corpus.label_names[ex.label],
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub query_per_class: usize,
    pub seed: u64,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 5,
            query_per_class: 5,
            seed: 0,
        }
    }
}

impl EpisodeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 {
            return Err(Error::Config("episode: n_way must be at least 2".into()));
        }
        if self.query_per_class == 0 {
            return Err(Error::Config("episode: query_per_class must be at least 1".into()));
        }
        Ok(())
    }

    pub fn is_zero_shot(&self) -> bool {
        self.k_shot == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub support: Vec<Example>,
    pub query: Vec<Example>,
    /// Global label id → episode-local class index (ascending global id).
    pub label_map: BTreeMap<usize, usize>,
    pub task_id: u64,
}

impl Task {
    pub fn n_way(&self) -> usize {
        self.label_map.len()
    }

    pub fn local(&self, example: &Example) -> usize {
        self.label_map[&example.label]
    }

    pub fn support_classes(&self) -> Vec<usize> {
        self.support.iter().map(|e| self.local(e)).collect()
    }

    pub fn query_classes(&self) -> Vec<usize> {
        self.query.iter().map(|e| self.local(e)).collect()
    }

    pub fn labels(&self) -> BTreeSet<usize> {
        self.label_map.keys().copied().collect()
    }
}

fn content_id(label_map: &BTreeMap<usize, usize>, support: &[Example], query: &[Example]) -> u64 {
    let mut h = DefaultHasher::new();
    label_map.hash(&mut h);
    support.hash(&mut h);
    query.hash(&mut h);
    h.finish()
}

fn choose_labels(pool: &LabelPool, count: usize, per_label: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let eligible: Vec<usize> = pool
        .iter()
        .filter(|(_, v)| v.len() >= per_label)
        .map(|(&l, _)| l)
        .collect();
    if eligible.len() < count {
        return Err(Error::Sampling(format!(
            "need {count} labels with at least {per_label} examples each, pool offers {}",
            eligible.len()
        )));
    }
    Ok(eligible.choose_multiple(rng, count).copied().collect())
}

fn build_task(pool: &LabelPool, labels: &[usize], k: usize, q: usize, rng: &mut ChaCha8Rng) -> Task {
    let mut sorted = labels.to_vec();
    sorted.sort_unstable();
    let label_map: BTreeMap<usize, usize> = sorted.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    let mut support = Vec::with_capacity(sorted.len() * k);
    let mut query = Vec::with_capacity(sorted.len() * q);
    for &label in &sorted {
        let examples = &pool[&label];
        let picked: Vec<&Example> = examples.choose_multiple(rng, k + q).collect();
        support.extend(picked[..k].iter().map(|&e| e.clone()));
        query.extend(picked[k..].iter().map(|&e| e.clone()));
    }
    let task_id = content_id(&label_map, &support, &query);
    Task {
        support,
        query,
        label_map,
        task_id,
    }
}

/// Samples one N-way K-shot task. Examples are drawn without replacement, so
/// support and query never share an example.
pub fn sample_task(pool: &LabelPool, spec: &EpisodeSpec, rng: &mut ChaCha8Rng) -> Result<Task> {
    spec.validate().map_err(|e| Error::Sampling(e.to_string()))?;
    let per_label = spec.k_shot + spec.query_per_class;
    let labels = choose_labels(pool, spec.n_way, per_label, rng)?;
    Ok(build_task(pool, &labels, spec.k_shot, spec.query_per_class, rng))
}

/// Support and query tasks over disjoint label sets, for zero-shot meta
/// training. The support side carries only support examples (with
/// `k_shot` per class, or `query_per_class` when `k_shot` is 0); the query
/// side carries only query examples.
pub fn sample_disjoint_pair(pool: &LabelPool, spec: &EpisodeSpec, rng: &mut ChaCha8Rng) -> Result<(Task, Task)> {
    spec.validate().map_err(|e| Error::Sampling(e.to_string()))?;
    let support_shot = if spec.k_shot > 0 { spec.k_shot } else { spec.query_per_class };
    let per_label = support_shot.max(spec.query_per_class);
    if pool.len() < 2 * spec.n_way {
        return Err(Error::Sampling(format!(
            "disjoint pairs need {} labels, pool has {}",
            2 * spec.n_way,
            pool.len()
        )));
    }
    let labels = choose_labels(pool, 2 * spec.n_way, per_label, rng)?;
    let (sup_labels, qry_labels) = labels.split_at(spec.n_way);
    let support = build_task(pool, sup_labels, support_shot, 0, rng);
    let query = build_task(pool, qry_labels, 0, spec.query_per_class, rng);
    Ok((support, query))
}

/// Label-disjoint train/validation/test pools.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: LabelPool,
    pub valid: LabelPool,
    pub test: LabelPool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SplitRule {
    /// Fractions of the label count; the test split takes the remainder.
    Ratio { train: f64, valid: f64 },
    Counts { train: usize, valid: usize, test: usize },
}

impl Default for SplitRule {
    fn default() -> Self {
        SplitRule::Ratio { train: 0.8, valid: 0.1 }
    }
}

pub fn split_by_label(pool: &LabelPool, rule: SplitRule, seed: u64) -> Result<Splits> {
    let mut labels: Vec<usize> = pool.keys().copied().collect();
    let n = labels.len();
    let (n_train, n_valid, n_test) = match rule {
        SplitRule::Ratio { train, valid } => {
            if !(train > 0.0 && valid >= 0.0 && train + valid <= 1.0) {
                return Err(Error::Config("split ratios must be positive and sum to at most 1".into()));
            }
            let nt = (train * n as f64).round() as usize;
            let nv = (valid * n as f64).round() as usize;
            (nt, nv, n.saturating_sub(nt + nv))
        }
        SplitRule::Counts { train, valid, test } => (train, valid, test),
    };
    if n_train + n_valid + n_test > n {
        return Err(Error::Config(format!(
            "split asks for {} labels, corpus has {n}",
            n_train + n_valid + n_test
        )));
    }
    labels.shuffle(&mut seeded_rng(seed, &[0x5_9117]));
    let take = |ls: &[usize]| -> LabelPool { ls.iter().map(|l| (*l, pool[l].clone())).collect() };
    Ok(Splits {
        train: take(&labels[..n_train]),
        valid: take(&labels[n_train..n_train + n_valid]),
        test: take(&labels[n_train + n_valid..n_train + n_valid + n_test]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            num_event_types: 10,
            examples_per_type: 50,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn corpus_is_a_pure_function_of_its_spec() {
        let a = generate_corpus(&CorpusSpec { seed: 7, ..small_spec() }).unwrap();
        let b = generate_corpus(&CorpusSpec { seed: 7, ..small_spec() }).unwrap();
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
        let c = generate_corpus(&CorpusSpec { seed: 8, ..small_spec() }).unwrap();
        assert_ne!(a.pool, c.pool);
    }

    #[test]
    fn noise_free_triggers_come_from_own_signature() {
        let spec = small_spec();
        let corpus = generate_corpus(&spec).unwrap();
        for (label, examples) in &corpus.pool {
            for ex in examples {
                let tok = corpus.vocab.token(ex.tokens[ex.trigger_span.start]);
                let own = (0..spec.triggers_per_type).any(|k| tok == CorpusSpec::trigger_token_name(*label, k));
                assert!(own, "{tok} is not a signature trigger of type {label}");
            }
        }
    }

    #[test]
    fn label_counts_by_tally() {
        let corpus = generate_corpus(&small_spec()).unwrap();
        let mut tally = BTreeMap::new();
        for examples in corpus.pool.values() {
            for ex in examples {
                *tally.entry(ex.label).or_insert(0usize) += 1;
            }
        }
        assert_eq!(tally.len(), 10);
        assert!(tally.values().all(|&c| c == 50));
        assert_eq!(corpus.num_examples(), 500);
    }

    #[test]
    fn noisy_triggers_point_at_some_signature() {
        let spec = CorpusSpec {
            trigger_noise: 0.5,
            ..small_spec()
        };
        let corpus = generate_corpus(&spec).unwrap();
        let mut foreign = 0;
        for (label, examples) in &corpus.pool {
            for ex in examples {
                let tok = corpus.vocab.token(ex.tokens[ex.trigger_span.start]);
                assert!(tok.starts_with("trg"));
                if !tok.starts_with(&format!("trg{label}_")) {
                    foreign += 1;
                }
            }
        }
        assert!(foreign > 150 && foreign < 350, "foreign triggers: {foreign}");
    }

    #[test]
    fn oversized_vocabulary_is_rejected() {
        let spec = CorpusSpec {
            num_event_types: 1000,
            triggers_per_type: 100,
            ..small_spec()
        };
        assert!(matches!(generate_corpus(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn jsonl_ingest_maps_fields_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(
            f,
            r#"{{"tokens":["he","resigned"],"trigger_start":1,"trigger_end":2,"label":"Personnel.End-Position"}}"#
        )
        .unwrap();
        writeln!(f, r#"{{"tokens":["she","quit","today"],"trigger_start":1,"trigger_end":2,"label":"Personnel.End-Position"}}"#).unwrap();
        writeln!(f, r#"{{"tokens":["troops","attacked"],"trigger_start":1,"trigger_end":2,"label":"Conflict.Attack"}}"#).unwrap();
        drop(f);
        let corpus = load_jsonl(&path, LabelIndex::Build).unwrap();
        assert_eq!(corpus.label_names, vec!["Personnel.End-Position", "Conflict.Attack"]);
        let first = &corpus.pool[&0][0];
        assert_eq!(first.trigger_span, TriggerSpan::new(1, 2));
        assert_eq!(corpus.vocab.token(first.tokens[1]), "resigned");
        assert_eq!(corpus.pool[&0].len(), 2);
        assert_eq!(corpus.pool[&1].len(), 1);
    }

    #[test]
    fn jsonl_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"tokens\":[\"a\"],\"trigger_start\":0,\"trigger_end\":1,\"label\":\"x\"}\n{\"tokens\":[\"a\"],\"trigger_start\":0,\"trigger_end\":2,\"label\":\"x\"}\n",
        )
        .unwrap();
        match load_jsonl(&path, LabelIndex::Build) {
            Err(Error::Ingest { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected ingest error, got {other:?}"),
        }
        std::fs::write(&path, "{\"tokens\":[\"a\"],\"trigger_end\":1,\"label\":\"x\"}\n").unwrap();
        match load_jsonl(&path, LabelIndex::Build) {
            Err(Error::Ingest { line, message, .. }) => {
                assert_eq!(line, 1);
                assert!(message.contains("trigger_start"), "{message}");
            }
            other => panic!("expected ingest error, got {other:?}"),
        }
        std::fs::write(&path, "").unwrap();
        assert!(matches!(load_jsonl(&path, LabelIndex::Build), Err(Error::Ingest { .. })));
    }

    #[test]
    fn export_then_ingest_round_trips() {
        let corpus = generate_corpus(&CorpusSpec {
            num_event_types: 4,
            examples_per_type: 6,
            ..CorpusSpec::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        export_jsonl(&corpus, &path).unwrap();
        let back = load_jsonl(
            &path,
            LabelIndex::Fixed {
                vocab: corpus.vocab.clone(),
                label_names: corpus.label_names.clone(),
            },
        )
        .unwrap();
        assert_eq!(back.pool, corpus.pool);
    }

    fn tiny_pool(labels: usize, per: usize) -> LabelPool {
        let corpus = generate_corpus(&CorpusSpec {
            num_event_types: labels,
            examples_per_type: per,
            ..CorpusSpec::default()
        })
        .unwrap();
        corpus.pool
    }

    #[test]
    fn exact_exhaustion_two_by_two() {
        let pool = tiny_pool(2, 2);
        let spec = EpisodeSpec {
            n_way: 2,
            k_shot: 1,
            query_per_class: 1,
            seed: 0,
        };
        let task = sample_task(&pool, &spec, &mut seeded_rng(1, &[])).unwrap();
        assert_eq!(task.support.len(), 2);
        assert_eq!(task.query.len(), 2);
        for s in &task.support {
            assert!(!task.query.contains(s));
        }
    }

    #[test]
    fn zero_shot_tasks_have_empty_support() {
        let pool = tiny_pool(6, 10);
        let spec = EpisodeSpec {
            n_way: 3,
            k_shot: 0,
            query_per_class: 4,
            seed: 0,
        };
        let task = sample_task(&pool, &spec, &mut seeded_rng(3, &[])).unwrap();
        assert!(task.support.is_empty());
        assert_eq!(task.query.len(), 12);
    }

    #[test]
    fn label_map_is_ascending_global_id() {
        let pool = tiny_pool(10, 10);
        let spec = EpisodeSpec::default();
        let task = sample_task(&pool, &spec, &mut seeded_rng(9, &[])).unwrap();
        let globals: Vec<usize> = task.label_map.keys().copied().collect();
        let locals: Vec<usize> = task.label_map.values().copied().collect();
        assert!(globals.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(locals, (0..5).collect::<Vec<_>>());
    }

    #[test]
    fn per_class_counts_and_coverage_by_tally() {
        let pool = tiny_pool(10, 12);
        let spec = EpisodeSpec {
            n_way: 5,
            k_shot: 2,
            query_per_class: 3,
            seed: 0,
        };
        let mut rng = seeded_rng(11, &[]);
        let mut seen = BTreeSet::new();
        for _ in 0..1000 {
            let task = sample_task(&pool, &spec, &mut rng).unwrap();
            let mut sup = [0; 5];
            let mut qry = [0; 5];
            for c in task.support_classes() {
                sup[c] += 1;
            }
            for c in task.query_classes() {
                qry[c] += 1;
            }
            assert!(sup.iter().all(|&c| c == 2));
            assert!(qry.iter().all(|&c| c == 3));
            seen.extend(task.labels());
        }
        assert_eq!(seen.len(), 10);
    }

    #[test]
    fn insufficient_pools_are_sampling_errors() {
        let pool = tiny_pool(4, 3);
        let spec = EpisodeSpec {
            n_way: 5,
            ..EpisodeSpec::default()
        };
        assert!(matches!(sample_task(&pool, &spec, &mut seeded_rng(0, &[])), Err(Error::Sampling(_))));
        let spec = EpisodeSpec {
            n_way: 2,
            k_shot: 2,
            query_per_class: 2,
            seed: 0,
        };
        assert!(matches!(sample_task(&pool, &spec, &mut seeded_rng(0, &[])), Err(Error::Sampling(_))));
    }

    #[test]
    fn disjoint_pairs() {
        let spec = EpisodeSpec {
            n_way: 5,
            k_shot: 0,
            query_per_class: 3,
            seed: 0,
        };
        let pool = tiny_pool(10, 8);
        let mut rng = seeded_rng(5, &[]);
        for _ in 0..1000 {
            let (s, q) = sample_disjoint_pair(&pool, &spec, &mut rng).unwrap();
            assert!(s.labels().is_disjoint(&q.labels()));
            assert_eq!(s.support.len(), 15);
            assert!(s.query.is_empty());
            assert_eq!(q.query.len(), 15);
        }
        let a = sample_disjoint_pair(&pool, &spec, &mut seeded_rng(42, &[])).unwrap();
        let b = sample_disjoint_pair(&pool, &spec, &mut seeded_rng(42, &[])).unwrap();
        assert_eq!(a, b);
        let small = tiny_pool(8, 8);
        assert!(matches!(
            sample_disjoint_pair(&small, &spec, &mut seeded_rng(0, &[])),
            Err(Error::Sampling(_))
        ));
    }

    #[test]
    fn splits_are_label_disjoint() {
        let pool = tiny_pool(20, 2);
        let s = split_by_label(&pool, SplitRule::default(), 3).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (16, 2, 2));
        let t: BTreeSet<_> = s.train.keys().collect();
        assert!(s.valid.keys().all(|k| !t.contains(k)));
        assert!(s.test.keys().all(|k| !t.contains(k) && !s.valid.contains_key(k)));
        let c = split_by_label(
            &pool,
            SplitRule::Counts {
                train: 10,
                valid: 5,
                test: 5,
            },
            3,
        )
        .unwrap();
        assert_eq!((c.train.len(), c.valid.len(), c.test.len()), (10, 5, 5));
    }
}
