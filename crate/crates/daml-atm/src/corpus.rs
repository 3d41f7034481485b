//! Multi-domain non-parallel corpus handling.
//!
//! Ingests style-labelled JSON-lines corpora, builds the shared vocabulary
//! with reserved prefix tokens, encodes sentences for the model, and samples
//! the meta-tasks and domain splits the meta-learning stages consume.
//!
//! Corpus file format: UTF-8 JSON lines, one object per line:
//! `{"text": ..., "style": "negative"|"positive", "domain": ...}`.
//! Reference files carry `{"source", "reference", "target_style"}`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STYLE_COUNT: usize = 2;
pub const TASK_PREFIX_COUNT: usize = 2;
/// PAD, BOS, EOS, UNK + one prefix token per style + one per task kind.
pub const RESERVED_TOKENS: usize = 4 + STYLE_COUNT + TASK_PREFIX_COUNT;

/// Style label set. Experiments in this crate use the two-label sentiment
/// set; transfers are explicit (source, target) pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    Negative,
    Positive,
}

impl Style {
    pub const ALL: [Style; STYLE_COUNT] = [Style::Negative, Style::Positive];

    pub fn opposite(self) -> Style {
        match self {
            Style::Negative => Style::Positive,
            Style::Positive => Style::Negative,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Style::Negative => 0,
            Style::Positive => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Style::Negative => "negative",
            Style::Positive => "positive",
        }
    }

    pub fn parse(s: &str) -> Option<Style> {
        match s {
            "negative" => Some(Style::Negative),
            "positive" => Some(Style::Positive),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

/// One non-parallel sentence with its style label and domain tag.
///
/// Text is lowercased and whitespace-normalized on construction; empty text
/// is rejected.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleRecord {
    pub text: String,
    pub style: Style,
    pub domain: String,
}

impl StyleRecord {
    pub fn new(text: &str, style: Style, domain: &str) -> Result<Self> {
        let text = normalize_text(text);
        if text.is_empty() {
            return Err(Error::InvalidConfig(
                "record text is empty after whitespace normalization".into(),
            ));
        }
        Ok(StyleRecord {
            text,
            style,
            domain: domain.to_string(),
        })
    }

    pub fn tokens(&self) -> Vec<&str> {
        self.text.split_whitespace().collect()
    }
}

pub fn normalize_text(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// All records of one domain within one split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainDataset {
    pub domain: String,
    pub records: Vec<StyleRecord>,
    pub split: Split,
}

impl DomainDataset {
    pub fn new(domain: &str, records: Vec<StyleRecord>, split: Split) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyDataset(domain.to_string()));
        }
        for r in &records {
            if r.domain != domain {
                return Err(Error::ImpureTask {
                    task: domain.to_string(),
                    found: r.domain.clone(),
                });
            }
        }
        Ok(DomainDataset {
            domain: domain.to_string(),
            records,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Task prefix kinds prepended to every encoder input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskPrefix {
    /// Reproduce the input in its own style.
    Reconstruct,
    /// Rewrite the input toward the target style.
    Transfer,
}

impl TaskPrefix {
    pub const ALL: [TaskPrefix; TASK_PREFIX_COUNT] = [TaskPrefix::Reconstruct, TaskPrefix::Transfer];

    pub fn index(self) -> usize {
        match self {
            TaskPrefix::Reconstruct => 0,
            TaskPrefix::Transfer => 1,
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            TaskPrefix::Reconstruct => "<task:rec>",
            TaskPrefix::Transfer => "<task:tst>",
        }
    }
}

/// Role of a meta-task inside one meta iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskRole {
    MetaTrain,
    MetaVal,
}

/// A batch of `n` records forming one meta-task. Domain-adaptive tasks draw
/// every record from the task's own domain; the mixed-domain MAML baseline
/// produces tasks that fail [`MetaTask::is_pure`].
#[derive(Debug, Clone)]
pub struct MetaTask {
    pub domain: String,
    pub records: Vec<StyleRecord>,
    pub kind: TaskRole,
}

impl MetaTask {
    pub fn is_pure(&self) -> bool {
        self.records.iter().all(|r| r.domain == self.domain)
    }

    pub fn ensure_pure(&self) -> Result<()> {
        for r in &self.records {
            if r.domain != self.domain {
                return Err(Error::ImpureTask {
                    task: self.domain.clone(),
                    found: r.domain.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Disjoint cover of the source domains into meta-train and meta-validation
/// sets, redrawn every meta iteration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetaSplit {
    pub train_domains: BTreeSet<String>,
    pub val_domains: BTreeSet<String>,
}

impl MetaSplit {
    pub fn is_disjoint_cover(&self, all: &BTreeSet<String>) -> bool {
        self.train_domains.is_disjoint(&self.val_domains)
            && self
                .train_domains
                .union(&self.val_domains)
                .cloned()
                .collect::<BTreeSet<_>>()
                == *all
            && !self.train_domains.is_empty()
            && !self.val_domains.is_empty()
    }
}

/// Token/id bijection with reserved control tokens at fixed low ids.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    #[serde(skip)]
    token_to_id: BTreeMap<String, u32>,
}

impl Vocabulary {
    pub const PAD: u32 = 0;
    pub const BOS: u32 = 1;
    pub const EOS: u32 = 2;
    pub const UNK: u32 = 3;

    pub fn style_prefix(style: Style) -> u32 {
        4 + style.index() as u32
    }

    pub fn task_prefix(kind: TaskPrefix) -> u32 {
        (4 + STYLE_COUNT + kind.index()) as u32
    }

    pub fn reserved() -> Vec<String> {
        let mut v = vec![
            "<pad>".to_string(),
            "<bos>".to_string(),
            "<eos>".to_string(),
            "<unk>".to_string(),
        ];
        for s in Style::ALL {
            v.push(format!("<sty:{}>", s.name()));
        }
        for t in TaskPrefix::ALL {
            v.push(t.token().to_string());
        }
        v
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(Self::UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.id_to_token[id as usize]
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    /// Content token ids for a normalized text, unknown tokens mapped to UNK.
    pub fn encode_tokens(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// Tokens for an id sequence, dropping reserved/control ids.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id as usize >= RESERVED_TOKENS && (id as usize) < self.len())
            .map(|&id| self.id_to_token[id as usize].clone())
            .collect()
    }

    pub fn rebuild_index(&mut self) {
        self.token_to_id = self
            .id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
    }

    /// FNV-1a over the ordered token list; stored in checkpoints so a model
    /// is never silently paired with the wrong vocabulary.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for t in &self.id_to_token {
            for b in t.as_bytes() {
                h ^= *b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
            h ^= 0xff;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

/// Build the vocabulary over every dataset: tokens with corpus frequency
/// ≥ `min_freq` get ids ordered by frequency (desc) then lexicographically;
/// everything else encodes to UNK.
pub fn build_vocab(datasets: &[DomainDataset], min_freq: usize) -> Result<Vocabulary> {
    if datasets.is_empty() {
        return Err(Error::InvalidConfig("build_vocab needs at least one dataset".into()));
    }
    let min_freq = min_freq.max(1);
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    for ds in datasets {
        for rec in &ds.records {
            for tok in rec.text.split_whitespace() {
                *freq.entry(tok).or_insert(0) += 1;
            }
        }
    }
    let mut ranked: Vec<(&str, usize)> = freq.into_iter().filter(|&(_, c)| c >= min_freq).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

    let mut id_to_token = Vocabulary::reserved();
    id_to_token.extend(ranked.into_iter().map(|(t, _)| t.to_string()));
    let mut vocab = Vocabulary {
        id_to_token,
        token_to_id: BTreeMap::new(),
    };
    vocab.rebuild_index();
    Ok(vocab)
}

/// Encoder input: `[task prefix, target-style prefix, tokens..., EOS]`,
/// truncated to `max_len` with EOS kept as the final id.
pub fn encode_input(
    record: &StyleRecord,
    target_style: Style,
    task: TaskPrefix,
    vocab: &Vocabulary,
    max_len: usize,
) -> Vec<u32> {
    debug_assert!(max_len >= 3);
    let mut ids = Vec::with_capacity(record.text.len() / 4 + 3);
    ids.push(Vocabulary::task_prefix(task));
    ids.push(Vocabulary::style_prefix(target_style));
    ids.extend(vocab.encode_tokens(&record.text));
    ids.push(Vocabulary::EOS);
    clamp_with_eos(&mut ids, max_len);
    ids
}

/// Decoder target: `[tokens..., EOS]` with the same truncation rule.
pub fn encode_output(record: &StyleRecord, vocab: &Vocabulary, max_len: usize) -> Vec<u32> {
    let mut ids = vocab.encode_tokens(&record.text);
    ids.push(Vocabulary::EOS);
    clamp_with_eos(&mut ids, max_len);
    ids
}

fn clamp_with_eos(ids: &mut Vec<u32>, max_len: usize) {
    if ids.len() > max_len {
        ids.truncate(max_len);
        ids[max_len - 1] = Vocabulary::EOS;
    }
}

/// Uniformly split the domain set into `n_train` meta-training domains and
/// the complementary meta-validation domains.
pub fn sample_meta_split(
    domains: &BTreeSet<String>,
    n_train: usize,
    rng: &mut ChaCha8Rng,
) -> Result<MetaSplit> {
    if n_train < 1 || n_train >= domains.len() {
        return Err(Error::InvalidConfig(format!(
            "meta split needs 1 <= n_train < |domains| ({} requested over {} domains)",
            n_train,
            domains.len()
        )));
    }
    let ordered: Vec<&String> = domains.iter().collect();
    let picked = rand::seq::index::sample(rng, ordered.len(), n_train);
    let train_domains: BTreeSet<String> = picked.iter().map(|i| ordered[i].clone()).collect();
    let val_domains: BTreeSet<String> = domains.difference(&train_domains).cloned().collect();
    Ok(MetaSplit {
        train_domains,
        val_domains,
    })
}

/// Draw one meta-task of `n` records from a single domain: without
/// replacement when the domain is large enough, with replacement otherwise
/// (this keeps few-shot slices usable as task sources).
pub fn sample_task(
    dataset: &DomainDataset,
    n: usize,
    kind: TaskRole,
    rng: &mut ChaCha8Rng,
) -> Result<MetaTask> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset(dataset.domain.clone()));
    }
    if n == 0 {
        return Err(Error::InvalidConfig("task size n must be >= 1".into()));
    }
    let records = if dataset.len() >= n {
        rand::seq::index::sample(rng, dataset.len(), n)
            .iter()
            .map(|i| dataset.records[i].clone())
            .collect()
    } else {
        (0..n)
            .map(|_| dataset.records[rng.gen_range(0..dataset.len())].clone())
            .collect()
    };
    Ok(MetaTask {
        domain: dataset.domain.clone(),
        records,
        kind,
    })
}

/// Mixed-domain task sampler used by the MAML baseline: records are drawn
/// from the union of all given datasets, so the purity invariant generally
/// fails (the task is labelled with the first drawn record's domain).
pub fn sample_mixed_task(
    datasets: &[&DomainDataset],
    n: usize,
    kind: TaskRole,
    rng: &mut ChaCha8Rng,
) -> Result<MetaTask> {
    let total: usize = datasets.iter().map(|d| d.len()).sum();
    if total == 0 {
        return Err(Error::EmptyDataset("mixed pool".into()));
    }
    if n == 0 {
        return Err(Error::InvalidConfig("task size n must be >= 1".into()));
    }
    let mut records: Vec<StyleRecord> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut idx = rng.gen_range(0..total);
        for ds in datasets {
            if idx < ds.len() {
                records.push(ds.records[idx].clone());
                break;
            }
            idx -= ds.len();
        }
    }
    Ok(MetaTask {
        domain: records[0].domain.clone(),
        records,
        kind,
    })
}

#[derive(Debug, Deserialize)]
struct RawCorpusLine {
    text: String,
    style: String,
    domain: String,
}

/// Load one domain file, preserving line order. Every line must parse, carry
/// a known style label and match the requested domain.
pub fn load_corpus(path: &Path, domain: &str, split: Split) -> Result<DomainDataset> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let display = path.display().to_string();
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawCorpusLine = serde_json::from_str(&line).map_err(|e| Error::CorpusParse {
            path: display.clone(),
            line: lineno,
            msg: e.to_string(),
        })?;
        let style = Style::parse(&raw.style).ok_or_else(|| Error::CorpusParse {
            path: display.clone(),
            line: lineno,
            msg: format!("unknown style label {:?}", raw.style),
        })?;
        if raw.domain != domain {
            return Err(Error::CorpusParse {
                path: display.clone(),
                line: lineno,
                msg: format!("expected domain {:?}, found {:?}", domain, raw.domain),
            });
        }
        let record = StyleRecord::new(&raw.text, style, domain).map_err(|e| Error::CorpusParse {
            path: display.clone(),
            line: lineno,
            msg: e.to_string(),
        })?;
        records.push(record);
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset(display));
    }
    DomainDataset::new(domain, records, split)
}

/// Human/oracle reference pair for BLEU evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefRecord {
    pub source: String,
    pub reference: String,
    pub target_style: Style,
}

pub fn load_refs(path: &Path) -> Result<Vec<RefRecord>> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let display = path.display().to_string();
    let mut refs = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RefRecord = serde_json::from_str(&line).map_err(|e| Error::CorpusParse {
            path: display.clone(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        refs.push(rec);
    }
    Ok(refs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use std::io::Write;

    fn rec(text: &str, style: Style, domain: &str) -> StyleRecord {
        StyleRecord::new(text, style, domain).unwrap()
    }

    fn dataset(domain: &str, texts: &[(&str, Style)]) -> DomainDataset {
        DomainDataset::new(
            domain,
            texts.iter().map(|(t, s)| rec(t, *s, domain)).collect(),
            Split::Train,
        )
        .unwrap()
    }

    #[test]
    fn vocab_min_freq_filters_rare_tokens() {
        let ds = dataset("yelp", &[("a a b", Style::Positive)]);
        let v1 = build_vocab(&[ds.clone()], 1).unwrap();
        assert!(v1.contains("a") && v1.contains("b"));
        let v2 = build_vocab(&[ds], 2).unwrap();
        assert!(v2.contains("a"));
        assert!(!v2.contains("b"));
        assert_eq!(v2.id("b"), Vocabulary::UNK);
    }

    #[test]
    fn vocab_shares_ids_across_datasets() {
        let d1 = dataset("yelp", &[("good food", Style::Positive)]);
        let d2 = dataset("imdb", &[("good movie", Style::Positive)]);
        let v = build_vocab(&[d1, d2], 1).unwrap();
        let id = v.id("good");
        assert_ne!(id, Vocabulary::UNK);
        assert_eq!(v.token(id), "good");
    }

    #[test]
    fn reserved_ids_occupy_fixed_positions() {
        let ds = dataset("yelp", &[("x", Style::Negative)]);
        let v = build_vocab(&[ds], 1).unwrap();
        assert_eq!(v.token(0), "<pad>");
        assert_eq!(v.token(1), "<bos>");
        assert_eq!(v.token(2), "<eos>");
        assert_eq!(v.token(3), "<unk>");
        assert_eq!(v.token(Vocabulary::style_prefix(Style::Negative)), "<sty:negative>");
        assert_eq!(v.token(Vocabulary::style_prefix(Style::Positive)), "<sty:positive>");
        assert_eq!(v.token(Vocabulary::task_prefix(TaskPrefix::Reconstruct)), "<task:rec>");
        assert_eq!(v.token(Vocabulary::task_prefix(TaskPrefix::Transfer)), "<task:tst>");
        assert_eq!(RESERVED_TOKENS, 8);
    }

    #[test]
    fn encode_input_layout_and_truncation() {
        let ds = dataset("yelp", &[("good food", Style::Positive)]);
        let v = build_vocab(&[ds.clone()], 1).unwrap();
        let r = &ds.records[0];
        let ids = encode_input(r, Style::Positive, TaskPrefix::Reconstruct, &v, 16);
        assert_eq!(
            ids,
            vec![
                Vocabulary::task_prefix(TaskPrefix::Reconstruct),
                Vocabulary::style_prefix(Style::Positive),
                v.id("good"),
                v.id("food"),
                Vocabulary::EOS
            ]
        );
        let neg = encode_input(r, Style::Negative, TaskPrefix::Reconstruct, &v, 16);
        assert_eq!(neg[1], Vocabulary::style_prefix(Style::Negative));
        assert_eq!(&neg[2..], &ids[2..]);

        let long = rec(&"tok ".repeat(100), Style::Positive, "yelp");
        let vlong = build_vocab(
            &[DomainDataset::new("yelp", vec![long.clone()], Split::Train).unwrap()],
            1,
        )
        .unwrap();
        let t = encode_input(&long, Style::Positive, TaskPrefix::Transfer, &vlong, 10);
        assert_eq!(t.len(), 10);
        assert_eq!(*t.last().unwrap(), Vocabulary::EOS);
        assert_eq!(t.iter().filter(|&&x| x == Vocabulary::EOS).count(), 1);
    }

    #[test]
    fn decode_restores_in_vocab_tokens() {
        let ds = dataset("yelp", &[("the pasta is great", Style::Positive)]);
        let v = build_vocab(&[ds.clone()], 1).unwrap();
        let ids = encode_input(&ds.records[0], Style::Positive, TaskPrefix::Reconstruct, &v, 32);
        let toks = v.decode(&ids);
        assert_eq!(toks, vec!["the", "pasta", "is", "great"]);
    }

    #[test]
    fn meta_split_is_disjoint_cover_and_deterministic() {
        let domains: BTreeSet<String> =
            ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s1 = sample_meta_split(&domains, 2, &mut rng).unwrap();
        assert!(s1.is_disjoint_cover(&domains));
        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let s2 = sample_meta_split(&domains, 2, &mut rng2).unwrap();
        assert_eq!(s1, s2);

        assert!(sample_meta_split(&domains, 3, &mut rng).is_err());
        assert!(sample_meta_split(&domains, 0, &mut rng).is_err());
    }

    #[test]
    fn task_sampling_respects_replacement_rule() {
        let big = dataset(
            "yelp",
            &(0..100)
                .map(|i| (Box::leak(format!("tok{i}").into_boxed_str()) as &str, Style::Positive))
                .collect::<Vec<_>>(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = sample_task(&big, 8, TaskRole::MetaTrain, &mut rng).unwrap();
        assert_eq!(t.len(), 8);
        assert!(t.is_pure());
        let texts: BTreeSet<&str> = t.records.iter().map(|r| r.text.as_str()).collect();
        assert_eq!(texts.len(), 8, "without replacement when large enough");

        let small = dataset("yelp", &[("a", Style::Positive), ("b", Style::Negative), ("c", Style::Positive)]);
        let t2 = sample_task(&small, 8, TaskRole::MetaTrain, &mut rng).unwrap();
        assert_eq!(t2.len(), 8);
    }

    #[test]
    fn mixed_tasks_violate_purity() {
        let d1 = dataset("yelp", &[("alpha", Style::Positive)]);
        let d2 = dataset("imdb", &[("beta", Style::Negative)]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut saw_impure = false;
        for _ in 0..32 {
            let t = sample_mixed_task(&[&d1, &d2], 4, TaskRole::MetaTrain, &mut rng).unwrap();
            if !t.is_pure() {
                saw_impure = true;
                assert!(t.ensure_pure().is_err());
            }
        }
        assert!(saw_impure);
    }

    #[test]
    fn load_corpus_parses_and_reports_line_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("yelp.train.jsonl");
        let mut f = File::create(&path).unwrap();
        writeln!(f, r#"{{"text": "Good  Food", "style": "positive", "domain": "yelp"}}"#).unwrap();
        writeln!(f, r#"{{"text": "bad service", "style": "negative", "domain": "yelp"}}"#).unwrap();
        writeln!(f, r#"{{"text": "ok place", "style": "positive", "domain": "yelp"}}"#).unwrap();
        drop(f);
        let ds = load_corpus(&path, "yelp", Split::Train).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.records[0].text, "good food");

        let bad = dir.path().join("bad.jsonl");
        let mut f = File::create(&bad).unwrap();
        writeln!(f, r#"{{"text": "fine", "style": "positive", "domain": "yelp"}}"#).unwrap();
        writeln!(f, r#"{{"text": "meh", "style": "neutral", "domain": "yelp"}}"#).unwrap();
        drop(f);
        let err = load_corpus(&bad, "yelp", Split::Train).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(":2:"), "error should name line 2: {msg}");
        assert!(msg.contains("neutral"));

        let empty = dir.path().join("empty.jsonl");
        File::create(&empty).unwrap();
        assert!(matches!(
            load_corpus(&empty, "yelp", Split::Train),
            Err(Error::EmptyDataset(_))
        ));
    }
}
