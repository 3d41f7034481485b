//! Deterministic synthetic multi-domain corpus generator.
//!
//! Desk-scale stand-in for the large review corpora: each domain owns a
//! disjoint noun lexicon plus a few domain-specific sentiment word pairs,
//! while a shared pair set keeps styles transferable across domains.
//! Sentences are enumerated from templates, shuffled under the caller's
//! seeded rng and partitioned into disjoint train/dev/test splits, so the
//! same seed reproduces the corpus byte for byte. Every record carries a
//! rule-flipped reference (sentiment words swapped within their pair) for
//! oracle evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DomainDataset, RefRecord, Split, Style, StyleRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SentimentPair {
    pub positive: String,
    pub negative: String,
}

impl SentimentPair {
    pub fn new(positive: &str, negative: &str) -> Self {
        SentimentPair {
            positive: positive.into(),
            negative: negative.into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DomainSpec {
    pub name: String,
    pub nouns: Vec<String>,
    pub pairs: Vec<SentimentPair>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub train_per_domain: usize,
    pub dev_per_domain: usize,
    pub test_per_domain: usize,
    pub shared_pairs: Vec<SentimentPair>,
    pub domains: Vec<DomainSpec>,
}

impl GeneratorConfig {
    /// The four-domain benchmark corpus used throughout the test suite.
    pub fn default_benchmark() -> Self {
        let d = |name: &str, nouns: &[&str], pairs: &[(&str, &str)]| DomainSpec {
            name: name.into(),
            nouns: nouns.iter().map(|s| s.to_string()).collect(),
            pairs: pairs.iter().map(|(p, n)| SentimentPair::new(p, n)).collect(),
        };
        GeneratorConfig {
            seed: 17,
            train_per_domain: 400,
            dev_per_domain: 50,
            test_per_domain: 50,
            shared_pairs: vec![
                SentimentPair::new("good", "bad"),
                SentimentPair::new("great", "awful"),
                SentimentPair::new("nice", "horrible"),
                SentimentPair::new("fine", "poor"),
            ],
            domains: vec![
                d(
                    "restaurant",
                    &["pasta", "pizza", "soup", "salad", "waiter", "menu", "sauce", "dessert"],
                    &[
                        ("delicious", "terrible"),
                        ("tasty", "bland"),
                        ("fresh", "stale"),
                        ("savory", "greasy"),
                    ],
                ),
                d(
                    "movie",
                    &["plot", "actor", "scene", "director", "script", "ending", "soundtrack", "dialogue"],
                    &[
                        ("thrilling", "boring"),
                        ("gripping", "dull"),
                        ("moving", "tedious"),
                        ("epic", "lame"),
                    ],
                ),
                d(
                    "product",
                    &["battery", "screen", "keyboard", "charger", "speaker", "cable", "gadget", "casing"],
                    &[
                        ("sturdy", "flimsy"),
                        ("reliable", "defective"),
                        ("efficient", "clunky"),
                        ("durable", "fragile"),
                    ],
                ),
                d(
                    "qa",
                    &["answer", "question", "reply", "thread", "explanation", "moderator", "topic", "forum"],
                    &[
                        ("helpful", "useless"),
                        ("clear", "confusing"),
                        ("detailed", "vague"),
                        ("prompt", "sloppy"),
                    ],
                ),
            ],
        }
    }

    /// Bidirectional sentiment word map (positive ↔ negative) across all
    /// shared and domain pairs; drives the rule-flip oracle.
    pub fn pair_map(&self) -> BTreeMap<String, String> {
        let mut map = BTreeMap::new();
        let all = self
            .shared_pairs
            .iter()
            .chain(self.domains.iter().flat_map(|d| d.pairs.iter()));
        for p in all {
            map.insert(p.positive.clone(), p.negative.clone());
            map.insert(p.negative.clone(), p.positive.clone());
        }
        map
    }

    pub fn domain_names(&self) -> Vec<String> {
        self.domains.iter().map(|d| d.name.clone()).collect()
    }

    fn validate(&self) -> Result<()> {
        if self.domains.len() < 2 {
            return Err(Error::InvalidConfig(
                "synthetic corpus needs at least 2 domains".into(),
            ));
        }
        if self.shared_pairs.is_empty() {
            return Err(Error::InvalidConfig(
                "synthetic corpus needs shared sentiment pairs".into(),
            ));
        }
        let mut seen: BTreeSet<&str> = BTreeSet::new();
        for d in &self.domains {
            if d.nouns.is_empty() {
                return Err(Error::InvalidConfig(format!("domain {} has no nouns", d.name)));
            }
            for w in d
                .nouns
                .iter()
                .chain(d.pairs.iter().flat_map(|p| [&p.positive, &p.negative]))
            {
                if !seen.insert(w) {
                    return Err(Error::InvalidConfig(format!(
                        "domain lexica must be disjoint; {w:?} appears twice"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Swap every sentiment word with its opposite-pair partner.
pub fn flip_sentiment(text: &str, pair_map: &BTreeMap<String, String>) -> String {
    text.split_whitespace()
        .map(|t| pair_map.get(t).map_or(t, |s| s.as_str()))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone)]
pub struct ReferenceSet {
    pub domain: String,
    pub split: Split,
    pub refs: Vec<RefRecord>,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub datasets: Vec<DomainDataset>,
    pub references: Vec<ReferenceSet>,
}

impl SyntheticCorpus {
    pub fn dataset(&self, domain: &str, split: Split) -> Option<&DomainDataset> {
        self.datasets
            .iter()
            .find(|d| d.domain == domain && d.split == split)
    }

    pub fn refs(&self, domain: &str, split: Split) -> Option<&[RefRecord]> {
        self.references
            .iter()
            .find(|r| r.domain == domain && r.split == split)
            .map(|r| r.refs.as_slice())
    }
}

fn enumerate_sentences(domain: &DomainSpec, shared: &[SentimentPair], style: Style) -> Vec<String> {
    let adjs: Vec<&str> = shared
        .iter()
        .chain(domain.pairs.iter())
        .map(|p| match style {
            Style::Positive => p.positive.as_str(),
            Style::Negative => p.negative.as_str(),
        })
        .collect();
    let nouns: Vec<&str> = domain.nouns.iter().map(|s| s.as_str()).collect();
    let mut out = Vec::new();
    for &n in &nouns {
        for &a in &adjs {
            out.push(format!("the {n} is {a}"));
            out.push(format!("the {n} was {a}"));
            out.push(format!("i think the {n} is {a}"));
            out.push(format!("the {n} is really {a}"));
            for &a2 in &adjs {
                if a2 != a {
                    out.push(format!("the {n} is {a} and {a2}"));
                }
            }
            for &n2 in &nouns {
                if n2 != n {
                    out.push(format!("the {n} was {a} and the {n2} is {a}"));
                    out.push(format!("the {n} is {a} but the {n2} is {a2_pick}", a2_pick = a));
                }
            }
        }
    }
    out
}

/// Generate the full corpus: per domain, per style, the template space is
/// enumerated, shuffled and partitioned, so splits never share a sentence.
pub fn generate_synthetic_corpus(
    config: &GeneratorConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SyntheticCorpus> {
    config.validate()?;
    let pair_map = config.pair_map();
    let mut datasets = Vec::new();
    let mut references = Vec::new();

    let splits = [
        (Split::Train, config.train_per_domain),
        (Split::Dev, config.dev_per_domain),
        (Split::Test, config.test_per_domain),
    ];

    for domain in &config.domains {
        let mut per_style: BTreeMap<Style, Vec<String>> = BTreeMap::new();
        for style in Style::ALL {
            let mut sentences = enumerate_sentences(domain, &config.shared_pairs, style);
            sentences.shuffle(rng);
            per_style.insert(style, sentences);
        }
        let needed: usize = splits.iter().map(|(_, c)| c / 2 + c % 2).sum();
        for (style, pool) in &per_style {
            if pool.len() < needed {
                return Err(Error::InvalidConfig(format!(
                    "domain {} cannot supply {} distinct {} sentences (has {})",
                    domain.name,
                    needed,
                    style.name(),
                    pool.len()
                )));
            }
        }

        let mut cursors: BTreeMap<Style, usize> = Style::ALL.iter().map(|&s| (s, 0)).collect();
        for (split, count) in splits {
            if count == 0 {
                continue;
            }
            let per_style_count = [count / 2 + count % 2, count / 2];
            let mut records = Vec::with_capacity(count);
            let mut refs = Vec::with_capacity(count);
            for (style, take) in Style::ALL.into_iter().zip(per_style_count) {
                let cursor = cursors.get_mut(&style).unwrap();
                for text in &per_style[&style][*cursor..*cursor + take] {
                    records.push(StyleRecord::new(text, style, &domain.name)?);
                    refs.push(RefRecord {
                        source: text.clone(),
                        reference: flip_sentiment(text, &pair_map),
                        target_style: style.opposite(),
                    });
                }
                *cursor += take;
            }
            datasets.push(DomainDataset::new(&domain.name, records, split)?);
            references.push(ReferenceSet {
                domain: domain.name.clone(),
                split,
                refs,
            });
        }
    }

    Ok(SyntheticCorpus {
        datasets,
        references,
    })
}

/// Write a corpus directory: `{domain}.{split}.jsonl` plus
/// `{domain}.{split}.refs.jsonl` per dataset.
pub fn write_corpus(corpus: &SyntheticCorpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for ds in &corpus.datasets {
        let path = dir.join(format!("{}.{}.jsonl", ds.domain, ds.split.name()));
        let mut f = fs::File::create(&path)?;
        for rec in &ds.records {
            writeln!(f, "{}", serde_json::to_string(rec)?)?;
        }
    }
    for rs in &corpus.references {
        let path = dir.join(format!("{}.{}.refs.jsonl", rs.domain, rs.split.name()));
        let mut f = fs::File::create(&path)?;
        for r in &rs.refs {
            writeln!(f, "{}", serde_json::to_string(r)?)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn generates_balanced_domains() {
        let config = GeneratorConfig::default_benchmark();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let corpus = generate_synthetic_corpus(&config, &mut rng).unwrap();
        assert_eq!(corpus.datasets.len(), 4 * 3);
        for name in config.domain_names() {
            let train = corpus.dataset(&name, Split::Train).unwrap();
            assert_eq!(train.len(), 400);
            let pos = train.records.iter().filter(|r| r.style == Style::Positive).count();
            assert_eq!(pos, 200);
            assert_eq!(train.len() - pos, 200);
        }
    }

    #[test]
    fn same_seed_reproduces_corpus() {
        let config = GeneratorConfig::default_benchmark();
        let mut a = ChaCha8Rng::seed_from_u64(config.seed);
        let mut b = ChaCha8Rng::seed_from_u64(config.seed);
        let c1 = generate_synthetic_corpus(&config, &mut a).unwrap();
        let c2 = generate_synthetic_corpus(&config, &mut b).unwrap();
        for (d1, d2) in c1.datasets.iter().zip(&c2.datasets) {
            assert_eq!(d1.records, d2.records);
        }
    }

    #[test]
    fn splits_are_disjoint() {
        let config = GeneratorConfig::default_benchmark();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let corpus = generate_synthetic_corpus(&config, &mut rng).unwrap();
        for name in config.domain_names() {
            let train: BTreeSet<&str> = corpus
                .dataset(&name, Split::Train)
                .unwrap()
                .records
                .iter()
                .map(|r| r.text.as_str())
                .collect();
            let test: BTreeSet<&str> = corpus
                .dataset(&name, Split::Test)
                .unwrap()
                .records
                .iter()
                .map(|r| r.text.as_str())
                .collect();
            assert!(train.is_disjoint(&test));
        }
    }

    #[test]
    fn flip_oracle_swaps_pairs() {
        let config = GeneratorConfig::default_benchmark();
        let map = config.pair_map();
        assert_eq!(
            flip_sentiment("the pasta is terrible", &map),
            "the pasta is delicious"
        );
        assert_eq!(
            flip_sentiment("the plot is thrilling and gripping", &map),
            "the plot is boring and dull"
        );
        // flipping twice is the identity
        let s = "the battery is sturdy and nice";
        assert_eq!(flip_sentiment(&flip_sentiment(s, &map), &map), s);
    }

    #[test]
    fn references_match_records_in_order() {
        let config = GeneratorConfig::default_benchmark();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let corpus = generate_synthetic_corpus(&config, &mut rng).unwrap();
        let ds = corpus.dataset("restaurant", Split::Test).unwrap();
        let refs = corpus.refs("restaurant", Split::Test).unwrap();
        assert_eq!(ds.len(), refs.len());
        let map = config.pair_map();
        for (rec, rf) in ds.records.iter().zip(refs) {
            assert_eq!(rec.text, rf.source);
            assert_eq!(rf.reference, flip_sentiment(&rec.text, &map));
            assert_eq!(rf.target_style, rec.style.opposite());
        }
    }

    #[test]
    fn rejects_single_domain() {
        let mut config = GeneratorConfig::default_benchmark();
        config.domains.truncate(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(generate_synthetic_corpus(&config, &mut rng).is_err());
    }
}
