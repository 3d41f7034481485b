//! Automatic evaluation: style/domain accuracy classifiers, corpus BLEU,
//! the G-score, report assembly and latent-embedding export.
//!
//! The evaluation classifiers are deliberately independent of the transfer
//! model: small bag-of-embeddings networks over surface tokens, trained
//! separately and persisted, so the metrics cannot leak the generator's
//! internals.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{encode_input, DomainDataset, RefRecord, Style, StyleRecord, TaskPrefix, Vocabulary};
use crate::error::{Error, Result};
use crate::metalearn::{derive_seed, Adam};
use crate::model::Model;
use crate::params::ParamSet;

pub const CLASSIFIER_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// BLEU and G-score
// ---------------------------------------------------------------------------

/// Corpus-level BLEU-4 scaled to [0, 100]: clipped n-gram precisions with
/// add-one smoothing for n ≥ 2 and the standard brevity penalty.
pub fn compute_bleu(hypotheses: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::LengthMismatch {
            hyps: hypotheses.len(),
            refs: references.len(),
        });
    }
    if hypotheses.is_empty() {
        return Err(Error::InvalidConfig("BLEU needs at least one hypothesis".into()));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (hyp, refs) in hypotheses.iter().zip(references) {
        if refs.is_empty() {
            return Err(Error::InvalidConfig("every hypothesis needs a reference".into()));
        }
        hyp_len += hyp.len();
        // closest reference length; ties resolve to the shorter one
        let closest = refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(hyp.len()), l))
            .unwrap();
        ref_len += closest;
        for n in 1..=4usize {
            let hyp_grams = ngram_counts(hyp, n);
            if hyp_grams.is_empty() {
                continue;
            }
            let mut clipped: HashMap<&[String], usize> = HashMap::new();
            for r in refs {
                for (gram, count) in ngram_counts(r, n) {
                    let e = clipped.entry(gram).or_insert(0);
                    *e = (*e).max(count);
                }
            }
            for (gram, count) in &hyp_grams {
                totals[n - 1] += count;
                if let Some(&limit) = clipped.get(gram) {
                    matches[n - 1] += (*count).min(limit);
                }
            }
        }
    }
    if totals[0] == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_sum = (matches[0] as f64 / totals[0] as f64).ln();
    for n in 2..=4 {
        log_sum += ((matches[n - 1] + 1) as f64 / (totals[n - 1] + 1) as f64).ln();
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * (log_sum / 4.0).exp())
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut map = HashMap::new();
    if tokens.len() >= n {
        for i in 0..=tokens.len() - n {
            *map.entry(&tokens[i..i + n]).or_insert(0) += 1;
        }
    }
    map
}

/// Geometric mean of style accuracy and BLEU.
pub fn compute_g_score(s_acc: f64, bleu: f64) -> Result<f64> {
    if s_acc < 0.0 || bleu < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "g-score inputs must be non-negative, got ({s_acc}, {bleu})"
        )));
    }
    Ok((s_acc * bleu).sqrt())
}

// ---------------------------------------------------------------------------
// Evaluation classifiers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    Style,
    Domain,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalClassifierConfig {
    pub emb_dim: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for EvalClassifierConfig {
    fn default() -> Self {
        EvalClassifierConfig {
            emb_dim: 32,
            hidden: 32,
            epochs: 30,
            lr: 1e-2,
            batch_size: 32,
            holdout_fraction: 0.1,
            seed: 7,
        }
    }
}

/// Bag-of-embeddings classifier: token embedding mean → ReLU hidden layer →
/// class logits. The head starts at zero, which keeps training exactly
/// equivariant under class relabelling.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalClassifier {
    pub version: u32,
    pub kind: ClassifierKind,
    pub classes: Vec<String>,
    pub emb_dim: usize,
    pub hidden: usize,
    pub held_out_accuracy: f64,
    tokens: Vec<String>,
    params: Vec<f64>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

struct Offsets {
    emb: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    total: usize,
}

impl EvalClassifier {
    fn offsets(vocab: usize, e: usize, h: usize, c: usize) -> Offsets {
        let emb = 0;
        let w1 = emb + vocab * e;
        let b1 = w1 + e * h;
        let w2 = b1 + h;
        let b2 = w2 + h * c;
        Offsets {
            emb,
            w1,
            b1,
            w2,
            b2,
            total: b2 + c,
        }
    }

    pub fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    fn features(&self, tokens: &[String]) -> Vec<f64> {
        let o = Self::offsets(self.tokens.len(), self.emb_dim, self.hidden, self.classes.len());
        let mut x = vec![0.0; self.emb_dim];
        let mut known = 0usize;
        for t in tokens {
            if let Some(&id) = self.index.get(t) {
                for (j, slot) in x.iter_mut().enumerate() {
                    *slot += self.params[o.emb + id * self.emb_dim + j];
                }
                known += 1;
            }
        }
        if known > 0 {
            for slot in x.iter_mut() {
                *slot /= known as f64;
            }
        }
        x
    }

    fn logits_from_features(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let o = Self::offsets(self.tokens.len(), self.emb_dim, self.hidden, self.classes.len());
        let (h, c) = (self.hidden, self.classes.len());
        let mut hid = vec![0.0; h];
        for (i, &xi) in x.iter().enumerate() {
            for j in 0..h {
                hid[j] += xi * self.params[o.w1 + i * h + j];
            }
        }
        for j in 0..h {
            hid[j] += self.params[o.b1 + j];
            if hid[j] < 0.0 {
                hid[j] = 0.0;
            }
        }
        let mut logits = vec![0.0; c];
        for (j, &hj) in hid.iter().enumerate() {
            for k in 0..c {
                logits[k] += hj * self.params[o.w2 + j * c + k];
            }
        }
        for k in 0..c {
            logits[k] += self.params[o.b2 + k];
        }
        (logits, hid)
    }

    /// Class probabilities for a tokenized sentence.
    pub fn probabilities(&self, tokens: &[String]) -> Vec<f64> {
        let x = self.features(tokens);
        let (logits, _) = self.logits_from_features(&x);
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / s).collect()
    }

    /// Predicted class label; ties break toward the first class.
    pub fn classify(&self, tokens: &[String]) -> &str {
        let p = self.probabilities(tokens);
        let mut best = 0;
        for (i, &v) in p.iter().enumerate().skip(1) {
            if v > p[best] {
                best = i;
            }
        }
        &self.classes[best]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec(self)?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<EvalClassifier> {
        let mut clf: EvalClassifier = serde_json::from_slice(&fs::read(path)?)?;
        if clf.version != CLASSIFIER_VERSION {
            return Err(Error::Checkpoint(format!(
                "classifier version {} unsupported (expected {CLASSIFIER_VERSION})",
                clf.version
            )));
        }
        clf.rebuild_index();
        Ok(clf)
    }
}

/// Train a style or domain classifier on every given dataset; a held-out
/// slice measures its accuracy.
pub fn train_eval_classifier(
    kind: ClassifierKind,
    data: &[DomainDataset],
    config: &EvalClassifierConfig,
) -> Result<EvalClassifier> {
    let mut examples: Vec<(Vec<String>, String)> = Vec::new();
    for ds in data {
        for rec in &ds.records {
            let label = match kind {
                ClassifierKind::Style => rec.style.name().to_string(),
                ClassifierKind::Domain => rec.domain.clone(),
            };
            let toks = rec.text.split_whitespace().map(|s| s.to_string()).collect();
            examples.push((toks, label));
        }
    }
    let classes: Vec<String> = {
        let set: std::collections::BTreeSet<String> =
            examples.iter().map(|(_, l)| l.clone()).collect();
        set.into_iter().collect()
    };
    if classes.len() < 2 {
        return Err(Error::SingleClass(classes.len()));
    }
    let mut token_set: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
    for (toks, _) in &examples {
        token_set.extend(toks.iter().cloned());
    }
    let tokens: Vec<String> = token_set.into_iter().collect();

    let (e, h, c) = (config.emb_dim, config.hidden, classes.len());
    let o = EvalClassifier::offsets(tokens.len(), e, h, c);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = vec![0.0; o.total];
    for i in 0..tokens.len() * e {
        params[o.emb + i] = rng.gen_range(-0.1..0.1);
    }
    let a = (6.0 / (e + h) as f64).sqrt();
    for i in 0..e * h {
        params[o.w1 + i] = rng.gen_range(-a..a);
    }
    // w2/b2 stay zero: class-permutation equivariance

    let mut clf = EvalClassifier {
        version: CLASSIFIER_VERSION,
        kind,
        classes: classes.clone(),
        emb_dim: e,
        hidden: h,
        held_out_accuracy: 0.0,
        tokens,
        params,
        index: BTreeMap::new(),
    };
    clf.rebuild_index();

    // deterministic shuffled holdout split
    let mut order: Vec<usize> = (0..examples.len()).collect();
    rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng);
    let n_hold = ((examples.len() as f64) * config.holdout_fraction).round() as usize;
    let (hold_idx, train_idx) = order.split_at(n_hold.min(examples.len().saturating_sub(1)));

    let class_of: BTreeMap<&str, usize> = classes
        .iter()
        .enumerate()
        .map(|(i, cname)| (cname.as_str(), i))
        .collect();
    let mut adam = Adam::new(clf.params.len(), config.lr);
    for _epoch in 0..config.epochs {
        let mut idx = train_idx.to_vec();
        rand::seq::SliceRandom::shuffle(&mut idx[..], &mut rng);
        for chunk in idx.chunks(config.batch_size.max(1)) {
            let mut grad = vec![0.0; clf.params.len()];
            let inv = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let (toks, label) = &examples[i];
                let gold = class_of[label.as_str()];
                classifier_backward(&clf, toks, gold, inv, &mut grad);
            }
            adam.step(&mut clf.params, &grad);
        }
    }

    let mut correct = 0usize;
    let check = if hold_idx.is_empty() { train_idx } else { hold_idx };
    for &i in check {
        let (toks, label) = &examples[i];
        if clf.classify(toks) == label {
            correct += 1;
        }
    }
    clf.held_out_accuracy = 100.0 * correct as f64 / check.len().max(1) as f64;
    Ok(clf)
}

fn classifier_backward(
    clf: &EvalClassifier,
    tokens: &[String],
    gold: usize,
    scale: f64,
    grad: &mut [f64],
) {
    let o = EvalClassifier::offsets(clf.tokens.len(), clf.emb_dim, clf.hidden, clf.classes.len());
    let (e, h, c) = (clf.emb_dim, clf.hidden, clf.classes.len());
    let x = clf.features(tokens);
    let (logits, hid) = clf.logits_from_features(&x);
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    let mut dlog: Vec<f64> = exps.iter().map(|ex| ex / s * scale).collect();
    dlog[gold] -= scale;

    let mut dhid = vec![0.0; h];
    for j in 0..h {
        for k in 0..c {
            grad[o.w2 + j * c + k] += hid[j] * dlog[k];
            dhid[j] += clf.params[o.w2 + j * c + k] * dlog[k];
        }
    }
    for k in 0..c {
        grad[o.b2 + k] += dlog[k];
    }
    let mut dx = vec![0.0; e];
    for j in 0..h {
        if hid[j] <= 0.0 {
            continue;
        }
        grad[o.b1 + j] += dhid[j];
        for (i, &xi) in x.iter().enumerate() {
            grad[o.w1 + i * h + j] += xi * dhid[j];
            dx[i] += clf.params[o.w1 + i * h + j] * dhid[j];
        }
    }
    let known: Vec<usize> = tokens.iter().filter_map(|t| clf.index.get(t).copied()).collect();
    if known.is_empty() {
        return;
    }
    let invk = 1.0 / known.len() as f64;
    for id in known {
        for (j, &dj) in dx.iter().enumerate() {
            grad[o.emb + id * clf.emb_dim + j] += dj * invk;
        }
    }
}

// ---------------------------------------------------------------------------
// Model evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PerSentence {
    pub source: String,
    pub output: String,
    pub target_style: Style,
    pub style_verdict: String,
    pub domain_verdict: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub s_acc: f64,
    pub bleu: f64,
    pub d_acc: f64,
    pub g_score: f64,
    pub per_sentence: Vec<PerSentence>,
}

impl EvalReport {
    pub fn check_invariants(&self) -> Result<()> {
        for (name, v) in [
            ("s_acc", self.s_acc),
            ("bleu", self.bleu),
            ("d_acc", self.d_acc),
        ] {
            if !(0.0..=100.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} out of range: {v}")));
            }
        }
        let expect = (self.s_acc * self.bleu).sqrt();
        if (self.g_score - expect).abs() > 1e-6 {
            return Err(Error::InvalidConfig("stored g_score is inconsistent".into()));
        }
        Ok(())
    }
}

/// Transfer every test sentence toward its mapped target style, classify
/// the outputs, and score BLEU against references when given (else against
/// the inputs).
pub fn evaluate_model(
    model: &Model,
    theta: &ParamSet,
    vocab: &Vocabulary,
    test: &DomainDataset,
    target_style_map: Option<&BTreeMap<Style, Style>>,
    style_clf: &EvalClassifier,
    domain_clf: &EvalClassifier,
    refs: Option<&[RefRecord]>,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::EmptyDataset(test.domain.clone()));
    }
    let ref_map: Option<BTreeMap<&str, Vec<String>>> = refs.map(|rs| {
        rs.iter()
            .map(|r| {
                (
                    r.source.as_str(),
                    r.reference.split_whitespace().map(|t| t.to_string()).collect(),
                )
            })
            .collect()
    });
    let mut hyps: Vec<Vec<String>> = Vec::with_capacity(test.len());
    let mut refs_for_bleu: Vec<Vec<Vec<String>>> = Vec::with_capacity(test.len());
    let mut per_sentence = Vec::with_capacity(test.len());
    let mut style_hits = 0usize;
    let mut domain_hits = 0usize;
    for rec in &test.records {
        let target = target_style_map
            .and_then(|m| m.get(&rec.style).copied())
            .unwrap_or_else(|| rec.style.opposite());
        let input = encode_input(rec, target, TaskPrefix::Transfer, vocab, model.config.max_len);
        let out_ids = model.generate(theta, &input, model.config.max_len)?;
        let out_tokens = vocab.decode(&out_ids);
        let style_verdict = style_clf.classify(&out_tokens).to_string();
        let domain_verdict = domain_clf.classify(&out_tokens).to_string();
        if style_verdict == target.name() {
            style_hits += 1;
        }
        if domain_verdict == test.domain {
            domain_hits += 1;
        }
        let reference: Vec<String> = match &ref_map {
            Some(m) => m
                .get(rec.text.as_str())
                .cloned()
                .ok_or_else(|| {
                    Error::InvalidConfig(format!("no reference for source {:?}", rec.text))
                })?,
            None => rec.text.split_whitespace().map(|t| t.to_string()).collect(),
        };
        per_sentence.push(PerSentence {
            source: rec.text.clone(),
            output: out_tokens.join(" "),
            target_style: target,
            style_verdict,
            domain_verdict,
        });
        hyps.push(out_tokens);
        refs_for_bleu.push(vec![reference]);
    }
    let n = test.len() as f64;
    let s_acc = 100.0 * style_hits as f64 / n;
    let d_acc = 100.0 * domain_hits as f64 / n;
    let bleu = compute_bleu(&hyps, &refs_for_bleu)?;
    let g_score = compute_g_score(s_acc, bleu)?;
    let report = EvalReport {
        s_acc,
        bleu,
        d_acc,
        g_score,
        per_sentence,
    };
    report.check_invariants()?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Latent export
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LatentExport {
    pub full_path: PathBuf,
    pub projected_path: PathBuf,
    pub embeddings: Vec<Vec<f64>>,
    pub projection: Vec<[f64; 2]>,
}

/// Mean-pooled encoder states per sentence, written as TSV with a
/// deterministic top-2 principal-component projection alongside.
pub fn export_latents(
    model: &Model,
    theta: &ParamSet,
    vocab: &Vocabulary,
    items: &[(StyleRecord, String)],
    out: &Path,
) -> Result<LatentExport> {
    let mut embeddings = Vec::with_capacity(items.len());
    for (rec, _) in items {
        let input = encode_input(rec, rec.style, TaskPrefix::Reconstruct, vocab, model.config.max_len);
        let states = model.encode(theta, &input)?;
        embeddings.push(states.mean_rows());
    }
    let projection = pca_project_2d(&embeddings);

    let mut f = fs::File::create(out)?;
    let d = model.config.model_dim;
    let dims: Vec<String> = (0..d).map(|i| format!("dim{i}")).collect();
    writeln!(f, "id\tdomain\tstyle\torigin\t{}", dims.join("\t"))?;
    for (i, ((rec, origin), emb)) in items.iter().zip(&embeddings).enumerate() {
        let vals: Vec<String> = emb.iter().map(|v| format!("{v:.6e}")).collect();
        writeln!(
            f,
            "{i}\t{}\t{}\t{origin}\t{}",
            rec.domain,
            rec.style.name(),
            vals.join("\t")
        )?;
    }
    let projected_path = out.with_extension("2d.tsv");
    let mut f2 = fs::File::create(&projected_path)?;
    writeln!(f2, "id\tdomain\tstyle\torigin\tpc0\tpc1")?;
    for (i, ((rec, origin), p)) in items.iter().zip(&projection).enumerate() {
        writeln!(
            f2,
            "{i}\t{}\t{}\t{origin}\t{:.6e}\t{:.6e}",
            rec.domain,
            rec.style.name(),
            p[0],
            p[1]
        )?;
    }
    Ok(LatentExport {
        full_path: out.to_path_buf(),
        projected_path,
        embeddings,
        projection,
    })
}

/// Deterministic top-2 PCA via power iteration with deflation.
pub fn pca_project_2d(rows: &[Vec<f64>]) -> Vec<[f64; 2]> {
    if rows.is_empty() {
        return Vec::new();
    }
    let d = rows[0].len();
    let n = rows.len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, &x) in mean.iter_mut().zip(r) {
            *m += x;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut cov = vec![0.0; d * d];
    for r in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += r[i] * r[j];
            }
        }
    }
    let denom = (n.max(2) - 1) as f64;
    for c in cov.iter_mut() {
        *c /= denom;
    }
    let v1 = power_iteration(&cov, d);
    let lambda1 = quad_form(&cov, &v1, d);
    let mut deflated = cov.clone();
    for i in 0..d {
        for j in 0..d {
            deflated[i * d + j] -= lambda1 * v1[i] * v1[j];
        }
    }
    let v2 = power_iteration(&deflated, d);
    centered
        .iter()
        .map(|r| {
            [
                r.iter().zip(&v1).map(|(a, b)| a * b).sum(),
                r.iter().zip(&v2).map(|(a, b)| a * b).sum(),
            ]
        })
        .collect()
}

fn power_iteration(mat: &[f64], d: usize) -> Vec<f64> {
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    for _ in 0..300 {
        let mut next = vec![0.0; d];
        for i in 0..d {
            let row = &mat[i * d..(i + 1) * d];
            next[i] = row.iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-30 {
            return next; // zero direction, degenerate data
        }
        for x in next.iter_mut() {
            *x /= norm;
        }
        v = next;
    }
    // deterministic sign: the largest-magnitude component points up
    let mut arg = 0usize;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[arg].abs() {
            arg = i;
        }
    }
    if v[arg] < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
    v
}

fn quad_form(mat: &[f64], v: &[f64], d: usize) -> f64 {
    let mut acc = 0.0;
    for i in 0..d {
        for j in 0..d {
            acc += v[i] * mat[i * d + j] * v[j];
        }
    }
    acc
}

/// Training accuracy of a logistic probe on binary-labelled embeddings;
/// measures linear separability.
pub fn linear_probe_accuracy(xs: &[Vec<f64>], ys: &[usize]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    if xs.is_empty() {
        return 0.0;
    }
    let d = xs[0].len();
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let lr = 0.5;
    let n = xs.len() as f64;
    for _ in 0..500 {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
            let p = 1.0 / (1.0 + (-z).exp());
            let e = p - y as f64;
            for (g, &xi) in gw.iter_mut().zip(x) {
                *g += e * xi / n;
            }
            gb += e / n;
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= lr * g;
        }
        b -= lr * gb;
    }
    let mut hits = 0usize;
    for (x, &y) in xs.iter().zip(ys) {
        let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
        if usize::from(z > 0.0) == y {
            hits += 1;
        }
    }
    100.0 * hits as f64 / xs.len() as f64
}

/// Seeded deterministic few-shot slice of a dataset.
pub fn few_shot_slice(dataset: &DomainDataset, fraction: f64, seed: u64) -> Result<DomainDataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "fraction must lie in (0,1], got {fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "few_shot_slice"));
    let take = ((dataset.len() as f64 * fraction).round() as usize).clamp(1, dataset.len());
    let picked = rand::seq::index::sample(&mut rng, dataset.len(), take);
    let mut idx: Vec<usize> = picked.iter().collect();
    idx.sort_unstable();
    let records: Vec<StyleRecord> = idx.iter().map(|&i| dataset.records[i].clone()).collect();
    DomainDataset::new(&dataset.domain, records, dataset.split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(|t| t.to_string()).collect()
    }

    #[test]
    fn bleu_identity_is_100() {
        let hyp = vec![toks("the cat sat on the mat"), toks("a b c")];
        let refs = vec![vec![hyp[0].clone()], vec![hyp[1].clone()]];
        let b = compute_bleu(&hyp, &refs).unwrap();
        assert!((b - 100.0).abs() < 1e-9, "{b}");
    }

    #[test]
    fn bleu_empty_hypothesis_is_zero() {
        let hyp = vec![Vec::new()];
        let refs = vec![vec![toks("not empty")]];
        assert_eq!(compute_bleu(&hyp, &refs).unwrap(), 0.0);
    }

    #[test]
    fn bleu_length_mismatch_errors() {
        let hyp = vec![toks("a")];
        assert!(compute_bleu(&hyp, &[]).is_err());
    }

    #[test]
    fn bleu_permutation_invariant() {
        let hyp = vec![toks("the cat sat"), toks("dogs bark loudly at night"), toks("x y")];
        let refs = vec![
            vec![toks("the cat sat down")],
            vec![toks("dogs bark at night")],
            vec![toks("x y z")],
        ];
        let b1 = compute_bleu(&hyp, &refs).unwrap();
        let hyp2 = vec![hyp[2].clone(), hyp[0].clone(), hyp[1].clone()];
        let refs2 = vec![refs[2].clone(), refs[0].clone(), refs[1].clone()];
        let b2 = compute_bleu(&hyp2, &refs2).unwrap();
        assert!((b1 - b2).abs() < 1e-12);
    }

    #[test]
    fn g_score_reproduces_reported_triples() {
        for (s, b, g) in [
            (94.5, 25.4, 48.9),
            (88.3, 17.5, 39.3),
            (80.1, 6.7, 23.2),
            (88.3, 5.6, 22.2),
        ] {
            let got = compute_g_score(s, b).unwrap();
            assert!((got - g).abs() <= 0.1, "({s},{b}) → {got}, expected ≈{g}");
        }
        assert_eq!(compute_g_score(0.0, 55.0).unwrap(), 0.0);
        assert!(compute_g_score(-1.0, 1.0).is_err());
    }

    #[test]
    fn g_score_symmetric_and_monotone() {
        let a = compute_g_score(30.0, 70.0).unwrap();
        let b = compute_g_score(70.0, 30.0).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(compute_g_score(40.0, 70.0).unwrap() > a);
        assert!(compute_g_score(30.0, 80.0).unwrap() > a);
    }

    #[test]
    fn pca_projection_is_deterministic() {
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|i| {
                let t = i as f64 / 3.0;
                vec![t, 2.0 * t + 0.1 * (i as f64).sin(), -t, 0.5]
            })
            .collect();
        let p1 = pca_project_2d(&rows);
        let p2 = pca_project_2d(&rows);
        assert_eq!(p1, p2);
        assert_eq!(p1.len(), 20);
    }

    #[test]
    fn probe_separates_separable_clusters() {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..40 {
            let off = if i % 2 == 0 { 1.0 } else { -1.0 };
            xs.push(vec![off + 0.01 * i as f64, off]);
            ys.push(usize::from(i % 2 == 0));
        }
        assert!(linear_probe_accuracy(&xs, &ys) >= 99.0);
    }
}
