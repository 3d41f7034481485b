//! Experiment orchestration: resolved experiment specs, the access-logged
//! corpus store, end-to-end strategy execution and the leave-one-out
//! protocol.
//!
//! Every run directory is self-describing: resolved config snapshot, seed,
//! corpus hashes, checkpoints, a metrics stream and the final report —
//! enough to reproduce the run bit for bit.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::corpus::{build_vocab, load_corpus, load_refs, DomainDataset, RefRecord, Split, Vocabulary};
use crate::error::{Error, Result};
use crate::evalkit::{
    evaluate_model, few_shot_slice, train_eval_classifier, ClassifierKind, EvalClassifier,
    EvalClassifierConfig, EvalReport,
};
use crate::metalearn::{
    adapt_final, daml_stage2, derive_seed, pretrain_stage1, train_baseline, BaselineStrategy,
    Objectives as _, StrategyData, TaskSampling, TrainConfig,
};
use crate::model::{Model, ModelConfig};
use crate::objectives::Objectives;
use crate::params::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    DamlAtm,
    InDomain,
    JointTraining,
    FineTuning,
    DShift,
    Maml,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::DamlAtm => "daml_atm",
            Strategy::InDomain => "in_domain",
            Strategy::JointTraining => "joint_training",
            Strategy::FineTuning => "fine_tuning",
            Strategy::DShift => "d_shift",
            Strategy::Maml => "maml",
        }
    }

    pub fn parse(s: &str) -> Option<Strategy> {
        Some(match s {
            "daml_atm" => Strategy::DamlAtm,
            "in_domain" => Strategy::InDomain,
            "joint_training" => Strategy::JointTraining,
            "fine_tuning" => Strategy::FineTuning,
            "d_shift" => Strategy::DShift,
            "maml" => Strategy::Maml,
            _ => return None,
        })
    }

    fn as_baseline(self) -> Option<BaselineStrategy> {
        Some(match self {
            Strategy::DamlAtm => return None,
            Strategy::InDomain => BaselineStrategy::InDomain,
            Strategy::JointTraining => BaselineStrategy::JointTraining,
            Strategy::FineTuning => BaselineStrategy::FineTuning,
            Strategy::DShift => BaselineStrategy::DShift,
            Strategy::Maml => BaselineStrategy::Maml,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub disable_rec_loss: bool,
    pub disable_style_loss: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub sources: Vec<String>,
    pub target: String,
    pub fraction: f64,
    pub strategy: Strategy,
    pub ablation: AblationFlags,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub seed: u64,
    pub corpus_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            sources: Vec::new(),
            target: String::new(),
            fraction: 0.01,
            strategy: Strategy::DamlAtm,
            ablation: AblationFlags::default(),
            train: TrainConfig::default(),
            model: ModelConfig::desk_default(),
            seed: 0,
            corpus_dir: PathBuf::new(),
            out_dir: PathBuf::new(),
        }
    }
}

impl ExperimentSpec {
    pub fn from_toml_file(path: &Path) -> Result<ExperimentSpec> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Effective training config: experiment-level seed and ablation flags
    /// folded in.
    pub fn resolved_train(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.seed = self.seed;
        t.disable_rec_loss |= self.ablation.disable_rec_loss;
        t.disable_style_loss |= self.ablation.disable_style_loss;
        t
    }

    pub fn validate(&self) -> Result<()> {
        if self.target.is_empty() {
            return Err(Error::InvalidConfig("no target domain given".into()));
        }
        if self.sources.iter().any(|s| *s == self.target) {
            return Err(Error::InvalidConfig(format!(
                "target domain {:?} must not appear among the sources",
                self.target
            )));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "few-shot fraction must lie in (0,1], got {}",
                self.fraction
            )));
        }
        let needs_sources = !matches!(self.strategy, Strategy::InDomain);
        if needs_sources && self.sources.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "strategy {} needs source domains",
                self.strategy.name()
            )));
        }
        self.model.validate()?;
        self.resolved_train().validate()?;
        for domain in self.sources.iter().chain([&self.target]) {
            for split in ["train", "test"] {
                let p = self.corpus_dir.join(format!("{domain}.{split}.jsonl"));
                if !p.exists() {
                    return Err(Error::InvalidConfig(format!(
                        "missing corpus file {}",
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct AccessEntry {
    pub domain: String,
    pub split: String,
    pub phase: String,
}

/// Corpus loader that records every dataset access with the pipeline phase
/// it happened in; the no-peeking invariant (target test data is read only
/// during evaluation) is checked from this log.
pub struct CorpusStore {
    dir: PathBuf,
    phase: RefCell<String>,
    cache: RefCell<BTreeMap<(String, Split), Rc<DomainDataset>>>,
    log: RefCell<Vec<AccessEntry>>,
}

impl CorpusStore {
    pub fn new(dir: &Path) -> CorpusStore {
        CorpusStore {
            dir: dir.to_path_buf(),
            phase: RefCell::new("init".into()),
            cache: RefCell::new(BTreeMap::new()),
            log: RefCell::new(Vec::new()),
        }
    }

    pub fn set_phase(&self, phase: &str) {
        *self.phase.borrow_mut() = phase.to_string();
    }

    pub fn dataset_path(&self, domain: &str, split: Split) -> PathBuf {
        self.dir.join(format!("{domain}.{}.jsonl", split.name()))
    }

    pub fn get(&self, domain: &str, split: Split) -> Result<Rc<DomainDataset>> {
        self.log.borrow_mut().push(AccessEntry {
            domain: domain.to_string(),
            split: split.name().to_string(),
            phase: self.phase.borrow().clone(),
        });
        if let Some(ds) = self.cache.borrow().get(&(domain.to_string(), split)) {
            return Ok(ds.clone());
        }
        let ds = Rc::new(load_corpus(&self.dataset_path(domain, split), domain, split)?);
        self.cache
            .borrow_mut()
            .insert((domain.to_string(), split), ds.clone());
        Ok(ds)
    }

    /// Reference file for a split, when present.
    pub fn refs(&self, domain: &str, split: Split) -> Result<Option<Vec<RefRecord>>> {
        let path = self.dir.join(format!("{domain}.{}.refs.jsonl", split.name()));
        if !path.exists() {
            return Ok(None);
        }
        self.log.borrow_mut().push(AccessEntry {
            domain: domain.to_string(),
            split: format!("{}.refs", split.name()),
            phase: self.phase.borrow().clone(),
        });
        Ok(Some(load_refs(&path)?))
    }

    pub fn access_log(&self) -> Vec<AccessEntry> {
        self.log.borrow().clone()
    }

    /// Every target-test access must have happened in the evaluate phase.
    pub fn check_no_test_peeking(&self, target: &str) -> Result<()> {
        for e in self.log.borrow().iter() {
            if e.domain == target && e.split.starts_with("test") && e.phase != "evaluate" {
                return Err(Error::InvalidConfig(format!(
                    "target test data was read during phase {:?}",
                    e.phase
                )));
            }
        }
        Ok(())
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Everything a finished run leaves on disk, plus the in-memory results the
/// caller usually wants next.
pub struct RunArtifacts {
    pub report: EvalReport,
    pub theta: ParamSet,
    pub gamma: ParamSet,
    pub vocab: Vocabulary,
    pub model: Model,
    pub out_dir: PathBuf,
}

/// Execute one experiment end to end: validate, train per the strategy,
/// adapt on the few-shot slice, evaluate on the target test split, and
/// write all artifacts. Fully reproducible under a fixed seed.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<RunArtifacts> {
    spec.validate()?;
    fs::create_dir_all(&spec.out_dir)?;
    let config = spec.resolved_train();
    let store = CorpusStore::new(&spec.corpus_dir);

    // Resolved snapshot before anything heavy runs.
    let mut resolved = spec.clone();
    resolved.train = config.clone();
    write_atomic(
        &spec.out_dir.join("config.resolved.toml"),
        resolved.to_toml()?.as_bytes(),
    )?;

    store.set_phase("load");
    let mut source_train: Vec<Rc<DomainDataset>> = Vec::new();
    for d in &spec.sources {
        source_train.push(store.get(d, Split::Train)?);
    }
    let target_train = store.get(&spec.target, Split::Train)?;

    // Shared vocabulary over every involved domain's train split (the
    // tokenizer is corpus infrastructure, not training signal).
    store.set_phase("vocab");
    let vocab_sets: Vec<DomainDataset> = source_train
        .iter()
        .chain([&target_train])
        .map(|d| (**d).clone())
        .collect();
    let vocab = build_vocab(&vocab_sets, 1)?;
    let model = Model::new(spec.model.clone(), vocab.len())?;
    let obj = Objectives::new(&model, &vocab);

    store.set_phase("slice");
    let slice = few_shot_slice(&target_train, spec.fraction, spec.seed)?;

    let sources_ref: Vec<&DomainDataset> = source_train.iter().map(|d| &**d).collect();
    let mut metrics_lines: Vec<String> = Vec::new();

    store.set_phase("train");
    let (theta, gamma) = match spec.strategy.as_baseline() {
        None => {
            // The full pipeline: pretraining, domain-adaptive meta stage,
            // then few-shot adaptation on the unseen domain.
            let mut theta = model.init_theta(derive_seed(spec.seed, "theta"));
            let mut gamma = model.init_gamma(derive_seed(spec.seed, "gamma"));
            let stage1 = pretrain_stage1(&obj, &mut theta, &mut gamma, &sources_ref, &config)?;
            for e in &stage1.epochs {
                metrics_lines.push(serde_json::to_string(&serde_json::json!({
                    "stage": "stage1", "epoch": e.epoch,
                    "loss_rec": e.loss_rec, "loss_cls": e.loss_cls,
                }))?);
            }
            gamma.freeze();
            Checkpoint::capture(&model, &theta, &gamma, &vocab, None)
                .save(&spec.out_dir.join("checkpoint.stage1.json"))?;
            let ckpt_every = config.checkpoint_every;
            let out_dir = spec.out_dir.clone();
            let stage2 = daml_stage2(
                &obj,
                &mut theta,
                &gamma,
                &sources_ref,
                &config,
                TaskSampling::DomainAdaptive,
                |rec, params| {
                    if ckpt_every > 0 && (rec.iteration + 1) % ckpt_every == 0 {
                        Checkpoint::capture(&model, params, &gamma, &vocab, None)
                            .save(&out_dir.join(format!("checkpoint.iter{}.json", rec.iteration)))?;
                    }
                    Ok(())
                },
            )?;
            for r in &stage2.iterations {
                metrics_lines.push(serde_json::to_string(&serde_json::json!({
                    "stage": "stage2", "iteration": r.iteration,
                    "loss_rec": r.loss_rec, "loss_style": r.loss_style,
                    "loss_val": r.loss_val, "grad_norm": r.grad_norm,
                }))?);
            }
            Checkpoint::capture(&model, &theta, &gamma, &vocab, None)
                .save(&spec.out_dir.join("checkpoint.stage2.json"))?;
            store.set_phase("adapt");
            let adapt = adapt_final(&obj, &mut theta, &gamma, &slice, &config)?;
            for e in &adapt.epochs {
                metrics_lines.push(serde_json::to_string(&serde_json::json!({
                    "stage": "adapt", "epoch": e.epoch, "loss": e.loss,
                }))?);
            }
            (theta, gamma)
        }
        Some(baseline) => {
            let data = StrategyData {
                sources: sources_ref.clone(),
                target_slice: Some(&slice),
            };
            let trained = train_baseline(&obj, baseline, &data, &config)?;
            for e in &trained.stage1.epochs {
                metrics_lines.push(serde_json::to_string(&serde_json::json!({
                    "stage": "stage1", "epoch": e.epoch,
                    "loss_rec": e.loss_rec, "loss_cls": e.loss_cls,
                }))?);
            }
            if let Some(s2) = &trained.stage2 {
                for r in &s2.iterations {
                    metrics_lines.push(serde_json::to_string(&serde_json::json!({
                        "stage": "stage2", "iteration": r.iteration,
                        "loss_rec": r.loss_rec, "loss_style": r.loss_style,
                        "loss_val": r.loss_val, "grad_norm": r.grad_norm,
                    }))?);
                }
            }
            (trained.theta, trained.gamma)
        }
    };

    Checkpoint::capture(&model, &theta, &gamma, &vocab, None)
        .save(&spec.out_dir.join("checkpoint.final.json"))?;
    write_atomic(
        &spec.out_dir.join("metrics.jsonl"),
        (metrics_lines.join("\n") + "\n").as_bytes(),
    )?;

    // Evaluation classifiers over every involved domain.
    store.set_phase("eval_classifiers");
    let clf_config = EvalClassifierConfig {
        seed: derive_seed(spec.seed, "eval_classifiers"),
        ..EvalClassifierConfig::default()
    };
    let style_clf = train_eval_classifier(ClassifierKind::Style, &vocab_sets, &clf_config)?;
    let domain_clf = train_eval_classifier(ClassifierKind::Domain, &vocab_sets, &clf_config)?;
    style_clf.save(&spec.out_dir.join("style_classifier.json"))?;
    domain_clf.save(&spec.out_dir.join("domain_classifier.json"))?;

    store.set_phase("evaluate");
    let test = store.get(&spec.target, Split::Test)?;
    let refs = store.refs(&spec.target, Split::Test)?;
    let report = evaluate_model(
        &model,
        &theta,
        &vocab,
        &test,
        None,
        &style_clf,
        &domain_clf,
        refs.as_deref(),
    )?;
    store.check_no_test_peeking(&spec.target)?;

    let mut hashes: BTreeMap<String, String> = BTreeMap::new();
    for d in spec.sources.iter().chain([&spec.target]) {
        for split in [Split::Train, Split::Test] {
            let p = store.dataset_path(d, split);
            if p.exists() {
                hashes.insert(
                    p.file_name().unwrap().to_string_lossy().into_owned(),
                    sha256_file(&p)?,
                );
            }
        }
    }
    write_atomic(
        &spec.out_dir.join("corpus_hashes.json"),
        serde_json::to_vec_pretty(&hashes)?.as_slice(),
    )?;
    write_atomic(
        &spec.out_dir.join("access_log.json"),
        serde_json::to_vec_pretty(&store.access_log())?.as_slice(),
    )?;
    write_atomic(
        &spec.out_dir.join("report.json"),
        serde_json::to_vec_pretty(&report)?.as_slice(),
    )?;
    write_atomic(
        &spec.out_dir.join("seed"),
        format!("{}\n", spec.seed).as_bytes(),
    )?;

    Ok(RunArtifacts {
        report,
        theta,
        gamma,
        vocab,
        model,
        out_dir: spec.out_dir.clone(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LooRow {
    pub target: String,
    pub s_acc: f64,
    pub bleu: f64,
    pub d_acc: f64,
    pub g_score: f64,
}

/// Leave-one-out protocol: run the base spec once per held-out target
/// domain and consolidate the reports into one table. Partial results are
/// written before any error propagates.
pub fn run_leave_one_out(
    domains: &[String],
    base: &ExperimentSpec,
) -> Result<Vec<(String, EvalReport)>> {
    if domains.len() < 3 {
        return Err(Error::InvalidConfig(
            "leave-one-out needs at least 3 domains".into(),
        ));
    }
    fs::create_dir_all(&base.out_dir)?;
    let mut outcomes: Vec<(String, Result<EvalReport>)> = Vec::new();
    for target in domains {
        let mut spec = base.clone();
        spec.target = target.clone();
        spec.sources = domains.iter().filter(|d| *d != target).cloned().collect();
        spec.out_dir = base.out_dir.join(format!("loo_{target}"));
        let outcome = run_experiment(&spec).map(|a| a.report);
        outcomes.push((target.clone(), outcome));
    }
    let rows: Vec<LooRow> = outcomes
        .iter()
        .filter_map(|(t, r)| {
            r.as_ref().ok().map(|rep| LooRow {
                target: t.clone(),
                s_acc: rep.s_acc,
                bleu: rep.bleu,
                d_acc: rep.d_acc,
                g_score: rep.g_score,
            })
        })
        .collect();
    write_atomic(
        &base.out_dir.join("loo_table.json"),
        serde_json::to_vec_pretty(&rows)?.as_slice(),
    )?;
    let mut table = String::from("target\ts_acc\tbleu\td_acc\tg_score\n");
    for r in &rows {
        table.push_str(&format!(
            "{}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\n",
            r.target, r.s_acc, r.bleu, r.d_acc, r.g_score
        ));
    }
    write_atomic(&base.out_dir.join("loo_table.tsv"), table.as_bytes())?;

    let mut reports = Vec::new();
    for (t, r) in outcomes {
        match r {
            Ok(rep) => reports.push((t, rep)),
            Err(e) => return Err(e),
        }
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_rejects_target_among_sources() {
        let spec = ExperimentSpec {
            sources: vec!["a".into(), "b".into()],
            target: "a".into(),
            corpus_dir: PathBuf::from("/nonexistent"),
            out_dir: PathBuf::from("/tmp/x"),
            ..ExperimentSpec::default()
        };
        let err = spec.validate().unwrap_err();
        assert!(err.to_string().contains("must not appear"));
    }

    #[test]
    fn spec_rejects_bad_fraction() {
        let spec = ExperimentSpec {
            sources: vec!["a".into()],
            target: "b".into(),
            fraction: 0.0,
            ..ExperimentSpec::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn spec_toml_roundtrip() {
        let spec = ExperimentSpec {
            sources: vec!["movie".into(), "product".into()],
            target: "restaurant".into(),
            ..ExperimentSpec::default()
        };
        let text = spec.to_toml().unwrap();
        let back: ExperimentSpec = toml::from_str(&text).unwrap();
        assert_eq!(back.sources, spec.sources);
        assert_eq!(back.target, spec.target);
        assert_eq!(back.train, spec.train);
    }
}
