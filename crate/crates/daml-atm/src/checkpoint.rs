//! Versioned checkpoint container: all named tensors of both parameter
//! sets, the model geometry, the vocabulary (plus its fingerprint) and
//! optionally the training rng state. Files are written to a temporary
//! sibling and renamed into place.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::{LayoutEntry, ParamLayout, ParamMeta, ParamSet};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointParams {
    pub entries: Vec<LayoutEntry>,
    pub meta: ParamMeta,
    pub frozen: bool,
    pub data: Vec<f64>,
}

impl CheckpointParams {
    fn capture(p: &ParamSet) -> Self {
        CheckpointParams {
            entries: p.layout.entries().to_vec(),
            meta: p.meta.clone(),
            frozen: p.is_frozen(),
            data: p.data.clone(),
        }
    }

    fn restore(&self) -> Result<ParamSet> {
        let shapes: Vec<(String, usize, usize)> = self
            .entries
            .iter()
            .map(|e| (e.name.clone(), e.rows, e.cols))
            .collect();
        let layout = Arc::new(ParamLayout::new(shapes));
        if layout.total() != self.data.len() {
            return Err(Error::Checkpoint(format!(
                "tensor data length {} does not match layout total {}",
                self.data.len(),
                layout.total()
            )));
        }
        let mut p = ParamSet::zeros(layout, self.meta.clone());
        p.data.copy_from_slice(&self.data);
        if self.frozen {
            p.freeze();
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let pos = rng.get_word_pos();
        RngState {
            seed: rng.get_seed(),
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_word_pos(((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128);
        rng
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model_config: ModelConfig,
    pub vocab: Vocabulary,
    pub vocab_fingerprint: u64,
    pub theta: CheckpointParams,
    pub gamma: CheckpointParams,
    pub rng_state: Option<RngState>,
}

impl Checkpoint {
    pub fn capture(
        model: &Model,
        theta: &ParamSet,
        gamma: &ParamSet,
        vocab: &Vocabulary,
        rng: Option<&ChaCha8Rng>,
    ) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            model_config: model.config.clone(),
            vocab: vocab.clone(),
            vocab_fingerprint: vocab.fingerprint(),
            theta: CheckpointParams::capture(theta),
            gamma: CheckpointParams::capture(gamma),
            rng_state: rng.map(RngState::capture),
        }
    }

    /// Atomic write: serialize to `<path>.tmp`, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec(self)?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut ckpt: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        ckpt.vocab.rebuild_index();
        if ckpt.vocab.fingerprint() != ckpt.vocab_fingerprint {
            return Err(Error::Checkpoint(
                "vocabulary fingerprint mismatch: checkpoint is corrupt".into(),
            ));
        }
        Ok(ckpt)
    }

    /// Rebuild the model and both parameter sets; when `expect_vocab` is
    /// given its fingerprint must match the checkpointed vocabulary.
    pub fn restore(&self, expect_vocab: Option<&Vocabulary>) -> Result<(Model, ParamSet, ParamSet)> {
        if let Some(v) = expect_vocab {
            if v.fingerprint() != self.vocab_fingerprint {
                return Err(Error::Checkpoint(
                    "checkpoint was trained with a different vocabulary".into(),
                ));
            }
        }
        let model = Model::new(self.model_config.clone(), self.vocab.len())?;
        let theta = self.theta.restore()?;
        let gamma = self.gamma.restore()?;
        if theta.len() != model.theta_layout.total() || gamma.len() != model.gamma_layout.total() {
            return Err(Error::Checkpoint(
                "tensor shapes do not match the model configuration".into(),
            ));
        }
        theta.ensure_finite("checkpoint theta")?;
        gamma.ensure_finite("checkpoint gamma")?;
        Ok((model, theta, gamma))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, DomainDataset, Split, Style, StyleRecord};

    fn fixture() -> (Model, Vocabulary) {
        let ds = DomainDataset::new(
            "rest",
            vec![StyleRecord::new("good soup here", Style::Positive, "rest").unwrap()],
            Split::Train,
        )
        .unwrap();
        let vocab = build_vocab(&[ds], 1).unwrap();
        let model = Model::new(ModelConfig::tiny(), vocab.len()).unwrap();
        (model, vocab)
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let (model, vocab) = fixture();
        let theta = model.init_theta(3);
        let mut gamma = model.init_gamma(4);
        gamma.freeze();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let _ = rand::Rng::gen::<f64>(&mut rng);
        let ckpt = Checkpoint::capture(&model, &theta, &gamma, &vocab, Some(&rng));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt.json");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        let (model2, theta2, gamma2) = loaded.restore(Some(&vocab)).unwrap();
        assert_eq!(theta2.data, theta.data);
        assert_eq!(gamma2.data, gamma.data);
        assert!(gamma2.is_frozen());
        assert_eq!(model2.config, model.config);
        let mut restored = loaded.rng_state.unwrap().restore();
        assert_eq!(rand::Rng::gen::<f64>(&mut restored), rand::Rng::gen::<f64>(&mut rng));
    }

    #[test]
    fn vocab_mismatch_is_rejected() {
        let (model, vocab) = fixture();
        let theta = model.init_theta(3);
        let gamma = model.init_gamma(4);
        let ckpt = Checkpoint::capture(&model, &theta, &gamma, &vocab, None);
        let other = build_vocab(
            &[DomainDataset::new(
                "rest",
                vec![StyleRecord::new("different words entirely", Style::Negative, "rest").unwrap()],
                Split::Train,
            )
            .unwrap()],
            1,
        )
        .unwrap();
        assert!(ckpt.restore(Some(&other)).is_err());
        assert!(ckpt.restore(Some(&vocab)).is_ok());
    }
}
