//! Training losses: discriminator classification, reconstruction, and the
//! adversarial style loss, plus their per-task forms.
//!
//! Gradient flows are deliberately disjoint: the classification loss updates
//! only the discriminator γ (the sequence model is treated as a constant
//! feature extractor), while the style loss updates only the sequence model
//! θ against a frozen discriminator. Reductions are per-token mean within a
//! sentence, then mean over sentences, keeping magnitudes comparable across
//! sentence lengths.
//!
//! The gradient cores are generic over [`Scalar`]: run over dual numbers
//! they deliver exact Hessian-vector products to the meta-learning stage.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{encode_input, encode_output, MetaTask, StyleRecord, TaskPrefix, Vocabulary};
use crate::error::{Error, Result};
use crate::mat::{axpy, dot, Mat};
use crate::model::{softmax_vec, Model};
use crate::params::ParamSet;
use crate::scalar::Scalar;

/// Which pathway carries the style-loss gradient from the discriminator
/// into the sequence model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientPath {
    /// Feed teacher-forced decoder states to the discriminator.
    HiddenState,
    /// Straight-through gumbel-softmax over output embeddings
    /// (temperature 1.0, no annealing); ablation pathway.
    GumbelSoftmax,
}

/// Pre-sampled gumbel noise, one (positions × vocab) matrix per sentence.
/// Noise is fixed for the lifetime of one loss evaluation so gradients and
/// Hessian-vector products see the same sample.
#[derive(Debug, Clone)]
pub struct GumbelNoise {
    pub per_record: Vec<Mat<f64>>,
}

impl GumbelNoise {
    pub fn sample(rng: &mut ChaCha8Rng, shapes: &[(usize, usize)]) -> Self {
        let per_record = shapes
            .iter()
            .map(|&(n, v)| {
                let mut m = Mat::zeros(n, v);
                for x in m.data.iter_mut() {
                    let u: f64 = rng.gen::<f64>().max(1e-12);
                    *x = -(-(u.ln())).ln();
                }
                m
            })
            .collect();
        GumbelNoise { per_record }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum StylePath<'a> {
    Hidden,
    Gumbel(&'a GumbelNoise),
}

/// A scalar loss with the gradients that were requested from it.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    pub count: usize,
    pub grad_theta: Option<Vec<f64>>,
    pub grad_gamma: Option<Vec<f64>>,
}

impl LossValue {
    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        let ok = self.value.is_finite()
            && self.grad_theta.as_deref().is_none_or(crate::params::all_finite)
            && self.grad_gamma.as_deref().is_none_or(crate::params::all_finite);
        if ok {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }
}

/// Loss functions bound to one model geometry and vocabulary.
pub struct Objectives<'a> {
    pub model: &'a Model,
    pub vocab: &'a Vocabulary,
}

impl<'a> Objectives<'a> {
    pub fn new(model: &'a Model, vocab: &'a Vocabulary) -> Self {
        Objectives { model, vocab }
    }

    fn max_len(&self) -> usize {
        self.model.config.max_len
    }

    fn rec_pair(&self, rec: &StyleRecord) -> (Vec<u32>, Vec<u32>) {
        (
            encode_input(rec, rec.style, TaskPrefix::Reconstruct, self.vocab, self.max_len()),
            encode_output(rec, self.vocab, self.max_len()),
        )
    }

    fn style_pair(&self, rec: &StyleRecord) -> (Vec<u32>, Vec<u32>) {
        (
            encode_input(rec, rec.style.opposite(), TaskPrefix::Transfer, self.vocab, self.max_len()),
            encode_output(rec, self.vocab, self.max_len()),
        )
    }

    /// Reconstruction loss: teacher-forced NLL of reproducing the input
    /// under the reconstruct prefix with the source style. Gradients w.r.t.
    /// θ only.
    pub fn loss_rec(&self, theta: &ParamSet, batch: &[StyleRecord]) -> Result<LossValue> {
        let (value, grad) = self.rec_grad_t::<f64>(&theta.data, batch, true)?;
        let lv = LossValue {
            value,
            count: batch.len(),
            grad_theta: grad,
            grad_gamma: None,
        };
        lv.ensure_finite("loss_rec")?;
        Ok(lv)
    }

    /// Value-only reconstruction loss (used by convergence monitors and the
    /// finite-difference oracles).
    pub fn rec_value(&self, theta: &[f64], batch: &[StyleRecord]) -> Result<f64> {
        Ok(self.rec_grad_t::<f64>(theta, batch, false)?.0)
    }

    /// Generic core of the reconstruction loss.
    pub fn rec_grad_t<T: Scalar>(
        &self,
        theta: &[T],
        batch: &[StyleRecord],
        want_grad: bool,
    ) -> Result<(T, Option<Vec<T>>)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let inv_batch = T::from_f64(1.0 / batch.len() as f64);
        let mut total = T::ZERO;
        let mut grad = if want_grad {
            Some(vec![T::ZERO; self.model.theta_layout.total()])
        } else {
            None
        };
        for rec in batch {
            let (input, target) = self.rec_pair(rec);
            let trace = self.model.forward_t(theta, &input, &target, None)?;
            let n = target.len();
            let inv_tok = T::from_f64(1.0 / n as f64);
            let mut dlogits = want_grad.then(|| Mat::zeros(n, self.model.vocab_size));
            let mut nll = T::ZERO;
            for (t, &y) in target.iter().enumerate() {
                let p = softmax_vec(trace.logits.row(t));
                nll += -(p[y as usize].ln());
                if let Some(dl) = &mut dlogits {
                    let coef = inv_tok * inv_batch;
                    let row = dl.row_mut(t);
                    for (v, &pv) in p.iter().enumerate() {
                        row[v] = pv * coef;
                    }
                    row[y as usize] -= coef;
                }
            }
            total += nll * inv_tok;
            if let (Some(g), Some(dl)) = (&mut grad, &dlogits) {
                let gs = self.model.backward(theta, &trace, Some(dl), None);
                for (a, b) in g.iter_mut().zip(gs) {
                    *a += b;
                }
            }
        }
        Ok((total * inv_batch, grad))
    }

    /// Classifier loss: cross-entropy of the discriminator on the decoder
    /// states of same-style teacher-forced reconstructions. Gradients w.r.t.
    /// γ only; θ is a constant here.
    pub fn loss_cls(
        &self,
        theta: &ParamSet,
        gamma: &ParamSet,
        batch: &[StyleRecord],
        path: StylePath<'_>,
    ) -> Result<LossValue> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let inv_batch = 1.0 / batch.len() as f64;
        let mut value = 0.0;
        let mut grad = vec![0.0; self.model.gamma_layout.total()];
        for (ri, rec) in batch.iter().enumerate() {
            let (input, target) = self.rec_pair(rec);
            let trace = self.model.forward_t::<f64>(&theta.data, &input, &target, None)?;
            let states = match path {
                StylePath::Hidden => trace.h_dec,
                StylePath::Gumbel(noise) => {
                    pooled_st_embedding::<f64>(self.model, &theta.data, &trace.logits, &noise.per_record[ri]).0
                }
            };
            let dtrace = self.model.disc_forward::<f64>(&gamma.data, &states)?;
            let p = softmax_vec(&dtrace.logits);
            let gold = rec.style.index();
            value += -(p[gold].ln());
            let mut dlogits: Vec<f64> = p.iter().map(|&x| x * inv_batch).collect();
            dlogits[gold] -= inv_batch;
            let (dg, _) = self.model.disc_backward::<f64>(&gamma.data, &dtrace, &dlogits);
            for (a, b) in grad.iter_mut().zip(dg) {
                *a += b;
            }
        }
        let lv = LossValue {
            value: value * inv_batch,
            count: batch.len(),
            grad_theta: None,
            grad_gamma: Some(grad),
        };
        lv.ensure_finite("loss_cls")?;
        Ok(lv)
    }

    /// Adversarial style loss: the frozen discriminator must label the
    /// opposite-style teacher-forced pass as the opposite style. Gradients
    /// w.r.t. θ only; passing an unfrozen γ is a contract violation.
    pub fn loss_style(
        &self,
        theta: &ParamSet,
        gamma: &ParamSet,
        batch: &[StyleRecord],
        path: StylePath<'_>,
    ) -> Result<LossValue> {
        if !gamma.is_frozen() {
            return Err(Error::FreezeContract("loss_style".into()));
        }
        let gamma_t: Vec<f64> = gamma.data.clone();
        let (value, grad) = self.style_grad_t::<f64>(&theta.data, &gamma_t, batch, path, true)?;
        let lv = LossValue {
            value,
            count: batch.len(),
            grad_theta: grad,
            grad_gamma: None,
        };
        lv.ensure_finite("loss_style")?;
        Ok(lv)
    }

    pub fn style_value(
        &self,
        theta: &[f64],
        gamma: &[f64],
        batch: &[StyleRecord],
        path: StylePath<'_>,
    ) -> Result<f64> {
        Ok(self.style_grad_t::<f64>(theta, gamma, batch, path, false)?.0)
    }

    /// Generic core of the style loss. γ enters as plain values (constant
    /// under differentiation); θ carries the scalar type.
    pub fn style_grad_t<T: Scalar>(
        &self,
        theta: &[T],
        gamma: &[f64],
        batch: &[StyleRecord],
        path: StylePath<'_>,
        want_grad: bool,
    ) -> Result<(T, Option<Vec<T>>)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let gamma_t: Vec<T> = gamma.iter().map(|&x| T::from_f64(x)).collect();
        let inv_batch = T::from_f64(1.0 / batch.len() as f64);
        let mut total = T::ZERO;
        let mut grad = if want_grad {
            Some(vec![T::ZERO; self.model.theta_layout.total()])
        } else {
            None
        };
        for (ri, rec) in batch.iter().enumerate() {
            let (input, target) = self.style_pair(rec);
            let trace = self.model.forward_t(theta, &input, &target, None)?;
            let target_style = rec.style.opposite();
            match path {
                StylePath::Hidden => {
                    let dtrace = self.model.disc_forward(&gamma_t, &trace.h_dec)?;
                    let p = softmax_vec(&dtrace.logits);
                    total += -(p[target_style.index()].ln());
                    if let Some(g) = &mut grad {
                        let mut dlogits: Vec<T> = p.iter().map(|&x| x * inv_batch).collect();
                        dlogits[target_style.index()] -= inv_batch;
                        let (_, d_states) =
                            self.model.disc_backward(&gamma_t, &dtrace, &dlogits);
                        let gs = self.model.backward(theta, &trace, None, Some(&d_states));
                        for (a, b) in g.iter_mut().zip(gs) {
                            *a += b;
                        }
                    }
                }
                StylePath::Gumbel(noise) => {
                    let (pooled, soft) = pooled_st_embedding(
                        self.model,
                        theta,
                        &trace.logits,
                        &noise.per_record[ri],
                    );
                    let dtrace = self.model.disc_forward(&gamma_t, &pooled)?;
                    let p = softmax_vec(&dtrace.logits);
                    total += -(p[target_style.index()].ln());
                    if let Some(g) = &mut grad {
                        let mut dlogits: Vec<T> = p.iter().map(|&x| x * inv_batch).collect();
                        dlogits[target_style.index()] -= inv_batch;
                        let (_, d_pooled) =
                            self.model.disc_backward(&gamma_t, &dtrace, &dlogits);
                        let d_model_logits = st_embedding_bwd(
                            self.model,
                            theta,
                            &trace.logits,
                            &soft,
                            d_pooled.row(0),
                            g,
                        );
                        let gs =
                            self.model.backward(theta, &trace, Some(&d_model_logits), None);
                        for (a, b) in g.iter_mut().zip(gs) {
                            *a += b;
                        }
                    }
                }
            }
        }
        Ok((total * inv_batch, grad))
    }

    /// Per-task reconstruction and style losses. Domain-adaptive mode
    /// rejects impure tasks.
    pub fn task_losses(
        &self,
        theta: &ParamSet,
        gamma: &ParamSet,
        task: &MetaTask,
        daml_mode: bool,
        path: StylePath<'_>,
    ) -> Result<(LossValue, LossValue)> {
        if task.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if daml_mode {
            task.ensure_pure()?;
        }
        let rec = self.loss_rec(theta, &task.records)?;
        let style = self.loss_style(theta, gamma, &task.records, path)?;
        Ok((rec, style))
    }
}

/// Soft distributions after adding gumbel noise, one row per position.
type SoftDist<T> = Mat<T>;

/// Straight-through pooled output embedding: the pooled value is the mean
/// of hard argmax embeddings; the gradient toward the model flows through
/// the soft distribution into the logits (plus the hard rows themselves).
fn pooled_st_embedding<T: Scalar>(
    model: &Model,
    theta: &[T],
    logits: &Mat<T>,
    noise: &Mat<f64>,
) -> (Mat<T>, SoftDist<T>) {
    let d = model.config.model_dim;
    let emb = &theta[model.theta_layout.range("emb")];
    let n = logits.rows;
    let inv_n = T::from_f64(1.0 / n as f64);
    let mut soft = Mat::zeros(n, model.vocab_size);
    let mut pooled = Mat::zeros(1, d);
    for t in 0..n {
        let z: Vec<T> = logits
            .row(t)
            .iter()
            .zip(noise.row(t))
            .map(|(&l, &g)| l + T::from_f64(g))
            .collect();
        let p = softmax_vec(&z);
        let mut arg = 0usize;
        for (v, pv) in p.iter().enumerate() {
            if pv.re() > p[arg].re() {
                arg = v;
            }
        }
        let row = pooled.row_mut(0);
        axpy(inv_n, &emb[arg * d..(arg + 1) * d], row);
        soft.row_mut(t).copy_from_slice(&p);
    }
    (pooled, soft)
}

/// Adjoint of [`pooled_st_embedding`]: scatters the embedding gradient into
/// `grad` and returns the gradient on the model logits.
fn st_embedding_bwd<T: Scalar>(
    model: &Model,
    theta: &[T],
    logits: &Mat<T>,
    soft: &SoftDist<T>,
    d_pooled: &[T],
    grad: &mut [T],
) -> Mat<T> {
    let d = model.config.model_dim;
    let emb = &theta[model.theta_layout.range("emb")];
    let emb_range = model.theta_layout.range("emb");
    let n = logits.rows;
    let inv_n = T::from_f64(1.0 / n as f64);
    let mut d_logits = Mat::zeros(n, model.vocab_size);
    for t in 0..n {
        let p = soft.row(t);
        let mut arg = 0usize;
        for (v, pv) in p.iter().enumerate() {
            if pv.re() > p[arg].re() {
                arg = v;
            }
        }
        // hard path
        axpy(
            inv_n,
            d_pooled,
            &mut grad[emb_range.start + arg * d..emb_range.start + (arg + 1) * d],
        );
        // soft path: dp_v = ⟨E_v, d_pooled⟩/n, then softmax jacobian
        let mut dp = vec![T::ZERO; model.vocab_size];
        let mut s = T::ZERO;
        for v in 0..model.vocab_size {
            dp[v] = dot(&emb[v * d..(v + 1) * d], d_pooled) * inv_n;
            s += dp[v] * p[v];
        }
        let row = d_logits.row_mut(t);
        for v in 0..model.vocab_size {
            row[v] = p[v] * (dp[v] - s);
        }
    }
    d_logits
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, DomainDataset, Split, Style};
    use crate::model::ModelConfig;

    fn fixture() -> (Model, Vocabulary, Vec<StyleRecord>) {
        let records = vec![
            StyleRecord::new("the soup is good", Style::Positive, "rest").unwrap(),
            StyleRecord::new("the soup is bad", Style::Negative, "rest").unwrap(),
            StyleRecord::new("the menu was fine", Style::Positive, "rest").unwrap(),
        ];
        let ds = DomainDataset::new("rest", records.clone(), Split::Train).unwrap();
        let vocab = build_vocab(&[ds], 1).unwrap();
        let model = Model::new(ModelConfig::tiny(), vocab.len()).unwrap();
        (model, vocab, records)
    }

    #[test]
    fn rec_loss_is_uniform_for_zero_embeddings() {
        let (model, vocab, records) = fixture();
        let mut theta = model.init_theta(5);
        // zero the tied output embedding rows -> uniform softmax
        for x in theta.get_mut("emb") {
            *x = 0.0;
        }
        let obj = Objectives::new(&model, &vocab);
        let lv = obj.loss_rec(&theta, &records).unwrap();
        let expect = (vocab.len() as f64).ln();
        assert!((lv.value - expect).abs() < 1e-9, "{} vs {}", lv.value, expect);
        assert!(lv.grad_gamma.is_none());
    }

    #[test]
    fn style_loss_requires_frozen_gamma() {
        let (model, vocab, records) = fixture();
        let theta = model.init_theta(5);
        let gamma = model.init_gamma(6);
        let obj = Objectives::new(&model, &vocab);
        let err = obj
            .loss_style(&theta, &gamma, &records, StylePath::Hidden)
            .unwrap_err();
        assert!(matches!(err, Error::FreezeContract(_)));
    }

    #[test]
    fn style_loss_constant_discriminator_gives_ln2_and_zero_grad() {
        let (model, vocab, records) = fixture();
        let theta = model.init_theta(5);
        let mut gamma = model.init_gamma(6);
        // zero the head layer: logits are constant (0, 0) whatever the input
        let n = model.n_disc_layers();
        for x in gamma.get_mut(&format!("disc.w{n}")) {
            *x = 0.0;
        }
        for x in gamma.get_mut(&format!("disc.b{n}")) {
            *x = 0.0;
        }
        gamma.freeze();
        let obj = Objectives::new(&model, &vocab);
        let lv = obj
            .loss_style(&theta, &gamma, &records, StylePath::Hidden)
            .unwrap();
        assert!((lv.value - 2f64.ln()).abs() < 1e-12);
        let g = lv.grad_theta.unwrap();
        let norm = crate::params::l2_norm(&g);
        assert!(norm < 1e-12, "θ-gradient should vanish, norm {norm}");
        assert!(lv.grad_gamma.is_none());
    }

    #[test]
    fn cls_loss_uniform_head_is_ln2() {
        let (model, vocab, records) = fixture();
        let theta = model.init_theta(5);
        let mut gamma = model.init_gamma(6);
        let n = model.n_disc_layers();
        for x in gamma.get_mut(&format!("disc.w{n}")) {
            *x = 0.0;
        }
        for x in gamma.get_mut(&format!("disc.b{n}")) {
            *x = 0.0;
        }
        let obj = Objectives::new(&model, &vocab);
        let lv = obj
            .loss_cls(&theta, &gamma, &records, StylePath::Hidden)
            .unwrap();
        assert!((lv.value - 2f64.ln()).abs() < 1e-12);
        assert!(lv.grad_theta.is_none());
    }

    #[test]
    fn hand_set_logit_cross_entropy() {
        // -log(e^2 / (e^2 + 1)) for a (2.0, 0.0) logit pair, gold class 0
        let expect = -(2f64.exp() / (2f64.exp() + 1.0)).ln();
        assert!((expect - 0.126928).abs() < 1e-5);
        let p = softmax_vec(&[2.0f64, 0.0]);
        assert!(((-(p[0].ln())) - expect).abs() < 1e-12);
    }

    #[test]
    fn batch_order_invariance() {
        let (model, vocab, records) = fixture();
        let theta = model.init_theta(5);
        let obj = Objectives::new(&model, &vocab);
        let a = obj.loss_rec(&theta, &records).unwrap().value;
        let mut rev = records.clone();
        rev.reverse();
        let b = obj.loss_rec(&theta, &rev).unwrap().value;
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn task_losses_reject_impure_tasks_in_daml_mode() {
        let (model, vocab, mut records) = fixture();
        let theta = model.init_theta(5);
        let mut gamma = model.init_gamma(6);
        gamma.freeze();
        records[1].domain = "movie".into();
        let task = MetaTask {
            domain: "rest".into(),
            records,
            kind: crate::corpus::TaskRole::MetaTrain,
        };
        let obj = Objectives::new(&model, &vocab);
        let err = obj
            .task_losses(&theta, &gamma, &task, true, StylePath::Hidden)
            .unwrap_err();
        assert!(matches!(err, Error::ImpureTask { .. }));
        // mixed-task mode accepts the same task
        assert!(obj
            .task_losses(&theta, &gamma, &task, false, StylePath::Hidden)
            .is_ok());
    }
}
