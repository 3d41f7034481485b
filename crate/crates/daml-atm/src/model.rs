//! The transfer network: a small encoder–decoder transformer trained from
//! scratch, plus the MLP style discriminator reading mean-pooled decoder
//! states.
//!
//! Forward and backward passes are hand-written and generic over
//! [`Scalar`], so the exact same code yields f64 gradients and, when run
//! over dual numbers, exact Hessian-vector products for the second-order
//! meta update. Architecture: pre-norm residual blocks, sinusoidal
//! positions, tied input/output embedding, ReLU feed-forward, bias-free
//! projections.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TaskPrefix, Vocabulary, STYLE_COUNT};
use crate::error::{Error, Result};
use crate::mat::{axpy, dot, Mat};
use crate::params::{ParamLayout, ParamMeta, ParamSet};
use crate::scalar::Scalar;

const LN_EPS: f64 = 1e-5;

/// Decoder/encoder hidden states: one row per position.
pub type HiddenStates = Mat<f64>;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    /// Hidden widths of the discriminator MLP; the class head is appended.
    pub disc_widths: Vec<usize>,
    pub dropout: f64,
}

impl ModelConfig {
    /// Desk-scale architecture trained from scratch.
    pub fn desk_default() -> Self {
        ModelConfig {
            layers: 2,
            heads: 4,
            model_dim: 64,
            ff_dim: 256,
            max_len: 24,
            disc_widths: vec![64, 64, 32],
            dropout: 0.0,
        }
    }

    /// A very small variant for gradient-check tests.
    pub fn tiny() -> Self {
        ModelConfig {
            layers: 1,
            heads: 2,
            model_dim: 16,
            ff_dim: 32,
            max_len: 12,
            disc_widths: vec![16, 16, 8],
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0
            || self.heads == 0
            || self.model_dim == 0
            || self.ff_dim == 0
            || self.max_len < 3
            || self.disc_widths.is_empty()
        {
            return Err(Error::InvalidConfig("model dimensions must be positive".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Layer-norm cache: normalized input and per-row inverse stddev.
struct LnCache<T> {
    xhat: Mat<T>,
    inv: Vec<T>,
}

struct AttnCache<T> {
    q: Mat<T>,
    k: Mat<T>,
    v: Mat<T>,
    /// Softmaxed scores, heads stacked along rows: (heads·nq) × nk.
    attn: Mat<T>,
    ctx: Mat<T>,
}

struct FfCache<T> {
    /// Post-ReLU hidden activations.
    h: Mat<T>,
}

struct EncLayerTrace<T> {
    ln1: LnCache<T>,
    a: Mat<T>,
    attn: AttnCache<T>,
    ln2: LnCache<T>,
    b: Mat<T>,
    ff: FfCache<T>,
    drop_attn: Option<Vec<f64>>,
    drop_ff: Option<Vec<f64>>,
}

struct DecLayerTrace<T> {
    ln1: LnCache<T>,
    a: Mat<T>,
    self_attn: AttnCache<T>,
    ln2: LnCache<T>,
    b: Mat<T>,
    cross: AttnCache<T>,
    ln3: LnCache<T>,
    c: Mat<T>,
    ff: FfCache<T>,
    drop_self: Option<Vec<f64>>,
    drop_cross: Option<Vec<f64>>,
    drop_ff: Option<Vec<f64>>,
}

/// Full activation record of one teacher-forced pass.
pub struct Trace<T> {
    pub input_ids: Vec<u32>,
    pub target_ids: Vec<u32>,
    dec_input_ids: Vec<u32>,
    enc_layers: Vec<EncLayerTrace<T>>,
    enc_lnf: LnCache<T>,
    pub h_enc: Mat<T>,
    dec_layers: Vec<DecLayerTrace<T>>,
    dec_lnf: LnCache<T>,
    pub h_dec: Mat<T>,
    pub logits: Mat<T>,
}

/// Discriminator activation record.
pub struct DiscTrace<T> {
    pool: Vec<T>,
    hidden: Vec<Vec<T>>,
    pub logits: Vec<T>,
    n_rows: usize,
}

/// Model geometry plus the parameter layouts; holds no weights itself.
pub struct Model {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub theta_layout: Arc<ParamLayout>,
    pub gamma_layout: Arc<ParamLayout>,
    pe: Mat<f64>,
}

impl Model {
    pub fn new(config: ModelConfig, vocab_size: usize) -> Result<Model> {
        config.validate()?;
        if vocab_size == 0 {
            return Err(Error::InvalidConfig("vocabulary is empty".into()));
        }
        let d = config.model_dim;
        let mut shapes: Vec<(String, usize, usize)> = vec![("emb".into(), vocab_size, d)];
        for l in 0..config.layers {
            for w in ["wq", "wk", "wv", "wo"] {
                shapes.push((format!("enc{l}.attn.{w}"), d, d));
            }
            shapes.push((format!("enc{l}.ln1.g"), 1, d));
            shapes.push((format!("enc{l}.ln1.b"), 1, d));
            shapes.push((format!("enc{l}.ln2.g"), 1, d));
            shapes.push((format!("enc{l}.ln2.b"), 1, d));
            shapes.push((format!("enc{l}.ff.w1"), d, config.ff_dim));
            shapes.push((format!("enc{l}.ff.w2"), config.ff_dim, d));
        }
        shapes.push(("enc.lnf.g".into(), 1, d));
        shapes.push(("enc.lnf.b".into(), 1, d));
        for l in 0..config.layers {
            for w in ["wq", "wk", "wv", "wo"] {
                shapes.push((format!("dec{l}.self.{w}"), d, d));
            }
            for w in ["wq", "wk", "wv", "wo"] {
                shapes.push((format!("dec{l}.cross.{w}"), d, d));
            }
            for ln in ["ln1", "ln2", "ln3"] {
                shapes.push((format!("dec{l}.{ln}.g"), 1, d));
                shapes.push((format!("dec{l}.{ln}.b"), 1, d));
            }
            shapes.push((format!("dec{l}.ff.w1"), d, config.ff_dim));
            shapes.push((format!("dec{l}.ff.w2"), config.ff_dim, d));
        }
        shapes.push(("dec.lnf.g".into(), 1, d));
        shapes.push(("dec.lnf.b".into(), 1, d));
        let theta_layout = Arc::new(ParamLayout::new(shapes));

        let mut widths = vec![d];
        widths.extend(&config.disc_widths);
        widths.push(STYLE_COUNT);
        let mut gshapes = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            gshapes.push((format!("disc.w{}", i + 1), pair[0], pair[1]));
            gshapes.push((format!("disc.b{}", i + 1), 1, pair[1]));
        }
        let gamma_layout = Arc::new(ParamLayout::new(gshapes));

        let mut pe = Mat::zeros(config.max_len, d);
        for pos in 0..config.max_len {
            for i in 0..d / 2 {
                let rate = (pos as f64) / 10000f64.powf(2.0 * i as f64 / d as f64);
                *pe.at_mut(pos, 2 * i) = rate.sin();
                *pe.at_mut(pos, 2 * i + 1) = rate.cos();
            }
        }

        Ok(Model {
            config,
            vocab_size,
            theta_layout,
            gamma_layout,
            pe,
        })
    }

    pub fn n_disc_layers(&self) -> usize {
        self.config.disc_widths.len() + 1
    }

    /// Initialize the sequence model parameters. The transfer task prefix
    /// embedding starts as a copy of the reconstruct prefix so the transfer
    /// pathway inherits copying behavior before the style signal shapes it.
    pub fn init_theta(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::zeros(
            self.theta_layout.clone(),
            ParamMeta {
                kind: "seq2seq".into(),
                model_dim: self.config.model_dim,
                vocab_size: self.vocab_size,
                seed,
            },
        );
        for e in self.theta_layout.entries().to_vec() {
            let slice = &mut p.data[e.offset..e.offset + e.rows * e.cols];
            if e.name == "emb" {
                let a = 0.1;
                for x in slice.iter_mut() {
                    *x = rng.gen_range(-a..a);
                }
            } else if e.name.ends_with(".g") {
                slice.iter_mut().for_each(|x| *x = 1.0);
            } else if e.name.ends_with(".b") {
                // zero
            } else {
                let a = (6.0 / (e.rows + e.cols) as f64).sqrt();
                for x in slice.iter_mut() {
                    *x = rng.gen_range(-a..a);
                }
            }
        }
        let d = self.config.model_dim;
        let rec = Vocabulary::task_prefix(TaskPrefix::Reconstruct) as usize;
        let tst = Vocabulary::task_prefix(TaskPrefix::Transfer) as usize;
        let emb = self.theta_layout.range("emb");
        let (start, _) = (emb.start, emb.end);
        let rec_row: Vec<f64> = p.data[start + rec * d..start + (rec + 1) * d].to_vec();
        p.data[start + tst * d..start + (tst + 1) * d].copy_from_slice(&rec_row);
        p
    }

    pub fn init_gamma(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::zeros(
            self.gamma_layout.clone(),
            ParamMeta {
                kind: "discriminator".into(),
                model_dim: self.config.model_dim,
                vocab_size: 0,
                seed,
            },
        );
        for e in self.gamma_layout.entries().to_vec() {
            let slice = &mut p.data[e.offset..e.offset + e.rows * e.cols];
            if e.name.starts_with("disc.w") {
                let a = (6.0 / (e.rows + e.cols) as f64).sqrt();
                for x in slice.iter_mut() {
                    *x = rng.gen_range(-a..a);
                }
            }
        }
        p
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.len() > self.config.max_len {
            return Err(Error::LengthOverflow {
                len: ids.len(),
                max: self.config.max_len,
            });
        }
        for &id in ids {
            if id as usize >= self.vocab_size {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab: self.vocab_size,
                });
            }
        }
        Ok(())
    }

    fn w<'a, T>(&self, theta: &'a [T], name: &str) -> &'a [T] {
        &theta[self.theta_layout.range(name)]
    }

    fn embed<T: Scalar>(&self, theta: &[T], ids: &[u32]) -> Mat<T> {
        let d = self.config.model_dim;
        let emb = self.w(theta, "emb");
        let mut x = Mat::zeros(ids.len(), d);
        for (i, &id) in ids.iter().enumerate() {
            let row = &emb[id as usize * d..(id as usize + 1) * d];
            let out = x.row_mut(i);
            for j in 0..d {
                out[j] = row[j] + T::from_f64(self.pe.at(i, j));
            }
        }
        x
    }

    /// Encoder stack over the input ids; `Ok` rows equal the input length.
    pub fn encode(&self, theta: &ParamSet, input_ids: &[u32]) -> Result<HiddenStates> {
        self.check_ids(input_ids)?;
        let (h, _) = self.encode_t::<f64>(&theta.data, input_ids, &mut None);
        Ok(h)
    }

    fn encode_t<T: Scalar>(
        &self,
        theta: &[T],
        ids: &[u32],
        dropout: &mut Option<(&mut ChaCha8Rng, f64)>,
    ) -> (Mat<T>, (Vec<EncLayerTrace<T>>, LnCache<T>)) {
        let mut x = self.embed(theta, ids);
        let mut layers = Vec::with_capacity(self.config.layers);
        for l in 0..self.config.layers {
            let (g1, b1) = (self.w(theta, &format!("enc{l}.ln1.g")), self.w(theta, &format!("enc{l}.ln1.b")));
            let (a, ln1) = layer_norm_fwd(&x, g1, b1);
            let attn = attention_fwd(
                &a,
                &a,
                self.w(theta, &format!("enc{l}.attn.wq")),
                self.w(theta, &format!("enc{l}.attn.wk")),
                self.w(theta, &format!("enc{l}.attn.wv")),
                self.w(theta, &format!("enc{l}.attn.wo")),
                self.config.heads,
                false,
            );
            let mut attn_out = attn.0;
            let drop_attn = apply_dropout(&mut attn_out, dropout);
            let mut x1 = x.clone();
            x1.add_assign(&attn_out);

            let (g2, b2) = (self.w(theta, &format!("enc{l}.ln2.g")), self.w(theta, &format!("enc{l}.ln2.b")));
            let (b, ln2) = layer_norm_fwd(&x1, g2, b2);
            let (mut ff_out, ff) = ff_fwd(
                &b,
                self.w(theta, &format!("enc{l}.ff.w1")),
                self.w(theta, &format!("enc{l}.ff.w2")),
                self.config.ff_dim,
            );
            let drop_ff = apply_dropout(&mut ff_out, dropout);
            let mut x2 = x1.clone();
            x2.add_assign(&ff_out);

            layers.push(EncLayerTrace {
                ln1,
                a,
                attn: attn.1,
                ln2,
                b,
                ff,
                drop_attn,
                drop_ff,
            });
            x = x2;
        }
        let (gf, bf) = (self.w(theta, "enc.lnf.g"), self.w(theta, "enc.lnf.b"));
        let (h, lnf) = layer_norm_fwd(&x, gf, bf);
        (h, (layers, lnf))
    }

    /// Teacher-forced pass: encoder over `input_ids`, decoder forced to emit
    /// `target_ids` (which the caller normally terminates with EOS).
    pub fn forward_t<T: Scalar>(
        &self,
        theta: &[T],
        input_ids: &[u32],
        target_ids: &[u32],
        mut dropout: Option<(&mut ChaCha8Rng, f64)>,
    ) -> Result<Trace<T>> {
        self.check_ids(input_ids)?;
        self.check_ids(target_ids)?;
        if target_ids.is_empty() {
            return Err(Error::EmptyStates);
        }
        debug_assert_eq!(theta.len(), self.theta_layout.total());

        let (h_enc, (enc_layers, enc_lnf)) = self.encode_t(theta, input_ids, &mut dropout);

        let mut dec_input_ids = Vec::with_capacity(target_ids.len());
        dec_input_ids.push(Vocabulary::BOS);
        dec_input_ids.extend_from_slice(&target_ids[..target_ids.len() - 1]);

        let mut y = self.embed(theta, &dec_input_ids);
        let mut dec_layers = Vec::with_capacity(self.config.layers);
        for l in 0..self.config.layers {
            let (g1, b1) = (self.w(theta, &format!("dec{l}.ln1.g")), self.w(theta, &format!("dec{l}.ln1.b")));
            let (a, ln1) = layer_norm_fwd(&y, g1, b1);
            let self_attn = attention_fwd(
                &a,
                &a,
                self.w(theta, &format!("dec{l}.self.wq")),
                self.w(theta, &format!("dec{l}.self.wk")),
                self.w(theta, &format!("dec{l}.self.wv")),
                self.w(theta, &format!("dec{l}.self.wo")),
                self.config.heads,
                true,
            );
            let mut self_out = self_attn.0;
            let drop_self = apply_dropout(&mut self_out, &mut dropout);
            let mut y1 = y.clone();
            y1.add_assign(&self_out);

            let (g2, b2) = (self.w(theta, &format!("dec{l}.ln2.g")), self.w(theta, &format!("dec{l}.ln2.b")));
            let (b, ln2) = layer_norm_fwd(&y1, g2, b2);
            let cross = attention_fwd(
                &b,
                &h_enc,
                self.w(theta, &format!("dec{l}.cross.wq")),
                self.w(theta, &format!("dec{l}.cross.wk")),
                self.w(theta, &format!("dec{l}.cross.wv")),
                self.w(theta, &format!("dec{l}.cross.wo")),
                self.config.heads,
                false,
            );
            let mut cross_out = cross.0;
            let drop_cross = apply_dropout(&mut cross_out, &mut dropout);
            let mut y2 = y1.clone();
            y2.add_assign(&cross_out);

            let (g3, b3) = (self.w(theta, &format!("dec{l}.ln3.g")), self.w(theta, &format!("dec{l}.ln3.b")));
            let (c, ln3) = layer_norm_fwd(&y2, g3, b3);
            let (mut ff_out, ff) = ff_fwd(
                &c,
                self.w(theta, &format!("dec{l}.ff.w1")),
                self.w(theta, &format!("dec{l}.ff.w2")),
                self.config.ff_dim,
            );
            let drop_ff = apply_dropout(&mut ff_out, &mut dropout);
            let mut y3 = y2.clone();
            y3.add_assign(&ff_out);

            dec_layers.push(DecLayerTrace {
                ln1,
                a,
                self_attn: self_attn.1,
                ln2,
                b,
                cross: cross.1,
                ln3,
                c,
                ff,
                drop_self,
                drop_cross,
                drop_ff,
            });
            y = y3;
        }
        let (gf, bf) = (self.w(theta, "dec.lnf.g"), self.w(theta, "dec.lnf.b"));
        let (h_dec, dec_lnf) = layer_norm_fwd(&y, gf, bf);

        // Tied output projection: logits = H · embᵀ.
        let emb = self.w(theta, "emb");
        let d = self.config.model_dim;
        let n = h_dec.rows;
        let mut logits = Mat::zeros(n, self.vocab_size);
        for t in 0..n {
            let hrow = h_dec.row(t);
            let orow = logits.row_mut(t);
            for v in 0..self.vocab_size {
                orow[v] = dot(hrow, &emb[v * d..(v + 1) * d]);
            }
        }

        Ok(Trace {
            input_ids: input_ids.to_vec(),
            target_ids: target_ids.to_vec(),
            dec_input_ids,
            enc_layers,
            enc_lnf,
            h_enc,
            dec_layers,
            dec_lnf,
            h_dec,
            logits,
        })
    }

    /// Decoder last-layer states of the teacher-forced pass: one row per
    /// target position.
    pub fn decoder_states(
        &self,
        theta: &ParamSet,
        input_ids: &[u32],
        output_ids: &[u32],
    ) -> Result<HiddenStates> {
        let trace = self.forward_t::<f64>(&theta.data, input_ids, output_ids, None)?;
        Ok(trace.h_dec)
    }

    /// Teacher-forced sequence log-probability `Σ_t log p(y_t | ·)`.
    pub fn sequence_logprob(
        &self,
        theta: &ParamSet,
        input_ids: &[u32],
        output_ids: &[u32],
    ) -> Result<f64> {
        let trace = self.forward_t::<f64>(&theta.data, input_ids, output_ids, None)?;
        let mut total = 0.0;
        for (t, &y) in trace.target_ids.iter().enumerate() {
            let row = trace.logits.row(t);
            total += row[y as usize] - log_sum_exp(row);
        }
        Ok(total)
    }

    /// Backward through one teacher-forced trace. Upstream gradients may
    /// arrive on the logits (`d_logits`), on the decoder states
    /// (`d_states`), or both; the returned vector follows the θ layout.
    pub fn backward<T: Scalar>(
        &self,
        theta: &[T],
        trace: &Trace<T>,
        d_logits: Option<&Mat<T>>,
        d_states: Option<&Mat<T>>,
    ) -> Vec<T> {
        let d = self.config.model_dim;
        let mut grad = vec![T::ZERO; self.theta_layout.total()];
        let n = trace.h_dec.rows;

        let mut d_hdec = Mat::zeros(n, d);
        if let Some(dl) = d_logits {
            // logits = H·Eᵀ  ⇒  dH += dL·E, dE += dLᵀ·H
            let emb = self.w(theta, "emb");
            let emb_range = self.theta_layout.range("emb");
            for t in 0..n {
                let dlrow = dl.row(t);
                let hrow = trace.h_dec.row(t);
                let out = d_hdec.row_mut(t);
                for v in 0..self.vocab_size {
                    let c = dlrow[v];
                    if c.re() != 0.0 || c != T::ZERO {
                        axpy(c, &emb[v * d..(v + 1) * d], out);
                        axpy(c, hrow, &mut grad[emb_range.start + v * d..emb_range.start + (v + 1) * d]);
                    }
                }
            }
        }
        if let Some(ds) = d_states {
            d_hdec.add_assign(ds);
        }

        // Decoder final LN.
        let mut dy = {
            let r = self.theta_layout.range("dec.lnf.g");
            let rb = self.theta_layout.range("dec.lnf.b");
            let (dg, rest) = split_two(&mut grad, r.clone(), rb.clone());
            layer_norm_bwd(&trace.dec_lnf, self.w(theta, "dec.lnf.g"), &d_hdec, dg, rest)
        };

        let mut d_henc = Mat::zeros(trace.h_enc.rows, d);
        for l in (0..self.config.layers).rev() {
            let t = &trace.dec_layers[l];
            // FF sublayer: y3 = y2 + drop(ff(ln3(y2)))
            let mut d_ff = dy.clone();
            mask_grad(&mut d_ff, &t.drop_ff);
            let d_c = {
                let (gw1, gw2) = (
                    self.theta_layout.range(&format!("dec{l}.ff.w1")),
                    self.theta_layout.range(&format!("dec{l}.ff.w2")),
                );
                ff_bwd(
                    &t.c,
                    &t.ff,
                    self.w(theta, &format!("dec{l}.ff.w1")),
                    self.w(theta, &format!("dec{l}.ff.w2")),
                    &d_ff,
                    &mut grad,
                    gw1,
                    gw2,
                    self.config.ff_dim,
                )
            };
            let d_y2_ln = {
                let (rg, rb) = (
                    self.theta_layout.range(&format!("dec{l}.ln3.g")),
                    self.theta_layout.range(&format!("dec{l}.ln3.b")),
                );
                let (dg, db) = split_two(&mut grad, rg, rb);
                layer_norm_bwd(&t.ln3, self.w(theta, &format!("dec{l}.ln3.g")), &d_c, dg, db)
            };
            dy.add_assign(&d_y2_ln);

            // Cross-attention sublayer: y2 = y1 + drop(cross(ln2(y1), h_enc))
            let mut d_cross = dy.clone();
            mask_grad(&mut d_cross, &t.drop_cross);
            let (d_b, d_kv) = attention_bwd(
                &t.b,
                &trace.h_enc,
                &t.cross,
                self.w(theta, &format!("dec{l}.cross.wq")),
                self.w(theta, &format!("dec{l}.cross.wk")),
                self.w(theta, &format!("dec{l}.cross.wv")),
                self.w(theta, &format!("dec{l}.cross.wo")),
                &d_cross,
                &mut grad,
                self.theta_layout.range(&format!("dec{l}.cross.wq")),
                self.theta_layout.range(&format!("dec{l}.cross.wk")),
                self.theta_layout.range(&format!("dec{l}.cross.wv")),
                self.theta_layout.range(&format!("dec{l}.cross.wo")),
                self.config.heads,
                false,
            );
            d_henc.add_assign(&d_kv);
            let d_y1_ln = {
                let (rg, rb) = (
                    self.theta_layout.range(&format!("dec{l}.ln2.g")),
                    self.theta_layout.range(&format!("dec{l}.ln2.b")),
                );
                let (dg, db) = split_two(&mut grad, rg, rb);
                layer_norm_bwd(&t.ln2, self.w(theta, &format!("dec{l}.ln2.g")), &d_b, dg, db)
            };
            dy.add_assign(&d_y1_ln);

            // Masked self-attention sublayer: y1 = y0 + drop(self(ln1(y0)))
            let mut d_self = dy.clone();
            mask_grad(&mut d_self, &t.drop_self);
            let (d_a_q, d_a_kv) = attention_bwd(
                &t.a,
                &t.a,
                &t.self_attn,
                self.w(theta, &format!("dec{l}.self.wq")),
                self.w(theta, &format!("dec{l}.self.wk")),
                self.w(theta, &format!("dec{l}.self.wv")),
                self.w(theta, &format!("dec{l}.self.wo")),
                &d_self,
                &mut grad,
                self.theta_layout.range(&format!("dec{l}.self.wq")),
                self.theta_layout.range(&format!("dec{l}.self.wk")),
                self.theta_layout.range(&format!("dec{l}.self.wv")),
                self.theta_layout.range(&format!("dec{l}.self.wo")),
                self.config.heads,
                true,
            );
            let mut d_a = d_a_q;
            d_a.add_assign(&d_a_kv);
            let d_y0_ln = {
                let (rg, rb) = (
                    self.theta_layout.range(&format!("dec{l}.ln1.g")),
                    self.theta_layout.range(&format!("dec{l}.ln1.b")),
                );
                let (dg, db) = split_two(&mut grad, rg, rb);
                layer_norm_bwd(&t.ln1, self.w(theta, &format!("dec{l}.ln1.g")), &d_a, dg, db)
            };
            dy.add_assign(&d_y0_ln);
        }

        // Decoder input embedding scatter.
        {
            let emb_range = self.theta_layout.range("emb");
            for (i, &id) in trace.dec_input_ids.iter().enumerate() {
                let row = dy.row(i);
                let off = emb_range.start + id as usize * d;
                axpy(T::ONE, row, &mut grad[off..off + d]);
            }
        }

        // Encoder final LN.
        let mut dx = {
            let (rg, rb) = (
                self.theta_layout.range("enc.lnf.g"),
                self.theta_layout.range("enc.lnf.b"),
            );
            let (dg, db) = split_two(&mut grad, rg, rb);
            layer_norm_bwd(&trace.enc_lnf, self.w(theta, "enc.lnf.g"), &d_henc, dg, db)
        };

        for l in (0..self.config.layers).rev() {
            let t = &trace.enc_layers[l];
            let mut d_ff = dx.clone();
            mask_grad(&mut d_ff, &t.drop_ff);
            let d_b = {
                let (gw1, gw2) = (
                    self.theta_layout.range(&format!("enc{l}.ff.w1")),
                    self.theta_layout.range(&format!("enc{l}.ff.w2")),
                );
                ff_bwd(
                    &t.b,
                    &t.ff,
                    self.w(theta, &format!("enc{l}.ff.w1")),
                    self.w(theta, &format!("enc{l}.ff.w2")),
                    &d_ff,
                    &mut grad,
                    gw1,
                    gw2,
                    self.config.ff_dim,
                )
            };
            let d_x1_ln = {
                let (rg, rb) = (
                    self.theta_layout.range(&format!("enc{l}.ln2.g")),
                    self.theta_layout.range(&format!("enc{l}.ln2.b")),
                );
                let (dg, db) = split_two(&mut grad, rg, rb);
                layer_norm_bwd(&t.ln2, self.w(theta, &format!("enc{l}.ln2.g")), &d_b, dg, db)
            };
            dx.add_assign(&d_x1_ln);

            let mut d_attn = dx.clone();
            mask_grad(&mut d_attn, &t.drop_attn);
            let (d_a_q, d_a_kv) = attention_bwd(
                &t.a,
                &t.a,
                &t.attn,
                self.w(theta, &format!("enc{l}.attn.wq")),
                self.w(theta, &format!("enc{l}.attn.wk")),
                self.w(theta, &format!("enc{l}.attn.wv")),
                self.w(theta, &format!("enc{l}.attn.wo")),
                &d_attn,
                &mut grad,
                self.theta_layout.range(&format!("enc{l}.attn.wq")),
                self.theta_layout.range(&format!("enc{l}.attn.wk")),
                self.theta_layout.range(&format!("enc{l}.attn.wv")),
                self.theta_layout.range(&format!("enc{l}.attn.wo")),
                self.config.heads,
                false,
            );
            let mut d_a = d_a_q;
            d_a.add_assign(&d_a_kv);
            let d_x0_ln = {
                let (rg, rb) = (
                    self.theta_layout.range(&format!("enc{l}.ln1.g")),
                    self.theta_layout.range(&format!("enc{l}.ln1.b")),
                );
                let (dg, db) = split_two(&mut grad, rg, rb);
                layer_norm_bwd(&t.ln1, self.w(theta, &format!("enc{l}.ln1.g")), &d_a, dg, db)
            };
            dx.add_assign(&d_x0_ln);
        }

        // Encoder input embedding scatter.
        {
            let emb_range = self.theta_layout.range("emb");
            for (i, &id) in trace.input_ids.iter().enumerate() {
                let row = dx.row(i);
                let off = emb_range.start + id as usize * d;
                axpy(T::ONE, row, &mut grad[off..off + d]);
            }
        }

        grad
    }

    /// Mean-pool states, run the discriminator MLP; logits length equals the
    /// style count.
    pub fn discriminate(&self, gamma: &ParamSet, states: &HiddenStates) -> Result<Vec<f64>> {
        let trace = self.disc_forward::<f64>(&gamma.data, states)?;
        Ok(trace.logits)
    }

    pub fn disc_forward<T: Scalar>(
        &self,
        gamma: &[T],
        states: &Mat<T>,
    ) -> Result<DiscTrace<T>> {
        if states.rows == 0 {
            return Err(Error::EmptyStates);
        }
        debug_assert_eq!(states.cols, self.config.model_dim);
        let pool = states.mean_rows();
        let mut hidden = Vec::new();
        let mut cur = pool.clone();
        let n_layers = self.n_disc_layers();
        for i in 1..=n_layers {
            let w = &gamma[self.gamma_layout.range(&format!("disc.w{i}"))];
            let b = &gamma[self.gamma_layout.range(&format!("disc.b{i}"))];
            let (rows, cols) = {
                let e = self.gamma_layout.entry(&format!("disc.w{i}")).unwrap();
                (e.rows, e.cols)
            };
            debug_assert_eq!(cur.len(), rows);
            let mut next = vec![T::ZERO; cols];
            for (r, &x) in cur.iter().enumerate() {
                axpy(x, &w[r * cols..(r + 1) * cols], &mut next);
            }
            for (n, &bi) in next.iter_mut().zip(b) {
                *n += bi;
            }
            if i < n_layers {
                for n in next.iter_mut() {
                    if n.re() <= 0.0 {
                        *n = T::ZERO;
                    }
                }
                hidden.push(next.clone());
            }
            cur = next;
        }
        Ok(DiscTrace {
            pool,
            hidden,
            logits: cur,
            n_rows: states.rows,
        })
    }

    /// Backward through the discriminator: returns (dγ, d_states).
    pub fn disc_backward<T: Scalar>(
        &self,
        gamma: &[T],
        trace: &DiscTrace<T>,
        d_logits: &[T],
    ) -> (Vec<T>, Mat<T>) {
        let mut dgamma = vec![T::ZERO; self.gamma_layout.total()];
        let n_layers = self.n_disc_layers();
        let mut d_cur: Vec<T> = d_logits.to_vec();
        for i in (1..=n_layers).rev() {
            let name_w = format!("disc.w{i}");
            let e = self.gamma_layout.entry(&name_w).unwrap().clone();
            let (rows, cols) = (e.rows, e.cols);
            let input: &[T] = if i == 1 {
                &trace.pool
            } else {
                &trace.hidden[i - 2]
            };
            {
                let wrange = self.gamma_layout.range(&name_w);
                let gw = &mut dgamma[wrange];
                for (r, &x) in input.iter().enumerate() {
                    axpy(x, &d_cur, &mut gw[r * cols..(r + 1) * cols]);
                }
            }
            {
                let brange = self.gamma_layout.range(&format!("disc.b{i}"));
                let gb = &mut dgamma[brange];
                axpy(T::ONE, &d_cur, gb);
            }
            let w = &gamma[self.gamma_layout.range(&name_w)];
            let mut d_in = vec![T::ZERO; rows];
            for (r, di) in d_in.iter_mut().enumerate() {
                *di = dot(&w[r * cols..(r + 1) * cols], &d_cur);
            }
            if i > 1 {
                // ReLU gate of the previous hidden layer.
                for (di, h) in d_in.iter_mut().zip(&trace.hidden[i - 2]) {
                    if h.re() <= 0.0 {
                        *di = T::ZERO;
                    }
                }
            }
            d_cur = d_in;
        }
        // Mean pool: every row receives d_pool / n.
        let inv = T::from_f64(1.0 / trace.n_rows as f64);
        let mut d_states = Mat::zeros(trace.n_rows, self.config.model_dim);
        for i in 0..trace.n_rows {
            let row = d_states.row_mut(i);
            for (r, &dp) in row.iter_mut().zip(&d_cur) {
                *r = dp * inv;
            }
        }
        (dgamma, d_states)
    }

    /// Greedy decoding from BOS until EOS or `max_len` tokens; ties break
    /// toward the lowest token id. Returns generated ids (EOS kept as the
    /// final token when produced).
    pub fn generate(&self, theta: &ParamSet, input_ids: &[u32], max_len: usize) -> Result<Vec<u32>> {
        self.check_ids(input_ids)?;
        let max_len = max_len.min(self.config.max_len);
        let (h_enc, _) = self.encode_t::<f64>(&theta.data, input_ids, &mut None);
        let mut out: Vec<u32> = Vec::new();
        while out.len() < max_len {
            let logits = self.decode_step(&theta.data, &h_enc, &out);
            let mut best = 0usize;
            let mut best_v = logits[0];
            for (v, &x) in logits.iter().enumerate().skip(1) {
                if x > best_v {
                    best_v = x;
                    best = v;
                }
            }
            out.push(best as u32);
            if best as u32 == Vocabulary::EOS {
                break;
            }
        }
        Ok(out)
    }

    /// Logits of the next token after the partial output `prefix`.
    fn decode_step(&self, theta: &[f64], h_enc: &Mat<f64>, prefix: &[u32]) -> Vec<f64> {
        let d = self.config.model_dim;
        let mut dec_input = Vec::with_capacity(prefix.len() + 1);
        dec_input.push(Vocabulary::BOS);
        dec_input.extend_from_slice(prefix);
        let mut y = self.embed(theta, &dec_input);
        for l in 0..self.config.layers {
            let (g1, b1) = (self.w(theta, &format!("dec{l}.ln1.g")), self.w(theta, &format!("dec{l}.ln1.b")));
            let (a, _) = layer_norm_fwd(&y, g1, b1);
            let self_out = attention_fwd(
                &a,
                &a,
                self.w(theta, &format!("dec{l}.self.wq")),
                self.w(theta, &format!("dec{l}.self.wk")),
                self.w(theta, &format!("dec{l}.self.wv")),
                self.w(theta, &format!("dec{l}.self.wo")),
                self.config.heads,
                true,
            )
            .0;
            let mut y1 = y.clone();
            y1.add_assign(&self_out);
            let (g2, b2) = (self.w(theta, &format!("dec{l}.ln2.g")), self.w(theta, &format!("dec{l}.ln2.b")));
            let (b, _) = layer_norm_fwd(&y1, g2, b2);
            let cross_out = attention_fwd(
                &b,
                h_enc,
                self.w(theta, &format!("dec{l}.cross.wq")),
                self.w(theta, &format!("dec{l}.cross.wk")),
                self.w(theta, &format!("dec{l}.cross.wv")),
                self.w(theta, &format!("dec{l}.cross.wo")),
                self.config.heads,
                false,
            )
            .0;
            let mut y2 = y1.clone();
            y2.add_assign(&cross_out);
            let (g3, b3) = (self.w(theta, &format!("dec{l}.ln3.g")), self.w(theta, &format!("dec{l}.ln3.b")));
            let (c, _) = layer_norm_fwd(&y2, g3, b3);
            let ff_out = ff_fwd(
                &c,
                self.w(theta, &format!("dec{l}.ff.w1")),
                self.w(theta, &format!("dec{l}.ff.w2")),
                self.config.ff_dim,
            )
            .0;
            let mut y3 = y2.clone();
            y3.add_assign(&ff_out);
            y = y3;
        }
        let (gf, bf) = (self.w(theta, "dec.lnf.g"), self.w(theta, "dec.lnf.b"));
        let (h, _) = layer_norm_fwd(&y, gf, bf);
        let hrow = h.row(h.rows - 1);
        let emb = self.w(theta, "emb");
        (0..self.vocab_size)
            .map(|v| dot(hrow, &emb[v * d..(v + 1) * d]))
            .collect()
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Row-wise softmax in T with max-subtraction; columns ≥ `limit` get 0.
fn softmax_row_masked<T: Scalar>(row: &mut [T], limit: usize) {
    let mut m = row[0].re();
    for x in row[1..limit].iter() {
        m = m.max(x.re());
    }
    let mt = T::from_f64(m);
    let mut sum = T::ZERO;
    for x in row[..limit].iter_mut() {
        *x = (*x - mt).exp();
        sum += *x;
    }
    let inv = T::ONE / sum;
    for x in row[..limit].iter_mut() {
        *x *= inv;
    }
    for x in row[limit..].iter_mut() {
        *x = T::ZERO;
    }
}

pub fn softmax_vec<T: Scalar>(logits: &[T]) -> Vec<T> {
    let mut v = logits.to_vec();
    let n = v.len();
    softmax_row_masked(&mut v, n);
    v
}

fn layer_norm_fwd<T: Scalar>(x: &Mat<T>, g: &[T], b: &[T]) -> (Mat<T>, LnCache<T>) {
    let d = x.cols;
    let invd = T::from_f64(1.0 / d as f64);
    let mut y = Mat::zeros(x.rows, d);
    let mut xhat = Mat::zeros(x.rows, d);
    let mut inv = Vec::with_capacity(x.rows);
    for i in 0..x.rows {
        let row = x.row(i);
        let mut mean = T::ZERO;
        for &v in row {
            mean += v;
        }
        mean *= invd;
        let mut var = T::ZERO;
        for &v in row {
            let c = v - mean;
            var += c * c;
        }
        var *= invd;
        let istd = T::ONE / (var + T::from_f64(LN_EPS)).sqrt();
        let xh = xhat.row_mut(i);
        let yr = y.row_mut(i);
        for j in 0..d {
            let h = (row[j] - mean) * istd;
            xh[j] = h;
            yr[j] = g[j] * h + b[j];
        }
        inv.push(istd);
    }
    (y, LnCache { xhat, inv })
}

fn layer_norm_bwd<T: Scalar>(
    cache: &LnCache<T>,
    g: &[T],
    dy: &Mat<T>,
    dg: &mut [T],
    db: &mut [T],
) -> Mat<T> {
    let d = dy.cols;
    let invd = T::from_f64(1.0 / d as f64);
    let mut dx = Mat::zeros(dy.rows, d);
    for i in 0..dy.rows {
        let dyr = dy.row(i);
        let xh = cache.xhat.row(i);
        let istd = cache.inv[i];
        let mut sum_dxhat = T::ZERO;
        let mut sum_dxhat_xhat = T::ZERO;
        for j in 0..d {
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
            let dxh = dyr[j] * g[j];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xh[j];
        }
        sum_dxhat *= invd;
        sum_dxhat_xhat *= invd;
        let out = dx.row_mut(i);
        for j in 0..d {
            let dxh = dyr[j] * g[j];
            out[j] = istd * (dxh - sum_dxhat - xh[j] * sum_dxhat_xhat);
        }
    }
    dx
}

/// `x · W` with W row-major (d_in × d_out).
fn linear_fwd<T: Scalar>(x: &Mat<T>, w: &[T], d_out: usize) -> Mat<T> {
    let d_in = x.cols;
    debug_assert_eq!(w.len(), d_in * d_out);
    let mut y = Mat::zeros(x.rows, d_out);
    for i in 0..x.rows {
        let xrow = x.row(i);
        let yrow = y.row_mut(i);
        for (k, &a) in xrow.iter().enumerate() {
            axpy(a, &w[k * d_out..(k + 1) * d_out], yrow);
        }
    }
    y
}

/// `dy · Wᵀ`.
fn linear_bwd_input<T: Scalar>(dy: &Mat<T>, w: &[T], d_in: usize) -> Mat<T> {
    let d_out = dy.cols;
    let mut dx = Mat::zeros(dy.rows, d_in);
    for i in 0..dy.rows {
        let dyrow = dy.row(i);
        let dxrow = dx.row_mut(i);
        for (k, slot) in dxrow.iter_mut().enumerate() {
            *slot = dot(&w[k * d_out..(k + 1) * d_out], dyrow);
        }
    }
    dx
}

/// `gw += xᵀ · dy`.
fn linear_bwd_weight<T: Scalar>(x: &Mat<T>, dy: &Mat<T>, gw: &mut [T]) {
    let d_out = dy.cols;
    for i in 0..x.rows {
        let xrow = x.row(i);
        let dyrow = dy.row(i);
        for (k, &a) in xrow.iter().enumerate() {
            axpy(a, dyrow, &mut gw[k * d_out..(k + 1) * d_out]);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_fwd<T: Scalar>(
    xq: &Mat<T>,
    xkv: &Mat<T>,
    wq: &[T],
    wk: &[T],
    wv: &[T],
    wo: &[T],
    heads: usize,
    causal: bool,
) -> (Mat<T>, AttnCache<T>) {
    let d = xq.cols;
    let dh = d / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let (nq, nk) = (xq.rows, xkv.rows);
    let q = linear_fwd(xq, wq, d);
    let k = linear_fwd(xkv, wk, d);
    let v = linear_fwd(xkv, wv, d);
    let mut attn = Mat::zeros(heads * nq, nk);
    let mut ctx = Mat::zeros(nq, d);
    for h in 0..heads {
        let cs = h * dh;
        for i in 0..nq {
            let qrow = &q.row(i)[cs..cs + dh];
            let arow = attn.row_mut(h * nq + i);
            let limit = if causal { (i + 1).min(nk) } else { nk };
            for j in 0..limit {
                arow[j] = dot(qrow, &k.row(j)[cs..cs + dh]) * scale;
            }
            softmax_row_masked(arow, limit);
        }
        for i in 0..nq {
            let arow = attn.row(h * nq + i);
            let crow = &mut ctx.row_mut(i)[cs..cs + dh];
            let limit = if causal { (i + 1).min(nk) } else { nk };
            for j in 0..limit {
                axpy(arow[j], &v.row(j)[cs..cs + dh], crow);
            }
        }
    }
    let out = linear_fwd(&ctx, wo, d);
    (out, AttnCache { q, k, v, attn, ctx })
}

#[allow(clippy::too_many_arguments)]
fn attention_bwd<T: Scalar>(
    xq: &Mat<T>,
    xkv: &Mat<T>,
    cache: &AttnCache<T>,
    wq: &[T],
    wk: &[T],
    wv: &[T],
    wo: &[T],
    d_out: &Mat<T>,
    grad: &mut [T],
    rq: std::ops::Range<usize>,
    rk: std::ops::Range<usize>,
    rv: std::ops::Range<usize>,
    ro: std::ops::Range<usize>,
    heads: usize,
    causal: bool,
) -> (Mat<T>, Mat<T>) {
    let d = xq.cols;
    let dh = d / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let (nq, nk) = (xq.rows, xkv.rows);

    linear_bwd_weight(&cache.ctx, d_out, &mut grad[ro]);
    let d_ctx = linear_bwd_input(d_out, wo, d);

    let mut dq = Mat::zeros(nq, d);
    let mut dk = Mat::zeros(nk, d);
    let mut dv = Mat::zeros(nk, d);
    for h in 0..heads {
        let cs = h * dh;
        for i in 0..nq {
            let limit = if causal { (i + 1).min(nk) } else { nk };
            let arow = cache.attn.row(h * nq + i);
            let dctx = &d_ctx.row(i)[cs..cs + dh];
            // dA and dV
            let mut da = vec![T::ZERO; limit];
            for j in 0..limit {
                da[j] = dot(dctx, &cache.v.row(j)[cs..cs + dh]);
                axpy(arow[j], dctx, &mut dv.row_mut(j)[cs..cs + dh]);
            }
            // softmax backward
            let mut s = T::ZERO;
            for j in 0..limit {
                s += da[j] * arow[j];
            }
            let qrow: Vec<T> = cache.q.row(i)[cs..cs + dh].to_vec();
            for j in 0..limit {
                let ds = arow[j] * (da[j] - s) * scale;
                axpy(ds, &cache.k.row(j)[cs..cs + dh], &mut dq.row_mut(i)[cs..cs + dh]);
                axpy(ds, &qrow, &mut dk.row_mut(j)[cs..cs + dh]);
            }
        }
    }

    linear_bwd_weight(xq, &dq, &mut grad[rq]);
    linear_bwd_weight(xkv, &dk, &mut grad[rk]);
    linear_bwd_weight(xkv, &dv, &mut grad[rv]);
    let d_xq = linear_bwd_input(&dq, wq, d);
    let mut d_xkv = linear_bwd_input(&dk, wk, d);
    d_xkv.add_assign(&linear_bwd_input(&dv, wv, d));
    (d_xq, d_xkv)
}

fn ff_fwd<T: Scalar>(x: &Mat<T>, w1: &[T], w2: &[T], ff_dim: usize) -> (Mat<T>, FfCache<T>) {
    let mut h = linear_fwd(x, w1, ff_dim);
    for v in h.data.iter_mut() {
        if v.re() <= 0.0 {
            *v = T::ZERO;
        }
    }
    let y = linear_fwd(&h, w2, x.cols);
    (y, FfCache { h })
}

#[allow(clippy::too_many_arguments)]
fn ff_bwd<T: Scalar>(
    x: &Mat<T>,
    cache: &FfCache<T>,
    w1: &[T],
    w2: &[T],
    dy: &Mat<T>,
    grad: &mut [T],
    rw1: std::ops::Range<usize>,
    rw2: std::ops::Range<usize>,
    ff_dim: usize,
) -> Mat<T> {
    linear_bwd_weight(&cache.h, dy, &mut grad[rw2]);
    let mut dh = linear_bwd_input(dy, w2, ff_dim);
    for (g, h) in dh.data.iter_mut().zip(&cache.h.data) {
        if h.re() <= 0.0 {
            *g = T::ZERO;
        }
    }
    linear_bwd_weight(x, &dh, &mut grad[rw1]);
    linear_bwd_input(&dh, w1, x.cols)
}

/// Sample an inverted-dropout mask and apply it in place; `None` while the
/// rate is zero or no rng is supplied. Meta stages always run without
/// dropout.
fn apply_dropout<T: Scalar>(
    x: &mut Mat<T>,
    dropout: &mut Option<(&mut ChaCha8Rng, f64)>,
) -> Option<Vec<f64>> {
    match dropout {
        Some((rng, p)) if *p > 0.0 => {
            let keep = 1.0 - *p;
            let mask: Vec<f64> = (0..x.data.len())
                .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            for (v, &m) in x.data.iter_mut().zip(&mask) {
                *v *= T::from_f64(m);
            }
            Some(mask)
        }
        _ => None,
    }
}

fn mask_grad<T: Scalar>(g: &mut Mat<T>, mask: &Option<Vec<f64>>) {
    if let Some(mask) = mask {
        for (v, &m) in g.data.iter_mut().zip(mask) {
            *v *= T::from_f64(m);
        }
    }
}

/// Borrow two disjoint ranges of one gradient buffer mutably.
fn split_two<T>(
    grad: &mut [T],
    a: std::ops::Range<usize>,
    b: std::ops::Range<usize>,
) -> (&mut [T], &mut [T]) {
    debug_assert!(a.end <= b.start || b.end <= a.start);
    if a.start < b.start {
        let (left, right) = grad.split_at_mut(b.start);
        (&mut left[a], &mut right[..b.end - b.start])
    } else {
        let (left, right) = grad.split_at_mut(a.start);
        let blen = b.end - b.start;
        (&mut right[..a.end - a.start], &mut left[b.start..b.start + blen])
    }
}
