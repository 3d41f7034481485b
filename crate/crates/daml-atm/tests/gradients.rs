//! Finite-difference verification of every analytic gradient path, in
//! double precision: reconstruction loss, style loss over both gradient
//! pathways, classifier loss, and dual-number Hessian-vector products.
//!
//! The oracle is central differencing of the forward loss — independent of
//! the hand-written backward passes it checks.

use daml_atm::corpus::{build_vocab, DomainDataset, Split, Style, StyleRecord, Vocabulary};
use daml_atm::model::{Model, ModelConfig};
use daml_atm::objectives::{GumbelNoise, Objectives, StylePath};
use daml_atm::params::ParamSet;
use daml_atm::scalar::Dual;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

fn fixture() -> (Model, Vocabulary, Vec<StyleRecord>) {
    let records = vec![
        StyleRecord::new("the soup is good", Style::Positive, "rest").unwrap(),
        StyleRecord::new("the soup is bad and poor", Style::Negative, "rest").unwrap(),
        StyleRecord::new("the menu was fine", Style::Positive, "rest").unwrap(),
    ];
    let ds = DomainDataset::new("rest", records.clone(), Split::Train).unwrap();
    let vocab = build_vocab(&[ds], 1).unwrap();
    let model = Model::new(ModelConfig::tiny(), vocab.len()).unwrap();
    (model, vocab, records)
}

fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom < 1e-6 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

/// Check ≥ `need` random coordinates of `grad` against central differences
/// of `value_at`, requiring relative error < `tol`.
fn check_grad(
    base: &[f64],
    grad: &[f64],
    value_at: impl Fn(&[f64]) -> f64,
    need: usize,
    tol: f64,
    seed: u64,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked = 0;
    let mut tried = 0;
    while checked < need {
        tried += 1;
        assert!(tried < 40 * need, "not enough informative coordinates");
        let i = rng.gen_range(0..base.len());
        let mut p = base.to_vec();
        p[i] = base[i] + H;
        let lp = value_at(&p);
        p[i] = base[i] - H;
        let lm = value_at(&p);
        let fd = (lp - lm) / (2.0 * H);
        if fd.abs() < 1e-6 && grad[i].abs() < 1e-6 {
            continue; // flat coordinate (e.g. an embedding row unused by the batch)
        }
        let e = rel_err(grad[i], fd);
        assert!(
            e < tol,
            "coordinate {i}: analytic {} vs fd {fd}, rel err {e:.3e}",
            grad[i]
        );
        checked += 1;
    }
}

#[test]
fn rec_loss_gradient_matches_central_differences() {
    let (model, vocab, records) = fixture();
    let theta = model.init_theta(11);
    let obj = Objectives::new(&model, &vocab);
    let (_, g) = obj.rec_grad_t::<f64>(&theta.data, &records, true).unwrap();
    let g = g.unwrap();
    check_grad(
        &theta.data,
        &g,
        |p| obj.rec_value(p, &records).unwrap(),
        12,
        1e-5,
        101,
    );
}

#[test]
fn style_loss_gradient_matches_central_differences() {
    let (model, vocab, records) = fixture();
    let theta = model.init_theta(11);
    let gamma = model.init_gamma(12);
    let obj = Objectives::new(&model, &vocab);
    let (_, g) = obj
        .style_grad_t::<f64>(&theta.data, &gamma.data, &records, StylePath::Hidden, true)
        .unwrap();
    let g = g.unwrap();
    check_grad(
        &theta.data,
        &g,
        |p| obj.style_value(p, &gamma.data, &records, StylePath::Hidden).unwrap(),
        12,
        1e-5,
        102,
    );
}

#[test]
fn gumbel_style_gradient_matches_central_differences() {
    let (model, vocab, records) = fixture();
    let theta = model.init_theta(11);
    let gamma = model.init_gamma(12);
    let obj = Objectives::new(&model, &vocab);
    let shapes: Vec<(usize, usize)> = records
        .iter()
        .map(|r| (r.tokens().len() + 1, vocab.len()))
        .collect();
    let mut nrng = ChaCha8Rng::seed_from_u64(7);
    let noise = GumbelNoise::sample(&mut nrng, &shapes);
    let path = StylePath::Gumbel(&noise);
    let (_, g) = obj
        .style_grad_t::<f64>(&theta.data, &gamma.data, &records, path, true)
        .unwrap();
    let g = g.unwrap();
    // The straight-through estimator is a defined pseudo-gradient, not the
    // derivative of the hard forward value, so it is verified against the
    // finite difference of the estimator itself: the dual-number tangent of
    // the gradient program must equal a directional central difference of
    // that same program.
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut v = vec![0.0; theta.data.len()];
    for x in v.iter_mut() {
        *x = rng.gen_range(-1.0..1.0);
    }
    let norm = daml_atm::params::l2_norm(&v);
    for x in v.iter_mut() {
        *x /= norm;
    }
    let lifted = theta.lift_dual(&v);
    let (_, gd) = obj
        .style_grad_t::<Dual>(&lifted, &gamma.data, &records, path, true)
        .unwrap();
    let gd = gd.unwrap();
    // tangent of the gradient = H·v; compare against finite differences of
    // the estimator along v
    let eps = 1e-6;
    let mut p_plus = theta.data.clone();
    let mut p_minus = theta.data.clone();
    for i in 0..v.len() {
        p_plus[i] += eps * v[i];
        p_minus[i] -= eps * v[i];
    }
    let (_, gp) = obj
        .style_grad_t::<f64>(&p_plus, &gamma.data, &records, path, true)
        .unwrap();
    let (_, gm) = obj
        .style_grad_t::<f64>(&p_minus, &gamma.data, &records, path, true)
        .unwrap();
    let (gp, gm) = (gp.unwrap(), gm.unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut checked = 0;
    while checked < 10 {
        let i = rng.gen_range(0..g.len());
        let fd = (gp[i] - gm[i]) / (2.0 * eps);
        let hv = gd[i].du;
        if fd.abs() < 1e-6 && hv.abs() < 1e-6 {
            continue;
        }
        let e = rel_err(hv, fd);
        assert!(e < 1e-3, "coord {i}: dual {hv} vs fd {fd} ({e:.3e})");
        checked += 1;
    }
    // value part of the dual run must equal the plain gradient
    for (a, b) in g.iter().zip(&gd) {
        assert!((a - b.re).abs() < 1e-12);
    }
}

#[test]
fn cls_loss_gradient_matches_central_differences() {
    let (model, vocab, records) = fixture();
    let theta = model.init_theta(11);
    let gamma = model.init_gamma(12);
    let obj = Objectives::new(&model, &vocab);
    let lv = obj
        .loss_cls(&theta, &gamma, &records, StylePath::Hidden)
        .unwrap();
    let g = lv.grad_gamma.unwrap();
    let cls_value = |gdata: &[f64]| {
        let mut gtmp = ParamSet::zeros(model.gamma_layout.clone(), gamma.meta.clone());
        gtmp.data.copy_from_slice(gdata);
        obj.loss_cls(&theta, &gtmp, &records, StylePath::Hidden)
            .unwrap()
            .value
    };
    check_grad(&gamma.data, &g, cls_value, 10, 1e-5, 105);
}

#[test]
fn rec_hvp_matches_finite_difference_of_gradient() {
    let (model, vocab, records) = fixture();
    let theta = model.init_theta(21);
    let obj = Objectives::new(&model, &vocab);

    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let mut v = vec![0.0; theta.data.len()];
    for x in v.iter_mut() {
        *x = rng.gen_range(-1.0..1.0);
    }
    let norm = daml_atm::params::l2_norm(&v);
    for x in v.iter_mut() {
        *x /= norm;
    }
    let lifted = theta.lift_dual(&v);
    let (loss_d, gd) = obj.rec_grad_t::<Dual>(&lifted, &records, true).unwrap();
    let gd = gd.unwrap();

    let (loss_f, gf) = obj.rec_grad_t::<f64>(&theta.data, &records, true).unwrap();
    let gf = gf.unwrap();
    assert!((loss_d.re - loss_f).abs() < 1e-12);
    for (a, b) in gf.iter().zip(&gd) {
        assert!((a - b.re).abs() < 1e-12, "dual value part must equal f64 gradient");
    }
    // loss tangent = ⟨g, v⟩
    let dir: f64 = gf.iter().zip(&v).map(|(a, b)| a * b).sum();
    assert!(
        (loss_d.du - dir).abs() < 1e-9 * dir.abs().max(1.0),
        "{} vs {}",
        loss_d.du,
        dir
    );

    let eps = 1e-6;
    let mut p_plus = theta.data.clone();
    let mut p_minus = theta.data.clone();
    for i in 0..v.len() {
        p_plus[i] += eps * v[i];
        p_minus[i] -= eps * v[i];
    }
    let (_, gp) = obj.rec_grad_t::<f64>(&p_plus, &records, true).unwrap();
    let (_, gm) = obj.rec_grad_t::<f64>(&p_minus, &records, true).unwrap();
    let (gp, gm) = (gp.unwrap(), gm.unwrap());

    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let mut checked = 0;
    while checked < 12 {
        let i = rng.gen_range(0..v.len());
        let fd = (gp[i] - gm[i]) / (2.0 * eps);
        let hv = gd[i].du;
        if fd.abs() < 1e-6 && hv.abs() < 1e-6 {
            continue;
        }
        let e = rel_err(hv, fd);
        assert!(e < 1e-3, "coord {i}: dual {hv} vs fd {fd} ({e:.3e})");
        checked += 1;
    }
}

#[test]
fn decoder_state_gradients_flow_and_differ_by_prefix() {
    let (model, vocab, records) = fixture();
    let theta = model.init_theta(31);
    let rec = &records[0];
    let pos = daml_atm::corpus::encode_input(rec, Style::Positive, daml_atm::corpus::TaskPrefix::Transfer, &vocab, 12);
    let neg = daml_atm::corpus::encode_input(rec, Style::Negative, daml_atm::corpus::TaskPrefix::Transfer, &vocab, 12);
    let out = daml_atm::corpus::encode_output(rec, &vocab, 12);
    let sp = model.decoder_states(&theta, &pos, &out).unwrap();
    let sn = model.decoder_states(&theta, &neg, &out).unwrap();
    assert_eq!(sp.rows, out.len());
    let diff: f64 = sp
        .data
        .iter()
        .zip(&sn.data)
        .map(|(a, b)| (a - b).abs())
        .sum();
    assert!(diff > 1e-6, "states must depend on the style prefix");
}
