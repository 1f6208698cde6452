use super::*;
use crate::corpus::{Special, Utterance};
use crate::objective::kl_on_graph;
use crate::tensor::{Graph, Reduction, Tensor, Var};
use crate::testutil::{tiny_config, tiny_data, tiny_model};

fn alpha_var(g: &mut Graph<f64>, a: f64) -> Var {
    g.constant(Tensor::scalar(a))
}

fn z_var(g: &mut Graph<f64>, z: &[f64]) -> Var {
    g.constant(Tensor::matrix(1, z.len(), z.to_vec()).unwrap())
}

#[test]
fn config_validation() {
    let mut c = tiny_config(50);
    assert!(c.validate().is_ok());
    c.heads = 3;
    assert!(matches!(c.validate(), Err(ModelError::Config(_))));
    let mut c = tiny_config(50);
    c.latent = 1;
    assert!(c.validate().is_err());
    let mut c = tiny_config(50);
    c.injection_interval = 3;
    assert!(c.validate().is_err());
    assert!(ModelConfig::paper(1000).validate().is_ok());
    assert!(ModelConfig::desk(300).validate().is_ok());
}

#[test]
fn injection_sites_follow_interval() {
    let c = ModelConfig::desk(300);
    assert_eq!(c.injection_sites(), vec![2]);
    let p = ModelConfig::paper(300);
    assert_eq!(p.injection_sites(), vec![4, 8, 12, 16, 20]);
}

#[test]
fn zero_head_weights_give_bias_mean() {
    let data = tiny_data();
    let mut model = tiny_model(&data);
    let [w, b] = model.prior_head_params();
    let shape = model.params.get(w).shape().to_vec();
    model.params.set(w, Tensor::zeros(&shape)).unwrap();
    let k = model.config.latent;
    let bias: Vec<f64> = (0..2 * k).map(|i| 0.1 * i as f64 - 0.2).collect();
    model.params.set(b, Tensor::vector(bias.clone()).unwrap()).unwrap();
    for ex in &data.train[..3] {
        let mut g = Graph::no_grad();
        let p = model.encode_prior_zp(&mut g, &ex.prior).unwrap().values(&g);
        assert_eq!(p.mu, bias[..k].to_vec());
        assert_eq!(p.logvar, bias[k..].to_vec());
    }
}

#[test]
fn missing_latent_slot_is_contract_error() {
    let data = tiny_data();
    let model = tiny_model(&data);
    let mut seq = data.train[0].prior.clone();
    seq.tokens[0] = Special::Bos.id();
    let mut g = Graph::no_grad();
    assert!(matches!(model.encode_prior_zp(&mut g, &seq), Err(ModelError::Contract(_))));
    assert!(matches!(model.encode_posterior_zp(&mut g, &seq), Err(ModelError::Contract(_))));
}

#[test]
fn overlong_sequence_is_contract_error() {
    let data = tiny_data();
    let model = tiny_model(&data);
    let mut seq = data.train[0].decoder.clone();
    while seq.len() <= model.config.max_len {
        seq.push_target(Special::Unk.id());
    }
    let mut g = Graph::no_grad();
    let z = z_var(&mut g, &[0.0; 3]);
    let a = alpha_var(&mut g, 0.5);
    assert!(matches!(
        model.decode(&mut g, &seq, z, a, Default::default()),
        Err(ModelError::Contract(_))
    ));
}

#[test]
fn logvar_is_clamped() {
    let data = tiny_data();
    let mut model = tiny_model(&data);
    let [_, b] = model.prior_head_params();
    let k = model.config.latent;
    let mut bias = vec![0.0; 2 * k];
    bias[k] = 50.0;
    bias[k + 1] = -50.0;
    model.params.set(b, Tensor::vector(bias).unwrap()).unwrap();
    let mut g = Graph::no_grad();
    let p = model.encode_prior_zp(&mut g, &data.train[0].prior).unwrap().values(&g);
    assert!(p.logvar.iter().all(|v| v.abs() <= LOGVAR_LIMIT));
    assert!(p.logvar.iter().any(|&v| v == LOGVAR_LIMIT));
}

#[test]
fn posterior_is_deterministic_and_order_sensitive() {
    let data = tiny_data();
    let model = tiny_model(&data);
    let ex = &data.splits.train[0];
    let run = |profile: &[String]| {
        let seq = data.encoder.posterior_zp(&data.vocab, profile);
        let mut g = Graph::no_grad();
        model.encode_posterior_zp(&mut g, &seq).unwrap().values(&g)
    };
    assert_eq!(run(&ex.profile), run(&ex.profile));
    let mut permuted = ex.profile.clone();
    permuted.reverse();
    assert_ne!(run(&ex.profile), run(&permuted));
}

#[test]
fn prior_fader_is_in_open_unit_interval_and_reproducible() {
    let data = tiny_data();
    let model = tiny_model(&data);
    for ex in &data.train[..4] {
        let once = || {
            let mut g = Graph::no_grad();
            let z = z_var(&mut g, &[0.3, -1.0, 2.0]);
            let a = model.prior_fader(&mut g, &ex.fader, z).unwrap();
            g.scalar(a)
        };
        let a = once();
        assert!(a > 0.0 && a < 1.0);
        assert_eq!(a, once());
    }
}

#[test]
fn recognition_fader_edge_cases() {
    let data = tiny_data();
    let ex = data
        .splits
        .train
        .iter()
        .find(|e| crate::corpus::shares_profile_keyword(e))
        .unwrap();
    let kws = data.extractor.extract(&ex.response);
    let shared = kws
        .iter()
        .find(|w| ex.profile.iter().any(|d| d.contains(w.as_str())))
        .unwrap();
    let profile = vec![format!("i have a {shared}")];
    let a = recognition_fader(&profile, shared, &data.extractor, &data.table);
    assert!((a.alpha() - 1.0).abs() < 1e-12);
    let a = recognition_fader(&ex.profile, "the and of it is", &data.extractor, &data.table);
    assert_eq!(a.alpha(), 0.0);
    assert_eq!(FaderValue::new(1.7).alpha(), 1.0);
    assert_eq!(FaderValue::new(f64::NAN).alpha(), 0.0);
}

fn decode_all(model: &Model, seq: &crate::corpus::EncodedSequence, inject: bool) -> (Vec<f64>, DecoderTraceValues) {
    let mut g = Graph::no_grad();
    let z = z_var(&mut g, &[0.5, -0.25, 1.0]);
    let a = alpha_var(&mut g, 0.7);
    let t = model
        .decode(&mut g, seq, z, a, DecodeOptions { inject, all_positions: true, last_only: false })
        .unwrap();
    let sites = t.site_states.iter().map(|&v| g.value(v).clone()).collect();
    (
        g.value(t.logits).data().to_vec(),
        DecoderTraceValues {
            latent: g.value(t.latent_inputs).clone(),
            sites,
        },
    )
}

struct DecoderTraceValues {
    latent: Tensor<f64>,
    sites: Vec<Tensor<f64>>,
}

#[test]
fn unit_mixing_weight_equals_no_injection() {
    let data = tiny_data();
    let mut model = tiny_model(&data);
    model.set_mix_weights(1.0);
    let seq = &data.train[0].decoder;
    let (with, _) = decode_all(&model, seq, true);
    let (without, _) = decode_all(&model, seq, false);
    for (a, b) in with.iter().zip(&without) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn zero_mixing_weight_restores_latent_rows() {
    let data = tiny_data();
    let mut model = tiny_model(&data);
    model.set_mix_weights(0.0);
    let (_, trace) = decode_all(&model, &data.train[0].decoder, true);
    assert_eq!(trace.sites.len(), model.config.injection_sites().len());
    let d = model.config.hidden;
    for site in &trace.sites {
        assert_eq!(&site.data()[..2 * d], trace.latent.data());
    }
}

#[test]
fn decoder_is_causal() {
    let data = tiny_data();
    let model = tiny_model(&data);
    let seq = data.train[0].decoder.clone();
    let (base, _) = decode_all(&model, &seq, true);
    let cut = seq.len() - 3;
    let mut changed = seq.clone();
    for t in &mut changed.tokens[cut..] {
        *t = Special::Unk.id();
    }
    let (after, _) = decode_all(&model, &changed, true);
    let v = model.config.vocab_size;
    assert_eq!(&base[..cut * v], &after[..cut * v]);
    assert_ne!(&base[cut * v..], &after[cut * v..]);
}

#[test]
fn latent_perturbation_reaches_response_logits() {
    let data = tiny_data();
    let model = tiny_model(&data);
    let ex = &data.train[0];
    let mut g = Graph::new();
    let z = g.leaf(Tensor::matrix(1, 3, vec![0.1, 0.2, 0.3]).unwrap(), true);
    let a = alpha_var(&mut g, 0.5);
    let t = model.decode(&mut g, &ex.decoder, z, a, Default::default()).unwrap();
    let mask = vec![true; t.targets.len()];
    let loss = g.cross_entropy(t.logits, &t.targets, &mask, Reduction::Sum).unwrap();
    g.backward(loss).unwrap();
    let norm: f64 = g.grad(z).unwrap().iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(norm > 1e-8, "gradient norm {norm}");
}

#[test]
fn empty_position_row_is_zero_and_gets_no_update_gradient() {
    let data = tiny_data();
    let model = tiny_model(&data);
    let d = model.config.hidden;
    assert!(model.params.get(model.position_table()).data()[..d].iter().all(|&x| x == 0.0));
    let ex = &data.train[0];
    let mut g = Graph::new();
    let q = model.encode_posterior_zp(&mut g, &ex.posterior).unwrap();
    let p = model.encode_prior_zp(&mut g, &ex.prior).unwrap();
    let kl = kl_on_graph(&mut g, q, p).unwrap();
    g.backward(kl).unwrap();
    let grads = crate::trainer::Gradients::collect(&g, &model);
    let pos = grads.get(model.position_table()).unwrap();
    assert!(pos[..d].iter().all(|&x| x == 0.0));
    assert!(pos[d..].iter().any(|&x| x != 0.0));
}

#[test]
fn prior_networks_share_encoder_parameters() {
    let data = tiny_data();
    let model = tiny_model(&data);
    assert_eq!(
        model.checksum(&model.prior_encoder_params()),
        model.checksum(&model.fader_prior_encoder_params())
    );
    assert_ne!(
        model.checksum(&model.prior_encoder_params()),
        model.checksum(&model.profile_encoder_params())
    );
}

#[test]
fn kl_head_gradient_matches_finite_differences() {
    let data = tiny_data();
    let model = tiny_model(&data);
    let ex = &data.train[1];
    let [w, _] = model.prior_head_params();
    let eval = |m: &Model| {
        let mut g = Graph::new();
        let q = m.encode_posterior_zp(&mut g, &ex.posterior).unwrap();
        let p = m.encode_prior_zp(&mut g, &ex.prior).unwrap();
        let kl = kl_on_graph(&mut g, q, p).unwrap();
        (g, kl)
    };
    let (mut g, kl) = eval(&model);
    g.backward(kl).unwrap();
    let analytic = crate::trainer::Gradients::collect(&g, &model).get(w).unwrap().to_vec();
    let h = 1e-5;
    for i in 0..analytic.len() {
        let mut plus = model.clone();
        plus.params.get_mut(w).data_mut()[i] += h;
        let mut minus = model.clone();
        minus.params.get_mut(w).data_mut()[i] -= h;
        let (gp, kp) = eval(&plus);
        let (gm, km) = eval(&minus);
        let numeric = (gp.scalar(kp) - gm.scalar(km)) / (2.0 * h);
        let err = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1.0);
        assert!(err <= 1e-4, "entry {i}: numeric {numeric} analytic {}", analytic[i]);
    }
}

#[test]
fn checkpoint_round_trip_is_byte_stable() {
    let data = tiny_data();
    let model = tiny_model(&data);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    save_checkpoint(&path, &model, &data.vocab).unwrap();
    let first = std::fs::read(&path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.model.config, model.config);
    for (id, _, t) in model.params.iter() {
        assert_eq!(loaded.model.params.get(id).data(), t.data());
    }
    save_checkpoint(&path, &loaded.model, &loaded.vocab).unwrap();
    assert_eq!(first, std::fs::read(&path).unwrap());
}

#[test]
fn checkpoint_rejects_corruption_and_mismatch() {
    let data = tiny_data();
    let model = tiny_model(&data);
    let ck = Checkpoint::new(model.clone(), data.vocab.clone()).unwrap();
    let mut bytes = ck.to_bytes();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(ModelError::Checkpoint(_))));
    assert!(Checkpoint::from_bytes(b"garbage").is_err());
    let mut other = tiny_config(data.vocab.len());
    other.hidden = 16;
    assert!(matches!(ck.expect_config(&other), Err(ModelError::Checkpoint(_))));
    assert!(ck.expect_config(&model.config).is_ok());
    let small = Model::new(tiny_config(20)).unwrap();
    assert!(Checkpoint::new(small, data.vocab.clone()).is_err());
}

#[test]
fn role_embedding_distinguishes_speakers() {
    let data = tiny_data();
    let model = tiny_model(&data);
    let user = [Utterance::user("i like to swim")];
    let agent = [Utterance::agent("i like to swim")];
    let run = |ctx: &[Utterance]| {
        let mut g = Graph::no_grad();
        model
            .encode_prior_zp(&mut g, &data.encoder.prior_zp(&data.vocab, ctx))
            .unwrap()
            .values(&g)
    };
    assert_ne!(run(&user), run(&agent));
}
