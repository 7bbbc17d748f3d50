use autodiff::{grad_check_params, GradCheck, Graph, ParamId, Rng, Tensor};
use refgame_core::agents::*;
use refgame_core::channel::*;
use refgame_core::game::{assemble_batch, game_loss};
use refgame_core::layers::Mode;
use shapeworld::{ImageSample, Split};

fn tiny_config(arch: Architecture, shared: bool) -> AgentsConfig {
    AgentsConfig {
        encoder: EncoderConfig { architecture: arch, channels: vec![2, 3], hidden: vec![6], output_dim: 8, image_size: 8 },
        channel: ChannelConfig { vocab_size: 5, ..ChannelConfig::default() },
        hidden_dim: 6,
        embed_dim: 4,
        shared,
    }
}

fn images(n: usize, size: usize, seed: u64) -> Tensor {
    Tensor::randn(&[n, 3, size, size], 1.0, &mut Rng::seed_from(seed))
}

fn samples(n: usize, size: usize, seed: u64) -> Vec<ImageSample> {
    let mut rng = Rng::seed_from(seed);
    (0..n)
        .map(|i| ImageSample { pixels: Tensor::uniform(&[3, size, size], 1.0, &mut rng), category: None, sample_id: i as u64, split: Split::Train })
        .collect()
}

#[test]
fn gumbel_softmax_without_noise_is_tempered_softmax() {
    let m = gumbel_softmax(&[1.0, 0.0], 1.0, Noise::Zero).unwrap();
    assert!((m.values[0] - 0.73106).abs() < 1e-5 && (m.values[1] - 0.26894).abs() < 1e-5);
    let v = [0.3, -1.2, 2.0, 0.0];
    let m = gumbel_softmax(&v, 5.0, Noise::Zero).unwrap();
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[1, 4], v.to_vec()).unwrap());
    let x = g.scale(x, 1.0 / 5.0);
    let s = g.softmax(x, 1).unwrap();
    assert_eq!(m.values.as_slice(), g.value(s).data());
}

#[test]
fn gumbel_softmax_temperature_limits() {
    let m = gumbel_softmax(&[3.0, -2.0, 0.5], 1e6, Noise::Sample(&mut Rng::seed_from(1))).unwrap();
    let (lo, hi) = m.values.iter().fold((1.0f64, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
    assert!(hi - lo < 1e-4);
    let m = gumbel_softmax(&[1.0, 0.0], 1e-3, Noise::Zero).unwrap();
    assert!(m.values[0] > 1.0 - 1e-12 && m.values[1] < 1e-12);
    assert!(gumbel_softmax(&[1.0], 0.0, Noise::Zero).is_err());
}

#[test]
fn gumbel_argmax_follows_categorical_distribution() {
    let v = [1f64.ln(), 2f64.ln(), 7f64.ln()];
    let mut rng = Rng::seed_from(123);
    let mut counts = [0usize; 3];
    let draws = 100_000;
    for _ in 0..draws {
        counts[gumbel_softmax(&v, 1.0, Noise::Sample(&mut rng)).unwrap().symbol()] += 1;
    }
    for (c, p) in counts.iter().zip([0.1, 0.2, 0.7]) {
        assert!((*c as f64 / draws as f64 - p).abs() < 0.01, "{counts:?}");
    }
}

#[test]
fn discretize_examples() {
    let m = discretize(&[0.2, 3.1, -1.0]);
    assert_eq!(m.values, vec![0.0, 1.0, 0.0]);
    assert!(m.one_hot);
    assert_eq!(discretize(&[0.5; 4]).symbol(), 0);
    let v = [0.2, 3.1, -1.0, 3.0];
    let scaled: Vec<f64> = v.iter().map(|x| x * 7.5).collect();
    assert_eq!(discretize(&v), discretize(&scaled));
}

#[test]
fn sender_eval_is_deterministic_and_matches_discretize() {
    let cfg = tiny_config(Architecture::SmallCnn, false);
    let agents = GameAgents::new(&cfg, &mut Rng::seed_from(3)).unwrap();
    let x = images(4, 8, 1);
    let run = || {
        let mut g = Graph::without_grad();
        let xv = g.constant(x.clone());
        let (m, v) = agents.sender.forward(&mut g, &agents.store, xv, Mode::Eval, Noise::Zero).unwrap();
        (g.value(m).clone(), g.value(v).clone())
    };
    let (m1, v1) = run();
    let (m2, _) = run();
    assert_eq!(m1.data(), m2.data());
    for i in 0..4 {
        assert_eq!(m1.row(i), discretize(v1.row(i)).values.as_slice());
    }
}

#[test]
fn sender_train_messages_are_distributions() {
    let cfg = tiny_config(Architecture::SmallCnn, false);
    let agents = GameAgents::new(&cfg, &mut Rng::seed_from(3)).unwrap();
    let mut g = Graph::new();
    let xv = g.constant(images(6, 8, 2));
    let mut rng = Rng::seed_from(9);
    let (m, _) = agents.sender.forward(&mut g, &agents.store, xv, Mode::Train, Noise::Sample(&mut rng)).unwrap();
    let t = g.value(m);
    for i in 0..6 {
        assert!(t.row(i).iter().all(|&p| p >= 0.0));
        assert!((t.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

fn receiver_probs(agents: &GameAgents, message: &Message, cands: &Tensor) -> Vec<f64> {
    let mut g = Graph::without_grad();
    let c = g.constant(cands.clone());
    let p = agents.receiver.forward(&mut g, &agents.store, message, c, Mode::Eval).unwrap();
    g.value(p).data().to_vec()
}

#[test]
fn receiver_identical_candidates_get_uniform_probability() {
    let agents = GameAgents::new(&tiny_config(Architecture::Mlp, false), &mut Rng::seed_from(4)).unwrap();
    let one = images(1, 8, 5);
    let cands = Tensor::stack(&[&one, &one, &one, &one]).unwrap().reshape(&[4, 3, 8, 8]).unwrap();
    let p = receiver_probs(&agents, &discretize(&[0.0, 1.0, 0.0, 0.0, 0.0]), &cands);
    for v in &p {
        assert!((v - 0.25).abs() < 1e-6);
    }
}

#[test]
fn receiver_probabilities_and_score_range() {
    let agents = GameAgents::new(&tiny_config(Architecture::SmallCnn, false), &mut Rng::seed_from(4)).unwrap();
    let cands = images(5, 8, 6);
    let msg = gumbel_softmax(&[0.1, 0.4, -0.3, 0.0, 1.0], 5.0, Noise::Sample(&mut Rng::seed_from(1))).unwrap();
    let p = receiver_probs(&agents, &msg, &cands);
    assert!(p.iter().all(|&v| v >= 0.0));
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);

    let mut g = Graph::without_grad();
    let c = g.constant(cands.clone());
    let m = g.constant(Tensor::new(&[1, 5], msg.values.clone()).unwrap());
    let e = agents.receiver.embed(&mut g, &agents.store, m).unwrap();
    let r = agents.receiver.represent(&mut g, &agents.store, c, Mode::Eval).unwrap();
    let s = agents.receiver.scores(&mut g, e, r).unwrap();
    let bound = 1.0 / agents.config.channel.cosine_temperature + 1e-9;
    assert!(g.value(s).data().iter().all(|v| v.abs() <= bound));

    let single = images(1, 8, 7);
    let mut g = Graph::without_grad();
    let c = g.constant(single);
    assert!(agents.receiver.forward(&mut g, &agents.store, &msg, c, Mode::Eval).is_err());
}

#[test]
fn receiver_is_equivariant_to_candidate_permutation() {
    let agents = GameAgents::new(&tiny_config(Architecture::SmallCnn, false), &mut Rng::seed_from(8)).unwrap();
    let cands = images(5, 8, 9);
    let msg = discretize(&[0.0, 0.0, 2.0, 0.0, 0.0]);
    let p = receiver_probs(&agents, &msg, &cands);
    let perm = [3usize, 0, 4, 1, 2];
    let rows: Vec<Tensor> = perm.iter().map(|&i| Tensor::new(&[3, 8, 8], cands.data()[i * 192..(i + 1) * 192].to_vec()).unwrap()).collect();
    let permuted = Tensor::stack(&rows.iter().collect::<Vec<_>>()).unwrap();
    let q = receiver_probs(&agents, &msg, &permuted);
    for (k, &i) in perm.iter().enumerate() {
        assert!((q[k] - p[i]).abs() < 1e-12);
    }
}

#[test]
fn simclr_shapes_and_weight_sharing() {
    let cfg = tiny_config(Architecture::SmallCnn, true);
    let model = SimClr::new(&cfg, &mut Rng::seed_from(2)).unwrap();
    let x = images(3, 8, 3);
    let both = Tensor::stack(&[&x, &x]).unwrap().reshape(&[6, 3, 8, 8]).unwrap();
    let mut g = Graph::without_grad();
    let xv = g.constant(both);
    let out = model.forward(&mut g, xv, Mode::Eval).unwrap();
    assert_eq!(g.shape(out.h), &[6, 8]);
    assert_eq!(g.shape(out.s), &[6, 5]);
    assert_eq!(g.shape(out.z), &[6, 4]);
    let z = g.value(out.z);
    for i in 0..3 {
        assert_eq!(z.row(i), z.row(i + 3));
    }
}

#[test]
fn simclr_views_of_one_image_differ() {
    let cfg = tiny_config(Architecture::SmallCnn, true);
    let model = SimClr::new(&cfg, &mut Rng::seed_from(2)).unwrap();
    let s = samples(2, 8, 1);
    let refs: Vec<&ImageSample> = s.iter().collect();
    let aug = shapeworld::AugmentConfig::default();
    let batch = assemble_batch(&refs, Some(&aug), &mut Rng::seed_from(5)).unwrap();
    let mut g = Graph::without_grad();
    let x = g.constant(batch.interleaved().unwrap());
    let out = model.forward(&mut g, x, Mode::Eval).unwrap();
    let z = g.value(out.z);
    assert_ne!(z.row(0), z.row(1));
}

#[test]
fn shared_encoder_is_one_parameter_set() {
    let shared = GameAgents::new(&tiny_config(Architecture::SmallCnn, true), &mut Rng::seed_from(1)).unwrap();
    let separate = GameAgents::new(&tiny_config(Architecture::SmallCnn, false), &mut Rng::seed_from(1)).unwrap();
    let enc_names = |a: &GameAgents| a.store.iter().filter(|(_, n, _)| n.contains("encoder")).count();
    assert_eq!(2 * enc_names(&shared), enc_names(&separate));
    assert!(shared.store.iter().all(|(_, n, _)| !n.starts_with("sender.encoder") && !n.starts_with("receiver.encoder")));

    // An update written through the Sender's view of the encoder changes what
    // the Receiver computes.
    let mut agents = shared.clone();
    let x = images(3, 8, 4);
    let reps = |a: &GameAgents| {
        let mut g = Graph::without_grad();
        let xv = g.constant(x.clone());
        let r = a.receiver.represent(&mut g, &a.store, xv, Mode::Eval).unwrap();
        g.value(r).data().to_vec()
    };
    let before = reps(&agents);
    let id = agents.store.id("encoder.conv0.weight").unwrap();
    agents.store.get_mut(id).data_mut().iter_mut().for_each(|w| *w *= -1.5);
    assert_ne!(before, reps(&agents));
}

#[test]
fn extract_features_is_deterministic_with_expected_shape() {
    let agents = GameAgents::new(&tiny_config(Architecture::SmallCnn, false), &mut Rng::seed_from(1)).unwrap();
    let s = samples(5, 8, 2);
    let imgs: Vec<&Tensor> = s.iter().map(|x| &x.pixels).collect();
    let a = extract_features(&agents.sender.encoder, &agents.store, &imgs).unwrap();
    let b = extract_features(&agents.sender.encoder, &agents.store, &imgs).unwrap();
    assert_eq!(a.len(), 5);
    assert!(a.iter().all(|r| r.len() == 8));
    assert_eq!(a, b);
}

fn check_game_gradients(arch: Architecture, shared: bool) -> f64 {
    let agents = GameAgents::new(&tiny_config(arch, shared), &mut Rng::seed_from(11)).unwrap();
    let s = samples(4, 8, 3);
    let refs: Vec<&ImageSample> = s.iter().collect();
    let batch = assemble_batch(&refs, Some(&shapeworld::AugmentConfig::default()), &mut Rng::seed_from(2)).unwrap();
    let ids: Vec<ParamId> = agents.store.ids().filter(|&id| agents.store.get(id).requires_grad).collect();
    let f = |g: &mut Graph, store: &autodiff::ParamStore| {
        let mut a = agents.clone();
        a.store = store.clone();
        let mut noise_rng = Rng::seed_from(77);
        Ok(game_loss(g, &a, &batch, Noise::Sample(&mut noise_rng)).map_err(|e| autodiff::Error::Checkpoint(e.to_string()))?.loss)
    };
    let (err, _) = grad_check_params(&agents.store, &ids, f, 6, &mut Rng::seed_from(5), GradCheck::default()).unwrap();
    err
}

#[test]
fn game_loss_gradients_match_finite_differences() {
    for (arch, shared) in [(Architecture::SmallCnn, false), (Architecture::SmallCnn, true), (Architecture::Mlp, false)] {
        let err = check_game_gradients(arch, shared);
        assert!(err < 1e-4, "{arch:?} shared={shared}: {err}");
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = tiny_config(Architecture::SmallCnn, false);
    cfg.channel.vocab_size = 1;
    assert!(GameAgents::new(&cfg, &mut Rng::seed_from(1)).is_err());
    let mut cfg = tiny_config(Architecture::SmallCnn, false);
    cfg.encoder.output_dim = 4;
    assert!(cfg.validate().is_err());
    let mut cfg = tiny_config(Architecture::SmallCnn, false);
    cfg.encoder.channels = vec![4];
    assert!(cfg.validate().is_err());
    let mut cfg = tiny_config(Architecture::SmallCnn, false);
    cfg.channel.cosine_temperature = 0.0;
    assert!(cfg.validate().is_err());
}
