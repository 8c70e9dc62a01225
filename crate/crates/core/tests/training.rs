use avsr::corpus::{generate_corpus, CorpusSpec, SpecAugPolicy, Utterance};
use avsr::encoder::{ConformerConfig, FusionConfig, Insert, Variant};
use avsr::frontend::{Upsampler, VisualFrontend, VisualFrontendConfig};
use avsr::training::checkpoint::restore;
use avsr::training::{
    apply_map, ctc_loss, ctc_nll, joint_loss, joint_loss_node, load_checkpoint, save_checkpoint, train, AvsrModel,
    CheckpointMeta, Dims, Example, Memory, ModelConfig, Stage, TrainConfig, TransformerDecoder,
};
use avsr::Error;
use avsr_autograd::gradcheck::{check, sample_entries};
use avsr_autograd::nn::Builder;
use avsr_autograd::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn log_softmax_rows(x: &Tensor) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..x.rows())
        .map(|r| {
            let row = x.row(r);
            let z = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            row.iter().map(|v| v - z).collect()
        })
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

/// Sum of path probabilities whose collapse equals `target`.
fn brute_force_ctc(logp: &Tensor, target: &[usize], blank: usize) -> f64 {
    let (t, c) = (logp.rows(), logp.cols());
    let mut total = 0.0;
    for code in 0..c.pow(t as u32) {
        let path: Vec<usize> = (0..t).map(|i| code / c.pow(i as u32) % c).collect();
        let mut out = Vec::new();
        let mut prev = None;
        for &p in &path {
            if p != blank && Some(p) != prev {
                out.push(p);
            }
            prev = Some(p);
        }
        if out == target {
            total += path.iter().enumerate().map(|(i, &k)| logp.at(i, k)).sum::<f64>().exp();
        }
    }
    -total.ln()
}

#[test]
fn ctc_matches_path_enumeration() {
    let uniform = Tensor::full(&[2, 3], -(3f64).ln());
    assert!((ctc_nll(&uniform, &[0], 2).unwrap().0 - 3f64.ln()).abs() < 1e-12);
    let mut checked = 0;
    for t in 1..=6 {
        for classes in 2..=4 {
            let logp = log_softmax_rows(&random(&[t, classes], (t * 10 + classes) as u64));
            let blank = classes - 1;
            // Every target of length 1..=3 over the non-blank labels.
            let mut targets: Vec<Vec<usize>> = vec![vec![]];
            for _ in 0..3 {
                let next: Vec<Vec<usize>> = targets
                    .iter()
                    .flat_map(|p| (0..blank).map(move |c| [p.clone(), vec![c]].concat()))
                    .collect();
                targets.extend(next.into_iter().filter(|x| x.len() <= 3));
                targets.sort();
                targets.dedup();
            }
            for y in targets.iter().filter(|y| !y.is_empty()) {
                let want = brute_force_ctc(&logp, y, blank);
                match ctc_nll(&logp, y, blank) {
                    Ok((got, _)) => {
                        assert!((got - want).abs() < 1e-6, "T={t} {y:?}: {got} vs {want}");
                        checked += 1;
                    }
                    Err(Error::CtcInfeasible { .. }) => assert!(want.is_infinite()),
                    Err(e) => panic!("{e}"),
                }
            }
        }
    }
    assert!(checked > 100);
}

#[test]
fn ctc_gradient_matches_finite_differences() {
    let mut ps = ParamStore::new();
    ps.insert("logits", random(&[7, 4], 3)).unwrap();
    let entries = sample_entries(&ps, "logits", 28);
    let id = ps.id("logits").unwrap();
    let rep = check::<_, Error>(&ps, &entries, 1e-5, |g| {
        let x = g.param(id);
        ctc_loss(g, x, &[0, 1, 1], 3)
    })
    .unwrap();
    assert!(rep.max_rel_err < 1e-4, "{:?}", rep.worst);
}

fn small_conformer() -> ConformerConfig {
    ConformerConfig {
        d_model: 8,
        n_head: 2,
        d_ffn: 16,
        conv_kernel: 3,
    }
}

fn decoder(vocab: usize, memories: usize, seed: u64) -> (ParamStore, TransformerDecoder) {
    let mut ps = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = TransformerDecoder::new(&mut Builder::new(&mut ps, &mut rng), &small_conformer(), 2, vocab, memories).unwrap();
    (ps, d)
}

#[test]
fn attention_nll_uniform_and_causal() {
    let (mut ps, dec) = decoder(4, 1, 1);
    let mem = random(&[5, 8], 2);
    let valid = vec![true; 5];
    {
        let mut g = Graph::new(&ps);
        let m = g.constant(mem.clone());
        let mems = [Memory { value: m, valid: &valid }];
        assert!(matches!(dec.nll(&mut g, &[], &mems, 0.0), Err(Error::Empty(_))));
        let a = dec.logits(&mut g, &[0, 1, 2], &mems).unwrap();
        let b = dec.logits(&mut g, &[0, 3, 2], &mems).unwrap();
        // Changing token 1 leaves the predictions for positions 0 and 1 alone.
        for r in 0..2 {
            let d: f64 = g.value(a).row(r).iter().zip(g.value(b).row(r)).map(|(x, y)| (x - y).abs()).sum();
            assert!(d < 1e-12, "row {r}");
        }
        let d: f64 = g.value(a).row(2).iter().zip(g.value(b).row(2)).map(|(x, y)| (x - y).abs()).sum();
        assert!(d > 1e-9);
    }
    for name in ["out.w", "out.b"] {
        let shape = ps.by_name(name).unwrap().shape().to_vec();
        ps.set(name, Tensor::zeros(&shape)).unwrap();
    }
    let mut g = Graph::new(&ps);
    let m = g.constant(mem);
    let mems = [Memory { value: m, valid: &valid }];
    let nll = dec.nll(&mut g, &[1, 3], &mems, 0.0).unwrap();
    assert!((g.value(nll).data()[0] - 3.0 * 5f64.ln()).abs() < 1e-12);
}

#[test]
fn decoder_and_lm_gradients() {
    for memories in [0, 1, 2] {
        let (ps, dec) = decoder(5, memories, 4);
        let mem = random(&[6, 8], 5);
        let valid = [true, true, true, true, false, false];
        let mut entries = sample_entries(&ps, "emb", 6);
        entries.extend(sample_entries(&ps, "layers.0.self.att.q.w", 4));
        entries.extend(sample_entries(&ps, "layers.1.ff", 3));
        entries.extend(sample_entries(&ps, "out", 4));
        if memories > 0 {
            entries.extend(sample_entries(&ps, "layers.1.src.att.k.w", 4));
        }
        let rep = check::<_, Error>(&ps, &entries, 1e-5, |g| {
            let m = g.constant(mem.clone());
            let mems: Vec<Memory> = (0..memories).map(|_| Memory { value: m, valid: &valid }).collect();
            dec.nll(g, &[2, 0, 4], &mems, 0.1)
        })
        .unwrap();
        assert!(rep.max_rel_err < 1e-4, "memories {memories}: {:?}", rep.worst);
    }
}

#[test]
fn visual_frontend_and_upsampler_gradients() {
    let mut ps = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut b = Builder::new(&mut ps, &mut rng);
    let cfg = VisualFrontendConfig { channels: vec![2, 3, 3] };
    let fe = VisualFrontend::new(&mut b.pp("visual"), &cfg, 4, 4, 8).unwrap();
    let up = Upsampler::new(&mut b.pp("upsampler"), 8).unwrap();
    let v = random(&[3, 4, 4], 7);
    let valid = [true, true, true];
    let mut entries = sample_entries(&ps, "visual.stem", 6);
    entries.extend(sample_entries(&ps, "visual.res", 3));
    entries.extend(sample_entries(&ps, "upsampler", 6));
    let rep = check::<_, Error>(&ps, &entries, 1e-5, |g| {
        let x = g.constant(v.clone());
        let h = fe.forward(g, x, &valid)?;
        let u = up.forward(g, h, &valid)?;
        assert_eq!(g.shape(u), [12, 8]);
        let w = g.constant(random(&[12, 8], 8));
        let p = g.mul(u, w)?;
        Ok(g.sum(p))
    })
    .unwrap();
    assert!(rep.max_rel_err < 1e-4, "{:?}", rep.worst);
}

#[test]
fn joint_loss_is_linear_in_lambda() {
    let ps = ParamStore::new();
    let mut g = Graph::new(&ps);
    let c = g.constant(Tensor::scalar(4.25));
    let a = g.constant(Tensor::scalar(9.5));
    let at = |g: &mut Graph, l: f64| {
        let v = joint_loss_node(g, c, a, l).unwrap();
        g.value(v).data()[0]
    };
    let (l0, l5, l1) = (at(&mut g, 0.0), at(&mut g, 0.5), at(&mut g, 1.0));
    assert_eq!(l0, 9.5);
    assert_eq!(l1, 4.25);
    assert!((l5 - (l0 + l1) / 2.0).abs() < 1e-12);
    for l in [0.1, 0.3, 0.77] {
        assert!((at(&mut g, l) - joint_loss(-4.25, -9.5, l)).abs() < 1e-12);
    }
}

fn tiny_corpus() -> (CorpusSpec, Vec<Utterance>) {
    let spec = CorpusSpec {
        num_units: 4,
        feature_dim: 6,
        video_height: 8,
        video_width: 8,
        num_utterances: 6,
        utterance_length_range: (2, 3),
        duration_range: (12, 16),
        seed: 9,
        ..Default::default()
    };
    let c = generate_corpus(&spec).unwrap();
    (spec, c.utterances)
}

fn tiny_model(n_vblock: usize) -> ModelConfig {
    ModelConfig {
        conformer: small_conformer(),
        fusion: FusionConfig {
            variant: Variant::Cmfe,
            n_early: 1,
            n_late: 1,
            insert: Insert::Inner,
            n_vblock,
        },
        visual: VisualFrontendConfig { channels: vec![2, 4] },
        video_blocks: 1,
        decoder_layers: 1,
        lm_layers: 1,
    }
}

fn dims(spec: &CorpusSpec) -> Dims {
    Dims {
        feature_dim: spec.feature_dim,
        height: spec.video_height,
        width: spec.video_width,
        vocab: spec.num_units,
        num_senones: spec.num_senones(),
    }
}

fn examples(utts: &[Utterance]) -> Vec<Example> {
    utts.iter()
        .map(|u| Example::from_utterance(u, u.gold_alignment.clone()).unwrap())
        .collect()
}

fn quiet_config() -> TrainConfig {
    TrainConfig {
        peak_lr: 1e-5,
        warmup_steps: 1,
        epochs: 1,
        label_smoothing: 0.0,
        spec_aug: SpecAugPolicy::none(),
        ..Default::default()
    }
}

fn batch_loss(m: &AvsrModel, ps: &ParamStore, data: &[Example], tc: &TrainConfig) -> f64 {
    let mut g = Graph::new(ps);
    data.iter().map(|e| {
        let (l, _) = m.loss(&mut g, e, tc).unwrap();
        g.value(l).data()[0]
    }).sum::<f64>() / data.len() as f64
}

#[test]
fn one_small_step_lowers_the_batch_loss() {
    let (spec, utts) = tiny_corpus();
    let data = examples(&utts);
    for stage in [Stage::PretrainAudio, Stage::PretrainVideo, Stage::FinetuneFusion] {
        let (mut ps, m) = AvsrModel::build(stage, &tiny_model(1), dims(&spec), false, 1).unwrap();
        let tc = TrainConfig { batch_size: data.len(), ..quiet_config() };
        let before = batch_loss(&m, &ps, &data, &tc);
        let recs = train(&m, &mut ps, &data, &tc, 0, |_| Ok(())).unwrap();
        assert_eq!(recs.len(), 1);
        assert!((recs[0].loss - before).abs() < 1e-9);
        let after = batch_loss(&m, &ps, &data, &tc);
        assert!(after < before, "{}: {before} -> {after}", stage.name());
    }
}

#[test]
fn per_item_losses_ignore_batch_order() {
    let (spec, utts) = tiny_corpus();
    let data = examples(&utts);
    let (ps, m) = AvsrModel::build(Stage::FinetuneFusion, &tiny_model(1), dims(&spec), false, 2).unwrap();
    let tc = quiet_config();
    let run = |order: &[usize]| {
        let mut g = Graph::new(&ps);
        let mut out = vec![(0.0, 0.0); data.len()];
        for &i in order {
            let (_, parts) = m.loss(&mut g, &data[i], &tc).unwrap();
            out[i] = (parts[0].1, parts[1].1);
        }
        out
    };
    let fwd: Vec<usize> = (0..data.len()).collect();
    let rev: Vec<usize> = fwd.iter().rev().copied().collect();
    assert_eq!(run(&fwd), run(&rev));
}

fn names_with(audit: &[(String, String)], src: &str) -> Vec<String> {
    audit.iter().filter(|(_, s)| s == src).map(|(n, _)| n.clone()).collect()
}

#[test]
fn checkpoint_map_audit() {
    let (spec, _) = tiny_corpus();
    let mut cfg = ModelConfig { video_blocks: 2, ..tiny_model(2) };
    cfg.fusion.n_early = 2;
    let d = dims(&spec);
    let (audio, _) = AvsrModel::build(Stage::PretrainAudio, &cfg, d, false, 1).unwrap();
    let (video, _) = AvsrModel::build(Stage::PretrainVideo, &cfg, d, false, 2).unwrap();
    let (fusion, _) = AvsrModel::build(Stage::FinetuneFusion, &cfg, d, false, 3).unwrap();

    let mut f = fusion.clone();
    let audit = apply_map(&mut f, Some(&audio), Some(&video)).unwrap();
    assert_eq!(audit.mapped.len() + audit.fresh.len(), fusion.len());
    let a = names_with(&audit.mapped, "audio");
    let v = names_with(&audit.mapped, "video");
    assert!(a.iter().all(|n| n.starts_with("audio.frontend.") || n.starts_with("audio.enc.")));
    assert!(a.iter().any(|n| n.starts_with("audio.frontend.")));
    assert!(a.iter().any(|n| n.starts_with("audio.enc.1.")));
    for p in ["visual.stem.", "visual.res.", "visual.proj.", "visual.enc.1."] {
        assert!(v.iter().any(|n| n.starts_with(p)), "{p}");
    }
    assert!(audit.fresh.iter().any(|n| n.starts_with("fusion.ca.")));
    assert!(audit.fresh.iter().any(|n| n.starts_with("fusion.memory.proj")));
    assert!(audit.fresh.iter().all(|n| !n.starts_with("audio.") && !n.starts_with("visual.")));
    for (n, _) in &audit.mapped {
        let src = if n.starts_with("audio.") { &audio } else { &video };
        assert_eq!(f.by_name(n), src.by_name(n));
    }

    let mut f = fusion.clone();
    let audit = apply_map(&mut f, Some(&audio), None).unwrap();
    assert!(names_with(&audit.mapped, "video").is_empty());
    assert!(audit.fresh.iter().any(|n| n.starts_with("visual.stem.")));
    let mut f = fusion.clone();
    assert!(apply_map(&mut f, None, None).unwrap().mapped.is_empty());
    assert_eq!(f, fusion);

    // A video network with fewer blocks than the fusion branch needs leaves a gap.
    let short = ModelConfig { video_blocks: 1, ..cfg.clone() };
    let (video1, _) = AvsrModel::build(Stage::PretrainVideo, &short, d, false, 2).unwrap();
    let mut f = fusion.clone();
    match apply_map(&mut f, Some(&audio), Some(&video1)) {
        Err(Error::MappingGap(names)) => assert!(names.iter().all(|n| n.starts_with("visual.enc.1."))),
        other => panic!("{other:?}"),
    }
}

#[test]
fn zero_epochs_and_checkpoint_round_trip() {
    let (spec, utts) = tiny_corpus();
    let data = examples(&utts);
    let (init, m) = AvsrModel::build(Stage::PretrainAudio, &tiny_model(1), dims(&spec), false, 4).unwrap();
    let mut ps = init.clone();
    let tc = TrainConfig { epochs: 0, ..quiet_config() };
    assert!(train(&m, &mut ps, &data, &tc, 0, |_| Ok(())).unwrap().is_empty());
    assert_eq!(ps, init);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.avna");
    let meta = CheckpointMeta {
        stage: "pretrain_audio".into(),
        step: 0,
        config_hash: "abc".into(),
        audit: None,
    };
    save_checkpoint(&path, &ps, &meta).unwrap();
    let (back, meta2) = load_checkpoint(&path).unwrap();
    assert_eq!(meta2, meta);
    let mut fresh = AvsrModel::build(Stage::PretrainAudio, &tiny_model(1), dims(&spec), false, 99).unwrap().0;
    restore(&mut fresh, &back).unwrap();
    assert_eq!(fresh, init);
    assert!(matches!(
        load_checkpoint(&dir.path().join("missing.avna")),
        Err(Error::MissingArtifact { .. })
    ));
}

#[test]
fn same_seed_gives_identical_loss_traces() {
    let (spec, utts) = tiny_corpus();
    let data = examples(&utts);
    let tc = TrainConfig {
        epochs: 2,
        batch_size: 2,
        peak_lr: 1e-3,
        warmup_steps: 4,
        ..Default::default()
    };
    let run = |seed: u64| {
        let (mut ps, m) = AvsrModel::build(Stage::FinetuneFusion, &tiny_model(1), dims(&spec), false, 5).unwrap();
        let recs = train(&m, &mut ps, &data, &tc, seed, |_| Ok(())).unwrap();
        recs.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>()
    };
    let a = run(1);
    assert_eq!(a.len(), 6);
    assert_eq!(a, run(1));
    assert_ne!(a, run(2));
}
