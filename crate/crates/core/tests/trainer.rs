use declip::data::{build_vocab, lexicon_ids, make_batches, synth_generate, SynthSpec};
use declip::error::Error;
use declip::losses::clip_loss;
use declip::nets::{decays, encode_image, encode_text, init_params, project, Modality, ModelConfig, LOGIT_SCALE};
use declip::tensor::{Graph, Tensor};
use declip::trainer::{
    checkpoint_dir, load_checkpoint, lr_schedule, prepare_batch, run_training, save_checkpoint, train_step, OptimState,
    Optimizer, TrainConfig, TrainData, Trainer,
};
use std::fs;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        conv_channels: [4, 8, 8],
        d_img: 16,
        context_length: 16,
        text_width: 16,
        text_layers: 1,
        text_heads: 2,
        embed_dim: 16,
        ..ModelConfig::default()
    }
}

fn tiny_data() -> TrainData {
    let spec = SynthSpec {
        concepts: 4,
        paraphrases_per_concept: 2,
        pairs_per_concept: 32,
        eval_per_concept: 0,
        image_size: 16,
        ..SynthSpec::default()
    };
    let s = synth_generate(&spec).unwrap();
    let vocab = build_vocab(s.train.iter().map(|r| r.caption.as_str()), 1);
    let lex = lexicon_ids(&s.lexicon, &vocab);
    TrainData::new(s.train, vocab, lex)
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 32,
        queue_capacity: 64,
        lr_base: 0.005,
        lr_peak: 0.05,
        model: tiny_model(),
        ..TrainConfig::default()
    }
}

fn clip_only(cfg: TrainConfig) -> TrainConfig {
    TrainConfig {
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
        queue_capacity: 0,
        ..cfg
    }
}

/// One sample per distinct caption, so a memorized batch can reach zero loss.
fn distinct_captions(data: &TrainData) -> Vec<usize> {
    let mut seen = std::collections::HashSet::new();
    (0..data.samples.len()).filter(|&i| seen.insert(data.samples[i].caption.clone())).collect()
}

#[test]
fn overfits_one_batch() {
    let data = tiny_data();
    let cfg = clip_only(tiny_config());
    let mut t = Trainer::new(cfg.clone(), data.vocab.clone()).unwrap();
    let idx = distinct_captions(&data);
    assert_eq!(idx.len(), 8);
    let batch = prepare_batch(&data, &idx, 0, &cfg).unwrap();
    let mut losses = Vec::new();
    for _ in 0..50 {
        let r = train_step(&mut t.params, &mut t.optim, None, &batch, 0.01, &cfg).unwrap();
        losses.push(r.l_clip);
    }
    assert!(losses[49] < 0.01, "{} -> {}", losses[0], losses[49]);
}

#[test]
fn full_objective_overfits_one_batch() {
    let data = tiny_data();
    let cfg = tiny_config();
    let mut t = Trainer::new(cfg.clone(), data.vocab.clone()).unwrap();
    let batch = prepare_batch(&data, &distinct_captions(&data), 0, &cfg).unwrap();
    let mut first = None;
    let mut last = None;
    for _ in 0..100 {
        let r = train_step(&mut t.params, &mut t.optim, t.queue.as_mut(), &batch, 0.01, &cfg).unwrap();
        first.get_or_insert(r);
        last = Some(r);
    }
    let (first, last) = (first.unwrap(), last.unwrap());
    assert!(last.l_clip < 0.01, "{} -> {}", first.l_clip, last.l_clip);
    assert!(last.total < first.total - 3.0, "{} -> {}", first.total, last.total);
    assert_eq!(t.queue.as_ref().unwrap().len(), 64);
}

/// Independent CLIP-only loop: one image view, the raw view-1 text,
/// symmetric InfoNCE, SGD with momentum and decay, temperature clamp.
fn pure_clip_losses(data: &TrainData, cfg: &TrainConfig, steps: usize) -> Vec<f64> {
    let mut model = cfg.model.clone();
    model.vocab_size = data.vocab.len();
    let mut params = init_params::<f32>(&model, cfg.seed).unwrap();
    let mut bufs: Vec<Vec<f32>> = params.params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
    let spe = data.samples.len() / cfg.batch_size;
    let mut out = Vec::new();
    let mut epoch = 0;
    while out.len() < steps {
        for idx in make_batches(data.samples.len(), cfg.batch_size, epoch, cfg.seed) {
            if out.len() == steps {
                break;
            }
            let batch = prepare_batch(data, &idx, epoch, cfg).unwrap();
            let lr = lr_schedule(out.len() as u64, spe, cfg);
            let g = Graph::new();
            let bp = params.bind(&g, true);
            let zi = project(&bp, encode_image(&bp, g.constant(batch.images1.clone())).unwrap(), Modality::Image).unwrap();
            let zt = project(&bp, encode_text(&bp, &batch.text1).unwrap().sent_feat, Modality::Text).unwrap();
            let loss = clip_loss(zi, zt, bp.get(LOGIT_SCALE).unwrap().exp()).unwrap();
            out.push(loss.value().data()[0] as f64);
            let grads = g.backward(loss).unwrap();
            let gs: Vec<Option<Tensor<f32>>> = bp.vars().iter().map(|&v| grads.get(v).cloned()).collect();
            drop(bp);
            for (k, (name, w)) in params.params.iter_mut().enumerate() {
                let Some(grad) = &gs[k] else { continue };
                let wd = if decays(name) { cfg.weight_decay as f32 } else { 0.0 };
                for ((wv, bv), gv) in w.data_mut().iter_mut().zip(bufs[k].iter_mut()).zip(grad.data()) {
                    *bv = cfg.momentum as f32 * *bv + (gv + wd * *wv);
                    *wv -= lr as f32 * *bv;
                }
            }
            let s = params.params.get_mut(LOGIT_SCALE).unwrap();
            s.data_mut()[0] = s.data()[0].min((1.0 / cfg.tau_min).ln() as f32);
        }
        epoch += 1;
    }
    out
}

#[test]
fn zero_weights_reduce_to_clip() {
    let data = tiny_data();
    let cfg = TrainConfig {
        epochs: 50,
        ..clip_only(tiny_config())
    };
    let oracle = pure_clip_losses(&data, &cfg, 200);
    let mut t = Trainer::new(cfg, data.vocab.clone()).unwrap();
    let mut got = Vec::new();
    while got.len() < 200 {
        t.run_epoch(&data, |r| {
            assert_eq!(r.report.total, r.report.l_clip);
            got.push(r.report.total);
            Ok(())
        })
        .unwrap();
    }
    let worst = got.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst <= 1e-6, "max per-step difference {worst}");
}

#[test]
fn identical_seeds_give_identical_metrics() {
    let data = tiny_data();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_training(tiny_config(), &data, a.path(), false).unwrap();
    run_training(tiny_config(), &data, b.path(), false).unwrap();
    let ma = fs::read(a.path().join("metrics.csv")).unwrap();
    assert_eq!(ma, fs::read(b.path().join("metrics.csv")).unwrap());
    assert_eq!(String::from_utf8(ma).unwrap().lines().count(), 1 + 3 * 4);

    let c = tempfile::tempdir().unwrap();
    run_training(TrainConfig { seed: 1, ..tiny_config() }, &data, c.path(), false).unwrap();
    assert_ne!(fs::read(a.path().join("metrics.csv")).unwrap(), fs::read(c.path().join("metrics.csv")).unwrap());
}

#[test]
fn checkpoint_round_trip() {
    let data = tiny_data();
    for optimizer in [Optimizer::Sgd, Optimizer::AdamW] {
        let mut t = Trainer::new(TrainConfig { optimizer, ..tiny_config() }, data.vocab.clone()).unwrap();
        t.run_epoch(&data, |_| Ok(())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&t, dir.path()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.cfg, t.cfg);
        assert_eq!(back.vocab, t.vocab);
        assert_eq!(back.epoch, 1);
        assert_eq!(back.optim.step, 4);
        assert_eq!(back.optim.lr, t.optim.lr);
        for ((n1, a), (n2, b)) in back.params.params.iter().zip(t.params.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(a, b, "{n1}");
        }
        assert_eq!(back.optim.momentum.names(), t.optim.momentum.names());
        for ((_, a), (_, b)) in back.optim.momentum.iter().zip(t.optim.momentum.iter()) {
            assert_eq!(a, b);
        }
        assert_eq!(back.optim.second.len(), t.optim.second.len());
        for ((_, a), (_, b)) in back.optim.second.iter().zip(t.optim.second.iter()) {
            assert_eq!(a, b);
        }
        let (qa, qb) = (back.queue.unwrap(), t.queue.clone().unwrap());
        assert_eq!(qa.to_arrays(), qb.to_arrays());
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    let data = tiny_data();
    let full = tempfile::tempdir().unwrap();
    run_training(tiny_config(), &data, full.path(), false).unwrap();
    let expected = fs::read_to_string(full.path().join("metrics.csv")).unwrap();

    // Killed during epoch 2: checkpoint 1 on disk, metrics holding epoch 1
    // plus a partial epoch 2 and a torn final line.
    let killed = tempfile::tempdir().unwrap();
    let ck = checkpoint_dir(killed.path(), 1);
    fs::create_dir_all(&ck).unwrap();
    for f in ["header.json", "params.bin"] {
        fs::copy(checkpoint_dir(full.path(), 1).join(f), ck.join(f)).unwrap();
    }
    let lines: Vec<&str> = expected.lines().collect();
    let mut partial = lines[..1 + 4 + 2].join("\n");
    partial.push_str("\n6,1,0.01");
    fs::write(killed.path().join("metrics.csv"), partial).unwrap();

    let t = run_training(tiny_config(), &data, killed.path(), true).unwrap();
    assert_eq!(fs::read_to_string(killed.path().join("metrics.csv")).unwrap(), expected);
    let reference = load_checkpoint(&checkpoint_dir(full.path(), 3)).unwrap();
    assert_eq!(t.queue.unwrap().to_arrays(), reference.queue.unwrap().to_arrays());
    for ((_, a), (_, b)) in t.params.params.iter().zip(reference.params.params.iter()) {
        assert_eq!(a, b);
    }
}

#[test]
fn non_finite_loss_is_reported() {
    let data = tiny_data();
    let cfg = tiny_config();
    let mut t = Trainer::new(cfg.clone(), data.vocab.clone()).unwrap();
    t.params.params.get_mut("proj.image.weight").unwrap().data_mut()[0] = f32::NAN;
    let idx: Vec<usize> = (0..32).collect();
    let batch = prepare_batch(&data, &idx, 0, &cfg).unwrap();
    let err = train_step(&mut t.params, &mut t.optim, t.queue.as_mut(), &batch, 0.01, &cfg).unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. } | Error::DegenerateEmbedding { .. }), "{err}");
    assert_eq!(t.optim.step, 0);
}

#[test]
fn temperature_is_clamped() {
    let data = tiny_data();
    let cfg = clip_only(tiny_config());
    let mut t = Trainer::new(cfg.clone(), data.vocab.clone()).unwrap();
    t.params.params.get_mut(LOGIT_SCALE).unwrap().data_mut()[0] = 10.0;
    let idx: Vec<usize> = (0..32).collect();
    let batch = prepare_batch(&data, &idx, 0, &cfg).unwrap();
    train_step(&mut t.params, &mut t.optim, None, &batch, 0.0, &cfg).unwrap();
    assert!((t.params.tau() - cfg.tau_min).abs() < 1e-6, "{}", t.params.tau());
}

#[test]
fn zero_multiplier_freezes_a_tower() {
    let data = tiny_data();
    let mut cfg = tiny_config();
    cfg.lr_mult.insert("text.".into(), 0.0);
    let mut t = Trainer::new(cfg.clone(), data.vocab.clone()).unwrap();
    let before = t.params.clone();
    let idx: Vec<usize> = (0..32).collect();
    let batch = prepare_batch(&data, &idx, 0, &cfg).unwrap();
    train_step(&mut t.params, &mut t.optim, t.queue.as_mut(), &batch, 0.05, &cfg).unwrap();
    for ((name, a), (_, b)) in t.params.params.iter().zip(before.params.iter()) {
        if name.starts_with("text.") {
            assert_eq!(a, b, "{name} moved");
        } else if name.starts_with("image.") {
            assert_ne!(a, b, "{name} frozen");
        }
    }
}

#[test]
fn sgd_state_starts_empty() {
    let p = init_params::<f32>(&tiny_model(), 0).unwrap();
    let s = OptimState::new(&p.params, Optimizer::Sgd);
    assert_eq!(s.second.len(), 0);
    assert_eq!(s.momentum.len(), p.params.len());
    assert!(s.momentum.iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
}
