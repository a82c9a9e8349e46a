use super::*;
use crate::corpus::LanguagePair;
use crate::error::CheckpointError;
use crate::model::{TransformerConfig, TransformerModel};
use crate::numerics::Tensor;
use crate::subword::SubwordVocabulary;
use proptest::prelude::*;

fn sched(kind: ScheduleKind) -> Schedule {
    Schedule {
        lr0: 2e-3,
        warmup_steps: 100,
        decay_half_life: 50,
        kind,
    }
}

#[test]
fn schedule_landmarks() {
    for kind in [ScheduleKind::WarmupExponential, ScheduleKind::WarmupRsqrt] {
        let s = sched(kind);
        assert_eq!(lr_at(&s, 0), 0.0);
        assert!((lr_at(&s, 100) - 2e-3).abs() < 1e-18);
        assert!((lr_at(&s, 50) - 1e-3).abs() < 1e-18);
        // continuity across the warmup boundary
        assert!((lr_at(&s, 101) - lr_at(&s, 100)).abs() < 3e-5);
    }
    let s = sched(ScheduleKind::WarmupExponential);
    assert!((lr_at(&s, 150) - 1e-3).abs() < 1e-15);
    assert!((lr_at(&s, 200) - 5e-4).abs() < 1e-15);
    let r = sched(ScheduleKind::WarmupRsqrt);
    assert!((lr_at(&r, 400) - 1e-3).abs() < 1e-15);
}

fn names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("p{i}")).collect()
}

#[test]
fn adam_single_scalar_by_hand() {
    let mut p = vec![Tensor::scalar(1.0)];
    let mut opt = OptimizerState::new(&p);
    let g = vec![Tensor::scalar(0.5)];
    opt.update(&mut p, &names(1), &g, 0.01, None).unwrap();
    // m̂ = 0.5, v̂ = 0.25 after bias correction
    let expected = 1.0 - 0.01 * 0.5 / (0.5 + 1e-9);
    assert!((p[0].data()[0] - expected).abs() < 1e-15);
    assert_eq!(opt.step, 1);
    assert!((opt.m[0].data()[0] - 0.05).abs() < 1e-15);
    assert!((opt.v[0].data()[0] - 0.003 * 0.25).abs() < 1e-15);
}

#[test]
fn adam_zero_gradient_is_a_no_op_on_weights() {
    let mut p = vec![Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap()];
    let before = p.clone();
    let mut opt = OptimizerState::new(&p);
    opt.update(&mut p, &names(1), &[Tensor::zeros(&[3])], 0.1, None)
        .unwrap();
    assert_eq!(p, before);
    assert_eq!(opt.step, 1);
}

#[test]
fn adam_rejects_bad_gradients() {
    let mut p = vec![Tensor::zeros(&[2])];
    let mut opt = OptimizerState::new(&p);
    let bad = Tensor::new(&[2], vec![1.0, f64::NAN]).unwrap();
    match opt.update(&mut p, &names(1), &[bad], 0.1, None) {
        Err(Error::Divergence { step: 1, detail }) => assert!(detail.contains("p0")),
        other => panic!("{other:?}"),
    }
    assert_eq!(opt.step, 0);
    assert!(matches!(
        opt.update(&mut p, &names(1), &[Tensor::zeros(&[3])], 0.1, None),
        Err(Error::Shape(_))
    ));
}

#[test]
fn adam_descends_quadratic() {
    // f(w) = (w - 3)², warmup 20 steps then exponential decay
    let s = Schedule {
        lr0: 0.05,
        warmup_steps: 20,
        decay_half_life: 1000,
        kind: ScheduleKind::WarmupExponential,
    };
    let mut p = vec![Tensor::scalar(-2.0)];
    let mut opt = OptimizerState::new(&p);
    let mut losses = Vec::new();
    for step in 1..=200 {
        let w = p[0].data()[0];
        losses.push((w - 3.0).powi(2));
        let g = vec![Tensor::scalar(2.0 * (w - 3.0))];
        opt.update(&mut p, &names(1), &g, lr_at(&s, step), None).unwrap();
    }
    assert!(losses[20..100].windows(2).all(|w| w[1] < w[0]));
    assert!(*losses.last().unwrap() < 1e-2 * losses[0]);
}

#[test]
fn gradient_clipping_caps_the_norm() {
    let mut a = vec![Tensor::scalar(0.0)];
    let mut b = a.clone();
    let mut oa = OptimizerState::new(&a);
    let mut ob = OptimizerState::new(&b);
    oa.update(&mut a, &names(1), &[Tensor::scalar(100.0)], 0.1, Some(1.0))
        .unwrap();
    ob.update(&mut b, &names(1), &[Tensor::scalar(1.0)], 0.1, None).unwrap();
    assert_eq!(a, b);
}

fn toy_corpus(n: usize, seed: u64) -> crate::corpus::ParallelCorpus {
    let spec = crate::corpus::SynthSpec {
        seed,
        n_pairs: n,
        lexicon_size: 30,
        zipf_exponent: 1.0,
        min_len: 1,
        max_len: 12,
        lexicon_overlap: 0.0,
        swap_prob: 0.0,
        source_prefix: "a".into(),
        target_prefix: "b".into(),
        pair: LanguagePair::new("xx", "yy").unwrap(),
    };
    crate::corpus::synthesize_pair(&spec, None).unwrap().0
}

fn vocab_for(c: &crate::corpus::ParallelCorpus) -> SubwordVocabulary {
    crate::subword::learn_vocab(c, c, 60, 0).unwrap()
}

#[test]
fn batches_respect_budget_and_partition() {
    let c = toy_corpus(300, 1);
    let enc = EncodedCorpus::new(&c, &vocab_for(&c));
    let plan = BatchPlan {
        token_budget: 64,
        max_len: 20,
        buckets: vec![4, 8, 16],
    };
    let batches = make_batches(&enc, &plan, 3, 0).unwrap();
    let mut seen: Vec<Vec<u32>> = Vec::new();
    for b in &batches {
        let (s, t) = b.padded_tokens();
        assert!(s <= 64 && t <= 64);
        for r in 0..b.rows {
            seen.push(b.src[r * b.src_len..r * b.src_len + b.src_lens[r]].to_vec());
        }
    }
    let mut expected: Vec<Vec<u32>> = enc
        .pairs()
        .iter()
        .filter(|(s, t)| s.len() <= 20 && t.len() <= 20)
        .map(|(s, _)| s.clone())
        .collect();
    seen.sort();
    expected.sort();
    assert_eq!(seen, expected);
    let tokens: usize = batches.iter().map(|b| b.source_tokens()).sum();
    assert_eq!(tokens, enc.token_count(20).0);
    assert_eq!(batches, make_batches(&enc, &plan, 3, 0).unwrap());
    assert_ne!(batches, make_batches(&enc, &plan, 3, 1).unwrap());
}

#[test]
fn batching_rejects_empty_and_bad_plans() {
    let c = toy_corpus(5, 1);
    let enc = EncodedCorpus::new(&c, &vocab_for(&c));
    let tiny = BatchPlan {
        token_budget: 8,
        max_len: 1,
        buckets: vec![],
    };
    assert!(matches!(make_batches(&enc, &tiny, 0, 0), Err(Error::Data(_))));
    let bad = BatchPlan {
        token_budget: 4,
        max_len: 8,
        buckets: vec![],
    };
    assert!(matches!(make_batches(&enc, &bad, 0, 0), Err(Error::Config(_))));
}

fn tiny_model(vocab: usize, seed: u64) -> TransformerModel {
    TransformerModel::init(
        TransformerConfig {
            vocab_size: vocab,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            dropout: 0.1,
            label_smoothing: 0.1,
            max_positions: 32,
            tie_softmax: true,
        },
        seed,
    )
    .unwrap()
}

struct Setup {
    vocab: SubwordVocabulary,
    enc: EncodedCorpus,
    dev: DevSet,
    state: TrainState,
}

fn setup() -> Setup {
    let c = toy_corpus(120, 2);
    let vocab = vocab_for(&c);
    let enc = EncodedCorpus::new(&c, &vocab);
    let dev = DevSet::new(&c.head(10), &vocab).unwrap();
    let plan = BatchPlan {
        token_budget: 96,
        max_len: 32,
        buckets: vec![8, 16],
    };
    let state = TrainState::new(
        tiny_model(vocab.len(), 1),
        sched(ScheduleKind::WarmupExponential),
        plan,
        &enc,
        9,
    )
    .unwrap();
    Setup { vocab, enc, dev, state }
}

#[test]
fn zero_steps_change_nothing() {
    let Setup { enc, mut state, .. } = setup();
    let before = state.clone();
    let out = train(&mut state, &enc, None, &TrainOptions::new(0, 1)).unwrap();
    assert_eq!(state, before);
    assert!(out.curve.is_empty());
}

#[test]
fn curve_length_and_best_snapshot() {
    let Setup {
        enc, dev, mut state, ..
    } = setup();
    let out = train(&mut state, &enc, Some(&dev), &TrainOptions::new(7, 3)).unwrap();
    assert_eq!(out.curve.len(), 2);
    assert_eq!(out.curve[1].step, 6);
    assert_eq!(state.global_step(), 7);
    let best = out.best.unwrap();
    assert!(out.curve.iter().all(|r| r.dev_bleu <= best.record.dev_bleu));
    assert_eq!(state.history, out.curve);
}

#[test]
fn patience_stops_early() {
    let Setup {
        enc, dev, mut state, ..
    } = setup();
    let opts = TrainOptions {
        patience: Some(0),
        ..TrainOptions::new(10, 1)
    };
    // patience 0: the first evaluation that fails to improve stops the run
    let out = train(&mut state, &enc, Some(&dev), &opts).unwrap();
    assert!(out.stopped_early || out.steps_run == 10);
    assert_eq!(out.curve.len() as u64, out.steps_run);
}

#[test]
fn resume_from_checkpoint_is_bit_exact() {
    let Setup { enc, mut state, .. } = setup();
    let mut straight = state.clone();
    train(&mut straight, &enc, None, &TrainOptions::new(20, 0)).unwrap();

    train(&mut state, &enc, None, &TrainOptions::new(10, 0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    save_checkpoint(&state, &path).unwrap();
    let mut resumed = load_checkpoint(&path).unwrap();
    assert_eq!(resumed, state);
    train(&mut resumed, &enc, None, &TrainOptions::new(10, 0)).unwrap();
    assert_eq!(resumed, straight);
    assert_eq!(resumed.to_bytes(), straight.to_bytes());
}

#[test]
fn epochs_roll_over() {
    let Setup { enc, mut state, .. } = setup();
    let n = make_batches(&enc, &state.plan, state.batch_seed, 0).unwrap().len();
    train(&mut state, &enc, None, &TrainOptions::new(n as u64 + 2, 0)).unwrap();
    assert_eq!(state.cursor, BatchCursor { epoch: 1, index: 2 });
}

#[test]
fn checkpoint_round_trip_and_errors() {
    let Setup {
        enc, dev, mut state, ..
    } = setup();
    train(&mut state, &enc, Some(&dev), &TrainOptions::new(4, 2)).unwrap();
    let bytes = state.to_bytes();
    let back = TrainState::from_bytes(&bytes).unwrap();
    assert_eq!(back, state);
    assert_eq!(back.to_bytes(), bytes);

    assert!(matches!(
        TrainState::from_bytes(&bytes[..bytes.len() - 5]),
        Err(Error::Checkpoint(CheckpointError::Truncated { needed: 5 }))
    ));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(
        TrainState::from_bytes(&bad),
        Err(Error::Checkpoint(CheckpointError::BadMagic))
    ));
    let mut bad = bytes.clone();
    bad[8] = 9;
    assert!(matches!(
        TrainState::from_bytes(&bad),
        Err(Error::Checkpoint(CheckpointError::Version { found: 9, expected: 1 }))
    ));
    let mut bad = bytes.clone();
    let last = bad.len() - 1;
    bad[last] ^= 1;
    assert!(matches!(
        TrainState::from_bytes(&bad),
        Err(Error::Checkpoint(CheckpointError::Digest { .. }))
    ));
    let mut bad = bytes.clone();
    bad[20] = b'!';
    assert!(matches!(
        TrainState::from_bytes(&bad),
        Err(Error::Checkpoint(CheckpointError::Header(_)))
    ));
}

#[test]
fn transfer_preserves_state() {
    let Setup {
        vocab, enc, mut state, ..
    } = setup();
    train(&mut state, &enc, None, &TrainOptions::new(5, 0)).unwrap();
    let child = EncodedCorpus::new(&toy_corpus(40, 77), &vocab);
    let t = transfer(&state, &child, false).unwrap();
    assert_eq!(t.model, state.model);
    assert_eq!(t.optimizer, state.optimizer);
    assert_eq!(t.next_lr(), state.next_lr());
    assert_eq!(t.cursor, BatchCursor::default());
    assert_eq!(t.corpus_digest, child.digest());

    let reset = transfer(&state, &child, true).unwrap();
    assert_eq!(reset.optimizer, state.optimizer);
    assert_eq!(reset.next_lr(), lr_at(&state.schedule, 1));

    // training on the old corpus after the swap is refused
    let mut t2 = t.clone();
    assert!(matches!(
        train(&mut t2, &enc, None, &TrainOptions::new(1, 0)),
        Err(Error::Contract(_))
    ));
}

#[test]
fn transfer_to_same_corpus_is_continued_training() {
    let Setup { enc, mut state, .. } = setup();
    train(&mut state, &enc, None, &TrainOptions::new(3, 0)).unwrap();
    let mut cont = state.clone();
    train(&mut cont, &enc, None, &TrainOptions::new(6, 0)).unwrap();
    let mut swapped = transfer(&state, &enc, false).unwrap();
    assert_eq!(swapped, state);
    train(&mut swapped, &enc, None, &TrainOptions::new(6, 0)).unwrap();
    assert_eq!(swapped, cont);
}

#[test]
fn transfer_rejects_foreign_vocabulary() {
    let Setup { state, .. } = setup();
    let child = toy_corpus(40, 5);
    let child_only =
        crate::subword::learn_vocab_with(&child, &child, 50, 0, crate::subword::VocabSource::ChildOnly).unwrap();
    let enc = EncodedCorpus::new(&child, &child_only);
    assert!(matches!(transfer(&state, &enc, false), Err(Error::Transfer(_))));
}

#[test]
fn divergence_reports_step() {
    let Setup { enc, mut state, .. } = setup();
    state.model.params_mut()[0].data_mut()[0] = f64::NAN;
    match train(&mut state, &enc, None, &TrainOptions::new(3, 0)) {
        Err(Error::Divergence { step: 1, .. }) => {}
        other => panic!("{other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn every_batch_fits(budget in 16usize..200, seed in any::<u64>(), epoch in 0u64..4) {
        let c = toy_corpus(60, seed % 7);
        let enc = EncodedCorpus::new(&c, &vocab_for(&c));
        let plan = BatchPlan { token_budget: budget.max(16), max_len: 16, buckets: vec![6, 10] };
        let batches = make_batches(&enc, &plan, seed, epoch).unwrap();
        let rows: usize = batches.iter().map(|b| b.rows).sum();
        let kept = enc.pairs().iter().filter(|(s, t)| s.len() <= 16 && t.len() <= 16).count();
        prop_assert_eq!(rows, kept);
        for b in &batches {
            let (s, t) = b.padded_tokens();
            prop_assert!(s <= plan.token_budget && t <= plan.token_budget);
        }
    }
}
