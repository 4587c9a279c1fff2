use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdino::checkpoint::{Checkpoint, RngState};
use tdino::downstream::*;
use tdino::models::{build_backbone, BackboneSpec, Family, Head, HeadKind};
use tdino::synthdata::{generate_dataset, SyntheticVideo, NUM_ACTIONS};

fn tiny_spec(frames: usize) -> BackboneSpec {
    BackboneSpec { embed_dim: 8, conv_widths: [2, 4], recurrent_hidden: 8, ..BackboneSpec::new(Family::Conv2dRecurrent, frames) }
}

fn tiny_cfg(epochs: usize) -> DownstreamConfig {
    DownstreamConfig { t: 3, t_pred: 3, epochs, steps_per_epoch: 2, batch_size: 4, eval_stride: 8, ..DownstreamConfig::default() }
}

fn data() -> Vec<SyntheticVideo> {
    generate_dataset(5, 4, 30).unwrap()
}

/// Precision computed straight from the definition, one class at a time.
fn brute_force(preds: &[usize], golds: &[usize], classes: usize) -> (Vec<f64>, f64) {
    let per: Vec<f64> = (0..classes)
        .map(|c| {
            let predicted = preds.iter().filter(|&&p| p == c).count();
            let hits = preds.iter().zip(golds).filter(|(&p, &g)| p == c && g == c).count();
            if predicted == 0 {
                0.0
            } else {
                hits as f64 / predicted as f64
            }
        })
        .collect();
    let macro_p = per.iter().sum::<f64>() / classes as f64;
    (per, macro_p)
}

#[test]
fn precision_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..200 {
        let n = rng.gen_range(1..60);
        let preds: Vec<usize> = (0..n).map(|_| rng.gen_range(0..NUM_ACTIONS)).collect();
        let golds: Vec<usize> = (0..n).map(|_| rng.gen_range(0..NUM_ACTIONS)).collect();
        let r = evaluate_precision(&preds, &golds, NUM_ACTIONS).unwrap();
        let (per, macro_p) = brute_force(&preds, &golds, NUM_ACTIONS);
        assert!((r.macro_precision - macro_p).abs() < 1e-12);
        for (a, b) in r.per_class.iter().zip(&per) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn precision_is_permutation_invariant(pairs in prop::collection::vec((0usize..7, 0usize..7), 1..80), seed in any::<u64>()) {
        let (p, g): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let a = evaluate_precision(&p, &g, 7).unwrap();
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (p2, g2): (Vec<usize>, Vec<usize>) = shuffled.into_iter().unzip();
        let b = evaluate_precision(&p2, &g2, 7).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn confusion_sums_equal_frame_count(pairs in prop::collection::vec((0usize..5, 0usize..5), 1..50)) {
        let (p, g): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let r = evaluate_precision(&p, &g, 5).unwrap();
        let total: u64 = r.confusion.iter().flatten().sum();
        prop_assert_eq!(total as usize, r.n_frames);
        for c in 0..5 {
            let gold_count = g.iter().filter(|&&x| x == c).count() as u64;
            prop_assert_eq!(r.confusion[c].iter().sum::<u64>(), gold_count);
        }
    }
}

#[test]
fn linear_probe_never_touches_backbone() {
    let videos = data();
    let spec = tiny_spec(3);
    let backbone = build_backbone(&spec, 1).unwrap();
    let before = backbone.params.fingerprint();
    let head = Head::new(HeadKind::Prediction { t_pred: 3 }, 8, NUM_ACTIONS, 2).unwrap();
    let head_before = head.params.fingerprint();
    let out = finetune(backbone, head, Protocol::LinearProbe, &videos, &tiny_cfg(2), 0).unwrap();
    assert_eq!(out.backbone.params.fingerprint(), before);
    assert_ne!(out.head.params.fingerprint(), head_before);
}

#[test]
fn zero_epochs_returns_initialization() {
    let videos = data();
    let backbone = build_backbone(&tiny_spec(3), 1).unwrap();
    let head = Head::new(HeadKind::Prediction { t_pred: 3 }, 8, NUM_ACTIONS, 2).unwrap();
    for protocol in Protocol::ALL {
        let out = finetune(backbone.clone(), head.clone(), protocol, &videos, &tiny_cfg(0), 0).unwrap();
        assert_eq!(out.backbone, backbone);
        assert_eq!(out.head, head);
        assert!(out.log.is_empty());
    }
}

#[test]
fn mismatched_head_rejected() {
    let videos = data();
    let backbone = build_backbone(&tiny_spec(3), 1).unwrap();
    let wrong_rows = Head::new(HeadKind::Prediction { t_pred: 5 }, 8, NUM_ACTIONS, 2).unwrap();
    assert!(finetune(backbone.clone(), wrong_rows, Protocol::FineTune, &videos, &tiny_cfg(1), 0).is_err());
    let wrong_dim = Head::new(HeadKind::Prediction { t_pred: 3 }, 4, NUM_ACTIONS, 2).unwrap();
    assert!(finetune(backbone.clone(), wrong_dim, Protocol::FineTune, &videos, &tiny_cfg(1), 0).is_err());
    let recognition = Head::new(HeadKind::Recognition, 8, NUM_ACTIONS, 2).unwrap();
    assert!(finetune(backbone, recognition, Protocol::FineTune, &videos, &tiny_cfg(1), 0).is_err());
}

#[test]
fn identical_models_give_identical_results() {
    let videos = data();
    let spec = tiny_spec(3);
    let pretrained = build_backbone(&spec, 9).unwrap();
    let cfg = tiny_cfg(1);
    let (a, _) = run_protocol(&spec, Some(&pretrained), Protocol::FineTune, &videos, &videos, &cfg, 3).unwrap();
    let (b, _) = run_protocol(&spec, Some(&pretrained), Protocol::FineTune, &videos, &videos, &cfg, 3).unwrap();
    assert_eq!(a, b);
    // a supervised arm whose random init equals the "pretrained" weights is the same model
    let same_init = build_backbone(&spec, 3).unwrap();
    let (c, _) = run_protocol(&spec, Some(&same_init), Protocol::FineTune, &videos, &videos, &cfg, 3).unwrap();
    let (d, _) = run_protocol(&spec, None, Protocol::FullSupervised, &videos, &videos, &cfg, 3).unwrap();
    assert_eq!(c, d);
}

#[test]
fn suite_reports_missing_checkpoint_path() {
    let videos = data();
    let dir = tempfile::tempdir().unwrap();
    let expected = dir.path().join("seed0.ckpt");
    let path = expected.clone();
    let err = run_protocol_suite(&tiny_spec(3), &videos, &videos, &tiny_cfg(1), &[0], &move |_| path.clone()).unwrap_err();
    assert!(err.to_string().contains(&expected.display().to_string()), "{err}");
}

#[test]
fn suite_improvement_is_mean_difference() {
    let videos = data();
    let spec = tiny_spec(3);
    let dir = tempfile::tempdir().unwrap();
    for seed in [0u64, 1] {
        let b = build_backbone(&spec, seed + 10).unwrap();
        let zero = RngState { seed: [0; 32], stream: 0, word_pos: 0 };
        Checkpoint::from_backbone(&b, 0, zero, [0; 32]).save(&dir.path().join(format!("{seed}.ckpt"))).unwrap();
    }
    let root = dir.path().to_path_buf();
    let suite = run_protocol_suite(&spec, &videos, &videos, &tiny_cfg(1), &[0, 1], &move |s| root.join(format!("{s}.ckpt"))).unwrap();
    assert_eq!(suite.per_seed.len(), 2);
    let expected = suite.per_seed.iter().map(|r| r.fine_tune.macro_precision - r.supervised.macro_precision).sum::<f64>() / 2.0;
    assert_eq!(suite.improvement, expected);
}

fn window_mean(log: &[f64], range: std::ops::Range<usize>) -> f64 {
    log[range.clone()].iter().sum::<f64>() / range.len() as f64
}

#[test]
fn supervised_training_fits_both_tasks() {
    let videos = generate_dataset(0, 30, 120).unwrap();
    let (train, test) = videos.split_at(20);
    let spec = BackboneSpec::new(Family::Conv2dRecurrent, 6);
    let chance = 1.0 / NUM_ACTIONS as f64;
    let cases = [
        (Task::Prediction, DownstreamConfig { t: 6, t_pred: 3, epochs: 15, ..DownstreamConfig::default() }),
        (Task::Recognition, DownstreamConfig { task: Task::Recognition, t: 6, t_pred: 6, epochs: 30, learning_rate: 0.03, ..DownstreamConfig::default() }),
    ];
    for (task, cfg) in cases {
        let (on_test, outcome) = run_protocol(&spec, None, Protocol::FullSupervised, train, test, &cfg, 0).unwrap();
        let n = outcome.log.len();
        let (first, last) = (window_mean(&outcome.log, 0..10), window_mean(&outcome.log, n - 10..n));
        assert!(last < 0.5 * first, "{task:?}: loss {first} -> {last}");
        let on_train = evaluate_model(&outcome.backbone, &outcome.head, train, &cfg).unwrap();
        assert!(on_train.macro_precision > 0.5, "{task:?}: training precision {}", on_train.macro_precision);
        assert!(on_test.macro_precision > chance, "{task:?}: test precision {}", on_test.macro_precision);
    }
}
