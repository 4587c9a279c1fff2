use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdino::distill::*;
use tdino::models::{build_backbone, BackboneSpec, Family};
use tdino::numerics::{check_gradients, kernels, Tape, Tensor};
use tdino::synthdata::generate_dataset;

fn tiny_spec(frames: usize) -> BackboneSpec {
    BackboneSpec {
        embed_dim: 8,
        conv_widths: [2, 4],
        recurrent_hidden: 8,
        ..BackboneSpec::new(Family::Conv2dRecurrent, frames)
    }
}

fn tiny_cfg(steps: usize) -> DistillConfig {
    DistillConfig { t: 3, t_pred: 3, batch_size: 4, epochs: steps, steps_per_epoch: 1, ..DistillConfig::default() }
}

#[test]
fn zero_steps_returns_initialization() {
    let videos = generate_dataset(1, 3, 30).unwrap();
    let spec = tiny_spec(3);
    let out = pretrain(&spec, &videos, &tiny_cfg(0), &MomentumSchedule::new(0.996, 1.0, 0).unwrap(), 4).unwrap();
    assert_eq!(out.pair.student, build_backbone(&spec, 4).unwrap());
    assert_eq!(out.pair.teacher, out.pair.student);
    assert!(out.log.is_empty());
}

#[test]
fn frozen_momentum_keeps_teacher_while_student_moves() {
    let videos = generate_dataset(1, 3, 30).unwrap();
    let spec = tiny_spec(3);
    let init = build_backbone(&spec, 4).unwrap();
    let out = pretrain(&spec, &videos, &tiny_cfg(1), &MomentumSchedule::new(1.0, 1.0, 1).unwrap(), 4).unwrap();
    assert_eq!(out.pair.teacher, init);
    assert_ne!(out.pair.student.params.fingerprint(), init.params.fingerprint());
    assert!(out.pair.teacher_is_gradient_free());
    assert_eq!(out.log.len(), 1);
    assert_eq!(out.log[0].momentum, 1.0);
}

#[test]
fn every_variant_runs_and_logs_each_step() {
    let videos = generate_dataset(2, 3, 30).unwrap();
    for loss in LossVariant::ALL {
        for projection_head in [false, true] {
            let cfg = DistillConfig { loss, projection_head, ..tiny_cfg(3) };
            let out = pretrain(&tiny_spec(3), &videos, &cfg, &MomentumSchedule::new(0.996, 1.0, 3).unwrap(), 0).unwrap();
            assert_eq!(out.log.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 2, 3]);
            assert!(out.log.iter().all(|r| r.loss.is_finite() && r.embed_std >= 0.0));
            assert!(out.pair.teacher_is_gradient_free());
        }
    }
}

#[test]
fn pretraining_is_deterministic() {
    let videos = generate_dataset(3, 3, 30).unwrap();
    let run = || pretrain(&tiny_spec(3), &videos, &tiny_cfg(3), &MomentumSchedule::new(0.996, 1.0, 3).unwrap(), 7).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.log, b.log);
    assert_eq!(a.pair.student.params.fingerprint(), b.pair.student.params.fingerprint());
}

#[test]
fn divergence_names_the_step() {
    let videos = generate_dataset(3, 3, 30).unwrap();
    let cfg = DistillConfig { loss: LossVariant::Mse, learning_rate: 1e200, ..tiny_cfg(5) };
    let err = pretrain(&tiny_spec(3), &videos, &cfg, &MomentumSchedule::new(0.996, 1.0, 5).unwrap(), 0).unwrap_err();
    match err {
        DistillError::Divergence { step, detail } => {
            assert!(step < 5);
            assert!(detail.contains("lr"), "{detail}");
        }
        other => panic!("expected divergence, got {other}"),
    }
}

#[test]
fn short_videos_and_mismatched_frames_rejected() {
    let videos = generate_dataset(3, 2, 24).unwrap();
    let cfg = DistillConfig { t: 12, t_pred: 13, ..tiny_cfg(1) };
    assert!(pretrain(&tiny_spec(12), &videos, &cfg, &MomentumSchedule::new(0.996, 1.0, 1).unwrap(), 0).is_err());
    assert!(pretrain(&tiny_spec(4), &videos, &tiny_cfg(1), &MomentumSchedule::new(0.996, 1.0, 1).unwrap(), 0).is_err());
}

#[test]
fn log_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.csv");
    let log = vec![
        LogRow { step: 1, loss: 0.1 + 0.2, momentum: 0.996, embed_std: 1.0 / 3.0 },
        LogRow { step: 2, loss: 0.25, momentum: 1.0, embed_std: 0.5 },
    ];
    write_log_csv(&path, &log).unwrap();
    assert!(std::fs::read_to_string(&path).unwrap().starts_with("step,loss,momentum,embed_std"));
    assert_eq!(read_log_csv(&path).unwrap(), log);
}

#[test]
fn downsampling_all_pairs() {
    for t in [3, 6, 12] {
        for t_pred in [3, 6, 12] {
            let idx = downsample_indices(t, t_pred);
            assert_eq!(idx.len(), t);
            assert!(idx.windows(2).all(|w| w[0] < w[1]));
            assert!(*idx.last().unwrap() < t + t_pred);
            assert_eq!(idx[0], 0);
        }
    }
}

#[test]
fn fpd_gradients_match_finite_differences() {
    for loss in LossVariant::ALL {
        let cfg = DistillConfig { loss, temperature_student: 0.5, temperature_teacher: 0.3, ..DistillConfig::default() };
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = Tensor::from_fn(&[3, 5], |_| rng.gen_range(-1.0..1.0)).with_grad();
            let teacher = Tensor::from_fn(&[3, 5], |_| rng.gen_range(-1.0..1.0));
            let center = Tensor::from_fn(&[5], |_| rng.gen_range(-0.2..0.2));
            let err = check_gradients(&[s], |tape, v| Ok(fpd_loss(tape, v[0], &teacher, &cfg, &center).unwrap()), 1e-4).unwrap();
            assert!(err < 1e-4, "{loss} instance {seed}: {err:e}");
        }
    }
}

fn cosine_loss(s: &[f64], t: &[f64], dim: usize) -> f64 {
    let cfg = DistillConfig { loss: LossVariant::Cosine, ..DistillConfig::default() };
    let mut tape = Tape::new();
    let sv = tape.constant(&Tensor::new(vec![s.len() / dim, dim], s.to_vec()).unwrap());
    let tt = Tensor::new(vec![t.len() / dim, dim], t.to_vec()).unwrap();
    let l = fpd_loss(&mut tape, sv, &tt, &cfg, &Tensor::zeros(&[dim])).unwrap();
    tape.value(l)[0]
}

#[test]
fn constant_teacher_distribution_tends_to_uniform() {
    let teacher = Tensor::new(vec![2, 4], vec![3.0, -1.0, 0.5, 2.0, 3.0, -1.0, 0.5, 2.0]).unwrap();
    let mut center = Tensor::zeros(&[4]);
    for _ in 0..300 {
        update_center(&mut center, &teacher, 0.9);
    }
    let mut row: Vec<f64> = teacher.data()[..4].iter().zip(center.data()).map(|(t, c)| t - c).collect();
    kernels::softmax_in_place(&mut row, 0.04);
    assert!(row.iter().all(|p| (p - 0.25).abs() < 1e-6), "{row:?}");
}

proptest! {
    #[test]
    fn cosine_loss_bounded_and_scale_free(
        s in prop::collection::vec(-10.0f64..10.0, 8),
        t in prop::collection::vec(-10.0f64..10.0, 8),
    ) {
        let l = cosine_loss(&s, &t, 4);
        prop_assert!((0.0..=2.0 + 1e-12).contains(&l));
        for alpha in [0.5, 2.0, 10.0] {
            let scaled: Vec<f64> = s.iter().map(|v| v * alpha).collect();
            prop_assert!((cosine_loss(&scaled, &t, 4) - l).abs() < 1e-6);
        }
        prop_assert!(cosine_loss(&t, &t, 4) < 1e-12 || t.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn momentum_is_monotone(total in 1usize..500, start in 0.5f64..1.0) {
        let s = MomentumSchedule::new(start, 1.0, total).unwrap();
        let values: Vec<f64> = (0..=total).map(|i| momentum_at(&s, i)).collect();
        prop_assert!(values.windows(2).all(|w| w[0] <= w[1] + 1e-15));
        prop_assert_eq!(values[0], start);
        prop_assert_eq!(values[total], 1.0);
    }

    #[test]
    fn ema_then_zero_copies_student(m in 0.0f64..=1.0, seed in 0u64..50) {
        let spec = tiny_spec(2);
        let mut pair = StudentTeacherPair::new(build_backbone(&spec, seed).unwrap(), None);
        pair.student = build_backbone(&spec, seed + 1).unwrap();
        ema_update(&mut pair, m).unwrap();
        ema_update(&mut pair, 0.0).unwrap();
        prop_assert_eq!(&pair.teacher.params, &pair.student.params);
    }
}
