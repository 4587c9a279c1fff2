use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdino::models::*;
use tdino::numerics::{sgd_step, SgdState, Tape, Tensor};

fn small(family: Family, frames: usize) -> BackboneSpec {
    BackboneSpec { embed_dim: 16, conv_widths: [4, 8], model_dim: 16, recurrent_hidden: 16, ..BackboneSpec::new(family, frames) }
}

fn random_clip(rng: &mut ChaCha8Rng, frames: usize) -> Tensor {
    Tensor::from_fn(&[frames, 3, 32, 32], |_| rng.gen_range(0.0..1.0))
}

#[test]
fn every_family_emits_fixed_size_embeddings() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for family in Family::ALL {
        for frames in [3, 6, 12] {
            let spec = small(family, frames);
            let backbone = build_backbone(&spec, 1).unwrap();
            let clips: Vec<Tensor> = (0..2).map(|_| random_clip(&mut rng, frames)).collect();
            let refs: Vec<&Tensor> = clips.iter().collect();
            let z = backbone.embed_batch(&refs).unwrap();
            assert_eq!(z.shape(), &[2, 16], "{family} T={frames}");
            assert!(z.all_finite());
            let single = embed(&backbone, &clips[1]).unwrap();
            for (a, b) in single.data().iter().zip(&z.data()[16..]) {
                assert!((a - b).abs() < 1e-12, "{family}: batch and single embeddings differ");
            }
        }
    }
}

#[test]
fn conv3d_backbone_is_sensitive_to_frame_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let backbone = build_backbone(&small(Family::Conv3dResidual, 6), 2).unwrap();
    let clip = random_clip(&mut rng, 6);
    let frame = 3 * 32 * 32;
    let mut reversed = Vec::with_capacity(clip.numel());
    for f in (0..6).rev() {
        reversed.extend_from_slice(&clip.data()[f * frame..(f + 1) * frame]);
    }
    let reversed = Tensor::new(vec![6, 3, 32, 32], reversed).unwrap();
    let a = embed(&backbone, &clip).unwrap();
    let b = embed(&backbone, &reversed).unwrap();
    assert!(a.l2_distance(&b) > 1e-6);
}

/// Two classes distinguished by brightness; a few SGD steps must lower the loss.
#[test]
fn backbones_with_head_are_trainable() {
    for family in Family::ALL {
        let spec = small(family, 3);
        let mut backbone = build_backbone(&spec, 5).unwrap();
        let mut head = Head::new(HeadKind::Recognition, spec.embed_dim, 2, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let clips: Vec<Tensor> = (0..8)
            .map(|i| {
                let level = if i % 2 == 0 { 0.1 } else { 0.9 };
                Tensor::from_fn(&[3, 3, 32, 32], |_| level + rng.gen_range(-0.05..0.05))
            })
            .collect();
        let labels: Vec<usize> = (0..8).map(|i| i % 2).collect();
        let refs: Vec<&Tensor> = clips.iter().collect();
        let mut sgd = SgdState::new(0.05, 0.9).unwrap();
        let mut losses = Vec::new();
        for _ in 0..50 {
            let mut tape = Tape::new();
            let bp = backbone.params.bind(&mut tape, true);
            let hp = head.params.bind(&mut tape, true);
            let z = backbone.forward(&mut tape, &bp, &refs).unwrap();
            let logits = head.forward(&mut tape, &hp, z).unwrap();
            let loss = tape.cross_entropy(logits, &labels).unwrap();
            losses.push(tape.value(loss)[0]);
            tape.backward(loss).unwrap();
            backbone.params.absorb_grads(&tape, &bp);
            head.params.absorb_grads(&tape, &hp);
            let mut all = backbone.params.tensors_mut();
            all.extend(head.params.tensors_mut());
            sgd_step(&mut all, &mut sgd).unwrap();
        }
        let (first, last) = (losses[0], *losses.last().unwrap());
        assert!(last < 0.5 * first, "{family}: loss {first} -> {last}");
    }
}

#[test]
fn parameter_counts_grow_with_width() {
    for family in Family::ALL {
        let narrow = build_backbone(&small(family, 6), 0).unwrap().param_count();
        let wide = build_backbone(&BackboneSpec { embed_dim: 32, ..small(family, 6) }, 0).unwrap().param_count();
        assert!(wide > narrow, "{family}");
    }
}
