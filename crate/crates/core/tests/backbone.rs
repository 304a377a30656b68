use w3_core::attention::SpatialAttention;
use w3_core::backbone::*;
use w3_core::checkpoint;
use w3_core::rng::Rng;
use w3_core::{Error, PoolMode, Tape, Tensor};

fn small() -> BackboneConfig {
    BackboneConfig {
        frames: 4,
        height: 16,
        width: 16,
        stages: vec![
            StageSpec {
                channels: 8,
                blocks: 1,
                stride: 1,
            },
            StageSpec {
                channels: 16,
                blocks: 2,
                stride: 2,
            },
            StageSpec {
                channels: 16,
                blocks: 1,
                stride: 2,
            },
        ],
        ..BackboneConfig::default()
    }
}

fn clip(cfg: &BackboneConfig, seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    Tensor::from_fn(vec![cfg.frames, 3, cfg.height, cfg.width], |_| rng.uniform())
}

#[test]
fn time_shift_moves_two_folds_in_opposite_directions() {
    let (t, c) = (3, 8);
    let x = Tensor::from_fn(vec![t, c, 1, 1], |i| (i + 1) as f64);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = time_shift(&mut tape, v, 4).unwrap();
    let y = tape.value(y);
    for ti in 0..t {
        for ci in 0..c {
            let got = y.data()[ti * c + ci];
            let src = match ci {
                0 | 1 => ti.checked_sub(1),
                2 | 3 => Some(ti + 1).filter(|&s| s < t),
                _ => Some(ti),
            };
            let want = src.map_or(0.0, |s| x.data()[s * c + ci]);
            assert_eq!(got, want, "t={ti} c={ci}");
        }
    }
    assert!(matches!(time_shift(&mut tape, v, 3), Err(Error::Config(_))));
}

#[test]
fn adaptive_pool_to_own_size_is_identity_and_concat_round_trips() {
    let mut rng = Rng::new(3);
    let x = Tensor::from_fn(vec![2, 3, 5, 7], |_| rng.normal());
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let p = tape.adaptive_avg_pool(v, 5, 7).unwrap();
    assert!(tape.value(p).bit_eq(&x));

    let a = tape.slice(v, 1, 0, 1).unwrap();
    let b = tape.slice(v, 1, 1, 2).unwrap();
    let back = tape.concat(&[a, b], 1).unwrap();
    assert!(tape.value(back).bit_eq(&x));

    // uneven windows: 5 -> 2 uses rows [0,3) and [2,5)
    let q = tape.adaptive_avg_pool(v, 2, 1).unwrap();
    let want: f64 = (0..3)
        .flat_map(|r| (0..7).map(move |c| (r, c)))
        .map(|(r, c)| x.data()[r * 7 + c])
        .sum::<f64>()
        / 21.0;
    assert!((tape.value(q).data()[0] - want).abs() < 1e-12);
}

#[test]
fn forward_shapes_and_trace() {
    let cfg = small();
    let (net, store) = Backbone::init(cfg.clone(), 0, InitOptions::default()).unwrap();
    let mut tape = Tape::new();
    let b = store.bind(&mut tape, false);
    let x = tape.constant(clip(&cfg, 1));
    let tr = forward_backbone(&mut tape, &b, &net, x, &AttentionFlags::full()).unwrap();
    assert_eq!(tape.shape(tr.logits), &[4, 8]);
    assert_eq!(tape.shape(tr.refined), &[4, 16, 4, 4]);
    let summary = tr.stage_summary_masks();
    let sizes: Vec<Vec<usize>> = summary.iter().map(|m| tape.shape(m.unwrap().0).to_vec()).collect();
    assert_eq!(sizes, vec![vec![4, 16, 16], vec![4, 8, 8], vec![4, 4, 4]]);
    assert_eq!(tr.spatial_masks[1].len(), 2);

    let bad = tape.constant(Tensor::zeros(vec![4, 3, 8, 8]));
    assert!(matches!(
        forward_backbone(&mut tape, &b, &net, bad, &AttentionFlags::full()),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn baseline_has_no_masks_and_no_refinement() {
    let cfg = small();
    let (net, store) = Backbone::init(cfg.clone(), 0, InitOptions::default()).unwrap();
    let mut tape = Tape::new();
    let b = store.bind(&mut tape, false);
    let x = tape.constant(clip(&cfg, 1));
    let tr = forward_backbone(&mut tape, &b, &net, x, &AttentionFlags::baseline()).unwrap();
    assert!(tr.spatial_masks.iter().flatten().all(Option::is_none));
    assert_eq!(tr.features, tr.refined);

    let no_sa = AttentionFlags {
        spatial: false,
        ..AttentionFlags::full()
    };
    assert!(!no_sa.refinement_active());
    let tr = forward_backbone(&mut tape, &b, &net, x, &no_sa).unwrap();
    assert_eq!(tr.features, tr.refined);
    assert!(tr.channel_masks.iter().flatten().all(Option::is_some));
}

#[test]
fn missing_stage_mask_is_a_configuration_error() {
    let mut tape = Tape::new();
    let m = tape.constant(Tensor::full(vec![2, 4, 4], 0.5));
    let err = aggregate_stage_attentions(&mut tape, &[Some(SpatialAttention(m)), None], (2, 2)).unwrap_err();
    assert!(matches!(err, Error::Config(ref s) if s.contains("stage 2")));
    let ok = aggregate_stage_attentions(&mut tape, &[Some(SpatialAttention(m)); 3], (2, 2)).unwrap();
    assert_eq!(tape.shape(ok), &[2, 3, 2, 2]);
    assert!(tape.value(ok).data().iter().all(|&v| v == 0.5));
}

#[test]
fn refinement_with_zero_mapping_is_identity() {
    let mut tape = Tape::new();
    let mut rng = Rng::new(5);
    let x = tape.constant(Tensor::from_fn(vec![2, 4, 3, 3], |_| rng.normal()));
    let m = tape.constant(Tensor::full(vec![2, 3, 3, 3], 0.7));
    let w = tape.constant(Tensor::zeros(vec![4, 3, 1, 1]));
    let b = tape.constant(Tensor::zeros(vec![4]));
    let y = refine_features(&mut tape, x, m, w, b).unwrap();
    assert!(tape.value(y).bit_eq(tape.value(x)));
}

#[test]
fn post_add_placement_runs_and_differs() {
    let cfg = BackboneConfig {
        placement: W3Placement::PostAdd,
        ..small()
    };
    let (net, store) = Backbone::init(cfg.clone(), 0, InitOptions::default()).unwrap();
    let (net0, _) = Backbone::init(small(), 0, InitOptions::default()).unwrap();
    let logits = |n: &Backbone| {
        let mut tape = Tape::new();
        let b = store.bind(&mut tape, false);
        let x = tape.constant(clip(&cfg, 1));
        let tr = forward_backbone(&mut tape, &b, n, x, &AttentionFlags::full()).unwrap();
        tape.value(tr.logits).clone()
    };
    assert!(!logits(&net).bit_eq(&logits(&net0)));
}

#[test]
fn refinement_reaches_first_stage_attention() {
    let cfg = small();
    let (net, store) = Backbone::init(cfg.clone(), 2, InitOptions::default()).unwrap();
    let grad_norm = |flags: AttentionFlags| {
        let mut tape = Tape::new();
        let b = store.bind(&mut tape, true);
        let x = tape.constant(clip(&cfg, 4));
        let tr = forward_backbone(&mut tape, &b, &net, x, &flags).unwrap();
        let m = tape.pool(tr.logits, PoolMode::Avg, &[0]).unwrap();
        let loss = tape.softmax_cross_entropy(m, &[3]).unwrap();
        let g = tape.backward(loss).unwrap();
        net.stage_attention_params(0)
            .iter()
            .map(|&id| g.get(b[id]).map_or(0.0, |t| t.norm().powi(2)))
            .sum::<f64>()
            .sqrt()
    };
    let with = grad_norm(AttentionFlags::full());
    let without = grad_norm(AttentionFlags {
        afr: false,
        ..AttentionFlags::full()
    });
    assert!(with > 0.0 && without > 0.0);
}

#[test]
fn invalid_configurations_are_rejected() {
    let mut c = small();
    c.fold_div = 3;
    assert!(matches!(
        Backbone::init(c, 0, InitOptions::default()),
        Err(Error::Config(_))
    ));
    let mut c = small();
    c.stages.truncate(1);
    assert!(Backbone::init(c, 0, InitOptions::default()).is_err());
    let mut c = small();
    c.height = 18;
    assert!(Backbone::init(c, 0, InitOptions::default()).is_err());
}

#[test]
fn parameters_survive_a_checkpoint_round_trip() {
    let (_, store) = Backbone::init(small(), 9, InitOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.ckpt");
    checkpoint::save(&store, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert!(back.bit_eq(&store));
    assert!(back.same_layout(&store));
    assert_eq!(checkpoint::encode(&back), std::fs::read(&path).unwrap());
}

#[test]
fn init_is_deterministic_and_named() {
    let (_, a) = Backbone::init(small(), 4, InitOptions::default()).unwrap();
    let (_, b) = Backbone::init(small(), 4, InitOptions::default()).unwrap();
    let (_, c) = Backbone::init(small(), 5, InitOptions::default()).unwrap();
    assert!(a.bit_eq(&b));
    assert!(!a.bit_eq(&c));
    assert!(a.find("backbone.stage2.block2.conv1.w").is_some());
    assert!(a.find("w3.3.1.volume.w2").is_some());
    assert!(a.find("backbone.stage2.block1.proj.w").is_some());
    assert!(a.find("backbone.stage2.block2.proj.w").is_none());
}
