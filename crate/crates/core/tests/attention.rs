use proptest::prelude::*;
use w3_core::attention::*;
use w3_core::param::ParamStore;
use w3_core::rng::Rng;
use w3_core::{Error, Tape, Tensor};

fn module(c: usize, r: usize, mixing: TemporalMixing, init: AttentionInit, seed: u64) -> (ParamStore, W3Params) {
    let mut store = ParamStore::new();
    let cfg = W3Config::new(c, r, mixing).unwrap();
    let p = W3Params::init(&mut store, "m", cfg, &mut Rng::new(seed), init).unwrap();
    (store, p)
}

fn features(shape: [usize; 4], seed: u64, scale: f64) -> Tensor {
    let mut rng = Rng::new(seed);
    Tensor::from_fn(shape.to_vec(), |_| scale * rng.uniform_in(-1.0, 1.0))
}

#[test]
fn zero_initialised_module_gives_half_masks() {
    let (store, p) = module(8, 4, TemporalMixing::Dense, AttentionInit::Zero, 0);
    let f = features([3, 8, 4, 5], 1, 2.0);
    let (out, mc, ms) = apply_w3_tensors(&store, &p, &f, W3Switches::default()).unwrap();
    assert!(mc.data().iter().all(|&v| v == 0.5));
    assert!(ms.unwrap().data().iter().all(|&v| v == 0.5));
    for (o, x) in out.data().iter().zip(f.data()) {
        assert_eq!(*o, 0.25 * x);
    }
}

#[test]
fn switches_drop_the_spatial_mask() {
    let (store, p) = module(8, 4, TemporalMixing::Depthwise, AttentionInit::Random, 0);
    let f = features([2, 8, 3, 3], 1, 1.0);
    let off = W3Switches {
        spatial: false,
        temporal: true,
    };
    let (out, mc, ms) = apply_w3_tensors(&store, &p, &f, off).unwrap();
    assert!(ms.is_none());
    assert_eq!(mc.shape(), &[2, 8]);
    // without the spatial step the output is F scaled by the channel mask
    for t in 0..2 {
        for c in 0..8 {
            for i in 0..9 {
                let j = (t * 8 + c) * 9 + i;
                assert_eq!(out.data()[j], f.data()[j] * mc.data()[t * 8 + c]);
            }
        }
    }
}

#[test]
fn wrong_channel_count_is_a_dimension_error() {
    let (store, p) = module(8, 4, TemporalMixing::Dense, AttentionInit::Random, 0);
    let f = features([2, 4, 3, 3], 1, 1.0);
    assert!(matches!(
        apply_w3_tensors(&store, &p, &f, W3Switches::default()),
        Err(Error::Dimension { .. })
    ));
    assert!(W3Config::new(12, 8, TemporalMixing::Dense).is_err());
    // ratio larger than the width clamps to one hidden unit
    assert_eq!(W3Config::new(8, 16, TemporalMixing::Dense).unwrap().hidden(), 1);
}

#[test]
fn temporal_mixing_controls_kernel_shape() {
    let (s, p) = module(8, 4, TemporalMixing::Depthwise, AttentionInit::Random, 0);
    assert_eq!(s.get(p.temporal_w1).shape(), &[8, 1, 3]);
    let (s, p) = module(8, 4, TemporalMixing::Dense, AttentionInit::Random, 0);
    assert_eq!(s.get(p.temporal_w1).shape(), &[8, 8, 3]);
    assert_eq!(s.get(p.volume_w1).shape(), &[4, 1, 3, 3, 3]);
    assert_eq!(s.get(p.spatial_w).shape(), &[1, 2, 7, 7]);
    assert_eq!(
        "depthwise".parse::<TemporalMixing>().unwrap(),
        TemporalMixing::Depthwise
    );
}

#[test]
fn channel_masks_see_five_frames() {
    let (store, p) = module(8, 4, TemporalMixing::Dense, AttentionInit::Random, 3);
    let f = features([9, 8, 3, 3], 4, 1.0);
    let mut g = f.clone();
    let frame = 8 * 9;
    g.data_mut()[4 * frame..5 * frame].iter_mut().for_each(|v| *v += 0.5);
    let changed = |switches: W3Switches| -> Vec<usize> {
        let (_, a, _) = apply_w3_tensors(&store, &p, &f, switches).unwrap();
        let (_, b, _) = apply_w3_tensors(&store, &p, &g, switches).unwrap();
        (0..9)
            .filter(|&t| a.data()[t * 8..(t + 1) * 8] != b.data()[t * 8..(t + 1) * 8])
            .collect()
    };
    let temporal = W3Switches {
        spatial: false,
        temporal: true,
    };
    assert_eq!(changed(temporal), vec![2, 3, 4, 5, 6]);
    let frame_only = W3Switches {
        spatial: false,
        temporal: false,
    };
    assert_eq!(changed(frame_only), vec![4]);
}

fn shapes() -> impl Strategy<Value = (usize, usize, usize, usize)> {
    (
        1usize..5,
        prop::sample::select(vec![2usize, 4, 8, 16]),
        2usize..7,
        1usize..7,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn stored_masks_follow_the_factorised_count((t, c, h, w) in shapes(), seed: u64) {
        let (store, p) = module(c, 2, TemporalMixing::Dense, AttentionInit::Random, seed);
        let f = features([t, c, h, w], seed ^ 1, 1.0);
        let (_, mc, ms) = apply_w3_tensors(&store, &p, &f, W3Switches::default()).unwrap();
        let stored = mc.len() + ms.unwrap().len();
        prop_assert_eq!(stored, mask_elements(t, c, h, w));
        prop_assert_eq!(stored, t * (c + h * w));
        prop_assert!(stored <= t * c * h * w);
        // C + HW < C·HW exactly when (C - 1)(HW - 1) > 1
        if (c - 1) * (h * w - 1) > 1 {
            prop_assert!(stored < t * c * h * w);
        }
    }

    #[test]
    fn masks_are_open_unit_and_attenuate((t, c, h, w) in shapes(), seed: u64, scale in 0.1f64..50.0) {
        let (store, p) = module(c, 4, TemporalMixing::Dense, AttentionInit::Random, seed);
        let f = features([t, c, h, w], seed ^ 2, scale);
        let (out, mc, ms) = apply_w3_tensors(&store, &p, &f, W3Switches::default()).unwrap();
        for v in mc.data().iter().chain(ms.unwrap().data()) {
            prop_assert!(*v > 0.0 && *v < 1.0);
        }
        for (o, x) in out.data().iter().zip(f.data()) {
            prop_assert!(o.abs() <= x.abs());
        }
    }

    #[test]
    fn channel_path_ignores_spatial_permutations(seed: u64, perm_seed: u64) {
        let (t, c, h, w) = (3, 8, 3, 4);
        let (store, p) = module(c, 4, TemporalMixing::Dense, AttentionInit::Random, seed);
        let f = features([t, c, h, w], seed ^ 3, 1.0);
        let perm = Rng::new(perm_seed).permutation(h * w);
        let g = Tensor::from_fn(vec![t, c, h, w], |i| {
            let (plane, pos) = (i / (h * w), i % (h * w));
            f.data()[plane * h * w + perm[pos]]
        });
        let mask = |x: &Tensor| {
            let mut tape = Tape::new();
            let b = store.bind(&mut tape, false);
            let v = tape.constant(x.clone());
            let (a, m) = squeeze_spatial_descriptors(&mut tape, v).unwrap();
            let fr = channel_frame_attention(&mut tape, &b, &p, a, m).unwrap();
            let ct = channel_temporal_attention(&mut tape, &b, &p, fr).unwrap();
            tape.value(ct.0).clone()
        };
        // pooled sums may reorder, so allow rounding
        prop_assert!(mask(&f).max_abs_diff(&mask(&g)) < 1e-12);
    }

    #[test]
    fn spatial_frame_masks_follow_channel_permutations(seed: u64, perm_seed: u64) {
        let (t, c, h, w) = (2, 8, 4, 4);
        let (store, p) = module(c, 4, TemporalMixing::Dense, AttentionInit::Random, seed);
        let f = features([t, c, h, w], seed ^ 4, 1.0);
        let perm = Rng::new(perm_seed).permutation(c);
        let g = Tensor::from_fn(vec![t, c, h, w], |i| {
            let (ti, ci, pos) = (i / (c * h * w), i / (h * w) % c, i % (h * w));
            f.data()[(ti * c + perm[ci]) * h * w + pos]
        });
        let mask = |x: &Tensor| {
            let mut tape = Tape::new();
            let b = store.bind(&mut tape, false);
            let v = tape.constant(x.clone());
            let (a, m) = squeeze_channel_descriptors(&mut tape, v).unwrap();
            let fr = spatial_frame_attention(&mut tape, &b, &p, a, m).unwrap();
            let st = spatio_temporal_attention(&mut tape, &b, &p, fr).unwrap();
            tape.value(st.0).clone()
        };
        prop_assert!(mask(&f).max_abs_diff(&mask(&g)) < 1e-12);
    }
}
