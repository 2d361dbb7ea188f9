use mprkit::reformat::MprStack;
use mprkit::shaping::{
    apply_padding, cube_sequence, denormalize, downscale_inplane, normalize, slice_pair, CubeSequence, NormStats,
    PaddingStrategy, CUBE_SIZE,
};
use proptest::prelude::*;
use rand::Rng;

fn random_stack(l: usize, h: usize, seed: u64) -> MprStack {
    let mut rng = mprkit::seed::rng(&[seed, l as u64]);
    let pixels = (0..l * h * h).map(|_| rng.random_range(-50.0..450.0)).collect();
    MprStack::new([l, h, h], 0.5, 0.5, pixels).unwrap()
}

/// Every pixel is a low-frequency sinusoid along the slice axis.
fn smooth_stack(l: usize, h: usize, cycles: f64) -> MprStack {
    let mut pixels = Vec::with_capacity(l * h * h);
    for sl in 0..l {
        let t = sl as f64 / (l - 1) as f64;
        for p in 0..h * h {
            let phase = p as f64 * 0.37;
            pixels.push(200.0 + 150.0 * (std::f64::consts::TAU * cycles * t + phase).sin());
        }
    }
    MprStack::new([l, h, h], 0.5, 0.5, pixels).unwrap()
}

#[test]
fn padding_output_shapes() {
    let s = random_stack(100, 32, 0);
    assert_eq!(apply_padding(&s, PaddingStrategy::intermediate()).unwrap().dims, [64, 32, 32]);
    assert_eq!(apply_padding(&s, PaddingStrategy::stretch()).unwrap().dims, [170, 32, 32]);
    assert_eq!(apply_padding(&s, PaddingStrategy::zero()).unwrap().dims, [170, 32, 32]);
    let long = random_stack(171, 4, 0);
    let err = apply_padding(&long, PaddingStrategy::zero()).unwrap_err();
    assert!(err.to_string().starts_with("lesion longer than pad target"), "{err}");
}

#[test]
fn zero_pad_of_sixty() {
    let s = random_stack(60, 4, 1);
    let p = apply_padding(&s, PaddingStrategy::zero()).unwrap();
    let plane = 16;
    assert!(p.pixels[..55 * plane].iter().all(|&v| v == 0.0));
    assert_eq!(&p.pixels[55 * plane..115 * plane], &s.pixels[..]);
    assert!(p.pixels[115 * plane..].iter().all(|&v| v == 0.0));
}

#[test]
fn cube_counts_match_the_stated_sizes() {
    assert_eq!(CubeSequence::count_for(145), 25);
    assert_eq!(CubeSequence::count_for(170), 30);
    assert_eq!(CubeSequence::count_for(25), 1);
    let s = downscale_inplane(&random_stack(145, 32, 2), CUBE_SIZE).unwrap();
    assert_eq!(s.dims, [145, 25, 25]);
    assert_eq!(cube_sequence(&s).unwrap().len(), 25);
    let one = random_stack(25, 25, 3);
    assert_eq!(cube_sequence(&one).unwrap().cubes[0], one.pixels);
}

#[test]
fn downscale_keeps_constants() {
    let s = MprStack::new([3, 32, 32], 0.5, 0.5, vec![123.0; 3 * 32 * 32]).unwrap();
    let d = downscale_inplane(&s, 25).unwrap();
    assert!(d.pixels.iter().all(|&v| (v - 123.0).abs() < 1e-12));
    assert!(downscale_inplane(&random_stack(2, 16, 0), 25).is_err());
}

#[test]
fn two_level_statistics() {
    let a = [0.0f32; 8];
    let b = [400.0f32; 8];
    let st = NormStats::from_samples([&a[..], &b[..]]).unwrap();
    assert!((st.mean - 200.0).abs() < 1e-9 && (st.std - 200.0).abs() < 1e-9, "{st:?}");
    let z = normalize(&[0.0, 400.0], st).unwrap();
    assert!((z[0] + 1.0).abs() < 1e-12 && (z[1] - 1.0).abs() < 1e-12, "{z:?}");
    assert!(NormStats::from_samples([&a[..]]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn zero_pad_centers_the_original(l in 2usize..=170, seed in 0u64..100) {
        let s = random_stack(l, 4, seed);
        let p = apply_padding(&s, PaddingStrategy::zero()).unwrap();
        let before = (170 - l) / 2;
        let after = 170 - l - before;
        prop_assert!(after == before || after == before + 1);
        let plane = 16;
        prop_assert!(p.pixels[..before * plane].iter().all(|&v| v == 0.0));
        prop_assert_eq!(&p.pixels[before * plane..(before + l) * plane], &s.pixels[..]);
        prop_assert!(p.pixels[(before + l) * plane..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cubes_cover_the_stack_with_overlap(l in 25usize..260) {
        let s = random_stack(l, 25, 7);
        let seq = cube_sequence(&s).unwrap();
        prop_assert_eq!(seq.len(), (l - 25) / 5 + 1);
        let plane = 25 * 25;
        for w in seq.cubes.windows(2) {
            prop_assert_eq!(&w[0][5 * plane..], &w[1][..20 * plane]);
        }
        let end = seq.starts.last().unwrap() + CUBE_SIZE;
        prop_assert!(end <= l && l - end < 5);
    }

    #[test]
    fn pair_commutes_with_length_resize(l in 2usize..120, t in 1usize..180, seed in 0u64..50) {
        let s = random_stack(l, 8, seed);
        let a = slice_pair(&apply_padding(&s, PaddingStrategy::intermediate().with_target(t)).unwrap());
        let b = slice_pair(&s).resample_length(t);
        prop_assert_eq!(a.dims, b.dims);
        for (x, y) in a.pixels.iter().zip(&b.pixels) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn resize_to_own_length_is_identity(l in 2usize..100, seed in 0u64..50) {
        let s = random_stack(l, 4, seed);
        let p = apply_padding(&s, PaddingStrategy::intermediate().with_target(l)).unwrap();
        prop_assert_eq!(p.pixels, s.pixels);
    }

    #[test]
    fn length_round_trip_through_64(l in 20usize..=170, cycles in 0.5f64..2.0) {
        let s = smooth_stack(l, 6, cycles);
        let down = apply_padding(&s, PaddingStrategy::intermediate()).unwrap();
        let back = apply_padding(&down, PaddingStrategy::intermediate().with_target(l)).unwrap();
        let mae = s.pixels.iter().zip(&back.pixels).map(|(a, b)| (a - b).abs()).sum::<f64>() / s.pixels.len() as f64;
        prop_assert!(mae < 0.01 * s.dynamic_range(), "{} vs {}", mae, s.dynamic_range());
    }

    #[test]
    fn downscale_keeps_affine_ramps(a in -5.0f64..5.0, b in -5.0f64..5.0, c in -100.0f64..100.0, target in 2usize..=32) {
        let h = 32;
        let pixels = (0..h * h).map(|p| a * (p / h) as f64 + b * (p % h) as f64 + c).collect();
        let s = MprStack::new([1, h, h], 0.5, 0.5, pixels).unwrap();
        let d = downscale_inplane(&s, target).unwrap();
        let k = (h - 1) as f64 / (target - 1) as f64;
        for o in 0..target {
            for p in 0..target {
                let want = a * o as f64 * k + b * p as f64 * k + c;
                prop_assert!((d.at(0, o, p) - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn normalize_round_trips(values in prop::collection::vec(-1000.0f64..1000.0, 2..200)) {
        let f: Vec<f32> = values.iter().map(|&v| v as f32).collect();
        prop_assume!(f.iter().any(|&v| v != f[0]));
        let st = NormStats::from_samples([&f[..]]).unwrap();
        let x: Vec<f64> = f.iter().map(|&v| f64::from(v)).collect();
        let back = denormalize(&normalize(&x, st).unwrap(), st).unwrap();
        for (a, b) in x.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-7 * a.abs().max(1.0));
        }
    }
}
