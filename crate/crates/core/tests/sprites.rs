//! Sprite rendering against an independent polygon rasterizer, plus dataset
//! determinism, balance and independence checks.

use std::f64::consts::PI;
use std::fs;

use fader_core::dataset::{from_byte, generate, sample_dataset, sample_specs, Dataset, DatasetParams};
use fader_core::synth::{
    counterfactual, render_sprite, sample_spec, ShapeKind, SpriteSpec, BLUE, RED, SMALL_RADIUS, SUPERSAMPLE,
};
use fader_core::FaderError;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Shape outline as a disc or a convex polygon, built from vertices.
enum Outline {
    Disc { cx: f64, cy: f64, r: f64 },
    Polygon(Vec<(f64, f64)>),
}

fn outline(s: &SpriteSpec, side: usize) -> Outline {
    let frac = if s.attr_size == 1 { 0.19 } else { 0.11 };
    // area-equivalent radius: every shape covers π r²
    let r = frac * side as f64;
    let (cx, cy) = (s.center_x, s.center_y);
    let (sin, cos) = s.rotation.sin_cos();
    let place = |u: f64, v: f64| (cx + u * cos - v * sin, cy + u * sin + v * cos);
    match s.shape_kind {
        ShapeKind::Circle => Outline::Disc { cx, cy, r },
        ShapeKind::Square => {
            let half = (PI * r * r).sqrt() / 2.0;
            Outline::Polygon(vec![
                place(-half, -half),
                place(half, -half),
                place(half, half),
                place(-half, half),
            ])
        }
        ShapeKind::Triangle => {
            // equilateral with area π r²: side a = sqrt(4π r² / √3), circumradius a / √3
            let a = (4.0 * PI * r * r / 3f64.sqrt()).sqrt();
            let big_r = a / 3f64.sqrt();
            let verts = [270.0f64, 30.0, 150.0]
                .iter()
                .map(|d| {
                    let (s, c) = d.to_radians().sin_cos();
                    place(big_r * c, big_r * s)
                })
                .collect();
            Outline::Polygon(verts)
        }
    }
}

fn inside(o: &Outline, x: f64, y: f64) -> bool {
    match o {
        Outline::Disc { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
        Outline::Polygon(v) => {
            // same sign of every edge cross product
            let crosses: Vec<f64> = (0..v.len())
                .map(|i| {
                    let (ax, ay) = v[i];
                    let (bx, by) = v[(i + 1) % v.len()];
                    (bx - ax) * (y - ay) - (by - ay) * (x - ax)
                })
                .collect();
            crosses.iter().all(|&c| c >= 0.0) || crosses.iter().all(|&c| c <= 0.0)
        }
    }
}

/// Per-pixel coverage on the same sub-pixel grid the renderer documents.
fn reference_coverage(s: &SpriteSpec, side: usize) -> Vec<f64> {
    let o = outline(s, side);
    let n = SUPERSAMPLE;
    let mut cov = vec![0.0; side * side];
    for py in 0..side {
        for px in 0..side {
            let mut hits = 0;
            for sy in 0..n {
                for sx in 0..n {
                    let x = px as f64 + (sx as f64 + 0.5) / n as f64;
                    let y = py as f64 + (sy as f64 + 0.5) / n as f64;
                    hits += usize::from(inside(&o, x, y));
                }
            }
            cov[py * side + px] = hits as f64 / (n * n) as f64;
        }
    }
    cov
}

fn reference_render(s: &SpriteSpec, side: usize) -> Vec<f64> {
    let cov = reference_coverage(s, side);
    let fill = if s.attr_color == 1 { [0.8, -0.6, -0.6] } else { [-0.6, -0.6, 0.8] };
    let mut out = Vec::with_capacity(3 * side * side);
    for f in fill {
        out.extend(cov.iter().map(|&a| s.bg_shade * (1.0 - a) + f * a));
    }
    out
}

fn spec_from(seed: u64, bits: [u8; 2], side: usize) -> SpriteSpec {
    sample_spec(&mut ChaCha8Rng::seed_from_u64(seed), &bits, side)
}

#[test]
fn fill_colors_match_reference_palette() {
    assert_eq!(BLUE, [-0.6, -0.6, 0.8]);
    assert_eq!(RED, [0.8, -0.6, -0.6]);
    assert_eq!(SMALL_RADIUS, 0.11);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn render_agrees_with_reference_rasterizer(seed in any::<u64>(), c in 0u8..2, s in 0u8..2, side in prop::sample::select(vec![16usize, 32, 64])) {
        let spec = spec_from(seed, [c, s], side);
        let img = render_sprite(&spec, side, side).unwrap();
        let want = reference_render(&spec, side);
        let mut off = 0;
        for (&a, &b) in img.data().iter().zip(&want) {
            let d = (f64::from(a) - b).abs();
            // a single sub-sample on an exact edge may round either way
            prop_assert!(d <= 1.6 / (SUPERSAMPLE * SUPERSAMPLE) as f64 + 1e-6);
            off += usize::from(d > 1e-5);
        }
        prop_assert!(off <= 3, "{off} values differ");
        prop_assert!(img.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn color_flip_changes_only_shape_pixels(seed in any::<u64>(), s in 0u8..2) {
        let side = 32;
        let spec = spec_from(seed, [0, s], side);
        let flipped = counterfactual(&spec, 0, 2).unwrap();
        prop_assert_eq!(flipped.attr_color, 1);
        let a = render_sprite(&spec, side, side).unwrap();
        let b = render_sprite(&flipped, side, side).unwrap();
        let mask = reference_coverage(&spec, side);
        let plane = side * side;
        let mut changed = 0;
        for i in 0..3 * plane {
            if a.data()[i] != b.data()[i] {
                prop_assert!(mask[i % plane] > 0.0, "pixel {} changed outside the mask", i % plane);
                changed += 1;
            }
        }
        prop_assert!(changed > 0);
    }

    #[test]
    fn size_flip_keeps_background_outside_both_masks(seed in any::<u64>(), c in 0u8..2) {
        let side = 32;
        let spec = spec_from(seed, [c, 0], side);
        let big = counterfactual(&spec, 1, 2).unwrap();
        prop_assert_eq!(counterfactual(&big, 1, 2).unwrap(), spec.clone());
        let a = render_sprite(&spec, side, side).unwrap();
        let b = render_sprite(&big, side, side).unwrap();
        let (ma, mb) = (reference_coverage(&spec, side), reference_coverage(&big, side));
        let plane = side * side;
        for i in 0..3 * plane {
            let p = i % plane;
            if ma[p] == 0.0 && mb[p] == 0.0 {
                prop_assert_eq!(a.data()[i], b.data()[i]);
                prop_assert_eq!(f64::from(a.data()[i]), f64::from(spec.bg_shade as f32));
            }
        }
    }

    #[test]
    fn small_shapes_cover_enough_pixels(seed in any::<u64>(), c in 0u8..2, side in prop::sample::select(vec![16usize, 32, 64])) {
        let mut spec = spec_from(seed, [c, 0], side);
        spec.bg_shade = -1.0;
        let img = render_sprite(&spec, side, side).unwrap();
        let r = 0.11 * side as f64;
        let plane = side * side;
        let touched = (0..plane).filter(|&p| (0..3).any(|ch| img.data()[ch * plane + p] != -1.0)).count();
        let mask = reference_coverage(&spec, side).iter().filter(|&&v| v > 0.0).count();
        prop_assert!(mask as f64 >= 0.8 * PI * r * r, "{mask} mask pixels");
        prop_assert!(touched as f64 >= 0.8 * PI * r * r, "{touched} nonzero pixels");
    }

    #[test]
    fn sampled_specs_are_in_bounds(seed in any::<u64>(), c in 0u8..2, s in 0u8..2, side in prop::sample::select(vec![16usize, 32, 64, 128])) {
        let spec = spec_from(seed, [c, s], side);
        prop_assert!(spec.check_bounds(side, side).is_ok());
        prop_assert!(counterfactual(&spec, 1, 2).unwrap().check_bounds(side, side).is_ok());
    }
}

#[test]
fn out_of_bounds_and_bad_index_are_rejected() {
    let mut spec = spec_from(1, [0, 0], 32);
    spec.center_x = 1.0;
    assert!(matches!(render_sprite(&spec, 32, 32), Err(FaderError::OutOfBounds(_))));
    assert!(counterfactual(&spec, 2, 2).is_err());
    assert!(counterfactual(&spec, 1, 1).is_err());
    let again = counterfactual(&counterfactual(&spec, 0, 2).unwrap(), 0, 2).unwrap();
    assert_eq!(again, spec);
}

#[test]
fn same_seed_gives_identical_bytes_on_disk() {
    let params = DatasetParams::default();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = sample_dataset(&params, 7, a.path()).unwrap();
    let mb = sample_dataset(&params, 7, b.path()).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(ma.total, 10_000);
    assert_eq!(ma.splits.train + ma.splits.valid + ma.splits.test, ma.total);
    let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    for name in &names {
        let fa = fs::read(a.path().join(name)).unwrap();
        let fb = fs::read(b.path().join(name)).unwrap();
        assert!(fa == fb, "{name:?} differs");
    }
    for f in ["manifest.toml", "train.images", "train.labels", "valid.images", "test.labels", "test.cf.pairs"] {
        assert!(a.path().join(f).is_file(), "{f} missing");
    }

    // label table: header of attribute names, index column first
    let labels = fs::read_to_string(a.path().join("valid.labels")).unwrap();
    let mut lines = labels.lines();
    assert_eq!(lines.next().unwrap(), "index,color,size");
    assert_eq!(lines.count(), 1000);

    // images are H×W×C bytes mapped linearly from [-1, 1]
    let loaded = Dataset::load(a.path()).unwrap();
    let mem = generate(&params, 7).unwrap();
    assert_eq!(loaded.train.pixels, mem.train.pixels);
    assert_eq!(loaded.test_cf.pairs, mem.test_cf.pairs);
    let img = mem.train.image::<f32>(0);
    let (h, w) = (32, 32);
    let px = |y: usize, x: usize, c: usize| mem.train.pixels[(y * w + x) * 3 + c];
    assert_eq!(from_byte(px(3, 5, 2)), img.data()[(2 * h + 3) * w + 5]);

    let other = generate(&params, 8).unwrap();
    assert_ne!(other.train.pixels, mem.train.pixels);
}

#[test]
fn marginals_are_balanced() {
    let ds = generate(&DatasetParams::default(), 3).unwrap();
    for split in [&ds.train, &ds.valid, &ds.test] {
        let n = split.len();
        for a in 0..2 {
            let ones = (0..n).filter(|&i| split.labels_of(i)[a] == 1).count();
            if n == 8000 {
                assert!((3840..=4160).contains(&ones), "attribute {a}: {ones}");
            }
            assert!((ones as f64 / n as f64 - 0.5).abs() <= 0.02);
        }
    }
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn attributes_are_independent_of_nuisance_factors() {
    let specs = sample_specs(&DatasetParams::default(), 11).unwrap();
    let train = &specs[0].specs;
    assert_eq!(train.len(), 8000);
    let col = |f: &dyn Fn(&SpriteSpec) -> f64| train.iter().map(f).collect::<Vec<_>>();
    let attrs = [col(&|s| f64::from(s.attr_color)), col(&|s| f64::from(s.attr_size))];
    let nuisance = [
        ("center_x", col(&|s| s.center_x)),
        ("center_y", col(&|s| s.center_y)),
        ("rotation", col(&|s| s.rotation)),
        ("bg_shade", col(&|s| s.bg_shade)),
        ("circle", col(&|s| f64::from(s.shape_kind == ShapeKind::Circle))),
        ("square", col(&|s| f64::from(s.shape_kind == ShapeKind::Square))),
    ];
    // |r| under independence has sd 1/sqrt(8000) ≈ 0.011
    for (k, a) in attrs.iter().enumerate() {
        for (name, v) in &nuisance {
            let r = correlation(a, v);
            assert!(r.abs() < 0.05, "attribute {k} vs {name}: r = {r:.4}");
        }
    }
    assert!(correlation(&attrs[0], &attrs[1]).abs() < 0.05);
}

#[test]
fn counterfactual_sets_hold_every_flip() {
    let params = DatasetParams {
        train: 64,
        valid: 32,
        test: 32,
        ..DatasetParams::default()
    };
    let ds = generate(&params, 2).unwrap();
    let specs = sample_specs(&params, 2).unwrap();
    let cf = &ds.test_cf;
    assert_eq!(cf.pairs.len(), 64);
    for (i, p) in cf.pairs.iter().enumerate() {
        let spec = counterfactual(&specs[2].specs[p.original_index], p.attr_index, 2).unwrap();
        let img = render_sprite(&spec, 32, 32).unwrap();
        let stored = cf.images.image::<f32>(i);
        for (&a, &b) in img.data().iter().zip(stored.data()) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-6);
        }
        let mut want = ds.test.labels_of(p.original_index).to_vec();
        want[p.attr_index] ^= 1;
        assert_eq!(cf.images.labels_of(i), &want[..]);
    }
    assert_eq!(cf.indices_for(0).len(), 32);
}
