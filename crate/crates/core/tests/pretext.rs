mod common;

use common::{rng, uniform};
use proptest::prelude::*;
use rand::Rng;
use segpretext::pretext::palette::ColorPalette;
use segpretext::pretext::{
    apply_tile_permutation, build_catalogue, hamming, invert_permutation, luminance, make_colorization,
    make_denoising, make_inpainting, make_jigsaw, make_segmentation, noise_field, Meta, PretextConfig,
    PretextContext, Target,
};
use segpretext::{Error, LabelTensor, Task, Tensor};

fn image(seed: u64, h: usize, w: usize) -> Tensor {
    uniform(&mut rng(seed), &[3, h, w], 0.0, 1.0)
}

#[test]
fn inpainting_full_erase_and_guards() {
    let img = image(1, 6, 6);
    let s = make_inpainting(&img, 6, 0.5, &mut rng(0)).unwrap();
    assert!(s.input.data().iter().all(|&v| v == 0.5));
    assert!(s.target.image().unwrap().bit_eq(&img));
    assert!(matches!(make_inpainting(&img, 0, 0.5, &mut rng(0)), Err(Error::Param(_))));
    assert!(matches!(make_inpainting(&img, 7, 0.5, &mut rng(0)), Err(Error::Param(_))));
}

#[test]
fn inpainting_square_replays_from_meta() {
    for seed in 0..50 {
        let img = image(seed, 8, 8);
        let s = make_inpainting(&img, 4, 0.5, &mut rng(seed)).unwrap();
        let Meta::Inpainting { top, left, side } = s.meta else { panic!() };
        assert_eq!(side, 4);
        assert!(top + side <= 8 && left + side <= 8);
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    let inside = (top..top + side).contains(&y) && (left..left + side).contains(&x);
                    let got = s.input.at(&[c, y, x]);
                    if inside {
                        assert_eq!(got, 0.5);
                    } else {
                        assert_eq!(got.to_bits(), img.at(&[c, y, x]).to_bits());
                    }
                }
            }
        }
    }
}

#[test]
fn denoising_contract() {
    let img = image(2, 64, 64);
    let s = make_denoising(&img, 0.0, &mut rng(1)).unwrap();
    assert!(s.input.bit_eq(&img));

    let s = make_denoising(&img, 0.1, &mut rng(1)).unwrap();
    assert!(s.target.image().unwrap().bit_eq(&img));
    let Meta::Denoising { noise_seed, sigma } = s.meta else { panic!() };
    let noise = noise_field(img.shape(), sigma, noise_seed).unwrap();
    // the stored input is the clamped sum of source and replayed noise
    for ((x, n), y) in img.data().iter().zip(noise.data()).zip(s.input.data()) {
        assert_eq!((x + n).clamp(0.0, 1.0).to_bits(), y.to_bits());
    }
    let n = noise.len() as f64;
    let mean = noise.sum() / n;
    let sd = (noise.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!((sd - 0.1).abs() <= 0.005, "empirical sigma {sd}");

    let s = make_denoising(&img, 10.0, &mut rng(1)).unwrap();
    assert!(s.input.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(make_denoising(&img, -1.0, &mut rng(1)).is_err());
}

#[test]
fn colorization_contract() {
    let gray = Tensor::from_fn(&[3, 4, 4], |i| ((i % 16) as f64) / 15.0);
    let lum = luminance(&gray).unwrap();
    assert_eq!(lum.shape(), &[1, 4, 4]);
    for (i, v) in lum.data().iter().enumerate() {
        assert!((v - gray.data()[i]).abs() <= 1e-15);
    }

    let red = Tensor::from_fn(&[3, 4, 4], |i| if i < 16 { 0.9 } else { 0.05 });
    let pal = ColorPalette::build(&[&red], 4, 16).unwrap();
    let red_cell = ColorPalette::lattice_cell([0.9, 0.05, 0.05], 4);
    assert_eq!(pal.centroid(0), ColorPalette::cell_center(red_cell, 4));
    let s = make_colorization(&red, Some(&pal)).unwrap();
    let t = s.target.labels().unwrap();
    assert!(t.data().iter().all(|&k| k == 0));
    assert_eq!(s.input.shape()[0], 1);
    assert_eq!(t.len(), 16);

    assert!(matches!(make_colorization(&red, None), Err(Error::State(_))));
}

#[test]
fn colorization_round_trip_within_a_bin() {
    let corpus: Vec<Tensor> = (0..4).map(|s| image(s, 16, 16)).collect();
    let refs: Vec<&Tensor> = corpus.iter().collect();
    // a palette holding every lattice cell covers every pixel
    let pal = ColorPalette::build(&refs, 4, 64).unwrap();
    for img in &corpus {
        let t = pal.quantize(img).unwrap();
        let plane = 16 * 16;
        for (i, &k) in t.data().iter().enumerate() {
            let c = pal.centroid(k);
            for ch in 0..3 {
                assert!((c[ch] - img.data()[ch * plane + i]).abs() <= pal.bin_width() / 2.0 + 1e-15);
            }
        }
    }
}

#[test]
fn jigsaw_block_copy_oracle() {
    let img = Tensor::from_fn(&[1, 4, 4], |i| i as f64);
    let perm = [2, 0, 3, 1];
    let out = apply_tile_permutation(&img, 2, &perm).unwrap();
    for (pos, &src) in perm.iter().enumerate() {
        let (py, px) = (pos / 2 * 2, pos % 2 * 2);
        let (sy, sx) = (src / 2 * 2, src % 2 * 2);
        for y in 0..2 {
            for x in 0..2 {
                assert_eq!(out.at(&[0, py + y, px + x]), img.at(&[0, sy + y, sx + x]));
            }
        }
    }
    let ident = apply_tile_permutation(&img, 2, &[0, 1, 2, 3]).unwrap();
    assert!(ident.bit_eq(&img));
    assert!(matches!(apply_tile_permutation(&img, 3, &perm), Err(Error::Param(_))));
    assert!(apply_tile_permutation(&img, 2, &[0, 0, 1, 2]).is_err());
}

#[test]
fn jigsaw_sample_target_is_the_permutation() {
    let cat = build_catalogue(3, 64, 5).unwrap();
    let img = image(3, 9, 9);
    let s = make_jigsaw(&img, &cat, &mut rng(8)).unwrap();
    let Meta::Jigsaw { perm_index, perm } = &s.meta else { panic!() };
    assert_eq!(cat.get(*perm_index).unwrap(), perm.as_slice());
    assert_eq!(s.target.labels().unwrap().data(), perm.as_slice());
    let back = apply_tile_permutation(&s.input, 3, &invert_permutation(perm)).unwrap();
    assert!(back.bit_eq(&img));
}

#[test]
fn segmentation_pairs() {
    let img = image(4, 4, 5);
    let mask = LabelTensor::new(&[4, 5], (0..20).map(|i| i % 3).collect()).unwrap();
    let s = make_segmentation(&img, &mask, 3).unwrap();
    assert!(s.input.bit_eq(&img));
    assert_eq!(s.target, Target::Labels(mask.clone()));
    assert!(matches!(make_segmentation(&img, &mask, 2), Err(Error::Data(_))));
    let wrong = LabelTensor::filled(&[5, 4], 0);
    assert!(make_segmentation(&img, &wrong, 3).is_err());
}

#[test]
fn catalogue_small_grids() {
    let one = build_catalogue(2, 1, 0).unwrap();
    assert_eq!(one.perms(), &[vec![0, 1, 2, 3]]);

    let all = build_catalogue(2, 24, 0).unwrap();
    let mut perms = all.perms().to_vec();
    perms.sort();
    perms.dedup();
    assert_eq!(perms.len(), 24);

    let four = build_catalogue(2, 4, 0).unwrap();
    assert_eq!(four.perms()[0], vec![0, 1, 2, 3]);
    for (i, a) in four.perms().iter().enumerate() {
        for b in &four.perms()[i + 1..] {
            assert!(hamming(a, b) >= 3);
        }
    }
    assert!(matches!(build_catalogue(2, 25, 0), Err(Error::Param(_))));
}

#[test]
fn catalogue_default_grid_is_diverse_and_seeded() {
    for (grid, count) in [(3, 64), (4, 64), (3, 72)] {
        let a = build_catalogue(grid, count, 9).unwrap();
        let b = build_catalogue(grid, count, 9).unwrap();
        assert_eq!(a.perms(), b.perms());
        assert_eq!(a.len(), count);
        assert_eq!(a.perms()[0], (0..grid * grid).collect::<Vec<_>>());
        assert!(a.min_pairwise_distance().unwrap() >= grid * grid - 1, "grid {grid} count {count}");
    }
    // past T(T-1) codewords distance T-1 is impossible; still distinct
    let big = build_catalogue(3, 100, 9).unwrap();
    assert!(big.min_pairwise_distance().unwrap() >= 2);
    assert_eq!(big.perms(), build_catalogue(3, 100, 9).unwrap().perms());
}

#[test]
fn context_transforms_need_preparation() {
    let ctx = PretextContext::new(PretextConfig::default()).unwrap();
    let img = image(1, 9, 9);
    assert!(matches!(ctx.transform(Task::Jigsaw, &img, &mut rng(0)), Err(Error::State(_))));
    assert!(matches!(ctx.transform(Task::Colorization, &img, &mut rng(0)), Err(Error::State(_))));
    let bad = PretextConfig {
        noise_sigma: -0.1,
        ..PretextConfig::default()
    };
    assert!(PretextContext::new(bad).is_err());
}

fn prepared() -> PretextContext {
    let mut ctx = PretextContext::new(PretextConfig::default()).unwrap();
    let corpus: Vec<Tensor> = (0..3).map(|s| image(100 + s, 12, 12)).collect();
    let refs: Vec<&Tensor> = corpus.iter().collect();
    ctx.prepare(&Task::PRETEXT, &refs, 3).unwrap();
    ctx
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn transforms_are_pure_functions_of_image_seed_config(img_seed in any::<u64>(), seed in any::<u64>()) {
        let ctx = prepared();
        let img = image(img_seed, 12, 12);
        for t in Task::PRETEXT {
            let a = ctx.transform(t, &img, &mut rng(seed)).unwrap();
            let b = ctx.transform(t, &img, &mut rng(seed)).unwrap();
            prop_assert!(a.input.bit_eq(&b.input));
            prop_assert_eq!(&a.meta, &b.meta);
            prop_assert_eq!(&a.target, &b.target);
            prop_assert!(a.input.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn jigsaw_preserves_the_pixel_multiset(img_seed in any::<u64>(), seed in any::<u64>()) {
        let ctx = prepared();
        let img = image(img_seed, 12, 12);
        let s = ctx.transform(Task::Jigsaw, &img, &mut rng(seed)).unwrap();
        let mut a: Vec<u64> = img.data().iter().map(|v| v.to_bits()).collect();
        let mut b: Vec<u64> = s.input.data().iter().map(|v| v.to_bits()).collect();
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);
        let mut t = s.target.labels().unwrap().data().to_vec();
        t.sort_unstable();
        prop_assert_eq!(t, (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn inpainting_keeps_outside_pixels(img_seed in any::<u64>(), seed in any::<u64>(), side in 1usize..10) {
        let img = image(img_seed, 10, 10);
        let s = make_inpainting(&img, side, 0.5, &mut rng(seed)).unwrap();
        let Meta::Inpainting { top, left, .. } = s.meta else { unreachable!() };
        let changed = img.data().iter().zip(s.input.data()).enumerate().filter(|(i, (a, b))| {
            let (y, x) = ((i / 10) % 10, i % 10);
            let inside = (top..top + side).contains(&y) && (left..left + side).contains(&x);
            !inside && a.to_bits() != b.to_bits()
        }).count();
        prop_assert_eq!(changed, 0);
    }

    #[test]
    fn colorization_histogram_covers_every_pixel(img_seed in any::<u64>(), h in 1usize..10, w in 1usize..10) {
        let ctx = prepared();
        let img = image(img_seed, h, w);
        let s = ctx.transform(Task::Colorization, &img, &mut rng(0)).unwrap();
        prop_assert_eq!(s.input.shape(), &[1, h, w]);
        let labels = s.target.labels().unwrap();
        let mut hist = [0usize; 16];
        for &k in labels.data() {
            hist[k] += 1;
        }
        prop_assert_eq!(hist.iter().sum::<usize>(), h * w);
    }

    #[test]
    fn tile_permutation_inverse_restores(seed in any::<u64>(), grid in 1usize..5) {
        let mut r = rng(seed);
        let img = image(seed, grid * 3, grid * 2);
        let mut perm: Vec<usize> = (0..grid * grid).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, r.gen_range(0..=i));
        }
        let shuffled = apply_tile_permutation(&img, grid, &perm).unwrap();
        let back = apply_tile_permutation(&shuffled, grid, &invert_permutation(&perm)).unwrap();
        prop_assert!(back.bit_eq(&img));
    }
}
