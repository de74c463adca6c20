use std::fs;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sucode_core::data::{save_image, ImageTensor};
use sucode_core::metrics::*;
use sucode_tensor::Tensor;

fn image(h: usize, w: usize, f: impl FnMut(usize) -> f64) -> ImageTensor {
    ImageTensor::new(Tensor::from_fn(&[h, w, 3], f)).unwrap()
}

fn noise(seed: u64, h: usize, w: usize) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    image(h, w, |_| rng.gen_range(0.0..1.0))
}

/// Windowed SSIM evaluated directly at every valid position with a 2-D
/// Gaussian, no separable filtering.
fn ssim_oracle(a: &ImageTensor, b: &ImageTensor) -> f64 {
    let (h, w) = (a.height(), a.width());
    let luma = |img: &ImageTensor, y: usize, x: usize| 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2);
    let n = 11;
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
            k[i * n + j] = (-(dy * dy + dx * dx) / (2.0 * 1.5 * 1.5)).exp();
        }
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for y0 in 0..=h - n {
        for x0 in 0..=w - n {
            let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    let wt = k[i * n + j];
                    let (p, q) = (luma(a, y0 + i, x0 + j), luma(b, y0 + i, x0 + j));
                    ma += wt * p;
                    mb += wt * q;
                    aa += wt * p * p;
                    bb += wt * q * q;
                    ab += wt * p * q;
                }
            }
            let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    total / ((h - n + 1) * (w - n + 1)) as f64
}

#[test]
fn psnr_closed_forms() {
    let a = image(4, 4, |_| 0.5);
    let b = image(4, 4, |_| 0.6);
    assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
    assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP);
    let c = image(4, 4, |_| 0.5 + 1e-7);
    assert_eq!(psnr(&a, &c, 1.0).unwrap(), PSNR_CAP);
    assert!((psnr(&a, &b, 255.0).unwrap() - (20.0 + 20.0 * 255f64.log10())).abs() < 1e-9);
    assert_eq!(psnr(&a, &image(4, 5, |_| 0.5), 1.0).unwrap_err().name(), "ShapeError");
}

#[test]
fn ssim_matches_direct_windowed_oracle() {
    for seed in 0..4 {
        let a = noise(seed, 16, 19);
        let b = noise(seed + 100, 16, 19);
        let blend = image(16, 19, |i| 0.7 * a.tensor().data()[i] + 0.3 * b.tensor().data()[i]);
        for (x, y) in [(&a, &b), (&a, &blend)] {
            assert!((ssim(x, y).unwrap() - ssim_oracle(x, y)).abs() < 1e-12);
        }
    }
}

#[test]
fn ssim_identity_and_errors() {
    let a = noise(1, 12, 12);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(ssim(&noise(1, 8, 8), &noise(2, 8, 8)).unwrap_err().name(), "ShapeError");
}

#[test]
fn lab_anchors() {
    let white = srgb_to_lab([1.0, 1.0, 1.0]);
    assert!((white[0] - 100.0).abs() < 1e-9 && white[1].abs() < 1e-9 && white[2].abs() < 1e-9);
    assert_eq!(srgb_to_lab([0.0, 0.0, 0.0]), [0.0, 0.0, 0.0]);
    let gray = srgb_to_lab([0.3, 0.3, 0.3]);
    assert!(gray[1].abs() < 1e-9 && gray[2].abs() < 1e-9);
    // Reference values for sRGB red under D65.
    let red = srgb_to_lab([1.0, 0.0, 0.0]);
    assert!((red[0] - 53.24).abs() < 0.05);
    assert!((red[1] - 80.09).abs() < 0.1);
    assert!((red[2] - 67.20).abs() < 0.1);
}

#[test]
fn uciqe_closed_forms() {
    assert!(uciqe(&image(10, 10, |_| 0.4)).abs() < 1e-12);
    // Left half black, right half white: only the lightness contrast term.
    let bw = image(10, 10, |i| if (i / 3) % 10 >= 5 { 1.0 } else { 0.0 });
    assert!((uciqe(&bw) - UCIQE_COEFFS[1]).abs() < 1e-9);
    let img = noise(3, 10, 10);
    assert!((uciqe_scaled(&img, true) - 100.0 * uciqe(&img)).abs() < 1e-9);
    assert_eq!(uciqe_scaled(&img, false), uciqe(&img));
}

#[test]
fn uciqe_saturation_of_a_flat_colour() {
    let rgb = [0.2, 0.5, 0.8];
    let img = image(10, 10, |i| rgb[i % 3]);
    let lab = srgb_to_lab(rgb);
    let expected = UCIQE_COEFFS[2] * lab[1].hypot(lab[2]) / lab[0];
    assert!((uciqe(&img) - expected).abs() < 1e-9);
}

/// Colorfulness computed from sorted opponent values with the trim counts
/// written out explicitly.
fn uicm_oracle(img: &ImageTensor) -> f64 {
    let d = img.tensor().data();
    let rg: Vec<f64> = d.chunks(3).map(|p| 255.0 * (p[0] - p[1])).collect();
    let yb: Vec<f64> = d.chunks(3).map(|p| 255.0 * ((p[0] + p[1]) / 2.0 - p[2])).collect();
    let trimmed = |v: &[f64]| {
        let mut s = v.to_vec();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let k = s.len() as f64;
        let (lo, hi) = ((0.1 * k).ceil() as usize, (0.1 * k).floor() as usize);
        let kept = &s[lo..s.len() - hi];
        kept.iter().sum::<f64>() / kept.len() as f64
    };
    let (mr, my) = (trimmed(&rg), trimmed(&yb));
    let var = |v: &[f64], m: f64| v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
    -0.0268 * (mr * mr + my * my).sqrt() + 0.1586 * (var(&rg, mr) + var(&yb, my)).sqrt()
}

#[test]
fn uicm_matches_oracle_and_vanishes_on_gray() {
    assert!(uicm(&image(5, 5, |_| 0.3)).abs() < 1e-12);
    for (seed, h, w) in [(1, 3, 5), (2, 8, 8), (3, 1, 7)] {
        let img = noise(seed, h, w);
        assert!((uicm(&img) - uicm_oracle(&img)).abs() < 1e-9);
    }
    let flat = image(4, 4, |i| [0.6, 0.2, 0.1][i % 3]);
    let (rg, yb) = (255.0 * 0.4, 255.0 * 0.3);
    assert!((uicm(&flat) + 0.0268 * f64::hypot(rg, yb)).abs() < 1e-9);
}

#[test]
fn flat_images_have_no_sharpness_or_contrast() {
    let img = image(16, 16, |i| [0.6, 0.2, 0.1][i % 3]);
    assert_eq!(uism(&img), 0.0);
    // Blocks span the channels, so a flat colour still has contrast 0.5/0.7.
    let r: f64 = 0.5 / 0.7;
    assert!((uiconm(&img) + r * r.ln()).abs() < 1e-12);
    assert_eq!(uiconm(&image(16, 16, |_| 0.4)), 0.0);
    assert_eq!(uism(&image(7, 7, |i| (i % 5) as f64 / 5.0)), 0.0);
}

#[test]
fn contrast_of_a_two_level_block() {
    let lo = 64.0 / 255.0;
    let hi = 192.0 / 255.0;
    let img = image(8, 8, |i| if (i / 3) % 2 == 0 { lo } else { hi });
    assert!((uiconm(&img) - (-0.5 * 0.5f64.ln())).abs() < 1e-9);
    let bw = image(8, 8, |i| if (i / 3) % 2 == 0 { 0.0 } else { 1.0 });
    assert_eq!(uiconm(&bw), 0.0);
}

#[test]
fn sharpness_of_a_vertical_edge() {
    // Sobel is nonzero only beside the edge, so the block minimum is 0 and
    // the block is skipped.
    let img = image(8, 8, |i| if (i / 3) % 8 < 4 { 0.25 } else { 0.75 });
    assert_eq!(uism(&img), 0.0);
}

#[test]
fn uiqm_combines_its_parts() {
    let img = noise(9, 16, 16);
    let p = uiqm_parts(&img);
    let [c1, c2, c3] = UIQM_COEFFS;
    assert!((uiqm(&img) - (c1 * p.uicm + c2 * p.uism + c3 * p.uiconm)).abs() < 1e-12);
    assert!(p.uism > 0.0 && p.uiconm > 0.0);
}

#[test]
fn dataset_evaluation_writes_means_and_reports_errors() {
    let d = tempfile::tempdir().unwrap();
    let (pred, refd) = (d.path().join("pred"), d.path().join("ref"));
    fs::create_dir_all(&pred).unwrap();
    fs::create_dir_all(&refd).unwrap();
    assert_eq!(evaluate_dataset(&pred, None).unwrap_err().name(), "EvalEmptyError");
    for i in 0..3u64 {
        let a = noise(i, 16, 16);
        save_image(&a, &pred.join(format!("{i}.png"))).unwrap();
        save_image(&a, &refd.join(format!("{i}.png"))).unwrap();
    }
    let report = evaluate_dataset(&pred, Some(&refd)).unwrap();
    assert_eq!(report.rows.len(), 3);
    assert_eq!(report.mean.psnr, Some(PSNR_CAP));
    let mean_uiqm = report.rows.iter().map(|r| r.uiqm).sum::<f64>() / 3.0;
    assert!((report.mean.uiqm - mean_uiqm).abs() < 1e-12);
    let csv = report.to_csv();
    assert!(csv.starts_with("id,psnr,ssim,uciqe,uiqm\n"));
    assert!(csv.lines().last().unwrap().starts_with("mean,"));
    let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 3);

    let no_ref = evaluate_dataset(&pred, None).unwrap();
    assert!(!no_ref.has_reference());
    assert!(no_ref.to_csv().starts_with("id,uciqe,uiqm\n"));
    let scaled = no_ref.clone().with_scaled_uciqe().with_scaled_uciqe();
    assert!((scaled.mean.uciqe - 100.0 * no_ref.mean.uciqe).abs() < 1e-9);

    fs::remove_file(refd.join("1.png")).unwrap();
    assert_eq!(evaluate_dataset(&pred, Some(&refd)).unwrap_err().name(), "SampleInvalid");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn metric_ranges(seed in any::<u64>()) {
        let a = noise(seed, 12, 12);
        let b = noise(seed ^ 0xdead, 12, 12);
        prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        let s = ssim(&a, &b).unwrap();
        prop_assert!(s <= 1.0 + 1e-12 && s >= -1.0);
        prop_assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(uciqe(&a) >= 0.0);
        prop_assert!(uiconm(&a) >= 0.0);
    }
}
