use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sucode_core::config::PerceptualConfig;
use sucode_core::losses::*;
use sucode_tensor::gradcheck::{all_samples, check};
use sucode_tensor::{Graph, Tensor};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.numel() as f64
}

#[test]
fn pixel_loss_is_mean_absolute_difference() {
    let g = Graph::new();
    let a = g.constant(Tensor::new(&[4], vec![0.0, 1.0, 0.5, 0.2]));
    let b = g.constant(Tensor::new(&[4], vec![1.0, 1.0, 0.0, 0.4]));
    assert!((pixel_l1(&a, &b).unwrap().item() - 1.7 / 4.0).abs() < 1e-12);
    let c = g.constant(Tensor::zeros(&[3]));
    assert_eq!(pixel_l1(&a, &c).unwrap_err().name(), "ShapeError");
}

#[test]
fn vq_terms_match_closed_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (z, q) = (rand_tensor(&mut rng, &[1, 2, 2, 3]), rand_tensor(&mut rng, &[1, 2, 2, 3]));
    let (p, f) = (rand_tensor(&mut rng, &[1, 1, 1, 5]), rand_tensor(&mut rng, &[1, 1, 1, 5]));
    let g = Graph::new();
    let t = vq_loss(&g.constant(z.clone()), &g.constant(q.clone()), &g.constant(p.clone()), &g.constant(f.clone()), 0.25, 0.1).unwrap();
    let d = mse(&z, &q);
    assert!((t.codebook.item() - d).abs() < 1e-12);
    assert!((t.commit.item() - d).abs() < 1e-12);
    assert!((t.semantic.item() - mse(&p, &f)).abs() < 1e-12);
    assert!((t.total.item() - (d + 0.25 * d + 0.1 * mse(&p, &f))).abs() < 1e-12);
}

/// Each term must update only the side it is meant to: the codebook term
/// moves the codes, the commitment term the encoder output, the semantic term
/// the projection. Checked against finite differences of the matching
/// closed form with the other side held fixed.
#[test]
fn vq_gradients_route_through_stop_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z = rand_tensor(&mut rng, &[1, 2, 2, 2]);
    let q = rand_tensor(&mut rng, &[1, 2, 2, 2]);
    let p = rand_tensor(&mut rng, &[1, 1, 1, 3]);
    let f = rand_tensor(&mut rng, &[1, 1, 1, 3]);
    let (beta, ls) = (0.25, 0.7);
    let g = Graph::new();
    let (zv, qv, pv, fv) = (g.param(z.clone()), g.param(q.clone()), g.param(p.clone()), g.param(f.clone()));
    let t = vq_loss(&zv, &qv, &pv, &fv, beta, ls).unwrap();
    let grads = g.backward(t.total);
    assert!(grads.get_or_zeros(fv).data().iter().all(|&v| v == 0.0));

    let fd = |which: usize, t: &Tensor| -> Tensor {
        let h = 1e-6;
        Tensor::from_fn(t.shape(), |i| {
            let mut plus = t.clone();
            let mut minus = t.clone();
            plus.data_mut()[i] += h;
            minus.data_mut()[i] -= h;
            let value = |x: &Tensor| match which {
                0 => beta * mse(x, &q),
                1 => mse(&z, x),
                _ => ls * mse(x, &f),
            };
            (value(&plus) - value(&minus)) / (2.0 * h)
        })
    };
    assert!(grads.get_or_zeros(zv).max_abs_diff(&fd(0, &z)) < 1e-8);
    assert!(grads.get_or_zeros(qv).max_abs_diff(&fd(1, &q)) < 1e-8);
    assert!(grads.get_or_zeros(pv).max_abs_diff(&fd(2, &p)) < 1e-8);
}

#[test]
fn code_loss_moves_only_the_raw_latent() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (a, b) = (rand_tensor(&mut rng, &[1, 2, 2, 4]), rand_tensor(&mut rng, &[1, 2, 2, 4]));
    let g = Graph::new();
    let (av, bv) = (g.param(a.clone()), g.param(b.clone()));
    let l = code_loss(&av, &bv, 0.25).unwrap();
    assert!((l.item() - 0.25 * mse(&a, &b)).abs() < 1e-12);
    let grads = g.backward(l);
    assert!(grads.get_or_zeros(bv).data().iter().all(|&v| v == 0.0));
    let expected = Tensor::from_fn(a.shape(), |i| 0.25 * 2.0 * (a.data()[i] - b.data()[i]) / a.numel() as f64);
    assert!(grads.get_or_zeros(av).max_abs_diff(&expected) < 1e-12);
}

#[test]
fn adversarial_losses_at_zero_logits() {
    let g = Graph::new();
    let z = g.constant(Tensor::zeros(&[2, 1, 1, 1]));
    let (gen, disc) = adversarial_losses(&z, &z).unwrap();
    assert!((gen.item() - 2f64.ln()).abs() < 1e-12);
    assert!((disc.item() - 2.0 * 2f64.ln()).abs() < 1e-12);
    // Confident, correct discriminator: generator loss large, own loss small.
    let fake = g.constant(Tensor::full(&[1, 1, 1, 1], -20.0));
    let real = g.constant(Tensor::full(&[1, 1, 1, 1], 20.0));
    let (gen, disc) = adversarial_losses(&fake, &real).unwrap();
    assert!(gen.item() > 19.0);
    assert!(disc.item() < 1e-8);
}

#[test]
fn adversarial_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = [rand_tensor(&mut rng, &[1, 2, 2, 1]), rand_tensor(&mut rng, &[1, 2, 2, 1])];
    let report = check(
        |_, v| {
            let (gen, disc) = adversarial_losses(&v[0], &v[1]).unwrap();
            gen.add(&disc.mul_scalar(0.3))
        },
        &inputs,
        &all_samples(&inputs),
        1e-5,
        1e-4,
    );
    assert!(report.passed(1e-6), "{report:?}");
}

fn small_phi() -> PerceptualExtractor {
    PerceptualExtractor::random(&PerceptualConfig { channels: vec![4, 6, 6], stage_weights: vec![1.0, 0.5, 0.25], ..Default::default() })
}

#[test]
fn perceptual_pyramid_keeps_then_halves_resolution() {
    let phi = small_phi();
    let g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 16, 16, 3], 0.5));
    let shapes: Vec<_> = phi.features(&x).iter().map(|f| f.shape()).collect();
    assert_eq!(shapes, vec![vec![1, 16, 16, 4], vec![1, 8, 8, 6], vec![1, 4, 4, 6]]);
    assert_eq!(phi.deepest_channels(), 6);
    assert_eq!(phi.stage_count(), 3);
}

#[test]
fn perceptual_loss_is_zero_only_for_equal_images() {
    let phi = small_phi();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = Tensor::from_fn(&[1, 8, 8, 3], |_| rng.gen_range(0.0..1.0));
    let b = Tensor::from_fn(&[1, 8, 8, 3], |_| rng.gen_range(0.0..1.0));
    let same = eval_scalar(|g| perceptual_loss(&g.constant(a.clone()), &g.constant(a.clone()), &phi)).unwrap();
    let diff = eval_scalar(|g| perceptual_loss(&g.constant(a.clone()), &g.constant(b.clone()), &phi)).unwrap();
    assert_eq!(same, 0.0);
    assert!(diff > 0.0);
    assert_eq!(small_phi(), phi);
}

fn full() -> LossComponents {
    LossComponents {
        pixel: Some(0.1),
        perceptual: Some(0.2),
        adversarial: Some(0.7),
        vq: Some(0.05),
        code: Some(0.3),
        vq_commit: 0.01,
        vq_codebook: 0.02,
        vq_semantic: 0.03,
    }
}

#[test]
fn stage_totals_combine_the_right_terms() {
    let r1 = stage_total(1, &full(), 0.1).unwrap();
    assert!((r1.total - (0.1 + 0.2 + 0.07 + 0.05)).abs() < 1e-12);
    assert_eq!(r1.code, 0.0);
    assert_eq!(r1.vq_semantic, 0.03);
    let r3 = stage_total(3, &full(), 0.1).unwrap();
    assert!((r3.total - (0.1 + 0.2 + 0.07 + 0.3)).abs() < 1e-12);
    assert_eq!(r3.vq_commit, 0.0);
}

#[test]
fn missing_terms_are_loss_spec_errors() {
    let mut c = full();
    c.vq = None;
    assert_eq!(stage_total(2, &c, 0.1).unwrap_err().name(), "LossSpecError");
    assert!(stage_total(3, &c, 0.1).is_ok());
    let mut c = full();
    c.code = None;
    assert_eq!(stage_total(3, &c, 0.1).unwrap_err().name(), "LossSpecError");
    let mut c = full();
    c.pixel = None;
    assert!(stage_total(1, &c, 0.1).is_err());
    assert!(stage_total(4, &full(), 0.1).is_err());
}

#[test]
fn report_rows_follow_the_header() {
    let r = stage_total(1, &full(), 0.1).unwrap();
    let row = r.csv_row(7, 1);
    assert_eq!(row.split(',').count(), METRICS_HEADER.split(',').count());
    assert!(row.starts_with("7,1,0.1,0.2,0.7,"));
}
