use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sucode_core::config::ModelConfig;
use sucode_core::nn::*;
use sucode_core::params::{Binder, ParamMap};
use sucode_tensor::gradcheck::{all_samples, check};
use sucode_tensor::{Graph, Tensor, Var};

fn model() -> ModelConfig {
    ModelConfig {
        class_count: 3,
        codebook_entries: 32,
        embed_dim: 16,
        image_size: 64,
        downsample_factor: 8,
        channels: vec![8, 16, 32, 32],
        res_blocks: 1,
        disc_channels: 16,
        window_size: 4,
        attn_heads: 2,
        faff_every_scale: true,
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn project<'g>(y: Var<'g>) -> Var<'g> {
    let w = Tensor::from_fn(&y.shape(), |i| ((i * 37 + 11) % 17) as f64 / 17.0 - 0.4);
    y.mul(&y.graph().constant(w)).sum_all()
}

/// Perturbs every stored array so that zero-initialized layers take part.
fn jitter(store: &mut ParamMap, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for e in store.values_mut() {
        for v in e.tensor.data_mut() {
            *v += rng.gen_range(-scale..scale);
        }
    }
}

#[test]
fn encoder_and_decoders_have_the_documented_shapes() {
    let m = model();
    let mut store = ParamMap::new();
    let g = Graph::new();
    let b = Binder::frozen(&g, &mut store).creating(1, 1);
    let x = g.constant(Tensor::full(&[2, 32, 16, 3], 0.5));
    let z = encode(&b, "enc_q", &x, &m).unwrap();
    assert_eq!(z.shape(), vec![2, 4, 2, m.embed_dim]);
    assert_eq!(decode_q(&b, &z, &m).unwrap().shape(), vec![2, 32, 16, 3]);
    let (img, taps) = decode_r(&b, &z, &m).unwrap();
    assert_eq!(img.shape(), vec![2, 32, 16, 3]);
    let sizes: Vec<_> = taps.iter().map(|t| (t.shape()[1], t.shape()[2], t.shape()[3])).collect();
    assert_eq!(sizes, vec![(4, 2, 32), (8, 4, 32), (16, 8, 16)]);
    assert_eq!(decode_e(&b, &z, &taps, &m).unwrap().shape(), vec![2, 32, 16, 3]);
    assert_eq!(decode_e(&b, &z, &taps[..2], &m).unwrap_err().name(), "ShapeError");
    assert_eq!(discriminate(&b, &x, m.disc_channels).unwrap().shape(), vec![2, 2, 1, 1]);
}

#[test]
fn indivisible_inputs_are_shape_errors() {
    let m = model();
    let mut store = ParamMap::new();
    let g = Graph::new();
    let b = Binder::frozen(&g, &mut store).creating(1, 1);
    let x = g.constant(Tensor::zeros(&[1, 20, 16, 3]));
    assert_eq!(encode(&b, "enc_q", &x, &m).unwrap_err().name(), "ShapeError");
    assert_eq!(discriminate(&b, &x, 4).unwrap_err().name(), "ShapeError");
    let gray = g.constant(Tensor::zeros(&[1, 16, 16, 1]));
    assert_eq!(encode(&b, "enc_q", &gray, &m).unwrap_err().name(), "ShapeError");
}

#[test]
fn spectral_split_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for &(h, w) in &[(4, 4), (5, 6), (3, 7), (1, 1)] {
        let f = rand_tensor(&mut rng, &[h, w, 3], -2.0, 2.0);
        let s = spectral_decompose(&f).unwrap();
        assert_eq!(s.magnitude.shape(), &[h, w / 2 + 1, 3]);
        assert!(s.magnitude.data().iter().all(|&a| a >= 0.0));
        let back = spectral_reconstruct(&s, (h, w)).unwrap();
        assert!(back.max_abs_diff(&f) < 1e-10, "{h}x{w}");
    }
    let f = rand_tensor(&mut rng, &[2, 4, 6, 2], -1.0, 1.0);
    let back = spectral_reconstruct(&spectral_decompose(&f).unwrap(), (4, 6)).unwrap();
    assert!(back.max_abs_diff(&f) < 1e-10);
}

#[test]
fn spectral_reconstruction_checks_the_target() {
    let s = spectral_decompose(&Tensor::zeros(&[4, 4, 1])).unwrap();
    assert_eq!(spectral_reconstruct(&s, (4, 8)).unwrap_err().name(), "ShapeError");
    let bad = SpectralPair { magnitude: s.magnitude.clone(), phase: Tensor::zeros(&[4, 2, 1]) };
    assert!(spectral_reconstruct(&bad, (4, 4)).is_err());
}

#[test]
fn constant_map_has_only_a_dc_term() {
    let s = spectral_decompose(&Tensor::full(&[4, 4, 1], 0.25)).unwrap();
    assert!((s.magnitude.data()[0] - 4.0).abs() < 1e-12);
    assert!(s.magnitude.data()[1..].iter().all(|a| a.abs() < 1e-12));
}

#[test]
fn fresh_fusion_block_passes_the_enhancement_feature_through() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let fr = rand_tensor(&mut rng, &[1, 4, 4, 4], -1.0, 1.0);
    let fe = rand_tensor(&mut rng, &[1, 4, 4, 4], -1.0, 1.0);
    let mut store = ParamMap::new();
    let g = Graph::new();
    let b = Binder::frozen(&g, &mut store).creating(5, 3);
    let t = faff_traced(&b, "faff/0", &g.constant(fr), &g.constant(fe.clone()), false).unwrap();
    // gamma starts at zero: the frequency branch has no effect yet.
    assert!(t.f_fus.value().bit_eq(&t.f_in.value()));
    assert!(t.out.value().max_abs_diff(&fe) < 1e-12);
    assert!(t.phase_reconstruct.value().bit_eq(&t.phase.value()));
}

#[test]
fn identity_magnitude_recovers_the_normalized_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let fr = rand_tensor(&mut rng, &[2, 4, 6, 4], -1.0, 1.0);
    let fe = rand_tensor(&mut rng, &[2, 4, 6, 4], -1.0, 1.0);
    let mut store = ParamMap::new();
    let g = Graph::new();
    let b = Binder::frozen(&g, &mut store).creating(5, 3);
    let t = faff_traced(&b, "faff/0", &g.constant(fr), &g.constant(fe), true).unwrap();
    assert!(t.f_freq.value().max_abs_diff(&t.f_in.value()) < 1e-10);
}

#[test]
fn fusion_rejects_mismatched_inputs() {
    let mut store = ParamMap::new();
    let g = Graph::new();
    let b = Binder::frozen(&g, &mut store).creating(5, 3);
    let a = g.constant(Tensor::zeros(&[1, 4, 4, 4]));
    let c = g.constant(Tensor::zeros(&[1, 4, 4, 8]));
    assert_eq!(faff(&b, "faff/0", &a, &c).unwrap_err().name(), "ShapeError");
}

#[test]
fn class_weights_are_a_distribution_per_location() {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamMap::new();
    let g = Graph::new();
    let b = Binder::frozen(&g, &mut store).creating(6, 2);
    for &(h, w) in &[(8, 8), (4, 8), (2, 2)] {
        let z = g.constant(rand_tensor(&mut rng, &[2, h, w, m.embed_dim], -3.0, 3.0));
        let wts = weight_predict(&b, &z, &m).unwrap();
        assert_eq!(wts.shape(), vec![2, h, w, m.class_count]);
        for px in wts.value().data().chunks_exact(m.class_count) {
            assert!(px.iter().all(|&p| p >= 0.0));
            assert!((px.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
    let z = g.constant(Tensor::zeros(&[1, 6, 8, m.embed_dim]));
    assert_eq!(weight_predict(&b, &z, &m).unwrap_err().name(), "ShapeError");
}

#[test]
fn relative_position_table_is_consistent() {
    for ws in 1..6 {
        let idx = relative_position_index(ws);
        let t = ws * ws;
        let span = 2 * ws - 1;
        assert_eq!(idx.len(), t * t);
        assert!(idx.iter().all(|&i| i < span * span));
        for q in 0..t {
            assert_eq!(idx[q * t + q], (ws - 1) * span + ws - 1);
            for k in 0..t {
                // Reversing the pair mirrors the offset through the centre.
                assert_eq!(idx[q * t + k] + idx[k * t + q], 2 * ((ws - 1) * span + ws - 1));
            }
        }
    }
}

#[test]
fn gated_block_with_zero_projection_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[1, 4, 4, 8], -1.0, 1.0);
    let mut store = ParamMap::new();
    {
        let g = Graph::new();
        let b = Binder::frozen(&g, &mut store).creating(7, 2);
        gcam(&b, "gcam/0", &g.constant(x.clone())).unwrap();
    }
    for name in ["gcam/0/proj/w", "gcam/0/proj/b"] {
        store.get_mut(name).unwrap().tensor.data_mut().fill(0.0);
    }
    let g = Graph::new();
    let b = Binder::frozen(&g, &mut store);
    assert!(gcam(&b, "gcam/0", &g.constant(x.clone())).unwrap().value().bit_eq(&x));
}

fn created<F>(seed: u64, build: F) -> ParamMap
where
    F: for<'g> Fn(&Binder<'g, '_>, &'g Graph),
{
    let mut store = ParamMap::new();
    {
        let g = Graph::new();
        let b = Binder::frozen(&g, &mut store).creating(seed, 1);
        build(&b, &g);
    }
    jitter(&mut store, seed, 0.2);
    store
}

#[test]
fn fusion_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let inputs = [rand_tensor(&mut rng, &[1, 4, 4, 2], -1.0, 1.0), rand_tensor(&mut rng, &[1, 4, 4, 2], -1.0, 1.0)];
    let store = created(8, |b, g| {
        let z = g.constant(Tensor::zeros(&[1, 4, 4, 2]));
        faff(b, "faff/0", &z, &z).unwrap();
    });
    let report = check(
        |g, v| {
            let mut s = store.clone();
            let b = Binder::frozen(g, &mut s);
            project(faff(&b, "faff/0", &v[0], &v[1]).unwrap())
        },
        &inputs,
        &all_samples(&inputs),
        1e-5,
        1e-4,
    );
    assert!(report.passed(1e-5), "{report:?}");
}

#[test]
fn gated_block_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let inputs = [rand_tensor(&mut rng, &[1, 3, 3, 4], -1.0, 1.0)];
    let store = created(9, |b, g| {
        gcam(b, "gcam/0", &g.constant(Tensor::zeros(&[1, 3, 3, 4]))).unwrap();
    });
    let report = check(
        |g, v| {
            let mut s = store.clone();
            let b = Binder::frozen(g, &mut s);
            project(gcam(&b, "gcam/0", &v[0]).unwrap())
        },
        &inputs,
        &all_samples(&inputs),
        1e-5,
        1e-4,
    );
    assert!(report.passed(1e-5), "{report:?}");
}

#[test]
fn weight_predictor_gradients_match_finite_differences() {
    let mut m = model();
    m.embed_dim = 4;
    m.window_size = 2;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let inputs = [rand_tensor(&mut rng, &[1, 2, 4, 4], -1.0, 1.0)];
    let mc = m.clone();
    let store = created(10, move |b, g| {
        weight_predict(b, &g.constant(Tensor::zeros(&[1, 2, 4, 4])), &mc).unwrap();
    });
    let report = check(
        |g, v| {
            let mut s = store.clone();
            let b = Binder::frozen(g, &mut s);
            project(weight_predict(&b, &v[0], &m).unwrap())
        },
        &inputs,
        &all_samples(&inputs),
        1e-5,
        1e-4,
    );
    assert!(report.passed(1e-5), "{report:?}");
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let mut m = model();
    m.downsample_factor = 2;
    m.channels = vec![4, 4];
    m.embed_dim = 2;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs = [rand_tensor(&mut rng, &[1, 4, 4, 3], 0.0, 1.0)];
    let mc = m.clone();
    let store = created(11, move |b, g| {
        encode(b, "enc_q", &g.constant(Tensor::zeros(&[1, 4, 4, 3])), &mc).unwrap();
    });
    let samples: Vec<(usize, usize)> = (0..48).step_by(5).map(|i| (0, i)).collect();
    let report = check(
        |g, v| {
            let mut s = store.clone();
            let b = Binder::frozen(g, &mut s);
            project(encode(&b, "enc_q", &v[0], &m).unwrap())
        },
        &inputs,
        &samples,
        1e-5,
        1e-4,
    );
    assert!(report.passed(1e-5), "{report:?}");
}

#[test]
fn parameters_are_reused_by_name() {
    let m = model();
    let mut store = ParamMap::new();
    let g = Graph::new();
    let b = Binder::frozen(&g, &mut store).creating(1, 1);
    let x = g.constant(Tensor::full(&[1, 16, 16, 3], 0.3));
    let a = encode(&b, "enc_q", &x, &m).unwrap();
    let n = b.bound_names().len();
    let c = encode(&b, "enc_q", &x, &m).unwrap();
    assert_eq!(b.bound_names().len(), n);
    assert!(a.value().bit_eq(&c.value()));
}
