use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sucode_core::data::SemanticMask;
use sucode_core::quantizer::*;
use sucode_tensor::{Graph, Tensor};

/// Straight-line nearest entry: first strictly smaller squared distance wins.
fn brute_nearest(f: &[f64], book: &[f64]) -> usize {
    let d = f.len();
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for j in 0..book.len() / d {
        let mut s = 0.0;
        for k in 0..d {
            let t = f[k] - book[j * d + k];
            s += t * t;
        }
        if s < best_d {
            best_d = s;
            best = j;
        }
    }
    best
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

#[test]
fn quantizers_match_brute_force_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..200 {
        let (h, w) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let (c, n, d) = (rng.gen_range(1..=4), rng.gen_range(1..=16), rng.gen_range(1..=8));
        let books = CodebookSet::new(random_tensor(&mut rng, &[c, n, d])).unwrap();
        let z = random_tensor(&mut rng, &[h, w, d]);
        let labels: Vec<u32> = (0..h * w).map(|_| rng.gen_range(0..c as u32)).collect();
        let mask = SemanticMask::new(h, w, labels.clone()).unwrap();
        let q = quantize_with_mask(&z, &mask, &books).unwrap();
        for (loc, f) in z.data().chunks_exact(d).enumerate() {
            let cls = labels[loc] as usize;
            let j = brute_nearest(f, books.book(cls));
            assert_eq!(q.indices[loc], j);
            assert_eq!(&q.z_q.data()[loc * d..(loc + 1) * d], books.entry(cls, j));
        }
        let per = quantize_per_class(&z, &books).unwrap();
        assert_eq!(per.len(), c);
        for (cls, map) in per.iter().enumerate() {
            for (loc, f) in z.data().chunks_exact(d).enumerate() {
                let j = brute_nearest(f, books.book(cls));
                assert_eq!(&map.data()[loc * d..(loc + 1) * d], books.entry(cls, j));
            }
        }
    }
}

#[test]
fn ties_resolve_to_lowest_index() {
    let book = [1.0, 0.0, -1.0, 0.0, 1.0, 0.0];
    assert_eq!(nearest_index(&[0.0, 0.0], &book).0, 0);
    assert_eq!(nearest_index(&[0.9, 0.0], &book).0, 0);
}

#[test]
fn wrong_feature_width_is_shape_error() {
    let books = CodebookSet::new(Tensor::zeros(&[2, 4, 3])).unwrap();
    let z = Tensor::zeros(&[2, 2, 5]);
    let mask = SemanticMask::uniform(2, 2, 0);
    assert_eq!(quantize_with_mask(&z, &mask, &books).unwrap_err().name(), "ShapeError");
}

#[test]
fn mask_label_outside_books_is_rejected() {
    let books = CodebookSet::new(Tensor::zeros(&[2, 4, 3])).unwrap();
    let z = Tensor::zeros(&[1, 1, 3]);
    let mask = SemanticMask::uniform(1, 1, 5);
    assert!(quantize_with_mask(&z, &mask, &books).is_err());
}

#[test]
fn mismatched_aggregation_inputs_are_rejected() {
    let maps = vec![Tensor::zeros(&[2, 2, 3]), Tensor::zeros(&[2, 2, 3])];
    assert_eq!(aggregate_weighted(&maps, &Tensor::zeros(&[2, 2, 3])).unwrap_err().name(), "AggregateInvalid");
    assert_eq!(aggregate_weighted(&[], &Tensor::zeros(&[2, 2, 0])).unwrap_err().name(), "AggregateInvalid");
}

#[test]
fn majority_downsampling_breaks_ties_low() {
    let mask = SemanticMask::new(2, 4, vec![2, 1, 0, 0, 1, 2, 3, 0]).unwrap();
    let low = downsample_mask(&mask, 2).unwrap();
    assert_eq!(low.labels(), &[1, 0]);
    assert!(downsample_mask(&mask, 3).is_err());
}

#[test]
fn usage_counts_every_location_once() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let books = CodebookSet::new(random_tensor(&mut rng, &[3, 8, 4])).unwrap();
    let z = random_tensor(&mut rng, &[4, 4, 4]);
    let mask = SemanticMask::new(4, 4, (0..16).map(|i| i % 3).collect()).unwrap();
    let q = quantize_with_mask(&z, &mask, &books).unwrap();
    let stats = usage_stats([&q], 3, 8);
    assert_eq!(stats.total(), 16);
    for p in &stats.perplexity_per_class {
        assert!((1.0..=8.0).contains(p));
    }
}

#[test]
fn straight_through_passes_gradient_unchanged() {
    let g = Graph::new();
    let z = g.param(Tensor::from_fn(&[1, 2, 2, 3], |i| i as f64 * 0.1 - 0.4));
    let table = g.constant(Tensor::from_fn(&[2 * 4, 3], |i| (i as f64 * 0.37).sin()));
    let masks = [SemanticMask::new(2, 2, vec![0, 1, 1, 0]).unwrap()];
    let q = quantize_with_masks_var(&z, &[&masks[0]], &table, 4).unwrap();
    let weights = Tensor::from_fn(&[1, 2, 2, 3], |i| 1.0 + i as f64);
    let loss = q.ste.mul(&g.constant(weights.clone())).sum_all();
    let grads = g.backward(loss);
    assert_eq!(grads.get(z).unwrap().data(), weights.data());
    for (a, b) in q.ste.value().data().iter().zip(q.codes.value().data()) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
}

#[test]
fn graph_and_tensor_quantizers_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let books = random_tensor(&mut rng, &[3, 6, 4]);
    let set = CodebookSet::new(books.clone()).unwrap();
    let z = random_tensor(&mut rng, &[2, 3, 4]);
    let g = Graph::new();
    let table = g.constant(Tensor::new(&[18, 4], books.into_data()));
    let per_var = quantize_per_class_var(&g.constant(z.clone()), &table, 6).unwrap();
    let per = quantize_per_class(&z, &set).unwrap();
    for (a, b) in per_var.iter().zip(&per) {
        assert_eq!(a.value().data(), b.data());
    }
}

#[test]
fn call_counters_track_each_quantizer() {
    reset_call_counts();
    let books = CodebookSet::new(Tensor::zeros(&[2, 2, 1])).unwrap();
    let z = Tensor::zeros(&[1, 1, 1]);
    quantize_with_mask(&z, &SemanticMask::uniform(1, 1, 0), &books).unwrap();
    let maps = quantize_per_class(&z, &books).unwrap();
    aggregate_weighted(&maps, &Tensor::new(&[1, 1, 2], vec![0.5, 0.5])).unwrap();
    assert_eq!(call_counts(), (1, 1, 1));
    reset_call_counts();
    assert_eq!(call_counts(), (0, 0, 0));
}

proptest! {
    #[test]
    fn one_hot_weights_select_a_class_map(c in 1usize..5, h in 1usize..5, w in 1usize..5, d in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let maps: Vec<Tensor> = (0..c).map(|_| random_tensor(&mut rng, &[h, w, d])).collect();
        let pick: Vec<usize> = (0..h * w).map(|_| rng.gen_range(0..c)).collect();
        let weights = Tensor::from_fn(&[h, w, c], |i| if pick[i / c] == i % c { 1.0 } else { 0.0 });
        let out = aggregate_weighted(&maps, &weights).unwrap();
        for loc in 0..h * w {
            prop_assert_eq!(&out.data()[loc * d..(loc + 1) * d], &maps[pick[loc]].data()[loc * d..(loc + 1) * d]);
        }
    }

    #[test]
    fn quantization_is_idempotent(c in 1usize..4, n in 1usize..10, d in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let books = CodebookSet::new(random_tensor(&mut rng, &[c, n, d])).unwrap();
        let z = random_tensor(&mut rng, &[3, 3, d]);
        let mask = SemanticMask::new(3, 3, (0..9).map(|_| rng.gen_range(0..c as u32)).collect()).unwrap();
        let q = quantize_with_mask(&z, &mask, &books).unwrap();
        let again = quantize_with_mask(&q.z_q, &mask, &books).unwrap();
        prop_assert_eq!(again.z_q.data(), q.z_q.data());
        prop_assert!(again.commit_term <= q.commit_term);
    }

    #[test]
    fn convex_aggregation_stays_within_the_class_hull(c in 2usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let maps: Vec<Tensor> = (0..c).map(|_| random_tensor(&mut rng, &[2, 2, 3])).collect();
        let raw: Vec<f64> = (0..4 * c).map(|_| rng.gen_range(0.0..1.0)).collect();
        let weights = Tensor::from_fn(&[2, 2, c], |i| {
            let loc = i / c;
            raw[i] / raw[loc * c..(loc + 1) * c].iter().sum::<f64>()
        });
        let out = aggregate_weighted(&maps, &weights).unwrap();
        for (i, v) in out.data().iter().enumerate() {
            let lo = maps.iter().map(|m| m.data()[i]).fold(f64::INFINITY, f64::min);
            let hi = maps.iter().map(|m| m.data()[i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
        }
    }
}
