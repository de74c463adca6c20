use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sucode_core::checkpoint::{decode_array, encode_array, load_checkpoint, resolve_checkpoint_dir, save_checkpoint, CheckpointBundle};
use sucode_core::config::RunConfig;
use sucode_core::data::*;
use sucode_tensor::Tensor;

fn gradient_image(h: usize, w: usize) -> ImageTensor {
    ImageTensor::new(Tensor::from_fn(&[h, w, 3], |i| ((i * 7) % 256) as f64 / 255.0)).unwrap()
}

fn opts(fit: Fit) -> LoadOptions {
    LoadOptions { class_count: 8, image_size: 16, fit, remap: None }
}

#[test]
fn image_round_trip_is_exact_on_the_8_bit_grid() {
    let d = tempfile::tempdir().unwrap();
    let img = gradient_image(5, 7);
    let p = d.path().join("a.png");
    save_image(&img, &p).unwrap();
    let back = load_image(&p).unwrap();
    assert!(back.tensor().max_abs_diff(img.tensor()) < 1e-12);
}

#[test]
fn out_of_range_pixels_are_rejected() {
    let err = ImageTensor::new(Tensor::full(&[2, 2, 3], 1.5)).unwrap_err();
    assert_eq!(err.name(), "SampleInvalid");
    assert!(ImageTensor::new(Tensor::zeros(&[2, 2, 4])).is_err());
}

#[test]
fn sixteen_bit_images_keep_precision() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path().join("deep.png");
    let raw: Vec<u16> = (0..4 * 3).map(|i| (i * 5000) as u16).collect();
    image::ImageBuffer::<image::Rgb<u16>, _>::from_raw(2, 2, raw.clone()).unwrap().save(&p).unwrap();
    let img = load_image(&p).unwrap();
    for (v, r) in img.tensor().data().iter().zip(&raw) {
        assert!((v - *r as f64 / 65535.0).abs() < 1e-12);
    }
}

#[test]
fn mask_round_trip_and_colour_masks_rejected() {
    let d = tempfile::tempdir().unwrap();
    let mask = SemanticMask::new(3, 4, vec![0, 1, 2, 3, 4, 5, 6, 7, 0, 1, 2, 3]).unwrap();
    let p = d.path().join("m.png");
    save_mask(&mask, &p).unwrap();
    assert_eq!(load_mask(&p).unwrap(), mask);

    let rgb = d.path().join("rgb.png");
    save_image(&gradient_image(3, 4), &rgb).unwrap();
    assert_eq!(load_mask(&rgb).unwrap_err().name(), "SampleInvalid");
}

#[test]
fn suim_colour_codes_map_to_ids() {
    let colours = [[0.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [1.0, 1.0, 1.0]];
    let data: Vec<f64> = colours.iter().flatten().copied().collect();
    let img = ImageTensor::new(Tensor::new(&[1, 4, 3], data)).unwrap();
    let ids = suim_rgb_to_ids(&img);
    assert_eq!(ids.labels().len(), 4);
    assert_eq!(ids.label_set().len(), 4);
}

fn write_sample(dir: &Path, id: &str, size: (usize, usize), mask_labels: Option<Vec<u32>>) {
    for sub in ["raw", "mask", "ref"] {
        fs::create_dir_all(dir.join(sub)).unwrap();
    }
    save_image(&gradient_image(size.0, size.1), &dir.join("raw").join(format!("{id}.png"))).unwrap();
    save_image(&gradient_image(size.0, size.1), &dir.join("ref").join(format!("{id}.png"))).unwrap();
    let labels = mask_labels.unwrap_or_else(|| vec![1; size.0 * size.1]);
    save_mask(&SemanticMask::new(size.0, size.1, labels).unwrap(), &dir.join("mask").join(format!("{id}.png"))).unwrap();
}

#[test]
fn pair_validation_errors() {
    let d = tempfile::tempdir().unwrap();
    let root = d.path();
    write_sample(root, "ok", (16, 16), None);
    write_sample(root, "bad_label", (16, 16), Some(vec![9; 256]));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let idx = DatasetIndex::open(root, 0.0).unwrap();
    let s = load_pair(&idx.raw_path("ok"), Some(&idx.mask_path("ok")), Some(&idx.ref_path("ok")), &opts(Fit::Native), &mut rng).unwrap();
    assert_eq!(s.id, "ok");
    let err = load_pair(&idx.raw_path("bad_label"), Some(&idx.mask_path("bad_label")), None, &opts(Fit::Native), &mut rng).unwrap_err();
    assert_eq!(err.name(), "SampleInvalid");

    save_mask(&SemanticMask::uniform(8, 8, 0), &idx.mask_path("ok")).unwrap();
    let err = load_pair(&idx.raw_path("ok"), Some(&idx.mask_path("ok")), None, &opts(Fit::Native), &mut rng).unwrap_err();
    assert_eq!(err.name(), "SampleInvalid");
}

#[test]
fn random_crop_keeps_image_and_mask_aligned() {
    let d = tempfile::tempdir().unwrap();
    let labels: Vec<u32> = (0..32 * 40).map(|i| ((i % 40) / 5) as u32).collect();
    write_sample(d.path(), "a", (32, 40), Some(labels));
    let idx = DatasetIndex::open(d.path(), 0.0).unwrap();
    // Noise makes every crop position distinguishable from the image alone.
    let mut noise = ChaCha8Rng::seed_from_u64(1);
    let img = ImageTensor::new(Tensor::from_fn(&[32, 40, 3], |_| (noise.gen_range(0..256) as f64) / 255.0)).unwrap();
    save_image(&img, &idx.raw_path("a")).unwrap();
    let full_mask = load_mask(&idx.mask_path("a")).unwrap();
    let full_img = load_image(&idx.raw_path("a")).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let s = load_pair(&idx.raw_path("a"), Some(&idx.mask_path("a")), None, &opts(Fit::RandomCrop), &mut rng).unwrap();
        let m = s.mask.unwrap();
        assert_eq!((s.raw.height(), s.raw.width(), m.height(), m.width()), (16, 16, 16, 16));
        // Locate the crop through the image and check the mask followed it.
        let found = (0..=16).flat_map(|y| (0..=24).map(move |x| (y, x))).find(|&(y0, x0)| {
            (0..16).all(|y| (0..16).all(|x| (0..3).all(|c| s.raw.at(y, x, c) == full_img.at(y0 + y, x0 + x, c))))
        });
        let (y0, x0) = found.expect("crop comes from the image");
        assert_eq!(m, full_mask.crop(y0, x0, 16, 16));
    }
}

#[test]
fn remap_applies_on_load() {
    let d = tempfile::tempdir().unwrap();
    write_sample(d.path(), "a", (16, 16), Some(vec![7; 256]));
    let idx = DatasetIndex::open(d.path(), 0.0).unwrap();
    let mut o = opts(Fit::Native);
    o.remap = Some(sucode_core::synth::merge_to_six());
    o.class_count = 6;
    let s = load_pair(&idx.raw_path("a"), Some(&idx.mask_path("a")), None, &o, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(s.mask.unwrap().labels().iter().all(|&l| l == 5));
}

#[test]
fn dataset_index_holds_out_trailing_ids() {
    let d = tempfile::tempdir().unwrap();
    for i in 0..10 {
        write_sample(d.path(), &format!("{i:03}"), (8, 8), None);
    }
    let idx = DatasetIndex::open(d.path(), 0.2).unwrap();
    assert_eq!(idx.train.len(), 8);
    assert_eq!(idx.test, vec!["008".to_string(), "009".to_string()]);
}

#[test]
fn flips_are_involutions() {
    let img = gradient_image(4, 6);
    assert!(img.flip_horizontal().flip_horizontal().tensor().bit_eq(img.tensor()));
    let m = SemanticMask::new(2, 3, vec![0, 1, 2, 3, 4, 5]).unwrap();
    assert_eq!(m.flip_horizontal().labels(), &[2, 1, 0, 5, 4, 3]);
}

#[test]
fn stacking_round_trips() {
    let a = gradient_image(4, 4);
    let b = ImageTensor::filled(4, 4, [0.1, 0.2, 0.3]);
    let back = unstack_images(&stack_images(&[&a, &b]));
    assert!(back[0].tensor().bit_eq(a.tensor()));
    assert!(back[1].tensor().bit_eq(b.tensor()));
}

fn sample_bundle() -> CheckpointBundle {
    let mut b = CheckpointBundle::new(RunConfig::toy());
    b.insert("enc_q/conv_in/w", Tensor::from_fn(&[3, 3, 3, 8], |i| (i as f64).sin()), false, 1);
    b.insert("codebook/0", Tensor::from_fn(&[4, 2], |i| i as f64 * 0.5), true, 1);
    b.insert("train/step", Tensor::scalar(12.0), false, 1);
    b.rng_state = (0..56).collect();
    b
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path().join("ckpt");
    let b = sample_bundle();
    save_checkpoint(&b, &dir).unwrap();
    let back = load_checkpoint(&dir).unwrap();
    assert_eq!(back, b);
    assert!(back.arrays["codebook/0"].frozen);
    // Overwriting replaces the previous contents.
    let mut b2 = b.clone();
    b2.arrays.remove("train/step");
    save_checkpoint(&b2, &dir).unwrap();
    assert_eq!(load_checkpoint(&dir).unwrap(), b2);
    assert_eq!(resolve_checkpoint_dir(d.path()), d.path().to_path_buf());
}

#[test]
fn run_directory_resolves_to_its_checkpoint() {
    let d = tempfile::tempdir().unwrap();
    save_checkpoint(&sample_bundle(), &d.path().join("checkpoint")).unwrap();
    assert_eq!(resolve_checkpoint_dir(d.path()), d.path().join("checkpoint"));
}

#[test]
fn tampered_checkpoints_are_detected() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path().join("ckpt");
    save_checkpoint(&sample_bundle(), &dir).unwrap();
    let manifest = dir.join("manifest.csv");
    let text = fs::read_to_string(&manifest).unwrap();
    fs::write(&manifest, text.replace("4x2", "2x4")).unwrap();
    assert_eq!(load_checkpoint(&dir).unwrap_err().name(), "CheckpointCorrupt");

    save_checkpoint(&sample_bundle(), &dir).unwrap();
    let array = dir.join("arrays/codebook/0.bin");
    let bytes = fs::read(&array).unwrap();
    fs::write(&array, &bytes[..bytes.len() - 3]).unwrap();
    assert_eq!(load_checkpoint(&dir).unwrap_err().name(), "CheckpointCorrupt");

    save_checkpoint(&sample_bundle(), &dir).unwrap();
    fs::remove_file(dir.join("arrays/codebook/0.bin")).unwrap();
    assert!(load_checkpoint(&dir).is_err());
}

#[test]
fn missing_checkpoint_directory_is_an_error() {
    let d = tempfile::tempdir().unwrap();
    assert!(load_checkpoint(d.path().join("nothing")).is_err());
}

#[test]
fn array_encoding_round_trips() {
    let t = Tensor::from_fn(&[2, 3, 1], |i| -1.5 + i as f64);
    assert!(decode_array(&encode_array(&t)).unwrap().bit_eq(&t));
    assert!(decode_array(b"NOPE").is_none());
}
