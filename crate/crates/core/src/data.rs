//! Images, semantic masks, paired samples and the on-disk dataset layout
//! (`<root>/raw/<id>.png`, `<root>/mask/<id>.png`, `<root>/ref/<id>.png`).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use sucode_tensor::Tensor;

use crate::error::{Error, Result};

/// Class names, indexed by class id.
pub const CLASS_NAMES: [&str; 8] =
    ["water", "divers", "plants", "wrecks", "robots", "reefs", "fish", "seafloor"];

/// RGB image with values in `[0, 1]`, stored as `[H, W, 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    tensor: Tensor,
}

impl ImageTensor {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let s = tensor.shape();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::Shape(format!("image must be [H, W, 3], got {s:?}")));
        }
        if let Some(v) = tensor.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::SampleInvalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { tensor })
    }

    /// Clamps into `[0, 1]` (non-finite values become 0).
    pub fn from_clamped(tensor: Tensor) -> Result<Self> {
        Self::new(tensor.map(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 }))
    }

    pub fn filled(h: usize, w: usize, rgb: [f64; 3]) -> Self {
        Self { tensor: Tensor::from_fn(&[h, w, 3], |i| rgb[i % 3]) }
    }

    pub fn height(&self) -> usize {
        self.tensor.dim(0)
    }

    pub fn width(&self) -> usize {
        self.tensor.dim(1)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.tensor.data()[(y * self.width() + x) * 3 + c]
    }

    pub fn check_divisible(&self, factor: usize) -> Result<()> {
        if self.height() % factor != 0 || self.width() % factor != 0 {
            return Err(Error::Shape(format!(
                "image {}x{} not divisible by {factor}",
                self.height(),
                self.width()
            )));
        }
        Ok(())
    }

    pub fn flip_horizontal(&self) -> Self {
        let (h, w) = (self.height(), self.width());
        let t = Tensor::from_fn(&[h, w, 3], |i| {
            let (y, x, c) = (i / (w * 3), (i / 3) % w, i % 3);
            self.at(y, w - 1 - x, c)
        });
        Self { tensor: t }
    }

    /// Bilinear resampling (half-pixel centers) to `out_h x out_w`.
    pub fn resized(&self, out_h: usize, out_w: usize) -> Self {
        let (h, w) = (self.height(), self.width());
        if (h, w) == (out_h, out_w) {
            return self.clone();
        }
        let taps = |n_in: usize, n_out: usize, o: usize| {
            let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, s - i0 as f64)
        };
        let t = Tensor::from_fn(&[out_h, out_w, 3], |i| {
            let (oy, ox, c) = (i / (out_w * 3), (i / 3) % out_w, i % 3);
            let (y0, y1, fy) = taps(h, out_h, oy);
            let (x0, x1, fx) = taps(w, out_w, ox);
            let top = self.at(y0, x0, c) * (1.0 - fx) + self.at(y0, x1, c) * fx;
            let bot = self.at(y1, x0, c) * (1.0 - fx) + self.at(y1, x1, c) * fx;
            (top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0)
        });
        Self { tensor: t }
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        let width = self.width();
        let t = Tensor::from_fn(&[h, w, 3], |i| {
            let (y, x, c) = (i / (w * 3), (i / 3) % w, i % 3);
            self.tensor.data()[((y0 + y) * width + x0 + x) * 3 + c]
        });
        Self { tensor: t }
    }
}

/// Per-pixel class ids, row-major `[H, W]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SemanticMask {
    h: usize,
    w: usize,
    labels: Vec<u32>,
}

impl SemanticMask {
    pub fn new(h: usize, w: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != h * w {
            return Err(Error::MaskInvalid(format!("{} labels for a {h}x{w} mask", labels.len())));
        }
        Ok(Self { h, w, labels })
    }

    pub fn uniform(h: usize, w: usize, label: u32) -> Self {
        Self { h, w, labels: vec![label; h * w] }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u32] {
        &mut self.labels
    }

    pub fn at(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.w + x]
    }

    pub fn max_label(&self) -> Option<u32> {
        self.labels.iter().copied().max()
    }

    /// Sorted distinct labels.
    pub fn label_set(&self) -> Vec<u32> {
        let mut v = self.labels.clone();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn check_classes(&self, class_count: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l as usize >= class_count) {
            Some(l) => Err(Error::MaskInvalid(format!("label {l} >= class count {class_count}"))),
            None => Ok(()),
        }
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        let labels = (0..h * w).map(|i| self.at(y0 + i / w, x0 + i % w)).collect();
        Self { h, w, labels }
    }

    /// Nearest-neighbour resampling to `out_h x out_w`.
    pub fn resized(&self, out_h: usize, out_w: usize) -> Self {
        if (self.h, self.w) == (out_h, out_w) {
            return self.clone();
        }
        let labels = (0..out_h * out_w)
            .map(|i| {
                let y = ((i / out_w) * self.h / out_h).min(self.h - 1);
                let x = ((i % out_w) * self.w / out_w).min(self.w - 1);
                self.at(y, x)
            })
            .collect();
        Self { h: out_h, w: out_w, labels }
    }

    pub fn flip_horizontal(&self) -> Self {
        let labels = (0..self.h * self.w).map(|i| self.at(i / self.w, self.w - 1 - i % self.w)).collect();
        Self { h: self.h, w: self.w, labels }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub id: String,
    pub raw: ImageTensor,
    pub reference: Option<ImageTensor>,
    pub mask: Option<SemanticMask>,
}

/// How [`load_pair`] fits a sample to the model's input size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fit {
    /// Random crop to `image_size` (scaling up first if the source is smaller).
    RandomCrop,
    /// Direct scaling to `image_size`.
    Scale,
    /// Keep the native size.
    Native,
}

#[derive(Clone, Debug)]
pub struct LoadOptions {
    pub class_count: usize,
    pub image_size: usize,
    pub fit: Fit,
    pub remap: Option<BTreeMap<u32, u32>>,
}

pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| Error::SampleInvalid(format!("{}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let sixteen = matches!(
        img.color(),
        image::ColorType::L16 | image::ColorType::La16 | image::ColorType::Rgb16 | image::ColorType::Rgba16
    );
    let data: Vec<f64> = if sixteen {
        img.to_rgb16().into_raw().into_iter().map(|v| v as f64 / 65535.0).collect()
    } else {
        img.to_rgb8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect()
    };
    ImageTensor::new(Tensor::new(&[h, w, 3], data))
}

pub fn save_image(img: &ImageTensor, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = img.tensor.data().iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, bytes).expect("buffer size matches");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::io(format!("writing {}", path.display()), std::io::Error::other(e)))
}

/// Reads a single-channel mask whose pixel values (or palette indices) are
/// class ids.
pub fn load_mask(path: &Path) -> Result<SemanticMask> {
    let file = fs::File::open(path).map_err(|e| Error::SampleInvalid(format!("{}: {e}", path.display())))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| Error::SampleInvalid(format!("{}: {e}", path.display())))?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::SampleInvalid(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::SampleInvalid(format!("{}: {e}", path.display())))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let row = info.line_size;
    let labels: Vec<u32> = match (info.color_type, info.bit_depth) {
        (png::ColorType::Grayscale | png::ColorType::Indexed, png::BitDepth::Eight) => {
            (0..h).flat_map(|y| buf[y * row..y * row + w].iter().map(|&v| v as u32).collect::<Vec<_>>()).collect()
        }
        (png::ColorType::Grayscale, png::BitDepth::Sixteen) => (0..h)
            .flat_map(|y| {
                let buf = &buf;
                (0..w).map(move |x| u16::from_be_bytes([buf[y * row + 2 * x], buf[y * row + 2 * x + 1]]) as u32)
            })
            .collect(),
        (png::ColorType::Grayscale | png::ColorType::Indexed, depth) => {
            let bits = depth as usize;
            let mask = (1u32 << bits) - 1;
            (0..h)
                .flat_map(|y| {
                    let line = &buf[y * row..(y + 1) * row];
                    (0..w).map(move |x| {
                        let bit = x * bits;
                        ((line[bit / 8] as u32) >> (8 - bits - bit % 8)) & mask
                    })
                })
                .collect()
        }
        (ct, _) => {
            return Err(Error::SampleInvalid(format!(
                "{}: mask must be single-channel (found {ct:?}); convert colour-coded masks first",
                path.display()
            )))
        }
    };
    SemanticMask::new(h, w, labels)
}

pub fn save_mask(mask: &SemanticMask, path: &Path) -> Result<()> {
    let io = |e: std::io::Error| Error::io(format!("writing {}", path.display()), e);
    if let Some(l) = mask.labels.iter().find(|&&l| l > 255) {
        return Err(Error::MaskInvalid(format!("label {l} does not fit an 8-bit mask file")));
    }
    let file = fs::File::create(path).map_err(io)?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), mask.w as u32, mask.h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| io(std::io::Error::other(e)))?;
    let bytes: Vec<u8> = mask.labels.iter().map(|&l| l as u8).collect();
    writer.write_image_data(&bytes).map_err(|e| io(std::io::Error::other(e)))?;
    Ok(())
}

/// Converts a colour-coded mask using the 3-bit RGB convention (each channel
/// thresholded at 128): black water, blue divers, green plants, sky-blue
/// wrecks, red robots, pink reefs, yellow fish, white seafloor.
pub fn suim_rgb_to_ids(rgb: &ImageTensor) -> SemanticMask {
    let (h, w) = (rgb.height(), rgb.width());
    let labels = (0..h * w)
        .map(|i| {
            let bit = |c| (rgb.tensor.data()[i * 3 + c] >= 0.5) as u32;
            match (bit(0), bit(1), bit(2)) {
                (0, 0, 0) => 0,
                (0, 0, 1) => 1,
                (0, 1, 0) => 2,
                (0, 1, 1) => 3,
                (1, 0, 0) => 4,
                (1, 0, 1) => 5,
                (1, 1, 0) => 6,
                _ => 7,
            }
        })
        .collect();
    SemanticMask { h, w, labels }
}

/// Substitutes every label through `remap`.
pub fn remap_mask_classes(mask: &SemanticMask, remap: &BTreeMap<u32, u32>) -> Result<SemanticMask> {
    let labels = mask
        .labels
        .iter()
        .map(|l| remap.get(l).copied().ok_or_else(|| Error::RemapInvalid(format!("label {l} has no mapping"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(SemanticMask { h: mask.h, w: mask.w, labels })
}

/// Loads a raw image with an optional mask and reference, validates them
/// against each other and fits them to `opts.image_size`.
pub fn load_pair<R: Rng + ?Sized>(
    image_path: &Path,
    mask_path: Option<&Path>,
    ref_path: Option<&Path>,
    opts: &LoadOptions,
    rng: &mut R,
) -> Result<PairedSample> {
    let id = image_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let raw = load_image(image_path)?;
    let reference = ref_path.map(load_image).transpose()?;
    let mut mask = match mask_path {
        Some(p) => Some(load_mask(p).map_err(|e| match e {
            Error::MaskInvalid(m) => Error::SampleInvalid(m),
            other => other,
        })?),
        None => None,
    };
    let (h, w) = (raw.height(), raw.width());
    if let Some(r) = &reference {
        if (r.height(), r.width()) != (h, w) {
            return Err(Error::SampleInvalid(format!(
                "{id}: reference {}x{} vs image {h}x{w}",
                r.height(),
                r.width()
            )));
        }
    }
    if let Some(m) = &mask {
        if (m.h, m.w) != (h, w) {
            return Err(Error::SampleInvalid(format!("{id}: mask {}x{} vs image {h}x{w}", m.h, m.w)));
        }
    }
    if let (Some(m), Some(remap)) = (&mask, &opts.remap) {
        mask = Some(remap_mask_classes(m, remap)?);
    }
    if let Some(m) = &mask {
        if let Some(l) = m.labels.iter().find(|&&l| l as usize >= opts.class_count) {
            return Err(Error::SampleInvalid(format!("{id}: label {l} >= class count {}", opts.class_count)));
        }
    }
    let mut sample = PairedSample { id, raw, reference, mask };
    fit_sample(&mut sample, opts, rng);
    Ok(sample)
}

pub fn fit_sample<R: Rng + ?Sized>(s: &mut PairedSample, opts: &LoadOptions, rng: &mut R) {
    let size = opts.image_size;
    let scale_to = |s: &mut PairedSample, h: usize, w: usize| {
        s.raw = s.raw.resized(h, w);
        s.reference = s.reference.as_ref().map(|r| r.resized(h, w));
        s.mask = s.mask.as_ref().map(|m| m.resized(h, w));
    };
    match opts.fit {
        Fit::Native => {}
        Fit::Scale => scale_to(s, size, size),
        Fit::RandomCrop => {
            let (h, w) = (s.raw.height(), s.raw.width());
            if h < size || w < size {
                let k = size as f64 / h.min(w) as f64;
                let nh = ((h as f64 * k).ceil() as usize).max(size);
                let nw = ((w as f64 * k).ceil() as usize).max(size);
                scale_to(s, nh, nw);
            }
            let (h, w) = (s.raw.height(), s.raw.width());
            if (h, w) != (size, size) {
                let y0 = rng.gen_range(0..=h - size);
                let x0 = rng.gen_range(0..=w - size);
                s.raw = s.raw.crop(y0, x0, size, size);
                s.reference = s.reference.as_ref().map(|r| r.crop(y0, x0, size, size));
                s.mask = s.mask.as_ref().map(|m| m.crop(y0, x0, size, size));
            }
        }
    }
}

/// Sample ids of a dataset root, sorted, split into training and held-out
/// parts (the trailing `test_fraction` of ids is held out).
#[derive(Clone, Debug)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetIndex {
    pub fn open(root: &Path, test_fraction: f64) -> Result<Self> {
        let ids = list_ids(&root.join("raw"))?;
        let n_test = ((ids.len() as f64) * test_fraction).round() as usize;
        let n_test = if ids.len() > 1 { n_test.min(ids.len() - 1) } else { 0 };
        let split = ids.len() - n_test;
        Ok(Self { root: root.to_path_buf(), train: ids[..split].to_vec(), test: ids[split..].to_vec() })
    }

    pub fn raw_path(&self, id: &str) -> PathBuf {
        self.root.join("raw").join(format!("{id}.png"))
    }

    pub fn mask_path(&self, id: &str) -> PathBuf {
        self.root.join("mask").join(format!("{id}.png"))
    }

    pub fn ref_path(&self, id: &str) -> PathBuf {
        self.root.join("ref").join(format!("{id}.png"))
    }
}

/// Sorted file stems of the `.png` files in `dir`.
pub fn list_ids(dir: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(format!("listing {}", dir.display()), e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem() {
                ids.push(stem.to_string_lossy().into_owned());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Stacks images into a `[B, H, W, 3]` batch tensor.
pub fn stack_images(images: &[&ImageTensor]) -> Tensor {
    let (h, w) = (images[0].height(), images[0].width());
    let mut data = Vec::with_capacity(images.len() * h * w * 3);
    for img in images {
        assert_eq!((img.height(), img.width()), (h, w), "batch images differ in size");
        data.extend_from_slice(img.tensor.data());
    }
    Tensor::new(&[images.len(), h, w, 3], data)
}

/// Splits a `[B, H, W, 3]` tensor into clamped images.
pub fn unstack_images(batch: &Tensor) -> Vec<ImageTensor> {
    let s = batch.shape();
    let n = s[1] * s[2] * 3;
    (0..s[0])
        .map(|b| {
            let t = Tensor::new(&[s[1], s[2], 3], batch.data()[b * n..(b + 1) * n].to_vec());
            ImageTensor::from_clamped(t).expect("clamped image is valid")
        })
        .collect()
}
