//! Images, dataset splits, corruption models and synthetic image sets.

use std::fmt;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchSource, Tensor4};
use crate::seed::{derived_rng, rng_from, Rng};

/// A `channels × height × width` image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Data(format!(
                "{} values for a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    fn set_pixel(&mut self, y: usize, x: usize, value: f32) {
        let plane = self.plane();
        for c in 0..self.channels {
            self.data[c * plane + y * self.width + x] = value;
        }
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Image> {
        if top + h > self.height || left + w > self.width {
            return Err(Error::Data(format!(
                "crop {h}x{w} at ({top},{left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            for y in top..top + h {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + left..row + left + w]);
            }
        }
        Image::new(self.channels, h, w, data)
    }

    /// Converts between one and three channels (luma weights or replication).
    pub fn with_channels(&self, channels: usize) -> Result<Image> {
        match (self.channels, channels) {
            (a, b) if a == b => Ok(self.clone()),
            (1, 3) => Image::new(3, self.height, self.width, self.data.repeat(3)),
            (3, 1) => {
                let p = self.plane();
                let data = (0..p)
                    .map(|i| {
                        0.299 * self.data[i] + 0.587 * self.data[p + i] + 0.114 * self.data[2 * p + i]
                    })
                    .collect();
                Image::new(1, self.height, self.width, data)
            }
            (a, b) => Err(Error::Data(format!("cannot convert {a} channels to {b}"))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let (w, h) = (self.width as u32, self.height as u32);
        let p = self.plane();
        let result = match self.channels {
            1 => image::GrayImage::from_raw(w, h, self.data.iter().map(|&v| to_u8(v)).collect())
                .expect("buffer sized to image")
                .save(path),
            3 => {
                let buf = (0..p)
                    .flat_map(|i| [0, 1, 2].map(|c| to_u8(self.data[c * p + i])))
                    .collect();
                image::RgbImage::from_raw(w, h, buf)
                    .expect("buffer sized to image")
                    .save(path)
            }
            c => return Err(Error::Data(format!("cannot save a {c}-channel image"))),
        };
        result.map_err(|e| Error::Data(format!("writing {}: {e}", path.display())))
    }
}

/// Images sharing one channel count, with a label per image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageSet {
    pub images: Vec<Image>,
    pub labels: Vec<String>,
}

impl ImageSet {
    pub fn new(images: Vec<Image>, labels: Vec<String>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Data("one label per image required".into()));
        }
        if let Some(first) = images.first() {
            if images.iter().any(|i| i.channels != first.channels) {
                return Err(Error::Data("images in a set must share channels".into()));
            }
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn channels(&self) -> Option<usize> {
        self.images.first().map(|i| i.channels)
    }

    fn subset(&self, idx: &[usize]) -> ImageSet {
        ImageSet {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i].clone()).collect(),
        }
    }
}

const IMAGE_EXTENSIONS: &[&str] = &["png", "pgm", "ppm", "pnm", "pbm"];

/// Loads every supported image in `dir` (lexicographic order), converted to
/// `expected_channels` and normalised to `[0, 1]`. Unreadable files are skipped.
pub fn load_images(dir: &Path, expected_channels: usize) -> Result<ImageSet> {
    if expected_channels != 1 && expected_channels != 3 {
        return Err(Error::Config(format!(
            "images must have 1 or 3 channels, not {expected_channels}"
        )));
    }
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    paths.sort();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        match image::open(&path) {
            Ok(img) => {
                let (w, h) = (img.width() as usize, img.height() as usize);
                let decoded = if expected_channels == 1 {
                    let g = img.into_luma8();
                    Image::new(1, h, w, g.into_raw().iter().map(|&v| f32::from(v) / 255.0).collect())?
                } else {
                    let rgb = img.into_rgb8().into_raw();
                    let p = w * h;
                    let data = (0..3)
                        .flat_map(|c| (0..p).map(move |i| (c, i)))
                        .map(|(c, i)| f32::from(rgb[3 * i + c]) / 255.0)
                        .collect();
                    Image::new(3, h, w, data)?
                };
                labels.push(
                    path.file_name()
                        .map(|n| n.to_string_lossy().into_owned())
                        .unwrap_or_default(),
                );
                images.push(decoded);
            }
            Err(e) => warn!("skipping {}: {e}", path.display()),
        }
    }
    if images.is_empty() {
        return Err(Error::Data(format!("no readable images in {}", dir.display())));
    }
    ImageSet::new(images, labels)
}

/// Shuffles with `seed` and partitions into train/validation/test by `fractions`.
pub fn split(set: &ImageSet, fractions: [f64; 3], seed: u64) -> Result<(ImageSet, ImageSet, ImageSet)> {
    if fractions.iter().any(|&f| !(0.0..=1.0).contains(&f))
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::Config(format!("split fractions {fractions:?} must sum to 1")));
    }
    let n = set.len();
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from(seed));
    let (a, rest) = order.split_at(n_train);
    let (b, c) = rest.split_at(n_val);
    if a.is_empty() || b.is_empty() || c.is_empty() {
        return Err(Error::Data(format!(
            "split of {n} images by {fractions:?} leaves a partition empty"
        )));
    }
    Ok((set.subset(a), set.subset(b), set.subset(c)))
}

/// `count` uniformly placed `size × size` patches.
pub fn extract_patches(img: &Image, size: usize, count: usize, rng: &mut Rng) -> Result<Vec<Image>> {
    if img.height < size || img.width < size || size == 0 {
        return Err(Error::Data(format!(
            "cannot cut {size}x{size} patches from {}x{}",
            img.height, img.width
        )));
    }
    (0..count)
        .map(|_| {
            let top = rng.random_range(0..=img.height - size);
            let left = rng.random_range(0..=img.width - size);
            img.crop(top, left, size, size)
        })
        .collect()
}

/// Corruption model applied to clean images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Corruption {
    None,
    /// Central square of side `round(side_fraction · min(H, W))`.
    Center { side_fraction: f64 },
    /// Exactly `floor(drop_probability · H · W)` distinct pixels.
    Pixel { drop_probability: f64 },
    /// The left, right, top or bottom half, chosen per image.
    Half,
    /// Additive Gaussian noise, `sigma` on the 0–255 scale, result clamped to `[0, 1]`.
    GaussianNoise { sigma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    #[serde(flatten)]
    pub variant: Corruption,
    /// Value written into masked pixels.
    #[serde(default)]
    pub fill: f32,
}

pub const DEFAULT_CENTER_FRACTION: f64 = 0.5;
pub const DEFAULT_PIXEL_DROP: f64 = 0.8;

impl CorruptionSpec {
    pub fn new(variant: Corruption) -> Self {
        Self { variant, fill: 0.0 }
    }

    pub fn none() -> Self {
        Self::new(Corruption::None)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.variant {
            Corruption::Center { side_fraction } => side_fraction > 0.0 && side_fraction < 1.0,
            Corruption::Pixel { drop_probability } => (0.0..1.0).contains(&drop_probability),
            Corruption::GaussianNoise { sigma } => sigma >= 0.0 && sigma.is_finite(),
            Corruption::None | Corruption::Half => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid corruption {self}")))
        }
    }
}

impl fmt::Display for CorruptionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.variant {
            Corruption::None => write!(f, "none"),
            Corruption::Center { side_fraction } => write!(f, "center:{side_fraction}"),
            Corruption::Pixel { drop_probability } => write!(f, "pixel:{drop_probability}"),
            Corruption::Half => write!(f, "half"),
            Corruption::GaussianNoise { sigma } => write!(f, "gaussian:{sigma}"),
        }
    }
}

impl std::str::FromStr for CorruptionSpec {
    type Err = Error;

    /// `none`, `center[:fraction]`, `pixel[:probability]`, `half`, `gaussian:sigma`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let num = |default: Option<f64>| -> Result<f64> {
            match arg {
                Some(a) => a
                    .parse()
                    .map_err(|_| Error::Config(format!("bad corruption parameter {a:?}"))),
                None => default.ok_or_else(|| Error::Config(format!("{name} needs a parameter"))),
            }
        };
        let variant = match name {
            "none" => Corruption::None,
            "center" => Corruption::Center {
                side_fraction: num(Some(DEFAULT_CENTER_FRACTION))?,
            },
            "pixel" => Corruption::Pixel {
                drop_probability: num(Some(DEFAULT_PIXEL_DROP))?,
            },
            "half" => Corruption::Half,
            "gaussian" => Corruption::GaussianNoise { sigma: num(None)? },
            other => return Err(Error::Config(format!("unknown corruption {other:?}"))),
        };
        let spec = CorruptionSpec::new(variant);
        spec.validate()?;
        Ok(spec)
    }
}

/// Pre-clamp noise samples for [`Corruption::GaussianNoise`].
pub fn gaussian_noise(len: usize, sigma: f64, rng: &mut Rng) -> Vec<f32> {
    if sigma == 0.0 {
        return vec![0.0; len];
    }
    let normal = Normal::new(0.0, sigma / 255.0).expect("finite sigma");
    (0..len).map(|_| normal.sample(rng) as f32).collect()
}

/// Returns a corrupted copy of one image.
pub fn corrupt_image(clean: &Image, spec: &CorruptionSpec, rng: &mut Rng) -> Image {
    let mut out = clean.clone();
    let (h, w) = (clean.height, clean.width);
    match spec.variant {
        Corruption::None => {}
        Corruption::Center { side_fraction } => {
            let s = ((side_fraction * h.min(w) as f64).round() as usize).min(h.min(w));
            let (top, left) = ((h - s) / 2, (w - s) / 2);
            for y in top..top + s {
                for x in left..left + s {
                    out.set_pixel(y, x, spec.fill);
                }
            }
        }
        Corruption::Pixel { drop_probability } => {
            let count = (drop_probability * (h * w) as f64).floor() as usize;
            for i in index::sample(rng, h * w, count.min(h * w)) {
                out.set_pixel(i / w, i % w, spec.fill);
            }
        }
        Corruption::Half => {
            let (ys, xs) = match rng.random_range(0..4) {
                0 => (0..h, 0..w / 2),
                1 => (0..h, w - w / 2..w),
                2 => (0..h / 2, 0..w),
                _ => (h - h / 2..h, 0..w),
            };
            for y in ys {
                for x in xs.clone() {
                    out.set_pixel(y, x, spec.fill);
                }
            }
        }
        Corruption::GaussianNoise { sigma } => {
            let noise = gaussian_noise(out.data.len(), sigma, rng);
            for (v, n) in out.data.iter_mut().zip(noise) {
                *v = (*v + n).clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Corrupts every image of a batch independently; the input is left untouched.
pub fn corrupt(clean: &Tensor4<f32>, spec: &CorruptionSpec, rng: &mut Rng) -> Tensor4<f32> {
    let images = unstack(clean);
    let corrupted: Vec<Image> = images.iter().map(|i| corrupt_image(i, spec, rng)).collect();
    stack(&corrupted.iter().collect::<Vec<_>>()).expect("uniform batch")
}

pub fn stack(images: &[&Image]) -> Result<Tensor4<f32>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Data("cannot stack an empty batch".into()))?;
    let dims = [images.len(), first.channels, first.height, first.width];
    if images
        .iter()
        .any(|i| (i.channels, i.height, i.width) != (first.channels, first.height, first.width))
    {
        return Err(Error::Shape("batch images differ in shape".into()));
    }
    let mut data = Vec::with_capacity(dims.iter().product());
    for i in images {
        data.extend_from_slice(&i.data);
    }
    Tensor4::from_vec(dims, data)
}

pub fn unstack(t: &Tensor4<f32>) -> Vec<Image> {
    (0..t.batch())
        .map(|b| Image {
            channels: t.channels(),
            height: t.height(),
            width: t.width(),
            data: t.item(b).to_vec(),
        })
        .collect()
}

/// Clean/corrupted pairs at the network input size. Each image gets its own corruption
/// (and crop, if larger than `size`) seeded by its index, so the pairs are identical
/// every time they are rebuilt with the same seed.
pub fn fixed_pairs(
    set: &ImageSet,
    size: (usize, usize),
    spec: &CorruptionSpec,
    seed: u64,
) -> Result<Vec<(Image, Image)>> {
    set.images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let mut rng = derived_rng(seed, &[i as u64]);
            let clean = if (img.height, img.width) == size {
                img.clone()
            } else {
                random_crop(img, size, &mut rng)?
            };
            let corrupted = corrupt_image(&clean, spec, &mut rng);
            Ok((clean, corrupted))
        })
        .collect()
}

fn random_crop(img: &Image, (h, w): (usize, usize), rng: &mut Rng) -> Result<Image> {
    if img.height < h || img.width < w {
        return Err(Error::Data(format!(
            "image {}x{} is smaller than the network input {h}x{w}",
            img.height, img.width
        )));
    }
    let top = rng.random_range(0..=img.height - h);
    let left = rng.random_range(0..=img.width - w);
    img.crop(top, left, h, w)
}

/// Random minibatches from an image set: images drawn with replacement, cropped to the
/// input size, corrupted afresh for every batch.
pub struct TrainingBatches<'a> {
    set: &'a ImageSet,
    size: (usize, usize),
    batch: usize,
    corruption: CorruptionSpec,
    rng: Rng,
}

impl<'a> TrainingBatches<'a> {
    pub fn new(
        set: &'a ImageSet,
        size: (usize, usize),
        batch: usize,
        corruption: CorruptionSpec,
        rng: Rng,
    ) -> Result<Self> {
        if set.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        if batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if let Some(img) = set.images.iter().find(|i| i.height < size.0 || i.width < size.1) {
            return Err(Error::Data(format!(
                "training image {}x{} smaller than input {}x{}",
                img.height, img.width, size.0, size.1
            )));
        }
        Ok(Self {
            set,
            size,
            batch,
            corruption,
            rng,
        })
    }
}

impl BatchSource for TrainingBatches<'_> {
    fn next_batch(&mut self) -> Result<(Tensor4<f32>, Tensor4<f32>)> {
        let mut clean = Vec::with_capacity(self.batch);
        for _ in 0..self.batch {
            let img = &self.set.images[self.rng.random_range(0..self.set.len())];
            clean.push(if (img.height, img.width) == self.size {
                img.clone()
            } else {
                random_crop(img, self.size, &mut self.rng)?
            });
        }
        let corrupted: Vec<Image> = clean
            .iter()
            .map(|c| corrupt_image(c, &self.corruption, &mut self.rng))
            .collect();
        Ok((
            stack(&corrupted.iter().collect::<Vec<_>>())?,
            stack(&clean.iter().collect::<Vec<_>>())?,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    /// Linear ramps with random direction, offset and contrast.
    Gradients,
    /// Binary images of axis-aligned rectangles.
    Rectangles,
    /// Seven-segment digit glyphs.
    Digits,
    /// One random gray level per image.
    Constant,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradients" => Ok(SynthKind::Gradients),
            "rectangles" => Ok(SynthKind::Rectangles),
            "digits" => Ok(SynthKind::Digits),
            "constant" => Ok(SynthKind::Constant),
            other => Err(Error::Config(format!("unknown synthetic kind {other:?}"))),
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SynthKind::Gradients => "gradients",
            SynthKind::Rectangles => "rectangles",
            SynthKind::Digits => "digits",
            SynthKind::Constant => "constant",
        })
    }
}

// Segments a..g of each digit, in the usual order (top, top-right, bottom-right,
// bottom, bottom-left, top-left, middle).
const SEGMENTS: [[bool; 7]; 10] = [
    [true, true, true, true, true, true, false],
    [false, true, true, false, false, false, false],
    [true, true, false, true, true, false, true],
    [true, true, true, true, false, false, true],
    [false, true, true, false, false, true, true],
    [true, false, true, true, false, true, true],
    [true, false, true, true, true, true, true],
    [true, true, true, false, false, false, false],
    [true, true, true, true, true, true, true],
    [true, true, true, true, false, true, true],
];

fn synth_one(kind: SynthKind, size: usize, rng: &mut Rng) -> Vec<f32> {
    let s = size as f32;
    let mut px = vec![0.0f32; size * size];
    match kind {
        SynthKind::Gradients => {
            let angle = rng.random_range(0.0..std::f32::consts::TAU);
            let (dx, dy) = (angle.cos(), angle.sin());
            let lo = rng.random_range(0.0..0.4f32);
            let hi = rng.random_range(0.6..1.0f32);
            // project onto the direction, normalised so the ramp spans [lo, hi]
            let corners = [(0.0, 0.0), (s - 1.0, 0.0), (0.0, s - 1.0), (s - 1.0, s - 1.0)];
            let proj: Vec<f32> = corners.iter().map(|&(x, y)| x * dx + y * dy).collect();
            let pmin = proj.iter().copied().fold(f32::MAX, f32::min);
            let pmax = proj.iter().copied().fold(f32::MIN, f32::max);
            for y in 0..size {
                for x in 0..size {
                    let t = (x as f32 * dx + y as f32 * dy - pmin) / (pmax - pmin);
                    px[y * size + x] = lo + (hi - lo) * t;
                }
            }
        }
        SynthKind::Rectangles => {
            let bg = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
            px.fill(bg);
            let count = rng.random_range(1..=3);
            for _ in 0..count {
                let h = rng.random_range(1..=size.div_ceil(2).max(1));
                let w = rng.random_range(1..=size.div_ceil(2).max(1));
                let top = rng.random_range(0..=size - h);
                let left = rng.random_range(0..=size - w);
                let v = 1.0 - bg;
                for y in top..top + h {
                    for x in left..left + w {
                        px[y * size + x] = v;
                    }
                }
            }
        }
        SynthKind::Digits => {
            let bg = rng.random_range(0.0..0.3f32);
            let fg = rng.random_range(0.7..1.0f32);
            px.fill(bg);
            let segs = SEGMENTS[rng.random_range(0..10)];
            let t = (size / 8).max(1);
            let (x0, x1) = (size / 4, size - 1 - size / 4);
            let (y0, ym, y1) = (size / 8, size / 2, size - 1 - size / 8);
            let mut bar = |ya: usize, yb: usize, xa: usize, xb: usize| {
                for y in ya..=yb.min(size - 1) {
                    for x in xa..=xb.min(size - 1) {
                        px[y * size + x] = fg;
                    }
                }
            };
            let horizontal = [y0, 0, 0, y1, 0, 0, ym];
            for (i, &on) in segs.iter().enumerate() {
                if !on {
                    continue;
                }
                match i {
                    0 | 3 | 6 => {
                        let y = horizontal[i].saturating_sub(t / 2);
                        bar(y, y + t - 1, x0, x1)
                    }
                    1 => bar(y0, ym, x1 + 1 - t, x1),
                    2 => bar(ym, y1, x1 + 1 - t, x1),
                    4 => bar(ym, y1, x0, x0 + t - 1),
                    _ => bar(y0, ym, x0, x0 + t - 1),
                }
            }
        }
        SynthKind::Constant => px.fill(rng.random_range(0.1..0.9f32)),
    }
    px
}

/// `n` procedurally generated `size × size` images, replicated to `channels`.
pub fn synth_dataset(kind: SynthKind, n: usize, size: usize, channels: usize, seed: u64) -> Result<ImageSet> {
    if n == 0 || size < 4 {
        return Err(Error::Config(format!(
            "synthetic set needs n >= 1 and size >= 4 (got n={n}, size={size})"
        )));
    }
    if channels != 1 && channels != 3 {
        return Err(Error::Config(format!("channels must be 1 or 3, not {channels}")));
    }
    let mut rng = rng_from(seed);
    let images = (0..n)
        .map(|_| {
            let px = synth_one(kind, size, &mut rng);
            Image::new(1, size, size, px).and_then(|i| i.with_channels(channels))
        })
        .collect::<Result<Vec<_>>>()?;
    let labels = (0..n).map(|i| format!("{kind}-{i:05}")).collect();
    ImageSet::new(images, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn masked_count(clean: &Image, out: &Image, fill: f32) -> usize {
        (0..clean.height)
            .flat_map(|y| (0..clean.width).map(move |x| (y, x)))
            .filter(|&(y, x)| out.get(0, y, x) == fill && clean.get(0, y, x) != fill)
            .count()
    }

    #[test]
    fn center_mask_geometry() {
        let clean = Image::filled(3, 64, 64, 0.5);
        let spec = CorruptionSpec::new(Corruption::Center { side_fraction: 0.5 });
        let out = corrupt_image(&clean, &spec, &mut rng_from(0));
        assert_eq!(masked_count(&clean, &out, 0.0), 1024);
        for y in 0..64 {
            for x in 0..64 {
                let inside = (16..48).contains(&y) && (16..48).contains(&x);
                for c in 0..3 {
                    assert_eq!(out.get(c, y, x), if inside { 0.0 } else { 0.5 });
                }
            }
        }
    }

    #[test]
    fn pixel_mask_is_exact() {
        let clean = Image::filled(1, 64, 64, 0.5);
        let spec = CorruptionSpec::new(Corruption::Pixel { drop_probability: 0.8 });
        for seed in 0..5 {
            let out = corrupt_image(&clean, &spec, &mut rng_from(seed));
            assert_eq!(masked_count(&clean, &out, 0.0), 3276);
        }
    }

    #[test]
    fn half_mask_covers_half() {
        let clean = Image::filled(1, 8, 8, 0.5);
        let spec = CorruptionSpec::new(Corruption::Half);
        let mut rng = rng_from(0);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..64 {
            let out = corrupt_image(&clean, &spec, &mut rng);
            assert_eq!(masked_count(&clean, &out, 0.0), 32);
            seen.insert(out.data.iter().map(|&v| (v * 2.0) as u8).collect::<Vec<_>>());
        }
        assert_eq!(seen.len(), 4);
    }

    #[test]
    fn corrupt_leaves_input_and_is_deterministic() {
        let set = synth_dataset(SynthKind::Gradients, 4, 8, 1, 3).unwrap();
        let batch = stack(&set.images.iter().collect::<Vec<_>>()).unwrap();
        let copy = batch.clone();
        let spec = CorruptionSpec::new(Corruption::GaussianNoise { sigma: 30.0 });
        let a = corrupt(&batch, &spec, &mut rng_from(1));
        let b = corrupt(&batch, &spec, &mut rng_from(1));
        assert_eq!(batch, copy);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(corrupt(&batch, &CorruptionSpec::none(), &mut rng_from(1)), batch);
    }

    #[test]
    fn split_sizes_and_partition() {
        let set = synth_dataset(SynthKind::Constant, 10, 4, 1, 0).unwrap();
        let (a, b, c) = split(&set, [0.8, 0.1, 0.1], 5).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (8, 1, 1));
        let (a2, _, _) = split(&set, [0.8, 0.1, 0.1], 5).unwrap();
        assert_eq!(a, a2);
        let mut all: Vec<String> = [a.labels, b.labels, c.labels].concat();
        all.sort();
        assert_eq!(all, set.labels);
        assert!(split(&set, [0.95, 0.05, 0.0], 5).is_err());
        assert!(split(&set, [0.5, 0.1, 0.1], 5).is_err());
    }

    #[test]
    fn patches_stay_inside() {
        let img = Image::new(1, 8, 8, (0..64).map(|v| v as f32 / 63.0).collect()).unwrap();
        let patches = extract_patches(&img, 4, 100, &mut rng_from(0)).unwrap();
        for p in &patches {
            let first = (p.data[0] * 63.0).round() as usize;
            let (top, left) = (first / 8, first % 8);
            assert!(top <= 4 && left <= 4);
            assert_eq!(p, &img.crop(top, left, 4, 4).unwrap());
        }
        assert_eq!(extract_patches(&img, 4, 100, &mut rng_from(0)).unwrap(), patches);
        let whole = extract_patches(&img, 8, 3, &mut rng_from(1)).unwrap();
        assert!(whole.iter().all(|p| *p == img));
        assert!(extract_patches(&img, 9, 1, &mut rng_from(1)).is_err());
    }

    #[test]
    fn synthetic_sets() {
        let g = synth_dataset(SynthKind::Gradients, 4, 8, 1, 0).unwrap();
        assert_eq!(g.len(), 4);
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(g.images[i], g.images[j]);
            }
        }
        assert_eq!(synth_dataset(SynthKind::Gradients, 4, 8, 1, 0).unwrap(), g);
        let r = synth_dataset(SynthKind::Rectangles, 20, 8, 1, 1).unwrap();
        assert!(r.images.iter().flat_map(|i| &i.data).all(|&v| v == 0.0 || v == 1.0));
        let d = synth_dataset(SynthKind::Digits, 5, 16, 3, 1).unwrap();
        assert_eq!(d.channels(), Some(3));
        assert!(synth_dataset(SynthKind::Digits, 0, 16, 1, 1).is_err());
        assert!(synth_dataset(SynthKind::Digits, 1, 3, 1, 1).is_err());
    }

    #[test]
    fn corruption_strings() {
        let c: CorruptionSpec = "pixel".parse().unwrap();
        assert_eq!(c.variant, Corruption::Pixel { drop_probability: 0.8 });
        let c: CorruptionSpec = "gaussian:50".parse().unwrap();
        assert_eq!(c.to_string(), "gaussian:50");
        assert!("gaussian".parse::<CorruptionSpec>().is_err());
        assert!("center:1.5".parse::<CorruptionSpec>().is_err());
        assert!("blur".parse::<CorruptionSpec>().is_err());
    }

    #[test]
    fn png_round_trip_and_normalisation() {
        let dir = tempfile::tempdir().unwrap();
        let black = Image::filled(1, 4, 4, 0.0);
        let white = Image::filled(1, 4, 4, 1.0);
        black.save(&dir.path().join("a.png")).unwrap();
        white.save(&dir.path().join("b.png")).unwrap();
        std::fs::write(dir.path().join("c.png"), b"not an image").unwrap();
        std::fs::write(dir.path().join("notes.txt"), b"ignored").unwrap();
        let set = load_images(dir.path(), 1).unwrap();
        assert_eq!(set.labels, vec!["a.png", "b.png"]);
        assert!(set.images[0].data.iter().all(|&v| v == 0.0));
        assert!(set.images[1].data.iter().all(|&v| v == 1.0));
        let rgb = load_images(dir.path(), 3).unwrap();
        assert_eq!(rgb.channels(), Some(3));
        let empty = tempfile::tempdir().unwrap();
        assert!(load_images(empty.path(), 1).is_err());
    }
}
