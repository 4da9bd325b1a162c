use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::config::{parse_kv, parse_value};
use crate::error::{Error, Result};
use crate::microtensor::{Shape4, Tensor4};

pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle,
    Disk,
    Stripes,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Rectangle, ShapeKind::Disk, ShapeKind::Stripes];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Disk => "disk",
            ShapeKind::Stripes => "stripes",
        }
    }

    fn base_color(self) -> [f64; 3] {
        match self {
            ShapeKind::Rectangle => [0.85, 0.25, 0.2],
            ShapeKind::Disk => [0.25, 0.8, 0.3],
            ShapeKind::Stripes => [0.3, 0.35, 0.9],
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown shape `{s}` (expected rectangle, disk or stripes)"
                ))
            })
    }
}

/// Synthetic segmentation task: coloured shapes on a graded background.
/// Class 0 is background; the i-th listed shape is class i + 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyDatasetSpec {
    pub num_images: usize,
    pub size: usize,
    pub num_classes: usize,
    pub shapes: Vec<ShapeKind>,
    pub noise: f64,
    pub seed: u64,
}

impl Default for ToyDatasetSpec {
    fn default() -> Self {
        Self {
            num_images: 100,
            size: 64,
            num_classes: 4,
            shapes: ShapeKind::ALL.to_vec(),
            noise: 0.05,
            seed: 0,
        }
    }
}

impl ToyDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || !self.size.is_multiple_of(32) {
            return Err(Error::invalid(format!(
                "image size {} is not a positive multiple of 32",
                self.size
            )));
        }
        if self.num_images == 0 {
            return Err(Error::invalid("dataset needs at least one image"));
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::invalid(format!(
                "{} classes is outside 2..=255",
                self.num_classes
            )));
        }
        if self.shapes.len() + 1 > self.num_classes {
            return Err(Error::invalid(format!(
                "{} shapes need at least {} classes",
                self.shapes.len(),
                self.shapes.len() + 1
            )));
        }
        if !self.noise.is_finite() || self.noise < 0.0 {
            return Err(Error::invalid("noise must be a non-negative number"));
        }
        Ok(())
    }

    /// Reads `key = value` lines; unspecified keys keep their defaults.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        for (key, value) in parse_kv(text)? {
            match key.as_str() {
                "num_images" => spec.num_images = parse_value(&key, &value)?,
                "size" => spec.size = parse_value(&key, &value)?,
                "num_classes" => spec.num_classes = parse_value(&key, &value)?,
                "noise" => spec.noise = parse_value(&key, &value)?,
                "seed" => spec.seed = parse_value(&key, &value)?,
                "shapes" => {
                    spec.shapes = if value.trim().is_empty() || value.trim() == "none" {
                        Vec::new()
                    } else {
                        value.split(',').map(str::parse).collect::<Result<_>>()?
                    }
                }
                other => return Err(Error::invalid(format!("unknown dataset key `{other}`"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_kv(&self) -> String {
        let shapes: Vec<&str> = self.shapes.iter().map(|s| s.name()).collect();
        format!(
            "num_images = {}\nsize = {}\nnum_classes = {}\nshapes = {}\nnoise = {}\nseed = {}\n",
            self.num_images,
            self.size,
            self.num_classes,
            if shapes.is_empty() {
                "none".to_string()
            } else {
                shapes.join(",")
            },
            self.noise,
            self.seed
        )
    }
}

/// Images `(3, size, size)` in [0, 1] with one label per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub size: usize,
    pub num_classes: usize,
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<Vec<u8>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            size: self.size,
            num_classes: self.num_classes,
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i].clone()).collect(),
        }
    }

    /// Pixel count per class over the whole dataset.
    pub fn class_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.num_classes];
        for l in self.labels.iter().flatten() {
            counts[*l as usize] += 1;
        }
        counts
    }

    /// Stacks the selected images into a batch, cropping each to
    /// `crop × crop` at the given top-left offsets.
    pub fn batch(
        &self,
        idx: &[usize],
        crop: usize,
        offsets: &[(usize, usize)],
    ) -> Result<(Tensor4, Vec<u8>)> {
        if crop > self.size || offsets.len() != idx.len() {
            return Err(Error::invalid(
                "crop larger than the image or offset count mismatch",
            ));
        }
        let plane = self.size * self.size;
        let mut data = Vec::with_capacity(idx.len() * IMAGE_CHANNELS * crop * crop);
        let mut labels = Vec::with_capacity(idx.len() * crop * crop);
        for (&i, &(oy, ox)) in idx.iter().zip(offsets) {
            if oy + crop > self.size || ox + crop > self.size {
                return Err(Error::invalid("crop window leaves the image"));
            }
            for c in 0..IMAGE_CHANNELS {
                for y in oy..oy + crop {
                    let row = c * plane + y * self.size;
                    data.extend_from_slice(&self.images[i][row + ox..row + ox + crop]);
                }
            }
            for y in oy..oy + crop {
                labels.extend_from_slice(
                    &self.labels[i][y * self.size + ox..y * self.size + ox + crop],
                );
            }
        }
        Ok((
            Tensor4::from_vec(Shape4::new(idx.len(), IMAGE_CHANNELS, crop, crop), data)?,
            labels,
        ))
    }

    /// Writes `index.json`, `images.bin` (little-endian f64) and
    /// `labels.bin` (u8) into `dir`; returns the files written.
    pub fn save(
        &self,
        dir: &Path,
        spec: Option<&ToyDatasetSpec>,
    ) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut img = Vec::with_capacity(self.len() * IMAGE_CHANNELS * self.size * self.size * 8);
        for v in self.images.iter().flatten() {
            img.extend_from_slice(&v.to_le_bytes());
        }
        let lab: Vec<u8> = self.labels.iter().flatten().copied().collect();
        let index = DatasetIndex {
            format: DATASET_FORMAT.into(),
            num_images: self.len(),
            channels: IMAGE_CHANNELS,
            height: self.size,
            width: self.size,
            num_classes: self.num_classes,
            images: "images.bin".into(),
            labels: "labels.bin".into(),
            images_sha256: crate::decoder::sha256_hex(&img),
            labels_sha256: crate::decoder::sha256_hex(&lab),
            spec: spec.cloned(),
        };
        let paths = [
            dir.join("images.bin"),
            dir.join("labels.bin"),
            dir.join("index.json"),
        ];
        std::fs::write(&paths[0], &img)?;
        std::fs::write(&paths[1], &lab)?;
        std::fs::write(&paths[2], serde_json::to_string_pretty(&index)? + "\n")?;
        Ok(paths.to_vec())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let index: DatasetIndex =
            serde_json::from_str(&std::fs::read_to_string(dir.join("index.json"))?)?;
        if index.format != DATASET_FORMAT {
            return Err(Error::validation(format!(
                "unknown dataset format `{}`",
                index.format
            )));
        }
        if index.channels != IMAGE_CHANNELS || index.height != index.width {
            return Err(Error::validation(
                "dataset must hold square 3-channel images",
            ));
        }
        let img = std::fs::read(dir.join(&index.images))?;
        let lab = std::fs::read(dir.join(&index.labels))?;
        if crate::decoder::sha256_hex(&img) != index.images_sha256
            || crate::decoder::sha256_hex(&lab) != index.labels_sha256
        {
            return Err(Error::validation(
                "dataset files do not match their recorded checksums",
            ));
        }
        let plane = index.height * index.width;
        if img.len() != index.num_images * IMAGE_CHANNELS * plane * 8
            || lab.len() != index.num_images * plane
        {
            return Err(Error::validation("dataset files have the wrong length"));
        }
        let values: Vec<f64> = img
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if lab.iter().any(|&l| l as usize >= index.num_classes) {
            return Err(Error::validation("label outside the class range"));
        }
        Ok(Dataset {
            size: index.height,
            num_classes: index.num_classes,
            images: values
                .chunks_exact(IMAGE_CHANNELS * plane)
                .map(<[f64]>::to_vec)
                .collect(),
            labels: lab.chunks_exact(plane).map(<[u8]>::to_vec).collect(),
        })
    }
}

const DATASET_FORMAT: &str = "hiernas-dataset-v1";

#[derive(Serialize, Deserialize)]
struct DatasetIndex {
    format: String,
    num_images: usize,
    channels: usize,
    height: usize,
    width: usize,
    num_classes: usize,
    images: String,
    labels: String,
    images_sha256: String,
    labels_sha256: String,
    #[serde(default)]
    spec: Option<ToyDatasetSpec>,
}

fn paint(
    img: &mut [f64],
    labels: &mut [u8],
    size: usize,
    class: u8,
    color: [f64; 3],
    inside: impl Fn(usize, usize) -> Option<bool>,
) {
    let plane = size * size;
    for y in 0..size {
        for x in 0..size {
            // Some(true): shape colour; Some(false): inside the region but unpainted
            if let Some(painted) = inside(y, x) {
                labels[y * size + x] = class;
                if painted {
                    for c in 0..IMAGE_CHANNELS {
                        img[c * plane + y * size + x] = color[c];
                    }
                }
            }
        }
    }
}

/// Deterministic synthetic dataset for `spec`.
pub fn gen_toy_dataset(spec: &ToyDatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.size;
    let plane = n * n;
    let scale = n as f64 / 64.0;
    let mut images = Vec::with_capacity(spec.num_images);
    let mut labels = Vec::with_capacity(spec.num_images);
    for _ in 0..spec.num_images {
        let mut img = vec![0.0; IMAGE_CHANNELS * plane];
        let mut lab = vec![0u8; plane];
        let bg: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.15..0.55));
        let (gy, gx) = (rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15));
        for c in 0..IMAGE_CHANNELS {
            for y in 0..n {
                for x in 0..n {
                    img[c * plane + y * n + x] =
                        bg[c] + gy * (y as f64 / n as f64 - 0.5) + gx * (x as f64 / n as f64 - 0.5);
                }
            }
        }
        if !spec.shapes.is_empty() {
            let count = rng.gen_range(2..=3);
            for _ in 0..count {
                let k = rng.gen_range(0..spec.shapes.len());
                let kind = spec.shapes[k];
                let class = (k + 1) as u8;
                let base = kind.base_color();
                let color: [f64; 3] =
                    std::array::from_fn(|c| (base[c] + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0));
                let len = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
                    ((rng.gen_range(lo..hi) * scale) as usize).max(2)
                };
                match kind {
                    ShapeKind::Rectangle => {
                        let (h, w) = (len(&mut rng, 10.0, 30.0), len(&mut rng, 10.0, 30.0));
                        let (y0, x0) = (rng.gen_range(0..n - h), rng.gen_range(0..n - w));
                        paint(&mut img, &mut lab, n, class, color, |y, x| {
                            (y >= y0 && y < y0 + h && x >= x0 && x < x0 + w).then_some(true)
                        });
                    }
                    ShapeKind::Disk => {
                        let r = rng.gen_range(5.0..13.0) * scale;
                        let (cy, cx) = (
                            rng.gen_range(r..n as f64 - r),
                            rng.gen_range(r..n as f64 - r),
                        );
                        paint(&mut img, &mut lab, n, class, color, |y, x| {
                            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                            (dy * dy + dx * dx <= r * r).then_some(true)
                        });
                    }
                    ShapeKind::Stripes => {
                        let (h, w) = (len(&mut rng, 16.0, 36.0), len(&mut rng, 16.0, 36.0));
                        let (y0, x0) = (rng.gen_range(0..n - h), rng.gen_range(0..n - w));
                        let vertical = rng.gen_bool(0.5);
                        let period = ((4.0 * scale) as usize).max(2);
                        paint(&mut img, &mut lab, n, class, color, |y, x| {
                            if y >= y0 && y < y0 + h && x >= x0 && x < x0 + w {
                                let t = if vertical { x - x0 } else { y - y0 };
                                Some(t % period < period / 2)
                            } else {
                                None
                            }
                        });
                    }
                }
            }
        }
        for v in &mut img {
            *v = (*v + spec.noise * rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0);
        }
        images.push(img);
        labels.push(lab);
    }
    Ok(Dataset {
        size: n,
        num_classes: spec.num_classes,
        images,
        labels,
    })
}

/// Shuffled index split into two disjoint halves (the first gets the odd
/// item), deterministic per seed.
pub fn split_indices(n: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::invalid(format!(
            "cannot split {n} item(s) into two non-empty halves"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let b = idx.split_off(n.div_ceil(2));
    Ok((idx, b))
}

/// Splits a dataset into trainA and trainB.
pub fn split_train(dataset: &Dataset, seed: u64) -> Result<(Dataset, Dataset)> {
    let (a, b) = split_indices(dataset.len(), seed)?;
    Ok((dataset.subset(&a), dataset.subset(&b)))
}
