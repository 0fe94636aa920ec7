//! Labeled images, patch datasets and batching.

mod pgm;
mod synth;

pub use pgm::{decode_pgm, encode_pgm, load_image, save_image, BitDepth};
pub use synth::{count_components, synth_membranes, SynthParams};

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Label of membrane-centred patches.
pub const MEMBRANE: usize = 1;
pub const BACKGROUND: usize = 0;

/// Grayscale image with intensities in `[0,1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::shape(format!(
                "{} values for a {width}x{height} image",
                data.len()
            )));
        }
        Ok(GrayImage { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        GrayImage {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Binary mask as a 0/1 image.
    pub fn from_mask(width: usize, height: usize, mask: &[u8]) -> Self {
        GrayImage {
            width,
            height,
            data: mask.iter().map(|&m| if m != 0 { 1.0 } else { 0.0 }).collect(),
        }
    }
}

/// An image together with its binary membrane annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: GrayImage,
    /// 1 for membrane pixels, 0 otherwise.
    pub labels: Vec<u8>,
}

impl LabeledImage {
    pub fn new(image: GrayImage, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != image.data.len() {
            return Err(Error::shape("label mask extents differ from the image"));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::input("label mask values must be 0 or 1"));
        }
        Ok(LabeledImage { image, labels })
    }

    /// Build from an image and a mask image, thresholding the mask at 0.5.
    pub fn from_mask_image(image: GrayImage, mask: &GrayImage) -> Result<Self> {
        if (mask.width, mask.height) != (image.width, image.height) {
            return Err(Error::shape(format!(
                "mask is {}x{}, image is {}x{}",
                mask.width, mask.height, image.width, image.height
            )));
        }
        let labels = mask.data.iter().map(|&v| u8::from(v >= 0.5)).collect();
        Ok(LabeledImage { image, labels })
    }

    pub fn membrane_fraction(&self) -> f64 {
        self.labels.iter().filter(|&&l| l == 1).count() as f64 / self.labels.len() as f64
    }
}

/// Map a possibly out-of-range coordinate into `0..n` by mirroring about
/// the image edges (edge pixel repeated: `-1 → 0`, `n → n-1`).
pub fn mirror_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Copy the `n×n` window centred on `(cx, cy)` (centre at offset `n/2`)
/// into `out`, mirroring at the borders. Returns whether mirroring was needed.
pub fn extract_patch(img: &GrayImage, cx: usize, cy: usize, n: usize, out: &mut [f64]) -> bool {
    let half = (n / 2) as isize;
    let (x0, y0) = (cx as isize - half, cy as isize - half);
    let inside = x0 >= 0
        && y0 >= 0
        && x0 + n as isize <= img.width as isize
        && y0 + n as isize <= img.height as isize;
    for dy in 0..n {
        let row = &mut out[dy * n..(dy + 1) * n];
        if inside {
            let start = (y0 as usize + dy) * img.width + x0 as usize;
            row.copy_from_slice(&img.data[start..start + n]);
        } else {
            let y = mirror_index(y0 + dy as isize, img.height);
            for (dx, v) in row.iter_mut().enumerate() {
                *v = img.get(mirror_index(x0 + dx as isize, img.width), y);
            }
        }
    }
    !inside
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            _ => None,
        }
    }
}

/// Pixel rectangle `x0..x1 × y0..y1` restricting patch centres.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Region {
    pub fn whole(img: &GrayImage) -> Self {
        Region {
            x0: 0,
            y0: 0,
            x1: img.width,
            y1: img.height,
        }
    }

    /// Top `fraction` of the rows and the remaining bottom rows.
    pub fn split_rows(img: &GrayImage, fraction: f64) -> (Region, Region) {
        let cut = ((img.height as f64 * fraction).round() as usize).clamp(1, img.height - 1);
        let mut top = Region::whole(img);
        let mut bottom = top;
        top.y1 = cut;
        bottom.y0 = cut;
        (top, bottom)
    }

    fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// A mini-batch of patches with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Labeled `n×n` patches, `N × 1 × n × n`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchDataset {
    pub patches: Tensor,
    pub labels: Vec<usize>,
    pub split: Split,
    /// Whether any patch needed mirror padding.
    pub mirrored: bool,
}

impl PatchDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn patch_size(&self) -> usize {
        self.patches.shape()[2]
    }

    pub fn positive_fraction(&self) -> f64 {
        self.labels.iter().filter(|&&l| l == MEMBRANE).count() as f64 / self.len() as f64
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        Ok(Batch {
            inputs: self.patches.select_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    /// Consecutive batches of at most `size` covering the whole set in order.
    pub fn chunks(&self, size: usize) -> Result<Vec<Batch>> {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(size.max(1)).map(|c| self.batch(c)).collect()
    }

    /// `count` batches of `size` distinct patches each (capped at the
    /// dataset size), drawn independently with a seeded generator.
    pub fn sample_batches(&self, count: usize, size: usize, seed: u64) -> Result<Vec<Batch>> {
        if count == 0 || size == 0 {
            return Err(Error::input("batch count and size must be positive"));
        }
        if self.is_empty() {
            return Err(Error::input("cannot sample from an empty dataset"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let size = size.min(self.len());
        (0..count)
            .map(|_| self.batch(&index::sample(&mut rng, self.len(), size).into_vec()))
            .collect()
    }

    /// Patch order for one epoch of training, derived from `(seed, epoch)`.
    pub fn epoch_order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Concatenate datasets of the same patch size and split.
    pub fn concat(parts: Vec<PatchDataset>) -> Result<PatchDataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::input("no datasets to concatenate"))?;
        let (n, split) = (first.patch_size(), first.split);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut mirrored = false;
        for p in parts {
            if p.patch_size() != n {
                return Err(Error::shape("datasets with different patch sizes"));
            }
            mirrored |= p.mirrored;
            labels.extend(p.labels);
            data.extend(p.patches.into_data());
        }
        Ok(PatchDataset {
            patches: Tensor::new(vec![labels.len(), 1, n, n], data)?,
            labels,
            split,
            mirrored,
        })
    }
}

/// Extract `per_class` membrane-centred and `per_class` background-centred
/// patches, sampled uniformly without replacement.
pub fn extract_patches(img: &LabeledImage, n: usize, per_class: usize, seed: u64) -> Result<PatchDataset> {
    extract_patches_in(img, n, per_class, seed, Region::whole(&img.image), Split::Train)
}

/// As [`extract_patches`], with patch centres restricted to `region`.
pub fn extract_patches_in(
    img: &LabeledImage,
    n: usize,
    per_class: usize,
    seed: u64,
    region: Region,
    split: Split,
) -> Result<PatchDataset> {
    if n == 0 || per_class == 0 {
        return Err(Error::input("patch size and per-class count must be positive"));
    }
    let w = img.image.width;
    let mut pools: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &l) in img.labels.iter().enumerate() {
        if region.contains(i % w, i / w) {
            pools[l as usize].push(i);
        }
    }
    for (class, pool) in pools.iter().enumerate() {
        if pool.len() < per_class {
            let name = if class == MEMBRANE { "membrane" } else { "background" };
            return Err(Error::input(format!(
                "need {per_class} {name} pixels, only {} available (short by {})",
                pool.len(),
                per_class - pool.len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks: Vec<(usize, usize)> = Vec::with_capacity(2 * per_class);
    for class in [MEMBRANE, BACKGROUND] {
        let pool = &pools[class];
        for k in index::sample(&mut rng, pool.len(), per_class) {
            picks.push((pool[k], class));
        }
    }
    picks.shuffle(&mut rng);

    let mut data = vec![0.0; picks.len() * n * n];
    let mut mirrored = false;
    for (slot, &(pix, _)) in picks.iter().enumerate() {
        mirrored |= extract_patch(&img.image, pix % w, pix / w, n, &mut data[slot * n * n..(slot + 1) * n * n]);
    }
    Ok(PatchDataset {
        patches: Tensor::new(vec![picks.len(), 1, n, n], data)?,
        labels: picks.iter().map(|&(_, c)| c).collect(),
        split,
        mirrored,
    })
}

/// One line of a dataset manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
    pub seed: u64,
}

/// Dataset manifest: `image,mask,split,seed` lines, `#` comments allowed.
/// Relative paths are resolved against the manifest's directory on load.
pub fn write_manifest(entries: &[ManifestEntry], header: &[String]) -> String {
    let mut s = String::new();
    for h in header {
        let _ = writeln!(s, "# {h}");
    }
    s.push_str("image,mask,split,seed\n");
    for e in entries {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            e.image.display(),
            e.mask.display(),
            e.split.name(),
            e.seed
        );
    }
    s
}

pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    let mut offset = 0;
    let mut seen_header = false;
    for line in text.split_inclusive('\n') {
        let here = offset;
        offset += line.len();
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !seen_header {
            if line != "image,mask,split,seed" {
                return Err(Error::format(here, "expected header `image,mask,split,seed`"));
            }
            seen_header = true;
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || Error::format(here, format!("malformed manifest line `{line}`"));
        if f.len() != 4 {
            return Err(bad());
        }
        let resolve = |p: &str| {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        out.push(ManifestEntry {
            image: resolve(f[0]),
            mask: resolve(f[1]),
            split: Split::parse(f[2]).ok_or_else(bad)?,
            seed: f[3].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}
