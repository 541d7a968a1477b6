//! Datasets: IDX ingestion, stratified splits, synthetic blob corpora and
//! the binary dataset cache.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::framing::*;
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 8] = b"GUIDEDS1";

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

/// Images `(N, H, W, C)` in `[0, 1]` with labels in `[0, K)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(name: impl Into<String>, images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Data(format!("images must be (N, H, W, C), got {:?}", images.shape())));
        }
        if images.batch() != labels.len() {
            return Err(Error::Data(format!("{} images but {} labels", images.batch(), labels.len())));
        }
        if let Some(v) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("pixel value {v} outside [0, 1]")));
        }
        if let Some(y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Data(format!("label {y} outside [0, {num_classes})")));
        }
        Ok(Dataset { name: name.into(), images, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(H, W, C)`
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn image(&self, i: usize) -> Tensor {
        self.images.row_tensor(i)
    }

    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::Data("empty subset".into()));
        }
        Ok(Dataset {
            name: name.into(),
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        })
    }

    /// Images and labels of the given rows.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (self.images.select_rows(indices), indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(DATASET_MAGIC);
        write_str(&mut buf, &self.name)?;
        write_usize(&mut buf, self.num_classes)?;
        write_tensor(&mut buf, &self.images)?;
        let labels = Tensor::new(vec![self.len()], self.labels.iter().map(|&y| y as f64).collect())?;
        write_tensor(&mut buf, &labels)?;
        Ok(buf)
    }

    pub fn from_bytes(mut r: &[u8]) -> Result<Self> {
        expect_magic(&mut r, DATASET_MAGIC)?;
        let name = read_str(&mut r)?;
        let k = read_usize(&mut r)?;
        let images = read_tensor(&mut r)?;
        let labels = read_tensor(&mut r)?.data().iter().map(|&v| v as usize).collect();
        Dataset::new(name, images, labels, k)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Data(format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Data(format!("truncated {what} header")))
}

/// Load an IDX image/label pair. Pixels are scaled by 1/255.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = read_maybe_gz(images_path)?;
    let lab = read_maybe_gz(labels_path)?;
    let magic = be_u32(&img, 0, "image")?;
    if magic != IDX_IMAGES {
        return Err(Error::Data(format!("bad image magic {magic:#010x}")));
    }
    let magic = be_u32(&lab, 0, "label")?;
    if magic != IDX_LABELS {
        return Err(Error::Data(format!("bad label magic {magic:#010x}")));
    }
    let n = be_u32(&img, 4, "image")? as usize;
    let h = be_u32(&img, 8, "image")? as usize;
    let w = be_u32(&img, 12, "image")? as usize;
    let n_labels = be_u32(&lab, 4, "label")? as usize;
    if n != n_labels {
        return Err(Error::Data(format!("{n} images but {n_labels} labels")));
    }
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::Data("empty IDX file".into()));
    }
    let pixels = img
        .get(16..16 + n * h * w)
        .ok_or_else(|| Error::Data(format!("image payload truncated: need {} bytes", n * h * w)))?;
    let labels: Vec<usize> = lab
        .get(8..8 + n)
        .ok_or_else(|| Error::Data(format!("label payload truncated: need {n} bytes")))?
        .iter()
        .map(|&b| b as usize)
        .collect();
    let images = Tensor::new(vec![n, h, w, 1], pixels.iter().map(|&b| f64::from(b) / 255.0).collect())?;
    let k = labels.iter().max().map_or(1, |&m| m + 1);
    let name = images_path.file_name().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    Dataset::new(name, images, labels, k)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SplitSizes {
    /// Train/validation/test fractions of the dataset.
    Fractions([f64; 3]),
    Counts([usize; 3]),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub sizes: SplitSizes,
    pub stratified: bool,
    pub seed: u64,
}

impl SplitSpec {
    fn counts(&self, n: usize) -> Result<[usize; 3]> {
        let counts = match self.sizes {
            SplitSizes::Counts(c) => c,
            SplitSizes::Fractions(f) => {
                if f.iter().any(|v| !(0.0..=1.0).contains(v)) || f.iter().sum::<f64>() > 1.0 + 1e-9 {
                    return Err(Error::InvalidParam(format!("bad split fractions {f:?}")));
                }
                let mut c = f.map(|v| (v * n as f64 + 1e-9).floor() as usize);
                // fractions summing to one use every sample; the remainder goes to train
                if (f.iter().sum::<f64>() - 1.0).abs() < 1e-9 {
                    c[0] = n - c[1] - c[2];
                }
                c
            }
        };
        if counts.iter().sum::<usize>() > n {
            return Err(Error::InvalidParam(format!("split {counts:?} exceeds {n} samples")));
        }
        Ok(counts)
    }
}

/// Partition into (train, validation, test). Every partition must be
/// non-empty.
pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    let counts = spec.counts(ds.len())?;
    if counts.contains(&0) {
        return Err(Error::InvalidParam(format!("every partition needs samples, got {counts:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let order = if spec.stratified {
        let classes = ds.class_counts();
        if let Some((c, &have)) = classes.iter().enumerate().find(|(_, &n)| n > 0 && n < 3) {
            return Err(Error::Data(format!("class {c} has {have} samples, fewer than the 3 partitions")));
        }
        stratified_order(&ds.labels, ds.num_classes, &mut rng)
    } else {
        let mut idx: Vec<usize> = (0..ds.len()).collect();
        idx.shuffle(&mut rng);
        idx
    };
    let (train, rest) = order.split_at(counts[0]);
    let (val, rest) = rest.split_at(counts[1]);
    let test = &rest[..counts[2]];
    let base = &ds.name;
    Ok((
        ds.subset(train, format!("{base}/train"))?,
        ds.subset(val, format!("{base}/val"))?,
        ds.subset(test, format!("{base}/test"))?,
    ))
}

/// Stratified two-way partition, used for shift sets that only need a
/// validation and a test part.
pub fn holdout(ds: &Dataset, counts: [usize; 2], seed: u64) -> Result<(Dataset, Dataset)> {
    if counts.contains(&0) || counts[0] + counts[1] > ds.len() {
        return Err(Error::InvalidParam(format!("holdout {counts:?} from {} samples", ds.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = stratified_order(&ds.labels, ds.num_classes, &mut rng);
    let (first, rest) = order.split_at(counts[0]);
    let base = &ds.name;
    Ok((ds.subset(first, format!("{base}/val"))?, ds.subset(&rest[..counts[1]], format!("{base}/test"))?))
}

/// Interleave shuffled per-class index lists so that every prefix holds each
/// class in proportion to its frequency, within one sample.
fn stratified_order(labels: &[usize], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &y) in labels.iter().enumerate() {
        per_class[y].push(i);
    }
    let mut keyed = Vec::with_capacity(labels.len());
    for (c, members) in per_class.iter_mut().enumerate() {
        members.shuffle(rng);
        let n = members.len() as f64;
        for (j, &i) in members.iter().enumerate() {
            keyed.push(((j as f64 + 0.5) / n, c, i));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|(_, _, i)| i).collect()
}

/// Parameters of the synthetic blob corpus.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlobSpec {
    /// Gaussian blob width in pixels.
    pub radius: f64,
    /// Peak blob intensity.
    pub intensity: f64,
    /// Background noise amplitude; pixels get `U[0, noise)` added.
    pub noise: f64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        BlobSpec { radius: 1.5, intensity: 1.0, noise: 0.1 }
    }
}

/// Class `k` images carry a bright blob at the `k`-th point of a ring around
/// the image centre.
pub fn synth_blobs(seed: u64, n_per_class: usize, k: usize, side: usize, spec: &BlobSpec) -> Result<Dataset> {
    if k < 2 || n_per_class == 0 || side < 4 {
        return Err(Error::InvalidParam(format!(
            "synth_blobs needs K >= 2, n >= 1, side >= 4 (got {k}, {n_per_class}, {side})"
        )));
    }
    if spec.radius <= 0.0 || !(0.0..=1.0).contains(&spec.intensity) || !(0.0..=1.0).contains(&spec.noise) {
        return Err(Error::InvalidParam(format!("bad blob spec {spec:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mid = (side as f64 - 1.0) / 2.0;
    let ring = side as f64 * 0.3;
    let mut data = Vec::with_capacity(n_per_class * k * side * side);
    let mut labels = Vec::with_capacity(n_per_class * k);
    for _ in 0..n_per_class {
        for class in 0..k {
            let angle = std::f64::consts::TAU * class as f64 / k as f64;
            let (cy, cx) = (mid + ring * angle.sin(), mid + ring * angle.cos());
            for y in 0..side {
                for x in 0..side {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    let blob = spec.intensity * (-d2 / (2.0 * spec.radius * spec.radius)).exp();
                    let bg = if spec.noise > 0.0 { rng.random::<f64>() * spec.noise } else { 0.0 };
                    data.push((blob + bg).clamp(0.0, 1.0));
                }
            }
            labels.push(class);
        }
    }
    let images = Tensor::new(vec![labels.len(), side, side, 1], data)?;
    Dataset::new(format!("blobs-k{k}-s{seed}"), images, labels, k)
}
