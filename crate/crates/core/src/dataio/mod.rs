//! Image-folder ingestion, the synthetic corpus and the shuffled batch stream.

mod synthetic;

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CmidError, Result};

pub use synthetic::{make_synthetic, SyntheticSpec};

pub const LABELS_FILE: &str = "labels.csv";

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Channel-major (`C x H x W`) image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), channels * height * width, "image buffer size");
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.idx(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.idx(c, y, x);
        self.data[i] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    /// True when every value is finite and inside `[0, 1]`.
    pub fn is_valid(&self) -> bool {
        (self.channels == 1 || self.channels == 3)
            && self.data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }

    pub fn from_dynamic(img: &image::DynamicImage, channels: usize) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Image::filled(channels, h, w, 0.0);
        if channels == 1 {
            let g = img.to_luma8();
            for (x, y, p) in g.enumerate_pixels() {
                out.set(0, y as usize, x as usize, p[0] as f32 / 255.0);
            }
        } else {
            let rgb = img.to_rgb8();
            for (x, y, p) in rgb.enumerate_pixels() {
                for c in 0..3 {
                    out.set(c, y as usize, x as usize, p[c] as f32 / 255.0);
                }
            }
        }
        out
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c: usize| {
                let c = if self.channels == 1 { 0 } else { c };
                (self.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8
            };
            image::Rgb([px(0), px(1), px(2)])
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub pixels: Image,
    pub label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    /// Path relative to the manifest root.
    pub path: PathBuf,
    pub label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestEntry>,
    pub class_names: Option<Vec<String>>,
    /// Files with an image extension that could not be read.
    pub skipped: usize,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labeled(&self) -> usize {
        self.records.iter().filter(|r| r.label.is_some()).count()
    }

    /// Returns a manifest over the same root holding the selected records.
    pub fn subset(&self, indices: impl IntoIterator<Item = usize>) -> DatasetManifest {
        DatasetManifest {
            root: self.root.clone(),
            records: indices.into_iter().map(|i| self.records[i].clone()).collect(),
            class_names: self.class_names.clone(),
            skipped: 0,
        }
    }

    /// Deterministic split: every record whose position in a seeded
    /// permutation falls below `holdout` goes to the second manifest.
    pub fn split(&self, holdout: usize, seed: u64) -> (DatasetManifest, DatasetManifest) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let holdout = holdout.min(self.len());
        let mut test: Vec<usize> = order[..holdout].to_vec();
        let mut train: Vec<usize> = order[holdout..].to_vec();
        test.sort_unstable();
        train.sort_unstable();
        (self.subset(train), self.subset(test))
    }

    pub fn load(&self, index: usize, channels: usize, resize_to: usize) -> Result<ImageRecord> {
        let entry = &self.records[index];
        let pixels = load_image(&self.root.join(&entry.path), channels, resize_to)?;
        Ok(ImageRecord {
            id: entry.id.clone(),
            pixels,
            label: entry.label,
        })
    }
}

pub fn load_image(path: &Path, channels: usize, resize_to: usize) -> Result<Image> {
    let img = image::ImageReader::open(path)
        .map_err(|e| CmidError::io(path, e))?
        .with_guessed_format()
        .map_err(|e| CmidError::io(path, e))?
        .decode()?;
    let img = if img.width() as usize != resize_to || img.height() as usize != resize_to {
        img.resize_exact(resize_to as u32, resize_to as u32, FilterType::Triangle)
    } else {
        img
    };
    Ok(Image::from_dynamic(&img, channels))
}

pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    img.to_rgb8()
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(CmidError::from)
}

/// Lists every readable image under `root` (recursively), ordered by id.
/// Labels come from an optional `labels.csv` with an `id,label` header.
pub fn scan_folder(root: &Path) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(CmidError::Dataset(format!("{} is not a directory", root.display())));
    }
    let mut files = Vec::new();
    collect_images(root, root, &mut files)?;
    let mut records = Vec::new();
    let mut skipped = 0;
    for rel in files {
        let full = root.join(&rel);
        let readable = image::ImageReader::open(&full)
            .and_then(|r| r.with_guessed_format())
            .ok()
            .and_then(|r| r.into_dimensions().ok())
            .is_some();
        if !readable {
            log::warn!("skipping unreadable image {}", full.display());
            skipped += 1;
            continue;
        }
        let id = rel.with_extension("").to_string_lossy().replace('\\', "/");
        records.push(ManifestEntry {
            id,
            path: rel,
            label: None,
        });
    }
    if records.is_empty() {
        return Err(CmidError::Dataset(format!(
            "no readable images under {}",
            root.display()
        )));
    }
    records.sort_by(|a, b| a.id.cmp(&b.id));
    let mut seen = HashSet::new();
    for r in &records {
        if !seen.insert(r.id.as_str()) {
            return Err(CmidError::Dataset(format!("duplicate image id {}", r.id)));
        }
    }

    let mut class_names = None;
    let labels_path = root.join(LABELS_FILE);
    if labels_path.is_file() {
        let raw = read_labels(&labels_path)?;
        let numeric: Option<BTreeMap<String, usize>> = raw
            .iter()
            .map(|(id, l)| l.trim().parse::<usize>().ok().map(|v| (id.clone(), v)))
            .collect();
        let labels = match numeric {
            Some(map) => map,
            None => {
                let mut names: Vec<String> = raw.values().cloned().collect();
                names.sort();
                names.dedup();
                let map = raw
                    .iter()
                    .map(|(id, l)| (id.clone(), names.binary_search(l).expect("name present")))
                    .collect();
                class_names = Some(names);
                map
            }
        };
        for r in &mut records {
            r.label = labels.get(&r.id).copied();
        }
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        records,
        class_names,
        skipped,
    })
}

fn collect_images(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| CmidError::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| CmidError::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_images(root, &path, out)?;
        } else if path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        {
            out.push(path.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

fn read_labels(path: &Path) -> Result<BTreeMap<String, String>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = BTreeMap::new();
    for row in reader.records() {
        let row = row?;
        if let (Some(id), Some(label)) = (row.get(0), row.get(1)) {
            out.insert(id.trim().to_string(), label.trim().to_string());
        }
    }
    Ok(out)
}

/// Shuffled epochs of decoded, resized images. The shuffle for epoch `e`
/// depends only on the stream seed and `e`, so a run can resume mid-way.
pub struct BatchStream {
    manifest: DatasetManifest,
    batch_size: usize,
    resize_to: usize,
    channels: usize,
    seed: u64,
    cache: Option<Vec<Option<Image>>>,
    skipped: usize,
}

impl BatchStream {
    pub fn new(
        manifest: DatasetManifest,
        batch_size: usize,
        resize_to: usize,
        channels: usize,
        seed: u64,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(CmidError::Parameter("batch_size must be at least 1".into()));
        }
        Ok(Self {
            manifest,
            batch_size,
            resize_to,
            channels,
            seed,
            cache: None,
            skipped: 0,
        })
    }

    /// Keeps decoded images in memory after the first pass.
    pub fn with_cache(mut self) -> Self {
        self.cache = Some(vec![None; self.manifest.len()]);
        self
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    /// Records that failed to decode so far.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    /// Full batches per epoch; the partial tail is dropped.
    pub fn batches_per_epoch(&self) -> usize {
        self.manifest.len() / self.batch_size
    }

    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        let mut order: Vec<usize> = (0..self.manifest.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    fn fetch(&mut self, index: usize) -> Option<ImageRecord> {
        if let Some(Some(img)) = self.cache.as_ref().map(|c| c[index].clone()) {
            let e = &self.manifest.records[index];
            return Some(ImageRecord {
                id: e.id.clone(),
                pixels: img,
                label: e.label,
            });
        }
        match self.manifest.load(index, self.channels, self.resize_to) {
            Ok(rec) => {
                if let Some(cache) = self.cache.as_mut() {
                    cache[index] = Some(rec.pixels.clone());
                }
                Some(rec)
            }
            Err(err) => {
                log::warn!("skipping {}: {err}", self.manifest.records[index].id);
                self.skipped += 1;
                None
            }
        }
    }

    /// Decodes the batches of one epoch lazily, starting at batch `skip`.
    /// Skipped batches are not decoded.
    pub fn epoch_batches(&mut self, epoch: u64, skip: usize) -> EpochBatches<'_> {
        let order = self.epoch_order(epoch);
        let limit = self.batches_per_epoch();
        let pos = (skip * self.batch_size).min(order.len());
        EpochBatches {
            stream: self,
            order,
            pos,
            emitted: skip.min(limit),
            limit,
        }
    }

    /// Same batches as [`BatchStream::epoch_batches`], decoded `depth`
    /// batches ahead on a worker thread. Yield order is unaffected.
    pub fn epoch_prefetched(
        &self,
        epoch: u64,
        depth: usize,
    ) -> impl Iterator<Item = Vec<ImageRecord>> {
        let order = self.epoch_order(epoch);
        let manifest = self.manifest.clone();
        let (batch_size, channels, resize_to) = (self.batch_size, self.channels, self.resize_to);
        let limit = self.batches_per_epoch();
        let (tx, rx) = mpsc::sync_channel(depth.max(1));
        std::thread::spawn(move || {
            let mut current = Vec::with_capacity(batch_size);
            let mut emitted = 0;
            for index in order {
                if emitted >= limit {
                    break;
                }
                match manifest.load(index, channels, resize_to) {
                    Ok(rec) => current.push(rec),
                    Err(err) => log::warn!("skipping {}: {err}", manifest.records[index].id),
                }
                if current.len() == batch_size {
                    if tx.send(std::mem::take(&mut current)).is_err() {
                        return;
                    }
                    emitted += 1;
                }
            }
        });
        rx.into_iter()
    }
}

/// Lazy batch iterator over one epoch of a [`BatchStream`].
pub struct EpochBatches<'a> {
    stream: &'a mut BatchStream,
    order: Vec<usize>,
    pos: usize,
    emitted: usize,
    limit: usize,
}

impl Iterator for EpochBatches<'_> {
    type Item = Vec<ImageRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.emitted >= self.limit {
            return None;
        }
        let size = self.stream.batch_size;
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            let index = *self.order.get(self.pos)?;
            self.pos += 1;
            if let Some(rec) = self.stream.fetch(index) {
                batch.push(rec);
            }
        }
        self.emitted += 1;
        Some(batch)
    }
}

/// Convenience constructor drawing the stream seed from `rng`.
pub fn batches(
    manifest: &DatasetManifest,
    batch_size: usize,
    rng: &mut impl Rng,
    resize_to: usize,
) -> Result<BatchStream> {
    BatchStream::new(manifest.clone(), batch_size, resize_to, 3, rng.gen())
}
