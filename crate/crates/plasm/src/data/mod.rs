//! Dataset ingestion, deterministic stratified splitting, and preprocessing.
//!
//! The on-disk layout is the NIH corpus convention: a root folder with
//! `Parasitized/` and `Uninfected/` subdirectories of PNG cell images.
//! Ingestion sorts by relative path so ordering never depends on filesystem
//! enumeration order, and splits are a pure function of (file set, seed).

pub mod synth;

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PARASITIZED_DIR: &str = "Parasitized";
pub const UNINFECTED_DIR: &str = "Uninfected";

/// Default desk-scale training resolution.
pub const DEFAULT_IMAGE_SIZE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ClassLabel {
    Uninfected,
    Parasitized,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 2] = [ClassLabel::Uninfected, ClassLabel::Parasitized];

    /// Parasitized is the positive class.
    pub fn as_f64(self) -> f64 {
        match self {
            ClassLabel::Uninfected => 0.0,
            ClassLabel::Parasitized => 1.0,
        }
    }

    pub fn folder(self) -> &'static str {
        match self {
            ClassLabel::Uninfected => UNINFECTED_DIR,
            ClassLabel::Parasitized => PARASITIZED_DIR,
        }
    }

    fn parse(text: &str) -> Result<Self> {
        match text {
            "uninfected" => Ok(ClassLabel::Uninfected),
            "parasitized" => Ok(ClassLabel::Parasitized),
            other => Err(Error::Data(format!("unknown class {other:?}"))),
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClassLabel::Uninfected => write!(f, "uninfected"),
            ClassLabel::Parasitized => write!(f, "parasitized"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
    Validation,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Test, Split::Validation];

    fn parse(text: &str) -> Result<Self> {
        match text {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "validation" => Ok(Split::Validation),
            other => Err(Error::Data(format!("unknown split {other:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
            Split::Validation => write!(f, "validation"),
        }
    }
}

/// One image with its hard class label. Pixel values lie in [0,1]; soft labels
/// only ever arise downstream through augmentation.
#[derive(Debug, Clone)]
pub struct LabeledSample {
    /// [C,H,W] with values in [0,1].
    pub image: Tensor,
    pub label: ClassLabel,
    /// Stable identifier; for folder ingestion, the path relative to the root.
    pub source_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub path: String,
    pub class: ClassLabel,
    pub split: Split,
}

/// Deterministic record of which sample landed in which split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    pub ratios: (u32, u32, u32),
    pub seed: u64,
}

impl DatasetManifest {
    /// Per-class, per-split counts, indexed [uninfected|parasitized][train|test|validation].
    pub fn counts(&self) -> [[usize; 3]; 2] {
        let mut counts = [[0usize; 3]; 2];
        for r in &self.records {
            let ci = match r.class {
                ClassLabel::Uninfected => 0,
                ClassLabel::Parasitized => 1,
            };
            let si = match r.split {
                Split::Train => 0,
                Split::Test => 1,
                Split::Validation => 2,
            };
            counts[ci][si] += 1;
        }
        counts
    }

    /// Line-delimited `path<TAB>class<TAB>split`, prefixed by a ratio/seed line.
    pub fn to_tsv(&self) -> String {
        let mut out = format!(
            "#ratios={}:{}:{}\tseed={}\n",
            self.ratios.0, self.ratios.1, self.ratios.2, self.seed
        );
        for r in &self.records {
            out.push_str(&format!("{}\t{}\t{}\n", r.path, r.class, r.split));
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Data("empty manifest".into()))?;
        let rest = header
            .strip_prefix("#ratios=")
            .ok_or_else(|| Error::Data("manifest missing ratio header".into()))?;
        let (ratios_text, seed_text) = rest
            .split_once("\tseed=")
            .ok_or_else(|| Error::Data("manifest missing seed".into()))?;
        let parts: Vec<u32> = ratios_text
            .split(':')
            .map(|p| p.parse().map_err(|_| Error::Data("bad ratio".into())))
            .collect::<Result<_>>()?;
        if parts.len() != 3 {
            return Err(Error::Data("manifest needs three ratios".into()));
        }
        let seed = seed_text
            .parse()
            .map_err(|_| Error::Data("bad manifest seed".into()))?;

        let mut records = Vec::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::Data(format!("bad manifest line {line:?}")));
            }
            records.push(ManifestRecord {
                path: fields[0].to_string(),
                class: ClassLabel::parse(fields[1])?,
                split: Split::parse(fields[2])?,
            });
        }
        Ok(DatasetManifest {
            records,
            ratios: (parts[0], parts[1], parts[2]),
            seed,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text)
    }

    /// Short content hash of the manifest bytes (CRC-32, hex).
    pub fn hash(&self) -> String {
        format!("{:08x}", crc32fast::hash(self.to_tsv().as_bytes()))
    }
}

/// Largest-remainder allocation of `n` items over integer ratio parts.
fn allocate(n: usize, ratios: (u32, u32, u32)) -> [usize; 3] {
    let parts = [ratios.0 as f64, ratios.1 as f64, ratios.2 as f64];
    let total: f64 = parts.iter().sum();
    let exact: Vec<f64> = parts.iter().map(|p| n as f64 * p / total).collect();
    let mut alloc: Vec<usize> = exact.iter().map(|&e| e.floor() as usize).collect();
    let mut leftover = n - alloc.iter().sum::<usize>();
    // Distribute leftovers to the largest fractional parts; ties favor the
    // earlier split in (train, test, validation) order.
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in &order {
        if leftover == 0 {
            break;
        }
        alloc[i] += 1;
        leftover -= 1;
    }
    [alloc[0], alloc[1], alloc[2]]
}

/// Stratified split: per class, shuffle by seed and assign contiguously in
/// (train, test, validation) order using largest-remainder allocation.
pub fn split_dataset(
    samples: &[LabeledSample],
    ratios: (u32, u32, u32),
    seed: u64,
) -> Result<DatasetManifest> {
    if ratios.0 == 0 || ratios.1 == 0 || ratios.2 == 0 {
        return Err(Error::InvalidInput(
            "split ratios must all be positive".into(),
        ));
    }
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, s) in samples.iter().enumerate() {
        let ci = match s.label {
            ClassLabel::Uninfected => 0,
            ClassLabel::Parasitized => 1,
        };
        by_class[ci].push(i);
    }
    for (ci, class) in ClassLabel::ALL.iter().enumerate() {
        if by_class[ci].is_empty() {
            return Err(Error::InvalidInput(format!("class {class} has no samples")));
        }
        if by_class[ci].len() < 10 {
            return Err(Error::InvalidInput(format!(
                "class {class} has {} samples; at least 10 per class are required for stratification",
                by_class[ci].len()
            )));
        }
    }

    let mut assignment: Vec<Option<Split>> = vec![None; samples.len()];
    for (ci, indices) in by_class.iter().enumerate() {
        // Sort by id first so the split depends on the file set, not the
        // caller's ordering.
        let mut indices = indices.clone();
        indices.sort_by(|&a, &b| samples[a].source_id.cmp(&samples[b].source_id));
        let mut rng = crate::rng::stream(seed, &[0x73706c6974, ci as u64]); // "split"
        indices.shuffle(&mut rng);
        let alloc = allocate(indices.len(), ratios);
        let mut cursor = 0;
        for (si, &count) in alloc.iter().enumerate() {
            for &sample_idx in &indices[cursor..cursor + count] {
                assignment[sample_idx] = Some(Split::ALL[si]);
            }
            cursor += count;
        }
    }

    let mut records: Vec<ManifestRecord> = samples
        .iter()
        .zip(assignment.iter())
        .map(|(s, split)| ManifestRecord {
            path: s.source_id.clone(),
            class: s.label,
            split: split.expect("every sample assigned"),
        })
        .collect();
    records.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(DatasetManifest {
        records,
        ratios,
        seed,
    })
}

/// Samples of one split, with a counter over read accesses so tests can prove
/// a split was never touched.
#[derive(Debug, Default)]
pub struct SplitData {
    samples: Vec<LabeledSample>,
    reads: AtomicUsize,
}

impl SplitData {
    pub fn new(samples: Vec<LabeledSample>) -> Self {
        SplitData {
            samples,
            reads: AtomicUsize::new(0),
        }
    }

    /// Access the samples, bumping the read counter.
    pub fn samples(&self) -> &[LabeledSample] {
        self.reads.fetch_add(1, Ordering::Relaxed);
        &self.samples
    }

    /// Size without counting as a read.
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn read_count(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Default)]
pub struct DatasetSplits {
    pub train: SplitData,
    pub test: SplitData,
    pub validation: SplitData,
}

/// Partition samples according to a manifest (matched by source id).
pub fn apply_manifest(
    samples: Vec<LabeledSample>,
    manifest: &DatasetManifest,
) -> Result<DatasetSplits> {
    use std::collections::HashMap;
    let index: HashMap<&str, Split> = manifest
        .records
        .iter()
        .map(|r| (r.path.as_str(), r.split))
        .collect();
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut validation = Vec::new();
    for sample in samples {
        match index.get(sample.source_id.as_str()) {
            Some(Split::Train) => train.push(sample),
            Some(Split::Test) => test.push(sample),
            Some(Split::Validation) => validation.push(sample),
            None => {
                return Err(Error::Data(format!(
                    "sample {:?} is not in the manifest",
                    sample.source_id
                )))
            }
        }
    }
    Ok(DatasetSplits {
        train: SplitData::new(train),
        test: SplitData::new(test),
        validation: SplitData::new(validation),
    })
}

#[derive(Debug)]
pub struct IngestError {
    pub path: PathBuf,
    pub message: String,
}

#[derive(Debug, Default)]
pub struct LoadOutcome {
    pub samples: Vec<LabeledSample>,
    pub errors: Vec<IngestError>,
}

/// Load the `Parasitized/` + `Uninfected/` folder layout under `root`,
/// decoding PNGs, resizing to `target_size`, and scaling to [0,1]. Unreadable
/// files are recorded per path and skipped; a class with no usable images is a
/// fatal layout error. Ordering is lexicographic by relative path.
pub fn load_image_folder(root: &Path, target_size: usize) -> Result<LoadOutcome> {
    let mut outcome = LoadOutcome::default();
    for class in ClassLabel::ALL {
        let dir = root.join(class.folder());
        let entries = std::fs::read_dir(&dir).map_err(|_| {
            Error::Data(format!(
                "dataset root {} is missing the {}/ folder",
                root.display(),
                class.folder()
            ))
        })?;
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("png"))
            })
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Data(format!(
                "class folder {} contains no PNG images",
                dir.display()
            )));
        }
        let mut loaded_any = false;
        for path in paths {
            let rel = format!(
                "{}/{}",
                class.folder(),
                path.file_name().unwrap_or_default().to_string_lossy()
            );
            match load_png(&path, target_size) {
                Ok(image) => {
                    outcome.samples.push(LabeledSample {
                        image,
                        label: class,
                        source_id: rel,
                    });
                    loaded_any = true;
                }
                Err(e) => outcome.errors.push(IngestError {
                    path,
                    message: e.to_string(),
                }),
            }
        }
        if !loaded_any {
            return Err(Error::Data(format!(
                "class folder {} has no decodable images",
                dir.display()
            )));
        }
    }
    outcome
        .samples
        .sort_by(|a, b| a.source_id.cmp(&b.source_id));
    Ok(outcome)
}

fn load_png(path: &Path, target_size: usize) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("cannot decode {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, pixel) in img.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        for c in 0..3 {
            data[c * h * w + y * w + x] = pixel.0[c] as f64 / 255.0;
        }
    }
    let tensor = Tensor::new(vec![3, h, w], data)?;
    preprocess(&tensor, target_size)
}

/// Bilinear resize of a [C,H,W] image to target x target, values kept in [0,1].
/// Already-sized images pass through pixel-identical.
pub fn preprocess(image: &Tensor, target: usize) -> Result<Tensor> {
    if image.rank() != 3 {
        return Err(Error::InvalidInput(format!(
            "preprocess expects [C,H,W], got {:?}",
            image.shape()
        )));
    }
    if target == 0 {
        return Err(Error::InvalidInput("target size must be >= 1".into()));
    }
    let (c, h, w) = (image.dim(0), image.dim(1), image.dim(2));
    if h == target && w == target {
        return Ok(image.clone());
    }

    let src = image.data();
    let mut out = vec![0.0; c * target * target];
    let scale_y = h as f64 / target as f64;
    let scale_x = w as f64 / target as f64;
    for ci in 0..c {
        let plane = &src[ci * h * w..][..h * w];
        for ty in 0..target {
            let sy = ((ty as f64 + 0.5) * scale_y - 0.5).max(0.0);
            let y0 = (sy.floor() as usize).min(h - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fy = sy - y0 as f64;
            for tx in 0..target {
                let sx = ((tx as f64 + 0.5) * scale_x - 0.5).max(0.0);
                let x0 = (sx.floor() as usize).min(w - 1);
                let x1 = (x0 + 1).min(w - 1);
                let fx = sx - x0 as f64;
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out[ci * target * target + ty * target + tx] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Tensor::new(vec![c, target, target], out)
}

/// Stack samples into a [N,C,H,W] batch and an [N] label tensor.
pub fn batch_from_samples(samples: &[&LabeledSample]) -> Result<(Tensor, Tensor)> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("cannot batch zero samples".into()));
    }
    let shape = samples[0].image.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * samples[0].image.len());
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        if s.image.shape() != shape {
            return Err(Error::InvalidInput(format!(
                "sample {} has shape {:?}, expected {:?}",
                s.source_id,
                s.image.shape(),
                shape
            )));
        }
        data.extend_from_slice(s.image.data());
        labels.push(s.label.as_f64());
    }
    let images = Tensor::new(vec![samples.len(), shape[0], shape[1], shape[2]], data)?;
    let labels = Tensor::new(vec![samples.len()], labels)?;
    Ok((images, labels))
}

/// Quantize a [C,H,W] image in [0,1] to interleaved RGB8 (width, height, bytes).
pub fn tensor_to_rgb8(image: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    if image.rank() != 3 || image.dim(0) != 3 {
        return Err(Error::InvalidInput(format!(
            "expected [3,H,W] image, got {:?}",
            image.shape()
        )));
    }
    let (h, w) = (image.dim(1), image.dim(2));
    let src = image.data();
    let mut bytes = vec![0u8; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = src[c * h * w + y * w + x];
                bytes[(y * w + x) * 3 + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    Ok((w, h, bytes))
}

/// Write interleaved RGB8 pixels as a PNG.
pub fn write_rgb_png(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let img = image::RgbImage::from_raw(width as u32, height as u32, pixels.to_vec())
        .ok_or_else(|| Error::InvalidInput("pixel buffer does not match dimensions".into()))?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}
