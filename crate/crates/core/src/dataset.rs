//! IDX ingestion, normalization, and the random-pixel control set.
//!
//! IDX3 image files: big-endian magic `0x00000803`, count, rows, cols, then
//! `count * rows * cols` unsigned bytes. IDX1 label files: magic
//! `0x00000801`, count, then `count` bytes. Both may be gzip-compressed; the
//! loader sniffs the two-byte gzip magic.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use flate2::read::GzDecoder;
use rand::RngCore;

use crate::error::{Error, Result};
use crate::rng;

pub const SIDE: usize = 28;
pub const PIXELS: usize = SIDE * SIDE;
pub const NUM_CLASSES: usize = 10;

const IDX3_MAGIC: u32 = 0x0000_0803;
const IDX1_MAGIC: u32 = 0x0000_0801;

/// A 28×28 grayscale image, row-major, intensities in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != PIXELS {
            return Err(Error::Dimension { expected: PIXELS, found: pixels.len() });
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Domain(format!("pixel value {p} outside [0,1]")));
        }
        Ok(Image { pixels })
    }

    pub fn zeros() -> Self {
        Image { pixels: vec![0.0; PIXELS] }
    }

    /// Builds an image from values already known to be in range, clamping
    /// rounding spill-over.
    pub(crate) fn from_clamped(mut pixels: Vec<f64>) -> Self {
        debug_assert_eq!(pixels.len(), PIXELS);
        for p in &mut pixels {
            *p = p.clamp(0.0, 1.0);
        }
        Image { pixels }
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * SIDE + col]
    }

    /// Raw bytes `round(p * 255)`.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|p| (p * 255.0).round() as u8).collect()
    }

    /// The image snapped to the 8-bit grid, i.e. `normalize(to_bytes())`.
    pub fn quantized(&self) -> Image {
        let bytes = self.to_bytes();
        Image { pixels: bytes.iter().map(|&b| byte_to_unit(b)).collect() }
    }
}

fn byte_to_unit(b: u8) -> f64 {
    f64::from(b) / 255.0
}

/// Maps 784 raw bytes onto [0,1] by dividing by 255.
pub fn normalize(raw: &[u8]) -> Result<Image> {
    if raw.len() != PIXELS {
        return Err(Error::Length { expected: PIXELS, found: raw.len() });
    }
    Ok(Image { pixels: raw.iter().map(|&b| byte_to_unit(b)).collect() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    Train,
    Test,
    Random,
    Rotation,
}

impl Category {
    pub const ALL: [Category; 4] =
        [Category::Train, Category::Test, Category::Random, Category::Rotation];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Train => "train",
            Category::Test => "test",
            Category::Random => "random",
            Category::Rotation => "rotation",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Category::Train),
            "test" => Ok(Category::Test),
            "random" => Ok(Category::Random),
            "rotation" => Ok(Category::Rotation),
            other => Err(Error::Format(format!("unknown category {other:?}"))),
        }
    }
}

/// Images with their labels. `None` marks an image with no ground-truth
/// class (random-pixel images).
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    images: Vec<Image>,
    labels: Vec<Option<u8>>,
    ids: Vec<u64>,
    category: Category,
}

impl LabeledDataset {
    pub fn new(
        images: Vec<Image>,
        labels: Vec<Option<u8>>,
        ids: Vec<u64>,
        category: Category,
    ) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Dimension { expected: images.len(), found: labels.len() });
        }
        if images.len() != ids.len() {
            return Err(Error::Dimension { expected: images.len(), found: ids.len() });
        }
        if let Some(l) = labels.iter().flatten().find(|&&l| usize::from(l) >= NUM_CLASSES) {
            return Err(Error::Domain(format!("label {l} >= {NUM_CLASSES}")));
        }
        Ok(LabeledDataset { images, labels, ids, category })
    }

    /// Dataset with ids `0..n` and every label present.
    pub fn labeled(images: Vec<Image>, labels: Vec<u8>, category: Category) -> Result<Self> {
        let ids = (0..images.len() as u64).collect();
        Self::new(images, labels.into_iter().map(Some).collect(), ids, category)
    }

    pub fn empty(category: Category) -> Self {
        LabeledDataset { images: Vec::new(), labels: Vec::new(), ids: Vec::new(), category }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn labels(&self) -> &[Option<u8>] {
        &self.labels
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn category(&self) -> Category {
        self.category
    }

    /// Labels as class indices; fails if any image carries the no-class marker.
    pub fn class_labels(&self) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| {
                l.map(usize::from).ok_or_else(|| {
                    Error::Domain(format!("image {} of the {} set has no class", i, self.category))
                })
            })
            .collect()
    }

    /// Keeps the first `per_class` images of every class, in file order.
    pub fn stratified_prefix(&self, per_class: usize) -> LabeledDataset {
        let mut taken = [0usize; NUM_CLASSES];
        let mut out = LabeledDataset::empty(self.category);
        for i in 0..self.len() {
            if let Some(l) = self.labels[i] {
                let slot = &mut taken[usize::from(l)];
                if *slot < per_class {
                    *slot += 1;
                    out.images.push(self.images[i].clone());
                    out.labels.push(self.labels[i]);
                    out.ids.push(self.ids[i]);
                }
            }
        }
        out
    }
}

/// Raw contents of an IDX3 file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub bytes: Vec<u8>,
}

impl RawImages {
    pub fn image(&self, index: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.bytes[index * n..(index + 1) * n]
    }
}

fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    if data.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&data[..]).read_to_end(&mut out).map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(data)
    }
}

fn be_u32(data: &[u8], offset: usize) -> Result<u32> {
    data.get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Length { expected: offset + 4, found: data.len() })
}

pub fn parse_idx_images(data: &[u8]) -> Result<RawImages> {
    let magic = be_u32(data, 0)?;
    if magic != IDX3_MAGIC {
        return Err(Error::Format(format!(
            "expected IDX3 magic {IDX3_MAGIC:#010x}, found {magic:#010x}"
        )));
    }
    let count = be_u32(data, 4)? as usize;
    let rows = be_u32(data, 8)? as usize;
    let cols = be_u32(data, 12)? as usize;
    let expected = 16 + count * rows * cols;
    if data.len() < expected {
        return Err(Error::Length { expected, found: data.len() });
    }
    Ok(RawImages { count, rows, cols, bytes: data[16..expected].to_vec() })
}

pub fn parse_idx_labels(data: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(data, 0)?;
    if magic != IDX1_MAGIC {
        return Err(Error::Format(format!(
            "expected IDX1 magic {IDX1_MAGIC:#010x}, found {magic:#010x}"
        )));
    }
    let count = be_u32(data, 4)? as usize;
    let expected = 8 + count;
    if data.len() < expected {
        return Err(Error::Length { expected, found: data.len() });
    }
    let labels = data[8..expected].to_vec();
    if let Some(&l) = labels.iter().find(|&&l| usize::from(l) >= NUM_CLASSES) {
        return Err(Error::Domain(format!("label {l} >= {NUM_CLASSES}")));
    }
    Ok(labels)
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<RawImages> {
    parse_idx_images(&read_maybe_gzip(path.as_ref())?)
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    parse_idx_labels(&read_maybe_gzip(path.as_ref())?)
}

fn normalize_all(raw: &RawImages) -> Result<Vec<Image>> {
    if raw.rows != SIDE || raw.cols != SIDE {
        return Err(Error::Format(format!(
            "expected {SIDE}x{SIDE} images, found {}x{}",
            raw.rows, raw.cols
        )));
    }
    (0..raw.count).map(|i| normalize(raw.image(i))).collect()
}

/// Loads an image file and a label file into one labeled dataset.
pub fn load_labeled(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    category: Category,
) -> Result<LabeledDataset> {
    let raw = load_idx_images(images)?;
    let labels = load_idx_labels(labels)?;
    if raw.count != labels.len() {
        return Err(Error::Dimension { expected: raw.count, found: labels.len() });
    }
    LabeledDataset::labeled(normalize_all(&raw)?, labels, category)
}

/// Loads an unlabeled image file (random or derived sets).
pub fn load_unlabeled(images: impl AsRef<Path>, category: Category) -> Result<LabeledDataset> {
    let raw = load_idx_images(images)?;
    let images = normalize_all(&raw)?;
    let n = images.len();
    LabeledDataset::new(images, vec![None; n], (0..n as u64).collect(), category)
}

pub fn encode_idx_images(images: &[Image]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * PIXELS);
    out.extend_from_slice(&IDX3_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&(SIDE as u32).to_be_bytes());
    out.extend_from_slice(&(SIDE as u32).to_be_bytes());
    for img in images {
        out.extend_from_slice(&img.to_bytes());
    }
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX1_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Writes images as uncompressed IDX3.
pub fn write_idx_images(path: impl AsRef<Path>, images: &[Image]) -> Result<()> {
    write_file(path.as_ref(), &encode_idx_images(images))
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    write_file(path.as_ref(), &encode_idx_labels(labels))
}

/// Metadata stored next to a generated IDX file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SetMetadata {
    pub category: Category,
    pub seed: Option<u64>,
    pub count: usize,
}

impl SetMetadata {
    pub fn render(&self, header: &str) -> String {
        let seed = self.seed.map_or_else(|| "-".to_string(), |s| s.to_string());
        format!("{header}category={}\nseed={seed}\ncount={}\n", self.category, self.count)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut category = None;
        let mut seed = None;
        let mut count = None;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad metadata line {line:?}")))?;
            match k.trim() {
                "category" => category = Some(v.trim().parse()?),
                "seed" if v.trim() == "-" => {}
                "seed" => seed = Some(parse_num(v)?),
                "count" => count = Some(parse_num(v)? as usize),
                _ => {}
            }
        }
        Ok(SetMetadata {
            category: category.ok_or_else(|| Error::Format("metadata lacks category".into()))?,
            seed,
            count: count.ok_or_else(|| Error::Format("metadata lacks count".into()))?,
        })
    }
}

fn parse_num(v: &str) -> Result<u64> {
    v.trim().parse().map_err(|_| Error::Format(format!("bad number {v:?}")))
}

/// Generates `count` images of uniform random pixels.
///
/// One xoshiro256++ stream seeded with `seed` is consumed in row-major order
/// across all images without reseeding; each pixel is the top byte of one
/// 64-bit draw (uniform over 0..=255), then divided by 255.
pub fn generate_random_images(count: usize, seed: u64) -> LabeledDataset {
    let mut gen = rng::generator(seed);
    let images = (0..count)
        .map(|_| {
            let mut pixels = Vec::with_capacity(PIXELS);
            for _row in 0..SIDE {
                for _col in 0..SIDE {
                    pixels.push(byte_to_unit((gen.next_u64() >> 56) as u8));
                }
            }
            Image { pixels }
        })
        .collect::<Vec<_>>();
    LabeledDataset {
        labels: vec![None; count],
        ids: (0..count as u64).collect(),
        images,
        category: Category::Random,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx3(count: u32, rows: u32, cols: u32, payload: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IDX3_MAGIC, count, rows, cols] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend_from_slice(payload);
        v
    }

    #[test]
    fn parses_hand_built_idx3() {
        let raw = parse_idx_images(&idx3(2, 2, 2, &[0, 255, 1, 2, 3, 4, 5, 6])).unwrap();
        assert_eq!((raw.count, raw.rows, raw.cols), (2, 2, 2));
        assert_eq!(raw.image(0), &[0, 255, 1, 2]);
        assert_eq!(raw.image(1), &[3, 4, 5, 6]);
    }

    #[test]
    fn image_loader_rejects_label_magic() {
        let mut v = IDX1_MAGIC.to_be_bytes().to_vec();
        v.extend_from_slice(&[0, 0, 0, 0]);
        assert!(matches!(parse_idx_images(&v), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload_is_length_error() {
        let data = idx3(2, 2, 2, &[0, 1, 2]);
        assert!(matches!(parse_idx_images(&data), Err(Error::Length { .. })));
    }

    #[test]
    fn label_parsing() {
        assert_eq!(parse_idx_labels(&encode_idx_labels(&[])).unwrap(), Vec::<u8>::new());
        assert_eq!(parse_idx_labels(&encode_idx_labels(&[3, 9, 0])).unwrap(), vec![3, 9, 0]);
        assert!(matches!(parse_idx_labels(&encode_idx_labels(&[10])), Err(Error::Domain(_))));
        assert!(matches!(
            parse_idx_labels(&idx3(0, 0, 0, &[])),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn normalize_values() {
        assert!(normalize(&[0; PIXELS]).unwrap().pixels().iter().all(|&p| p == 0.0));
        let mut raw = [0u8; PIXELS];
        raw[0] = 255;
        raw[1] = 51;
        let img = normalize(&raw).unwrap();
        assert_eq!(img.pixels()[0], 1.0);
        assert!((img.pixels()[1] - 0.2).abs() < 1e-9);
        assert!(matches!(normalize(&[0; 783]), Err(Error::Length { .. })));
    }

    #[test]
    fn random_images_are_reproducible() {
        assert!(generate_random_images(0, 1).is_empty());
        let a = generate_random_images(2, 42);
        let b = generate_random_images(2, 42);
        assert_eq!(a.images(), b.images());
        assert_ne!(a.images()[0].pixels()[0], a.images()[1].pixels()[0]);
        assert!(a.labels().iter().all(Option::is_none));
        let c = generate_random_images(1, 43);
        assert_ne!(a.images()[0], c.images()[0]);
    }

    #[test]
    fn random_stream_continues_across_images() {
        // image 1 must start where image 0 left off in the single stream
        let two = generate_random_images(2, 9);
        let mut gen = rng::generator(9);
        for _ in 0..PIXELS {
            gen.next_u64();
        }
        let expected = byte_to_unit((gen.next_u64() >> 56) as u8);
        assert_eq!(two.images()[1].pixels()[0], expected);
    }

    #[test]
    fn metadata_round_trip() {
        let m = SetMetadata { category: Category::Random, seed: Some(5), count: 12 };
        assert_eq!(SetMetadata::parse(&m.render("# header\n")).unwrap(), m);
    }

    #[test]
    fn unlabeled_images_refuse_class_labels() {
        let d = generate_random_images(3, 1);
        assert!(d.class_labels().is_err());
    }
}
