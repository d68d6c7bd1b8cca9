//! Affine image transforms and the rotate-until-misclassified search.
//!
//! All transforms use inverse mapping with bilinear interpolation; samples
//! that fall outside the 28×28 frame read as 0. Coordinates are (row, col)
//! with rows growing downward, and the pivot is the grid center (13.5, 13.5).
//! Positive angles rotate counter-clockwise as the image is displayed.

use std::fmt::Write as _;
use std::path::Path;

use crate::dataset::{self, Category, Image, LabeledDataset, SetMetadata, SIDE};
use crate::error::{Error, Result};
use crate::network::NetworkModel;

const CENTER: f64 = (SIDE as f64 - 1.0) / 2.0;
const SNAP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub tx: f64,
    pub ty: f64,
    pub sx: f64,
    pub sy: f64,
    /// Degrees.
    pub alpha: f64,
}

impl Default for AffineParams {
    fn default() -> Self {
        AffineParams { tx: 0.0, ty: 0.0, sx: 1.0, sy: 1.0, alpha: 0.0 }
    }
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP {
        r
    } else {
        v
    }
}

fn bilinear(image: &Image, row: f64, col: f64) -> f64 {
    let (row, col) = (snap(row), snap(col));
    let r0 = row.floor();
    let c0 = col.floor();
    let fr = row - r0;
    let fc = col - c0;
    let px = |r: f64, c: f64| -> f64 {
        if r < 0.0 || c < 0.0 || r >= SIDE as f64 || c >= SIDE as f64 {
            0.0
        } else {
            image.get(r as usize, c as usize)
        }
    };
    let mut v = 0.0;
    for (dr, wr) in [(0.0, 1.0 - fr), (1.0, fr)] {
        for (dc, wc) in [(0.0, 1.0 - fc), (1.0, fc)] {
            let w = wr * wc;
            if w != 0.0 {
                v += w * px(r0 + dr, c0 + dc);
            }
        }
    }
    v
}

/// Resamples `image`; `source` maps an output (row, col) to the source
/// position it reads from.
fn warp(image: &Image, source: impl Fn(f64, f64) -> (f64, f64)) -> Image {
    let mut out = Vec::with_capacity(SIDE * SIDE);
    for r in 0..SIDE {
        for c in 0..SIDE {
            let (sr, sc) = source(r as f64, c as f64);
            out.push(bilinear(image, sr, sc));
        }
    }
    Image::from_clamped(out)
}

/// Rotates counter-clockwise by `alpha` degrees about the grid center.
pub fn rotate(image: &Image, alpha: f64) -> Image {
    let (sin, cos) = alpha.to_radians().sin_cos();
    warp(image, |r, c| {
        let dy = r - CENTER;
        let dx = c - CENTER;
        (CENTER + dx * sin + dy * cos, CENTER + dx * cos - dy * sin)
    })
}

/// Moves content by `tx` columns and `ty` rows: input (r, c) lands on
/// (r + ty, c + tx).
pub fn translate(image: &Image, tx: f64, ty: f64) -> Image {
    warp(image, |r, c| (r - ty, c - tx))
}

/// Scales about the grid center by `sx` horizontally and `sy` vertically.
pub fn scale(image: &Image, sx: f64, sy: f64) -> Result<Image> {
    if !(sx > 0.0 && sy > 0.0) || !sx.is_finite() || !sy.is_finite() {
        return Err(Error::Parameter(format!("scale factors must be positive, got ({sx}, {sy})")));
    }
    Ok(warp(image, |r, c| (CENTER + (r - CENTER) / sy, CENTER + (c - CENTER) / sx)))
}

/// Scale, then rotate, then translate, resampled once.
pub fn apply_affine(image: &Image, p: &AffineParams) -> Result<Image> {
    if !(p.sx > 0.0 && p.sy > 0.0) {
        return Err(Error::Parameter(format!("scale factors must be positive, got ({}, {})", p.sx, p.sy)));
    }
    let (sin, cos) = p.alpha.to_radians().sin_cos();
    Ok(warp(image, |r, c| {
        let dy = r - p.ty - CENTER;
        let dx = c - p.tx - CENTER;
        let ry = dx * sin + dy * cos;
        let rx = dx * cos - dy * sin;
        (CENTER + ry / p.sy, CENTER + rx / p.sx)
    }))
}

/// Anything that assigns a best class to a batch of images.
pub trait Classifier {
    fn classify(&self, images: &[Image]) -> Result<Vec<usize>>;
}

impl Classifier for NetworkModel {
    fn classify(&self, images: &[Image]) -> Result<Vec<usize>> {
        self.predict_all(images)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RotationOutcome {
    /// The rotated image, snapped to the 8-bit grid.
    pub image: Image,
    pub applied_angle: f64,
    pub original_label: usize,
    pub predicted_class: usize,
    /// Number of candidate angles tried, including the successful one.
    pub steps_taken: usize,
    /// Id of the source image.
    pub source_id: u64,
}

/// Candidate angles: +step, −step, +2·step, −2·step, … with |angle| ≤ max.
pub fn rotation_ladder(step: f64, max_angle: f64) -> Vec<f64> {
    let mut out = Vec::new();
    if !(step > 0.0) || !step.is_finite() || !max_angle.is_finite() {
        return out;
    }
    let mut k = 1u32;
    loop {
        let a = step * f64::from(k);
        if a > max_angle.abs() + 1e-9 {
            break;
        }
        out.push(a);
        out.push(-a);
        k += 1;
    }
    out
}

/// Rotates the original image through the ladder until the classifier's
/// answer departs from `label`. Returns `None` when the unrotated image is
/// already misclassified or no angle within `max_angle` flips the label.
pub fn rotate_until_misclassified<C: Classifier + ?Sized>(
    classifier: &C,
    image: &Image,
    label: usize,
    step: f64,
    max_angle: f64,
) -> Result<Option<RotationOutcome>> {
    if classifier.classify(std::slice::from_ref(image))?[0] != label {
        return Ok(None);
    }
    for (i, &angle) in rotation_ladder(step, max_angle).iter().enumerate() {
        let rotated = rotate(image, angle).quantized();
        let predicted = classifier.classify(std::slice::from_ref(&rotated))?[0];
        if predicted != label {
            return Ok(Some(RotationOutcome {
                image: rotated,
                applied_angle: angle,
                original_label: label,
                predicted_class: predicted,
                steps_taken: i + 1,
                source_id: 0,
            }));
        }
    }
    Ok(None)
}

const SEARCH_CHUNK: usize = 2048;

/// Runs the search over a labeled set. Candidates of one ladder rung are
/// classified together; results keep input order.
pub fn build_rotation_set<C: Classifier + ?Sized>(
    classifier: &C,
    train: &LabeledDataset,
    step: f64,
    max_angle: f64,
) -> Result<(LabeledDataset, Vec<RotationOutcome>)> {
    let labels = train.class_labels()?;
    let ladder = rotation_ladder(step, max_angle);
    let mut outcomes = Vec::new();

    for start in (0..train.len()).step_by(SEARCH_CHUNK) {
        let end = (start + SEARCH_CHUNK).min(train.len());
        let originals = &train.images()[start..end];
        let first = classifier.classify(originals)?;
        let mut active: Vec<usize> = (0..originals.len()).filter(|&i| first[i] == labels[start + i]).collect();
        let mut found: Vec<(usize, RotationOutcome)> = Vec::new();
        for (rung, &angle) in ladder.iter().enumerate() {
            if active.is_empty() {
                break;
            }
            let rotated: Vec<Image> = active.iter().map(|&i| rotate(&originals[i], angle).quantized()).collect();
            let predicted = classifier.classify(&rotated)?;
            let mut still = Vec::with_capacity(active.len());
            for ((&i, img), p) in active.iter().zip(rotated).zip(predicted) {
                let label = labels[start + i];
                if p != label {
                    found.push((
                        i,
                        RotationOutcome {
                            image: img,
                            applied_angle: angle,
                            original_label: label,
                            predicted_class: p,
                            steps_taken: rung + 1,
                            source_id: train.ids()[start + i],
                        },
                    ));
                } else {
                    still.push(i);
                }
            }
            active = still;
        }
        found.sort_by_key(|(i, _)| *i);
        outcomes.extend(found.into_iter().map(|(_, o)| o));
    }
    let dataset = rotation_dataset(&outcomes)?;
    Ok((dataset, outcomes))
}

fn rotation_dataset(outcomes: &[RotationOutcome]) -> Result<LabeledDataset> {
    LabeledDataset::new(
        outcomes.iter().map(|o| o.image.clone()).collect(),
        outcomes.iter().map(|o| Some(o.original_label as u8)).collect(),
        outcomes.iter().map(|o| o.source_id).collect(),
        Category::Rotation,
    )
}

pub const ROTATION_TABLE_HEADER: &str = "id,original_label,predicted_class,applied_angle,steps_taken";

pub fn rotation_table(outcomes: &[RotationOutcome], header: &str) -> String {
    let mut s = String::from(header);
    s.push_str(ROTATION_TABLE_HEADER);
    s.push('\n');
    for o in outcomes {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            o.source_id, o.original_label, o.predicted_class, o.applied_angle, o.steps_taken
        );
    }
    s
}

/// Writes `<stem>-images-idx3-ubyte`, `<stem>-table.csv`, `<stem>.meta`.
pub fn write_rotation_set(
    dir: &Path,
    stem: &str,
    outcomes: &[RotationOutcome],
    header: &str,
) -> Result<()> {
    let images: Vec<Image> = outcomes.iter().map(|o| o.image.clone()).collect();
    dataset::write_idx_images(dir.join(format!("{stem}-images-idx3-ubyte")), &images)?;
    dataset::write_file(&dir.join(format!("{stem}-table.csv")), rotation_table(outcomes, header).as_bytes())?;
    let meta = SetMetadata { category: Category::Rotation, seed: None, count: outcomes.len() };
    dataset::write_file(&dir.join(format!("{stem}.meta")), meta.render(header).as_bytes())
}

pub fn read_rotation_set(dir: &Path, stem: &str) -> Result<(LabeledDataset, Vec<RotationOutcome>)> {
    let images = dataset::load_unlabeled(dir.join(format!("{stem}-images-idx3-ubyte")), Category::Rotation)?;
    let table_path = dir.join(format!("{stem}-table.csv"));
    let text = std::fs::read_to_string(&table_path).map_err(|e| Error::io(&table_path, e))?;
    let mut rows = text.lines().filter(|l| !l.starts_with('#'));
    if rows.next() != Some(ROTATION_TABLE_HEADER) {
        return Err(Error::Format(format!("{} lacks the rotation table header", table_path.display())));
    }
    let bad = |l: &str| Error::Format(format!("bad rotation row {l:?}"));
    let mut outcomes = Vec::new();
    for (line, image) in rows.zip(images.images()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad(line));
        }
        outcomes.push(RotationOutcome {
            image: image.clone(),
            source_id: f[0].parse().map_err(|_| bad(line))?,
            original_label: f[1].parse().map_err(|_| bad(line))?,
            predicted_class: f[2].parse().map_err(|_| bad(line))?,
            applied_angle: f[3].parse().map_err(|_| bad(line))?,
            steps_taken: f[4].parse().map_err(|_| bad(line))?,
        });
    }
    if outcomes.len() != images.len() {
        return Err(Error::Dimension { expected: images.len(), found: outcomes.len() });
    }
    Ok((rotation_dataset(&outcomes)?, outcomes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::PIXELS;

    fn lit(r: usize, c: usize) -> Image {
        let mut p = vec![0.0; PIXELS];
        p[r * SIDE + c] = 1.0;
        Image::new(p).unwrap()
    }

    fn blob(radius: f64) -> Image {
        let p = (0..PIXELS)
            .map(|i| {
                let (r, c) = ((i / SIDE) as f64 - CENTER, (i % SIDE) as f64 - CENTER);
                let d2 = r * r + c * c;
                (-d2 / (2.0 * radius * radius)).exp()
            })
            .collect();
        Image::new(p).unwrap()
    }

    fn max_diff(a: &Image, b: &Image) -> f64 {
        a.pixels().iter().zip(b.pixels()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn zero_and_full_turns_are_identity() {
        let img = blob(4.0);
        assert_eq!(rotate(&img, 0.0), img);
        assert!(max_diff(&rotate(&img, 360.0), &img) < 1e-6);
    }

    #[test]
    fn quarter_turn_moves_lit_pixel() {
        // output (r, c) reads source (c, 27 - r): source (5, 20) lands on (7, 5)
        let out = rotate(&lit(5, 20), 90.0);
        assert!((out.get(7, 5) - 1.0).abs() < 1e-9);
        let total: f64 = out.pixels().iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn translation() {
        let img = blob(3.0);
        assert_eq!(translate(&img, 0.0, 0.0), img);
        assert!(translate(&img, 28.0, 0.0).pixels().iter().all(|&p| p == 0.0));
        let moved = translate(&lit(5, 5), 2.0, 3.0);
        assert_eq!(moved.get(8, 7), 1.0);
    }

    #[test]
    fn scaling() {
        let disk = blob(5.0);
        assert_eq!(scale(&disk, 1.0, 1.0).unwrap(), disk);
        assert!(matches!(scale(&disk, 0.0, 1.0), Err(Error::Parameter(_))));
        let back = scale(&scale(&disk, 0.5, 0.5).unwrap(), 2.0, 2.0).unwrap();
        assert!(correlation(disk.pixels(), back.pixels()) > 0.9);
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn rotation_round_trip_on_smooth_image() {
        let img = blob(4.0);
        for a in [5.0, 17.0, 33.0, -40.0] {
            assert!(max_diff(&rotate(&rotate(&img, a), -a), &img) < 0.05, "angle {a}");
        }
    }

    #[test]
    fn affine_composition_matches_single_ops() {
        let img = blob(3.0);
        let only_rot = AffineParams { alpha: 30.0, ..Default::default() };
        assert!(max_diff(&apply_affine(&img, &only_rot).unwrap(), &rotate(&img, 30.0)) < 1e-12);
        let only_shift = AffineParams { tx: 2.0, ty: -1.0, ..Default::default() };
        assert!(max_diff(&apply_affine(&img, &only_shift).unwrap(), &translate(&img, 2.0, -1.0)) < 1e-12);
    }

    #[test]
    fn ladder_alternates() {
        assert_eq!(rotation_ladder(5.0, 15.0), vec![5.0, -5.0, 10.0, -10.0, 15.0, -15.0]);
        assert!(rotation_ladder(0.0, 15.0).is_empty());
        assert!(rotation_ladder(5.0, 4.0).is_empty());
    }

    /// Says `base` unless the image's top-left quadrant holds mass.
    struct QuadrantStub {
        base: usize,
        other: usize,
    }

    impl Classifier for QuadrantStub {
        fn classify(&self, images: &[Image]) -> Result<Vec<usize>> {
            Ok(images
                .iter()
                .map(|img| {
                    let mass: f64 = (0..14).flat_map(|r| (0..14).map(move |c| (r, c))).map(|(r, c)| img.get(r, c)).sum();
                    if mass > 0.5 { self.other } else { self.base }
                })
                .collect())
        }
    }

    struct Constant(usize);

    impl Classifier for Constant {
        fn classify(&self, images: &[Image]) -> Result<Vec<usize>> {
            Ok(vec![self.0; images.len()])
        }
    }

    #[test]
    fn search_stops_at_first_flip() {
        // a quarter turn carries the top-right quadrant into the top-left one
        let img = lit(5, 20);
        let stub = QuadrantStub { base: 2, other: 7 };
        let out = rotate_until_misclassified(&stub, &img, 2, 90.0, 90.0).unwrap().unwrap();
        assert_eq!(out.steps_taken, 1);
        assert_eq!(out.applied_angle, 90.0);
        assert_eq!(out.predicted_class, 7);
    }

    #[test]
    fn search_none_cases() {
        let img = blob(3.0);
        assert!(rotate_until_misclassified(&Constant(4), &img, 4, 5.0, 40.0).unwrap().is_none());
        // already misclassified
        assert!(rotate_until_misclassified(&Constant(4), &img, 3, 5.0, 40.0).unwrap().is_none());
    }

    #[test]
    fn batched_search_matches_per_image_search() {
        let stub = QuadrantStub { base: 1, other: 6 };
        let imgs: Vec<Image> = [(20, 5), (5, 20), (20, 20), (3, 3), (14, 2), (26, 13)]
            .iter()
            .map(|&(r, c)| lit(r, c))
            .collect();
        let data = LabeledDataset::labeled(imgs.clone(), vec![1; imgs.len()], Category::Train).unwrap();
        let (set, outcomes) = build_rotation_set(&stub, &data, 30.0, 180.0).unwrap();
        let mut expected = Vec::new();
        for (i, img) in imgs.iter().enumerate() {
            if let Some(mut o) = rotate_until_misclassified(&stub, img, 1, 30.0, 180.0).unwrap() {
                o.source_id = i as u64;
                expected.push(o);
            }
        }
        assert_eq!(outcomes, expected);
        assert!(!outcomes.is_empty());
        assert_eq!(set.len(), outcomes.len());
        for o in &outcomes {
            assert_ne!(stub.classify(std::slice::from_ref(&o.image)).unwrap()[0], o.original_label);
        }
    }

    #[test]
    fn empty_or_robust_sets_give_empty_rotation_sets() {
        let empty = LabeledDataset::empty(Category::Train);
        assert!(build_rotation_set(&Constant(0), &empty, 5.0, 40.0).unwrap().0.is_empty());
        let data = LabeledDataset::labeled(vec![blob(3.0)], vec![0], Category::Train).unwrap();
        assert!(build_rotation_set(&Constant(0), &data, 5.0, 40.0).unwrap().0.is_empty());
    }

    #[test]
    fn rotation_set_files_round_trip() {
        let stub = QuadrantStub { base: 1, other: 6 };
        let data = LabeledDataset::labeled(vec![lit(20, 5), lit(20, 20)], vec![1, 1], Category::Train).unwrap();
        let (set, outcomes) = build_rotation_set(&stub, &data, 45.0, 180.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_rotation_set(dir.path(), "rotation", &outcomes, "# test\n").unwrap();
        let (set2, outcomes2) = read_rotation_set(dir.path(), "rotation").unwrap();
        assert_eq!(outcomes, outcomes2);
        assert_eq!(set.images(), set2.images());
        assert_eq!(set.labels(), set2.labels());
    }
}
