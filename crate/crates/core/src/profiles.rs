//! Per-class histogram models of neuron activation levels and the
//! log-likelihood distance of a computational profile.
//!
//! For every class `k` and every neuron `i` of the profiled layer, the
//! activations produced by correctly predicted training inputs of class `k`
//! are summarized by their mean and standard deviation, then binned with
//! width `c · std`. Bin `b` of an activation `a` is `floor(a / width)`.
//! A bin's probability is its frequency divided by `|X| · |K|` (training set
//! size times number of classes); bins never seen in training receive a
//! floor probability. The distance of an input under class `k` is
//! `−Σ_i ln p(b_i, i, k)` over the live neurons of the layer.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Category, LabeledDataset};
use crate::error::{Error, Result};
use crate::network::{ActivationTrace, NetworkModel};

pub const FORMAT_VERSION: u32 = 1;
const FORMAT_NAME: &str = "compprof-profiles";

/// How the per-neuron spread is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StdMode {
    /// `sqrt(Σ (a − mean)² / n)`.
    Population,
    /// `sqrt(Σ (a − mean)²) / n`, the formula as typeset in the method write-up.
    PaperLiteral,
}

/// Denominator of a bin probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// `|X| · |K|`, shared by every class.
    Verbatim,
    /// The class's own fitted sample count.
    PerClass,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileOptions {
    /// Bin width multiplier.
    pub c: f64,
    /// Profiled layer, 1-based; `None` selects N − 1.
    pub layer: Option<usize>,
    pub std_mode: StdMode,
    pub normalization: Normalization,
    /// Pseudo-count given to empty bins; the floor probability is
    /// `floor_count / denominator`.
    pub floor_count: f64,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        ProfileOptions {
            c: 1.0,
            layer: None,
            std_mode: StdMode::Population,
            normalization: Normalization::Verbatim,
            floor_count: 0.5,
        }
    }
}

/// Mean and population standard deviation.
pub fn neuron_stats(values: &[f64]) -> Result<(f64, f64)> {
    neuron_stats_with(values, StdMode::Population)
}

pub fn neuron_stats_with(values: &[f64], mode: StdMode) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Empty("activation sample".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    let std = match mode {
        StdMode::Population => (ss / n).sqrt(),
        StdMode::PaperLiteral => ss.sqrt() / n,
    };
    Ok((mean, std))
}

/// `c · std`, or `None` for a dead (constant) neuron.
pub fn bin_width(std: f64, c: f64) -> Option<f64> {
    let w = c * std;
    (std > 0.0 && w > 0.0 && w.is_finite()).then_some(w)
}

pub fn bin_id(act_level: f64, width: f64) -> Result<i64> {
    if !(width > 0.0) || !width.is_finite() {
        return Err(Error::Parameter(format!("bin width must be positive, got {width}")));
    }
    Ok((act_level / width).floor() as i64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronHistogram {
    pub avg: f64,
    pub std: f64,
    /// Zero for dead neurons.
    pub width: f64,
    pub dead: bool,
    pub sample_count: u64,
    #[serde(with = "bin_pairs")]
    pub bins: BTreeMap<i64, u64>,
}

mod bin_pairs {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(bins: &BTreeMap<i64, u64>, s: S) -> Result<S::Ok, S::Error> {
        let pairs: Vec<(i64, u64)> = bins.iter().map(|(&b, &c)| (b, c)).collect();
        pairs.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<i64, u64>, D::Error> {
        Ok(Vec::<(i64, u64)>::deserialize(d)?.into_iter().collect())
    }
}

impl NeuronHistogram {
    pub fn fit(values: &[f64], c: f64, mode: StdMode) -> Result<Self> {
        let (avg, std) = neuron_stats_with(values, mode)?;
        let mut bins = BTreeMap::new();
        let (width, dead) = match bin_width(std, c) {
            Some(w) => {
                for &v in values {
                    *bins.entry(bin_id(v, w)?).or_insert(0) += 1;
                }
                (w, false)
            }
            None => (0.0, true),
        };
        Ok(NeuronHistogram { avg, std, width, dead, sample_count: values.len() as u64, bins })
    }

    pub fn frequency(&self, bin: i64) -> u64 {
        self.bins.get(&bin).copied().unwrap_or(0)
    }

    /// Bin of an activation; `None` for dead neurons.
    pub fn bin_of(&self, act_level: f64) -> Option<i64> {
        if self.dead {
            None
        } else {
            bin_id(act_level, self.width).ok()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassProfileModel {
    pub class_id: usize,
    pub class_sample_count: u64,
    pub neurons: Vec<NeuronHistogram>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileModelSet {
    /// Profiled layer, 1-based.
    pub layer: usize,
    pub c: f64,
    pub std_mode: StdMode,
    pub normalization: Normalization,
    pub floor_count: f64,
    /// |X|.
    pub total_train_count: u64,
    /// |K|.
    pub num_classes: usize,
    pub classes: Vec<ClassProfileModel>,
}

impl ProfileModelSet {
    pub fn num_neurons(&self) -> usize {
        self.classes.first().map_or(0, |c| c.neurons.len())
    }

    fn class(&self, k: usize) -> Result<&ClassProfileModel> {
        self.classes.get(k).ok_or(Error::UnknownClass { class: k, num_classes: self.num_classes })
    }

    fn denominator(&self, k: usize) -> Result<f64> {
        Ok(match self.normalization {
            Normalization::Verbatim => self.total_train_count as f64 * self.num_classes as f64,
            Normalization::PerClass => self.class(k)?.class_sample_count as f64,
        })
    }

    /// Probability assigned to bins never observed for class `k`.
    pub fn floor_probability(&self, k: usize) -> Result<f64> {
        Ok(self.floor_count / self.denominator(k)?)
    }

    pub fn bin_probability(&self, k: usize, neuron: usize, bin: i64) -> Result<f64> {
        let hist = self
            .class(k)?
            .neurons
            .get(neuron)
            .ok_or(Error::Dimension { expected: self.num_neurons(), found: neuron + 1 })?;
        match hist.frequency(bin) {
            0 => self.floor_probability(k),
            f => Ok(f as f64 / self.denominator(k)?),
        }
    }

    fn check_width(&self, acts: &[f32]) -> Result<()> {
        if acts.len() != self.num_neurons() {
            return Err(Error::Dimension { expected: self.num_neurons(), found: acts.len() });
        }
        Ok(())
    }

    /// Per-neuron `−ln p` terms; `None` for dead neurons.
    pub fn neuron_terms(&self, acts: &[f32], k: usize) -> Result<Vec<Option<f64>>> {
        self.check_width(acts)?;
        let class = self.class(k)?;
        class
            .neurons
            .iter()
            .enumerate()
            .map(|(i, h)| match h.bin_of(f64::from(acts[i])) {
                None => Ok(None),
                Some(b) => Ok(Some(-self.bin_probability(k, i, b)?.ln())),
            })
            .collect()
    }

    /// Distance of a layer activation vector under class `k`.
    pub fn distance_of(&self, acts: &[f32], k: usize) -> Result<f64> {
        Ok(self.neuron_terms(acts, k)?.into_iter().flatten().sum())
    }

    /// Distance of a trace under class `k`, read at the profiled layer.
    pub fn distance(&self, trace: &ActivationTrace, k: usize) -> Result<f64> {
        let acts = trace
            .layer(self.layer)
            .ok_or_else(|| Error::Parameter(format!("trace has no layer {}", self.layer)))?;
        self.distance_of(acts, k)
    }

    /// Live neurons whose activation falls in a bin never seen for class `k`.
    pub fn floor_hits(&self, acts: &[f32], k: usize) -> Result<usize> {
        self.check_width(acts)?;
        let class = self.class(k)?;
        Ok(class
            .neurons
            .iter()
            .zip(acts)
            .filter(|(h, &a)| h.bin_of(f64::from(a)).is_some_and(|b| h.frequency(b) == 0))
            .count())
    }

    pub fn dead_neurons(&self, k: usize) -> Result<Vec<usize>> {
        Ok(self.class(k)?.neurons.iter().enumerate().filter(|(_, h)| h.dead).map(|(i, _)| i).collect())
    }
}

/// Fits one model per class from the correctly predicted training inputs.
pub fn fit_profiles(
    model: &NetworkModel,
    train: &LabeledDataset,
    options: &ProfileOptions,
) -> Result<ProfileModelSet> {
    if !(options.c > 0.0) || !options.c.is_finite() {
        return Err(Error::Parameter(format!("c must be positive, got {}", options.c)));
    }
    if !(options.floor_count > 0.0) || options.floor_count >= 1.0 {
        return Err(Error::Parameter(format!(
            "floor count must lie in (0, 1), got {}",
            options.floor_count
        )));
    }
    if train.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    let n_layers = model.num_layers();
    let layer = options.layer.unwrap_or(n_layers.saturating_sub(1));
    if layer == 0 || layer > n_layers {
        return Err(Error::Parameter(format!("layer {layer} outside 1..={n_layers}")));
    }
    let labels = train.class_labels()?;
    let (best, acts) = model.predict_with_layer(train.images(), layer)?;
    let k_count = model.num_classes();
    let width = acts.ncols();

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k_count];
    for (i, (&l, &p)) in labels.iter().zip(&best).enumerate() {
        if l == p {
            members[l].push(i);
        }
    }
    let classes = members
        .iter()
        .enumerate()
        .map(|(k, rows)| {
            if rows.is_empty() {
                return Err(Error::EmptyClass { class: k });
            }
            let neurons = (0..width)
                .map(|i| {
                    let values: Vec<f64> = rows.iter().map(|&r| f64::from(acts[[r, i]])).collect();
                    NeuronHistogram::fit(&values, options.c, options.std_mode)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ClassProfileModel { class_id: k, class_sample_count: rows.len() as u64, neurons })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(ProfileModelSet {
        layer,
        c: options.c,
        std_mode: options.std_mode,
        normalization: options.normalization,
        floor_count: options.floor_count,
        total_train_count: train.len() as u64,
        num_classes: k_count,
        classes,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceRecord {
    pub input_id: u64,
    pub category: Category,
    pub predicted_class: usize,
    /// Nats.
    pub distance: f64,
}

/// Scores every input under its best predicted class.
pub fn score_dataset(
    model: &NetworkModel,
    set: &ProfileModelSet,
    data: &LabeledDataset,
    category: Category,
) -> Result<Vec<DistanceRecord>> {
    if model.num_classes() != set.num_classes {
        return Err(Error::Dimension { expected: set.num_classes, found: model.num_classes() });
    }
    if data.is_empty() {
        return Ok(Vec::new());
    }
    let (best, acts) = model.predict_with_layer(data.images(), set.layer)?;
    best.iter()
        .enumerate()
        .map(|(r, &k)| {
            let row = acts.row(r);
            let row = row.as_slice().expect("activation rows are contiguous");
            Ok(DistanceRecord {
                input_id: data.ids()[r],
                category,
                predicted_class: k,
                distance: set.distance_of(row, k)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassSummary {
    pub class_id: usize,
    pub count: usize,
    /// `None` for empty classes.
    pub mean: Option<f64>,
    /// Population standard deviation; `None` for empty classes.
    pub std: Option<f64>,
}

pub fn distances_by_class(records: &[DistanceRecord], num_classes: usize) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new(); num_classes];
    for r in records {
        if r.predicted_class < num_classes {
            out[r.predicted_class].push(r.distance);
        }
    }
    out
}

pub fn summarize(records: &[DistanceRecord], num_classes: usize) -> Vec<ClassSummary> {
    distances_by_class(records, num_classes)
        .into_iter()
        .enumerate()
        .map(|(k, d)| {
            let stats = neuron_stats(&d).ok();
            ClassSummary { class_id: k, count: d.len(), mean: stats.map(|s| s.0), std: stats.map(|s| s.1) }
        })
        .collect()
}

pub const RECORDS_HEADER: &str = "id,category,predicted_class,distance";
pub const SUMMARY_HEADER: &str = "class,count,avg_distance,std_deviation";

pub fn records_csv(records: &[DistanceRecord], header: &str) -> String {
    let mut s = String::with_capacity(records.len() * 32);
    s.push_str(header);
    s.push_str(RECORDS_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(s, "{},{},{},{}", r.input_id, r.category, r.predicted_class, r.distance);
    }
    s
}

pub fn parse_records(text: &str) -> Result<Vec<DistanceRecord>> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    match lines.next() {
        Some(RECORDS_HEADER) => {}
        None => return Ok(Vec::new()),
        Some(other) => return Err(Error::Format(format!("unexpected record header {other:?}"))),
    }
    let bad = |l: &str| Error::Format(format!("bad record line {l:?}"));
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(bad(l));
            }
            Ok(DistanceRecord {
                input_id: f[0].parse().map_err(|_| bad(l))?,
                category: f[1].parse()?,
                predicted_class: f[2].parse().map_err(|_| bad(l))?,
                distance: f[3].parse().map_err(|_| bad(l))?,
            })
        })
        .collect()
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<DistanceRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_records(&text)
}

fn blank_or(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.1}"))
}

pub fn summary_csv(rows: &[ClassSummary], header: &str) -> String {
    let mut s = String::from(header);
    s.push_str(SUMMARY_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.class_id, r.count, blank_or(r.mean), blank_or(r.std));
    }
    s
}

#[derive(Serialize, Deserialize)]
struct ProfileDocument {
    format: String,
    format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    generator: Option<String>,
    layer_index: usize,
    c: f64,
    std_mode: StdMode,
    normalization: Normalization,
    floor_count: f64,
    /// Floor under the verbatim `|X|·|K|` denominator.
    floor_probability: f64,
    total_train_count: u64,
    num_classes: usize,
    classes: Vec<ClassProfileModel>,
}

impl ProfileModelSet {
    pub fn to_document(&self, generator: Option<&str>) -> String {
        let doc = ProfileDocument {
            format: FORMAT_NAME.into(),
            format_version: FORMAT_VERSION,
            generator: generator.map(str::to_string),
            layer_index: self.layer,
            c: self.c,
            std_mode: self.std_mode,
            normalization: self.normalization,
            floor_count: self.floor_count,
            floor_probability: self.floor_count / (self.total_train_count as f64 * self.num_classes as f64),
            total_train_count: self.total_train_count,
            num_classes: self.num_classes,
            classes: self.classes.clone(),
        };
        let mut s = serde_json::to_string(&doc).expect("profile document serializes");
        s.push('\n');
        s
    }

    pub fn from_document(text: &str) -> Result<Self> {
        let probe: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("profile file: {e}")))?;
        let version = probe
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Format("profile file lacks format_version".into()))?;
        if version != u64::from(FORMAT_VERSION) {
            return Err(Error::Version { found: version as u32, supported: FORMAT_VERSION });
        }
        let doc: ProfileDocument =
            serde_json::from_value(probe).map_err(|e| Error::Format(format!("profile file: {e}")))?;
        if doc.format != FORMAT_NAME {
            return Err(Error::Format(format!("not a profile file: {:?}", doc.format)));
        }
        if doc.classes.len() != doc.num_classes {
            return Err(Error::Format("class count mismatch".into()));
        }
        let width = doc.classes.first().map_or(0, |c| c.neurons.len());
        for (k, class) in doc.classes.iter().enumerate() {
            if class.class_id != k || class.neurons.len() != width {
                return Err(Error::Format(format!("class {k} is malformed")));
            }
            for h in &class.neurons {
                let total: u64 = h.bins.values().sum();
                if h.sample_count != class.class_sample_count || (!h.dead && total != h.sample_count) {
                    return Err(Error::Format(format!("class {k}: histogram counts do not add up")));
                }
            }
        }
        Ok(ProfileModelSet {
            layer: doc.layer_index,
            c: doc.c,
            std_mode: doc.std_mode,
            normalization: doc.normalization,
            floor_count: doc.floor_count,
            total_train_count: doc.total_train_count,
            num_classes: doc.num_classes,
            classes: doc.classes,
        })
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_document(None).as_bytes()))
    }
}

pub fn save_profiles(set: &ProfileModelSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, set.to_document(None)).map_err(|e| Error::io(path, e))
}

pub fn load_profiles(path: impl AsRef<Path>) -> Result<ProfileModelSet> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ProfileModelSet::from_document(&text)
}
