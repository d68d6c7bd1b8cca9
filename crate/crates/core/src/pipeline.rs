//! End-to-end experiment: train, fit, derive, score, report.
//!
//! Every stage reads its inputs from and writes its outputs to one output
//! directory, so running the stages one by one gives the same files as
//! [`cmd_full`]. Text outputs start with a `# compprof <version>
//! config-sha256=<hex>` line; JSON outputs carry the same string in a
//! `generator` field. IDX files carry no header.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{self, Category, LabeledDataset, SetMetadata, NUM_CLASSES, PIXELS};
use crate::error::{Error, Result};
use crate::network::{self, LayerSpec, NetworkModel, TrainingConfig};
use crate::plot;
use crate::profiles::{self, DistanceRecord, Normalization, ProfileModelSet, ProfileOptions, StdMode};
use crate::rng;
use crate::stats::{self, ComparisonRow};
use crate::transforms;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const QUICK_TRAIN_PER_CLASS: usize = 600;
pub const QUICK_TEST_PER_CLASS: usize = 100;
pub const QUICK_EPOCHS: usize = 3;

pub const MODEL_FILE: &str = "model.json";
pub const TRAINING_LOG_FILE: &str = "training-log.csv";
pub const EVALUATION_FILE: &str = "evaluation.csv";
pub const PROFILES_FILE: &str = "profiles.json";
pub const FIT_SUMMARY_FILE: &str = "fit-summary.csv";
pub const RANDOM_STEM: &str = "random";
pub const ROTATION_STEM: &str = "rotation";
pub const CONFIG_FILE: &str = "config.txt";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMING_FILE: &str = "timing.txt";
pub const PLOTS_DIR: &str = "plots";

/// Every setting of one experiment run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    /// Layer sizes from input to output.
    pub architecture: Vec<usize>,
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: Option<u64>,
    pub c: f64,
    /// Profiled layer, 1-based; `None` selects N − 1.
    pub layer: Option<usize>,
    pub std_mode: StdMode,
    pub normalization: Normalization,
    pub floor_count: f64,
    pub rotation_step: f64,
    pub rotation_max: f64,
    /// `None` generates as many random images as there are training images.
    pub random_count: Option<usize>,
    pub plot_bins: usize,
    pub quick: bool,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            train_images: "data/train-images-idx3-ubyte.gz".into(),
            train_labels: "data/train-labels-idx1-ubyte.gz".into(),
            test_images: "data/t10k-images-idx3-ubyte.gz".into(),
            test_labels: "data/t10k-labels-idx1-ubyte.gz".into(),
            architecture: vec![PIXELS, 256, 64, NUM_CLASSES],
            epochs: None,
            batch_size: 64,
            learning_rate: 0.05,
            seed: None,
            c: 1.0,
            layer: None,
            std_mode: StdMode::Population,
            normalization: Normalization::Verbatim,
            floor_count: 0.5,
            rotation_step: 5.0,
            rotation_max: 40.0,
            random_count: None,
            plot_bins: plot::DEFAULT_BINS,
            quick: false,
            out: "out".into(),
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid value {value:?} for {key}"))),
    }
}

fn optional<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    match value.trim() {
        "" | "auto" | "-" => Ok(None),
        v => parse_value(key, v).map(Some),
    }
}

impl ExperimentConfig {
    /// Sets one key; dashes and underscores in the key are interchangeable.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let v = value.trim();
        match key.as_str() {
            "train_images" => self.train_images = v.into(),
            "train_labels" => self.train_labels = v.into(),
            "test_images" => self.test_images = v.into(),
            "test_labels" => self.test_labels = v.into(),
            "architecture" => {
                self.architecture = v
                    .split(',')
                    .map(|s| parse_value("architecture", s))
                    .collect::<Result<Vec<usize>>>()?
            }
            "epochs" => self.epochs = optional(&key, v)?,
            "batch_size" => self.batch_size = parse_value(&key, v)?,
            "learning_rate" => self.learning_rate = parse_value(&key, v)?,
            "seed" => self.seed = Some(parse_value(&key, v)?),
            "c" => self.c = parse_value(&key, v)?,
            "layer" => self.layer = optional(&key, v)?,
            "std_mode" => {
                self.std_mode = match v {
                    "population" => StdMode::Population,
                    "paper-literal" | "paper_literal" => StdMode::PaperLiteral,
                    _ => return Err(Error::Config(format!("unknown std_mode {v:?}"))),
                }
            }
            "paper_literal_std" => {
                if parse_bool(&key, v)? {
                    self.std_mode = StdMode::PaperLiteral
                }
            }
            "normalization" => {
                self.normalization = match v {
                    "verbatim" => Normalization::Verbatim,
                    "per-class" | "per_class" => Normalization::PerClass,
                    _ => return Err(Error::Config(format!("unknown normalization {v:?}"))),
                }
            }
            "per_class_norm" => {
                if parse_bool(&key, v)? {
                    self.normalization = Normalization::PerClass
                }
            }
            "floor_count" => self.floor_count = parse_value(&key, v)?,
            "rotation_step" => self.rotation_step = parse_value(&key, v)?,
            "rotation_max" => self.rotation_max = parse_value(&key, v)?,
            "random_count" => self.random_count = optional(&key, v)?,
            "plot_bins" => self.plot_bins = parse_value(&key, v)?,
            "quick" => self.quick = parse_bool(&key, v)?,
            "out" => self.out = v.into(),
            _ => return Err(Error::Config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a flat `key = value` document; `#` starts a comment line.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed.is_none() {
            return Err(Error::Config("a master seed is required (config key `seed` or --seed)".into()));
        }
        let a = &self.architecture;
        if a.len() < 3 || a[0] != PIXELS || a[a.len() - 1] != NUM_CLASSES {
            return Err(Error::Config(format!(
                "architecture must start at {PIXELS}, end at {NUM_CLASSES} and have a hidden layer, got {a:?}"
            )));
        }
        network::validate_architecture(&LayerSpec::chain(a)).map_err(|e| Error::Config(e.to_string()))?;
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config("batch_size and learning_rate must be positive".into()));
        }
        if !(self.c > 0.0) || !(self.floor_count > 0.0 && self.floor_count < 1.0) {
            return Err(Error::Config("c must be positive and floor_count in (0, 1)".into()));
        }
        if !(self.rotation_step > 0.0) || self.rotation_max < self.rotation_step {
            return Err(Error::Config("rotation_step must be positive and at most rotation_max".into()));
        }
        if let Some(l) = self.layer {
            if l == 0 || l >= a.len() {
                return Err(Error::Config(format!("layer {l} outside 1..={}", a.len() - 1)));
            }
        }
        if self.plot_bins == 0 {
            return Err(Error::Config("plot_bins must be positive".into()));
        }
        Ok(())
    }

    pub fn master_seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| Error::Config("a master seed is required".into()))
    }

    pub fn effective_epochs(&self) -> usize {
        self.epochs.unwrap_or(if self.quick { QUICK_EPOCHS } else { 10 })
    }

    pub fn profile_options(&self) -> ProfileOptions {
        ProfileOptions {
            c: self.c,
            layer: self.layer,
            std_mode: self.std_mode,
            normalization: self.normalization,
            floor_count: self.floor_count,
        }
    }

    /// Settings that determine the results, in a fixed order. The output
    /// directory is not part of it.
    pub fn snapshot(&self) -> Vec<(&'static str, String)> {
        let opt = |v: Option<usize>| v.map_or_else(|| "auto".to_string(), |x| x.to_string());
        vec![
            ("train_images", self.train_images.display().to_string()),
            ("train_labels", self.train_labels.display().to_string()),
            ("test_images", self.test_images.display().to_string()),
            ("test_labels", self.test_labels.display().to_string()),
            ("architecture", self.architecture.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")),
            ("epochs", self.effective_epochs().to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("seed", self.seed.map_or_else(|| "-".to_string(), |s| s.to_string())),
            ("c", self.c.to_string()),
            ("layer", opt(self.layer)),
            (
                "std_mode",
                match self.std_mode {
                    StdMode::Population => "population",
                    StdMode::PaperLiteral => "paper-literal",
                }
                .into(),
            ),
            (
                "normalization",
                match self.normalization {
                    Normalization::Verbatim => "verbatim",
                    Normalization::PerClass => "per-class",
                }
                .into(),
            ),
            ("floor_count", self.floor_count.to_string()),
            ("rotation_step", self.rotation_step.to_string()),
            ("rotation_max", self.rotation_max.to_string()),
            ("random_count", opt(self.random_count)),
            ("plot_bins", self.plot_bins.to_string()),
            ("quick", self.quick.to_string()),
        ]
    }

    pub fn render(&self) -> String {
        self.snapshot().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.render().as_bytes()))
    }

    pub fn generator(&self) -> String {
        format!("compprof {VERSION} config-sha256={}", self.digest())
    }

    /// Header line for text outputs, newline included.
    pub fn header(&self) -> String {
        format!("# {}\n", self.generator())
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn require(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "file not found")))
    }
}

fn append_timing(cfg: &ExperimentConfig, stage: &str, started: SystemTime, elapsed: f64) -> Result<()> {
    let path = cfg.out.join(TIMING_FILE);
    let start = started.duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
    if fresh {
        f.write_all(cfg.header().as_bytes()).map_err(|e| Error::io(&path, e))?;
    }
    writeln!(f, "{stage} started_unix={start} elapsed_s={elapsed:.3}").map_err(|e| Error::io(&path, e))
}

fn timed<T>(cfg: &ExperimentConfig, stage: &str, body: impl FnOnce() -> Result<T>) -> Result<T> {
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let started = SystemTime::now();
    let clock = Instant::now();
    info!("{stage}: starting");
    let out = body()?;
    let elapsed = clock.elapsed().as_secs_f64();
    info!("{stage}: done in {elapsed:.1} s");
    append_timing(cfg, stage, started, elapsed)?;
    Ok(out)
}

fn prepare(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    write_text(&cfg.out.join(CONFIG_FILE), &format!("{}{}", cfg.header(), cfg.render()))
}

/// Training set, reduced to a class-stratified prefix in quick mode.
pub fn load_train(cfg: &ExperimentConfig) -> Result<LabeledDataset> {
    let data = dataset::load_labeled(&cfg.train_images, &cfg.train_labels, Category::Train)?;
    Ok(if cfg.quick { data.stratified_prefix(QUICK_TRAIN_PER_CLASS) } else { data })
}

pub fn load_test(cfg: &ExperimentConfig) -> Result<LabeledDataset> {
    let data = dataset::load_labeled(&cfg.test_images, &cfg.test_labels, Category::Test)?;
    Ok(if cfg.quick { data.stratified_prefix(QUICK_TEST_PER_CLASS) } else { data })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: NetworkModel,
    pub log: Vec<network::EpochStats>,
    pub test_accuracy: f64,
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    prepare(cfg)?;
    for p in [&cfg.train_images, &cfg.train_labels, &cfg.test_images, &cfg.test_labels] {
        require(p)?;
    }
    timed(cfg, "train", || {
        let master = cfg.master_seed()?;
        let train = load_train(cfg)?;
        let test = load_test(cfg)?;
        let model = network::init_model(&LayerSpec::chain(&cfg.architecture), rng::child_seed(master, "init"))?;
        let tc = TrainingConfig {
            epochs: cfg.effective_epochs(),
            batch_size: cfg.batch_size,
            learning_rate: cfg.learning_rate,
            master_seed: rng::child_seed(master, "train"),
        };
        let mut log_text = cfg.header();
        log_text.push_str("epoch,mean_loss,train_accuracy,test_accuracy\n");
        let mut eval_err = None;
        let (model, log) = network::train_with(model, &train, &tc, |s, m| match network::evaluate(m, &test) {
            Ok(ev) => {
                info!(
                    "epoch {}: loss {:.4}, train accuracy {:.4}, test accuracy {:.4}",
                    s.epoch, s.mean_loss, s.train_accuracy, ev.accuracy
                );
                let _ = writeln!(log_text, "{},{:.6},{:.6},{:.6}", s.epoch, s.mean_loss, s.train_accuracy, ev.accuracy);
            }
            Err(e) => eval_err = Some(e),
        })?;
        if let Some(e) = eval_err {
            return Err(e);
        }
        let ev = network::evaluate(&model, &test)?;
        let mut ev_text = cfg.header();
        ev_text.push_str("class,correct,total,accuracy\n");
        for k in 0..model.num_classes() {
            let (c, t) = (ev.per_class_correct[k], ev.per_class_total[k]);
            let acc = if t == 0 { "-".to_string() } else { format!("{:.6}", c as f64 / t as f64) };
            let _ = writeln!(ev_text, "{k},{c},{t},{acc}");
        }
        let total: usize = ev.per_class_total.iter().sum();
        let correct: usize = ev.per_class_correct.iter().sum();
        let _ = writeln!(ev_text, "all,{correct},{total},{:.6}", ev.accuracy);

        fs::write(cfg.out.join(MODEL_FILE), model.to_document(Some(&cfg.generator())))
            .map_err(|e| Error::io(cfg.out.join(MODEL_FILE), e))?;
        write_text(&cfg.out.join(TRAINING_LOG_FILE), &log_text)?;
        write_text(&cfg.out.join(EVALUATION_FILE), &ev_text)?;
        println!("held-out accuracy: {:.4} ({correct}/{total})", ev.accuracy);
        Ok(TrainOutcome { model, log, test_accuracy: ev.accuracy })
    })
}

fn load_run_model(cfg: &ExperimentConfig) -> Result<NetworkModel> {
    network::load_model(cfg.out.join(MODEL_FILE))
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub profiles: ProfileModelSet,
    /// Live-neuron floor hits of every fitted input scored under its own class.
    pub self_floor_hits: usize,
    pub fitted_inputs: usize,
}

pub fn cmd_fit(cfg: &ExperimentConfig) -> Result<FitOutcome> {
    prepare(cfg)?;
    require(&cfg.out.join(MODEL_FILE))?;
    timed(cfg, "fit", || {
        let model = load_run_model(cfg)?;
        let train = load_train(cfg)?;
        let set = profiles::fit_profiles(&model, &train, &cfg.profile_options())?;

        let labels = train.class_labels()?;
        let (best, acts) = model.predict_with_layer(train.images(), set.layer)?;
        let mut hits = vec![0usize; set.num_classes];
        for r in 0..train.len() {
            if best[r] == labels[r] {
                let row = acts.row(r);
                hits[labels[r]] += set.floor_hits(row.as_slice().expect("contiguous row"), labels[r])?;
            }
        }

        let mut text = cfg.header();
        text.push_str("class,fitted_count,dead_neurons,self_floor_hits\n");
        println!("class  fitted  dead");
        for class in &set.classes {
            let dead = set.dead_neurons(class.class_id)?.len();
            let _ = writeln!(text, "{},{},{},{}", class.class_id, class.class_sample_count, dead, hits[class.class_id]);
            println!("{:>5}  {:>6}  {:>4}", class.class_id, class.class_sample_count, dead);
        }
        let doc = set.to_document(Some(&cfg.generator()));
        write_text(&cfg.out.join(PROFILES_FILE), &doc)?;
        write_text(&cfg.out.join(FIT_SUMMARY_FILE), &text)?;
        let fitted = set.classes.iter().map(|c| c.class_sample_count as usize).sum();
        Ok(FitOutcome { profiles: set, self_floor_hits: hits.iter().sum(), fitted_inputs: fitted })
    })
}

#[derive(Debug, Clone)]
pub struct DeriveOutcome {
    pub random: LabeledDataset,
    pub rotation: LabeledDataset,
    pub outcomes: Vec<transforms::RotationOutcome>,
}

pub fn cmd_derive(cfg: &ExperimentConfig) -> Result<DeriveOutcome> {
    prepare(cfg)?;
    require(&cfg.out.join(MODEL_FILE))?;
    timed(cfg, "derive", || {
        let model = load_run_model(cfg)?;
        let train = load_train(cfg)?;
        let header = cfg.header();

        let count = cfg.random_count.unwrap_or(train.len());
        let seed = rng::child_seed(cfg.master_seed()?, "random");
        let random = dataset::generate_random_images(count, seed);
        dataset::write_idx_images(cfg.out.join(format!("{RANDOM_STEM}-images-idx3-ubyte")), random.images())?;
        let meta = SetMetadata { category: Category::Random, seed: Some(seed), count };
        write_text(&cfg.out.join(format!("{RANDOM_STEM}.meta")), &meta.render(&header))?;

        let (rotation, outcomes) =
            transforms::build_rotation_set(&model, &train, cfg.rotation_step, cfg.rotation_max)?;
        transforms::write_rotation_set(&cfg.out, ROTATION_STEM, &outcomes, &header)?;
        println!("random images: {count}; rotation set: {} of {} training images", outcomes.len(), train.len());
        if outcomes.is_empty() {
            warn!("the rotation search produced no misclassified images");
        }
        Ok(DeriveOutcome { random, rotation, outcomes })
    })
}

pub fn records_path(out: &Path, category: Category) -> PathBuf {
    out.join(format!("records-{category}.csv"))
}

pub fn load_random(cfg: &ExperimentConfig) -> Result<LabeledDataset> {
    dataset::load_unlabeled(cfg.out.join(format!("{RANDOM_STEM}-images-idx3-ubyte")), Category::Random)
}

pub fn load_rotation(cfg: &ExperimentConfig) -> Result<LabeledDataset> {
    Ok(transforms::read_rotation_set(&cfg.out, ROTATION_STEM)?.0)
}

pub fn cmd_score(cfg: &ExperimentConfig) -> Result<BTreeMap<Category, Vec<DistanceRecord>>> {
    prepare(cfg)?;
    for f in [MODEL_FILE, PROFILES_FILE] {
        require(&cfg.out.join(f))?;
    }
    timed(cfg, "score", || {
        let model = load_run_model(cfg)?;
        let set = profiles::load_profiles(cfg.out.join(PROFILES_FILE))?;
        let mut all = BTreeMap::new();
        for category in Category::ALL {
            let data = match category {
                Category::Train => load_train(cfg)?,
                Category::Test => load_test(cfg)?,
                Category::Random => load_random(cfg)?,
                Category::Rotation => load_rotation(cfg)?,
            };
            let records = profiles::score_dataset(&model, &set, &data, category)?;
            write_text(&records_path(&cfg.out, category), &profiles::records_csv(&records, &cfg.header()))?;
            info!("scored {} {category} inputs", records.len());
            all.insert(category, records);
        }
        Ok(all)
    })
}

pub const COMPARED: [Category; 3] = [Category::Test, Category::Random, Category::Rotation];

#[derive(Debug, Clone)]
pub struct ReportOutcome {
    pub summaries: BTreeMap<Category, Vec<profiles::ClassSummary>>,
    /// Train against each other category.
    pub comparisons: BTreeMap<Category, Vec<ComparisonRow>>,
}

pub fn cmd_report(cfg: &ExperimentConfig) -> Result<ReportOutcome> {
    prepare(cfg)?;
    for c in Category::ALL {
        require(&records_path(&cfg.out, c))?;
    }
    let outcome = timed(cfg, "report", || {
        let header = cfg.header();
        let mut records = BTreeMap::new();
        for c in Category::ALL {
            let r = profiles::read_records(records_path(&cfg.out, c))?;
            if r.is_empty() {
                warn!("no {c} records; its table cells stay blank");
            }
            records.insert(c, r);
        }
        let k = NUM_CLASSES;
        let mut summaries = BTreeMap::new();
        for (c, r) in &records {
            let s = profiles::summarize(r, k);
            write_text(&cfg.out.join(format!("summary-{c}.csv")), &profiles::summary_csv(&s, &header))?;
            summaries.insert(*c, s);
        }
        let mut comparisons = BTreeMap::new();
        for other in COMPARED {
            let rows = stats::compare_categories(&records[&Category::Train], &records[&other], k, stats::DEFAULT_ALPHA)?;
            let stem = format!("compare-train-{other}");
            write_text(&cfg.out.join(format!("{stem}.csv")), &stats::comparison_csv(&rows, &header))?;
            write_text(&cfg.out.join(format!("{stem}-extras.csv")), &stats::extras_csv(&rows, &header))?;
            comparisons.insert(other, rows);
        }
        let groups: Vec<(Category, &[DistanceRecord])> =
            Category::ALL.iter().map(|c| (*c, records[c].as_slice())).collect();
        let plots = cfg.out.join(PLOTS_DIR);
        for h in plot::class_histograms(&groups, k, cfg.plot_bins) {
            let stem = format!("class-{}", h.class_id);
            write_text(&plots.join(format!("{stem}.csv")), &plot::histogram_csv(&h, &header))?;
            write_text(&plots.join(format!("{stem}.svg")), &plot::histogram_svg(&h, &cfg.generator()))?;
        }
        print_report(&summaries, &comparisons);
        Ok(ReportOutcome { summaries, comparisons })
    })?;
    write_manifest(cfg)?;
    Ok(outcome)
}

fn print_report(
    summaries: &BTreeMap<Category, Vec<profiles::ClassSummary>>,
    comparisons: &BTreeMap<Category, Vec<ComparisonRow>>,
) {
    let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.1}"));
    for (c, rows) in summaries {
        println!("distances: {c}");
        println!("class  count     avg     std");
        for r in rows {
            println!("{:>5}  {:>5}  {:>6}  {:>6}", r.class_id, r.count, cell(r.mean), cell(r.std));
        }
    }
    for (c, rows) in comparisons {
        println!("train / {c}");
        println!("class    es_stat   es_p        delta  magnitude   bh");
        for r in rows {
            let es = r.es.map_or_else(|| ("-".into(), "-".into()), |t| (format!("{:.1}", t.statistic), format!("{:.2e}", t.p_value)));
            let (d, m) = r.cliffs.map_or_else(|| ("-".into(), "-".into()), |e| (format!("{:.3}", e.delta), e.magnitude.to_string()));
            let bh = r.bh_rejected.map_or_else(|| "-".to_string(), |b| b.to_string());
            println!("{:>5}  {:>9}  {:>9}  {:>6}  {:<10}  {}", r.class_id, es.0, es.1, d, m, bh);
        }
    }
}

/// Digest of the run: config and the SHA-256 of every artifact. Timestamps
/// live in the separate timing file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub generator: String,
    pub version: String,
    pub config_sha256: String,
    pub config: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, String>,
}

fn artifact_paths(out: &Path) -> Result<Vec<String>> {
    let mut found = Vec::new();
    let mut stack = vec![out.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path.strip_prefix(out).expect("walk stays under out").to_string_lossy().replace('\\', "/");
            if rel != MANIFEST_FILE && rel != TIMING_FILE {
                found.push(rel);
            }
        }
    }
    found.sort();
    Ok(found)
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn build_manifest(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let artifacts = artifact_paths(&cfg.out)?
        .into_iter()
        .map(|rel| Ok((rel.clone(), file_sha256(&cfg.out.join(&rel))?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(RunManifest {
        generator: cfg.generator(),
        version: VERSION.into(),
        config_sha256: cfg.digest(),
        config: cfg.snapshot().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        artifacts,
    })
}

pub fn write_manifest(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let m = build_manifest(cfg)?;
    let mut text = serde_json::to_string_pretty(&m).expect("manifest serializes");
    text.push('\n');
    write_text(&cfg.out.join(MANIFEST_FILE), &text)?;
    Ok(m)
}

/// Artifacts whose current digest differs from the manifest (or are missing).
pub fn verify_manifest(out: &Path) -> Result<Vec<String>> {
    let path = out.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: RunManifest = serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    let mut bad = Vec::new();
    for (rel, digest) in &m.artifacts {
        match file_sha256(&out.join(rel)) {
            Ok(d) if &d == digest => {}
            _ => bad.push(rel.clone()),
        }
    }
    Ok(bad)
}

#[derive(Debug, Clone)]
pub struct FullOutcome {
    pub train: TrainOutcome,
    pub fit: FitOutcome,
    pub derive: DeriveOutcome,
    pub records: BTreeMap<Category, Vec<DistanceRecord>>,
    pub report: ReportOutcome,
    pub elapsed_s: f64,
}

pub fn cmd_full(cfg: &ExperimentConfig) -> Result<FullOutcome> {
    let clock = Instant::now();
    let train = cmd_train(cfg)?;
    let fit = cmd_fit(cfg)?;
    let derive = cmd_derive(cfg)?;
    let records = cmd_score(cfg)?;
    let report = cmd_report(cfg)?;
    Ok(FullOutcome { train, fit, derive, records, report, elapsed_s: clock.elapsed().as_secs_f64() })
}
