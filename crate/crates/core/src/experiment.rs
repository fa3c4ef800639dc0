//! Experiment plumbing: the text config format, run records, the metrics CSV
//! and the multi-seed comparison harness.
//!
//! A config file is UTF-8 `key = value` lines. `#` starts a comment, keys are
//! dotted (`trainer.tau`), lists are comma separated and every key is
//! optional. [`ExperimentConfig::to_text`] writes a file that parses back to
//! the same config.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;
use std::time::Instant;

use crate::autodiff::NormMode;
use crate::datahub::{
    self, gen_synthetic, split_balanced, split_longtail, DatasetSplit, LongTailConfig, Sample, Source, SyntheticConfig,
};
use crate::error::{Error, Result};
use crate::imgperturb::{AugPolicy, ImageOp};
use crate::nets::{ModelKind, ModelSpec};
use crate::schedulers::ThresholdKind;
use crate::tensor::Tensor;
use crate::trainer::{self, Branch1Threshold, DaTarget, MetricsRow, Paradigm, TrainConfig};

pub const METRICS_HEADER: &str =
    "step,lr,loss_s,loss_u1,loss_u2,util_b1,util_b2,cbi_mask_rate,naive_ratio,acc,ema_acc,wall_ms";

/// Worker cap for [`compare`].
pub const THREADS_ENV: &str = "IFMATCH_THREADS";

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic,
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitKind {
    Balanced { num_labels: usize },
    LongTail { n1: usize, m1: usize, gamma: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub classes: usize,
    pub channels: usize,
    pub size: usize,
    /// Synthetic only.
    pub per_class: usize,
    pub test_per_class: usize,
    pub difficulty: f64,
    pub split: SplitKind,
    pub exclude_labeled: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SyntheticConfig::default();
        DataConfig {
            source: DataSource::Synthetic,
            classes: s.classes,
            channels: s.channels,
            size: s.size,
            per_class: s.per_class,
            test_per_class: s.test_per_class,
            difficulty: s.difficulty,
            split: SplitKind::Balanced { num_labels: 40 },
            exclude_labeled: true,
        }
    }
}

/// Everything needed to reproduce one run. `seed` drives data generation,
/// the split and training.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelSpec,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut c = ExperimentConfig {
            seed: 0,
            data: DataConfig::default(),
            model: ModelSpec::default(),
            train: TrainConfig::default(),
        };
        c.sync();
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Key {
    Seed,
    DataSource,
    DataClasses,
    DataChannels,
    DataSize,
    DataPerClass,
    DataTestPerClass,
    DataDifficulty,
    DataTrainImages,
    DataTrainLabels,
    DataTestImages,
    DataTestLabels,
    DataTrainCsv,
    DataTestCsv,
    DataSplit,
    DataNumLabels,
    DataN1,
    DataM1,
    DataGamma,
    DataExcludeLabeled,
    ModelKind,
    ModelWidths,
    ModelBlocks,
    ModelNorm,
    ModelMlpHidden,
    BatchLabeled,
    BatchUnlabeled,
    LambdaU,
    Tau,
    Threshold,
    ClampMin,
    ClampMax,
    Branch1,
    Steps,
    Lr,
    WeightDecay,
    Momentum,
    EmaDecay,
    Paradigm,
    Cbi,
    Da,
    DaTarget,
    Strategies,
    EvalEvery,
    EvalBatch,
    Timing,
    AugPad,
    AugFlip,
    AugOps,
    AugMagMin,
    AugMagMax,
    AugPool,
    AugCutout,
}

const KEYS: &[(&str, Key)] = &[
    ("seed", Key::Seed),
    ("data.source", Key::DataSource),
    ("data.classes", Key::DataClasses),
    ("data.channels", Key::DataChannels),
    ("data.size", Key::DataSize),
    ("data.per_class", Key::DataPerClass),
    ("data.test_per_class", Key::DataTestPerClass),
    ("data.difficulty", Key::DataDifficulty),
    ("data.train_images", Key::DataTrainImages),
    ("data.train_labels", Key::DataTrainLabels),
    ("data.test_images", Key::DataTestImages),
    ("data.test_labels", Key::DataTestLabels),
    ("data.train_csv", Key::DataTrainCsv),
    ("data.test_csv", Key::DataTestCsv),
    ("data.split", Key::DataSplit),
    ("data.num_labels", Key::DataNumLabels),
    ("data.n1", Key::DataN1),
    ("data.m1", Key::DataM1),
    ("data.gamma", Key::DataGamma),
    ("data.exclude_labeled", Key::DataExcludeLabeled),
    ("model.kind", Key::ModelKind),
    ("model.widths", Key::ModelWidths),
    ("model.blocks_per_stage", Key::ModelBlocks),
    ("model.norm", Key::ModelNorm),
    ("model.mlp_hidden", Key::ModelMlpHidden),
    ("trainer.batch_labeled", Key::BatchLabeled),
    ("trainer.batch_unlabeled", Key::BatchUnlabeled),
    ("trainer.lambda_u", Key::LambdaU),
    ("trainer.tau", Key::Tau),
    ("trainer.threshold", Key::Threshold),
    ("trainer.clamp_min", Key::ClampMin),
    ("trainer.clamp_max", Key::ClampMax),
    ("trainer.branch1_threshold", Key::Branch1),
    ("trainer.steps", Key::Steps),
    ("trainer.lr", Key::Lr),
    ("trainer.weight_decay", Key::WeightDecay),
    ("trainer.momentum", Key::Momentum),
    ("trainer.ema_decay", Key::EmaDecay),
    ("trainer.paradigm", Key::Paradigm),
    ("trainer.cbi", Key::Cbi),
    ("trainer.da", Key::Da),
    ("trainer.da_target", Key::DaTarget),
    ("trainer.strategies", Key::Strategies),
    ("trainer.eval_every", Key::EvalEvery),
    ("trainer.eval_batch", Key::EvalBatch),
    ("trainer.timing", Key::Timing),
    ("augment.pad", Key::AugPad),
    ("augment.flip_p", Key::AugFlip),
    ("augment.n_ops", Key::AugOps),
    ("augment.magnitude_min", Key::AugMagMin),
    ("augment.magnitude_max", Key::AugMagMax),
    ("augment.ops", Key::AugPool),
    ("augment.cutout_max", Key::AugCutout),
];

/// All accepted config keys, in file order.
pub fn config_keys() -> impl Iterator<Item = &'static str> {
    KEYS.iter().map(|(k, _)| *k)
}

fn nearest_key(unknown: &str) -> Option<&'static str> {
    config_keys()
        .map(|k| (strsim::levenshtein(unknown, k), k))
        .filter(|(d, k)| *d <= 3.max(k.len() / 4))
        .min_by_key(|(d, _)| *d)
        .map(|(_, k)| k)
}

struct Line<'a> {
    no: usize,
    key: &'a str,
    value: &'a str,
}

impl Line<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Config {
            line: self.no,
            msg: format!("{}: {}", self.key, msg.into()),
        }
    }

    fn parse<T: FromStr>(&self, what: &str) -> Result<T> {
        self.value
            .parse()
            .map_err(|_| self.err(format!("expected {what}, found '{}'", self.value)))
    }

    fn count(&self, min: usize) -> Result<usize> {
        let v: usize = self.parse("a nonnegative integer")?;
        if v < min {
            return Err(self.err(format!("must be at least {min}, found {v}")));
        }
        Ok(v)
    }

    fn real(&self, lo: f64, hi: f64, lo_open: bool) -> Result<f64> {
        let v: f64 = self.parse("a number")?;
        let above = if lo_open { v > lo } else { v >= lo };
        if !(above && v <= hi) {
            let open = if lo_open { "(" } else { "[" };
            return Err(self.err(format!("{v} outside {open}{lo}, {hi}]")));
        }
        Ok(v)
    }

    fn flag(&self) -> Result<bool> {
        match self.value {
            "true" | "yes" | "on" | "1" => Ok(true),
            "false" | "no" | "off" | "0" => Ok(false),
            v => Err(self.err(format!("expected true or false, found '{v}'"))),
        }
    }

    fn named<T: FromStr<Err = String>>(&self) -> Result<T> {
        self.value.parse().map_err(|e: String| self.err(e))
    }

    fn list<T: FromStr<Err = String>>(&self) -> Result<Vec<T>> {
        self.value
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e: String| self.err(e)))
            .collect()
    }

    fn path(&self, base: &Path) -> PathBuf {
        let p = PathBuf::from(self.value);
        if p.is_absolute() {
            p
        } else {
            base.join(p)
        }
    }
}

fn parse_kind(s: &str) -> std::result::Result<ModelKind, String> {
    match s {
        "resnet" => Ok(ModelKind::ResidualCnn),
        "mlp" => Ok(ModelKind::Mlp),
        _ => Err(format!("unknown model kind '{s}' (expected resnet or mlp)")),
    }
}

fn parse_norm(s: &str) -> std::result::Result<NormMode, String> {
    match s {
        "sample" => Ok(NormMode::Sample),
        "batch" => Ok(NormMode::Batch),
        _ => Err(format!("unknown norm '{s}' (expected sample or batch)")),
    }
}

fn parse_da_target(s: &str) -> std::result::Result<DaTarget, String> {
    match s {
        "uniform" => Ok(DaTarget::Uniform),
        "labeled_prior" => Ok(DaTarget::LabeledPrior),
        _ => Err(format!("unknown DA target '{s}' (expected uniform or labeled_prior)")),
    }
}

fn join<T>(items: &[T], name: impl Fn(&T) -> String) -> String {
    items.iter().map(name).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Parses config text. Relative paths resolve against `base`.
    pub fn parse_str(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut aug: Option<AugPolicy> = None;
        let mut clamp = (None, None);
        let mut seen: Vec<(&str, usize)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let no = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let Some((k, v)) = body.split_once('=') else {
                return Err(Error::Config {
                    line: no,
                    msg: format!("expected 'key = value', found '{body}'"),
                });
            };
            let line = Line {
                no,
                key: k.trim(),
                value: v.trim(),
            };
            let Some(&(name, key)) = KEYS.iter().find(|(n, _)| *n == line.key) else {
                let hint = nearest_key(line.key)
                    .map(|k| format!("; did you mean '{k}'?"))
                    .unwrap_or_default();
                return Err(Error::Config {
                    line: no,
                    msg: format!("unknown key '{}'{hint}", line.key),
                });
            };
            if let Some((_, first)) = seen.iter().find(|(n, _)| *n == name) {
                return Err(line.err(format!("already set on line {first}")));
            }
            seen.push((name, no));
            let size = cfg.data.size;
            let channels = cfg.data.channels;
            let policy = || AugPolicy::for_size(size, channels);
            let d = &mut cfg.data;
            let t = &mut cfg.train;
            match key {
                Key::Seed => cfg.seed = line.parse("an unsigned integer")?,
                Key::DataSource => {
                    d.source = match line.value {
                        "synthetic" => DataSource::Synthetic,
                        "idx" => DataSource::Idx {
                            train_images: PathBuf::new(),
                            train_labels: PathBuf::new(),
                            test_images: PathBuf::new(),
                            test_labels: PathBuf::new(),
                        },
                        "csv" => DataSource::Csv {
                            train: PathBuf::new(),
                            test: PathBuf::new(),
                        },
                        v => return Err(line.err(format!("unknown source '{v}' (expected synthetic, idx or csv)"))),
                    }
                }
                Key::DataClasses => d.classes = line.count(2)?,
                Key::DataChannels => d.channels = line.count(1)?,
                Key::DataSize => d.size = line.count(2)?,
                Key::DataPerClass => d.per_class = line.count(1)?,
                Key::DataTestPerClass => d.test_per_class = line.count(0)?,
                Key::DataDifficulty => d.difficulty = line.real(0.0, f64::MAX, false)?,
                Key::DataTrainImages | Key::DataTrainLabels | Key::DataTestImages | Key::DataTestLabels => {
                    let DataSource::Idx {
                        train_images,
                        train_labels,
                        test_images,
                        test_labels,
                    } = &mut d.source
                    else {
                        return Err(line.err("only valid after data.source = idx"));
                    };
                    let slot = match key {
                        Key::DataTrainImages => train_images,
                        Key::DataTrainLabels => train_labels,
                        Key::DataTestImages => test_images,
                        _ => test_labels,
                    };
                    *slot = line.path(base);
                }
                Key::DataTrainCsv | Key::DataTestCsv => {
                    let DataSource::Csv { train, test } = &mut d.source else {
                        return Err(line.err("only valid after data.source = csv"));
                    };
                    *(if key == Key::DataTrainCsv { train } else { test }) = line.path(base);
                }
                Key::DataSplit => {
                    d.split = match line.value {
                        "balanced" => SplitKind::Balanced { num_labels: 40 },
                        "longtail" => SplitKind::LongTail {
                            n1: 150,
                            m1: 300,
                            gamma: 100.0,
                        },
                        v => return Err(line.err(format!("unknown split '{v}' (expected balanced or longtail)"))),
                    }
                }
                Key::DataNumLabels => match &mut d.split {
                    SplitKind::Balanced { num_labels } => *num_labels = line.count(1)?,
                    _ => return Err(line.err("only valid with data.split = balanced")),
                },
                Key::DataN1 | Key::DataM1 | Key::DataGamma => {
                    let SplitKind::LongTail { n1, m1, gamma } = &mut d.split else {
                        return Err(line.err("only valid after data.split = longtail"));
                    };
                    match key {
                        Key::DataN1 => *n1 = line.count(1)?,
                        Key::DataM1 => *m1 = line.count(0)?,
                        _ => *gamma = line.real(1.0, f64::MAX, false)?,
                    }
                }
                Key::DataExcludeLabeled => d.exclude_labeled = line.flag()?,
                Key::ModelKind => cfg.model.kind = line.named_with(parse_kind)?,
                Key::ModelWidths => {
                    let w: Vec<usize> = line
                        .value
                        .split(',')
                        .map(|s| s.trim().parse::<usize>().ok().filter(|&v| v > 0))
                        .collect::<Option<_>>()
                        .ok_or_else(|| line.err("expected a comma-separated list of positive widths"))?;
                    if w.is_empty() {
                        return Err(line.err("need at least one stage"));
                    }
                    cfg.model.stage_widths = w;
                }
                Key::ModelBlocks => cfg.model.blocks_per_stage = line.count(1)?,
                Key::ModelNorm => cfg.model.norm = line.named_with(parse_norm)?,
                Key::ModelMlpHidden => cfg.model.mlp_hidden = line.count(1)?,
                Key::BatchLabeled => t.batch_labeled = line.count(1)?,
                Key::BatchUnlabeled => t.batch_unlabeled = line.count(1)?,
                Key::LambdaU => t.lambda_u = line.real(0.0, f64::MAX, false)?,
                Key::Tau => t.tau = line.real(0.0, 1.0, true)?,
                Key::Threshold => t.threshold = line.named()?,
                Key::ClampMin => clamp.0 = Some((line.real(0.0, 1.0, false)?, no)),
                Key::ClampMax => clamp.1 = Some((line.real(0.0, 1.0, false)?, no)),
                Key::Branch1 => t.branch1_threshold = line.named()?,
                Key::Steps => t.steps = line.count(0)?,
                Key::Lr => t.lr = line.real(0.0, f64::MAX, true)?,
                Key::WeightDecay => t.weight_decay = line.real(0.0, f64::MAX, false)?,
                Key::Momentum => {
                    t.momentum = line.real(0.0, 1.0, false)?;
                    if t.momentum == 1.0 {
                        return Err(line.err("must be below 1"));
                    }
                }
                Key::EmaDecay => t.ema_decay = line.real(0.0, 1.0, false)?,
                Key::Paradigm => t.paradigm = line.named()?,
                Key::Cbi => t.cbi = line.flag()?,
                Key::Da => t.da = line.flag()?,
                Key::DaTarget => t.da_target = line.named_with(parse_da_target)?,
                Key::Strategies => {
                    t.strategies = line.list()?;
                    if t.strategies.is_empty() {
                        return Err(line.err("need at least one strategy"));
                    }
                }
                Key::EvalEvery => t.eval_every = Some(line.count(1)?),
                Key::EvalBatch => t.eval_batch = line.count(1)?,
                Key::Timing => t.timing = line.flag()?,
                Key::AugPad => aug.get_or_insert_with(policy).pad = line.count(0)?,
                Key::AugFlip => aug.get_or_insert_with(policy).flip_p = line.real(0.0, 1.0, false)?,
                Key::AugOps => aug.get_or_insert_with(policy).n_ops = line.count(0)?,
                Key::AugMagMin => aug.get_or_insert_with(policy).magnitude.0 = line.real(0.0, 1.0, false)?,
                Key::AugMagMax => aug.get_or_insert_with(policy).magnitude.1 = line.real(0.0, 1.0, false)?,
                Key::AugPool => aug.get_or_insert_with(policy).pool = line.list::<ImageOp>()?,
                Key::AugCutout => aug.get_or_insert_with(policy).cutout_max = line.real(0.0, 1.0, false)?,
            }
        }
        cfg.train.clamp = match clamp {
            (None, None) => None,
            (Some((lo, _)), Some((hi, no))) => {
                if lo > hi {
                    return Err(Error::Config {
                        line: no,
                        msg: format!("trainer.clamp_max {hi} is below trainer.clamp_min {lo}"),
                    });
                }
                Some((lo, hi))
            }
            (Some((_, no)), None) | (None, Some((_, no))) => {
                return Err(Error::Config {
                    line: no,
                    msg: "trainer.clamp_min and trainer.clamp_max must be set together".into(),
                })
            }
        };
        if let Some(mut p) = aug {
            if !seen.iter().any(|(n, _)| *n == "augment.pad") {
                p.pad = AugPolicy::for_size(cfg.data.size, cfg.data.channels).pad;
            }
            p.fill.clear();
            cfg.train.augment = Some(p);
        }
        cfg.sync();
        cfg.check()?;
        Ok(cfg)
    }

    /// Reads and parses a config file.
    pub fn parse_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        ExperimentConfig::parse_str(&text, &base)
    }

    /// Copies the shared fields (seed, class count, input shape) into the
    /// model and trainer sections.
    pub fn sync(&mut self) {
        self.train.seed = self.seed;
        self.model.num_classes = self.data.classes;
        self.model.input_shape = [self.data.channels, self.data.size, self.data.size];
    }

    fn check(&self) -> Result<()> {
        let whole = |e: Error| match e {
            Error::Config { .. } => e,
            other => Error::Config {
                line: 0,
                msg: other.to_string(),
            },
        };
        self.train.validate().map_err(whole)?;
        if let Some(p) = &self.train.augment {
            p.validate().map_err(whole)?;
        }
        let missing = |what: &str| Error::Config {
            line: 0,
            msg: format!("{what} is required for this data source"),
        };
        match &self.data.source {
            DataSource::Synthetic => {}
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                for (p, k) in [
                    (train_images, "data.train_images"),
                    (train_labels, "data.train_labels"),
                    (test_images, "data.test_images"),
                    (test_labels, "data.test_labels"),
                ] {
                    if p.as_os_str().is_empty() {
                        return Err(missing(k));
                    }
                }
                if self.data.channels != 1 {
                    return Err(Error::Config {
                        line: 0,
                        msg: "idx images are single-channel; set data.channels = 1".into(),
                    });
                }
            }
            DataSource::Csv { train, test } => {
                if train.as_os_str().is_empty() {
                    return Err(missing("data.train_csv"));
                }
                if test.as_os_str().is_empty() {
                    return Err(missing("data.test_csv"));
                }
            }
        }
        if let SplitKind::Balanced { num_labels } = self.data.split {
            if num_labels % self.data.classes != 0 {
                return Err(Error::Config {
                    line: 0,
                    msg: format!(
                        "data.num_labels {num_labels} is not a multiple of data.classes {}",
                        self.data.classes
                    ),
                });
            }
        }
        Ok(())
    }

    /// Serializes every key. Parsing the result gives back `self`, except
    /// that data paths become absolute when they were relative.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        let d = &self.data;
        let t = &self.train;
        put("seed", self.seed.to_string());
        match &d.source {
            DataSource::Synthetic => put("data.source", "synthetic".into()),
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                put("data.source", "idx".into());
                put("data.train_images", train_images.display().to_string());
                put("data.train_labels", train_labels.display().to_string());
                put("data.test_images", test_images.display().to_string());
                put("data.test_labels", test_labels.display().to_string());
            }
            DataSource::Csv { train, test } => {
                put("data.source", "csv".into());
                put("data.train_csv", train.display().to_string());
                put("data.test_csv", test.display().to_string());
            }
        }
        put("data.classes", d.classes.to_string());
        put("data.channels", d.channels.to_string());
        put("data.size", d.size.to_string());
        put("data.per_class", d.per_class.to_string());
        put("data.test_per_class", d.test_per_class.to_string());
        put("data.difficulty", format!("{:?}", d.difficulty));
        match d.split {
            SplitKind::Balanced { num_labels } => {
                put("data.split", "balanced".into());
                put("data.num_labels", num_labels.to_string());
            }
            SplitKind::LongTail { n1, m1, gamma } => {
                put("data.split", "longtail".into());
                put("data.n1", n1.to_string());
                put("data.m1", m1.to_string());
                put("data.gamma", format!("{gamma:?}"));
            }
        }
        put("data.exclude_labeled", d.exclude_labeled.to_string());
        let m = &self.model;
        put(
            "model.kind",
            match m.kind {
                ModelKind::ResidualCnn => "resnet",
                ModelKind::Mlp => "mlp",
            }
            .into(),
        );
        put("model.widths", join(&m.stage_widths, |w| w.to_string()));
        put("model.blocks_per_stage", m.blocks_per_stage.to_string());
        put(
            "model.norm",
            match m.norm {
                NormMode::Sample => "sample",
                NormMode::Batch => "batch",
            }
            .into(),
        );
        put("model.mlp_hidden", m.mlp_hidden.to_string());
        put("trainer.batch_labeled", t.batch_labeled.to_string());
        put("trainer.batch_unlabeled", t.batch_unlabeled.to_string());
        put("trainer.lambda_u", format!("{:?}", t.lambda_u));
        put("trainer.tau", format!("{:?}", t.tau));
        put("trainer.threshold", t.threshold.name().into());
        if let Some((lo, hi)) = t.clamp {
            put("trainer.clamp_min", format!("{lo:?}"));
            put("trainer.clamp_max", format!("{hi:?}"));
        }
        put("trainer.branch1_threshold", t.branch1_threshold.to_string());
        put("trainer.steps", t.steps.to_string());
        put("trainer.lr", format!("{:?}", t.lr));
        put("trainer.weight_decay", format!("{:?}", t.weight_decay));
        put("trainer.momentum", format!("{:?}", t.momentum));
        put("trainer.ema_decay", format!("{:?}", t.ema_decay));
        put("trainer.paradigm", t.paradigm.name().into());
        put("trainer.cbi", t.cbi.to_string());
        put("trainer.da", t.da.to_string());
        put(
            "trainer.da_target",
            match t.da_target {
                DaTarget::Uniform => "uniform",
                DaTarget::LabeledPrior => "labeled_prior",
            }
            .into(),
        );
        put("trainer.strategies", join(&t.strategies, |s| s.name().to_string()));
        if let Some(e) = t.eval_every {
            put("trainer.eval_every", e.to_string());
        }
        put("trainer.eval_batch", t.eval_batch.to_string());
        put("trainer.timing", t.timing.to_string());
        if let Some(p) = &t.augment {
            put("augment.pad", p.pad.to_string());
            put("augment.flip_p", format!("{:?}", p.flip_p));
            put("augment.n_ops", p.n_ops.to_string());
            put("augment.magnitude_min", format!("{:?}", p.magnitude.0));
            put("augment.magnitude_max", format!("{:?}", p.magnitude.1));
            put("augment.ops", join(&p.pool, |o| o.name().to_string()));
            put("augment.cutout_max", format!("{:?}", p.cutout_max));
        }
        s
    }

    /// Builds the source pool for this config.
    pub fn load_source(&self) -> Result<Source> {
        let d = &self.data;
        let shape = [d.channels, d.size, d.size];
        match &d.source {
            DataSource::Synthetic => gen_synthetic(&SyntheticConfig {
                classes: d.classes,
                per_class: d.per_class,
                test_per_class: d.test_per_class,
                channels: d.channels,
                size: d.size,
                difficulty: d.difficulty,
                seed: self.seed,
            }),
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let (tr_x, tr_y) = datahub::load_idx(train_images, train_labels)?;
                let (te_x, te_y) = datahub::load_idx(test_images, test_labels)?;
                let n = tr_x.len() as u64;
                let wrap = |xs: Vec<Tensor>, ys: Vec<usize>, first: u64| -> Result<Vec<Sample>> {
                    xs.into_iter()
                        .zip(ys)
                        .zip(first..)
                        .map(|((image, class), id)| {
                            if image.shape() != shape {
                                return Err(Error::Data(format!(
                                    "idx image {id} is {:?}, config expects {shape:?}",
                                    image.shape()
                                )));
                            }
                            Ok(Sample { id, image, class })
                        })
                        .collect()
                };
                datahub::source_from_samples(wrap(tr_x, tr_y, 0)?, wrap(te_x, te_y, n)?, d.classes)
            }
            DataSource::Csv { train, test } => datahub::source_from_samples(
                datahub::load_csv(train, shape)?,
                datahub::load_csv(test, shape)?,
                d.classes,
            ),
        }
    }

    pub fn load_split(&self) -> Result<DatasetSplit> {
        let source = self.load_source()?;
        self.split(&source)
    }

    pub fn split(&self, source: &Source) -> Result<DatasetSplit> {
        match self.data.split {
            SplitKind::Balanced { num_labels } => {
                split_balanced(source, num_labels, self.seed, self.data.exclude_labeled)
            }
            SplitKind::LongTail { n1, m1, gamma } => split_longtail(
                source,
                &LongTailConfig {
                    n1,
                    m1,
                    gamma,
                    classes: self.data.classes,
                },
                self.seed,
            ),
        }
    }

    /// Same experiment under another master seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.sync();
        c
    }
}

impl Line<'_> {
    fn named_with<T>(&self, f: fn(&str) -> std::result::Result<T, String>) -> Result<T> {
        f(self.value).map_err(|e| self.err(e))
    }
}

/// Parses a config file into an experiment description.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::parse_file(path)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub best_ema_acc: f64,
    pub last_ema_acc: f64,
    pub mean_naive_ratio: f64,
    pub wall_ms: f64,
}

/// A finished run: config snapshot, metrics rows and summary.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRecord {
    pub config: ExperimentConfig,
    pub rows: Vec<MetricsRow>,
    pub summary: Summary,
}

impl ExperimentRecord {
    pub fn new(config: ExperimentConfig, rows: Vec<MetricsRow>, wall_ms: f64) -> Result<Self> {
        check_rows(&rows)?;
        let last = rows
            .last()
            .ok_or_else(|| Error::invalid("experiment record", "no metrics rows"))?;
        // The initial row carries no training statistics.
        let trained = &rows[1..];
        let mean_naive_ratio = if trained.is_empty() {
            0.0
        } else {
            trained.iter().map(|r| r.naive_ratio).sum::<f64>() / trained.len() as f64
        };
        Ok(ExperimentRecord {
            summary: Summary {
                best_ema_acc: rows.iter().map(|r| r.ema_acc).fold(f64::NEG_INFINITY, f64::max),
                last_ema_acc: last.ema_acc,
                mean_naive_ratio,
                wall_ms,
            },
            config,
            rows,
        })
    }
}

fn check_rows(rows: &[MetricsRow]) -> Result<()> {
    if let Some(w) = rows.windows(2).find(|w| w[1].step <= w[0].step) {
        return Err(Error::invalid(
            "metrics",
            format!("step {} follows step {}; steps must increase", w[1].step, w[0].step),
        ));
    }
    Ok(())
}

/// Formats like C's `%g`: six significant digits, trailing zeros removed,
/// scientific notation outside [1e-4, 1e6).
pub fn fmt_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.5e}");
    let (mant, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if !(-4..6).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim(mant), exp.abs())
    } else {
        let decimals = (5 - exp).max(0) as usize;
        trim(&format!("{x:.decimals$}"))
    }
}

/// The metrics table as CSV text.
pub fn metrics_csv(rows: &[MetricsRow]) -> Result<String> {
    check_rows(rows)?;
    let mut s = String::with_capacity(64 * (rows.len() + 1));
    s.push_str(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let fields = [
            r.lr,
            r.loss_s,
            r.loss_u1,
            r.loss_u2,
            r.util_b1,
            r.util_b2,
            r.cbi_mask_rate,
            r.naive_ratio,
            r.acc,
            r.ema_acc,
            r.wall_ms,
        ];
        let _ = write!(s, "{}", r.step);
        for f in fields {
            let _ = write!(s, ",{}", fmt_sig6(f));
        }
        s.push('\n');
    }
    Ok(s)
}

/// Writes the metrics CSV of `record` to `path`.
pub fn emit_metrics(record: &ExperimentRecord, path: &Path) -> Result<()> {
    let text = metrics_csv(&record.rows)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains one experiment end to end. Returns the record and the checkpoint
/// tensors of the final state.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(ExperimentRecord, Vec<(String, Tensor)>)> {
    let data = cfg.load_split()?;
    let started = Instant::now();
    let (rows, tr) = trainer::train(cfg.train.clone(), &cfg.model, &data)?;
    let wall = if cfg.train.timing {
        started.elapsed().as_secs_f64() * 1e3
    } else {
        0.0
    };
    let record = ExperimentRecord::new(cfg.clone(), rows, wall)?;
    Ok((record, tr.checkpoint_tensors()))
}

/// One matrix cell of a comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub label: String,
    pub config: ExperimentConfig,
}

/// Cells for each paradigm × threshold kind pair on top of `base`.
pub fn paradigm_threshold_matrix(
    base: &ExperimentConfig,
    paradigms: &[Paradigm],
    kinds: &[ThresholdKind],
) -> Vec<Cell> {
    let mut out = Vec::new();
    for &p in paradigms {
        for &k in kinds {
            let mut config = base.clone();
            config.train.paradigm = p;
            config.train.threshold = k;
            out.push(Cell {
                label: format!("{p}/{}", k.name()),
                config,
            });
        }
    }
    out
}

/// Cells for each branch-1 rule × branch-2 threshold kind pair.
pub fn branch_threshold_matrix(
    base: &ExperimentConfig,
    branch1: &[Branch1Threshold],
    kinds: &[ThresholdKind],
) -> Vec<Cell> {
    let mut out = Vec::new();
    for &b in branch1 {
        for &k in kinds {
            let mut config = base.clone();
            config.train.branch1_threshold = b;
            config.train.threshold = k;
            out.push(Cell {
                label: format!("b1={b}/b2={}", k.name()),
                config,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub label: String,
    /// Final EMA accuracy per seed, in seed order.
    pub final_ema: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; 0 with a single seed.
    pub sd: f64,
    pub mean_naive_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareReport {
    pub seeds: Vec<u64>,
    /// In matrix order.
    pub cells: Vec<CellSummary>,
}

impl CompareReport {
    /// Cells by descending mean, ties in matrix order.
    pub fn ranked(&self) -> Vec<&CellSummary> {
        let mut v: Vec<&CellSummary> = self.cells.iter().collect();
        v.sort_by(|a, b| b.mean.total_cmp(&a.mean));
        v
    }

    pub fn cell(&self, label: &str) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.label == label)
    }

    /// Ranked plain-text table.
    pub fn table(&self) -> String {
        let width = self.cells.iter().map(|c| c.label.len()).max().unwrap_or(4).max(4);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>4}  {:<width$}  {:>17}  {:>11}  seeds",
            "rank", "cell", "ema_acc mean ± sd", "naive_ratio"
        );
        for (i, c) in self.ranked().into_iter().enumerate() {
            let _ = writeln!(
                s,
                "{:>4}  {:<width$}  {:>8.4} ± {:<6.4}  {:>11.4}  {}",
                i + 1,
                c.label,
                c.mean,
                c.sd,
                c.mean_naive_ratio,
                self.seeds.len()
            );
        }
        s
    }

    /// CSV: `rank,cell,mean,sd,naive_ratio,seeds`.
    pub fn csv(&self) -> String {
        let mut s = String::from("rank,cell,mean,sd,naive_ratio,seeds\n");
        for (i, c) in self.ranked().into_iter().enumerate() {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                i + 1,
                c.label,
                fmt_sig6(c.mean),
                fmt_sig6(c.sd),
                fmt_sig6(c.mean_naive_ratio),
                self.seeds.len()
            );
        }
        s
    }
}

/// Worker count from `IFMATCH_THREADS`, else the available parallelism.
pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn file_label(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '_' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Runs every cell under every seed on up to `threads` workers. With
/// `out_dir`, each run writes `<cell>_seed<k>.csv` there.
pub fn compare(cells: &[Cell], seeds: &[u64], threads: usize, out_dir: Option<&Path>) -> Result<CompareReport> {
    if cells.is_empty() || seeds.is_empty() {
        return Err(Error::invalid("compare", "need at least one cell and one seed"));
    }
    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..seeds.len()).map(move |s| (c, s)))
        .collect();
    let results: Mutex<Vec<Option<Result<ExperimentRecord>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = Mutex::new(0usize);
    let work = || loop {
        let j = {
            let mut n = next.lock().expect("job counter");
            let j = *n;
            *n += 1;
            j
        };
        let Some(&(c, s)) = jobs.get(j) else { break };
        let cfg = cells[c].config.with_seed(seeds[s]);
        let out = run_experiment(&cfg).and_then(|(rec, _)| {
            if let Some(dir) = out_dir {
                let name = format!("{}_seed{}.csv", file_label(&cells[c].label), seeds[s]);
                emit_metrics(&rec, &dir.join(name))?;
            }
            Ok(rec)
        });
        results.lock().expect("results")[j] = Some(out);
    };
    let threads = threads.clamp(1, jobs.len());
    if threads == 1 {
        work();
    } else {
        std::thread::scope(|sc| {
            for _ in 0..threads {
                sc.spawn(work);
            }
        });
    }
    let results = results.into_inner().expect("results");
    let mut records = Vec::with_capacity(jobs.len());
    for r in results {
        records.push(r.expect("every job ran")?);
    }
    let cells = cells
        .iter()
        .enumerate()
        .map(|(c, cell)| {
            let recs = &records[c * seeds.len()..(c + 1) * seeds.len()];
            let final_ema: Vec<f64> = recs.iter().map(|r| r.summary.last_ema_acc).collect();
            let (mean, sd) = mean_sd(&final_ema);
            CellSummary {
                label: cell.label.clone(),
                mean_naive_ratio: recs.iter().map(|r| r.summary.mean_naive_ratio).sum::<f64>() / recs.len() as f64,
                final_ema,
                mean,
                sd,
            }
        })
        .collect();
    Ok(CompareReport {
        seeds: seeds.to_vec(),
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::parse_str(text, Path::new("."))
    }

    #[test]
    fn empty_config_is_default() {
        let c = parse("# nothing here\n\n").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.train.tau, 0.95);
        assert_eq!(c.train.lambda_u, 1.0);
        assert_eq!(c.train.ema_decay, 0.999);
        assert_eq!(c.train.momentum, 0.9);
    }

    #[test]
    fn negative_lambda_is_a_range_error() {
        let e = parse("seed = 3\ntrainer.lambda_u = -1\n").unwrap_err();
        match e {
            Error::Config { line, msg } => {
                assert_eq!(line, 2);
                assert!(msg.contains("trainer.lambda_u"), "{msg}");
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn misspelled_key_gets_a_suggestion() {
        let e = parse("trainer.lamda_u = 1").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("did you mean 'trainer.lambda_u'"), "{msg}");
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn far_unknown_key_has_no_suggestion() {
        let msg = parse("zzz.qqq = 1").unwrap_err().to_string();
        assert!(msg.contains("unknown key") && !msg.contains("did you mean"), "{msg}");
    }

    #[test]
    fn duplicate_and_malformed_lines() {
        assert!(parse("trainer.tau = 0.9\ntrainer.tau = 0.8")
            .unwrap_err()
            .to_string()
            .contains("line 2"));
        assert!(parse("trainer.tau 0.9").is_err());
        assert!(parse("trainer.tau = 1.5").is_err());
        assert!(parse("trainer.tau = 0").is_err());
        assert!(parse("trainer.cbi = maybe").is_err());
        assert!(parse("data.n1 = 10").is_err());
        assert!(parse("trainer.clamp_min = 0.5").is_err());
        assert!(parse("data.num_labels = 41").is_err());
    }

    #[test]
    fn text_roundtrip() {
        let text = "seed = 7\n\
                    data.split = longtail # tail\n\
                    data.n1 = 20\ndata.m1 = 40\ndata.gamma = 10\n\
                    model.widths = 4, 8\n\
                    trainer.threshold = flex\ntrainer.clamp_min = 0.5\ntrainer.clamp_max = 0.9\n\
                    trainer.strategies = translate,shear\n\
                    augment.ops = brightness, solarize\naugment.n_ops = 1\n";
        let c = parse(text).unwrap();
        assert_eq!(c.model.stage_widths, vec![4, 8]);
        assert_eq!(c.train.seed, 7);
        assert_eq!(c.train.clamp, Some((0.5, 0.9)));
        let back = parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn sig6_matches_printf_g() {
        let cases = [
            (0.0, "0"),
            (1.0, "1"),
            (0.95, "0.95"),
            (1.0 / 3.0, "0.333333"),
            (123456.7, "123457"),
            (1234567.0, "1.23457e+06"),
            (0.0001234567, "0.000123457"),
            (0.00001234567, "1.23457e-05"),
            (-2.5, "-2.5"),
            (999999.5, "1e+06"),
            (0.030000000000000002, "0.03"),
        ];
        for (x, want) in cases {
            assert_eq!(fmt_sig6(x), want, "{x}");
        }
    }

    fn row(step: usize) -> MetricsRow {
        MetricsRow {
            step,
            lr: 0.03,
            loss_s: 1.0,
            loss_u1: 0.0,
            loss_u2: 0.0,
            util_b1: 0.0,
            util_b2: 0.0,
            cbi_mask_rate: 0.0,
            naive_ratio: 0.5,
            acc: 0.25,
            ema_acc: 0.25,
            wall_ms: 0.0,
        }
    }

    #[test]
    fn metrics_header_and_monotonic_steps() {
        let csv = metrics_csv(&[row(0), row(50)]).unwrap();
        assert_eq!(csv.lines().next(), Some(METRICS_HEADER));
        assert_eq!(csv.lines().nth(2), Some("50,0.03,1,0,0,0,0,0,0.5,0.25,0.25,0"));
        assert!(metrics_csv(&[row(0), row(0)]).is_err());
        assert!(ExperimentRecord::new(ExperimentConfig::default(), vec![row(5), row(3)], 0.0).is_err());
    }

    #[test]
    fn mean_sd_is_sample_sd() {
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
        assert_eq!(mean_sd(&[0.4]), (0.4, 0.0));
    }
}
