//! Flat `section.key` configuration registry shared by config files,
//! `--set` overrides and checkpoint headers.
//!
//! Files are INI-style: `[section]` headers followed by `key = value`
//! lines; `#` and `;` start comments.

use std::fmt::Write as _;

use crate::ad::AdamConfig;
use crate::classifier::ModelConfig;
use crate::data::SyntheticConfig;
use crate::harness::TrainConfig;

pub struct KeyInfo {
    pub key: &'static str,
    pub help: &'static str,
}

macro_rules! keys {
    ($($k:literal => $h:literal,)*) => {
        pub const KEYS: &[KeyInfo] = &[$(KeyInfo { key: $k, help: $h },)*];
    };
}

keys! {
    "run.seed" => "seed for data generation, initialization, sampling and shuffling",
    "run.threads" => "1 = strict single-threaded; more enables background batch assembly and parallel evaluation",
    "data.classes" => "number of synthetic classes (classes 0 and 1 form the time-reversed pair)",
    "data.parcels" => "total synthetic parcels",
    "data.dates" => "acquisitions per parcel",
    "data.channels" => "spectral channels",
    "data.min_pixels" => "smallest parcel",
    "data.max_pixels" => "largest parcel (sizes are log-uniform)",
    "data.noise" => "per-pixel Gaussian noise std",
    "data.offset_noise" => "per-parcel channel offset std",
    "data.spacing" => "nominal days between acquisitions",
    "data.jitter" => "uniform +/- days of acquisition jitter",
    "data.day_groups" => "number of distinct acquisition calendars",
    "data.imbalance" => "ratio between consecutive class sizes (1 = balanced)",
    "data.folds" => "cross-validation blocks written to the manifest",
    "pse.sample_size" => "pixels sampled per parcel (S)",
    "pse.mlp1" => "per-pixel MLP widths, input channels first",
    "pse.pooling" => "mean_std or mean",
    "pse.mlp2" => "widths of the MLP after pooling",
    "pse.geometric" => "append the four geometric features",
    "tae.d_model" => "embedding width d_e",
    "tae.d_k" => "key/query width per head",
    "tae.heads" => "attention heads",
    "tae.tau" => "positional encoding period scale",
    "tae.master_query" => "mean, max or last",
    "tae.positional_encoding" => "add day-offset encodings",
    "tae.mlp3" => "widths of the MLP over concatenated heads",
    "model.encoder" => "pse or ms (per-channel mean/std of all pixels)",
    "model.classes" => "number of classes, or auto to take it from the dataset",
    "model.decoder" => "hidden widths of the decoder",
    "model.ms_hidden" => "hidden widths of the ms encoder",
    "model.focal_gamma" => "focal loss exponent",
    "train.epochs" => "training epochs",
    "train.batch_size" => "parcels per batch",
    "train.fold" => "cross-validation fold used by train",
    "train.lr" => "Adam learning rate",
    "train.beta1" => "Adam first-moment decay",
    "train.beta2" => "Adam second-moment decay",
    "train.eps" => "Adam epsilon",
    "train.augment" => "Gaussian pixel-noise augmentation during training",
}

/// Everything a command can be configured with.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub data: SyntheticConfig,
    pub model: ModelConfig,
    /// `model.classes = auto`.
    pub auto_classes: bool,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 1,
            data: SyntheticConfig::default(),
            model: ModelConfig::default(),
            auto_classes: true,
            train: TrainConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>()
        .map_err(|e| format!("{key}: cannot parse '{v}': {e}"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got '{v}'")),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>, String> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|x| parse::<usize>(key, x.trim()))
        .collect()
}

fn list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Applies one `key = value` to a model configuration; `Ok(false)` if the
/// key is not a model key.
pub fn set_model_key(m: &mut ModelConfig, key: &str, v: &str) -> Result<bool, String> {
    match key {
        "pse.sample_size" => m.pse.sample_size = parse(key, v)?,
        "pse.mlp1" => m.pse.mlp1 = parse_list(key, v)?,
        "pse.pooling" => m.pse.pooling = parse(key, v)?,
        "pse.mlp2" => m.pse.mlp2 = parse_list(key, v)?,
        "pse.geometric" => m.pse.include_geometric = parse_bool(key, v)?,
        "tae.d_model" => m.tae.d_model = parse(key, v)?,
        "tae.d_k" => m.tae.d_k = parse(key, v)?,
        "tae.heads" => m.tae.heads = parse(key, v)?,
        "tae.tau" => m.tae.tau = parse(key, v)?,
        "tae.master_query" => m.tae.master_query = parse(key, v)?,
        "tae.positional_encoding" => m.tae.positional_encoding = parse_bool(key, v)?,
        "tae.mlp3" => m.tae.mlp3 = parse_list(key, v)?,
        "model.encoder" => m.encoder = parse(key, v)?,
        "model.classes" => m.classes = parse(key, v)?,
        "model.decoder" => m.decoder = parse_list(key, v)?,
        "model.ms_hidden" => m.ms_hidden = parse_list(key, v)?,
        "model.focal_gamma" => m.focal_gamma = parse(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Model keys in registry order, `model.classes` as a number.
pub fn model_entries(m: &ModelConfig) -> Vec<(&'static str, String)> {
    vec![
        ("pse.sample_size", m.pse.sample_size.to_string()),
        ("pse.mlp1", list(&m.pse.mlp1)),
        ("pse.pooling", m.pse.pooling.to_string()),
        ("pse.mlp2", list(&m.pse.mlp2)),
        ("pse.geometric", m.pse.include_geometric.to_string()),
        ("tae.d_model", m.tae.d_model.to_string()),
        ("tae.d_k", m.tae.d_k.to_string()),
        ("tae.heads", m.tae.heads.to_string()),
        ("tae.tau", m.tae.tau.to_string()),
        ("tae.master_query", m.tae.master_query.to_string()),
        (
            "tae.positional_encoding",
            m.tae.positional_encoding.to_string(),
        ),
        ("tae.mlp3", list(&m.tae.mlp3)),
        ("model.encoder", m.encoder.to_string()),
        ("model.classes", m.classes.to_string()),
        ("model.decoder", list(&m.decoder)),
        ("model.ms_hidden", list(&m.ms_hidden)),
        ("model.focal_gamma", m.focal_gamma.to_string()),
    ]
}

/// `key=value` lines of a model configuration.
pub fn model_to_text(m: &ModelConfig) -> String {
    model_entries(m)
        .iter()
        .fold(String::new(), |mut s, (k, v)| {
            writeln!(s, "{k}={v}").unwrap();
            s
        })
}

/// Parses flat `key=value` lines into a model configuration. Keys outside
/// the model sections are returned untouched.
pub fn model_from_text(text: &str) -> Result<(ModelConfig, Vec<(String, String)>), String> {
    let mut m = ModelConfig::default();
    let mut rest = Vec::new();
    for (k, v) in parse_flat(text)? {
        if !set_model_key(&mut m, &k, &v)? {
            rest.push((k, v));
        }
    }
    Ok((m, rest))
}

/// Flat `key=value` lines, blank lines and comments skipped.
pub fn parse_flat(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key=value, got '{line}'", i + 1))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// INI text to dotted `(section.key, value)` pairs in file order.
pub fn parse_ini(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut section = String::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key = value, got '{line}'", i + 1))?;
        let k = k.trim();
        let key = if section.is_empty() || k.contains('.') {
            k.to_string()
        } else {
            format!("{section}.{k}")
        };
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

/// Parses `a=b;c=d` override lists.
pub fn parse_overrides(text: &str) -> Result<Vec<(String, String)>, String> {
    text.split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| format!("override '{s}' is not key=value"))
        })
        .collect()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        if key == "model.classes" {
            if v == "auto" {
                self.auto_classes = true;
                return Ok(());
            }
            self.auto_classes = false;
        }
        if set_model_key(&mut self.model, key, v)? {
            return Ok(());
        }
        let d = &mut self.data;
        let t = &mut self.train;
        match key {
            "run.seed" => self.seed = parse(key, v)?,
            "run.threads" => self.threads = parse(key, v)?,
            "data.classes" => d.classes = parse(key, v)?,
            "data.parcels" => d.parcels = parse(key, v)?,
            "data.dates" => d.dates = parse(key, v)?,
            "data.channels" => d.channels = parse(key, v)?,
            "data.min_pixels" => d.min_pixels = parse(key, v)?,
            "data.max_pixels" => d.max_pixels = parse(key, v)?,
            "data.noise" => d.noise = parse(key, v)?,
            "data.offset_noise" => d.offset_noise = parse(key, v)?,
            "data.spacing" => d.spacing = parse(key, v)?,
            "data.jitter" => d.jitter = parse(key, v)?,
            "data.day_groups" => d.day_groups = parse(key, v)?,
            "data.imbalance" => d.imbalance = parse(key, v)?,
            "data.folds" => d.folds = parse(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.fold" => t.fold = parse(key, v)?,
            "train.lr" => t.adam.lr = parse(key, v)?,
            "train.beta1" => t.adam.beta1 = parse(key, v)?,
            "train.beta2" => t.adam.beta2 = parse(key, v)?,
            "train.eps" => t.adam.eps = parse(key, v)?,
            "train.augment" => t.augment = parse_bool(key, v)?,
            _ => return Err(format!("unknown configuration key '{key}'")),
        }
        Ok(())
    }

    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<(), String> {
        pairs.iter().try_for_each(|(k, v)| self.set(k, v))
    }

    pub fn get(&self, key: &str) -> Option<String> {
        if key == "model.classes" && self.auto_classes {
            return Some("auto".into());
        }
        if let Some((_, v)) = model_entries(&self.model)
            .into_iter()
            .find(|(k, _)| *k == key)
        {
            return Some(v);
        }
        let (d, t) = (&self.data, &self.train);
        Some(match key {
            "run.seed" => self.seed.to_string(),
            "run.threads" => self.threads.to_string(),
            "data.classes" => d.classes.to_string(),
            "data.parcels" => d.parcels.to_string(),
            "data.dates" => d.dates.to_string(),
            "data.channels" => d.channels.to_string(),
            "data.min_pixels" => d.min_pixels.to_string(),
            "data.max_pixels" => d.max_pixels.to_string(),
            "data.noise" => d.noise.to_string(),
            "data.offset_noise" => d.offset_noise.to_string(),
            "data.spacing" => d.spacing.to_string(),
            "data.jitter" => d.jitter.to_string(),
            "data.day_groups" => d.day_groups.to_string(),
            "data.imbalance" => d.imbalance.to_string(),
            "data.folds" => d.folds.to_string(),
            "train.epochs" => t.epochs.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.fold" => t.fold.to_string(),
            "train.lr" => t.adam.lr.to_string(),
            "train.beta1" => t.adam.beta1.to_string(),
            "train.beta2" => t.adam.beta2.to_string(),
            "train.eps" => t.adam.eps.to_string(),
            "train.augment" => t.augment.to_string(),
            _ => return None,
        })
    }

    /// Sectioned snapshot listing every key.
    pub fn to_ini(&self) -> String {
        let mut s = String::new();
        let mut section = "";
        for info in KEYS {
            let (sec, name) = info.key.split_once('.').expect("dotted key");
            if sec != section {
                if !section.is_empty() {
                    s.push('\n');
                }
                writeln!(s, "[{sec}]").unwrap();
                section = sec;
            }
            writeln!(
                s,
                "{name} = {}",
                self.get(info.key).expect("registered key")
            )
            .unwrap();
        }
        s
    }

    /// Copies the run-wide seed into the sub-configurations that use it.
    pub fn resolved(&self) -> RunConfig {
        let mut c = self.clone();
        c.data.seed = c.seed;
        c.train.seed = c.seed;
        c.train.threads = c.threads.max(1);
        c
    }

    pub fn adam(&self) -> AdamConfig {
        self.train.adam
    }
}
