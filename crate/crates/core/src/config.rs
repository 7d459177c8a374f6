//! Experiment configuration files: `key = value` lines grouped under
//! `[section]` headers, `#` comments. Every key is optional; unknown keys and
//! malformed values are rejected with their line number. Relative paths are
//! resolved against the directory holding the file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::datasets::{load_idx, read_container, Dataset};
use crate::error::{Error, Result};
use crate::losses::DistanceMode;
use crate::network::{build_mlp, lenetpp_specs, EmbeddingModel, WeightInit, LENETPP_INIT};
use crate::numerics::Rng;
use crate::scalar::Scalar;
use crate::trainer::{AuxiliaryKind, ChiefKind, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub enum Architecture {
    /// The LeNet++ convolutional network; needs 28×28×1 samples.
    LeNetpp,
    /// Fully-connected layers of the listed widths with PReLU in between.
    Mlp { hidden: Vec<usize> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub arch: Architecture,
    pub embedding_dim: usize,
    pub init: WeightInit,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: Architecture::LeNetpp,
            embedding_dim: 2,
            init: LENETPP_INIT,
            precision: Precision::F64,
        }
    }
}

/// Stream of the run seed used for model initialization.
const STREAM_MODEL: u64 = 0;

impl ModelConfig {
    /// Builds the network for samples of `sample_shape`, seeded from `seed`.
    pub fn build<T: Scalar>(&self, sample_shape: &[usize], seed: u64) -> Result<EmbeddingModel<T>> {
        let mut rng = Rng::new(seed).derive(STREAM_MODEL);
        match &self.arch {
            Architecture::LeNetpp => {
                EmbeddingModel::new(sample_shape, &lenetpp_specs(self.embedding_dim), self.init, &mut rng)
            }
            Architecture::Mlp { hidden } => build_mlp(&mut rng, sample_shape, hidden, self.embedding_dim, self.init),
        }
    }
}

/// Where a dataset comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// A dataset container file.
    Container(PathBuf),
    /// A pair of IDX image and label files.
    Idx { images: PathBuf, labels: PathBuf },
}

impl DataSource {
    pub fn load<T: Scalar>(&self) -> Result<Dataset<T>> {
        match self {
            DataSource::Container(p) => read_container(p),
            DataSource::Idx { images, labels } => load_idx(images, labels),
        }
    }

    pub fn check_exists(&self) -> Result<()> {
        let paths: Vec<&Path> = match self {
            DataSource::Container(p) => vec![p],
            DataSource::Idx { images, labels } => vec![images, labels],
        };
        for p in paths {
            if !p.is_file() {
                return Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub train_data: Option<DataSource>,
    pub test_data: Option<DataSource>,
    pub output_dir: Option<PathBuf>,
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

struct Entries<'a> {
    path: &'a Path,
    base: &'a Path,
    map: BTreeMap<String, (String, usize)>,
}

impl Entries<'_> {
    fn take<V>(&mut self, key: &str, parse: impl FnOnce(&str) -> std::result::Result<V, String>) -> Result<Option<V>> {
        match self.map.remove(key) {
            None => Ok(None),
            Some((raw, line)) => parse(&raw)
                .map(Some)
                .map_err(|m| parse_err(self.path, line, format!("{key}: {m}"))),
        }
    }

    fn set<V>(&mut self, key: &str, slot: &mut V, parse: impl FnOnce(&str) -> std::result::Result<V, String>) -> Result<()> {
        if let Some(v) = self.take(key, parse)? {
            *slot = v;
        }
        Ok(())
    }

    fn path(&mut self, key: &str) -> Result<Option<PathBuf>> {
        let base = self.base.to_path_buf();
        self.take(key, |s| {
            if s.is_empty() {
                return Err("empty path".into());
            }
            Ok(base.join(s))
        })
    }

    fn source(&mut self, prefix: &str) -> Result<Option<DataSource>> {
        let container = self.path(&format!("data.{prefix}"))?;
        let images = self.path(&format!("data.{prefix}_images"))?;
        let labels = self.path(&format!("data.{prefix}_labels"))?;
        match (container, images, labels) {
            (None, None, None) => Ok(None),
            (Some(c), None, None) => Ok(Some(DataSource::Container(c))),
            (None, Some(images), Some(labels)) => Ok(Some(DataSource::Idx { images, labels })),
            _ => Err(parse_err(
                self.path,
                0,
                format!("data.{prefix} needs either a container path or both {prefix}_images and {prefix}_labels"),
            )),
        }
    }
}

fn num<V: std::str::FromStr>(s: &str) -> std::result::Result<V, String>
where
    V::Err: std::fmt::Display,
{
    s.parse::<V>().map_err(|e| format!("{s:?}: {e}"))
}

fn boolean(s: &str) -> std::result::Result<bool, String> {
    match s {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("{s:?} is not a boolean")),
    }
}

fn list(s: &str) -> std::result::Result<Vec<u64>, String> {
    s.split(',').map(str::trim).filter(|p| !p.is_empty()).map(num).collect()
}

fn init_name(init: WeightInit) -> String {
    match init {
        WeightInit::Gaussian { std } => format!("gaussian:{std}"),
        WeightInit::Xavier => "xavier".into(),
    }
}

fn parse_init(s: &str) -> std::result::Result<WeightInit, String> {
    if s == "xavier" {
        return Ok(WeightInit::Xavier);
    }
    match s.strip_prefix("gaussian:").map(num::<f64>) {
        Some(Ok(std)) if std > 0.0 && std.is_finite() => Ok(WeightInit::Gaussian { std }),
        _ => Err(format!("{s:?} is not xavier or gaussian:<std>")),
    }
}

/// Parses configuration text; `path` is used in errors and to anchor relative paths.
pub fn parse_config(text: &str, path: &Path) -> Result<ExperimentConfig> {
    let mut map = BTreeMap::new();
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| parse_err(path, line, "unterminated section header"))?
                .trim();
            if !SECTIONS.contains(&name) {
                return Err(parse_err(path, line, format!("unknown section [{name}]")));
            }
            section = name.to_string();
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| parse_err(path, line, "expected `key = value`"))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(parse_err(path, line, "empty key"));
        }
        if section.is_empty() {
            return Err(parse_err(path, line, format!("key {key:?} outside any [section]")));
        }
        let full = format!("{section}.{key}");
        if map.insert(full.clone(), (value.trim().to_string(), line)).is_some() {
            return Err(parse_err(path, line, format!("duplicate key {full}")));
        }
    }

    let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
    let mut e = Entries { path, base: &base, map };
    let mut cfg = ExperimentConfig::default();
    let t = &mut cfg.train;

    e.set("train.batch_size", &mut t.batch_size, num)?;
    e.set("train.base_lr", &mut t.base_lr, num)?;
    e.set("train.momentum", &mut t.momentum, num)?;
    e.set("train.weight_decay", &mut t.weight_decay, num)?;
    e.set("train.lr_drop_iters", &mut t.lr_drop_iters, list)?;
    e.set("train.lr_drop_factor", &mut t.lr_drop_factor, num)?;
    e.set("train.total_iters", &mut t.total_iters, num)?;
    e.set("train.seed", &mut t.seed, num)?;
    e.set("train.checkpoint_every", &mut t.checkpoint_every, num)?;
    e.set("train.sequence_fraction", &mut t.sequence_fraction, |s| match s {
        "none" => Ok(None),
        _ => num(s).map(Some),
    })?;

    e.set("loss.chief", &mut t.chief, |s| match s {
        "softmax" => Ok(ChiefKind::Softmax),
        "angular_margin" => Ok(ChiefKind::AngularMargin),
        _ => Err(format!("{s:?} is not softmax or angular_margin")),
    })?;
    e.set("loss.auxiliary", &mut t.auxiliary, |s| match s {
        "none" => Ok(AuxiliaryKind::None),
        "center" => Ok(AuxiliaryKind::Center),
        "dsa" => Ok(AuxiliaryKind::Dsa),
        _ => Err(format!("{s:?} is not none, center or dsa")),
    })?;
    e.set("loss.lsr", &mut t.joint.lsr_enabled, boolean)?;
    e.set("loss.eta", &mut t.joint.eta, num)?;
    e.set("loss.center_lr", &mut t.center_lr, num)?;
    e.set("loss.head_init", &mut t.head_init, parse_init)?;

    e.set("dsa.lambda", &mut t.dsa.lambda, num)?;
    e.set("dsa.alpha", &mut t.dsa.alpha, num)?;
    e.set("dsa.beta", &mut t.dsa.beta, num)?;
    e.set("dsa.p", &mut t.dsa.p, num)?;
    e.set("dsa.mode", &mut t.dsa.mode, |s| DistanceMode::parse(s).map_err(|e| e.to_string()))?;

    e.set("margin.delta", &mut t.margin.delta, num)?;
    e.set("margin.m", &mut t.margin.m, num)?;
    e.set("margin.anneal_base", &mut t.anneal.base, num)?;
    e.set("margin.anneal_gamma", &mut t.anneal.gamma, num)?;
    e.set("margin.anneal_min", &mut t.anneal.min, num)?;

    let m = &mut cfg.model;
    e.set("model.arch", &mut m.arch, |s| match s {
        "lenetpp" => Ok(Architecture::LeNetpp),
        "mlp" => Ok(Architecture::Mlp { hidden: vec![64] }),
        _ => Err(format!("{s:?} is not lenetpp or mlp")),
    })?;
    if let Some(h) = e.take("model.hidden", |s| {
        s.split(',').map(str::trim).filter(|p| !p.is_empty()).map(num::<usize>).collect::<std::result::Result<Vec<_>, _>>()
    })? {
        match &mut m.arch {
            Architecture::Mlp { hidden } => *hidden = h,
            Architecture::LeNetpp => return Err(parse_err(path, 0, "model.hidden applies only to arch = mlp")),
        }
    }
    e.set("model.embedding_dim", &mut m.embedding_dim, num)?;
    e.set("model.init", &mut m.init, parse_init)?;
    e.set("model.precision", &mut m.precision, |s| match s {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        _ => Err(format!("{s:?} is not f32 or f64")),
    })?;

    cfg.train_data = e.source("train")?;
    cfg.test_data = e.source("test")?;
    cfg.output_dir = e.path("output.dir")?;

    if let Some((key, (_, line))) = e.map.into_iter().next() {
        return Err(parse_err(path, line, format!("unknown key {key}")));
    }
    cfg.train
        .validate()
        .map_err(|err| parse_err(path, 0, err.to_string()))?;
    if cfg.model.embedding_dim == 0 {
        return Err(parse_err(path, 0, "model.embedding_dim must be positive"));
    }
    Ok(cfg)
}

const SECTIONS: [&str; 7] = ["train", "loss", "dsa", "margin", "model", "data", "output"];

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, path)
}

fn float(v: f64) -> String {
    format!("{v:?}")
}

impl ExperimentConfig {
    /// Every setting, defaults included, in the file format. Paths are written
    /// as resolved, so the echo is only path-stable when read from its own location
    /// if they are absolute.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut s = String::new();
        let drops: Vec<String> = t.lr_drop_iters.iter().map(u64::to_string).collect();
        let _ = writeln!(s, "[train]");
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "base_lr = {}", float(t.base_lr));
        let _ = writeln!(s, "momentum = {}", float(t.momentum));
        let _ = writeln!(s, "weight_decay = {}", float(t.weight_decay));
        let _ = writeln!(s, "lr_drop_iters = {}", drops.join(", "));
        let _ = writeln!(s, "lr_drop_factor = {}", float(t.lr_drop_factor));
        let _ = writeln!(s, "total_iters = {}", t.total_iters);
        let _ = writeln!(s, "seed = {}", t.seed);
        let _ = writeln!(s, "checkpoint_every = {}", t.checkpoint_every);
        let frac = t.sequence_fraction.map_or("none".to_string(), float);
        let _ = writeln!(s, "sequence_fraction = {frac}");
        let _ = writeln!(s, "\n[loss]");
        let chief = match t.chief {
            ChiefKind::Softmax => "softmax",
            ChiefKind::AngularMargin => "angular_margin",
        };
        let aux = match t.auxiliary {
            AuxiliaryKind::None => "none",
            AuxiliaryKind::Center => "center",
            AuxiliaryKind::Dsa => "dsa",
        };
        let _ = writeln!(s, "chief = {chief}");
        let _ = writeln!(s, "auxiliary = {aux}");
        let _ = writeln!(s, "lsr = {}", t.joint.lsr_enabled);
        let _ = writeln!(s, "eta = {}", float(t.joint.eta));
        let _ = writeln!(s, "center_lr = {}", float(t.center_lr));
        let _ = writeln!(s, "head_init = {}", init_name(t.head_init));
        let _ = writeln!(s, "\n[dsa]");
        let _ = writeln!(s, "lambda = {}", float(t.dsa.lambda));
        let _ = writeln!(s, "alpha = {}", float(t.dsa.alpha));
        let _ = writeln!(s, "beta = {}", float(t.dsa.beta));
        let _ = writeln!(s, "p = {}", float(t.dsa.p));
        let _ = writeln!(s, "mode = {}", t.dsa.mode.name());
        let _ = writeln!(s, "\n[margin]");
        let _ = writeln!(s, "delta = {}", float(t.margin.delta));
        let _ = writeln!(s, "m = {}", t.margin.m);
        let _ = writeln!(s, "anneal_base = {}", float(t.anneal.base));
        let _ = writeln!(s, "anneal_gamma = {}", float(t.anneal.gamma));
        let _ = writeln!(s, "anneal_min = {}", float(t.anneal.min));
        let m = &self.model;
        let _ = writeln!(s, "\n[model]");
        match &m.arch {
            Architecture::LeNetpp => {
                let _ = writeln!(s, "arch = lenetpp");
            }
            Architecture::Mlp { hidden } => {
                let h: Vec<String> = hidden.iter().map(usize::to_string).collect();
                let _ = writeln!(s, "arch = mlp\nhidden = {}", h.join(", "));
            }
        }
        let _ = writeln!(s, "embedding_dim = {}", m.embedding_dim);
        let _ = writeln!(s, "init = {}", init_name(m.init));
        let precision = match m.precision {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        };
        let _ = writeln!(s, "precision = {precision}");
        let _ = writeln!(s, "\n[data]");
        for (name, src) in [("train", &self.train_data), ("test", &self.test_data)] {
            match src {
                None => {}
                Some(DataSource::Container(p)) => {
                    let _ = writeln!(s, "{name} = {}", p.display());
                }
                Some(DataSource::Idx { images, labels }) => {
                    let _ = writeln!(s, "{name}_images = {}", images.display());
                    let _ = writeln!(s, "{name}_labels = {}", labels.display());
                }
            }
        }
        let _ = writeln!(s, "\n[output]");
        if let Some(dir) = &self.output_dir {
            let _ = writeln!(s, "dir = {}", dir.display());
        }
        s
    }
}
