//! Run configuration: network + training settings plus paths, loaded from
//! JSON and patched by `--override key=value`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use spxc::eval::LenetTrainConfig;
use spxc::network::NetworkConfig;
use spxc::training::TrainConfig;

pub const BUILD_ID: &str = env!("SPXC_BUILD_ID");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub tag: String,
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Model checkpoint used by sample / reconstruct / eval.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Classifier checkpoint used by confidence / accuracy metrics.
    #[serde(default)]
    pub lenet_checkpoint: Option<PathBuf>,
    /// Train on only the first N training images.
    #[serde(default)]
    pub train_limit: Option<usize>,
    /// Repeat the (limited) training set this many times per epoch.
    #[serde(default)]
    pub train_repeat: Option<usize>,
    #[serde(default)]
    pub lenet: LenetTrainConfig,
}

/// Failure classes with distinct exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, config, or missing inputs: exit 2.
    Usage(String),
    /// Anything that fails after validation: exit 1.
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<spxc::Error> for CliError {
    fn from(e: spxc::Error) -> Self {
        match e {
            spxc::Error::Config(_) | spxc::Error::InvalidArgument(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn keys_of<T: Serialize>(v: &T) -> Vec<String> {
    match serde_json::to_value(v) {
        Ok(Value::Object(m)) => m.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Applies `key=value` to a raw config. Keys are dotted paths
/// (`network.channels`) or bare field names of the run, network or
/// training sections.
pub fn apply_override(cfg: &mut Value, spec: &str) -> CliResult<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override {spec:?} is not key=value")))?;
    let key = key.trim();
    let path: Vec<String> = if key.contains('.') {
        key.split('.').map(str::to_string).collect()
    } else {
        let run = ["tag", "data_dir", "out_dir", "checkpoint", "lenet_checkpoint", "train_limit", "train_repeat"];
        let net = keys_of(&NetworkConfig::small(8));
        let train = keys_of(&TrainConfig::default());
        if run.contains(&key) {
            vec![key.to_string()]
        } else if net.iter().any(|k| k == key) {
            vec!["network".into(), key.to_string()]
        } else if train.iter().any(|k| k == key) {
            vec!["train".into(), key.to_string()]
        } else {
            return Err(CliError::Usage(format!("unknown config key {key:?}")));
        }
    };
    let mut node = cfg;
    for (i, part) in path.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Usage(format!("override {key:?} does not address an object field")))?;
        if i + 1 == path.len() {
            obj.insert(part.clone(), parse_value(raw));
            return Ok(());
        }
        node = obj.entry(part.clone()).or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

/// Reads, patches and validates a run config.
pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>, out: Option<&Path>) -> CliResult<RunConfig> {
    let mut raw = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?
        }
        None => Value::Object(Map::new()),
    };
    for o in overrides {
        apply_override(&mut raw, o)?;
    }
    if let Some(s) = seed {
        apply_override(&mut raw, &format!("train.seed={s}"))?;
    }
    if let Some(o) = out {
        raw["out_dir"] = Value::String(o.display().to_string());
    }
    let cfg: RunConfig = serde_json::from_value(raw).map_err(|e| CliError::Usage(format!("config: {e}")))?;
    cfg.network.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

impl RunConfig {
    /// Configured data directory, else `SPXC_DATA_DIR`, else `data/mnist`.
    pub fn data_dir(&self) -> PathBuf {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os("SPXC_DATA_DIR").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data/mnist"))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs").join(&self.tag))
    }

    /// Metadata embedded in every artifact.
    pub fn provenance(&self) -> Value {
        serde_json::json!({ "config": self, "build": BUILD_ID })
    }

    /// Model checkpoint: explicit path, else the configured one, else
    /// `<out>/best.spxc`.
    pub fn model_checkpoint(&self, explicit: Option<&Path>) -> PathBuf {
        explicit
            .map(Path::to_path_buf)
            .or_else(|| self.checkpoint.clone())
            .unwrap_or_else(|| self.out_dir().join("best.spxc"))
    }

    pub fn lenet_path(&self, explicit: Option<&Path>) -> PathBuf {
        explicit
            .map(Path::to_path_buf)
            .or_else(|| self.lenet_checkpoint.clone())
            .unwrap_or_else(|| self.out_dir().join("lenet.spxc"))
    }
}

pub fn load_mnist(cfg: &RunConfig) -> CliResult<spxc::dataio::Mnist> {
    let files = spxc::dataio::MnistFiles::new(cfg.data_dir());
    for p in [files.train_paths().0, files.train_paths().1, files.test_paths().0, files.test_paths().1] {
        if !p.exists() {
            return Err(CliError::Usage(format!("MNIST file not found: {}", p.display())));
        }
    }
    Ok(files.load()?)
}
