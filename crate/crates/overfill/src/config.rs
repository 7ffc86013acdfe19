//! The run configuration file.

use std::fs;
use std::path::Path;

use overfill_core::corpus::TaskKind;
use overfill_core::engine::{GenParams, Mode};
use overfill_core::model::ModelConfig;
use overfill_core::perfmodel::HardwareSpec;
use overfill_core::pruner::PruneConfig;
use overfill_core::trainer::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kinds: Vec<TaskKind>,
    pub train_count: usize,
    /// Held-out examples per task kind.
    pub eval_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// Fitting the full model before pruning.
    pub base: TrainConfig,
    /// Fitting the pruned decoder, both behind the frozen prefill and standalone.
    pub decoder: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub modes: Vec<Mode>,
    pub prompt_lens: Vec<usize>,
    pub gen_lens: Vec<usize>,
    pub batches: Vec<usize>,
    pub repeats: usize,
    pub warmups: usize,
    pub hardware: HardwareSpec,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            modes: Mode::ALL.to_vec(),
            prompt_lens: vec![32],
            gen_lens: vec![64, 128, 256, 512, 1024],
            batches: vec![1],
            repeats: 10,
            warmups: 2,
            hardware: HardwareSpec::desk_cpu(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub prune: PruneConfig,
    pub train: TrainSection,
    pub gen: GenParams,
    pub bench: BenchConfig,
}

impl RunConfig {
    /// The laptop-scale setup: a 4-layer, 64-wide model on the lookup and
    /// modular-addition tasks.
    pub fn desk() -> Self {
        Self {
            name: "desk".into(),
            seed: 0,
            model: ModelConfig::desk(),
            data: DataConfig {
                kinds: vec![TaskKind::Kvlookup, TaskKind::Modadd],
                train_count: 20_000,
                eval_count: 200,
            },
            prune: PruneConfig::default(),
            train: TrainSection {
                base: TrainConfig::default(),
                decoder: TrainConfig::default(),
            },
            gen: GenParams::default(),
            bench: BenchConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.prune.validate()?;
        let bad = |m: &str| Err(Error::Model(overfill_core::Error::InvalidConfig(m.into())));
        if self.data.kinds.is_empty() || self.data.train_count == 0 || self.data.eval_count == 0 {
            return bad("data section needs task kinds and positive counts");
        }
        for t in [&self.train.base, &self.train.decoder] {
            if t.batch_size == 0 || t.max_seq_len < 2 || !(t.lr > 0.0) || !(0.0..=1.0).contains(&t.warmup_ratio) {
                return bad("train: batch_size, max_seq_len, lr and warmup_ratio must be sensible");
            }
        }
        if self.gen.temperature.is_nan() || self.gen.temperature < 0.0 {
            return bad("gen.temperature must be nonnegative");
        }
        if self.bench.repeats == 0 {
            return bad("bench.repeats must be positive");
        }
        self.bench.hardware.validate()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Parses JSON, reporting the JSON pointer of the first offending value.
pub fn parse_json<T: DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let pointer = e
            .path()
            .iter()
            .map(|seg| match seg {
                serde_path_to_error::Segment::Seq { index } => format!("/{index}"),
                serde_path_to_error::Segment::Map { key } | serde_path_to_error::Segment::Enum { variant: key } => {
                    format!("/{}", key.replace('~', "~0").replace('/', "~1"))
                }
                serde_path_to_error::Segment::Unknown => "/?".into(),
            })
            .collect::<String>();
        Error::Json {
            path: path.to_path_buf(),
            pointer: if pointer.is_empty() { "/".into() } else { pointer },
            message: e.inner().to_string(),
        }
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_json(&text, path)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
