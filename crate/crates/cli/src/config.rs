//! Run configuration: one TOML file, every field defaulted, flag overrides.

use std::path::{Path, PathBuf};

use corrlab_core::eval::RansacConfig;
use corrlab_core::network::NetworkConfig;
use corrlab_core::synthgen::SceneConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Scenes per split are drawn from seed ranges this wide.
pub const SPLIT_SEED_SPAN: u64 = 1 << 24;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Result<Self, CliError> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(CliError::Usage(format!("unknown precision {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Validate (and possibly checkpoint) every this many iterations.
    pub eval_interval: usize,
    /// Rescale gradients whose norm exceeds this.
    pub grad_clip: Option<f64>,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            learning_rate: 1e-3,
            eval_interval: 200,
            grad_clip: None,
            precision: Precision::F64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 2000,
            val: 20,
            test: 20,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Holds `train.bin`, `val.bin` and `test.bin`.
    pub data_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub train_log: PathBuf,
    pub report: PathBuf,
    pub ablation: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            checkpoint: "model.json".into(),
            train_log: "train.log".into(),
            report: "report.csv".into(),
            ablation: "ablation.csv".into(),
        }
    }
}

impl Paths {
    pub fn split(&self, split: Split) -> PathBuf {
        self.data_dir.join(format!("{}.bin", split.name()))
    }
}

/// Everything a command needs. The scene generator's own `seed` field is
/// ignored; scene seeds come from the root `seed` and the split.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub scene: SceneConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub splits: SplitSizes,
    pub ransac: RansacConfig,
    pub paths: Paths,
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Sizes from the original large-scale setting.
    pub fn apply_paper_scale(&mut self) {
        self.scene.n_correspondences = 2000;
        self.network.d = 128;
        self.network.oa_clusters = 500;
    }

    /// Applies one `dotted.key=value` override. Values are read as TOML
    /// literals, falling back to a bare string.
    pub fn apply_override(&mut self, spec: &str) -> Result<(), CliError> {
        let (key, raw) = spec
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override {spec:?} is not key=value")))?;
        let mut root = toml::Value::try_from(&*self).expect("configuration serializes");
        let parts: Vec<&str> = key.trim().split('.').collect();
        let (leaf, parents) = parts.split_last().expect("split yields one part");
        let mut table = root.as_table_mut().expect("configuration is a table");
        for p in parents {
            table = table
                .get_mut(*p)
                .and_then(toml::Value::as_table_mut)
                .ok_or_else(|| CliError::Usage(format!("unknown configuration section {p:?} in {key:?}")))?;
        }
        table.insert(leaf.to_string(), parse_value(raw.trim()));
        *self = root
            .try_into()
            .map_err(|e| CliError::Usage(format!("override {spec:?}: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.scene.validate()?;
        self.network.validate()?;
        let usage = |m: &str| Err(CliError::Usage(m.to_string()));
        if self.train.iterations == 0 || self.train.eval_interval == 0 {
            return usage("train.iterations and train.eval_interval must be positive");
        }
        if !(self.train.learning_rate > 0.0) {
            return usage("train.learning_rate must be positive");
        }
        if self.train.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return usage("train.grad_clip must be positive");
        }
        let s = self.splits;
        if s.train == 0 || s.val == 0 || s.test == 0 {
            return usage("every split needs at least one scene");
        }
        if [s.train, s.val, s.test].iter().any(|&c| c as u64 >= SPLIT_SEED_SPAN) {
            return usage("split sizes must stay below 2^24");
        }
        Ok(())
    }

    /// First scene seed of a split; the splits occupy disjoint ranges.
    pub fn split_seed(&self, split: Split) -> u64 {
        let index = match split {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        };
        self.seed.wrapping_mul(4 * SPLIT_SEED_SPAN).wrapping_add(index * SPLIT_SEED_SPAN)
    }

    pub fn split_size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.splits.train,
            Split::Val => self.splits.val,
            Split::Test => self.splits.test,
        }
    }

    /// RANSAC settings for the `index`-th evaluated scene.
    pub fn ransac_for(&self, index: usize) -> RansacConfig {
        RansacConfig {
            seed: self.ransac.seed.wrapping_add(index as u64),
            ..self.ransac
        }
    }
}
