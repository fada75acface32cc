//! The experiment configuration file.
//!
//! One TOML document drives every stage. Nested `seed` fields are ignored:
//! each stage draws its seed from the top-level `seed` and the stage name.

use std::fs;
use std::path::{Path, PathBuf};

use reidpatch::attack::{AttackConfig, AttackMode};
use reidpatch::evalbench::EvalSpec;
use reidpatch::physicsim::ToyDatasetConfig;
use reidpatch::reid::{TrainConfig, Variant};
use reidpatch::rng::derive_seed;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult, Stage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSource,
    pub model: ModelSection,
    pub adversary: AdversarySection,
    pub attack: AttackConfig,
    pub evaluation: EvalSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            dataset: DatasetSource::default(),
            model: ModelSection::default(),
            adversary: AdversarySection::default(),
            attack: AttackConfig::default(),
            evaluation: EvalSpec::default(),
        }
    }
}

/// Synthetic toy data or a folder of labelled images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSource {
    Toy(ToyDatasetConfig),
    Folder(FolderSource),
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Toy(ToyDatasetConfig::default())
    }
}

impl DatasetSource {
    /// Image size every stage works at.
    pub fn image_size(&self) -> (usize, usize) {
        match self {
            DatasetSource::Toy(t) => (t.height, t.width),
            DatasetSource::Folder(f) => (f.height, f.width),
        }
    }
}

/// A directory of `PPPP_cC_*.png|jpg` files, either flat or split into
/// `train/` and `test/` sub-directories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FolderSource {
    pub path: PathBuf,
    /// Images are resized to this size on ingestion.
    pub height: usize,
    pub width: usize,
    /// Used only for flat folders: leading fraction of each (identity, camera) group.
    pub train_fraction: f64,
}

impl Default for FolderSource {
    fn default() -> Self {
        Self {
            path: PathBuf::from("data"),
            height: 32,
            width: 16,
            train_fraction: 2.0 / 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub variant: Variant,
    /// Skip training and use this checkpoint.
    pub checkpoint: Option<PathBuf>,
    pub train: TrainConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            variant: Variant::ClassificationEmbedding,
            checkpoint: None,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversarySection {
    /// Identity wearing the pattern.
    pub identity: u32,
    /// Identity to impersonate; required in impersonate mode.
    pub target: Option<u32>,
}

impl Default for AdversarySection {
    fn default() -> Self {
        Self { identity: 1, target: None }
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<AttackMode>,
    pub output_dir: Option<PathBuf>,
    pub target: Option<u32>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(m) = o.mode {
            self.attack.mode = m;
        }
        if let Some(d) = &o.output_dir {
            self.output_dir = d.clone();
        }
        if let Some(t) = o.target {
            self.adversary.target = Some(t);
        }
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        derive_seed(self.seed, stage.name())
    }

    /// Copy with every nested seed replaced by its stage-derived value.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        if let DatasetSource::Toy(t) = &mut c.dataset {
            t.seed = self.stage_seed(Stage::Dataset);
        }
        c.model.train.seed = self.stage_seed(Stage::Model);
        c.attack.seed = self.stage_seed(Stage::Attack);
        c.evaluation.seed = self.stage_seed(Stage::Evaluate);
        c
    }

    /// The target identity when impersonating, `None` when evading.
    pub fn active_target(&self) -> Option<u32> {
        match self.attack.mode {
            AttackMode::Evade => None,
            AttackMode::Impersonate => self.adversary.target,
        }
    }

    /// Checks everything that can be checked without touching data.
    pub fn validate(&self) -> CliResult<()> {
        let nested = |what: &str, r: reidpatch::Result<()>| r.map_err(|e| CliError::Config(format!("{what}: {e}")));
        match &self.dataset {
            DatasetSource::Toy(t) => {
                nested("dataset", t.validate())?;
                let n = t.identity_count as u32;
                if self.adversary.identity == 0 || self.adversary.identity > n {
                    return Err(CliError::Config(format!(
                        "adversary identity {} is outside the toy range 1..={n}",
                        self.adversary.identity
                    )));
                }
                if let Some(tg) = self.adversary.target.filter(|tg| *tg == 0 || *tg > n) {
                    return Err(CliError::Config(format!("target identity {tg} is outside the toy range 1..={n}")));
                }
            }
            DatasetSource::Folder(f) => {
                if f.height < 16 || f.width < 8 {
                    return Err(CliError::Config("folder images must be resized to at least 16x8".into()));
                }
                if !(f.train_fraction > 0.0 && f.train_fraction < 1.0) {
                    return Err(CliError::Config("train_fraction must lie strictly inside (0, 1)".into()));
                }
            }
        }
        nested("model.train", self.model.train.validate())?;
        nested("attack", self.attack.validate())?;
        let arch = &self.model.train.architecture;
        if self.model.checkpoint.is_none() && (arch.input_height, arch.input_width) != self.dataset.image_size() {
            return Err(CliError::Config(format!(
                "model input {}x{} differs from the dataset image size {:?}",
                arch.input_height,
                arch.input_width,
                self.dataset.image_size()
            )));
        }
        if self.attack.mode == AttackMode::Impersonate {
            match self.adversary.target {
                None => {
                    return Err(CliError::Config(
                        "impersonate mode needs adversary.target (or --target)".into(),
                    ))
                }
                Some(t) if t == self.adversary.identity => {
                    return Err(CliError::Config("target identity equals the adversary".into()))
                }
                Some(_) => {}
            }
        }
        if self.evaluation.queries == 0 || self.evaluation.adversary_gallery_size == 0 {
            return Err(CliError::Config("evaluation.queries and adversary_gallery_size must be positive".into()));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(CliError::Config("output_dir is empty".into()));
        }
        Ok(())
    }
}
