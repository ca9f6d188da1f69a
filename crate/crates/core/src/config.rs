//! Run configuration: one TOML document per run, validated before any work.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alignment::AlignerConfig;
use crate::backbone::BackboneId;
use crate::error::{Error, Result};
use crate::eval::Study;
use crate::model::ExecProfile;
use crate::scorers::{ScorerConfig, ScorerKind};
use crate::shl::ShlConfig;
use crate::synthesis::{MisalignmentParams, ToyDatasetSpec};

pub const RUN_CONFIG_SCHEMA_VERSION: u32 = 1;

/// Name of the snapshot every command writes next to its outputs.
pub const SNAPSHOT_FILE: &str = "run_config.toml";

/// Environment variable naming the directory pretrained weights and
/// external datasets are looked up in.
pub const ASSET_DIR_ENV: &str = "HOMAD_ASSET_DIR";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetVariant {
    #[default]
    Original,
    Misaligned,
    Aligned,
}

impl DatasetVariant {
    pub const ALL: [DatasetVariant; 3] = [
        DatasetVariant::Misaligned,
        DatasetVariant::Original,
        DatasetVariant::Aligned,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetVariant::Original => "original",
            DatasetVariant::Misaligned => "misaligned",
            DatasetVariant::Aligned => "aligned",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Directory holding a `manifest.json`. Without it a toy dataset is
    /// generated per seed from `toy`.
    pub root: Option<PathBuf>,
    pub variant: DatasetVariant,
    pub toy: ToyDatasetSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            root: None,
            variant: DatasetVariant::Original,
            toy: ToyDatasetSpec::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionProtocol {
    /// Held-out train normals plus pasted synthetic defects.
    #[default]
    Validation,
    /// The class's test split. Leaks test labels into model selection;
    /// kept for comparison with published numbers.
    TestSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    pub protocol: SelectionProtocol,
    /// Scorer whose image AUROC ranks the checkpoints.
    pub scorer: ScorerKind,
    /// Fraction of train normals held out for validation.
    pub holdout_fraction: f64,
    /// Synthetic defects are pasted inside the central square that leaves
    /// this margin on each side.
    pub defect_margin: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            protocol: SelectionProtocol::Validation,
            scorer: ScorerKind::Padim,
            holdout_fraction: 0.2,
            defect_margin: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub dataset: DatasetConfig,
    /// Classes to run; empty means every class the study applies to.
    pub classes: Vec<String>,
    pub backbone: BackboneId,
    pub scorers: Vec<ScorerKind>,
    pub scorer: ScorerConfig,
    pub shl: ShlConfig,
    pub aligner: AlignerConfig,
    /// Directory of trained aligners (one per class). When set, `align`
    /// only applies them.
    pub aligner_checkpoint: Option<PathBuf>,
    pub misalignment: MisalignmentParams,
    pub selection: SelectionConfig,
    /// Each seed reruns the whole pipeline; results are averaged.
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub profile: ExecProfile,
    pub asset_dir: Option<PathBuf>,
    /// Heatmap panels rendered per class and scorer.
    pub heatmaps: usize,
    /// What `evaluate` runs.
    pub study: Study,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: RUN_CONFIG_SCHEMA_VERSION,
            dataset: DatasetConfig::default(),
            classes: Vec::new(),
            backbone: BackboneId::CompactCnn,
            scorers: vec![ScorerKind::Padim],
            scorer: ScorerConfig::default(),
            shl: ShlConfig::default(),
            aligner: AlignerConfig::default(),
            aligner_checkpoint: None,
            misalignment: MisalignmentParams::default(),
            selection: SelectionConfig::default(),
            seeds: vec![0],
            output_dir: PathBuf::from("homad-out"),
            profile: ExecProfile::Serial,
            asset_dir: None,
            heatmaps: 2,
            study: Study::Evaluate,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Invalid(format!("config: {e}")))
    }

    /// Writes the snapshot file into `dir`.
    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(SNAPSHOT_FILE);
        std::fs::write(&path, self.to_toml()?)?;
        Ok(path)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != RUN_CONFIG_SCHEMA_VERSION {
            return Err(Error::Validation(format!(
                "config schema_version {} is not supported (expected {RUN_CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Validation("at least one seed is required".into()));
        }
        if self.scorers.is_empty() {
            return Err(Error::Validation("at least one scorer is required".into()));
        }
        let s = &self.selection;
        if !(s.holdout_fraction > 0.0 && s.holdout_fraction < 1.0) {
            return Err(Error::Validation("selection.holdout_fraction must lie in (0, 1)".into()));
        }
        if !(0.0..0.5).contains(&s.defect_margin) {
            return Err(Error::Validation("selection.defect_margin must lie in [0, 0.5)".into()));
        }
        if self.dataset.root.is_none() {
            self.dataset.toy.validate()?;
        }
        self.scorer.validate()?;
        self.shl.validate()?;
        self.aligner.validate()?;
        self.misalignment.validate()
    }

    /// Asset directory from the config, else from the environment.
    pub fn resolved_asset_dir(&self) -> Option<PathBuf> {
        self.asset_dir
            .clone()
            .or_else(|| std::env::var_os(ASSET_DIR_ENV).map(PathBuf::from))
    }

    /// Copy with every component seed set to `seed`.
    pub fn for_seed(&self, seed: u64) -> RunConfig {
        let mut c = self.clone();
        c.shl.seed = seed;
        c.aligner.seed = seed;
        c.scorer.seed = seed;
        c.shl.backbone = c.backbone;
        c.shl.profile = c.profile;
        c.aligner.profile = c.profile;
        c
    }
}
