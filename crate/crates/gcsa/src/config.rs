//! Run configuration: one JSON document covering generation, side
//! information, model, training, baselines and metrics.

use gcsa_core::affinity::{BlockConfig, SideInfoConfig};
use gcsa_core::baselines::{ALPHA_GRID, DEFAULT_N_QE};
use gcsa_core::geometry::FovConfig;
use gcsa_core::metrics::DEFAULT_KS;
use gcsa_core::model::{InputMode, ModelConfig};
use gcsa_core::radio::RadioConfig;
use gcsa_core::synth::WorldConfig;
use gcsa_core::train::{Labeling, Stage, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// Model sizes. The descriptor width comes from the dataset and the side
/// blocks from [`RunConfig::blocks`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d0: usize,
    pub d_bar: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_ratio: usize,
    /// Retrieved candidates per query.
    pub k: usize,
    /// Anchors.
    pub l: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            d0: 64,
            d_bar: 32,
            heads: 4,
            layers: 1,
            mlp_ratio: 4,
            k: 100,
            l: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub n_qe: usize,
    /// αQE exponent; tuned on the validation split over `alpha_grid` when
    /// absent.
    pub alpha: Option<f64>,
    pub alpha_grid: Vec<f64>,
    pub heading_max_deg: f64,
    pub radio_fraction: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            n_qe: DEFAULT_N_QE,
            alpha: None,
            alpha_grid: ALPHA_GRID.to_vec(),
            heading_max_deg: 30.0,
            radio_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed of the run. It replaces the seeds of `world`, `stage1` and
    /// `stage2`; parameter initialization uses `seed + 1` (stage 1) and
    /// `seed + 2` (stage 2).
    pub seed: u64,
    pub world: WorldConfig,
    pub model: ModelSection,
    pub blocks: BlockConfig,
    pub radio: RadioConfig,
    /// Field of view of the positional affinity; the world's when absent.
    pub fov: Option<FovConfig>,
    /// Labels of the database-as-query training examples.
    pub labeling: Labeling,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub baselines: BaselineConfig,
    pub ks: Vec<usize>,
}

impl Default for RunConfig {
    /// Full side information on the default synthetic world.
    fn default() -> Self {
        Self {
            seed: 0,
            world: WorldConfig::default(),
            model: ModelSection::default(),
            blocks: BlockConfig {
                positional: true,
                heading: true,
                radio: true,
                query_heading: true,
                query_radio: true,
            },
            radio: RadioConfig {
                delta_max: 100.0,
                beta: 3e-3,
                ..RadioConfig::default()
            },
            fov: None,
            labeling: Labeling::PosThreshold,
            stage1: TrainConfig {
                epochs: 20,
                lr: 1e-3,
                ..TrainConfig::projection()
            },
            stage2: TrainConfig {
                lr: 1e-3,
                p_input: 0.1,
                p_attention: 0.1,
                p_radio: 0.3,
                ..TrainConfig::lamar()
            },
            baselines: BaselineConfig::default(),
            ks: DEFAULT_KS.to_vec(),
        }
    }
}

impl RunConfig {
    /// Visual-only re-ranking on the default world.
    pub fn visual() -> Self {
        Self {
            blocks: BlockConfig::VISUAL,
            stage2: TrainConfig {
                epochs: 10,
                lr: 1e-3,
                p_input: 0.1,
                p_attention: 0.1,
                ..TrainConfig::msls()
            },
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text)
    }

    /// Copy with the run seed propagated into the nested sections.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.world.seed = c.seed;
        c.stage1.seed = c.seed;
        c.stage2.seed = c.seed;
        c
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
        .resolved()
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.fov().validate()?;
        if self.stage1.stage != Stage::Projection {
            return Err(CliError::Usage("stage1.stage must be projection".into()));
        }
        if self.stage2.stage == Stage::Projection {
            return Err(CliError::Usage("stage2.stage must be gnn or joint".into()));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(CliError::Usage(
                "ks must be a non-empty list of positive integers".into(),
            ));
        }
        if self.baselines.alpha.is_none() && self.baselines.alpha_grid.is_empty() {
            return Err(CliError::Usage(
                "baselines.alpha_grid is empty and no alpha is given".into(),
            ));
        }
        Ok(())
    }

    pub fn fov(&self) -> FovConfig {
        self.fov.unwrap_or(self.world.fov)
    }

    pub fn side(&self, blocks: BlockConfig) -> SideInfoConfig {
        SideInfoConfig {
            fov: self.fov(),
            radio: self.radio,
            blocks,
        }
    }

    /// Full model for descriptors of width `d`.
    pub fn model_config(&self, d: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            d,
            d0: m.d0,
            d_bar: m.d_bar,
            heads: m.heads,
            layers: m.layers,
            mlp_ratio: m.mlp_ratio,
            k: m.k,
            l: m.l,
            blocks: self.blocks,
            projection: true,
            gnn: true,
            input: InputMode::Affinity,
        }
    }

    /// Hex SHA-256 of the resolved configuration's JSON serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.resolved()).expect("config serializes");
        format!("{:x}", Sha256::digest(&bytes))
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
