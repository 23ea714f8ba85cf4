//! Fixed train/test splits of generated scenes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{generate_scene, GridConfig, SceneConfig, SceneSample, SensorConfig};

/// Test scenes draw seeds from a disjoint range.
pub const TEST_SEED_OFFSET: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub train_scenes: usize,
    pub test_scenes: usize,
    /// First generation seed of the training split.
    pub seed: u64,
    /// Keep only scenes where another agent sees an in-crop object that the
    /// designated ego (agent 0) misses.
    pub require_hidden_object: bool,
    /// Seeds tried per accepted scene before giving up.
    pub max_candidates: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train_scenes: 200,
            test_scenes: 50,
            seed: 0,
            require_hidden_object: true,
            max_candidates: 1000,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_candidates == 0 {
            return Err(Error::config("dataset.max_candidates", "must be positive"));
        }
        if self.seed >= TEST_SEED_OFFSET {
            return Err(Error::config("dataset.seed", "must be below 2^32"));
        }
        Ok(())
    }
}

/// Which agents of a scene act as ego during training and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EgoPolicy {
    /// Agent 0 only.
    Designated,
    All,
}

impl EgoPolicy {
    pub fn egos(self, agents: usize) -> std::ops::Range<usize> {
        match self {
            EgoPolicy::Designated => 0..agents.min(1),
            EgoPolicy::All => 0..agents,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<SceneSample>,
    pub test: Vec<SceneSample>,
}

pub struct SplitSpec<'a> {
    pub scene: &'a SceneConfig,
    pub sensor: &'a SensorConfig,
    pub grid: &'a GridConfig,
    pub dataset: &'a DatasetConfig,
}

/// `count` samples from consecutive seeds starting at `first_seed`.
pub fn generate_split(spec: &SplitSpec<'_>, first_seed: u64, count: usize) -> Result<Vec<SceneSample>> {
    let mut out = Vec::with_capacity(count);
    let mut seed = first_seed;
    let mut misses = 0;
    while out.len() < count {
        // A seed whose placement jams counts as one more rejected candidate.
        let accepted = match generate_scene(seed, spec.scene) {
            Ok(scene) => Some(SceneSample::build(scene, spec.sensor, spec.grid))
                .filter(|s| !spec.dataset.require_hidden_object || s.has_hidden_object(0, spec.grid)),
            Err(Error::Generation { .. }) => None,
            Err(e) => return Err(e),
        };
        seed += 1;
        if let Some(sample) = accepted {
            out.push(sample);
            misses = 0;
        } else {
            misses += 1;
            if misses >= spec.dataset.max_candidates {
                return Err(Error::Generation {
                    seed,
                    constraint: "hidden object for the designated ego or a placeable scene",
                });
            }
        }
    }
    Ok(out)
}

pub fn generate_dataset(spec: &SplitSpec<'_>) -> Result<Dataset> {
    spec.dataset.validate()?;
    Ok(Dataset {
        train: generate_split(spec, spec.dataset.seed, spec.dataset.train_scenes)?,
        test: generate_split(spec, spec.dataset.seed + TEST_SEED_OFFSET, spec.dataset.test_scenes)?,
    })
}
