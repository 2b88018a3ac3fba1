//! A model together with its input pipeline.

use dyninfer_core::data::SyntheticVideo;
use dyninfer_core::grid::CheckpointGrid;
use dyninfer_core::model::Model;
use dyninfer_core::temporal::{FrameSet, PermutationPlan, PLAN_SETS};

use crate::error::{Error, Result};
use crate::formats::grid_hash;

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub model: Model,
    /// Frame-sets processed in the interleaved order rather than in time order.
    pub permute: bool,
}

impl Network {
    pub fn init(grid: CheckpointGrid, permute: bool, seed: u64) -> Result<Self> {
        if grid.n_sets != PLAN_SETS {
            return Err(Error::Invalid(format!("networks use {PLAN_SETS} frame-sets, grid has {}", grid.n_sets)));
        }
        Ok(Self { model: Model::init(grid, seed)?, permute })
    }

    pub fn grid(&self) -> &CheckpointGrid {
        &self.model.grid
    }

    pub fn plan(&self) -> PermutationPlan {
        let e = self.model.grid.set_size;
        if self.permute {
            PermutationPlan::permuted(e)
        } else {
            PermutationPlan::identity(PLAN_SETS, e)
        }
    }

    pub fn frames_needed(&self) -> usize {
        self.model.grid.n_sets * self.model.grid.set_size
    }

    /// Evenly sampled frames grouped into frame-sets in processing order.
    pub fn prepare(&self, video: &SyntheticVideo) -> Result<Vec<FrameSet>> {
        Ok(self.plan().apply(video.sample(self.frames_needed()))?)
    }

    pub fn hash(&self) -> String {
        grid_hash(&self.model.grid, self.permute)
    }
}
