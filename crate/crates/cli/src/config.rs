//! Run configuration: built-in defaults overlaid by an optional TOML file,
//! then by command-line flags.

use std::path::Path;

use partgrid::anchorgen::AnchorClassSpec;
use partgrid::codec::CodecConfig;
use partgrid::kittio::SynthSpec;
use partgrid::pipeline::SmokeConfig;
use partgrid::roipool::PoolSpec;
use partgrid::sparseconv::BackboneConfig;
use partgrid::VoxelGridSpec;
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// 0 lets rayon pick.
    pub threads: usize,
    pub grid: VoxelGridSpec,
    pub codec: CodecConfig,
    pub synth: SynthSpec,
    pub backbone: BackboneConfig,
    pub pool: PoolSpec,
    pub anchors: Vec<AnchorClassSpec>,
    pub smoke: SmokeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 0,
            grid: VoxelGridSpec::default(),
            codec: CodecConfig::default(),
            synth: SynthSpec::default(),
            backbone: BackboneConfig::default(),
            pool: PoolSpec::default(),
            anchors: AnchorClassSpec::kitti_classes(),
            smoke: SmokeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), Failure> {
        let check = |r: partgrid::Result<()>| r.map_err(Failure::from);
        check(self.grid.validate())?;
        check(self.codec.validate())?;
        check(self.synth.validate())?;
        check(self.backbone.validate())?;
        for a in &self.anchors {
            check(a.validate())?;
        }
        if self.pool.lx == 0 || self.pool.ly == 0 || self.pool.lz == 0 {
            return Err(Failure::input("pool grid sizes must be positive"));
        }
        Ok(())
    }
}
