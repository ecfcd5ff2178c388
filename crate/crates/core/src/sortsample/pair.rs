use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sample_all_structures, OccupancySampleSet};
use crate::deform::{deform_volume, sample_lattice, LatticeDeformation};
use crate::phantom::extract_skin;
use crate::sensor::{backproject, render_depth, CameraPose, Intrinsics, SensorPointCloud};
use crate::volume::VoxelLabelVolume;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairParams {
    pub n_per_side: usize,
    pub deform: bool,
    pub intrinsics: Intrinsics,
    /// Fixed camera instead of a sampled one.
    pub pose: Option<CameraPose>,
}

impl Default for PairParams {
    fn default() -> Self {
        Self { n_per_side: 32, deform: true, intrinsics: Intrinsics::default(), pose: None }
    }
}

/// One sensor cloud with its occupancy samples, both in camera space.
#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub cloud: SensorPointCloud,
    pub samples: OccupancySampleSet,
    pub pose: CameraPose,
    pub lattice: Option<LatticeDeformation>,
    pub seed: u64,
}

/// Deform, render the skin, backproject, and sample every structure. The
/// random stream is consumed in that order.
pub fn build_training_pair(v: &VoxelLabelVolume, params: &PairParams, seed: u64) -> Result<TrainingPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fg = v.aabb_of_foreground().ok_or_else(|| Error::Degenerate("volume has no structures".into()))?;
    let (volume, lattice) = if params.deform {
        let d = sample_lattice(&mut rng, &fg);
        (deform_volume(v, &d), Some(d))
    } else {
        (v.clone(), None)
    };
    let target = volume
        .aabb_of_foreground()
        .ok_or_else(|| Error::Degenerate("deformation removed every structure".into()))?
        .center();
    let pose = match params.pose {
        Some(p) => p,
        None => CameraPose::sample(&mut rng, target, params.intrinsics),
    };
    let skin = extract_skin(&volume);
    let image = render_depth(&skin, &pose)?;
    if image.is_all_miss() {
        return Err(Error::Degenerate(format!("depth image of seed {seed} has no hits")));
    }
    let mut cloud = backproject(&image);
    cloud.seed = Some(seed);
    cloud.pose = Some(pose);

    let mut samples = sample_all_structures(&volume, params.n_per_side, &mut rng);
    let iso = pose.world_to_camera()?;
    samples.map_positions(|p| iso * p);
    Ok(TrainingPair { cloud, samples, pose, lattice, seed })
}
