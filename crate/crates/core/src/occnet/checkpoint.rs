//! Checkpoints are a directory holding `checkpoint.json` and `params.bin`.
//! The blob stores parameters, running statistics and, when present, the
//! Adam moments, all as little-endian `f64`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::{Adam, LossRecord, TrainConfig, TrainState};
use super::{Layout, ModelConfig, OccupancyModel, Segment};
use crate::format::{f64s_to_le, le_to_f64s, read_json, write_json};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "checkpoint.json";
pub const BLOB_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentEntry {
    pub name: String,
    pub offset: usize,
    pub shape: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub num_classes: usize,
    pub segments: Vec<SegmentEntry>,
    pub num_params: usize,
    pub num_running: usize,
    pub has_optimizer: bool,
    /// How clouds and queries were normalized before entering the model.
    pub normalization: String,
    pub seed: u64,
    pub train: Option<TrainConfig>,
    pub epoch: usize,
    pub step: usize,
    pub adam_t: u64,
    pub records: Vec<LossRecord>,
}

pub fn save_checkpoint(dir: &Path, state: &TrainState, train: Option<&TrainConfig>) -> Result<()> {
    let m = &state.model;
    let manifest = CheckpointManifest {
        format: "occupancy-checkpoint".into(),
        version: 1,
        model: m.config,
        num_classes: m.config.num_classes,
        segments: m
            .layout
            .named_segments()
            .into_iter()
            .map(|(name, s)| SegmentEntry { name, offset: s.offset, shape: [s.rows, s.cols] })
            .collect(),
        num_params: m.params.len(),
        num_running: m.running.len(),
        has_optimizer: true,
        normalization: "per-cloud: center of the cloud AABB, uniform scale 2 / longest AABB side".into(),
        seed: state.init_seed,
        train: train.cloned(),
        epoch: state.epoch,
        step: state.step,
        adam_t: state.adam.t,
        records: state.records.clone(),
    };
    let values = m.params.iter().chain(&m.running).chain(&state.adam.m).chain(&state.adam.v).copied();
    let blob = f64s_to_le(values);
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(BLOB_FILE);
    std::fs::write(&path, blob).map_err(|e| Error::io(&path, e))?;
    write_json(&dir.join(MANIFEST_FILE), &manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointManifest, TrainState)> {
    let mpath = dir.join(MANIFEST_FILE);
    let manifest: CheckpointManifest = read_json(&mpath)?;
    if manifest.format != "occupancy-checkpoint" {
        return Err(Error::format(&mpath, format!("unexpected format {:?}", manifest.format)));
    }
    let layout = Layout::new(&manifest.model);
    let expected: Vec<(String, Segment)> = layout.named_segments();
    let matches = expected.len() == manifest.segments.len()
        && expected.iter().zip(&manifest.segments).all(|((n, s), e)| {
            *n == e.name && s.offset == e.offset && [s.rows, s.cols] == e.shape
        });
    if !matches || layout.total != manifest.num_params {
        return Err(Error::format(&mpath, "layer shapes do not match the model configuration"));
    }
    let bpath = dir.join(BLOB_FILE);
    let bytes = std::fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let values = le_to_f64s(&bpath, &bytes)?;
    let (np, nr) = (manifest.num_params, manifest.num_running);
    let want = np + nr + if manifest.has_optimizer { 2 * np } else { 0 };
    if values.len() != want || nr != 2 * super::HIDDEN_LAYERS * manifest.model.hidden_dim {
        return Err(Error::format(&bpath, format!("expected {want} values, found {}", values.len())));
    }
    let model = OccupancyModel {
        config: manifest.model,
        layout,
        params: values[..np].to_vec(),
        running: values[np..np + nr].to_vec(),
    };
    model.check_finite()?;
    let adam = if manifest.has_optimizer {
        Adam { m: values[np + nr..2 * np + nr].to_vec(), v: values[2 * np + nr..].to_vec(), t: manifest.adam_t }
    } else {
        Adam::new(np)
    };
    let state = TrainState {
        model,
        adam,
        init_seed: manifest.seed,
        epoch: manifest.epoch,
        step: manifest.step,
        records: manifest.records.clone(),
    };
    Ok((manifest, state))
}
