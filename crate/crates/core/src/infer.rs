//! Two-stage atlas reconstruction: a coarse random probe of the normalized
//! cube locates the body, then a dense grid over the (enlarged) probe box
//! assigns every voxel its argmax class.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::format::{read_json, write_json};
use crate::occnet::OccupancyModel;
use crate::sensor::IsoNormalization;
use crate::volume::{AxisAlignedBox, Label, TriMesh, VoxelLabelVolume};
use crate::{Error, Point, Result, Vec3};

pub const DEFAULT_PROBES: usize = 40_000;
pub const DEFAULT_RESOLUTION: usize = 64;
pub const DEFAULT_MARGIN: f64 = 0.15;

/// Something that labels normalized query points; a trained model bound to
/// one cloud, or a synthetic oracle in tests.
pub trait OccupancyQuery {
    fn num_classes(&self) -> usize;
    fn classify(&self, queries: &[Point]) -> Vec<Label>;
}

/// A model together with the latent code of one normalized cloud.
pub struct ConditionedModel<'a> {
    model: &'a OccupancyModel,
    latent: ndarray::Array1<f64>,
}

impl<'a> ConditionedModel<'a> {
    pub fn new(model: &'a OccupancyModel, normalized_cloud: &[Point]) -> Result<Self> {
        Ok(Self { model, latent: model.encode(normalized_cloud)? })
    }
}

impl OccupancyQuery for ConditionedModel<'_> {
    fn num_classes(&self) -> usize {
        self.model.config.num_classes
    }

    fn classify(&self, queries: &[Point]) -> Vec<Label> {
        queries
            .chunks(4096)
            .flat_map(|c| self.model.decode(&self.latent, c, crate::occnet::Mode::Eval).classes())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub count: usize,
    /// Probes whose class is not background, with that class.
    pub inside: Vec<(Point, Label)>,
}

impl ProbeResult {
    pub fn is_empty(&self) -> bool {
        self.inside.is_empty()
    }

    pub fn bounds(&self) -> Option<AxisAlignedBox> {
        AxisAlignedBox::from_points(self.inside.iter().map(|(p, _)| p))
    }
}

pub fn coarse_probe(q: &impl OccupancyQuery, count: usize, rng: &mut impl Rng) -> ProbeResult {
    let probes: Vec<Point> = (0..count)
        .map(|_| Point::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect();
    let labels = q.classify(&probes);
    let inside = probes.into_iter().zip(labels).filter(|&(_, l)| l != 0).collect();
    ProbeResult { count, inside }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AtlasPrediction {
    /// Metric label volume; `None` when the probe found nothing.
    pub volume: Option<VoxelLabelVolume>,
    /// Index `k - 1` holds class `k`.
    pub boxes: Vec<Option<AxisAlignedBox>>,
    pub normalization: IsoNormalization,
}

impl AtlasPrediction {
    pub fn empty(num_classes: usize, normalization: IsoNormalization) -> Self {
        Self { volume: None, boxes: vec![None; num_classes], normalization }
    }

    pub fn num_classes(&self) -> usize {
        self.boxes.len()
    }

    pub fn present(&self) -> Vec<bool> {
        self.boxes.iter().map(Option::is_some).collect()
    }

    pub fn box_of(&self, class_id: Label) -> Option<AxisAlignedBox> {
        self.boxes.get((class_id as usize).checked_sub(1)?).copied().flatten()
    }
}

fn class_names(c: usize) -> Vec<String> {
    (1..=c).map(|k| format!("class_{k}")).collect()
}

/// Grid over the probe box enlarged by `margin` of its extent (half per
/// side). `resolution` voxels span the longest side; spacing is isotropic.
/// The grid is built in normalized space and mapped back through
/// `normalization`, so the returned volume and boxes are metric.
pub fn dense_reconstruct(
    q: &impl OccupancyQuery,
    probe: &ProbeResult,
    resolution: usize,
    margin: f64,
    normalization: IsoNormalization,
) -> Result<AtlasPrediction> {
    if resolution == 0 || !(margin >= 0.0 && margin.is_finite()) {
        return Err(Error::InvalidInput(format!("resolution {resolution} / margin {margin} invalid")));
    }
    let c = q.num_classes();
    let Some(b) = probe.bounds() else {
        return Ok(AtlasPrediction::empty(c, normalization));
    };
    // a degenerate probe box still gets about one probe spacing of extent
    let floor = 2.0 / (probe.count.max(1) as f64).cbrt();
    let ext = b.extent().map(|e| e.max(floor)) * (1.0 + margin);
    let center = b.center();
    let spacing = ext.max() / resolution as f64;
    let dims = [0, 1, 2].map(|a| ((ext[a] / spacing - 1e-9).ceil() as usize).clamp(1, resolution));
    let size = Vec3::new(dims[0] as f64, dims[1] as f64, dims[2] as f64) * spacing;
    let origin = center - size / 2.0;
    let mut grid = VoxelLabelVolume::empty(dims, spacing, origin, class_names(c))?;
    let centers: Vec<Point> = (0..grid.len())
        .map(|i| {
            let [x, y, z] = grid.coords(i);
            grid.voxel_center(x, y, z)
        })
        .collect();
    let labels = q.classify(&centers);
    if let Some(&bad) = labels.iter().find(|&&l| l as usize > c) {
        return Err(Error::InvalidInput(format!("query returned class {bad} beyond {c}")));
    }
    for (i, l) in labels.into_iter().enumerate() {
        let [x, y, z] = grid.coords(i);
        grid.set(x, y, z, l);
    }
    let metric = VoxelLabelVolume::new(
        dims,
        spacing / normalization.scale,
        normalization.denormalize(&origin),
        grid.labels().to_vec(),
        class_names(c),
    )?;
    let boxes = (1..=c as Label).map(|k| metric.aabb_of_class(k)).collect();
    Ok(AtlasPrediction { volume: Some(metric), boxes, normalization })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferParams {
    pub probes: usize,
    pub resolution: usize,
    pub margin: f64,
}

impl Default for InferParams {
    fn default() -> Self {
        Self { probes: DEFAULT_PROBES, resolution: DEFAULT_RESOLUTION, margin: DEFAULT_MARGIN }
    }
}

/// Normalize a metric cloud, probe, and reconstruct in the cloud's frame.
pub fn infer_atlas(model: &OccupancyModel, cloud: &[Point], params: &InferParams, rng: &mut impl Rng) -> Result<AtlasPrediction> {
    let norm = IsoNormalization::fit(cloud)?;
    let normalized: Vec<Point> = cloud.iter().map(|p| norm.apply(p)).collect();
    let q = ConditionedModel::new(model, &normalized)?;
    let probe = coarse_probe(&q, params.probes, rng);
    log::info!("{} of {} probes inside", probe.inside.len(), probe.count);
    dense_reconstruct(&q, &probe, params.resolution, params.margin, norm)
}

/// One closed mesh per present class.
pub fn extract_atlas_meshes(pred: &AtlasPrediction) -> Vec<TriMesh> {
    let Some(v) = &pred.volume else { return Vec::new() };
    let padded = v.pad_boundary();
    (1..=pred.num_classes() as Label)
        .filter(|&k| pred.box_of(k).is_some())
        .map(|k| padded.extract_mesh(k))
        .filter(|m| !m.is_empty())
        .collect()
}

/// Class id → `[min_x, min_y, min_z, max_x, max_y, max_z]` in meters, or
/// null when the class is absent.
pub type BoxesJson = BTreeMap<Label, Option<[f64; 6]>>;

pub fn boxes_to_json(boxes: &[Option<AxisAlignedBox>]) -> BoxesJson {
    boxes.iter().enumerate().map(|(i, b)| (i as Label + 1, b.map(|b| b.as_array()))).collect()
}

pub fn boxes_from_json(map: &BoxesJson, num_classes: usize) -> Vec<Option<AxisAlignedBox>> {
    (1..=num_classes as Label).map(|k| map.get(&k).copied().flatten().map(AxisAlignedBox::from_array)).collect()
}

pub fn write_boxes(path: &Path, boxes: &[Option<AxisAlignedBox>]) -> Result<()> {
    write_json(path, &boxes_to_json(boxes))
}

pub fn read_boxes(path: &Path) -> Result<BoxesJson> {
    read_json(path)
}

/// Writes `atlas.olv` (when present), `boxes.json` and, if asked, one OBJ
/// per class mesh.
pub fn export_prediction(dir: &Path, pred: &AtlasPrediction, meshes: bool) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if let Some(v) = &pred.volume {
        v.write_olv(&dir.join("atlas.olv"))?;
    }
    write_boxes(&dir.join("boxes.json"), &pred.boxes)?;
    if meshes {
        for m in extract_atlas_meshes(pred) {
            m.write_obj(&dir.join(format!("class_{}.obj", m.class_id)))?;
        }
    }
    Ok(())
}
