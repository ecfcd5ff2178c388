//! Template matching: register the patient cloud to every template with
//! point-to-point ICP, keep the template with the smallest chamfer
//! distance, and carry its boxes back into patient space.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, SVD};
use serde::{Deserialize, Serialize};

use crate::format::{read_json, write_json};
use crate::infer::{boxes_from_json, read_boxes, write_boxes};
use crate::sensor::SensorPointCloud;
use crate::volume::AxisAlignedBox;
use crate::{Error, Point, Result, Vec3};

/// Exact nearest-neighbour search over a uniform grid of buckets.
pub struct NeighborGrid<'a> {
    points: &'a [Point],
    origin: Point,
    cell: f64,
    dims: [i64; 3],
    starts: Vec<u32>,
    items: Vec<u32>,
}

const MAX_CELLS_PER_AXIS: f64 = 128.0;

impl<'a> NeighborGrid<'a> {
    /// Cell size is the median nearest-neighbour spacing, estimated on a
    /// first grid sized from the bounding box.
    pub fn new(points: &'a [Point]) -> Result<Self> {
        let b = AxisAlignedBox::from_points(points.iter())
            .ok_or_else(|| Error::InvalidInput("cannot index an empty cloud".into()))?;
        let mut e = b.extent().as_slice().to_vec();
        e.sort_by(|a, b| b.total_cmp(a));
        let n = points.len() as f64;
        let guess = (e[0] * e[1] / n).sqrt().max(e[0] / n).max(1e-9);
        let first = Self::with_cell(points, guess);
        let mut nn: Vec<f64> = (0..points.len()).map(|i| first.nearest_excluding(&points[i], i)).collect();
        let median = if nn.len() < 2 {
            guess
        } else {
            let mid = nn.len() / 2;
            *nn.select_nth_unstable_by(mid, f64::total_cmp).1
        };
        Ok(Self::with_cell(points, if median > 0.0 && median.is_finite() { median } else { guess }))
    }

    fn with_cell(points: &'a [Point], cell: f64) -> Self {
        let b = AxisAlignedBox::from_points(points.iter()).expect("nonempty");
        let ext = b.extent();
        let cell = cell.max(ext.max() / MAX_CELLS_PER_AXIS).max(1e-12);
        let dims = [0, 1, 2].map(|a| (ext[a] / cell).floor() as i64 + 1);
        let ncells = (dims[0] * dims[1] * dims[2]) as usize;
        let mut grid = Self { points, origin: b.min, cell, dims, starts: vec![0; ncells + 1], items: vec![0; points.len()] };
        let ids: Vec<usize> = points.iter().map(|p| grid.flat(grid.cell_of(p))).collect();
        for &c in &ids {
            grid.starts[c + 1] += 1;
        }
        for c in 0..ncells {
            grid.starts[c + 1] += grid.starts[c];
        }
        let mut fill = grid.starts.clone();
        for (i, &c) in ids.iter().enumerate() {
            grid.items[fill[c] as usize] = i as u32;
            fill[c] += 1;
        }
        grid
    }

    pub fn cell_size(&self) -> f64 {
        self.cell
    }

    fn cell_of(&self, p: &Point) -> [i64; 3] {
        [0, 1, 2].map(|a| ((p[a] - self.origin[a]) / self.cell).floor() as i64)
    }

    fn flat(&self, c: [i64; 3]) -> usize {
        let c = [0, 1, 2].map(|a| c[a].clamp(0, self.dims[a] - 1));
        (c[0] + self.dims[0] * (c[1] + self.dims[1] * c[2])) as usize
    }

    fn bucket(&self, c: [i64; 3]) -> &[u32] {
        let f = self.flat(c);
        &self.items[self.starts[f] as usize..self.starts[f + 1] as usize]
    }

    /// Index and distance of the nearest point.
    pub fn nearest(&self, q: &Point) -> (usize, f64) {
        self.search(q, usize::MAX)
    }

    fn nearest_excluding(&self, q: &Point, skip: usize) -> f64 {
        self.search(q, skip).1
    }

    fn search(&self, q: &Point, skip: usize) -> (usize, f64) {
        let qc = self.cell_of(q);
        let mut best = (usize::MAX, f64::INFINITY);
        // Chebyshev distance (in cells) from the query cell to the grid
        let gap = (0..3).map(|a| (-qc[a]).max(qc[a] - (self.dims[a] - 1)).max(0)).max().unwrap_or(0);
        let far = (0..3).map(|a| (qc[a]).abs().max((qc[a] - (self.dims[a] - 1)).abs())).max().unwrap_or(0);
        let mut r = gap;
        loop {
            self.visit_ring(qc, r, |i| {
                if i != skip {
                    let d = (self.points[i] - q).norm_squared();
                    if d < best.1 || (d == best.1 && i < best.0) {
                        best = (i, d);
                    }
                }
            });
            // every unvisited point lies at least r cells away
            let bound = r as f64 * self.cell;
            if (best.0 != usize::MAX && best.1 < bound * bound) || r >= far {
                break;
            }
            r += 1;
        }
        (best.0, best.1.sqrt())
    }

    fn visit_ring(&self, c: [i64; 3], r: i64, mut f: impl FnMut(usize)) {
        let lo = |a: usize| (c[a] - r).max(0);
        let hi = |a: usize| (c[a] + r).min(self.dims[a] - 1);
        for x in lo(0)..=hi(0) {
            for y in lo(1)..=hi(1) {
                let on_face = (x - c[0]).abs() == r || (y - c[1]).abs() == r;
                let mut visit = |z: i64| {
                    for &i in self.bucket([x, y, z]) {
                        f(i as usize);
                    }
                };
                if on_face {
                    for z in lo(2)..=hi(2) {
                        visit(z);
                    }
                } else {
                    // r > 0 here, since every cell of ring 0 is on a face
                    for z in [c[2] - r, c[2] + r] {
                        if (0..self.dims[2]).contains(&z) {
                            visit(z);
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        rotation: Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0),
        translation: Vec3::new(0.0, 0.0, 0.0),
    };

    pub fn apply(&self, p: &Point) -> Point {
        Point::from(self.rotation * p.coords + self.translation)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    /// `self` after `other`.
    pub fn compose(&self, other: &Self) -> Self {
        Self { rotation: self.rotation * other.rotation, translation: self.rotation * other.translation + self.translation }
    }

    pub fn rotation_angle_deg(&self) -> f64 {
        ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees()
    }

    pub fn is_proper(&self, tol: f64) -> bool {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax() < tol
            && (self.rotation.determinant() - 1.0).abs() < tol
    }
}

fn centroid(points: &[Point]) -> Point {
    Point::from(points.iter().map(|p| p.coords).sum::<Vec3>() / points.len() as f64)
}

/// Least-squares rotation and translation taking `src[i]` to `dst[i]`.
pub fn kabsch(src: &[Point], dst: &[Point]) -> RigidTransform {
    let (cs, cd) = (centroid(src), centroid(dst));
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = SVD::new(h, true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let v = vt.transpose();
    let sign = (v * u.transpose()).determinant().signum();
    let rotation = v * Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, sign)) * u.transpose();
    RigidTransform { rotation, translation: cd.coords - rotation * cs.coords }
}

fn check_cloud(points: &[Point], what: &str) -> Result<()> {
    if points.len() < 3 {
        return Err(Error::Degenerate(format!("{what} has {} points; ICP needs 3", points.len())));
    }
    let c = centroid(points);
    let mut cov = Matrix3::zeros();
    for p in points {
        cov += (p - c) * (p - c).transpose();
    }
    let mut s = cov.symmetric_eigenvalues().as_slice().to_vec();
    s.sort_by(f64::total_cmp);
    if !(s[1] > 1e-12 * s[2].max(1e-300)) {
        return Err(Error::Degenerate(format!("{what} is collinear")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcpParams {
    pub max_iters: usize,
    /// Stop once the residual improves by less than this (meters).
    pub tol: f64,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self { max_iters: 50, tol: 1e-6 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IcpResult {
    /// Maps source points onto the target.
    pub transform: RigidTransform,
    /// Root mean square correspondence distance of `transform`.
    pub residual: f64,
    /// Residual at the start of every iteration, then the final one.
    pub history: Vec<f64>,
    pub converged: bool,
}

fn rms_correspondences(grid: &NeighborGrid, target: &[Point], src: &[Point], t: &RigidTransform) -> (f64, Vec<Point>) {
    let mut ss = 0.0;
    let matched = src
        .iter()
        .map(|s| {
            let (i, d) = grid.nearest(&t.apply(s));
            ss += d * d;
            target[i]
        })
        .collect();
    ((ss / src.len() as f64).sqrt(), matched)
}

/// Point-to-point ICP from a centroid-aligned start. The residual never
/// increases between iterations.
pub fn icp_register(source: &[Point], target: &[Point], params: &IcpParams) -> Result<IcpResult> {
    check_cloud(source, "source cloud")?;
    check_cloud(target, "target cloud")?;
    let grid = NeighborGrid::new(target)?;
    let mut t = RigidTransform { rotation: Matrix3::identity(), translation: centroid(target) - centroid(source) };
    let (mut residual, mut matched) = rms_correspondences(&grid, target, source, &t);
    let mut history = vec![residual];
    let mut converged = false;
    for _ in 0..params.max_iters {
        let next = kabsch(source, &matched);
        let (r, m) = rms_correspondences(&grid, target, source, &next);
        if r > residual {
            // only rounding can get here; keep the better transform
            converged = true;
            break;
        }
        let gain = residual - r;
        t = next;
        residual = r;
        matched = m;
        history.push(r);
        if gain < params.tol {
            converged = true;
            break;
        }
    }
    if !residual.is_finite() {
        return Err(Error::NonFinite("ICP residual".into()));
    }
    Ok(IcpResult { transform: t, residual, history, converged })
}

fn mean_nearest(from: &[Point], grid: &NeighborGrid) -> f64 {
    from.iter().map(|p| grid.nearest(p).1).sum::<f64>() / from.len() as f64
}

/// Symmetric chamfer distance: the average of both mean nearest-neighbour
/// distances, unsquared, in the clouds' units.
pub fn chamfer(a: &[Point], b: &[Point]) -> Result<f64> {
    let ga = NeighborGrid::new(a)?;
    let gb = NeighborGrid::new(b)?;
    let ab = mean_nearest(a, &gb);
    let ba = mean_nearest(b, &ga);
    Ok(0.5 * (ab + ba))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Template {
    pub id: String,
    pub cloud: Vec<Point>,
    /// `boxes[k - 1]` is class `k`, in the template's frame.
    pub boxes: Vec<Option<AxisAlignedBox>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub template: usize,
    pub id: String,
    /// Patient → template.
    pub transform: RigidTransform,
    pub chamfer: f64,
    pub boxes: Vec<Option<AxisAlignedBox>>,
    pub failed_registrations: usize,
}

/// Registers `patient` to each template, keeps the smallest chamfer
/// distance (first wins on ties) and maps its boxes into patient space.
pub fn match_and_transfer(patient: &[Point], templates: &[Template], params: &IcpParams) -> Result<MatchResult> {
    if templates.is_empty() {
        return Err(Error::InvalidInput("template library is empty".into()));
    }
    let mut best: Option<(usize, RigidTransform, f64)> = None;
    let mut failed = 0;
    for (i, t) in templates.iter().enumerate() {
        let reg = match icp_register(patient, &t.cloud, params) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("registration to template {} failed: {e}", t.id);
                failed += 1;
                continue;
            }
        };
        let moved: Vec<Point> = patient.iter().map(|p| reg.transform.apply(p)).collect();
        let c = chamfer(&moved, &t.cloud)?;
        if best.as_ref().is_none_or(|b| c < b.2) {
            best = Some((i, reg.transform, c));
        }
    }
    let (i, transform, c) = best.ok_or_else(|| Error::Degenerate("every registration failed".into()))?;
    let back = transform.inverse();
    let boxes = templates[i].boxes.iter().map(|b| b.map(|b| b.map_corners(|p| back.apply(p)))).collect();
    Ok(MatchResult { template: i, id: templates[i].id.clone(), transform, chamfer: c, boxes, failed_registrations: failed })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LibraryEntry {
    pub id: String,
    pub cloud: PathBuf,
    pub boxes: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LibraryManifest {
    pub num_classes: usize,
    pub templates: Vec<LibraryEntry>,
}

pub const LIBRARY_MANIFEST: &str = "templates.json";

pub fn write_library(dir: &Path, templates: &[Template], num_classes: usize) -> Result<()> {
    let mut entries = Vec::new();
    for t in templates {
        let cloud = PathBuf::from(format!("{}.xyz", t.id));
        let boxes = PathBuf::from(format!("{}.boxes.json", t.id));
        SensorPointCloud::new(t.cloud.clone()).write_xyz(&dir.join(&cloud))?;
        write_boxes(&dir.join(&boxes), &t.boxes)?;
        entries.push(LibraryEntry { id: t.id.clone(), cloud, boxes });
    }
    write_json(&dir.join(LIBRARY_MANIFEST), &LibraryManifest { num_classes, templates: entries })
}

pub fn read_library(dir: &Path) -> Result<(usize, Vec<Template>)> {
    let m: LibraryManifest = read_json(&dir.join(LIBRARY_MANIFEST))?;
    let templates = m
        .templates
        .iter()
        .map(|e| {
            Ok(Template {
                id: e.id.clone(),
                cloud: SensorPointCloud::read_xyz(&dir.join(&e.cloud))?.points,
                boxes: boxes_from_json(&read_boxes(&dir.join(&e.boxes))?, m.num_classes),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((m.num_classes, templates))
}
