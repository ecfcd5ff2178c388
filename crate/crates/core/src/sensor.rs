//! Virtual depth camera, backprojection and point-cloud conditioning.
//!
//! Camera frame: +z looks along the view direction, +x points right and
//! +y down in the image. Depth values are ranges along the unit pixel ray;
//! `0.0` marks pixels without a hit.

use std::path::Path;

use nalgebra::{Isometry3, Matrix3, Rotation3, Translation3, UnitQuaternion};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::format::{read_with_header, write_with_header};
use crate::volume::{AxisAlignedBox, TriMesh};
use crate::{Error, Point, Result, Vec3};

pub const NO_DEPTH: f64 = 0.0;
pub const DISTANCE_RANGE: [f64; 2] = [1.4, 2.6];
pub const LATERAL_RANGE: [f64; 2] = [-0.7, 0.7];
pub const VERTICAL_RANGE: [f64; 2] = [-0.1, 0.3];
pub const MAX_DROP_FRACTION: f64 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub size: usize,
    pub fov_y_deg: f64,
}

impl Default for Intrinsics {
    fn default() -> Self {
        Self { size: 64, fov_y_deg: 60.0 }
    }
}

impl Intrinsics {
    pub fn focal(&self) -> f64 {
        0.5 * self.size as f64 / (0.5 * self.fov_y_deg.to_radians()).tan()
    }

    /// Principal point; pixel centers sit at integer coordinates so the
    /// pixel `(size/2, size/2)` looks straight down the optical axis.
    pub fn principal(&self) -> f64 {
        (self.size / 2) as f64
    }

    pub fn ray(&self, u: usize, v: usize) -> Vec3 {
        let f = self.focal();
        let c = self.principal();
        Vec3::new((u as f64 - c) / f, (v as f64 - c) / f, 1.0).normalize()
    }

    /// Continuous pixel coordinates of a camera-frame point in front of
    /// the camera.
    pub fn project(&self, p: &Point) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        let f = self.focal();
        let c = self.principal();
        Some((f * p.x / p.z + c, f * p.y / p.z + c))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub distance: f64,
    pub lateral: f64,
    pub vertical: f64,
    pub target: Point,
    pub intrinsics: Intrinsics,
}

impl CameraPose {
    /// Straight-on view from the front (−y side) of the body.
    pub fn frontal(target: Point, distance: f64) -> Self {
        Self { distance, lateral: 0.0, vertical: 0.0, target, intrinsics: Intrinsics::default() }
    }

    pub fn sample(rng: &mut impl Rng, target: Point, intrinsics: Intrinsics) -> Self {
        Self {
            distance: rng.random_range(DISTANCE_RANGE[0]..=DISTANCE_RANGE[1]),
            lateral: rng.random_range(LATERAL_RANGE[0]..=LATERAL_RANGE[1]),
            vertical: rng.random_range(VERTICAL_RANGE[0]..=VERTICAL_RANGE[1]),
            target,
            intrinsics,
        }
    }

    pub fn position(&self) -> Point {
        self.target + Vec3::new(self.lateral, -self.distance, self.vertical)
    }

    /// Rigid map from world to camera coordinates.
    pub fn world_to_camera(&self) -> Result<Isometry3<f64>> {
        if !(self.distance > 0.0) {
            return Err(Error::InvalidInput(format!("camera distance must be positive, got {}", self.distance)));
        }
        let eye = self.position();
        let forward = (self.target - eye).normalize();
        let up = Vec3::z() - forward * forward.dot(&Vec3::z());
        if up.norm() < 1e-9 {
            return Err(Error::Degenerate("camera looks along the longitudinal axis".into()));
        }
        let down = -up.normalize();
        let right = down.cross(&forward);
        let rows = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let rot = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(rows));
        let t = -(rot * eye.coords);
        Ok(Isometry3::from_parts(Translation3::from(t), rot))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthImage {
    pub intrinsics: Intrinsics,
    /// Row-major, `v * size + u`.
    pub depth: Vec<f64>,
}

impl DepthImage {
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.depth[v * self.intrinsics.size + u]
    }

    pub fn valid_pixels(&self) -> usize {
        self.depth.iter().filter(|&&d| d != NO_DEPTH).count()
    }

    pub fn is_all_miss(&self) -> bool {
        self.valid_pixels() == 0
    }

    /// JSON intrinsics header followed by little-endian f32 depths.
    pub fn write(&self, path: &Path) -> Result<()> {
        let header = serde_json::json!({
            "format": "depth",
            "intrinsics": self.intrinsics,
            "dtype": "f32le",
        });
        let payload: Vec<u8> = self.depth.iter().flat_map(|&d| (d as f32).to_le_bytes()).collect();
        write_with_header(path, &header, &payload)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let (header, payload) = read_with_header::<serde_json::Value>(path)?;
        let intrinsics: Intrinsics = serde_json::from_value(header["intrinsics"].clone())?;
        let n = intrinsics.size * intrinsics.size;
        if payload.len() != 4 * n {
            return Err(Error::format(path, format!("expected {} payload bytes, got {}", 4 * n, payload.len())));
        }
        let depth = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        Ok(Self { intrinsics, depth })
    }
}

/// Ray–triangle intersection distance (Möller–Trumbore), origin at zero.
fn ray_triangle(dir: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Option<f64> {
    let e1 = b - a;
    let e2 = c - a;
    let pv = dir.cross(&e2);
    let det = e1.dot(&pv);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let tv = -a;
    let u = tv.dot(&pv) * inv;
    if !(-1e-12..=1.0 + 1e-12).contains(&u) {
        return None;
    }
    let qv = tv.cross(&e1);
    let v = dir.dot(&qv) * inv;
    if v < -1e-12 || u + v > 1.0 + 1e-12 {
        return None;
    }
    let t = e2.dot(&qv) * inv;
    (t > 1e-9).then_some(t)
}

/// Nearest-hit range image of a world-space mesh.
pub fn render_depth(mesh: &TriMesh, pose: &CameraPose) -> Result<DepthImage> {
    let k = pose.intrinsics;
    if k.size == 0 || !(k.fov_y_deg > 0.0 && k.fov_y_deg < 180.0) {
        return Err(Error::InvalidInput(format!("invalid intrinsics {k:?}")));
    }
    let iso = pose.world_to_camera()?;
    let n = k.size;
    let mut depth = vec![NO_DEPTH; n * n];
    let rays: Vec<Vec3> = (0..n * n).map(|i| k.ray(i % n, i / n)).collect();
    let cam: Vec<Vec3> = mesh.vertices.iter().map(|p| (iso * p).coords).collect();
    for t in &mesh.triangles {
        let [a, b, c] = t.map(|i| cam[i as usize]);
        if a.z <= 0.0 && b.z <= 0.0 && c.z <= 0.0 {
            continue;
        }
        let (mut u0, mut u1, mut v0, mut v1) = (0usize, n - 1, 0usize, n - 1);
        if a.z > 1e-6 && b.z > 1e-6 && c.z > 1e-6 {
            let proj = [a, b, c].map(|p| k.project(&Point::from(p)).expect("in front"));
            let lo_u = proj.iter().map(|p| p.0).fold(f64::INFINITY, f64::min).floor();
            let hi_u = proj.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max).ceil();
            let lo_v = proj.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).floor();
            let hi_v = proj.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max).ceil();
            if hi_u < 0.0 || hi_v < 0.0 || lo_u > (n - 1) as f64 || lo_v > (n - 1) as f64 {
                continue;
            }
            u0 = lo_u.max(0.0) as usize;
            v0 = lo_v.max(0.0) as usize;
            u1 = (hi_u as usize).min(n - 1);
            v1 = (hi_v as usize).min(n - 1);
        }
        for v in v0..=v1 {
            for u in u0..=u1 {
                if let Some(d) = ray_triangle(&rays[v * n + u], &a, &b, &c) {
                    let slot = &mut depth[v * n + u];
                    if *slot == NO_DEPTH || d < *slot {
                        *slot = d;
                    }
                }
            }
        }
    }
    Ok(DepthImage { intrinsics: k, depth })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SensorPointCloud {
    /// Camera-frame points in meters.
    pub points: Vec<Point>,
    pub seed: Option<u64>,
    pub pose: Option<CameraPose>,
}

impl SensorPointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        Self { points, seed: None, pose: None }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_xyz(&self) -> String {
        self.points.iter().map(|p| format!("{} {} {}\n", p.x, p.y, p.z)).collect()
    }

    pub fn write_xyz(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_xyz()).map_err(|e| Error::io(path, e))
    }

    pub fn read_xyz(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut points = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
            if vals.len() != 3 || vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::format(path, format!("line {}: expected three finite numbers", n + 1)));
            }
            points.push(Point::new(vals[0], vals[1], vals[2]));
        }
        Ok(Self::new(points))
    }
}

pub fn backproject(image: &DepthImage) -> SensorPointCloud {
    let k = image.intrinsics;
    let mut points = Vec::with_capacity(image.valid_pixels());
    for v in 0..k.size {
        for u in 0..k.size {
            let d = image.get(u, v);
            if d != NO_DEPTH {
                points.push(Point::from(k.ray(u, v) * d));
            }
        }
    }
    SensorPointCloud::new(points)
}

/// Range image holding the given camera-frame points, each splatted to its
/// nearest pixel (closest range wins).
pub fn project(points: &[Point], intrinsics: Intrinsics) -> DepthImage {
    let n = intrinsics.size;
    let mut depth = vec![NO_DEPTH; n * n];
    for p in points {
        let Some((u, v)) = intrinsics.project(p) else { continue };
        let (u, v) = (u.round(), v.round());
        if u < 0.0 || v < 0.0 || u >= n as f64 || v >= n as f64 {
            continue;
        }
        let slot = &mut depth[v as usize * n + u as usize];
        let d = p.coords.norm();
        if *slot == NO_DEPTH || d < *slot {
            *slot = d;
        }
    }
    DepthImage { intrinsics, depth }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditioningParams {
    pub cull_distance: f64,
    /// Camera-frame crop box; `None` keeps everything.
    pub crop: Option<AxisAlignedBox>,
    pub target_points: usize,
}

impl Default for ConditioningParams {
    fn default() -> Self {
        Self { cull_distance: 2.5, crop: None, target_points: 1000 }
    }
}

/// Background cull, crop, then a seeded uniform subsample (order kept).
pub fn condition_eval_cloud(
    cloud: &SensorPointCloud,
    params: &ConditioningParams,
    rng: &mut impl Rng,
) -> Result<SensorPointCloud> {
    let kept: Vec<Point> = cloud
        .points
        .iter()
        .filter(|p| p.coords.norm() <= params.cull_distance)
        .filter(|p| params.crop.as_ref().is_none_or(|b| b.contains_point(p)))
        .copied()
        .collect();
    if kept.is_empty() {
        return Err(Error::Degenerate("no points left after cull and crop".into()));
    }
    let points = if kept.len() > params.target_points {
        subset(&kept, params.target_points, rng)
    } else {
        kept
    };
    Ok(SensorPointCloud { points, seed: cloud.seed, pose: cloud.pose })
}

fn subset(points: &[Point], keep: usize, rng: &mut impl Rng) -> Vec<Point> {
    let mut idx = index::sample(rng, points.len(), keep).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| points[i]).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsoNormalization {
    pub center: Point,
    pub scale: f64,
}

impl IsoNormalization {
    pub const IDENTITY: IsoNormalization = IsoNormalization { center: Point::new(0.0, 0.0, 0.0), scale: 1.0 };

    pub fn fit(points: &[Point]) -> Result<Self> {
        let b = AxisAlignedBox::from_points(points.iter())
            .ok_or_else(|| Error::Degenerate("cannot normalize an empty cloud".into()))?;
        let ext = b.extent().max();
        if !(ext > 0.0 && ext.is_finite()) {
            return Err(Error::Degenerate(format!("cloud has extent {ext}")));
        }
        Ok(Self { center: b.center(), scale: 2.0 / ext })
    }

    pub fn apply(&self, p: &Point) -> Point {
        Point::from(((p - self.center) * self.scale).map(|c| c.clamp(-1.0, 1.0)))
    }

    /// Unclamped forward map, for points that may fall outside the cube.
    pub fn apply_unclamped(&self, p: &Point) -> Point {
        Point::from((p - self.center) * self.scale)
    }

    pub fn denormalize(&self, p: &Point) -> Point {
        self.center + p.coords / self.scale
    }
}

pub fn normalize_iso(points: &[Point]) -> Result<(Vec<Point>, IsoNormalization)> {
    let n = IsoNormalization::fit(points)?;
    Ok((points.iter().map(|p| n.apply(p)).collect(), n))
}

pub fn sample_drop_fraction(rng: &mut impl Rng) -> f64 {
    rng.random_range(0.0..MAX_DROP_FRACTION)
}

/// Keeps a uniform subset of `n - round(n f)` points (at least one).
pub fn point_drop_with_fraction(points: &[Point], fraction: f64, rng: &mut impl Rng) -> Vec<Point> {
    let n = points.len();
    if n == 0 {
        return Vec::new();
    }
    let keep = n.saturating_sub((n as f64 * fraction.clamp(0.0, 1.0)).round() as usize).max(1);
    if keep == n {
        return points.to_vec();
    }
    subset(points, keep, rng)
}

pub fn point_drop(points: &[Point], rng: &mut impl Rng) -> Vec<Point> {
    let f = sample_drop_fraction(rng);
    point_drop_with_fraction(points, f, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Camera sitting at the world origin looking down +y with up +z.
    fn origin_pose() -> CameraPose {
        CameraPose::frontal(Point::new(0.0, 2.0, 0.0), 2.0)
    }

    fn square_at(y: f64, half: f64) -> TriMesh {
        TriMesh {
            vertices: vec![
                Point::new(-half, y, -half),
                Point::new(half, y, -half),
                Point::new(half, y, half),
                Point::new(-half, y, half),
            ],
            triangles: vec![[0, 1, 2], [0, 2, 3]],
            class_id: 0,
        }
    }

    fn uv_sphere(center: Point, r: f64, rings: usize, segments: usize) -> TriMesh {
        // poles on the y axis so one vertex faces a camera on that axis
        let mut vertices = vec![center - Vec3::y() * r];
        for i in 1..rings {
            let th = std::f64::consts::PI * i as f64 / rings as f64;
            for j in 0..segments {
                let ph = 2.0 * std::f64::consts::PI * j as f64 / segments as f64;
                vertices.push(center + Vec3::new(th.sin() * ph.cos(), -th.cos(), th.sin() * ph.sin()) * r);
            }
        }
        vertices.push(center + Vec3::y() * r);
        let last = vertices.len() as u32 - 1;
        let ring = |i: usize, j: usize| (1 + (i - 1) * segments + j % segments) as u32;
        let mut triangles = Vec::new();
        for j in 0..segments {
            triangles.push([0, ring(1, j), ring(1, j + 1)]);
            triangles.push([last, ring(rings - 1, j + 1), ring(rings - 1, j)]);
        }
        for i in 1..rings - 1 {
            for j in 0..segments {
                triangles.push([ring(i, j), ring(i + 1, j), ring(i + 1, j + 1)]);
                triangles.push([ring(i, j), ring(i + 1, j + 1), ring(i, j + 1)]);
            }
        }
        TriMesh { vertices, triangles, class_id: 0 }
    }

    #[test]
    fn frontal_pose_is_axis_aligned() {
        let iso = origin_pose().world_to_camera().unwrap();
        let p = iso * Point::new(0.3, 2.0, 0.5);
        assert!((p - Point::new(0.3, -0.5, 2.0)).norm() < 1e-12);
    }

    #[test]
    fn square_center_depth() {
        let img = render_depth(&square_at(2.0, 0.5), &origin_pose()).unwrap();
        assert!((img.get(32, 32) - 2.0).abs() < 1e-6);
        assert!(render_depth(&TriMesh::default(), &origin_pose()).unwrap().is_all_miss());
    }

    #[test]
    fn sphere_min_depth() {
        let sphere = uv_sphere(Point::new(0.0, 2.0, 0.0), 0.5, 48, 96);
        let img = render_depth(&sphere, &origin_pose()).unwrap();
        let min = img.depth.iter().copied().filter(|&d| d != NO_DEPTH).fold(f64::INFINITY, f64::min);
        let pixel = 1.5 / img.intrinsics.focal();
        assert!((min - 1.5).abs() <= pixel, "{min}");
        // points land on the surface up to tessellation error
        let iso = origin_pose().world_to_camera().unwrap();
        for p in backproject(&img).points {
            let w = iso.inverse() * p;
            assert!(((w - Point::new(0.0, 2.0, 0.0)).norm() - 0.5).abs() < 0.5 * (1.0 - (std::f64::consts::PI / 48.0).cos()) + 1e-9);
        }
    }

    #[test]
    fn center_pixel_backprojects_to_axis() {
        let mut img = DepthImage { intrinsics: Intrinsics::default(), depth: vec![NO_DEPTH; 64 * 64] };
        assert!(backproject(&img).is_empty());
        img.depth[32 * 64 + 32] = 2.0;
        let c = backproject(&img);
        assert_eq!(c.points, vec![Point::new(0.0, 0.0, 2.0)]);
    }

    #[test]
    fn project_inverts_backproject() {
        let pose = CameraPose::sample(&mut ChaCha8Rng::seed_from_u64(9), Point::new(0.0, 0.0, 0.0), Intrinsics::default());
        let sphere = uv_sphere(Point::new(0.1, 0.0, 0.2), 0.4, 24, 48);
        let img = render_depth(&sphere, &pose).unwrap();
        assert!(img.valid_pixels() > 50);
        let back = project(&backproject(&img).points, img.intrinsics);
        for (a, b) in img.depth.iter().zip(&back.depth) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn depth_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = render_depth(&square_at(2.0, 0.5), &origin_pose()).unwrap();
        let path = dir.path().join("d.depth");
        img.write(&path).unwrap();
        let back = DepthImage::read(&path).unwrap();
        for (a, b) in img.depth.iter().zip(&back.depth) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn conditioning_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let far = SensorPointCloud::new(vec![Point::new(0.0, 0.0, 3.0); 10]);
        assert!(condition_eval_cloud(&far, &ConditioningParams::default(), &mut rng).is_err());

        let small = SensorPointCloud::new((0..500).map(|i| Point::new(0.0, 0.0, 1.0 + i as f64 * 1e-3)).collect());
        let out = condition_eval_cloud(&small, &ConditioningParams::default(), &mut rng).unwrap();
        assert_eq!(out.points, small.points);

        let big = SensorPointCloud::new((0..5000).map(|i| Point::new(i as f64 * 1e-4, 0.0, 2.0)).collect());
        let a = condition_eval_cloud(&big, &ConditioningParams::default(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = condition_eval_cloud(&big, &ConditioningParams::default(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.len(), 1000);
        assert_eq!(a.points, b.points);
        assert!(a.points.iter().all(|p| big.points.contains(p)));
    }

    #[test]
    fn normalization_examples() {
        let pts = vec![Point::new(0.0, 0.0, 0.0), Point::new(2.0, 1.0, 1.0)];
        let (out, n) = normalize_iso(&pts).unwrap();
        assert_eq!(n.scale, 1.0);
        assert_eq!(out[0], Point::new(-1.0, -0.5, -0.5));
        assert_eq!(out[1], Point::new(1.0, 0.5, 0.5));
        let sym = vec![Point::new(-1.0, -0.3, 0.2), Point::new(1.0, 0.3, -0.2)];
        assert_eq!(normalize_iso(&sym).unwrap().1, IsoNormalization::IDENTITY);
        assert!(normalize_iso(&[Point::new(1.0, 1.0, 1.0); 3]).is_err());
    }

    #[test]
    fn drop_examples() {
        let pts: Vec<Point> = (0..1000).map(|i| Point::new(i as f64, 0.0, 0.0)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(point_drop_with_fraction(&pts, 0.0, &mut rng), pts);
        assert_eq!(point_drop_with_fraction(&pts, 0.7, &mut rng).len(), 300);
        assert_eq!(point_drop_with_fraction(&pts[..1], 0.7, &mut rng).len(), 1);
    }

    #[test]
    fn survivor_fraction_is_uniform() {
        let pts: Vec<Point> = (0..1000).map(|i| Point::new(i as f64, 0.0, 0.0)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let trials = 10_000;
        let mut fr: Vec<f64> = (0..trials).map(|_| point_drop(&pts, &mut rng).len() as f64 / 1000.0).collect();
        fr.sort_by(f64::total_cmp);
        let cdf = |x: f64| ((x - 0.3) / 0.7).clamp(0.0, 1.0);
        let d = fr
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let lo = i as f64 / trials as f64;
                let hi = (i + 1) as f64 / trials as f64;
                (cdf(x) - lo).abs().max((hi - cdf(x)).abs())
            })
            .fold(0.0, f64::max);
        // critical value at alpha = 0.01, plus the 1/1000 rounding grid
        assert!(d < 1.628 / (trials as f64).sqrt() + 1e-3 / 0.7, "KS statistic {d}");
    }

    proptest! {
        #[test]
        fn normalize_round_trip(pts in prop::collection::vec(prop::array::uniform3(-3.0f64..3.0), 2..50)) {
            let pts: Vec<Point> = pts.iter().map(|a| Point::new(a[0], a[1], a[2])).collect();
            prop_assume!(AxisAlignedBox::from_points(pts.iter()).unwrap().extent().max() > 1e-6);
            let (out, n) = normalize_iso(&pts).unwrap();
            let mut maxabs: f64 = 0.0;
            for (p, q) in pts.iter().zip(&out) {
                prop_assert!(q.coords.amax() <= 1.0);
                maxabs = maxabs.max(q.coords.amax());
                prop_assert!((n.denormalize(q) - p).norm() < 1e-9);
            }
            prop_assert!((maxabs - 1.0).abs() < 1e-12);
            let d0 = (pts[0] - pts[1]).norm();
            prop_assert!(((out[0] - out[1]).norm() - d0 * n.scale).abs() < 1e-9);
        }
    }
}
