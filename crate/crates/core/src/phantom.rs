//! Procedural label volumes: a superellipsoid body envelope holding `K`
//! structures built from ellipsoids, capsules and tubes.
//!
//! Coordinates: x is lateral, y is anterior-posterior (the front of the
//! body faces −y), z is the longitudinal axis. The grid is centred on the
//! world origin.
//!
//! Structure placement is keyed to a `layout_seed` shared by all phantoms
//! of a dataset, so structure `k` sits at roughly the same place relative
//! to the envelope in every body; the per-phantom `seed` jitters shapes,
//! sizes and positions. Writes are first-writer-wins, which keeps the
//! labels a partition.

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deform::rotation_xyz;
use crate::volume::{Label, TriMesh, VoxelLabelVolume};
use crate::{Error, Point, Result, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveKind {
    Ellipsoid,
    Capsule,
    Tube,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Packing {
    /// Structures `1..K` are organs inside the envelope and label `K` fills
    /// the rest of the envelope, so every organ is surrounded by tissue.
    Touching,
    /// Structures float in free space with at least one voxel of gap.
    Separated,
    /// `K` concentric ellipsoidal shells, structure 1 innermost.
    Nested,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeSpec {
    pub semi_axes_min: [f64; 3],
    pub semi_axes_max: [f64; 3],
    /// Superellipsoid exponent (2 is an ellipsoid, larger is boxier).
    pub exponent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeRanges {
    pub ellipsoid_semi_axis: [f64; 2],
    pub capsule_radius: [f64; 2],
    pub capsule_length: [f64; 2],
    pub tube_radius: [f64; 2],
    pub tube_length: [f64; 2],
    /// Innermost semi-axis for [`Packing::Nested`].
    pub nested_inner: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    pub layout_seed: u64,
    pub num_structures: usize,
    pub dims: [usize; 3],
    pub spacing: f64,
    pub envelope: EnvelopeSpec,
    /// Primitive per structure slot, cycled when shorter than `K`.
    pub primitives: Vec<PrimitiveKind>,
    pub sizes: SizeRanges,
    pub packing: Packing,
    pub max_attempts: usize,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            layout_seed: 7,
            num_structures: 5,
            dims: [32, 24, 100],
            spacing: 0.02,
            envelope: EnvelopeSpec {
                semi_axes_min: [0.15, 0.10, 0.78],
                semi_axes_max: [0.21, 0.14, 0.88],
                exponent: 2.5,
            },
            primitives: vec![
                PrimitiveKind::Ellipsoid,
                PrimitiveKind::Capsule,
                PrimitiveKind::Ellipsoid,
                PrimitiveKind::Tube,
            ],
            sizes: SizeRanges {
                ellipsoid_semi_axis: [0.05, 0.085],
                capsule_radius: [0.035, 0.05],
                capsule_length: [0.12, 0.25],
                tube_radius: [0.02, 0.03],
                tube_length: [0.30, 0.50],
                nested_inner: [0.04, 0.05],
            },
            packing: Packing::Touching,
            max_attempts: 64,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.num_structures == 0 || self.num_structures > u16::MAX as usize {
            return bad(format!("num_structures must be >= 1, got {}", self.num_structures));
        }
        if self.dims.contains(&0) || !(self.spacing > 0.0) {
            return bad("grid dims must be >= 1 and spacing > 0".into());
        }
        if self.primitives.is_empty() {
            return bad("at least one primitive kind is required".into());
        }
        if self.packing == Packing::Touching && self.num_structures < 2 {
            return bad("touching packing needs at least two structures".into());
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be >= 1".into());
        }
        Ok(())
    }

    pub fn origin(&self) -> Point {
        let half = Vec3::new(self.dims[0] as f64, self.dims[1] as f64, self.dims[2] as f64) * (0.5 * self.spacing);
        Point::origin() - half
    }
}

/// Analytic solid used to voxelize one structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Ellipsoid { center: Point, semi_axes: Vec3, rotation: Matrix3<f64> },
    Capsule { a: Point, b: Point, radius: f64 },
    Tube { a: Point, b: Point, radius: f64 },
}

impl Shape {
    pub fn contains(&self, p: &Point) -> bool {
        match self {
            Shape::Ellipsoid { center, semi_axes, rotation } => {
                let local = rotation.transpose() * (p - center);
                local.component_div(semi_axes).norm_squared() <= 1.0
            }
            Shape::Capsule { a, b, radius } => {
                let ab = b - a;
                let t = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
                (p - (a + ab * t)).norm() <= *radius
            }
            Shape::Tube { a, b, radius } => {
                let ab = b - a;
                let t = (p - a).dot(&ab) / ab.norm_squared();
                (0.0..=1.0).contains(&t) && (p - (a + ab * t)).norm() <= *radius
            }
        }
    }

    pub fn analytic_volume(&self) -> f64 {
        use std::f64::consts::PI;
        match self {
            Shape::Ellipsoid { semi_axes, .. } => 4.0 / 3.0 * PI * semi_axes.x * semi_axes.y * semi_axes.z,
            Shape::Capsule { a, b, radius } => PI * radius * radius * (b - a).norm() + 4.0 / 3.0 * PI * radius.powi(3),
            Shape::Tube { a, b, radius } => PI * radius * radius * (b - a).norm(),
        }
    }
}

/// Generated volume plus the analytic description it was rasterized from.
#[derive(Clone, Debug)]
pub struct Phantom {
    pub volume: VoxelLabelVolume,
    /// Shapes of structures `1..=K` in label order; `None` for the tissue
    /// filler and for nested shells.
    pub shapes: Vec<Option<Shape>>,
    pub envelope_semi_axes: Vec3,
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<VoxelLabelVolume> {
    Ok(generate_phantom_detailed(spec)?.volume)
}

pub fn generate_phantom_detailed(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut last_reason = String::new();
    for _ in 0..spec.max_attempts {
        let attempt = match spec.packing {
            Packing::Nested => build_nested(spec, &mut rng),
            Packing::Touching | Packing::Separated => build_packed(spec, &mut rng),
        };
        match attempt {
            Ok(p) => match check_guarantees(spec, &p.volume) {
                Ok(()) => return Ok(p),
                Err(reason) => last_reason = reason,
            },
            Err(reason) => last_reason = reason,
        }
    }
    Err(Error::Infeasible { attempts: spec.max_attempts, reason: last_reason })
}

fn class_names(spec: &PhantomSpec) -> Vec<String> {
    (1..=spec.num_structures)
        .map(|k| {
            if spec.packing == Packing::Touching && k == spec.num_structures {
                "tissue".to_string()
            } else {
                format!("structure_{k:02}")
            }
        })
        .collect()
}

fn uniform(rng: &mut impl Rng, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.random_range(range[0]..range[1])
    } else {
        range[0]
    }
}

fn in_envelope(p: &Point, semi: &Vec3, exponent: f64) -> bool {
    (p.x / semi.x).abs().powf(exponent) + (p.y / semi.y).abs().powf(exponent) + (p.z / semi.z).abs().powf(exponent)
        <= 1.0
}

/// Voxel indices whose centers fall inside `shape`, scanning only the
/// shape's bounding region.
fn rasterize(volume: &VoxelLabelVolume, shape: &Shape) -> Vec<usize> {
    let (lo, hi) = match shape {
        Shape::Ellipsoid { center, semi_axes, .. } => {
            let r = semi_axes.max();
            (center - Vec3::repeat(r), center + Vec3::repeat(r))
        }
        Shape::Capsule { a, b, radius } | Shape::Tube { a, b, radius } => {
            let lo = Point::new(a.x.min(b.x), a.y.min(b.y), a.z.min(b.z)) - Vec3::repeat(*radius);
            let hi = Point::new(a.x.max(b.x), a.y.max(b.y), a.z.max(b.z)) + Vec3::repeat(*radius);
            (lo, hi)
        }
    };
    let dims = volume.dims();
    let lo_i = volume.voxel_of(&lo);
    let hi_i = volume.voxel_of(&hi);
    let clamp = |v: i64, a: usize| v.clamp(0, dims[a] as i64 - 1) as usize;
    let mut out = Vec::new();
    for k in clamp(lo_i[2], 2)..=clamp(hi_i[2], 2) {
        for j in clamp(lo_i[1], 1)..=clamp(hi_i[1], 1) {
            for i in clamp(lo_i[0], 0)..=clamp(hi_i[0], 0) {
                if shape.contains(&volume.voxel_center(i, j, k)) {
                    out.push(volume.index(i, j, k));
                }
            }
        }
    }
    out
}

fn sample_shape(kind: PrimitiveKind, anchor: Point, sizes: &SizeRanges, rng: &mut impl Rng) -> Shape {
    match kind {
        PrimitiveKind::Ellipsoid => {
            let semi = Vec3::new(
                uniform(rng, sizes.ellipsoid_semi_axis),
                uniform(rng, sizes.ellipsoid_semi_axis),
                uniform(rng, sizes.ellipsoid_semi_axis),
            );
            let angles = [rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0)];
            Shape::Ellipsoid { center: anchor, semi_axes: semi, rotation: rotation_xyz(angles) }
        }
        PrimitiveKind::Capsule | PrimitiveKind::Tube => {
            let (radius, length) = if kind == PrimitiveKind::Capsule {
                (uniform(rng, sizes.capsule_radius), uniform(rng, sizes.capsule_length))
            } else {
                (uniform(rng, sizes.tube_radius), uniform(rng, sizes.tube_length))
            };
            // mostly longitudinal, like limbs of a vessel tree
            let dir = rotation_xyz([rng.random_range(-25.0..25.0), rng.random_range(-25.0..25.0), 0.0]) * Vec3::z();
            let half = dir * (0.5 * length);
            let (a, b) = (anchor - half, anchor + half);
            if kind == PrimitiveKind::Capsule {
                Shape::Capsule { a, b, radius }
            } else {
                Shape::Tube { a, b, radius }
            }
        }
    }
}

/// Anchor of organ slot `k` as fractions of the envelope semi-axes.
fn slot_anchor(layout_seed: u64, k: usize, kind: PrimitiveKind) -> Vec3 {
    let mut rng = ChaCha8Rng::seed_from_u64(layout_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ k as u64);
    let zr = if kind == PrimitiveKind::Tube { 0.3 } else { 0.55 };
    Vec3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.25..0.25), rng.random_range(-zr..zr))
}

fn build_packed(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> std::result::Result<Phantom, String> {
    let names = class_names(spec);
    let mut volume = VoxelLabelVolume::empty(spec.dims, spec.spacing, spec.origin(), names)
        .map_err(|e| e.to_string())?;
    let env = &spec.envelope;
    let semi = Vec3::from_fn(|a, _| uniform(rng, [env.semi_axes_min[a], env.semi_axes_max[a]]));
    let grid = volume.bounds();
    if (0..3).any(|a| semi[a] >= grid.max[a] - spec.spacing) {
        return Err(format!("envelope {semi:?} does not fit the grid"));
    }
    let touching = spec.packing == Packing::Touching;
    let organ_count = if touching { spec.num_structures - 1 } else { spec.num_structures };
    // organs keep one voxel of tissue between them and the skin
    let inner = semi - Vec3::repeat(spec.spacing);
    let mut shapes = Vec::with_capacity(spec.num_structures);

    for slot in 1..=organ_count {
        let kind = spec.primitives[(slot - 1) % spec.primitives.len()];
        let anchor_frac = slot_anchor(spec.layout_seed, slot, kind);
        let mut placed = None;
        for _ in 0..spec.max_attempts {
            let jitter = Vec3::from_fn(|_, _| rng.random_range(-0.06..0.06));
            let anchor = Point::from((anchor_frac + jitter).component_mul(&semi));
            let shape = sample_shape(kind, anchor, &spec.sizes, rng);
            let voxels = rasterize(&volume, &shape);
            if voxels.is_empty() {
                continue;
            }
            let fits = voxels.iter().all(|&idx| {
                let [i, j, k] = volume.coords(idx);
                in_envelope(&volume.voxel_center(i, j, k), &inner, env.exponent)
            });
            if !fits {
                continue;
            }
            if !touching && !isolated(&volume, &voxels) {
                continue;
            }
            let free: Vec<usize> = voxels.iter().copied().filter(|&idx| volume.labels()[idx] == 0).collect();
            if free.len() * 2 < voxels.len() {
                continue;
            }
            placed = Some((shape, free));
            break;
        }
        let (shape, free) = placed.ok_or_else(|| format!("structure {slot} ({kind:?}) could not be placed"))?;
        for idx in free {
            let [i, j, k] = volume.coords(idx);
            volume.set(i, j, k, slot as Label);
        }
        shapes.push(Some(shape));
    }

    if touching {
        let filler = spec.num_structures as Label;
        let [nx, ny, nz] = spec.dims;
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    if volume.get(i, j, k) == 0 && in_envelope(&volume.voxel_center(i, j, k), &semi, env.exponent) {
                        volume.set(i, j, k, filler);
                    }
                }
            }
        }
        shapes.push(None);
    }
    Ok(Phantom { volume, shapes, envelope_semi_axes: semi })
}

/// True when no voxel of `voxels` has a labelled voxel in its 26-neighborhood.
fn isolated(volume: &VoxelLabelVolume, voxels: &[usize]) -> bool {
    voxels.iter().all(|&idx| {
        let [i, j, k] = volume.coords(idx);
        (-1..=1).all(|dk| {
            (-1..=1).all(|dj| {
                (-1..=1).all(|di| volume.get_or_zero(i as i64 + di, j as i64 + dj, k as i64 + dk) == 0)
            })
        })
    })
}

fn build_nested(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> std::result::Result<Phantom, String> {
    let names = class_names(spec);
    let mut volume = VoxelLabelVolume::empty(spec.dims, spec.spacing, spec.origin(), names)
        .map_err(|e| e.to_string())?;
    let inner = Vec3::from_fn(|_, _| uniform(rng, spec.sizes.nested_inner));
    let k_count = spec.num_structures;
    // outermost shell holds the innermost structure's 1.5x box with margin
    let outer_ratio = 3.0;
    let grid = volume.bounds();
    for k in 1..=k_count {
        let ratio = if k_count == 1 { 1.0 } else { 1.0 + (outer_ratio - 1.0) * (k - 1) as f64 / (k_count - 1) as f64 };
        let semi = inner * ratio;
        if (0..3).any(|a| semi[a] >= grid.max[a] - spec.spacing) {
            return Err(format!("nested shell {k} with semi-axes {semi:?} does not fit the grid"));
        }
        let shape = Shape::Ellipsoid { center: Point::origin(), semi_axes: semi, rotation: Matrix3::identity() };
        for idx in rasterize(&volume, &shape) {
            if volume.labels()[idx] == 0 {
                let [i, j, kk] = volume.coords(idx);
                volume.set(i, j, kk, k as Label);
            }
        }
    }
    let shapes = vec![None; k_count];
    Ok(Phantom { volume, shapes, envelope_semi_axes: inner * outer_ratio })
}

/// Packing guarantees that the generator promises for dense layouts.
fn check_guarantees(spec: &PhantomSpec, volume: &VoxelLabelVolume) -> std::result::Result<(), String> {
    let hist = volume.histogram();
    if let Some(missing) = (1..hist.len()).find(|&c| hist[c] == 0) {
        return Err(format!("structure {missing} ended up empty"));
    }
    let dense = matches!(spec.packing, Packing::Touching | Packing::Nested) && spec.num_structures >= 2;
    if !dense {
        return Ok(());
    }
    if !has_face_contact(volume) {
        return Err("no two structures share a voxel face".into());
    }
    if embedded_structures(volume).is_empty() {
        return Err("no structure is embedded (every enlarged box sees free space)".into());
    }
    Ok(())
}

fn has_face_contact(volume: &VoxelLabelVolume) -> bool {
    let [nx, ny, nz] = volume.dims();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let l = volume.get(i, j, k);
                if l == 0 {
                    continue;
                }
                let neighbors = [(i + 1 < nx, i + 1, j, k), (j + 1 < ny, i, j + 1, k), (k + 1 < nz, i, j, k + 1)];
                for (ok, a, b, c) in neighbors {
                    if ok {
                        let m = volume.get(a, b, c);
                        if m != 0 && m != l {
                            return true;
                        }
                    }
                }
            }
        }
    }
    false
}

/// Structures whose 50%-enlarged box touches no free-space voxel and lies
/// inside the grid. Exhaustive scan.
pub fn embedded_structures(volume: &VoxelLabelVolume) -> Vec<Label> {
    let grid = volume.bounds();
    (1..=volume.num_classes() as Label)
        .filter(|&c| {
            let Some(b) = volume.aabb_of_class(c) else { return false };
            let e = b.scaled(1.5);
            if !grid.contains_box(&e) {
                return false;
            }
            free_voxels_in_box(volume, &e) == 0
        })
        .collect()
}

/// Count of label-0 voxels (including those beyond the grid) that overlap
/// `b` with positive volume, i.e. that a uniform draw in `b` can hit.
pub fn free_voxels_in_box(volume: &VoxelLabelVolume, b: &crate::volume::AxisAlignedBox) -> usize {
    let lo = volume.voxel_of(&b.min);
    let hi = volume.voxel_of(&b.max);
    let mut free = 0;
    for k in lo[2]..=hi[2] {
        for j in lo[1]..=hi[1] {
            for i in lo[0]..=hi[0] {
                let v = volume.voxel_box(i, j, k);
                let overlaps = (0..3).all(|a| v.max[a].min(b.max[a]) > v.min[a].max(b.min[a]));
                if overlaps && volume.get_or_zero(i, j, k) == 0 {
                    free += 1;
                }
            }
        }
    }
    free
}

/// Outer body surface: marching cubes over the union of all structures,
/// restricted to its largest 6-connected component.
pub fn extract_skin(volume: &VoxelLabelVolume) -> TriMesh {
    let union: Vec<Label> = volume.labels().iter().map(|&l| u16::from(l > 0)).collect();
    let Ok(binary) = VoxelLabelVolume::new(volume.dims(), volume.spacing(), volume.origin(), union, vec!["body".into()])
    else {
        return TriMesh::default();
    };
    let filtered = binary.largest_component(1);
    if !filtered.present {
        return TriMesh::default();
    }
    let mut mesh = filtered.volume.pad_boundary().extract_mesh(1);
    mesh.class_id = 0;
    mesh
}
