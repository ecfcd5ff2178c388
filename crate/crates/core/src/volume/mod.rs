//! Dense voxel label volumes and the geometry derived from them.
//!
//! Labels are `u16` class ids with `0` meaning "no structure". Voxel
//! `(i, j, k)` covers `[origin + (i, j, k) * spacing, origin + (i+1, j+1, k+1) * spacing)`;
//! a world point belongs to the voxel found by floor indexing.

mod aabb;
pub mod marching_cubes;
mod mesh;

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use aabb::AxisAlignedBox;
pub use mesh::{EdgeReport, TriMesh};

use crate::format::{read_with_header, write_with_header};
use crate::{Error, Point, Result, Vec3};

/// Class id. `0` is free space.
pub type Label = u16;

/// The six face neighbors.
pub const FACE_NEIGHBORS: [[i64; 3]; 6] =
    [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]];

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelLabelVolume {
    dims: [usize; 3],
    spacing: f64,
    origin: Point,
    labels: Vec<Label>,
    class_names: Vec<String>,
}

/// Outcome of [`VoxelLabelVolume::largest_component`].
#[derive(Clone, Debug)]
pub struct ComponentFilter {
    pub volume: VoxelLabelVolume,
    /// `false` when the class had no voxels; the volume is then unchanged.
    pub present: bool,
    pub removed_voxels: usize,
}

impl VoxelLabelVolume {
    pub fn new(
        dims: [usize; 3],
        spacing: f64,
        origin: Point,
        labels: Vec<Label>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidInput(format!("volume dims must be >= 1, got {dims:?}")));
        }
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::InvalidInput(format!("spacing must be positive, got {spacing}")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if labels.len() != n {
            return Err(Error::InvalidInput(format!(
                "expected {n} labels for dims {dims:?}, got {}",
                labels.len()
            )));
        }
        let c = class_names.len();
        if let Some(bad) = labels.iter().find(|&&l| l as usize > c) {
            return Err(Error::InvalidInput(format!("label {bad} exceeds class count {c}")));
        }
        Ok(Self { dims, spacing, origin, labels, class_names })
    }

    /// All-zero volume.
    pub fn empty(dims: [usize; 3], spacing: f64, origin: Point, class_names: Vec<String>) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims, spacing, origin, vec![0; n], class_names)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn origin(&self) -> Point {
        self.origin
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.iter().all(|&l| l == 0)
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let j = (idx / self.dims[0]) % self.dims[1];
        let k = idx / (self.dims[0] * self.dims[1]);
        [i, j, k]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> Label {
        self.labels[self.index(i, j, k)]
    }

    /// Label at signed integer coordinates; `0` outside the grid.
    #[inline]
    pub fn get_or_zero(&self, i: i64, j: i64, k: i64) -> Label {
        if i < 0 || j < 0 || k < 0 {
            return 0;
        }
        let (i, j, k) = (i as usize, j as usize, k as usize);
        if i >= self.dims[0] || j >= self.dims[1] || k >= self.dims[2] {
            return 0;
        }
        self.get(i, j, k)
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, label: Label) {
        debug_assert!(label as usize <= self.class_names.len());
        let idx = self.index(i, j, k);
        self.labels[idx] = label;
    }

    /// Integer voxel coordinates containing `p` (floor indexing), possibly
    /// outside the grid.
    #[inline]
    pub fn voxel_of(&self, p: &Point) -> [i64; 3] {
        let r = (p - self.origin) / self.spacing;
        [r.x.floor() as i64, r.y.floor() as i64, r.z.floor() as i64]
    }

    /// Label of the voxel containing `p`; `0` outside the grid.
    #[inline]
    pub fn label_at(&self, p: &Point) -> Label {
        let [i, j, k] = self.voxel_of(p);
        self.get_or_zero(i, j, k)
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Point {
        self.origin + Vec3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * self.spacing
    }

    pub fn voxel_box(&self, i: i64, j: i64, k: i64) -> AxisAlignedBox {
        let min = self.origin + Vec3::new(i as f64, j as f64, k as f64) * self.spacing;
        AxisAlignedBox { min, max: min + Vec3::repeat(self.spacing) }
    }

    /// World box covered by the whole grid.
    pub fn bounds(&self) -> AxisAlignedBox {
        let ext = Vec3::new(self.dims[0] as f64, self.dims[1] as f64, self.dims[2] as f64) * self.spacing;
        AxisAlignedBox { min: self.origin, max: self.origin + ext }
    }

    /// Voxel count per label, indexed by label (length `C + 1`).
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_names.len() + 1];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    pub fn count(&self, class_id: Label) -> usize {
        self.labels.iter().filter(|&&l| l == class_id).count()
    }

    /// Volume grown by one zero-labelled voxel on every side; the origin
    /// moves by `-spacing` per axis so world positions are unchanged.
    pub fn pad_boundary(&self) -> VoxelLabelVolume {
        let [nx, ny, nz] = self.dims;
        let dims = [nx + 2, ny + 2, nz + 2];
        let mut labels = vec![0; dims[0] * dims[1] * dims[2]];
        for k in 0..nz {
            for j in 0..ny {
                let src = self.index(0, j, k);
                let dst = 1 + dims[0] * ((j + 1) + dims[1] * (k + 1));
                labels[dst..dst + nx].copy_from_slice(&self.labels[src..src + nx]);
            }
        }
        VoxelLabelVolume {
            dims,
            spacing: self.spacing,
            origin: self.origin - Vec3::repeat(self.spacing),
            labels,
            class_names: self.class_names.clone(),
        }
    }

    /// 6-connected components of the voxels satisfying `member`, as lists of
    /// linear indices in discovery order (seeds in increasing index order).
    pub fn components(&self, member: impl Fn(Label) -> bool) -> Vec<Vec<usize>> {
        let mut seen = vec![false; self.labels.len()];
        let mut out = Vec::new();
        let mut queue = VecDeque::new();
        for seed in 0..self.labels.len() {
            if seen[seed] || !member(self.labels[seed]) {
                continue;
            }
            seen[seed] = true;
            queue.push_back(seed);
            let mut comp = Vec::new();
            while let Some(idx) = queue.pop_front() {
                comp.push(idx);
                let [i, j, k] = self.coords(idx);
                for d in FACE_NEIGHBORS {
                    let (a, b, c) = (i as i64 + d[0], j as i64 + d[1], k as i64 + d[2]);
                    if a < 0 || b < 0 || c < 0 {
                        continue;
                    }
                    let (a, b, c) = (a as usize, b as usize, c as usize);
                    if a >= self.dims[0] || b >= self.dims[1] || c >= self.dims[2] {
                        continue;
                    }
                    let n = self.index(a, b, c);
                    if !seen[n] && member(self.labels[n]) {
                        seen[n] = true;
                        queue.push_back(n);
                    }
                }
            }
            out.push(comp);
        }
        out
    }

    /// Keeps only the largest 6-connected component of `class_id`; other
    /// voxels of that class become `0`. Ties go to the component whose
    /// lowest linear index is smallest.
    pub fn largest_component(&self, class_id: Label) -> ComponentFilter {
        let comps = self.components(|l| l == class_id);
        if comps.is_empty() {
            return ComponentFilter { volume: self.clone(), present: false, removed_voxels: 0 };
        }
        let mut best = 0;
        for (n, c) in comps.iter().enumerate() {
            if c.len() > comps[best].len() {
                best = n;
            }
        }
        let mut volume = self.clone();
        let mut removed = 0;
        for (n, comp) in comps.iter().enumerate() {
            if n == best {
                continue;
            }
            for &idx in comp {
                volume.labels[idx] = 0;
                removed += 1;
            }
        }
        ComponentFilter { volume, present: true, removed_voxels: removed }
    }

    /// Voxel-index bounds `(lo, hi)` inclusive of all voxels of the class.
    pub fn index_bounds(&self, class_id: Label) -> Option<([usize; 3], [usize; 3])> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for (idx, &l) in self.labels.iter().enumerate() {
            if l != class_id {
                continue;
            }
            any = true;
            let c = self.coords(idx);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
        any.then_some((lo, hi))
    }

    /// Tight world box over the outer corners of all voxels of the class.
    pub fn aabb_of_class(&self, class_id: Label) -> Option<AxisAlignedBox> {
        let (lo, hi) = self.index_bounds(class_id)?;
        let s = self.spacing;
        let min = self.origin + Vec3::new(lo[0] as f64, lo[1] as f64, lo[2] as f64) * s;
        let max = self.origin + Vec3::new(hi[0] as f64 + 1.0, hi[1] as f64 + 1.0, hi[2] as f64 + 1.0) * s;
        Some(AxisAlignedBox { min, max })
    }

    /// Tight world box over every labelled (non-zero) voxel.
    pub fn aabb_of_foreground(&self) -> Option<AxisAlignedBox> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for (idx, &l) in self.labels.iter().enumerate() {
            if l == 0 {
                continue;
            }
            any = true;
            let c = self.coords(idx);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
        if !any {
            return None;
        }
        let s = self.spacing;
        Some(AxisAlignedBox {
            min: self.origin + Vec3::new(lo[0] as f64, lo[1] as f64, lo[2] as f64) * s,
            max: self.origin + Vec3::new(hi[0] as f64 + 1.0, hi[1] as f64 + 1.0, hi[2] as f64 + 1.0) * s,
        })
    }

    /// Exact signed distance from `p` to the voxel-face surface of the
    /// class, negative inside. Exhaustive scan over the grid; meant as a
    /// reference for tests and spot checks, not for bulk queries.
    pub fn signed_distance_oracle(&self, p: &Point, class_id: Label) -> Option<f64> {
        if !self.labels.iter().any(|&l| l == class_id) {
            return None;
        }
        let inside = self.label_at(p) == class_id;
        let mut best = f64::INFINITY;
        for (idx, &l) in self.labels.iter().enumerate() {
            if (l == class_id) == inside {
                continue;
            }
            let [i, j, k] = self.coords(idx);
            let b = self.voxel_box(i as i64, j as i64, k as i64);
            best = best.min(point_box_distance(p, &b));
        }
        if inside {
            // The region beyond the grid is free space as well.
            let g = self.bounds();
            for a in 0..3 {
                best = best.min(p[a] - g.min[a]).min(g.max[a] - p[a]);
            }
            Some(-best)
        } else {
            Some(best)
        }
    }

    /// Closed surface of one class via marching cubes on its indicator at
    /// iso-level 0.5. Pad the volume first if the class touches the grid
    /// boundary and closure matters.
    pub fn extract_mesh(&self, class_id: Label) -> TriMesh {
        let mut mesh = marching_cubes::extract(self, |l| l == class_id);
        mesh.class_id = class_id;
        mesh
    }

    pub fn write_olv(&self, path: &Path) -> Result<()> {
        let header = OlvHeader {
            format: "olv".into(),
            version: 1,
            dims: self.dims,
            spacing: self.spacing,
            origin: [self.origin.x, self.origin.y, self.origin.z],
            class_names: self.class_names.clone(),
            dtype: "u16le".into(),
            order: "x-fastest".into(),
        };
        let payload: Vec<u8> = self.labels.iter().flat_map(|l| l.to_le_bytes()).collect();
        write_with_header(path, &header, &payload)
    }

    pub fn read_olv(path: &Path) -> Result<Self> {
        let (h, payload): (OlvHeader, _) = read_with_header(path)?;
        if h.format != "olv" || h.dtype != "u16le" || h.order != "x-fastest" {
            return Err(Error::format(path, "unsupported olv layout"));
        }
        let n: usize = h.dims.iter().product();
        if payload.len() != 2 * n {
            return Err(Error::format(
                path,
                format!("expected {} payload bytes, found {}", 2 * n, payload.len()),
            ));
        }
        let labels = payload.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
        let origin = Point::new(h.origin[0], h.origin[1], h.origin[2]);
        Self::new(h.dims, h.spacing, origin, labels, h.class_names)
            .map_err(|e| Error::format(path, e.to_string()))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct OlvHeader {
    format: String,
    version: u32,
    dims: [usize; 3],
    spacing: f64,
    origin: [f64; 3],
    class_names: Vec<String>,
    dtype: String,
    order: String,
}

/// Euclidean distance from a point to a closed box (0 inside).
pub fn point_box_distance(p: &Point, b: &AxisAlignedBox) -> f64 {
    let mut s = 0.0;
    for a in 0..3 {
        let d = (b.min[a] - p[a]).max(p[a] - b.max[a]).max(0.0);
        s += d * d;
    }
    s.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn names(c: usize) -> Vec<String> {
        (1..=c).map(|i| format!("s{i}")).collect()
    }

    fn random_volume(n: usize, c: u16, fill: f64, seed: u64) -> VoxelLabelVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = (0..n * n * n)
            .map(|_| if rng.random::<f64>() < fill { rng.random_range(1..=c) } else { 0 })
            .collect();
        VoxelLabelVolume::new([n; 3], 0.01, Point::origin(), labels, names(c as usize)).unwrap()
    }

    #[test]
    fn rejects_labels_above_class_count() {
        let r = VoxelLabelVolume::new([1, 1, 1], 1.0, Point::origin(), vec![3], names(2));
        assert!(r.is_err());
        assert!(VoxelLabelVolume::new([0, 1, 1], 1.0, Point::origin(), vec![], names(1)).is_err());
        assert!(VoxelLabelVolume::new([1, 1, 1], 0.0, Point::origin(), vec![0], names(1)).is_err());
    }

    #[test]
    fn pad_single_voxel() {
        let v = VoxelLabelVolume::new([1, 1, 1], 0.5, Point::origin(), vec![2], names(2)).unwrap();
        let p = v.pad_boundary();
        assert_eq!(p.dims(), [3, 3, 3]);
        assert_eq!(p.get(1, 1, 1), 2);
        assert_eq!(p.count(0), 26);
        assert_eq!(p.origin(), Point::new(-0.5, -0.5, -0.5));
    }

    #[test]
    fn pad_all_zero() {
        let v = VoxelLabelVolume::empty([2, 2, 2], 1.0, Point::origin(), names(1)).unwrap();
        let p = v.pad_boundary();
        assert_eq!(p.dims(), [4, 4, 4]);
        assert!(p.is_empty());
    }

    #[test]
    fn pad_preserves_interior_elementwise() {
        let v = random_volume(8, 3, 0.5, 11);
        let p = v.pad_boundary();
        for k in 0..10 {
            for j in 0..10 {
                for i in 0..10 {
                    let interior = (1..9).contains(&i) && (1..9).contains(&j) && (1..9).contains(&k);
                    let expected = if interior { v.get(i - 1, j - 1, k - 1) } else { 0 };
                    assert_eq!(p.get(i, j, k), expected);
                }
            }
        }
    }

    #[test]
    fn corner_contact_is_not_connected() {
        let mut v = VoxelLabelVolume::empty([2, 2, 2], 1.0, Point::origin(), names(1)).unwrap();
        v.set(0, 0, 0, 1);
        v.set(1, 1, 1, 1);
        let r = v.largest_component(1);
        assert!(r.present);
        assert_eq!(r.volume.count(1), 1);
        // tie broken towards the lowest seed index
        assert_eq!(r.volume.get(0, 0, 0), 1);
        assert_eq!(r.removed_voxels, 1);
    }

    #[test]
    fn single_blob_unchanged() {
        let mut v = VoxelLabelVolume::empty([4, 4, 4], 1.0, Point::origin(), names(1)).unwrap();
        for i in 1..3 {
            for j in 0..3 {
                v.set(i, j, 2, 1);
            }
        }
        let r = v.largest_component(1);
        assert_eq!(r.volume, v);
        assert_eq!(r.removed_voxels, 0);
    }

    #[test]
    fn absent_class_flagged() {
        let v = random_volume(4, 1, 0.3, 2);
        let r = v.largest_component(7);
        assert!(!r.present);
        assert_eq!(r.volume, v);
    }

    /// Union-find over face adjacency, independent of the BFS above.
    fn union_find_largest(v: &VoxelLabelVolume, class: Label) -> Vec<bool> {
        fn find(p: &mut Vec<usize>, x: usize) -> usize {
            let mut r = x;
            while p[r] != r {
                r = p[r];
            }
            let mut x = x;
            while p[x] != r {
                let nx = p[x];
                p[x] = r;
                x = nx;
            }
            r
        }
        let n = v.len();
        let mut parent: Vec<usize> = (0..n).collect();
        let [nx, ny, nz] = v.dims();
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    if v.get(i, j, k) != class {
                        continue;
                    }
                    let a = v.index(i, j, k);
                    for (di, dj, dk) in [(1, 0, 0), (0, 1, 0), (0, 0, 1)] {
                        let (b0, b1, b2) = (i + di, j + dj, k + dk);
                        if b0 < nx && b1 < ny && b2 < nz && v.get(b0, b1, b2) == class {
                            let ra = find(&mut parent, a);
                            let rb = find(&mut parent, v.index(b0, b1, b2));
                            parent[ra.max(rb)] = ra.min(rb);
                        }
                    }
                }
            }
        }
        let mut size = vec![0usize; n];
        let mut min_idx = vec![usize::MAX; n];
        for idx in 0..n {
            if v.labels()[idx] == class {
                let r = find(&mut parent, idx);
                size[r] += 1;
                min_idx[r] = min_idx[r].min(idx);
            }
        }
        let best = (0..n)
            .filter(|&r| size[r] > 0)
            .max_by(|&a, &b| size[a].cmp(&size[b]).then(min_idx[b].cmp(&min_idx[a])))
            .unwrap();
        (0..n)
            .map(|idx| v.labels()[idx] == class && find(&mut parent, idx) == best)
            .collect()
    }

    #[test]
    fn largest_component_matches_union_find() {
        for seed in 0..8 {
            let v = random_volume(12, 1, 0.35, 100 + seed);
            let keep = union_find_largest(&v, 1);
            let r = v.largest_component(1);
            for idx in 0..v.len() {
                assert_eq!(r.volume.labels()[idx] == 1, keep[idx], "seed {seed} voxel {idx}");
            }
        }
    }

    #[test]
    fn largest_component_is_idempotent() {
        let v = random_volume(10, 2, 0.4, 5);
        let once = v.largest_component(2).volume;
        let twice = once.largest_component(2).volume;
        assert_eq!(once, twice);
    }

    #[test]
    fn aabb_single_voxel() {
        let mut v = VoxelLabelVolume::empty([4, 4, 4], 0.01, Point::origin(), names(1)).unwrap();
        v.set(0, 0, 0, 1);
        let b = v.aabb_of_class(1).unwrap();
        assert_eq!(b.min, Point::origin());
        assert!((b.max - Point::new(0.01, 0.01, 0.01)).norm() < 1e-15);
        v.set(3, 0, 0, 1);
        let b = v.aabb_of_class(1).unwrap();
        assert!((b.extent().x - 0.04).abs() < 1e-15);
        assert!(v.aabb_of_class(0 + 2).is_none());
    }

    #[test]
    fn aabb_matches_linear_scan() {
        let v = random_volume(9, 3, 0.05, 77);
        for c in 1..=3 {
            let b = v.aabb_of_class(c).unwrap();
            let mut min = Point::new(f64::MAX, f64::MAX, f64::MAX);
            let mut max = Point::new(f64::MIN, f64::MIN, f64::MIN);
            for idx in 0..v.len() {
                if v.labels()[idx] == c {
                    let [i, j, k] = v.coords(idx);
                    let vb = v.voxel_box(i as i64, j as i64, k as i64);
                    for a in 0..3 {
                        min[a] = min[a].min(vb.min[a]);
                        max[a] = max[a].max(vb.max[a]);
                    }
                    assert!(b.contains_point(&v.voxel_center(i, j, k)));
                }
            }
            assert!((b.min - min).norm() < 1e-12 && (b.max - max).norm() < 1e-12);
        }
    }

    #[test]
    fn oracle_center_of_voxel() {
        let mut v = VoxelLabelVolume::empty([5, 5, 5], 0.01, Point::origin(), names(1)).unwrap();
        v.set(2, 2, 2, 1);
        let d = v.signed_distance_oracle(&v.voxel_center(2, 2, 2), 1).unwrap();
        assert!((d + 0.005).abs() < 1e-12);
        let on_face = Point::new(0.03, 0.025, 0.025);
        assert!(v.signed_distance_oracle(&on_face, 1).unwrap().abs() <= 0.005);
        assert!(v.signed_distance_oracle(&on_face, 2).is_none());
    }

    #[test]
    fn oracle_sign_agrees_with_sphere() {
        let n = 16;
        let s = 0.01;
        let center = Point::new(0.08, 0.08, 0.08);
        let r = 0.05;
        let mut v = VoxelLabelVolume::empty([n; 3], s, Point::origin(), names(1)).unwrap();
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    if (v.voxel_center(i, j, k) - center).norm() <= r {
                        v.set(i, j, k, 1);
                    }
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut checked = 0;
        while checked < 100 {
            let p = Point::new(
                rng.random_range(0.0..0.16),
                rng.random_range(0.0..0.16),
                rng.random_range(0.0..0.16),
            );
            let analytic = (p - center).norm() - r;
            if analytic.abs() <= s {
                continue;
            }
            let d = v.signed_distance_oracle(&p, 1).unwrap();
            assert_eq!(d < 0.0, analytic < 0.0, "p={p:?} oracle={d} analytic={analytic}");
            checked += 1;
        }
    }

    #[test]
    fn olv_round_trip() {
        let v = random_volume(5, 4, 0.5, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.olv");
        v.write_olv(&path).unwrap();
        let back = VoxelLabelVolume::read_olv(&path).unwrap();
        assert_eq!(back, v);
        let bytes = std::fs::read(&path).unwrap();
        let split = bytes.iter().position(|&b| b == b'\n').unwrap();
        assert_eq!(bytes.len() - split - 1, 2 * 125);
    }
}
