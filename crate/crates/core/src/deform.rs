//! 4×4×4 lattice deformation (pose augmentation) and rigid rotations.
//!
//! Rotations take degrees about x, y, z and compose extrinsically in that
//! order, `R = Rz · Ry · Rx`.

use nalgebra::Matrix3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::volume::{AxisAlignedBox, VoxelLabelVolume};
use crate::{Point, Vec3};

pub const LATTICE_SIZE: usize = 4;
/// Longitudinal positions of the four levels as fractions of the extent;
/// the middle two sit roughly at hip and shoulder height.
pub const LEVEL_FRACTIONS: [f64; 4] = [0.0, 0.4, 0.7, 1.0];

pub const OUTER_ROTATION_DEG: [f64; 3] = [15.0, 10.0, 15.0];
pub const INNER_ROTATION_DEG: [f64; 3] = [5.0, 5.0, 2.5];
pub const SCALE_RANGE: [f64; 2] = [0.85, 1.15];
pub const GLOBAL_ROTATION_DEG: f64 = 30.0;

pub fn rotation_xyz(deg: [f64; 3]) -> Matrix3<f64> {
    let [x, y, z] = deg.map(f64::to_radians);
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, x.cos(), -x.sin(), 0.0, x.sin(), x.cos());
    let ry = Matrix3::new(y.cos(), 0.0, y.sin(), 0.0, 1.0, 0.0, -y.sin(), 0.0, y.cos());
    let rz = Matrix3::new(z.cos(), -z.sin(), 0.0, z.sin(), z.cos(), 0.0, 0.0, 0.0, 1.0);
    rz * ry * rx
}

/// Scale then rotation of one lattice level about its own center.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelTransform {
    pub rotation_deg: [f64; 3],
    pub scale: f64,
}

impl LevelTransform {
    pub const IDENTITY: LevelTransform = LevelTransform { rotation_deg: [0.0; 3], scale: 1.0 };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatticeDeformation {
    /// Rest coordinates of the lattice planes per axis; axis 2 is the
    /// longitudinal (level) axis.
    pub axes: [[f64; LATTICE_SIZE]; 3],
    pub levels: [LevelTransform; LATTICE_SIZE],
    /// Displaced control points, index `i + 4j + 16k`.
    pub control_points: Vec<Point>,
}

impl LatticeDeformation {
    /// Lattice spanning `bounds` with the given per-level transforms.
    pub fn from_levels(bounds: &AxisAlignedBox, levels: [LevelTransform; LATTICE_SIZE]) -> Self {
        let axes = rest_axes(bounds);
        let cx = 0.5 * (axes[0][0] + axes[0][3]);
        let cy = 0.5 * (axes[1][0] + axes[1][3]);
        let mut control_points = Vec::with_capacity(LATTICE_SIZE.pow(3));
        for (k, level) in levels.iter().enumerate() {
            let center = Point::new(cx, cy, axes[2][k]);
            let r = rotation_xyz(level.rotation_deg);
            for j in 0..LATTICE_SIZE {
                for i in 0..LATTICE_SIZE {
                    let rest = Point::new(axes[0][i], axes[1][j], axes[2][k]);
                    control_points.push(center + r * ((rest - center) * level.scale));
                }
            }
        }
        Self { axes, levels, control_points }
    }

    pub fn identity(bounds: &AxisAlignedBox) -> Self {
        Self::from_levels(bounds, [LevelTransform::IDENTITY; LATTICE_SIZE])
    }

    /// Lattice with arbitrary control points over the rest grid of `bounds`.
    pub fn from_control_points(bounds: &AxisAlignedBox, f: impl Fn(&Point) -> Point) -> Self {
        let mut d = Self::identity(bounds);
        for p in &mut d.control_points {
            *p = f(p);
        }
        d
    }

    pub fn rest_point(&self, i: usize, j: usize, k: usize) -> Point {
        Point::new(self.axes[0][i], self.axes[1][j], self.axes[2][k])
    }

    pub fn displacement(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.control_points[i + LATTICE_SIZE * (j + LATTICE_SIZE * k)] - self.rest_point(i, j, k)
    }

    /// Trilinear interpolation of control-point displacements. Outside
    /// the hull the weights use the point clamped to the hull, so the
    /// displacement continues constantly.
    pub fn apply(&self, p: &Point) -> Point {
        let mut cell = [0usize; 3];
        let mut t = [0.0f64; 3];
        for a in 0..3 {
            let ax = &self.axes[a];
            let x = p[a].clamp(ax[0], ax[LATTICE_SIZE - 1]);
            let mut c = 0;
            while c + 2 < LATTICE_SIZE && x > ax[c + 1] {
                c += 1;
            }
            let w = ax[c + 1] - ax[c];
            cell[a] = c;
            t[a] = if w > 0.0 { ((x - ax[c]) / w).clamp(0.0, 1.0) } else { 0.0 };
        }
        let mut disp = Vec3::zeros();
        for dk in 0..2 {
            let wk = if dk == 0 { 1.0 - t[2] } else { t[2] };
            for dj in 0..2 {
                let wj = if dj == 0 { 1.0 - t[1] } else { t[1] };
                for di in 0..2 {
                    let wi = if di == 0 { 1.0 - t[0] } else { t[0] };
                    let w = wi * wj * wk;
                    if w != 0.0 {
                        disp += self.displacement(cell[0] + di, cell[1] + dj, cell[2] + dk) * w;
                    }
                }
            }
        }
        p + disp
    }

    pub fn max_displacement(&self) -> f64 {
        let mut m: f64 = 0.0;
        for k in 0..LATTICE_SIZE {
            for j in 0..LATTICE_SIZE {
                for i in 0..LATTICE_SIZE {
                    m = m.max(self.displacement(i, j, k).norm());
                }
            }
        }
        m
    }

    /// Smallest positive spacing between adjacent lattice planes.
    pub fn min_cell_width(&self) -> f64 {
        self.axes
            .iter()
            .flat_map(|ax| ax.windows(2).map(|w| w[1] - w[0]))
            .filter(|&w| w > 0.0)
            .fold(f64::INFINITY, f64::min)
    }
}

fn rest_axes(b: &AxisAlignedBox) -> [[f64; LATTICE_SIZE]; 3] {
    let lateral = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
    let mut axes = [[0.0; LATTICE_SIZE]; 3];
    for a in 0..3 {
        let fr = if a == 2 { LEVEL_FRACTIONS } else { lateral };
        for (i, f) in fr.iter().enumerate() {
            axes[a][i] = b.min[a] + f * (b.max[a] - b.min[a]);
        }
    }
    axes
}

fn symmetric(rng: &mut impl Rng, half: f64) -> f64 {
    if half > 0.0 {
        rng.random_range(-half..=half)
    } else {
        0.0
    }
}

pub fn sample_level_transforms(rng: &mut impl Rng) -> [LevelTransform; LATTICE_SIZE] {
    std::array::from_fn(|k| {
        let bounds = if k == 0 || k == LATTICE_SIZE - 1 { OUTER_ROTATION_DEG } else { INNER_ROTATION_DEG };
        let scale = rng.random_range(SCALE_RANGE[0]..=SCALE_RANGE[1]);
        let rotation_deg = bounds.map(|b| symmetric(rng, b));
        LevelTransform { rotation_deg, scale }
    })
}

pub fn sample_lattice(rng: &mut impl Rng, bounds: &AxisAlignedBox) -> LatticeDeformation {
    LatticeDeformation::from_levels(bounds, sample_level_transforms(rng))
}

pub fn apply_deformation(d: &LatticeDeformation, points: &[Point]) -> Vec<Point> {
    points.iter().map(|p| d.apply(p)).collect()
}

/// Resamples labels by pulling every voxel center through the lattice
/// map with nearest-neighbor lookup, so the output is still a partition
/// with the same class set.
pub fn deform_volume(v: &VoxelLabelVolume, d: &LatticeDeformation) -> VoxelLabelVolume {
    let [nx, ny, nz] = v.dims();
    let mut labels = Vec::with_capacity(v.len());
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                labels.push(v.label_at(&d.apply(&v.voxel_center(i, j, k))));
            }
        }
    }
    VoxelLabelVolume::new(v.dims(), v.spacing(), v.origin(), labels, v.class_names().to_vec())
        .expect("same grid and classes as the input")
}

pub fn sample_rotation_angles(rng: &mut impl Rng) -> [f64; 3] {
    [0; 3].map(|_| symmetric(rng, GLOBAL_ROTATION_DEG))
}

/// One random rotation about the origin applied to every point; returns
/// the matrix so companion point sets can be rotated identically.
pub fn random_rotation(rng: &mut impl Rng, points: &mut [Point]) -> Matrix3<f64> {
    let r = rotation_xyz(sample_rotation_angles(rng));
    for p in points.iter_mut() {
        *p = Point::from(r * p.coords);
    }
    r
}
