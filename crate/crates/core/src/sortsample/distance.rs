//! Signed distance to one class's voxel-face surface on a local window of
//! the grid, sampled at voxel centers and trilinearly interpolated.

use crate::volume::{AxisAlignedBox, Label, VoxelLabelVolume};
use crate::{Point, Vec3};

/// Window of voxel-center signed distances (negative inside the class).
/// Voxels of the window beyond the volume count as free space.
#[derive(Clone, Debug)]
pub struct DistanceField {
    lo: [i64; 3],
    dims: [usize; 3],
    spacing: f64,
    origin: Point,
    values: Vec<f64>,
}

impl DistanceField {
    /// Field covering `region` plus `margin` voxels on each side.
    pub fn build(volume: &VoxelLabelVolume, class_id: Label, region: &AxisAlignedBox, margin: i64) -> Self {
        let a = volume.voxel_of(&region.min);
        let b = volume.voxel_of(&region.max);
        let lo = [a[0] - margin, a[1] - margin, a[2] - margin];
        let hi = [b[0] + margin, b[1] + margin, b[2] + margin];
        let dims = [0, 1, 2].map(|i| (hi[i] - lo[i] + 1) as usize);
        let n = dims[0] * dims[1] * dims[2];
        let s = volume.spacing();

        let mut member = Vec::with_capacity(n);
        for k in 0..dims[2] as i64 {
            for j in 0..dims[1] as i64 {
                for i in 0..dims[0] as i64 {
                    member.push(volume.get_or_zero(lo[0] + i, lo[1] + j, lo[2] + k) == class_id);
                }
            }
        }
        let to_class = squared_box_distance(&member, dims, s, true);
        let to_other = squared_box_distance(&member, dims, s, false);
        let values = to_class.iter().zip(&to_other).map(|(o, i)| o.sqrt() - i.sqrt()).collect();
        Self { lo, dims, spacing: s, origin: volume.origin(), values }
    }

    fn center_value(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[i + self.dims[0] * (j + self.dims[1] * k)]
    }

    /// Trilinear interpolation of the center samples; positions outside
    /// the window are clamped onto it.
    pub fn interpolate(&self, p: &Point) -> f64 {
        let r: Vec3 = (p - self.origin) / self.spacing - Vec3::repeat(0.5);
        let mut base = [0usize; 3];
        let mut t = [0.0; 3];
        for a in 0..3 {
            let x = (r[a] - self.lo[a] as f64).clamp(0.0, (self.dims[a] - 1) as f64);
            let c = (x.floor() as usize).min(self.dims[a].saturating_sub(2));
            base[a] = c;
            t[a] = if self.dims[a] > 1 { x - c as f64 } else { 0.0 };
        }
        let mut acc = 0.0;
        for dk in 0..2 {
            for dj in 0..2 {
                for di in 0..2 {
                    let w = [(di, 0), (dj, 1), (dk, 2)]
                        .iter()
                        .map(|&(d, a)| if d == 0 { 1.0 - t[a] } else { t[a] })
                        .product::<f64>();
                    if w != 0.0 {
                        let idx = [base[0] + di, base[1] + dj, base[2] + dk];
                        let idx = [0, 1, 2].map(|a| idx[a].min(self.dims[a] - 1));
                        acc += w * self.center_value(idx[0], idx[1], idx[2]);
                    }
                }
            }
        }
        acc
    }

    /// Signed distance with the sign fixed by the caller's inside test.
    pub fn signed(&self, p: &Point, inside: bool) -> f64 {
        let m = self.interpolate(p).abs();
        if inside {
            -m
        } else {
            m
        }
    }
}

/// Squared distance from each voxel center to the nearest voxel box whose
/// membership equals `sites`; separable because the squared distance to a
/// box splits per axis into `((|d| - 1/2) s)^2` for `d != 0`.
fn squared_box_distance(member: &[bool], dims: [usize; 3], s: f64, sites: bool) -> Vec<f64> {
    let mut f: Vec<f64> = member.iter().map(|&m| if m == sites { 0.0 } else { f64::INFINITY }).collect();
    let cost: Vec<f64> = (0..=dims.iter().copied().max().unwrap_or(1))
        .map(|d| if d == 0 { 0.0 } else { ((d as f64 - 0.5) * s).powi(2) })
        .collect();
    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut line = Vec::new();
    let mut out = Vec::new();
    for axis in 0..3 {
        let len = dims[axis];
        let stride = strides[axis];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for b in 0..dims[others[1]] {
            for a in 0..dims[others[0]] {
                let start = a * strides[others[0]] + b * strides[others[1]];
                line.clear();
                line.extend((0..len).map(|x| f[start + x * stride]));
                out.clear();
                for x in 0..len {
                    let mut best = line[x];
                    let mut d = 1;
                    while d < len && cost[d] < best {
                        if x >= d {
                            best = best.min(line[x - d] + cost[d]);
                        }
                        if x + d < len {
                            best = best.min(line[x + d] + cost[d]);
                        }
                        d += 1;
                    }
                    out.push(best);
                }
                for x in 0..len {
                    f[start + x * stride] = out[x];
                }
            }
        }
    }
    f
}
