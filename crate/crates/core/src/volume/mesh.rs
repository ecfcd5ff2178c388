use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{AxisAlignedBox, Label};
use crate::{Error, Point, Result, Vec3};

/// Indexed triangle mesh in world coordinates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Point>,
    pub triangles: Vec<[u32; 3]>,
    pub class_id: Label,
}

/// Undirected edge usage counts of a mesh.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EdgeReport {
    pub edges: usize,
    /// Edges used by exactly one triangle.
    pub boundary: usize,
    /// Edges used by more than two triangles.
    pub non_manifold: usize,
    /// Edges whose two uses do not run in opposite directions.
    pub inconsistent: usize,
}

impl EdgeReport {
    pub fn is_closed_manifold(&self) -> bool {
        self.boundary == 0 && self.non_manifold == 0 && self.inconsistent == 0
    }
}

impl TriMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn indices_valid(&self) -> bool {
        let n = self.vertices.len() as u32;
        self.triangles.iter().all(|t| t.iter().all(|&i| i < n))
    }

    pub fn triangle(&self, t: usize) -> [Point; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a as usize], self.vertices[b as usize], self.vertices[c as usize]]
    }

    /// Enclosed volume by the divergence theorem; positive for outward
    /// (counter-clockwise seen from outside) orientation.
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let a = self.vertices[t[0] as usize].coords;
                let b = self.vertices[t[1] as usize].coords;
                let c = self.vertices[t[2] as usize].coords;
                a.dot(&b.cross(&c))
            })
            .sum::<f64>()
            / 6.0
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| {
                let [a, b, c] = self.triangle(t);
                0.5 * (b - a).cross(&(c - a)).norm()
            })
            .sum()
    }

    pub fn edge_report(&self) -> EdgeReport {
        // (lo, hi) -> (uses, net direction)
        let mut edges: HashMap<(u32, u32), (u32, i32)> = HashMap::new();
        for t in &self.triangles {
            for e in 0..3 {
                let (a, b) = (t[e], t[(e + 1) % 3]);
                let key = (a.min(b), a.max(b));
                let entry = edges.entry(key).or_insert((0, 0));
                entry.0 += 1;
                entry.1 += if a < b { 1 } else { -1 };
            }
        }
        let mut r = EdgeReport { edges: edges.len(), boundary: 0, non_manifold: 0, inconsistent: 0 };
        for &(uses, dir) in edges.values() {
            match uses {
                1 => r.boundary += 1,
                2 if dir != 0 => r.inconsistent += 1,
                2 => {}
                _ => r.non_manifold += 1,
            }
        }
        r
    }

    pub fn bounds(&self) -> Option<AxisAlignedBox> {
        AxisAlignedBox::from_points(self.vertices.iter())
    }

    /// Applies `f` to every vertex.
    pub fn map_vertices(&self, f: impl Fn(&Point) -> Point) -> TriMesh {
        TriMesh {
            vertices: self.vertices.iter().map(f).collect(),
            triangles: self.triangles.clone(),
            class_id: self.class_id,
        }
    }

    /// Unsigned distance from `p` to the nearest triangle (brute force).
    pub fn distance_to(&self, p: &Point) -> f64 {
        (0..self.triangles.len())
            .map(|t| {
                let [a, b, c] = self.triangle(t);
                point_triangle_distance(p, &a, &b, &c)
            })
            .fold(f64::INFINITY, f64::min)
    }

    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# class {}", self.class_id);
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
        }
        for t in &self.triangles {
            let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        s
    }

    pub fn to_stl(&self, name: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "solid {name}");
        for t in 0..self.triangles.len() {
            let [a, b, c] = self.triangle(t);
            let n = (b - a).cross(&(c - a));
            let n = if n.norm() > 0.0 { n.normalize() } else { Vec3::zeros() };
            let _ = writeln!(s, "  facet normal {} {} {}", n.x, n.y, n.z);
            let _ = writeln!(s, "    outer loop");
            for v in [a, b, c] {
                let _ = writeln!(s, "      vertex {} {} {}", v.x, v.y, v.z);
            }
            let _ = writeln!(s, "    endloop");
            let _ = writeln!(s, "  endfacet");
        }
        let _ = writeln!(s, "endsolid {name}");
        s
    }

    pub fn write_obj(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_obj()).map_err(|e| Error::io(path, e))
    }

    pub fn write_stl(&self, path: &Path) -> Result<()> {
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("mesh");
        std::fs::write(path, self.to_stl(name)).map_err(|e| Error::io(path, e))
    }
}

/// Closest-point distance between a point and a triangle.
pub fn point_triangle_distance(p: &Point, a: &Point, b: &Point, c: &Point) -> f64 {
    // Ericson, closest point on triangle by Voronoi regions.
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return ap.norm();
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return bp.norm();
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (p - (a + ab * v)).norm();
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return cp.norm();
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (p - (a + ac * w)).norm();
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (p - (b + (c - b) * w)).norm();
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (p - (a + ab * v + ac * w)).norm()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tetra() -> TriMesh {
        TriMesh {
            vertices: vec![
                Point::new(0.0, 0.0, 0.0),
                Point::new(1.0, 0.0, 0.0),
                Point::new(0.0, 1.0, 0.0),
                Point::new(0.0, 0.0, 1.0),
            ],
            triangles: vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]],
            class_id: 1,
        }
    }

    #[test]
    fn tetra_volume_and_closure() {
        let m = tetra();
        assert!((m.signed_volume() - 1.0 / 6.0).abs() < 1e-15);
        assert!(m.edge_report().is_closed_manifold());
        assert_eq!(m.edge_report().edges, 6);
    }

    #[test]
    fn open_mesh_has_boundary() {
        let mut m = tetra();
        m.triangles.pop();
        assert_eq!(m.edge_report().boundary, 3);
    }

    #[test]
    fn point_triangle_distance_regions() {
        let a = Point::new(0.0, 0.0, 0.0);
        let b = Point::new(1.0, 0.0, 0.0);
        let c = Point::new(0.0, 1.0, 0.0);
        assert!((point_triangle_distance(&Point::new(0.2, 0.2, 0.5), &a, &b, &c) - 0.5).abs() < 1e-15);
        assert!((point_triangle_distance(&Point::new(-1.0, 0.0, 0.0), &a, &b, &c) - 1.0).abs() < 1e-15);
        let d = point_triangle_distance(&Point::new(1.0, 1.0, 0.0), &a, &b, &c);
        assert!((d - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn exports_contain_every_face() {
        let m = tetra();
        assert_eq!(m.to_obj().lines().filter(|l| l.starts_with("f ")).count(), 4);
        assert_eq!(m.to_stl("t").matches("facet normal").count(), 4);
    }
}
