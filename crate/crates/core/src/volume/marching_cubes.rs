//! Marching cubes over voxel-center samples.
//!
//! The 256-entry triangle table is built once from the cube topology: on
//! each cube face the iso-contour segments are chosen so that inside
//! corners are separated from each other on ambiguous faces, segments are
//! oriented so the surface normal points from inside to outside, and the
//! resulting boundary loops are fan-triangulated. Adjacent cells see the
//! same face corners and therefore the same segments, which keeps the
//! output closed wherever the indicator is zero on the grid border.

use std::collections::HashMap;
use std::sync::OnceLock;

use super::{Label, TriMesh, VoxelLabelVolume};
use crate::{Point, Vec3};

const CORNERS: [[u8; 3]; 8] =
    [[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0], [0, 0, 1], [1, 0, 1], [0, 1, 1], [1, 1, 1]];

/// Cube edge: endpoint corners and the axis it runs along.
#[derive(Clone, Copy, Debug)]
struct Edge {
    a: usize,
    b: usize,
    axis: usize,
}

struct Topology {
    edges: Vec<Edge>,
    edge_of: [[Option<usize>; 8]; 8],
    /// Each face: outward axis/sign and its four corners in cyclic order.
    faces: Vec<(usize, f64, [usize; 4])>,
    faces_of_edge: Vec<[usize; 2]>,
}

fn topology() -> &'static Topology {
    static TOPO: OnceLock<Topology> = OnceLock::new();
    TOPO.get_or_init(|| {
        let mut edges = Vec::new();
        let mut edge_of = [[None; 8]; 8];
        for axis in 0..3 {
            for c in 0..8usize {
                if c & (1 << axis) == 0 {
                    let d = c | (1 << axis);
                    edge_of[c][d] = Some(edges.len());
                    edge_of[d][c] = Some(edges.len());
                    edges.push(Edge { a: c, b: d, axis });
                }
            }
        }
        let mut faces = Vec::new();
        for axis in 0..3 {
            let others: Vec<usize> = (0..3).filter(|&x| x != axis).collect();
            for side in 0..2usize {
                let corner = |u: usize, w: usize| (side << axis) | (u << others[0]) | (w << others[1]);
                let ring = [corner(0, 0), corner(1, 0), corner(1, 1), corner(0, 1)];
                faces.push((axis, if side == 1 { 1.0 } else { -1.0 }, ring));
            }
        }
        let mut faces_of_edge = vec![[usize::MAX; 2]; edges.len()];
        for (f, (_, _, ring)) in faces.iter().enumerate() {
            for q in 0..4 {
                let e = edge_of[ring[q]][ring[(q + 1) % 4]].expect("face edge");
                let slot = if faces_of_edge[e][0] == usize::MAX { 0 } else { 1 };
                faces_of_edge[e][slot] = f;
            }
        }
        Topology { edges, edge_of, faces, faces_of_edge }
    })
}

fn corner_pos(c: usize) -> Vec3 {
    Vec3::new(CORNERS[c][0] as f64, CORNERS[c][1] as f64, CORNERS[c][2] as f64)
}

fn edge_mid(e: &Edge) -> Vec3 {
    (corner_pos(e.a) + corner_pos(e.b)) * 0.5
}

/// Triangles (as cube-edge ids) for every corner configuration. Bit `c` of
/// the case index is set when corner `c` is inside.
pub fn triangle_table() -> &'static [Vec<[u8; 3]>; 256] {
    static TABLE: OnceLock<[Vec<[u8; 3]>; 256]> = OnceLock::new();
    TABLE.get_or_init(|| std::array::from_fn(build_case))
}

fn build_case(case: usize) -> Vec<[u8; 3]> {
    let topo = topology();
    let inside = |c: usize| case & (1 << c) != 0;
    let mut next: [Option<usize>; 12] = [None; 12];

    for &(axis, sign, ring) in &topo.faces {
        let mut normal = Vec3::zeros();
        normal[axis] = sign;
        let crossing = |q: usize| {
            let (c0, c1) = (ring[q], ring[(q + 1) % 4]);
            (inside(c0) != inside(c1)).then(|| topo.edge_of[c0][c1].expect("face edge"))
        };
        let cut: Vec<usize> = (0..4).filter_map(crossing).collect();
        // (edge p, edge q, inside corner on the cut-off side)
        let mut segments: Vec<(usize, usize, usize)> = Vec::new();
        match cut.len() {
            0 => {}
            2 => {
                let c_in = *ring.iter().find(|&&c| inside(c)).expect("an inside corner");
                segments.push((cut[0], cut[1], c_in));
            }
            4 => {
                for q in 0..4 {
                    let c = ring[q];
                    if inside(c) {
                        let prev = ring[(q + 3) % 4];
                        let nxt = ring[(q + 1) % 4];
                        let e0 = topo.edge_of[prev][c].expect("edge");
                        let e1 = topo.edge_of[c][nxt].expect("edge");
                        segments.push((e0, e1, c));
                    }
                }
            }
            n => unreachable!("a square face has an even number of sign changes, got {n}"),
        }
        for (p, q, c_in) in segments {
            let mp = edge_mid(&topo.edges[p]);
            let mq = edge_mid(&topo.edges[q]);
            let u = normal.cross(&(mq - mp));
            let m = (mp + mq) * 0.5;
            let (from, to) = if (corner_pos(c_in) - m).dot(&u) < 0.0 { (p, q) } else { (q, p) };
            assert!(next[from].is_none(), "case {case}: edge {from} has two successors");
            next[from] = Some(to);
        }
    }

    let mut tris = Vec::new();
    let mut visited = [false; 12];
    for start in 0..12 {
        if visited[start] || next[start].is_none() {
            continue;
        }
        let mut ring = Vec::new();
        let mut e = start;
        loop {
            visited[e] = true;
            ring.push(e);
            e = next[e].unwrap_or_else(|| panic!("case {case}: open contour at edge {e}"));
            if e == start {
                break;
            }
        }
        fan(&ring, topo, &mut tris, case);
    }
    tris
}

/// Fan-triangulates a boundary loop from a start vertex whose diagonals
/// never join two vertices lying on a common cube face, so no interior
/// diagonal can coincide with a segment of a neighboring cell.
fn fan(ring: &[usize], topo: &Topology, out: &mut Vec<[u8; 3]>, case: usize) {
    let k = ring.len();
    let share_face = |a: usize, b: usize| {
        topo.faces_of_edge[a].iter().any(|f| topo.faces_of_edge[b].contains(f))
    };
    let start = (0..k)
        .find(|&r| (2..k.saturating_sub(1)).all(|i| !share_face(ring[r], ring[(r + i) % k])))
        .unwrap_or_else(|| panic!("case {case}: no admissible fan start for loop {ring:?}"));
    for i in 1..k - 1 {
        out.push([
            ring[start] as u8,
            ring[(start + i) % k] as u8,
            ring[(start + i + 1) % k] as u8,
        ]);
    }
}

/// Iso-surface of a scalar field sampled at the centers of a regular grid
/// (`origin` is the corner of cell `(0,0,0)`, so sample `(i,j,k)` sits at
/// `origin + (i+½, j+½, k+½)·spacing`). Samples with value `> iso` are
/// inside; vertices are linearly interpolated along cell edges.
pub fn extract_field(dims: [usize; 3], spacing: f64, origin: Point, field: &[f64], iso: f64) -> TriMesh {
    let [nx, ny, nz] = dims;
    assert_eq!(field.len(), nx * ny * nz);
    let topo = topology();
    let table = triangle_table();
    let idx = |i: usize, j: usize, k: usize| i + nx * (j + ny * k);
    let center = |i: usize, j: usize, k: usize| {
        origin + Vec3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * spacing
    };

    let mut mesh = TriMesh::default();
    let mut vertex_of: HashMap<usize, u32> = HashMap::new();
    if nx < 2 || ny < 2 || nz < 2 {
        return mesh;
    }
    for k in 0..nz - 1 {
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let mut case = 0usize;
                for (c, o) in CORNERS.iter().enumerate() {
                    let v = field[idx(i + o[0] as usize, j + o[1] as usize, k + o[2] as usize)];
                    if v > iso {
                        case |= 1 << c;
                    }
                }
                let tris = &table[case];
                if tris.is_empty() {
                    continue;
                }
                let mut local = [u32::MAX; 12];
                for tri in tris {
                    let mut out = [0u32; 3];
                    for (slot, &e) in tri.iter().enumerate() {
                        let e = e as usize;
                        if local[e] == u32::MAX {
                            let edge = topo.edges[e];
                            let ca = CORNERS[edge.a];
                            let (ai, aj, ak) = (i + ca[0] as usize, j + ca[1] as usize, k + ca[2] as usize);
                            let key = idx(ai, aj, ak) * 3 + edge.axis;
                            local[e] = *vertex_of.entry(key).or_insert_with(|| {
                                let cb = CORNERS[edge.b];
                                let (bi, bj, bk) = (i + cb[0] as usize, j + cb[1] as usize, k + cb[2] as usize);
                                let fa = field[idx(ai, aj, ak)];
                                let fb = field[idx(bi, bj, bk)];
                                let t = ((iso - fa) / (fb - fa)).clamp(0.0, 1.0);
                                let pa = center(ai, aj, ak);
                                let pb = center(bi, bj, bk);
                                mesh.vertices.push(pa + (pb - pa) * t);
                                (mesh.vertices.len() - 1) as u32
                            });
                        }
                        out[slot] = local[e];
                    }
                    mesh.triangles.push(out);
                }
            }
        }
    }
    mesh
}

/// Marching cubes on the indicator of `member` over a label volume.
pub fn extract(volume: &VoxelLabelVolume, member: impl Fn(Label) -> bool) -> TriMesh {
    let field: Vec<f64> = volume.labels().iter().map(|&l| if member(l) { 1.0 } else { 0.0 }).collect();
    extract_field(volume.dims(), volume.spacing(), volume.origin(), &field, 0.5)
}
