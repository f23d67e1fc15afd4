//! ASCII PLY export of occupied voxels as coloured cubes.

use std::fmt::Write as _;

use super::render::palette;
use super::{GridSpec, SceneError, SemanticVoxelGrid};

const CUBE_FACES: [[usize; 3]; 12] = [
    [0, 2, 1], [1, 2, 3], [4, 5, 6], [5, 7, 6],
    [0, 1, 4], [1, 5, 4], [2, 6, 3], [3, 6, 7],
    [0, 4, 2], [2, 4, 6], [1, 3, 5], [3, 7, 5],
];

pub fn export_ply(grid: &SemanticVoxelGrid) -> String {
    let spec = &grid.spec;
    let occupied: Vec<usize> = (0..spec.n_voxels()).filter(|&i| grid.is_occupied(i)).collect();
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\ncomment occupied voxel cubes\n");
    let _ = writeln!(s, "element vertex {}", occupied.len() * 8);
    s.push_str("property float x\nproperty float y\nproperty float z\n");
    s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    let _ = writeln!(s, "element face {}", occupied.len() * 12);
    s.push_str("property list uchar int vertex_indices\nend_header\n");
    let vs = spec.voxel_size;
    for &idx in &occupied {
        let c = spec.coords(idx);
        let col = palette(grid.get(idx));
        for k in 0..8 {
            let corner = [k & 1, (k >> 1) & 1, (k >> 2) & 1];
            let p: [f64; 3] = [0, 1, 2].map(|a| spec.origin[a] + (c[a] + corner[a]) as f64 * vs);
            let _ = writeln!(s, "{} {} {} {} {} {}", p[0], p[1], p[2], col[0], col[1], col[2]);
        }
    }
    for n in 0..occupied.len() {
        for f in CUBE_FACES {
            let b = n * 8;
            let _ = writeln!(s, "3 {} {} {}", b + f[0], b + f[1], b + f[2]);
        }
    }
    s
}

/// Recovers `(voxel index, colour)` for each exported cube from its vertices.
pub fn parse_ply_voxels(text: &str, spec: &GridSpec) -> Result<Vec<(usize, [u8; 3])>, SceneError> {
    let bad = |m: &str| SceneError::Format(format!("ply: {m}"));
    let mut lines = text.lines();
    if lines.next() != Some("ply") {
        return Err(bad("missing magic"));
    }
    let mut n_vertex = None;
    for line in lines.by_ref() {
        if line == "end_header" {
            break;
        }
        if let Some(rest) = line.strip_prefix("element vertex ") {
            n_vertex = Some(rest.trim().parse::<usize>().map_err(|_| bad("vertex count"))?);
        }
    }
    let n_vertex = n_vertex.ok_or_else(|| bad("no vertex element"))?;
    if n_vertex % 8 != 0 {
        return Err(bad("vertex count is not a multiple of 8"));
    }
    let mut out = Vec::with_capacity(n_vertex / 8);
    let mut cube_min = [f64::INFINITY; 3];
    let mut colour = [0u8; 3];
    for k in 0..n_vertex {
        let line = lines.next().ok_or_else(|| bad("truncated vertex list"))?;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(bad("vertex line"));
        }
        for a in 0..3 {
            let v: f64 = f[a].parse().map_err(|_| bad("coordinate"))?;
            cube_min[a] = cube_min[a].min(v);
        }
        for a in 0..3 {
            colour[a] = f[3 + a].parse().map_err(|_| bad("colour"))?;
        }
        if k % 8 == 7 {
            let probe = [0, 1, 2].map(|a| cube_min[a] + 0.5 * spec.voxel_size);
            let idx = spec.voxel_of_point(probe).ok_or_else(|| bad("cube outside grid"))?;
            out.push((idx, colour));
            cube_min = [f64::INFINITY; 3];
        }
    }
    Ok(out)
}
