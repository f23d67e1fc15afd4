//! Depth/semantic/shading rendering and visibility masks.

use std::io::{Read, Write};

use super::grid::Cursor;
use super::raycast::GridRay;
use super::{Camera, CameraRig, SceneError, SemanticVoxelGrid, EMPTY};

const VIEW_MAGIC: &[u8; 4] = b"OVW1";
const MASK_MAGIC: &[u8; 4] = b"OVM1";
const SKY: [f32; 3] = [0.55, 0.7, 0.9];

/// Per-pixel planes, row-major `v * width + u`; `rgb` is `[3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedView {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f32>,
    pub semantic: Vec<u16>,
    pub rgb: Vec<f32>,
}

/// Display colour of a category; distinct for the first 24 ids.
pub fn palette(id: u16) -> [u8; 3] {
    const TABLE: [[u8; 3]; 24] = [
        [128, 128, 128], [220, 120, 60], [40, 160, 60], [30, 90, 220],
        [200, 40, 40], [250, 200, 30], [160, 60, 200], [255, 130, 0],
        [0, 200, 200], [120, 80, 40], [255, 0, 160], [90, 200, 120],
        [60, 60, 140], [200, 200, 200], [140, 0, 0], [0, 100, 100],
        [170, 170, 60], [100, 0, 160], [240, 150, 150], [20, 20, 20],
        [150, 220, 255], [80, 120, 0], [255, 220, 180], [0, 60, 30],
    ];
    if id == EMPTY {
        return [255, 255, 255];
    }
    let i = id as usize;
    if i < TABLE.len() {
        TABLE[i]
    } else {
        let h = (i as u32).wrapping_mul(2_654_435_761);
        [(h >> 24) as u8, (h >> 16) as u8, (h >> 8) as u8]
    }
}

/// Casts one ray per pixel centre; the first occupied voxel sets depth
/// (z-depth, metres) and semantics. Shading is the category colour dimmed
/// with distance.
pub fn render_view(grid: &SemanticVoxelGrid, camera: &Camera) -> RenderedView {
    let (w, h) = (camera.width, camera.height);
    let n = w * h;
    let mut depth = vec![f32::INFINITY; n];
    let mut semantic = vec![EMPTY; n];
    let mut rgb = vec![0.0f32; 3 * n];
    let origin = camera.center();
    for v in 0..h {
        for u in 0..w {
            let p = v * w + u;
            let dir = camera.ray_direction(u as f64 + 0.5, v as f64 + 0.5);
            let hit = GridRay::new(&grid.spec, origin, dir).find(|s| grid.is_occupied(s.voxel));
            match hit {
                Some(s) => {
                    let d = s.t_enter.max(1e-6);
                    let label = grid.get(s.voxel);
                    depth[p] = d as f32;
                    semantic[p] = label;
                    let atten = 1.0 / (1.0 + 0.08 * d);
                    let col = palette(label);
                    for c in 0..3 {
                        rgb[c * n + p] = (col[c] as f64 / 255.0 * atten) as f32;
                    }
                }
                None => {
                    for c in 0..3 {
                        rgb[c * n + p] = SKY[c];
                    }
                }
            }
        }
    }
    RenderedView { width: w, height: h, depth, semantic, rgb }
}

/// Sub-pixel rays per image axis used by [`compute_visible_mask`].
pub const VISIBILITY_SUBSAMPLES: usize = 3;

/// A voxel is visible when some camera ray reaches it no later than that
/// ray's first occupied voxel. Rays are cast on a `3×3` sub-pixel lattice of
/// every image, plus one ray per voxel centre inside the image.
pub fn compute_visible_mask(grid: &SemanticVoxelGrid, rig: &CameraRig) -> Vec<bool> {
    let spec = &grid.spec;
    let mut visible = vec![false; spec.n_voxels()];
    let s = VISIBILITY_SUBSAMPLES;
    for cam in &rig.cameras {
        let origin = cam.center();
        for v in 0..cam.height * s {
            for u in 0..cam.width * s {
                let dir = cam.ray_direction((u as f64 + 0.5) / s as f64, (v as f64 + 0.5) / s as f64);
                for step in GridRay::new(spec, origin, dir) {
                    visible[step.voxel] = true;
                    if grid.is_occupied(step.voxel) {
                        break;
                    }
                }
            }
        }
        for (idx, vis) in visible.iter_mut().enumerate() {
            if *vis {
                continue;
            }
            let c = spec.voxel_center(idx);
            match cam.project(c) {
                Some((u, v, _)) if cam.in_image(u, v) => {}
                _ => continue,
            }
            let dir = [c[0] - origin[0], c[1] - origin[1], c[2] - origin[2]];
            for step in GridRay::new(spec, origin, dir) {
                if step.voxel == idx {
                    *vis = true;
                    break;
                }
                if grid.is_occupied(step.voxel) || step.t_enter > 1.0 + 1e-9 {
                    break;
                }
            }
        }
    }
    visible
}

impl RenderedView {
    pub fn write(&self, mut w: impl Write) -> Result<(), SceneError> {
        let mut buf = Vec::with_capacity(12 + self.depth.len() * 18);
        buf.extend_from_slice(VIEW_MAGIC);
        buf.extend_from_slice(&(self.width as u32).to_le_bytes());
        buf.extend_from_slice(&(self.height as u32).to_le_bytes());
        self.depth.iter().for_each(|d| buf.extend_from_slice(&d.to_le_bytes()));
        self.semantic.iter().for_each(|s| buf.extend_from_slice(&s.to_le_bytes()));
        self.rgb.iter().for_each(|c| buf.extend_from_slice(&c.to_le_bytes()));
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read(mut r: impl Read) -> Result<Self, SceneError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = Cursor { data: &bytes, pos: 0 };
        if cur.take(4)? != VIEW_MAGIC {
            return Err(SceneError::Format("missing OVW1 magic".into()));
        }
        let (width, height) = (cur.u32()? as usize, cur.u32()? as usize);
        let n = width * height;
        let depth = (0..n).map(|_| cur.f32()).collect::<Result<_, _>>()?;
        let semantic = (0..n).map(|_| cur.u16()).collect::<Result<_, _>>()?;
        let rgb = (0..3 * n).map(|_| cur.f32()).collect::<Result<_, _>>()?;
        if cur.pos != bytes.len() {
            return Err(SceneError::Format("trailing bytes in view file".into()));
        }
        Ok(Self { width, height, depth, semantic, rgb })
    }
}

/// Mask file: magic, u32 dims, one byte per voxel in the grid's flat order.
pub fn write_mask(dims: [usize; 3], mask: &[bool], mut w: impl Write) -> Result<(), SceneError> {
    let mut buf = Vec::with_capacity(16 + mask.len());
    buf.extend_from_slice(MASK_MAGIC);
    for d in dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.extend(mask.iter().map(|&m| m as u8));
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_mask(mut r: impl Read) -> Result<([usize; 3], Vec<bool>), SceneError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = Cursor { data: &bytes, pos: 0 };
    if cur.take(4)? != MASK_MAGIC {
        return Err(SceneError::Format("missing OVM1 magic".into()));
    }
    let dims = [cur.u32()? as usize, cur.u32()? as usize, cur.u32()? as usize];
    let n: usize = dims.iter().product();
    let body = cur.take(n)?;
    if cur.pos != bytes.len() {
        return Err(SceneError::Format("trailing bytes in mask file".into()));
    }
    Ok((dims, body.iter().map(|&b| b != 0).collect()))
}
