//! Generated scenes with their rendered views and visibility masks, and
//! their on-disk layout.

use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use super::{PipelineError, RunConfig};
use crate::scene::{
    class_histogram, compute_visible_mask, generate_scene, place_camera_rig, read_mask, render_view, write_mask,
    CameraRig, CategoryTable, RenderedView, SemanticVoxelGrid,
};

pub struct Scene {
    pub grid: SemanticVoxelGrid,
    pub views: Vec<RenderedView>,
    pub visible: Vec<bool>,
}

pub struct Dataset {
    pub rig: CameraRig,
    pub scenes: Vec<Scene>,
}

/// Seed of scene `i` for dataset seed `seed`.
pub fn scene_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (i as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

fn scene_path(dir: &Path, i: usize, ext: &str) -> std::path::PathBuf {
    dir.join(format!("scene_{i:03}{ext}"))
}

fn join<T: ToString>(v: impl IntoIterator<Item = T>) -> String {
    v.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl Dataset {
    pub fn generate(cfg: &RunConfig) -> Result<Self, PipelineError> {
        let rig = place_camera_rig(cfg.seed, &cfg.rig, &cfg.grid)?;
        let spec = cfg.scene_spec();
        let scenes = (0..cfg.scenes)
            .map(|i| {
                let grid = generate_scene(scene_seed(cfg.seed, i), &spec, &cfg.grid)?;
                let views = rig.cameras.iter().map(|c| render_view(&grid, c)).collect();
                let visible = compute_visible_mask(&grid, &rig);
                Ok(Scene { grid, views, visible })
            })
            .collect::<Result<Vec<_>, PipelineError>>()?;
        Ok(Self { rig, scenes })
    }

    pub fn categories(&self) -> &CategoryTable {
        &self.scenes[0].grid.categories
    }

    /// Class counts summed over every scene.
    pub fn histogram(&self) -> Vec<u64> {
        let mut total = vec![0u64; self.categories().len()];
        for s in &self.scenes {
            for (t, c) in total.iter_mut().zip(class_histogram(&s.grid)) {
                *t += c;
            }
        }
        total
    }

    pub fn manifest(&self, cfg: &RunConfig) -> String {
        let cats = self.categories();
        let mut s = String::new();
        let _ = writeln!(s, "data_hash = {}", cfg.data_hash());
        let _ = writeln!(s, "scenes = {}", self.scenes.len());
        let _ = writeln!(s, "cameras = {}", self.rig.len());
        let _ = writeln!(s, "categories = {}", join((0..cats.len()).map(|i| cats.name(i as u16))));
        let _ = writeln!(s, "foreground = {}", join((0..cats.len()).map(|i| cats.is_foreground(i as u16) as u8)));
        for (i, sc) in self.scenes.iter().enumerate() {
            let _ = writeln!(s, "scene.{i}.histogram = {}", join(class_histogram(&sc.grid)));
        }
        let _ = writeln!(s, "total.histogram = {}", join(self.histogram()));
        s
    }

    /// One OVG1 grid, one view file per camera and one mask file per scene,
    /// plus `manifest.kv` and `config.kv`.
    pub fn write(&self, cfg: &RunConfig, dir: &Path) -> Result<(), PipelineError> {
        fs::create_dir_all(dir)?;
        for (i, sc) in self.scenes.iter().enumerate() {
            sc.grid.write_ovg1(BufWriter::new(fs::File::create(scene_path(dir, i, ".ovg"))?))?;
            for (c, v) in sc.views.iter().enumerate() {
                v.write(BufWriter::new(fs::File::create(scene_path(dir, i, &format!("_cam{c}.ovw")))?))?;
            }
            write_mask(sc.grid.spec.dims, &sc.visible, BufWriter::new(fs::File::create(scene_path(dir, i, ".ovm"))?))?;
        }
        fs::write(dir.join("manifest.kv"), self.manifest(cfg))?;
        fs::write(dir.join("config.kv"), cfg.to_kv())?;
        Ok(())
    }

    /// Reads a dataset written by [`Dataset::write`]; the rig is rebuilt from
    /// `cfg`, whose data hash must match the manifest.
    pub fn read(cfg: &RunConfig, dir: &Path) -> Result<Self, PipelineError> {
        let manifest = fs::read_to_string(dir.join("manifest.kv"))?;
        let get = |key: &str| {
            manifest
                .lines()
                .find_map(|l| l.split_once('=').filter(|(k, _)| k.trim() == key).map(|(_, v)| v.trim().to_string()))
                .ok_or_else(|| PipelineError::Data(format!("manifest lacks {key}")))
        };
        let hash = get("data_hash")?;
        if hash != cfg.data_hash() {
            return Err(PipelineError::Mismatch(format!("dataset was generated with config {hash}")));
        }
        let n: usize = get("scenes")?.parse().map_err(|_| PipelineError::Data("bad scene count".into()))?;
        let names = get("categories")?;
        let flags = get("foreground")?;
        let table = CategoryTable::new(names.split(',').zip(flags.split(',')).map(|(n, f)| (n.to_string(), f == "1")));
        let rig = place_camera_rig(cfg.seed, &cfg.rig, &cfg.grid)?;
        let mut scenes = Vec::with_capacity(n);
        for i in 0..n {
            let grid = SemanticVoxelGrid::read_ovg1(fs::File::open(scene_path(dir, i, ".ovg"))?)?.with_category_flags(&table)?;
            let views = (0..rig.len())
                .map(|c| RenderedView::read(fs::File::open(scene_path(dir, i, &format!("_cam{c}.ovw")))?))
                .collect::<Result<Vec<_>, _>>()?;
            let (dims, visible) = read_mask(fs::File::open(scene_path(dir, i, ".ovm"))?)?;
            if dims != grid.spec.dims {
                return Err(PipelineError::Data(format!("scene {i}: mask dims {dims:?}")));
            }
            scenes.push(Scene { grid, views, visible });
        }
        if scenes.is_empty() {
            return Err(PipelineError::Data("dataset has no scenes".into()));
        }
        Ok(Self { rig, scenes })
    }
}
