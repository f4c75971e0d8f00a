//! Scene directories: cameras and metadata in `scene.json`, one float image
//! per view under `images/`, the seed cloud in `points.ply`.
//!
//! Synthetic scenes also store their generator arguments, so the exact
//! ground truth (surface, medium, floaters) can be rebuilt for evaluation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::image::{read_image, write_float_image, write_png};
use crate::io::ply::{points_from_cloud, read_points, write_points, PlyFormat, Point};
use crate::io::{medium_file, write_atomic};
use crate::synthetic::{make_scene, SyntheticScene};
use crate::types::CameraView;

pub const SCENE_FILE: &str = "scene.json";
pub const POINTS_FILE: &str = "points.ply";
pub const TRUE_MEDIUM_FILE: &str = "true_medium.json";

/// Arguments of the generator that produced a synthetic scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthParams {
    pub seed: u64,
    pub n_surface: usize,
    pub n_floaters: usize,
    pub grid_variation: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewRecord {
    pub camera: CameraView,
    /// Ground-truth underwater image, relative to the scene directory.
    pub image: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub views: Vec<ViewRecord>,
    /// Indices into `views` reserved for evaluation.
    pub held_out: Vec<usize>,
    pub points: PathBuf,
    pub synthetic: Option<SynthParams>,
}

/// A loaded scene: cameras carry their ground-truth images.
#[derive(Clone, Debug)]
pub struct SceneData {
    pub root: PathBuf,
    pub manifest: SceneManifest,
    pub cameras: Vec<CameraView>,
    pub points: Vec<Point>,
}

impl SceneData {
    pub fn training_cameras(&self) -> Vec<CameraView> {
        (0..self.cameras.len())
            .filter(|v| !self.manifest.held_out.contains(v))
            .map(|v| self.cameras[v].clone())
            .collect()
    }

    /// Rebuilds the generator output for synthetic scenes.
    pub fn regenerate(&self) -> Result<Option<SyntheticScene>> {
        self.manifest
            .synthetic
            .as_ref()
            .map(|p| make_scene(p.seed, p.n_surface, p.n_floaters, p.grid_variation))
            .transpose()
    }
}

/// Writes a synthetic scene: manifest, float ground truth, PNG previews of the
/// clean and degraded images, the true medium and the seed point cloud.
pub fn write_synthetic(dir: &Path, scene: &SyntheticScene, params: &SynthParams) -> Result<()> {
    std::fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
    let mut views = Vec::new();
    for (v, cam) in scene.cameras.iter().enumerate() {
        let rel = PathBuf::from(format!("images/uw_{v:03}.f32"));
        write_float_image(&dir.join(&rel), &scene.uw_images[v])?;
        write_png(&dir.join(format!("images/uw_{v:03}.png")), &scene.uw_images[v])?;
        write_png(&dir.join(format!("images/clean_{v:03}.png")), &scene.clean_images[v])?;
        write_float_image(&dir.join(format!("images/depth_{v:03}.f32")), &scene.true_depths[v])?;
        views.push(ViewRecord {
            camera: cam.clone(),
            image: rel,
        });
    }
    write_points(&dir.join(POINTS_FILE), &points_from_cloud(&scene.cloud, None), PlyFormat::BinaryLittleEndian)?;
    medium_file::save(&dir.join(TRUE_MEDIUM_FILE), &scene.true_medium)?;
    let manifest = SceneManifest {
        views,
        held_out: scene.held_out.clone(),
        points: PathBuf::from(POINTS_FILE),
        synthetic: Some(params.clone()),
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_atomic(&dir.join(SCENE_FILE), &json)
}

pub fn read_manifest(dir: &Path) -> Result<SceneManifest> {
    let path = dir.join(SCENE_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::MalformedFile {
        kind: "scene manifest",
        path,
        message: e.to_string(),
    })
}

pub fn read_scene(dir: &Path) -> Result<SceneData> {
    let manifest = read_manifest(dir)?;
    let mut cameras = Vec::with_capacity(manifest.views.len());
    for v in &manifest.views {
        let mut cam = v.camera.clone();
        let img = read_image(&dir.join(&v.image))?;
        if (img.width, img.height, img.channels) != (cam.width, cam.height, 3) {
            return Err(Error::DimensionMismatch {
                expected: (cam.width, cam.height, 3),
                actual: img.dims(),
            });
        }
        cam.validate()?;
        cam.gt_image = Some(img);
        cameras.push(cam);
    }
    if let Some(&bad) = manifest.held_out.iter().find(|&&v| v >= cameras.len()) {
        return Err(Error::InvalidConfig(format!("held-out view {bad} does not exist")));
    }
    let points = read_points(&dir.join(&manifest.points))?;
    Ok(SceneData {
        root: dir.to_path_buf(),
        manifest,
        cameras,
        points,
    })
}
