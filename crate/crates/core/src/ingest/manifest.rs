//! Dataset manifest: one JSON document with file references relative to
//! the manifest's directory.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::appearance::{TimeNormalization, TimeStamp};
use crate::error::{Error, Result};
use crate::geom::{BoundingBox3D, CameraModel, Pose};
use crate::image::{DepthMap, RgbImage};
use crate::io::ply::PointCloud;

pub const MANIFEST_VERSION: u32 = 1;

/// One tracked object in one frame, box in world coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Observation {
    pub track_id: u32,
    pub class: String,
    pub bbox: BoundingBox3D,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub index: usize,
    /// Seconds.
    pub timestamp: f64,
    /// Sensor (LiDAR) to world.
    pub sensor_pose: Pose,
    pub image: String,
    /// PLY in the sensor frame.
    #[serde(default)]
    pub cloud: Option<String>,
    /// NPY depth map; derived from the cloud when absent.
    #[serde(default)]
    pub depth: Option<String>,
    #[serde(default)]
    pub observations: Vec<Observation>,
}

/// Axis conventions, recorded for readers; only these values are accepted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conventions {
    pub world_up: String,
    pub camera: String,
}

impl Default for Conventions {
    fn default() -> Self {
        Self {
            world_up: "+z".into(),
            camera: "opencv".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub version: u32,
    pub camera: CameraModel,
    /// Sensor to camera.
    pub camera_from_sensor: Pose,
    #[serde(default)]
    pub conventions: Conventions,
    /// World-frame normal of the plane objects move in.
    #[serde(default = "default_plane_normal")]
    pub motion_plane_normal: [f64; 3],
    pub frames: Vec<FrameRecord>,
}

fn default_plane_normal() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}

impl SceneManifest {
    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::invalid(format!("unsupported manifest version {}", self.version)));
        }
        self.camera.validate()?;
        if self.conventions != Conventions::default() {
            return Err(Error::invalid(format!(
                "unsupported conventions {:?}; expected world_up +z and opencv cameras",
                self.conventions
            )));
        }
        let n = nalgebra::Vector3::from(self.motion_plane_normal);
        if !(n.norm() > 1e-9) || !n.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("motion_plane_normal must be a non-zero vector"));
        }
        if self.frames.is_empty() {
            return Err(Error::invalid("manifest has no frames"));
        }
        for w in self.frames.windows(2) {
            if !(w[0].timestamp < w[1].timestamp) {
                return Err(Error::invalid(format!(
                    "timestamps must strictly increase (frames {} and {})",
                    w[0].index, w[1].index
                )));
            }
        }
        let mut seen = BTreeSet::new();
        for f in &self.frames {
            if !f.timestamp.is_finite() {
                return Err(Error::invalid(format!("frame {} has a non-finite timestamp", f.index)));
            }
            if !seen.insert(f.index) {
                return Err(Error::invalid(format!("duplicate frame index {}", f.index)));
            }
            let mut ids = BTreeSet::new();
            for o in &f.observations {
                o.bbox.validate()?;
                if !ids.insert(o.track_id) {
                    return Err(Error::invalid(format!(
                        "track {} observed twice in frame {}",
                        o.track_id, f.index
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn time_normalization(&self) -> TimeNormalization {
        TimeNormalization {
            t_first: self.frames[0].timestamp,
            t_last: self.frames[self.frames.len() - 1].timestamp,
        }
    }

    pub fn frame_time(&self, k: usize) -> TimeStamp {
        self.time_normalization().normalize(self.frames[k].timestamp)
    }

    pub fn camera_to_world(&self, k: usize) -> Pose {
        self.frames[k].sensor_pose.compose(&self.camera_from_sensor.inverse())
    }

    /// Position of the frame with `index` in [`Self::frames`].
    pub fn position(&self, index: usize) -> Result<usize> {
        self.frames
            .iter()
            .position(|f| f.index == index)
            .ok_or(Error::UnknownFrame(index))
    }

    pub fn track_ids(&self) -> BTreeSet<u32> {
        self.frames
            .iter()
            .flat_map(|f| f.observations.iter().map(|o| o.track_id))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

/// A manifest together with the directory its paths are relative to.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: SceneManifest,
    pub root: PathBuf,
}

impl Dataset {
    pub fn new(manifest: SceneManifest, root: impl Into<PathBuf>) -> Result<Self> {
        manifest.validate()?;
        Ok(Self {
            manifest,
            root: root.into(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: SceneManifest =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(manifest, root)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::atomic_write(path, self.manifest.to_json().as_bytes())
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn image(&self, k: usize) -> Result<RgbImage> {
        let f = &self.manifest.frames[k];
        let img = crate::io::png::read_png(&self.resolve(&f.image))?;
        if img.width != self.manifest.camera.width || img.height != self.manifest.camera.height {
            return Err(Error::shape(format!(
                "{}: image is {}×{}, camera is {}×{}",
                f.image, img.width, img.height, self.manifest.camera.width, self.manifest.camera.height
            )));
        }
        Ok(img)
    }

    /// The frame's cloud in the sensor frame, if it has one.
    pub fn cloud(&self, k: usize) -> Result<Option<PointCloud>> {
        match &self.manifest.frames[k].cloud {
            None => Ok(None),
            Some(rel) => crate::io::ply::read_ply(&self.resolve(rel)).map(Some),
        }
    }

    /// Stored depth, or the cloud projected into the camera, or `None`.
    pub fn depth(&self, k: usize) -> Result<Option<DepthMap>> {
        let f = &self.manifest.frames[k];
        if let Some(rel) = &f.depth {
            return crate::io::npy::read_depth(&self.resolve(rel)).map(Some);
        }
        let Some(cloud) = self.cloud(k)? else {
            return Ok(None);
        };
        let world: Vec<_> = cloud
            .positions
            .iter()
            .map(|p| f.sensor_pose.transform_point(p))
            .collect();
        Ok(Some(super::lidar_to_depth(
            &world,
            &self.manifest.camera_to_world(k),
            &self.manifest.camera,
        )))
    }
}
