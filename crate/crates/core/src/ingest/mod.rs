//! Datasets: the manifest schema, LiDAR accumulation and object
//! densification, Gaussian initialization, synthetic scenes and the KITTI
//! tracking converter.

pub mod init;
pub mod kitti;
pub mod manifest;
pub mod points;
pub mod synth;

pub use kitti::{convert_kitti, write_kitti_sequence, ConvertReport, KittiExport, KittiSequence};
pub use init::{build_scene, initialize_node_gaussians, AppearanceInit};
pub use manifest::{Dataset, FrameRecord, Observation, SceneManifest};
pub use points::{accumulate_background_points, densify_object_points, lidar_to_depth, voxel_downsample};
pub use synth::{synth_scene_generate, write_synth, SynthSpec};
