//! Versioned scene checkpoints.
//!
//! Layout: the 8-byte magic `WSPLCKPT`, a little-endian `u32` version, a
//! little-endian `u64` header length, a UTF-8 JSON header, then a blob of
//! little-endian `f64` values. Every numeric array in the header is a
//! `(name, offset, len)` slice of that blob, counted in values.

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::appearance::{Appearance, ShCoefficients, TimeNormalization, WaveletBank};
use crate::error::{Error, Result};
use crate::geom::BoundingBox3D;
use crate::scenegraph::{AppearanceClock, GaussianSet, ObjectNode, PoseDelta, SceneGraph, Trajectory};

pub const MAGIC: &[u8; 8] = b"WSPLCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    time: TimeNormalization,
    metadata: serde_json::Value,
    nodes: Vec<NodeHeader>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct NodeHeader {
    count: usize,
    appearance: AppearanceHeader,
    /// Absent for the background.
    object: Option<ObjectHeader>,
    arrays: Vec<ArrayRef>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum AppearanceHeader {
    Static { degree: u8 },
    Wavelet { degree: u8, dim: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ObjectHeader {
    track_id: u32,
    class_label: String,
    bbox: BoundingBox3D,
    trajectory: Trajectory,
    pose_deltas: Option<Vec<PoseDelta>>,
    appearance_clock: AppearanceClock,
    hidden: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArrayRef {
    name: String,
    offset: usize,
    len: usize,
}

struct Blob {
    values: Vec<f64>,
}

impl Blob {
    fn push(&mut self, name: &str, data: impl IntoIterator<Item = f64>) -> ArrayRef {
        let offset = self.values.len();
        self.values.extend(data);
        ArrayRef {
            name: name.into(),
            offset,
            len: self.values.len() - offset,
        }
    }
}

fn node_arrays(set: &GaussianSet, blob: &mut Blob) -> Vec<ArrayRef> {
    let mut arrays = vec![
        blob.push("means", set.means.iter().flat_map(|v| v.iter().copied().collect::<Vec<_>>())),
        blob.push("log_scales", set.log_scales.iter().flat_map(|v| v.iter().copied().collect::<Vec<_>>())),
        blob.push("rotations", set.rotations.iter().flatten().copied()),
        blob.push("opacity_logits", set.opacity_logits.iter().copied()),
    ];
    match &set.appearance {
        Appearance::Static(s) => arrays.push(blob.push("sh", s.coeffs.iter().copied())),
        Appearance::Wavelet(w) => {
            arrays.push(blob.push("wavelet_weights", w.weights.iter().copied()));
            arrays.push(blob.push("wavelet_log_scales", w.log_scales.iter().copied()));
            arrays.push(blob.push("wavelet_translations", w.translations.iter().copied()));
        }
    }
    arrays
}

fn appearance_header(a: &Appearance) -> AppearanceHeader {
    match a {
        Appearance::Static(s) => AppearanceHeader::Static { degree: s.degree },
        Appearance::Wavelet(w) => AppearanceHeader::Wavelet {
            degree: w.degree,
            dim: w.dim,
        },
    }
}

/// Serializes `scene` with free-form `metadata` (config, seed, iteration).
pub fn encode_checkpoint(scene: &SceneGraph, metadata: &serde_json::Value) -> Vec<u8> {
    let mut blob = Blob { values: vec![] };
    let mut nodes = vec![NodeHeader {
        count: scene.background.len(),
        appearance: appearance_header(&scene.background.appearance),
        object: None,
        arrays: node_arrays(&scene.background, &mut blob),
    }];
    for o in &scene.objects {
        nodes.push(NodeHeader {
            count: o.gaussians.len(),
            appearance: appearance_header(&o.gaussians.appearance),
            object: Some(ObjectHeader {
                track_id: o.track_id,
                class_label: o.class_label.clone(),
                bbox: o.bbox,
                trajectory: o.trajectory.clone(),
                pose_deltas: o.pose_deltas.clone(),
                appearance_clock: o.appearance_clock.clone(),
                hidden: o.hidden,
            }),
            arrays: node_arrays(&o.gaussians, &mut blob),
        });
    }
    let header = Header {
        time: scene.time,
        metadata: metadata.clone(),
        nodes,
    };
    let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let mut out = Vec::with_capacity(20 + json.len() + 8 * blob.values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in &blob.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// A loaded checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub scene: SceneGraph,
    pub metadata: serde_json::Value,
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let bad = |m: String| Error::format(path, m);
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let json = bytes
        .get(20..20usize.saturating_add(hlen))
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| bad(format!("header: {e}")))?;
    let raw = &bytes[20 + hlen..];
    if raw.len() % 8 != 0 {
        return Err(bad("blob is not a whole number of f64 values".into()));
    }
    let blob: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let mut sets = Vec::with_capacity(header.nodes.len());
    for (k, node) in header.nodes.iter().enumerate() {
        let get = |name: &str, width: usize| -> Result<&[f64]> {
            let a = node
                .arrays
                .iter()
                .find(|a| a.name == name)
                .ok_or_else(|| bad(format!("node {k} lacks array {name}")))?;
            if a.len != width * node.count {
                return Err(bad(format!("node {k} array {name} has {} values, expected {}", a.len, width * node.count)));
            }
            blob.get(a.offset..a.offset + a.len)
                .ok_or_else(|| bad(format!("node {k} array {name} lies outside the blob")))
        };
        let vec3 = |d: &[f64]| d.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect::<Vec<_>>();
        let appearance = match node.appearance {
            AppearanceHeader::Static { degree } => {
                let stride = ShCoefficients::zeros(degree, 1).stride();
                Appearance::Static(ShCoefficients {
                    degree,
                    coeffs: get("sh", stride)?.to_vec(),
                })
            }
            AppearanceHeader::Wavelet { degree, dim } => {
                let proto = WaveletBank::new(degree, dim.max(1), 0)?;
                let stride = proto.coeffs_per_gaussian() * dim;
                Appearance::Wavelet(WaveletBank {
                    degree,
                    dim,
                    weights: get("wavelet_weights", stride)?.to_vec(),
                    log_scales: get("wavelet_log_scales", stride)?.to_vec(),
                    translations: get("wavelet_translations", stride)?.to_vec(),
                })
            }
        };
        let set = GaussianSet {
            means: vec3(get("means", 3)?),
            log_scales: vec3(get("log_scales", 3)?),
            rotations: get("rotations", 4)?
                .chunks_exact(4)
                .map(|c| [c[0], c[1], c[2], c[3]])
                .collect(),
            opacity_logits: get("opacity_logits", 1)?.to_vec(),
            appearance,
        };
        sets.push(set);
    }
    let mut nodes = header.nodes.into_iter().zip(sets);
    let (bg_header, background) = nodes.next().ok_or_else(|| bad("no background node".into()))?;
    if bg_header.object.is_some() {
        return Err(bad("first node must be the background".into()));
    }
    let mut scene = SceneGraph::new(background, header.time);
    for (h, set) in nodes {
        let o = h.object.ok_or_else(|| bad("object node without object metadata".into()))?;
        let trajectory = Trajectory::new(o.trajectory.samples().to_vec())?;
        let mut node = ObjectNode::new(o.track_id, o.class_label, o.bbox, set, trajectory);
        node.pose_deltas = o.pose_deltas;
        node.appearance_clock = o.appearance_clock;
        node.hidden = o.hidden;
        scene.add_object(node)?;
    }
    scene.validate()?;
    Ok(Checkpoint {
        scene,
        metadata: header.metadata,
    })
}

pub fn save_checkpoint(path: &Path, scene: &SceneGraph, metadata: &serde_json::Value) -> Result<()> {
    super::atomic_write(path, &encode_checkpoint(scene, metadata))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&super::read_file(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::appearance::TimeStamp;
    use crate::geom::Pose;
    use crate::scenegraph::logit;

    pub(crate) fn sample_scene() -> SceneGraph {
        let mut bg = GaussianSet::empty(Appearance::Static(ShCoefficients::zeros(2, 0)));
        for i in 0..3 {
            bg.means.push(Vector3::new(i as f64 * 0.1, 1.0 / 3.0, std::f64::consts::PI));
            bg.log_scales.push(Vector3::new(-1.0, -2.0, -0.7));
            bg.rotations.push([0.9, 0.1, 0.2, -0.3]);
            bg.opacity_logits.push(logit(0.37));
        }
        let mut sh = ShCoefficients::zeros(2, 3);
        sh.coeffs.iter_mut().enumerate().for_each(|(i, c)| *c = (i as f64).sin());
        bg.appearance = Appearance::Static(sh);
        let mut obj = GaussianSet::empty(Appearance::Static(ShCoefficients::zeros(0, 0)));
        obj.means.push(Vector3::new(0.1, 0.2, 0.3));
        obj.log_scales.push(Vector3::repeat(-1.5));
        obj.rotations.push([1.0, 0.0, 0.0, 0.0]);
        obj.opacity_logits.push(0.4);
        let mut bank = WaveletBank::new(1, 3, 1).unwrap();
        bank.weights.iter_mut().enumerate().for_each(|(i, w)| *w = 0.01 * i as f64);
        obj.appearance = Appearance::Wavelet(bank);
        let traj = Trajectory::new(vec![
            (TimeStamp(0.0), Pose::from_yaw(0.3, Vector3::new(1.0, 2.0, 0.0))),
            (TimeStamp(0.7), Pose::from_yaw(0.1, Vector3::new(3.0, 2.5, 0.0))),
        ])
        .unwrap();
        let mut node = ObjectNode::new(7, "car", BoundingBox3D::new([0.0; 3], [4.0, 2.0, 1.5], 0.0).unwrap(), obj, traj);
        node.enable_pose_refinement();
        node.pose_deltas.as_mut().unwrap()[1] = [0.01, -0.02, 0.0, 0.001, 0.0, -0.003];
        node.hidden = true;
        let mut scene = SceneGraph::new(bg, TimeNormalization { t_first: 0.0, t_last: 2.9 });
        scene.add_object(node).unwrap();
        scene
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let scene = sample_scene();
        let meta = serde_json::json!({"seed": 3, "iteration": 100, "lr": 0.1 + 0.2});
        let bytes = encode_checkpoint(&scene, &meta);
        let back = decode_checkpoint(&bytes, Path::new("c")).unwrap();
        assert_eq!(back.scene, scene);
        assert_eq!(back.metadata, meta);
        assert_eq!(encode_checkpoint(&back.scene, &back.metadata), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode_checkpoint(&sample_scene(), &serde_json::Value::Null);
        let p = Path::new("c");
        assert!(decode_checkpoint(&bytes[..bytes.len() - 8], p).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(decode_checkpoint(&wrong, p).is_err());
        let mut version = bytes;
        version[8] = 9;
        assert_eq!(decode_checkpoint(&version, p).unwrap_err().category(), "format");
    }
}
