//! KITTI tracking sequences: calibration, OXTS poses, tracklet labels and
//! Velodyne scans converted to a manifest, plus the reverse export used to
//! build test sequences from synthetic scenes.
//!
//! A sequence is either a flat directory (`calib.txt`, `label_02.txt`,
//! `oxts.txt`, `image_02/`, `velodyne/`) or the official tree
//! (`calib/SSSS.txt`, `label_02/SSSS.txt`, `oxts/SSSS.txt`,
//! `image_02/SSSS/`, `velodyne/SSSS/`) with a sequence name.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix3x4, Rotation3, UnitQuaternion, Vector3};

use super::manifest::{Conventions, Dataset, FrameRecord, Observation, SceneManifest, MANIFEST_VERSION};
use crate::error::{Error, Result};
use crate::geom::{project_point, BoundingBox3D, CameraModel, Pose};
use crate::image::RgbImage;
use crate::io::ply::PointCloud;

/// Frame spacing of KITTI tracking sequences (10 Hz).
pub const FRAME_PERIOD: f64 = 0.1;
const EARTH_RADIUS: f64 = 6_378_137.0;

fn rigid(m: &Matrix3<f64>, t: Vector3<f64>) -> Pose {
    let r = Rotation3::from_matrix(m);
    Pose::new(UnitQuaternion::from_rotation_matrix(&r), t)
}

fn rigid34(m: &Matrix3x4<f64>) -> Pose {
    rigid(&m.fixed_view::<3, 3>(0, 0).into_owned(), m.column(3).into_owned())
}

fn pose_to34(p: &Pose) -> Matrix3x4<f64> {
    let mut m = Matrix3x4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&p.rotation_matrix());
    m.set_column(3, &p.translation);
    m
}

fn parse_numbers(values: &[&str], path: &Path, what: &str) -> Result<Vec<f64>> {
    values
        .iter()
        .map(|v| {
            v.parse::<f64>()
                .map_err(|_| Error::format(path, format!("{what}: '{v}' is not a number")))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct KittiCalib {
    /// Projection of the left color camera in the rectified frame.
    pub p2: Matrix3x4<f64>,
    pub r_rect: Matrix3<f64>,
    /// Velodyne to (unrectified) reference camera.
    pub tr_velo_cam: Matrix3x4<f64>,
    /// IMU to Velodyne.
    pub tr_imu_velo: Matrix3x4<f64>,
}

impl KittiCalib {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut entries: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for line in text.lines() {
            let mut it = line.split_whitespace();
            let Some(key) = it.next() else { continue };
            let values: Vec<&str> = it.collect();
            let key = key.trim_end_matches(':').to_string();
            entries.insert(key.clone(), parse_numbers(&values, path, &key)?);
        }
        let get = |names: &[&str], len: usize| -> Result<Vec<f64>> {
            let v = names
                .iter()
                .find_map(|n| entries.get(*n))
                .ok_or_else(|| Error::format(path, format!("missing calibration entry {}", names[0])))?;
            if v.len() != len {
                return Err(Error::format(path, format!("{} needs {len} values, found {}", names[0], v.len())));
            }
            Ok(v.clone())
        };
        Ok(Self {
            p2: Matrix3x4::from_row_slice(&get(&["P2"], 12)?),
            r_rect: Matrix3::from_row_slice(&get(&["R_rect", "R0_rect"], 9)?),
            tr_velo_cam: Matrix3x4::from_row_slice(&get(&["Tr_velo_cam", "Tr_velo_to_cam"], 12)?),
            tr_imu_velo: Matrix3x4::from_row_slice(&get(&["Tr_imu_velo", "Tr_imu_to_velo"], 12)?),
        })
    }

    pub fn to_text(&self) -> String {
        let row = |vals: &[f64]| vals.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(" ");
        let flat34 = |m: &Matrix3x4<f64>| -> Vec<f64> { (0..3).flat_map(|r| (0..4).map(move |c| m[(r, c)])).collect() };
        let flat33 = |m: &Matrix3<f64>| -> Vec<f64> { (0..3).flat_map(|r| (0..3).map(move |c| m[(r, c)])).collect() };
        let mut s = String::new();
        for k in 0..4 {
            // Only P2 is used; the other cameras repeat it.
            let _ = writeln!(s, "P{k}: {}", row(&flat34(&self.p2)));
        }
        let _ = writeln!(s, "R_rect {}", row(&flat33(&self.r_rect)));
        let _ = writeln!(s, "Tr_velo_cam {}", row(&flat34(&self.tr_velo_cam)));
        let _ = writeln!(s, "Tr_imu_velo {}", row(&flat34(&self.tr_imu_velo)));
        s
    }

    pub fn camera(&self, width: u32, height: u32) -> CameraModel {
        CameraModel {
            fx: self.p2[(0, 0)],
            fy: self.p2[(1, 1)],
            cx: self.p2[(0, 2)],
            cy: self.p2[(1, 2)],
            width,
            height,
            near: 0.1,
            far: 150.0,
        }
    }

    /// Velodyne to rectified reference camera, the frame labels live in.
    pub fn rect_from_velo(&self) -> Pose {
        rigid(&self.r_rect, Vector3::zeros()).compose(&rigid34(&self.tr_velo_cam))
    }

    /// Velodyne to the rectified left color camera.
    pub fn camera_from_velo(&self) -> Pose {
        let k = self.p2.fixed_view::<3, 3>(0, 0).into_owned();
        let t = k.try_inverse().map(|ki| ki * self.p2.column(3)).unwrap_or_else(Vector3::zeros);
        Pose::new(UnitQuaternion::identity(), t).compose(&self.rect_from_velo())
    }

    pub fn velo_from_imu(&self) -> Pose {
        rigid34(&self.tr_imu_velo)
    }
}

/// One line of a tracking label file.
#[derive(Clone, Debug, PartialEq)]
pub struct KittiLabel {
    pub frame: usize,
    pub track_id: i64,
    pub class: String,
    /// Height, width, length.
    pub dims_hwl: [f64; 3],
    /// Bottom center in the rectified reference camera.
    pub location: [f64; 3],
    pub rotation_y: f64,
}

impl KittiLabel {
    pub fn is_dont_care(&self) -> bool {
        self.class == "DontCare" || self.track_id < 0
    }
}

pub fn parse_labels(text: &str, path: &Path) -> Result<Vec<KittiLabel>> {
    let mut out = vec![];
    for (n, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        let what = format!("line {}", n + 1);
        if f.len() < 17 {
            return Err(Error::format(path, format!("{what}: expected at least 17 fields, found {}", f.len())));
        }
        let frame = f[0]
            .parse::<usize>()
            .map_err(|_| Error::format(path, format!("{what}: bad frame '{}'", f[0])))?;
        let track_id = f[1]
            .parse::<i64>()
            .map_err(|_| Error::format(path, format!("{what}: bad track id '{}'", f[1])))?;
        let v = parse_numbers(&f[10..17], path, &what)?;
        out.push(KittiLabel {
            frame,
            track_id,
            class: f[2].to_string(),
            dims_hwl: [v[0], v[1], v[2]],
            location: [v[3], v[4], v[5]],
            rotation_y: v[6],
        });
    }
    Ok(out)
}

/// Geodetic pose of one OXTS record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OxtsRecord {
    pub lat: f64,
    pub lon: f64,
    pub alt: f64,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

pub fn parse_oxts(text: &str, path: &Path) -> Result<Vec<OxtsRecord>> {
    let mut out = vec![];
    for (n, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        if f.len() < 6 {
            return Err(Error::format(path, format!("line {}: expected at least 6 fields", n + 1)));
        }
        let v = parse_numbers(&f[..6], path, &format!("line {}", n + 1))?;
        out.push(OxtsRecord {
            lat: v[0],
            lon: v[1],
            alt: v[2],
            roll: v[3],
            pitch: v[4],
            yaw: v[5],
        });
    }
    Ok(out)
}

/// Mercator coordinates with the scale of latitude `lat0`.
fn mercator(lat: f64, lon: f64, lat0: f64) -> (f64, f64) {
    let scale = (lat0.to_radians()).cos();
    let x = scale * lon.to_radians() * EARTH_RADIUS;
    let y = scale * EARTH_RADIUS * ((90.0 + lat).to_radians() / 2.0).tan().ln();
    (x, y)
}

fn inverse_mercator(x: f64, y: f64, lat0: f64) -> (f64, f64) {
    let scale = (lat0.to_radians()).cos();
    let lon = (x / (scale * EARTH_RADIUS)).to_degrees();
    let lat = 2.0 * (y / (scale * EARTH_RADIUS)).exp().atan().to_degrees() - 90.0;
    (lat, lon)
}

/// IMU-to-world poses. The world frame sits at the first IMU position,
/// z up, x along the first heading.
pub fn oxts_poses(records: &[OxtsRecord]) -> Vec<Pose> {
    let Some(first) = records.first() else {
        return vec![];
    };
    let absolute = |r: &OxtsRecord| {
        let (x, y) = mercator(r.lat, r.lon, first.lat);
        Pose::new(
            UnitQuaternion::from_euler_angles(r.roll, r.pitch, r.yaw),
            Vector3::new(x, y, r.alt),
        )
    };
    let p0 = absolute(first);
    let origin = Pose::new(UnitQuaternion::from_euler_angles(0.0, 0.0, first.yaw), p0.translation).inverse();
    records.iter().map(|r| origin.compose(&absolute(r))).collect()
}

/// Paths of one sequence's files.
#[derive(Clone, Debug, PartialEq)]
pub struct KittiSequence {
    pub calib: PathBuf,
    pub labels: PathBuf,
    pub oxts: PathBuf,
    pub images: PathBuf,
    pub velodyne: PathBuf,
}

impl KittiSequence {
    pub fn flat(dir: &Path) -> Self {
        Self {
            calib: dir.join("calib.txt"),
            labels: dir.join("label_02.txt"),
            oxts: dir.join("oxts.txt"),
            images: dir.join("image_02"),
            velodyne: dir.join("velodyne"),
        }
    }

    pub fn official(root: &Path, sequence: &str) -> Self {
        Self {
            calib: root.join("calib").join(format!("{sequence}.txt")),
            labels: root.join("label_02").join(format!("{sequence}.txt")),
            oxts: root.join("oxts").join(format!("{sequence}.txt")),
            images: root.join("image_02").join(sequence),
            velodyne: root.join("velodyne").join(sequence),
        }
    }

    /// Flat layout when `sequence` is `None`, else the official tree.
    /// Fails naming the first missing file.
    pub fn locate(root: &Path, sequence: Option<&str>) -> Result<Self> {
        let s = match sequence {
            Some(q) => Self::official(root, q),
            None => Self::flat(root),
        };
        for p in [&s.calib, &s.labels, &s.oxts, &s.images] {
            if !p.exists() {
                return Err(Error::io(
                    p.clone(),
                    std::io::Error::new(std::io::ErrorKind::NotFound, "required KITTI file is missing"),
                ));
            }
        }
        Ok(s)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConvertReport {
    pub frames: usize,
    pub boxes_per_frame: Vec<usize>,
    pub warnings: Vec<String>,
}

fn read_text(path: &Path) -> Result<String> {
    let bytes = crate::io::read_file(path)?;
    String::from_utf8(bytes).map_err(|_| Error::format(path, "not UTF-8 text"))
}

/// Frame numbers of the `NNNNNN.png` files in `dir`, sorted.
fn image_frames(dir: &Path) -> Result<Vec<usize>> {
    let mut frames = vec![];
    for e in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let e = e.map_err(|e| Error::io(dir, e))?;
        let name = e.file_name().to_string_lossy().to_string();
        if let Some(stem) = name.strip_suffix(".png") {
            if let Ok(k) = stem.parse::<usize>() {
                frames.push(k);
            }
        }
    }
    frames.sort_unstable();
    if frames.is_empty() {
        return Err(Error::format(dir, "no NNNNNN.png images"));
    }
    Ok(frames)
}

pub fn read_velodyne(path: &Path) -> Result<PointCloud> {
    let bytes = crate::io::read_file(path)?;
    if bytes.len() % 16 != 0 {
        return Err(Error::format(path, "Velodyne scan size is not a multiple of 16 bytes"));
    }
    let positions = bytes
        .chunks_exact(16)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes([c[i], c[i + 1], c[i + 2], c[i + 3]]) as f64;
            Vector3::new(f(0), f(4), f(8))
        })
        .collect();
    PointCloud::new(positions, None)
}

pub fn encode_velodyne(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for p in &cloud.positions {
        for v in [p.x, p.y, p.z, 0.0] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// World box of a label seen from a sensor at `sensor_pose`.
fn label_box(label: &KittiLabel, world_from_rect: &Pose) -> Result<BoundingBox3D> {
    let [h, w, l] = label.dims_hwl;
    let loc = Vector3::from(label.location);
    let center = world_from_rect.transform_point(&(loc - Vector3::new(0.0, h / 2.0, 0.0)));
    let heading = world_from_rect.transform_vector(&Vector3::new(label.rotation_y.cos(), 0.0, -label.rotation_y.sin()));
    BoundingBox3D::new([center.x, center.y, center.z], [l, w, h], heading.y.atan2(heading.x))
}

/// Converts a sequence into a manifest in `out`, copying images and
/// writing scans as PLY. DontCare lines are skipped.
pub fn convert_kitti(seq: &KittiSequence, out: &Path) -> Result<(Dataset, ConvertReport)> {
    let calib = KittiCalib::parse(&read_text(&seq.calib)?, &seq.calib)?;
    let labels = parse_labels(&read_text(&seq.labels)?, &seq.labels)?;
    let oxts = parse_oxts(&read_text(&seq.oxts)?, &seq.oxts)?;
    let frames = image_frames(&seq.images)?;
    let mut report = ConvertReport {
        frames: frames.len(),
        ..Default::default()
    };
    let last = *frames.last().expect("image_frames is non-empty");
    if oxts.len() <= last {
        return Err(Error::format(
            &seq.oxts,
            format!("{} OXTS records but images go up to frame {last}", oxts.len()),
        ));
    }
    let imu = oxts_poses(&oxts);
    let first = crate::io::png::read_png(&seq.images.join(format!("{:06}.png", frames[0])))?;
    let cam = calib.camera(first.width, first.height);
    let imu_from_velo = calib.velo_from_imu().inverse();
    let velo_from_rect = calib.rect_from_velo().inverse();

    let mut by_frame: BTreeMap<usize, Vec<&KittiLabel>> = BTreeMap::new();
    for l in &labels {
        if l.is_dont_care() {
            continue;
        }
        if frames.binary_search(&l.frame).is_err() {
            report.warnings.push(format!("label for frame {} has no image; ignored", l.frame));
            continue;
        }
        by_frame.entry(l.frame).or_default().push(l);
    }

    let mut records = vec![];
    for &k in &frames {
        let image_rel = format!("images/{k:06}.png");
        let src = seq.images.join(format!("{k:06}.png"));
        let bytes = crate::io::read_file(&src)?;
        crate::io::atomic_write(&out.join(&image_rel), &bytes)?;
        let scan = seq.velodyne.join(format!("{k:06}.bin"));
        let cloud = if scan.exists() {
            let rel = format!("clouds/{k:06}.ply");
            crate::io::ply::write_ply(&out.join(&rel), &read_velodyne(&scan)?)?;
            Some(rel)
        } else {
            report.warnings.push(format!("frame {k}: no Velodyne scan at {}", scan.display()));
            None
        };
        let sensor_pose = imu[k].compose(&imu_from_velo);
        let world_from_rect = sensor_pose.compose(&velo_from_rect);
        let mut observations = vec![];
        for l in by_frame.get(&k).map(|v| v.as_slice()).unwrap_or(&[]) {
            observations.push(Observation {
                track_id: u32::try_from(l.track_id).map_err(|_| Error::format(&seq.labels, format!("track id {} out of range", l.track_id)))?,
                class: l.class.clone(),
                bbox: label_box(l, &world_from_rect).map_err(|e| Error::format(&seq.labels, format!("frame {k}: {e}")))?,
            });
        }
        report.boxes_per_frame.push(observations.len());
        records.push(FrameRecord {
            index: k,
            timestamp: FRAME_PERIOD * k as f64,
            sensor_pose,
            image: image_rel,
            cloud,
            depth: None,
            observations,
        });
    }
    let manifest = SceneManifest {
        version: MANIFEST_VERSION,
        camera: cam,
        camera_from_sensor: calib.camera_from_velo(),
        conventions: Conventions::default(),
        motion_plane_normal: [0.0, 0.0, 1.0],
        frames: records,
    };
    manifest.validate()?;
    let ds = Dataset::new(manifest, out)?;
    ds.save(&out.join("manifest.json"))?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    Ok((ds, report))
}

/// Geodetic anchor and IMU mounting used when exporting.
#[derive(Clone, Debug, PartialEq)]
pub struct KittiExport {
    pub velo_from_imu: Pose,
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub origin_alt: f64,
}

impl Default for KittiExport {
    fn default() -> Self {
        Self {
            velo_from_imu: Pose::new(UnitQuaternion::identity(), Vector3::new(-0.81, 0.32, -0.8)),
            origin_lat: 49.011,
            origin_lon: 8.4229,
            origin_alt: 112.8,
        }
    }
}

/// Writes a manifest's frames as a flat KITTI tracking sequence. The
/// camera must sit at the rectified reference (no stereo offset), and
/// labels assume its y axis points down the world z axis.
pub fn write_kitti_sequence(
    dir: &Path,
    manifest: &SceneManifest,
    images: &[RgbImage],
    clouds: &[PointCloud],
    opts: &KittiExport,
) -> Result<()> {
    manifest.validate()?;
    if images.len() != manifest.frames.len() || clouds.len() != manifest.frames.len() {
        return Err(Error::shape("one image and one cloud per frame are required"));
    }
    let cam = &manifest.camera;
    let mut k = Matrix3x4::zeros();
    k[(0, 0)] = cam.fx;
    k[(1, 1)] = cam.fy;
    k[(0, 2)] = cam.cx;
    k[(1, 2)] = cam.cy;
    k[(2, 2)] = 1.0;
    let calib = KittiCalib {
        p2: k,
        r_rect: Matrix3::identity(),
        tr_velo_cam: pose_to34(&manifest.camera_from_sensor),
        tr_imu_velo: pose_to34(&opts.velo_from_imu),
    };
    crate::io::atomic_write(&dir.join("calib.txt"), calib.to_text().as_bytes())?;

    let (x0, y0) = mercator(opts.origin_lat, opts.origin_lon, opts.origin_lat);
    let imu0 = manifest.frames[0].sensor_pose.compose(&opts.velo_from_imu);
    let mut oxts = String::new();
    let mut labels = String::new();
    for (i, f) in manifest.frames.iter().enumerate() {
        let imu = f.sensor_pose.compose(&opts.velo_from_imu);
        let d = imu.translation - imu0.translation;
        let (lat, lon) = inverse_mercator(x0 + d.x, y0 + d.y, opts.origin_lat);
        let (roll, pitch, yaw) = imu.rotation.euler_angles();
        let _ = write!(oxts, "{lat} {lon} {} {roll} {pitch} {yaw}", opts.origin_alt + d.z);
        // Velocities, accelerations and accuracies are not used.
        oxts.push_str(&" 0".repeat(24));
        oxts.push('\n');

        let rect_from_world = manifest.camera_from_sensor.compose(&f.sensor_pose.inverse());
        for o in &f.observations {
            let b = &o.bbox;
            let bottom = Vector3::new(b.center[0], b.center[1], b.center[2] - b.size[2] / 2.0);
            let loc = rect_from_world.transform_point(&bottom);
            let dir = rect_from_world.transform_vector(&Vector3::new(b.yaw.cos(), b.yaw.sin(), 0.0));
            let ry = (-dir.z).atan2(dir.x);
            let alpha = ry - loc.x.atan2(loc.z);
            let pose = b.pose();
            let mut lo = [f64::INFINITY; 2];
            let mut hi = [f64::NEG_INFINITY; 2];
            for c in b.local_corners() {
                let p = rect_from_world.transform_point(&pose.transform_point(&c));
                if let Some((px, _)) = project_point(&p, cam) {
                    lo = [lo[0].min(px.x), lo[1].min(px.y)];
                    hi = [hi[0].max(px.x), hi[1].max(px.y)];
                }
            }
            let clamp = |v: f64, m: u32| if v.is_finite() { v.clamp(0.0, m as f64) } else { 0.0 };
            let _ = writeln!(
                labels,
                "{} {} {} 0 0 {alpha:.6} {:.2} {:.2} {:.2} {:.2} {} {} {} {} {} {} {}",
                f.index,
                o.track_id,
                o.class,
                clamp(lo[0], cam.width),
                clamp(lo[1], cam.height),
                clamp(hi[0], cam.width),
                clamp(hi[1], cam.height),
                b.size[2],
                b.size[1],
                b.size[0],
                loc.x,
                loc.y,
                loc.z,
                ry
            );
        }
        crate::io::png::write_png(&dir.join("image_02").join(format!("{:06}.png", f.index)), &images[i])?;
        crate::io::atomic_write(
            &dir.join("velodyne").join(format!("{:06}.bin", f.index)),
            &encode_velodyne(&clouds[i]),
        )?;
    }
    crate::io::atomic_write(&dir.join("oxts.txt"), oxts.as_bytes())?;
    crate::io::atomic_write(&dir.join("label_02.txt"), labels.as_bytes())?;
    Ok(())
}
