//! PLY point clouds (ASCII or binary, either endianness, on read; binary
//! little-endian doubles plus `uchar` colors on write) and Gaussian export
//! in the layout common splatting viewers expect.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;

use crate::appearance::{sh_basis_len, TimeStamp};
use crate::error::{Error, Result};
use crate::scenegraph::GaussianSet;

/// Positions with optional RGB in `[0, 1]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<Vector3<f64>>,
    pub colors: Option<Vec<[f64; 3]>>,
}

impl PointCloud {
    pub fn new(positions: Vec<Vector3<f64>>, colors: Option<Vec<[f64; 3]>>) -> Result<Self> {
        if let Some(c) = &colors {
            if c.len() != positions.len() {
                return Err(Error::shape("point colors and positions differ in length"));
            }
        }
        Ok(Self { positions, colors })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Scalar> {
        Some(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read(self, b: &[u8], little: bool) -> f64 {
        macro_rules! num {
            ($t:ty, $n:expr) => {{
                let mut a = [0u8; $n];
                a.copy_from_slice(&b[..$n]);
                (if little { <$t>::from_le_bytes(a) } else { <$t>::from_be_bytes(a) }) as f64
            }};
        }
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => num!(i16, 2),
            Scalar::U16 => num!(u16, 2),
            Scalar::I32 => num!(i32, 4),
            Scalar::U32 => num!(u32, 4),
            Scalar::F32 => num!(f32, 4),
            Scalar::F64 => num!(f64, 8),
        }
    }
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<(String, Scalar)>,
    has_list: bool,
}

#[derive(Clone, Copy, PartialEq)]
enum Encoding {
    Ascii,
    Binary { little: bool },
}

pub fn decode_ply(bytes: &[u8], path: &Path) -> Result<PointCloud> {
    let bad = |m: String| Error::format(path, m);
    let end = bytes
        .windows(11)
        .position(|w| w == b"end_header\n")
        .ok_or_else(|| bad("missing end_header".into()))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not UTF-8".into()))?;
    let body = &bytes[end + 11..];
    let mut lines = header.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(bad("not a PLY file".into()));
    }
    let mut encoding = None;
    let mut elements: Vec<Element> = vec![];
    for line in lines {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", f, _] => {
                encoding = Some(match *f {
                    "ascii" => Encoding::Ascii,
                    "binary_little_endian" => Encoding::Binary { little: true },
                    "binary_big_endian" => Encoding::Binary { little: false },
                    other => return Err(bad(format!("unknown format {other}"))),
                })
            }
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| bad(format!("bad element count {count}")))?,
                props: vec![],
                has_list: false,
            }),
            ["property", "list", ..] => {
                elements
                    .last_mut()
                    .ok_or_else(|| bad("property before element".into()))?
                    .has_list = true
            }
            ["property", ty, name] => {
                let s = Scalar::parse(ty).ok_or_else(|| bad(format!("unknown property type {ty}")))?;
                elements
                    .last_mut()
                    .ok_or_else(|| bad("property before element".into()))?
                    .props
                    .push((name.to_string(), s));
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            _ => return Err(bad(format!("unexpected header line {line:?}"))),
        }
    }
    let encoding = encoding.ok_or_else(|| bad("missing format line".into()))?;
    let vi = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| bad("no vertex element".into()))?;
    if elements[..=vi].iter().any(|e| e.has_list) {
        return Err(bad("list properties before or in the vertex element are not supported".into()));
    }
    let vertex = &elements[vi];
    let find = |n: &str| vertex.props.iter().position(|(p, _)| p == n);
    let (ix, iy, iz) = match (find("x"), find("y"), find("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(bad("vertex element lacks x, y or z".into())),
    };
    let rgb = match (find("red"), find("green"), find("blue")) {
        (Some(r), Some(g), Some(b)) => Some([r, g, b]),
        _ => None,
    };
    let color_scale = |k: usize| match vertex.props[k].1 {
        Scalar::U8 => 1.0 / 255.0,
        Scalar::U16 => 1.0 / 65535.0,
        _ => 1.0,
    };

    let mut values = vec![0.0; vertex.props.len()];
    let mut positions = Vec::with_capacity(vertex.count);
    let mut colors = rgb.map(|_| Vec::with_capacity(vertex.count));
    let mut push = |values: &[f64]| {
        positions.push(Vector3::new(values[ix], values[iy], values[iz]));
        if let (Some(c), Some(k)) = (colors.as_mut(), rgb) {
            c.push([0, 1, 2].map(|j| values[k[j]] * color_scale(k[j])));
        }
    };
    match encoding {
        Encoding::Ascii => {
            let text = std::str::from_utf8(body).map_err(|_| bad("body is not UTF-8".into()))?;
            let mut rows = text.lines().filter(|l| !l.trim().is_empty());
            for e in &elements[..vi] {
                for _ in 0..e.count {
                    rows.next().ok_or_else(|| bad("truncated body".into()))?;
                }
            }
            for _ in 0..vertex.count {
                let row = rows.next().ok_or_else(|| bad("truncated body".into()))?;
                let mut it = row.split_whitespace();
                for v in values.iter_mut() {
                    *v = it
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| bad(format!("bad vertex row {row:?}")))?;
                }
                push(&values);
            }
        }
        Encoding::Binary { little } => {
            let row_size = |e: &Element| e.props.iter().map(|(_, s)| s.size()).sum::<usize>();
            let mut off: usize = elements[..vi].iter().map(|e| e.count * row_size(e)).sum();
            let stride = row_size(vertex);
            if body.len() < off + stride * vertex.count {
                return Err(bad("truncated body".into()));
            }
            for _ in 0..vertex.count {
                let mut o = off;
                for (v, (_, s)) in values.iter_mut().zip(&vertex.props) {
                    *v = s.read(&body[o..], little);
                    o += s.size();
                }
                push(&values);
                off += stride;
            }
        }
    }
    PointCloud::new(positions, colors)
}

pub fn encode_ply(cloud: &PointCloud) -> Vec<u8> {
    let mut h = String::from("ply\nformat binary_little_endian 1.0\n");
    let _ = writeln!(h, "element vertex {}", cloud.len());
    h.push_str("property double x\nproperty double y\nproperty double z\n");
    if cloud.colors.is_some() {
        h.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    h.push_str("end_header\n");
    let mut out = h.into_bytes();
    for (i, p) in cloud.positions.iter().enumerate() {
        for v in p.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(c) = &cloud.colors {
            out.extend(c[i].map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        }
    }
    out
}

pub fn read_ply(path: &Path) -> Result<PointCloud> {
    decode_ply(&super::read_file(path)?, path)
}

pub fn write_ply(path: &Path, cloud: &PointCloud) -> Result<()> {
    super::atomic_write(path, &encode_ply(cloud))
}

/// Gaussians as `float` properties `x y z nx ny nz f_dc_* f_rest_*
/// opacity scale_* rot_*`, with SH coefficients evaluated at `t` and the
/// higher bands written channel-major.
pub fn encode_gaussians(set: &GaussianSet, t: TimeStamp) -> Vec<u8> {
    let basis = sh_basis_len(set.appearance.degree());
    let rest = 3 * (basis - 1);
    let mut h = String::from("ply\nformat binary_little_endian 1.0\n");
    let _ = writeln!(h, "element vertex {}", set.len());
    for p in ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"] {
        let _ = writeln!(h, "property float {p}");
    }
    for k in 0..rest {
        let _ = writeln!(h, "property float f_rest_{k}");
    }
    for p in ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"] {
        let _ = writeln!(h, "property float {p}");
    }
    h.push_str("end_header\n");
    let mut out = h.into_bytes();
    let mut coeffs = vec![0.0; 3 * basis];
    let put = |out: &mut Vec<u8>, v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
    for i in 0..set.len() {
        set.appearance.coefficients_at(i, t, &mut coeffs);
        set.means[i].iter().for_each(|&v| put(&mut out, v));
        (0..3).for_each(|_| put(&mut out, 0.0));
        (0..3).for_each(|c| put(&mut out, coeffs[c]));
        for c in 0..3 {
            for b in 1..basis {
                put(&mut out, coeffs[3 * b + c]);
            }
        }
        put(&mut out, set.opacity_logits[i]);
        set.log_scales[i].iter().for_each(|&v| put(&mut out, v));
        set.rotations[i].iter().for_each(|&v| put(&mut out, v));
    }
    out
}

pub fn write_gaussians(path: &Path, set: &GaussianSet, t: TimeStamp) -> Result<()> {
    super::atomic_write(path, &encode_gaussians(set, t))
}
