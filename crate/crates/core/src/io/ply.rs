//! Point clouds in PLY (ASCII and binary) and their conversion to an initial
//! Gaussian cloud.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::sh::rgb_to_dc;
use crate::types::{logit, CameraView, GaussianCloud, Gaussian3D, Vec3, IDENTITY_QUAT};

/// Opacity of every freshly initialized Gaussian.
pub const INIT_OPACITY: f64 = 0.1;
/// Neighbors averaged for the initial scale.
pub const INIT_NEIGHBORS: usize = 3;
/// Scale of a Gaussian with no neighbors at all.
pub const LONE_POINT_SCALE: f64 = 0.01;
const MIN_SCALE: f64 = 1e-7;

/// A colored point; color channels in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub position: Vec3,
    pub color: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
    BinaryBigEndian,
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
    fn parse(name: &str) -> Option<Scalar> {
        Some(match name {
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

    fn decode(self, b: &[u8], big_endian: bool) -> f64 {
        macro_rules! num {
            ($t:ty, $n:expr) => {{
                let mut a = [0u8; $n];
                a.copy_from_slice(&b[..$n]);
                (if big_endian { <$t>::from_be_bytes(a) } else { <$t>::from_le_bytes(a) }) as f64
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

    /// Divisor mapping a stored color to `[0, 1]`.
    fn color_range(self) -> f64 {
        match self {
            Scalar::U8 | Scalar::I8 => 255.0,
            Scalar::U16 | Scalar::I16 => 65535.0,
            _ => 1.0,
        }
    }
}

#[derive(Clone, Debug)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { count: Scalar, item: Scalar },
}

#[derive(Clone, Debug)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

fn malformed(location: impl Into<String>, message: impl Into<String>) -> Error {
    Error::MalformedPly {
        location: location.into(),
        message: message.into(),
    }
}

struct Header {
    format: PlyFormat,
    elements: Vec<Element>,
    lines: usize,
    bytes: usize,
}

fn read_header(r: &mut impl BufRead) -> Result<Header> {
    let mut line = String::new();
    let mut lines = 0;
    let mut bytes = 0;
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        line.clear();
        let n = r
            .read_line(&mut line)
            .map_err(|e| malformed(format!("line {}", lines + 1), e.to_string()))?;
        if n == 0 {
            return Err(malformed(format!("line {}", lines + 1), "file ends inside the header"));
        }
        lines += 1;
        bytes += n;
        let loc = format!("line {lines}");
        let words: Vec<&str> = line.split_whitespace().collect();
        if lines == 1 {
            if words != ["ply"] {
                return Err(malformed(loc, "missing 'ply' magic"));
            }
            continue;
        }
        match words.as_slice() {
            [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", f, _version] => {
                format = Some(match *f {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    "binary_big_endian" => PlyFormat::BinaryBigEndian,
                    other => return Err(malformed(loc, format!("unknown format '{other}'"))),
                })
            }
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| malformed(loc.clone(), format!("bad element count '{count}'")))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            ["property", "list", count, item, _name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| malformed(loc.clone(), "property before any element"))?;
                let (Some(count), Some(item)) = (Scalar::parse(count), Scalar::parse(item)) else {
                    return Err(malformed(loc, "unknown list property type"));
                };
                el.properties.push(Property::List { count, item });
            }
            ["property", ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| malformed(loc.clone(), "property before any element"))?;
                let ty = Scalar::parse(ty).ok_or_else(|| malformed(loc.clone(), format!("unknown type '{ty}'")))?;
                el.properties.push(Property::Scalar {
                    name: name.to_string(),
                    ty,
                });
            }
            ["end_header"] => break,
            _ => return Err(malformed(loc, format!("unexpected header line '{}'", line.trim_end()))),
        }
    }
    let format = format.ok_or_else(|| malformed(format!("line {lines}"), "header has no format line"))?;
    Ok(Header {
        format,
        elements,
        lines,
        bytes,
    })
}

/// Column indices of the position and color properties among the scalars
/// of the vertex element.
struct VertexLayout {
    xyz: [usize; 3],
    rgb: Option<([usize; 3], f64)>,
}

fn vertex_layout(el: &Element) -> Result<VertexLayout> {
    let find = |names: &[&str]| {
        el.properties.iter().position(|p| matches!(p, Property::Scalar { name, .. } if names.contains(&name.as_str())))
    };
    let mut xyz = [0; 3];
    for (slot, name) in xyz.iter_mut().zip(["x", "y", "z"]) {
        *slot = find(&[name]).ok_or_else(|| malformed("header", format!("vertex element lacks '{name}'")))?;
    }
    let rgb = match (find(&["red", "r"]), find(&["green", "g"]), find(&["blue", "b"])) {
        (Some(r), Some(g), Some(b)) => {
            let Property::Scalar { ty, .. } = el.properties[r] else { unreachable!() };
            Some(([r, g, b], ty.color_range()))
        }
        _ => None,
    };
    Ok(VertexLayout { xyz, rgb })
}

fn to_point(values: &[f64], layout: &VertexLayout) -> Point {
    let position = Vec3::new(values[layout.xyz[0]], values[layout.xyz[1]], values[layout.xyz[2]]);
    let color = match layout.rgb {
        Some((idx, range)) => idx.map(|i| (values[i] / range).clamp(0.0, 1.0)),
        None => [0.5; 3],
    };
    Point { position, color }
}

/// Reads the vertex element of a PLY file. Points without color are gray.
pub fn read_points(path: &Path) -> Result<Vec<Point>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_points(BufReader::new(file))
}

pub fn parse_points(mut r: impl BufRead) -> Result<Vec<Point>> {
    let header = read_header(&mut r)?;
    let vi = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| malformed("header", "no vertex element"))?;
    let layout = vertex_layout(&header.elements[vi])?;
    let mut points = Vec::new();
    match header.format {
        PlyFormat::Ascii => {
            let mut line_no = header.lines;
            let mut line = String::new();
            for (ei, el) in header.elements.iter().enumerate() {
                for _ in 0..el.count {
                    line.clear();
                    line_no += 1;
                    let loc = || format!("line {line_no}");
                    if r.read_line(&mut line).map_err(|e| malformed(loc(), e.to_string()))? == 0 {
                        return Err(malformed(loc(), format!("expected {} '{}' rows", el.count, el.name)));
                    }
                    if ei != vi {
                        continue;
                    }
                    let mut words = line.split_whitespace();
                    let mut values = Vec::with_capacity(el.properties.len());
                    for p in &el.properties {
                        let Property::Scalar { name, .. } = p else {
                            return Err(malformed(loc(), "list property in vertex element"));
                        };
                        let w = words.next().ok_or_else(|| malformed(loc(), format!("missing value for '{name}'")))?;
                        let v: f64 = w.parse().map_err(|_| malformed(loc(), format!("bad number '{w}'")))?;
                        values.push(v);
                    }
                    points.push(to_point(&values, &layout));
                }
            }
        }
        PlyFormat::BinaryLittleEndian | PlyFormat::BinaryBigEndian => {
            let big = header.format == PlyFormat::BinaryBigEndian;
            let mut offset = header.bytes;
            let mut buf = [0u8; 8];
            let mut read = |ty: Scalar, offset: &mut usize| -> Result<f64> {
                let n = ty.size();
                r.read_exact(&mut buf[..n])
                    .map_err(|_| malformed(format!("byte {offset}"), "file ends inside the body"))?;
                *offset += n;
                Ok(ty.decode(&buf[..n], big))
            };
            for (ei, el) in header.elements.iter().enumerate() {
                for _ in 0..el.count {
                    let mut values = Vec::with_capacity(el.properties.len());
                    for p in &el.properties {
                        match *p {
                            Property::Scalar { ty, .. } => values.push(read(ty, &mut offset)?),
                            Property::List { count, item } => {
                                let start = offset;
                                let n = read(count, &mut offset)?;
                                if ei == vi {
                                    return Err(malformed(format!("byte {start}"), "list property in vertex element"));
                                }
                                for _ in 0..n as usize {
                                    read(item, &mut offset)?;
                                }
                            }
                        }
                    }
                    if ei == vi {
                        points.push(to_point(&values, &layout));
                    }
                }
            }
        }
    }
    Ok(points)
}

/// Writes points with x, y, z as float and 8-bit colors.
pub fn write_points(path: &Path, points: &[Point], format: PlyFormat) -> Result<()> {
    let mut out = Vec::new();
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
        PlyFormat::BinaryBigEndian => "binary_big_endian",
    };
    write!(
        out,
        "ply\nformat {fmt} 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        points.len()
    )
    .expect("writing to a Vec");
    let byte = |c: f64| (c.clamp(0.0, 1.0) * 255.0).round() as u8;
    for p in points {
        let xyz = [p.position.x as f32, p.position.y as f32, p.position.z as f32];
        let rgb = p.color.map(byte);
        match format {
            PlyFormat::Ascii => {
                writeln!(out, "{} {} {} {} {} {}", xyz[0], xyz[1], xyz[2], rgb[0], rgb[1], rgb[2]).expect("writing to a Vec")
            }
            PlyFormat::BinaryLittleEndian => {
                xyz.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
                out.extend_from_slice(&rgb);
            }
            PlyFormat::BinaryBigEndian => {
                xyz.iter().for_each(|v| out.extend_from_slice(&v.to_be_bytes()));
                out.extend_from_slice(&rgb);
            }
        }
    }
    write_atomic(path, &out)
}

/// Mean distance from each point to its `k` nearest other points (fewer when
/// the cloud is smaller), via a uniform hash grid.
pub fn mean_knn_distance(points: &[Vec3], k: usize) -> Vec<f64> {
    let n = points.len();
    if n <= 1 || k == 0 {
        return vec![LONE_POINT_SCALE; n];
    }
    let k = k.min(n - 1);
    let (lo, hi) = points.iter().fold((points[0], points[0]), |(lo, hi), p| (lo.inf(p), hi.sup(p)));
    let ext = hi - lo;
    let extent = ext.max().max(1e-12);
    // roughly one point per occupied cell, whatever the cloud's dimensionality
    let dims = ext.iter().filter(|&&e| e > 1e-9 * extent).count().max(1);
    let cell = extent / (n as f64).powf(1.0 / dims as f64).ceil();
    let key = |p: &Vec3| {
        let q = (p - lo) / cell;
        (q.x.floor() as i64, q.y.floor() as i64, q.z.floor() as i64)
    };
    let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        grid.entry(key(p)).or_default().push(i);
    }
    const MAX_RING: i64 = 6;
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let c = key(p);
            let mut best: Vec<f64> = Vec::with_capacity(k + 1);
            let mut settled = false;
            for ring in 0..=MAX_RING {
                for dx in -ring..=ring {
                    for dy in -ring..=ring {
                        for dz in -ring..=ring {
                            if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                                continue;
                            }
                            let Some(list) = grid.get(&(c.0 + dx, c.1 + dy, c.2 + dz)) else {
                                continue;
                            };
                            for &j in list {
                                if j == i {
                                    continue;
                                }
                                let d = (points[j] - p).norm();
                                if best.len() < k || d < best[k - 1] {
                                    let at = best.partition_point(|&b| b <= d);
                                    best.insert(at, d);
                                    best.truncate(k);
                                }
                            }
                        }
                    }
                }
                // every unvisited point is farther than `ring · cell`
                if best.len() == k && best[k - 1] <= ring as f64 * cell {
                    settled = true;
                    break;
                }
            }
            if !settled {
                // sparse neighborhood: fall back to a full scan
                best = points
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, q)| (q - p).norm())
                    .collect();
                best.sort_by(f64::total_cmp);
                best.truncate(k);
            }
            (best.iter().sum::<f64>() / best.len() as f64).max(MIN_SCALE)
        })
        .collect()
}

/// Isotropic Gaussians at the points: scale from the mean distance to the
/// nearest neighbors, low opacity, constant color.
pub fn cloud_from_points(points: &[Point]) -> GaussianCloud {
    let positions: Vec<Vec3> = points.iter().map(|p| p.position).collect();
    let scales = mean_knn_distance(&positions, INIT_NEIGHBORS);
    let gaussians = points
        .iter()
        .zip(scales)
        .map(|(p, s)| {
            let mut sh = [[0.0; 3]; 16];
            sh[0] = rgb_to_dc(p.color);
            Gaussian3D {
                mean: p.position,
                rotation: IDENTITY_QUAT,
                log_scale: Vec3::repeat(s.ln()),
                opacity_logit: logit(INIT_OPACITY),
                sh,
            }
        })
        .collect();
    GaussianCloud::new(gaussians)
}

pub fn read_point_cloud(path: &Path) -> Result<GaussianCloud> {
    let points = read_points(path)?;
    if points.is_empty() {
        return Err(malformed(path.display().to_string(), "no vertices"));
    }
    Ok(cloud_from_points(&points))
}

/// Points carrying each Gaussian's mean and its color seen head-on from a
/// camera; a convenient seed cloud for synthetic scenes.
pub fn points_from_cloud(cloud: &GaussianCloud, cam: Option<&CameraView>) -> Vec<Point> {
    cloud
        .gaussians
        .iter()
        .map(|g| {
            let dir = cam.map_or(Vec3::new(0.0, 0.0, -1.0), |c| (g.mean - c.center()).normalize());
            let rgb = crate::sh::sh_eval(&g.sh, &dir).map(|c| c.clamp(0.0, 1.0));
            Point {
                position: g.mean,
                color: rgb,
            }
        })
        .collect()
}
