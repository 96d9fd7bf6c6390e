//! PLY reading and writing for point clouds.
//!
//! Positions are stored as `double`, colors as `uchar` red/green/blue and part
//! labels as a `uint` property named `label`. Both `ascii 1.0` and
//! `binary_little_endian 1.0` bodies are supported. Unknown vertex properties
//! are skipped on read; elements after `vertex` are ignored.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::geometry::PointCloud;

#[derive(Debug, thiserror::Error)]
pub enum PlyError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed PLY: {0}")]
    Format(String),
}

fn bad(msg: impl Into<String>) -> PlyError {
    PlyError::Format(msg.into())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyEncoding {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Clone, Copy, Debug, PartialEq)]
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
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

fn to_byte(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Serializes `cloud` into PLY bytes.
pub fn to_bytes(cloud: &PointCloud, encoding: PlyEncoding) -> Vec<u8> {
    let mut out = Vec::new();
    let format = match encoding {
        PlyEncoding::Ascii => "ascii",
        PlyEncoding::BinaryLittleEndian => "binary_little_endian",
    };
    let _ = write!(out, "ply\nformat {format} 1.0\nelement vertex {}\n", cloud.len());
    out.extend_from_slice(b"property double x\nproperty double y\nproperty double z\n");
    if cloud.colors.is_some() {
        out.extend_from_slice(b"property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    if cloud.labels.is_some() {
        out.extend_from_slice(b"property uint label\n");
    }
    out.extend_from_slice(b"end_header\n");
    for (i, p) in cloud.points.iter().enumerate() {
        let rgb = cloud.colors.as_ref().map(|c| c[i].map(to_byte));
        let label = cloud.labels.as_ref().map(|l| l[i]);
        match encoding {
            PlyEncoding::Ascii => {
                let _ = write!(out, "{} {} {}", p[0], p[1], p[2]);
                if let Some(c) = rgb {
                    let _ = write!(out, " {} {} {}", c[0], c[1], c[2]);
                }
                if let Some(l) = label {
                    let _ = write!(out, " {l}");
                }
                out.push(b'\n');
            }
            PlyEncoding::BinaryLittleEndian => {
                for v in p {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                if let Some(c) = rgb {
                    out.extend_from_slice(&c);
                }
                if let Some(l) = label {
                    out.extend_from_slice(&l.to_le_bytes());
                }
            }
        }
    }
    out
}

pub fn write_ply(path: impl AsRef<Path>, cloud: &PointCloud, encoding: PlyEncoding) -> Result<(), PlyError> {
    fs::write(path, to_bytes(cloud, encoding))?;
    Ok(())
}

struct Header {
    encoding: PlyEncoding,
    count: usize,
    props: Vec<(String, Scalar)>,
}

fn read_header(reader: &mut impl BufRead) -> Result<Header, PlyError> {
    let mut line = String::new();
    let mut next = |line: &mut String| -> Result<(), PlyError> {
        line.clear();
        if reader.read_line(line)? == 0 {
            return Err(bad("unexpected end of header"));
        }
        Ok(())
    };
    next(&mut line)?;
    if line.trim_end() != "ply" {
        return Err(bad("missing 'ply' magic"));
    }
    let mut encoding = None;
    let mut count = None;
    let mut props = Vec::new();
    // Which element the following property lines belong to.
    let mut in_vertex = false;
    loop {
        next(&mut line)?;
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => encoding = Some(PlyEncoding::Ascii),
            ["format", "binary_little_endian", _] => encoding = Some(PlyEncoding::BinaryLittleEndian),
            ["format", other, ..] => return Err(bad(format!("unsupported format {other}"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, n] => {
                in_vertex = *name == "vertex";
                if in_vertex {
                    count = Some(n.parse().map_err(|_| bad(format!("bad vertex count {n}")))?);
                } else if count.is_none() {
                    return Err(bad("elements before vertex are not supported"));
                }
            }
            ["property", "list", ..] if in_vertex => return Err(bad("list properties on vertex")),
            ["property", ty, name] if in_vertex => {
                let s = Scalar::parse(ty).ok_or_else(|| bad(format!("unknown type {ty}")))?;
                props.push((name.to_string(), s));
            }
            ["property", ..] => {}
            other => return Err(bad(format!("unexpected header line {other:?}"))),
        }
    }
    Ok(Header {
        encoding: encoding.ok_or_else(|| bad("missing format line"))?,
        count: count.ok_or_else(|| bad("missing vertex element"))?,
        props,
    })
}

/// Parses PLY bytes into a point cloud.
pub fn from_bytes(bytes: &[u8]) -> Result<PointCloud, PlyError> {
    let mut reader = BufReader::new(bytes);
    let header = read_header(&mut reader)?;
    let index = |name: &str| header.props.iter().position(|(n, _)| n == name);
    let xyz = [index("x"), index("y"), index("z")];
    if xyz.iter().any(Option::is_none) {
        return Err(bad("vertex needs x, y and z"));
    }
    let xyz = xyz.map(Option::unwrap);
    let rgb = match [index("red"), index("green"), index("blue")] {
        [Some(r), Some(g), Some(b)] => Some([r, g, b]),
        [None, None, None] => None,
        _ => return Err(bad("partial color properties")),
    };
    let label = index("label");

    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(header.count);
    match header.encoding {
        PlyEncoding::Ascii => {
            let mut line = String::new();
            while rows.len() < header.count {
                line.clear();
                if reader.read_line(&mut line)? == 0 {
                    return Err(bad(format!("expected {} vertices, found {}", header.count, rows.len())));
                }
                if line.trim().is_empty() {
                    continue;
                }
                let vals: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse::<f64>).collect();
                let vals = vals.map_err(|e| bad(format!("vertex {}: {e}", rows.len())))?;
                if vals.len() != header.props.len() {
                    return Err(bad(format!("vertex {} has {} values", rows.len(), vals.len())));
                }
                rows.push(vals);
            }
        }
        PlyEncoding::BinaryLittleEndian => {
            let stride: usize = header.props.iter().map(|(_, s)| s.size()).sum();
            let mut buf = vec![0u8; stride];
            for i in 0..header.count {
                reader
                    .read_exact(&mut buf)
                    .map_err(|_| bad(format!("truncated body at vertex {i}")))?;
                let mut off = 0;
                let row = header
                    .props
                    .iter()
                    .map(|(_, s)| {
                        let v = s.decode(&buf[off..]);
                        off += s.size();
                        v
                    })
                    .collect();
                rows.push(row);
            }
        }
    }
    let points = rows.iter().map(|r| xyz.map(|i| r[i])).collect();
    let mut cloud = PointCloud::new(points);
    if let Some(rgb) = rgb {
        cloud.colors = Some(rows.iter().map(|r| rgb.map(|i| r[i] / 255.0)).collect());
    }
    if let Some(l) = label {
        cloud.labels = Some(rows.iter().map(|r| r[l] as u32).collect());
    }
    Ok(cloud)
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<PointCloud, PlyError> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> PointCloud {
        let mut c = PointCloud::with_colors(
            vec![[0.1, -0.25, 1.0 / 3.0], [1e-17, 2.5e10, -0.0]],
            vec![[0.0, 0.5, 1.0], [0.2, 0.3, 0.4]],
        )
        .unwrap();
        c.labels = Some(vec![3, 7]);
        c
    }

    #[test]
    fn ascii_round_trip_is_stable() {
        let first = to_bytes(&sample(), PlyEncoding::Ascii);
        let back = from_bytes(&first).unwrap();
        assert_eq!(back.points, sample().points);
        assert_eq!(back.labels, Some(vec![3, 7]));
        assert_eq!(to_bytes(&back, PlyEncoding::Ascii), first);
    }

    #[test]
    fn binary_round_trip_is_stable() {
        let first = to_bytes(&sample(), PlyEncoding::BinaryLittleEndian);
        let back = from_bytes(&first).unwrap();
        assert_eq!(back.points, sample().points);
        assert_eq!(to_bytes(&back, PlyEncoding::BinaryLittleEndian), first);
    }

    #[test]
    fn colors_quantize_to_bytes() {
        let back = from_bytes(&to_bytes(&sample(), PlyEncoding::Ascii)).unwrap();
        let c = back.colors.unwrap();
        assert_eq!(c[0], [0.0, 128.0 / 255.0, 1.0]);
    }

    #[test]
    fn reads_foreign_float_file_with_extra_properties() {
        let text = b"ply\nformat ascii 1.0\ncomment x\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nproperty float nx\nelement face 0\nproperty list uchar int vertex_indices\nend_header\n1 2 3 9\n4 5 6 9\n";
        let c = from_bytes(text).unwrap();
        assert_eq!(c.points, vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        assert!(c.colors.is_none());
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(from_bytes(b"nope\n").is_err());
        assert!(from_bytes(b"ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n").is_err());
        assert!(from_bytes(b"ply\nformat binary_big_endian 1.0\nend_header\n").is_err());
        let mut bin = to_bytes(&sample(), PlyEncoding::BinaryLittleEndian);
        bin.truncate(bin.len() - 3);
        assert!(from_bytes(&bin).is_err());
    }

    proptest! {
        #[test]
        fn any_cloud_round_trips(
            pts in prop::collection::vec(prop::array::uniform3(-1e3f64..1e3), 1..40),
            binary in any::<bool>(),
        ) {
            let enc = if binary { PlyEncoding::BinaryLittleEndian } else { PlyEncoding::Ascii };
            let colors = pts.iter().map(|p| [p[0].abs().fract(), p[1].abs().fract(), p[2].abs().fract()]).collect();
            let cloud = PointCloud::with_colors(pts.clone(), colors).unwrap();
            let first = to_bytes(&cloud, enc);
            let back = from_bytes(&first).unwrap();
            prop_assert_eq!(&back.points, &pts);
            prop_assert_eq!(to_bytes(&back, enc), first);
        }
    }
}
