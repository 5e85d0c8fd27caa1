//! PLY reading (ASCII and binary, any scalar/list properties) and the
//! triangle-soup interchange format.
//!
//! Interchange layout: binary little-endian, one `vertex` per triangle corner
//! grouped in threes, float properties `x y z f_dc_0..2 f_rest_0..44 opacity
//! sigma`. Triangle-level properties are repeated on each corner. `f_rest` is
//! channel-major (`f_rest[c * 15 + k - 1]` holds coefficient `k` of channel
//! `c`) and `opacity` is the pre-sigmoid logit.

use std::path::Path;

use crate::geometry::{Triangle, Vec3, SH_COEFFS};

use super::{read_file, write_file_atomic, IoError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Ascii,
    BinaryLittleEndian,
    BinaryBigEndian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
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

    fn decode(self, b: &[u8], big: bool) -> f64 {
        macro_rules! get {
            ($t:ty, $n:expr) => {{
                let a: [u8; $n] = b[..$n].try_into().unwrap();
                (if big {
                    <$t>::from_be_bytes(a)
                } else {
                    <$t>::from_le_bytes(a)
                }) as f64
            }};
        }
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => get!(i16, 2),
            Self::U16 => get!(u16, 2),
            Self::I32 => get!(i32, 4),
            Self::U32 => get!(u32, 4),
            Self::F32 => get!(f32, 4),
            Self::F64 => get!(f64, 8),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PropertyKind {
    Scalar(ScalarType),
    List { count: ScalarType, item: ScalarType },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Property {
    pub name: String,
    pub kind: PropertyKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Element {
    pub name: String,
    pub count: usize,
    pub properties: Vec<Property>,
    /// One row per item; list properties are flattened in place as
    /// `[len, items...]`.
    pub rows: Vec<Vec<f64>>,
}

impl Element {
    /// Column of scalar property `name`, if present.
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let idx = self.properties.iter().position(|p| p.name == name)?;
        if self.properties[..idx]
            .iter()
            .any(|p| matches!(p.kind, PropertyKind::List { .. }))
        {
            // Lists before the column make offsets row-dependent.
            return Some(
                self.rows
                    .iter()
                    .map(|r| scalar_at(&self.properties, r, idx))
                    .collect(),
            );
        }
        Some(self.rows.iter().map(|r| r[idx]).collect())
    }
}

fn scalar_at(props: &[Property], row: &[f64], idx: usize) -> f64 {
    let mut pos = 0;
    for p in &props[..idx] {
        pos += match p.kind {
            PropertyKind::Scalar(_) => 1,
            PropertyKind::List { .. } => 1 + row[pos] as usize,
        };
    }
    row[pos]
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlyData {
    pub format: Format,
    pub elements: Vec<Element>,
}

impl PlyData {
    pub fn element(&self, name: &str) -> Option<&Element> {
        self.elements.iter().find(|e| e.name == name)
    }
}

fn malformed(msg: impl Into<String>) -> IoError {
    IoError::Malformed(msg.into())
}

pub fn parse_ply(bytes: &[u8]) -> Result<PlyData, IoError> {
    const END: &[u8] = b"end_header";
    let header_end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| malformed("missing end_header"))?;
    let mut body_start = header_end + END.len();
    if bytes.get(body_start) == Some(&b'\r') {
        body_start += 1;
    }
    if bytes.get(body_start) == Some(&b'\n') {
        body_start += 1;
    }
    let header =
        std::str::from_utf8(&bytes[..header_end]).map_err(|_| malformed("header is not UTF-8"))?;
    let mut lines = header.lines().map(str::trim).filter(|l| !l.is_empty());
    if lines.next() != Some("ply") {
        return Err(malformed("missing 'ply' magic"));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    for line in lines {
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["format", f, version] => {
                if *version != "1.0" {
                    return Err(malformed(format!("unsupported PLY version {version}")));
                }
                format = Some(match *f {
                    "ascii" => Format::Ascii,
                    "binary_little_endian" => Format::BinaryLittleEndian,
                    "binary_big_endian" => Format::BinaryBigEndian,
                    other => return Err(malformed(format!("unknown format {other}"))),
                });
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| malformed(format!("bad element count in '{line}'")))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                    rows: Vec::new(),
                });
            }
            ["property", "list", c, i, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| malformed("property before element"))?;
                let (Some(count), Some(item)) = (ScalarType::parse(c), ScalarType::parse(i)) else {
                    return Err(malformed(format!("bad list types in '{line}'")));
                };
                el.properties.push(Property {
                    name: name.to_string(),
                    kind: PropertyKind::List { count, item },
                });
            }
            ["property", t, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| malformed("property before element"))?;
                let t = ScalarType::parse(t)
                    .ok_or_else(|| malformed(format!("bad type in '{line}'")))?;
                el.properties.push(Property {
                    name: name.to_string(),
                    kind: PropertyKind::Scalar(t),
                });
            }
            _ => return Err(malformed(format!("unrecognized header line '{line}'"))),
        }
    }
    let format = format.ok_or_else(|| malformed("missing format line"))?;
    let body = &bytes[body_start..];
    match format {
        Format::Ascii => parse_ascii_body(body, &mut elements)?,
        _ => parse_binary_body(body, &mut elements, format == Format::BinaryBigEndian)?,
    }
    Ok(PlyData { format, elements })
}

fn parse_ascii_body(body: &[u8], elements: &mut [Element]) -> Result<(), IoError> {
    let text = std::str::from_utf8(body).map_err(|_| malformed("ASCII body is not UTF-8"))?;
    let mut tokens = text.split_whitespace();
    // Values are rounded to the declared type, so `float` columns read the
    // same from ASCII as from binary files.
    let mut next = |t: ScalarType, what: &str| -> Result<f64, IoError> {
        let tok = tokens
            .next()
            .ok_or_else(|| malformed(format!("unexpected end of data in {what}")))?;
        let v = tok
            .parse::<f64>()
            .map_err(|_| malformed(format!("bad number '{tok}' in {what}")))?;
        Ok(if t == ScalarType::F32 {
            v as f32 as f64
        } else {
            v
        })
    };
    for el in elements.iter_mut() {
        for _ in 0..el.count {
            let mut row = Vec::with_capacity(el.properties.len());
            for p in &el.properties {
                match p.kind {
                    PropertyKind::Scalar(t) => row.push(next(t, &el.name)?),
                    PropertyKind::List { count, item } => {
                        let n = next(count, &el.name)?;
                        row.push(n);
                        for _ in 0..n as usize {
                            row.push(next(item, &el.name)?);
                        }
                    }
                }
            }
            el.rows.push(row);
        }
    }
    Ok(())
}

fn parse_binary_body(body: &[u8], elements: &mut [Element], big: bool) -> Result<(), IoError> {
    let mut pos = 0;
    let mut read = |t: ScalarType, what: &str| -> Result<f64, IoError> {
        let end = pos + t.size();
        if end > body.len() {
            return Err(malformed(format!(
                "truncated binary data in element {what}"
            )));
        }
        let v = t.decode(&body[pos..end], big);
        pos = end;
        Ok(v)
    };
    for el in elements.iter_mut() {
        el.rows.reserve(el.count);
        for _ in 0..el.count {
            let mut row = Vec::with_capacity(el.properties.len());
            for p in &el.properties {
                match p.kind {
                    PropertyKind::Scalar(t) => row.push(read(t, &el.name)?),
                    PropertyKind::List { count, item } => {
                        let n = read(count, &el.name)?;
                        row.push(n);
                        for _ in 0..n as usize {
                            row.push(read(item, &el.name)?);
                        }
                    }
                }
            }
            el.rows.push(row);
        }
    }
    Ok(())
}

/// Interchange property names in file order.
pub fn interchange_properties() -> Vec<String> {
    let mut names: Vec<String> = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"]
        .map(String::from)
        .into();
    names.extend((0..3 * (SH_COEFFS - 1)).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.push("sigma".into());
    names
}

pub fn encode_triangle_ply(soup: &[Triangle]) -> Vec<u8> {
    let names = interchange_properties();
    let mut header = String::from(
        "ply\nformat binary_little_endian 1.0\ncomment triangle soup, one vertex per corner\n",
    );
    header += &format!("element vertex {}\n", soup.len() * 3);
    for n in &names {
        header += &format!("property float {n}\n");
    }
    header += "end_header\n";
    let mut out = header.into_bytes();
    out.reserve(soup.len() * 3 * names.len() * 4);
    for tri in soup {
        let mut attrs = Vec::with_capacity(names.len() - 3);
        attrs.extend_from_slice(&tri.sh[0]);
        for c in 0..3 {
            for k in 1..SH_COEFFS {
                attrs.push(tri.sh[k][c]);
            }
        }
        attrs.push(tri.opacity_logit);
        attrs.push(tri.sigma);
        for v in &tri.vertices {
            for x in v.iter().chain(&attrs) {
                out.extend_from_slice(&(*x as f32).to_le_bytes());
            }
        }
    }
    out
}

pub fn save_triangle_ply(path: &Path, soup: &[Triangle]) -> Result<(), IoError> {
    write_file_atomic(path, &encode_triangle_ply(soup))
}

/// How strictly [`decode_triangle_ply`] treats its input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PlyImport {
    /// The interchange layout exactly: every property present, per-corner
    /// copies of triangle attributes identical.
    #[default]
    Strict,
    /// Best-effort import of soups from other triangle-splatting tools:
    /// missing `f_rest_*` become zero, missing `sigma` becomes 1, missing
    /// `opacity` becomes logit 0, and attributes are taken from the first
    /// corner of each triangle.
    Lenient,
}

pub fn decode_triangle_ply(bytes: &[u8], mode: PlyImport) -> Result<Vec<Triangle>, IoError> {
    let ply = parse_ply(bytes)?;
    let vertex = ply
        .element("vertex")
        .ok_or_else(|| IoError::MissingProperty("element vertex".into()))?;
    if vertex.count % 3 != 0 {
        return Err(malformed(format!(
            "vertex count {} is not a multiple of 3",
            vertex.count
        )));
    }
    let optional_default = |name: &str| -> Option<f64> {
        if mode == PlyImport::Strict {
            return None;
        }
        match name {
            "sigma" => Some(1.0),
            n if n.starts_with("f_rest_") || n == "opacity" => Some(0.0),
            _ => None,
        }
    };
    let names = interchange_properties();
    let mut columns = Vec::with_capacity(names.len());
    for name in &names {
        let col = match vertex.column(name) {
            Some(c) => c,
            None => match optional_default(name) {
                Some(d) => vec![d; vertex.count],
                None => return Err(IoError::MissingProperty(name.clone())),
            },
        };
        if let Some(i) = col.iter().position(|v| !v.is_finite()) {
            return Err(malformed(format!(
                "vertex {i}: property {name} is not finite"
            )));
        }
        columns.push(col);
    }
    (0..vertex.count / 3)
        .map(|t| {
            let corner = |k: usize| 3 * t + k;
            let vertices = std::array::from_fn(|k| {
                Vec3::new(
                    columns[0][corner(k)],
                    columns[1][corner(k)],
                    columns[2][corner(k)],
                )
            });
            if mode == PlyImport::Strict {
                for (col, name) in columns.iter().zip(&names).skip(3) {
                    if col[corner(1)] != col[corner(0)] || col[corner(2)] != col[corner(0)] {
                        return Err(malformed(format!(
                            "triangle {t}: property {name} differs between corners"
                        )));
                    }
                }
            }
            let first = corner(0);
            let mut sh = [[0.0; 3]; SH_COEFFS];
            for c in 0..3 {
                sh[0][c] = columns[3 + c][first];
                for k in 1..SH_COEFFS {
                    sh[k][c] = columns[6 + c * (SH_COEFFS - 1) + k - 1][first];
                }
            }
            Ok(Triangle {
                vertices,
                sh,
                opacity_logit: columns[names.len() - 2][first],
                sigma: columns[names.len() - 1][first],
            })
        })
        .collect()
}

pub fn load_triangle_ply(path: &Path, mode: PlyImport) -> Result<Vec<Triangle>, IoError> {
    decode_triangle_ply(&read_file(path)?, mode).map_err(|e| e.at(path))
}

/// Seed points for initialization: positions plus linear RGB in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<Vec3>,
    pub colors: Vec<[f64; 3]>,
}

/// Reads `vertex` positions and, when present, 8-bit `red/green/blue`
/// (else mid-gray).
pub fn decode_point_cloud(bytes: &[u8]) -> Result<PointCloud, IoError> {
    let ply = parse_ply(bytes)?;
    let vertex = ply
        .element("vertex")
        .ok_or_else(|| IoError::MissingProperty("element vertex".into()))?;
    let col = |n: &str| {
        vertex
            .column(n)
            .ok_or_else(|| IoError::MissingProperty(n.into()))
    };
    let (x, y, z) = (col("x")?, col("y")?, col("z")?);
    let rgb = match (
        vertex.column("red"),
        vertex.column("green"),
        vertex.column("blue"),
    ) {
        (Some(r), Some(g), Some(b)) => Some((r, g, b)),
        _ => None,
    };
    let mut positions = Vec::with_capacity(vertex.count);
    let mut colors = Vec::with_capacity(vertex.count);
    for i in 0..vertex.count {
        let p = Vec3::new(x[i], y[i], z[i]);
        if !p.iter().all(|v| v.is_finite()) {
            return Err(malformed(format!("vertex {i}: position is not finite")));
        }
        positions.push(p);
        colors.push(match &rgb {
            Some((r, g, b)) => {
                [r[i], g[i], b[i]].map(|c| super::image_io::srgb_to_linear(c / 255.0))
            }
            None => [0.5; 3],
        });
    }
    Ok(PointCloud { positions, colors })
}

pub fn load_point_cloud(path: &Path) -> Result<PointCloud, IoError> {
    decode_point_cloud(&read_file(path)?).map_err(|e| e.at(path))
}
