//! PLY reading and writing (ASCII and binary little-endian).
//!
//! Only vertex positions and triangle faces are kept. Other elements and
//! properties are parsed for layout and dropped. Polygons with more than
//! three corners are fan-triangulated.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::{Mesh, PointCloud};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

/// Vertex positions plus any faces found in the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlyData {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[u32; 3]>,
}

impl PlyData {
    pub fn is_mesh(&self) -> bool {
        !self.faces.is_empty()
    }

    pub fn into_cloud(self) -> PointCloud {
        PointCloud::new(self.vertices)
    }

    pub fn into_mesh(self) -> Result<Mesh> {
        Mesh::new(self.vertices, self.faces)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Ty {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Ty {
    fn parse(s: &str) -> Option<Ty> {
        Some(match s {
            "char" | "int8" => Ty::I8,
            "uchar" | "uint8" => Ty::U8,
            "short" | "int16" => Ty::I16,
            "ushort" | "uint16" => Ty::U16,
            "int" | "int32" => Ty::I32,
            "uint" | "uint32" => Ty::U32,
            "float" | "float32" => Ty::F32,
            "double" | "float64" => Ty::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Ty::I8 | Ty::U8 => 1,
            Ty::I16 | Ty::U16 => 2,
            Ty::I32 | Ty::U32 | Ty::F32 => 4,
            Ty::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Ty::I8 => b[0] as i8 as f64,
            Ty::U8 => b[0] as f64,
            Ty::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Ty::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Ty::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Ty::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Ty::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Ty::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }

    fn is_float(self) -> bool {
        matches!(self, Ty::F32 | Ty::F64)
    }
}

#[derive(Clone, Debug)]
enum Kind {
    Scalar(Ty),
    List(Ty, Ty),
}

#[derive(Clone, Debug)]
struct Property {
    name: String,
    kind: Kind,
}

#[derive(Clone, Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

struct Header {
    format: PlyFormat,
    elements: Vec<Element>,
    body_start: usize,
    body_line: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let mut pos = 0;
    let mut line_no = 0;
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        line_no += 1;
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|i| pos + i)
            .ok_or_else(|| Error::at_line(line_no, "header is missing `end_header`"))?;
        let line = std::str::from_utf8(&bytes[pos..end])
            .map_err(|_| Error::at_line(line_no, "header is not ASCII"))?
            .trim_end_matches('\r');
        pos = end + 1;
        let mut words = line.split_whitespace();
        let Some(key) = words.next() else { continue };
        if line_no == 1 {
            if key != "ply" {
                return Err(Error::at_line(1, "missing `ply` magic"));
            }
            continue;
        }
        match key {
            "format" => {
                format = Some(match words.next() {
                    Some("ascii") => PlyFormat::Ascii,
                    Some("binary_little_endian") => PlyFormat::BinaryLittleEndian,
                    Some(other) => return Err(Error::at_line(line_no, format!("unsupported format `{other}`"))),
                    None => return Err(Error::at_line(line_no, "format line without a format")),
                });
            }
            "comment" | "obj_info" => {}
            "element" => {
                let name = words.next().ok_or_else(|| Error::at_line(line_no, "element without a name"))?;
                let count = words
                    .next()
                    .and_then(|c| c.parse::<usize>().ok())
                    .ok_or_else(|| Error::at_line(line_no, "element count is not a nonnegative integer"))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            "property" => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::at_line(line_no, "property before any element"))?;
                let t = words.next().ok_or_else(|| Error::at_line(line_no, "property without a type"))?;
                let kind = if t == "list" {
                    let ct = words.next().and_then(Ty::parse);
                    let it = words.next().and_then(Ty::parse);
                    match (ct, it) {
                        (Some(c), Some(i)) if !c.is_float() => Kind::List(c, i),
                        _ => return Err(Error::at_line(line_no, "malformed list property")),
                    }
                } else {
                    Kind::Scalar(
                        Ty::parse(t).ok_or_else(|| Error::at_line(line_no, format!("unknown property type `{t}`")))?,
                    )
                };
                let name = words.next().ok_or_else(|| Error::at_line(line_no, "property without a name"))?;
                el.props.push(Property {
                    name: name.to_string(),
                    kind,
                });
            }
            "end_header" => break,
            other => return Err(Error::at_line(line_no, format!("unexpected header keyword `{other}`"))),
        }
    }
    let format = format.ok_or_else(|| Error::at_line(line_no, "header has no format line"))?;
    Ok(Header {
        format,
        elements,
        body_start: pos,
        body_line: line_no + 1,
    })
}

/// Where the positions and faces live inside each element.
struct Layout {
    xyz: Option<[usize; 3]>,
    face_list: Option<usize>,
}

fn layout(el: &Element, line: usize) -> Result<Layout> {
    let find = |n: &str| el.props.iter().position(|p| p.name == n);
    let mut out = Layout {
        xyz: None,
        face_list: None,
    };
    if el.name == "vertex" {
        match (find("x"), find("y"), find("z")) {
            (Some(x), Some(y), Some(z)) => {
                for i in [x, y, z] {
                    if matches!(el.props[i].kind, Kind::List(..)) {
                        return Err(Error::at_line(line, "vertex coordinate declared as a list"));
                    }
                }
                out.xyz = Some([x, y, z]);
            }
            _ => return Err(Error::at_line(line, "vertex element lacks x, y or z")),
        }
    } else if el.name == "face" {
        out.face_list = find("vertex_indices")
            .or_else(|| find("vertex_index"))
            .filter(|&i| matches!(el.props[i].kind, Kind::List(..)));
    }
    Ok(out)
}

fn push_polygon(faces: &mut Vec<[u32; 3]>, poly: &[f64], err: impl Fn(&str) -> Error) -> Result<()> {
    if poly.len() < 3 {
        return Err(err("face with fewer than three corners"));
    }
    let mut idx = Vec::with_capacity(poly.len());
    for &v in poly {
        if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
            return Err(err("face index is not a valid vertex index"));
        }
        idx.push(v as u32);
    }
    for k in 1..idx.len() - 1 {
        faces.push([idx[0], idx[k], idx[k + 1]]);
    }
    Ok(())
}

/// Parses a PLY file held in memory.
pub fn read_ply_bytes(bytes: &[u8]) -> Result<PlyData> {
    let header = parse_header(bytes)?;
    let mut data = PlyData::default();
    match header.format {
        PlyFormat::Ascii => read_ascii_body(&header, &bytes[header.body_start..], &mut data)?,
        PlyFormat::BinaryLittleEndian => read_binary_body(&header, bytes, &mut data)?,
    }
    let n = data.vertices.len() as u32;
    if let Some(f) = data.faces.iter().find(|f| f.iter().any(|&i| i >= n)) {
        return Err(Error::Contract(format!("face {f:?} indexes past {n} vertices")));
    }
    Ok(data)
}

fn read_ascii_body(header: &Header, body: &[u8], data: &mut PlyData) -> Result<()> {
    let text = std::str::from_utf8(body).map_err(|e| Error::at_line(header.body_line, format!("body is not text: {e}")))?;
    let mut tokens = text
        .lines()
        .enumerate()
        .flat_map(|(i, l)| l.split_whitespace().map(move |t| (header.body_line + i, t)));
    let mut last_line = header.body_line;
    let mut next = |what: &str| -> Result<(usize, f64)> {
        let (line, tok) = tokens
            .next()
            .ok_or_else(|| Error::at_line(last_line, format!("body ended while reading {what}")))?;
        last_line = line;
        tok.parse::<f64>()
            .map(|v| (line, v))
            .map_err(|_| Error::at_line(line, format!("`{tok}` is not a number")))
    };
    for el in &header.elements {
        let lay = layout(el, header.body_line)?;
        let mut row = vec![0.0; el.props.len()];
        let mut poly = Vec::new();
        for _ in 0..el.count {
            let mut line = 0;
            for (pi, p) in el.props.iter().enumerate() {
                match p.kind {
                    Kind::Scalar(_) => {
                        let (l, v) = next(&el.name)?;
                        line = l;
                        row[pi] = v;
                    }
                    Kind::List(..) => {
                        let (l, n) = next(&el.name)?;
                        line = l;
                        if n < 0.0 || n.fract() != 0.0 {
                            return Err(Error::at_line(l, "list length is not a nonnegative integer"));
                        }
                        let keep = lay.face_list == Some(pi);
                        poly.clear();
                        for _ in 0..n as usize {
                            let (_, v) = next(&el.name)?;
                            if keep {
                                poly.push(v);
                            }
                        }
                        if keep {
                            push_polygon(&mut data.faces, &poly, |m| Error::at_line(l, m))?;
                        }
                    }
                }
            }
            if let Some([x, y, z]) = lay.xyz {
                let v = [row[x], row[y], row[z]];
                if v.iter().any(|c| !c.is_finite()) {
                    return Err(Error::at_line(line, "non-finite vertex coordinate"));
                }
                data.vertices.push(v);
            }
        }
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, ty: Ty, what: &str) -> Result<f64> {
        let n = ty.size();
        if self.pos + n > self.bytes.len() {
            return Err(Error::at_byte(self.pos, format!("body ended while reading {what}")));
        }
        let v = ty.read_le(&self.bytes[self.pos..self.pos + n]);
        self.pos += n;
        Ok(v)
    }
}

fn read_binary_body(header: &Header, bytes: &[u8], data: &mut PlyData) -> Result<()> {
    let mut cur = Cursor {
        bytes,
        pos: header.body_start,
    };
    for el in &header.elements {
        let lay = layout(el, header.body_line)?;
        let mut row = vec![0.0; el.props.len()];
        let mut poly = Vec::new();
        for _ in 0..el.count {
            let start = cur.pos;
            for (pi, p) in el.props.iter().enumerate() {
                match p.kind {
                    Kind::Scalar(t) => row[pi] = cur.take(t, &el.name)?,
                    Kind::List(ct, it) => {
                        let at = cur.pos;
                        let n = cur.take(ct, &el.name)?;
                        if n < 0.0 {
                            return Err(Error::at_byte(at, "negative list length"));
                        }
                        poly.clear();
                        for _ in 0..n as usize {
                            poly.push(cur.take(it, &el.name)?);
                        }
                        if lay.face_list == Some(pi) {
                            push_polygon(&mut data.faces, &poly, |m| Error::at_byte(at, m))?;
                        }
                    }
                }
            }
            if let Some([x, y, z]) = lay.xyz {
                let v = [row[x], row[y], row[z]];
                if v.iter().any(|c| !c.is_finite()) {
                    return Err(Error::at_byte(start, "non-finite vertex coordinate"));
                }
                data.vertices.push(v);
            }
        }
    }
    Ok(())
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<PlyData> {
    read_ply_bytes(&fs::read(path)?)
}

/// Serializes vertices (and faces, if any). Integral vertex sets are
/// written as `int` properties, anything else as `double`.
pub fn write_ply_bytes(vertices: &[[f64; 3]], faces: &[[u32; 3]], format: PlyFormat) -> Vec<u8> {
    let integral = vertices
        .iter()
        .all(|v| v.iter().all(|c| c.fract() == 0.0 && c.abs() <= i32::MAX as f64));
    let ty = if integral { "int" } else { "double" };
    let mut out = String::from("ply\n");
    out.push_str(match format {
        PlyFormat::Ascii => "format ascii 1.0\n",
        PlyFormat::BinaryLittleEndian => "format binary_little_endian 1.0\n",
    });
    out.push_str(&format!("element vertex {}\n", vertices.len()));
    for n in ["x", "y", "z"] {
        out.push_str(&format!("property {ty} {n}\n"));
    }
    if !faces.is_empty() {
        out.push_str(&format!("element face {}\nproperty list uchar int vertex_indices\n", faces.len()));
    }
    out.push_str("end_header\n");
    let mut bytes = out.into_bytes();
    match format {
        PlyFormat::Ascii => {
            let mut body = String::new();
            for v in vertices {
                if integral {
                    body.push_str(&format!("{} {} {}\n", v[0] as i64, v[1] as i64, v[2] as i64));
                } else {
                    body.push_str(&format!("{:?} {:?} {:?}\n", v[0], v[1], v[2]));
                }
            }
            for f in faces {
                body.push_str(&format!("3 {} {} {}\n", f[0], f[1], f[2]));
            }
            bytes.extend_from_slice(body.as_bytes());
        }
        PlyFormat::BinaryLittleEndian => {
            for v in vertices {
                for &c in v {
                    if integral {
                        bytes.extend_from_slice(&(c as i32).to_le_bytes());
                    } else {
                        bytes.extend_from_slice(&c.to_le_bytes());
                    }
                }
            }
            for f in faces {
                bytes.push(3);
                for &i in f {
                    bytes.extend_from_slice(&(i as i32).to_le_bytes());
                }
            }
        }
    }
    bytes
}

pub fn write_ply(path: impl AsRef<Path>, vertices: &[[f64; 3]], faces: &[[u32; 3]], format: PlyFormat) -> Result<()> {
    crate::io::write_atomic(path, &write_ply_bytes(vertices, faces, format))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const ONE_POINT: &str = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n";

    #[test]
    fn one_point_ascii() {
        let d = read_ply_bytes(ONE_POINT.as_bytes()).unwrap();
        assert_eq!(d.vertices, vec![[0.0, 0.0, 0.0]]);
        assert!(!d.is_mesh());
    }

    #[test]
    fn binary_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<[f64; 3]> = (0..1000)
            .map(|_| [rng.random::<f64>() * 100.0 - 50.0, rng.random(), rng.random::<f64>() * 1e-3])
            .collect();
        let bytes = write_ply_bytes(&pts, &[], PlyFormat::BinaryLittleEndian);
        assert_eq!(read_ply_bytes(&bytes).unwrap().vertices, pts);
        let bytes = write_ply_bytes(&pts, &[], PlyFormat::Ascii);
        assert_eq!(read_ply_bytes(&bytes).unwrap().vertices, pts);
    }

    #[test]
    fn short_body_reports_position() {
        let mut text = String::from(
            "ply\nformat ascii 1.0\nelement vertex 5\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        );
        for i in 0..4 {
            text.push_str(&format!("{i} 0 0\n"));
        }
        match read_ply_bytes(text.as_bytes()) {
            Err(Error::Parse { unit: "line", position, .. }) => assert_eq!(position, 11),
            other => panic!("{other:?}"),
        }
        let pts = vec![[1.0, 2.0, 3.5]; 5];
        let bytes = write_ply_bytes(&pts, &[], PlyFormat::BinaryLittleEndian);
        let cut = &bytes[..bytes.len() - 24];
        assert!(matches!(read_ply_bytes(cut), Err(Error::Parse { unit: "byte", .. })));
    }

    #[test]
    fn malformed_headers() {
        assert!(matches!(read_ply_bytes(b"plx\n"), Err(Error::Parse { position: 1, .. })));
        let bad = "ply\nformat ascii 1.0\nelement vertex 1\nproperty quux x\nend_header\n";
        assert!(matches!(read_ply_bytes(bad.as_bytes()), Err(Error::Parse { position: 4, .. })));
        let be = "ply\nformat binary_big_endian 1.0\nend_header\n";
        assert!(read_ply_bytes(be.as_bytes()).is_err());
        assert!(read_ply_bytes(b"ply\nformat ascii 1.0\n").is_err());
    }

    #[test]
    fn unknown_properties_and_elements_are_skipped() {
        let text = "ply\nformat ascii 1.0\ncomment made by hand\nelement vertex 3\nproperty double x\nproperty uchar red\nproperty double y\nproperty double z\nproperty list uchar int extra\nelement face 1\nproperty list uchar uint vertex_indices\nproperty float quality\nelement edge 1\nproperty int a\nproperty int b\nend_header\n0 9 0 0 2 7 7\n1 9 0 0 0\n0 9 1 0 1 4\n4 0 1 2 1 0.5\n0 1\n";
        let d = read_ply_bytes(text.as_bytes()).unwrap();
        assert_eq!(d.vertices, vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        assert_eq!(d.faces, vec![[0, 1, 2], [0, 2, 1]]);
    }

    #[test]
    fn integer_and_mesh_binary_round_trip() {
        let verts = vec![[0.0, 0.0, 0.0], [3.0, 0.0, 0.0], [0.0, 7.0, 1.0]];
        let faces = vec![[0, 1, 2]];
        for fmt in [PlyFormat::Ascii, PlyFormat::BinaryLittleEndian] {
            let bytes = write_ply_bytes(&verts, &faces, fmt);
            assert!(String::from_utf8_lossy(&bytes).contains("property int x"));
            let d = read_ply_bytes(&bytes).unwrap();
            assert_eq!(d.vertices, verts);
            assert_eq!(d.faces, faces);
        }
    }

    #[test]
    fn float32_vertices() {
        let mut bytes = b"ply\nformat binary_little_endian 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n".to_vec();
        for v in [0.5f32, -1.25, 3.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(read_ply_bytes(&bytes).unwrap().vertices, vec![[0.5, -1.25, 3.0]]);
    }

    #[test]
    fn bad_face_index() {
        let text = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0\n3 0 1 2\n";
        assert!(read_ply_bytes(text.as_bytes()).is_err());
    }
}
