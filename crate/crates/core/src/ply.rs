//! Minimal PLY reader and writer for vertex tables.
//!
//! Only the `vertex` element is materialised; other elements are parsed
//! far enough to be skipped. ASCII and binary little-endian bodies are
//! supported. Every scalar is widened to `f64` on read.

use std::collections::HashMap;
use std::io::{self, BufRead, Read, Write};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlyError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("header line {line}: {message}")]
    Header { line: usize, message: String },
    #[error("body line {line}: {message}")]
    Body { line: usize, message: String },
    #[error("unexpected end of file while reading element `{element}` row {row}")]
    UnexpectedEof { element: String, row: usize },
    #[error("missing vertex properties: {}", .0.join(", "))]
    MissingProperties(Vec<String>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Ascii,
    BinaryLittleEndian,
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

    fn name(self) -> &'static str {
        match self {
            Self::I8 => "char",
            Self::U8 => "uchar",
            Self::I16 => "short",
            Self::U16 => "ushort",
            Self::I32 => "int",
            Self::U32 => "uint",
            Self::F32 => "float",
            Self::F64 => "double",
        }
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn decode_le(self, b: &[u8]) -> f64 {
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

    fn encode_le(self, v: f64, out: &mut Vec<u8>) {
        match self {
            Self::I8 => out.push(v.round() as i8 as u8),
            Self::U8 => out.push(v.round().clamp(0.0, 255.0) as u8),
            Self::I16 => out.extend_from_slice(&(v.round() as i16).to_le_bytes()),
            Self::U16 => out.extend_from_slice(&(v.round() as u16).to_le_bytes()),
            Self::I32 => out.extend_from_slice(&(v.round() as i32).to_le_bytes()),
            Self::U32 => out.extend_from_slice(&(v.round() as u32).to_le_bytes()),
            Self::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Self::F64 => out.extend_from_slice(&v.to_le_bytes()),
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
}

#[derive(Clone, Debug, PartialEq)]
pub struct Header {
    pub format: Format,
    pub elements: Vec<Element>,
    pub comments: Vec<String>,
    /// Number of header lines including `ply` and `end_header`.
    pub line_count: usize,
}

/// Row-major table of the scalar vertex properties.
#[derive(Clone, Debug, Default)]
pub struct VertexTable {
    pub names: Vec<String>,
    pub rows: usize,
    pub data: Vec<f64>,
}

impl VertexTable {
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Column indices for `names`, or an error listing every missing name.
    pub fn require(&self, names: &[&str]) -> Result<Vec<usize>, PlyError> {
        let mut missing = Vec::new();
        let mut idx = Vec::with_capacity(names.len());
        for n in names {
            match self.column_index(n) {
                Some(i) => idx.push(i),
                None => missing.push(n.to_string()),
            }
        }
        if missing.is_empty() {
            Ok(idx)
        } else {
            Err(PlyError::MissingProperties(missing))
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.names.len() + col]
    }
}

fn read_line<R: BufRead>(r: &mut R, buf: &mut Vec<u8>) -> io::Result<usize> {
    buf.clear();
    r.read_until(b'\n', buf)
}

pub fn read_header<R: BufRead>(r: &mut R) -> Result<Header, PlyError> {
    let mut buf = Vec::new();
    let mut line_no = 0usize;
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    let mut comments = Vec::new();
    let herr = |line: usize, message: String| PlyError::Header { line, message };
    loop {
        let n = read_line(r, &mut buf)?;
        line_no += 1;
        if n == 0 {
            return Err(herr(line_no, "end of file before end_header".into()));
        }
        let text = String::from_utf8_lossy(&buf);
        let text = text.trim_end_matches(['\n', '\r']);
        let mut tok = text.split_whitespace();
        let Some(keyword) = tok.next() else {
            if line_no == 1 {
                return Err(herr(1, "missing `ply` magic".into()));
            }
            continue;
        };
        if line_no == 1 {
            if keyword != "ply" {
                return Err(herr(1, format!("expected `ply` magic, found `{text}`")));
            }
            continue;
        }
        match keyword {
            "format" => {
                let kind = tok.next().unwrap_or("");
                let version = tok.next().unwrap_or("");
                if version != "1.0" {
                    return Err(herr(line_no, format!("unsupported version `{version}`")));
                }
                format = Some(match kind {
                    "ascii" => Format::Ascii,
                    "binary_little_endian" => Format::BinaryLittleEndian,
                    other => return Err(herr(line_no, format!("unsupported format `{other}`"))),
                });
            }
            "comment" | "obj_info" => comments.push(tok.collect::<Vec<_>>().join(" ")),
            "element" => {
                let (Some(name), Some(count)) = (tok.next(), tok.next()) else {
                    return Err(herr(line_no, format!("malformed element line `{text}`")));
                };
                let count = count
                    .parse()
                    .map_err(|_| herr(line_no, format!("bad element count `{count}`")))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            "property" => {
                let Some(el) = elements.last_mut() else {
                    return Err(herr(line_no, "property before any element".into()));
                };
                let parts: Vec<&str> = tok.collect();
                let bad = || herr(line_no, format!("malformed property line `{text}`"));
                let prop = match parts.as_slice() {
                    ["list", c, i, name] => Property {
                        name: name.to_string(),
                        kind: PropertyKind::List {
                            count: ScalarType::parse(c).ok_or_else(bad)?,
                            item: ScalarType::parse(i).ok_or_else(bad)?,
                        },
                    },
                    [t, name] => Property {
                        name: name.to_string(),
                        kind: PropertyKind::Scalar(ScalarType::parse(t).ok_or_else(bad)?),
                    },
                    _ => return Err(bad()),
                };
                el.properties.push(prop);
            }
            "end_header" => break,
            other => return Err(herr(line_no, format!("unknown header keyword `{other}`"))),
        }
    }
    let format = format.ok_or_else(|| herr(line_no, "header has no format line".into()))?;
    Ok(Header {
        format,
        elements,
        comments,
        line_count: line_no,
    })
}

/// Reads the header and the `vertex` element of a PLY stream.
pub fn read_vertices<R: BufRead>(r: &mut R) -> Result<(Header, VertexTable), PlyError> {
    let header = read_header(r)?;
    let mut table = VertexTable::default();
    let mut line = header.line_count;
    for el in &header.elements {
        let is_vertex = el.name == "vertex";
        if is_vertex {
            for p in &el.properties {
                if let PropertyKind::Scalar(_) = p.kind {
                    table.names.push(p.name.clone());
                }
            }
            table.rows = el.count;
            table.data.reserve(el.count * table.names.len());
        }
        match header.format {
            Format::Ascii => read_ascii_element(r, el, is_vertex, &mut table, &mut line)?,
            Format::BinaryLittleEndian => read_binary_element(r, el, is_vertex, &mut table)?,
        }
        if is_vertex {
            break;
        }
    }
    Ok((header, table))
}

fn read_ascii_element<R: BufRead>(
    r: &mut R,
    el: &Element,
    keep: bool,
    table: &mut VertexTable,
    line: &mut usize,
) -> Result<(), PlyError> {
    let mut buf = Vec::new();
    let mut row = 0;
    while row < el.count {
        let n = read_line(r, &mut buf)?;
        *line += 1;
        if n == 0 {
            return Err(PlyError::UnexpectedEof {
                element: el.name.clone(),
                row,
            });
        }
        let text = String::from_utf8_lossy(&buf);
        let mut tok = text.split_whitespace().peekable();
        if tok.peek().is_none() {
            continue;
        }
        let berr = |message: String| PlyError::Body {
            line: *line,
            message,
        };
        let mut next_num = |what: &str| -> Result<f64, PlyError> {
            let t = tok
                .next()
                .ok_or_else(|| berr(format!("row {row}: missing value for `{what}`")))?;
            t.parse::<f64>()
                .map_err(|_| berr(format!("row {row}: cannot parse `{t}` for `{what}`")))
        };
        for p in &el.properties {
            match p.kind {
                PropertyKind::Scalar(_) => {
                    let v = next_num(&p.name)?;
                    if keep {
                        table.data.push(v);
                    }
                }
                PropertyKind::List { .. } => {
                    let n = next_num(&p.name)? as usize;
                    for _ in 0..n {
                        next_num(&p.name)?;
                    }
                }
            }
        }
        row += 1;
    }
    Ok(())
}

fn read_binary_element<R: Read>(
    r: &mut R,
    el: &Element,
    keep: bool,
    table: &mut VertexTable,
) -> Result<(), PlyError> {
    let eof = |row| PlyError::UnexpectedEof {
        element: el.name.clone(),
        row,
    };
    let fixed: Option<usize> = el
        .properties
        .iter()
        .map(|p| match p.kind {
            PropertyKind::Scalar(t) => Some(t.size()),
            PropertyKind::List { .. } => None,
        })
        .sum();
    let mut scratch = [0u8; 8];
    if let Some(stride) = fixed {
        let mut row_buf = vec![0u8; stride];
        for row in 0..el.count {
            r.read_exact(&mut row_buf).map_err(|_| eof(row))?;
            if keep {
                let mut off = 0;
                for p in &el.properties {
                    if let PropertyKind::Scalar(t) = p.kind {
                        table.data.push(t.decode_le(&row_buf[off..off + t.size()]));
                        off += t.size();
                    }
                }
            }
        }
        return Ok(());
    }
    for row in 0..el.count {
        for p in &el.properties {
            match p.kind {
                PropertyKind::Scalar(t) => {
                    r.read_exact(&mut scratch[..t.size()]).map_err(|_| eof(row))?;
                    if keep {
                        table.data.push(t.decode_le(&scratch[..t.size()]));
                    }
                }
                PropertyKind::List { count, item } => {
                    r.read_exact(&mut scratch[..count.size()]).map_err(|_| eof(row))?;
                    let n = count.decode_le(&scratch[..count.size()]) as usize;
                    for _ in 0..n {
                        r.read_exact(&mut scratch[..item.size()]).map_err(|_| eof(row))?;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Writes a single `vertex` element. `rows` yields one value per column.
pub fn write_vertices<W: Write>(
    w: &mut W,
    format: Format,
    columns: &[(&str, ScalarType)],
    comments: &[&str],
    count: usize,
    mut row: impl FnMut(usize, &mut Vec<f64>),
) -> io::Result<()> {
    let mut head = String::from("ply\n");
    head.push_str(match format {
        Format::Ascii => "format ascii 1.0\n",
        Format::BinaryLittleEndian => "format binary_little_endian 1.0\n",
    });
    for c in comments {
        head.push_str(&format!("comment {c}\n"));
    }
    head.push_str(&format!("element vertex {count}\n"));
    for (name, t) in columns {
        head.push_str(&format!("property {} {}\n", t.name(), name));
    }
    head.push_str("end_header\n");
    w.write_all(head.as_bytes())?;
    let mut values = Vec::with_capacity(columns.len());
    let mut bytes = Vec::new();
    for i in 0..count {
        values.clear();
        row(i, &mut values);
        assert_eq!(values.len(), columns.len(), "row {i} has wrong arity");
        match format {
            Format::BinaryLittleEndian => {
                bytes.clear();
                for (v, (_, t)) in values.iter().zip(columns) {
                    t.encode_le(*v, &mut bytes);
                }
                w.write_all(&bytes)?;
            }
            Format::Ascii => {
                let line: Vec<String> = values
                    .iter()
                    .zip(columns)
                    .map(|(v, (_, t))| match t {
                        ScalarType::F32 => format!("{}", *v as f32),
                        ScalarType::F64 => format!("{v}"),
                        _ => format!("{}", v.round()),
                    })
                    .collect();
                writeln!(w, "{}", line.join(" "))?;
            }
        }
    }
    Ok(())
}

/// Name → column lookup for repeated access.
pub fn column_map(table: &VertexTable) -> HashMap<&str, usize> {
    table
        .names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn ascii_with_face_list_after_vertices() {
        let src = "ply\nformat ascii 1.0\ncomment hi\nelement vertex 2\nproperty float x\nproperty float y\n\
                   property float z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n\
                   0 1 2\n3 4 5\n3 0 1 1\n";
        let (h, t) = read_vertices(&mut Cursor::new(src)).unwrap();
        assert_eq!(h.elements.len(), 2);
        assert_eq!(t.rows, 2);
        assert_eq!(t.data, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn header_error_names_line() {
        let src = "ply\nformat ascii 1.0\nelement vertex 1\nproperty flot x\nend_header\n1\n";
        match read_vertices(&mut Cursor::new(src)) {
            Err(PlyError::Header { line, message }) => {
                assert_eq!(line, 4);
                assert!(message.contains("flot"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_big_endian_and_missing_magic() {
        let be = "ply\nformat binary_big_endian 1.0\nend_header\n";
        assert!(matches!(read_vertices(&mut Cursor::new(be)), Err(PlyError::Header { line: 2, .. })));
        let nomagic = "plx\nformat ascii 1.0\nend_header\n";
        assert!(matches!(read_vertices(&mut Cursor::new(nomagic)), Err(PlyError::Header { line: 1, .. })));
    }

    #[test]
    fn binary_list_element_before_vertex_is_skipped() {
        let mut bytes = b"ply\nformat binary_little_endian 1.0\nelement meta 1\nproperty list uchar short ids\n\
                          element vertex 1\nproperty uchar red\nproperty double x\nend_header\n"
            .to_vec();
        bytes.extend_from_slice(&[2, 1, 0, 2, 0]);
        bytes.push(200);
        bytes.extend_from_slice(&1.5f64.to_le_bytes());
        let (_, t) = read_vertices(&mut Cursor::new(bytes)).unwrap();
        assert_eq!(t.data, vec![200.0, 1.5]);
    }

    #[test]
    fn truncated_binary_body_is_eof() {
        let mut bytes =
            b"ply\nformat binary_little_endian 1.0\nelement vertex 2\nproperty float x\nend_header\n".to_vec();
        bytes.extend_from_slice(&1f32.to_le_bytes());
        assert!(matches!(
            read_vertices(&mut Cursor::new(bytes)),
            Err(PlyError::UnexpectedEof { row: 1, .. })
        ));
    }

    #[test]
    fn writer_reader_agree_in_both_formats() {
        for format in [Format::Ascii, Format::BinaryLittleEndian] {
            let mut out = Vec::new();
            let cols = [("x", ScalarType::F64), ("red", ScalarType::U8)];
            write_vertices(&mut out, format, &cols, &["test"], 3, |i, v| {
                v.push(i as f64 * 0.25);
                v.push(i as f64 * 10.0);
            })
            .unwrap();
            let (h, t) = read_vertices(&mut Cursor::new(out)).unwrap();
            assert_eq!(h.comments, vec!["test".to_string()]);
            assert_eq!(t.data, vec![0.0, 0.0, 0.25, 10.0, 0.5, 20.0]);
        }
    }
}
