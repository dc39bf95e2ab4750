//! Minimal polygon-file (PLY) reader and writer for binary little-endian
//! and ASCII files with scalar and list properties.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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
            "char" | "int8" => ScalarType::I8,
            "uchar" | "uint8" => ScalarType::U8,
            "short" | "int16" => ScalarType::I16,
            "ushort" | "uint16" => ScalarType::U16,
            "int" | "int32" => ScalarType::I32,
            "uint" | "uint32" => ScalarType::U32,
            "float" | "float32" => ScalarType::F32,
            "double" | "float64" => ScalarType::F64,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            ScalarType::I8 => "char",
            ScalarType::U8 => "uchar",
            ScalarType::I16 => "short",
            ScalarType::U16 => "ushort",
            ScalarType::I32 => "int",
            ScalarType::U32 => "uint",
            ScalarType::F32 => "float",
            ScalarType::F64 => "double",
        }
    }

    fn size(self) -> usize {
        match self {
            ScalarType::I8 | ScalarType::U8 => 1,
            ScalarType::I16 | ScalarType::U16 => 2,
            ScalarType::I32 | ScalarType::U32 | ScalarType::F32 => 4,
            ScalarType::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            ScalarType::I8 => b[0] as i8 as f64,
            ScalarType::U8 => b[0] as f64,
            ScalarType::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            ScalarType::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            ScalarType::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            ScalarType::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            ScalarType::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            ScalarType::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }

    fn write_le(self, v: f64, out: &mut Vec<u8>) {
        match self {
            ScalarType::I8 => out.push(v as i8 as u8),
            ScalarType::U8 => out.push(v as u8),
            ScalarType::I16 => out.extend((v as i16).to_le_bytes()),
            ScalarType::U16 => out.extend((v as u16).to_le_bytes()),
            ScalarType::I32 => out.extend((v as i32).to_le_bytes()),
            ScalarType::U32 => out.extend((v as u32).to_le_bytes()),
            ScalarType::F32 => out.extend((v as f32).to_le_bytes()),
            ScalarType::F64 => out.extend(v.to_le_bytes()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PropertyKind {
    Scalar(ScalarType),
    List { count: ScalarType, item: ScalarType },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Property {
    pub name: String,
    pub kind: PropertyKind,
}

/// One element block. Scalar properties are stored column-wise as doubles;
/// list properties as one vector per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Element {
    pub name: String,
    pub count: usize,
    pub properties: Vec<Property>,
    pub scalars: Vec<Vec<f64>>,
    pub lists: Vec<Vec<Vec<f64>>>,
}

impl Element {
    pub fn new(name: &str, count: usize) -> Self {
        Element {
            name: name.into(),
            count,
            properties: Vec::new(),
            scalars: Vec::new(),
            lists: Vec::new(),
        }
    }

    pub fn add_scalar(&mut self, name: &str, ty: ScalarType, values: Vec<f64>) {
        assert_eq!(values.len(), self.count);
        self.properties.push(Property {
            name: name.into(),
            kind: PropertyKind::Scalar(ty),
        });
        self.scalars.push(values);
        self.lists.push(Vec::new());
    }

    pub fn add_list(&mut self, name: &str, count: ScalarType, item: ScalarType, values: Vec<Vec<f64>>) {
        assert_eq!(values.len(), self.count);
        self.properties.push(Property {
            name: name.into(),
            kind: PropertyKind::List { count, item },
        });
        self.scalars.push(Vec::new());
        self.lists.push(values);
    }

    pub fn scalar(&self, name: &str) -> Option<&[f64]> {
        let i = self.properties.iter().position(|p| p.name == name)?;
        matches!(self.properties[i].kind, PropertyKind::Scalar(_)).then(|| self.scalars[i].as_slice())
    }

    pub fn list(&self, name: &str) -> Option<&[Vec<f64>]> {
        let i = self.properties.iter().position(|p| p.name == name)?;
        matches!(self.properties[i].kind, PropertyKind::List { .. }).then(|| self.lists[i].as_slice())
    }

    pub fn property_names(&self) -> impl Iterator<Item = &str> {
        self.properties.iter().map(|p| p.name.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PlyFile {
    pub comments: Vec<String>,
    pub elements: Vec<Element>,
}

impl PlyFile {
    pub fn element(&self, name: &str) -> Option<&Element> {
        self.elements.iter().find(|e| e.name == name)
    }

    /// Value of a `comment <key> <value>` header line.
    pub fn comment_value(&self, key: &str) -> Option<&str> {
        self.comments.iter().find_map(|c| {
            let mut parts = c.splitn(2, ' ');
            (parts.next() == Some(key)).then(|| parts.next().unwrap_or("").trim())
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
        for c in &self.comments {
            header.push_str(&format!("comment {c}\n"));
        }
        for e in &self.elements {
            header.push_str(&format!("element {} {}\n", e.name, e.count));
            for p in &e.properties {
                match p.kind {
                    PropertyKind::Scalar(t) => header.push_str(&format!("property {} {}\n", t.name(), p.name)),
                    PropertyKind::List { count, item } => header.push_str(&format!(
                        "property list {} {} {}\n",
                        count.name(),
                        item.name(),
                        p.name
                    )),
                }
            }
        }
        header.push_str("end_header\n");
        let mut out = header.into_bytes();
        for e in &self.elements {
            for row in 0..e.count {
                for (pi, p) in e.properties.iter().enumerate() {
                    match p.kind {
                        PropertyKind::Scalar(t) => t.write_le(e.scalars[pi][row], &mut out),
                        PropertyKind::List { count, item } => {
                            let l = &e.lists[pi][row];
                            count.write_le(l.len() as f64, &mut out);
                            for &v in l {
                                item.write_le(v, &mut out);
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(BufReader::new(f)).map_err(|msg| Error::Mesh(format!("{}: {msg}", path.display())))
    }

    pub fn from_reader<R: BufRead>(mut r: R) -> std::result::Result<Self, String> {
        let mut line = String::new();
        let next_line = |r: &mut R, line: &mut String| -> std::result::Result<(), String> {
            line.clear();
            let n = r.read_line(line).map_err(|e| e.to_string())?;
            if n == 0 {
                return Err("unexpected end of header".into());
            }
            Ok(())
        };
        next_line(&mut r, &mut line)?;
        if line.trim_end() != "ply" {
            return Err("missing ply magic".into());
        }
        let mut ascii = false;
        let mut ply = PlyFile::default();
        loop {
            next_line(&mut r, &mut line)?;
            let l = line.trim_end_matches(['\n', '\r']);
            let mut tok = l.split_whitespace();
            match tok.next() {
                Some("format") => match tok.next() {
                    Some("binary_little_endian") => ascii = false,
                    Some("ascii") => ascii = true,
                    other => return Err(format!("unsupported format {other:?}")),
                },
                Some("comment") => ply.comments.push(l.trim_start()[7..].trim().to_string()),
                Some("obj_info") => {}
                Some("element") => {
                    let name = tok.next().ok_or("element without name")?;
                    let count: usize = tok
                        .next()
                        .and_then(|c| c.parse().ok())
                        .ok_or("element without count")?;
                    ply.elements.push(Element::new(name, count));
                }
                Some("property") => {
                    let e = ply.elements.last_mut().ok_or("property before element")?;
                    let t = tok.next().ok_or("property without type")?;
                    if t == "list" {
                        let count = tok.next().and_then(ScalarType::parse).ok_or("bad list count type")?;
                        let item = tok.next().and_then(ScalarType::parse).ok_or("bad list item type")?;
                        let name = tok.next().ok_or("property without name")?;
                        e.properties.push(Property {
                            name: name.into(),
                            kind: PropertyKind::List { count, item },
                        });
                    } else {
                        let ty = ScalarType::parse(t).ok_or_else(|| format!("unknown type {t}"))?;
                        let name = tok.next().ok_or("property without name")?;
                        e.properties.push(Property {
                            name: name.into(),
                            kind: PropertyKind::Scalar(ty),
                        });
                    }
                    e.scalars.push(Vec::new());
                    e.lists.push(Vec::new());
                }
                Some("end_header") => break,
                Some(other) => return Err(format!("unexpected header line {other}")),
                None => {}
            }
        }
        if ascii {
            let mut body = String::new();
            r.read_to_string(&mut body).map_err(|e| e.to_string())?;
            let mut tok = body.split_whitespace();
            let mut next = || -> std::result::Result<f64, String> {
                tok.next()
                    .ok_or("truncated body")?
                    .parse::<f64>()
                    .map_err(|e| e.to_string())
            };
            for e in &mut ply.elements {
                for _ in 0..e.count {
                    for (pi, p) in e.properties.iter().enumerate() {
                        match p.kind {
                            PropertyKind::Scalar(_) => e.scalars[pi].push(next()?),
                            PropertyKind::List { .. } => {
                                let n = next()? as usize;
                                let items = (0..n).map(|_| next()).collect::<std::result::Result<_, _>>()?;
                                e.lists[pi].push(items);
                            }
                        }
                    }
                }
            }
        } else {
            let mut body = Vec::new();
            r.read_to_end(&mut body).map_err(|e| e.to_string())?;
            let mut pos = 0usize;
            let mut take = |n: usize| -> std::result::Result<&[u8], String> {
                if pos + n > body.len() {
                    return Err("truncated body".into());
                }
                pos += n;
                Ok(&body[pos - n..pos])
            };
            for e in &mut ply.elements {
                for s in &mut e.scalars {
                    s.reserve(e.count);
                }
                for _ in 0..e.count {
                    for (pi, p) in e.properties.iter().enumerate() {
                        match p.kind {
                            PropertyKind::Scalar(t) => {
                                let v = t.read_le(take(t.size())?);
                                e.scalars[pi].push(v);
                            }
                            PropertyKind::List { count, item } => {
                                let n = count.read_le(take(count.size())?) as usize;
                                let mut items = Vec::with_capacity(n);
                                for _ in 0..n {
                                    items.push(item.read_le(take(item.size())?));
                                }
                                e.lists[pi].push(items);
                            }
                        }
                    }
                }
            }
        }
        Ok(ply)
    }
}
