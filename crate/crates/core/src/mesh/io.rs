//! Mesh file IO: OBJ (ASCII v/f) export and import, PLY import (ASCII or
//! binary little-endian).

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::mesh::TriMesh;
use crate::Vec3;

pub fn write_obj(path: &Path, mesh: &TriMesh) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for v in &mesh.vertices {
        writeln!(w, "v {} {} {}", v.x, v.y, v.z).map_err(|e| Error::io(path, e))?;
    }
    for t in &mesh.triangles {
        writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_obj(path: &Path) -> Result<TriMesh> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for (ln, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let mut p = [0.0f64; 3];
                for v in p.iter_mut() {
                    *v = it
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| Error::format(path, format!("bad vertex at line {}", ln + 1)))?;
                }
                vertices.push(Vec3::new(p[0], p[1], p[2]));
            }
            Some("f") => {
                let idx: Result<Vec<u32>> = it
                    .map(|tok| {
                        let first = tok.split('/').next().unwrap_or("");
                        let i: i64 = first.parse().map_err(|_| {
                            Error::format(path, format!("bad face index '{tok}' at line {}", ln + 1))
                        })?;
                        let i = if i < 0 { vertices.len() as i64 + i } else { i - 1 };
                        if i < 0 || i as usize >= vertices.len() {
                            return Err(Error::format(
                                path,
                                format!("face index out of range at line {}", ln + 1),
                            ));
                        }
                        Ok(i as u32)
                    })
                    .collect();
                let idx = idx?;
                if idx.len() < 3 {
                    return Err(Error::format(path, format!("face with < 3 vertices at line {}", ln + 1)));
                }
                for k in 1..idx.len() - 1 {
                    triangles.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    Ok(TriMesh {
        vertices,
        triangles,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum PlyFormat {
    Ascii,
    BinaryLe,
}

#[derive(Debug, Clone, Copy)]
enum PlyScalar {
    F32,
    F64,
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
}

impl PlyScalar {
    fn parse(name: &str) -> Option<Self> {
        match name {
            "float" | "float32" => Some(PlyScalar::F32),
            "double" | "float64" => Some(PlyScalar::F64),
            "char" | "int8" => Some(PlyScalar::I8),
            "uchar" | "uint8" => Some(PlyScalar::U8),
            "short" | "int16" => Some(PlyScalar::I16),
            "ushort" | "uint16" => Some(PlyScalar::U16),
            "int" | "int32" => Some(PlyScalar::I32),
            "uint" | "uint32" => Some(PlyScalar::U32),
            _ => None,
        }
    }

    fn size(self) -> usize {
        match self {
            PlyScalar::I8 | PlyScalar::U8 => 1,
            PlyScalar::I16 | PlyScalar::U16 => 2,
            PlyScalar::F32 | PlyScalar::I32 | PlyScalar::U32 => 4,
            PlyScalar::F64 => 8,
        }
    }

    fn read_le(self, bytes: &[u8]) -> f64 {
        match self {
            PlyScalar::F32 => f32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            PlyScalar::F64 => f64::from_le_bytes(bytes[..8].try_into().unwrap()),
            PlyScalar::I8 => bytes[0] as i8 as f64,
            PlyScalar::U8 => bytes[0] as f64,
            PlyScalar::I16 => i16::from_le_bytes(bytes[..2].try_into().unwrap()) as f64,
            PlyScalar::U16 => u16::from_le_bytes(bytes[..2].try_into().unwrap()) as f64,
            PlyScalar::I32 => i32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            PlyScalar::U32 => u32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
        }
    }
}

#[derive(Debug)]
enum PlyProp {
    Scalar(String, PlyScalar),
    List(String, PlyScalar, PlyScalar),
}

struct PlyElement {
    name: String,
    count: usize,
    props: Vec<PlyProp>,
}

pub fn read_ply(path: &Path) -> Result<TriMesh> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);

    let mut line = String::new();
    let read_line = |r: &mut BufReader<std::fs::File>, line: &mut String| -> Result<()> {
        line.clear();
        r.read_line(line).map_err(|e| Error::io(path, e))?;
        Ok(())
    };
    read_line(&mut reader, &mut line)?;
    if line.trim() != "ply" {
        return Err(Error::format(path, "missing 'ply' magic"));
    }
    let mut format = None;
    let mut elements: Vec<PlyElement> = Vec::new();
    loop {
        read_line(&mut reader, &mut line)?;
        if line.is_empty() {
            return Err(Error::format(path, "unterminated header"));
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.first().copied() {
            Some("comment") | Some("obj_info") | None => {}
            Some("format") => {
                format = Some(match toks.get(1).copied() {
                    Some("ascii") => PlyFormat::Ascii,
                    Some("binary_little_endian") => PlyFormat::BinaryLe,
                    other => {
                        return Err(Error::format(
                            path,
                            format!("unsupported PLY format {other:?} (want ascii or binary_little_endian)"),
                        ))
                    }
                });
            }
            Some("element") => {
                let name = toks.get(1).unwrap_or(&"").to_string();
                let count: usize = toks
                    .get(2)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::format(path, "bad element count"))?;
                elements.push(PlyElement {
                    name,
                    count,
                    props: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::format(path, "property before element"))?;
                if toks.get(1) == Some(&"list") {
                    let count_ty = PlyScalar::parse(toks.get(2).unwrap_or(&""))
                        .ok_or_else(|| Error::format(path, "bad list count type"))?;
                    let item_ty = PlyScalar::parse(toks.get(3).unwrap_or(&""))
                        .ok_or_else(|| Error::format(path, "bad list item type"))?;
                    let name = toks.get(4).unwrap_or(&"").to_string();
                    el.props.push(PlyProp::List(name, count_ty, item_ty));
                } else {
                    let ty = PlyScalar::parse(toks.get(1).unwrap_or(&""))
                        .ok_or_else(|| Error::format(path, "bad property type"))?;
                    let name = toks.get(2).unwrap_or(&"").to_string();
                    el.props.push(PlyProp::Scalar(name, ty));
                }
            }
            Some("end_header") => break,
            Some(other) => {
                return Err(Error::format(path, format!("unknown header line '{other}'")));
            }
        }
    }
    let format = format.ok_or_else(|| Error::format(path, "missing format line"))?;

    let mut vertices: Vec<Vec3> = Vec::new();
    let mut triangles: Vec<[u32; 3]> = Vec::new();
    let mut push_face = |idx: &[f64]| -> Result<()> {
        if idx.len() < 3 {
            return Err(Error::format(path, "face with < 3 vertices"));
        }
        for k in 1..idx.len() - 1 {
            triangles.push([idx[0] as u32, idx[k] as u32, idx[k + 1] as u32]);
        }
        Ok(())
    };

    match format {
        PlyFormat::Ascii => {
            for el in &elements {
                for _ in 0..el.count {
                    read_line(&mut reader, &mut line)?;
                    let toks: Vec<&str> = line.split_whitespace().collect();
                    let mut cursor = 0usize;
                    let mut xyz = [f64::NAN; 3];
                    for prop in &el.props {
                        match prop {
                            PlyProp::Scalar(name, _) => {
                                let v: f64 = toks
                                    .get(cursor)
                                    .and_then(|s| s.parse().ok())
                                    .ok_or_else(|| Error::format(path, "short vertex row"))?;
                                cursor += 1;
                                match name.as_str() {
                                    "x" => xyz[0] = v,
                                    "y" => xyz[1] = v,
                                    "z" => xyz[2] = v,
                                    _ => {}
                                }
                            }
                            PlyProp::List(name, _, _) => {
                                let cnt: usize = toks
                                    .get(cursor)
                                    .and_then(|s| s.parse().ok())
                                    .ok_or_else(|| Error::format(path, "bad list count"))?;
                                cursor += 1;
                                let vals: Result<Vec<f64>> = (0..cnt)
                                    .map(|k| {
                                        toks.get(cursor + k)
                                            .and_then(|s| s.parse().ok())
                                            .ok_or_else(|| Error::format(path, "short list row"))
                                    })
                                    .collect();
                                cursor += cnt;
                                if el.name == "face" && (name == "vertex_indices" || name == "vertex_index") {
                                    push_face(&vals?)?;
                                }
                            }
                        }
                    }
                    if el.name == "vertex" {
                        if xyz.iter().any(|v| v.is_nan()) {
                            return Err(Error::format(path, "vertex missing x/y/z"));
                        }
                        vertices.push(Vec3::new(xyz[0], xyz[1], xyz[2]));
                    }
                }
            }
        }
        PlyFormat::BinaryLe => {
            let mut buf = Vec::new();
            reader.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
            let mut off = 0usize;
            let mut take = |n: usize| -> Result<&[u8]> {
                if off + n > buf.len() {
                    return Err(Error::format(path, "truncated binary payload"));
                }
                let s = &buf[off..off + n];
                off += n;
                Ok(s)
            };
            for el in &elements {
                for _ in 0..el.count {
                    let mut xyz = [f64::NAN; 3];
                    for prop in &el.props {
                        match prop {
                            PlyProp::Scalar(name, ty) => {
                                let v = ty.read_le(take(ty.size())?);
                                match name.as_str() {
                                    "x" => xyz[0] = v,
                                    "y" => xyz[1] = v,
                                    "z" => xyz[2] = v,
                                    _ => {}
                                }
                            }
                            PlyProp::List(name, cty, ity) => {
                                let cnt = cty.read_le(take(cty.size())?) as usize;
                                let mut vals = Vec::with_capacity(cnt);
                                for _ in 0..cnt {
                                    vals.push(ity.read_le(take(ity.size())?));
                                }
                                if el.name == "face" && (name == "vertex_indices" || name == "vertex_index") {
                                    push_face(&vals)?;
                                }
                            }
                        }
                    }
                    if el.name == "vertex" {
                        if xyz.iter().any(|v| v.is_nan()) {
                            return Err(Error::format(path, "vertex missing x/y/z"));
                        }
                        vertices.push(Vec3::new(xyz[0], xyz[1], xyz[2]));
                    }
                }
            }
        }
    }
    let n = vertices.len() as u32;
    if triangles.iter().flatten().any(|&i| i >= n) {
        return Err(Error::format(path, "face index out of range"));
    }
    Ok(TriMesh {
        vertices,
        triangles,
    })
}
