//! ASCII OBJ / PLY reading and writing for template meshes.
//!
//! Part labels come either from a `part` (or `label`) vertex property in PLY
//! files or from a sidecar text file `<stem>.parts.txt` next to the mesh with
//! one integer per line.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::mesh::{TemplateMesh, Vec3};

/// Raw triangle mesh as parsed from disk.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
    pub part_labels: Option<Vec<usize>>,
    pub colors: Option<Vec<[u8; 3]>>,
}

pub fn sidecar_labels_path(mesh_path: &Path) -> PathBuf {
    let stem = mesh_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    mesh_path.with_file_name(format!("{stem}.parts.txt"))
}

/// Loads an OBJ or PLY template. Labels are taken from the file, then the
/// sidecar, and otherwise synthesized by seeded clustering.
pub fn load_template(path: &Path, expected_parts: usize) -> Result<TemplateMesh> {
    let raw = read_mesh(path)?;
    let sidecar = sidecar_labels_path(path);
    let labels = match raw.part_labels {
        Some(labels) => Some(labels),
        None if sidecar.exists() => Some(read_labels(&sidecar)?),
        None => None,
    };
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "template".into());
    TemplateMesh::new(id, raw.vertices, raw.triangles, labels, expected_parts)
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.parse::<usize>().map_err(|_| Error::MalformedMesh {
                path: path.to_path_buf(),
                reason: format!("label line {}: `{l}` is not a non-negative integer", i + 1),
            })
        })
        .collect()
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut text = String::with_capacity(labels.len() * 3);
    for l in labels {
        writeln!(text, "{l}").unwrap();
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_mesh(path: &Path) -> Result<RawMesh> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase) {
        Some(ext) if ext == "obj" => parse_obj(&text, path),
        Some(ext) if ext == "ply" => parse_ply(&text, path),
        _ => Err(Error::MalformedMesh {
            path: path.to_path_buf(),
            reason: "expected a .obj or .ply file".into(),
        }),
    }
}

fn malformed(path: &Path, line: usize, reason: impl Into<String>) -> Error {
    Error::MalformedMesh {
        path: path.to_path_buf(),
        reason: format!("line {line}: {}", reason.into()),
    }
}

pub fn parse_obj(text: &str, path: &Path) -> Result<RawMesh> {
    let mut mesh = RawMesh::default();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("v") => {
                let coords: Vec<f64> = tokens
                    .take(3)
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| malformed(path, lineno, "bad vertex coordinate"))?;
                if coords.len() != 3 {
                    return Err(malformed(path, lineno, "vertex needs 3 coordinates"));
                }
                mesh.vertices.push([coords[0], coords[1], coords[2]]);
            }
            Some("f") => {
                let n = mesh.vertices.len() as i64;
                let idx: Vec<usize> = tokens
                    .map(|t| {
                        let first = t.split('/').next().unwrap_or("");
                        let raw: i64 = first
                            .parse()
                            .map_err(|_| malformed(path, lineno, format!("bad face index `{t}`")))?;
                        let resolved = if raw < 0 { n + raw } else { raw - 1 };
                        if resolved < 0 {
                            return Err(malformed(path, lineno, "face index out of range"));
                        }
                        Ok(resolved as usize)
                    })
                    .collect::<Result<_>>()?;
                if idx.len() != 3 {
                    return Err(malformed(
                        path,
                        lineno,
                        format!("only triangles are supported, face has {} corners", idx.len()),
                    ));
                }
                mesh.triangles.push([idx[0], idx[1], idx[2]]);
            }
            _ => {}
        }
    }
    if mesh.vertices.is_empty() || mesh.triangles.is_empty() {
        return Err(Error::MalformedMesh {
            path: path.to_path_buf(),
            reason: "no vertices or faces".into(),
        });
    }
    Ok(mesh)
}

struct PlyElement {
    name: String,
    count: usize,
    properties: Vec<String>,
}

pub fn parse_ply(text: &str, path: &Path) -> Result<RawMesh> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(malformed(path, 1, "missing `ply` magic")),
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    loop {
        let (i, line) = lines
            .next()
            .ok_or_else(|| malformed(path, 0, "header not terminated"))?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["format", "ascii", _] => {}
            ["format", other, ..] => return Err(malformed(path, i + 1, format!("unsupported format `{other}`"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(PlyElement {
                name: name.to_string(),
                count: count.parse().map_err(|_| malformed(path, i + 1, "bad element count"))?,
                properties: Vec::new(),
            }),
            ["property", "list", _, _, name] | ["property", _, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| malformed(path, i + 1, "property before element"))?;
                el.properties.push(name.to_string());
            }
            ["end_header"] => break,
            _ => return Err(malformed(path, i + 1, format!("unexpected header line `{line}`"))),
        }
    }
    let mut mesh = RawMesh::default();
    for el in &elements {
        for _ in 0..el.count {
            let (i, line) = lines
                .next()
                .ok_or_else(|| malformed(path, 0, format!("truncated `{}` element", el.name)))?;
            let tokens: Vec<&str> = line.split_whitespace().collect();
            match el.name.as_str() {
                "vertex" => {
                    let get = |name: &str| -> Result<Option<f64>> {
                        match el.properties.iter().position(|p| p == name) {
                            Some(pos) => tokens
                                .get(pos)
                                .and_then(|t| t.parse::<f64>().ok())
                                .map(Some)
                                .ok_or_else(|| malformed(path, i + 1, format!("bad `{name}`"))),
                            None => Ok(None),
                        }
                    };
                    let (x, y, z) = (get("x")?, get("y")?, get("z")?);
                    let (Some(x), Some(y), Some(z)) = (x, y, z) else {
                        return Err(malformed(path, i + 1, "vertex without x/y/z"));
                    };
                    mesh.vertices.push([x, y, z]);
                    if let Some(label) = match get("part")? {
                        Some(l) => Some(l),
                        None => get("label")?,
                    } {
                        if label < 0.0 || label.fract() != 0.0 {
                            return Err(malformed(path, i + 1, "part label must be a non-negative integer"));
                        }
                        mesh.part_labels.get_or_insert_with(Vec::new).push(label as usize);
                    }
                    if let (Some(r), Some(g), Some(b)) = (get("red")?, get("green")?, get("blue")?) {
                        mesh.colors
                            .get_or_insert_with(Vec::new)
                            .push([r as u8, g as u8, b as u8]);
                    }
                }
                "face" => {
                    let nums: Vec<usize> = tokens
                        .iter()
                        .map(|t| t.parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| malformed(path, i + 1, "bad face entry"))?;
                    match nums.as_slice() {
                        [3, a, b, c, ..] => mesh.triangles.push([*a, *b, *c]),
                        [k, ..] => {
                            return Err(malformed(
                                path,
                                i + 1,
                                format!("only triangles are supported, face has {k} corners"),
                            ))
                        }
                        [] => return Err(malformed(path, i + 1, "empty face")),
                    }
                }
                _ => {}
            }
        }
    }
    if let Some(labels) = &mesh.part_labels {
        if labels.len() != mesh.vertices.len() {
            return Err(malformed(path, 0, "some vertices lack a part label"));
        }
    }
    if mesh.vertices.is_empty() || mesh.triangles.is_empty() {
        return Err(malformed(path, 0, "no vertices or faces"));
    }
    Ok(mesh)
}

pub fn write_obj(path: &Path, vertices: &[Vec3], triangles: &[[usize; 3]]) -> Result<()> {
    let mut text = String::new();
    for v in vertices {
        writeln!(text, "v {} {} {}", v[0], v[1], v[2]).unwrap();
    }
    for t in triangles {
        writeln!(text, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1).unwrap();
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the template (rest pose) plus its part-label sidecar.
pub fn write_template(path: &Path, mesh: &TemplateMesh) -> Result<()> {
    write_obj(path, mesh.vertices(), mesh.triangles())?;
    write_labels(&sidecar_labels_path(path), mesh.part_labels())
}

/// ASCII PLY with per-vertex RGB colors.
pub fn write_colored_ply(path: &Path, vertices: &[Vec3], triangles: &[[usize; 3]], colors: &[[u8; 3]]) -> Result<()> {
    if colors.len() != vertices.len() {
        return Err(Error::Shape(format!(
            "{} colors for {} vertices",
            colors.len(),
            vertices.len()
        )));
    }
    let mut text = String::new();
    text.push_str("ply\nformat ascii 1.0\n");
    writeln!(text, "element vertex {}", vertices.len()).unwrap();
    text.push_str("property float x\nproperty float y\nproperty float z\n");
    text.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    writeln!(text, "element face {}", triangles.len()).unwrap();
    text.push_str("property list uchar int vertex_indices\nend_header\n");
    for (v, c) in vertices.iter().zip(colors) {
        writeln!(text, "{} {} {} {} {} {}", v[0], v[1], v[2], c[0], c[1], c[2]).unwrap();
    }
    for t in triangles {
        writeln!(text, "3 {} {} {}", t[0], t[1], t[2]).unwrap();
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Maps a probability in [0, 1] to a white-to-magenta ramp.
pub fn probability_color(p: f64) -> [u8; 3] {
    let p = p.clamp(0.0, 1.0);
    let fade = (255.0 * (1.0 - p)).round() as u8;
    [255, fade, 255]
}
