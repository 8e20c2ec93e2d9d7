//! ASCII mesh files in the `.msh` 2.2 layout.
//!
//! Only the subset needed here is read and written: `$PhysicalNames`,
//! `$Nodes`, and `$Elements` with 3-node triangles (type 2), 2-node lines
//! (type 1) and 1-node points (type 15). Node tags are carried by the
//! physical group of the point or line elements that reference a node:
//! `"clamp"` marks clamped nodes and `"seat"` the loaded surface. Triangles
//! belong to the surface group `"free"`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{signed_area, Mesh, MeshError, NodeTag};

const PHYS_CLAMP: u32 = 1;
const PHYS_SEAT: u32 = 2;
const PHYS_FREE: u32 = 3;

pub fn write_msh_string(mesh: &Mesh) -> String {
    let mut s = String::new();
    s.push_str("$MeshFormat\n2.2 0 8\n$EndMeshFormat\n");
    s.push_str("$PhysicalNames\n3\n");
    let _ = writeln!(s, "0 {PHYS_CLAMP} \"clamp\"");
    let _ = writeln!(s, "0 {PHYS_SEAT} \"seat\"");
    let _ = writeln!(s, "2 {PHYS_FREE} \"free\"");
    s.push_str("$EndPhysicalNames\n");
    let _ = writeln!(s, "$Nodes\n{}", mesh.n_nodes());
    for (i, p) in mesh.coords().iter().enumerate() {
        let _ = writeln!(s, "{} {} {} 0", i + 1, p[0], p[1]);
    }
    s.push_str("$EndNodes\n");
    let tagged: Vec<(usize, u32)> = mesh
        .tags()
        .iter()
        .enumerate()
        .filter_map(|(i, t)| match t {
            NodeTag::Dirichlet => Some((i, PHYS_CLAMP)),
            NodeTag::LoadSurface => Some((i, PHYS_SEAT)),
            NodeTag::Free => None,
        })
        .collect();
    let _ = writeln!(s, "$Elements\n{}", tagged.len() + mesh.triangles().len());
    let mut id = 1;
    for (node, phys) in tagged {
        let _ = writeln!(s, "{id} 15 2 {phys} {phys} {}", node + 1);
        id += 1;
    }
    for t in mesh.triangles() {
        let _ = writeln!(
            s,
            "{id} 2 2 {PHYS_FREE} 1 {} {} {}",
            t[0] + 1,
            t[1] + 1,
            t[2] + 1
        );
        id += 1;
    }
    s.push_str("$EndElements\n");
    s
}

pub fn write_msh(mesh: &Mesh, path: &Path) -> Result<(), MeshError> {
    std::fs::write(path, write_msh_string(mesh))?;
    Ok(())
}

pub fn read_msh(path: &Path) -> Result<Mesh, MeshError> {
    parse_msh(&std::fs::read_to_string(path)?)
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Option<(usize, &'a str)> {
        for (i, l) in self.inner.by_ref() {
            self.last = i + 1;
            let l = l.trim();
            if !l.is_empty() {
                return Some((i + 1, l));
            }
        }
        None
    }

    fn expect(&mut self) -> Result<(usize, &'a str), MeshError> {
        let last = self.last;
        self.next().ok_or(MeshError::Parse {
            line: last + 1,
            msg: "unexpected end of file".into(),
        })
    }
}

fn parse_err(line: usize, msg: impl Into<String>) -> MeshError {
    MeshError::Parse {
        line,
        msg: msg.into(),
    }
}

fn field<T: std::str::FromStr>(line: usize, tok: Option<&str>, what: &str) -> Result<T, MeshError> {
    tok.ok_or_else(|| parse_err(line, format!("missing {what}")))?
        .parse()
        .map_err(|_| parse_err(line, format!("invalid {what}")))
}

pub fn parse_msh(text: &str) -> Result<Mesh, MeshError> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        last: 0,
    };
    let mut group_names: HashMap<u32, String> = HashMap::new();
    let mut node_ids: HashMap<u64, usize> = HashMap::new();
    let mut coords: Vec<[f64; 2]> = Vec::new();
    let mut triangles: Vec<[usize; 3]> = Vec::new();
    // (node index, physical tag) pairs from point/line elements.
    let mut marked: Vec<(usize, u32, usize)> = Vec::new();
    let mut saw_format = false;

    while let Some((ln, line)) = lines.next() {
        match line {
            "$MeshFormat" => {
                let (ln, l) = lines.expect()?;
                let version: f64 = field(ln, l.split_whitespace().next(), "format version")?;
                if !(2.0..3.0).contains(&version) {
                    return Err(parse_err(ln, format!("unsupported format version {version}")));
                }
                if l.split_whitespace().nth(1) != Some("0") {
                    return Err(parse_err(ln, "only ASCII files are supported"));
                }
                saw_format = true;
                let (ln, l) = lines.expect()?;
                if l != "$EndMeshFormat" {
                    return Err(parse_err(ln, "expected $EndMeshFormat"));
                }
            }
            "$PhysicalNames" => {
                let (ln, l) = lines.expect()?;
                let count: usize = field(ln, Some(l), "physical name count")?;
                for _ in 0..count {
                    let (ln, l) = lines.expect()?;
                    let mut it = l.splitn(3, char::is_whitespace);
                    let _dim: u32 = field(ln, it.next(), "physical dimension")?;
                    let tag: u32 = field(ln, it.next(), "physical tag")?;
                    let name = it
                        .next()
                        .ok_or_else(|| parse_err(ln, "missing physical name"))?
                        .trim()
                        .trim_matches('"')
                        .to_string();
                    group_names.insert(tag, name);
                }
                let (ln, l) = lines.expect()?;
                if l != "$EndPhysicalNames" {
                    return Err(parse_err(ln, "expected $EndPhysicalNames"));
                }
            }
            "$Nodes" => {
                let (ln, l) = lines.expect()?;
                let count: usize = field(ln, Some(l), "node count")?;
                coords.reserve(count);
                for _ in 0..count {
                    let (ln, l) = lines.expect()?;
                    let mut it = l.split_whitespace();
                    let id: u64 = field(ln, it.next(), "node id")?;
                    let x: f64 = field(ln, it.next(), "x coordinate")?;
                    let y: f64 = field(ln, it.next(), "y coordinate")?;
                    if node_ids.insert(id, coords.len()).is_some() {
                        return Err(parse_err(ln, format!("duplicate node id {id}")));
                    }
                    coords.push([x, y]);
                }
                let (ln, l) = lines.expect()?;
                if l != "$EndNodes" {
                    return Err(parse_err(ln, "expected $EndNodes"));
                }
            }
            "$Elements" => {
                let (ln, l) = lines.expect()?;
                let count: usize = field(ln, Some(l), "element count")?;
                for _ in 0..count {
                    let (ln, l) = lines.expect()?;
                    let mut it = l.split_whitespace();
                    let _id: u64 = field(ln, it.next(), "element id")?;
                    let elem_type: u32 = field(ln, it.next(), "element type")?;
                    let n_tags: usize = field(ln, it.next(), "tag count")?;
                    let mut elem_tags = Vec::with_capacity(n_tags);
                    for _ in 0..n_tags {
                        elem_tags.push(field::<u32>(ln, it.next(), "element tag")?);
                    }
                    let phys = elem_tags.first().copied().unwrap_or(0);
                    let n_vertices = match elem_type {
                        2 => 3,
                        1 => 2,
                        15 => 1,
                        other => {
                            return Err(MeshError::UnsupportedElement {
                                line: ln,
                                elem_type: other,
                            })
                        }
                    };
                    let mut v = [0usize; 3];
                    for slot in v.iter_mut().take(n_vertices) {
                        let id: u64 = field(ln, it.next(), "element node")?;
                        *slot = *node_ids
                            .get(&id)
                            .ok_or_else(|| parse_err(ln, format!("unknown node {id}")))?;
                    }
                    match elem_type {
                        2 => {
                            if signed_area(coords[v[0]], coords[v[1]], coords[v[2]]) < 0.0 {
                                v.swap(1, 2);
                            }
                            triangles.push(v);
                        }
                        _ => {
                            for &node in v.iter().take(n_vertices) {
                                marked.push((node, phys, ln));
                            }
                        }
                    }
                }
                let (ln, l) = lines.expect()?;
                if l != "$EndElements" {
                    return Err(parse_err(ln, "expected $EndElements"));
                }
            }
            other if other.starts_with("$End") => {
                return Err(parse_err(ln, format!("unexpected {other}")));
            }
            other if other.starts_with('$') => {
                // Unknown section: skip to its end marker.
                let end = format!("$End{}", &other[1..]);
                loop {
                    let (_, l) = lines.expect()?;
                    if l == end {
                        break;
                    }
                }
            }
            _ => return Err(parse_err(ln, format!("unexpected content '{line}'"))),
        }
    }
    if !saw_format {
        return Err(parse_err(1, "missing $MeshFormat section"));
    }

    let mut tags = vec![NodeTag::Free; coords.len()];
    for (node, phys, ln) in marked {
        let name = group_names.get(&phys).map(String::as_str);
        let tag = match name {
            Some("clamp") => NodeTag::Dirichlet,
            Some("seat") => NodeTag::LoadSurface,
            Some("free") | None => continue,
            Some(other) => {
                return Err(parse_err(ln, format!("unknown physical group '{other}'")));
            }
        };
        if tags[node] != NodeTag::Dirichlet {
            tags[node] = tag;
        }
    }
    Mesh::new(coords, triangles, tags)
}
