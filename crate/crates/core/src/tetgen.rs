//! TetGen `.node` / `.ele` ASCII reader and writer.
//!
//! Index base (0 or 1) is detected from the first point index in the
//! `.node` file and applied to the `.ele` connectivity.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Vec3;
use crate::scalar::{cst, to_f64, Real};
use crate::tetmesh::TetMesh;

fn data_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.split('#').next().unwrap_or("");
        let toks: Vec<&str> = l.split_whitespace().collect();
        (!toks.is_empty()).then_some((i + 1, toks))
    })
}

fn perr(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line, msg: msg.into() }
}

fn parse_num<N: std::str::FromStr>(path: &Path, line: usize, tok: &str) -> Result<N> {
    tok.parse().map_err(|_| perr(path, line, format!("bad number {tok:?}")))
}

/// Parse `.node` text. Returns the positions and the detected index base.
pub fn parse_node(text: &str, path: &Path) -> Result<(Vec<[f64; 3]>, usize)> {
    let mut lines = data_lines(text);
    let (hl, header) = lines.next().ok_or_else(|| perr(path, 0, "empty .node file"))?;
    let n: usize = parse_num(path, hl, header[0])?;
    let dim: usize = header.get(1).map(|t| parse_num(path, hl, t)).transpose()?.unwrap_or(3);
    if dim != 3 {
        return Err(perr(path, hl, format!("expected dimension 3, got {dim}")));
    }
    let mut pts = Vec::with_capacity(n);
    let mut base = None;
    for (ln, toks) in lines.take(n) {
        if toks.len() < 4 {
            return Err(perr(path, ln, "expected `index x y z`"));
        }
        let idx: usize = parse_num(path, ln, toks[0])?;
        let b = *base.get_or_insert(idx);
        if b > 1 {
            return Err(perr(path, ln, format!("first index must be 0 or 1, got {b}")));
        }
        if idx != pts.len() + b {
            return Err(perr(path, ln, format!("expected index {}, got {idx}", pts.len() + b)));
        }
        pts.push([parse_num(path, ln, toks[1])?, parse_num(path, ln, toks[2])?, parse_num(path, ln, toks[3])?]);
    }
    if pts.len() != n {
        return Err(perr(path, 0, format!("header declares {n} points, found {}", pts.len())));
    }
    Ok((pts, base.unwrap_or(0)))
}

/// Parse `.ele` text with the index base of the matching `.node` file.
pub fn parse_ele(text: &str, path: &Path, base: usize) -> Result<Vec<[usize; 4]>> {
    let mut lines = data_lines(text);
    let (hl, header) = lines.next().ok_or_else(|| perr(path, 0, "empty .ele file"))?;
    let n: usize = parse_num(path, hl, header[0])?;
    let per: usize = header.get(1).map(|t| parse_num(path, hl, t)).transpose()?.unwrap_or(4);
    if per != 4 {
        return Err(perr(path, hl, format!("only linear tets (4 nodes) supported, got {per}")));
    }
    let mut tets = Vec::with_capacity(n);
    for (ln, toks) in lines.take(n) {
        if toks.len() < 5 {
            return Err(perr(path, ln, "expected `index v0 v1 v2 v3`"));
        }
        let mut t = [0usize; 4];
        for i in 0..4 {
            let v: usize = parse_num(path, ln, toks[i + 1])?;
            t[i] = v.checked_sub(base).ok_or_else(|| perr(path, ln, format!("index {v} below base {base}")))?;
        }
        tets.push(t);
    }
    if tets.len() != n {
        return Err(perr(path, 0, format!("header declares {n} tets, found {}", tets.len())));
    }
    Ok(tets)
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Load a mesh, validating indices and orientation.
pub fn read_mesh<T: Real>(node: &Path, ele: &Path) -> Result<TetMesh<T>> {
    let (pts, base) = parse_node(&read(node)?, node)?;
    let tets = parse_ele(&read(ele)?, ele, base)?;
    TetMesh::new(pts.into_iter().map(|p| [cst(p[0]), cst(p[1]), cst(p[2])]).collect(), tets)
}

/// `.node` text, 0-based, shortest round-tripping float formatting.
pub fn format_node<T: Real>(points: &[Vec3<T>]) -> String {
    let mut s = String::new();
    writeln!(s, "{} 3 0 0", points.len()).unwrap();
    for (i, p) in points.iter().enumerate() {
        writeln!(s, "{} {:?} {:?} {:?}", i, to_f64(p[0]), to_f64(p[1]), to_f64(p[2])).unwrap();
    }
    s
}

/// `.ele` text, 0-based.
pub fn format_ele(tets: &[[usize; 4]]) -> String {
    let mut s = String::new();
    writeln!(s, "{} 4 0", tets.len()).unwrap();
    for (i, t) in tets.iter().enumerate() {
        writeln!(s, "{} {} {} {} {}", i, t[0], t[1], t[2], t[3]).unwrap();
    }
    s
}

pub fn write_node<T: Real>(path: &Path, points: &[Vec3<T>]) -> Result<()> {
    std::fs::write(path, format_node(points)).map_err(|e| Error::io(path, e))
}

pub fn write_ele(path: &Path, tets: &[[usize; 4]]) -> Result<()> {
    std::fs::write(path, format_ele(tets)).map_err(|e| Error::io(path, e))
}

pub fn write_mesh<T: Real>(mesh: &TetMesh<T>, node: &Path, ele: &Path) -> Result<()> {
    write_node(node, mesh.vertices())?;
    write_ele(ele, mesh.tets())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tetmesh::{build_uniform_grid, Aabb};

    #[test]
    fn one_based_input_is_detected() {
        let node = "# comment\n4 3 0 0\n1 0 0 0\n2 1 0 0\n3 0 1 0 # trailing\n4 0 0 1\n";
        let ele = "1 4 0\n1 1 2 3 4\n";
        let p = Path::new("x");
        let (pts, base) = parse_node(node, p).unwrap();
        assert_eq!(base, 1);
        assert_eq!(pts[1], [1.0, 0.0, 0.0]);
        assert_eq!(parse_ele(ele, p, base).unwrap(), vec![[0, 1, 2, 3]]);
    }

    #[test]
    fn one_and_zero_based_files_load_identically() {
        let m = build_uniform_grid::<f64>(&Aabb::new([-0.3, 0.1, 0.0], [1.7, 0.9, 0.77]), [2, 2, 1]).unwrap();
        let zero_node = format_node(m.vertices());
        let zero_ele = format_ele(m.tets());
        // Shift every index by one.
        let one_node: String = zero_node
            .lines()
            .enumerate()
            .map(|(i, l)| {
                if i == 0 {
                    format!("{l}\n")
                } else {
                    let mut t: Vec<String> = l.split(' ').map(String::from).collect();
                    t[0] = (t[0].parse::<usize>().unwrap() + 1).to_string();
                    format!("{}\n", t.join(" "))
                }
            })
            .collect();
        let one_ele: String = zero_ele
            .lines()
            .enumerate()
            .map(|(i, l)| {
                if i == 0 {
                    format!("{l}\n")
                } else {
                    let t: Vec<String> = l.split(' ').map(|x| (x.parse::<usize>().unwrap() + 1).to_string()).collect();
                    format!("{}\n", t.join(" "))
                }
            })
            .collect();
        let p = Path::new("x");
        let (a, ba) = parse_node(&zero_node, p).unwrap();
        let (b, bb) = parse_node(&one_node, p).unwrap();
        assert_eq!((ba, bb), (0, 1));
        assert_eq!(a, b);
        assert_eq!(parse_ele(&zero_ele, p, ba).unwrap(), parse_ele(&one_ele, p, bb).unwrap());
        assert_eq!(parse_ele(&zero_ele, p, ba).unwrap(), m.tets());
        let verts: Vec<[f64; 3]> = m.vertices().to_vec();
        assert_eq!(a, verts);
    }

    #[test]
    fn malformed_input_reports_line() {
        let p = Path::new("bad.node");
        let err = parse_node("2 3 0 0\n0 0 0 0\n1 0 zero 0\n", p).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        assert!(parse_node("3 3 0 0\n0 0 0 0\n", p).is_err());
        assert!(parse_ele("1 10 0\n0 0 1 2 3 4 5 6 7 8 9\n", p, 0).is_err());
    }
}
