//! 3DGS-compatible PLY export and import.
//!
//! One binary little-endian `vertex` element per visible leaf with the usual
//! properties: position, zero normals, `f_dc_*`, channel-major `f_rest_*`,
//! logit opacity, log scales and a `(w, x, y, z)` rotation. The SH of a leaf
//! is the weight-averaged SH of its corners, which reproduces the rendered
//! colour exactly for degree 0.

use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::{matmul, quat_normalize, quat_to_mat, transpose, Mat3};
use crate::model::Model;
use crate::reparam::{activate_weight, covariance_to_scale_rotation, gaussian_geometry};
use crate::scalar::{to_f64, Real};
use crate::sh;

/// One exported Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct PlySplat {
    pub mean: [f32; 3],
    /// `3 + 3·(n_basis − 1)`: DC per channel, then the rest channel-major.
    pub sh: Vec<f32>,
    pub opacity: f32,
    pub log_scale: [f32; 3],
    pub rotation: [f32; 4],
}

impl PlySplat {
    pub fn covariance(&self) -> Mat3<f64> {
        let r = quat_to_mat(quat_normalize(self.rotation.map(f64::from)));
        let s = self.log_scale.map(|l| (2.0 * f64::from(l)).exp());
        let mut d = [[0.0; 3]; 3];
        for i in 0..3 {
            d[i][i] = s[i];
        }
        matmul(&matmul(&r, &d), &transpose(&r))
    }

    pub fn sh_degree(&self) -> usize {
        match self.sh.len() / 3 {
            1 => 0,
            4 => 1,
            9 => 2,
            _ => 3,
        }
    }
}

/// Splats of the visible leaves at the model's current geometry.
pub fn export_splats<T: Real>(model: &Model<T>) -> Result<Vec<PlySplat>> {
    let geo = model.geometry(false);
    let nb = sh::n_basis(model.attrs.sh_degree);
    model
        .forest
        .visible_leaves()
        .into_iter()
        .map(|k| {
            let leaf = model.attrs.leaf_input(&model.forest, &geo.render_pos, k);
            let w = leaf.weights_raw.map(activate_weight);
            let (mean, cov) = gaussian_geometry(&leaf.points, &w, quat_normalize(leaf.rotation_raw))?;
            let (scales, q) = covariance_to_scale_rotation(&cov)?;
            let ws = w.iter().fold(T::zero(), |a, &b| a + b);
            let coeff = |k: usize, c: usize| {
                let v = (0..4).fold(T::zero(), |a, i| a + w[i] * leaf.sh[i][k * 3 + c]) / ws;
                to_f64(v) as f32
            };
            let mut shv: Vec<f32> = (0..3).map(|c| coeff(0, c)).collect();
            for c in 0..3 {
                shv.extend((1..nb).map(|k| coeff(k, c)));
            }
            Ok(PlySplat {
                mean: mean.map(|x| to_f64(x) as f32),
                sh: shv,
                opacity: to_f64(leaf.opacity_raw) as f32,
                log_scale: scales.map(|s| to_f64(s).max(1e-30).ln() as f32),
                rotation: q.map(|x| to_f64(x) as f32),
            })
        })
        .collect()
}

fn property_names(n_rest: usize) -> Vec<String> {
    let mut names: Vec<String> = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"].map(String::from).to_vec();
    names.extend((0..n_rest).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    names
}

pub fn to_ply_bytes(splats: &[PlySplat]) -> Result<Vec<u8>> {
    let n_sh = splats.first().map_or(3, |s| s.sh.len());
    if splats.iter().any(|s| s.sh.len() != n_sh) || n_sh < 3 {
        return Err(Error::SizeMismatch("splats disagree on SH size".into()));
    }
    let names = property_names(n_sh - 3);
    let mut out = Vec::new();
    write!(out, "ply\nformat binary_little_endian 1.0\nelement vertex {}\n", splats.len()).unwrap();
    for n in &names {
        writeln!(out, "property float {n}").unwrap();
    }
    out.extend(b"end_header\n");
    for s in splats {
        let mut row: Vec<f32> = s.mean.to_vec();
        row.extend([0.0; 3]);
        row.extend(&s.sh);
        row.push(s.opacity);
        row.extend(s.log_scale);
        row.extend(s.rotation);
        for x in row {
            out.extend(x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_ply(path: &Path, splats: &[PlySplat]) -> Result<()> {
    std::fs::write(path, to_ply_bytes(splats)?).map_err(|e| Error::io(path, e))
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Format(format!("ply: {}", msg.into()))
}

/// Parse a binary little-endian Gaussian PLY with float properties.
pub fn from_ply_bytes(bytes: &[u8]) -> Result<Vec<PlySplat>> {
    const END: &[u8] = b"end_header\n";
    let end = bytes.windows(END.len()).position(|w| w == END).ok_or_else(|| bad("missing end_header"))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not UTF-8"))?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(bad("missing magic"));
    }
    let mut n = None;
    let mut props = Vec::new();
    for line in lines {
        let t: Vec<&str> = line.split_whitespace().collect();
        match t.as_slice() {
            ["format", "binary_little_endian", _] => {}
            ["format", f, ..] => return Err(bad(format!("unsupported format {f}"))),
            ["element", "vertex", c] => n = Some(c.parse::<usize>().map_err(|_| bad("bad vertex count"))?),
            ["element", e, ..] => return Err(bad(format!("unexpected element {e}"))),
            ["property", "float", name] => props.push(name.to_string()),
            ["property", ty, ..] => return Err(bad(format!("unsupported property type {ty}"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            _ => return Err(bad(format!("unexpected header line {line:?}"))),
        }
    }
    let n = n.ok_or_else(|| bad("no vertex element"))?;
    let col = |name: &str| props.iter().position(|p| p == name).ok_or_else(|| bad(format!("missing property {name}")));
    let n_rest = props.iter().filter(|p| p.starts_with("f_rest_")).count();
    let cols = property_names(n_rest).iter().filter(|p| !p.starts_with('n')).map(|p| col(p)).collect::<Result<Vec<_>>>()?;
    let body = &bytes[end + END.len()..];
    let stride = 4 * props.len();
    if body.len() != n * stride {
        return Err(bad(format!("body has {} bytes, expected {}", body.len(), n * stride)));
    }
    Ok(body
        .chunks_exact(stride)
        .map(|row| {
            let f = |c: usize| f32::from_le_bytes(row[4 * c..4 * c + 4].try_into().unwrap());
            let v: Vec<f32> = cols.iter().map(|&c| f(c)).collect();
            let k = 3 + 3 + n_rest;
            PlySplat {
                mean: [v[0], v[1], v[2]],
                sh: v[3..k].to_vec(),
                opacity: v[k],
                log_scale: [v[k + 1], v[k + 2], v[k + 3]],
                rotation: [v[k + 4], v[k + 5], v[k + 6], v[k + 7]],
            }
        })
        .collect())
}

pub fn read_ply(path: &Path) -> Result<Vec<PlySplat>> {
    from_ply_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
