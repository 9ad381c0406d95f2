//! Binary checkpoint format.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "STFD" u32:version
//! section:header JSON        training config, map architecture, counts
//! section:.node text         base rest positions (exact f64)
//! section:.ele text
//! section:forest             preorder split bits, then masked bits per node
//! f32 tensors                controls, SH, weights, opacity, rotation, map
//! u8:has_optimizer [Adam state per group]
//! ```
//!
//! A section is a `u64` byte length followed by the bytes. Nodes and control
//! vertices are written in the forest's canonical order, so saving a loaded
//! checkpoint reproduces the file byte for byte.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::SubdivisionForest;
use crate::homeo::{Conditioner, CouplingBlock, HashEncoding2D, HashEncodingConfig, Mlp, OrientationPreservingMap};
use crate::model::Model;
use crate::reparam::RenderAttributes;
use crate::scalar::{cst, to_f64, Real};
use crate::tetgen::{format_ele, format_node, parse_ele, parse_node};
use crate::tetmesh::Aabb;
use crate::train::adam::Adam;
use crate::train::{Optimizer, TrainConfig};

pub const MAGIC: &[u8; 4] = b"STFD";
pub const VERSION: u32 = 1;

/// Everything needed to resume training or render a scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Real> {
    pub model: Model<T>,
    pub config: TrainConfig,
    pub optimizer: Option<Optimizer<T>>,
    pub iteration: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum BlockHeader {
    Network { axis: usize, encoding: HashEncodingConfig, sizes: Vec<usize> },
    Constant { axis: usize, s: f64, t: f64 },
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    seed: u64,
    iteration: u64,
    map_enabled: bool,
    map_domain: Aabb,
    map_blocks: Vec<BlockHeader>,
    sh_degree: usize,
    max_depth: u8,
    n_nodes: usize,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, x: u8) {
        self.0.push(x);
    }
    fn u64(&mut self, x: u64) {
        self.0.extend(x.to_le_bytes());
    }
    fn f64(&mut self, x: f64) {
        self.0.extend(x.to_le_bytes());
    }
    fn section(&mut self, bytes: &[u8]) {
        self.u64(bytes.len() as u64);
        self.0.extend(bytes);
    }
    fn f32s<T: Real>(&mut self, xs: impl IntoIterator<Item = T>) {
        for x in xs {
            self.0.extend((to_f64(x) as f32).to_le_bytes());
        }
    }
    fn tensor<T: Real>(&mut self, xs: impl ExactSizeIterator<Item = T>) {
        self.u64(xs.len() as u64);
        self.f32s(xs);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn truncated() -> Error {
    Error::Format("checkpoint truncated".into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(truncated)?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| truncated())
    }
    fn section(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }
    fn text(&mut self) -> Result<&'a str> {
        std::str::from_utf8(self.section()?).map_err(|_| Error::Format("checkpoint text section is not UTF-8".into()))
    }
    fn f32s<T: Real>(&mut self, n: usize) -> Result<Vec<T>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(truncated)?)?;
        Ok(bytes.chunks_exact(4).map(|c| cst(f64::from(f32::from_le_bytes(c.try_into().unwrap())))).collect())
    }
    fn tensor<T: Real>(&mut self, expected: usize, what: &str) -> Result<Vec<T>> {
        let n = self.len()?;
        if n != expected {
            return Err(Error::Format(format!("{what}: {n} entries, expected {expected}")));
        }
        self.f32s(n)
    }
}

fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        out[i / 8] |= (b as u8) << (i % 8);
    }
    out
}

fn unpack_bits(bytes: &[u8], n: usize) -> Result<Vec<bool>> {
    if bytes.len() != n.div_ceil(8) {
        return Err(Error::Format("forest bit section has the wrong length".into()));
    }
    Ok((0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect())
}

/// Canonical orders: `nodes[new] = old`, `vertices[new] = old` over render
/// vertices.
fn canonical<T: Real>(forest: &SubdivisionForest<T>) -> (Vec<usize>, Vec<usize>) {
    let nb = forest.n_base_vertices();
    let nodes = forest.canonical_order();
    let verts = (0..nb).chain(forest.canonical_control_order().into_iter().map(|c| nb + c)).collect();
    (nodes, verts)
}

/// Gather `stride`-sized rows of `xs` in `order`.
fn gather<T: Copy>(xs: &[T], stride: usize, order: &[usize]) -> Vec<T> {
    order.iter().flat_map(|&o| xs[o * stride..(o + 1) * stride].iter().copied()).collect()
}

fn write_adam<T: Real>(w: &mut Writer, a: &Adam<T>, stride: usize, order: Option<&[usize]>) {
    w.f64(a.lr);
    w.u64(a.step);
    let (m, v) = match order {
        Some(o) => (gather(&a.m, stride, o), gather(&a.v, stride, o)),
        None => (a.m.clone(), a.v.clone()),
    };
    w.tensor(m.into_iter());
    w.tensor(v.into_iter());
}

fn read_adam<T: Real>(r: &mut Reader, n: usize, what: &str) -> Result<Adam<T>> {
    let lr = r.f64()?;
    let step = r.u64()?;
    let m = r.tensor(n, what)?;
    let v = r.tensor(n, what)?;
    Ok(Adam { lr, step, m, v })
}

impl<T: Real> Checkpoint<T> {
    pub fn new(model: Model<T>, config: TrainConfig) -> Self {
        Self { model, config, optimizer: None, iteration: 0 }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let model = &self.model;
        model.check()?;
        let forest = &model.forest;
        let (nodes, verts) = canonical(forest);
        let blocks = model
            .map
            .blocks()
            .iter()
            .map(|b| match b.conditioner() {
                Conditioner::Network { encoding, mlp } => {
                    BlockHeader::Network { axis: b.axis(), encoding: *encoding.config(), sizes: mlp.sizes().to_vec() }
                }
                Conditioner::Constant { s, t } => BlockHeader::Constant { axis: b.axis(), s: to_f64(*s), t: to_f64(*t) },
            })
            .collect();
        let header = Header {
            config: self.config.clone(),
            seed: self.config.seed,
            iteration: self.iteration,
            map_enabled: model.map_enabled,
            map_domain: *model.map.domain(),
            map_blocks: blocks,
            sh_degree: model.attrs.sh_degree,
            max_depth: forest.max_depth(),
            n_nodes: forest.n_nodes(),
        };

        let mut w = Writer(Vec::new());
        w.0.extend(MAGIC);
        w.0.extend(VERSION.to_le_bytes());
        w.section(&serde_json::to_vec(&header)?);
        w.section(format_node(&model.vertices).as_bytes());
        w.section(format_ele(&model.tets).as_bytes());

        let split_bits = forest.preorder_bits();
        w.u64(split_bits.len() as u64);
        w.section(&pack_bits(&split_bits));
        let masked: Vec<bool> = nodes.iter().map(|&k| forest.node(k).masked).collect();
        w.section(&pack_bits(&masked));

        let nc = model.attrs.n_coeffs();
        w.tensor(gather(forest.controls().as_flattened(), 4, &nodes).into_iter());
        w.tensor(gather(&model.attrs.sh, nc, &verts).into_iter());
        w.tensor(gather(model.attrs.weights.as_flattened(), 4, &nodes).into_iter());
        w.tensor(gather(&model.attrs.opacity, 1, &nodes).into_iter());
        w.tensor(gather(model.attrs.rotation.as_flattened(), 4, &nodes).into_iter());
        for t in model.map.tensors() {
            w.tensor(t.iter().copied());
        }

        match &self.optimizer {
            None => w.u8(0),
            Some(opt) => {
                if !opt.matches(model) {
                    return Err(Error::SizeMismatch("optimizer state does not match the model".into()));
                }
                w.u8(1);
                write_adam(&mut w, &opt.vertices, 1, None);
                for a in &opt.map {
                    write_adam(&mut w, a, 1, None);
                }
                write_adam(&mut w, &opt.controls, 4, Some(&nodes));
                write_adam(&mut w, &opt.sh, nc, Some(&verts));
                write_adam(&mut w, &opt.weights, 4, Some(&nodes));
                write_adam(&mut w, &opt.opacity, 1, Some(&nodes));
                write_adam(&mut w, &opt.rotation, 4, Some(&nodes));
            }
        }
        Ok(w.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4).ok() != Some(&MAGIC[..]) {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version { found: version, expected: VERSION });
        }
        let header: Header = serde_json::from_slice(r.section()?)?;
        let src = Path::new("<checkpoint>");
        let (pts, base) = parse_node(r.text()?, src)?;
        let tets = parse_ele(r.text()?, src, base)?;
        let vertices: Vec<_> = pts.into_iter().map(|p| p.map(cst::<T>)).collect();

        let n_bits = r.len()?;
        let split_bits = unpack_bits(r.section()?, n_bits)?;
        let mut forest = SubdivisionForest::from_preorder(vertices.len(), &tets, &split_bits, header.max_depth)?;
        let n = forest.n_nodes();
        if n != header.n_nodes {
            return Err(Error::Format(format!("forest has {n} nodes, header says {}", header.n_nodes)));
        }
        for (k, m) in unpack_bits(r.section()?, n)?.into_iter().enumerate() {
            forest.set_masked(k, m);
        }
        let controls = r.tensor::<T>(4 * n, "controls")?;
        forest.controls_mut().as_flattened_mut().copy_from_slice(&controls);

        let nc = crate::sh::n_coeffs(header.sh_degree);
        let sh = r.tensor(nc * forest.n_render_vertices(), "sh")?;
        let weights = r.tensor::<T>(4 * n, "weights")?;
        let opacity = r.tensor(n, "opacity")?;
        let rotation = r.tensor::<T>(4 * n, "rotation")?;
        let attrs = RenderAttributes {
            sh_degree: header.sh_degree,
            sh,
            weights: weights.chunks_exact(4).map(|c| c.try_into().unwrap()).collect(),
            opacity,
            rotation: rotation.chunks_exact(4).map(|c| c.try_into().unwrap()).collect(),
        };

        let mut blocks = Vec::with_capacity(header.map_blocks.len());
        for b in &header.map_blocks {
            blocks.push(match b {
                BlockHeader::Network { axis, encoding, sizes } => {
                    if *axis > 2 || sizes.len() < 2 {
                        return Err(Error::Format("bad coupling block header".into()));
                    }
                    let table = r.tensor(encoding.n_params(), "hash table")?;
                    let params = r.tensor(Mlp::<T>::n_params_for(sizes), "mlp")?;
                    CouplingBlock::new(
                        *axis,
                        Conditioner::Network { encoding: HashEncoding2D::new(*encoding, table), mlp: Mlp::from_params(sizes.clone(), params) },
                    )
                }
                BlockHeader::Constant { axis, s, t } => {
                    if *axis > 2 {
                        return Err(Error::Format("bad coupling block header".into()));
                    }
                    CouplingBlock::constant(*axis, cst(*s), cst(*t))
                }
            });
        }
        let map = OrientationPreservingMap::new(header.map_domain, blocks);
        let model = Model { vertices, tets, map, map_enabled: header.map_enabled, forest, attrs };
        model.check()?;

        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let vertices = read_adam(&mut r, 3 * model.vertices.len(), "vertex moments")?;
                let map = model
                    .map
                    .tensors()
                    .iter()
                    .map(|t| read_adam(&mut r, t.len(), "map moments"))
                    .collect::<Result<Vec<_>>>()?;
                Some(Optimizer {
                    vertices,
                    map,
                    controls: read_adam(&mut r, 4 * n, "control moments")?,
                    sh: read_adam(&mut r, model.attrs.sh.len(), "sh moments")?,
                    weights: read_adam(&mut r, 4 * n, "weight moments")?,
                    opacity: read_adam(&mut r, n, "opacity moments")?,
                    rotation: read_adam(&mut r, 4 * n, "rotation moments")?,
                })
            }
            x => return Err(Error::Format(format!("bad optimizer flag {x}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { model, config: header.config, optimizer, iteration: header.iteration })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", PathBuf::from(path).display())),
            e => e,
        })
    }
}
