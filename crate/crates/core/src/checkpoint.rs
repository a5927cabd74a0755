//! Versioned binary checkpoints: magic, format version, a JSON header, then
//! every parameter value as little-endian f64. Values round-trip exactly.

use std::fs;
use std::path::Path;

use cellsearch_tensor::ParamSet;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controller::{Controller, ControllerConfig};
use crate::error::{Error, Result};
use crate::genotype::Genotype;
use crate::segnet::{CellNet, NetConfig, StaticNet};

const MAGIC: &[u8; 8] = b"CELLSRCH";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dims: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Meta {
    Static { net: NetConfig },
    Cell { net: NetConfig, k: usize, tokens: Vec<usize> },
    Controller { config: ControllerConfig, k: usize, baseline: Option<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    meta: Meta,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: Meta,
    pub tensors: Vec<TensorEntry>,
    pub values: Vec<f64>,
}

impl Checkpoint {
    pub fn capture(meta: Meta, set: &ParamSet) -> Self {
        Self {
            meta,
            tensors: set
                .iter()
                .map(|p| TensorEntry {
                    name: p.name.clone(),
                    dims: p.tensor().dims().to_vec(),
                })
                .collect(),
            values: set.flat_values(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            tensors: self.tensors.clone(),
        })?;
        let mut out = Vec::with_capacity(20 + header.len() + 8 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(format!("format version {version}, expected {FORMAT_VERSION}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(e.to_string()))?;
        let rest = &bytes[20 + hlen..];
        let expected: usize = header.tensors.iter().map(|t| t.dims.iter().product::<usize>()).sum();
        if rest.len() != 8 * expected {
            return Err(bad(format!("{} value bytes for {expected} values", rest.len())));
        }
        let values = rest
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self {
            meta: header.meta,
            tensors: header.tensors,
            values,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?, path)
    }

    /// Copies values into `set`, which must have the same layout.
    pub fn restore(&self, set: &mut ParamSet) -> Result<()> {
        if set.len() != self.tensors.len() {
            return Err(Error::Format {
                path: Default::default(),
                reason: format!("checkpoint has {} tensors, model {}", self.tensors.len(), set.len()),
            });
        }
        for (p, t) in set.iter().zip(&self.tensors) {
            if p.name != t.name || p.tensor().dims() != t.dims.as_slice() {
                return Err(Error::Format {
                    path: Default::default(),
                    reason: format!("tensor {} {:?} does not match {} {:?}", t.name, t.dims, p.name, p.tensor().dims()),
                });
            }
        }
        set.load_flat(&self.values)?;
        Ok(())
    }
}

pub fn save_static(net: &StaticNet, path: &Path) -> Result<()> {
    Checkpoint::capture(Meta::Static { net: net.config.clone() }, &net.params).save(path)
}

pub fn load_static(path: &Path) -> Result<StaticNet> {
    let ck = Checkpoint::load(path)?;
    let Meta::Static { net } = &ck.meta else {
        return Err(wrong_kind(path, "static network"));
    };
    let mut out = StaticNet::new(net.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    ck.restore(&mut out.params)?;
    Ok(out)
}

pub fn save_cell(cell: &CellNet, net: &NetConfig, path: &Path) -> Result<()> {
    let g = cell.genotype();
    let meta = Meta::Cell {
        net: net.clone(),
        k: g.k(),
        tokens: g.encode(),
    };
    Checkpoint::capture(meta, &cell.params).save(path)
}

/// The static net only supplies shapes here; every cell value comes from
/// the file.
pub fn load_cell(path: &Path, static_net: &StaticNet) -> Result<CellNet> {
    let ck = Checkpoint::load(path)?;
    let Meta::Cell { net, k, tokens } = &ck.meta else {
        return Err(wrong_kind(path, "cell"));
    };
    if net != &static_net.config {
        return Err(Error::Config("cell checkpoint was trained against a different network config".into()));
    }
    let g = Genotype::decode(tokens, *k)?;
    let mut cell = CellNet::new(&g, static_net, &mut ChaCha8Rng::seed_from_u64(0))?;
    ck.restore(&mut cell.params)?;
    Ok(cell)
}

pub fn save_controller(c: &Controller, baseline: Option<f64>, path: &Path) -> Result<()> {
    let meta = Meta::Controller {
        config: *c.config(),
        k: c.k(),
        baseline,
    };
    Checkpoint::capture(meta, c.params()).save(path)
}

pub fn load_controller(path: &Path) -> Result<(Controller, Option<f64>)> {
    let ck = Checkpoint::load(path)?;
    let Meta::Controller { config, k, baseline } = &ck.meta else {
        return Err(wrong_kind(path, "controller"));
    };
    let mut c = Controller::new(*config, *k, &mut ChaCha8Rng::seed_from_u64(0))?;
    ck.restore(c.params_mut())?;
    Ok((c, *baseline))
}

fn wrong_kind(path: &Path, want: &str) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: format!("not a {want} checkpoint"),
    }
}
