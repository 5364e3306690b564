//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "EEML"            4 bytes magic
//! version           u32
//! header_len        u64
//! header            header_len bytes of JSON (kind, net, K, seeds, hashes,
//!                   and the name and length of every array that follows)
//! arrays            each declared array as len × f64, in header order
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use eeml_core::cluster::ClusterModel;
use eeml_core::diffnet::{Activation, NetSpec, ParamVector};
use eeml_core::ensemble::{Ensemble, Provenance};

pub const MAGIC: &[u8; 4] = b"EEML";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported format version {found} (this build reads {supported})")]
    Version { found: u32, supported: u32 },
    #[error("truncated: needed {needed} bytes, {available} available")]
    Truncated { needed: u64, available: u64 },
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("expected a {expected} checkpoint, found {found}")]
    WrongKind { expected: &'static str, found: &'static str },
    #[error("inconsistent contents: {0}")]
    Shape(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Params(ParamVector),
    Cluster(ClusterModel),
    Ensemble(Ensemble),
}

impl Payload {
    pub fn kind(&self) -> &'static str {
        match self {
            Payload::Params(_) => "params",
            Payload::Cluster(_) => "cluster",
            Payload::Ensemble(_) => "ensemble",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub seed: u64,
    pub payload: Payload,
}

impl Checkpoint {
    pub fn into_params(self) -> Result<ParamVector, CheckpointError> {
        match self.payload {
            Payload::Params(p) => Ok(p),
            other => Err(CheckpointError::WrongKind {
                expected: "params",
                found: other.kind(),
            }),
        }
    }

    pub fn into_cluster(self) -> Result<ClusterModel, CheckpointError> {
        match self.payload {
            Payload::Cluster(c) => Ok(c),
            other => Err(CheckpointError::WrongKind {
                expected: "cluster",
                found: other.kind(),
            }),
        }
    }

    pub fn into_ensemble(self) -> Result<Ensemble, CheckpointError> {
        match self.payload {
            Payload::Ensemble(e) => Ok(e),
            other => Err(CheckpointError::WrongKind {
                expected: "ensemble",
                found: other.kind(),
            }),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetHeader {
    layer_sizes: Vec<usize>,
    activation: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClusterHeader {
    k: usize,
    inertia: f64,
    seed: u64,
    iters_run: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayDecl {
    name: String,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: String,
    config_hash: String,
    seed: u64,
    net: Option<NetHeader>,
    cluster: Option<ClusterHeader>,
    provenance: Option<Provenance>,
    arrays: Vec<ArrayDecl>,
}

fn net_header(spec: &NetSpec) -> NetHeader {
    NetHeader {
        layer_sizes: spec.layer_sizes().to_vec(),
        activation: spec.activation().name().to_string(),
    }
}

fn cluster_header(c: &ClusterModel) -> ClusterHeader {
    ClusterHeader {
        k: c.k(),
        inertia: c.inertia,
        seed: c.seed,
        iters_run: c.iters_run,
    }
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut arrays: Vec<(String, &[f64])> = Vec::new();
    let (net, cluster, provenance) = match &ckpt.payload {
        Payload::Params(p) => {
            arrays.push(("theta".into(), p.values()));
            (Some(net_header(p.spec())), None, None)
        }
        Payload::Cluster(c) => {
            for (i, center) in c.centers().iter().enumerate() {
                arrays.push((format!("center_{i}"), center));
            }
            (None, Some(cluster_header(c)), None)
        }
        Payload::Ensemble(e) => {
            for (i, expert) in e.experts().iter().enumerate() {
                arrays.push((format!("expert_{i}"), expert.values()));
            }
            for (i, center) in e.cluster().centers().iter().enumerate() {
                arrays.push((format!("center_{i}"), center));
            }
            (
                Some(net_header(e.experts()[0].spec())),
                Some(cluster_header(e.cluster())),
                Some(e.provenance.clone()),
            )
        }
    };
    let header = Header {
        kind: ckpt.payload.kind().to_string(),
        config_hash: ckpt.config_hash.clone(),
        seed: ckpt.seed,
        net,
        cluster,
        provenance,
        arrays: arrays
            .iter()
            .map(|(name, a)| ArrayDecl {
                name: name.clone(),
                len: a.len() as u64,
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");

    let mut out = Vec::with_capacity(16 + header.len() + arrays.iter().map(|(_, a)| a.len() * 8).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, a) in &arrays {
        for v in *a {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: u64) -> Result<&'a [u8], CheckpointError> {
        let available = (self.bytes.len() - self.pos) as u64;
        if n > available {
            return Err(CheckpointError::Truncated { needed: n, available });
        }
        let n = n as usize;
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn floats(&mut self, len: u64) -> Result<Vec<f64>, CheckpointError> {
        let bytes_needed = len
            .checked_mul(8)
            .ok_or_else(|| CheckpointError::Header(format!("array length {len} overflows")))?;
        Ok(self
            .take(bytes_needed)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    r.take(4)?;
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let header_len = r.u64()?;
    let header: Header =
        serde_json::from_slice(r.take(header_len)?).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let mut arrays = Vec::with_capacity(header.arrays.len());
    for decl in &header.arrays {
        arrays.push((decl.name.as_str(), r.floats(decl.len)?));
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
    }

    let shape = |e: eeml_core::Error| CheckpointError::Shape(e.to_string());
    let take_named = |arrays: &mut Vec<(&str, Vec<f64>)>, name: String| -> Result<Vec<f64>, CheckpointError> {
        if arrays.is_empty() || arrays[0].0 != name {
            return Err(CheckpointError::Shape(format!("expected array `{name}`")));
        }
        Ok(arrays.remove(0).1)
    };
    let spec = |net: &Option<NetHeader>| -> Result<NetSpec, CheckpointError> {
        let net = net
            .as_ref()
            .ok_or_else(|| CheckpointError::Header("missing network description".into()))?;
        let act = Activation::from_name(&net.activation).map_err(shape)?;
        NetSpec::new(net.layer_sizes.clone(), act).map_err(shape)
    };
    let cluster = |meta: &Option<ClusterHeader>,
                   arrays: &mut Vec<(&str, Vec<f64>)>|
     -> Result<ClusterModel, CheckpointError> {
        let meta = meta
            .as_ref()
            .ok_or_else(|| CheckpointError::Header("missing cluster description".into()))?;
        let centers = (0..meta.k)
            .map(|i| take_named(arrays, format!("center_{i}")))
            .collect::<Result<Vec<_>, _>>()?;
        ClusterModel::new(centers, meta.inertia, meta.seed, meta.iters_run).map_err(shape)
    };

    let payload = match header.kind.as_str() {
        "params" => {
            let values = take_named(&mut arrays, "theta".into())?;
            Payload::Params(ParamVector::new(spec(&header.net)?, values).map_err(shape)?)
        }
        "cluster" => Payload::Cluster(cluster(&header.cluster, &mut arrays)?),
        "ensemble" => {
            let spec = spec(&header.net)?;
            let k = header
                .cluster
                .as_ref()
                .ok_or_else(|| CheckpointError::Header("missing cluster description".into()))?
                .k;
            let experts = (0..k)
                .map(|i| {
                    let values = take_named(&mut arrays, format!("expert_{i}"))?;
                    ParamVector::new(spec.clone(), values).map_err(shape)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let model = cluster(&header.cluster, &mut arrays)?;
            let provenance = header.provenance.unwrap_or_default();
            Payload::Ensemble(Ensemble::new(experts, model, provenance).map_err(shape)?)
        }
        other => return Err(CheckpointError::Header(format!("unknown kind `{other}`"))),
    };
    if !arrays.is_empty() {
        return Err(CheckpointError::Shape(format!("{} undeclared arrays left over", arrays.len())));
    }
    Ok(Checkpoint {
        config_hash: header.config_hash,
        seed: header.seed,
        payload,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    std::fs::write(path, encode(ckpt))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    decode(&std::fs::read(path)?)
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}
