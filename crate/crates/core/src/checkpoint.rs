//! Checkpoint container.
//!
//! Layout: `b"DHAT"`, format version (`u32` LE), header length (`u64` LE),
//! a JSON header, then the raw little-endian tensor payload in index order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::nn::{
    attach_merge, attach_second_head, build_network, ArchSpec, AttachPoint, DualHeadNetwork, Head,
    HeadInit, Init,
};
use crate::tensor::{Real, Tensor, REAL_DTYPE};

pub const MAGIC: &[u8; 4] = b"DHAT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
    pub frozen: bool,
}

/// Training provenance supplied by the caller.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub epoch: usize,
    pub stage: u8,
    pub config_digest: String,
    pub seed: u64,
}

/// Everything needed to rebuild the network around the tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    #[serde(flatten)]
    pub info: CheckpointInfo,
    pub arch: ArchSpec,
    pub attach: usize,
    pub second_arch: Option<ArchSpec>,
    pub merge: bool,
    pub main_enabled: bool,
    pub second_enabled: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorEntry>,
    metadata: Metadata,
}

/// A decoded checkpoint: metadata plus named tensors in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: Metadata,
    pub tensors: Vec<(String, Tensor, bool)>,
}

impl Checkpoint {
    pub fn from_network(net: &DualHeadNetwork, info: CheckpointInfo) -> Self {
        let metadata = Metadata {
            info,
            arch: net.spec().clone(),
            attach: net.attach_point().0,
            second_arch: net.second_spec().cloned(),
            merge: net.has_merge(),
            main_enabled: net.is_enabled(Head::Main),
            second_enabled: net.is_enabled(Head::Second),
        };
        let tensors = net
            .params()
            .into_iter()
            .map(|(_, p)| (p.name.clone(), p.value.clone(), p.frozen))
            .collect();
        Checkpoint { metadata, tensors }
    }

    pub fn encode(&self) -> Vec<u8> {
        let width = std::mem::size_of::<Real>() as u64;
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t, frozen) in &self.tensors {
            let length = t.len() as u64 * width;
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: REAL_DTYPE.to_string(),
                shape: t.shape().to_vec(),
                offset,
                length,
                frozen: *frozen,
            });
            offset += length;
        }
        let header = serde_json::to_vec(&Header {
            tensors: entries,
            metadata: self.metadata.clone(),
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t, _) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a DHAT checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header_bytes = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| Error::Format("checkpoint header truncated".into()))?;
        let mut value: Value = serde_json::from_slice(header_bytes)
            .map_err(|e| Error::Format(format!("checkpoint header is not JSON: {e}")))?;
        drop_unknown_keys(&mut value);
        let header: Header = serde_json::from_value(value)
            .map_err(|e| Error::Format(format!("malformed checkpoint header: {e}")))?;
        let payload = &bytes[16 + hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let width = match e.dtype.as_str() {
                "f64" => 8,
                "f32" => 4,
                d => return Err(Error::Format(format!("tensor {} has unknown dtype {d}", e.name))),
            };
            let count: usize = e.shape.iter().product();
            if e.length != (count * width) as u64 {
                return Err(Error::Format(format!("tensor {} length does not match its shape", e.name)));
            }
            let raw = payload
                .get(e.offset as usize..(e.offset + e.length) as usize)
                .ok_or_else(|| Error::Format(format!("tensor {} lies outside the payload", e.name)))?;
            let data: Vec<Real> = if width == 8 {
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")) as Real)
                    .collect()
            } else {
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as Real)
                    .collect()
            };
            tensors.push((e.name, Tensor::new(&e.shape, data)?, e.frozen));
        }
        Ok(Checkpoint {
            metadata: header.metadata,
            tensors,
        })
    }

    /// Rebuilds the network described by the metadata.
    pub fn to_network(&self) -> Result<DualHeadNetwork> {
        self.to_network_for(&self.metadata.arch)
    }

    /// Rebuilds the network for `spec`, failing on the first tensor whose
    /// name or shape does not fit.
    pub fn to_network_for(&self, spec: &ArchSpec) -> Result<DualHeadNetwork> {
        let arch_err = |e: Error| Error::Checkpoint(format!("checkpoint does not fit the architecture: {e}"));
        let mut init = Init::shape_only();
        let mut net = build_network(spec, &mut init).map_err(arch_err)?;
        if let Some(second) = &self.metadata.second_arch {
            net = attach_second_head(
                net,
                AttachPoint(self.metadata.attach),
                second,
                HeadInit::Fresh,
                &mut init,
            )
            .map_err(arch_err)?;
        }
        if self.metadata.merge {
            net = attach_merge(net, &mut init).map_err(arch_err)?;
        }
        let mut by_name: BTreeMap<&str, (&Tensor, bool)> = BTreeMap::new();
        for (name, t, frozen) in &self.tensors {
            if by_name.insert(name, (t, *frozen)).is_some() {
                return Err(Error::Checkpoint(format!("tensor {name} appears twice")));
            }
        }
        let mut failure = None;
        let mut used = 0;
        net.visit_regions_mut(&mut |_, p| {
            if failure.is_some() {
                return;
            }
            match by_name.get(p.name.as_str()) {
                Some((t, frozen)) if t.shape() == p.value.shape() => {
                    p.value = (*t).clone();
                    p.frozen = *frozen;
                    used += 1;
                }
                Some((t, _)) => {
                    failure = Some(Error::Checkpoint(format!(
                        "tensor {} has shape {:?}, architecture expects {:?}",
                        p.name,
                        t.shape(),
                        p.value.shape()
                    )))
                }
                None => failure = Some(Error::Checkpoint(format!("tensor {} is missing", p.name))),
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if used != by_name.len() {
            let known: std::collections::HashSet<String> =
                net.params().into_iter().map(|(_, p)| p.name.clone()).collect();
            let extra = by_name.keys().find(|k| !known.contains(**k)).expect("some tensor unused");
            return Err(Error::Checkpoint(format!(
                "tensor {extra} does not belong to the architecture"
            )));
        }
        net.set_enabled(Head::Main, self.metadata.main_enabled);
        net.set_enabled(Head::Second, self.metadata.second_enabled);
        Ok(net)
    }
}

/// Removes keys this version does not understand, with a warning.
fn drop_unknown_keys(value: &mut Value) {
    const TOP: &[&str] = &["tensors", "metadata"];
    const ENTRY: &[&str] = &["name", "dtype", "shape", "offset", "length", "frozen"];
    const META: &[&str] = &[
        "epoch",
        "stage",
        "config_digest",
        "seed",
        "arch",
        "attach",
        "second_arch",
        "merge",
        "main_enabled",
        "second_enabled",
    ];
    fn prune(obj: &mut Value, known: &[&str], at: &str) {
        if let Value::Object(map) = obj {
            map.retain(|k, _| {
                let keep = known.contains(&k.as_str());
                if !keep {
                    log::warn!("ignoring unknown checkpoint header key {at}{k}");
                }
                keep
            });
        }
    }
    prune(value, TOP, "");
    if let Some(m) = value.get_mut("metadata") {
        prune(m, META, "metadata.");
    }
    if let Some(Value::Array(entries)) = value.get_mut("tensors") {
        for e in entries {
            prune(e, ENTRY, "tensors[].");
        }
    }
}

pub fn save_checkpoint(net: &DualHeadNetwork, info: CheckpointInfo, path: &Path) -> Result<()> {
    if net.params().iter().any(|(_, p)| !p.value.is_finite()) {
        return Err(Error::NonFinite { op: "save_checkpoint" });
    }
    let bytes = Checkpoint::from_network(net, info).encode();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes)
}
