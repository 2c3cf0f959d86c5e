//! Checkpoint archive: a magic line, a little-endian `u64` header length, a
//! JSON header (config, metadata, tensor index) and raw little-endian `f64`
//! tensor data in name order.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BtdNet, ModelConfig, Topology};
use crate::autodiff::ParamStore;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "btdnet-ckpt-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Init,
    Phase1,
    Phase2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    pub topology: Topology,
    #[serde(default)]
    pub fold: Option<usize>,
    #[serde(default)]
    pub epoch: Option<usize>,
    #[serde(default)]
    pub val_f1: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: String,
    config: ModelConfig,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(path: &Path, net: &BtdNet, meta: &CheckpointMeta) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    let mut offset = 0;
    for (name, value, trainable) in net.store().named() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: value.shape().to_vec(),
            trainable,
            offset,
            len: value.len(),
        });
        offset += value.len();
        for v in value.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        version: CHECKPOINT_MAGIC.to_string(),
        config: net.config().clone(),
        meta: meta.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut out = Vec::with_capacity(json.len() + payload.len() + 32);
    out.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn bad(path: &Path, what: &str) -> Error {
    Error::CheckpointMismatch(format!("{}: {what}", path.display()))
}

pub fn load_checkpoint(path: &Path) -> Result<(BtdNet, CheckpointMeta)> {
    let bytes = fs::read(path)
        .map_err(|e| Error::CheckpointMismatch(format!("{}: {e}", path.display())))?;
    let magic_len = CHECKPOINT_MAGIC.len() + 1;
    if bytes.len() < magic_len + 8 || &bytes[..magic_len - 1] != CHECKPOINT_MAGIC.as_bytes() {
        return Err(bad(path, "not a checkpoint archive"));
    }
    let hlen =
        u64::from_le_bytes(bytes[magic_len..magic_len + 8].try_into().expect("8 bytes")) as usize;
    let body = magic_len + 8;
    let header_end = body
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[body..header_end])
        .map_err(|e| bad(path, &format!("bad header: {e}")))?;
    if header.version != CHECKPOINT_MAGIC {
        return Err(bad(
            path,
            &format!("unsupported version '{}'", header.version),
        ));
    }
    let data = &bytes[header_end..];
    let mut store = ParamStore::new();
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        if n != t.len || (t.offset + t.len) * 8 > data.len() {
            return Err(bad(path, &format!("tensor '{}' out of bounds", t.name)));
        }
        let vals: Vec<f64> = data[t.offset * 8..(t.offset + t.len) * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&t.shape), vals).expect("length checked");
        if t.trainable {
            store.add_param(&t.name, arr);
        } else {
            store.add_buffer(&t.name, arr);
        }
    }
    let net = BtdNet::from_parts(header.config, header.meta.topology, store);
    check_layout(&net).map_err(|e| bad(path, &e))?;
    Ok((net, header.meta))
}

/// The stored tensor set must be exactly what the stored config builds.
fn check_layout(net: &BtdNet) -> std::result::Result<(), String> {
    let mut cfg = net.config().clone();
    cfg.backbone.pretrained = None;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let reference = BtdNet::new(cfg, net.topology(), &mut rng).map_err(|e| e.to_string())?;
    let want: Vec<(&str, &[usize])> = reference
        .store()
        .named()
        .map(|(n, v, _)| (n, v.shape()))
        .collect();
    let have: Vec<(&str, &[usize])> = net
        .store()
        .named()
        .map(|(n, v, _)| (n, v.shape()))
        .collect();
    if want != have {
        return Err("tensor set does not match the embedded model config".into());
    }
    Ok(())
}

/// Fails unless `a` and `b` describe the same architecture.
pub(crate) fn ensure_same_arch(
    expected: &ModelConfig,
    found: &ModelConfig,
    what: &str,
) -> Result<()> {
    let mut a = expected.clone();
    let mut b = found.clone();
    a.backbone.pretrained = None;
    b.backbone.pretrained = None;
    a.skip_padding = false;
    b.skip_padding = false;
    if a != b {
        return Err(Error::CheckpointMismatch(format!(
            "{what}: checkpoint config {} differs from expected {}",
            serde_json::to_string(&b)?,
            serde_json::to_string(&a)?
        )));
    }
    Ok(())
}
