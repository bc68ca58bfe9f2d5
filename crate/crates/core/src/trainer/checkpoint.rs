//! Checkpoint files.
//!
//! Layout: magic `SV2C`, u32 version, u32-length-prefixed UTF-8 JSON header,
//! u32 tensor count, then per tensor a u32-length-prefixed name and an ITF
//! record, and finally a CRC32 of everything before it. Integers are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{moment_key, Checkpoint, RngState, TrainConfig};
use crate::encoder::{EncoderParams, Role};
use crate::error::{Error, Result};
use crate::tensor::{itf, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SV2C";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    step: u64,
    rng: RngState,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("length fits in u32").to_le_bytes());
}

fn encode(ck: &Checkpoint) -> Vec<u8> {
    let header = serde_json::to_string(&Header {
        config: ck.config.clone(),
        step: ck.step,
        rng: ck.rng,
    })
    .expect("header serializes");
    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    for params in [&ck.input, &ck.context] {
        for (name, t) in params.tensors() {
            tensors.push((format!("{}/{name}", params.role.name()), t));
        }
    }
    for (key, (m, v)) in &ck.moments {
        tensors.push((format!("adam.m/{key}"), m));
        tensors.push((format!("adam.v/{key}"), v));
    }

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut out, header.len());
    out.extend_from_slice(header.as_bytes());
    put_u32(&mut out, tensors.len());
    for (name, t) in tensors {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&itf::to_bytes(t));
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Writes to a sibling temporary file and renames it into place.
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode(ck);
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or("truncated record")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "invalid UTF-8".to_string())
    }
}

/// Reads a checkpoint; the whole file is verified before anything is built.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(corrupt("not a checkpoint file".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return Err(corrupt("checksum mismatch".into()));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut r = Reader {
        bytes: body,
        pos: 8,
    };
    let header: Header = serde_json::from_str(&r.string().map_err(corrupt)?)
        .map_err(|e| corrupt(format!("bad header: {e}")))?;
    let count = r.u32().map_err(corrupt)? as usize;
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    for _ in 0..count {
        let name = r.string().map_err(corrupt)?;
        let (t, used) =
            itf::decode(&body[r.pos..]).map_err(|e| corrupt(format!("tensor {name}: {e}")))?;
        r.pos += used;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(corrupt(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != body.len() {
        return Err(corrupt("trailing bytes".into()));
    }

    let mut take_role = |role: Role| -> Result<EncoderParams> {
        let prefix = format!("{}/", role.name());
        let names: Vec<String> = tensors
            .keys()
            .filter(|k| k.starts_with(&prefix))
            .cloned()
            .collect();
        let own = names
            .into_iter()
            .map(|k| {
                let t = tensors.remove(&k).unwrap();
                (k[prefix.len()..].to_string(), t)
            })
            .collect();
        EncoderParams::from_tensors(&header.config.encoder, role, own)
    };
    let input = take_role(Role::Input)?;
    let context = take_role(Role::Context)?;
    let mut moments = BTreeMap::new();
    for params in [&input, &context] {
        for name in params.trainable_names() {
            let key = moment_key(params.role, name);
            let mut get = |kind: &str| {
                tensors
                    .remove(&format!("adam.{kind}/{key}"))
                    .filter(|t| t.shape() == params.get(name).unwrap().shape())
                    .ok_or_else(|| corrupt(format!("missing or misshapen moment {kind} for {key}")))
            };
            let m = get("m")?;
            let v = get("v")?;
            moments.insert(key, (m, v));
        }
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(corrupt(format!("unexpected tensor {extra}")));
    }
    Ok(Checkpoint {
        config: header.config,
        step: header.step,
        input,
        context,
        moments,
        rng: header.rng,
    })
}
