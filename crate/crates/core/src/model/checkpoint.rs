//! ATC checkpoint container.
//!
//! Layout, integers little-endian:
//!
//! ```text
//! magic    4 bytes  41 54 43 00  ("ATC\0")
//! count    u16      number of entries
//! entry    u16 name length, UTF-8 name, AT1 tensor record
//! ```
//!
//! The first entry, named `arch`, is a u8 record holding the JSON
//! architecture descriptor; the remaining entries are the f32 parameter
//! tensors in `param_names()` order.

use std::collections::HashMap;
use std::io::Read;

use crate::error::{Error, Result};
use crate::io::{read_at1, write_at1, At1Tensor};
use crate::model::{Arch, LayerStack};

pub const ATC_MAGIC: [u8; 4] = *b"ATC\0";

const ARCH_ENTRY: &str = "arch";

pub fn save_checkpoint(stack: &LayerStack<f32>) -> Result<Vec<u8>> {
    let arch_json = serde_json::to_vec(&stack.arch())?;
    let names = stack.param_names();
    let params = stack.params();
    let count = 1 + names.len();
    if count > u16::MAX as usize {
        return Err(Error::UnsupportedFormat(format!(
            "{count} entries exceed the u16 entry count"
        )));
    }
    let mut out = Vec::new();
    out.extend_from_slice(&ATC_MAGIC);
    out.extend_from_slice(&(count as u16).to_le_bytes());
    let mut put = |name: &str, rec: &At1Tensor| -> Result<()> {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        write_at1(&mut out, rec)
    };
    put(
        ARCH_ENTRY,
        &At1Tensor::from_u8(vec![arch_json.len()], arch_json.clone())?,
    )?;
    for (name, p) in names.iter().zip(params) {
        put(name, &At1Tensor::from_tensor(p))?;
    }
    Ok(out)
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<LayerStack<f32>> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    read_field(&mut r, &mut magic, "ATC magic")?;
    if magic != ATC_MAGIC {
        return Err(Error::BadMagic {
            expected: ATC_MAGIC,
            found: magic,
        });
    }
    let mut cnt = [0u8; 2];
    read_field(&mut r, &mut cnt, "ATC entry count")?;
    let count = u16::from_le_bytes(cnt) as usize;
    let mut entries: HashMap<String, At1Tensor> = HashMap::with_capacity(count);
    for _ in 0..count {
        let mut nl = [0u8; 2];
        read_field(&mut r, &mut nl, "entry name length")?;
        let mut name = vec![0u8; u16::from_le_bytes(nl) as usize];
        read_field(&mut r, &mut name, "entry name")?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::UnsupportedFormat("entry name is not UTF-8".into()))?;
        let rec = read_at1(&mut r)?;
        if entries.insert(name.clone(), rec).is_some() {
            return Err(Error::UnsupportedFormat(format!(
                "duplicate checkpoint entry {name:?}"
            )));
        }
    }
    let arch_rec = entries
        .remove(ARCH_ENTRY)
        .ok_or_else(|| Error::UnsupportedFormat("checkpoint has no arch entry".into()))?;
    let (_, arch_json) = arch_rec.into_u8()?;
    let arch: Arch = serde_json::from_slice(&arch_json)?;
    let mut stack = LayerStack::<f32>::zeroed(&arch)?;
    let names = stack.param_names();
    let mut params = stack.params_mut();
    for (name, p) in names.iter().zip(params.iter_mut()) {
        let rec = entries.remove(name).ok_or_else(|| {
            Error::UnsupportedFormat(format!("checkpoint missing entry {name:?}"))
        })?;
        let t = rec.into_tensor()?;
        if t.shape() != p.shape() {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint entry {name:?} has shape {:?}, expected {:?}",
                t.shape(),
                p.shape()
            )));
        }
        **p = t;
    }
    if let Some(extra) = entries.keys().next() {
        return Err(Error::UnsupportedFormat(format!(
            "unexpected checkpoint entry {extra:?}"
        )));
    }
    Ok(stack)
}

fn read_field(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated(format!("while reading {what}"))
        } else {
            Error::Io(e)
        }
    })
}
