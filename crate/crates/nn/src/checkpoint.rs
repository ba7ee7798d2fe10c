use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::{NnError, Result};

const MAGIC: &[u8; 8] = b"CILCKPT\0";
const VERSION: u32 = 1;

/// Named tensors plus free-form JSON metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StateDict {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Vec<f32>)>,
}

impl StateDict {
    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    meta: serde_json::Value,
    tensors: Vec<(String, usize)>,
}

/// Writes `magic | u64 header length | JSON header | little-endian f32 data`.
pub fn write_state(mut w: impl Write, state: &StateDict) -> Result<()> {
    let header = Header {
        version: VERSION,
        meta: state.meta.clone(),
        tensors: state.tensors.iter().map(|(n, v)| (n.clone(), v.len())).collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, values) in &state.tensors {
        let mut buf = Vec::with_capacity(values.len() * 4);
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_state(mut r: impl Read) -> Result<StateDict> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NnError::Checkpoint("not a checkpoint file".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: Header =
        serde_json::from_slice(&json).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    if header.version != VERSION {
        return Err(NnError::Checkpoint(format!("unsupported version {}", header.version)));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for (name, count) in header.tensors {
        let mut bytes = vec![0u8; count * 4];
        r.read_exact(&mut bytes)?;
        let values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        tensors.push((name, values));
    }
    Ok(StateDict { meta: header.meta, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let state = StateDict {
            meta: serde_json::json!({"arch": "resnet8", "step": 3}),
            tensors: vec![("a".into(), vec![1.0, -2.5]), ("b".into(), vec![])],
        };
        let mut buf = Vec::new();
        write_state(&mut buf, &state).unwrap();
        assert_eq!(read_state(buf.as_slice()).unwrap(), state);
        assert!(read_state(&b"garbage!"[..]).is_err());
    }
}
