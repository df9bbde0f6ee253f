//! Checkpoint files: a textual header followed by a little-endian `f32`
//! payload.
//!
//! ```text
//! FLTLM-CKPT v1
//! meta <single-line JSON>
//! tensors <count>
//! <name> <d0>x<d1>... <byte offset> <element count>
//! ...
//! end
//! <payload>
//! ```
//!
//! Offsets are relative to the first payload byte.

use std::io::{BufRead, Write};

use crate::numerics::{NumericsError, Tensor};
use crate::scalar::Scalar;

pub const MAGIC: &str = "FLTLM-CKPT v1";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

fn bad(msg: impl Into<String>) -> NumericsError {
    NumericsError::Checkpoint(msg.into())
}

pub fn write_checkpoint<T: Scalar, W: Write>(
    mut out: W,
    meta: &str,
    tensors: &[(String, &Tensor<T>)],
) -> Result<(), NumericsError> {
    if meta.contains('\n') {
        return Err(bad("meta must be a single line"));
    }
    let mut header = format!("{MAGIC}\nmeta {meta}\ntensors {}\n", tensors.len());
    let mut offset = 0usize;
    for (name, t) in tensors {
        if name.contains(char::is_whitespace) || name.is_empty() {
            return Err(bad(format!("invalid tensor name {name:?}")));
        }
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        header.push_str(&format!("{name} {} {offset} {}\n", dims.join("x"), t.len()));
        offset += t.len() * 4;
    }
    header.push_str("end\n");
    out.write_all(header.as_bytes())?;
    let mut buf = Vec::with_capacity(offset);
    for (_, t) in tensors {
        for &v in t.data() {
            let f = v.to_f32().unwrap_or(f32::NAN);
            buf.extend_from_slice(&f.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(mut input: R) -> Result<Checkpoint, NumericsError> {
    let mut line = String::new();
    let mut next_line = |input: &mut R| -> Result<String, NumericsError> {
        line.clear();
        if input.read_line(&mut line)? == 0 {
            return Err(bad("unexpected end of header"));
        }
        Ok(line.trim_end_matches('\n').to_string())
    };
    let magic = next_line(&mut input)?;
    if magic != MAGIC {
        return Err(bad(format!("unknown magic {magic:?}")));
    }
    let meta = next_line(&mut input)?;
    let meta = meta
        .strip_prefix("meta ")
        .ok_or_else(|| bad("missing meta line"))?
        .to_string();
    let count_line = next_line(&mut input)?;
    let count: usize = count_line
        .strip_prefix("tensors ")
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| bad("missing tensor count"))?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let l = next_line(&mut input)?;
        let parts: Vec<&str> = l.split(' ').collect();
        if parts.len() != 4 {
            return Err(bad(format!("malformed entry {l:?}")));
        }
        let shape: Vec<usize> = parts[1]
            .split('x')
            .map(|d| d.parse().map_err(|_| bad(format!("bad dims {:?}", parts[1]))))
            .collect::<Result<_, _>>()?;
        let offset: usize = parts[2].parse().map_err(|_| bad("bad offset"))?;
        let len: usize = parts[3].parse().map_err(|_| bad("bad length"))?;
        entries.push((parts[0].to_string(), shape, offset, len));
    }
    if next_line(&mut input)? != "end" {
        return Err(bad("missing end marker"));
    }
    let mut payload = Vec::new();
    input.read_to_end(&mut payload)?;
    let mut tensors = Vec::with_capacity(count);
    for (name, shape, offset, len) in entries {
        let bytes = payload
            .get(offset..offset + len * 4)
            .ok_or_else(|| bad(format!("payload too short for {name}")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    Ok(Checkpoint { meta, tensors })
}
