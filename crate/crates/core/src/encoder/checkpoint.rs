//! `.ckpt` files.
//!
//! ```text
//! "CKPT"                4 bytes
//! version       u32     currently 1
//! config_len    u32
//! config        UTF-8 JSON of EncoderConfig
//! repeated until end of file:
//!   name_len    u32
//!   name        UTF-8
//!   rank        u32
//!   dims        rank × u32
//!   payload     prod(dims) × f32
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD, IxDyn};

use super::{EncoderConfig, EncoderParams};
use crate::{Error, Result};

pub const CKPT_MAGIC: [u8; 4] = *b"CKPT";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: EncoderConfig,
    pub tensors: Vec<(String, ArrayD<f32>)>,
}

impl Checkpoint {
    /// Learnable tensors followed by batch-norm buffers.
    pub fn from_params(config: &EncoderConfig, params: &EncoderParams) -> Self {
        let mut ckpt = Self {
            config: config.clone(),
            tensors: Vec::new(),
        };
        for (name, t) in params.tensors().into_iter().chain(params.buffers()) {
            ckpt.push(name, t);
        }
        ckpt
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: ArrayViewD<'_, f64>) {
        self.tensors.push((name.into(), tensor.mapv(|v| v as f32)));
    }

    pub fn push_scalar(&mut self, name: impl Into<String>, value: f64) {
        self.tensors
            .push((name.into(), ArrayD::from_elem(IxDyn(&[]), value as f32)));
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn scalar(&self, name: &str) -> Option<f64> {
        self.get(name).filter(|t| t.len() == 1).map(|t| f64::from(t.iter().next().copied().unwrap_or(0.0)))
    }

    /// Copies tensors named `prefix + name` into `targets`, checking shapes.
    pub fn fill(&self, prefix: &str, targets: Vec<(String, ArrayViewMutD<'_, f64>)>) -> Result<()> {
        for (name, mut target) in targets {
            let full = format!("{prefix}{name}");
            let src = self
                .get(&full)
                .ok_or_else(|| Error::format("tensors", format!("missing tensor `{full}`")))?;
            if src.shape() != target.shape() {
                return Err(Error::format(
                    "tensors",
                    format!("tensor `{full}` has shape {:?}, expected {:?}", src.shape(), target.shape()),
                ));
            }
            target.zip_mut_with(src, |t, &s| *t = f64::from(s));
        }
        Ok(())
    }

    pub fn params(&self) -> Result<EncoderParams> {
        self.config.validate()?;
        let mut params = EncoderParams::zeros(&self.config);
        self.fill("", params.tensors_mut())?;
        self.fill("", params.buffers_mut())?;
        Ok(params)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let config = serde_json::to_string(&ckpt.config).expect("config serializes");
    put_u32(&mut out, config.len());
    out.extend_from_slice(config.as_bytes());
    for (name, t) in &ckpt.tensors {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.ndim());
        for &d in t.shape() {
            put_u32(&mut out, d);
        }
        for v in t.iter() {
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
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(field, format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, field: &'static str) -> Result<usize> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CKPT_MAGIC {
        return Err(Error::format("magic", "expected \"CKPT\""));
    }
    let version = r.u32("version")?;
    if version != CKPT_VERSION as usize {
        return Err(Error::format("version", format!("unsupported version {version}")));
    }
    let len = r.u32("config")?;
    let text = std::str::from_utf8(r.take(len, "config")?)
        .map_err(|e| Error::format("config", e.to_string()))?;
    let config: EncoderConfig =
        serde_json::from_str(text).map_err(|e| Error::format("config", e.to_string()))?;
    let mut tensors = Vec::new();
    while !r.done() {
        let len = r.u32("name")?;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|e| Error::format("name", e.to_string()))?
            .to_owned();
        let rank = r.u32("rank")?;
        if rank > 8 {
            return Err(Error::format("rank", format!("tensor `{name}` has rank {rank}")));
        }
        let dims = (0..rank).map(|_| r.u32("dims")).collect::<Result<Vec<_>>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format("dims", format!("tensor `{name}` is too large")))?;
        let payload = r.take(
            count
                .checked_mul(4)
                .ok_or_else(|| Error::format("dims", "overflow"))?,
            "payload",
        )?;
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = ArrayD::from_shape_vec(IxDyn(&dims), values).expect("count matches dims");
        tensors.push((name, t));
    }
    Ok(Checkpoint { config, tensors })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            input_dim: 3,
            model_dim: 4,
            num_layers: 1,
            num_heads: 2,
            ffn_dim: 8,
            out_dim: 2,
            proj_hidden: 4,
            proj_out: 2,
            dropout: 0.0,
        }
    }

    #[test]
    fn hand_built_scalar_tensor_layout() {
        let mut ckpt = Checkpoint {
            config: tiny(),
            tensors: vec![],
        };
        ckpt.push_scalar("s", 3.5);
        let bytes = encode_checkpoint(&ckpt);
        let config = serde_json::to_string(&tiny()).unwrap();
        let tail_start = 12 + config.len();
        assert_eq!(&bytes[..4], b"CKPT");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(bytes[8..12], (config.len() as u32).to_le_bytes());
        assert_eq!(&bytes[12..tail_start], config.as_bytes());
        assert_eq!(
            &bytes[tail_start..],
            &[1, 0, 0, 0, b's', 0, 0, 0, 0, 0x00, 0x00, 0x60, 0x40]
        );
        assert_eq!(decode_checkpoint(&bytes).unwrap(), ckpt);
    }

    #[test]
    fn params_round_trip_through_bytes() {
        let params = EncoderParams::init(&tiny(), 5);
        let ckpt = Checkpoint::from_params(&tiny(), &params);
        let bytes = encode_checkpoint(&ckpt);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(encode_checkpoint(&back), bytes);
        let restored = back.params().unwrap();
        for ((n, a), (_, b)) in params.tensors().iter().zip(restored.tensors()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(*x as f32, *y as f32, "{n}");
            }
        }
    }

    #[test]
    fn corrupt_headers_are_rejected() {
        let bytes = encode_checkpoint(&Checkpoint::from_params(&tiny(), &EncoderParams::init(&tiny(), 1)));
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format { field: "magic", .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format { field: "version", .. })));
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 2]),
            Err(Error::Format { field: "payload", .. })
        ));
        let mut bad = bytes.clone();
        bad[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format { field: "config", .. })));
    }

    #[test]
    fn missing_tensor_is_named() {
        let mut ckpt = Checkpoint::from_params(&tiny(), &EncoderParams::init(&tiny(), 1));
        ckpt.tensors.retain(|(n, _)| n != "output.bias");
        match ckpt.params() {
            Err(Error::Format { message, .. }) => assert!(message.contains("output.bias")),
            other => panic!("{other:?}"),
        }
    }
}
