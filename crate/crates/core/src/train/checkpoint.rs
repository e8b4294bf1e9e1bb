//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes  "IPLC"
//! version  u32
//! meta     u32 length + that many bytes of UTF-8 JSON (CheckpointMeta)
//! count    u32 number of tensor records
//! tensor   u16 name length, name bytes, u8 rank, u32 dim per axis,
//!          then numel f64 payload values, row-major
//! ```
//!
//! Tensors are written in canonical parameter order: model parameters
//! first, then prompt parameters. Loading validates the magic, version,
//! metadata, and every tensor's name and shape against what the metadata
//! implies, so a corrupted or mismatched file fails with a specific
//! error instead of producing a silently wrong model.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Result};
use crate::ipl::PromptModule;
use crate::model::{ModelConfig, TransformerLM};
use crate::numerics::Tensor;
use crate::train::OptimConfig;

pub const MAGIC: [u8; 4] = *b"IPLC";
pub const VERSION: u32 = 1;

/// Everything needed to rebuild the saved models and rerun the job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub optim: OptimConfig,
}

impl CheckpointMeta {
    fn validate(&self) -> std::result::Result<(), CheckpointError> {
        self.model
            .validate()
            .and_then(|_| self.optim.validate())
            .map_err(|e| CheckpointError::Malformed(format!("invalid config: {e}")))
    }
}

pub fn save(path: &Path, lm: &TransformerLM, pm: &PromptModule, meta: &CheckpointMeta) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let json = serde_json::to_vec(meta)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;

    let tensors: Vec<(String, &Tensor)> = lm
        .parameters()
        .into_iter()
        .chain(pm.parameters())
        .collect();
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[t.rank() as u8])?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(TransformerLM, PromptModule, CheckpointMeta)> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "file header")?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic { found: magic }.into());
    }
    let version = read_u32(&mut r, "version field")?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch {
            expected: VERSION,
            found: version,
        }
        .into());
    }

    let json_len = read_u32(&mut r, "metadata length")? as usize;
    let mut json = vec![0u8; json_len];
    read_exact(&mut r, &mut json, "metadata body")?;
    let meta: CheckpointMeta = serde_json::from_slice(&json)
        .map_err(|e| CheckpointError::Malformed(format!("metadata: {e}")))?;
    meta.validate()?;

    // Rebuild the models at the right shapes (the init values are
    // irrelevant; every tensor is overwritten below).
    let mut lm = TransformerLM::init(meta.model.clone(), 0)?;
    let mut pm = PromptModule::init(
        meta.optim.prompt_length,
        meta.optim.d_h.unwrap_or(meta.model.d_e),
        &lm,
        0,
    )?;

    let count = read_u32(&mut r, "tensor count")? as usize;
    let expected = lm.parameters().len() + pm.parameters().len();
    if count != expected {
        return Err(CheckpointError::Malformed(format!(
            "{count} tensors recorded, config implies {expected}"
        ))
        .into());
    }

    let mut params: Vec<(String, &mut Tensor)> = lm
        .parameters_mut()
        .into_iter()
        .chain(pm.parameters_mut())
        .collect();
    let mut filled = vec![false; params.len()];
    for _ in 0..count {
        let name_len = read_u16(&mut r, "tensor name length")? as usize;
        let mut name = vec![0u8; name_len];
        read_exact(&mut r, &mut name, "tensor name")?;
        let name = String::from_utf8(name)
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?;

        let mut rank = [0u8; 1];
        read_exact(&mut r, &mut rank, "tensor rank")?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(&mut r, "tensor dimension")? as usize);
        }

        let slot = params
            .iter()
            .position(|(n, _)| *n == name)
            .ok_or_else(|| CheckpointError::Malformed(format!("unexpected tensor {name:?}")))?;
        if filled[slot] {
            return Err(CheckpointError::Malformed(format!("duplicate tensor {name:?}")).into());
        }
        let t = &mut params[slot].1;
        if shape != t.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected: t.shape().to_vec(),
                found: shape,
            }
            .into());
        }

        let mut buf = [0u8; 8];
        for x in t.data_mut() {
            read_exact(&mut r, &mut buf, "tensor payload")?;
            *x = f64::from_le_bytes(buf);
        }
        filled[slot] = true;
    }

    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(CheckpointError::Malformed("trailing data after last tensor".into()).into());
    }

    drop(params);
    Ok((lm, pm, meta))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], context: &'static str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            CheckpointError::Truncated { context }.into()
        } else {
            crate::error::Error::from(CheckpointError::Io(e))
        }
    })
}

fn read_u32(r: &mut impl Read, context: &'static str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, context)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u16(r: &mut impl Read, context: &'static str) -> Result<u16> {
    let mut buf = [0u8; 2];
    read_exact(r, &mut buf, context)?;
    Ok(u16::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::model::Mode;
    use crate::tasks;
    use crate::train::{FloatWidth, Method};

    fn fixtures() -> (TransformerLM, PromptModule, CheckpointMeta) {
        let model = ModelConfig {
            vocab_size: tasks::RESERVED_TOKENS,
            d_e: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            max_len: 32,
            mode: Mode::Masked,
            mask_token_id: tasks::MASK,
        };
        let optim = OptimConfig {
            prompt_length: 4,
            method: Method::Ipl,
            float_width: FloatWidth::W64,
            ..OptimConfig::default()
        };
        let lm = TransformerLM::init(model.clone(), 42).unwrap();
        let pm = PromptModule::init(4, 16, &lm, 43).unwrap();
        (lm, pm, CheckpointMeta { model, optim })
    }

    fn saved_bytes() -> (tempfile::TempDir, std::path::PathBuf, Vec<u8>) {
        let (lm, pm, meta) = fixtures();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.iplc");
        save(&path, &lm, &pm, &meta).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        (dir, path, bytes)
    }

    fn load_mutated(
        dir: &tempfile::TempDir,
        bytes: Vec<u8>,
    ) -> Result<(TransformerLM, PromptModule, CheckpointMeta)> {
        let path = dir.path().join("mutated.iplc");
        std::fs::write(&path, bytes).unwrap();
        load(&path)
    }

    fn checkpoint_err(r: Result<(TransformerLM, PromptModule, CheckpointMeta)>) -> CheckpointError {
        match r {
            Err(Error::Checkpoint(e)) => e,
            other => panic!("expected a checkpoint error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (lm, pm, meta) = fixtures();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.iplc");
        save(&path, &lm, &pm, &meta).unwrap();
        let (lm2, pm2, meta2) = load(&path).unwrap();
        assert_eq!(meta, meta2);
        let orig = lm.parameters().into_iter().chain(pm.parameters());
        let loaded = lm2.parameters().into_iter().chain(pm2.parameters());
        for ((name, a), (name2, b)) in orig.zip(loaded) {
            assert_eq!(name, name2);
            assert_eq!(a.shape(), b.shape());
            let same = a
                .data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same, "{name} changed across the round trip");
        }
    }

    #[test]
    fn empty_prompt_round_trips() {
        let (lm, _, mut meta) = fixtures();
        meta.optim.prompt_length = 0;
        meta.optim.method = Method::FinetunePet;
        let pm = PromptModule::init(0, 16, &lm, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.iplc");
        save(&path, &lm, &pm, &meta).unwrap();
        let (_, pm2, _) = load(&path).unwrap();
        assert_eq!(pm2.l(), 0);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let (dir, _, mut bytes) = saved_bytes();
        bytes[0] = b'X';
        match checkpoint_err(load_mutated(&dir, bytes)) {
            CheckpointError::BadMagic { found } => assert_eq!(&found, b"XPLC"),
            other => panic!("wrong class: {other}"),
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let (dir, _, mut bytes) = saved_bytes();
        bytes[4] = 9;
        match checkpoint_err(load_mutated(&dir, bytes)) {
            CheckpointError::VersionMismatch { expected: 1, found: 9 } => {}
            other => panic!("wrong class: {other}"),
        }
    }

    #[test]
    fn truncation_is_rejected_at_any_cut() {
        let (dir, _, bytes) = saved_bytes();
        // A cut in the header, in the metadata, mid-tensor-table, and one
        // byte short of the end.
        for cut in [2, 20, bytes.len() / 2, bytes.len() - 1] {
            match checkpoint_err(load_mutated(&dir, bytes[..cut].to_vec())) {
                CheckpointError::Truncated { .. } => {}
                other => panic!("cut at {cut}: wrong class {other}"),
            }
        }
    }

    #[test]
    fn corrupt_metadata_is_rejected() {
        let (dir, _, mut bytes) = saved_bytes();
        // First byte of the JSON body (right after magic, version, length).
        bytes[12] = b'!';
        match checkpoint_err(load_mutated(&dir, bytes)) {
            CheckpointError::Malformed(_) => {}
            other => panic!("wrong class: {other}"),
        }
    }

    #[test]
    fn tensor_shape_mismatch_is_rejected() {
        let (dir, _, mut bytes) = saved_bytes();
        // Locate the first tensor record ("tok_emb") and bump its first
        // dimension; the payload that follows keeps the old size, but the
        // shape check fires before any payload is read.
        let pos = bytes
            .windows(7)
            .position(|w| w == b"tok_emb")
            .expect("name present");
        let dim_at = pos + 7 + 1;
        let old = u32::from_le_bytes(bytes[dim_at..dim_at + 4].try_into().unwrap());
        bytes[dim_at..dim_at + 4].copy_from_slice(&(old + 1).to_le_bytes());
        match checkpoint_err(load_mutated(&dir, bytes)) {
            CheckpointError::ShapeMismatch { name, expected, found } => {
                assert_eq!(name, "tok_emb");
                assert_eq!(found[0], expected[0] + 1);
            }
            other => panic!("wrong class: {other}"),
        }
    }

    #[test]
    fn unknown_tensor_name_is_rejected() {
        let (dir, _, mut bytes) = saved_bytes();
        let pos = bytes
            .windows(7)
            .position(|w| w == b"tok_emb")
            .expect("name present");
        bytes[pos..pos + 7].copy_from_slice(b"tok_xyz");
        match checkpoint_err(load_mutated(&dir, bytes)) {
            CheckpointError::Malformed(msg) => assert!(msg.contains("tok_xyz")),
            other => panic!("wrong class: {other}"),
        }
    }

    #[test]
    fn trailing_data_is_rejected() {
        let (dir, _, mut bytes) = saved_bytes();
        bytes.push(0);
        match checkpoint_err(load_mutated(&dir, bytes)) {
            CheckpointError::Malformed(msg) => assert!(msg.contains("trailing")),
            other => panic!("wrong class: {other}"),
        }
    }

    #[test]
    fn wrong_tensor_count_is_rejected() {
        let (dir, _, mut bytes) = saved_bytes();
        let json_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let count_at = 12 + json_len;
        let old = u32::from_le_bytes(bytes[count_at..count_at + 4].try_into().unwrap());
        bytes[count_at..count_at + 4].copy_from_slice(&(old + 1).to_le_bytes());
        match checkpoint_err(load_mutated(&dir, bytes)) {
            CheckpointError::Malformed(msg) => assert!(msg.contains("tensors")),
            other => panic!("wrong class: {other}"),
        }
    }
}
