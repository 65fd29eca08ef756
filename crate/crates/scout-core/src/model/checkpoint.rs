//! Fixed-layout binary checkpoints.
//!
//! Layout: magic `SCTK`, format version (u32 LE), length-prefixed config
//! JSON, FNV-1a 64 digest of the config bytes, entry count, then one
//! `(name, rows, cols, little-endian f64 data)` record per parameter plus
//! the two running-statistics vectors, and finally an FNV-1a 64 checksum
//! of every preceding byte. All integers are little-endian.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::digest::fnv1a64;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

use super::{SurrogateConfig, SurrogateModel};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SCTK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Names under which the running statistics ride along with the
/// parameters.
const RUNNING_MEAN: &str = "running.mean";
const RUNNING_VAR: &str = "running.var";

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_entry(buf: &mut Vec<u8>, name: &str, rows: usize, cols: usize, data: &[f64]) -> Result<()> {
    let name_len = u32::try_from(name.len())
        .map_err(|_| Error::Validation("parameter name too long for checkpoint".into()))?;
    push_u32(buf, name_len);
    buf.extend_from_slice(name.as_bytes());
    let r = u32::try_from(rows)
        .map_err(|_| Error::Validation("parameter too large for checkpoint".into()))?;
    let c = u32::try_from(cols)
        .map_err(|_| Error::Validation("parameter too large for checkpoint".into()))?;
    push_u32(buf, r);
    push_u32(buf, c);
    for &x in data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    Ok(())
}

/// Serialise a model into the checkpoint byte layout.
pub fn checkpoint_bytes(model: &SurrogateModel) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    push_u32(&mut buf, CHECKPOINT_VERSION);

    let config_json = serde_json::to_vec(model.config())
        .map_err(|e| Error::Validation(format!("config serialisation failed: {e}")))?;
    let config_len = u32::try_from(config_json.len())
        .map_err(|_| Error::Validation("config too large for checkpoint".into()))?;
    push_u32(&mut buf, config_len);
    buf.extend_from_slice(&config_json);
    push_u64(&mut buf, fnv1a64(&config_json));

    let (rm, rv) = model.running_stats();
    let n_entries = model.params().len() + 2;
    push_u32(
        &mut buf,
        u32::try_from(n_entries)
            .map_err(|_| Error::Validation("too many parameters for checkpoint".into()))?,
    );
    for p in model.params() {
        push_entry(&mut buf, &p.name, p.value.rows(), p.value.cols(), p.value.data())?;
    }
    push_entry(&mut buf, RUNNING_MEAN, 1, rm.len(), rm)?;
    push_entry(&mut buf, RUNNING_VAR, 1, rv.len(), rv)?;

    let checksum = fnv1a64(&buf);
    push_u64(&mut buf, checksum);
    Ok(buf)
}

/// Serialise a model to `path`.
pub fn save_checkpoint(model: &SurrogateModel, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(model)?)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Corrupt("checkpoint truncated".into()))?;
        let slice = &self.buf[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Load a model previously written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<SurrogateModel> {
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };

    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Corrupt("not a checkpoint file (bad magic)".into()));
    }
    // The version gates the layout, so it is checked before anything that
    // depends on the layout — including the trailing checksum.
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Incompatible(format!(
            "checkpoint format version {version}, reader supports {CHECKPOINT_VERSION}"
        )));
    }
    if buf.len() < 8 {
        return Err(Error::Corrupt("checkpoint truncated".into()));
    }
    let body = &buf[..buf.len() - 8];
    let stored_checksum = u64::from_le_bytes(buf[buf.len() - 8..].try_into().unwrap());
    if fnv1a64(body) != stored_checksum {
        return Err(Error::Corrupt("checkpoint checksum mismatch".into()));
    }

    let config_len = r.u32()? as usize;
    let config_json = r.take(config_len)?;
    let stored_digest = r.u64()?;
    if fnv1a64(config_json) != stored_digest {
        return Err(Error::Corrupt("config digest mismatch".into()));
    }
    let config: SurrogateConfig = serde_json::from_slice(config_json)
        .map_err(|e| Error::Corrupt(format!("config block unreadable: {e}")))?;

    let n_entries = r.u32()? as usize;
    let mut values: HashMap<String, Matrix> = HashMap::with_capacity(n_entries);
    for _ in 0..n_entries {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Corrupt("parameter name is not valid UTF-8".into()))?
            .to_string();
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Corrupt("parameter shape overflows".into()))?;
        let raw = r.take(n * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if values
            .insert(name.clone(), Matrix::from_vec(rows, cols, data)?)
            .is_some()
        {
            return Err(Error::Corrupt(format!("duplicate entry {name:?}")));
        }
    }
    if r.pos != buf.len() - 8 {
        return Err(Error::Corrupt("trailing bytes after checkpoint entries".into()));
    }

    let mean = values
        .remove(RUNNING_MEAN)
        .ok_or_else(|| Error::Corrupt("checkpoint is missing running mean".into()))?
        .into_data();
    let var = values
        .remove(RUNNING_VAR)
        .ok_or_else(|| Error::Corrupt("checkpoint is missing running variance".into()))?
        .into_data();
    SurrogateModel::from_parts(config, values, mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AttentionKind;
    use crate::rng::RngState;

    fn small_model() -> SurrogateModel {
        let config = SurrogateConfig {
            embed_dim: 8,
            attn_dim: 8,
            n_heads: 2,
            n_queries: 2,
            hidden_dim: 6,
            n_residual_blocks: 2,
            dropout_p: 0.1,
            n_labels: 4,
            use_attention: true,
            attention_kind: AttentionKind::Cross,
            init_seed: 3,
        };
        let mut model = SurrogateModel::init(config).unwrap();
        // Non-default running stats so the round trip actually covers them.
        model
            .set_running_stats(
                (0..6).map(|i| i as f64 * 0.25 - 0.5).collect(),
                (0..6).map(|i| 0.5 + i as f64 * 0.125).collect(),
            )
            .unwrap();
        model
    }

    fn scene() -> (Matrix, Vec<bool>) {
        let mut rng = RngState::new(99).stream();
        let x = Matrix::from_vec(4, 8, (0..32).map(|_| rng.normal()).collect()).unwrap();
        (x, vec![true, true, true, false])
    }

    #[test]
    fn round_trip_is_bitwise_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.sctk");
        let model = small_model();
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();

        assert_eq!(loaded.config(), model.config());
        assert_eq!(loaded.running_stats().0, model.running_stats().0);
        assert_eq!(loaded.running_stats().1, model.running_stats().1);
        for (a, b) in model.params().iter().zip(loaded.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.decay, b.decay);
            assert_eq!(a.value, b.value, "{}", a.name);
        }

        let (x, mask) = scene();
        let before = model.forward(&x, &mask).unwrap();
        let after = loaded.forward(&x, &mask).unwrap();
        assert_eq!(before, after, "outputs must match bit for bit");
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.sctk");
        save_checkpoint(&small_model(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        for keep in [0, 3, 7, 20, bytes.len() / 2, bytes.len() - 1] {
            std::fs::write(&path, &bytes[..keep]).unwrap();
            let err = load_checkpoint(&path).unwrap_err();
            assert!(
                matches!(err, Error::Corrupt(_)),
                "keep {keep}: got {err:?}"
            );
        }
    }

    #[test]
    fn version_mismatch_is_incompatible() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.sctk");
        save_checkpoint(&small_model(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path).unwrap_err(),
            Error::Incompatible(_)
        ));
    }

    #[test]
    fn flipped_payload_byte_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.sctk");
        save_checkpoint(&small_model(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path).unwrap_err(),
            Error::Corrupt(_)
        ));
    }

    #[test]
    fn bad_magic_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.sctk");
        save_checkpoint(&small_model(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[..4].copy_from_slice(b"JUNK");
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path).unwrap_err(),
            Error::Corrupt(_)
        ));
    }
}
