//! Binary checkpoint format plus a JSON sidecar with training metadata.
//!
//! Layout: magic, format version, model kind, model config, the tensor table,
//! then the raw parameter array as little-endian f64. Same build + same
//! parameters -> byte-identical files.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::config::{ModelConfig, ModelKind};
use super::params::{Layout, ParamVector};

const MAGIC: &[u8; 4] = b"MCKP";
const VERSION: u32 = 1;

/// Training metadata stored next to the checkpoint as `<path>.json`.
/// Deliberately free of timestamps so reruns are byte-identical.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub step: usize,
    pub loss_history: Vec<f64>,
}

pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    params: &ParamVector<F>,
    cfg: &ModelConfig,
    kind: ModelKind,
    meta: &TrainMeta,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(match kind {
        ModelKind::Lm => 0,
        ModelKind::Translator => 1,
    });
    for v in [
        cfg.n_layers as u32,
        cfg.d_model as u32,
        cfg.n_heads as u32,
        cfg.d_hidden as u32,
        cfg.max_len as u32,
        cfg.vocab_size as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&cfg.dropout.to_le_bytes());

    let specs = params.layout().specs();
    buf.extend_from_slice(&(specs.len() as u32).to_le_bytes());
    for spec in specs {
        let name = spec.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(spec.shape.len() as u32).to_le_bytes());
        for &dim in &spec.shape {
            buf.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        buf.extend_from_slice(&(spec.offset as u64).to_le_bytes());
    }

    let data = params.data_as_f64();
    buf.extend_from_slice(&(data.len() as u64).to_le_bytes());
    for x in data {
        buf.extend_from_slice(&x.to_le_bytes());
    }

    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;

    let sidecar = serde_json::to_string_pretty(meta)?;
    std::fs::write(sidecar_path(path), sidecar)?;
    Ok(())
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    os.into()
}

pub fn load_meta(path: &Path) -> Result<TrainMeta> {
    let text = std::fs::read_to_string(sidecar_path(path))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_checkpoint<F: Scalar>(
    path: &Path,
) -> Result<(ParamVector<F>, ModelConfig, ModelKind)> {
    let bad = |detail: &str| Error::BadCheckpoint {
        path: path.display().to_string(),
        detail: detail.to_owned(),
    };
    let mut file = std::fs::File::open(path)?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf)?;
    let mut r = Reader { buf: &buf, pos: 0 };

    if r.bytes(4)? != MAGIC {
        return Err(bad("bad magic"));
    }
    if r.u32()? != VERSION {
        return Err(bad("unsupported format version"));
    }
    let kind = match r.u8()? {
        0 => ModelKind::Lm,
        1 => ModelKind::Translator,
        _ => return Err(bad("unknown model kind")),
    };
    let cfg = ModelConfig {
        n_layers: r.u32()? as usize,
        d_model: r.u32()? as usize,
        n_heads: r.u32()? as usize,
        d_hidden: r.u32()? as usize,
        max_len: r.u32()? as usize,
        vocab_size: r.u32()? as usize,
        dropout: r.f64()?,
    };
    cfg.validate()
        .map_err(|e| bad(&format!("invalid stored config: {e}")))?;

    let n_specs = r.u32()? as usize;
    let mut names = Vec::with_capacity(n_specs);
    for _ in 0..n_specs {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.bytes(name_len)?.to_vec())
            .map_err(|_| bad("tensor name is not utf-8"))?;
        let n_dims = r.u32()? as usize;
        let mut shape = Vec::with_capacity(n_dims);
        for _ in 0..n_dims {
            shape.push(r.u32()? as usize);
        }
        let offset = r.u64()? as usize;
        names.push((name, shape, offset));
    }

    // The tensor table must agree with the layout implied by the config; a
    // truncated or edited file fails here rather than producing garbage math.
    let expected = Layout::for_model(&cfg, kind);
    if expected.specs().len() != names.len()
        || expected
            .specs()
            .iter()
            .zip(&names)
            .any(|(s, (n, sh, off))| &s.name != n || &s.shape != sh || s.offset != *off)
    {
        return Err(bad("tensor table does not match the stored model config"));
    }

    let len = r.u64()? as usize;
    if len != expected.total() {
        return Err(bad("parameter array length mismatch"));
    }
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        data.push(r.f64()?);
    }
    if r.pos != buf.len() {
        return Err(bad("trailing bytes"));
    }

    let params = ParamVector::from_f64_data(Arc::new(expected), &data)?;
    Ok((params, cfg, kind))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::BadCheckpoint {
                path: String::new(),
                detail: "unexpected end of file".into(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_hidden: 16,
            max_len: 16,
            vocab_size: 9,
            dropout: 0.0,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = cfg();
        let pv = ParamVector::<f64>::init_random(&cfg, ModelKind::Translator, 11);
        let meta = TrainMeta {
            seed: 11,
            step: 42,
            loss_history: vec![2.0, 1.5],
        };
        save_checkpoint(&path, &pv, &cfg, ModelKind::Translator, &meta).unwrap();
        let (loaded, lcfg, lkind) = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(loaded.data(), pv.data());
        assert_eq!(lcfg, cfg);
        assert_eq!(lkind, ModelKind::Translator);
        assert_eq!(load_meta(&path).unwrap(), meta);

        // Saving again produces identical bytes.
        let first = std::fs::read(&path).unwrap();
        save_checkpoint(&path, &pv, &cfg, ModelKind::Translator, &meta).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
    }

    #[test]
    fn truncated_and_corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = cfg();
        let pv = ParamVector::<f64>::init_random(&cfg, ModelKind::Lm, 0);
        save_checkpoint(&path, &pv, &cfg, ModelKind::Lm, &TrainMeta::default()).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(load_checkpoint::<f64>(&path).is_err());

        let mut garbled = bytes.clone();
        garbled[0] = b'X';
        std::fs::write(&path, &garbled).unwrap();
        assert!(load_checkpoint::<f64>(&path).is_err());
    }
}
