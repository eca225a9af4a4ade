//! Binary decoder checkpoints.
//!
//! Layout (little-endian): magic `SPKC`, format version, the decoder
//! configuration as length-prefixed JSON, the network parameters in layer
//! order, both batch-norm running statistics, then, for fusion decoders, the
//! head parameters and NAV scaler. A CRC32 of all preceding bytes closes the
//! file.

use std::path::Path;

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::fusion::{Decoder, NavScaler};
use crate::graph::RunningStats;
use crate::tensor::{ParamStore, Tensor};
use crate::training::DecoderConfig;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SPKC";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn decoder_config(decoder: &Decoder) -> DecoderConfig {
    DecoderConfig {
        snn: decoder.model.config().clone(),
        fusion: decoder.head.as_ref().map(|h| *h.config()),
    }
}

fn write_store(w: &mut ByteWriter, store: &ParamStore) {
    w.u32(store.len() as u32);
    for p in store.iter() {
        w.f64_slice(p.value.data());
    }
}

fn read_store(r: &mut ByteReader<'_>, store: &mut ParamStore) -> Result<()> {
    let n = r.u32()? as usize;
    if n != store.len() {
        return Err(Error::Format(format!(
            "checkpoint has {n} parameter tensors, configuration expects {}",
            store.len()
        )));
    }
    let mut values = Vec::with_capacity(n);
    for p in store.iter() {
        let data = r.f64_vec()?;
        if data.len() != p.value.len() {
            return Err(Error::Shape {
                op: "checkpoint parameter",
                expected: p.value.shape().to_vec(),
                actual: vec![data.len()],
            });
        }
        values.push(Tensor::new(p.value.shape().to_vec(), data)?);
    }
    store.set_values(&values)
}

fn write_stats(w: &mut ByteWriter, s: &RunningStats) {
    w.f64_slice(&s.mean);
    w.f64_slice(&s.var);
    w.bytes(&s.updates.to_le_bytes());
}

fn read_stats(r: &mut ByteReader<'_>, expected: usize) -> Result<RunningStats> {
    let mean = r.f64_vec()?;
    let var = r.f64_vec()?;
    let updates = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    if mean.len() != expected || var.len() != expected {
        return Err(Error::Shape {
            op: "checkpoint running stats",
            expected: vec![expected],
            actual: vec![mean.len()],
        });
    }
    Ok(RunningStats { mean, var, updates })
}

pub fn to_bytes(decoder: &Decoder) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    let cfg = serde_json::to_vec(&decoder_config(decoder)).expect("config serialises");
    w.u32(cfg.len() as u32);
    w.bytes(&cfg);
    write_store(&mut w, decoder.model.params());
    let (tc, sc) = decoder.model.running_stats();
    write_stats(&mut w, tc);
    write_stats(&mut w, sc);
    if let Some(h) = &decoder.head {
        write_store(&mut w, h.params());
        w.f64_slice(&h.scaler().mean);
        w.f64_slice(&h.scaler().std);
    }
    w.finish_with_crc()
}

pub fn from_bytes(bytes: &[u8]) -> Result<Decoder> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            offset: 0,
            needed: 4 - bytes.len(),
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = ByteReader::new(body);
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32()? as usize;
    let cfg: DecoderConfig = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::Format(format!("checkpoint configuration: {e}")))?;
    cfg.validate()?;
    let mut decoder = cfg.build(0)?;
    read_store(&mut r, decoder.model.params_mut())?;
    let c_h = cfg.snn.c_h;
    let tc = read_stats(&mut r, c_h)?;
    let sc = read_stats(&mut r, c_h)?;
    let (tc_slot, sc_slot) = decoder.model.running_stats_mut();
    *tc_slot = tc;
    *sc_slot = sc;
    if let Some(h) = &mut decoder.head {
        read_store(&mut r, h.params_mut())?;
        let mean = r.f64_vec()?;
        let std = r.f64_vec()?;
        h.set_scaler(NavScaler { mean, std })?;
    }
    if r.remaining() != 0 {
        return Err(Error::Format(format!(
            "{} unexpected bytes before the checksum",
            r.remaining()
        )));
    }
    Ok(decoder)
}

pub fn save_checkpoint(decoder: &Decoder, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(decoder))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Decoder> {
    from_bytes(&std::fs::read(path)?)
}

/// Loads a checkpoint and rejects it unless its configuration equals
/// `expected`.
pub fn load_checkpoint_matching(path: impl AsRef<Path>, expected: &DecoderConfig) -> Result<Decoder> {
    let decoder = load_checkpoint(path)?;
    let found = decoder_config(&decoder);
    if &found != expected {
        return Err(Error::Format(format!(
            "checkpoint configuration differs: expected {}, found {}",
            serde_json::to_string(expected).unwrap_or_default(),
            serde_json::to_string(&found).unwrap_or_default()
        )));
    }
    Ok(decoder)
}
