//! Versioned little-endian binary container for trained models.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic        8 bytes  "STPMODEL"
//! version      u32      1
//! manifest     u64 length + UTF-8 JSON
//! config       u64 length + UTF-8 JSON (TrainConfig)
//! alpha        f64
//! r1, r2, K    u32 x 3
//! per mode k:
//!   D          u64
//!   ids        D x u64     original node id of each compact node
//!   beta_tilde (D+1) x f64
//!   theta      D*R1 x f64  row-major by node
//!   gamma      R2 x f64
//!   omega      R2*(D+1) x f64, row-major by community
//! M, d         u32 x 2
//! frequencies  M*d x f64
//! log_tau      f64
//! log_sigma2   f64
//! weight_mean  2M x f64
//! chol         P(P+1)/2 x f64, P = 2M, packed lower triangle by rows, diagonal as ln
//! ```

use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{Params, TrainConfig, TrainedModel};
use crate::prior::ModeParams;
use crate::rff::RffModel;
use crate::tensor::{write_atomic, NodeMaps};

pub const MAGIC: &[u8; 8] = b"STPMODEL";
pub const VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u64).to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn blob(&mut self, b: &[u8]) {
        self.u64(b.len());
        self.0.extend_from_slice(b);
    }
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
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Format("length overflows usize".into()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Format("length overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(self.f64s(1)?[0])
    }
    fn blob(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()?;
        self.take(n)
    }
}

pub fn encode_model(model: &TrainedModel, manifest: &Value) -> Result<Vec<u8>> {
    let p = &model.params;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION as usize);
    w.blob(&serde_json::to_vec(manifest).map_err(|e| Error::Format(e.to_string()))?);
    w.blob(&serde_json::to_vec(&model.config).map_err(|e| Error::Format(e.to_string()))?);
    w.f64s(&[p.alpha]);
    w.u32(p.r1);
    w.u32(p.r2);
    w.u32(p.num_modes());
    for (k, m) in p.modes.iter().enumerate() {
        w.u64(m.active_nodes());
        for &id in &model.maps.original_ids[k] {
            w.u64(id);
        }
        w.f64s(&m.beta_tilde);
        w.f64s(&m.theta_tilde);
        w.f64s(&m.gamma_tilde);
        for row in &m.omega_tilde {
            w.f64s(row);
        }
    }
    let rff = &p.rff;
    w.u32(rff.num_freqs);
    w.u32(rff.input_dim);
    w.f64s(&rff.frequencies);
    w.f64s(&[rff.log_tau, rff.log_sigma2]);
    w.f64s(&rff.weight_mean);
    w.f64s(&rff.chol_raw);
    Ok(w.0)
}

pub fn decode_model(bytes: &[u8]) -> Result<(TrainedModel, Value)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a model file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let manifest: Value =
        serde_json::from_slice(r.blob()?).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    let config: TrainConfig =
        serde_json::from_slice(r.blob()?).map_err(|e| Error::Format(format!("config: {e}")))?;
    let alpha = r.f64()?;
    let r1 = r.u32()?;
    let r2 = r.u32()?;
    let k = r.u32()?;
    let mut modes = Vec::with_capacity(k);
    let mut ids = Vec::with_capacity(k);
    for _ in 0..k {
        let d = r.u64()?;
        if d > bytes.len() {
            return Err(Error::Format("node count exceeds file size".into()));
        }
        ids.push((0..d).map(|_| r.u64()).collect::<Result<Vec<_>>>()?);
        modes.push(ModeParams {
            beta_tilde: r.f64s(d + 1)?,
            theta_tilde: r.f64s(d * r1)?,
            gamma_tilde: r.f64s(r2)?,
            omega_tilde: (0..r2).map(|_| r.f64s(d + 1)).collect::<Result<_>>()?,
        });
    }
    let m = r.u32()?;
    let d = r.u32()?;
    let p = 2 * m;
    let mut rff = RffModel {
        num_freqs: m,
        input_dim: d,
        frequencies: r.f64s(m * d)?,
        log_tau: 0.0,
        log_sigma2: 0.0,
        weight_mean: Vec::new(),
        chol_raw: Vec::new(),
    };
    rff.log_tau = r.f64()?;
    rff.log_sigma2 = r.f64()?;
    rff.weight_mean = r.f64s(p)?;
    rff.chol_raw = r.f64s(p * (p + 1) / 2)?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let params = Params {
        alpha,
        r1,
        r2,
        modes,
        rff,
    };
    params.validate()?;
    Ok((
        TrainedModel {
            config,
            params,
            maps: NodeMaps::from_original_ids(ids),
        },
        manifest,
    ))
}

pub fn save_model(model: &TrainedModel, manifest: &Value, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_model(model, manifest)?)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(TrainedModel, Value)> {
    let path = path.as_ref();
    decode_model(&std::fs::read(path).map_err(crate::error::with_path(path))?)
}

/// Human-readable dump of every parameter.
pub fn model_to_json(model: &TrainedModel, manifest: &Value) -> Value {
    serde_json::json!({
        "manifest": manifest,
        "config": model.config,
        "original_ids": model.maps.original_ids,
        "params": model.params,
    })
}
