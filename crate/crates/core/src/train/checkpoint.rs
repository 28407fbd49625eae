use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainError};
use crate::numkit::{OptimState, ParamSet, Tensor};
use crate::oaf::{OafConfig, OafParams};
use crate::tbm::{TbmConfig, TbmParams};

const MAGIC: &[u8; 8] = b"TAPDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Oaf,
    Tbm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    pub oaf: Option<OafConfig>,
    pub tbm: Option<TbmConfig>,
    pub trained_lengths: Vec<usize>,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: u8,
    pub meta: CheckpointMeta,
    pub params: ParamSet,
    pub optim: OptimState,
}

impl Checkpoint {
    pub fn from_oaf(stage: u8, model: &OafParams, optim: &OptimState, train: &TrainConfig) -> Self {
        Self {
            stage,
            meta: CheckpointMeta {
                kind: ModelKind::Oaf,
                oaf: Some(model.config),
                tbm: None,
                trained_lengths: model.trained_lengths.clone(),
                train: train.clone(),
            },
            params: model.params.clone(),
            optim: optim.clone(),
        }
    }

    pub fn from_tbm(stage: u8, model: &TbmParams, optim: &OptimState, train: &TrainConfig) -> Self {
        Self {
            stage,
            meta: CheckpointMeta {
                kind: ModelKind::Tbm,
                oaf: None,
                tbm: Some(model.config),
                trained_lengths: train.lengths.clone(),
                train: train.clone(),
            },
            params: model.params.clone(),
            optim: optim.clone(),
        }
    }

    pub fn to_oaf(&self) -> Result<OafParams, TrainError> {
        let cfg = match (self.meta.kind, self.meta.oaf) {
            (ModelKind::Oaf, Some(c)) => c,
            _ => return Err(TrainError::Checkpoint(format!("stage-{} checkpoint holds no forecaster", self.stage))),
        };
        let mut m = OafParams::new(cfg, 0);
        copy_params(&self.params, &mut m.params)?;
        m.trained_lengths = self.meta.trained_lengths.clone();
        Ok(m)
    }

    pub fn to_tbm(&self) -> Result<TbmParams, TrainError> {
        let cfg = match (self.meta.kind, self.meta.tbm) {
            (ModelKind::Tbm, Some(c)) => c,
            _ => return Err(TrainError::Checkpoint(format!("stage-{} checkpoint holds no backfiller", self.stage))),
        };
        let mut m = TbmParams::new(cfg, 0)?;
        copy_params(&self.params, &mut m.params)?;
        Ok(m)
    }
}

fn copy_params(src: &ParamSet, dst: &mut ParamSet) -> Result<(), TrainError> {
    if src.len() != dst.len() {
        return Err(TrainError::Checkpoint(format!("{} parameters stored, model has {}", src.len(), dst.len())));
    }
    for ((n1, t1), (n2, t2)) in src.iter().zip(dst.iter()) {
        if n1 != n2 || t1.shape() != t2.shape() {
            return Err(TrainError::Checkpoint(format!("stored {n1} {:?} vs model {n2} {:?}", t1.shape(), t2.shape())));
        }
    }
    dst.load_flat(&src.flat_values())?;
    Ok(())
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>, TrainError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, u32::from(ckpt.stage));
    let meta = serde_json::to_vec(&ckpt.meta).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    put_u64(&mut out, meta.len() as u64);
    out.extend_from_slice(&meta);

    put_u32(&mut out, ckpt.params.len() as u32);
    let mut offset = 0u64;
    for (name, t) in ckpt.params.iter() {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len() as u32);
        for &d in t.shape() {
            put_u64(&mut out, d as u64);
        }
        put_u64(&mut out, offset);
        offset += t.len() as u64;
    }
    put_u64(&mut out, offset);
    for (_, t) in ckpt.params.iter() {
        put_f64s(&mut out, t.data());
    }

    let o = &ckpt.optim;
    put_u64(&mut out, o.step);
    put_f64s(&mut out, &[o.lr, o.weight_decay, o.beta1, o.beta2, o.eps]);
    for moments in [&o.first_moment, &o.second_moment] {
        put_u32(&mut out, moments.len() as u32);
        for m in moments {
            put_u64(&mut out, m.len() as u64);
            put_f64s(&mut out, m);
        }
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| TrainError::Checkpoint("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize, TrainError> {
        let v = self.u64()?;
        usize::try_from(v).ok().filter(|&n| n <= self.buf.len()).ok_or_else(|| TrainError::Checkpoint(format!("implausible length {v}")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, TrainError> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| TrainError::Checkpoint("overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<Checkpoint, TrainError> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..8] != MAGIC {
        return Err(TrainError::Checkpoint("bad magic bytes, not a TAPDCKPT file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::Version { found: version, expected: CHECKPOINT_VERSION });
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(trailer.try_into().expect("4 bytes")) {
        return Err(TrainError::Checksum);
    }
    let mut r = Reader { buf: body, pos: 12 };
    let stage = u8::try_from(r.u32()?).map_err(|_| TrainError::Checkpoint("stage out of range".into()))?;
    let meta_len = r.len()?;
    let meta: CheckpointMeta =
        serde_json::from_slice(r.take(meta_len)?).map_err(|e| TrainError::Checkpoint(format!("metadata: {e}")))?;

    let n = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(n.min(4096));
    let mut expected = 0u64;
    for _ in 0..n {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| TrainError::Checkpoint("non-UTF-8 name".into()))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>, _>>()?;
        let offset = r.u64()?;
        if offset != expected {
            return Err(TrainError::Checkpoint(format!("{name}: offset {offset}, expected {expected}")));
        }
        expected += shape.iter().product::<usize>() as u64;
        manifest.push((name, shape));
    }
    let total = r.len()?;
    if total as u64 != expected {
        return Err(TrainError::Checkpoint(format!("payload holds {total} values, manifest {expected}")));
    }
    let payload = r.f64s(total)?;
    let mut params = ParamSet::new();
    let mut off = 0;
    for (name, shape) in manifest {
        let len: usize = shape.iter().product();
        if params.find(&name).is_some() {
            return Err(TrainError::Checkpoint(format!("duplicate parameter {name}")));
        }
        params.add(name, Tensor::new(shape, payload[off..off + len].to_vec())?);
        off += len;
    }

    let step = r.u64()?;
    let h = r.f64s(5)?;
    let mut moments = [Vec::new(), Vec::new()];
    for m in &mut moments {
        let count = r.u32()? as usize;
        for _ in 0..count {
            let len = r.len()?;
            m.push(r.f64s(len)?);
        }
    }
    if r.pos != body.len() {
        return Err(TrainError::Checkpoint("trailing bytes".into()));
    }
    let [first_moment, second_moment] = moments;
    let optim = OptimState { lr: h[0], weight_decay: h[1], beta1: h[2], beta2: h[3], eps: h[4], step, first_moment, second_moment };
    Ok(Checkpoint { stage, meta, params, optim })
}

pub fn save_checkpoint_file(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<(), TrainError> {
    fs::write(path, save_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint_file(path: impl AsRef<Path>) -> Result<Checkpoint, TrainError> {
    load_checkpoint(&fs::read(path)?)
}
