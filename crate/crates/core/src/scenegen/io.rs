use std::fs;
use std::path::Path;

use super::{AgentKind, AgentTrack, MapPolylines, Scene, SceneError, Timeline, AGENT_CHANNELS, MAP_CHANNELS};

const MAGIC: &[u8; 4] = b"TAPD";
pub const FORMAT_VERSION: u32 = 1;
const FLAG_RECONSTRUCTED: u32 = 1;

/// Global header of a `TAPD` file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetHeader {
    pub timeline: Timeline,
    pub agent_channels: usize,
    pub map_channels: usize,
    /// Histories were completed by backfilling from `tau` observed intervals.
    pub reconstructed_from: Option<usize>,
}

impl DatasetHeader {
    pub fn new(timeline: Timeline) -> Self {
        Self { timeline, agent_channels: AGENT_CHANNELS, map_channels: MAP_CHANNELS, reconstructed_from: None }
    }

    fn flags(&self) -> u32 {
        match self.reconstructed_from {
            Some(tau) => FLAG_RECONSTRUCTED | ((tau as u32 & 0xff) << 24),
            None => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    pub header: DatasetHeader,
    pub scenes: Vec<Scene>,
}

/// Serializes scenes sharing `header.timeline` into `TAPD` v1 bytes.
pub fn write_dataset(header: &DatasetHeader, scenes: &[Scene]) -> Result<Vec<u8>, SceneError> {
    if header.agent_channels != AGENT_CHANNELS || header.map_channels != MAP_CHANNELS {
        return Err(SceneError::HeaderMismatch(format!(
            "channels ({}, {}) unsupported, expected ({AGENT_CHANNELS}, {MAP_CHANNELS})",
            header.agent_channels, header.map_channels
        )));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, header.flags());
    let t = header.timeline;
    for v in [t.delta_t, t.intervals, t.future, header.agent_channels, header.map_channels] {
        put_u32(&mut out, v as u32);
    }
    out.extend_from_slice(&(scenes.len() as u64).to_le_bytes());
    for s in scenes {
        if s.timeline != t {
            return Err(SceneError::HeaderMismatch(format!("scene {} timeline {:?} vs header {:?}", s.id, s.timeline, t)));
        }
        s.validate()?;
        let payload = encode_scene(s);
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        let crc = crc32fast::hash(&payload);
        out.extend_from_slice(&payload);
        put_u32(&mut out, crc);
    }
    Ok(out)
}

pub fn read_dataset(bytes: &[u8]) -> Result<DatasetFile, SceneError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(SceneError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(SceneError::VersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    let flags = r.u32("flags")?;
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = r.u32("header")? as usize;
    }
    let [delta_t, intervals, future, c_a, c_m] = dims;
    if c_a != AGENT_CHANNELS || c_m != MAP_CHANNELS {
        return Err(SceneError::HeaderMismatch(format!("channels ({c_a}, {c_m}) unsupported")));
    }
    let timeline = Timeline::new(delta_t, intervals, future);
    let reconstructed_from = (flags & FLAG_RECONSTRUCTED != 0).then_some((flags >> 24) as usize);
    let header = DatasetHeader { timeline, agent_channels: c_a, map_channels: c_m, reconstructed_from };
    let count = r.u64("record count")?;
    let mut scenes = Vec::new();
    for record in 0..count as usize {
        let len = r.u64(&format!("record {record} length"))? as usize;
        let payload = r.take(len, &format!("record {record} payload"))?;
        let crc = r.u32(&format!("record {record} checksum"))?;
        if crc32fast::hash(payload) != crc {
            return Err(SceneError::Checksum { record });
        }
        scenes.push(decode_scene(payload, timeline, record)?);
    }
    if r.pos != bytes.len() {
        return Err(SceneError::Malformed { record: count as usize, detail: "trailing bytes after last record".into() });
    }
    Ok(DatasetFile { header, scenes })
}

pub fn write_dataset_file(path: impl AsRef<Path>, header: &DatasetHeader, scenes: &[Scene]) -> Result<(), SceneError> {
    fs::write(path, write_dataset(header, scenes)?)?;
    Ok(())
}

pub fn read_dataset_file(path: impl AsRef<Path>) -> Result<DatasetFile, SceneError> {
    read_dataset(&fs::read(path)?)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn encode_scene(s: &Scene) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&s.id.to_le_bytes());
    out.extend_from_slice(&s.seed.to_le_bytes());
    put_u32(&mut out, s.map.polylines as u32);
    put_u32(&mut out, s.map.segments as u32);
    put_f64s(&mut out, &s.map.data);
    put_u32(&mut out, s.agents.len() as u32);
    for a in &s.agents {
        out.push(a.kind.code());
        out.push(a.is_aoi as u8);
        put_f64s(&mut out, &a.states);
    }
    put_u32(&mut out, s.aoi_indices.len() as u32);
    for &i in &s.aoi_indices {
        put_u32(&mut out, i as u32);
    }
    out
}

fn decode_scene(payload: &[u8], timeline: Timeline, record: usize) -> Result<Scene, SceneError> {
    let malformed = |detail: String| SceneError::Malformed { record, detail };
    let mut r = Reader { buf: payload, pos: 0 };
    let inner = |e: SceneError| match e {
        SceneError::Truncated(what) => malformed(format!("payload ends inside {what}")),
        other => other,
    };
    let id = r.u64("id").map_err(inner)?;
    let seed = r.u64("seed").map_err(inner)?;
    let polylines = r.u32("polylines").map_err(inner)? as usize;
    let segments = r.u32("segments").map_err(inner)? as usize;
    let map_data = r.f64s(polylines * segments * MAP_CHANNELS, "map").map_err(inner)?;
    let n = r.u32("agent count").map_err(inner)? as usize;
    let per_agent = timeline.total() * AGENT_CHANNELS;
    let mut agents = Vec::with_capacity(n.min(1024));
    for i in 0..n {
        let code = r.u8("agent kind").map_err(inner)?;
        let kind = AgentKind::from_code(code).ok_or_else(|| malformed(format!("agent {i} kind {code}")))?;
        let is_aoi = r.u8("aoi flag").map_err(inner)? != 0;
        let states = r.f64s(per_agent, "agent states").map_err(inner)?;
        agents.push(AgentTrack { kind, is_aoi, states });
    }
    let n_aoi = r.u32("aoi count").map_err(inner)? as usize;
    let mut aoi_indices = Vec::with_capacity(n_aoi.min(1024));
    for _ in 0..n_aoi {
        aoi_indices.push(r.u32("aoi index").map_err(inner)? as usize);
    }
    if r.pos != payload.len() {
        return Err(malformed("trailing bytes in payload".into()));
    }
    let scene = Scene { id, seed, timeline, map: MapPolylines { polylines, segments, data: map_data }, agents, aoi_indices };
    scene.validate().map_err(|e| malformed(e.to_string()))?;
    Ok(scene)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], SceneError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(SceneError::Truncated(what.to_string()));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, SceneError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32, SceneError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, SceneError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>, SceneError> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| SceneError::Truncated(what.to_string()))?, what)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}
