//! Scene frame, input features and the encoder block shared by the
//! forecaster and the backfilling module.

use rand::Rng;
use thiserror::Error;

use crate::numkit::{Binder, NumError, ParamId, ParamSet, Tape, Var};
use crate::scenegen::{History, MapPolylines, SceneError, Timeline, AGENT_CHANNELS, MAP_CHANNELS};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("observation length {tau} outside {min}..={max}")]
    TauOutOfRange { tau: usize, min: usize, max: usize },
    #[error("history has {found} steps, expected {expected} for tau={tau}")]
    StepMismatch { tau: usize, found: usize, expected: usize },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

/// Per-step agent input width: 6 state channels plus relative time.
pub const STEP_FEATURES: usize = AGENT_CHANNELS + 1;
pub const LN_EPS: f64 = 1e-5;

const POS_SCALE: f64 = 0.05;
const MAP_POS_SCALE: f64 = 0.05;
const MAP_DIR_SCALE: f64 = 0.1;

/// Rigid frame centered on an agent's last observed state, x-axis along its heading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneFrame {
    pub origin: [f64; 2],
    pub cos: f64,
    pub sin: f64,
}

impl SceneFrame {
    /// Frame of `agent` at the last row of `history`.
    pub fn from_history(history: &History, agent: usize) -> Self {
        let s = history.state(agent, history.steps - 1);
        let n = s[4].hypot(s[5]);
        Self { origin: [s[0], s[1]], cos: s[4] / n, sin: s[5] / n }
    }

    pub fn identity() -> Self {
        Self { origin: [0.0, 0.0], cos: 1.0, sin: 0.0 }
    }

    pub fn rotate(&self, v: [f64; 2]) -> [f64; 2] {
        [self.cos * v[0] + self.sin * v[1], -self.sin * v[0] + self.cos * v[1]]
    }

    pub fn unrotate(&self, v: [f64; 2]) -> [f64; 2] {
        [self.cos * v[0] - self.sin * v[1], self.sin * v[0] + self.cos * v[1]]
    }

    pub fn to_local(&self, p: [f64; 2]) -> [f64; 2] {
        self.rotate([p[0] - self.origin[0], p[1] - self.origin[1]])
    }

    pub fn to_world(&self, p: [f64; 2]) -> [f64; 2] {
        let r = self.unrotate(p);
        [r[0] + self.origin[0], r[1] + self.origin[1]]
    }

    /// Full state row expressed in this frame.
    pub fn state_to_local(&self, s: &[f64]) -> [f64; AGENT_CHANNELS] {
        let p = self.to_local([s[0], s[1]]);
        let v = self.rotate([s[2], s[3]]);
        let h = self.rotate([s[4], s[5]]);
        [p[0], p[1], v[0], v[1], h[0], h[1]]
    }

    pub fn state_to_world(&self, s: &[f64]) -> [f64; AGENT_CHANNELS] {
        let p = self.to_world([s[0], s[1]]);
        let v = self.unrotate([s[2], s[3]]);
        let h = self.unrotate([s[4], s[5]]);
        [p[0], p[1], v[0], v[1], h[0], h[1]]
    }
}

/// `(N·T) × STEP_FEATURES` agent inputs. Time runs from `-T/t_obs` up to just
/// below zero so the window's position relative to the fixed end is explicit.
pub fn agent_features(history: &History, frame: &SceneFrame, t_obs: usize) -> Vec<f64> {
    let t = history.steps;
    let mut out = Vec::with_capacity(history.n_agents * t * STEP_FEATURES);
    for a in 0..history.n_agents {
        for j in 0..t {
            let s = frame.state_to_local(history.state(a, j));
            out.extend_from_slice(&[
                s[0] * POS_SCALE,
                s[1] * POS_SCALE,
                s[2],
                s[3],
                s[4],
                s[5],
                (j as f64 - t as f64) / t_obs as f64,
            ]);
        }
    }
    out
}

/// `S × MAP_CHANNELS` segment inputs in the frame.
pub fn map_features(map: &MapPolylines, frame: &SceneFrame) -> Vec<f64> {
    let mut out = Vec::with_capacity(map.segment_count() * MAP_CHANNELS);
    for p in 0..map.polylines {
        for k in 0..map.segments {
            let s = map.segment(p, k);
            let start = frame.to_local([s[0], s[1]]);
            let dir = frame.rotate([s[2], s[3]]);
            out.extend_from_slice(&[
                start[0] * MAP_POS_SCALE,
                start[1] * MAP_POS_SCALE,
                dir[0] * MAP_DIR_SCALE,
                dir[1] * MAP_DIR_SCALE,
                s[4],
            ]);
        }
    }
    out
}

/// Per-scene inputs that do not depend on the observation length.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneContext {
    pub timeline: Timeline,
    pub frame: SceneFrame,
    pub map: Vec<f64>,
    pub n_segments: usize,
    pub n_agents: usize,
    pub aoi_indices: Vec<usize>,
    /// Last observed position of each AOI, local frame.
    pub aoi_last: Vec<[f64; 2]>,
}

impl SceneContext {
    /// The frame follows the first AOI at the last row of `history`, which is
    /// the same step for every truncation.
    pub fn new(
        timeline: Timeline,
        history: &History,
        map: &MapPolylines,
        aoi_indices: &[usize],
    ) -> Result<Self, ModelError> {
        if aoi_indices.is_empty() || aoi_indices.iter().any(|&a| a >= history.n_agents) {
            return Err(ModelError::Invalid(format!("AOI indices {aoi_indices:?} for {} agents", history.n_agents)));
        }
        let frame = SceneFrame::from_history(history, aoi_indices[0]);
        let last = history.steps - 1;
        let aoi_last = aoi_indices
            .iter()
            .map(|&a| {
                let s = history.state(a, last);
                frame.to_local([s[0], s[1]])
            })
            .collect();
        Ok(Self {
            timeline,
            frame,
            map: map_features(map, &frame),
            n_segments: map.segment_count(),
            n_agents: history.n_agents,
            aoi_indices: aoi_indices.to_vec(),
            aoi_last,
        })
    }

    /// World-frame future positions of each AOI as local offsets from its last
    /// observed position, `A × T_f × 2`.
    pub fn local_targets(&self, futures: &[Vec<[f64; 2]>]) -> Vec<f64> {
        let mut out = Vec::new();
        for (fut, last) in futures.iter().zip(&self.aoi_last) {
            for p in fut {
                let l = self.frame.to_local(*p);
                out.extend_from_slice(&[l[0] - last[0], l[1] - last[1]]);
            }
        }
        out
    }

    /// Inverse of [`SceneContext::local_targets`] for one AOI.
    pub fn offsets_to_world(&self, aoi: usize, offsets: &[f64]) -> Vec<[f64; 2]> {
        let last = self.aoi_last[aoi];
        offsets.chunks_exact(2).map(|o| self.frame.to_world([last[0] + o[0], last[1] + o[1]])).collect()
    }
}

/// A parameter set bound to one tape.
pub struct Bound<'a> {
    pub params: &'a ParamSet,
    binder: Binder,
}

impl<'a> Bound<'a> {
    pub fn new(params: &'a ParamSet, trainable: bool) -> Self {
        Self { params, binder: Binder::new(params, trainable) }
    }

    pub fn var(&mut self, tape: &mut Tape, id: ParamId) -> Var {
        self.binder.bind(tape, self.params, id)
    }

    pub fn into_binder(self) -> Binder {
        self.binder
    }

    pub fn binder(&self) -> &Binder {
        &self.binder
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LnSite {
    pub gamma: ParamId,
    pub beta: ParamId,
}

/// Length-specific normalization: three sites per length.
#[derive(Debug, Clone, PartialEq)]
pub struct LnTable {
    /// `(τ, sites)` in ascending τ.
    pub entries: Vec<(usize, [LnSite; 3])>,
}

impl LnTable {
    pub fn sites(&self, tau: usize) -> Option<&[LnSite; 3]> {
        self.entries.iter().find(|(t, _)| *t == tau).map(|(_, s)| s)
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.entries.iter().map(|(t, _)| *t).collect()
    }

    pub fn ids(&self, tau: usize) -> Vec<ParamId> {
        self.sites(tau).map(|s| s.iter().flat_map(|x| [x.gamma, x.beta]).collect()).unwrap_or_default()
    }
}

/// Weights of the encoder shared across every observation length.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock {
    pub d: usize,
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub w_pool: ParamId,
    pub b_pool: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub w_seg: ParamId,
    pub b_seg: ParamId,
    pub mq: ParamId,
    pub mk: ParamId,
    pub mv: ParamId,
    pub mo: ParamId,
    pub w_fuse: ParamId,
    pub b_fuse: ParamId,
    pub ln: LnTable,
}

impl EncoderBlock {
    pub fn register(params: &mut ParamSet, prefix: &str, d: usize, lengths: &[usize], rng: &mut impl Rng) -> Self {
        let w_in = params.add_matrix(format!("{prefix}.w_in"), STEP_FEATURES, d, 1.0, rng);
        let w_pool = params.add_matrix(format!("{prefix}.w_pool"), 2 * d, d, 1.0, rng);
        let wq = params.add_matrix(format!("{prefix}.attn.wq"), d, d, 1.0, rng);
        let wk = params.add_matrix(format!("{prefix}.attn.wk"), d, d, 1.0, rng);
        let wv = params.add_matrix(format!("{prefix}.attn.wv"), d, d, 1.0, rng);
        let wo = params.add_matrix(format!("{prefix}.attn.wo"), d, d, 1.0, rng);
        let w_seg = params.add_matrix(format!("{prefix}.map.w_seg"), MAP_CHANNELS, d, 1.0, rng);
        let mq = params.add_matrix(format!("{prefix}.map.wq"), d, d, 1.0, rng);
        let mk = params.add_matrix(format!("{prefix}.map.wk"), d, d, 1.0, rng);
        let mv = params.add_matrix(format!("{prefix}.map.wv"), d, d, 1.0, rng);
        let mo = params.add_matrix(format!("{prefix}.map.wo"), d, d, 1.0, rng);
        let w_fuse = params.add_matrix(format!("{prefix}.fuse.w"), d, d, 1.0, rng);
        let b_in = params.add_filled(format!("{prefix}.b_in"), d, 0.0);
        let b_pool = params.add_filled(format!("{prefix}.b_pool"), d, 0.0);
        let b_seg = params.add_filled(format!("{prefix}.map.b_seg"), d, 0.0);
        let b_fuse = params.add_filled(format!("{prefix}.fuse.b"), d, 0.0);
        let entries = lengths
            .iter()
            .map(|&tau| {
                let site = |k: usize, params: &mut ParamSet| LnSite {
                    gamma: params.add_filled(format!("{prefix}.ln{k}.tau{tau}.gamma"), d, 1.0),
                    beta: params.add_filled(format!("{prefix}.ln{k}.tau{tau}.beta"), d, 0.0),
                };
                (tau, [site(1, params), site(2, params), site(3, params)])
            })
            .collect();
        Self {
            d,
            w_in,
            b_in,
            w_pool,
            b_pool,
            wq,
            wk,
            wv,
            wo,
            w_seg,
            b_seg,
            mq,
            mk,
            mv,
            mo,
            w_fuse,
            b_fuse,
            ln: LnTable { entries },
        }
    }

    /// Every weight except the normalization table.
    pub fn shared_ids(&self) -> Vec<ParamId> {
        vec![
            self.w_in, self.b_in, self.w_pool, self.b_pool, self.wq, self.wk, self.wv, self.wo, self.w_seg, self.b_seg,
            self.mq, self.mk, self.mv, self.mo, self.w_fuse, self.b_fuse,
        ]
    }

    /// Map keys and values; computed once per scene and reused by every length.
    pub fn map_memory(&self, tape: &mut Tape, p: &mut Bound, map: Var) -> Result<MapMemory, NumError> {
        let (w, b) = (p.var(tape, self.w_seg), p.var(tape, self.b_seg));
        let seg = linear(tape, map, w, b)?;
        let seg = tape.tanh(seg);
        let (mk, mv) = (p.var(tape, self.mk), p.var(tape, self.mv));
        Ok(MapMemory { keys: tape.matmul(seg, mk)?, values: tape.matmul(seg, mv)? })
    }

    /// `(N·T) × STEP_FEATURES` inputs to `N × d` fused agent features using
    /// the normalization sites `ln`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &mut Bound,
        agents: Var,
        n_agents: usize,
        steps: usize,
        memory: &MapMemory,
        ln: &[LnSite; 3],
    ) -> Result<Var, NumError> {
        let d = self.d;
        let (w, b) = (p.var(tape, self.w_in), p.var(tape, self.b_in));
        let h = linear(tape, agents, w, b)?;
        let h = tape.tanh(h);
        let h = tape.reshape(h, vec![n_agents, steps, d])?;
        let mean = tape.mean_axis(h, 1)?;
        let max = tape.max_axis(h, 1)?;
        let pooled = tape.concat(&[mean, max], 1)?;
        let (w, b) = (p.var(tape, self.w_pool), p.var(tape, self.b_pool));
        let h = linear(tape, pooled, w, b)?;
        let h = norm(tape, p, h, ln[0])?;

        let (wq, wk, wv, wo) = (p.var(tape, self.wq), p.var(tape, self.wk), p.var(tape, self.wv), p.var(tape, self.wo));
        let q = tape.matmul(h, wq)?;
        let k = tape.matmul(h, wk)?;
        let v = tape.matmul(h, wv)?;
        let a = tape.attention(q, k, v)?;
        let a = tape.matmul(a, wo)?;
        let h = tape.add(h, a)?;
        let h = norm(tape, p, h, ln[1])?;

        let (mq, mo) = (p.var(tape, self.mq), p.var(tape, self.mo));
        let q = tape.matmul(h, mq)?;
        let a = tape.attention(q, memory.keys, memory.values)?;
        let a = tape.matmul(a, mo)?;
        let h = tape.add(h, a)?;
        let h = norm(tape, p, h, ln[2])?;

        let (w, b) = (p.var(tape, self.w_fuse), p.var(tape, self.b_fuse));
        let f = linear(tape, h, w, b)?;
        Ok(tape.tanh(f))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MapMemory {
    pub keys: Var,
    pub values: Var,
}

pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, NumError> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

fn norm(tape: &mut Tape, p: &mut Bound, x: Var, site: LnSite) -> Result<Var, NumError> {
    let (g, b) = (p.var(tape, site.gamma), p.var(tape, site.beta));
    tape.layer_norm(x, g, b, LN_EPS)
}

/// Closest entry of `available` to `tau`, preferring the longer one on ties.
pub fn nearest_length(available: &[usize], tau: usize) -> Option<usize> {
    available.iter().copied().min_by_key(|&t| (t.abs_diff(tau), std::cmp::Reverse(t)))
}
