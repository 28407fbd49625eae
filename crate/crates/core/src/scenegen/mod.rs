//! Synthetic vectorized driving scenes, fixed-end-time truncation and the
//! `TAPD` dataset format.

mod generate;
mod io;

pub use generate::{generate_dataset, generate_scene, BehaviorMix, GeneratorConfig};
pub use io::{FORMAT_VERSION as DATASET_VERSION, read_dataset, read_dataset_file, write_dataset, write_dataset_file, DatasetFile, DatasetHeader};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Agent state channels: x, y, vx, vy, cos θ, sin θ (meters, meters/step).
pub const AGENT_CHANNELS: usize = 6;
/// Map segment channels: start x, start y, dx, dy, lane type.
pub const MAP_CHANNELS: usize = 5;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("observation length {tau} outside 1..={max}")]
    TauOutOfRange { tau: usize, max: usize },
    #[error("truncation spec {spec:?} does not match scene timeline {timeline:?}")]
    TimelineMismatch { spec: TruncationSpec, timeline: Timeline },
    #[error("invalid split ratios: {0}")]
    InvalidSplit(String),
    #[error("bad magic bytes, not a TAPD dataset")]
    BadMagic,
    #[error("unsupported dataset version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("dataset truncated: {0}")]
    Truncated(String),
    #[error("checksum mismatch in record {record}")]
    Checksum { record: usize },
    #[error("malformed record {record}: {detail}")]
    Malformed { record: usize, detail: String },
    #[error("scene does not match dataset header: {0}")]
    HeaderMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Step layout shared by every scene of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timeline {
    /// Steps per observation interval (ΔT).
    pub delta_t: usize,
    /// Number of intervals in the full observation window (H).
    pub intervals: usize,
    /// Prediction horizon in steps (T_f).
    pub future: usize,
}

impl Timeline {
    pub const fn new(delta_t: usize, intervals: usize, future: usize) -> Self {
        Self { delta_t, intervals, future }
    }

    /// T_obs = H·ΔT.
    pub fn observed(&self) -> usize {
        self.delta_t * self.intervals
    }

    pub fn total(&self) -> usize {
        self.observed() + self.future
    }

    /// T_τ = τ·ΔT.
    pub fn steps_for(&self, tau: usize) -> usize {
        tau * self.delta_t
    }
}

impl Default for Timeline {
    fn default() -> Self {
        Self::new(5, 4, 30)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgentKind {
    ConstantVelocity,
    ConstantTurn,
    LaneFollow,
    StopAndGo,
}

impl AgentKind {
    pub(crate) fn code(self) -> u8 {
        match self {
            AgentKind::ConstantVelocity => 0,
            AgentKind::ConstantTurn => 1,
            AgentKind::LaneFollow => 2,
            AgentKind::StopAndGo => 3,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => AgentKind::ConstantVelocity,
            1 => AgentKind::ConstantTurn,
            2 => AgentKind::LaneFollow,
            3 => AgentKind::StopAndGo,
            _ => return None,
        })
    }
}

/// `P × S_m × C_m` map tensor in world coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct MapPolylines {
    pub polylines: usize,
    pub segments: usize,
    pub data: Vec<f64>,
}

impl MapPolylines {
    pub fn segment(&self, polyline: usize, segment: usize) -> &[f64] {
        let base = (polyline * self.segments + segment) * MAP_CHANNELS;
        &self.data[base..base + MAP_CHANNELS]
    }

    pub fn segment_count(&self) -> usize {
        self.polylines * self.segments
    }
}

/// One agent's states over the full `T_obs + T_f` window.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentTrack {
    pub kind: AgentKind,
    pub is_aoi: bool,
    /// `(T_obs + T_f) × C_a`, row-major.
    pub states: Vec<f64>,
}

impl AgentTrack {
    pub fn state(&self, step: usize) -> &[f64] {
        &self.states[step * AGENT_CHANNELS..(step + 1) * AGENT_CHANNELS]
    }

    pub fn steps(&self) -> usize {
        self.states.len() / AGENT_CHANNELS
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: u64,
    pub seed: u64,
    pub timeline: Timeline,
    pub map: MapPolylines,
    pub agents: Vec<AgentTrack>,
    pub aoi_indices: Vec<usize>,
}

impl Scene {
    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    /// Checks the structural invariants of a scene.
    pub fn validate(&self) -> Result<(), SceneError> {
        let total = self.timeline.total();
        if self.agents.is_empty() {
            return Err(SceneError::HeaderMismatch(format!("scene {} has no agents", self.id)));
        }
        if self.aoi_indices.is_empty() || self.aoi_indices.len() > self.agents.len() {
            return Err(SceneError::HeaderMismatch(format!("scene {} has {} AOIs", self.id, self.aoi_indices.len())));
        }
        if let Some(&bad) = self.aoi_indices.iter().find(|&&i| i >= self.agents.len()) {
            return Err(SceneError::HeaderMismatch(format!("scene {} AOI index {bad} out of range", self.id)));
        }
        for (i, a) in self.agents.iter().enumerate() {
            if a.states.len() != total * AGENT_CHANNELS {
                return Err(SceneError::HeaderMismatch(format!(
                    "scene {} agent {i} has {} values, expected {}",
                    self.id,
                    a.states.len(),
                    total * AGENT_CHANNELS
                )));
            }
            if a.states.iter().any(|v| !v.is_finite()) {
                return Err(SceneError::HeaderMismatch(format!("scene {} agent {i} has non-finite states", self.id)));
            }
        }
        if self.map.data.len() != self.map.segment_count() * MAP_CHANNELS {
            return Err(SceneError::HeaderMismatch(format!("scene {} map size mismatch", self.id)));
        }
        Ok(())
    }

    /// Full observation window `X^H` in world coordinates.
    pub fn full_history(&self) -> History {
        let spec = TruncationSpec::new(self.timeline.delta_t, self.timeline.intervals, self.timeline.intervals);
        truncate_history(self, &spec).expect("full window is always valid")
    }

    /// Future positions `(T_f × 2)` of one agent, world coordinates.
    pub fn future_positions(&self, agent: usize) -> Vec<[f64; 2]> {
        let t_obs = self.timeline.observed();
        (t_obs..self.timeline.total())
            .map(|t| {
                let s = self.agents[agent].state(t);
                [s[0], s[1]]
            })
            .collect()
    }
}

/// Observed window of `τ` intervals ending at `T_obs`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruncationSpec {
    pub delta_t: usize,
    pub intervals: usize,
    pub tau: usize,
}

impl TruncationSpec {
    pub fn new(delta_t: usize, intervals: usize, tau: usize) -> Self {
        Self { delta_t, intervals, tau }
    }

    pub fn for_timeline(timeline: &Timeline, tau: usize) -> Self {
        Self::new(timeline.delta_t, timeline.intervals, tau)
    }

    pub fn steps(&self) -> usize {
        self.tau * self.delta_t
    }
}

/// `N × T × C_a` agent states.
#[derive(Debug, Clone, PartialEq)]
pub struct History {
    pub n_agents: usize,
    pub steps: usize,
    pub data: Vec<f64>,
}

impl History {
    pub fn new(n_agents: usize, steps: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n_agents * steps * AGENT_CHANNELS);
        Self { n_agents, steps, data }
    }

    pub fn state(&self, agent: usize, step: usize) -> &[f64] {
        let base = (agent * self.steps + step) * AGENT_CHANNELS;
        &self.data[base..base + AGENT_CHANNELS]
    }

    pub fn agent(&self, agent: usize) -> &[f64] {
        let w = self.steps * AGENT_CHANNELS;
        &self.data[agent * w..(agent + 1) * w]
    }

    /// Trailing `steps` rows of every agent.
    pub fn suffix(&self, steps: usize) -> History {
        assert!(steps <= self.steps && steps > 0);
        let mut data = Vec::with_capacity(self.n_agents * steps * AGENT_CHANNELS);
        for a in 0..self.n_agents {
            let rows = self.agent(a);
            data.extend_from_slice(&rows[(self.steps - steps) * AGENT_CHANNELS..]);
        }
        History::new(self.n_agents, steps, data)
    }
}

/// Extracts the last `T_τ` observed steps `[T_obs − T_τ, T_obs)` of every agent.
/// The observation end time does not depend on `τ`.
pub fn truncate_history(scene: &Scene, spec: &TruncationSpec) -> Result<History, SceneError> {
    if spec.delta_t != scene.timeline.delta_t || spec.intervals != scene.timeline.intervals {
        return Err(SceneError::TimelineMismatch { spec: *spec, timeline: scene.timeline });
    }
    if spec.tau == 0 || spec.tau > spec.intervals {
        return Err(SceneError::TauOutOfRange { tau: spec.tau, max: spec.intervals });
    }
    let t_obs = scene.timeline.observed();
    let steps = spec.steps();
    let start = t_obs - steps;
    let mut data = Vec::with_capacity(scene.n_agents() * steps * AGENT_CHANNELS);
    for a in &scene.agents {
        data.extend_from_slice(&a.states[start * AGENT_CHANNELS..t_obs * AGENT_CHANNELS]);
    }
    Ok(History::new(scene.n_agents(), steps, data))
}

/// Deterministic shuffled split into `(train, val)` by `ratios = [train, val]`.
pub fn split_dataset(scenes: Vec<Scene>, ratios: [f64; 2], seed: u64) -> Result<(Vec<Scene>, Vec<Scene>), SceneError> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || (ratios[0] + ratios[1] - 1.0).abs() > 1e-9 || ratios[0] == 0.0 {
        return Err(SceneError::InvalidSplit(format!("{ratios:?} must be non-negative, sum to 1, train > 0")));
    }
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (scenes.len() as f64 * ratios[0]).round() as usize;
    let mut slots: Vec<Option<Scene>> = scenes.into_iter().map(Some).collect();
    let mut take = |i: usize| slots[i].take().expect("each index once");
    let train: Vec<Scene> = order[..n_train].iter().map(|&i| take(i)).collect();
    let val: Vec<Scene> = order[n_train..].iter().map(|&i| take(i)).collect();
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene() -> Scene {
        generate_scene(11, &GeneratorConfig::default()).unwrap()
    }

    #[test]
    fn full_truncation_is_identity() {
        let s = scene();
        let full = s.full_history();
        let t = truncate_history(&s, &TruncationSpec::new(5, 4, 4)).unwrap();
        assert_eq!(full, t);
        assert_eq!(t.steps, 20);
        for a in 0..s.n_agents() {
            assert_eq!(t.agent(a), &s.agents[a].states[..20 * AGENT_CHANNELS]);
        }
    }

    #[test]
    fn shortest_window_is_last_five_steps() {
        let s = scene();
        let full = s.full_history();
        let t1 = truncate_history(&s, &TruncationSpec::new(5, 4, 1)).unwrap();
        assert_eq!(t1.steps, 5);
        // 1-based steps 16..=20 are 0-based rows 15..20.
        for a in 0..s.n_agents() {
            for (k, step) in (15..20).enumerate() {
                assert_eq!(t1.state(a, k), full.state(a, step));
            }
        }
    }

    #[test]
    fn suffixes_nest() {
        let s = scene();
        for tau in 1..4 {
            let short = truncate_history(&s, &TruncationSpec::new(5, 4, tau)).unwrap();
            let long = truncate_history(&s, &TruncationSpec::new(5, 4, tau + 1)).unwrap();
            assert_eq!(long.suffix(short.steps), short);
        }
    }

    #[test]
    fn tau_out_of_range() {
        let s = scene();
        assert!(matches!(truncate_history(&s, &TruncationSpec::new(5, 4, 0)), Err(SceneError::TauOutOfRange { .. })));
        assert!(matches!(truncate_history(&s, &TruncationSpec::new(5, 4, 5)), Err(SceneError::TauOutOfRange { .. })));
        assert!(truncate_history(&s, &TruncationSpec::new(10, 5, 1)).is_err());
    }

    #[test]
    fn split_is_disjoint_exhaustive_and_deterministic() {
        let cfg = GeneratorConfig::default();
        let scenes: Vec<Scene> = (0..100).map(|i| generate_scene(i, &cfg).unwrap()).collect();
        let (tr, va) = split_dataset(scenes.clone(), [0.8, 0.2], 3).unwrap();
        assert_eq!((tr.len(), va.len()), (80, 20));
        let mut ids: Vec<u64> = tr.iter().chain(&va).map(|s| s.id).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..100).collect::<Vec<_>>());
        let (tr2, _) = split_dataset(scenes.clone(), [0.8, 0.2], 3).unwrap();
        assert_eq!(tr.iter().map(|s| s.id).collect::<Vec<_>>(), tr2.iter().map(|s| s.id).collect::<Vec<_>>());
        let (all, none) = split_dataset(scenes.clone(), [1.0, 0.0], 3).unwrap();
        assert_eq!((all.len(), none.len()), (100, 0));
        assert!(split_dataset(scenes.clone(), [0.7, 0.2], 3).is_err());
        assert!(split_dataset(scenes, [-0.1, 1.1], 3).is_err());
    }
}
