use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{AgentKind, AgentTrack, MapPolylines, Scene, SceneError, Timeline, AGENT_CHANNELS, MAP_CHANNELS};

/// All generated geometry stays inside this radius around the scene origin.
pub const SCENE_RADIUS: f64 = 150.0;
const SPAWN_RADIUS: f64 = 40.0;

/// Relative frequencies of the four behavior models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BehaviorMix {
    pub lane_follow: f64,
    pub constant_velocity: f64,
    pub constant_turn: f64,
    pub stop_and_go: f64,
}

impl Default for BehaviorMix {
    fn default() -> Self {
        Self { lane_follow: 0.4, constant_velocity: 0.3, constant_turn: 0.2, stop_and_go: 0.1 }
    }
}

impl BehaviorMix {
    fn weights(&self) -> [f64; 4] {
        [self.lane_follow, self.constant_velocity, self.constant_turn, self.stop_and_go]
    }

    fn sample(&self, rng: &mut impl Rng) -> AgentKind {
        let w = self.weights();
        let total: f64 = w.iter().sum();
        let mut u = rng.random::<f64>() * total;
        for (i, wi) in w.iter().enumerate() {
            if u < *wi {
                return [AgentKind::LaneFollow, AgentKind::ConstantVelocity, AgentKind::ConstantTurn, AgentKind::StopAndGo][i];
            }
            u -= wi;
        }
        AgentKind::StopAndGo
    }

    /// Mix with a single behavior.
    pub fn only(kind: AgentKind) -> Self {
        let mut m = Self { lane_follow: 0.0, constant_velocity: 0.0, constant_turn: 0.0, stop_and_go: 0.0 };
        match kind {
            AgentKind::LaneFollow => m.lane_follow = 1.0,
            AgentKind::ConstantVelocity => m.constant_velocity = 1.0,
            AgentKind::ConstantTurn => m.constant_turn = 1.0,
            AgentKind::StopAndGo => m.stop_and_go = 1.0,
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub timeline: Timeline,
    pub min_agents: usize,
    pub max_agents: usize,
    pub min_polylines: usize,
    pub max_polylines: usize,
    pub segments_per_polyline: usize,
    pub aoi_count: usize,
    pub behavior_mix: BehaviorMix,
    /// Std-dev of the (3σ-clipped) position noise, meters.
    pub position_noise: f64,
    /// Std-dev of the (3σ-clipped) velocity noise, meters/step.
    pub velocity_noise: f64,
    pub min_speed: f64,
    pub max_speed: f64,
    /// Hard cap on per-step displacement of the noise-free motion.
    pub v_max: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            timeline: Timeline::default(),
            min_agents: 2,
            max_agents: 8,
            min_polylines: 2,
            max_polylines: 6,
            segments_per_polyline: 8,
            aoi_count: 1,
            behavior_mix: BehaviorMix::default(),
            position_noise: 0.03,
            velocity_noise: 0.02,
            min_speed: 0.5,
            max_speed: 1.5,
            v_max: 1.8,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::InvalidConfig(m));
        if self.min_agents == 0 || self.min_agents > self.max_agents {
            return bad(format!("agent range {}..={}", self.min_agents, self.max_agents));
        }
        if self.min_polylines == 0 || self.min_polylines > self.max_polylines || self.segments_per_polyline == 0 {
            return bad(format!("polyline range {}..={}", self.min_polylines, self.max_polylines));
        }
        if self.aoi_count == 0 || self.aoi_count > self.min_agents {
            return bad(format!("aoi_count {} must be in 1..={}", self.aoi_count, self.min_agents));
        }
        let w = self.behavior_mix.weights();
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) || w.iter().sum::<f64>() <= 0.0 {
            return bad(format!("behavior mix {w:?}"));
        }
        for (name, v) in [("position_noise", self.position_noise), ("velocity_noise", self.velocity_noise)] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} = {v}"));
            }
        }
        if !(self.min_speed > 0.0 && self.min_speed <= self.max_speed && self.max_speed <= self.v_max) {
            return bad(format!("speeds {}..{} with v_max {}", self.min_speed, self.max_speed, self.v_max));
        }
        let t = &self.timeline;
        if t.delta_t == 0 || t.intervals == 0 || t.future == 0 {
            return bad(format!("timeline {t:?}"));
        }
        let reach = SPAWN_RADIUS + self.v_max * t.total() as f64;
        if reach > SCENE_RADIUS {
            return bad(format!("agents could leave the {SCENE_RADIUS} m radius (reach {reach:.1} m)"));
        }
        let lane_reach = SPAWN_RADIUS + 12.0 * self.segments_per_polyline as f64;
        if lane_reach > SCENE_RADIUS {
            return bad(format!("polylines could leave the {SCENE_RADIUS} m radius (reach {lane_reach:.1} m)"));
        }
        Ok(())
    }

    /// Worst-case |v − Δp| for observed states, from the noise clipping.
    pub fn velocity_consistency_bound(&self) -> f64 {
        3.0 * self.velocity_noise + 6.0 * self.position_noise
    }
}

fn clipped_normal(rng: &mut impl Rng) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    z.clamp(-3.0, 3.0)
}

fn uniform_in_disk(rng: &mut impl Rng, radius: f64) -> [f64; 2] {
    let r = radius * rng.random::<f64>().sqrt();
    let a = rng.random_range(-PI..PI);
    [r * a.cos(), r * a.sin()]
}

struct Polyline {
    points: Vec<[f64; 2]>,
    curved: bool,
}

impl Polyline {
    fn length(&self) -> f64 {
        self.points.windows(2).map(|w| dist(w[0], w[1])).sum()
    }

    /// Point at arc length `s`, clamped to the polyline ends.
    fn at(&self, s: f64) -> [f64; 2] {
        let mut rem = s.max(0.0);
        for w in self.points.windows(2) {
            let l = dist(w[0], w[1]);
            if rem <= l {
                let f = rem / l;
                return [w[0][0] + f * (w[1][0] - w[0][0]), w[0][1] + f * (w[1][1] - w[0][1])];
            }
            rem -= l;
        }
        *self.points.last().expect("non-empty polyline")
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn make_polyline(rng: &mut impl Rng, segments: usize) -> Polyline {
    let start = uniform_in_disk(rng, SPAWN_RADIUS);
    let mut heading = rng.random_range(-PI..PI);
    let seg_len = rng.random_range(8.0..12.0);
    let curved = rng.random::<f64>() < 0.5;
    let turn_start = if curved { rng.random_range(1..segments.max(2)) } else { segments };
    let turn = rng.random_range(0.1..0.25) * if rng.random::<bool>() { 1.0 } else { -1.0 };
    let mut points = vec![start];
    for s in 0..segments {
        if s >= turn_start {
            heading += turn;
        }
        let p = *points.last().expect("seeded");
        points.push([p[0] + seg_len * heading.cos(), p[1] + seg_len * heading.sin()]);
    }
    Polyline { points, curved }
}

/// True positions for steps `-1..total` (one extra leading step for velocities).
fn trajectory(kind: AgentKind, rng: &mut impl Rng, cfg: &GeneratorConfig, lanes: &[Polyline]) -> Vec<[f64; 2]> {
    let total = cfg.timeline.total();
    let n = total + 1;
    let speed = rng.random_range(cfg.min_speed..=cfg.max_speed);
    match kind {
        AgentKind::ConstantVelocity => {
            let p0 = uniform_in_disk(rng, SPAWN_RADIUS);
            let h = rng.random_range(-PI..PI);
            let v = [speed * h.cos(), speed * h.sin()];
            (0..n).map(|i| [p0[0] + i as f64 * v[0], p0[1] + i as f64 * v[1]]).collect()
        }
        AgentKind::ConstantTurn => {
            let p0 = uniform_in_disk(rng, SPAWN_RADIUS);
            let h0 = rng.random_range(-PI..PI);
            let omega: f64 = rng.random_range(0.01..0.05) * if rng.random::<bool>() { 1.0 } else { -1.0 };
            // Chord length 2R·sin(ω/2) equals `speed`.
            let radius = speed / (2.0 * (omega.abs() / 2.0).sin());
            let sign = omega.signum();
            let center = [p0[0] - sign * radius * h0.sin(), p0[1] + sign * radius * h0.cos()];
            (0..n)
                .map(|i| {
                    let h = h0 + omega * i as f64;
                    [center[0] + sign * radius * h.sin(), center[1] - sign * radius * h.cos()]
                })
                .collect()
        }
        AgentKind::LaneFollow => {
            let lane = &lanes[rng.random_range(0..lanes.len())];
            let len = lane.length();
            let s0 = rng.random_range(0.0..0.25 * len);
            let v = speed.min((len - s0) / n as f64);
            (0..n).map(|i| lane.at(s0 + i as f64 * v)).collect()
        }
        AgentKind::StopAndGo => {
            let p0 = uniform_in_disk(rng, SPAWN_RADIUS);
            let h = rng.random_range(-PI..PI);
            let brake_at = rng.random_range(0..total);
            let decel = rng.random_range(0.08..0.2);
            let wait = rng.random_range(5..20);
            let accel = rng.random_range(0.05..0.12);
            let mut s = 0.0;
            let mut v = speed;
            let mut stopped_for = 0;
            let mut phase = 0;
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                out.push([p0[0] + s * h.cos(), p0[1] + s * h.sin()]);
                match phase {
                    0 if i >= brake_at => phase = 1,
                    1 => {
                        v = (v - decel).max(0.0);
                        if v == 0.0 {
                            phase = 2;
                        }
                    }
                    2 => {
                        stopped_for += 1;
                        if stopped_for >= wait {
                            phase = 3;
                        }
                    }
                    3 => v = (v + accel).min(speed),
                    _ => {}
                }
                s += v;
            }
            out
        }
    }
}

/// `n` scenes with ids `0..n`; scene `i` is generated from a seed mixed from
/// `(seed, i)`.
pub fn generate_dataset(n: usize, seed: u64, config: &GeneratorConfig) -> Result<Vec<Scene>, SceneError> {
    (0..n as u64)
        .map(|i| {
            let mut s = generate_scene(scene_seed(seed, i), config)?;
            s.id = i;
            Ok(s)
        })
        .collect()
}

fn scene_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic synthetic scene for `seed`.
pub fn generate_scene(seed: u64, config: &GeneratorConfig) -> Result<Scene, SceneError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_poly = rng.random_range(config.min_polylines..=config.max_polylines);
    let lanes: Vec<Polyline> = (0..n_poly).map(|_| make_polyline(&mut rng, config.segments_per_polyline)).collect();

    let mut map_data = Vec::with_capacity(n_poly * config.segments_per_polyline * MAP_CHANNELS);
    for lane in &lanes {
        for w in lane.points.windows(2) {
            map_data.extend_from_slice(&[w[0][0], w[0][1], w[1][0] - w[0][0], w[1][1] - w[0][1], f64::from(lane.curved as u8)]);
        }
    }
    let map = MapPolylines { polylines: n_poly, segments: config.segments_per_polyline, data: map_data };

    let n_agents = rng.random_range(config.min_agents..=config.max_agents);
    let total = config.timeline.total();
    let mut agents = Vec::with_capacity(n_agents);
    for _ in 0..n_agents {
        let kind = config.behavior_mix.sample(&mut rng);
        let truth = trajectory(kind, &mut rng, config, &lanes);
        let mut states = Vec::with_capacity(total * AGENT_CHANNELS);
        let mut heading = {
            let d = [truth[1][0] - truth[0][0], truth[1][1] - truth[0][1]];
            if d[0].hypot(d[1]) > 1e-9 {
                d[1].atan2(d[0])
            } else {
                rng.random_range(-PI..PI)
            }
        };
        for t in 0..total {
            let (prev, cur) = (truth[t], truth[t + 1]);
            let v = [cur[0] - prev[0], cur[1] - prev[1]];
            if v[0].hypot(v[1]) > 1e-9 {
                heading = v[1].atan2(v[0]);
            }
            let (px, py) = (
                cur[0] + config.position_noise * clipped_normal(&mut rng),
                cur[1] + config.position_noise * clipped_normal(&mut rng),
            );
            let (vx, vy) = (
                v[0] + config.velocity_noise * clipped_normal(&mut rng),
                v[1] + config.velocity_noise * clipped_normal(&mut rng),
            );
            states.extend_from_slice(&[px, py, vx, vy, heading.cos(), heading.sin()]);
        }
        agents.push(AgentTrack { kind, is_aoi: false, states });
    }

    let mut pool: Vec<usize> = (0..n_agents).collect();
    let mut aoi_indices = Vec::with_capacity(config.aoi_count);
    for _ in 0..config.aoi_count {
        let k = rng.random_range(0..pool.len());
        aoi_indices.push(pool.swap_remove(k));
    }
    aoi_indices.sort_unstable();
    for &i in &aoi_indices {
        agents[i].is_aoi = true;
    }

    Ok(Scene { id: seed, seed, timeline: config.timeline, map, agents, aoi_indices })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::AGENT_CHANNELS as C;

    fn noiseless(kind: AgentKind) -> GeneratorConfig {
        GeneratorConfig {
            behavior_mix: BehaviorMix::only(kind),
            position_noise: 0.0,
            velocity_noise: 0.0,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let cfg = GeneratorConfig::default();
        assert_eq!(generate_scene(42, &cfg).unwrap(), generate_scene(42, &cfg).unwrap());
        assert_ne!(generate_scene(42, &cfg).unwrap(), generate_scene(43, &cfg).unwrap());
    }

    #[test]
    fn constant_velocity_is_linear() {
        let s = generate_scene(5, &noiseless(AgentKind::ConstantVelocity)).unwrap();
        for a in &s.agents {
            let p0 = a.state(0);
            let d = [a.state(1)[0] - p0[0], a.state(1)[1] - p0[1]];
            for t in 0..a.steps() {
                let p = a.state(t);
                assert!((p[0] - (p0[0] + t as f64 * d[0])).abs() < 1e-9);
                assert!((p[1] - (p0[1] + t as f64 * d[1])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn constant_turn_has_constant_speed() {
        for seed in 0..20 {
            let s = generate_scene(seed, &noiseless(AgentKind::ConstantTurn)).unwrap();
            for a in &s.agents {
                let speeds: Vec<f64> = (0..a.steps()).map(|t| a.state(t)[2].hypot(a.state(t)[3])).collect();
                for sp in &speeds {
                    assert!((sp - speeds[0]).abs() < 1e-9);
                }
                // Positions lie on a circle: consecutive heading changes are equal.
                let h: Vec<f64> = (0..a.steps()).map(|t| a.state(t)[5].atan2(a.state(t)[4])).collect();
                let dh0 = (h[1] - h[0] + PI).rem_euclid(2.0 * PI) - PI;
                for w in h.windows(2) {
                    let dh = (w[1] - w[0] + PI).rem_euclid(2.0 * PI) - PI;
                    assert!((dh - dh0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn map_segments_connect() {
        let s = generate_scene(9, &GeneratorConfig::default()).unwrap();
        for p in 0..s.map.polylines {
            for k in 0..s.map.segments - 1 {
                let a = s.map.segment(p, k);
                let b = s.map.segment(p, k + 1);
                assert!((a[0] + a[2] - b[0]).abs() < 1e-9 && (a[1] + a[3] - b[1]).abs() < 1e-9);
            }
            for k in 0..s.map.segments {
                let a = s.map.segment(p, k);
                assert!(a[0].hypot(a[1]) <= SCENE_RADIUS && (a[0] + a[2]).hypot(a[1] + a[3]) <= SCENE_RADIUS);
            }
        }
    }

    #[test]
    fn physical_invariants_hold() {
        let cfg = GeneratorConfig::default();
        let bound = cfg.velocity_consistency_bound() + 1e-12;
        for seed in 0..200 {
            let s = generate_scene(seed, &cfg).unwrap();
            s.validate().unwrap();
            assert!(!s.aoi_indices.is_empty());
            assert!((cfg.min_agents..=cfg.max_agents).contains(&s.n_agents()));
            for a in &s.agents {
                for t in 0..a.steps() {
                    let st = a.state(t);
                    assert!(st[0].hypot(st[1]) <= SCENE_RADIUS);
                    assert!((st[4].hypot(st[5]) - 1.0).abs() < 1e-6);
                    if t > 0 {
                        let prev = a.state(t - 1);
                        let (dx, dy) = (st[0] - prev[0], st[1] - prev[1]);
                        assert!((st[2] - dx).hypot(st[3] - dy) <= bound * 2f64.sqrt());
                        assert!(dx.hypot(dy) <= cfg.v_max + 6.0 * cfg.position_noise * 2f64.sqrt());
                    }
                }
            }
        }
    }

    #[test]
    fn noiseless_displacement_within_v_max() {
        let mut cfg = GeneratorConfig { position_noise: 0.0, velocity_noise: 0.0, ..GeneratorConfig::default() };
        cfg.behavior_mix = BehaviorMix::default();
        for seed in 0..100 {
            let s = generate_scene(seed, &cfg).unwrap();
            for a in &s.agents {
                for t in 1..a.steps() {
                    let (p, q) = (a.state(t - 1), a.state(t));
                    assert!((q[0] - p[0]).hypot(q[1] - p[1]) <= cfg.v_max + 1e-12);
                }
            }
        }
        let _ = C;
    }

    #[test]
    fn invalid_configs_rejected() {
        let base = GeneratorConfig::default();
        let zero = GeneratorConfig { min_agents: 0, ..base.clone() };
        assert!(matches!(generate_scene(1, &zero), Err(SceneError::InvalidConfig(_))));
        let neg = GeneratorConfig { position_noise: -1.0, ..base.clone() };
        assert!(matches!(generate_scene(1, &neg), Err(SceneError::InvalidConfig(_))));
        let too_far = GeneratorConfig { v_max: 5.0, max_speed: 5.0, ..base };
        assert!(generate_scene(1, &too_far).is_err());
    }
}
