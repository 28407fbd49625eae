//! Temporal backfilling: reconstructs the unobserved prefix of a truncated
//! history and concatenates it with the observed suffix.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{agent_features, linear, Bound, EncoderBlock, MapMemory, ModelError, SceneContext, STEP_FEATURES};
use crate::numkit::{Binder, NumError, ParamId, ParamSet, Tape, Tensor, Var};
use crate::oaf::wta_winner;
use crate::scenegen::{History, Timeline, AGENT_CHANNELS, MAP_CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TbmConfig {
    pub timeline: Timeline,
    pub d: usize,
    pub modes: usize,
}

impl Default for TbmConfig {
    fn default() -> Self {
        Self { timeline: Timeline::default(), d: 64, modes: 3 }
    }
}

impl TbmConfig {
    /// Longest prefix, `(H−1)·ΔT` steps.
    pub fn max_prefix(&self) -> usize {
        (self.timeline.intervals - 1) * self.timeline.delta_t
    }

    pub fn prefix_steps(&self, tau: usize) -> usize {
        (self.timeline.intervals - tau) * self.timeline.delta_t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrefixDecoder {
    pub w_h: ParamId,
    pub b_h: ParamId,
    pub w_prefix: ParamId,
    pub b_prefix: ParamId,
    pub w_logit: ParamId,
    pub b_logit: ParamId,
    /// `2 × (K_rec·P_max·2)` map from the first observed velocity to per-step
    /// displacements. Starts as constant-velocity extrapolation.
    pub w_skip: ParamId,
}

impl PrefixDecoder {
    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.w_h, self.b_h, self.w_prefix, self.b_prefix, self.w_logit, self.b_logit, self.w_skip]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TbmParams {
    pub config: TbmConfig,
    pub params: ParamSet,
    pub encoder: EncoderBlock,
    pub decoder: PrefixDecoder,
}

impl TbmParams {
    pub fn new(config: TbmConfig, seed: u64) -> Result<Self, ModelError> {
        if config.timeline.intervals < 2 {
            return Err(ModelError::Invalid("backfilling needs at least 2 intervals".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let lengths: Vec<usize> = (1..config.timeline.intervals).collect();
        let encoder = EncoderBlock::register(&mut params, "tbm.enc", config.d, &lengths, &mut rng);
        let out = config.modes * config.max_prefix() * 2;
        let decoder = PrefixDecoder {
            w_h: params.add_matrix("tbm.dec.w_h", config.d, config.d, 1.0, &mut rng),
            w_prefix: params.add_matrix("tbm.dec.w_prefix", config.d, out, 0.1, &mut rng),
            w_logit: params.add_matrix("tbm.dec.w_logit", config.d, config.modes, 1.0, &mut rng),
            b_h: params.add_filled("tbm.dec.b_h", config.d, 0.0),
            b_prefix: params.add_filled("tbm.dec.b_prefix", out, 0.0),
            b_logit: params.add_filled("tbm.dec.b_logit", config.modes, 0.0),
            w_skip: params.add("tbm.dec.w_skip", constant_velocity(out)),
        };
        Ok(Self { config, params, encoder, decoder })
    }

    pub fn trainable_ids(&self, lengths: &[usize]) -> Vec<ParamId> {
        let mut ids = self.encoder.shared_ids();
        for &t in lengths {
            ids.extend(self.encoder.ln.ids(t));
        }
        ids.extend(self.decoder.ids());
        ids
    }

    fn check_tau(&self, tau: usize) -> Result<(), ModelError> {
        let h = self.config.timeline.intervals;
        if tau == 0 || tau >= h {
            return Err(ModelError::TauOutOfRange { tau, min: 1, max: h - 1 });
        }
        Ok(())
    }
}

fn constant_velocity(out: usize) -> Tensor {
    let mut w = vec![0.0; 2 * out];
    for j in 0..out {
        w[(j % 2) * out + j] = 1.0;
    }
    Tensor::new(vec![2, out], w).expect("finite init")
}

/// Candidate prefixes on the tape, in reverse time: row step `j` is `j + 1`
/// steps before the first observed state.
#[derive(Debug, Clone, Copy)]
pub struct PrefixOutputs {
    /// `(N·K_rec) × (P·2)` local-frame positions.
    pub reversed: Var,
    /// `N × K_rec`.
    pub logits: Var,
    pub n_agents: usize,
    pub modes: usize,
    pub steps: usize,
}

impl PrefixOutputs {
    /// Candidate `k` of `agent` in chronological order, local frame.
    pub fn candidate(&self, tape: &Tape, agent: usize, k: usize) -> Vec<[f64; 2]> {
        let w = self.steps * 2;
        let row = &tape.value(self.reversed)[(agent * self.modes + k) * w..(agent * self.modes + k + 1) * w];
        row.chunks_exact(2).rev().map(|c| [c[0], c[1]]).collect()
    }
}

pub struct TbmSession<'a> {
    pub model: &'a TbmParams,
    pub ctx: &'a SceneContext,
    bound: Bound<'a>,
    memory: Option<MapMemory>,
}

impl<'a> TbmSession<'a> {
    pub fn new(model: &'a TbmParams, ctx: &'a SceneContext, trainable: bool) -> Self {
        Self { model, ctx, bound: Bound::new(&model.params, trainable), memory: None }
    }

    fn memory(&mut self, tape: &mut Tape) -> Result<MapMemory, NumError> {
        if let Some(m) = self.memory {
            return Ok(m);
        }
        let map = tape.constant(vec![self.ctx.n_segments, MAP_CHANNELS], self.ctx.map.clone())?;
        let m = self.model.encoder.map_memory(tape, &mut self.bound, map)?;
        self.memory = Some(m);
        Ok(m)
    }

    /// `N × d` reconstruction features `F_rec`.
    pub fn encode(&mut self, tape: &mut Tape, x: &History, tau: usize) -> Result<Var, ModelError> {
        self.model.check_tau(tau)?;
        let tl = self.model.config.timeline;
        if x.steps != tl.steps_for(tau) {
            return Err(ModelError::StepMismatch { tau, found: x.steps, expected: tl.steps_for(tau) });
        }
        if x.n_agents != self.ctx.n_agents {
            return Err(ModelError::Invalid(format!("{} agents, context has {}", x.n_agents, self.ctx.n_agents)));
        }
        let feats = agent_features(x, &self.ctx.frame, tl.observed());
        let agents = tape.constant(vec![x.n_agents * x.steps, STEP_FEATURES], feats)?;
        let memory = self.memory(tape)?;
        let sites = *self.model.encoder.ln.sites(tau).expect("one entry per short length");
        Ok(self.model.encoder.forward(tape, &mut self.bound, agents, x.n_agents, x.steps, &memory, &sites)?)
    }

    /// Candidate prefixes anchored at each agent's first observed position.
    pub fn decode(&mut self, tape: &mut Tape, f_rec: Var, x: &History, tau: usize) -> Result<PrefixOutputs, ModelError> {
        decode_with(tape, &mut self.bound, self.model, self.ctx, f_rec, x, tau)
    }

    pub fn binder(&self) -> &Binder {
        self.bound.binder()
    }

    pub fn into_binder(self) -> Binder {
        self.bound.into_binder()
    }
}

fn decode_with(
    tape: &mut Tape,
    p: &mut Bound,
    model: &TbmParams,
    ctx: &SceneContext,
    f: Var,
    x: &History,
    tau: usize,
) -> Result<PrefixOutputs, ModelError> {
    model.check_tau(tau)?;
    let cfg = &model.config;
    let shape = tape.shape(f).to_vec();
    if shape.len() != 2 || shape[1] != cfg.d || shape[0] != x.n_agents {
        return Err(ModelError::Num(NumError::shape(
            "tbm_decode",
            format!("features {shape:?}, expected ({}, {})", x.n_agents, cfg.d),
        )));
    }
    let (n, k, steps) = (x.n_agents, cfg.modes, cfg.prefix_steps(tau));
    let dec = &model.decoder;
    let (w, b) = (p.var(tape, dec.w_h), p.var(tape, dec.b_h));
    let h = linear(tape, f, w, b)?;
    let h = tape.tanh(h);
    let (w, b) = (p.var(tape, dec.w_prefix), p.var(tape, dec.b_prefix));
    let disp = linear(tape, h, w, b)?;
    let v0: Vec<f64> = (0..n).flat_map(|a| {
        let s = x.state(a, 0);
        ctx.frame.rotate([s[2], s[3]])
    }).collect();
    let v0 = tape.constant(vec![n, 2], v0)?;
    let w_skip = p.var(tape, dec.w_skip);
    let skip = tape.matmul(v0, w_skip)?;
    let disp = tape.add(disp, skip)?;
    let disp = tape.reshape(disp, vec![n * k, cfg.max_prefix(), 2])?;
    let disp = tape.slice(disp, 1, 0, steps)?;
    let back = tape.cumsum(disp, 1)?;
    let mut anchor = Vec::with_capacity(n * k * steps * 2);
    for a in 0..n {
        let s = x.state(a, 0);
        let l = ctx.frame.to_local([s[0], s[1]]);
        for _ in 0..k * steps {
            anchor.extend_from_slice(&l);
        }
    }
    let anchor = tape.constant(vec![n * k, steps, 2], anchor)?;
    let pos = tape.sub(anchor, back)?;
    let reversed = tape.reshape(pos, vec![n * k, steps * 2])?;
    let (w, b) = (p.var(tape, dec.w_logit), p.var(tape, dec.b_logit));
    let logits = linear(tape, h, w, b)?;
    Ok(PrefixOutputs { reversed, logits, n_agents: n, modes: k, steps })
}

/// Reconstruction losses. `truth` holds the missing prefix positions,
/// `N × P × 2` local frame, chronological.
#[derive(Debug, Clone)]
pub struct ReconstructionLoss {
    pub reg: Var,
    pub cls: Var,
    pub winners: Vec<usize>,
}

pub fn tbm_loss(tape: &mut Tape, out: &PrefixOutputs, truth: &[f64]) -> Result<ReconstructionLoss, ModelError> {
    let w = out.steps * 2;
    if truth.len() != out.n_agents * w {
        return Err(ModelError::Num(NumError::shape(
            "tbm_loss",
            format!("truth has {} values, expected ({}, {}, 2)", truth.len(), out.n_agents, out.steps),
        )));
    }
    let mut target = Vec::with_capacity(truth.len());
    for a in 0..out.n_agents {
        for c in truth[a * w..(a + 1) * w].chunks_exact(2).rev() {
            target.extend_from_slice(c);
        }
    }
    let values = tape.value(out.reversed);
    let mut winners = Vec::with_capacity(out.n_agents);
    for a in 0..out.n_agents {
        // The last reversed step is the earliest missing state.
        let y = &target[a * w..(a + 1) * w];
        let cands: Vec<&[f64]> =
            (0..out.modes).map(|k| &values[(a * out.modes + k) * w..(a * out.modes + k + 1) * w]).collect();
        winners.push(wta_winner(&cands, [y[w - 2], y[w - 1]]));
    }
    let rows: Vec<usize> = winners.iter().enumerate().map(|(a, k)| a * out.modes + k).collect();
    let chosen = tape.gather_rows(out.reversed, &rows)?;
    let target = tape.constant(vec![out.n_agents, w], target)?;
    let reg = tape.smooth_l1(chosen, target)?;
    let mut ces = Vec::with_capacity(out.n_agents);
    for (a, &k) in winners.iter().enumerate() {
        let row = tape.slice(out.logits, 0, a, a + 1)?;
        ces.push(tape.cross_entropy(row, k)?);
    }
    let stacked = tape.concat(&ces, 0)?;
    let total = tape.sum(stacked);
    let cls = tape.scale(total, 1.0 / out.n_agents as f64);
    Ok(ReconstructionLoss { reg, cls, winners })
}

/// Ground-truth prefix positions for `tau`, local frame, chronological.
pub fn prefix_targets(full: &History, ctx: &SceneContext, steps: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(full.n_agents * steps * 2);
    for a in 0..full.n_agents {
        for t in 0..steps {
            let s = full.state(a, t);
            out.extend_from_slice(&ctx.frame.to_local([s[0], s[1]]));
        }
    }
    out
}

/// `prefix ‖ observed` along time. The observed rows are copied verbatim.
pub fn complete_history(observed: &History, prefix: &History, t_obs: usize) -> Result<History, ModelError> {
    if prefix.n_agents != observed.n_agents {
        return Err(ModelError::Invalid(format!("prefix has {} agents, observed {}", prefix.n_agents, observed.n_agents)));
    }
    if prefix.steps + observed.steps != t_obs {
        return Err(ModelError::StepMismatch { tau: 0, found: prefix.steps + observed.steps, expected: t_obs });
    }
    let mut data = Vec::with_capacity(observed.n_agents * t_obs * AGENT_CHANNELS);
    for a in 0..observed.n_agents {
        data.extend_from_slice(prefix.agent(a));
        data.extend_from_slice(observed.agent(a));
    }
    Ok(History::new(observed.n_agents, t_obs, data))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackfillResult {
    /// `N × P` reconstructed states, world frame.
    pub prefix: History,
    /// `N × T_obs`.
    pub completed: History,
    pub chosen: Vec<usize>,
    /// `N × K_rec`.
    pub logits: Vec<f64>,
}

/// World-frame states from chronological positions, with velocity and heading
/// from finite differences. `next` is the first observed state.
fn states_from_positions(positions: &[[f64; 2]], next: &[f64]) -> Vec<f64> {
    let mut seq: Vec<[f64; 2]> = positions.to_vec();
    seq.push([next[0], next[1]]);
    let mut out = Vec::with_capacity(positions.len() * AGENT_CHANNELS);
    let mut heading = [next[4], next[5]];
    let mut rows = Vec::with_capacity(positions.len());
    for i in (0..positions.len()).rev() {
        let v = if i == 0 {
            [seq[1][0] - seq[0][0], seq[1][1] - seq[0][1]]
        } else {
            [seq[i][0] - seq[i - 1][0], seq[i][1] - seq[i - 1][1]]
        };
        let speed = v[0].hypot(v[1]);
        if speed > 1e-6 {
            heading = [v[0] / speed, v[1] / speed];
        }
        rows.push([seq[i][0], seq[i][1], v[0], v[1], heading[0], heading[1]]);
    }
    for r in rows.iter().rev() {
        out.extend_from_slice(r);
    }
    out
}

/// Encode, decode, keep the highest-logit candidate per agent (lowest index on
/// ties) and complete the history. Runs without gradient tracking.
pub fn backfill(model: &TbmParams, ctx: &SceneContext, x: &History, tau: usize) -> Result<BackfillResult, ModelError> {
    let mut tape = Tape::new();
    let mut s = TbmSession::new(model, ctx, false);
    let f = s.encode(&mut tape, x, tau)?;
    let out = s.decode(&mut tape, f, x, tau)?;
    backfill_from_outputs(&tape, &out, ctx, x, model.config.timeline.observed())
}

/// Selection and completion given decoded candidates.
pub fn backfill_from_outputs(
    tape: &Tape,
    out: &PrefixOutputs,
    ctx: &SceneContext,
    x: &History,
    t_obs: usize,
) -> Result<BackfillResult, ModelError> {
    let logits = tape.value(out.logits).to_vec();
    let mut chosen = Vec::with_capacity(out.n_agents);
    let mut data = Vec::with_capacity(out.n_agents * out.steps * AGENT_CHANNELS);
    for a in 0..out.n_agents {
        let row = &logits[a * out.modes..(a + 1) * out.modes];
        let k = row.iter().enumerate().fold(0, |best, (i, v)| if *v > row[best] { i } else { best });
        chosen.push(k);
        let world: Vec<[f64; 2]> = out.candidate(tape, a, k).into_iter().map(|p| ctx.frame.to_world(p)).collect();
        data.extend(states_from_positions(&world, x.state(a, 0)));
    }
    let prefix = History::new(out.n_agents, out.steps, data);
    let completed = complete_history(x, &prefix, t_obs)?;
    Ok(BackfillResult { prefix, completed, chosen, logits })
}

/// Mean Euclidean position error between a reconstructed and a true prefix.
pub fn prefix_error(prefix: &History, truth: &History) -> f64 {
    let mut total = 0.0;
    for a in 0..prefix.n_agents {
        for t in 0..prefix.steps {
            let (p, q) = (prefix.state(a, t), truth.state(a, t));
            total += (p[0] - q[0]).hypot(p[1] - q[1]);
        }
    }
    total / (prefix.n_agents * prefix.steps) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_scene, truncate_history, GeneratorConfig, Scene, TruncationSpec};

    fn setup() -> (TbmParams, Scene, SceneContext) {
        let m = TbmParams::new(TbmConfig { d: 16, ..TbmConfig::default() }, 3).unwrap();
        let s = generate_scene(8, &GeneratorConfig::default()).unwrap();
        let c = SceneContext::new(s.timeline, &s.full_history(), &s.map, &s.aoi_indices).unwrap();
        (m, s, c)
    }

    fn obs(s: &Scene, tau: usize) -> History {
        truncate_history(s, &TruncationSpec::for_timeline(&s.timeline, tau)).unwrap()
    }

    #[test]
    fn shapes_per_length() {
        let (m, s, c) = setup();
        let mut tape = Tape::new();
        let mut sess = TbmSession::new(&m, &c, false);
        for tau in 1..4 {
            let x = obs(&s, tau);
            let f = sess.encode(&mut tape, &x, tau).unwrap();
            assert_eq!(tape.shape(f), &[s.n_agents(), 16]);
            let out = sess.decode(&mut tape, f, &x, tau).unwrap();
            assert_eq!(out.steps, (4 - tau) * 5);
            assert_eq!(tape.shape(out.reversed), &[s.n_agents() * 3, out.steps * 2]);
            assert_eq!(tape.shape(out.logits), &[s.n_agents(), 3]);
        }
        assert!(matches!(sess.encode(&mut tape, &obs(&s, 4), 4), Err(ModelError::TauOutOfRange { .. })));
    }

    #[test]
    fn zero_decoder_returns_anchor() {
        let (mut m, s, c) = setup();
        for id in m.decoder.ids() {
            m.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = obs(&s, 2);
        let mut tape = Tape::new();
        let mut sess = TbmSession::new(&m, &c, false);
        let f = sess.encode(&mut tape, &x, 2).unwrap();
        let out = sess.decode(&mut tape, f, &x, 2).unwrap();
        for a in 0..s.n_agents() {
            let first = c.frame.to_local([x.state(a, 0)[0], x.state(a, 0)[1]]);
            for p in out.candidate(&tape, a, 1) {
                assert_eq!(p, first);
            }
        }
    }

    #[test]
    fn exact_candidate_has_zero_regression() {
        let mut tape = Tape::new();
        // One agent, two candidates, two steps (reversed order rows).
        let rev = tape.leaf_from(vec![2, 4], vec![1.0, 1.0, 2.0, 2.0, 0.0, 0.0, 0.0, 1.0], true).unwrap();
        let logits = tape.leaf_from(vec![1, 2], vec![0.0, 0.0], true).unwrap();
        let out = PrefixOutputs { reversed: rev, logits, n_agents: 1, modes: 2, steps: 2 };
        // Chronological truth: earliest (2,2) then (1,1).
        let l = tbm_loss(&mut tape, &out, &[2.0, 2.0, 1.0, 1.0]).unwrap();
        assert_eq!(l.winners, vec![0]);
        assert_eq!(tape.scalar_value(l.reg), 0.0);
        let l2 = tbm_loss(&mut tape, &out, &[0.1, 0.9, 5.0, 5.0]).unwrap();
        assert_eq!(l2.winners, vec![1]);
        assert!(tbm_loss(&mut tape, &out, &[0.0; 2]).is_err());
    }

    #[test]
    fn single_candidate_has_zero_classification() {
        let mut tape = Tape::new();
        let rev = tape.leaf_from(vec![1, 2], vec![1.0, 1.0], true).unwrap();
        let logits = tape.leaf_from(vec![1, 1], vec![-3.0], true).unwrap();
        let out = PrefixOutputs { reversed: rev, logits, n_agents: 1, modes: 1, steps: 1 };
        let l = tbm_loss(&mut tape, &out, &[0.0, 0.0]).unwrap();
        assert_eq!(tape.scalar_value(l.cls), 0.0);
    }

    #[test]
    fn backfill_preserves_suffix_and_is_deterministic() {
        let (m, s, c) = setup();
        for tau in 1..4 {
            let x = obs(&s, tau);
            let r = backfill(&m, &c, &x, tau).unwrap();
            assert_eq!(r.completed.steps, 20);
            assert_eq!(r.completed.suffix(x.steps), x);
            assert_eq!(r, backfill(&m, &c, &x, tau).unwrap());
            for a in 0..x.n_agents {
                for t in 0..r.prefix.steps {
                    let st = r.prefix.state(a, t);
                    assert!((st[4].hypot(st[5]) - 1.0).abs() < 1e-9);
                }
            }
        }
        assert!(backfill(&m, &c, &obs(&s, 4), 4).is_err());
    }

    #[test]
    fn true_prefix_completes_exactly() {
        let (_, s, _) = setup();
        let full = s.full_history();
        let x = obs(&s, 1);
        let mut data = Vec::new();
        for a in 0..full.n_agents {
            data.extend_from_slice(&full.agent(a)[..15 * AGENT_CHANNELS]);
        }
        let prefix = History::new(full.n_agents, 15, data);
        assert_eq!(complete_history(&x, &prefix, 20).unwrap(), full);
        assert!(complete_history(&x, &prefix, 21).is_err());
        assert_eq!(prefix_error(&prefix, &prefix), 0.0);
    }
}
