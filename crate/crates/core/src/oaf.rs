//! Observation-adaptive forecaster: one encoder/decoder for every observation
//! length, with per-length LayerNorm and full-agent distillation features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{agent_features, linear, nearest_length, Bound, EncoderBlock, MapMemory, ModelError, SceneContext, STEP_FEATURES};
use crate::numkit::{Binder, NumError, ParamId, ParamSet, Tape, Var};
use crate::scenegen::{truncate_history, History, Scene, Timeline, TruncationSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OafConfig {
    pub timeline: Timeline,
    pub d: usize,
    pub modes: usize,
}

impl Default for OafConfig {
    fn default() -> Self {
        Self { timeline: Timeline::default(), d: 64, modes: 6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub w_h: ParamId,
    pub b_h: ParamId,
    pub w_traj: ParamId,
    pub b_traj: ParamId,
    pub w_logit: ParamId,
    pub b_logit: ParamId,
}

impl Decoder {
    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.w_h, self.b_h, self.w_traj, self.b_traj, self.w_logit, self.b_logit]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OafParams {
    pub config: OafConfig,
    pub params: ParamSet,
    pub encoder: EncoderBlock,
    pub decoder: Decoder,
    /// Lengths whose normalization has been trained. Other lengths borrow the
    /// nearest trained entry at inference.
    pub trained_lengths: Vec<usize>,
}

impl OafParams {
    pub fn new(config: OafConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let h = config.timeline.intervals;
        let lengths: Vec<usize> = (1..=h).collect();
        let encoder = EncoderBlock::register(&mut params, "oaf.enc", config.d, &lengths, &mut rng);
        let out = config.modes * config.timeline.future * 2;
        let decoder = Decoder {
            w_h: params.add_matrix("oaf.dec.w_h", config.d, config.d, 1.0, &mut rng),
            w_traj: params.add_matrix("oaf.dec.w_traj", config.d, out, 1.0, &mut rng),
            w_logit: params.add_matrix("oaf.dec.w_logit", config.d, config.modes, 1.0, &mut rng),
            b_h: params.add_filled("oaf.dec.b_h", config.d, 0.0),
            b_traj: params.add_filled("oaf.dec.b_traj", out, 0.0),
            b_logit: params.add_filled("oaf.dec.b_logit", config.modes, 0.0),
        };
        Self { config, params, encoder, decoder, trained_lengths: lengths }
    }

    /// Parameters updated when training at `lengths`.
    pub fn trainable_ids(&self, lengths: &[usize]) -> Vec<ParamId> {
        let mut ids = self.encoder.shared_ids();
        for &t in lengths {
            ids.extend(self.encoder.ln.ids(t));
        }
        ids.extend(self.decoder.ids());
        ids
    }

    /// Normalization entry used for inputs of length `tau`.
    pub fn ln_length(&self, tau: usize) -> usize {
        if self.trained_lengths.contains(&tau) {
            tau
        } else {
            nearest_length(&self.trained_lengths, tau).unwrap_or(tau)
        }
    }
}

/// Encoder output for one observation length.
#[derive(Debug, Clone, Copy)]
pub struct EncodedScene {
    /// `N × d` fused agent features.
    pub features: Var,
    pub tau: usize,
    pub n_agents: usize,
}

/// Decoder outputs on the tape.
#[derive(Debug, Clone, Copy)]
pub struct ModeOutputs {
    /// `(A·K) × (T_f·2)` offsets from each AOI's last observed position.
    pub trajectories: Var,
    /// `A × K`.
    pub logits: Var,
    pub n_aoi: usize,
    pub modes: usize,
    pub future: usize,
}

/// Detached decoder outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModePrediction {
    pub n_aoi: usize,
    pub modes: usize,
    pub future: usize,
    /// `A × K × T_f × 2`, local-frame offsets.
    pub trajectories: Vec<f64>,
    /// `A × K`.
    pub logits: Vec<f64>,
}

impl ModeOutputs {
    pub fn values(&self, tape: &Tape) -> ModePrediction {
        ModePrediction {
            n_aoi: self.n_aoi,
            modes: self.modes,
            future: self.future,
            trajectories: tape.value(self.trajectories).to_vec(),
            logits: tape.value(self.logits).to_vec(),
        }
    }
}

impl ModePrediction {
    pub fn mode(&self, aoi: usize, k: usize) -> &[f64] {
        let w = self.future * 2;
        let base = (aoi * self.modes + k) * w;
        &self.trajectories[base..base + w]
    }

    /// World-frame candidate trajectories per AOI: `[aoi][k][t]`.
    pub fn to_world(&self, ctx: &SceneContext) -> Vec<Vec<Vec<[f64; 2]>>> {
        (0..self.n_aoi)
            .map(|a| (0..self.modes).map(|k| ctx.offsets_to_world(a, self.mode(a, k))).collect())
            .collect()
    }
}

/// One scene bound to one tape. Map keys/values are shared by every length
/// encoded through the same session.
pub struct OafSession<'a> {
    pub model: &'a OafParams,
    pub ctx: &'a SceneContext,
    bound: Bound<'a>,
    memory: Option<MapMemory>,
}

impl<'a> OafSession<'a> {
    pub fn new(model: &'a OafParams, ctx: &'a SceneContext, trainable: bool) -> Self {
        Self { model, ctx, bound: Bound::new(&model.params, trainable), memory: None }
    }

    fn memory(&mut self, tape: &mut Tape) -> Result<MapMemory, NumError> {
        if let Some(m) = self.memory {
            return Ok(m);
        }
        let map = tape.constant(vec![self.ctx.n_segments, crate::scenegen::MAP_CHANNELS], self.ctx.map.clone())?;
        let m = self.model.encoder.map_memory(tape, &mut self.bound, map)?;
        self.memory = Some(m);
        Ok(m)
    }

    /// Encodes `x` (the last `τ·ΔT` observed steps, world frame).
    pub fn encode(&mut self, tape: &mut Tape, x: &History, tau: usize) -> Result<EncodedScene, ModelError> {
        let tl = self.model.config.timeline;
        if tau == 0 || tau > tl.intervals {
            return Err(ModelError::TauOutOfRange { tau, min: 1, max: tl.intervals });
        }
        if x.steps != tl.steps_for(tau) {
            return Err(ModelError::StepMismatch { tau, found: x.steps, expected: tl.steps_for(tau) });
        }
        if x.n_agents != self.ctx.n_agents {
            return Err(ModelError::Invalid(format!("{} agents, context has {}", x.n_agents, self.ctx.n_agents)));
        }
        let feats = agent_features(x, &self.ctx.frame, tl.observed());
        let agents = tape.constant(vec![x.n_agents * x.steps, STEP_FEATURES], feats)?;
        let memory = self.memory(tape)?;
        let ln_tau = self.model.ln_length(tau);
        let sites = *self.model.encoder.ln.sites(ln_tau).ok_or_else(|| ModelError::Invalid(format!("no LayerNorm entry for tau={ln_tau}")))?;
        let features = self.model.encoder.forward(tape, &mut self.bound, agents, x.n_agents, x.steps, &memory, &sites)?;
        Ok(EncodedScene { features, tau, n_agents: x.n_agents })
    }

    pub fn decode(&mut self, tape: &mut Tape, aoi_features: Var) -> Result<ModeOutputs, ModelError> {
        decode_with(tape, &mut self.bound, self.model, aoi_features)
    }

    pub fn binder(&self) -> &Binder {
        self.bound.binder()
    }

    pub fn into_binder(self) -> Binder {
        self.bound.into_binder()
    }
}

fn decode_with(tape: &mut Tape, p: &mut Bound, model: &OafParams, f: Var) -> Result<ModeOutputs, ModelError> {
    let cfg = &model.config;
    let shape = tape.shape(f).to_vec();
    if shape.len() != 2 || shape[1] != cfg.d {
        return Err(ModelError::Num(NumError::shape("decode", format!("features {shape:?}, expected (A, {})", cfg.d))));
    }
    let a = shape[0];
    let dec = &model.decoder;
    let (w, b) = (p.var(tape, dec.w_h), p.var(tape, dec.b_h));
    let h = linear(tape, f, w, b)?;
    let h = tape.tanh(h);
    let (w, b) = (p.var(tape, dec.w_traj), p.var(tape, dec.b_traj));
    let disp = linear(tape, h, w, b)?;
    let disp = tape.reshape(disp, vec![a * cfg.modes, cfg.timeline.future, 2])?;
    let traj = tape.cumsum(disp, 1)?;
    let trajectories = tape.reshape(traj, vec![a * cfg.modes, cfg.timeline.future * 2])?;
    let (w, b) = (p.var(tape, dec.w_logit), p.var(tape, dec.b_logit));
    let logits = linear(tape, h, w, b)?;
    Ok(ModeOutputs { trajectories, logits, n_aoi: a, modes: cfg.modes, future: cfg.timeline.future })
}

/// Decodes with a fresh binding of the decoder only; output depends on
/// nothing but `features` and the decoder weights.
pub fn decode(tape: &mut Tape, model: &OafParams, features: Var, trainable: bool) -> Result<ModeOutputs, ModelError> {
    let mut p = Bound::new(&model.params, trainable);
    decode_with(tape, &mut p, model, features)
}

/// Rows of `F_e` belonging to the agents of interest.
pub fn extract_aoi(tape: &mut Tape, enc: &EncodedScene, aoi_indices: &[usize]) -> Result<Var, ModelError> {
    Ok(tape.gather_rows(enc.features, aoi_indices)?)
}

/// Full-agent features `F_ag`, the distillation surface.
pub fn extract_agents(enc: &EncodedScene) -> Var {
    enc.features
}

/// Mean elementwise L1 between each length and its detached successor,
/// averaged over the adjacent pairs `(τ, τ+1)` present in `features`.
pub fn pkd_loss(tape: &mut Tape, features: &[(usize, Var)]) -> Result<Var, ModelError> {
    if features.len() < 2 {
        return Err(ModelError::Invalid(format!("distillation needs at least 2 lengths, got {}", features.len())));
    }
    let shape = tape.shape(features[0].1).to_vec();
    if let Some((t, _)) = features.iter().find(|(_, v)| tape.shape(*v) != shape.as_slice()) {
        return Err(ModelError::Num(NumError::shape("pkd_loss", format!("tau={t} shape differs from {shape:?}"))));
    }
    let mut terms = Vec::new();
    for &(tau, student) in features {
        if let Some(&(_, teacher)) = features.iter().find(|(t, _)| *t == tau + 1) {
            let teacher = tape.detach(teacher);
            let diff = tape.sub(student, teacher)?;
            let abs = tape.abs(diff);
            terms.push(tape.mean(abs));
        }
    }
    if terms.is_empty() {
        return Err(ModelError::Invalid("no adjacent length pairs for distillation".into()));
    }
    let n = terms.len();
    let stacked = tape.concat(&terms, 0)?;
    let total = tape.sum(stacked);
    Ok(tape.scale(total, 1.0 / n as f64))
}

/// Winner-take-all losses. `targets` is `A × T_f × 2` local offsets.
#[derive(Debug, Clone)]
pub struct PredictionLoss {
    pub reg: Var,
    pub cls: Var,
    pub winners: Vec<usize>,
}

/// Mode with the smallest final-step displacement; lowest index on ties.
pub fn wta_winner(candidates: &[&[f64]], target_final: [f64; 2]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (k, c) in candidates.iter().enumerate() {
        let n = c.len();
        let e = (c[n - 2] - target_final[0]).hypot(c[n - 1] - target_final[1]);
        if e < best.1 {
            best = (k, e);
        }
    }
    best.0
}

pub fn prediction_loss(tape: &mut Tape, out: &ModeOutputs, targets: &[f64]) -> Result<PredictionLoss, ModelError> {
    let w = out.future * 2;
    if targets.len() != out.n_aoi * w {
        return Err(ModelError::Num(NumError::shape(
            "prediction_loss",
            format!("targets have {} values, expected ({}, {}, 2)", targets.len(), out.n_aoi, out.future),
        )));
    }
    let values = tape.value(out.trajectories);
    let mut winners = Vec::with_capacity(out.n_aoi);
    for a in 0..out.n_aoi {
        let y = &targets[a * w..(a + 1) * w];
        let cands: Vec<&[f64]> =
            (0..out.modes).map(|k| &values[(a * out.modes + k) * w..(a * out.modes + k + 1) * w]).collect();
        winners.push(wta_winner(&cands, [y[w - 2], y[w - 1]]));
    }
    let rows: Vec<usize> = winners.iter().enumerate().map(|(a, k)| a * out.modes + k).collect();
    let chosen = tape.gather_rows(out.trajectories, &rows)?;
    let target = tape.constant(vec![out.n_aoi, w], targets.to_vec())?;
    let reg = tape.smooth_l1(chosen, target)?;
    let mut ces = Vec::with_capacity(out.n_aoi);
    for (a, &k) in winners.iter().enumerate() {
        let row = tape.slice(out.logits, 0, a, a + 1)?;
        ces.push(tape.cross_entropy(row, k)?);
    }
    let stacked = tape.concat(&ces, 0)?;
    let total = tape.sum(stacked);
    let cls = tape.scale(total, 1.0 / out.n_aoi as f64);
    Ok(PredictionLoss { reg, cls, winners })
}

/// Everything the losses need for one observation length.
#[derive(Debug, Clone)]
pub struct LengthOutput {
    pub tau: usize,
    pub encoded: EncodedScene,
    pub outputs: ModeOutputs,
    pub agent_features: Var,
}

/// Encodes and decodes `scene` once per requested length on a shared tape.
pub fn forward_all_lengths(
    tape: &mut Tape,
    session: &mut OafSession,
    scene: &Scene,
    lengths: &[usize],
) -> Result<Vec<LengthOutput>, ModelError> {
    if lengths.is_empty() {
        return Err(ModelError::Invalid("no observation lengths requested".into()));
    }
    let tl = session.model.config.timeline;
    let mut out = Vec::with_capacity(lengths.len());
    for &tau in lengths {
        if tau == 0 || tau > tl.intervals {
            return Err(ModelError::TauOutOfRange { tau, min: 1, max: tl.intervals });
        }
        let x = truncate_history(scene, &TruncationSpec::for_timeline(&tl, tau))?;
        let encoded = session.encode(tape, &x, tau)?;
        let aoi = extract_aoi(tape, &encoded, &scene.aoi_indices)?;
        let outputs = session.decode(tape, aoi)?;
        out.push(LengthOutput { tau, encoded, outputs, agent_features: extract_agents(&encoded) });
    }
    Ok(out)
}

/// Inference-only prediction for `x` at length `tau`.
pub fn predict(model: &OafParams, ctx: &SceneContext, x: &History, tau: usize) -> Result<ModePrediction, ModelError> {
    let mut tape = Tape::new();
    let mut s = OafSession::new(model, ctx, false);
    let enc = s.encode(&mut tape, x, tau)?;
    let aoi = extract_aoi(&mut tape, &enc, &ctx.aoi_indices)?;
    let out = s.decode(&mut tape, aoi)?;
    Ok(out.values(&tape))
}
