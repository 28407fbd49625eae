//! Three-stage protocol: multi-length forecaster pretraining with scheduled
//! distillation, standalone backfilling training, and finetuning the
//! forecaster on backfilled inputs with the backfiller frozen.

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_file, save_checkpoint, save_checkpoint_file, Checkpoint, CheckpointMeta, ModelKind,
    CHECKPOINT_VERSION,
};

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{ModelError, SceneContext};
use crate::numkit::{adamw_step, clip_global_norm, cosine_alpha, cosine_lr, Binder, NumError, OptimState, ParamId, ParamSet, Tape};
use crate::oaf::{extract_aoi, forward_all_lengths, pkd_loss, prediction_loss, OafConfig, OafParams, OafSession};
use crate::scenegen::{truncate_history, Scene, SceneError, TruncationSpec};
use crate::tbm::{backfill, backfill_from_outputs, prefix_targets, tbm_loss, TbmConfig, TbmParams, TbmSession};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset does not fit the model: {0}")]
    Data(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checksum mismatch in checkpoint")]
    Checksum,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: u8,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub lengths: Vec<usize>,
    pub seed: u64,
    /// Stage 1 only: add the scheduled distillation term.
    pub pkd: bool,
    pub clip_norm: f64,
    pub lr_schedule: LrSchedule,
    pub train_data: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            epochs: 30,
            lr: 6e-4,
            weight_decay: 0.01,
            batch_size: 16,
            lengths: vec![1, 2, 3, 4],
            seed: 0,
            pkd: true,
            clip_norm: 5.0,
            lr_schedule: LrSchedule::Cosine,
            train_data: None,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, intervals: usize) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(1..=3).contains(&self.stage) {
            return bad(format!("stage {} not in 1..=3", self.stage));
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) || !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("lr {} / weight_decay {}", self.lr, self.weight_decay));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm {} must be > 0", self.clip_norm));
        }
        if self.lengths.is_empty() {
            return bad("lengths must be non-empty".into());
        }
        if let Some(t) = self.lengths.iter().find(|&&t| t == 0 || t > intervals) {
            return bad(format!("length {t} outside 1..={intervals}"));
        }
        if self.lengths.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("lengths {:?} must be strictly increasing", self.lengths));
        }
        if self.stage == 1 && self.pkd && !has_adjacent_pair(&self.lengths) {
            return bad(format!("distillation needs two consecutive lengths, got {:?}", self.lengths));
        }
        if self.stage == 2 && !self.lengths.iter().any(|&t| t < intervals) {
            return bad(format!("stage 2 needs a length below {intervals}, got {:?}", self.lengths));
        }
        Ok(())
    }
}

pub fn has_adjacent_pair(lengths: &[usize]) -> bool {
    lengths.iter().any(|t| lengths.contains(&(t + 1)))
}

/// One JSON-lines record per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: u8,
    pub epoch: usize,
    pub alpha: f64,
    pub lr: f64,
    /// Epoch means over scenes.
    pub l_f: f64,
    pub l_reg: f64,
    pub l_cls: f64,
    pub total: f64,
    pub clipped_batches: usize,
    /// Stage 3: samples routed through the backfiller.
    pub backfilled: usize,
    /// Kept out of the serialized log.
    #[serde(skip, default)]
    pub wall_time_s: f64,
}

pub fn write_log<W: Write>(mut w: W, log: &[EpochLog]) -> std::io::Result<()> {
    for e in log {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    pub model: M,
    pub optim: OptimState,
    pub log: Vec<EpochLog>,
}

struct Prepared {
    ctx: SceneContext,
    targets: Vec<f64>,
}

fn prepare(scenes: &[Scene]) -> Result<Vec<Prepared>, TrainError> {
    scenes
        .iter()
        .map(|s| {
            let full = s.full_history();
            let ctx = SceneContext::new(s.timeline, &full, &s.map, &s.aoi_indices)?;
            let futures: Vec<_> = s.aoi_indices.iter().map(|&a| s.future_positions(a)).collect();
            let targets = ctx.local_targets(&futures);
            Ok(Prepared { ctx, targets })
        })
        .collect()
}

fn check_dataset(scenes: &[Scene], timeline: crate::scenegen::Timeline) -> Result<(), TrainError> {
    if scenes.is_empty() {
        return Err(TrainError::Data("empty training set".into()));
    }
    if let Some(s) = scenes.iter().find(|s| s.timeline != timeline) {
        return Err(TrainError::Data(format!("scene {} timeline {:?} vs model {:?}", s.id, s.timeline, timeline)));
    }
    Ok(())
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    match cfg.lr_schedule {
        LrSchedule::Constant => cfg.lr,
        LrSchedule::Cosine => cosine_lr(cfg.lr, epoch, cfg.epochs),
    }
}

/// Clip and step over `ids`; parameters without a gradient get zeros.
fn optimizer_step(params: &mut ParamSet, ids: &[ParamId], optim: &mut OptimState, clip: f64) -> Result<bool, TrainError> {
    let mut list = params.select_mut(ids);
    for t in list.iter_mut() {
        if t.grad().is_none() {
            let z = vec![0.0; t.len()];
            t.set_grad(Some(z))?;
        }
    }
    let norm = clip_global_norm(&mut list, clip);
    adamw_step(&mut list, optim)?;
    Ok(norm > clip)
}

#[derive(Default)]
struct Sums {
    l_f: f64,
    l_reg: f64,
    l_cls: f64,
    total: f64,
    n: usize,
}

impl Sums {
    fn add(&mut self, l_f: f64, l_reg: f64, l_cls: f64, total: f64) {
        self.l_f += l_f;
        self.l_reg += l_reg;
        self.l_cls += l_cls;
        self.total += total;
        self.n += 1;
    }

    fn log(&self, stage: u8, epoch: usize, alpha: f64, lr: f64, clipped: usize, backfilled: usize, t0: Instant) -> EpochLog {
        let n = self.n as f64;
        EpochLog {
            stage,
            epoch,
            alpha,
            lr,
            l_f: self.l_f / n,
            l_reg: self.l_reg / n,
            l_cls: self.l_cls / n,
            total: self.total / n,
            clipped_batches: clipped,
            backfilled,
            wall_time_s: t0.elapsed().as_secs_f64(),
        }
    }
}

/// Per-scene stage-1 objective `α·L_f + Σ_τ (L_reg^τ + L_cls^τ)`; returns the
/// component values and the bound parameters after backward.
pub fn stage1_scene_loss(
    model: &OafParams,
    ctx: &SceneContext,
    scene: &Scene,
    targets: &[f64],
    lengths: &[usize],
    alpha: f64,
    pkd: bool,
) -> Result<(Tape, Binder, [f64; 4]), TrainError> {
    let mut tape = Tape::new();
    let mut sess = OafSession::new(model, ctx, true);
    let outs = forward_all_lengths(&mut tape, &mut sess, scene, lengths)?;
    let mut pred_terms = Vec::with_capacity(2 * outs.len());
    let (mut reg, mut cls) = (0.0, 0.0);
    for o in &outs {
        let l = prediction_loss(&mut tape, &o.outputs, targets)?;
        reg += tape.scalar_value(l.reg);
        cls += tape.scalar_value(l.cls);
        pred_terms.push(l.reg);
        pred_terms.push(l.cls);
    }
    let stacked = tape.concat(&pred_terms, 0)?;
    let mut total = tape.sum(stacked);
    let mut lf = 0.0;
    if pkd && has_adjacent_pair(lengths) {
        let feats: Vec<_> = outs.iter().map(|o| (o.tau, o.agent_features)).collect();
        let l = pkd_loss(&mut tape, &feats)?;
        lf = tape.scalar_value(l);
        let weighted = tape.scale(l, alpha);
        total = tape.add(total, weighted)?;
    }
    let total_value = tape.scalar_value(total);
    tape.backward(total)?;
    Ok((tape, sess.into_binder(), [lf, reg, cls, total_value]))
}

pub fn stage1_pretrain(
    cfg: &TrainConfig,
    model_cfg: OafConfig,
    scenes: &[Scene],
) -> Result<TrainOutcome<OafParams>, TrainError> {
    stage1_from(cfg, OafParams::new(model_cfg, cfg.seed), scenes)
}

/// Stage 1 starting from given parameters.
pub fn stage1_from(cfg: &TrainConfig, mut model: OafParams, scenes: &[Scene]) -> Result<TrainOutcome<OafParams>, TrainError> {
    let h = model.config.timeline.intervals;
    cfg.validate(h)?;
    check_dataset(scenes, model.config.timeline)?;
    let prepared = prepare(scenes)?;
    let ids = model.trainable_ids(&cfg.lengths);
    let mut optim = OptimState::new(cfg.lr, cfg.weight_decay);
    let mut log = Vec::with_capacity(cfg.epochs);
    let t0 = Instant::now();
    for epoch in 0..cfg.epochs {
        let alpha = cosine_alpha(epoch, cfg.epochs)?;
        optim.lr = lr_at(cfg, epoch);
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch));
        let mut sums = Sums::default();
        let mut clipped = 0;
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let p = &prepared[i];
                let (tape, binder, [lf, reg, cls, total]) =
                    stage1_scene_loss(&model, &p.ctx, &scenes[i], &p.targets, &cfg.lengths, alpha, cfg.pkd)?;
                binder.accumulate_into(&tape, &mut model.params, scale)?;
                sums.add(lf, reg, cls, total);
            }
            clipped += optimizer_step(&mut model.params, &ids, &mut optim, cfg.clip_norm)? as usize;
        }
        log.push(sums.log(1, epoch, alpha, optim.lr, clipped, 0, t0));
    }
    model.trained_lengths = cfg.lengths.clone();
    Ok(TrainOutcome { model, optim, log })
}

pub fn stage2_train_tbm(cfg: &TrainConfig, model_cfg: TbmConfig, scenes: &[Scene]) -> Result<TrainOutcome<TbmParams>, TrainError> {
    let mut model = TbmParams::new(model_cfg, cfg.seed)?;
    let h = model.config.timeline.intervals;
    cfg.validate(h)?;
    check_dataset(scenes, model.config.timeline)?;
    let lengths: Vec<usize> = cfg.lengths.iter().copied().filter(|&t| t < h).collect();
    let prepared = prepare(scenes)?;
    let fulls: Vec<_> = scenes.iter().map(Scene::full_history).collect();
    let ids = model.trainable_ids(&lengths);
    let mut optim = OptimState::new(cfg.lr, cfg.weight_decay);
    let mut log = Vec::with_capacity(cfg.epochs);
    let t0 = Instant::now();
    for epoch in 0..cfg.epochs {
        optim.lr = lr_at(cfg, epoch);
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch));
        let mut sums = Sums::default();
        let mut clipped = 0;
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let ctx = &prepared[i].ctx;
                let mut tape = Tape::new();
                let mut sess = TbmSession::new(&model, ctx, true);
                let mut terms = Vec::with_capacity(2 * lengths.len());
                let (mut reg, mut cls) = (0.0, 0.0);
                for &tau in &lengths {
                    let x = truncate_history(&scenes[i], &TruncationSpec::for_timeline(&model.config.timeline, tau))?;
                    let f = sess.encode(&mut tape, &x, tau)?;
                    let out = sess.decode(&mut tape, f, &x, tau)?;
                    let truth = prefix_targets(&fulls[i], ctx, out.steps);
                    let l = tbm_loss(&mut tape, &out, &truth)?;
                    reg += tape.scalar_value(l.reg);
                    cls += tape.scalar_value(l.cls);
                    terms.push(l.reg);
                    terms.push(l.cls);
                }
                let stacked = tape.concat(&terms, 0)?;
                let total = tape.sum(stacked);
                let tv = tape.scalar_value(total);
                tape.backward(total)?;
                sess.into_binder().accumulate_into(&tape, &mut model.params, scale)?;
                sums.add(0.0, reg, cls, tv);
            }
            clipped += optimizer_step(&mut model.params, &ids, &mut optim, cfg.clip_norm)? as usize;
        }
        log.push(sums.log(2, epoch, 0.0, optim.lr, clipped, 0, t0));
    }
    Ok(TrainOutcome { model, optim, log })
}

/// Stage 3: each scene draws `τ` uniformly from `cfg.lengths`; short inputs
/// are completed by the frozen backfiller and the forecaster is trained at
/// full length only.
pub fn stage3_finetune(
    cfg: &TrainConfig,
    mut model: OafParams,
    tbm: &TbmParams,
    scenes: &[Scene],
) -> Result<TrainOutcome<OafParams>, TrainError> {
    let tl = model.config.timeline;
    let h = tl.intervals;
    cfg.validate(h)?;
    check_dataset(scenes, tl)?;
    if tbm.config.timeline != tl {
        return Err(TrainError::Data(format!("backfiller timeline {:?} vs forecaster {:?}", tbm.config.timeline, tl)));
    }
    let prepared = prepare(scenes)?;
    let ids = model.trainable_ids(&[h]);
    let mut optim = OptimState::new(cfg.lr, cfg.weight_decay);
    let mut log = Vec::with_capacity(cfg.epochs);
    let t0 = Instant::now();
    for epoch in 0..cfg.epochs {
        optim.lr = lr_at(cfg, epoch);
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut rng);
        let taus: Vec<usize> = order.iter().map(|_| cfg.lengths[rng.random_range(0..cfg.lengths.len())]).collect();
        let mut sums = Sums::default();
        let (mut clipped, mut backfilled) = (0, 0);
        for (batch, batch_taus) in order.chunks(cfg.batch_size).zip(taus.chunks(cfg.batch_size)) {
            let scale = 1.0 / batch.len() as f64;
            for (&i, &tau) in batch.iter().zip(batch_taus) {
                let p = &prepared[i];
                let x = truncate_history(&scenes[i], &TruncationSpec::for_timeline(&tl, tau))?;
                let input = if tau < h {
                    backfilled += 1;
                    backfill(tbm, &p.ctx, &x, tau)?.completed
                } else {
                    x
                };
                let (tape, binder, reg, cls, total) = finetune_scene_loss(&model, &p.ctx, &input, &p.targets)?;
                binder.accumulate_into(&tape, &mut model.params, scale)?;
                sums.add(0.0, reg, cls, total);
            }
            clipped += optimizer_step(&mut model.params, &ids, &mut optim, cfg.clip_norm)? as usize;
        }
        log.push(sums.log(3, epoch, 0.0, optim.lr, clipped, backfilled, t0));
    }
    Ok(TrainOutcome { model, optim, log })
}

#[allow(clippy::type_complexity)]
fn finetune_scene_loss(
    model: &OafParams,
    ctx: &SceneContext,
    full: &crate::scenegen::History,
    targets: &[f64],
) -> Result<(Tape, Binder, f64, f64, f64), TrainError> {
    let mut tape = Tape::new();
    let mut sess = OafSession::new(model, ctx, true);
    let h = model.config.timeline.intervals;
    let enc = sess.encode(&mut tape, full, h)?;
    let aoi = extract_aoi(&mut tape, &enc, &ctx.aoi_indices)?;
    let out = sess.decode(&mut tape, aoi)?;
    let l = prediction_loss(&mut tape, &out, targets)?;
    let (reg, cls) = (tape.scalar_value(l.reg), tape.scalar_value(l.cls));
    let total = tape.add(l.reg, l.cls)?;
    let tv = tape.scalar_value(total);
    tape.backward(total)?;
    Ok((tape, sess.into_binder(), reg, cls, tv))
}

/// Runs the stage-3 objective for one scene with the backfiller bound as
/// trainable leaves on the same tape, and returns `∂loss/∂θ` for every
/// backfiller parameter.
pub fn stage3_backfiller_gradients(
    model: &OafParams,
    tbm: &TbmParams,
    scene: &Scene,
    tau: usize,
) -> Result<Vec<Vec<f64>>, TrainError> {
    let tl = model.config.timeline;
    let prepared = prepare(std::slice::from_ref(scene))?.remove(0);
    let x = truncate_history(scene, &TruncationSpec::for_timeline(&tl, tau))?;
    let mut tape = Tape::new();
    let mut tsess = TbmSession::new(tbm, &prepared.ctx, true);
    let f = tsess.encode(&mut tape, &x, tau)?;
    let out = tsess.decode(&mut tape, f, &x, tau)?;
    let completed = backfill_from_outputs(&tape, &out, &prepared.ctx, &x, tl.observed())?.completed;
    let mut osess = OafSession::new(model, &prepared.ctx, true);
    let enc = osess.encode(&mut tape, &completed, tl.intervals)?;
    let aoi = extract_aoi(&mut tape, &enc, &prepared.ctx.aoi_indices)?;
    let pred = osess.decode(&mut tape, aoi)?;
    let l = prediction_loss(&mut tape, &pred, &prepared.targets)?;
    let total = tape.add(l.reg, l.cls)?;
    tape.backward(total)?;
    let binder = tsess.into_binder();
    Ok(tbm
        .params
        .ids()
        .map(|id| binder.var(id).map(|v| tape.grad_or_zeros(v)).unwrap_or_else(|| vec![0.0; tbm.params.get(id).len()]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_scene, GeneratorConfig};

    fn small() -> (OafConfig, TbmConfig, Vec<Scene>) {
        let scenes = (0..8).map(|i| generate_scene(i, &GeneratorConfig::default()).unwrap()).collect();
        (OafConfig { d: 16, ..OafConfig::default() }, TbmConfig { d: 16, ..TbmConfig::default() }, scenes)
    }

    fn cfg(stage: u8, epochs: usize) -> TrainConfig {
        TrainConfig { stage, epochs, batch_size: 4, seed: 5, ..TrainConfig::default() }
    }

    #[test]
    fn config_validation() {
        assert!(cfg(1, 1).validate(4).is_ok());
        assert!(TrainConfig { epochs: 0, ..cfg(1, 1) }.validate(4).is_err());
        assert!(TrainConfig { lengths: vec![], ..cfg(1, 1) }.validate(4).is_err());
        assert!(TrainConfig { lengths: vec![4], ..cfg(1, 1) }.validate(4).is_err());
        assert!(TrainConfig { lengths: vec![4], pkd: false, ..cfg(1, 1) }.validate(4).is_ok());
        assert!(TrainConfig { lengths: vec![1, 3], ..cfg(1, 1) }.validate(4).is_err());
        assert!(TrainConfig { lengths: vec![4], ..cfg(2, 1) }.validate(4).is_err());
        assert!(TrainConfig { lengths: vec![0, 1], ..cfg(1, 1) }.validate(4).is_err());
        assert!(TrainConfig { lengths: vec![2, 1], ..cfg(1, 1) }.validate(4).is_err());
    }

    #[test]
    fn first_epoch_is_pure_prediction_loss() {
        let (oc, _, scenes) = small();
        let out = stage1_pretrain(&cfg(1, 2), oc, &scenes).unwrap();
        let e0 = &out.log[0];
        assert_eq!(e0.alpha, 0.0);
        assert!(e0.l_f > 0.0);
        assert!((e0.total - (e0.l_reg + e0.l_cls)).abs() <= 1e-12);
        for e in &out.log {
            assert!((e.total - (e.alpha * e.l_f + e.l_reg + e.l_cls)).abs() <= 1e-12);
        }
    }

    #[test]
    fn single_length_runs_without_distillation() {
        let (oc, _, scenes) = small();
        let c = TrainConfig { lengths: vec![4], pkd: false, ..cfg(1, 1) };
        let out = stage1_pretrain(&c, oc, &scenes).unwrap();
        assert_eq!(out.log[0].l_f, 0.0);
        assert_eq!(out.model.trained_lengths, vec![4]);
    }

    #[test]
    fn stage1_is_deterministic() {
        let (oc, _, scenes) = small();
        let a = stage1_pretrain(&cfg(1, 2), oc, &scenes).unwrap();
        let b = stage1_pretrain(&cfg(1, 2), oc, &scenes).unwrap();
        let (va, vb) = (a.model.params.flat_values(), b.model.params.flat_values());
        assert!(va.iter().zip(&vb).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.optim, b.optim);
    }

    #[test]
    fn frozen_backfiller_gets_no_gradient_and_is_untouched() {
        let (oc, tc, scenes) = small();
        let tbm = stage2_train_tbm(&cfg(2, 1), tc, &scenes).unwrap().model;
        let oaf = OafParams::new(oc, 1);
        let grads = stage3_backfiller_gradients(&oaf, &tbm, &scenes[0], 1).unwrap();
        assert!(grads.iter().flatten().all(|g| *g == 0.0));
        let before = tbm.params.flat_values();
        let out = stage3_finetune(&cfg(3, 2), oaf, &tbm, &scenes).unwrap();
        assert_eq!(before, tbm.params.flat_values());
        assert!(out.log.iter().all(|e| e.backfilled <= scenes.len()));
        let full_only = stage3_finetune(&TrainConfig { lengths: vec![4], ..cfg(3, 1) }, out.model, &tbm, &scenes).unwrap();
        assert_eq!(full_only.log[0].backfilled, 0);
    }
}
