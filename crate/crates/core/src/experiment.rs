//! The variable-length comparison: reference, ablation and full models trained
//! on one synthetic split and scored on the held-out part.

use serde::{Deserialize, Serialize};

use crate::encoder::SceneContext;
use crate::evalkit::{evaluate_variable_length, EvalError, MetricReport, ModelBundle};
use crate::oaf::{OafConfig, OafParams};
use crate::scenegen::{generate_dataset, split_dataset, truncate_history, GeneratorConfig, Scene, TruncationSpec};
use crate::tbm::{backfill, prefix_error, TbmConfig, TbmParams};
use crate::train::{
    save_checkpoint, stage1_pretrain, stage2_train_tbm, stage3_finetune, Checkpoint, EpochLog, TrainConfig, TrainError,
};

pub const ORI: &str = "ori";
pub const PS: &str = "ps";
pub const PS_PKD: &str = "ps+pkd";
pub const TAPD: &str = "tapd";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenes: usize,
    pub seed: u64,
    pub val_fraction: f64,
    pub generator: GeneratorConfig,
    pub d: usize,
    pub modes: usize,
    pub rec_modes: usize,
    pub train: TrainConfig,
    pub stage3_epochs: usize,
    /// Also train the length-parallel model without distillation.
    pub ablation: bool,
    pub taus: Vec<usize>,
    pub ks: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenes: 2000,
            seed: 0,
            val_fraction: 0.2,
            generator: GeneratorConfig::default(),
            d: 64,
            modes: 6,
            rec_modes: 3,
            train: TrainConfig::default(),
            stage3_epochs: 30,
            ablation: true,
            taus: vec![1, 2, 3, 4],
            ks: vec![1, 6],
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Scene(#[from] crate::scenegen::SceneError),
    #[error(transparent)]
    Model(#[from] crate::encoder::ModelError),
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub report: MetricReport,
    /// `(τ, mean prefix error)` on the held-out scenes, τ < H.
    pub reconstruction: Vec<(usize, f64)>,
    pub logs: Vec<(String, Vec<EpochLog>)>,
    pub tbm_before_finetune: Vec<u8>,
    pub tbm_after_finetune: Vec<u8>,
    /// Distilled forecaster parameters around backfiller training.
    pub oaf_before_backfiller: Vec<u8>,
    pub oaf_after_backfiller: Vec<u8>,
    pub ori: OafParams,
    pub tapd: OafParams,
    pub tbm: TbmParams,
}

/// Mean prefix error of the backfiller per `τ < H`.
pub fn reconstruction_errors(tbm: &TbmParams, scenes: &[Scene]) -> Result<Vec<(usize, f64)>, ExperimentError> {
    let tl = tbm.config.timeline;
    let mut out = Vec::new();
    for tau in 1..tl.intervals {
        let p = tbm.config.prefix_steps(tau);
        let mut sum = 0.0;
        for s in scenes {
            let full = s.full_history();
            let ctx = SceneContext::new(tl, &full, &s.map, &s.aoi_indices)?;
            let x = truncate_history(s, &TruncationSpec::for_timeline(&tl, tau))?;
            let r = backfill(tbm, &ctx, &x, tau)?;
            let truth = crate::scenegen::History::new(
                full.n_agents,
                p,
                (0..full.n_agents).flat_map(|a| full.agent(a)[..p * crate::scenegen::AGENT_CHANNELS].to_vec()).collect(),
            );
            sum += prefix_error(&r.prefix, &truth);
        }
        out.push((tau, sum / scenes.len() as f64));
    }
    Ok(out)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult, ExperimentError> {
    let all = generate_dataset(cfg.scenes, cfg.seed, &cfg.generator)?;
    let (train, val) = split_dataset(all, [1.0 - cfg.val_fraction, cfg.val_fraction], cfg.seed)?;
    let tl = cfg.generator.timeline;
    let h = tl.intervals;
    let oaf_cfg = OafConfig { timeline: tl, d: cfg.d, modes: cfg.modes };
    let tbm_cfg = TbmConfig { timeline: tl, d: cfg.d, modes: cfg.rec_modes };
    let base = TrainConfig { seed: cfg.seed, ..cfg.train.clone() };
    let mut logs = Vec::new();

    let ori_cfg = TrainConfig { stage: 1, lengths: vec![h], pkd: false, ..base.clone() };
    let ori = stage1_pretrain(&ori_cfg, oaf_cfg, &train)?;
    logs.push((ORI.to_string(), ori.log));

    let ps = if cfg.ablation {
        let c = TrainConfig { stage: 1, pkd: false, ..base.clone() };
        let o = stage1_pretrain(&c, oaf_cfg, &train)?;
        logs.push((PS.to_string(), o.log));
        Some(o.model)
    } else {
        None
    };

    let pkd_cfg = TrainConfig { stage: 1, pkd: true, ..base.clone() };
    let pkd = stage1_pretrain(&pkd_cfg, oaf_cfg, &train)?;
    logs.push((PS_PKD.to_string(), pkd.log));

    let oaf_before_backfiller = save_checkpoint(&Checkpoint::from_oaf(1, &pkd.model, &pkd.optim, &pkd_cfg))?;
    let tbm_train = TrainConfig { stage: 2, pkd: false, lengths: (1..h).collect(), ..base.clone() };
    let tbm = stage2_train_tbm(&tbm_train, tbm_cfg, &train)?;
    logs.push(("tbm".to_string(), tbm.log.clone()));
    let tbm_ckpt = Checkpoint::from_tbm(2, &tbm.model, &tbm.optim, &tbm_train);
    let tbm_before_finetune = save_checkpoint(&tbm_ckpt)?;
    let oaf_after_backfiller = save_checkpoint(&Checkpoint::from_oaf(1, &pkd.model, &pkd.optim, &pkd_cfg))?;

    let ft_cfg = TrainConfig { stage: 3, pkd: false, epochs: cfg.stage3_epochs, ..base.clone() };
    let ft = stage3_finetune(&ft_cfg, pkd.model.clone(), &tbm.model, &train)?;
    logs.push((TAPD.to_string(), ft.log));
    let tbm_after_finetune = save_checkpoint(&Checkpoint::from_tbm(2, &tbm.model, &tbm.optim, &tbm_train))?;

    let mut report = evaluate_variable_length(ORI, &ModelBundle::Oaf(&ori.model), &val, &cfg.taus, &cfg.ks)?;
    if let Some(ps) = &ps {
        report.extend(evaluate_variable_length(PS, &ModelBundle::Oaf(ps), &val, &cfg.taus, &cfg.ks)?);
    }
    report.extend(evaluate_variable_length(PS_PKD, &ModelBundle::Oaf(&pkd.model), &val, &cfg.taus, &cfg.ks)?);
    report.extend(evaluate_variable_length(TAPD, &ModelBundle::OafWithTbm(&ft.model, &tbm.model), &val, &cfg.taus, &cfg.ks)?);
    let reconstruction = reconstruction_errors(&tbm.model, &val)?;

    Ok(ExperimentResult {
        report,
        reconstruction,
        logs,
        tbm_before_finetune,
        tbm_after_finetune,
        oaf_before_backfiller,
        oaf_after_backfiller,
        ori: ori.model,
        tapd: ft.model,
        tbm: tbm.model,
    })
}
