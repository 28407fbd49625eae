//! Displacement metrics, the fixed-end-time variable-length protocol and
//! report rendering.

mod report;

pub use report::{parse_csv, render_csv, render_markdown, render_report, render_svg, Metric, ReportFormat, CSV_HEADER};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{ModelError, SceneContext};
use crate::oaf::{predict, OafParams};
use crate::scenegen::{truncate_history, Scene, TruncationSpec};
use crate::tbm::{backfill, TbmParams};

pub const MISS_THRESHOLD: f64 = 2.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("missing report row: method {method}, tau {tau}, K {k}")]
    MissingRow { method: String, tau: usize, k: usize },
    #[error("unknown report format {0:?} (expected csv, markdown or svg)")]
    UnknownFormat(String),
    #[error("malformed csv line {line}: {detail}")]
    Csv { line: usize, detail: String },
    #[error("incompatible model and dataset: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Scene(#[from] crate::scenegen::SceneError),
}

pub type Trajectory = [[f64; 2]];

fn same_len(a: &Trajectory, b: &Trajectory) -> Result<(), EvalError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(EvalError::Shape(format!("prediction has {} steps, ground truth {}", a.len(), b.len())));
    }
    Ok(())
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Mean per-step Euclidean distance.
pub fn ade(pred: &Trajectory, gt: &Trajectory) -> Result<f64, EvalError> {
    same_len(pred, gt)?;
    let mut s = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        s += dist(*p, *g);
    }
    Ok(s / pred.len() as f64)
}

/// Final-step Euclidean distance.
pub fn fde(pred: &Trajectory, gt: &Trajectory) -> Result<f64, EvalError> {
    same_len(pred, gt)?;
    Ok(dist(pred[pred.len() - 1], gt[gt.len() - 1]))
}

fn min_over<F>(preds: &[Vec<[f64; 2]>], gt: &Trajectory, f: F) -> Result<f64, EvalError>
where
    F: Fn(&Trajectory, &Trajectory) -> Result<f64, EvalError>,
{
    if preds.is_empty() {
        return Err(EvalError::Empty("candidate set"));
    }
    let mut best = f64::INFINITY;
    for p in preds {
        best = best.min(f(p, gt)?);
    }
    Ok(best)
}

pub fn min_ade_k(preds: &[Vec<[f64; 2]>], gt: &Trajectory) -> Result<f64, EvalError> {
    min_over(preds, gt, ade)
}

pub fn min_fde_k(preds: &[Vec<[f64; 2]>], gt: &Trajectory) -> Result<f64, EvalError> {
    min_over(preds, gt, fde)
}

/// Fraction of samples whose best final displacement is strictly above `threshold`.
pub fn miss_rate_k(preds: &[Vec<Vec<[f64; 2]>>], gts: &[Vec<[f64; 2]>], threshold: f64) -> Result<f64, EvalError> {
    if preds.is_empty() {
        return Err(EvalError::Empty("sample set"));
    }
    if preds.len() != gts.len() {
        return Err(EvalError::Shape(format!("{} predictions for {} ground truths", preds.len(), gts.len())));
    }
    let mut misses = 0usize;
    for (p, g) in preds.iter().zip(gts) {
        if min_fde_k(p, g)? > threshold {
            misses += 1;
        }
    }
    Ok(misses as f64 / preds.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub tau: usize,
    pub k: usize,
    pub min_ade: f64,
    pub min_fde: f64,
    pub mr: f64,
    pub n_samples: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn row(&self, method: &str, tau: usize, k: usize) -> Result<&MetricRow, EvalError> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.tau == tau && r.k == k)
            .ok_or_else(|| EvalError::MissingRow { method: method.to_string(), tau, k })
    }

    pub fn methods(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.method) {
                out.push(r.method.clone());
            }
        }
        out
    }

    pub fn taus(&self) -> Vec<usize> {
        let mut t: Vec<usize> = self.rows.iter().map(|r| r.tau).collect();
        t.sort_unstable();
        t.dedup();
        t
    }

    pub fn ks(&self) -> Vec<usize> {
        let mut k: Vec<usize> = self.rows.iter().map(|r| r.k).collect();
        k.sort_unstable();
        k.dedup();
        k
    }

    pub fn extend(&mut self, other: MetricReport) {
        self.rows.extend(other.rows);
    }
}

/// minFDE(τ_short) − minFDE(τ_full) for one method.
pub fn gap_statistics(report: &MetricReport, method: &str, tau_short: usize, tau_full: usize, k: usize) -> Result<f64, EvalError> {
    Ok(report.row(method, tau_short, k)?.min_fde - report.row(method, tau_full, k)?.min_fde)
}

/// gap(method) / gap(reference).
pub fn gap_ratio(
    report: &MetricReport,
    method: &str,
    reference: &str,
    tau_short: usize,
    tau_full: usize,
    k: usize,
) -> Result<f64, EvalError> {
    Ok(gap_statistics(report, method, tau_short, tau_full, k)? / gap_statistics(report, reference, tau_short, tau_full, k)?)
}

/// Inference path under evaluation.
pub enum ModelBundle<'a> {
    /// Forecaster applied directly at every length.
    Oaf(&'a OafParams),
    /// Backfill short inputs, then forecast at full length.
    OafWithTbm(&'a OafParams, &'a TbmParams),
    /// One forecaster per length, each used at its own length.
    Isolated(Vec<(usize, &'a OafParams)>),
    /// Returns the ground truth as every candidate.
    Oracle,
}

/// Indices of the `k` highest logits, ties to the lower index.
pub fn top_k(logits: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Per AOI: world-frame candidate trajectories (top `k` by logit).
fn bundle_candidates(
    bundle: &ModelBundle,
    scene: &Scene,
    ctx: &SceneContext,
    tau: usize,
    k: usize,
) -> Result<Vec<Vec<Vec<[f64; 2]>>>, EvalError> {
    let tl = scene.timeline;
    let h = tl.intervals;
    let x = truncate_history(scene, &TruncationSpec::for_timeline(&tl, tau))?;
    let (pred, oaf) = match bundle {
        ModelBundle::Oracle => {
            return Ok(scene.aoi_indices.iter().map(|&a| vec![scene.future_positions(a); k]).collect());
        }
        ModelBundle::Oaf(m) => (predict(m, ctx, &x, tau)?, *m),
        ModelBundle::OafWithTbm(m, t) => {
            if tau < h {
                let completed = backfill(t, ctx, &x, tau)?.completed;
                (predict(m, ctx, &completed, h)?, *m)
            } else {
                (predict(m, ctx, &x, h)?, *m)
            }
        }
        ModelBundle::Isolated(models) => {
            let m = models
                .iter()
                .find(|(t, _)| *t == tau)
                .map(|(_, m)| *m)
                .ok_or_else(|| EvalError::Incompatible(format!("no isolated model for tau={tau}")))?;
            (predict(m, ctx, &x, tau)?, m)
        }
    };
    if k > oaf.config.modes {
        return Err(EvalError::Incompatible(format!("K={k} exceeds the model's {} modes", oaf.config.modes)));
    }
    let world = pred.to_world(ctx);
    Ok((0..pred.n_aoi)
        .map(|a| {
            let logits = &pred.logits[a * pred.modes..(a + 1) * pred.modes];
            top_k(logits, k).into_iter().map(|i| world[a][i].clone()).collect()
        })
        .collect())
}

/// Rows for every `(τ, K)`: truncate each scene to `τ` (end time fixed), run the
/// bundle and average over AOIs in scene order.
pub fn evaluate_variable_length(
    method: &str,
    bundle: &ModelBundle,
    scenes: &[Scene],
    taus: &[usize],
    ks: &[usize],
) -> Result<MetricReport, EvalError> {
    if scenes.is_empty() {
        return Err(EvalError::Empty("evaluation set"));
    }
    if taus.is_empty() || ks.is_empty() {
        return Err(EvalError::Empty("tau or K set"));
    }
    let timeline = scenes[0].timeline;
    let model_timeline = match bundle {
        ModelBundle::Oaf(m) | ModelBundle::OafWithTbm(m, _) => Some(m.config.timeline),
        ModelBundle::Isolated(v) => v.first().map(|(_, m)| m.config.timeline),
        ModelBundle::Oracle => None,
    };
    if let Some(s) = scenes.iter().find(|s| s.timeline != timeline || model_timeline.is_some_and(|t| t != s.timeline)) {
        return Err(EvalError::Incompatible(format!("scene {} timeline {:?} vs model {:?}", s.id, s.timeline, model_timeline)));
    }
    if let ModelBundle::OafWithTbm(m, t) = bundle {
        if t.config.timeline != m.config.timeline {
            return Err(EvalError::Incompatible("backfiller and forecaster timelines differ".into()));
        }
    }
    let kmax = *ks.iter().max().expect("non-empty");
    let contexts: Vec<SceneContext> = scenes
        .iter()
        .map(|s| SceneContext::new(s.timeline, &s.full_history(), &s.map, &s.aoi_indices))
        .collect::<Result<_, _>>()?;
    let mut report = MetricReport::default();
    for &tau in taus {
        let mut cands = Vec::new();
        let mut gts = Vec::new();
        for (s, ctx) in scenes.iter().zip(&contexts) {
            let c = bundle_candidates(bundle, s, ctx, tau, kmax)?;
            for (a, cand) in s.aoi_indices.iter().zip(c) {
                cands.push(cand);
                gts.push(s.future_positions(*a));
            }
        }
        for &k in ks {
            let sub: Vec<Vec<Vec<[f64; 2]>>> = cands.iter().map(|c| c[..k].to_vec()).collect();
            let (mut ade_sum, mut fde_sum) = (0.0, 0.0);
            for (c, g) in sub.iter().zip(&gts) {
                ade_sum += min_ade_k(c, g)?;
                fde_sum += min_fde_k(c, g)?;
            }
            let n = gts.len();
            report.rows.push(MetricRow {
                method: method.to_string(),
                tau,
                k,
                min_ade: ade_sum / n as f64,
                min_fde: fde_sum / n as f64,
                mr: miss_rate_k(&sub, &gts, MISS_THRESHOLD)?,
                n_samples: n,
            });
        }
    }
    Ok(report)
}
