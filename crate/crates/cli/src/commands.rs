use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, ValueEnum};
use serde_json::json;

use tapd::encoder::SceneContext;
use tapd::evalkit::{evaluate_variable_length, parse_csv, render_report, MetricReport, ModelBundle, ReportFormat};
use tapd::oaf::OafParams;
use tapd::scenegen::{
    generate_dataset, read_dataset_file, split_dataset, truncate_history, write_dataset_file, DatasetFile, DatasetHeader,
    History, Scene, SceneError, TruncationSpec, AGENT_CHANNELS,
};
use tapd::tbm::{backfill as run_backfill, prefix_error, TbmParams};
use tapd::train::{
    has_adjacent_pair, load_checkpoint_file, save_checkpoint_file, stage1_pretrain, stage2_train_tbm, stage3_finetune,
    write_log, Checkpoint, EpochLog, ModelKind, TrainConfig, TrainError,
};

use crate::config::{parse_list, RunConfig};
use crate::Common;

/// Error with its process exit code.
pub enum Failure {
    Usage(anyhow::Error),
    Missing(anyhow::Error),
    Format(anyhow::Error),
    Other(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Missing(_) => 3,
            Failure::Format(_) => 4,
            Failure::Other(_) => 1,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Missing(e) | Failure::Format(e) | Failure::Other(e) => e,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

type Outcome = Result<(), Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn load_config(common: &Common, apply: impl FnOnce(&mut RunConfig)) -> Result<RunConfig, Failure> {
    if let Some(p) = &common.config {
        if !p.exists() {
            return Err(Failure::Missing(anyhow!("config file {} not found", p.display())));
        }
    }
    let mut cfg = RunConfig::load(common.config.as_deref()).map_err(usage)?;
    apply(&mut cfg);
    let env = std::env::var("TAPD_SEED").ok();
    cfg.resolve_seed(common.seed, env.as_deref()).map_err(usage)?;
    Ok(cfg)
}

fn require(path: &Path, what: &str) -> Outcome {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Missing(anyhow!("{what} {} not found", path.display())))
    }
}

fn read_data(path: &Path) -> Result<DatasetFile, Failure> {
    require(path, "dataset")?;
    read_dataset_file(path).map_err(|e| match e {
        SceneError::Io(_) => Failure::Other(anyhow!(e).context(format!("reading {}", path.display()))),
        other => Failure::Format(anyhow!(other).context(format!("reading {}", path.display()))),
    })
}

fn read_checkpoint(path: &Path, kind: ModelKind) -> Result<Checkpoint, Failure> {
    require(path, "checkpoint")?;
    let ckpt = load_checkpoint_file(path).map_err(|e| match e {
        TrainError::Io(_) => Failure::Other(anyhow!(e).context(format!("reading {}", path.display()))),
        other => Failure::Format(anyhow!(other).context(format!("reading {}", path.display()))),
    })?;
    if ckpt.meta.kind != kind {
        return Err(Failure::Format(anyhow!("{} holds a {:?} model, expected {:?}", path.display(), ckpt.meta.kind, kind)));
    }
    Ok(ckpt)
}

fn load_oaf(path: &Path) -> Result<OafParams, Failure> {
    read_checkpoint(path, ModelKind::Oaf)?.to_oaf().map_err(|e| Failure::Format(e.into()))
}

fn load_tbm(path: &Path) -> Result<TbmParams, Failure> {
    read_checkpoint(path, ModelKind::Tbm)?.to_tbm().map_err(|e| Failure::Format(e.into()))
}

fn create_dir(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Outcome {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// `manifest.<name>.toml`: the command, its inputs and the effective config.
fn write_manifest(dir: &Path, name: &str, cfg: &RunConfig, inputs: &[(&str, String)]) -> Outcome {
    let mut table = toml::Table::new();
    table.insert("command".into(), toml::Value::String(name.to_string()));
    let mut inp = toml::Table::new();
    for (k, v) in inputs {
        inp.insert((*k).to_string(), toml::Value::String(v.clone()));
    }
    table.insert("inputs".into(), toml::Value::Table(inp));
    table.insert("config".into(), toml::Value::try_from(cfg).map_err(|e| anyhow!(e))?);
    write(&dir.join(format!("manifest.{name}.toml")), toml::to_string(&table).map_err(|e| anyhow!(e))?)
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

// ---- gen-data --------------------------------------------------------------

#[derive(Args)]
pub struct GenData {
    #[command(flatten)]
    common: Common,
    /// Number of scenes before the split.
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    val_fraction: Option<f64>,
    /// Output directory for train.tapd, val.tapd and summary.json.
    #[arg(long)]
    out: PathBuf,
}

pub fn gen_data(a: GenData) -> Outcome {
    let cfg = load_config(&a.common, |c| {
        if let Some(n) = a.scenes {
            c.data.scenes = n;
        }
        if let Some(v) = a.val_fraction {
            c.data.val_fraction = v;
        }
    })?;
    cfg.validate().map_err(usage)?;
    let seed = cfg.seed.unwrap_or_default();
    let all = generate_dataset(cfg.data.scenes, seed, &cfg.data.generator).map_err(usage)?;
    let vf = cfg.data.val_fraction;
    let (train, val) = split_dataset(all, [1.0 - vf, vf], seed).map_err(usage)?;
    create_dir(&a.out)?;
    let header = DatasetHeader::new(cfg.timeline());
    for (name, set) in [("train.tapd", &train), ("val.tapd", &val)] {
        write_dataset_file(a.out.join(name), &header, set).with_context(|| format!("writing {name}"))?;
    }
    let tl = header.timeline;
    let summary = json!({
        "seed": seed,
        "scenes": cfg.data.scenes,
        "train_scenes": train.len(),
        "val_scenes": val.len(),
        "header": {
            "delta_t": tl.delta_t,
            "intervals": tl.intervals,
            "future": tl.future,
            "agent_channels": header.agent_channels,
            "map_channels": header.map_channels,
        },
    });
    write(&a.out.join("summary.json"), serde_json::to_string_pretty(&summary).map_err(|e| anyhow!(e))? + "\n")?;
    write_manifest(&a.out, "gen-data", &cfg, &[("out", show(&a.out))])?;
    println!("wrote {} train and {} val scenes to {}", train.len(), val.len(), a.out.display());
    Ok(())
}

// ---- train -----------------------------------------------------------------

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Full length only, no distillation.
    Ori,
    /// One model per requested length.
    It,
}

#[derive(Args)]
pub struct Train {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    stage: u8,
    /// Training dataset (TAPD).
    #[arg(long)]
    data: PathBuf,
    /// Directory for checkpoints and logs.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_parser = parse_list)]
    lengths: Option<List<usize>>,
    #[arg(long)]
    no_pkd: bool,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Stage 3: stage-1 checkpoint (default `<out>/oaf.ckpt`).
    #[arg(long)]
    oaf: Option<PathBuf>,
    /// Stage 3: stage-2 checkpoint (default `<out>/tbm.ckpt`).
    #[arg(long)]
    tbm: Option<PathBuf>,
    /// Output name (default oaf, tbm or tapd by stage).
    #[arg(long)]
    name: Option<String>,
}

fn stage_mut(cfg: &mut RunConfig, stage: u8) -> &mut TrainConfig {
    match stage {
        1 => &mut cfg.stage1,
        2 => &mut cfg.stage2,
        _ => &mut cfg.stage3,
    }
}

fn log_epochs(name: &str, log: &[EpochLog]) {
    for e in log {
        eprintln!(
            "[{name}] stage {} epoch {:>3}  total {:.4}  reg {:.4}  cls {:.4}  pkd {:.4}  alpha {:.3}  lr {:.2e}  {:.1}s",
            e.stage, e.epoch, e.total, e.l_reg, e.l_cls, e.l_f, e.alpha, e.lr, e.wall_time_s
        );
    }
}

fn save_run(dir: &Path, name: &str, ckpt: &Checkpoint, log: &[EpochLog]) -> Outcome {
    let path = dir.join(format!("{name}.ckpt"));
    save_checkpoint_file(&path, ckpt).with_context(|| format!("writing {}", path.display()))?;
    let mut buf = Vec::new();
    write_log(&mut buf, log).map_err(|e| anyhow!(e))?;
    write(&dir.join(format!("{name}.log.jsonl")), buf)?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn train(a: Train) -> Outcome {
    let mut warn_pkd = false;
    let cfg = load_config(&a.common, |c| {
        let h = c.timeline().intervals;
        let st = stage_mut(c, a.stage);
        if let Some(e) = a.epochs {
            st.epochs = e;
        }
        if let Some(l) = &a.lengths {
            st.lengths = l.clone();
        }
        if let Some(lr) = a.lr {
            st.lr = lr;
        }
        if let Some(b) = a.batch_size {
            st.batch_size = b;
        }
        if a.no_pkd {
            st.pkd = false;
        }
        st.train_data = Some(a.data.clone());
        st.checkpoint_dir = Some(a.out.clone());
        match a.preset {
            Some(Preset::Ori) => {
                st.lengths = vec![h];
                st.pkd = false;
            }
            Some(Preset::It) => st.pkd = false,
            None => {}
        }
        if a.stage == 1 && st.pkd && !has_adjacent_pair(&st.lengths) {
            st.pkd = false;
            warn_pkd = true;
        }
    })?;
    if warn_pkd {
        eprintln!("warning: distillation disabled, the requested lengths contain no adjacent pair");
    }
    if a.preset.is_some() && a.stage != 1 {
        return Err(usage(anyhow!("--preset applies to stage 1 only")));
    }
    cfg.validate().map_err(usage)?;
    let (oaf_path, tbm_path) = (
        a.oaf.clone().unwrap_or_else(|| a.out.join("oaf.ckpt")),
        a.tbm.clone().unwrap_or_else(|| a.out.join("tbm.ckpt")),
    );
    if a.stage == 3 {
        require(&oaf_path, "stage-1 checkpoint")?;
        require(&tbm_path, "stage-2 checkpoint")?;
    }
    let data = read_data(&a.data)?;
    if data.header.timeline != cfg.timeline() {
        return Err(usage(anyhow!("dataset timeline {:?} differs from the configured {:?}", data.header.timeline, cfg.timeline())));
    }
    create_dir(&a.out)?;
    let scenes = &data.scenes;
    let fail = |e: TrainError| match e {
        TrainError::Config(_) => usage(e),
        TrainError::Data(_) | TrainError::Scene(_) => Failure::Format(e.into()),
        other => Failure::Other(other.into()),
    };
    let mut inputs = vec![("data", show(&a.data)), ("out", show(&a.out))];
    match a.stage {
        1 => {
            let runs: Vec<(String, TrainConfig)> = match a.preset {
                Some(Preset::It) => cfg
                    .stage1
                    .lengths
                    .iter()
                    .map(|&t| (format!("it-{t}"), TrainConfig { lengths: vec![t], ..cfg.stage1.clone() }))
                    .collect(),
                Some(Preset::Ori) => vec![(a.name.clone().unwrap_or_else(|| "ori".into()), cfg.stage1.clone())],
                None => vec![(a.name.clone().unwrap_or_else(|| "oaf".into()), cfg.stage1.clone())],
            };
            for (name, tc) in runs {
                let out = stage1_pretrain(&tc, cfg.oaf_config(), scenes).map_err(fail)?;
                log_epochs(&name, &out.log);
                save_run(&a.out, &name, &Checkpoint::from_oaf(1, &out.model, &out.optim, &tc), &out.log)?;
                write_manifest(&a.out, &format!("train.{name}"), &cfg, &inputs)?;
            }
        }
        2 => {
            let name = a.name.clone().unwrap_or_else(|| "tbm".into());
            let out = stage2_train_tbm(&cfg.stage2, cfg.tbm_config(), scenes).map_err(fail)?;
            log_epochs(&name, &out.log);
            save_run(&a.out, &name, &Checkpoint::from_tbm(2, &out.model, &out.optim, &cfg.stage2), &out.log)?;
            write_manifest(&a.out, &format!("train.{name}"), &cfg, &inputs)?;
        }
        _ => {
            let name = a.name.clone().unwrap_or_else(|| "tapd".into());
            let oaf = load_oaf(&oaf_path)?;
            let tbm = load_tbm(&tbm_path)?;
            let out = stage3_finetune(&cfg.stage3, oaf, &tbm, scenes).map_err(fail)?;
            log_epochs(&name, &out.log);
            save_run(&a.out, &name, &Checkpoint::from_oaf(3, &out.model, &out.optim, &cfg.stage3), &out.log)?;
            inputs.push(("oaf", show(&oaf_path)));
            inputs.push(("tbm", show(&tbm_path)));
            write_manifest(&a.out, &format!("train.{name}"), &cfg, &inputs)?;
        }
    }
    Ok(())
}

// ---- backfill --------------------------------------------------------------

#[derive(Args)]
pub struct Backfill {
    #[command(flatten)]
    common: Common,
    /// Stage-2 checkpoint.
    #[arg(long)]
    tbm: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Observed intervals kept before completion, 1 ≤ τ < H.
    #[arg(long)]
    tau: usize,
    /// Output TAPD file.
    #[arg(long)]
    out: PathBuf,
}

/// Scene with its first `T_obs` steps replaced by `completed`.
fn with_history(scene: &Scene, completed: &History) -> Scene {
    let mut s = scene.clone();
    let t_obs = completed.steps;
    for (a, agent) in s.agents.iter_mut().enumerate() {
        agent.states[..t_obs * AGENT_CHANNELS].copy_from_slice(completed.agent(a));
    }
    s
}

pub fn backfill(a: Backfill) -> Outcome {
    let cfg = load_config(&a.common, |_| {})?;
    cfg.validate().map_err(usage)?;
    let h = cfg.timeline().intervals;
    if a.tau == 0 || a.tau >= h {
        return Err(usage(anyhow!("--tau must lie in 1..{h}; a full-length history needs no backfilling")));
    }
    let tbm = load_tbm(&a.tbm)?;
    let data = read_data(&a.data)?;
    let tl = data.header.timeline;
    if tl != tbm.config.timeline {
        return Err(Failure::Format(anyhow!("dataset timeline {:?} differs from the backfiller's {:?}", tl, tbm.config.timeline)));
    }
    let p = tbm.config.prefix_steps(a.tau);
    let mut out = Vec::with_capacity(data.scenes.len());
    let mut err_sum = 0.0;
    for s in &data.scenes {
        let full = s.full_history();
        let ctx = SceneContext::new(tl, &full, &s.map, &s.aoi_indices).map_err(|e| Failure::Format(e.into()))?;
        let x = truncate_history(s, &TruncationSpec::for_timeline(&tl, a.tau)).map_err(|e| Failure::Format(e.into()))?;
        let r = run_backfill(&tbm, &ctx, &x, a.tau).map_err(|e| Failure::Other(e.into()))?;
        let truth = History::new(
            full.n_agents,
            p,
            (0..full.n_agents).flat_map(|i| full.agent(i)[..p * AGENT_CHANNELS].to_vec()).collect(),
        );
        err_sum += prefix_error(&r.prefix, &truth);
        out.push(with_history(s, &r.completed));
    }
    let header = DatasetHeader { reconstructed_from: Some(a.tau), ..data.header };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_dataset_file(&a.out, &header, &out).with_context(|| format!("writing {}", a.out.display()))?;
    if data.header.reconstructed_from.is_none() && !out.is_empty() {
        println!("mean prefix error vs ground truth: {:.4} m over {} scenes", err_sum / out.len() as f64, out.len());
    }
    println!("wrote {} completed scenes to {}", out.len(), a.out.display());
    Ok(())
}

// ---- eval ------------------------------------------------------------------

/// Comma-separated flag value.
type List<T> = Vec<T>;

fn parse_names(s: &str) -> Result<Vec<String>, String> {
    Ok(s.split(',').map(|p| p.trim().to_string()).filter(|p| !p.is_empty()).collect())
}

#[derive(Args)]
pub struct Eval {
    #[command(flatten)]
    common: Common,
    /// Validation dataset (TAPD).
    #[arg(long)]
    data: PathBuf,
    /// Directory holding ori.ckpt, it-<τ>.ckpt, oaf.ckpt, tapd.ckpt and tbm.ckpt.
    #[arg(long)]
    ckpt_dir: PathBuf,
    #[arg(long, value_parser = parse_names)]
    bundles: Option<List<String>>,
    #[arg(long, value_parser = parse_list)]
    taus: Option<List<usize>>,
    #[arg(long, value_parser = parse_list)]
    ks: Option<List<usize>>,
    /// Extra output formats; csv and markdown are always written.
    #[arg(long, value_parser = parse_names)]
    format: Option<List<String>>,
    #[arg(long)]
    out: PathBuf,
}

fn formats(names: &[String]) -> Result<Vec<ReportFormat>, Failure> {
    let mut out = vec![ReportFormat::Csv, ReportFormat::Markdown];
    for n in names {
        let f: ReportFormat = n.parse().map_err(usage)?;
        if !out.contains(&f) {
            out.push(f);
        }
    }
    Ok(out)
}

fn write_report(dir: &Path, report: &MetricReport, fmts: &[ReportFormat]) -> Outcome {
    create_dir(dir)?;
    for f in fmts {
        for (name, text) in render_report(report, *f) {
            write(&dir.join(&name), text)?;
            println!("wrote {}", dir.join(name).display());
        }
    }
    Ok(())
}

pub fn eval(a: Eval) -> Outcome {
    let cfg = load_config(&a.common, |c| {
        if let Some(b) = &a.bundles {
            c.eval.bundles = b.clone();
        }
        if let Some(t) = &a.taus {
            c.eval.taus = t.clone();
        }
        if let Some(k) = &a.ks {
            c.eval.ks = k.clone();
        }
        if let Some(f) = &a.format {
            c.eval.formats = f.clone();
        }
    })?;
    cfg.validate().map_err(usage)?;
    let fmts = formats(&cfg.eval.formats)?;
    let e = &cfg.eval;
    let path = |n: &str| a.ckpt_dir.join(format!("{n}.ckpt"));
    for b in &e.bundles {
        let needed: Vec<String> = match b.as_str() {
            "it" => e.taus.iter().map(|t| format!("it-{t}")).collect(),
            "tapd" => vec!["tapd".into(), "tbm".into()],
            other => vec![other.to_string()],
        };
        for n in needed {
            require(&path(&n), &format!("checkpoint for bundle {b}"))?;
        }
    }
    let data = read_data(&a.data)?;
    let mut report = MetricReport::default();
    let run = |name: &str, bundle: &ModelBundle| -> Result<MetricReport, Failure> {
        evaluate_variable_length(name, bundle, &data.scenes, &e.taus, &e.ks).map_err(|err| Failure::Format(err.into()))
    };
    for b in &e.bundles {
        let part = match b.as_str() {
            "it" => {
                let models: Vec<(usize, OafParams)> =
                    e.taus.iter().map(|&t| Ok((t, load_oaf(&path(&format!("it-{t}")))?))).collect::<Result<_, Failure>>()?;
                run(b, &ModelBundle::Isolated(models.iter().map(|(t, m)| (*t, m)).collect()))?
            }
            "tapd" => {
                let (m, t) = (load_oaf(&path("tapd"))?, load_tbm(&path("tbm"))?);
                run(b, &ModelBundle::OafWithTbm(&m, &t))?
            }
            other => run(b, &ModelBundle::Oaf(&load_oaf(&path(other))?))?,
        };
        report.extend(part);
    }
    write_report(&a.out, &report, &fmts)?;
    write_manifest(&a.out, "eval", &cfg, &[("data", show(&a.data)), ("ckpt_dir", show(&a.ckpt_dir))])?;
    print!("{}", tapd::evalkit::render_markdown(&report));
    Ok(())
}

// ---- report ----------------------------------------------------------------

#[derive(Args)]
pub struct Report {
    /// CSV written by `eval`.
    #[arg(long)]
    csv: PathBuf,
    #[arg(long, value_parser = parse_names, default_value = "markdown")]
    format: List<String>,
    #[arg(long)]
    out: PathBuf,
}

pub fn report(a: Report) -> Outcome {
    require(&a.csv, "report")?;
    let text = fs::read_to_string(&a.csv).with_context(|| format!("reading {}", a.csv.display()))?;
    let report = parse_csv(&text).map_err(|e| Failure::Format(e.into()))?;
    let mut fmts = Vec::new();
    for n in a.format.iter().flat_map(|v| v.split(',')) {
        fmts.push(n.parse::<ReportFormat>().map_err(usage)?);
    }
    write_report(&a.out, &report, &fmts)
}
