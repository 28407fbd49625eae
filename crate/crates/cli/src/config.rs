use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use tapd::oaf::OafConfig;
use tapd::scenegen::{GeneratorConfig, Timeline};
use tapd::tbm::TbmConfig;
use tapd::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub scenes: usize,
    pub val_fraction: f64,
    pub generator: GeneratorConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { scenes: 2000, val_fraction: 0.2, generator: GeneratorConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub modes: usize,
    pub rec_modes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { d: 64, modes: 6, rec_modes: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub taus: Vec<usize>,
    pub ks: Vec<usize>,
    pub bundles: Vec<String>,
    pub formats: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            taus: vec![1, 2, 3, 4],
            ks: vec![1, 6],
            bundles: vec!["ori".into(), "it".into(), "tapd".into()],
            formats: vec!["csv".into(), "markdown".into()],
        }
    }
}

pub const BUNDLES: [&str; 4] = ["ori", "it", "oaf", "tapd"];

/// Whole-run settings. Flags override keys, keys override defaults; the seed
/// falls back to `TAPD_SEED` when neither sets it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub stage3: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let timeline = Timeline::default();
        Self {
            seed: None,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            stage1: TrainConfig { stage: 1, ..TrainConfig::default() },
            stage2: TrainConfig { stage: 2, pkd: false, lengths: (1..timeline.intervals).collect(), ..TrainConfig::default() },
            stage3: TrainConfig { stage: 3, pkd: false, ..TrainConfig::default() },
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Partial stage tables fall back to that stage's defaults, not `TrainConfig`'s.
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let user: toml::Table = toml::from_str(text)?;
        let mut merged = toml::Table::try_from(Self::default())?;
        overlay(&mut merged, user);
        Ok(merged.try_into()?)
    }

    /// Fills the seed from `env_seed` when unset, then propagates it to every stage.
    pub fn resolve_seed(&mut self, flag: Option<u64>, env_seed: Option<&str>) -> anyhow::Result<u64> {
        let seed = match (flag, self.seed, env_seed) {
            (Some(s), _, _) | (None, Some(s), _) => s,
            (None, None, Some(v)) => v.trim().parse().with_context(|| format!("TAPD_SEED={v:?} is not an unsigned integer"))?,
            (None, None, None) => 0,
        };
        self.seed = Some(seed);
        for st in [&mut self.stage1, &mut self.stage2, &mut self.stage3] {
            st.seed = seed;
        }
        Ok(seed)
    }

    pub fn timeline(&self) -> Timeline {
        self.data.generator.timeline
    }

    pub fn oaf_config(&self) -> OafConfig {
        OafConfig { timeline: self.timeline(), d: self.model.d, modes: self.model.modes }
    }

    pub fn tbm_config(&self) -> TbmConfig {
        TbmConfig { timeline: self.timeline(), d: self.model.d, modes: self.model.rec_modes }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.seed.is_some_and(|s| s > i64::MAX as u64) {
            bail!("seed must not exceed {}", i64::MAX);
        }
        if self.data.scenes == 0 {
            bail!("data.scenes must be at least 1");
        }
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            bail!("data.val_fraction must lie in [0, 1), got {}", self.data.val_fraction);
        }
        self.data.generator.validate()?;
        if self.model.d == 0 || self.model.modes == 0 || self.model.rec_modes == 0 {
            bail!("model sizes must be positive");
        }
        let h = self.timeline().intervals;
        for (i, st) in [&self.stage1, &self.stage2, &self.stage3].into_iter().enumerate() {
            if usize::from(st.stage) != i + 1 {
                bail!("stage{} table has stage = {}", i + 1, st.stage);
            }
            st.validate(h).with_context(|| format!("stage{}", i + 1))?;
        }
        let e = &self.eval;
        if e.taus.is_empty() || e.taus.iter().any(|&t| t == 0 || t > h) {
            bail!("eval.taus must be a non-empty subset of 1..={h}, got {:?}", e.taus);
        }
        if e.ks.is_empty() || e.ks.iter().any(|&k| k == 0 || k > self.model.modes) {
            bail!("eval.ks must lie in 1..={}, got {:?}", self.model.modes, e.ks);
        }
        if let Some(b) = e.bundles.iter().find(|b| !BUNDLES.contains(&b.as_str())) {
            bail!("unknown bundle {b:?} (expected one of {BUNDLES:?})");
        }
        for f in &e.formats {
            f.parse::<tapd::evalkit::ReportFormat>()?;
        }
        Ok(())
    }
}

fn overlay(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => overlay(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

pub fn parse_list(s: &str) -> Result<Vec<usize>, String> {
    s.split(',').map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}"))).collect()
}
