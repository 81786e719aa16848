//! Sectioned TOML run configuration, validation, and the glue that turns a
//! config into scenes, scorers and parameters.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::comms::{Q0Mode, ScorerParams, TieBreak};
use crate::direction::{default_sigma1, DEFAULT_SIGMA2};
use crate::eval::{ScorerPolicy, SweepSpec};
use crate::fusion::{AttentionParams, InitMode};
use crate::geometry::SectorPartition;
use crate::geometry::Point;
use crate::learn::{LossConfig, SoftConfig, TrainConfig, TrainingScene};
use crate::pipeline::{Method, PreparedScene, Scorer, Settings};
use crate::scenario::{generate, ScenarioConfig};
use crate::Error;

/// Environment variable that replaces `scenario.seed`.
pub const SEED_ENV: &str = "DIRCP_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSection {
    pub seed: u64,
    pub area_side: f64,
    pub n_collaborators: usize,
    pub n_vehicles: usize,
    pub vehicle_density_profile: Vec<f64>,
    pub sensor_range: f64,
    pub occlusion_enabled: bool,
    pub dropout_prob: f64,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        let s = ScenarioConfig::default();
        ScenarioSection {
            seed: s.seed,
            area_side: s.area_side,
            n_collaborators: s.n_collaborators,
            n_vehicles: s.n_vehicles,
            vehicle_density_profile: s.vehicle_density_profile,
            sensor_range: s.sensor_range,
            occlusion_enabled: s.occlusion_enabled,
            dropout_prob: s.dropout_prob,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub cell_size: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            height: 64,
            width: 64,
            channels: 8,
            cell_size: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DirectionSection {
    pub n_dir: usize,
    /// Sector cut points in degrees from the ego heading; empty means equal sectors.
    pub boundaries: Vec<f64>,
    pub interest_weights: Vec<f64>,
    pub sigma1: f64,
    pub sigma2: f64,
}

impl Default for DirectionSection {
    fn default() -> Self {
        DirectionSection {
            n_dir: 4,
            boundaries: Vec::new(),
            interest_weights: vec![0.9, 0.9, 0.1, 0.1],
            sigma1: default_sigma1(4),
            sigma2: DEFAULT_SIGMA2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScorerKind {
    /// `C = de * pe * q0`; ignores the loss sigma.
    Reference,
    /// MLP trained per loss sigma with the `[train]` settings.
    #[default]
    Trained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CommsSection {
    pub q_max: f64,
    pub q0_mode: Q0Mode,
    pub tie_break: TieBreak,
    pub scorer: ScorerKind,
    pub hidden: usize,
    pub scorer_seed: u64,
}

impl Default for CommsSection {
    fn default() -> Self {
        CommsSection {
            q_max: 0.2,
            q0_mode: Q0Mode::Ones,
            tie_break: TieBreak::PerCollaborator,
            scorer: ScorerKind::Trained,
            hidden: 8,
            scorer_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionSection {
    pub n_heads: usize,
    pub d_ff: usize,
    pub init_mode: InitMode,
    pub seed: u64,
    /// Decoder threshold on `logistic(fused evidence)`.
    pub conf_threshold: f64,
}

impl Default for FusionSection {
    fn default() -> Self {
        FusionSection {
            n_heads: 2,
            d_ff: 16,
            init_mode: InitMode::Evidence,
            seed: 0,
            conf_threshold: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub sigma: f64,
    pub lambda_off: f64,
    pub lambda_size: f64,
    pub focal_alpha: f64,
    pub tau: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            sigma: 1.0,
            lambda_off: 1.0,
            lambda_size: 1.0,
            focal_alpha: 2.0,
            tau: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    /// Training scenes use seeds `seed_offset + i`, disjoint from evaluation seeds.
    pub seed_offset: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            steps: 200,
            lr: 20.0,
            batch: 8,
            seed_offset: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub iou_thresholds: Vec<f64>,
    pub methods: Vec<Method>,
    /// Evaluation scenes use seeds `scenario.seed + i` for `i < n_seeds`.
    pub n_seeds: usize,
    pub budgets: Vec<f64>,
    pub sigmas: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            iou_thresholds: vec![0.5, 0.7],
            methods: vec![Method::Directed, Method::Uniform, Method::Single],
            n_seeds: 10,
            budgets: vec![0.01, 0.05, 0.1, 0.2, 0.25],
            sigmas: vec![1.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputFormat {
    Json,
    Csv,
    Svg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub directory: String,
    pub formats: Vec<OutputFormat>,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            directory: "out".into(),
            formats: vec![OutputFormat::Json, OutputFormat::Csv, OutputFormat::Svg],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scenario: ScenarioSection,
    pub grid: GridSection,
    pub direction: DirectionSection,
    pub comms: CommsSection,
    pub fusion: FusionSection,
    pub loss: LossSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub output: OutputSection,
}

fn unit(name: &str, v: f64, p: &mut Vec<String>) {
    if !(0.0..=1.0).contains(&v) {
        p.push(format!("{name} must be in [0, 1], got {v}"));
    }
}

impl RunConfig {
    /// Parses and validates a config file's text.
    pub fn from_toml_str(text: &str) -> Result<Self, Error> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `DIRCP_SEED` when it is set.
    pub fn apply_seed_env(&mut self) -> Result<(), Error> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.scenario.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(vec![format!("{SEED_ENV}={v:?} is not an unsigned integer")]))?;
        }
        Ok(())
    }

    /// Every violated constraint, one message each, prefixed with its key.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        for msg in self.scenario_config(self.scenario.seed).problems() {
            p.push(format!("scenario/grid: {msg}"));
        }
        let n_dir = self.direction.n_dir;
        if n_dir == 0 {
            p.push("direction.n_dir must be at least 1".into());
        }
        if self.scenario.vehicle_density_profile.len() != n_dir {
            p.push(format!(
                "scenario.vehicle_density_profile has {} entries for direction.n_dir = {n_dir}",
                self.scenario.vehicle_density_profile.len()
            ));
        }
        if self.direction.interest_weights.len() != n_dir {
            p.push(format!(
                "direction.interest_weights has {} entries for direction.n_dir = {n_dir}",
                self.direction.interest_weights.len()
            ));
        }
        if self.direction.interest_weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
            p.push("direction.interest_weights must lie in [0, 1]".into());
        }
        if !self.direction.boundaries.is_empty() {
            if self.direction.boundaries.len() != n_dir + 1 {
                p.push(format!(
                    "direction.boundaries needs n_dir + 1 = {} cut points, got {}",
                    n_dir + 1,
                    self.direction.boundaries.len()
                ));
            } else if let Err(e) =
                SectorPartition::from_cuts(&self.direction.boundaries, Point::new(0.0, 0.0), 0.0)
            {
                p.push(format!("direction.boundaries: {e}"));
            }
        }
        if !(self.direction.sigma1.is_finite() && self.direction.sigma1 >= 0.0) {
            p.push("direction.sigma1 must be finite and >= 0".into());
        }
        if !(self.direction.sigma2.is_finite() && self.direction.sigma2 >= 0.0) {
            p.push("direction.sigma2 must be finite and >= 0".into());
        }
        if self.grid.channels < 2 {
            p.push("grid.channels must be at least 2 (evidence and range decay)".into());
        }
        if self.grid.channels > u16::MAX as usize {
            p.push("grid.channels must fit in 16 bits".into());
        }
        unit("comms.q_max", self.comms.q_max, &mut p);
        if self.comms.hidden == 0 {
            p.push("comms.hidden must be at least 1".into());
        }
        if self.fusion.n_heads == 0 || !self.grid.channels.is_multiple_of(self.fusion.n_heads.max(1)) {
            p.push(format!(
                "grid.channels = {} must be divisible by fusion.n_heads = {}",
                self.grid.channels, self.fusion.n_heads
            ));
        }
        if self.fusion.d_ff == 0 {
            p.push("fusion.d_ff must be at least 1".into());
        }
        if !(self.fusion.conf_threshold > 0.0 && self.fusion.conf_threshold < 1.0) {
            p.push(format!(
                "fusion.conf_threshold must be in (0, 1), got {}",
                self.fusion.conf_threshold
            ));
        }
        if !(self.loss.sigma.is_finite() && self.loss.sigma >= 0.0) {
            p.push("loss.sigma must be finite and >= 0".into());
        }
        for (name, v) in [
            ("loss.lambda_off", self.loss.lambda_off),
            ("loss.lambda_size", self.loss.lambda_size),
            ("loss.focal_alpha", self.loss.focal_alpha),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                p.push(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.loss.tau > 0.0 && self.loss.tau.is_finite()) {
            p.push("loss.tau must be positive".into());
        }
        if self.train.steps == 0 {
            p.push("train.steps must be at least 1".into());
        }
        if !(self.train.lr.is_finite() && self.train.lr >= 0.0) {
            p.push("train.lr must be finite and >= 0".into());
        }
        if self.train.batch == 0 {
            p.push("train.batch must be at least 1".into());
        }
        if self.eval.iou_thresholds.is_empty() {
            p.push("eval.iou_thresholds must not be empty".into());
        }
        if self.eval.iou_thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            p.push("eval.iou_thresholds must lie in (0, 1)".into());
        }
        if self.eval.methods.is_empty() {
            p.push("eval.methods must not be empty".into());
        }
        if self.eval.n_seeds == 0 {
            p.push("eval.n_seeds must be at least 1".into());
        }
        if self.eval.budgets.is_empty() {
            p.push("eval.budgets must not be empty".into());
        }
        for &b in &self.eval.budgets {
            unit("eval.budgets entry", b, &mut p);
        }
        if self.eval.sigmas.is_empty() {
            p.push("eval.sigmas must not be empty".into());
        }
        if self.eval.sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            p.push("eval.sigmas must be finite and >= 0".into());
        }
        if self.output.directory.trim().is_empty() {
            p.push("output.directory must not be empty".into());
        }
        p
    }

    pub fn validate(&self) -> Result<(), Error> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    pub fn scenario_config(&self, seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            seed,
            area_side: self.scenario.area_side,
            n_collaborators: self.scenario.n_collaborators,
            n_vehicles: self.scenario.n_vehicles,
            vehicle_density_profile: self.scenario.vehicle_density_profile.clone(),
            sector_cuts: self.direction.boundaries.clone(),
            sensor_range: self.scenario.sensor_range,
            occlusion_enabled: self.scenario.occlusion_enabled,
            dropout_prob: self.scenario.dropout_prob,
            height: self.grid.height,
            width: self.grid.width,
            cell_size: self.grid.cell_size,
        }
    }

    pub fn settings(&self) -> Settings {
        Settings {
            channels: self.grid.channels,
            interest: self.direction.interest_weights.clone(),
            sigma1: self.direction.sigma1,
            sigma2: self.direction.sigma2,
            q0_mode: self.comms.q0_mode,
            tie_break: self.comms.tie_break,
            conf_threshold: self.fusion.conf_threshold,
        }
    }

    pub fn attention(&self) -> Result<AttentionParams, Error> {
        Ok(AttentionParams::new(
            self.grid.channels,
            self.fusion.n_heads,
            self.fusion.d_ff,
            self.fusion.init_mode,
            self.fusion.seed,
        )?)
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            focal_alpha: self.loss.focal_alpha,
            lambda_off: self.loss.lambda_off,
            lambda_size: self.loss.lambda_size,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train.steps,
            lr: self.train.lr,
            soft: SoftConfig {
                q_max: self.comms.q_max,
                sigma: self.loss.sigma,
                tau: self.loss.tau,
                loss: self.loss_config(),
            },
        }
    }

    pub fn scorer_init(&self) -> ScorerParams {
        ScorerParams::random(self.comms.hidden, self.comms.scorer_seed)
    }

    pub fn eval_seeds(&self) -> Vec<u64> {
        (0..self.eval.n_seeds as u64).map(|i| self.scenario.seed + i).collect()
    }

    pub fn train_seeds(&self) -> Vec<u64> {
        (0..self.train.batch as u64).map(|i| self.train.seed_offset + i).collect()
    }

    /// Generates and encodes one scene per seed, in seed order.
    pub fn prepare_scenes(&self, seeds: &[u64]) -> Result<Vec<PreparedScene>, Error> {
        let settings = self.settings();
        seeds
            .par_iter()
            .map(|&s| PreparedScene::new(generate(&self.scenario_config(s))?, &settings))
            .collect()
    }

    pub fn training_batch(&self) -> Result<Vec<TrainingScene>, Error> {
        Ok(self
            .prepare_scenes(&self.train_seeds())?
            .into_iter()
            .map(TrainingScene::new)
            .collect())
    }

    pub fn scorer_policy(&self) -> Result<ScorerPolicy, Error> {
        Ok(match self.comms.scorer {
            ScorerKind::Reference => ScorerPolicy::Reference,
            ScorerKind::Trained => ScorerPolicy::Trained {
                init: self.scorer_init(),
                train: self.train_config(),
                batch: self.training_batch()?,
            },
        })
    }

    /// Scorer for a single run at `loss.sigma`.
    pub fn scorer(&self, attention: &AttentionParams) -> Result<Scorer, Error> {
        Ok(match self.comms.scorer {
            ScorerKind::Reference => Scorer::Reference,
            ScorerKind::Trained => {
                let out = crate::learn::train_scorer(
                    &self.scorer_init(),
                    attention,
                    &self.training_batch()?,
                    &self.train_config(),
                )?;
                Scorer::Mlp(out.params)
            }
        })
    }

    pub fn sweep_spec(&self) -> SweepSpec {
        SweepSpec {
            budgets: self.eval.budgets.clone(),
            sigmas: self.eval.sigmas.clone(),
            methods: self.eval.methods.clone(),
        }
    }

    pub fn wants(&self, f: OutputFormat) -> bool {
        self.output.formats.contains(&f)
    }
}

/// The default configuration as TOML, used for `--help` and as a template.
pub fn default_toml() -> String {
    RunConfig::default().to_toml()
}
