//! Detection loss, the direction-weighted loss and its gradient, and a
//! gradient-descent trainer for the query scorer.
//!
//! ```text
//! L_DW = sum_i L_i (M_i + sigma) / (sum_i M_i + sigma * N_dir)
//! ```
//!
//! Training runs on a differentiable surrogate of the pipeline: top-k query
//! clipping becomes `logistic((C - C_kth) / tau)` and the decoder loss is
//! taken per cell on `[conf, dx, dy, l, w, cos, sin]` maps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comms::{logistic, per_collaborator_quota, ScorerParams, ScorerTrace};
use crate::direction::DirectionMask;
use crate::fusion::{fuse_all, fuse_backward, AttentionParams, CollaboratorInput, FusionInput};
use crate::geometry::{RotatedBox, SectorPartition};
use crate::grid::GridSpec;
use crate::pipeline::{Method, PreparedScene};

pub const PRED_CHANNELS: usize = 7;
/// Regression outputs of the training surrogate: a centered, mean-sized, +x-facing car.
pub const REGRESSION_PRIOR: [f64; 6] = [0.0, 0.0, 4.5, 1.9, 1.0, 0.0];
const LN_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum LearnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("direction weights are degenerate: sigma = 0 with an all-zero mask")]
    DegenerateWeights,
    #[error("training diverged at step {step}: loss {loss}")]
    DivergedTraining { step: usize, loss: f64 },
    #[error("invalid hyperparameter: {0}")]
    InvalidHyper(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub focal_alpha: f64,
    pub lambda_off: f64,
    pub lambda_size: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            focal_alpha: 2.0,
            lambda_off: 1.0,
            lambda_size: 1.0,
        }
    }
}

/// Ground truth on the BEV grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthRaster {
    pub grid: GridSpec,
    pub n_dir: usize,
    /// 1 where the cell center lies inside a ground-truth box.
    pub occupancy: Vec<u8>,
    /// `[dx, dy, l, w, cos, sin]` at each box's center cell; offsets in cells.
    pub targets: Vec<Option<[f64; 6]>>,
    /// Sector of each cell center.
    pub sector: Vec<usize>,
    /// Center cells per sector.
    pub positives: Vec<usize>,
}

pub fn rasterize_truth(boxes: &[RotatedBox], grid: &GridSpec, partition: &SectorPartition) -> TruthRaster {
    let n = grid.n_cells();
    let mut occupancy = vec![0u8; n];
    let mut targets = vec![None; n];
    let sector: Vec<usize> = grid
        .cells()
        .map(|(r, c)| partition.sector_of_point(grid.cell_center(r, c)))
        .collect();
    for (r, c) in grid.cells() {
        let p = grid.cell_center(r, c);
        if boxes.iter().any(|b| b.contains(p)) {
            occupancy[grid.index(r, c)] = 1;
        }
    }
    for b in boxes {
        if let Some((r, c)) = grid.cell_of(b.center()) {
            let i = grid.index(r, c);
            if targets[i].is_none() {
                let cc = grid.cell_center(r, c);
                targets[i] = Some([
                    (b.cx - cc.x) / grid.cell_size,
                    (b.cy - cc.y) / grid.cell_size,
                    b.length,
                    b.width,
                    b.cos_a,
                    b.sin_a,
                ]);
            }
        }
    }
    let mut positives = vec![0; partition.n_dir()];
    for (i, t) in targets.iter().enumerate() {
        if t.is_some() {
            positives[sector[i]] += 1;
        }
    }
    TruthRaster {
        grid: *grid,
        n_dir: partition.n_dir(),
        occupancy,
        targets,
        sector,
        positives,
    }
}

/// Per-direction components of the detection loss.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DirectionLosses {
    pub total: Vec<f64>,
    pub focal: Vec<f64>,
    pub offset: Vec<f64>,
    pub size: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub per_direction: Vec<f64>,
    pub focal: Vec<f64>,
    pub offset: Vec<f64>,
    pub size: Vec<f64>,
    pub dw_total: f64,
    pub sigma: f64,
}

fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Focal term for one cell and its derivative in `p`.
fn focal(p: f64, positive: bool, alpha: f64) -> (f64, f64) {
    if positive {
        let q = p.max(LN_EPS);
        let dln = if p > LN_EPS { 1.0 / p } else { 0.0 };
        let w = (1.0 - p).powf(alpha);
        let dw = if alpha == 0.0 { 0.0 } else { -alpha * (1.0 - p).powf(alpha - 1.0) };
        (-w * q.ln(), -(dw * q.ln() + w * dln))
    } else {
        let q = (1.0 - p).max(LN_EPS);
        let dln = if 1.0 - p > LN_EPS { -1.0 / (1.0 - p) } else { 0.0 };
        let w = p.powf(alpha);
        let dw = if alpha == 0.0 { 0.0 } else { alpha * p.powf(alpha - 1.0) };
        (-w * q.ln(), -(dw * q.ln() + w * dln))
    }
}

fn check_pred(pred: &[f64], truth: &TruthRaster) -> Result<(), LearnError> {
    if pred.len() != truth.grid.n_cells() * PRED_CHANNELS {
        return Err(LearnError::ShapeMismatch(format!(
            "prediction has {} values, grid needs {}",
            pred.len(),
            truth.grid.n_cells() * PRED_CHANNELS
        )));
    }
    Ok(())
}

/// Focal loss on occupancy plus smoothed-L1 offset and size/angle terms at
/// center cells, per sector, normalized by the sector's center count.
pub fn detection_loss(pred: &[f64], truth: &TruthRaster, cfg: &LossConfig) -> Result<DirectionLosses, LearnError> {
    check_pred(pred, truth)?;
    let n = truth.n_dir;
    let mut out = DirectionLosses {
        total: vec![0.0; n],
        focal: vec![0.0; n],
        offset: vec![0.0; n],
        size: vec![0.0; n],
    };
    for (i, p) in pred.chunks_exact(PRED_CHANNELS).enumerate() {
        let s = truth.sector[i];
        out.focal[s] += focal(p[0], truth.occupancy[i] == 1, cfg.focal_alpha).0;
        if let Some(t) = truth.targets[i] {
            out.offset[s] += smooth_l1(p[1] - t[0]) + smooth_l1(p[2] - t[1]);
            out.size[s] += (3..7).map(|k| smooth_l1(p[k] - t[k - 1])).sum::<f64>();
        }
    }
    for s in 0..n {
        let norm = truth.positives[s].max(1) as f64;
        out.focal[s] /= norm;
        out.offset[s] /= norm;
        out.size[s] /= norm;
        out.total[s] = out.focal[s] + cfg.lambda_off * out.offset[s] + cfg.lambda_size * out.size[s];
    }
    Ok(out)
}

/// `(M_i + sigma) / (sum M + sigma N)` for each direction.
pub fn dw_weights(mask: &[u8], sigma: f64) -> Result<Vec<f64>, LearnError> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(LearnError::InvalidHyper(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    let on: f64 = mask.iter().map(|&m| f64::from(m)).sum();
    let denom = on + sigma * mask.len() as f64;
    if denom == 0.0 {
        return Err(LearnError::DegenerateWeights);
    }
    Ok(mask.iter().map(|&m| (f64::from(m) + sigma) / denom).collect())
}

pub fn dw_loss(per_direction: &[f64], mask: &DirectionMask, sigma: f64) -> Result<f64, LearnError> {
    if per_direction.len() != mask.n_dir() {
        return Err(LearnError::ShapeMismatch(format!(
            "{} losses for {} directions",
            per_direction.len(),
            mask.n_dir()
        )));
    }
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(LearnError::InvalidHyper(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    let num: f64 = per_direction
        .iter()
        .zip(&mask.mask)
        .map(|(l, &m)| l * (f64::from(m) + sigma))
        .sum();
    let denom = mask.count_on() as f64 + sigma * mask.n_dir() as f64;
    if denom == 0.0 {
        return Err(LearnError::DegenerateWeights);
    }
    Ok(num / denom)
}

pub fn loss_breakdown(
    pred: &[f64],
    truth: &TruthRaster,
    mask: &DirectionMask,
    sigma: f64,
    cfg: &LossConfig,
) -> Result<LossBreakdown, LearnError> {
    let d = detection_loss(pred, truth, cfg)?;
    let dw_total = dw_loss(&d.total, mask, sigma)?;
    Ok(LossBreakdown {
        per_direction: d.total,
        focal: d.focal,
        offset: d.offset,
        size: d.size,
        dw_total,
        sigma,
    })
}

/// Gradient of `L_DW` with respect to every prediction entry.
pub fn dw_loss_gradient(
    pred: &[f64],
    truth: &TruthRaster,
    mask: &DirectionMask,
    sigma: f64,
    cfg: &LossConfig,
) -> Result<Vec<f64>, LearnError> {
    check_pred(pred, truth)?;
    if mask.n_dir() != truth.n_dir {
        return Err(LearnError::ShapeMismatch("mask and truth partition disagree".into()));
    }
    let weights = dw_weights(&mask.mask, sigma)?;
    let mut grad = vec![0.0; pred.len()];
    for (i, (p, g)) in pred
        .chunks_exact(PRED_CHANNELS)
        .zip(grad.chunks_exact_mut(PRED_CHANNELS))
        .enumerate()
    {
        let s = truth.sector[i];
        let scale = weights[s] / truth.positives[s].max(1) as f64;
        if scale == 0.0 {
            continue;
        }
        g[0] = scale * focal(p[0], truth.occupancy[i] == 1, cfg.focal_alpha).1;
        if let Some(t) = truth.targets[i] {
            g[1] = scale * cfg.lambda_off * smooth_l1_grad(p[1] - t[0]);
            g[2] = scale * cfg.lambda_off * smooth_l1_grad(p[2] - t[1]);
            for k in 3..7 {
                g[k] = scale * cfg.lambda_size * smooth_l1_grad(p[k] - t[k - 1]);
            }
        }
    }
    Ok(grad)
}

/// Hyperparameters of the soft training path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftConfig {
    pub q_max: f64,
    pub sigma: f64,
    pub tau: f64,
    pub loss: LossConfig,
}

/// A scene prepared for training under the directed mask.
#[derive(Debug, Clone)]
pub struct TrainingScene {
    pub scene: PreparedScene,
    pub de: Vec<f64>,
    pub truth: TruthRaster,
}

impl TrainingScene {
    pub fn new(scene: PreparedScene) -> Self {
        let de = scene.direction_embedding(Method::Directed);
        let truth = rasterize_truth(scene.truths(), &scene.grid, &scene.partition);
        TrainingScene { scene, de, truth }
    }
}

/// Loss and scorer-parameter gradient for one scene.
#[derive(Debug, Clone)]
pub struct SoftOutcome {
    pub loss: LossBreakdown,
    pub grad: Vec<f64>,
}

struct SoftForward {
    traces: Vec<Vec<ScorerTrace>>,
    confidence: Vec<Vec<f64>>,
    presence: Vec<Vec<f64>>,
    kth: Vec<Option<usize>>,
    input: FusionInput,
    pred: Vec<f64>,
}

fn soft_forward(
    scorer: &ScorerParams,
    attention: &AttentionParams,
    ts: &TrainingScene,
    cfg: &SoftConfig,
) -> Result<SoftForward, LearnError> {
    if cfg.tau.is_nan() || cfg.tau <= 0.0 {
        return Err(LearnError::InvalidHyper(format!("tau must be positive, got {}", cfg.tau)));
    }
    let scene = &ts.scene;
    let n = scene.grid.n_cells();
    let quota = per_collaborator_quota(cfg.q_max.clamp(0.0, 1.0), scene.grid.height, scene.grid.width);
    let mut traces = Vec::new();
    let mut confidence = Vec::new();
    let mut presence = Vec::new();
    let mut kth = Vec::new();
    for (q0, pe) in scene.q0.iter().zip(&scene.pe) {
        let tr: Vec<ScorerTrace> = (0..n).map(|i| scorer.forward([q0[i], pe[i], ts.de[i]])).collect();
        let c: Vec<f64> = tr.iter().map(|t| t.output).collect();
        let (pi, t) = if quota == 0 {
            (vec![0.0; n], None)
        } else {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| c[b].total_cmp(&c[a]).then(a.cmp(&b)));
            let t = order[quota.min(n) - 1];
            (c.iter().map(|&v| logistic((v - c[t]) / cfg.tau)).collect(), Some(t))
        };
        traces.push(tr);
        confidence.push(c);
        presence.push(pi);
        kth.push(t);
    }
    let input = FusionInput {
        grid: scene.grid,
        channels: scene.ego.channels,
        ego: scene.ego.values.iter().map(|&v| v as f64).collect(),
        collaborators: scene
            .collaborators
            .iter()
            .zip(confidence.iter().zip(&presence))
            .map(|(f, (c, p))| CollaboratorInput {
                features: f.values.iter().map(|&v| v as f64).collect(),
                presence: p.clone(),
                confidence: c.clone(),
            })
            .collect(),
    };
    let fused = fuse_all(&input, attention).map_err(|e| LearnError::ShapeMismatch(e.to_string()))?;
    let mut pred = Vec::with_capacity(n * PRED_CHANNELS);
    for v in fused.evidence() {
        pred.push(logistic(v));
        pred.extend_from_slice(&REGRESSION_PRIOR);
    }
    Ok(SoftForward {
        traces,
        confidence,
        presence,
        kth,
        input,
        pred,
    })
}

/// Soft-path loss only.
pub fn soft_loss(
    scorer: &ScorerParams,
    attention: &AttentionParams,
    ts: &TrainingScene,
    cfg: &SoftConfig,
) -> Result<LossBreakdown, LearnError> {
    let fw = soft_forward(scorer, attention, ts, cfg)?;
    loss_breakdown(&fw.pred, &ts.truth, &ts.scene.mask, cfg.sigma, &cfg.loss)
}

/// Soft-path loss and its gradient with respect to the scorer parameters.
pub fn soft_loss_and_grad(
    scorer: &ScorerParams,
    attention: &AttentionParams,
    ts: &TrainingScene,
    cfg: &SoftConfig,
) -> Result<SoftOutcome, LearnError> {
    let fw = soft_forward(scorer, attention, ts, cfg)?;
    let loss = loss_breakdown(&fw.pred, &ts.truth, &ts.scene.mask, cfg.sigma, &cfg.loss)?;
    let g_pred = dw_loss_gradient(&fw.pred, &ts.truth, &ts.scene.mask, cfg.sigma, &cfg.loss)?;
    let d = fw.input.channels;
    let n = ts.scene.grid.n_cells();
    let mut g_out = vec![0.0; n * d];
    for i in 0..n {
        let p = fw.pred[i * PRED_CHANNELS];
        g_out[i * d] = g_pred[i * PRED_CHANNELS] * p * (1.0 - p);
    }
    let fg = fuse_backward(&fw.input, attention, &g_out).map_err(|e| LearnError::ShapeMismatch(e.to_string()))?;
    let mut grad = vec![0.0; scorer.n_params()];
    for k in 0..fw.confidence.len() {
        let mut g_c = fg.d_confidence[k].clone();
        if let Some(t) = fw.kth[k] {
            let mut to_kth = 0.0;
            for i in 0..n {
                let pi = fw.presence[k][i];
                let g = fg.d_presence[k][i] * pi * (1.0 - pi) / cfg.tau;
                g_c[i] += g;
                to_kth -= g;
            }
            g_c[t] += to_kth;
        }
        for (tr, &g) in fw.traces[k].iter().zip(&g_c) {
            if g != 0.0 {
                scorer.backward(tr, g, &mut grad);
            }
        }
    }
    Ok(SoftOutcome { loss, grad })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub soft: SoftConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub dw_loss: f64,
    pub per_direction: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ScorerParams,
    /// One row per step before its update, plus a final row after the last update.
    pub log: Vec<TrainLogRow>,
}

impl TrainOutcome {
    pub fn initial_loss(&self) -> f64 {
        self.log.first().map_or(f64::NAN, |r| r.dw_loss)
    }

    pub fn final_loss(&self) -> f64 {
        self.log.last().map_or(f64::NAN, |r| r.dw_loss)
    }

    pub fn log_csv(&self) -> String {
        let n_dir = self.log.first().map_or(0, |r| r.per_direction.len());
        let mut out = String::from("step,dw_loss");
        for i in 0..n_dir {
            out.push_str(&format!(",loss_dir{i}"));
        }
        out.push('\n');
        for r in &self.log {
            out.push_str(&format!("{},{:.9}", r.step, r.dw_loss));
            for l in &r.per_direction {
                out.push_str(&format!(",{l:.9}"));
            }
            out.push('\n');
        }
        out
    }
}

fn batch_step(
    params: &ScorerParams,
    attention: &AttentionParams,
    scenes: &[TrainingScene],
    soft: &SoftConfig,
    with_grad: bool,
) -> Result<(TrainLogRow, Vec<f64>), LearnError> {
    let results: Vec<Result<SoftOutcome, LearnError>> = scenes
        .par_iter()
        .map(|ts| {
            if with_grad {
                soft_loss_and_grad(params, attention, ts, soft)
            } else {
                soft_loss(params, attention, ts, soft).map(|loss| SoftOutcome { loss, grad: Vec::new() })
            }
        })
        .collect();
    let m = scenes.len() as f64;
    let mut grad = vec![0.0; params.n_params()];
    let mut dw = 0.0;
    let mut per_direction: Vec<f64> = Vec::new();
    for r in results {
        let o = r?;
        dw += o.loss.dw_total / m;
        if per_direction.is_empty() {
            per_direction = vec![0.0; o.loss.per_direction.len()];
        }
        for (a, b) in per_direction.iter_mut().zip(&o.loss.per_direction) {
            *a += b / m;
        }
        for (a, b) in grad.iter_mut().zip(&o.grad) {
            *a += b / m;
        }
    }
    Ok((
        TrainLogRow {
            step: 0,
            dw_loss: dw,
            per_direction,
        },
        grad,
    ))
}

/// Plain gradient descent on the batch-mean direction-weighted loss.
pub fn train_scorer(
    initial: &ScorerParams,
    attention: &AttentionParams,
    scenes: &[TrainingScene],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, LearnError> {
    if cfg.steps == 0 {
        return Err(LearnError::InvalidHyper("steps must be at least 1".into()));
    }
    if scenes.is_empty() {
        return Err(LearnError::InvalidHyper("training batch is empty".into()));
    }
    if !cfg.lr.is_finite() || cfg.lr < 0.0 {
        return Err(LearnError::InvalidHyper(format!("lr must be finite and >= 0, got {}", cfg.lr)));
    }
    let hidden = initial.hidden;
    let mut flat = initial.to_flat();
    let mut log = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        let params = ScorerParams::from_flat(hidden, &flat).expect("flat layout is stable");
        let last = step == cfg.steps;
        let (mut row, grad) = batch_step(&params, attention, scenes, &cfg.soft, !last)?;
        row.step = step;
        if !row.dw_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(LearnError::DivergedTraining { step, loss: row.dw_loss });
        }
        log.push(row);
        if !last && cfg.lr > 0.0 {
            for (p, g) in flat.iter_mut().zip(&grad) {
                *p -= cfg.lr * g;
            }
        }
    }
    let params = ScorerParams::from_flat(hidden, &flat).expect("flat layout is stable");
    Ok(TrainOutcome { params, log })
}
