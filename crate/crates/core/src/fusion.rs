//! Per-cell multi-head attention over agents, QCM modulation, the
//! feed-forward fusion step and the moments-based box decoder.
//!
//! At every cell the ego (agent 0, confidence 1) attends to each agent that
//! has a feature there:
//!
//! ```text
//! s_a^h = p_a exp(q^h . k_a^h / sqrt(dh)) / sum_b p_b exp(q^h . k_b^h / sqrt(dh))
//! W_a   = mean_h(s_a^h) * C_a
//! u     = sum_a W_a p_a F_a
//! out   = Wo Wv u + FFN(Wo Wv u)
//! ```
//!
//! `p_a` is the presence of agent `a` at the cell: 0 or 1 on the hard path,
//! a soft mask during training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comms::{logistic, QueryConfidenceMap};
use crate::features::{BevFeatureMap, SparseFeatureMap};
use crate::geometry::RotatedBox;
use crate::grid::GridSpec;

/// Logit gap, per head, between an agent that observed evidence and one that did not.
pub const EVIDENCE_LOGIT_GAP: f64 = 6.0;

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid attention parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// Value/output identity, zero FFN output layer, keys read the evidence channel.
    #[default]
    Evidence,
    /// Value/output identity, zero FFN output layer, zero query/key projections.
    Identity,
    /// Small random weights everywhere.
    Random,
}

/// Row-major `out x in` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub n_heads: usize,
    pub channels: usize,
    pub d_ff: usize,
    pub wq: Vec<f64>,
    pub bq: Vec<f64>,
    pub wk: Vec<f64>,
    pub bk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

fn identity(d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        m[i * d + i] = 1.0;
    }
    m
}

fn matvec(m: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (o, row) in out.iter_mut().zip(m.chunks_exact(n)) {
        *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

fn matvec_t(m: &[f64], y: &[f64], out: &mut [f64]) {
    let n = out.len();
    out.iter_mut().for_each(|o| *o = 0.0);
    for (yi, row) in y.iter().zip(m.chunks_exact(n)) {
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * yi;
        }
    }
}

impl AttentionParams {
    pub fn new(
        channels: usize,
        n_heads: usize,
        d_ff: usize,
        mode: InitMode,
        seed: u64,
    ) -> Result<Self, FusionError> {
        if n_heads == 0 || channels == 0 || !channels.is_multiple_of(n_heads) {
            return Err(FusionError::InvalidParams(format!(
                "{channels} channels cannot be split into {n_heads} heads"
            )));
        }
        if d_ff == 0 {
            return Err(FusionError::InvalidParams("d_ff must be positive".into()));
        }
        let d = channels;
        let mut p = AttentionParams {
            n_heads,
            channels,
            d_ff,
            wq: vec![0.0; d * d],
            bq: vec![0.0; d],
            wk: vec![0.0; d * d],
            bk: vec![0.0; d],
            wv: identity(d),
            wo: identity(d),
            w1: vec![0.0; d_ff * d],
            b1: vec![0.0; d_ff],
            w2: vec![0.0; d * d_ff],
            b2: vec![0.0; d],
        };
        let dh = p.head_dim();
        match mode {
            InitMode::Identity => {}
            InitMode::Evidence => {
                let scale = EVIDENCE_LOGIT_GAP * (dh as f64).sqrt();
                for h in 0..n_heads {
                    p.bq[h * dh] = scale;
                    p.wk[h * dh * d] = 1.0;
                }
            }
            InitMode::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut fill = |m: &mut Vec<f64>, fan_in: usize| {
                    let lim = 1.0 / (fan_in as f64).sqrt();
                    m.iter_mut().for_each(|v| *v = rng.gen_range(-lim..lim));
                };
                fill(&mut p.wq, d);
                fill(&mut p.wk, d);
                fill(&mut p.wv, d);
                fill(&mut p.wo, d);
                fill(&mut p.w1, d);
                fill(&mut p.w2, d_ff);
            }
        }
        Ok(p)
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.n_heads
    }

    pub fn is_valid(&self) -> bool {
        let (d, f) = (self.channels, self.d_ff);
        self.n_heads > 0
            && d % self.n_heads == 0
            && self.wq.len() == d * d
            && self.bq.len() == d
            && self.wk.len() == d * d
            && self.bk.len() == d
            && self.wv.len() == d * d
            && self.wo.len() == d * d
            && self.w1.len() == f * d
            && self.b1.len() == f
            && self.w2.len() == d * f
            && self.b2.len() == d
            && [
                &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.wo, &self.w1, &self.b1,
                &self.w2, &self.b2,
            ]
            .iter()
            .all(|m| m.iter().all(|v| v.is_finite()))
    }
}

/// One collaborator's contribution as seen by the ego, on the ego grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CollaboratorInput {
    /// `H * W * D`, zero where nothing was transmitted.
    pub features: Vec<f64>,
    /// `H * W` presence in `[0, 1]`.
    pub presence: Vec<f64>,
    /// `H * W` query confidence `C`.
    pub confidence: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionInput {
    pub grid: GridSpec,
    pub channels: usize,
    pub ego: Vec<f64>,
    pub collaborators: Vec<CollaboratorInput>,
}

impl FusionInput {
    pub fn single(ego: &BevFeatureMap) -> Self {
        FusionInput {
            grid: ego.grid,
            channels: ego.channels,
            ego: ego.values.iter().map(|&v| v as f64).collect(),
            collaborators: Vec::new(),
        }
    }

    /// Hard path: presence is 1 exactly at received cells.
    pub fn from_messages(
        ego: &BevFeatureMap,
        received: &[SparseFeatureMap],
        qcm: &QueryConfidenceMap,
    ) -> Result<Self, FusionError> {
        let (h, w, d) = (ego.height(), ego.width(), ego.channels);
        if qcm.values.len() != received.len() || qcm.height != h || qcm.width != w {
            return Err(FusionError::ShapeMismatch(format!(
                "{} messages and a {}x{}x{} QCM for a {h}x{w} ego grid",
                received.len(),
                qcm.height,
                qcm.width,
                qcm.values.len()
            )));
        }
        let mut input = Self::single(ego);
        for (msg, conf) in received.iter().zip(&qcm.values) {
            if msg.height != h || msg.width != w || msg.channels != d {
                return Err(FusionError::ShapeMismatch(format!(
                    "message {}x{}x{} vs ego {h}x{w}x{d}",
                    msg.height, msg.width, msg.channels
                )));
            }
            let mut features = vec![0.0; h * w * d];
            let mut presence = vec![0.0; h * w];
            for e in &msg.entries {
                let i = e.row * w + e.col;
                presence[i] = 1.0;
                for (dst, &v) in features[i * d..(i + 1) * d].iter_mut().zip(&e.values) {
                    *dst = v as f64;
                }
            }
            input.collaborators.push(CollaboratorInput {
                features,
                presence,
                confidence: conf.clone(),
            });
        }
        Ok(input)
    }

    pub fn n_agents(&self) -> usize {
        self.collaborators.len() + 1
    }

    fn validate(&self, params: &AttentionParams) -> Result<(), FusionError> {
        let n = self.grid.n_cells();
        let d = self.channels;
        if !params.is_valid() {
            return Err(FusionError::InvalidParams("inconsistent shapes or non-finite values".into()));
        }
        if params.channels != d || self.ego.len() != n * d {
            return Err(FusionError::ShapeMismatch(format!(
                "params expect {} channels, features have {d}",
                params.channels
            )));
        }
        for c in &self.collaborators {
            if c.features.len() != n * d || c.presence.len() != n || c.confidence.len() != n {
                return Err(FusionError::ShapeMismatch("collaborator plane sizes".into()));
            }
        }
        Ok(())
    }

    fn agent_feature(&self, agent: usize, cell: usize) -> &[f64] {
        let d = self.channels;
        if agent == 0 {
            &self.ego[cell * d..(cell + 1) * d]
        } else {
            &self.collaborators[agent - 1].features[cell * d..(cell + 1) * d]
        }
    }

    fn presence(&self, agent: usize, cell: usize) -> f64 {
        if agent == 0 {
            1.0
        } else {
            self.collaborators[agent - 1].presence[cell]
        }
    }

    fn confidence(&self, agent: usize, cell: usize) -> f64 {
        if agent == 0 {
            1.0
        } else {
            self.collaborators[agent - 1].confidence[cell]
        }
    }

    /// Ego first, then collaborators in an order that depends only on their
    /// inputs, so that results do not depend on how collaborators are listed.
    fn canonical_order(&self, cell: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (1..self.n_agents())
            .filter(|&a| self.presence(a, cell) > 0.0)
            .collect();
        order.sort_by(|&a, &b| {
            self.presence(a, cell)
                .total_cmp(&self.presence(b, cell))
                .then(self.confidence(a, cell).total_cmp(&self.confidence(b, cell)))
                .then_with(|| {
                    let (fa, fb) = (self.agent_feature(a, cell), self.agent_feature(b, cell));
                    fa.iter()
                        .zip(fb)
                        .map(|(x, y)| x.total_cmp(y))
                        .find(|o| o.is_ne())
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
        });
        order.insert(0, 0);
        order
    }
}

/// Per-cell, per-agent weights, `H * W * n_agents`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub n_agents: usize,
    /// Head-averaged softmax weights before QCM modulation.
    pub pre_qcm: Vec<f64>,
    /// `W^DSA`: `pre_qcm * C`.
    pub weights: Vec<f64>,
}

struct CellAttention {
    order: Vec<usize>,
    /// Per head, per ordered agent: `p_b exp(l_b - m) / Z` without the presence factor.
    ratio: Vec<Vec<f64>>,
    /// Per head, per ordered agent: `s_b^h`.
    s_head: Vec<Vec<f64>>,
    /// Per ordered agent: head-averaged `s_b`.
    s: Vec<f64>,
}

fn cell_attention(input: &FusionInput, params: &AttentionParams, cell: usize) -> CellAttention {
    let d = params.channels;
    let dh = params.head_dim();
    let scale = (dh as f64).sqrt();
    let order = input.canonical_order(cell);
    let mut q = vec![0.0; d];
    matvec(&params.wq, input.agent_feature(0, cell), &mut q);
    q.iter_mut().zip(&params.bq).for_each(|(a, b)| *a += b);
    let keys: Vec<Vec<f64>> = order
        .iter()
        .map(|&a| {
            let mut k = vec![0.0; d];
            matvec(&params.wk, input.agent_feature(a, cell), &mut k);
            k.iter_mut().zip(&params.bk).for_each(|(x, b)| *x += b);
            k
        })
        .collect();
    let n = order.len();
    let mut ratio = Vec::with_capacity(params.n_heads);
    let mut s_head = Vec::with_capacity(params.n_heads);
    let mut s = vec![0.0; n];
    for h in 0..params.n_heads {
        let r = h * dh..(h + 1) * dh;
        let logits: Vec<f64> = keys
            .iter()
            .map(|k| q[r.clone()].iter().zip(&k[r.clone()]).map(|(a, b)| a * b).sum::<f64>() / scale)
            .collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = order
            .iter()
            .zip(&e)
            .map(|(&a, e)| input.presence(a, cell) * e)
            .sum();
        let rh: Vec<f64> = e.iter().map(|e| e / z).collect();
        let sh: Vec<f64> = order
            .iter()
            .zip(&rh)
            .map(|(&a, r)| input.presence(a, cell) * r)
            .collect();
        for (acc, v) in s.iter_mut().zip(&sh) {
            *acc += v;
        }
        ratio.push(rh);
        s_head.push(sh);
    }
    s.iter_mut().for_each(|v| *v /= params.n_heads as f64);
    CellAttention {
        order,
        ratio,
        s_head,
        s,
    }
}

pub fn dsa_weights(input: &FusionInput, params: &AttentionParams) -> Result<AttentionWeights, FusionError> {
    input.validate(params)?;
    let n = input.n_agents();
    let cells = input.grid.n_cells();
    let mut pre_qcm = vec![0.0; cells * n];
    let mut weights = vec![0.0; cells * n];
    for cell in 0..cells {
        let att = cell_attention(input, params, cell);
        for (&a, &s) in att.order.iter().zip(&att.s) {
            pre_qcm[cell * n + a] = s;
            weights[cell * n + a] = s * input.confidence(a, cell);
        }
    }
    Ok(AttentionWeights {
        n_agents: n,
        pre_qcm,
        weights,
    })
}

/// Fused features on the ego grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedMap {
    pub grid: GridSpec,
    pub channels: usize,
    pub values: Vec<f64>,
    pub n_agents: usize,
    /// `W^DSA` per cell and agent.
    pub attention_trace: Vec<f64>,
}

impl FusedMap {
    pub fn cell(&self, idx: usize) -> &[f64] {
        &self.values[idx * self.channels..(idx + 1) * self.channels]
    }

    pub fn evidence(&self) -> Vec<f64> {
        self.values.chunks_exact(self.channels).map(|v| v[0]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `row,col,agent,weight` for every non-zero weight.
    pub fn attention_csv(&self) -> String {
        let mut out = String::from("row,col,agent,weight\n");
        for (cell, ws) in self.attention_trace.chunks_exact(self.n_agents).enumerate() {
            let (r, c) = (cell / self.grid.width, cell % self.grid.width);
            for (a, w) in ws.iter().enumerate() {
                if *w != 0.0 {
                    out.push_str(&format!("{r},{c},{a},{w:.9}\n"));
                }
            }
        }
        out
    }
}

struct FfnTrace {
    pre: Vec<f64>,
    z1: Vec<f64>,
}

fn ffn(params: &AttentionParams, u: &[f64], out: &mut [f64]) -> FfnTrace {
    let d = params.channels;
    let mut v = vec![0.0; d];
    matvec(&params.wv, u, &mut v);
    let mut pre = vec![0.0; d];
    matvec(&params.wo, &v, &mut pre);
    let mut z1 = vec![0.0; params.d_ff];
    matvec(&params.w1, &pre, &mut z1);
    z1.iter_mut().zip(&params.b1).for_each(|(z, b)| *z += b);
    let a1: Vec<f64> = z1.iter().map(|z| z.max(0.0)).collect();
    matvec(&params.w2, &a1, out);
    for ((o, p), b) in out.iter_mut().zip(&pre).zip(&params.b2) {
        *o += p + b;
    }
    FfnTrace { pre, z1 }
}

fn weighted_sum(input: &FusionInput, att: &CellAttention, cell: usize, d: usize) -> Vec<f64> {
    let mut u = vec![0.0; d];
    for (&a, &s) in att.order.iter().zip(&att.s) {
        let w = s * input.confidence(a, cell) * input.presence(a, cell);
        for (acc, f) in u.iter_mut().zip(input.agent_feature(a, cell)) {
            *acc += w * f;
        }
    }
    u
}

pub fn fuse(
    input: &FusionInput,
    weights: &AttentionWeights,
    params: &AttentionParams,
) -> Result<FusedMap, FusionError> {
    input.validate(params)?;
    let cells = input.grid.n_cells();
    let n = input.n_agents();
    if weights.n_agents != n || weights.weights.len() != cells * n {
        return Err(FusionError::ShapeMismatch("weights do not match the agents".into()));
    }
    let d = params.channels;
    let mut values = vec![0.0; cells * d];
    for cell in 0..cells {
        let order = input.canonical_order(cell);
        let mut u = vec![0.0; d];
        for &a in &order {
            let w = weights.weights[cell * n + a] * input.presence(a, cell);
            for (acc, f) in u.iter_mut().zip(input.agent_feature(a, cell)) {
                *acc += w * f;
            }
        }
        ffn(params, &u, &mut values[cell * d..(cell + 1) * d]);
    }
    Ok(FusedMap {
        grid: input.grid,
        channels: d,
        values,
        n_agents: n,
        attention_trace: weights.weights.clone(),
    })
}

/// `dsa_weights` followed by `fuse`.
pub fn fuse_all(input: &FusionInput, params: &AttentionParams) -> Result<FusedMap, FusionError> {
    let w = dsa_weights(input, params)?;
    fuse(input, &w, params)
}

/// Gradients of a scalar loss with respect to each collaborator's
/// confidence and presence planes.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionGrad {
    pub d_confidence: Vec<Vec<f64>>,
    pub d_presence: Vec<Vec<f64>>,
}

/// Backpropagates `d_out` (`H * W * D`) through attention and fusion.
pub fn fuse_backward(
    input: &FusionInput,
    params: &AttentionParams,
    d_out: &[f64],
) -> Result<FusionGrad, FusionError> {
    input.validate(params)?;
    let cells = input.grid.n_cells();
    let d = params.channels;
    if d_out.len() != cells * d {
        return Err(FusionError::ShapeMismatch("output gradient size".into()));
    }
    let k = input.collaborators.len();
    let mut grad = FusionGrad {
        d_confidence: vec![vec![0.0; cells]; k],
        d_presence: vec![vec![0.0; cells]; k],
    };
    let n_heads = params.n_heads as f64;
    for cell in 0..cells {
        let g_out = &d_out[cell * d..(cell + 1) * d];
        if k == 0 || g_out.iter().all(|&g| g == 0.0) {
            continue;
        }
        let att = cell_attention(input, params, cell);
        let u = weighted_sum(input, &att, cell, d);
        let mut out = vec![0.0; d];
        let tr = ffn(params, &u, &mut out);

        // out = pre + W2 relu(W1 pre + b1) + b2
        let mut g_a1 = vec![0.0; params.d_ff];
        matvec_t(&params.w2, g_out, &mut g_a1);
        for (g, z) in g_a1.iter_mut().zip(&tr.z1) {
            if *z <= 0.0 {
                *g = 0.0;
            }
        }
        let mut g_pre = vec![0.0; d];
        matvec_t(&params.w1, &g_a1, &mut g_pre);
        g_pre.iter_mut().zip(g_out).for_each(|(a, b)| *a += b);
        let _ = &tr.pre;
        let mut g_v = vec![0.0; d];
        matvec_t(&params.wo, &g_pre, &mut g_v);
        let mut g_u = vec![0.0; d];
        matvec_t(&params.wv, &g_v, &mut g_u);

        // u = sum_a s_a C_a p_a F_a
        let m = att.order.len();
        let mut g_s = vec![0.0; m];
        for (j, &a) in att.order.iter().enumerate() {
            let fdot: f64 = input.agent_feature(a, cell).iter().zip(&g_u).map(|(f, g)| f * g).sum();
            let (c, p) = (input.confidence(a, cell), input.presence(a, cell));
            g_s[j] = c * p * fdot;
            if a > 0 {
                grad.d_confidence[a - 1][cell] += att.s[j] * p * fdot;
                grad.d_presence[a - 1][cell] += att.s[j] * c * fdot;
            }
        }
        // s_b = mean_h s_b^h, ds_a^h/dp_b = r_b^h (delta_ab - s_a^h)
        for h in 0..params.n_heads {
            let mix: f64 = g_s.iter().zip(&att.s_head[h]).map(|(g, s)| g * s).sum();
            for (j, &b) in att.order.iter().enumerate() {
                if b > 0 {
                    grad.d_presence[b - 1][cell] += att.ratio[h][j] * (g_s[j] - mix) / n_heads;
                }
            }
        }
    }
    Ok(grad)
}

/// Decodes boxes from the fused evidence channel.
///
/// Cells with `logistic(evidence) > conf_threshold` are grouped by
/// 8-connectivity; each group gives one box from its evidence-weighted
/// first and second moments, with side `sqrt(12 lambda + cell_size^2)`
/// along each principal axis.
pub fn decode(fused: &FusedMap, conf_threshold: f64) -> Vec<RotatedBox> {
    let grid = fused.grid;
    let (h, w) = (grid.height, grid.width);
    let evidence = fused.evidence();
    let conf: Vec<f64> = evidence.iter().map(|&v| logistic(v)).collect();
    let active: Vec<bool> = conf.iter().map(|&c| c > conf_threshold).collect();
    let mut seen = vec![false; h * w];
    let mut boxes = Vec::new();
    for start in 0..h * w {
        if !active[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut members = Vec::new();
        while let Some(i) = stack.pop() {
            members.push(i);
            let (r, c) = ((i / w) as isize, (i % w) as isize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let j = nr as usize * w + nc as usize;
                    if active[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        members.sort_unstable();
        boxes.push(cluster_box(&grid, &members, &evidence, &conf));
    }
    boxes.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    boxes
}

fn cluster_box(grid: &GridSpec, members: &[usize], evidence: &[f64], conf: &[f64]) -> RotatedBox {
    let w = grid.width;
    let mut weights: Vec<f64> = members.iter().map(|&i| evidence[i].max(0.0)).collect();
    if weights.iter().sum::<f64>() <= 0.0 {
        weights.iter_mut().for_each(|v| *v = 1.0);
    }
    let total: f64 = weights.iter().sum();
    let pts: Vec<_> = members.iter().map(|&i| grid.cell_center(i / w, i % w)).collect();
    let mx = pts.iter().zip(&weights).map(|(p, q)| p.x * q).sum::<f64>() / total;
    let my = pts.iter().zip(&weights).map(|(p, q)| p.y * q).sum::<f64>() / total;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (p, q) in pts.iter().zip(&weights) {
        let (dx, dy) = (p.x - mx, p.y - my);
        sxx += q * dx * dx;
        syy += q * dy * dy;
        sxy += q * dx * dy;
    }
    sxx /= total;
    syy /= total;
    sxy /= total;
    let mean = 0.5 * (sxx + syy);
    let spread = (0.25 * (sxx - syy).powi(2) + sxy * sxy).sqrt();
    let (l1, l2) = (mean + spread, (mean - spread).max(0.0));
    let theta = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    let cs2 = grid.cell_size * grid.cell_size;
    let length = (12.0 * l1 + cs2).sqrt();
    let width = (12.0 * l2 + cs2).sqrt();
    let (mut cos_a, mut sin_a) = (theta.cos(), theta.sin());
    if cos_a < 0.0 || (cos_a == 0.0 && sin_a < 0.0) {
        cos_a = -cos_a;
        sin_a = -sin_a;
    }
    let confidence = members.iter().map(|&i| conf[i]).fold(0.0, f64::max);
    RotatedBox {
        confidence,
        cx: mx,
        cy: my,
        length,
        width,
        cos_a,
        sin_a,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point;

    fn grid(h: usize, w: usize) -> GridSpec {
        GridSpec::centered(h, w, 1.0, Point::new(0.0, 0.0))
    }

    fn fused_from_evidence(h: usize, w: usize, ev: &[(usize, usize, f64)]) -> FusedMap {
        let g = grid(h, w);
        let mut values = vec![-10.0; h * w];
        for &(r, c, v) in ev {
            values[r * w + c] = v;
        }
        FusedMap {
            grid: g,
            channels: 1,
            values,
            n_agents: 1,
            attention_trace: vec![1.0; h * w],
        }
    }

    #[test]
    fn head_split_validation() {
        assert!(AttentionParams::new(8, 3, 16, InitMode::Identity, 0).is_err());
        assert!(AttentionParams::new(8, 2, 16, InitMode::Evidence, 0).unwrap().is_valid());
    }

    #[test]
    fn self_only_fusion_reproduces_ego() {
        let g = grid(3, 3);
        let mut ego = BevFeatureMap::zeros(g, 4);
        for (i, v) in ego.values.iter_mut().enumerate() {
            *v = (i as f32).sin();
        }
        for mode in [InitMode::Evidence, InitMode::Identity] {
            let p = AttentionParams::new(4, 2, 8, mode, 0).unwrap();
            let f = fuse_all(&FusionInput::single(&ego), &p).unwrap();
            for (a, b) in f.values.iter().zip(&ego.values) {
                assert_eq!(*a, *b as f64);
            }
            assert!(f.attention_trace.iter().all(|&w| w == 1.0));
        }
    }

    #[test]
    fn identical_keys_split_evenly() {
        let g = grid(1, 1);
        let mut ego = BevFeatureMap::zeros(g, 2);
        ego.values = vec![0.5, 0.25];
        let input = FusionInput {
            grid: g,
            channels: 2,
            ego: vec![0.5, 0.25],
            collaborators: vec![CollaboratorInput {
                features: vec![0.5, 0.25],
                presence: vec![1.0],
                confidence: vec![1.0],
            }],
        };
        let p = AttentionParams::new(2, 1, 4, InitMode::Random, 9).unwrap();
        let w = dsa_weights(&input, &p).unwrap();
        assert!((w.weights[0] - 0.5).abs() < 1e-15);
        assert!((w.weights[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn evidence_keys_prefer_observers() {
        let g = grid(1, 1);
        let input = FusionInput {
            grid: g,
            channels: 2,
            ego: vec![0.0, 0.3],
            collaborators: vec![CollaboratorInput {
                features: vec![1.0, 0.1],
                presence: vec![1.0],
                confidence: vec![0.8],
            }],
        };
        let p = AttentionParams::new(2, 2, 4, InitMode::Evidence, 0).unwrap();
        let w = dsa_weights(&input, &p).unwrap();
        let expected = 1.0 / (1.0 + (-EVIDENCE_LOGIT_GAP).exp());
        assert!((w.pre_qcm[1] - expected).abs() < 1e-12);
        let f = fuse(&input, &w, &p).unwrap();
        assert!((f.values[0] - 0.8 * expected).abs() < 1e-12);
    }

    #[test]
    fn decode_empty_and_counts() {
        assert!(decode(&fused_from_evidence(6, 6, &[]), 0.6).is_empty());
        let two = fused_from_evidence(8, 8, &[(0, 0, 1.0), (0, 1, 1.0), (6, 6, 1.0), (7, 7, 1.0)]);
        assert_eq!(decode(&two, 0.6).len(), 2);
    }

    #[test]
    fn decode_axis_aligned_cluster() {
        let mut ev = Vec::new();
        for r in 2..4 {
            for c in 1..5 {
                ev.push((r, c, 5.0));
            }
        }
        let boxes = decode(&fused_from_evidence(6, 6, &ev), 0.5);
        assert_eq!(boxes.len(), 1);
        let b = boxes[0];
        // 4 cells along x and 2 along y recover a 4 x 2 box.
        assert!((b.length - 4.0).abs() < 1e-9, "{b:?}");
        assert!((b.width - 2.0).abs() < 1e-9, "{b:?}");
        assert!((b.cos_a - 1.0).abs() < 1e-12);
        assert!((b.cx - 0.0).abs() < 1e-12 && (b.cy - 0.0).abs() < 1e-12);
        assert!((b.confidence - logistic(5.0)).abs() < 1e-12);
    }

    #[test]
    fn decode_vertical_cluster_canonical_heading() {
        let ev: Vec<_> = (0..5).map(|r| (r, 2, 3.0)).collect();
        let b = decode(&fused_from_evidence(6, 6, &ev), 0.5)[0];
        assert!(b.cos_a >= 0.0);
        assert!((b.sin_a.abs() - 1.0).abs() < 1e-12);
        assert!((b.length - 5.0).abs() < 1e-9);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let g = grid(2, 2);
        let d = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut rnd = |n: usize, lo: f64, hi: f64| -> Vec<f64> { (0..n).map(|_| rng.gen_range(lo..hi)).collect() };
        let input = FusionInput {
            grid: g,
            channels: d,
            ego: rnd(4 * d, -1.0, 1.0),
            collaborators: (0..2)
                .map(|_| CollaboratorInput {
                    features: rnd(4 * d, -1.0, 1.0),
                    presence: rnd(4, 0.1, 0.9),
                    confidence: rnd(4, 0.1, 0.9),
                })
                .collect(),
        };
        let mut p = AttentionParams::new(d, 2, 6, InitMode::Random, 3).unwrap();
        p.b1 = rnd(6, -0.2, 0.2);
        let weights = rnd(4 * d, -1.0, 1.0);
        let loss = |inp: &FusionInput| -> f64 {
            let f = fuse_all(inp, &p).unwrap();
            f.values.iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let grad = fuse_backward(&input, &p, &weights).unwrap();
        let h = 1e-6;
        for k in 0..2 {
            for cell in 0..4 {
                for which in 0..2 {
                    let mut up = input.clone();
                    let mut dn = input.clone();
                    let (u, v) = if which == 0 {
                        (&mut up.collaborators[k].confidence[cell], &mut dn.collaborators[k].confidence[cell])
                    } else {
                        (&mut up.collaborators[k].presence[cell], &mut dn.collaborators[k].presence[cell])
                    };
                    *u += h;
                    *v -= h;
                    let num = (loss(&up) - loss(&dn)) / (2.0 * h);
                    let ana = if which == 0 {
                        grad.d_confidence[k][cell]
                    } else {
                        grad.d_presence[k][cell]
                    };
                    assert!((num - ana).abs() <= 1e-6 * num.abs().max(1.0), "k{k} cell{cell} w{which}: {num} vs {ana}");
                }
            }
        }
    }
}
