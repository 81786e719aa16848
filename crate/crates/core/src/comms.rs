//! Query control: confidence scoring, budgeted query clipping, feature
//! messages and their wire format, and the per-ego byte ledger.
//!
//! Wire layout (little-endian):
//!
//! ```text
//! header  "DCPM" | version u16 = 1 | sender u16 | receiver u16 | entry_count u32 | D u16 | reserved u32 = 0
//! entry   row u32 | col u32 | D x f32
//! ```
//!
//! Entries are stored in strictly increasing row-major order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{BevFeatureMap, SparseEntry, SparseFeatureMap};

pub const MESSAGE_MAGIC: &[u8; 4] = b"DCPM";
pub const MESSAGE_VERSION: u16 = 1;
pub const MESSAGE_HEADER_LEN: usize = 20;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DCPW";

#[derive(Debug, Error, PartialEq)]
pub enum CommsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("malformed message: {0}")]
    MalformedMessage(String),
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
}

fn mismatch(what: &str, a: usize, b: usize) -> CommsError {
    CommsError::ShapeMismatch(format!("{what}: {a} vs {b}"))
}

/// Per-collaborator priority planes with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryConfidenceMap {
    pub height: usize,
    pub width: usize,
    /// One plane of `H * W` values per collaborator.
    pub values: Vec<Vec<f64>>,
}

impl QueryConfidenceMap {
    pub fn n_collaborators(&self) -> usize {
        self.values.len()
    }

    pub fn in_unit_range(&self) -> bool {
        self.values
            .iter()
            .flatten()
            .all(|v| (0.0..=1.0).contains(v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Q0Mode {
    /// Request anything.
    #[default]
    Ones,
    /// `1 - ego evidence`: only ask where the ego sees nothing.
    ConfidenceGap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TieBreak {
    /// Top-k within each collaborator's map.
    #[default]
    PerCollaborator,
    /// Top-k over all collaborators jointly (ablation).
    Global,
}

/// Initial query planes, one per collaborator.
pub fn initial_query(mode: Q0Mode, ego: &BevFeatureMap, n_collaborators: usize) -> Vec<Vec<f64>> {
    let plane: Vec<f64> = match mode {
        Q0Mode::Ones => vec![1.0; ego.grid.n_cells()],
        Q0Mode::ConfidenceGap => ego
            .values
            .chunks_exact(ego.channels)
            .map(|v| (1.0 - v[0] as f64).clamp(0.0, 1.0))
            .collect(),
    };
    vec![plane; n_collaborators]
}

fn check_inputs(q0: &[Vec<f64>], pe: &[Vec<f64>], de: &[f64]) -> Result<(), CommsError> {
    if q0.len() != pe.len() {
        return Err(mismatch("collaborator count (q0 vs pe)", q0.len(), pe.len()));
    }
    for (a, b) in q0.iter().zip(pe) {
        if a.len() != de.len() || b.len() != de.len() {
            return Err(mismatch("cells per plane", a.len().max(b.len()), de.len()));
        }
    }
    Ok(())
}

/// Deterministic scorer: `C = clamp(de * pe * q0, 0, 1)`.
pub fn score_reference(
    q0: &[Vec<f64>],
    pe: &[Vec<f64>],
    de: &[f64],
    height: usize,
    width: usize,
) -> Result<QueryConfidenceMap, CommsError> {
    check_inputs(q0, pe, de)?;
    if de.len() != height * width {
        return Err(mismatch("direction embedding cells", de.len(), height * width));
    }
    let values = q0
        .iter()
        .zip(pe)
        .map(|(q, p)| {
            q.iter()
                .zip(p)
                .zip(de)
                .map(|((q, p), d)| (d * p * q).clamp(0.0, 1.0))
                .collect()
        })
        .collect();
    Ok(QueryConfidenceMap {
        height,
        width,
        values,
    })
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub const SCORER_INPUTS: usize = 3;

/// Three affine layers `3 -> hidden -> hidden -> 1` with tanh activations and
/// a logistic output, applied per cell and per collaborator.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorerParams {
    pub hidden: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: f64,
}

/// Activations of one forward pass, kept for backpropagation.
pub struct ScorerTrace {
    input: [f64; SCORER_INPUTS],
    h1: Vec<f64>,
    h2: Vec<f64>,
    pub output: f64,
}

impl ScorerParams {
    pub fn zeros(hidden: usize) -> Self {
        ScorerParams {
            hidden,
            w1: vec![0.0; hidden * SCORER_INPUTS],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden * hidden],
            b2: vec![0.0; hidden],
            w3: vec![0.0; hidden],
            b3: 0.0,
        }
    }

    /// Uniform Glorot-style initialization, zero biases.
    pub fn random(hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |n: usize, fan_in: usize, fan_out: usize| -> Vec<f64> {
            let lim = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-lim..lim)).collect()
        };
        let w1 = fill(hidden * SCORER_INPUTS, SCORER_INPUTS, hidden);
        let w2 = fill(hidden * hidden, hidden, hidden);
        let w3 = fill(hidden, hidden, 1);
        ScorerParams {
            hidden,
            w1,
            b1: vec![0.0; hidden],
            w2,
            b2: vec![0.0; hidden],
            w3,
            b3: 0.0,
        }
    }

    pub fn n_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len() + self.w3.len() + 1
    }

    pub fn is_valid(&self) -> bool {
        let h = self.hidden;
        self.w1.len() == h * SCORER_INPUTS
            && self.b1.len() == h
            && self.w2.len() == h * h
            && self.b2.len() == h
            && self.w3.len() == h
            && self.to_flat().iter().all(|v| v.is_finite())
    }

    /// Parameters in the order `w1, b1, w2, b2, w3, b3`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        v.extend(&self.w1);
        v.extend(&self.b1);
        v.extend(&self.w2);
        v.extend(&self.b2);
        v.extend(&self.w3);
        v.push(self.b3);
        v
    }

    pub fn from_flat(hidden: usize, flat: &[f64]) -> Option<Self> {
        let mut p = Self::zeros(hidden);
        if flat.len() != p.n_params() {
            return None;
        }
        let mut it = flat.iter().copied();
        for slot in p
            .w1
            .iter_mut()
            .chain(p.b1.iter_mut())
            .chain(p.w2.iter_mut())
            .chain(p.b2.iter_mut())
            .chain(p.w3.iter_mut())
        {
            *slot = it.next()?;
        }
        p.b3 = it.next()?;
        Some(p)
    }

    pub fn forward(&self, input: [f64; SCORER_INPUTS]) -> ScorerTrace {
        let h = self.hidden;
        let h1: Vec<f64> = (0..h)
            .map(|i| {
                let z = self.b1[i]
                    + (0..SCORER_INPUTS)
                        .map(|j| self.w1[i * SCORER_INPUTS + j] * input[j])
                        .sum::<f64>();
                z.tanh()
            })
            .collect();
        let h2: Vec<f64> = (0..h)
            .map(|i| {
                let z = self.b2[i] + (0..h).map(|j| self.w2[i * h + j] * h1[j]).sum::<f64>();
                z.tanh()
            })
            .collect();
        let z3 = self.b3 + self.w3.iter().zip(&h2).map(|(w, a)| w * a).sum::<f64>();
        ScorerTrace {
            input,
            h1,
            h2,
            output: logistic(z3),
        }
    }

    /// Accumulates `d_out * d(output)/d(params)` into `grad` (flat layout).
    pub fn backward(&self, trace: &ScorerTrace, d_out: f64, grad: &mut [f64]) {
        let h = self.hidden;
        let n_w1 = h * SCORER_INPUTS;
        let (o_b1, o_w2) = (n_w1, n_w1 + h);
        let o_b2 = o_w2 + h * h;
        let o_w3 = o_b2 + h;
        let o_b3 = o_w3 + h;

        let dz3 = d_out * trace.output * (1.0 - trace.output);
        grad[o_b3] += dz3;
        let mut dz2 = vec![0.0; h];
        for i in 0..h {
            grad[o_w3 + i] += dz3 * trace.h2[i];
            dz2[i] = dz3 * self.w3[i] * (1.0 - trace.h2[i] * trace.h2[i]);
        }
        let mut dz1 = vec![0.0; h];
        for i in 0..h {
            grad[o_b2 + i] += dz2[i];
            for j in 0..h {
                grad[o_w2 + i * h + j] += dz2[i] * trace.h1[j];
                dz1[j] += dz2[i] * self.w2[i * h + j];
            }
        }
        for j in 0..h {
            dz1[j] *= 1.0 - trace.h1[j] * trace.h1[j];
            grad[o_b1 + j] += dz1[j];
            for k in 0..SCORER_INPUTS {
                grad[j * SCORER_INPUTS + k] += dz1[j] * trace.input[k];
            }
        }
    }

    /// `DCPW` checkpoint: magic, `u32` parameter count, `f32` values.
    pub fn to_checkpoint(&self) -> Vec<u8> {
        let flat = self.to_flat();
        let mut out = Vec::with_capacity(8 + 4 * flat.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(flat.len() as u32).to_le_bytes());
        for v in flat {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_checkpoint(hidden: usize, bytes: &[u8]) -> Result<Self, CommsError> {
        let bad = |m: &str| CommsError::MalformedCheckpoint(m.to_string());
        if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic or truncated header"));
        }
        let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if bytes.len() != 8 + 4 * n {
            return Err(bad("length does not match parameter count"));
        }
        let flat: Vec<f64> = bytes[8..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Self::from_flat(hidden, &flat).ok_or_else(|| bad("parameter count does not match hidden width"))
    }
}

/// Scores every cell of every collaborator with the MLP.
pub fn score_mlp(
    params: &ScorerParams,
    q0: &[Vec<f64>],
    pe: &[Vec<f64>],
    de: &[f64],
    height: usize,
    width: usize,
) -> Result<QueryConfidenceMap, CommsError> {
    check_inputs(q0, pe, de)?;
    if de.len() != height * width {
        return Err(mismatch("direction embedding cells", de.len(), height * width));
    }
    if !params.is_valid() {
        return Err(CommsError::ShapeMismatch("scorer parameters are inconsistent".into()));
    }
    let values = q0
        .iter()
        .zip(pe)
        .map(|(q, p)| {
            (0..de.len())
                .map(|i| params.forward([q[i], p[i], de[i]]).output)
                .collect()
        })
        .collect();
    Ok(QueryConfidenceMap {
        height,
        width,
        values,
    })
}

/// Number of queries a single collaborator may activate.
pub fn per_collaborator_quota(q_max: f64, height: usize, width: usize) -> usize {
    (q_max * (height * width) as f64).floor().max(0.0) as usize
}

/// Binary query planes after budget clipping.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryMap {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<Vec<u8>>,
    pub budget: f64,
    pub q0_mode: Q0Mode,
}

impl QueryMap {
    pub fn activated(&self, collaborator: usize) -> usize {
        self.bits[collaborator].iter().filter(|&&b| b != 0).count()
    }

    pub fn activated_total(&self) -> usize {
        (0..self.bits.len()).map(|k| self.activated(k)).sum()
    }
}

/// Keeps the top `floor(q_max * H * W)` cells of each collaborator's map.
///
/// Ties are broken by `(row, col, collaborator)`; cells with zero confidence
/// are never activated.
pub fn clip_queries(qcm: &QueryConfidenceMap, q_max: f64, mode: TieBreak) -> QueryMap {
    let n_cells = qcm.height * qcm.width;
    let quota = per_collaborator_quota(q_max.clamp(0.0, 1.0), qcm.height, qcm.width);
    let mut bits = vec![vec![0u8; n_cells]; qcm.values.len()];
    match mode {
        TieBreak::PerCollaborator => {
            for (k, plane) in qcm.values.iter().enumerate() {
                let mut order: Vec<usize> = (0..n_cells).filter(|&i| plane[i] > 0.0).collect();
                order.sort_by(|&a, &b| plane[b].total_cmp(&plane[a]).then(a.cmp(&b)));
                for &i in order.iter().take(quota) {
                    bits[k][i] = 1;
                }
            }
        }
        TieBreak::Global => {
            let mut order: Vec<(usize, usize)> = (0..n_cells)
                .flat_map(|i| (0..qcm.values.len()).map(move |k| (i, k)))
                .filter(|&(i, k)| qcm.values[k][i] > 0.0)
                .collect();
            order.sort_by(|&(ia, ka), &(ib, kb)| {
                qcm.values[kb][ib]
                    .total_cmp(&qcm.values[ka][ia])
                    .then((ia, ka).cmp(&(ib, kb)))
            });
            for &(i, k) in order.iter().take(quota * qcm.values.len()) {
                bits[k][i] = 1;
            }
        }
    }
    QueryMap {
        height: qcm.height,
        width: qcm.width,
        bits,
        budget: q_max,
        q0_mode: Q0Mode::default(),
    }
}

/// Sparse features sent from `sender` to `receiver`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMessage {
    pub sender: u16,
    pub receiver: u16,
    pub channels: usize,
    pub entries: Vec<SparseEntry>,
    pub payload_bytes: usize,
}

pub fn message_len(entries: usize, channels: usize) -> usize {
    MESSAGE_HEADER_LEN + entries * (8 + 4 * channels)
}

impl FeatureMessage {
    pub fn new(sender: u16, receiver: u16, channels: usize, entries: Vec<SparseEntry>) -> Self {
        let payload_bytes = message_len(entries.len(), channels);
        FeatureMessage {
            sender,
            receiver,
            channels,
            entries,
            payload_bytes,
        }
    }

    pub fn to_sparse(&self, height: usize, width: usize) -> SparseFeatureMap {
        SparseFeatureMap {
            height,
            width,
            channels: self.channels,
            entries: self.entries.clone(),
        }
    }
}

/// Collects the sender's features at its activated cells, in row-major order.
pub fn build_message(
    query: &[u8],
    features: &BevFeatureMap,
    sender: u16,
    receiver: u16,
) -> Result<FeatureMessage, CommsError> {
    let sparse = SparseFeatureMap::sparsify(features, query)
        .map_err(|e| CommsError::ShapeMismatch(e.to_string()))?;
    Ok(FeatureMessage::new(
        sender,
        receiver,
        features.channels,
        sparse.entries,
    ))
}

pub fn serialize(msg: &FeatureMessage) -> Vec<u8> {
    let mut out = Vec::with_capacity(msg.payload_bytes);
    out.extend_from_slice(MESSAGE_MAGIC);
    out.extend_from_slice(&MESSAGE_VERSION.to_le_bytes());
    out.extend_from_slice(&msg.sender.to_le_bytes());
    out.extend_from_slice(&msg.receiver.to_le_bytes());
    out.extend_from_slice(&(msg.entries.len() as u32).to_le_bytes());
    out.extend_from_slice(&(msg.channels as u16).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for e in &msg.entries {
        out.extend_from_slice(&(e.row as u32).to_le_bytes());
        out.extend_from_slice(&(e.col as u32).to_le_bytes());
        for v in &e.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses a message for a receiver whose grid is `height x width`.
pub fn deserialize(bytes: &[u8], height: usize, width: usize) -> Result<FeatureMessage, CommsError> {
    let bad = |m: String| CommsError::MalformedMessage(m);
    if bytes.len() < MESSAGE_HEADER_LEN {
        return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != MESSAGE_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u16_at(4);
    if version != MESSAGE_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let sender = u16_at(6);
    let receiver = u16_at(8);
    let count = u32_at(10) as usize;
    let channels = u16_at(14) as usize;
    if u32_at(16) != 0 {
        return Err(bad("reserved field is not zero".into()));
    }
    if channels == 0 {
        return Err(bad("zero channels".into()));
    }
    let entry_len = 8 + 4 * channels;
    let expected = count
        .checked_mul(entry_len)
        .and_then(|n| n.checked_add(MESSAGE_HEADER_LEN));
    if expected != Some(bytes.len()) {
        return Err(bad(format!(
            "{} entries of {} bytes do not match {} payload bytes",
            count,
            entry_len,
            bytes.len() - MESSAGE_HEADER_LEN
        )));
    }
    let mut entries = Vec::with_capacity(count);
    let mut last: Option<usize> = None;
    for chunk in bytes[MESSAGE_HEADER_LEN..].chunks_exact(entry_len) {
        let row = u32::from_le_bytes(chunk[0..4].try_into().unwrap()) as usize;
        let col = u32::from_le_bytes(chunk[4..8].try_into().unwrap()) as usize;
        if row >= height || col >= width {
            return Err(bad(format!("cell ({row}, {col}) outside {height}x{width}")));
        }
        let flat = row * width + col;
        if last.is_some_and(|l| flat <= l) {
            return Err(bad(format!("cell ({row}, {col}) out of order or duplicated")));
        }
        last = Some(flat);
        let values: Vec<f32> = chunk[8..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(bad(format!("non-finite feature at ({row}, {col})")));
        }
        entries.push(SparseEntry { row, col, values });
    }
    Ok(FeatureMessage::new(sender, receiver, channels, entries))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LedgerEntry {
    pub sender: u16,
    pub receiver: u16,
    pub queries: usize,
    pub payload_bytes: usize,
}

/// Record of every message delivered to one ego.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BudgetLedger {
    pub entries: Vec<LedgerEntry>,
}

impl BudgetLedger {
    pub fn record(&mut self, msg: &FeatureMessage) {
        self.entries.push(LedgerEntry {
            sender: msg.sender,
            receiver: msg.receiver,
            queries: msg.entries.len(),
            payload_bytes: msg.payload_bytes,
        });
    }

    pub fn total_bytes(&self) -> usize {
        self.entries.iter().map(|e| e.payload_bytes).sum()
    }

    pub fn total_queries(&self) -> usize {
        self.entries.iter().map(|e| e.queries).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point;
    use crate::grid::GridSpec;

    fn qcm(h: usize, w: usize, planes: Vec<Vec<f64>>) -> QueryConfidenceMap {
        QueryConfidenceMap {
            height: h,
            width: w,
            values: planes,
        }
    }

    #[test]
    fn reference_scorer() {
        let n = 4;
        let q0 = vec![vec![1.0; n]];
        let pe = vec![vec![0.2, 1.0, 0.5, 0.3]];
        let zero = score_reference(&q0, &pe, &[0.0; 4], 2, 2).unwrap();
        assert!(zero.values[0].iter().all(|&v| v == 0.0));
        let ones = score_reference(&q0, &pe, &[1.0; 4], 2, 2).unwrap();
        let argmax = ones.values[0]
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(argmax, 1);
        assert!(matches!(
            score_reference(&q0, &pe, &[1.0; 3], 2, 2),
            Err(CommsError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn constant_network_outputs_half() {
        let p = ScorerParams::zeros(4);
        let c = score_mlp(&p, &[vec![1.0; 4]], &[vec![0.3; 4]], &[1.0, 0.0, 1.0, 0.0], 2, 2).unwrap();
        assert!(c.values[0].iter().all(|&v| v == 0.5));
    }

    #[test]
    fn saturating_path_follows_direction_input() {
        let mut p = ScorerParams::zeros(2);
        // hidden unit 0 reads the direction input; the output unit listens to it.
        p.w1[2] = 10.0;
        p.b1[0] = -5.0;
        p.w2[0] = 10.0;
        p.w3[0] = 20.0;
        p.b3 = -10.0;
        let de = [1.0, 0.0, 1.0, 0.0];
        let c = score_mlp(&p, &[vec![1.0; 4]], &[vec![0.5; 4]], &de, 2, 2).unwrap();
        for (v, d) in c.values[0].iter().zip(de) {
            if d == 1.0 {
                assert!(*v > 0.99, "{v}");
            } else {
                assert!(*v < 0.01, "{v}");
            }
        }
    }

    #[test]
    fn hand_top_two() {
        let c = qcm(2, 2, vec![vec![0.9, 0.1, 0.4, 0.7]]);
        assert_eq!(clip_queries(&c, 0.5, TieBreak::PerCollaborator).bits[0], vec![1, 0, 0, 1]);
        assert_eq!(clip_queries(&c, 0.0, TieBreak::PerCollaborator).activated_total(), 0);
        assert_eq!(clip_queries(&c, 1.0, TieBreak::PerCollaborator).bits[0], vec![1, 1, 1, 1]);
    }

    #[test]
    fn zero_confidence_never_selected() {
        let c = qcm(2, 2, vec![vec![0.0, 0.3, 0.0, 0.0]]);
        assert_eq!(clip_queries(&c, 1.0, TieBreak::PerCollaborator).bits[0], vec![0, 1, 0, 0]);
    }

    #[test]
    fn ties_prefer_lower_cells_and_collaborators() {
        let c = qcm(1, 4, vec![vec![0.5; 4], vec![0.5; 4]]);
        let per = clip_queries(&c, 0.5, TieBreak::PerCollaborator);
        assert_eq!(per.bits[0], vec![1, 1, 0, 0]);
        assert_eq!(per.bits[1], vec![1, 1, 0, 0]);
        let global = clip_queries(&c, 0.25, TieBreak::Global);
        // Two picks overall: cell 0 of both collaborators.
        assert_eq!(global.bits[0], vec![1, 0, 0, 0]);
        assert_eq!(global.bits[1], vec![1, 0, 0, 0]);
    }

    #[test]
    fn global_mode_respects_total_budget() {
        let c = qcm(1, 4, vec![vec![0.9, 0.8, 0.7, 0.6], vec![0.1, 0.1, 0.1, 0.1]]);
        let q = clip_queries(&c, 0.5, TieBreak::Global);
        assert_eq!(q.activated_total(), 4);
        assert_eq!(q.activated(0), 4);
    }

    fn features(h: usize, w: usize, d: usize) -> BevFeatureMap {
        let grid = GridSpec::centered(h, w, 1.0, Point::new(0.0, 0.0));
        let mut m = BevFeatureMap::zeros(grid, d);
        for (i, v) in m.values.iter_mut().enumerate() {
            *v = i as f32 * 0.25 - 3.0;
        }
        m
    }

    #[test]
    fn message_sizes() {
        let f = features(3, 3, 8);
        let empty = build_message(&[0; 9], &f, 1, 0).unwrap();
        assert!(empty.entries.is_empty());
        assert_eq!(serialize(&empty).len(), 20);
        assert_eq!(empty.payload_bytes, 20);

        let mut one = vec![0u8; 9];
        one[4] = 1;
        let m = build_message(&one, &f, 1, 0).unwrap();
        assert_eq!(serialize(&m).len(), 60);
        assert_eq!(m.payload_bytes, 60);

        let full = build_message(&[1; 9], &f, 2, 0).unwrap();
        assert_eq!(full.entries.len(), 9);
        assert_eq!(full.entries[4].values, f.cell(1, 1));
        assert!(build_message(&[1; 4], &f, 2, 0).is_err());
    }

    #[test]
    fn wire_round_trip_and_rejections() {
        let f = features(4, 5, 3);
        let bits: Vec<u8> = (0..20).map(|i| (i % 3 == 1) as u8).collect();
        let m = build_message(&bits, &f, 7, 0).unwrap();
        let bytes = serialize(&m);
        assert_eq!(bytes.len(), m.payload_bytes);
        assert_eq!(deserialize(&bytes, 4, 5).unwrap(), m);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(deserialize(&bad, 4, 5), Err(CommsError::MalformedMessage(_))));
        assert!(deserialize(&bytes[..bytes.len() - 1], 4, 5).is_err());
        assert!(deserialize(&bytes[..10], 4, 5).is_err());
        // The same message does not fit a smaller receiver grid.
        assert!(deserialize(&bytes, 2, 5).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = ScorerParams::random(5, 3);
        let bytes = p.to_checkpoint();
        assert_eq!(&bytes[..4], b"DCPW");
        let back = ScorerParams::from_checkpoint(5, &bytes).unwrap();
        for (a, b) in back.to_flat().iter().zip(p.to_flat()) {
            assert_eq!(*a, b as f32 as f64);
        }
        assert!(ScorerParams::from_checkpoint(4, &bytes).is_err());
        assert!(ScorerParams::from_checkpoint(5, &bytes[..9]).is_err());
    }

    #[test]
    fn scorer_gradient_matches_finite_differences() {
        let p = ScorerParams::random(4, 11);
        let x = [0.7, 0.35, 1.0];
        let mut grad = vec![0.0; p.n_params()];
        let trace = p.forward(x);
        p.backward(&trace, 1.0, &mut grad);
        let flat = p.to_flat();
        let h = 1e-5;
        for i in 0..flat.len() {
            let mut up = flat.clone();
            up[i] += h;
            let mut dn = flat.clone();
            dn[i] -= h;
            let fu = ScorerParams::from_flat(4, &up).unwrap().forward(x).output;
            let fd = ScorerParams::from_flat(4, &dn).unwrap().forward(x).output;
            let num = (fu - fd) / (2.0 * h);
            assert!((num - grad[i]).abs() <= 1e-6 * num.abs().max(1e-3), "param {i}: {num} vs {}", grad[i]);
        }
    }

    #[test]
    fn ledger_totals() {
        let f = features(2, 2, 2);
        let mut ledger = BudgetLedger::default();
        ledger.record(&build_message(&[1, 0, 0, 1], &f, 1, 0).unwrap());
        ledger.record(&build_message(&[0, 0, 0, 1], &f, 2, 0).unwrap());
        assert_eq!(ledger.total_queries(), 3);
        assert_eq!(ledger.total_bytes(), 20 + 2 * 16 + 20 + 16);
    }
}
