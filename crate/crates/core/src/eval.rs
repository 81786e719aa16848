//! Average precision, per-direction metrics, method comparisons, budget and
//! sigma sweeps, and report/plot emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::comms::ScorerParams;
use crate::fusion::{AttentionParams, FusedMap};
use crate::geometry::{iou, RotatedBox, SectorPartition};
use crate::learn::{train_scorer, TrainConfig, TrainOutcome, TrainingScene};
use crate::pipeline::{run_exchange, Method, PreparedScene, Scorer, Settings};
use crate::Error;

/// Area under the all-point interpolated precision/recall curve.
///
/// Predictions are visited by descending confidence (stable on ties) and each
/// matches the unmatched truth of highest IoU, if that IoU reaches
/// `iou_threshold`. No truths and no predictions scores 1; predictions without
/// truths score 0.
pub fn average_precision(preds: &[RotatedBox], truths: &[RotatedBox], iou_threshold: f64) -> f64 {
    if truths.is_empty() {
        return if preds.is_empty() { 1.0 } else { 0.0 };
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].confidence.total_cmp(&preds[a].confidence));
    let mut matched = vec![false; truths.len()];
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(preds.len());
    for (rank, &i) in order.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (j, t) in truths.iter().enumerate() {
            if matched[j] {
                continue;
            }
            let v = iou(&preds[i], t);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            matched[j] = true;
            tp += 1;
        }
        let precision = tp as f64 / (rank + 1) as f64;
        let recall = tp as f64 / truths.len() as f64;
        points.push((recall, precision));
    }
    let mut envelope = 0.0f64;
    for p in points.iter_mut().rev() {
        envelope = envelope.max(p.1);
        p.1 = envelope;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in points {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    ap.clamp(0.0, 1.0)
}

/// AP computed separately for the predictions and truths of each sector.
pub fn pd_average_precision(
    preds: &[RotatedBox],
    truths: &[RotatedBox],
    partition: &SectorPartition,
    iou_threshold: f64,
) -> Vec<f64> {
    (0..partition.n_dir())
        .map(|s| {
            let p: Vec<RotatedBox> = preds.iter().filter(|b| partition.sector_of(b) == s).copied().collect();
            let t: Vec<RotatedBox> = truths.iter().filter(|b| partition.sector_of(b) == s).copied().collect();
            average_precision(&p, &t, iou_threshold)
        })
        .collect()
}

/// Key used for IoU thresholds in reports.
pub fn threshold_key(t: f64) -> String {
    format!("{t:.2}")
}

fn mean_of<'a>(values: impl Iterator<Item = &'a f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Metrics of one method on one scene.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub direction_mask: Vec<u8>,
    pub ap_at_iou: BTreeMap<String, f64>,
    pub ap_at_pd_iou: BTreeMap<String, Vec<f64>>,
    /// Mean per-sector AP over sectors the mask switches on.
    pub masked_sector_ap: BTreeMap<String, Option<f64>>,
    /// Mean per-sector AP over sectors the mask switches off.
    pub nonmasked_sector_ap: BTreeMap<String, Option<f64>>,
    pub bytes_transmitted: usize,
    pub queries: usize,
    pub detections: usize,
    pub truths: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Conventions {
    pub matching: &'static str,
    pub interpolation: &'static str,
    pub empty_sector: &'static str,
    pub aggregation: &'static str,
}

pub const CONVENTIONS: Conventions = Conventions {
    matching: "greedy by descending confidence; each prediction takes the highest-IoU unmatched truth at or above the threshold",
    interpolation: "all-point",
    empty_sector: "no truths and no predictions scores 1.0",
    aggregation: "unweighted mean over seeds; masked/non-masked values average the scene's on/off sectors and skip scenes with none",
};

/// Everything in a report except the method tag.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportMetrics {
    pub budget: f64,
    pub iou_thresholds: Vec<f64>,
    pub seeds: Vec<u64>,
    pub ap_at_iou: BTreeMap<String, f64>,
    pub ap_at_pd_iou: BTreeMap<String, Vec<f64>>,
    pub masked_sector_ap: BTreeMap<String, Option<f64>>,
    pub nonmasked_sector_ap: BTreeMap<String, Option<f64>>,
    pub bytes_transmitted: usize,
    pub queries: usize,
    pub conventions: Conventions,
    pub per_seed: Vec<SeedMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub method: Method,
    pub metrics: ReportMetrics,
}

impl EvalReport {
    pub fn metrics_json(&self) -> String {
        serde_json::to_string_pretty(&self.metrics).expect("metrics serialize")
    }
}

pub fn seed_metrics(
    scene: &PreparedScene,
    boxes: &[RotatedBox],
    bytes: usize,
    queries: usize,
    thresholds: &[f64],
) -> SeedMetrics {
    let truths = scene.truths();
    let mut m = SeedMetrics {
        seed: scene.world.config.seed,
        direction_mask: scene.mask.mask.clone(),
        ap_at_iou: BTreeMap::new(),
        ap_at_pd_iou: BTreeMap::new(),
        masked_sector_ap: BTreeMap::new(),
        nonmasked_sector_ap: BTreeMap::new(),
        bytes_transmitted: bytes,
        queries,
        detections: boxes.len(),
        truths: truths.len(),
    };
    for &t in thresholds {
        let key = threshold_key(t);
        let pd = pd_average_precision(boxes, truths, &scene.partition, t);
        let on = pd.iter().zip(&scene.mask.mask).filter(|(_, &b)| b == 1).map(|(a, _)| a);
        let off = pd.iter().zip(&scene.mask.mask).filter(|(_, &b)| b == 0).map(|(a, _)| a);
        m.masked_sector_ap.insert(key.clone(), mean_of(on));
        m.nonmasked_sector_ap.insert(key.clone(), mean_of(off));
        m.ap_at_iou.insert(key.clone(), average_precision(boxes, truths, t));
        m.ap_at_pd_iou.insert(key, pd);
    }
    m
}

/// Aggregates per-seed metrics in the given order.
pub fn aggregate(budget: f64, thresholds: &[f64], per_seed: Vec<SeedMetrics>) -> ReportMetrics {
    let mut r = ReportMetrics {
        budget,
        iou_thresholds: thresholds.to_vec(),
        seeds: per_seed.iter().map(|s| s.seed).collect(),
        ap_at_iou: BTreeMap::new(),
        ap_at_pd_iou: BTreeMap::new(),
        masked_sector_ap: BTreeMap::new(),
        nonmasked_sector_ap: BTreeMap::new(),
        bytes_transmitted: per_seed.iter().map(|s| s.bytes_transmitted).sum(),
        queries: per_seed.iter().map(|s| s.queries).sum(),
        conventions: CONVENTIONS,
        per_seed: Vec::new(),
    };
    for &t in thresholds {
        let key = threshold_key(t);
        let ap = mean_of(per_seed.iter().map(|s| &s.ap_at_iou[&key])).unwrap_or(0.0);
        r.ap_at_iou.insert(key.clone(), ap);
        let n_dir = per_seed.first().map_or(0, |s| s.ap_at_pd_iou[&key].len());
        let pd = (0..n_dir)
            .map(|d| mean_of(per_seed.iter().map(|s| &s.ap_at_pd_iou[&key][d])).unwrap_or(0.0))
            .collect();
        r.ap_at_pd_iou.insert(key.clone(), pd);
        let masked = mean_of(per_seed.iter().filter_map(|s| s.masked_sector_ap[&key].as_ref()));
        let nonmasked = mean_of(per_seed.iter().filter_map(|s| s.nonmasked_sector_ap[&key].as_ref()));
        r.masked_sector_ap.insert(key.clone(), masked);
        r.nonmasked_sector_ap.insert(key, nonmasked);
    }
    r.per_seed = per_seed;
    r
}

/// Shared inputs of an evaluation.
#[derive(Debug, Clone)]
pub struct EvalContext<'a> {
    pub settings: &'a Settings,
    pub attention: &'a AttentionParams,
    pub thresholds: &'a [f64],
}

/// Runs one method on every scene; the first scene's fused map is returned for tracing.
pub fn run_method(
    scenes: &[PreparedScene],
    method: Method,
    budget: f64,
    scorer: &Scorer,
    ctx: &EvalContext,
) -> Result<(EvalReport, Option<FusedMap>), Error> {
    let results: Vec<Result<(SeedMetrics, FusedMap), Error>> = scenes
        .par_iter()
        .map(|scene| {
            let ex = run_exchange(scene, method, budget, scorer, ctx.attention, ctx.settings)?;
            let m = seed_metrics(
                scene,
                &ex.boxes,
                ex.ledger.total_bytes(),
                ex.ledger.total_queries(),
                ctx.thresholds,
            );
            Ok((m, ex.fused))
        })
        .collect();
    let mut per_seed = Vec::with_capacity(results.len());
    let mut first = None;
    for r in results {
        let (m, fused) = r?;
        if first.is_none() {
            first = Some(fused);
        }
        per_seed.push(m);
    }
    Ok((
        EvalReport {
            method,
            metrics: aggregate(budget, ctx.thresholds, per_seed),
        },
        first,
    ))
}

/// How the sweep obtains a scorer for each sigma.
#[derive(Debug, Clone)]
pub enum ScorerPolicy {
    /// The deterministic reference scorer; sigma has no effect.
    Reference,
    /// Trains one scorer per sigma from the same initialization and batch.
    Trained {
        init: ScorerParams,
        train: TrainConfig,
        batch: Vec<TrainingScene>,
    },
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub budgets: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub methods: Vec<Method>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub method: Method,
    pub budget: f64,
    pub sigma: f64,
    pub ap_at_iou: BTreeMap<String, f64>,
    pub ap_at_pd_iou: BTreeMap<String, Vec<f64>>,
    pub masked_sector_ap: BTreeMap<String, Option<f64>>,
    pub nonmasked_sector_ap: BTreeMap<String, Option<f64>>,
    pub bytes_transmitted: usize,
    pub queries: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepTable {
    pub seeds: Vec<u64>,
    pub iou_thresholds: Vec<f64>,
    pub conventions: Conventions,
    pub rows: Vec<SweepRow>,
    /// Final training loss per sigma, when scorers are trained.
    pub training: Vec<(f64, f64, f64)>,
}

/// Evaluates `budgets x sigmas x methods` on the same scenes.
pub fn sweep(
    scenes: &[PreparedScene],
    spec: &SweepSpec,
    policy: &ScorerPolicy,
    ctx: &EvalContext,
) -> Result<SweepTable, Error> {
    if spec.budgets.is_empty() || spec.sigmas.is_empty() || spec.methods.is_empty() || scenes.is_empty() {
        return Err(Error::Config(vec!["sweep grid must not be empty".into()]));
    }
    let trained: Vec<(Scorer, Option<TrainOutcome>)> = match policy {
        ScorerPolicy::Reference => spec.sigmas.iter().map(|_| (Scorer::Reference, None)).collect(),
        ScorerPolicy::Trained { init, train, batch } => spec
            .sigmas
            .par_iter()
            .map(|&sigma| {
                let mut cfg = *train;
                cfg.soft.sigma = sigma;
                let out = train_scorer(init, ctx.attention, batch, &cfg)?;
                Ok((Scorer::Mlp(out.params.clone()), Some(out)))
            })
            .collect::<Result<Vec<_>, Error>>()?,
    };
    let cells: Vec<(usize, f64, Method)> = (0..spec.sigmas.len())
        .flat_map(|si| {
            spec.budgets
                .iter()
                .flat_map(move |&b| spec.methods.iter().map(move |&m| (si, b, m)))
        })
        .collect();
    let rows = cells
        .par_iter()
        .map(|&(si, budget, method)| {
            let (report, _) = run_method(scenes, method, budget, &trained[si].0, ctx)?;
            let m = report.metrics;
            Ok(SweepRow {
                method,
                budget,
                sigma: spec.sigmas[si],
                ap_at_iou: m.ap_at_iou,
                ap_at_pd_iou: m.ap_at_pd_iou,
                masked_sector_ap: m.masked_sector_ap,
                nonmasked_sector_ap: m.nonmasked_sector_ap,
                bytes_transmitted: m.bytes_transmitted,
                queries: m.queries,
            })
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let training = spec
        .sigmas
        .iter()
        .zip(&trained)
        .filter_map(|(&s, (_, o))| o.as_ref().map(|o| (s, o.initial_loss(), o.final_loss())))
        .collect();
    Ok(SweepTable {
        seeds: scenes.iter().map(|s| s.world.config.seed).collect(),
        iou_thresholds: ctx.thresholds.to_vec(),
        conventions: CONVENTIONS,
        rows,
        training,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

/// One line per (report, seed or mean, threshold).
pub fn reports_csv(reports: &[EvalReport]) -> String {
    let n_dir = reports
        .first()
        .and_then(|r| r.metrics.ap_at_pd_iou.values().next())
        .map_or(0, |v| v.len());
    let mut out = String::from("method,seed,iou,ap,masked_sector_ap,nonmasked_sector_ap");
    for d in 0..n_dir {
        let _ = write!(out, ",pd_ap_dir{d}");
    }
    out.push_str(",bytes_transmitted,queries\n");
    for r in reports {
        let m = &r.metrics;
        for s in &m.per_seed {
            for (key, ap) in &s.ap_at_iou {
                let _ = write!(
                    out,
                    "{},{},{},{:.6},{},{}",
                    r.method,
                    s.seed,
                    key,
                    ap,
                    fmt_opt(s.masked_sector_ap[key]),
                    fmt_opt(s.nonmasked_sector_ap[key])
                );
                for v in &s.ap_at_pd_iou[key] {
                    let _ = write!(out, ",{v:.6}");
                }
                let _ = writeln!(out, ",{},{}", s.bytes_transmitted, s.queries);
            }
        }
        for (key, ap) in &m.ap_at_iou {
            let _ = write!(
                out,
                "{},mean,{},{:.6},{},{}",
                r.method,
                key,
                ap,
                fmt_opt(m.masked_sector_ap[key]),
                fmt_opt(m.nonmasked_sector_ap[key])
            );
            for v in &m.ap_at_pd_iou[key] {
                let _ = write!(out, ",{v:.6}");
            }
            let _ = writeln!(out, ",{},{}", m.bytes_transmitted, m.queries);
        }
    }
    out
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let n_dir = self
            .rows
            .first()
            .and_then(|r| r.ap_at_pd_iou.values().next())
            .map_or(0, |v| v.len());
        let mut out = String::from("method,budget,sigma,iou,ap,masked_sector_ap,nonmasked_sector_ap");
        for d in 0..n_dir {
            let _ = write!(out, ",pd_ap_dir{d}");
        }
        out.push_str(",bytes_transmitted,queries\n");
        for r in &self.rows {
            for (key, ap) in &r.ap_at_iou {
                let _ = write!(
                    out,
                    "{},{},{},{},{:.6},{},{}",
                    r.method,
                    r.budget,
                    r.sigma,
                    key,
                    ap,
                    fmt_opt(r.masked_sector_ap[key]),
                    fmt_opt(r.nonmasked_sector_ap[key])
                );
                for v in &r.ap_at_pd_iou[key] {
                    let _ = write!(out, ",{v:.6}");
                }
                let _ = writeln!(out, ",{},{}", r.bytes_transmitted, r.queries);
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("sweep serializes")
    }

    /// `(budget, value)` series per method and sigma, for one metric.
    pub fn curves<F>(&self, metric: F) -> Vec<(String, Vec<(f64, f64)>)>
    where
        F: Fn(&SweepRow) -> Option<f64>,
    {
        let mut series: BTreeMap<(Method, String), Vec<(f64, f64)>> = BTreeMap::new();
        let many_sigmas = self
            .rows
            .iter()
            .any(|r| r.sigma != self.rows[0].sigma);
        for r in &self.rows {
            if let Some(v) = metric(r) {
                let label = if many_sigmas {
                    format!("{} sigma={}", r.method, r.sigma)
                } else {
                    r.method.to_string()
                };
                series.entry((r.method, label)).or_default().push((r.budget, v));
            }
        }
        series
            .into_iter()
            .map(|((_, label), mut pts)| {
                pts.sort_by(|a, b| a.0.total_cmp(&b.0));
                (label, pts)
            })
            .collect()
    }
}

/// Spearman rank correlation with average ranks for ties; `None` if either
/// side is constant or the lengths differ.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let ranks = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    };
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
];

/// Standalone SVG line chart.
pub fn svg_line_chart(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h) = (640.0, 420.0);
    let (left, right, top, bottom) = (70.0, 180.0, 40.0, 60.0);
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64, 1.0f64);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let pw = w - left - right;
    let ph = h - top - bottom;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, left + pw / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#,
        top + ph,
        left + pw,
        top + ph,
        top + ph
    );
    for i in 0..=5 {
        let fx = x0 + (x1 - x0) * i as f64 / 5.0;
        let fy = y0 + (y1 - y0) * i as f64 / 5.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{:.2}</text><text x="{:.1}" y="{:.1}" text-anchor="end">{:.2}</text>"#,
            sx(fx),
            top + ph + 18.0,
            fx,
            left - 6.0,
            sy(fy) + 4.0,
            fy
        );
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#dddddd"/>"##,
            sy(fy),
            left + pw,
            sy(fy)
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, left + pw / 2.0, h - 16.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );
    for (i, (label, p)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = p.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, path.join(" "));
        for &(x, y) in p {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, sx(x), sy(y));
        }
        let ly = top + 16.0 * i as f64 + 8.0;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            left + pw + 12.0,
            left + pw + 32.0,
            left + pw + 38.0,
            ly + 4.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
