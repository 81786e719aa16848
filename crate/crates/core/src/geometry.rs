//! Rotated boxes in the bird's-eye-view plane, exact polygon IoU, and the
//! angular sector partition used for directional metrics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used when checking the unit-norm invariant of a heading.
pub const HEADING_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("invalid sector partition: {0}")]
    InvalidPartition(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// A 2D pose: position in meters and heading in radians (counter-clockwise from +x).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    pub const fn new(x: f64, y: f64, heading: f64) -> Self {
        Pose { x, y, heading }
    }

    pub fn position(&self) -> Point {
        Point::new(self.x, self.y)
    }

    /// Maps a point given in this pose's local frame into the parent frame.
    pub fn to_parent(&self, local: Point) -> Point {
        let (s, c) = self.heading.sin_cos();
        Point::new(
            self.x + c * local.x - s * local.y,
            self.y + s * local.x + c * local.y,
        )
    }

    /// Inverse of [`Pose::to_parent`].
    pub fn to_local(&self, parent: Point) -> Point {
        let (s, c) = self.heading.sin_cos();
        let dx = parent.x - self.x;
        let dy = parent.y - self.y;
        Point::new(c * dx + s * dy, -s * dx + c * dy)
    }
}

/// Detection or ground-truth box: `(confidence, cx, cy, length, width, cos_a, sin_a)`.
///
/// `length` is measured along the heading `(cos_a, sin_a)`, `width` across it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotatedBox {
    pub confidence: f64,
    pub cx: f64,
    pub cy: f64,
    pub length: f64,
    pub width: f64,
    pub cos_a: f64,
    pub sin_a: f64,
}

impl RotatedBox {
    /// Ground-truth style box (confidence 1) from a heading angle in radians.
    pub fn new(cx: f64, cy: f64, length: f64, width: f64, angle: f64) -> Self {
        let (sin_a, cos_a) = angle.sin_cos();
        RotatedBox {
            confidence: 1.0,
            cx,
            cy,
            length,
            width,
            cos_a,
            sin_a,
        }
    }

    pub fn with_confidence(mut self, confidence: f64) -> Self {
        self.confidence = confidence;
        self
    }

    pub fn center(&self) -> Point {
        Point::new(self.cx, self.cy)
    }

    pub fn angle(&self) -> f64 {
        self.sin_a.atan2(self.cos_a)
    }

    pub fn area(&self) -> f64 {
        self.length * self.width
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        RotatedBox {
            cx: self.cx + dx,
            cy: self.cy + dy,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let fields = [
            self.confidence,
            self.cx,
            self.cy,
            self.length,
            self.width,
            self.cos_a,
            self.sin_a,
        ];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidBox("non-finite field".into()));
        }
        if !(self.length > 0.0 && self.width > 0.0) {
            return Err(GeometryError::InvalidBox(format!(
                "size must be positive, got {}x{}",
                self.length, self.width
            )));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(GeometryError::InvalidBox(format!(
                "confidence {} outside [0, 1]",
                self.confidence
            )));
        }
        let norm = self.cos_a * self.cos_a + self.sin_a * self.sin_a;
        if (norm - 1.0).abs() > HEADING_NORM_TOL {
            return Err(GeometryError::InvalidBox(format!(
                "heading components not unit norm ({norm})"
            )));
        }
        Ok(())
    }

    /// Corners in counter-clockwise order, starting at front-right.
    pub fn corners(&self) -> [Point; 4] {
        let hl = 0.5 * self.length;
        let hw = 0.5 * self.width;
        let (c, s) = (self.cos_a, self.sin_a);
        let local = [(hl, -hw), (hl, hw), (-hl, hw), (-hl, -hw)];
        local.map(|(u, v)| Point::new(self.cx + c * u - s * v, self.cy + s * u + c * v))
    }

    /// Whether `p` lies inside the box (boundary inclusive).
    pub fn contains(&self, p: Point) -> bool {
        let dx = p.x - self.cx;
        let dy = p.y - self.cy;
        let u = self.cos_a * dx + self.sin_a * dy;
        let v = -self.sin_a * dx + self.cos_a * dy;
        u.abs() <= 0.5 * self.length && v.abs() <= 0.5 * self.width
    }

    /// Whether the open segment `a`-`b` passes through the box interior or boundary.
    pub fn intersects_segment(&self, a: Point, b: Point) -> bool {
        // Slab test in the box frame, parametrized over t in (0, 1).
        let to_local = |p: Point| {
            let dx = p.x - self.cx;
            let dy = p.y - self.cy;
            (
                self.cos_a * dx + self.sin_a * dy,
                -self.sin_a * dx + self.cos_a * dy,
            )
        };
        let (ax, ay) = to_local(a);
        let (bx, by) = to_local(b);
        let mut t0 = 0.0_f64;
        let mut t1 = 1.0_f64;
        for (p, d, half) in [
            (ax, bx - ax, 0.5 * self.length),
            (ay, by - ay, 0.5 * self.width),
        ] {
            if d.abs() < 1e-15 {
                if p.abs() > half {
                    return false;
                }
                continue;
            }
            let mut lo = (-half - p) / d;
            let mut hi = (half - p) / d;
            if lo > hi {
                std::mem::swap(&mut lo, &mut hi);
            }
            t0 = t0.max(lo);
            t1 = t1.min(hi);
            if t0 > t1 {
                return false;
            }
        }
        // Open segment: the overlap interval must contain some t strictly inside (0, 1).
        t1 > 0.0 && t0 < 1.0
    }
}

impl fmt::Display for RotatedBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{},{}",
            self.confidence, self.cx, self.cy, self.length, self.width, self.cos_a, self.sin_a
        )
    }
}

impl FromStr for RotatedBox {
    type Err = GeometryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let fields: Vec<&str> = s.split(',').map(str::trim).collect();
        if fields.len() != 7 {
            return Err(GeometryError::Parse {
                line: 0,
                msg: format!("expected 7 fields, got {}", fields.len()),
            });
        }
        let mut v = [0.0; 7];
        for (slot, raw) in v.iter_mut().zip(&fields) {
            *slot = raw.parse().map_err(|_| GeometryError::Parse {
                line: 0,
                msg: format!("bad number {raw:?}"),
            })?;
        }
        let b = RotatedBox {
            confidence: v[0],
            cx: v[1],
            cy: v[2],
            length: v[3],
            width: v[4],
            cos_a: v[5],
            sin_a: v[6],
        };
        b.validate()?;
        Ok(b)
    }
}

/// Parses a box list: one 7-field box per line, `#` starts a comment.
pub fn parse_box_list(text: &str) -> Result<Vec<RotatedBox>, GeometryError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let b = line.parse::<RotatedBox>().map_err(|e| match e {
            GeometryError::Parse { msg, .. } => GeometryError::Parse { line: idx + 1, msg },
            other => GeometryError::Parse {
                line: idx + 1,
                msg: other.to_string(),
            },
        })?;
        out.push(b);
    }
    Ok(out)
}

pub fn write_box_list(boxes: &[RotatedBox]) -> String {
    let mut s = String::from("# confidence,cx,cy,length,width,cos_a,sin_a\n");
    for b in boxes {
        s.push_str(&b.to_string());
        s.push('\n');
    }
    s
}

/// Signed shoelace area; positive for counter-clockwise polygons.
pub fn polygon_area(poly: &[Point]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        acc += a.x * b.y - b.x * a.y;
    }
    0.5 * acc
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Sutherland-Hodgman clipping of `subject` by the convex counter-clockwise `clip` polygon.
pub fn clip_convex(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let mut output: Vec<Point> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let ea = clip[i];
        let eb = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        let mut prev = *input.last().unwrap();
        let mut prev_side = cross(ea, eb, prev);
        for &cur in &input {
            let cur_side = cross(ea, eb, cur);
            if cur_side >= 0.0 {
                if prev_side < 0.0 {
                    output.push(intersect(prev, cur, prev_side, cur_side));
                }
                output.push(cur);
            } else if prev_side >= 0.0 {
                output.push(intersect(prev, cur, prev_side, cur_side));
            }
            prev = cur;
            prev_side = cur_side;
        }
    }
    output
}

fn intersect(p: Point, q: Point, sp: f64, sq: f64) -> Point {
    let t = sp / (sp - sq);
    Point::new(p.x + t * (q.x - p.x), p.y + t * (q.y - p.y))
}

pub fn intersection_area(a: &RotatedBox, b: &RotatedBox) -> f64 {
    let dx = a.cx - b.cx;
    let dy = a.cy - b.cy;
    let ra = 0.5 * a.length.hypot(a.width);
    let rb = 0.5 * b.length.hypot(b.width);
    if dx * dx + dy * dy > (ra + rb) * (ra + rb) {
        return 0.0;
    }
    let poly = clip_convex(&a.corners(), &b.corners());
    polygon_area(&poly).max(0.0)
}

/// Rotated-box IoU via convex clipping and the shoelace formula.
pub fn iou(a: &RotatedBox, b: &RotatedBox) -> f64 {
    let inter = intersection_area(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Normalizes an angle in degrees to `[0, 360)`.
pub fn normalize_degrees(deg: f64) -> f64 {
    let r = deg.rem_euclid(360.0);
    if r >= 360.0 {
        0.0
    } else {
        r
    }
}

/// Angular partition of the plane around an ego pose into half-open degree intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectorPartition {
    boundaries: Vec<(f64, f64)>,
    pub frame_origin: Point,
    pub frame_heading: f64,
}

impl SectorPartition {
    /// `n_dir` equal sectors starting at 0 degrees.
    pub fn uniform(n_dir: usize, frame_origin: Point, frame_heading: f64) -> Self {
        assert!(n_dir >= 1, "a partition needs at least one sector");
        let step = 360.0 / n_dir as f64;
        let boundaries = (0..n_dir)
            .map(|i| {
                let hi = if i + 1 == n_dir {
                    360.0
                } else {
                    (i + 1) as f64 * step
                };
                (i as f64 * step, hi)
            })
            .collect();
        SectorPartition {
            boundaries,
            frame_origin,
            frame_heading,
        }
    }

    /// Builds a partition from cut points `[0, c1, ..., 360]`.
    pub fn from_cuts(
        cuts: &[f64],
        frame_origin: Point,
        frame_heading: f64,
    ) -> Result<Self, GeometryError> {
        if cuts.len() < 2 {
            return Err(GeometryError::InvalidPartition(
                "need at least two cut points".into(),
            ));
        }
        if cuts[0] != 0.0 || *cuts.last().unwrap() != 360.0 {
            return Err(GeometryError::InvalidPartition(
                "cuts must start at 0 and end at 360".into(),
            ));
        }
        if cuts.windows(2).any(|w| w[1].partial_cmp(&w[0]) != Some(std::cmp::Ordering::Greater)) {
            return Err(GeometryError::InvalidPartition(
                "cuts must be strictly increasing".into(),
            ));
        }
        Ok(SectorPartition {
            boundaries: cuts.windows(2).map(|w| (w[0], w[1])).collect(),
            frame_origin,
            frame_heading,
        })
    }

    pub fn n_dir(&self) -> usize {
        self.boundaries.len()
    }

    pub fn boundaries(&self) -> &[(f64, f64)] {
        &self.boundaries
    }

    /// Angle of `p` relative to the frame, in degrees within `[0, 360)`.
    pub fn relative_angle(&self, p: Point) -> Option<f64> {
        let dx = p.x - self.frame_origin.x;
        let dy = p.y - self.frame_origin.y;
        if dx == 0.0 && dy == 0.0 {
            return None;
        }
        let deg = (dy.atan2(dx) - self.frame_heading).to_degrees();
        Some(normalize_degrees(deg))
    }

    pub fn sector_of_point(&self, p: Point) -> usize {
        let Some(angle) = self.relative_angle(p) else {
            return 0;
        };
        self.boundaries
            .iter()
            .position(|&(lo, hi)| angle >= lo && angle < hi)
            .unwrap_or(0)
    }

    /// Sector containing the box center.
    pub fn sector_of(&self, b: &RotatedBox) -> usize {
        self.sector_of_point(b.center())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn unit_square(angle: f64) -> RotatedBox {
        RotatedBox::new(0.0, 0.0, 1.0, 1.0, angle)
    }

    fn same_point_set(a: &[Point], b: &[Point], tol: f64) -> bool {
        a.iter()
            .all(|p| b.iter().any(|q| (p.x - q.x).abs() < tol && (p.y - q.y).abs() < tol))
    }

    #[test]
    fn unit_square_corners() {
        let c = unit_square(0.0).corners();
        let expected = [
            Point::new(0.5, -0.5),
            Point::new(0.5, 0.5),
            Point::new(-0.5, 0.5),
            Point::new(-0.5, -0.5),
        ];
        assert!(same_point_set(&c, &expected, 1e-12));
        assert!(polygon_area(&c) > 0.0, "corners must be counter-clockwise");
    }

    #[test]
    fn rotated_square_has_same_corner_set() {
        let a = unit_square(0.0).corners();
        let b = unit_square(PI / 2.0).corners();
        assert!(same_point_set(&a, &b, 1e-12));
    }

    #[test]
    fn corners_match_rotation_matrix() {
        let angle = 30f64.to_radians();
        let b = RotatedBox::new(1.0, 2.0, 2.0, 1.0, angle);
        let (s, c) = angle.sin_cos();
        let axis_aligned = [(1.0, -0.5), (1.0, 0.5), (-1.0, 0.5), (-1.0, -0.5)];
        let got = b.corners();
        for (p, (u, v)) in got.iter().zip(axis_aligned) {
            let ex = 1.0 + c * u - s * v;
            let ey = 2.0 + s * u + c * v;
            assert!((p.x - ex).abs() < 1e-12 && (p.y - ey).abs() < 1e-12);
        }
        let cx = got.iter().map(|p| p.x).sum::<f64>() / 4.0;
        let cy = got.iter().map(|p| p.y).sum::<f64>() / 4.0;
        assert!((cx - 1.0).abs() < 1e-9 && (cy - 2.0).abs() < 1e-9);
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = RotatedBox::new(3.0, -1.0, 4.5, 1.8, 0.7);
        assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        let far = RotatedBox::new(100.0, 0.0, 1.0, 1.0, 0.0);
        assert_eq!(iou(&unit_square(0.0), &far), 0.0);
    }

    #[test]
    fn iou_offset_rectangles() {
        let a = RotatedBox::new(0.0, 0.0, 2.0, 2.0, 0.0);
        let b = RotatedBox::new(1.0, 0.0, 2.0, 2.0, 0.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn edge_contact_is_zero() {
        let a = RotatedBox::new(0.0, 0.0, 2.0, 2.0, 0.0);
        let b = RotatedBox::new(2.0, 0.0, 2.0, 2.0, 0.0);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn octagon_overlap_of_rotated_square() {
        // Square vs the same square rotated 45 degrees: the overlap is a regular octagon.
        let a = unit_square(0.0);
        let b = unit_square(PI / 4.0);
        let inter = 2.0 * (2f64.sqrt() - 1.0);
        let expected = inter / (2.0 - inter);
        assert!((iou(&a, &b) - expected).abs() < 1e-12);
    }

    #[test]
    fn segment_test() {
        let b = RotatedBox::new(5.0, 0.0, 2.0, 2.0, 0.0);
        assert!(b.intersects_segment(Point::new(0.0, 0.0), Point::new(10.0, 0.0)));
        assert!(!b.intersects_segment(Point::new(0.0, 3.0), Point::new(10.0, 3.0)));
        assert!(!b.intersects_segment(Point::new(0.0, 0.0), Point::new(3.0, 0.0)));
        // Endpoint inside the box still counts: the open segment enters it.
        assert!(b.intersects_segment(Point::new(0.0, 0.0), Point::new(5.0, 0.0)));
    }

    #[test]
    fn sector_examples() {
        let p = SectorPartition::uniform(4, Point::new(0.0, 0.0), 0.0);
        let d = 10.0 / 2f64.sqrt();
        assert_eq!(p.sector_of(&RotatedBox::new(d, d, 1.0, 1.0, 0.0)), 0);
        assert_eq!(p.sector_of(&RotatedBox::new(0.0, 10.0, 1.0, 1.0, 0.0)), 1);
        assert_eq!(p.sector_of(&RotatedBox::new(-10.0, -0.0, 1.0, 1.0, 0.0)), 2);
        assert_eq!(p.sector_of(&RotatedBox::new(0.0, -10.0, 1.0, 1.0, 0.0)), 3);
        assert_eq!(p.sector_of(&RotatedBox::new(0.0, 0.0, 1.0, 1.0, 0.0)), 0);
        let one = SectorPartition::uniform(1, Point::new(0.0, 0.0), 0.0);
        assert_eq!(one.sector_of(&RotatedBox::new(-3.0, -7.0, 1.0, 1.0, 0.0)), 0);
    }

    #[test]
    fn sector_respects_heading() {
        let p = SectorPartition::uniform(4, Point::new(1.0, 1.0), PI / 2.0);
        // Straight ahead of an ego facing +y sits at relative angle 0.
        assert_eq!(p.sector_of_point(Point::new(1.0, 5.0)), 0);
        assert_eq!(p.sector_of_point(Point::new(5.0, 1.0)), 3);
    }

    #[test]
    fn partition_from_cuts() {
        let p = SectorPartition::from_cuts(&[0.0, 45.0, 360.0], Point::new(0.0, 0.0), 0.0).unwrap();
        assert_eq!(p.n_dir(), 2);
        assert_eq!(p.sector_of_point(Point::new(1.0, 2.0)), 1);
        assert!(SectorPartition::from_cuts(&[0.0, 90.0], Point::new(0.0, 0.0), 0.0).is_err());
        assert!(
            SectorPartition::from_cuts(&[0.0, 90.0, 90.0, 360.0], Point::new(0.0, 0.0), 0.0)
                .is_err()
        );
    }

    #[test]
    fn box_list_parsing() {
        let text = "# header\n1,0,0,4.5,1.8,1,0\n\n0.5, 2, 3, 1, 1, 0, 1 # trailing\n";
        let boxes = parse_box_list(text).unwrap();
        assert_eq!(boxes.len(), 2);
        assert_eq!(boxes[1].confidence, 0.5);
        let again = parse_box_list(&write_box_list(&boxes)).unwrap();
        assert_eq!(again, boxes);
        let err = parse_box_list("1,0,0,1,1,1,0\n1,0,0,-1,1,1,0\n").unwrap_err();
        assert!(matches!(err, GeometryError::Parse { line: 2, .. }));
        assert!(parse_box_list("1,2,3").is_err());
    }

    #[test]
    fn validate_rejects_bad_heading() {
        let mut b = unit_square(0.0);
        b.cos_a = 0.9;
        assert!(b.validate().is_err());
    }
}
