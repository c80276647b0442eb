//! Metrics, the visible-mask and convex-hull baselines, and PP post-processing.

use serde::{Deserialize, Serialize};

use crate::mask::BinaryMask;

/// `|a ∩ b| / |a ∪ b|`, with two empty masks scoring 1.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
    assert_eq!(a.dims(), b.dims(), "iou of masks with different dimensions");
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits().iter().zip(b.bits()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Partially occluded: at least one hidden and one visible pixel.
pub fn qualifies(full: &BinaryMask, visible: &BinaryMask) -> bool {
    !visible.is_empty() && !full.minus(visible).is_empty()
}

/// IoU on the occluded region, delimited by the ground-truth visible mask:
/// `iou(pred \ V, M \ V)`.
pub fn occluded_iou(pred_full: &BinaryMask, full: &BinaryMask, visible: &BinaryMask) -> f64 {
    iou(&pred_full.minus(visible), &full.minus(visible))
}

/// Mean occluded-region IoU over qualifying instances; `None` when there are none.
pub fn miou_occ(preds: &[BinaryMask], fulls: &[BinaryMask], visibles: &[BinaryMask]) -> Option<f64> {
    let scores: Vec<f64> = preds
        .iter()
        .zip(fulls.iter().zip(visibles))
        .filter(|(_, (m, v))| qualifies(m, v))
        .map(|(p, (m, v))| occluded_iou(p, m, v))
        .collect();
    if scores.is_empty() {
        None
    } else {
        Some(scores.iter().sum::<f64>() / scores.len() as f64)
    }
}

/// The visible mask taken as the amodal prediction.
pub fn vm_baseline(visible: &BinaryMask) -> BinaryMask {
    visible.clone()
}

type Point = (i64, i64);

fn cross(o: Point, a: Point, b: Point) -> i64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Andrew's monotone chain. Counter-clockwise (in x-right, y-up orientation),
/// without collinear points; fewer than three points come back deduplicated
/// and sorted, and a collinear set as its two extremes.
pub fn convex_hull(points: &[Point]) -> Vec<Point> {
    let mut pts = points.to_vec();
    pts.sort_unstable();
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Point> = Vec::with_capacity(2 * pts.len());
    // lower chain forward, upper chain on the way back
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower_len = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower_len && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

/// Whether `p` lies inside or on the boundary of the hull returned by
/// [`convex_hull`]. Exact integer arithmetic.
pub fn hull_contains(hull: &[Point], p: Point) -> bool {
    match hull.len() {
        0 => false,
        1 => hull[0] == p,
        2 => {
            let (a, b) = (hull[0], hull[1]);
            cross(a, b, p) == 0 && p.0 >= a.0.min(b.0) && p.0 <= a.0.max(b.0) && p.1 >= a.1.min(b.1) && p.1 <= a.1.max(b.1)
        }
        n => (0..n).all(|i| cross(hull[i], hull[(i + 1) % n], p) >= 0),
    }
}

fn mask_points(mask: &BinaryMask) -> Vec<Point> {
    let (h, w) = mask.dims();
    (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .filter(|&(x, y)| mask.get(y, x))
        .map(|(x, y)| (x as i64, y as i64))
        .collect()
}

/// Convex hull of the set pixel centers, rasterized by a point-in-polygon test
/// on every pixel center.
pub fn convex_baseline(visible: &BinaryMask) -> BinaryMask {
    let (h, w) = visible.dims();
    let hull = convex_hull(&mask_points(visible));
    let mut out = BinaryMask::empty(h, w);
    if hull.is_empty() {
        return out;
    }
    let (x0, x1) = (hull.iter().map(|p| p.0).min().unwrap(), hull.iter().map(|p| p.0).max().unwrap());
    let (y0, y1) = (hull.iter().map(|p| p.1).min().unwrap(), hull.iter().map(|p| p.1).max().unwrap());
    for y in y0..=y1 {
        for x in x0..=x1 {
            if hull_contains(&hull, (x, y)) {
                out.set(y as usize, x as usize, true);
            }
        }
    }
    out
}

/// Merges a predicted full mask with a visible mask: union by default,
/// intersection when `intersection` is set.
pub fn post_process(pred_full: &BinaryMask, visible: &BinaryMask, intersection: bool) -> BinaryMask {
    if intersection {
        pred_full.and(visible)
    } else {
        pred_full.or(visible)
    }
}

/// Test-time variant applied on top of the model's prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalVariant {
    None,
    /// Merge with the ground-truth visible mask.
    Pp,
    /// Merge with the model's own visible-mask prediction.
    PpStar,
    /// Ground-truth visible mask as the object hint (needs a checkpoint trained that way).
    Sg,
}

impl std::str::FromStr for EvalVariant {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> crate::error::Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "pp" => Ok(Self::Pp),
            "pp_star" | "pp*" => Ok(Self::PpStar),
            "sg" => Ok(Self::Sg),
            other => Err(crate::error::Error::Config(format!("unknown eval variant {other:?} (none|pp|pp_star|sg)"))),
        }
    }
}

/// One instance scored by one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub sequence: usize,
    pub object: usize,
    pub frame: usize,
    pub method: String,
    pub iou_full: f64,
    /// Present only for qualifying (partially occluded) instances.
    pub iou_occ: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    /// Mean over instances with a nonempty ground-truth full mask.
    pub miou_full: f64,
    /// `None` ("n/a") when no instance qualifies.
    pub miou_occ: Option<f64>,
    pub instances: usize,
    pub occluded_instances: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub records: Vec<InstanceRecord>,
}

/// Accumulates per-instance scores for several methods.
impl EvalReport {
    /// Scores `pred` against `(full, visible)` for `method`. Instances whose
    /// ground-truth full mask is empty are skipped.
    pub fn add(&mut self, key: (usize, usize, usize), method: &str, pred: &BinaryMask, full: &BinaryMask, visible: &BinaryMask) {
        if full.is_empty() {
            return;
        }
        let (sequence, object, frame) = key;
        self.records.push(InstanceRecord {
            sequence,
            object,
            frame,
            method: method.to_string(),
            iou_full: iou(pred, full),
            iou_occ: qualifies(full, visible).then(|| occluded_iou(pred, full, visible)),
        });
    }

    pub fn extend(&mut self, other: EvalReport) {
        self.records.extend(other.records);
    }

    /// Method names in first-appearance order.
    pub fn methods(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.records {
            if !out.contains(&r.method) {
                out.push(r.method.clone());
            }
        }
        out
    }

    pub fn summary(&self, method: &str) -> Option<MethodSummary> {
        let rows: Vec<&InstanceRecord> = self.records.iter().filter(|r| r.method == method).collect();
        if rows.is_empty() {
            return None;
        }
        let occ: Vec<f64> = rows.iter().filter_map(|r| r.iou_occ).collect();
        Some(MethodSummary {
            method: method.to_string(),
            miou_full: rows.iter().map(|r| r.iou_full).sum::<f64>() / rows.len() as f64,
            miou_occ: (!occ.is_empty()).then(|| occ.iter().sum::<f64>() / occ.len() as f64),
            instances: rows.len(),
            occluded_instances: occ.len(),
        })
    }

    pub fn summaries(&self) -> Vec<MethodSummary> {
        self.methods().iter().filter_map(|m| self.summary(m)).collect()
    }

    /// One row per instance and method.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sequence,object,frame,method,iou_full,iou_occ\n");
        for r in &self.records {
            let occ = r.iou_occ.map_or_else(|| "n/a".to_string(), |v| format!("{v:.6}"));
            out.push_str(&format!("{},{},{},{},{:.6},{}\n", r.sequence, r.object, r.frame, r.method, r.iou_full, occ));
        }
        out
    }
}

/// Percent with two decimals, or "n/a".
pub fn fmt_percent(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{:.2}", 100.0 * x))
}

/// Markdown table of method summaries.
pub fn summary_table(summaries: &[MethodSummary]) -> String {
    let mut out = String::from("| Method | mIoU_full | mIoU_occ | instances | occluded |\n|---|---|---|---|---|\n");
    for s in summaries {
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} |\n",
            s.method,
            fmt_percent(Some(s.miou_full)),
            fmt_percent(s.miou_occ),
            s.instances,
            s.occluded_instances
        ));
    }
    out
}
