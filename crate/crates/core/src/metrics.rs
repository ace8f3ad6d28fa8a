//! Scoring: pixel overlap (IoU), path-length graph agreement, and
//! instance-matched building F1.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::graph::{inject_control_nodes, snap_node, SpatialGraph};
use crate::nn::Tensor;
use crate::raster::{is_foreground, Raster};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("mask shapes differ: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("empty input")]
    EmptyInput,
}

/// Per-image pixel confusion. `fn_` is the miss count.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn iou(&self) -> f64 {
        let denom = self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            self.tp as f64 / denom as f64
        }
    }
}

pub fn confusion(pred: &Raster, gt: &Raster) -> Result<ConfusionCounts, MetricsError> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(MetricsError::ShapeMismatch(
            pred.height,
            pred.width,
            gt.height,
            gt.width,
        ));
    }
    assert_eq!(pred.channels, 1);
    assert_eq!(gt.channels, 1);
    let mut c = ConfusionCounts::default();
    for (p, g) in pred.data.iter().zip(gt.data.iter()) {
        match (is_foreground(*p), is_foreground(*g)) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Intersection over union; 1.0 when both masks are empty.
pub fn iou(pred: &Raster, gt: &Raster) -> Result<f64, MetricsError> {
    Ok(confusion(pred, gt)?.iou())
}

/// Unweighted mean of per-image IoU.
pub fn mean_iou<'a, I>(pairs: I) -> Result<f64, MetricsError>
where
    I: IntoIterator<Item = (&'a Raster, &'a Raster)>,
{
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, g) in pairs {
        sum += iou(p, g)?;
        n += 1;
    }
    if n == 0 {
        return Err(MetricsError::EmptyInput);
    }
    Ok(sum / n as f64)
}

/// Binarize probabilities; strictly greater than `t` is foreground.
pub fn threshold(probs: &Tensor<f32>, t: f32) -> Raster {
    let [n, c, h, w] = probs.shape();
    assert_eq!(n, 1, "threshold works on a single image");
    assert_eq!(c, 1, "threshold works on a single channel");
    let mut out = Raster::new(h, w, 1);
    for (i, &p) in probs.data().iter().enumerate() {
        out.data[i] = if p > t { 255 } else { 0 };
    }
    out
}

/// Path-length agreement between two graphs in one coordinate frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AplsReport {
    /// Mean of the two directional scores, in [0, 1].
    pub score: f64,
    pub gt_to_prop: f64,
    pub prop_to_gt: f64,
    /// Control pairs with a path in the respective source graph.
    pub gt_pairs: usize,
    pub prop_pairs: usize,
}

fn direction_score(src: &SpatialGraph, dst: &SpatialGraph, spacing: f64, buffer: f64) -> (f64, usize) {
    let s = inject_control_nodes(src, spacing);
    let mut d = dst.clone();
    let controls: Vec<usize> = s.node_ids().collect();
    let snapped: Vec<Option<usize>> = controls
        .iter()
        .map(|&a| snap_node(&mut d, s.node_pos(a).unwrap(), buffer))
        .collect();

    let mut d_dist: BTreeMap<usize, BTreeMap<usize, f64>> = BTreeMap::new();
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, &a) in controls.iter().enumerate() {
        let from_a = s.distances_from(a).expect("control node exists");
        let da = snapped[i].map(|ap| {
            d_dist
                .entry(ap)
                .or_insert_with(|| d.distances_from(ap).expect("snapped node exists"))
                .clone()
        });
        for (j, &b) in controls.iter().enumerate().skip(i + 1) {
            let Some(&l) = from_a.get(&b) else { continue };
            n += 1;
            let term = match (&da, snapped[j]) {
                (Some(da), Some(bp)) => match da.get(&bp) {
                    Some(&lp) => {
                        if l < 1e-12 {
                            if lp.abs() < 1e-12 {
                                0.0
                            } else {
                                1.0
                            }
                        } else {
                            ((l - lp).abs() / l).min(1.0)
                        }
                    }
                    None => 1.0,
                },
                _ => 1.0,
            };
            sum += term;
        }
    }
    if n == 0 {
        (0.0, 0)
    } else {
        (1.0 - sum / n as f64, n)
    }
}

/// Symmetric path-length score: control nodes are injected into each graph,
/// snapped into the other within `buffer`, and every connected control pair
/// contributes min{1, |L − L'|/L}; unsnappable or disconnected counterparts
/// take the full penalty. The final score averages both directions. Two
/// edgeless graphs score 1; a direction with no connected pairs scores 0.
pub fn apls(gt: &SpatialGraph, prop: &SpatialGraph, spacing: f64, buffer: f64) -> AplsReport {
    if gt.edge_count() == 0 && prop.edge_count() == 0 {
        return AplsReport {
            score: 1.0,
            gt_to_prop: 1.0,
            prop_to_gt: 1.0,
            gt_pairs: 0,
            prop_pairs: 0,
        };
    }
    let (g2p, gt_pairs) = direction_score(gt, prop, spacing, buffer);
    let (p2g, prop_pairs) = direction_score(prop, gt, spacing, buffer);
    AplsReport {
        score: 0.5 * (g2p + p2g),
        gt_to_prop: g2p,
        prop_to_gt: p2g,
        gt_pairs,
        prop_pairs,
    }
}

pub const APLS_SPACING: f64 = 50.0;
pub const APLS_BUFFER: f64 = 4.0;

/// 8-connected foreground components as sorted pixel-index lists, in scan
/// order of their first pixel.
pub fn connected_components8(mask: &Raster) -> Vec<Vec<usize>> {
    assert_eq!(mask.channels, 1);
    let (h, w) = (mask.height, mask.width);
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if seen[start] || !is_foreground(mask.data[start]) {
            continue;
        }
        let mut comp = Vec::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            comp.push(i);
            let (r, c) = ((i / w) as i64, (i % w) as i64);
            for (dr, dc) in [
                (-1i64, -1i64),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1),
            ] {
                let (qr, qc) = (r + dr, c + dc);
                if qr < 0 || qc < 0 || qr >= h as i64 || qc >= w as i64 {
                    continue;
                }
                let q = qr as usize * w + qc as usize;
                if !seen[q] && is_foreground(mask.data[q]) {
                    seen[q] = true;
                    stack.push(q);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

fn instance_iou(a: &[usize], b: &[usize]) -> f64 {
    // both sorted; merge count
    let mut inter = 0usize;
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// (pred index, gt index, IoU), one-to-one.
    pub matches: Vec<(usize, usize, f64)>,
}

/// Greedy one-to-one matching by descending IoU among pairs at or above
/// `iou_thresh`.
pub fn instance_f1(pred: &[Vec<usize>], gt: &[Vec<usize>], iou_thresh: f64) -> MatchReport {
    let mut cands: Vec<(usize, usize, f64)> = Vec::new();
    for (pi, p) in pred.iter().enumerate() {
        for (gi, g) in gt.iter().enumerate() {
            let v = instance_iou(p, g);
            if v >= iou_thresh {
                cands.push((pi, gi, v));
            }
        }
    }
    cands.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap()
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    let mut used_p = vec![false; pred.len()];
    let mut used_g = vec![false; gt.len()];
    let mut matches = Vec::new();
    for (pi, gi, v) in cands {
        if !used_p[pi] && !used_g[gi] {
            used_p[pi] = true;
            used_g[gi] = true;
            matches.push((pi, gi, v));
        }
    }
    let m = matches.len() as f64;
    let precision = if pred.is_empty() { 0.0 } else { m / pred.len() as f64 };
    let recall = if gt.is_empty() { 0.0 } else { m / gt.len() as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    MatchReport {
        precision,
        recall,
        f1,
        matches,
    }
}

/// Building F1 with predicted instances taken as 8-connected components of
/// the predicted mask and ground-truth instances given individually.
pub fn building_f1_instances(
    pred_mask: &Raster,
    gt_instances: &[Raster],
    iou_thresh: f64,
) -> Result<MatchReport, MetricsError> {
    let pred = connected_components8(pred_mask);
    let mut gt = Vec::with_capacity(gt_instances.len());
    for g in gt_instances {
        if g.height != pred_mask.height || g.width != pred_mask.width {
            return Err(MetricsError::ShapeMismatch(
                pred_mask.height,
                pred_mask.width,
                g.height,
                g.width,
            ));
        }
        let px: Vec<usize> = g
            .data
            .iter()
            .enumerate()
            .filter(|(_, &v)| is_foreground(v))
            .map(|(i, _)| i)
            .collect();
        gt.push(px);
    }
    Ok(instance_f1(&pred, &gt, iou_thresh))
}

/// Building F1 with both instance sets taken as 8-connected components.
pub fn building_f1(
    pred_mask: &Raster,
    gt_mask: &Raster,
    iou_thresh: f64,
) -> Result<MatchReport, MetricsError> {
    if pred_mask.height != gt_mask.height || pred_mask.width != gt_mask.width {
        return Err(MetricsError::ShapeMismatch(
            pred_mask.height,
            pred_mask.width,
            gt_mask.height,
            gt_mask.width,
        ));
    }
    let pred = connected_components8(pred_mask);
    let gt = connected_components8(gt_mask);
    Ok(instance_f1(&pred, &gt, iou_thresh))
}

/// Per-image score rows plus a trailing mean row, as CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub image_id: String,
    pub iou: f64,
    pub apls: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn scores_csv(rows: &[ScoreRow]) -> String {
    let mut out = String::from("image_id,iou,apls,precision,recall,f1\n");
    let mut sums = [0.0f64; 5];
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.image_id, r.iou, r.apls, r.precision, r.recall, r.f1
        ));
        for (s, v) in sums
            .iter_mut()
            .zip([r.iou, r.apls, r.precision, r.recall, r.f1])
        {
            *s += v;
        }
    }
    if !rows.is_empty() {
        let n = rows.len() as f64;
        out.push_str(&format!(
            "mean,{},{},{},{},{}\n",
            sums[0] / n,
            sums[1] / n,
            sums[2] / n,
            sums[3] / n,
            sums[4] / n
        ));
    }
    out
}
