//! COCO-style AP/AR over IoU thresholds 0.50 to 0.95.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{Protocol, ProtocolMode, SceneDetections};
use crate::sim::{iou, BBox, Scene};
use crate::ClassId;

/// Detections kept per scene and class.
pub const MAX_DETS: usize = 100;
pub const NUM_THRESHOLDS: usize = 10;
pub const RECALL_POINTS: usize = 101;

/// IoU threshold `k`: 0.50, 0.55, ..., 0.95.
pub fn iou_threshold(k: usize) -> f64 {
    (50 + 5 * k) as f64 / 100.0
}

pub fn iou_thresholds() -> Vec<f64> {
    (0..NUM_THRESHOLDS).map(iou_threshold).collect()
}

fn recall_point(k: usize) -> f64 {
    k as f64 / 100.0
}

/// Greedy matching of score-sorted detections against ground truth of one
/// class: each detection takes the unmatched GT with the highest IoU ≥ `t`
/// (lowest index on ties).
pub fn match_at_threshold(dets: &[BBox], gt: &[BBox], t: f64) -> Vec<bool> {
    let mut taken = vec![false; gt.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gt.iter().enumerate() {
                if taken[j] {
                    continue;
                }
                let v = iou(d, g);
                if v >= t && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, _)) => {
                    taken[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// 101-point interpolated AP of a ranked TP/FP sequence. `None` when there
/// is no ground truth.
pub fn average_precision(flags: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &f in flags {
        if f {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    let mut i = 0;
    for k in 0..RECALL_POINTS {
        let r = recall_point(k);
        while i < recall.len() && recall[i] < r {
            i += 1;
        }
        if i == recall.len() {
            break;
        }
        sum += precision[i];
    }
    Some(sum / RECALL_POINTS as f64)
}

/// One (class, threshold) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub class_id: ClassId,
    pub iou_threshold: f64,
    /// `None` when the class has no ground truth.
    pub ap: Option<f64>,
    pub ar: Option<f64>,
    pub n_gt: usize,
    pub n_det: usize,
    pub n_tp: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    /// "all", or "known" / "unknown" for open-set runs.
    pub group: String,
    pub classes: Vec<ClassId>,
    /// Mean over thresholds of the per-threshold class means.
    pub map: Option<f64>,
    pub mar: Option<f64>,
    pub ap_per_threshold: Vec<Option<f64>>,
    pub ar_per_threshold: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub cells: Vec<EvalCell>,
    pub aggregates: Vec<Aggregate>,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values.flatten() {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl EvalReport {
    pub fn aggregate(&self, group: &str) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.group == group)
    }

    pub fn cell(&self, class_id: ClassId, threshold_index: usize) -> Option<&EvalCell> {
        let t = iou_threshold(threshold_index);
        self.cells
            .iter()
            .find(|c| c.class_id == class_id && c.iou_threshold == t)
    }

    fn aggregate_over(&self, group: &str, classes: Vec<ClassId>) -> Aggregate {
        let mut ap = Vec::with_capacity(NUM_THRESHOLDS);
        let mut ar = Vec::with_capacity(NUM_THRESHOLDS);
        for t in iou_thresholds() {
            let cells: Vec<&EvalCell> = self
                .cells
                .iter()
                .filter(|c| c.iou_threshold == t && classes.contains(&c.class_id))
                .collect();
            ap.push(mean(cells.iter().map(|c| c.ap)));
            ar.push(mean(cells.iter().map(|c| c.ar)));
        }
        Aggregate {
            group: group.to_string(),
            classes,
            map: mean(ap.iter().copied()),
            mar: mean(ar.iter().copied()),
            ap_per_threshold: ap,
            ar_per_threshold: ar,
        }
    }

    /// CSV body: one row per cell, then one row per aggregate group with
    /// threshold "0.50:0.95". Empty fields mark cells without ground truth.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("protocol,class,iou_threshold,ap,ar\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{:.2},{},{}\n",
                self.protocol,
                c.class_id,
                c.iou_threshold,
                fmt_opt(c.ap),
                fmt_opt(c.ar)
            ));
        }
        for a in &self.aggregates {
            out.push_str(&format!(
                "{},{},0.50:0.95,{},{}\n",
                self.protocol,
                a.group,
                fmt_opt(a.map),
                fmt_opt(a.mar)
            ));
        }
        out
    }
}

struct Ranked {
    score: f64,
    scene: usize,
    proposal: usize,
    flag: bool,
}

/// Evaluates `classes`, relabeling ground truth through `gt_class` first.
/// Detections of classes outside `classes` are ignored.
pub fn evaluate_classes(
    protocol: &str,
    detections: &[SceneDetections],
    scenes: &[&Scene],
    classes: &[ClassId],
    gt_class: impl Fn(ClassId) -> ClassId,
) -> Result<EvalReport> {
    let mut by_scene: BTreeMap<usize, Vec<&crate::inference::Detection>> = BTreeMap::new();
    for s in scenes {
        by_scene.insert(s.id, Vec::new());
    }
    for sd in detections {
        let slot = by_scene.get_mut(&sd.scene_id).ok_or_else(|| {
            Error::input(format!(
                "detections reference unknown scene {}",
                sd.scene_id
            ))
        })?;
        for d in &sd.detections {
            if !d.score.is_finite() {
                return Err(Error::NonFinite("detection score"));
            }
            slot.push(d);
        }
    }
    let mut ordered: Vec<&Scene> = scenes.to_vec();
    ordered.sort_by_key(|s| s.id);

    let mut cells = Vec::new();
    for &c in classes {
        // Per scene: this class's detections, best first, capped.
        let per_scene: Vec<(usize, Vec<&crate::inference::Detection>, Vec<BBox>)> = ordered
            .iter()
            .map(|s| {
                let mut dets: Vec<_> = by_scene[&s.id]
                    .iter()
                    .copied()
                    .filter(|d| d.class_id == c)
                    .collect();
                dets.sort_by(|a, b| {
                    b.score
                        .total_cmp(&a.score)
                        .then(a.proposal.cmp(&b.proposal))
                });
                dets.truncate(MAX_DETS);
                let gt: Vec<BBox> =
                    s.gt.iter()
                        .filter(|g| gt_class(g.label) == c)
                        .map(|g| g.bbox)
                        .collect();
                (s.id, dets, gt)
            })
            .collect();
        let n_gt: usize = per_scene.iter().map(|(_, _, g)| g.len()).sum();
        let n_det: usize = per_scene.iter().map(|(_, d, _)| d.len()).sum();
        for t in iou_thresholds() {
            let mut ranked = Vec::with_capacity(n_det);
            for (sid, dets, gt) in &per_scene {
                let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
                let flags = match_at_threshold(&boxes, gt, t);
                for (d, flag) in dets.iter().zip(flags) {
                    ranked.push(Ranked {
                        score: d.score,
                        scene: *sid,
                        proposal: d.proposal,
                        flag,
                    });
                }
            }
            ranked.sort_by(|a, b| {
                b.score
                    .total_cmp(&a.score)
                    .then(a.scene.cmp(&b.scene))
                    .then(a.proposal.cmp(&b.proposal))
            });
            let flags: Vec<bool> = ranked.iter().map(|r| r.flag).collect();
            let n_tp = flags.iter().filter(|f| **f).count();
            cells.push(EvalCell {
                class_id: c,
                iou_threshold: t,
                ap: average_precision(&flags, n_gt),
                ar: (n_gt > 0).then(|| n_tp as f64 / n_gt as f64),
                n_gt,
                n_det,
                n_tp,
            });
        }
    }
    Ok(EvalReport {
        protocol: protocol.to_string(),
        cells,
        aggregates: Vec::new(),
    })
}

/// Runs the evaluator for a protocol. Open-set runs report "known" and
/// "unknown" groups; every other mode reports a single "all" group.
pub fn evaluate(
    detections: &[SceneDetections],
    scenes: &[&Scene],
    protocol: &Protocol,
) -> Result<EvalReport> {
    let mut report = evaluate_classes(
        protocol.mode.name(),
        detections,
        scenes,
        &protocol.eval_classes,
        |c| protocol.gt_class(c),
    )?;
    report.aggregates = if protocol.mode == ProtocolMode::OpenSet {
        vec![
            report.aggregate_over("known", protocol.known_classes()),
            report.aggregate_over("unknown", vec![ClassId::UNKNOWN]),
        ]
    } else {
        vec![report.aggregate_over("all", protocol.eval_classes.clone())]
    };
    Ok(report)
}

/// Single "all" group over `classes`, no relabeling.
pub fn evaluate_plain(
    detections: &[SceneDetections],
    scenes: &[&Scene],
    classes: &[ClassId],
) -> Result<EvalReport> {
    let mut report = evaluate_classes("custom", detections, scenes, classes, |c| c)?;
    report.aggregates = vec![report.aggregate_over("all", classes.to_vec())];
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::Detection;
    use crate::numeric::Rng;
    use crate::sim::{GtObject, Split};

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn scene(id: usize, gt: &[(BBox, u32)]) -> Scene {
        Scene {
            id,
            split: Split::Test,
            gt: gt
                .iter()
                .map(|(bb, c)| GtObject {
                    bbox: *bb,
                    label: ClassId(*c),
                })
                .collect(),
            proposals: vec![],
        }
    }

    fn det(bbox: BBox, c: u32, score: f64, proposal: usize) -> Detection {
        Detection {
            bbox,
            class_id: ClassId(c),
            score,
            proposal,
        }
    }

    #[test]
    fn thresholds() {
        let t = iou_thresholds();
        assert_eq!(t.len(), 10);
        assert_eq!(t[0], 0.5);
        assert_eq!(t[9], 0.95);
        assert_eq!(t[2], 0.6);
    }

    #[test]
    fn matching_rules() {
        let g = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(match_at_threshold(&[g], &[g], 0.5), vec![true]);
        assert_eq!(match_at_threshold(&[g, g], &[g], 0.5), vec![true, false]);
        assert_eq!(match_at_threshold(&[], &[g], 0.5), Vec::<bool>::new());
        // The second detection falls back to the other GT.
        let h = b(0.0, 0.0, 10.0, 8.0);
        assert_eq!(match_at_threshold(&[g, g], &[g, h], 0.5), vec![true, true]);
        // Highest-IoU GT wins.
        let flags = match_at_threshold(&[h, g], &[g, h], 0.5);
        assert_eq!(flags, vec![true, true]);
    }

    #[test]
    fn ap_hand_cases() {
        assert_eq!(average_precision(&[true, true], 2), Some(1.0));
        assert_eq!(average_precision(&[], 3), Some(0.0));
        assert_eq!(average_precision(&[false, false], 1), Some(0.0));
        assert_eq!(average_precision(&[], 0), None);
        // Precision 1 up to recall 0.5: 51 of 101 recall points.
        assert_eq!(average_precision(&[true, false], 2), Some(51.0 / 101.0));
        // Envelope lifts the dip after a FP.
        let ap = average_precision(&[true, false, true], 2).unwrap();
        let expect = (51.0 + 50.0 * (2.0 / 3.0)) / 101.0;
        assert!((ap - expect).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_empty() {
        let g1 = b(0.0, 0.0, 10.0, 10.0);
        let g2 = b(20.0, 20.0, 30.0, 35.0);
        let scenes = [scene(0, &[(g1, 1)]), scene(1, &[(g2, 2), (g1, 1)])];
        let refs: Vec<&Scene> = scenes.iter().collect();
        let perfect = vec![
            SceneDetections {
                scene_id: 0,
                detections: vec![det(g1, 1, 0.9, 0)],
            },
            SceneDetections {
                scene_id: 1,
                detections: vec![det(g2, 2, 0.8, 0), det(g1, 1, 0.7, 1)],
            },
        ];
        let r = evaluate_plain(&perfect, &refs, &[ClassId(1), ClassId(2)]).unwrap();
        let all = r.aggregate("all").unwrap();
        assert_eq!(all.map, Some(1.0));
        assert_eq!(all.mar, Some(1.0));

        let r = evaluate_plain(&[], &refs, &[ClassId(1), ClassId(2)]).unwrap();
        assert_eq!(r.aggregate("all").unwrap().map, Some(0.0));
        assert_eq!(r.aggregate("all").unwrap().mar, Some(0.0));

        let bad = vec![SceneDetections {
            scene_id: 7,
            detections: vec![],
        }];
        assert!(evaluate_plain(&bad, &refs, &[ClassId(1)]).is_err());
    }

    #[test]
    fn shrunk_boxes_hit_only_low_thresholds() {
        let g = b(0.0, 0.0, 10.0, 10.0);
        let d = b(0.0, 0.0, 6.0, 10.0);
        assert_eq!(iou(&g, &d), 0.6);
        let scenes = [scene(0, &[(g, 1)])];
        let refs: Vec<&Scene> = scenes.iter().collect();
        let dets = vec![SceneDetections {
            scene_id: 0,
            detections: vec![det(d, 1, 0.5, 0)],
        }];
        let r = evaluate_plain(&dets, &refs, &[ClassId(1)]).unwrap();
        for k in 0..NUM_THRESHOLDS {
            let cell = r.cell(ClassId(1), k).unwrap();
            let expect = if k <= 2 { 1.0 } else { 0.0 };
            assert_eq!(cell.ap, Some(expect), "threshold {}", iou_threshold(k));
        }
        assert!((r.aggregate("all").unwrap().map.unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn zero_gt_classes_are_excluded() {
        let g = b(0.0, 0.0, 10.0, 10.0);
        let scenes = [scene(0, &[(g, 1)])];
        let refs: Vec<&Scene> = scenes.iter().collect();
        let dets = vec![SceneDetections {
            scene_id: 0,
            detections: vec![det(g, 1, 0.5, 0), det(g, 2, 0.5, 1)],
        }];
        let r = evaluate_plain(&dets, &refs, &[ClassId(1), ClassId(2)]).unwrap();
        assert_eq!(r.cell(ClassId(2), 0).unwrap().ap, None);
        assert_eq!(r.aggregate("all").unwrap().map, Some(1.0));
        let csv = r.to_csv();
        assert!(csv.starts_with("protocol,class,iou_threshold,ap,ar\n"));
        assert!(csv.contains("custom,2,0.50,,\n"));
        assert!(csv.ends_with("custom,all,0.50:0.95,1,1\n"));
    }

    fn random_case(rng: &mut Rng) -> (Vec<Scene>, Vec<SceneDetections>) {
        let mut scenes = Vec::new();
        let mut dets = Vec::new();
        for id in 0..4 {
            let mut gt = Vec::new();
            let mut ds = Vec::new();
            for _ in 0..rng.below(4) {
                let x = rng.uniform_range(0.0, 20.0);
                let y = rng.uniform_range(0.0, 20.0);
                gt.push((b(x, y, x + 8.0, y + 8.0), 1 + rng.below(2) as u32));
            }
            for k in 0..rng.below(5) {
                let x = rng.uniform_range(0.0, 20.0);
                let y = rng.uniform_range(0.0, 20.0);
                let score = (1 + rng.below(4)) as f64 / 4.0;
                ds.push(det(
                    b(x, y, x + 8.0, y + 8.0),
                    1 + rng.below(2) as u32,
                    score,
                    k,
                ));
            }
            scenes.push(scene(id, &gt));
            dets.push(SceneDetections {
                scene_id: id,
                detections: ds,
            });
        }
        (scenes, dets)
    }

    #[test]
    fn input_order_invariance() {
        let mut rng = Rng::new(9);
        for _ in 0..100 {
            let (scenes, dets) = random_case(&mut rng);
            let refs: Vec<&Scene> = scenes.iter().collect();
            let a = evaluate_plain(&dets, &refs, &[ClassId(1), ClassId(2)]).unwrap();
            let mut shuffled = dets.clone();
            shuffled.reverse();
            for sd in &mut shuffled {
                sd.detections.reverse();
            }
            let mut rrefs = refs.clone();
            rrefs.reverse();
            let b = evaluate_plain(&shuffled, &rrefs, &[ClassId(1), ClassId(2)]).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn low_scored_duplicate_never_raises_ap() {
        let mut rng = Rng::new(10);
        for _ in 0..200 {
            let (scenes, mut dets) = random_case(&mut rng);
            let refs: Vec<&Scene> = scenes.iter().collect();
            let before = evaluate_plain(&dets, &refs, &[ClassId(1), ClassId(2)]).unwrap();
            let Some(sd) = dets.iter_mut().find(|sd| !sd.detections.is_empty()) else {
                continue;
            };
            let mut dup = sd.detections[0].clone();
            dup.score = 0.01;
            dup.proposal = 99;
            sd.detections.push(dup);
            let after = evaluate_plain(&dets, &refs, &[ClassId(1), ClassId(2)]).unwrap();
            for (x, y) in before.cells.iter().zip(&after.cells) {
                if let (Some(p), Some(q)) = (x.ap, y.ap) {
                    assert!(q <= p, "{q} > {p}");
                }
            }
        }
    }
}
