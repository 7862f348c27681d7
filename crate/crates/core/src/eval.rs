//! Detection and alignment metrics: greedy overlap matching, a
//! score-sweep table of false positives against true-positive rate, and
//! landmark mean error normalized by the inter-ocular distance.

use crate::cascade::DetectionResult;
use crate::error::{Error, Result};
use crate::sampler::{iou, AnnotatedImage, BoundingBox};

/// Detections count as correct above this overlap with a ground truth.
pub const MATCH_IOU: f64 = 0.5;

/// Outcome of matching one scene's detections against its ground truth.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MatchResult {
    /// (detection index, ground-truth index) pairs; each index appears
    /// at most once on its side.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_detections: Vec<usize>,
    pub unmatched_truths: Vec<usize>,
}

/// Greedy score-ordered matching: walk detections from highest score to
/// lowest (ties to the lower index) and give each the still-unmatched
/// ground truth it overlaps most, provided the overlap reaches `iou_thr`.
/// One detection per truth, one truth per detection.
pub fn greedy_match(
    detections: &[BoundingBox],
    truths: &[BoundingBox],
    iou_thr: f64,
) -> Result<MatchResult> {
    let mut scores = Vec::with_capacity(detections.len());
    for d in detections {
        match d.score {
            Some(s) if s.is_finite() => scores.push(s),
            _ => return Err(Error::Contract("detections need finite scores to match".into())),
        }
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite").then(a.cmp(&b)));
    let mut taken = vec![false; truths.len()];
    let mut result = MatchResult::default();
    for &di in &order {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in truths.iter().enumerate() {
            if taken[gi] {
                continue;
            }
            let v = iou(&detections[di], gt)?;
            if v >= iou_thr && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        match best {
            Some((gi, _)) => {
                taken[gi] = true;
                result.pairs.push((di, gi));
            }
            None => result.unmatched_detections.push(di),
        }
    }
    result.unmatched_truths = (0..truths.len()).filter(|&g| !taken[g]).collect();
    Ok(result)
}

/// One operating point of the score sweep: counting only detections with
/// score at least `score`, the absolute false-positive count and the
/// fraction of ground-truth faces recovered.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub score: f64,
    pub false_positives: usize,
    pub true_positive_rate: f64,
}

/// Aggregate metrics over a set of evaluated scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionMetrics {
    pub total_truths: usize,
    pub total_detections: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub recall: f64,
    pub precision: f64,
    /// Mean over matched faces of the mean landmark distance divided by
    /// the ground-truth inter-ocular distance; absent when no matched
    /// face carries landmarks.
    pub mean_landmark_error: Option<f64>,
    /// Sweep over distinct detection scores, descending.
    pub roc: Vec<RocPoint>,
}

/// One scene to score: what the detector said and what is actually there.
pub struct SceneEval<'a> {
    pub detections: &'a [DetectionResult],
    pub truth: &'a AnnotatedImage,
}

/// Scores detections over a dataset with [`greedy_match`] per scene at
/// IoU ≥ [`MATCH_IOU`]. An empty scene list is an error; empty truth is
/// not (precision still means something on pure-background data, and
/// recall over zero faces reports 1.0).
pub fn evaluate(scenes: &[SceneEval<'_>]) -> Result<DetectionMetrics> {
    if scenes.is_empty() {
        return Err(Error::Contract("evaluation needs at least one scene".into()));
    }
    let mut total_truths = 0;
    let mut total_detections = 0;
    // (score, was matched) per detection, pooled across scenes.
    let mut outcomes: Vec<(f64, bool)> = Vec::new();
    let mut landmark_errors: Vec<f64> = Vec::new();

    for scene in scenes {
        let det_boxes: Vec<BoundingBox> = scene
            .detections
            .iter()
            .map(|d| {
                let mut b = d.bbox;
                b.score = Some(d.score);
                b
            })
            .collect();
        let gt_boxes = scene.truth.face_boxes();
        total_truths += gt_boxes.len();
        total_detections += det_boxes.len();
        let m = greedy_match(&det_boxes, &gt_boxes, MATCH_IOU)?;
        for &(di, gi) in &m.pairs {
            outcomes.push((scene.detections[di].score, true));
            if let Some(err) =
                landmark_error(&scene.detections[di].landmarks, &scene.truth.faces[gi].landmarks)
            {
                landmark_errors.push(err);
            }
        }
        for &di in &m.unmatched_detections {
            outcomes.push((scene.detections[di].score, false));
        }
    }

    let true_positives = outcomes.iter().filter(|(_, tp)| *tp).count();
    let false_positives = outcomes.len() - true_positives;
    let false_negatives = total_truths - true_positives;
    let recall =
        if total_truths == 0 { 1.0 } else { true_positives as f64 / total_truths as f64 };
    let precision = if outcomes.is_empty() {
        1.0
    } else {
        true_positives as f64 / outcomes.len() as f64
    };

    // Greedy matching processes detections in score order, so matching a
    // score-threshold prefix equals rerunning the matcher on that prefix;
    // the sweep is exact, not an approximation.
    outcomes.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores"));
    let mut roc = Vec::new();
    let mut tp_so_far = 0usize;
    let mut fp_so_far = 0usize;
    let mut i = 0;
    while i < outcomes.len() {
        let score = outcomes[i].0;
        while i < outcomes.len() && outcomes[i].0 == score {
            if outcomes[i].1 {
                tp_so_far += 1;
            } else {
                fp_so_far += 1;
            }
            i += 1;
        }
        roc.push(RocPoint {
            score,
            false_positives: fp_so_far,
            true_positive_rate: if total_truths == 0 {
                1.0
            } else {
                tp_so_far as f64 / total_truths as f64
            },
        });
    }

    let mean_landmark_error = if landmark_errors.is_empty() {
        None
    } else {
        Some(landmark_errors.iter().sum::<f64>() / landmark_errors.len() as f64)
    };

    Ok(DetectionMetrics {
        total_truths,
        total_detections,
        true_positives,
        false_positives,
        false_negatives,
        recall,
        precision,
        mean_landmark_error,
        roc,
    })
}

/// Mean distance between predicted and true landmarks over the five
/// points, divided by the true inter-ocular distance. `None` when the
/// truth has no landmarks or degenerate eye geometry.
pub fn landmark_error(predicted: &[f64; 10], truth: &Option<[f64; 10]>) -> Option<f64> {
    let t = truth.as_ref()?;
    let inter_ocular = ((t[0] - t[2]).powi(2) + (t[1] - t[3]).powi(2)).sqrt();
    if inter_ocular <= 0.0 {
        return None;
    }
    let mut sum = 0.0;
    for k in 0..5 {
        let dx = predicted[2 * k] - t[2 * k];
        let dy = predicted[2 * k + 1] - t[2 * k + 1];
        sum += (dx * dx + dy * dy).sqrt();
    }
    Some(sum / 5.0 / inter_ocular)
}

impl DetectionMetrics {
    /// The sweep table as CSV: score, false positives, true-positive rate.
    pub fn roc_csv(&self) -> String {
        let mut s = String::from("score,false_positives,true_positive_rate\n");
        for p in &self.roc {
            s.push_str(&format!(
                "{:.6},{},{:.6}\n",
                p.score, p.false_positives, p.true_positive_rate
            ));
        }
        s
    }

    /// Human-readable summary block.
    pub fn summary(&self) -> String {
        let lme = match self.mean_landmark_error {
            Some(e) => format!("{e:.4}"),
            None => "n/a".to_string(),
        };
        format!(
            "faces: {}\ndetections: {}\ntrue positives: {}\nfalse positives: {}\n\
             false negatives: {}\nrecall: {:.4}\nprecision: {:.4}\n\
             mean landmark error (inter-ocular units): {lme}\n",
            self.total_truths,
            self.total_detections,
            self.true_positives,
            self.false_positives,
            self.false_negatives,
            self.recall,
            self.precision,
        )
    }
}
