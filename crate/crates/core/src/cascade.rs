//! Staged detection: pyramid scan with the smallest net, then two rounds
//! of crop, re-score, and calibrate with the bigger nets, with local
//! suppression between stages and a final cross-candidate merge.
//!
//! All boxes live in original-image pixel coordinates. Every crop window
//! is squared first, so the offsets each net was trained to predict apply
//! to exactly the region the net saw.

use crate::error::{Error, Result};
pub use crate::image::crop_resize;
use crate::image::Image;
use crate::model::CascadeModel;
use crate::net::{forward, forward_dense, NetworkSpec, Parameters};
use crate::sampler::{iom, iou, BoundingBox};
use crate::tensor::{Scalar, Tensor};

/// One scaled copy of the input; `scale` maps image pixels to level
/// pixels, so windows found here divide by it to return to the image.
#[derive(Debug, Clone)]
pub struct PyramidLevel<T: Scalar> {
    pub scale: f64,
    pub image: Tensor<T>,
}

/// A final detection: calibrated box, face score, and five landmark
/// (x, y) pairs, all in original-image pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    pub bbox: BoundingBox,
    pub score: f64,
    pub landmarks: [f64; 10],
}

/// Candidate survivors after each stage's suppression, plus crops that
/// had to be skipped because a window left the image entirely.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DetectTrace {
    pub stage_candidates: [usize; 3],
    pub skipped_crops: usize,
}

/// Detection knobs. The three thresholds gate the three nets in order;
/// suppression inside the cascade compares by plain overlap while the
/// final merge compares against the smaller box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectConfig {
    pub thresholds: [f64; 3],
    pub local_nms: f64,
    pub global_nms: f64,
    pub min_face: f64,
    pub scale_factor: f64,
    pub per_level_nms: bool,
    pub cross_level_nms: bool,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            thresholds: [0.6, 0.6, 0.7],
            local_nms: 0.5,
            global_nms: 0.7,
            min_face: 24.0,
            scale_factor: 0.709,
            per_level_nms: true,
            cross_level_nms: true,
        }
    }
}

/// Builds scaled copies of the image for the one-pass scan. Level k has
/// scale `(12 / min_face) * scale_factor^k`; generation stops once the
/// shorter image side falls below the scan window, so an image smaller
/// than `min_face` yields no levels at all.
pub fn build_pyramid<T: Scalar>(
    image: &Image,
    min_face: f64,
    scale_factor: f64,
) -> Result<Vec<PyramidLevel<T>>> {
    if !(min_face >= 12.0) {
        return Err(Error::Config(format!("min_face must be at least 12, got {min_face}")));
    }
    if !(scale_factor > 0.0 && scale_factor < 1.0) {
        return Err(Error::Config(format!(
            "scale factor must lie in (0, 1), got {scale_factor}"
        )));
    }
    let (w, h) = (image.width() as f64, image.height() as f64);
    let full = BoundingBox::new(0.0, 0.0, w, h);
    let mut scale = 12.0 / min_face;
    let mut levels = Vec::new();
    while w.min(h) * scale >= 12.0 {
        let lw = (w * scale).round() as usize;
        let lh = (h * scale).round() as usize;
        levels.push(PyramidLevel { scale, image: image.resample_region(&full, lw, lh)? });
        scale *= scale_factor;
    }
    Ok(levels)
}

/// Slides the smallest net over one level in a single dense pass.
/// Output cell (i, j) covers the image-space window
/// `(j*s/scale, i*s/scale, 12/scale, 12/scale)` where `s` is the net's
/// cumulative stride; cells scoring at least `threshold` come back with
/// their calibration offsets. A level smaller than the window is empty.
pub fn scan_12net<T: Scalar>(
    params: &Parameters<T>,
    level: &PyramidLevel<T>,
    threshold: f64,
) -> Result<Vec<(BoundingBox, [f64; 4])>> {
    let spec = NetworkSpec::net12();
    let shape = level.image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::Dimension(format!(
            "pyramid level must be [3,H,W], got {shape:?}"
        )));
    }
    if shape[1] < spec.input_size || shape[2] < spec.input_size {
        return Ok(Vec::new());
    }
    let maps = forward_dense(&spec, params, &level.image)?;
    let stride = spec.dense_stride() as f64;
    let (ho, wo) = (maps.cls.shape()[1], maps.cls.shape()[2]);
    let cls = maps.cls.data();
    let reg = maps.reg.data();
    let side = spec.input_size as f64 / level.scale;
    let mut out = Vec::new();
    for i in 0..ho {
        for j in 0..wo {
            let score = cls[(ho + i) * wo + j].to_f64_lossy();
            if score >= threshold {
                let cell = i * wo + j;
                let offsets = [
                    reg[cell].to_f64_lossy(),
                    reg[ho * wo + cell].to_f64_lossy(),
                    reg[2 * ho * wo + cell].to_f64_lossy(),
                    reg[3 * ho * wo + cell].to_f64_lossy(),
                ];
                out.push((
                    BoundingBox::with_score(
                        j as f64 * stride / level.scale,
                        i as f64 * stride / level.scale,
                        side,
                        side,
                        score,
                    ),
                    offsets,
                ));
            }
        }
    }
    Ok(out)
}

/// Moves a box by predicted offsets; the exact inverse of the sampler's
/// regression target: translation in units of the box size, log-scale
/// growth for the sides.
pub fn apply_regression(b: &BoundingBox, offsets: &[f64; 4]) -> Result<BoundingBox> {
    b.validate()?;
    if offsets.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite calibration offsets {offsets:?}")));
    }
    Ok(BoundingBox {
        x: b.x + offsets[0] * b.w,
        y: b.y + offsets[1] * b.h,
        w: b.w * offsets[2].exp(),
        h: b.h * offsets[3].exp(),
        score: b.score,
    })
}

/// How suppression measures the overlap between two boxes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NmsMode {
    /// Intersection over union.
    Union,
    /// Intersection over the smaller box's area.
    Min,
}

/// Greedy suppression: repeatedly keep the highest-scoring candidate and
/// drop everything overlapping it by more than `threshold`. Score ties
/// prefer the lower index; the result is sorted by descending score.
pub fn nms(cands: &[BoundingBox], threshold: f64, mode: NmsMode) -> Result<Vec<BoundingBox>> {
    Ok(nms_indices(cands, threshold, mode)?.into_iter().map(|i| cands[i]).collect())
}

/// [`nms`] returning indices into `cands`, for callers that carry
/// per-candidate payloads alongside the boxes.
pub fn nms_indices(cands: &[BoundingBox], threshold: f64, mode: NmsMode) -> Result<Vec<usize>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!(
            "suppression threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let mut scores = Vec::with_capacity(cands.len());
    for b in cands {
        b.validate()?;
        match b.score {
            Some(s) if s.is_finite() => scores.push(s),
            _ => {
                return Err(Error::Contract(
                    "suppression candidates need finite scores".into(),
                ))
            }
        }
    }
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite").then(a.cmp(&b)));
    let mut suppressed = vec![false; cands.len()];
    let mut keep = Vec::new();
    for &i in &order {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order {
            if !suppressed[j] && j != i {
                let ov = match mode {
                    NmsMode::Union => iou(&cands[i], &cands[j])?,
                    NmsMode::Min => iom(&cands[i], &cands[j])?,
                };
                if ov > threshold {
                    suppressed[j] = true;
                }
            }
        }
    }
    Ok(keep)
}

fn clip_to_image(b: &BoundingBox, w: f64, h: f64) -> Option<BoundingBox> {
    let x0 = b.x.max(0.0);
    let y0 = b.y.max(0.0);
    let x1 = b.x2().min(w);
    let y1 = b.y2().min(h);
    (x1 > x0 && y1 > y0)
        .then_some(BoundingBox { x: x0, y: y0, w: x1 - x0, h: y1 - y0, score: b.score })
}

fn head_offsets<T: Scalar>(reg: &Tensor<T>) -> [f64; 4] {
    let d = reg.data();
    [
        d[0].to_f64_lossy(),
        d[1].to_f64_lossy(),
        d[2].to_f64_lossy(),
        d[3].to_f64_lossy(),
    ]
}

/// Runs the full cascade over one image. See [`detect_traced`] for the
/// per-stage candidate counts.
pub fn detect<T: Scalar>(
    model: &CascadeModel<T>,
    image: &Image,
    cfg: &DetectConfig,
) -> Result<Vec<DetectionResult>> {
    detect_traced(model, image, cfg).map(|(d, _)| d)
}

/// Stage-1 candidates: dense scan of every pyramid level, calibration,
/// then suppression within and (by default) across levels.
pub fn stage1_boxes<T: Scalar>(
    model: &CascadeModel<T>,
    image: &Image,
    cfg: &DetectConfig,
) -> Result<Vec<BoundingBox>> {
    let mut stage1: Vec<BoundingBox> = Vec::new();
    for level in build_pyramid::<T>(image, cfg.min_face, cfg.scale_factor)? {
        let cands = scan_12net(&model.net12, &level, cfg.thresholds[0])?;
        let mut boxes = Vec::with_capacity(cands.len());
        for (b, offsets) in &cands {
            boxes.push(apply_regression(b, offsets)?);
        }
        if cfg.per_level_nms {
            boxes = nms(&boxes, cfg.local_nms, NmsMode::Union)?;
        }
        stage1.extend(boxes);
    }
    if cfg.cross_level_nms {
        stage1 = nms(&stage1, cfg.local_nms, NmsMode::Union)?;
    }
    Ok(stage1)
}

/// Stage-2 survivors: square crops re-scored by the middle net, then
/// calibrated and locally suppressed. Also returns how many candidate
/// crops fell entirely outside the image and were skipped.
pub fn stage2_boxes<T: Scalar>(
    model: &CascadeModel<T>,
    image: &Image,
    cfg: &DetectConfig,
    stage1: &[BoundingBox],
) -> Result<(Vec<BoundingBox>, usize)> {
    let spec12 = model.spec(crate::net::NetId::Net12);
    let spec24 = model.spec(crate::net::NetId::Net24);
    let mut skipped = 0usize;
    let mut kept: Vec<BoundingBox> = Vec::new();
    for b in stage1 {
        let sq = b.squared();
        let t24 = match crop_resize::<T>(image, &sq, spec24.input_size) {
            Ok(t) => t,
            Err(_) => {
                skipped += 1;
                continue;
            }
        };
        let bridge12 = if model.bridged {
            let t12 = crop_resize::<T>(image, &sq, spec12.input_size)?;
            Some(forward(&spec12, &model.net12, &t12, None)?.feature)
        } else {
            None
        };
        let tr = forward(&spec24, &model.net24, &t24, bridge12.as_ref())?;
        let score = tr.heads.face_score().to_f64_lossy();
        if score >= cfg.thresholds[1] {
            let mut calibrated = apply_regression(&sq, &head_offsets(&tr.heads.reg))?;
            calibrated.score = Some(score);
            kept.push(calibrated);
        }
    }
    Ok((nms(&kept, cfg.local_nms, NmsMode::Union)?, skipped))
}

/// [`detect`] plus a trace of how many candidates survived each stage;
/// the counts never increase from stage to stage because later stages
/// only filter and merge.
pub fn detect_traced<T: Scalar>(
    model: &CascadeModel<T>,
    image: &Image,
    cfg: &DetectConfig,
) -> Result<(Vec<DetectionResult>, DetectTrace)> {
    let spec12 = model.spec(crate::net::NetId::Net12);
    let spec24 = model.spec(crate::net::NetId::Net24);
    let spec48 = model.spec(crate::net::NetId::Net48);
    let (iw, ih) = (image.width() as f64, image.height() as f64);
    let mut trace = DetectTrace::default();

    let stage1 = stage1_boxes(model, image, cfg)?;
    trace.stage_candidates[0] = stage1.len();

    let (stage2, skipped2) = stage2_boxes(model, image, cfg, &stage1)?;
    trace.skipped_crops += skipped2;
    trace.stage_candidates[1] = stage2.len();

    // Stage 3: final net scores, calibrates, and places landmarks; the
    // landmark head speaks crop-normalized coordinates, so they map back
    // through the square crop window.
    let mut boxes3: Vec<BoundingBox> = Vec::new();
    let mut landmarks3: Vec<[f64; 10]> = Vec::new();
    for b in &stage2 {
        let sq = b.squared();
        let t48 = match crop_resize::<T>(image, &sq, spec48.input_size) {
            Ok(t) => t,
            Err(_) => {
                trace.skipped_crops += 1;
                continue;
            }
        };
        let bridge24 = if model.bridged {
            let t12 = crop_resize::<T>(image, &sq, spec12.input_size)?;
            let f12 = forward(&spec12, &model.net12, &t12, None)?.feature;
            let t24 = crop_resize::<T>(image, &sq, spec24.input_size)?;
            Some(forward(&spec24, &model.net24, &t24, Some(&f12))?.feature)
        } else {
            None
        };
        let tr = forward(&spec48, &model.net48, &t48, bridge24.as_ref())?;
        let score = tr.heads.face_score().to_f64_lossy();
        if score >= cfg.thresholds[2] {
            let mut calibrated = apply_regression(&sq, &head_offsets(&tr.heads.reg))?;
            calibrated.score = Some(score);
            let pts = tr.heads.pts.data();
            let mut lm = [0.0f64; 10];
            for k in 0..5 {
                lm[2 * k] = sq.x + pts[2 * k].to_f64_lossy() * sq.w;
                lm[2 * k + 1] = sq.y + pts[2 * k + 1].to_f64_lossy() * sq.h;
            }
            boxes3.push(calibrated);
            landmarks3.push(lm);
        }
    }
    let mut detections = Vec::new();
    for i in nms_indices(&boxes3, cfg.global_nms, NmsMode::Min)? {
        if let Some(clipped) = clip_to_image(&boxes3[i], iw, ih) {
            detections.push(DetectionResult {
                bbox: clipped,
                score: boxes3[i].score.expect("stage 3 boxes carry scores"),
                landmarks: landmarks3[i],
            });
        }
    }
    trace.stage_candidates[2] = detections.len();
    Ok((detections, trace))
}
