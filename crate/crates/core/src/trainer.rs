//! Per-task mini-batch training with hard-example selection, candidate
//! mining for the later nets, and joint fine-tuning of the whole cascade
//! through feature bridges.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cascade::{stage1_boxes, stage2_boxes, DetectConfig};
use crate::error::{Error, Result};
use crate::image::crop_resize;
use crate::losses::{sample_loss, sample_loss_grads, LossWeights, Task, TaskMask};
use crate::model::CascadeModel;
use crate::net::{
    backward, forward, sgd_step, HeadGrads, NetId, NetworkSpec, Parameters, BRIDGE_WIDTH_12,
    BRIDGE_WIDTH_24,
};
use crate::sampler::{
    augment_fill, generate_proposals, label_proposal, ohem_select, AnnotatedImage, ClassCounts,
    Proposal, ProposalLabel,
};
use crate::tensor::Scalar;

/// Which part of the cascade a training run updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Net12,
    Net24,
    Net48,
    EndToEnd,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Net12 => "net12",
            Stage::Net24 => "net24",
            Stage::Net48 => "net48",
            Stage::EndToEnd => "e2e",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "net12" | "12net" => Ok(Stage::Net12),
            "net24" | "24net" => Ok(Stage::Net24),
            "net48" | "48net" => Ok(Stage::Net48),
            "e2e" => Ok(Stage::EndToEnd),
            other => Err(Error::Config(format!(
                "unknown stage {other:?}, expected 12net, 24net, 48net, or e2e"
            ))),
        }
    }

    /// The single net this stage trains, if it is a stage-wise run.
    pub fn net_id(self) -> Option<NetId> {
        match self {
            Stage::Net12 => Some(NetId::Net12),
            Stage::Net24 => Some(NetId::Net24),
            Stage::Net48 => Some(NetId::Net48),
            Stage::EndToEnd => None,
        }
    }
}

/// Hyper-parameters shared by stage-wise and joint training runs.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Fraction of each mini-batch kept as hard examples; 1.0 is plain SGD.
    pub keep_fraction: f64,
    pub iterations: usize,
    pub seed: u64,
    pub stage: Stage,
    /// Per-net task weights, indexed by [`NetId`] order (12, 24, 48).
    pub weights: [LossWeights; 3],
    /// Joint fine-tuning backpropagates only the final net's losses by
    /// default; set to also add the earlier nets' own head losses.
    pub e2e_all_heads: bool,
    /// If nonzero, every this many iterations the full probe set's mean
    /// loss is recorded, giving a selection-independent progress metric.
    pub probe_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            batch_size: 64,
            keep_fraction: 0.7,
            iterations: 500,
            seed: 0,
            stage: Stage::Net12,
            weights: [
                LossWeights::for_net(NetId::Net12),
                LossWeights::for_net(NetId::Net24),
                LossWeights::for_net(NetId::Net48),
            ],
            e2e_all_heads: false,
            probe_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "keep_fraction must lie in (0, 1], got {}",
                self.keep_fraction
            )));
        }
        for w in &self.weights {
            w.validate()?;
        }
        Ok(())
    }

    pub fn weights_for(&self, id: NetId) -> &LossWeights {
        match id {
            NetId::Net12 => &self.weights[0],
            NetId::Net24 => &self.weights[1],
            NetId::Net48 => &self.weights[2],
        }
    }
}

/// One training iteration's record: which task ran, the mean loss over
/// the kept hard examples, and how many were kept.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub task: Task,
    pub hard_loss: f64,
    pub kept: usize,
}

/// Renders a trace as CSV with a fixed header.
pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("iteration,task,hard_loss,kept_count\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.iteration,
            r.task.as_str(),
            r.hard_loss,
            r.kept
        ));
    }
    out
}

/// Result of a stage-wise run. A diverged run still returns its partial
/// trace so the caller can report where the loss blew up.
pub struct StageOutcome<T: Scalar> {
    pub params: Parameters<T>,
    pub trace: Vec<TraceRow>,
    /// (iteration, mean probe loss) pairs when probing was enabled.
    pub probe: Vec<(usize, f64)>,
    pub diverged: Option<String>,
}

/// Result of a joint fine-tuning run over all three nets.
pub struct E2eOutcome<T: Scalar> {
    pub model: CascadeModel<T>,
    pub trace: Vec<TraceRow>,
    pub diverged: Option<String>,
}

fn eligible_indices<T: Scalar>(pool: &[Proposal<T>], task: Task) -> (Vec<usize>, Vec<usize>) {
    let mut primary = Vec::new();
    let mut secondary = Vec::new();
    for (i, p) in pool.iter().enumerate() {
        match task {
            Task::Cls => match p.label {
                ProposalLabel::Negative => primary.push(i),
                ProposalLabel::Positive => secondary.push(i),
                _ => {}
            },
            Task::Reg => {
                if matches!(p.label, ProposalLabel::Positive | ProposalLabel::PartFace) {
                    primary.push(i);
                }
            }
            Task::Pts => {
                if p.label == ProposalLabel::LandmarkFace {
                    primary.push(i);
                }
            }
        }
    }
    (primary, secondary)
}

/// Draws a batch of pool indices for one task, sampling with replacement.
/// Classification batches mix negatives and positives roughly 3:1; the
/// other tasks sample uniformly from their eligible proposals. Every
/// returned proposal carries the targets the task needs, so one task mask
/// covers the whole batch.
pub fn make_task_minibatch<T: Scalar>(
    pool: &[Proposal<T>],
    task: Task,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    if size == 0 {
        return Err(Error::Config("minibatch size must be at least 1".into()));
    }
    let (primary, secondary) = eligible_indices(pool, task);
    match task {
        Task::Cls => {
            let (negs, poss) = (&primary, &secondary);
            if negs.is_empty() && poss.is_empty() {
                return Err(Error::Sampling(
                    "no classification-eligible proposals in pool".into(),
                ));
            }
            let want_pos = if negs.is_empty() {
                size
            } else if poss.is_empty() {
                0
            } else {
                (size / 4).max(1)
            };
            let mut batch = Vec::with_capacity(size);
            for i in 0..size {
                let side = if i < want_pos { poss } else { negs };
                batch.push(side[rng.gen_range(0..side.len())]);
            }
            Ok(batch)
        }
        Task::Reg | Task::Pts => {
            if primary.is_empty() {
                return Err(Error::Sampling(format!(
                    "no {}-eligible proposals in pool",
                    task.as_str()
                )));
            }
            Ok((0..size)
                .map(|_| primary[rng.gen_range(0..primary.len())])
                .collect())
        }
    }
}

fn scale_head_grads<T: Scalar>(hg: &mut HeadGrads<T>, s: T) {
    for slot in [&mut hg.cls, &mut hg.reg, &mut hg.pts] {
        if let Some(t) = slot {
            for v in t.data_mut() {
                *v = *v * s;
            }
        }
    }
}

/// Task rotation for one pass of the schedule: classification twice, then
/// regression, then landmarks, restricted to tasks the pool can serve.
fn build_schedule<T: Scalar>(pool: &[Proposal<T>]) -> Result<Vec<Task>> {
    let has = |l: ProposalLabel| pool.iter().any(|p| p.label == l);
    let cls_ok = has(ProposalLabel::Negative) || has(ProposalLabel::Positive);
    let reg_ok = has(ProposalLabel::Positive) || has(ProposalLabel::PartFace);
    let pts_ok = has(ProposalLabel::LandmarkFace);
    if !cls_ok {
        return Err(Error::Sampling(
            "training pool has no classification samples".into(),
        ));
    }
    let mut schedule = vec![Task::Cls, Task::Cls];
    if reg_ok {
        schedule.push(Task::Reg);
    }
    if pts_ok {
        schedule.push(Task::Pts);
    }
    Ok(schedule)
}

/// Mean loss over a fixed set of proposals, each scored on every task it
/// carries targets for. Used as a selection-independent progress probe.
pub fn pool_loss<T: Scalar>(
    spec: &NetworkSpec,
    params: &Parameters<T>,
    pool: &[Proposal<T>],
    weights: &LossWeights,
) -> Result<f64> {
    if pool.is_empty() {
        return Err(Error::Contract("probe pool is empty".into()));
    }
    let mut total = 0.0;
    for p in pool {
        let tr = forward(spec, params, &p.patch, None)?;
        let labels = p.task_labels()?;
        let mask = TaskMask::for_labels(&labels);
        total += sample_loss(&tr.heads, &labels, mask, weights)?.to_f64_lossy();
    }
    Ok(total / pool.len() as f64)
}

/// Face/non-face accuracy of a net over the classification samples of a
/// pool, thresholding the face probability at 0.5.
pub fn cls_accuracy<T: Scalar>(
    spec: &NetworkSpec,
    params: &Parameters<T>,
    pool: &[Proposal<T>],
) -> Result<f64> {
    let mut seen = 0usize;
    let mut hits = 0usize;
    for p in pool {
        let truth = match p.label {
            ProposalLabel::Negative => false,
            ProposalLabel::Positive => true,
            _ => continue,
        };
        let tr = forward(spec, params, &p.patch, None)?;
        let predicted = tr.heads.face_score().to_f64_lossy() >= 0.5;
        seen += 1;
        if predicted == truth {
            hits += 1;
        }
    }
    if seen == 0 {
        return Err(Error::Contract(
            "pool has no classification samples to score".into(),
        ));
    }
    Ok(hits as f64 / seen as f64)
}

/// Trains one net on a labeled proposal pool.
///
/// Each iteration draws a single-task mini-batch, keeps the hardest
/// `keep_fraction` of it by loss, and applies one SGD step from the mean
/// gradient of the kept samples. The run is bitwise reproducible for a
/// fixed seed. A non-finite loss aborts the run, returning the trace
/// collected so far with `diverged` set.
pub fn train_stage<T: Scalar>(
    spec: &NetworkSpec,
    mut params: Parameters<T>,
    pool: &[Proposal<T>],
    cfg: &TrainConfig,
    probe: Option<&[Proposal<T>]>,
) -> Result<StageOutcome<T>> {
    cfg.validate()?;
    let weights = cfg.weights_for(spec.id);
    let schedule = build_schedule(pool)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    params.ensure_grads();

    let mut trace: Vec<TraceRow> = Vec::with_capacity(cfg.iterations);
    let mut probe_rows: Vec<(usize, f64)> = Vec::new();
    for it in 0..cfg.iterations {
        let task = schedule[it % schedule.len()];
        let mask = TaskMask::single(task);
        let batch = make_task_minibatch(pool, task, cfg.batch_size, &mut rng)?;

        let mut saved = Vec::with_capacity(batch.len());
        let mut losses: Vec<T> = Vec::with_capacity(batch.len());
        for &pi in &batch {
            let p = &pool[pi];
            let tr = forward(spec, &params, &p.patch, None)?;
            let labels = p.task_labels()?;
            let loss = sample_loss(&tr.heads, &labels, mask, weights)?;
            if !loss.to_f64_lossy().is_finite() {
                return Ok(StageOutcome {
                    params,
                    trace,
                    probe: probe_rows,
                    diverged: Some(format!(
                        "non-finite {} loss at iteration {it}",
                        task.as_str()
                    )),
                });
            }
            saved.push((tr, labels));
            losses.push(loss);
        }

        let hard = ohem_select(&losses, cfg.keep_fraction)?;
        let kept = hard.iter().filter(|&&h| h).count();
        let hard_sum: f64 = losses
            .iter()
            .zip(&hard)
            .filter(|(_, &h)| h)
            .map(|(l, _)| l.to_f64_lossy())
            .sum();
        let scale = T::from_f64_lossy(1.0 / kept as f64);
        for (i, (tr, labels)) in saved.into_iter().enumerate() {
            if !hard[i] {
                continue;
            }
            let mut hg = sample_loss_grads(&tr.heads, &labels, mask, weights)?;
            scale_head_grads(&mut hg, scale);
            backward(spec, &mut params, &tr, &hg, None)?;
        }
        sgd_step(&mut params, T::from_f64_lossy(cfg.learning_rate))?;

        trace.push(TraceRow {
            iteration: it,
            task,
            hard_loss: hard_sum / kept as f64,
            kept,
        });
        if cfg.probe_every > 0 && (it + 1) % cfg.probe_every == 0 {
            if let Some(pr) = probe {
                probe_rows.push((it, pool_loss(spec, &params, pr, weights)?));
            }
        }
    }
    Ok(StageOutcome {
        params,
        trace,
        probe: probe_rows,
        diverged: None,
    })
}

/// Builds a proposal pool for a later net from the current cascade's own
/// mistakes: candidates that survive the earlier stages are cropped at the
/// target net's input size and labeled against ground truth, so confident
/// false alarms become that net's hard negatives. Shortfalls in any class
/// are topped up with generated proposals, and mined negatives are
/// augmented (flips, jitter) when mining alone comes up short. Each image
/// uses an rng seeded by `seed` plus its index, so results do not depend
/// on traversal order.
pub fn mine_pool<T: Scalar>(
    model: &CascadeModel<T>,
    target: NetId,
    corpus: &[AnnotatedImage],
    per_image: &ClassCounts,
    detect_cfg: &DetectConfig,
    seed: u64,
) -> Result<Vec<Proposal<T>>> {
    if target == NetId::Net12 {
        return Err(Error::Config(
            "the first net trains on generated proposals, not mined ones".into(),
        ));
    }
    let patch_size = target.input_size();
    let mut out: Vec<Proposal<T>> = Vec::new();
    for (id, scene) in corpus.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(id as u64));
        let candidates = match target {
            NetId::Net24 => stage1_boxes(model, &scene.image, detect_cfg)?,
            NetId::Net48 => {
                let s1 = stage1_boxes(model, &scene.image, detect_cfg)?;
                stage2_boxes(model, &scene.image, detect_cfg, &s1)?.0
            }
            NetId::Net12 => unreachable!(),
        };
        let gts = scene.face_boxes();
        let mut mined_neg = Vec::new();
        let mut mined_pos = Vec::new();
        let mut mined_part = Vec::new();
        for cand in &candidates {
            let mut sq = cand.squared();
            sq.score = None;
            if sq.validate().is_err() {
                continue;
            }
            let (label, matched) = label_proposal(&sq, &gts)?;
            let bucket = match label {
                ProposalLabel::Negative if mined_neg.len() < per_image.negatives => &mut mined_neg,
                ProposalLabel::Positive if mined_pos.len() < per_image.positives => &mut mined_pos,
                ProposalLabel::PartFace if mined_part.len() < per_image.part_faces => {
                    &mut mined_part
                }
                _ => continue,
            };
            let patch = match crop_resize::<T>(&scene.image, &sq, patch_size) {
                Ok(t) => t,
                Err(_) => continue,
            };
            bucket.push(Proposal {
                image_id: id,
                window: sq.clone(),
                label,
                target_box: matched.map(|g| gts[g].clone()),
                landmarks: None,
                patch,
            });
        }
        if mined_neg.len() < per_image.negatives && !mined_neg.is_empty() {
            mined_neg = augment_fill(&mined_neg, per_image.negatives, corpus, patch_size, &mut rng)?;
        }
        let deficit = ClassCounts {
            negatives: per_image.negatives.saturating_sub(mined_neg.len()),
            positives: per_image.positives.saturating_sub(mined_pos.len()),
            part_faces: per_image.part_faces.saturating_sub(mined_part.len()),
            landmark_faces: per_image.landmark_faces,
        };
        out.append(&mut mined_neg);
        out.append(&mut mined_pos);
        out.append(&mut mined_part);
        if deficit.total() > 0 {
            out.extend(generate_proposals(id, scene, &deficit, patch_size, &mut rng)?);
        }
    }
    Ok(out)
}

fn native_fc_width(spec: &NetworkSpec) -> Result<(String, usize)> {
    for layer in &spec.trunk {
        if let crate::net::LayerSpec::Fc { id, in_width, .. } = layer {
            return Ok((id.to_string(), *in_width));
        }
    }
    Err(Error::Contract(format!(
        "{} has no fully connected trunk layer",
        spec.id.as_str()
    )))
}

/// Copies a stage-wise model into the bridged structure: the later nets'
/// first fully connected layers grow zero-initialized columns for the
/// bridged feature, so the copy computes exactly what the original did
/// until fine-tuning moves the new weights.
pub fn bridge_model<T: Scalar>(stagewise: &CascadeModel<T>) -> Result<CascadeModel<T>> {
    if stagewise.bridged {
        return Err(Error::Contract("model is already bridged".into()));
    }
    let (fc24, native24) = native_fc_width(&NetworkSpec::net24(false))?;
    let (fc48, native48) = native_fc_width(&NetworkSpec::net48(false))?;
    Ok(CascadeModel {
        bridged: true,
        net12: stagewise.net12.clone(),
        net24: stagewise
            .net24
            .with_widened_fc(&fc24, native24, BRIDGE_WIDTH_12)?,
        net48: stagewise
            .net48
            .with_widened_fc(&fc48, native48, BRIDGE_WIDTH_24)?,
    })
}

/// Joint fine-tuning of the full cascade.
///
/// The stage-wise model is copied into the bridged structure, a proposal
/// pool is mined once with the stage-wise cascade's own front end, and
/// then every training sample is forwarded through all three nets on the
/// same window (12, 24, and 48 pixel crops), with each net's trunk
/// feature bridged into the next. By default the loss is the final net's
/// multi-task loss; its gradient flows back through the bridges into all
/// three nets, and every net takes an SGD step. Zero iterations returns
/// the bridged copy untouched, which computes exactly what the stage-wise
/// model does.
pub fn alternating_end_to_end<T: Scalar>(
    stagewise: &CascadeModel<T>,
    corpus: &[AnnotatedImage],
    per_image: &ClassCounts,
    cfg: &TrainConfig,
    detect_cfg: &DetectConfig,
) -> Result<E2eOutcome<T>> {
    cfg.validate()?;
    let mut model = bridge_model(stagewise)?;
    if cfg.iterations == 0 {
        return Ok(E2eOutcome {
            model,
            trace: Vec::new(),
            diverged: None,
        });
    }
    let pool = mine_pool(
        stagewise,
        NetId::Net48,
        corpus,
        per_image,
        detect_cfg,
        cfg.seed,
    )?;
    let spec12 = model.spec(NetId::Net12);
    let spec24 = model.spec(NetId::Net24);
    let spec48 = model.spec(NetId::Net48);
    let schedule = build_schedule(&pool)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    model.net12.ensure_grads();
    model.net24.ensure_grads();
    model.net48.ensure_grads();

    let mut trace: Vec<TraceRow> = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let task = schedule[it % schedule.len()];
        let mask = TaskMask::single(task);
        let batch = make_task_minibatch(&pool, task, cfg.batch_size, &mut rng)?;

        let mut saved = Vec::with_capacity(batch.len());
        let mut losses: Vec<T> = Vec::with_capacity(batch.len());
        for &pi in &batch {
            let p = &pool[pi];
            let image = &corpus[p.image_id].image;
            let t12 = crop_resize::<T>(image, &p.window, spec12.input_size)?;
            let t24 = crop_resize::<T>(image, &p.window, spec24.input_size)?;
            let tr12 = forward(&spec12, &model.net12, &t12, None)?;
            let tr24 = forward(&spec24, &model.net24, &t24, Some(&tr12.feature))?;
            let tr48 = forward(&spec48, &model.net48, &p.patch, Some(&tr24.feature))?;
            let labels = p.task_labels()?;
            let mut loss = sample_loss(&tr48.heads, &labels, mask, cfg.weights_for(NetId::Net48))?;
            if cfg.e2e_all_heads {
                loss = loss
                    + sample_loss(&tr24.heads, &labels, mask, cfg.weights_for(NetId::Net24))?
                    + sample_loss(&tr12.heads, &labels, mask, cfg.weights_for(NetId::Net12))?;
            }
            if !loss.to_f64_lossy().is_finite() {
                return Ok(E2eOutcome {
                    model,
                    trace,
                    diverged: Some(format!(
                        "non-finite {} loss at iteration {it}",
                        task.as_str()
                    )),
                });
            }
            saved.push((tr12, tr24, tr48, labels));
            losses.push(loss);
        }

        let hard = ohem_select(&losses, cfg.keep_fraction)?;
        let kept = hard.iter().filter(|&&h| h).count();
        let hard_sum: f64 = losses
            .iter()
            .zip(&hard)
            .filter(|(_, &h)| h)
            .map(|(l, _)| l.to_f64_lossy())
            .sum();
        let scale = T::from_f64_lossy(1.0 / kept as f64);
        for (i, (tr12, tr24, tr48, labels)) in saved.into_iter().enumerate() {
            if !hard[i] {
                continue;
            }
            let mut hg48 =
                sample_loss_grads(&tr48.heads, &labels, mask, cfg.weights_for(NetId::Net48))?;
            scale_head_grads(&mut hg48, scale);
            let out48 = backward(&spec48, &mut model.net48, &tr48, &hg48, None)?;
            let db24 = out48
                .dbridge
                .ok_or_else(|| Error::Contract("bridged net returned no bridge gradient".into()))?;

            let mut hg24 = if cfg.e2e_all_heads {
                let mut hg =
                    sample_loss_grads(&tr24.heads, &labels, mask, cfg.weights_for(NetId::Net24))?;
                scale_head_grads(&mut hg, scale);
                hg
            } else {
                HeadGrads::default()
            };
            let _ = &mut hg24;
            let out24 = backward(&spec24, &mut model.net24, &tr24, &hg24, Some(&db24))?;
            let db12 = out24
                .dbridge
                .ok_or_else(|| Error::Contract("bridged net returned no bridge gradient".into()))?;

            let hg12 = if cfg.e2e_all_heads {
                let mut hg =
                    sample_loss_grads(&tr12.heads, &labels, mask, cfg.weights_for(NetId::Net12))?;
                scale_head_grads(&mut hg, scale);
                hg
            } else {
                HeadGrads::default()
            };
            backward(&spec12, &mut model.net12, &tr12, &hg12, Some(&db12))?;
        }
        let lr = T::from_f64_lossy(cfg.learning_rate);
        sgd_step(&mut model.net12, lr)?;
        sgd_step(&mut model.net24, lr)?;
        sgd_step(&mut model.net48, lr)?;

        trace.push(TraceRow {
            iteration: it,
            task,
            hard_loss: hard_sum / kept as f64,
            kept,
        });
    }
    model.net12.drop_grads();
    model.net24.drop_grads();
    model.net48.drop_grads();
    Ok(E2eOutcome {
        model,
        trace,
        diverged: None,
    })
}
