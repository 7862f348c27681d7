//! The three per-task losses and their weighted combination.
//!
//! Classification is binary cross-entropy on the softmax face probability,
//! box and landmark regression are SmoothL1 summed over components. Every
//! sample carries a task mask; a masked-out task contributes exactly zero
//! to both the loss value and the gradient (it is simply never evaluated,
//! so the corresponding head parameters keep bitwise-zero gradients).
//!
//! Batch totals are sums, not means; the default learning rate is tuned
//! for that convention at batch size 64.

use crate::error::{Error, Result};
use crate::net::{HeadGrads, Heads};
use crate::tensor::{Scalar, Tensor};

/// Probability floor/ceiling protecting the logs in [`cls_loss`].
pub const PROB_CLAMP: f64 = 1e-12;

/// The three training tasks every net learns jointly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    Cls,
    Reg,
    Pts,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Cls => "cls",
            Task::Reg => "reg",
            Task::Pts => "pts",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(Task::Cls),
            "reg" => Ok(Task::Reg),
            "pts" => Ok(Task::Pts),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

/// Per-net weights on the three task losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl LossWeights {
    /// Stage defaults: the first two nets weight landmarks at 0.5, the
    /// last net at 1.0 since it is the one whose landmarks ship.
    pub fn for_net(id: crate::net::NetId) -> Self {
        match id {
            crate::net::NetId::Net12 | crate::net::NetId::Net24 => {
                LossWeights { alpha: 1.0, beta: 0.5, gamma: 0.5 }
            }
            crate::net::NetId::Net48 => LossWeights { alpha: 1.0, beta: 0.5, gamma: 1.0 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Ground-truth targets a sample may carry. Absent targets make the
/// corresponding task illegal for this sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskLabels<T: Scalar> {
    /// 1 = face, 0 = background.
    pub cls_star: Option<u8>,
    /// Box offsets (dx, dy, dw, dh) in the anchor's normalized frame.
    pub reg_star: Option<[T; 4]>,
    /// Five landmark (x, y) pairs, normalized to the crop.
    pub pts_star: Option<[T; 10]>,
}

impl<T: Scalar> TaskLabels<T> {
    pub fn validate(&self) -> Result<()> {
        if self.cls_star.is_none() && self.reg_star.is_none() && self.pts_star.is_none() {
            return Err(Error::Contract("sample carries no labels at all".into()));
        }
        if let Some(c) = self.cls_star {
            if c > 1 {
                return Err(Error::Contract(format!("cls label must be 0/1, got {c}")));
            }
        }
        let finite = |vals: &[T]| vals.iter().all(|v| v.is_finite());
        if self.reg_star.map(|r| !finite(&r)).unwrap_or(false)
            || self.pts_star.map(|p| !finite(&p)).unwrap_or(false)
        {
            return Err(Error::Contract("non-finite regression target".into()));
        }
        Ok(())
    }
}

/// Which tasks a sample trains in the current iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TaskMask {
    pub cls: bool,
    pub reg: bool,
    pub pts: bool,
}

impl TaskMask {
    pub fn single(task: Task) -> Self {
        TaskMask {
            cls: task == Task::Cls,
            reg: task == Task::Reg,
            pts: task == Task::Pts,
        }
    }

    /// Enables every task whose target is present.
    pub fn for_labels<T: Scalar>(labels: &TaskLabels<T>) -> Self {
        TaskMask {
            cls: labels.cls_star.is_some(),
            reg: labels.reg_star.is_some(),
            pts: labels.pts_star.is_some(),
        }
    }

    pub fn enables(self, task: Task) -> bool {
        match task {
            Task::Cls => self.cls,
            Task::Reg => self.reg,
            Task::Pts => self.pts,
        }
    }
}

fn clamp_prob<T: Scalar>(y: T) -> Result<T> {
    if !(y >= T::zero() && y <= T::one()) {
        return Err(Error::Contract(format!(
            "classification probability {y} outside [0, 1]"
        )));
    }
    let lo = T::from_f64_lossy(PROB_CLAMP);
    let hi = T::one() - lo;
    Ok(if y < lo {
        lo
    } else if y > hi {
        hi
    } else {
        y
    })
}

/// Binary cross-entropy on the face probability:
/// `-(y* ln y + (1 - y*) ln(1 - y))`, with `y` clamped away from 0 and 1.
pub fn cls_loss<T: Scalar>(y: T, y_star: u8) -> Result<T> {
    let y = clamp_prob(y)?;
    Ok(if y_star == 1 {
        -(y.ln())
    } else {
        -((T::one() - y).ln())
    })
}

/// d(cls_loss)/dy at the clamped probability.
pub fn cls_loss_grad<T: Scalar>(y: T, y_star: u8) -> Result<T> {
    let y = clamp_prob(y)?;
    Ok(if y_star == 1 {
        -(T::one() / y)
    } else {
        T::one() / (T::one() - y)
    })
}

/// Huber-style penalty: quadratic inside the unit interval, linear outside.
pub fn smooth_l1<T: Scalar>(x: T) -> T {
    let ax = x.abs();
    if ax < T::one() {
        T::from_f64_lossy(0.5) * x * x
    } else {
        ax - T::from_f64_lossy(0.5)
    }
}

/// d(smooth_l1)/dx: `x` inside the unit interval, `sign(x)` outside.
pub fn smooth_l1_grad<T: Scalar>(x: T) -> T {
    if x.abs() < T::one() {
        x
    } else if x > T::zero() {
        T::one()
    } else {
        -T::one()
    }
}

fn residual_loss<T: Scalar>(pred: &[T], gt: &[T], n: usize, what: &str) -> Result<T> {
    if pred.len() != n || gt.len() != n {
        return Err(Error::Dimension(format!(
            "{what} loss expects {n} components, got {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut s = T::zero();
    for (p, g) in pred.iter().zip(gt) {
        s = s + smooth_l1(*p - *g);
    }
    Ok(s)
}

fn residual_grad<T: Scalar>(pred: &[T], gt: &[T]) -> Vec<T> {
    pred.iter().zip(gt).map(|(p, g)| smooth_l1_grad(*p - *g)).collect()
}

/// SmoothL1 summed over the 4 box-offset residuals.
pub fn reg_loss<T: Scalar>(reg: &[T], reg_star: &[T]) -> Result<T> {
    residual_loss(reg, reg_star, 4, "box regression")
}

/// SmoothL1 summed over the 10 landmark-coordinate residuals.
pub fn pts_loss<T: Scalar>(pts: &[T], pts_star: &[T]) -> Result<T> {
    residual_loss(pts, pts_star, 10, "landmark regression")
}

/// One sample as the loss sees it.
pub struct LossSample<'a, T: Scalar> {
    pub heads: &'a Heads<T>,
    pub labels: &'a TaskLabels<T>,
    pub mask: TaskMask,
}

fn check_mask<T: Scalar>(labels: &TaskLabels<T>, mask: TaskMask) -> Result<()> {
    if (mask.cls && labels.cls_star.is_none())
        || (mask.reg && labels.reg_star.is_none())
        || (mask.pts && labels.pts_star.is_none())
    {
        return Err(Error::Contract(
            "task mask enables a task whose label is absent".into(),
        ));
    }
    Ok(())
}

/// A sample's weighted loss, `alpha L_cls + beta L_reg + gamma L_pts` over
/// its enabled tasks.
pub fn sample_loss<T: Scalar>(
    heads: &Heads<T>,
    labels: &TaskLabels<T>,
    mask: TaskMask,
    weights: &LossWeights,
) -> Result<T> {
    check_mask(labels, mask)?;
    let mut total = T::zero();
    if mask.cls {
        let l = cls_loss(heads.face_score(), labels.cls_star.expect("checked"))?;
        total = total + T::from_f64_lossy(weights.alpha) * l;
    }
    if mask.reg {
        let l = reg_loss(heads.reg.data(), &labels.reg_star.expect("checked"))?;
        total = total + T::from_f64_lossy(weights.beta) * l;
    }
    if mask.pts {
        let l = pts_loss(heads.pts.data(), &labels.pts_star.expect("checked"))?;
        total = total + T::from_f64_lossy(weights.gamma) * l;
    }
    Ok(total)
}

/// Batch objective: the weighted **sum** of enabled task losses, plus each
/// sample's own contribution (what hard-example selection ranks).
///
/// The three task sums are accumulated separately and combined once at the
/// end, so scaling one weight rescales exactly that term.
pub fn multi_task_loss<'a, T, I>(samples: I, weights: &LossWeights) -> Result<(T, Vec<T>)>
where
    T: Scalar,
    I: IntoIterator<Item = LossSample<'a, T>>,
{
    weights.validate()?;
    let mut cls_sum = T::zero();
    let mut reg_sum = T::zero();
    let mut pts_sum = T::zero();
    let mut per_sample = Vec::new();
    for s in samples {
        check_mask(s.labels, s.mask)?;
        let mut mine = T::zero();
        if s.mask.cls {
            let l = cls_loss(s.heads.face_score(), s.labels.cls_star.expect("checked"))?;
            cls_sum = cls_sum + l;
            mine = mine + T::from_f64_lossy(weights.alpha) * l;
        }
        if s.mask.reg {
            let l = reg_loss(s.heads.reg.data(), &s.labels.reg_star.expect("checked"))?;
            reg_sum = reg_sum + l;
            mine = mine + T::from_f64_lossy(weights.beta) * l;
        }
        if s.mask.pts {
            let l = pts_loss(s.heads.pts.data(), &s.labels.pts_star.expect("checked"))?;
            pts_sum = pts_sum + l;
            mine = mine + T::from_f64_lossy(weights.gamma) * l;
        }
        if !mine.is_finite() {
            return Err(Error::Numeric("non-finite sample loss".into()));
        }
        per_sample.push(mine);
    }
    let total = T::from_f64_lossy(weights.alpha) * cls_sum
        + T::from_f64_lossy(weights.beta) * reg_sum
        + T::from_f64_lossy(weights.gamma) * pts_sum;
    Ok((total, per_sample))
}

/// Head gradients of one sample's weighted loss, ready for the net's
/// backward pass. Masked-out tasks come back as `None` so their heads are
/// never touched.
pub fn sample_loss_grads<T: Scalar>(
    heads: &Heads<T>,
    labels: &TaskLabels<T>,
    mask: TaskMask,
    weights: &LossWeights,
) -> Result<HeadGrads<T>> {
    check_mask(labels, mask)?;
    let mut grads = HeadGrads::default();
    if mask.cls {
        let d = cls_loss_grad(heads.face_score(), labels.cls_star.expect("checked"))?;
        grads.cls = Some(Tensor::from_vec(
            &[2],
            vec![T::zero(), T::from_f64_lossy(weights.alpha) * d],
        )?);
    }
    if mask.reg {
        let g = residual_grad(heads.reg.data(), &labels.reg_star.expect("checked"));
        let b = T::from_f64_lossy(weights.beta);
        grads.reg = Some(Tensor::from_vec(&[4], g.iter().map(|&v| b * v).collect())?);
    }
    if mask.pts {
        let g = residual_grad(heads.pts.data(), &labels.pts_star.expect("checked"));
        let c = T::from_f64_lossy(weights.gamma);
        grads.pts = Some(Tensor::from_vec(&[10], g.iter().map(|&v| c * v).collect())?);
    }
    Ok(grads)
}
