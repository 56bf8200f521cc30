//! Classification, distillation, and representation losses.
//!
//! Two routes are provided for every term: plain functions over already
//! computed probabilities / embeddings, and graph builders used for training
//! (which work from logits with a fused log-softmax). Tests check one against
//! the other.
//!
//! The student objective is
//!
//! ```text
//! total = CE' + alpha * KD' + beta * REP
//! CE'   = (1 - a) * CE(p_s, y)   + a * CE(p_th, y)
//! KD'   = (1 - a) * KL(p_t||p_s) + a * KL(p_t||p_th)
//! ```
//!
//! where `a` is the teacher-head weight and `p_th` the prediction of the
//! frozen teacher head on the student's features. Without a teacher head
//! `CE' = CE` and `KD' = KL(p_t||p_s)`. KL is computed at temperature `tau`
//! and scaled by `tau^2`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::nn::BoundBundle;
use crate::tensor::{euclidean, norm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepDistance {
    /// Euclidean distance between unit-normalised embeddings.
    #[default]
    Euclidean,
    /// Its square.
    SquaredEuclidean,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub kd: f64,
    pub rep: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `|total - (ce + alpha*kd + beta*rep)|`
    pub fn reconstruction_error(&self, alpha: f64, beta: f64) -> f64 {
        (self.total - (self.ce + alpha * self.kd + beta * self.rep)).abs()
    }

    pub fn is_finite(&self) -> bool {
        self.ce.is_finite() && self.kd.is_finite() && self.rep.is_finite() && self.total.is_finite()
    }
}

/// Per-head loss values before blending.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossComponents {
    pub ce: f64,
    pub ce_teacher_head: Option<f64>,
    pub kd: f64,
    pub kd_teacher_head: Option<f64>,
    pub rep: f64,
}

fn check_alpha_th(alpha_th: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha_th) {
        Ok(())
    } else {
        Err(Error::arg(
            "alpha_th",
            format!("must lie in [0, 1], got {alpha_th}"),
        ))
    }
}

fn check_weights(alpha: f64, beta: f64) -> Result<()> {
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::arg("alpha", format!("must be >= 0, got {alpha}")));
    }
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(Error::arg("beta", format!("must be >= 0, got {beta}")));
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::arg("tau", format!("must be > 0, got {tau}")))
    }
}

/// `(1 - alpha_th) * student_head + alpha_th * teacher_head`
pub fn blend_heads(student_head: f64, teacher_head: f64, alpha_th: f64) -> Result<f64> {
    check_alpha_th(alpha_th)?;
    Ok((1.0 - alpha_th) * student_head + alpha_th * teacher_head)
}

/// Mean over rows of `-ln p[y]`.
pub fn cross_entropy(p: &Tensor, labels: &[usize]) -> Result<f64> {
    let c = p.row_len();
    if labels.len() != p.num_rows() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: p.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let mut total = 0.0;
    for (row, (probs, &y)) in p.rows().zip(labels).enumerate() {
        if y >= c {
            return Err(Error::LabelOutOfRange {
                row,
                label: y,
                num_classes: c,
            });
        }
        total -= probs[y].ln();
    }
    Ok(total / labels.len() as f64)
}

/// Mean over rows of `KL(p_t || p_s)`. Probabilities carry no temperature,
/// so `tau` must be 1 here; use [`kd_divergence_logits`] for `tau != 1`.
pub fn kd_divergence(p_t: &Tensor, p_s: &Tensor, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if tau != 1.0 {
        return Err(Error::arg(
            "tau",
            "temperature needs logits; call kd_divergence_logits",
        ));
    }
    if p_t.shape() != p_s.shape() {
        return Err(Error::ShapeMismatch {
            op: "kd_divergence",
            lhs: p_t.shape().to_vec(),
            rhs: p_s.shape().to_vec(),
        });
    }
    let mut total = 0.0;
    for (t, s) in p_t.rows().zip(p_s.rows()) {
        for (&pt, &ps) in t.iter().zip(s) {
            if pt > 0.0 {
                total += pt * (pt / ps).ln();
            }
        }
    }
    Ok(total / p_t.num_rows() as f64)
}

/// `tau^2 * mean KL(softmax(l_t / tau) || softmax(l_s / tau))`.
pub fn kd_divergence_logits(logits_t: &Tensor, logits_s: &Tensor, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if logits_t.shape() != logits_s.shape() {
        return Err(Error::ShapeMismatch {
            op: "kd_divergence",
            lhs: logits_t.shape().to_vec(),
            rhs: logits_s.shape().to_vec(),
        });
    }
    let lt = logits_t.scale(1.0 / tau).log_softmax_rows();
    let ls = logits_s.scale(1.0 / tau).log_softmax_rows();
    let mut total = 0.0;
    for (t, s) in lt.rows().zip(ls.rows()) {
        for (&a, &b) in t.iter().zip(s) {
            total += a.exp() * (a - b);
        }
    }
    Ok(tau * tau * total / logits_t.num_rows() as f64)
}

fn unit_rows(z: &Tensor) -> Result<Vec<Vec<f64>>> {
    z.rows()
        .enumerate()
        .map(|(i, r)| {
            let n = norm(r);
            if n == 0.0 {
                Err(Error::ZeroNorm(i))
            } else {
                Ok(r.iter().map(|v| v / n).collect())
            }
        })
        .collect()
}

/// Mean over rows of `|| z_s/|z_s| - z_t/|z_t| ||`.
pub fn l2e(z_s: &Tensor, z_t: &Tensor) -> Result<f64> {
    representation_distance(z_s, z_t, RepDistance::Euclidean)
}

pub fn representation_distance(z_s: &Tensor, z_t: &Tensor, kind: RepDistance) -> Result<f64> {
    if z_s.shape() != z_t.shape() {
        return Err(Error::ShapeMismatch {
            op: "l2e",
            lhs: z_s.shape().to_vec(),
            rhs: z_t.shape().to_vec(),
        });
    }
    let us = unit_rows(z_s)?;
    let ut = unit_rows(z_t)?;
    let total: f64 = us
        .iter()
        .zip(&ut)
        .map(|(a, b)| {
            let d = euclidean(a, b);
            match kind {
                RepDistance::Euclidean => d,
                RepDistance::SquaredEuclidean => d * d,
            }
        })
        .sum();
    Ok(total / us.len() as f64)
}

/// `(1 - a) KL(p_t||p_s) + a KL(p_t||p_s_th)`
pub fn th_kd_divergence(p_s: &Tensor, p_s_th: &Tensor, p_t: &Tensor, alpha_th: f64) -> Result<f64> {
    check_alpha_th(alpha_th)?;
    blend_heads(
        kd_divergence(p_t, p_s, 1.0)?,
        kd_divergence(p_t, p_s_th, 1.0)?,
        alpha_th,
    )
}

/// `(1 - a) CE(p_s, y) + a CE(p_s_th, y)`
pub fn th_kd_cross_entropy(
    p_s: &Tensor,
    p_s_th: &Tensor,
    labels: &[usize],
    alpha_th: f64,
) -> Result<f64> {
    check_alpha_th(alpha_th)?;
    blend_heads(
        cross_entropy(p_s, labels)?,
        cross_entropy(p_s_th, labels)?,
        alpha_th,
    )
}

/// Combine per-head components into the full objective.
pub fn total_loss(
    c: &LossComponents,
    alpha: f64,
    beta: f64,
    alpha_th: f64,
) -> Result<LossBreakdown> {
    check_weights(alpha, beta)?;
    check_alpha_th(alpha_th)?;
    let ce = match c.ce_teacher_head {
        Some(th) => blend_heads(c.ce, th, alpha_th)?,
        None => c.ce,
    };
    let kd = match c.kd_teacher_head {
        Some(th) => blend_heads(c.kd, th, alpha_th)?,
        None => c.kd,
    };
    Ok(LossBreakdown {
        ce,
        kd,
        rep: c.rep,
        total: ce + alpha * kd + beta * c.rep,
    })
}

// ---------------------------------------------------------------------------
// graph builders

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveWeights {
    pub alpha: f64,
    pub beta: f64,
    pub alpha_th: f64,
    pub tau: f64,
    pub rep: RepDistance,
}

impl ObjectiveWeights {
    pub fn validate(&self) -> Result<()> {
        check_weights(self.alpha, self.beta)?;
        check_alpha_th(self.alpha_th)?;
        check_tau(self.tau)
    }
}

/// Teacher outputs for one batch; always constants in the student graph.
#[derive(Debug, Clone)]
pub struct TeacherTargets {
    /// `log softmax(logits_t / tau)`
    pub log_probs: Tensor,
    /// unit-normalised teacher features
    pub unit_features: Tensor,
}

impl TeacherTargets {
    pub fn from_outputs(logits: &Tensor, features: &Tensor, tau: f64) -> Result<Self> {
        check_tau(tau)?;
        let units = unit_rows(features)?;
        Ok(Self {
            log_probs: logits.scale(1.0 / tau).log_softmax_rows(),
            unit_features: Tensor::matrix(units.len(), features.row_len(), units.concat())?,
        })
    }

    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        Ok(Self {
            log_probs: self.log_probs.select_rows(rows)?,
            unit_features: self.unit_features.select_rows(rows)?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ObjectiveNodes {
    pub ce: NodeId,
    pub kd: Option<NodeId>,
    pub rep: Option<NodeId>,
    pub total: NodeId,
}

impl ObjectiveNodes {
    /// Read the evaluated values; call after `forward(total)`.
    pub fn breakdown(&self, g: &Graph) -> Result<LossBreakdown> {
        let get = |id: Option<NodeId>| -> Result<f64> {
            id.map_or(Ok(0.0), |id| g.value(id).map(Tensor::item))
        };
        Ok(LossBreakdown {
            ce: get(Some(self.ce))?,
            kd: get(self.kd)?,
            rep: get(self.rep)?,
            total: get(Some(self.total))?,
        })
    }
}

pub fn one_hot(labels: &[usize], num_classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), num_classes]);
    for (row, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::LabelOutOfRange {
                row,
                label: y,
                num_classes,
            });
        }
        t.data_mut()[row * num_classes + y] = 1.0;
    }
    Ok(t)
}

/// Mean cross-entropy from logits.
pub fn ce_node(g: &mut Graph, logits: NodeId, onehot: NodeId, batch: usize) -> NodeId {
    let ls = g.log_softmax(logits);
    let picked = g.mul(ls, onehot);
    let s = g.sum(picked);
    g.scale(s, -1.0 / batch as f64)
}

/// `tau^2 * mean KL(p_t || softmax(logits/tau))` with `log p_t` a constant.
pub fn kd_node(g: &mut Graph, logits: NodeId, teacher_log_probs: &Tensor, tau: f64) -> NodeId {
    let batch = teacher_log_probs.num_rows();
    let p_t = g.constant(teacher_log_probs.map(f64::exp));
    let log_p_t = g.constant(teacher_log_probs.clone());
    let scaled = if tau == 1.0 {
        logits
    } else {
        g.scale(logits, 1.0 / tau)
    };
    let ls = g.log_softmax(scaled);
    let diff = g.sub(log_p_t, ls);
    let prod = g.mul(p_t, diff);
    let s = g.sum(prod);
    g.scale(s, tau * tau / batch as f64)
}

/// Mean distance between unit-normalised student features and constant
/// unit teacher features.
pub fn rep_node(
    g: &mut Graph,
    features: NodeId,
    teacher_units: &Tensor,
    kind: RepDistance,
) -> NodeId {
    let n = g.row_norm(features);
    let unit = g.div(features, n);
    let target = g.constant(teacher_units.clone());
    let diff = g.sub(unit, target);
    let per_row = match kind {
        RepDistance::Euclidean => g.row_norm(diff),
        RepDistance::SquaredEuclidean => {
            let sq = g.mul(diff, diff);
            g.sum_rows(sq)
        }
    };
    g.mean(per_row)
}

fn weighted_sum(g: &mut Graph, terms: &[(NodeId, f64)]) -> NodeId {
    let mut acc: Option<NodeId> = None;
    for &(node, w) in terms {
        let term = if w == 1.0 { node } else { g.scale(node, w) };
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term),
        });
    }
    acc.expect("at least one term")
}

/// Build the full student objective for one batch.
///
/// Heads with zero blend weight are left out of the graph entirely, so with
/// `alpha_th = 1` the student's own head receives no gradient and with
/// `alpha_th = 0` the objective is exactly the one without a teacher head.
/// With a teacher present the KD and representation terms are always
/// built (for logging) even when their weight is zero.
pub fn build_objective(
    g: &mut Graph,
    student: &BoundBundle,
    x: NodeId,
    labels: &[usize],
    num_classes: usize,
    teacher: Option<&TeacherTargets>,
    w: &ObjectiveWeights,
) -> Result<ObjectiveNodes> {
    w.validate()?;
    let batch = labels.len();
    let onehot = g.constant(one_hot(labels, num_classes)?);
    let features = student.features(g, x);

    let mut heads: Vec<(NodeId, f64)> = Vec::with_capacity(2);
    match student.aux_head {
        Some(aux) => {
            if w.alpha_th < 1.0 {
                heads.push((student.head.apply(g, features), 1.0 - w.alpha_th));
            }
            if w.alpha_th > 0.0 {
                heads.push((aux.apply(g, features), w.alpha_th));
            }
        }
        None => heads.push((student.head.apply(g, features), 1.0)),
    }

    let ce_terms: Vec<(NodeId, f64)> = heads
        .iter()
        .map(|&(logits, wt)| (ce_node(g, logits, onehot, batch), wt))
        .collect();
    let ce = weighted_sum(g, &ce_terms);

    let (kd, rep) = match teacher {
        Some(t) => {
            if t.log_probs.num_rows() != batch {
                return Err(Error::ShapeMismatch {
                    op: "build_objective",
                    lhs: t.log_probs.shape().to_vec(),
                    rhs: vec![batch],
                });
            }
            let kd_terms: Vec<(NodeId, f64)> = heads
                .iter()
                .map(|&(logits, wt)| (kd_node(g, logits, &t.log_probs, w.tau), wt))
                .collect();
            let kd = weighted_sum(g, &kd_terms);
            let rep = rep_node(g, features, &t.unit_features, w.rep);
            (Some(kd), Some(rep))
        }
        None => (None, None),
    };

    let mut terms = vec![(ce, 1.0)];
    if let Some(kd) = kd {
        terms.push((kd, w.alpha));
    }
    if let Some(rep) = rep {
        terms.push((rep, w.beta));
    }
    let total = weighted_sum(g, &terms);
    Ok(ObjectiveNodes { ce, kd, rep, total })
}
