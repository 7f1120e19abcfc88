//! Training objectives: DIoU localization, focal classification, L1 presence, and
//! the contrastive projection loss, plus their unweighted sum.

use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{diou_loss, Interval, OnsetOffset};
use crate::model::{proj_forward, ParamNodes};
use crate::numerics::{Graph, NodeId, Objective, Tensor2D};
use crate::supervision::{ApsTargets, ClsRegTargets};

const PROB_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { alpha: 0.25, gamma: 2.0 }
    }
}

/// Sigmoid focal loss over every (position, class) pair, divided by `max(1, n_pos)`.
///
/// Returns the loss and its gradient with respect to the probabilities.
pub fn focal_loss(p_base: &Tensor2D, targets: &ClsRegTargets, fp: FocalParams) -> Result<(f64, Tensor2D)> {
    if p_base.rows() != targets.class_id.len() {
        return Err(Error::Dimension(format!(
            "{} probability rows for {} targets",
            p_base.rows(),
            targets.class_id.len()
        )));
    }
    let (alpha, gamma) = (fp.alpha, fp.gamma);
    let norm = targets.n_pos().max(1) as f64;
    let mut grad = Tensor2D::zeros(p_base.rows(), p_base.cols());
    let mut total = 0.0;
    for (r, cls) in targets.class_id.iter().enumerate() {
        for c in 0..p_base.cols() {
            let raw = p_base.get(r, c);
            let p = raw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            let live = if p == raw { 1.0 } else { 0.0 };
            let (loss, d) = if *cls == Some(c) {
                let q = 1.0 - p;
                let l = -alpha * q.powf(gamma) * p.ln();
                let d = alpha * (gamma * q.powf(gamma - 1.0) * p.ln() - q.powf(gamma) / p);
                (l, d)
            } else {
                let q = 1.0 - p;
                let l = -(1.0 - alpha) * p.powf(gamma) * q.ln();
                let d = -(1.0 - alpha) * (gamma * p.powf(gamma - 1.0) * q.ln() - p.powf(gamma) / q);
                (l, d)
            };
            total += loss;
            grad.set(r, c, live * d / norm);
        }
    }
    Ok((total / norm, grad))
}

/// Mean DIoU over positive positions, in level-normalized coordinates centred on
/// each position. Zero (with zero gradient) when there are no positives.
pub fn loc_loss(onset_offset: &Tensor2D, targets: &ClsRegTargets) -> Result<(f64, Tensor2D)> {
    if onset_offset.shape() != (targets.reg_target.len(), 2) {
        return Err(Error::Dimension(format!(
            "onset/offset is {:?}, expected ({}, 2)",
            onset_offset.shape(),
            targets.reg_target.len()
        )));
    }
    let mut grad = Tensor2D::zeros(onset_offset.rows(), 2);
    let mut total = 0.0;
    let mut count = 0usize;
    let mut terms = Vec::new();
    for (r, target) in targets.reg_target.iter().enumerate() {
        let Some(OnsetOffset { d_on: gt_on, d_off: gt_off }) = *target else { continue };
        if gt_on + gt_off <= 0.0 {
            continue;
        }
        let (d_on, d_off) = (onset_offset.get(r, 0), onset_offset.get(r, 1));
        let l = diou_loss(&Interval { t_s: -d_on, t_e: d_off }, &Interval { t_s: -gt_on, t_e: gt_off })?;
        total += l.loss;
        count += 1;
        terms.push((r, -l.d_start, l.d_end));
    }
    if count == 0 {
        return Ok((0.0, grad));
    }
    let n = count as f64;
    for (r, g_on, g_off) in terms {
        grad.set(r, 0, g_on / n);
        grad.set(r, 1, g_off / n);
    }
    Ok((total / n, grad))
}

/// Masked L1 between predicted and target presence scores, averaged over the mask.
pub fn app_loss(p_aps: &[f64], targets: &ApsTargets) -> Result<(f64, Vec<f64>)> {
    if p_aps.len() != targets.p_loc.len() {
        return Err(Error::Dimension(format!("{} scores for {} targets", p_aps.len(), targets.p_loc.len())));
    }
    let n_pos = targets.n_pos();
    let mut grad = vec![0.0; p_aps.len()];
    if n_pos == 0 {
        return Ok((0.0, grad));
    }
    let n = n_pos as f64;
    let mut total = 0.0;
    for i in 0..p_aps.len() {
        if !targets.p_loc[i] {
            continue;
        }
        let diff = p_aps[i] - targets.p_aps_hat[i];
        total += diff.abs();
        grad[i] = if diff > 0.0 {
            1.0 / n
        } else if diff < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    Ok((total / n, grad))
}

/// Cross-entropy of `logits` against class 0, and its gradient.
pub fn cross_entropy_first(logits: &[f64]) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = z.ln() + max - logits[0];
    let grad = exps.iter().enumerate().map(|(j, e)| e / z - if j == 0 { 1.0 } else { 0.0 }).collect();
    (loss, grad)
}

/// One contrastive anchor: a pooled proposal feature, its positive text row and
/// `N_neg` negative text rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveBatch {
    pub feature: Vec<f64>,
    pub category: usize,
    pub positive: Vec<f64>,
    pub negative_ids: Vec<usize>,
    pub negatives: Tensor2D,
}

impl ContrastiveBatch {
    /// Positive row followed by the negatives; the label is always row 0.
    pub fn contrast(&self) -> Tensor2D {
        let mut rows = vec![self.positive.clone()];
        rows.extend(self.negatives.iter_rows().map(<[f64]>::to_vec));
        Tensor2D::from_rows(&rows, self.positive.len()).expect("consistent widths")
    }
}

/// Draws `n_neg` distinct categories from `pool` other than `positive`.
pub fn sample_negatives<R: Rng>(rng: &mut R, positive: usize, pool: &[usize], n_neg: usize) -> Result<Vec<usize>> {
    let candidates: Vec<usize> = pool.iter().copied().filter(|&c| c != positive).collect();
    if candidates.is_empty() || candidates.len() < n_neg {
        return Err(Error::Contract(format!(
            "{} negative candidates for category {positive}, need {n_neg}",
            candidates.len()
        )));
    }
    Ok(candidates.choose_multiple(rng, n_neg).copied().collect())
}

/// Cross-entropy over `(projected · contrastᵀ) / τ`, mean over anchors.
/// The input is the `N x D` matrix of projected anchor features.
#[derive(Clone, Debug)]
pub struct ContrastiveObjective {
    pub contrast: Vec<Tensor2D>,
    pub temperature: f64,
}

impl ContrastiveObjective {
    pub fn new(batch: &[ContrastiveBatch], temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
        }
        let n_neg = batch.first().map(|b| b.negatives.rows()).unwrap_or(0);
        if batch.iter().any(|b| b.negatives.rows() != n_neg || b.negative_ids.contains(&b.category)) {
            return Err(Error::Contract("anchors need the same number of negatives, none equal to the positive".into()));
        }
        Ok(Self { contrast: batch.iter().map(ContrastiveBatch::contrast).collect(), temperature })
    }
}

impl Objective for ContrastiveObjective {
    fn evaluate(&self, input: &Tensor2D) -> Result<(f64, Tensor2D)> {
        if input.rows() != self.contrast.len() {
            return Err(Error::Dimension(format!("{} features for {} anchors", input.rows(), self.contrast.len())));
        }
        let mut grad = Tensor2D::zeros(input.rows(), input.cols());
        if input.rows() == 0 {
            return Ok((0.0, grad));
        }
        let n = input.rows() as f64;
        let mut total = 0.0;
        for (i, contrast) in self.contrast.iter().enumerate() {
            let x = input.row(i);
            let logits: Vec<f64> =
                contrast.iter_rows().map(|t| crate::numerics::dot(x, t) / self.temperature).collect();
            let (l, g) = cross_entropy_first(&logits);
            total += l;
            let out = grad.row_mut(i);
            for (gj, t) in g.iter().zip(contrast.iter_rows()) {
                for (o, tv) in out.iter_mut().zip(t) {
                    *o += gj * tv / (self.temperature * n);
                }
            }
        }
        Ok((total / n, grad))
    }

    fn name(&self) -> &str {
        "contrastive"
    }
}

/// Projects the anchors' pooled features and attaches the contrastive loss.
pub fn contrastive_loss(
    graph: &mut Graph,
    params: &ParamNodes,
    batch: &[ContrastiveBatch],
    temperature: f64,
) -> Result<NodeId> {
    let d = batch.first().map(|b| b.feature.len()).unwrap_or(1);
    let rows: Vec<&[f64]> = batch.iter().map(|b| b.feature.as_slice()).collect();
    let features = graph.constant(Tensor2D::from_rows(&rows, d)?);
    let projected = proj_forward(graph, params, features)?;
    graph.objective(projected, Arc::new(ContrastiveObjective::new(batch, temperature)?))
}

pub struct FocalObjective {
    pub targets: ClsRegTargets,
    pub params: FocalParams,
}

impl Objective for FocalObjective {
    fn evaluate(&self, input: &Tensor2D) -> Result<(f64, Tensor2D)> {
        focal_loss(input, &self.targets, self.params)
    }

    fn name(&self) -> &str {
        "focal"
    }
}

pub struct LocObjective {
    pub targets: ClsRegTargets,
}

impl Objective for LocObjective {
    fn evaluate(&self, input: &Tensor2D) -> Result<(f64, Tensor2D)> {
        loc_loss(input, &self.targets)
    }

    fn name(&self) -> &str {
        "diou"
    }
}

pub struct AppObjective {
    pub targets: ApsTargets,
}

impl Objective for AppObjective {
    fn evaluate(&self, input: &Tensor2D) -> Result<(f64, Tensor2D)> {
        let (l, g) = app_loss(input.data(), &self.targets)?;
        Ok((l, Tensor2D::from_vec(input.rows(), input.cols(), g)?))
    }

    fn name(&self) -> &str {
        "presence_l1"
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_loc: f64,
    pub l_cc: f64,
    pub l_app: f64,
    pub l_contrast: f64,
    pub total: f64,
    pub n_pos: usize,
}

impl LossBreakdown {
    /// Element-wise mean of several breakdowns.
    pub fn mean(parts: &[LossBreakdown]) -> LossBreakdown {
        let n = parts.len().max(1) as f64;
        let mut m = LossBreakdown::default();
        for p in parts {
            m.l_loc += p.l_loc;
            m.l_cc += p.l_cc;
            m.l_app += p.l_app;
            m.l_contrast += p.l_contrast;
            m.total += p.total;
            m.n_pos += p.n_pos;
        }
        m.l_loc /= n;
        m.l_cc /= n;
        m.l_app /= n;
        m.l_contrast /= n;
        m.total /= n;
        m.n_pos = (m.n_pos as f64 / n).round() as usize;
        m
    }
}

/// Unweighted sum of the four parts, in a fixed order.
pub fn total_loss(l_loc: f64, l_cc: f64, l_app: f64, l_contrast: f64, n_pos: usize) -> Result<LossBreakdown> {
    for (name, v) in [("loc", l_loc), ("cc", l_cc), ("app", l_app), ("contrast", l_contrast)] {
        if !v.is_finite() {
            return Err(Error::Divergence(format!("{name} loss is {v}")));
        }
    }
    Ok(LossBreakdown { l_loc, l_cc, l_app, l_contrast, total: l_loc + l_cc + l_app + l_contrast, n_pos })
}
