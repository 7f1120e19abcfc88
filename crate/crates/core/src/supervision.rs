//! Training targets for the presence predictor, the localizer and the base classifier.

use crate::data::AnnotationSet;
use crate::error::{Error, Result};
use crate::geometry::{tiou_unchecked, OnsetOffset, ProposalSet, PyramidLayout};

/// Presence-score targets, one entry per pyramid position.
#[derive(Clone, Debug, PartialEq)]
pub struct ApsTargets {
    /// Position lies inside at least one annotated interval.
    pub p_loc: Vec<bool>,
    /// tIoU between the position's proposal and its ground truth, 0 off the mask.
    pub p_aps_hat: Vec<f64>,
}

impl ApsTargets {
    pub fn n_pos(&self) -> usize {
        self.p_loc.iter().filter(|&&b| b).count()
    }
}

/// Builds presence targets from the current proposals.
///
/// A position is positive when its centre time lies inside an annotated interval
/// (inclusive bounds). Its target is the best tIoU between its proposal and any
/// annotation covering it.
pub fn build_aps_targets(annotations: &AnnotationSet, proposals: &ProposalSet) -> ApsTargets {
    let n = proposals.len();
    let mut p_loc = vec![false; n];
    let mut p_aps_hat = vec![0.0; n];
    for (i, prop) in proposals.proposals.iter().enumerate() {
        let t = prop.position.t;
        for inst in annotations.instances.iter().filter(|a| a.interval.contains(t)) {
            p_loc[i] = true;
            p_aps_hat[i] = f64::max(p_aps_hat[i], tiou_unchecked(&prop.interval, &inst.interval));
        }
    }
    ApsTargets { p_loc, p_aps_hat }
}

/// Classification and regression targets, one entry per pyramid position.
#[derive(Clone, Debug, PartialEq)]
pub struct ClsRegTargets {
    /// Base-classifier column of the assigned annotation, `None` for background.
    pub class_id: Vec<Option<usize>>,
    /// Distances to the assigned annotation's boundaries in level units.
    pub reg_target: Vec<Option<OnsetOffset>>,
}

impl ClsRegTargets {
    pub fn n_pos(&self) -> usize {
        self.class_id.iter().filter(|c| c.is_some()).count()
    }

    pub fn positive_mask(&self) -> Vec<bool> {
        self.class_id.iter().map(Option::is_some).collect()
    }
}

/// Assigns each position to the shortest annotation containing its centre time.
///
/// `base_ids[k]` is the vocabulary id scored by classifier column `k`.
pub fn assign_cls_reg_targets(
    annotations: &AnnotationSet,
    layout: &PyramidLayout,
    base_ids: &[usize],
) -> Result<ClsRegTargets> {
    let columns = annotations
        .instances
        .iter()
        .map(|a| {
            base_ids
                .iter()
                .position(|&b| b == a.category)
                .ok_or_else(|| Error::Vocabulary(format!("category {} is not a base category", a.category)))
        })
        .collect::<Result<Vec<_>>>()?;

    let positions = layout.positions();
    let mut class_id = vec![None; positions.len()];
    let mut reg_target = vec![None; positions.len()];
    for (i, pos) in positions.iter().enumerate() {
        let best = annotations
            .instances
            .iter()
            .enumerate()
            .filter(|(_, a)| a.interval.contains(pos.t))
            // strict comparison keeps the earliest annotation on equal durations
            .fold(None::<usize>, |best, (j, a)| match best {
                Some(b) if annotations.instances[b].interval.length() <= a.interval.length() => Some(b),
                _ => Some(j),
            });
        if let Some(j) = best {
            let gt = annotations.instances[j].interval;
            class_id[i] = Some(columns[j]);
            reg_target[i] = Some(OnsetOffset { d_on: (pos.t - gt.t_s) / pos.unit, d_off: (gt.t_e - pos.t) / pos.unit });
        }
    }
    Ok(ClsRegTargets { class_id, reg_target })
}
