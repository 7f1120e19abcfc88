//! Splits decoded proposals into confident base-class detections, class-agnostic
//! novel proposals, and discards.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Interval, ProposalSet};
use crate::numerics::Tensor2D;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriageConfig {
    pub lambda_retain: f64,
    pub lambda_base: f64,
}

impl Default for TriageConfig {
    fn default() -> Self {
        Self { lambda_retain: 0.5, lambda_base: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaseInstance {
    pub interval: Interval,
    /// Global vocabulary id.
    pub category: usize,
    pub score: f64,
    /// Row of the proposal in the input set.
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NovelProposal {
    pub interval: Interval,
    pub aps: f64,
    pub index: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriageResult {
    pub base_instances: Vec<BaseInstance>,
    pub novel_proposals: Vec<NovelProposal>,
    pub discarded: usize,
}

/// First index of the row maximum.
pub(crate) fn argmax(row: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &v) in row.iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// `base_ids[k]` is the global id of column `k` of `p_base`.
pub fn triage_proposals(
    proposals: &ProposalSet,
    p_aps: &[f64],
    p_base: &Tensor2D,
    cfg: TriageConfig,
    base_ids: &[usize],
) -> Result<TriageResult> {
    let n = proposals.len();
    if p_aps.len() != n || p_base.rows() != n {
        return Err(Error::Dimension(format!(
            "{n} proposals, {} presence scores, {} class rows",
            p_aps.len(),
            p_base.rows()
        )));
    }
    if p_base.cols() != base_ids.len() || base_ids.is_empty() {
        return Err(Error::Dimension(format!(
            "{} class columns for a base vocabulary of {}",
            p_base.cols(),
            base_ids.len()
        )));
    }
    let mut out = TriageResult::default();
    for (i, prop) in proposals.proposals.iter().enumerate() {
        let aps = p_aps[i];
        if aps < cfg.lambda_retain {
            out.discarded += 1;
            continue;
        }
        let (k, p_max) = argmax(p_base.row(i));
        if p_max >= cfg.lambda_base {
            out.base_instances.push(BaseInstance {
                interval: prop.interval,
                category: base_ids[k],
                score: aps * p_max,
                index: i,
            });
        } else {
            out.novel_proposals.push(NovelProposal { interval: prop.interval, aps, index: i });
        }
    }
    Ok(out)
}
