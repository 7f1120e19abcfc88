//! Temporal intervals: tIoU, the 1-D DIoU loss, and proposal decoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Closed time interval in seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub t_s: f64,
    pub t_e: f64,
}

impl Interval {
    pub fn new(t_s: f64, t_e: f64) -> Result<Self> {
        let iv = Self { t_s, t_e };
        iv.validate()?;
        Ok(iv)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_s.is_finite() && self.t_e.is_finite() && self.t_s >= 0.0 && self.t_s <= self.t_e) {
            return Err(Error::Contract(format!("invalid interval [{}, {}]", self.t_s, self.t_e)));
        }
        Ok(())
    }

    #[inline]
    pub fn length(&self) -> f64 {
        self.t_e - self.t_s
    }

    #[inline]
    pub fn center(&self) -> f64 {
        0.5 * (self.t_s + self.t_e)
    }

    #[inline]
    pub fn contains(&self, t: f64) -> bool {
        self.t_s <= t && t <= self.t_e
    }

    pub fn scaled(&self, factor: f64) -> Interval {
        Interval { t_s: self.t_s * factor, t_e: self.t_e * factor }
    }
}

/// Temporal intersection over union.
pub fn tiou(a: &Interval, b: &Interval) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(tiou_unchecked(a, b))
}

pub(crate) fn tiou_unchecked(a: &Interval, b: &Interval) -> f64 {
    let inter = (a.t_e.min(b.t_e) - a.t_s.max(b.t_s)).max(0.0);
    let union = a.length() + b.length() - inter;
    if union > 0.0 {
        (inter / union).clamp(0.0, 1.0)
    } else if a == b {
        1.0
    } else {
        0.0
    }
}

/// DIoU loss value and its gradient with respect to the predicted endpoints.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiouLoss {
    pub loss: f64,
    pub d_start: f64,
    pub d_end: f64,
}

/// `1 - tIoU + ρ²/c²` for 1-D intervals, with `ρ` the centre distance and `c` the
/// length of the smallest enclosing interval.
///
/// Endpoints may be any reals here: the loss is evaluated in level-normalized
/// coordinates relative to an anchor position, where starts are negative.
pub fn diou_loss(pred: &Interval, gt: &Interval) -> Result<DiouLoss> {
    let finite = [pred.t_s, pred.t_e, gt.t_s, gt.t_e].iter().all(|v| v.is_finite());
    if !finite || pred.t_s > pred.t_e || gt.t_s >= gt.t_e {
        return Err(Error::Contract(format!(
            "diou_loss needs ordered intervals and a positive-length target, got {pred:?} vs {gt:?}"
        )));
    }
    let (ps, pe, gs, ge) = (pred.t_s, pred.t_e, gt.t_s, gt.t_e);

    // intersection
    let (lo, lo_from_pred) = if ps >= gs { (ps, true) } else { (gs, false) };
    let (hi, hi_from_pred) = if pe <= ge { (pe, true) } else { (ge, false) };
    let raw_inter = hi - lo;
    let inter = raw_inter.max(0.0);
    let (di_ds, di_de) = if raw_inter > 0.0 {
        (if lo_from_pred { -1.0 } else { 0.0 }, if hi_from_pred { 1.0 } else { 0.0 })
    } else {
        (0.0, 0.0)
    };
    let union = (pe - ps) + (ge - gs) - inter;
    let du_ds = -1.0 - di_ds;
    let du_de = 1.0 - di_de;
    let iou = inter / union;
    let diou_ds = (di_ds * union - inter * du_ds) / (union * union);
    let diou_de = (di_de * union - inter * du_de) / (union * union);

    // enclosing interval and centre distance
    let (cs, cs_from_pred) = if ps <= gs { (ps, true) } else { (gs, false) };
    let (ce, ce_from_pred) = if pe >= ge { (pe, true) } else { (ge, false) };
    let c = ce - cs;
    let dc_ds = if cs_from_pred { -1.0 } else { 0.0 };
    let dc_de = if ce_from_pred { 1.0 } else { 0.0 };
    let rho = 0.5 * (ps + pe) - 0.5 * (gs + ge);
    let pen = rho * rho / (c * c);
    let dpen_ds = (rho * c - 2.0 * rho * rho * dc_ds) / (c * c * c);
    let dpen_de = (rho * c - 2.0 * rho * rho * dc_de) / (c * c * c);

    Ok(DiouLoss { loss: (1.0 - iou + pen).max(0.0), d_start: -diou_ds + dpen_ds, d_end: -diou_de + dpen_de })
}

/// Onset/offset prediction at one pyramid position, in level-normalized units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OnsetOffset {
    pub d_on: f64,
    pub d_off: f64,
}

/// Temporal layout of the feature pyramid: one entry per level.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidLayout {
    /// Number of positions on each level.
    pub lengths: Vec<usize>,
    /// Stride of each level relative to the input snippet grid.
    pub strides: Vec<usize>,
    /// Duration of one input snippet, seconds.
    pub snippet_sec: f64,
}

/// One pyramid position: level, index on that level, centre time and time unit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Position {
    pub level: usize,
    pub index: usize,
    /// Centre time `(index + 0.5) * stride * snippet`, seconds.
    pub t: f64,
    /// `stride * snippet`, seconds per normalized unit.
    pub unit: f64,
}

impl PyramidLayout {
    pub fn new(lengths: Vec<usize>, strides: Vec<usize>, snippet_sec: f64) -> Result<Self> {
        if lengths.len() != strides.len() {
            return Err(Error::Dimension(format!("{} level lengths vs {} strides", lengths.len(), strides.len())));
        }
        if !(snippet_sec.is_finite() && snippet_sec > 0.0) || strides.contains(&0) {
            return Err(Error::Contract(format!("strides {strides:?} and snippet {snippet_sec} must be positive")));
        }
        Ok(Self { lengths, strides, snippet_sec })
    }

    pub fn total_len(&self) -> usize {
        self.lengths.iter().sum()
    }

    /// Positions in (level, index) order.
    pub fn positions(&self) -> Vec<Position> {
        let mut out = Vec::with_capacity(self.total_len());
        for (level, (&len, &stride)) in self.lengths.iter().zip(&self.strides).enumerate() {
            let unit = stride as f64 * self.snippet_sec;
            for index in 0..len {
                out.push(Position { level, index, t: (index as f64 + 0.5) * unit, unit });
            }
        }
        out
    }
}

/// Decoded category-agnostic proposal with its pyramid provenance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub interval: Interval,
    pub position: Position,
}

/// Proposals for every pyramid position, in (level, index) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProposalSet {
    pub proposals: Vec<Proposal>,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }

    pub fn intervals(&self) -> impl Iterator<Item = &Interval> {
        self.proposals.iter().map(|p| &p.interval)
    }
}

/// `[t - d_on*unit, t + d_off*unit]` clamped to `[0, duration]`.
pub fn decode_interval(t: f64, unit: f64, pred: OnsetOffset, duration: f64) -> Interval {
    let t_s = (t - pred.d_on * unit).clamp(0.0, duration);
    let t_e = (t + pred.d_off * unit).clamp(t_s, duration);
    Interval { t_s, t_e }
}

/// Decodes `[t - d_on*unit, t + d_off*unit]` per position, clamped to `[0, duration]`.
pub fn decode_proposals(layout: &PyramidLayout, preds: &[OnsetOffset], duration: f64) -> Result<ProposalSet> {
    if !(duration.is_finite() && duration >= 0.0) {
        return Err(Error::Contract(format!("video duration must be non-negative, got {duration}")));
    }
    let positions = layout.positions();
    if positions.len() != preds.len() {
        return Err(Error::Dimension(format!(
            "{} onset/offset predictions for {} pyramid positions",
            preds.len(),
            positions.len()
        )));
    }
    let proposals = positions
        .into_iter()
        .zip(preds)
        .map(|(position, p)| {
            if p.d_on < 0.0 || p.d_off < 0.0 || !p.d_on.is_finite() || !p.d_off.is_finite() {
                return Err(Error::Contract(format!("onset/offset must be finite and non-negative, got {p:?}")));
            }
            Ok(Proposal { interval: decode_interval(position.t, position.unit, *p, duration), position })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProposalSet { proposals })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn iv(a: f64, b: f64) -> Interval {
        Interval::new(a, b).unwrap()
    }

    #[test]
    fn tiou_fixtures() {
        assert_eq!(tiou(&iv(1.0, 2.0), &iv(1.0, 2.0)).unwrap(), 1.0);
        assert_eq!(tiou(&iv(0.0, 1.0), &iv(2.0, 3.0)).unwrap(), 0.0);
        assert!((tiou(&iv(0.0, 2.0), &iv(1.0, 3.0)).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(tiou(&iv(4.0, 4.0), &iv(4.0, 4.0)).unwrap(), 1.0);
        assert_eq!(tiou(&iv(4.0, 4.0), &iv(5.0, 5.0)).unwrap(), 0.0);
        let bad = Interval { t_s: 3.0, t_e: 1.0 };
        assert!(matches!(tiou(&bad, &iv(0.0, 1.0)), Err(Error::Contract(_))));
    }

    #[test]
    fn diou_fixtures() {
        assert_eq!(diou_loss(&iv(3.0, 7.0), &iv(3.0, 7.0)).unwrap().loss, 0.0);
        // hand evaluation: tIoU 1/3, centres 1 and 2, enclosing length 3
        let l = diou_loss(&iv(0.0, 2.0), &iv(1.0, 3.0)).unwrap();
        assert!((l.loss - 7.0 / 9.0).abs() < 1e-15);
    }

    fn fd_diou(pred: Interval, gt: Interval) -> (f64, f64) {
        let h = 1e-6;
        let f = |s: f64, e: f64| diou_loss(&Interval { t_s: s, t_e: e }, &gt).unwrap().loss;
        (
            (f(pred.t_s + h, pred.t_e) - f(pred.t_s - h, pred.t_e)) / (2.0 * h),
            (f(pred.t_s, pred.t_e + h) - f(pred.t_s, pred.t_e - h)) / (2.0 * h),
        )
    }

    #[test]
    fn diou_gradient_matches_finite_differences() {
        let pred = iv(0.0, 2.0);
        let gt = iv(1.0, 3.0);
        let l = diou_loss(&pred, &gt).unwrap();
        let (ns, ne) = fd_diou(pred, gt);
        assert!((ns - l.d_start).abs() / l.d_start.abs().max(1.0) <= 1e-5);
        assert!((ne - l.d_end).abs() / l.d_end.abs().max(1.0) <= 1e-5);
    }

    #[test]
    fn decode_fixtures() {
        let oo = |a, b| OnsetOffset { d_on: a, d_off: b };
        assert_eq!(decode_interval(10.0, 1.0, oo(2.0, 3.0), 100.0), iv(8.0, 13.0));
        assert_eq!(decode_interval(10.0, 1.0, oo(0.0, 0.0), 100.0), iv(10.0, 10.0));
        assert_eq!(decode_interval(1.0, 1.0, oo(5.0, 1.0), 20.0), iv(0.0, 2.0));

        // stride 4, snippet 1: cell 2 is centred at 10 and one unit is 4 seconds
        let layout = PyramidLayout::new(vec![5], vec![4], 1.0).unwrap();
        let mut preds = vec![oo(0.0, 0.0); 5];
        preds[2] = oo(0.5, 0.75);
        let set = decode_proposals(&layout, &preds, 100.0).unwrap();
        assert_eq!(set.proposals[2].position.t, 10.0);
        assert_eq!(set.proposals[2].interval, iv(8.0, 13.0));
        assert_eq!(set.proposals[0].interval, iv(2.0, 2.0));
    }

    #[test]
    fn decode_rejects_bad_inputs() {
        assert!(PyramidLayout::new(vec![4], vec![0], 1.0).is_err());
        assert!(PyramidLayout::new(vec![4], vec![1], -1.0).is_err());
        let layout = PyramidLayout::new(vec![2], vec![1], 1.0).unwrap();
        let preds = vec![OnsetOffset { d_on: 0.0, d_off: 0.0 }; 2];
        assert!(decode_proposals(&layout, &preds, -3.0).is_err());
        assert!(decode_proposals(&layout, &preds[..1], 3.0).is_err());
    }

    fn arb_interval() -> impl Strategy<Value = Interval> {
        (0.0..50.0f64, 0.0..20.0f64).prop_map(|(s, l)| Interval { t_s: s, t_e: s + l })
    }

    proptest! {
        #[test]
        fn tiou_is_symmetric_and_bounded(a in arb_interval(), b in arb_interval()) {
            let ab = tiou(&a, &b).unwrap();
            let ba = tiou(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
            if a.length() > 0.0 {
                prop_assert_eq!(tiou(&a, &a).unwrap(), 1.0);
            }
        }

        #[test]
        fn diou_is_non_negative_and_zero_only_at_target(p in arb_interval(), g in arb_interval()) {
            prop_assume!(g.length() > 1e-3);
            let l = diou_loss(&p, &g).unwrap();
            prop_assert!(l.loss >= 0.0);
            if p == g {
                prop_assert_eq!(l.loss, 0.0);
            } else {
                prop_assert!(l.loss > 0.0);
            }
            prop_assert_eq!(diou_loss(&g, &g).unwrap().loss, 0.0);
        }

        #[test]
        fn diou_gradient_property(p in arb_interval(), g in arb_interval()) {
            prop_assume!(g.length() > 0.1 && p.length() > 0.1);
            // stay away from the kinks where endpoints coincide
            let pts = [p.t_s, p.t_e, g.t_s, g.t_e];
            for i in 0..4 { for j in i + 1..4 { prop_assume!((pts[i] - pts[j]).abs() > 1e-3); } }
            let l = diou_loss(&p, &g).unwrap();
            let (ns, ne) = fd_diou(p, g);
            prop_assert!((ns - l.d_start).abs() / l.d_start.abs().max(1.0) <= 1e-5);
            prop_assert!((ne - l.d_end).abs() / l.d_end.abs().max(1.0) <= 1e-5);
        }

        #[test]
        fn decode_covers_every_position(
            lens in proptest::collection::vec(1usize..12, 1..4),
            d in proptest::collection::vec((0.0..6.0f64, 0.0..6.0f64), 40),
            duration in 1.0..60.0f64,
        ) {
            let strides: Vec<usize> = (0..lens.len()).map(|l| 1 << l).collect();
            let layout = PyramidLayout::new(lens.clone(), strides, 1.0).unwrap();
            let n = layout.total_len();
            let preds: Vec<OnsetOffset> = d.iter().cycle().take(n).map(|&(a, b)| OnsetOffset { d_on: a, d_off: b }).collect();
            let set = decode_proposals(&layout, &preds, duration).unwrap();
            prop_assert_eq!(set.len(), n);
            for p in &set.proposals {
                prop_assert!(p.interval.validate().is_ok());
                prop_assert!(p.interval.t_e <= duration);
            }
        }
    }
}
