//! Detection metrics: per-class average precision over a tIoU grid, the
//! base/novel/all mean, and seeded base/novel category splits.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AnnotationSet, Vocabulary};
use crate::error::{Error, Result};
use crate::geometry::{tiou_unchecked, Interval};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridStyle {
    Thumos,
    Anet,
}

impl GridStyle {
    pub fn grid(self) -> Vec<f64> {
        match self {
            GridStyle::Thumos => (3..=7).map(|i| i as f64 / 10.0).collect(),
            GridStyle::Anet => (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect(),
        }
    }
}

impl std::str::FromStr for GridStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "thumos" => Ok(GridStyle::Thumos),
            "anet" => Ok(GridStyle::Anet),
            other => Err(Error::Config(format!("unknown grid style {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub tiou_grid: Vec<f64>,
}

impl EvalConfig {
    pub fn new(tiou_grid: Vec<f64>) -> Result<Self> {
        if tiou_grid.is_empty()
            || tiou_grid.iter().any(|&t| !(t > 0.0 && t <= 1.0))
            || tiou_grid.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(Error::Config(format!("tIoU grid must be strictly increasing in (0, 1]: {tiou_grid:?}")));
        }
        Ok(Self { tiou_grid })
    }

    pub fn style(style: GridStyle) -> Self {
        Self { tiou_grid: style.grid() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredInterval {
    pub interval: Interval,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub interval: Interval,
    /// Global vocabulary id.
    pub category: usize,
    pub score: f64,
}

/// Average precision of one class in one video. `None` when there is no ground truth.
pub fn average_precision(predictions: &[ScoredInterval], gts: &[Interval], threshold: f64) -> Option<f64> {
    let preds: Vec<(usize, ScoredInterval)> = predictions.iter().map(|p| (0, *p)).collect();
    average_precision_multi(&preds, &[gts.to_vec()], threshold)
}

/// Average precision over several videos. Predictions carry the index of their
/// video in `gts`; a prediction can only match ground truth of its own video.
pub fn average_precision_multi(
    predictions: &[(usize, ScoredInterval)],
    gts: &[Vec<Interval>],
    threshold: f64,
) -> Option<f64> {
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (&predictions[a].1, &predictions[b].1);
        pb.score.total_cmp(&pa.score).then(pa.interval.t_s.total_cmp(&pb.interval.t_s))
    });
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut hits = Vec::with_capacity(order.len());
    for &i in &order {
        let (video, pred) = &predictions[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, gt) in gts[*video].iter().enumerate() {
            if used[*video][j] {
                continue;
            }
            let o = tiou_unchecked(&pred.interval, gt);
            if o < threshold {
                continue;
            }
            let better = match best {
                None => true,
                Some((b, bo)) => o > bo || (o == bo && gt.t_s < gts[*video][b].t_s),
            };
            if better {
                best = Some((j, o));
            }
        }
        if let Some((j, _)) = best {
            used[*video][j] = true;
        }
        hits.push(best.is_some());
    }
    Some(area_under_envelope(&hits, n_gt))
}

/// All-point interpolated AP from ranked hit flags.
fn area_under_envelope(hits: &[bool], n_gt: usize) -> f64 {
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (k, &h) in hits.iter().enumerate() {
        tp += h as usize;
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub seed: u64,
    pub base_fraction: f64,
    pub base_ids: Vec<usize>,
    pub novel_ids: Vec<usize>,
}

impl SplitSpec {
    pub fn validate(&self, n_categories: usize) -> Result<()> {
        let mut all: Vec<usize> = self.base_ids.iter().chain(&self.novel_ids).copied().collect();
        all.sort_unstable();
        if self.base_ids.is_empty() || self.novel_ids.is_empty() || all != (0..n_categories).collect::<Vec<_>>() {
            return Err(Error::Config(format!(
                "split {} does not partition {n_categories} categories into non-empty base and novel sets",
                self.seed
            )));
        }
        Ok(())
    }
}

/// Split `i` shuffles the category ids with seed `i` and takes the first
/// `round(fraction · n)` as base. Both id lists are returned sorted.
pub fn make_splits(n_categories: usize, base_fraction: f64, n_seeds: usize) -> Result<Vec<SplitSpec>> {
    let n_base = (base_fraction * n_categories as f64).round() as usize;
    if n_categories < 2 || !(0.0..=1.0).contains(&base_fraction) || n_base == 0 || n_base >= n_categories {
        return Err(Error::Config(format!(
            "fraction {base_fraction} of {n_categories} categories leaves one side empty"
        )));
    }
    Ok((0..n_seeds as u64)
        .map(|seed| {
            let mut ids: Vec<usize> = (0..n_categories).collect();
            ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut base_ids = ids[..n_base].to_vec();
            let mut novel_ids = ids[n_base..].to_vec();
            base_ids.sort_unstable();
            novel_ids.sort_unstable();
            SplitSpec { seed, base_fraction, base_ids, novel_ids }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Class name, then threshold formatted with two decimals.
    pub ap: BTreeMap<String, BTreeMap<String, f64>>,
    pub map_base: f64,
    pub map_novel: f64,
    pub map_all: f64,
}

pub fn threshold_key(t: f64) -> String {
    format!("{t:.2}")
}

impl EvalReport {
    /// Mean AP at one threshold over the given classes that have ground truth.
    pub fn map_at(&self, vocab: &Vocabulary, ids: &[usize], threshold: f64) -> f64 {
        let key = threshold_key(threshold);
        let vals: Vec<f64> = ids
            .iter()
            .filter_map(|&c| self.ap.get(vocab.name(c)).and_then(|m| m.get(&key)).copied())
            .collect();
        mean(&vals)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Per-class AP on every grid threshold and the three means.
///
/// Videos without an annotation entry are ignored. Classes with no ground truth
/// anywhere are left out of the means.
pub fn evaluate(
    predictions: &BTreeMap<String, Vec<Detection>>,
    annotations: &BTreeMap<String, AnnotationSet>,
    vocab: &Vocabulary,
    split: &SplitSpec,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    split.validate(vocab.len())?;
    for (video, dets) in predictions {
        if let Some(d) = dets.iter().find(|d| d.category >= vocab.len()) {
            return Err(Error::Vocabulary(format!("video {video}: prediction category {} unknown", d.category)));
        }
        if let Some(d) = dets.iter().find(|d| !d.score.is_finite()) {
            return Err(Error::NumericalInstability(format!("video {video}: score {}", d.score)));
        }
    }
    let videos: Vec<&String> = annotations.keys().collect();
    let mut ap = BTreeMap::new();
    let mut per_class: BTreeMap<usize, f64> = BTreeMap::new();
    for c in 0..vocab.len() {
        let gts: Vec<Vec<Interval>> = videos
            .iter()
            .map(|v| annotations[*v].instances.iter().filter(|a| a.category == c).map(|a| a.interval).collect())
            .collect();
        if gts.iter().all(Vec::is_empty) {
            continue;
        }
        let preds: Vec<(usize, ScoredInterval)> = videos
            .iter()
            .enumerate()
            .flat_map(|(vi, v)| {
                predictions
                    .get(*v)
                    .into_iter()
                    .flatten()
                    .filter(|d| d.category == c)
                    .map(move |d| (vi, ScoredInterval { interval: d.interval, score: d.score }))
            })
            .collect();
        let mut row = BTreeMap::new();
        let mut sum = 0.0;
        for &t in &cfg.tiou_grid {
            let v = average_precision_multi(&preds, &gts, t).unwrap_or(0.0);
            sum += v;
            row.insert(threshold_key(t), v);
        }
        per_class.insert(c, sum / cfg.tiou_grid.len() as f64);
        ap.insert(vocab.name(c).to_string(), row);
    }
    let pick = |ids: &[usize]| -> f64 {
        let v: Vec<f64> = ids.iter().filter_map(|c| per_class.get(c).copied()).collect();
        mean(&v)
    };
    let all: Vec<usize> = (0..vocab.len()).collect();
    Ok(EvalReport { ap, map_base: pick(&split.base_ids), map_novel: pick(&split.novel_ids), map_all: pick(&all) })
}
