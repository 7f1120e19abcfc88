//! Coarse-to-fine open-vocabulary classification of novel proposals.
//!
//! The coarse stage ranks candidate categories for the whole video from frame-level
//! image/text similarity and uses no learned parameters. The fine stage projects
//! pooled proposal features and picks the closest coarse category.

use crate::error::{Error, Result};
use crate::geometry::Interval;
use crate::model::Model;
use crate::numerics::{matmul, Tensor2D};
use crate::triage::{argmax, NovelProposal};

/// Fused text embeddings for a list of categories.
#[derive(Clone, Debug, PartialEq)]
pub struct TextBank {
    /// Global vocabulary id of each row.
    pub categories: Vec<usize>,
    /// Per category, one row per template.
    pub templates: Vec<Tensor2D>,
    /// Template mean of each category, L2-normalized.
    pub fused: Tensor2D,
}

/// Averages each category's template embeddings and normalizes the result.
pub fn fuse_templates(categories: Vec<usize>, templates: Vec<Tensor2D>) -> Result<TextBank> {
    if categories.len() != templates.len() {
        return Err(Error::Dimension(format!(
            "{} categories with {} template sets",
            categories.len(),
            templates.len()
        )));
    }
    let d = templates.first().map(Tensor2D::cols).unwrap_or(0);
    let mut fused = Tensor2D::zeros(templates.len(), d);
    for (k, t) in templates.iter().enumerate() {
        if t.rows() == 0 {
            return Err(Error::Config(format!("category {} has no templates", categories[k])));
        }
        if t.cols() != d {
            return Err(Error::Dimension(format!("template width {} differs from {d}", t.cols())));
        }
        if !t.is_finite() {
            return Err(Error::NumericalInstability(format!("non-finite template for category {}", categories[k])));
        }
        let row = fused.row_mut(k);
        for tr in t.iter_rows() {
            for (o, v) in row.iter_mut().zip(tr) {
                *o += v / t.rows() as f64;
            }
        }
    }
    Ok(TextBank { categories, templates, fused: fused.normalized_rows(0.0) })
}

impl TextBank {
    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.fused.cols()
    }

    /// Bank restricted to `ids`, in the given order.
    pub fn subset(&self, ids: &[usize]) -> Result<TextBank> {
        let rows = ids
            .iter()
            .map(|id| {
                self.categories
                    .iter()
                    .position(|c| c == id)
                    .ok_or_else(|| Error::Vocabulary(format!("category {id} not in text bank")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TextBank {
            categories: ids.to_vec(),
            templates: rows.iter().map(|&r| self.templates[r].clone()).collect(),
            fused: self.fused.select_rows(&rows),
        })
    }

    /// Fused row of a global category id.
    pub fn embedding(&self, id: usize) -> Result<&[f64]> {
        let r = self
            .categories
            .iter()
            .position(|&c| c == id)
            .ok_or_else(|| Error::Vocabulary(format!("category {id} not in text bank")))?;
        Ok(self.fused.row(r))
    }
}

/// Frame-by-category similarity. Image rows are expected to be unit length.
pub fn image_text_similarity(f_img: &Tensor2D, bank: &TextBank) -> Result<Tensor2D> {
    if f_img.cols() != bank.dim() {
        return Err(Error::Dimension(format!("image width {} vs text width {}", f_img.cols(), bank.dim())));
    }
    matmul(f_img, &bank.fused, true)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoarseResult {
    pub s_mil: Vec<f64>,
    /// Bank rows of the selected categories, best first.
    pub coarse_rows: Vec<usize>,
    /// Global ids of the selected categories.
    pub coarse_ids: Vec<usize>,
    pub f_coarse: Tensor2D,
}

/// Number of frames pooled per category.
pub fn mil_pool_size(t_img: usize) -> usize {
    (t_img / 8).max(1)
}

/// Mean of the `k` largest values.
pub fn top_k_mean(values: &[f64], k: usize) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    let k = k.min(v.len()).max(1);
    v[..k].iter().sum::<f64>() / k as f64
}

/// Indices of the `n` largest values, ties to the lower index.
fn top_indices(values: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

pub fn mil_coarse_categories(s_img: &Tensor2D, bank: &TextBank, n_coarse: usize) -> Result<CoarseResult> {
    if s_img.cols() != bank.len() {
        return Err(Error::Dimension(format!("{} similarity columns for {} categories", s_img.cols(), bank.len())));
    }
    if s_img.rows() == 0 {
        return Err(Error::DegenerateLength("similarity matrix has no frames".into()));
    }
    let h = mil_pool_size(s_img.rows());
    let s_mil: Vec<f64> = (0..s_img.cols()).map(|k| top_k_mean(&s_img.col_values(k), h)).collect();
    let coarse_rows = top_indices(&s_mil, n_coarse);
    Ok(CoarseResult {
        coarse_ids: coarse_rows.iter().map(|&r| bank.categories[r]).collect(),
        f_coarse: bank.fused.select_rows(&coarse_rows),
        coarse_rows,
        s_mil,
    })
}

/// Row range `[floor(t_s r), ceil(t_e r))` clipped to the matrix, or the row nearest
/// the centre when that range is empty.
pub fn pooling_rows(interval: &Interval, rate: f64, n_rows: usize) -> std::ops::Range<usize> {
    let clip = |x: f64| (x.max(0.0) as usize).min(n_rows);
    let lo = clip((interval.t_s * rate).floor());
    let hi = clip((interval.t_e * rate).ceil());
    if hi > lo {
        lo..hi
    } else {
        let mid = clip((interval.center() * rate).floor()).min(n_rows.saturating_sub(1));
        mid..mid + 1
    }
}

/// Mean image feature over each interval.
pub fn pool_proposal_features(f_img: &Tensor2D, rate: f64, intervals: &[Interval]) -> Result<Tensor2D> {
    if !intervals.is_empty() && f_img.rows() == 0 {
        return Err(Error::DegenerateLength("no image rows to pool".into()));
    }
    let mut out = Tensor2D::zeros(intervals.len(), f_img.cols());
    for (i, iv) in intervals.iter().enumerate() {
        let range = pooling_rows(iv, rate, f_img.rows());
        let n = range.len() as f64;
        let row = out.row_mut(i);
        for r in range {
            for (o, v) in row.iter_mut().zip(f_img.row(r)) {
                *o += v / n;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NovelInstance {
    pub interval: Interval,
    pub category: usize,
    pub score: f64,
}

/// Projects pooled proposal features and assigns each the most similar coarse
/// category. The score is `aps · softmax(similarity / τ)` at the chosen category.
pub fn assign_fine_categories(
    f_np: &Tensor2D,
    proposals: &[NovelProposal],
    coarse: &CoarseResult,
    model: &Model,
    temperature: f64,
) -> Result<Vec<NovelInstance>> {
    if f_np.rows() != proposals.len() {
        return Err(Error::Dimension(format!("{} pooled rows for {} proposals", f_np.rows(), proposals.len())));
    }
    if proposals.is_empty() {
        return Ok(Vec::new());
    }
    if coarse.coarse_ids.is_empty() {
        return Err(Error::Contract("novel proposals with no coarse categories".into()));
    }
    let projected = model.project(f_np)?;
    let sim = matmul(&projected, &coarse.f_coarse, true)?;
    Ok(fine_from_similarity(&sim, proposals, &coarse.coarse_ids, temperature))
}

/// Mean frame-level similarity between each instance's span and its assigned
/// category, clamped at zero. `s_img` holds one column per `bank` category.
pub fn span_support(s_img: &Tensor2D, rate: f64, bank: &TextBank, instances: &[NovelInstance]) -> Result<Vec<f64>> {
    if s_img.cols() != bank.len() {
        return Err(Error::Dimension(format!("{} similarity columns for {} categories", s_img.cols(), bank.len())));
    }
    let spans: Vec<Interval> = instances.iter().map(|n| n.interval).collect();
    let pooled = pool_proposal_features(s_img, rate, &spans)?;
    instances
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let col = bank
                .categories
                .iter()
                .position(|&c| c == n.category)
                .ok_or_else(|| Error::Vocabulary(format!("category {} not in bank", n.category)))?;
            Ok(pooled.get(i, col).max(0.0))
        })
        .collect()
}

pub(crate) fn fine_from_similarity(
    sim: &Tensor2D,
    proposals: &[NovelProposal],
    coarse_ids: &[usize],
    temperature: f64,
) -> Vec<NovelInstance> {
    proposals
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let row = sim.row(i);
            let (k, best) = argmax(row);
            let z: f64 = row.iter().map(|s| ((s - best) / temperature).exp()).sum();
            NovelInstance { interval: p.interval, category: coarse_ids[k], score: p.aps / z }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::ModelConfig;

    fn bank(rows: &[&[f64]]) -> TextBank {
        let templates: Vec<Tensor2D> = rows.iter().map(|r| Tensor2D::row_vector(r)).collect();
        fuse_templates((0..rows.len()).collect(), templates).unwrap()
    }

    #[test]
    fn fusion_fixtures() {
        let b = fuse_templates(vec![5], vec![Tensor2D::from_rows(&[[1.0, 0.0], [0.0, 1.0]], 2).unwrap()]).unwrap();
        let s = 1.0 / 2f64.sqrt();
        assert!((b.fused.get(0, 0) - s).abs() < 1e-15 && (b.fused.get(0, 1) - s).abs() < 1e-15);

        let same = fuse_templates(vec![0], vec![Tensor2D::from_rows(&[[3.0, 4.0]; 5], 2).unwrap()]).unwrap();
        assert!((same.fused.get(0, 0) - 0.6).abs() < 1e-15 && (same.fused.get(0, 1) - 0.8).abs() < 1e-15);

        assert!(matches!(fuse_templates(vec![0], vec![Tensor2D::zeros(0, 2)]), Err(Error::Config(_))));
    }

    #[test]
    fn fused_rows_are_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let templates: Vec<Tensor2D> = (0..8)
            .map(|_| {
                let m = rng.random_range(1..5);
                Tensor2D::from_vec(m, 6, (0..m * 6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
            })
            .collect();
        let b = fuse_templates((0..8).collect(), templates).unwrap();
        for r in b.fused.iter_rows() {
            assert!((crate::numerics::l2_norm(r) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn similarity_fixtures() {
        let b = bank(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]);
        let img = Tensor2D::from_rows(&[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]], 3).unwrap();
        let s = image_text_similarity(&img, &b).unwrap();
        assert_eq!(s.row(0), &[1.0, 0.0]);
        assert_eq!(s.row(1), &[0.0, 0.0]);
        assert!(matches!(image_text_similarity(&Tensor2D::zeros(1, 2), &b), Err(Error::Dimension(_))));

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Tensor2D::from_vec(3, 4, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let text: Vec<Vec<f64>> = (0..2).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let b = bank(&[&text[0], &text[1]]);
        let s = image_text_similarity(&img, &b).unwrap();
        for i in 0..3 {
            for k in 0..2 {
                let mut acc = 0.0;
                for d in 0..4 {
                    acc += img.get(i, d) * b.fused.get(k, d);
                }
                assert!((s.get(i, k) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mil_fixtures() {
        let mut col = vec![0.9, 0.1, 0.5, 0.3, 0.2, 0.4, 0.8, 0.6];
        col.extend([0.0; 8]);
        let s = Tensor2D::from_vec(16, 1, col).unwrap();
        let r = mil_coarse_categories(&s, &bank(&[&[1.0]]), 2).unwrap();
        assert!((r.s_mil[0] - 0.85).abs() < 1e-15);
        assert_eq!(r.coarse_ids, vec![0]);

        let s = Tensor2D::from_vec(4, 1, vec![0.1, 0.7, 0.3, 0.2]).unwrap();
        assert_eq!(mil_coarse_categories(&s, &bank(&[&[1.0]]), 2).unwrap().s_mil, vec![0.7]);

        let s = Tensor2D::from_rows(&[[0.2, 0.8, 0.5]], 3).unwrap();
        let b = bank(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let r = mil_coarse_categories(&s, &b, 2).unwrap();
        assert_eq!(r.coarse_ids, vec![1, 2]);
        assert_eq!(r.f_coarse.row(0), b.fused.row(1));

        let tied = Tensor2D::from_rows(&[[0.5, 0.5, 0.5]], 3).unwrap();
        assert_eq!(mil_coarse_categories(&tied, &b, 2).unwrap().coarse_ids, vec![0, 1]);
    }

    fn exhaustive_best_mean(col: &[f64], k: usize) -> f64 {
        let n = col.len();
        let mut best = f64::NEG_INFINITY;
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != k {
                continue;
            }
            let sum: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| col[i]).sum();
            best = best.max(sum / k as f64);
        }
        best
    }

    #[test]
    fn top_k_mean_is_best_subset_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let t = rng.random_range(1..=12);
            let col: Vec<f64> = (0..t).map(|_| rng.random_range(-1.0..1.0)).collect();
            let h = mil_pool_size(t);
            assert_eq!(top_k_mean(&col, h), exhaustive_best_mean(&col, h));
            for k in 1..=t {
                assert!((top_k_mean(&col, k) - exhaustive_best_mean(&col, k)).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn mil_permutation_invariant_and_monotone(
            vals in prop::collection::vec(-1.0..1.0f64, 3..60),
            seed in any::<u64>(),
            bump in 0.0..1.0f64,
        ) {
            let t = vals.len() / 3;
            let s = Tensor2D::from_vec(t, 3, vals[..t * 3].to_vec()).unwrap();
            let b = bank(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
            let base = mil_coarse_categories(&s, &b, 2).unwrap();

            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut order: Vec<usize> = (0..t).collect();
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            let permuted = mil_coarse_categories(&s.select_rows(&order), &b, 2).unwrap();
            prop_assert_eq!(&base.s_mil, &permuted.s_mil);

            let mut raised = s.clone();
            let (i, k) = (rng.random_range(0..t), rng.random_range(0..3));
            raised.set(i, k, raised.get(i, k) + bump);
            let up = mil_coarse_categories(&raised, &b, 2).unwrap();
            for (a, bb) in base.s_mil.iter().zip(&up.s_mil) {
                prop_assert!(bb >= a);
            }
        }
    }

    #[test]
    fn pooling_fixtures() {
        let f = Tensor2D::from_rows(&[[0.0, 1.0], [2.0, 5.0], [4.0, 7.0], [9.0, 9.0]], 2).unwrap();
        let p = pool_proposal_features(&f, 1.0, &[Interval { t_s: 1.0, t_e: 3.0 }]).unwrap();
        assert_eq!(p.row(0), &[3.0, 6.0]);
        let p = pool_proposal_features(&f, 1.0, &[Interval { t_s: 2.0, t_e: 3.0 }]).unwrap();
        assert_eq!(p.row(0), f.row(2));
        let p = pool_proposal_features(&f, 1.0, &[Interval { t_s: 2.5, t_e: 2.5 }]).unwrap();
        assert_eq!(p.row(0), f.row(2));
        let p = pool_proposal_features(&f, 1.0, &[Interval { t_s: 4.0, t_e: 4.0 }]).unwrap();
        assert_eq!(p.row(0), f.row(3));
        assert_eq!(pool_proposal_features(&f, 1.0, &[]).unwrap().shape(), (0, 2));
    }

    fn coarse_for(bank: &TextBank, rows: Vec<usize>) -> CoarseResult {
        CoarseResult {
            s_mil: vec![0.0; bank.len()],
            coarse_ids: rows.iter().map(|&r| bank.categories[r]).collect(),
            f_coarse: bank.fused.select_rows(&rows),
            coarse_rows: rows,
        }
    }

    #[test]
    fn fine_assignment_fixture() {
        let props = [NovelProposal { interval: Interval { t_s: 1.0, t_e: 2.0 }, aps: 1.0, index: 0 }];
        let sim = Tensor2D::from_rows(&[[1.0, 0.0]], 2).unwrap();
        let tau = 0.07;
        let out = fine_from_similarity(&sim, &props, &[8, 3], tau);
        assert_eq!(out[0].category, 8);
        let w = (1.0 / tau).exp() / ((1.0 / tau).exp() + 1.0);
        assert!((out[0].score - w).abs() < 1e-12);
        assert_eq!(out[0].interval, props[0].interval);
    }

    #[test]
    fn fine_assignment_stays_in_coarse_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = ModelConfig::new(4, 4, 4, 1, 2, 0);
        let model = Model::new(cfg).unwrap();
        let text: Vec<Vec<f64>> = (0..6).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let refs: Vec<&[f64]> = text.iter().map(Vec::as_slice).collect();
        let b = bank(&refs);
        for _ in 0..1000 {
            let n_coarse = rng.random_range(1..4);
            let mut rows: Vec<usize> = (0..6).collect();
            rand::seq::SliceRandom::shuffle(rows.as_mut_slice(), &mut rng);
            rows.truncate(n_coarse);
            let coarse = coarse_for(&b, rows);
            let n = rng.random_range(0..4);
            let props: Vec<NovelProposal> = (0..n)
                .map(|i| {
                    let s = rng.random_range(0.0..10.0);
                    NovelProposal { interval: Interval { t_s: s, t_e: s + 1.0 }, aps: rng.random_range(0.5..1.0), index: i }
                })
                .collect();
            let f = Tensor2D::from_vec(n, 4, (0..n * 4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let out = assign_fine_categories(&f, &props, &coarse, &model, 0.07).unwrap();
            assert_eq!(out.len(), n);
            for (o, p) in out.iter().zip(&props) {
                assert!(coarse.coarse_ids.contains(&o.category));
                assert_eq!(o.interval, p.interval);
                assert!(o.score <= p.aps && o.score > 0.0);
            }
        }
    }

    #[test]
    fn fine_assignment_errors() {
        let model = Model::new(ModelConfig::new(4, 4, 2, 1, 2, 0)).unwrap();
        let b = bank(&[&[1.0, 0.0]]);
        let empty = coarse_for(&b, vec![]);
        let props = [NovelProposal { interval: Interval { t_s: 0.0, t_e: 1.0 }, aps: 0.9, index: 0 }];
        assert!(matches!(
            assign_fine_categories(&Tensor2D::zeros(1, 2), &props, &empty, &model, 0.07),
            Err(Error::Contract(_))
        ));
        assert!(assign_fine_categories(&Tensor2D::zeros(0, 2), &[], &empty, &model, 0.07).unwrap().is_empty());
    }

    #[test]
    fn span_support_fixture() {
        let b = bank(&[&[1.0, 0.0], &[0.0, 1.0]]);
        // rows 0..4 at 1 row/s; column 1 is category 1
        let s_img = Tensor2D::from_rows(&[[0.9, 0.1], [0.2, 0.6], [0.1, 0.8], [0.0, -0.5]], 2).unwrap();
        let inst = |s, e, c| NovelInstance { interval: Interval { t_s: s, t_e: e }, category: c, score: 1.0 };
        let w = span_support(&s_img, 1.0, &b, &[inst(1.0, 3.0, 1), inst(0.0, 1.0, 0), inst(3.0, 4.0, 1)]).unwrap();
        assert!((w[0] - 0.7).abs() < 1e-15);
        assert_eq!(w[1], 0.9);
        assert_eq!(w[2], 0.0);
        assert!(matches!(span_support(&s_img, 1.0, &b, &[inst(0.0, 1.0, 5)]), Err(Error::Vocabulary(_))));
        assert!(matches!(span_support(&Tensor2D::zeros(4, 3), 1.0, &b, &[]), Err(Error::Dimension(_))));
    }
}
