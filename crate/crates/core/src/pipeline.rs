//! Joint training loop and full-video inference.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::c2f::{
    assign_fine_categories, image_text_similarity, mil_coarse_categories, pool_proposal_features, span_support, TextBank,
};
use crate::data::{AnnotationSet, FeatureMatrix, Vocabulary};
use crate::error::{Error, Result};
use crate::evaluation::{Detection, SplitSpec};
use crate::geometry::{decode_proposals, tiou_unchecked, Interval};
use crate::io::{read_annotations, read_features, read_json, CorpusPaths, TextFile};
use crate::losses::{
    sample_negatives, total_loss, AppObjective, ContrastiveBatch, FocalObjective, FocalParams, LocObjective,
    LossBreakdown,
};
use crate::model::{backbone_forward, heads_forward, HeadsOutput, Model, ModelConfig, ModelParams};
use crate::numerics::{dot, l2_norm, matmul, Graph, Tensor2D};
use crate::supervision::{assign_cls_reg_targets, build_aps_targets};
use crate::triage::{triage_proposals, TriageConfig};

/// One video: features plus annotations with global category ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub f_vid: FeatureMatrix,
    /// Unit-norm rows.
    pub f_img: FeatureMatrix,
    pub annotations: AnnotationSet,
}

/// Reads one annotation subset of a corpus directory with its features and the
/// fused text bank. Image rows are normalized on the way in.
pub fn load_subset(dir: &Path, subset: &str) -> Result<(Vocabulary, Vec<Sample>, TextBank)> {
    let paths = CorpusPaths::new(dir);
    let (vocab, sets) = read_annotations(&paths.annotations(subset))?;
    let bank = read_json::<TextFile>(&paths.text())?.into_bank(&vocab)?;
    let samples = sets
        .into_iter()
        .map(|(id, annotations)| {
            Ok(Sample {
                f_vid: read_features(&paths.video_features(&id))?,
                f_img: read_features(&paths.image_features(&id))?.normalized(),
                annotations,
                id,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((vocab, samples, bank))
}

/// Videos whose every instance belongs to a base category.
pub fn base_only(samples: &[Sample], split: &SplitSpec) -> Vec<Sample> {
    samples
        .iter()
        .filter(|s| s.annotations.instances.iter().all(|a| split.base_ids.contains(&a.category)))
        .cloned()
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub temperature: f64,
    pub n_neg: usize,
    pub seed: u64,
    /// Probability of training the class-agnostic heads on a randomly rotated
    /// copy of the video features instead of the original.
    pub rotation_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 20, warmup_epochs: 5, base_lr: 2e-3, weight_decay: 1e-4, temperature: 0.07, n_neg: 3, seed: 0, rotation_prob: 0.5 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!("{} warmup epochs of {}", self.warmup_epochs, self.epochs)));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("lr {} / weight decay {}", self.base_lr, self.weight_decay)));
        }
        if !(0.0..=1.0).contains(&self.rotation_prob) {
            return Err(Error::Config(format!("rotation probability {}", self.rotation_prob)));
        }
        if !(self.temperature > 0.0) || self.n_neg == 0 {
            return Err(Error::Config("temperature and negative count must be positive".into()));
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr`, then cosine decay towards zero. `step` is 0-based.
pub fn learning_rate(base_lr: f64, step: usize, warmup_steps: usize, total_steps: usize) -> f64 {
    if step < warmup_steps {
        return base_lr * (step + 1) as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps).max(1) as f64;
    let progress = ((step - warmup_steps) as f64 / span).min(1.0);
    0.5 * base_lr * (1.0 + (PI * progress).cos())
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor2D>,
    v: Vec<Tensor2D>,
    t: i32,
}

impl AdamW {
    pub fn new(params: &ModelParams, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor2D> = params.iter().map(|(_, p)| Tensor2D::zeros(p.rows(), p.cols())).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, m: zeros.clone(), v: zeros, t: 0 }
    }

    /// `grads` follows the parameter order; `None` means zero.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Option<Tensor2D>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Dimension(format!("{} gradients for {} parameters", grads.len(), self.m.len())));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::Dimension(format!("gradient of {name} is {:?}", g.shape())));
                }
                if !g.is_finite() {
                    return Err(Error::Divergence(format!("non-finite gradient for {name}")));
                }
            }
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g.as_ref().map_or(0.0, |g| g.data()[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                *w -= lr * self.weight_decay * *w;
                *w -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Loss graph for one video; returns the breakdown and per-parameter gradients.
pub fn video_gradients(
    model: &Model,
    sample: &Sample,
    base_bank: &TextBank,
    base_ids: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(LossBreakdown, Vec<Option<Tensor2D>>)> {
    let mut g = Graph::new();
    let nodes = model.params.register(&mut g, true);
    // A rotated copy keeps segment structure but hides category directions, so
    // only the localization and presence losses see it.
    let rotate = cfg.rotation_prob > 0.0 && rng.random_bool(cfg.rotation_prob);
    let input = if rotate {
        matmul(&sample.f_vid.values, &random_orthogonal(rng, sample.f_vid.dim()), false)?
    } else {
        sample.f_vid.values.clone()
    };
    let x = g.constant(input);
    let levels = backbone_forward(&mut g, &nodes, x, &model.config)?;
    let heads = heads_forward(&mut g, &nodes, &levels, &model.config)?;
    let layout = model.config.layout(sample.f_vid.len(), sample.f_vid.row_sec())?;

    let cls_reg = assign_cls_reg_targets(&sample.annotations, &layout, base_ids)?;
    let current = HeadsOutput::read(&g, &heads);
    let proposals = decode_proposals(&layout, &current.onset_offset, sample.annotations.duration)?;
    let aps_targets = build_aps_targets(&sample.annotations, &proposals);
    let n_pos = cls_reg.n_pos();

    let l_loc = g.objective(heads.onset_offset, Arc::new(LocObjective { targets: cls_reg.clone() }))?;
    let l_cc = g.objective(heads.p_base, Arc::new(FocalObjective { targets: cls_reg, params: FocalParams::default() }))?;
    let l_app = g.objective(heads.p_aps, Arc::new(AppObjective { targets: aps_targets }))?;
    let mut total = g.add(l_loc, l_app)?;
    if !rotate {
        total = g.add(total, l_cc)?;
    }

    let instances = &sample.annotations.instances;
    let mut l_contrast = None;
    if !instances.is_empty() {
        let spans: Vec<Interval> = instances.iter().map(|a| a.interval).collect();
        let pooled = pool_proposal_features(&sample.f_img.values, sample.f_img.rate, &spans)?;
        let batch = instances
            .iter()
            .zip(pooled.iter_rows())
            .map(|(a, feature)| {
                let negative_ids = sample_negatives(rng, a.category, base_ids, cfg.n_neg)?;
                let neg_rows = negative_ids.iter().map(|&c| base_bank.embedding(c).map(<[f64]>::to_vec)).collect::<Result<Vec<_>>>()?;
                Ok(ContrastiveBatch {
                    feature: feature.to_vec(),
                    category: a.category,
                    positive: base_bank.embedding(a.category)?.to_vec(),
                    negatives: Tensor2D::from_rows(&neg_rows, base_bank.dim())?,
                    negative_ids,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let node = crate::losses::contrastive_loss(&mut g, &nodes, &batch, cfg.temperature)?;
        total = g.add(total, node)?;
        l_contrast = Some(node);
    }

    let breakdown = total_loss(
        g.value(l_loc).item()?,
        g.value(l_cc).item()?,
        g.value(l_app).item()?,
        match l_contrast {
            Some(n) => g.value(n).item()?,
            None => 0.0,
        },
        n_pos,
    )
    .map_err(|e| Error::Divergence(format!("video {}: {e}", sample.id)))?;
    let grads = g.backward(total)?;
    let per_param = model
        .params
        .iter()
        .map(|(name, _)| Ok(grads.get(nodes.id(name)?).cloned()))
        .collect::<Result<Vec<_>>>()?;
    Ok((breakdown, per_param))
}

/// Haar-distributed orthogonal matrix via Gram-Schmidt on gaussian rows.
pub fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Tensor2D {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(d);
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for u in &q {
            let p = dot(&v, u);
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let n = l2_norm(&v);
        if n < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= n);
        q.push(v);
    }
    let mut out = Tensor2D::zeros(d, d);
    for (i, row) in q.iter().enumerate() {
        out.row_mut(i).copy_from_slice(row);
    }
    out
}

/// Architecture knobs not implied by the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub d_fpn: usize,
    pub levels: usize,
    pub head_width: usize,
    pub proj_hidden: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self { d_fpn: 64, levels: 4, head_width: 64, proj_hidden: 32 }
    }
}

/// Contents of a training config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub arch: ArchConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn model_config(&self, d_vid: usize, d_img: usize, n_base: usize) -> ModelConfig {
        let mut c = ModelConfig::new(d_vid, self.arch.d_fpn, d_img, self.arch.levels, n_base, self.train.seed);
        c.head_width = self.arch.head_width;
        c.proj_hidden = self.arch.proj_hidden;
        c
    }
}

pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    opt: AdamW,
    rng: ChaCha8Rng,
    step: usize,
    warmup_steps: usize,
    total_steps: usize,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig, steps_per_epoch: usize) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamW::new(&model.params, cfg.weight_decay);
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            warmup_steps: cfg.warmup_epochs * steps_per_epoch,
            total_steps: cfg.epochs * steps_per_epoch,
            model,
            cfg,
            opt,
            step: 0,
        })
    }

    pub fn current_lr(&self) -> f64 {
        learning_rate(self.cfg.base_lr, self.step, self.warmup_steps, self.total_steps)
    }

    /// One pass over `samples` in a seeded order; returns the epoch mean.
    pub fn train_epoch(&mut self, samples: &[Sample], base_bank: &TextBank, base_ids: &[usize]) -> Result<LossBreakdown> {
        if samples.is_empty() {
            return Err(Error::Contract("training set is empty".into()));
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut self.rng);
        let mut parts = Vec::with_capacity(samples.len());
        for i in order {
            let s = &samples[i];
            let (b, grads) = video_gradients(&self.model, s, base_bank, base_ids, &self.cfg, &mut self.rng)?;
            let lr = self.current_lr();
            self.opt
                .step(&mut self.model.params, &grads, lr)
                .map_err(|e| Error::Divergence(format!("video {}: {e}", s.id)))?;
            self.step += 1;
            parts.push(b);
        }
        Ok(LossBreakdown::mean(&parts))
    }
}

/// Trains a fresh model on the base-only videos of `samples`. Returns the model and
/// the per-epoch mean losses.
pub fn train(
    exp: &ExperimentConfig,
    samples: &[Sample],
    bank: &TextBank,
    split: &SplitSpec,
) -> Result<(Model, Vec<LossBreakdown>)> {
    let data = base_only(samples, split);
    let first = data.first().ok_or_else(|| Error::Contract("no training video has only base categories".into()))?;
    let config = exp.model_config(first.f_vid.dim(), first.f_img.dim(), split.base_ids.len());
    let model = Model::new(config)?;
    let base_bank = bank.subset(&split.base_ids)?;
    let mut trainer = Trainer::new(model, exp.train.clone(), data.len())?;
    let mut history = Vec::with_capacity(exp.train.epochs);
    for _ in 0..exp.train.epochs {
        history.push(trainer.train_epoch(&data, &base_bank, &split.base_ids)?);
    }
    Ok((trainer.model, history))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NmsConfig {
    pub tiou_threshold: f64,
    pub max_instances: usize,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self { tiou_threshold: 0.5, max_instances: 200 }
    }
}

/// Per-class greedy suppression, then the best `max_instances` by score.
pub fn nms(mut dets: Vec<Detection>, cfg: NmsConfig) -> Vec<Detection> {
    dets.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.interval.t_s.total_cmp(&b.interval.t_s))
            .then(a.interval.t_e.total_cmp(&b.interval.t_e))
            .then(a.category.cmp(&b.category))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        if kept.len() == cfg.max_instances {
            break;
        }
        let suppressed = kept
            .iter()
            .any(|k| k.category == d.category && tiou_unchecked(&k.interval, &d.interval) >= cfg.tiou_threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// Inference variants used for ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    #[default]
    Full,
    /// Every retained proposal goes through the open-vocabulary classifier over
    /// the whole vocabulary.
    NoBaseClassifier,
    /// The presence score is replaced by the top base-class probability.
    NoPresenceGate,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub triage: TriageConfig,
    pub nms: NmsConfig,
    pub n_coarse: usize,
    pub temperature: f64,
    pub mode: InferenceMode,
    pub novel_score: NovelScore,
}

/// Ranking score attached to novel detections.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NovelScore {
    /// Presence score times the fine-classifier softmax confidence.
    Softmax,
    /// `Softmax` further weighted by the span's mean frame similarity to the
    /// assigned category.
    #[default]
    SpanSupport,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            triage: TriageConfig::default(),
            nms: NmsConfig::default(),
            n_coarse: 2,
            temperature: 0.07,
            mode: InferenceMode::Full,
            novel_score: NovelScore::default(),
        }
    }
}

/// Detections for one video from precomputed head outputs.
pub fn detections_from_heads(
    model: &Model,
    heads: &HeadsOutput,
    layout: &crate::geometry::PyramidLayout,
    sample: &Sample,
    bank: &TextBank,
    split: &SplitSpec,
    cfg: &InferenceConfig,
) -> Result<Vec<Detection>> {
    let proposals = decode_proposals(layout, &heads.onset_offset, sample.f_vid.duration())?;
    let mut p_aps = heads.p_aps.clone();
    let mut triage_cfg = cfg.triage;
    let novel_bank = match cfg.mode {
        InferenceMode::Full => bank.subset(&split.novel_ids)?,
        InferenceMode::NoBaseClassifier => {
            triage_cfg.lambda_base = f64::INFINITY;
            bank.clone()
        }
        InferenceMode::NoPresenceGate => {
            for (i, p) in p_aps.iter_mut().enumerate() {
                *p = heads.p_base.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            }
            bank.subset(&split.novel_ids)?
        }
    };
    let tri = triage_proposals(&proposals, &p_aps, &heads.p_base, triage_cfg, &split.base_ids)?;
    let mut dets: Vec<Detection> = tri
        .base_instances
        .iter()
        .map(|b| Detection { interval: b.interval, category: b.category, score: b.score })
        .collect();
    if !tri.novel_proposals.is_empty() {
        let s_img = image_text_similarity(&sample.f_img.values, &novel_bank)?;
        let coarse = mil_coarse_categories(&s_img, &novel_bank, cfg.n_coarse)?;
        let spans: Vec<Interval> = tri.novel_proposals.iter().map(|p| p.interval).collect();
        let pooled = pool_proposal_features(&sample.f_img.values, sample.f_img.rate, &spans)?;
        let mut fine = assign_fine_categories(&pooled, &tri.novel_proposals, &coarse, model, cfg.temperature)?;
        if cfg.novel_score == NovelScore::SpanSupport {
            let support = span_support(&s_img, sample.f_img.rate, &novel_bank, &fine)?;
            fine.iter_mut().zip(support).for_each(|(f, w)| f.score *= w);
        }
        dets.extend(fine.into_iter().map(|n| Detection { interval: n.interval, category: n.category, score: n.score }));
    }
    Ok(nms(dets, cfg.nms))
}

pub fn infer_video(
    model: &Model,
    sample: &Sample,
    bank: &TextBank,
    split: &SplitSpec,
    cfg: &InferenceConfig,
) -> Result<Vec<Detection>> {
    let (heads, layout) = model.heads(&sample.f_vid)?;
    detections_from_heads(model, &heads, &layout, sample, bank, split, cfg)
        .map_err(|e| Error::Contract(format!("video {}: {e}", sample.id)))
}

pub fn infer_all(
    model: &Model,
    samples: &[Sample],
    bank: &TextBank,
    split: &SplitSpec,
    cfg: &InferenceConfig,
) -> Result<BTreeMap<String, Vec<Detection>>> {
    samples.iter().map(|s| Ok((s.id.clone(), infer_video(model, s, bank, split, cfg)?))).collect()
}
