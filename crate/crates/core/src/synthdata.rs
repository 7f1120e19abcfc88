//! Seeded synthetic corpus. Each category has a random unit embedding; frames
//! inside an instance are noisy copies of it, background frames are isotropic
//! noise, and video features are a fixed random linear map of the image rows.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{ActionInstance, AnnotationSet, FeatureMatrix, Vocabulary};
use crate::error::{Error, Result};
use crate::geometry::Interval;
use crate::io::{write_features, write_json, AnnotationFile, CorpusPaths, TextCategory, TextFile, FORMAT_VERSION};
use crate::numerics::{matmul, Tensor2D};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_videos: usize,
    /// The last `n_test` videos form the test subset.
    pub n_test: usize,
    /// Video length in seconds, inclusive range. One feature row per second.
    pub t_min: usize,
    pub t_max: usize,
    pub d_vid: usize,
    /// Shared width of image and text embeddings.
    pub d_img: usize,
    pub n_categories: usize,
    pub templates: usize,
    pub instances_min: usize,
    pub instances_max: usize,
    pub duration_min: usize,
    pub duration_max: usize,
    pub min_gap: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_videos: 250,
            n_test: 50,
            t_min: 88,
            t_max: 104,
            d_vid: 32,
            d_img: 16,
            n_categories: 12,
            templates: 4,
            instances_min: 1,
            instances_max: 3,
            duration_min: 8,
            duration_max: 24,
            min_gap: 4,
            noise: 0.1,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_videos == 0 || self.n_test > self.n_videos {
            return fail(format!("{} test videos out of {}", self.n_test, self.n_videos));
        }
        if self.t_min == 0 || self.t_min > self.t_max {
            return fail(format!("length range [{}, {}]", self.t_min, self.t_max));
        }
        if self.d_vid == 0 || self.d_img == 0 || self.n_categories == 0 || self.templates == 0 {
            return fail("dimensions, categories and templates must be positive".into());
        }
        if self.instances_min > self.instances_max || self.duration_min == 0 || self.duration_min > self.duration_max {
            return fail("instance count or duration range is empty".into());
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return fail(format!("noise {}", self.noise));
        }
        let tightest = self.instances_max * self.duration_min + self.instances_max.saturating_sub(1) * self.min_gap;
        if tightest > self.t_min {
            return fail(format!(
                "{} instances of {}s with {}s gaps do not fit in {}s",
                self.instances_max, self.duration_min, self.min_gap, self.t_min
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Train,
    Test,
}

impl Subset {
    pub fn as_str(self) -> &'static str {
        match self {
            Subset::Train => "train",
            Subset::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthVideo {
    pub id: String,
    pub subset: Subset,
    pub f_vid: FeatureMatrix,
    pub f_img: FeatureMatrix,
    pub annotations: AnnotationSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub vocab: Vocabulary,
    /// True category embeddings, unit rows.
    pub embeddings: Tensor2D,
    /// Per category, `templates x d_img` noisy copies of its embedding.
    pub templates: Vec<Tensor2D>,
    pub videos: Vec<SynthVideo>,
}

fn gaussian_row<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = crate::numerics::l2_norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn noisy_copy<R: Rng>(rng: &mut R, base: &[f64], sigma: f64) -> Vec<f64> {
    let mut v: Vec<f64> = base.iter().zip(gaussian_row(rng, base.len())).map(|(b, g)| b + sigma * g).collect();
    normalize(&mut v);
    v
}

/// Random instance boundaries for one video: durations shrunk until they fit,
/// then leftover time scattered into the gaps.
fn pack<R: Rng>(rng: &mut R, cfg: &SynthConfig, length: usize) -> Vec<(usize, usize)> {
    let n = rng.random_range(cfg.instances_min..=cfg.instances_max);
    if n == 0 {
        return Vec::new();
    }
    let mut durations: Vec<usize> = (0..n).map(|_| rng.random_range(cfg.duration_min..=cfg.duration_max)).collect();
    while durations.iter().sum::<usize>() + (n - 1) * cfg.min_gap > length {
        let k = (0..n).max_by_key(|&k| (durations[k], std::cmp::Reverse(k))).unwrap();
        durations[k] -= 1;
    }
    let slack = length - durations.iter().sum::<usize>() - (n - 1) * cfg.min_gap;
    let mut cuts: Vec<usize> = (0..n).map(|_| rng.random_range(0..=slack)).collect();
    cuts.sort_unstable();
    let mut spans = Vec::with_capacity(n);
    let mut t = 0;
    let mut prev_cut = 0;
    for (k, d) in durations.iter().enumerate() {
        t += cuts[k] - prev_cut;
        prev_cut = cuts[k];
        spans.push((t, t + d));
        t += d + cfg.min_gap;
    }
    spans
}

pub fn generate_dataset(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let names: Vec<String> = (0..cfg.n_categories).map(|c| format!("action_{c:02}")).collect();
    let vocab = Vocabulary::new(names)?;

    let mut embeddings = Tensor2D::zeros(cfg.n_categories, cfg.d_img);
    for c in 0..cfg.n_categories {
        let mut e = gaussian_row(&mut rng, cfg.d_img);
        normalize(&mut e);
        embeddings.row_mut(c).copy_from_slice(&e);
    }
    let templates = (0..cfg.n_categories)
        .map(|c| {
            let rows: Vec<Vec<f64>> =
                (0..cfg.templates).map(|_| noisy_copy(&mut rng, embeddings.row(c), cfg.noise)).collect();
            Tensor2D::from_rows(&rows, cfg.d_img)
        })
        .collect::<Result<Vec<_>>>()?;
    let scale = 1.0 / (cfg.d_img as f64).sqrt();
    let mixing = Tensor2D::from_vec(
        cfg.d_img,
        cfg.d_vid,
        (0..cfg.d_img * cfg.d_vid).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect(),
    )?;

    // layouts and labels first, so that categories can be dealt evenly
    let layouts: Vec<(usize, Vec<(usize, usize)>)> = (0..cfg.n_videos)
        .map(|_| {
            let length = rng.random_range(cfg.t_min..=cfg.t_max);
            (length, pack(&mut rng, cfg, length))
        })
        .collect();
    let mut deck: Vec<usize> = Vec::new();
    let mut draw = |rng: &mut ChaCha8Rng| {
        if deck.is_empty() {
            deck = (0..cfg.n_categories).collect();
            deck.shuffle(rng);
        }
        deck.pop().unwrap()
    };
    let labels: Vec<Vec<usize>> =
        layouts.iter().map(|(_, spans)| spans.iter().map(|_| draw(&mut rng)).collect()).collect();

    let mut videos = Vec::with_capacity(cfg.n_videos);
    for (v, ((length, spans), cats)) in layouts.iter().zip(&labels).enumerate() {
        let mut vrng = ChaCha8Rng::seed_from_u64(cfg.seed);
        vrng.set_stream(v as u64 + 1);
        let mut img = Tensor2D::zeros(*length, cfg.d_img);
        for t in 0..*length {
            let row = match spans.iter().position(|&(s, e)| t >= s && t < e) {
                Some(k) => noisy_copy(&mut vrng, embeddings.row(cats[k]), cfg.noise),
                None => {
                    let mut g = gaussian_row(&mut vrng, cfg.d_img);
                    normalize(&mut g);
                    g
                }
            };
            img.row_mut(t).copy_from_slice(&row);
        }
        let mut vid = matmul(&img, &mixing, false)?;
        for x in vid.data_mut() {
            *x += cfg.noise * vrng.sample::<f64, _>(StandardNormal);
        }
        let instances = spans
            .iter()
            .zip(cats)
            .map(|(&(s, e), &c)| ActionInstance { interval: Interval { t_s: s as f64, t_e: e as f64 }, category: c })
            .collect();
        videos.push(SynthVideo {
            id: format!("video_{v:04}"),
            subset: if v >= cfg.n_videos - cfg.n_test { Subset::Test } else { Subset::Train },
            f_vid: FeatureMatrix::new(vid, 1.0)?,
            f_img: FeatureMatrix::new(img, 1.0)?,
            annotations: AnnotationSet { duration: *length as f64, instances },
        });
    }
    Ok(SynthCorpus { vocab, embeddings, templates, videos })
}

impl SynthCorpus {
    pub fn annotations(&self, subset: Subset) -> BTreeMap<String, AnnotationSet> {
        self.videos
            .iter()
            .filter(|v| v.subset == subset)
            .map(|v| (v.id.clone(), v.annotations.clone()))
            .collect()
    }

    pub fn text_file(&self) -> TextFile {
        TextFile {
            version: FORMAT_VERSION,
            dim: self.embeddings.cols(),
            categories: self
                .vocab
                .names()
                .iter()
                .zip(&self.templates)
                .map(|(name, t)| TextCategory { name: name.clone(), templates: t.iter_rows().map(<[f64]>::to_vec).collect() })
                .collect(),
        }
    }

    /// Writes `train.json`, `test.json`, `text.json` and `features/`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let paths = CorpusPaths::new(dir);
        let features = paths.features_dir();
        std::fs::create_dir_all(&features).map_err(|e| Error::io(&features, e))?;
        for subset in [Subset::Train, Subset::Test] {
            let file = AnnotationFile::from_sets(&self.vocab, &self.annotations(subset));
            write_json(&paths.annotations(subset.as_str()), &file)?;
        }
        write_json(&paths.text(), &self.text_file())?;
        for v in &self.videos {
            write_features(&paths.video_features(&v.id), &v.f_vid)?;
            write_features(&paths.image_features(&v.id), &v.f_img)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::c2f::{fuse_templates, image_text_similarity};
    use crate::triage::argmax;

    fn small(noise: f64, seed: u64) -> SynthConfig {
        SynthConfig {
            n_videos: 8,
            n_test: 2,
            t_min: 40,
            t_max: 60,
            d_vid: 8,
            d_img: 8,
            n_categories: 5,
            templates: 3,
            instances_min: 1,
            instances_max: 3,
            duration_min: 4,
            duration_max: 12,
            min_gap: 2,
            noise,
            seed,
        }
    }

    /// Fraction of in-instance frames whose nearest fused text row is their category.
    fn frame_accuracy(c: &SynthCorpus) -> f64 {
        let bank = fuse_templates((0..c.vocab.len()).collect(), c.templates.clone()).unwrap();
        let (mut hit, mut total) = (0usize, 0usize);
        for v in &c.videos {
            let s = image_text_similarity(&v.f_img.values, &bank).unwrap();
            for a in &v.annotations.instances {
                for t in a.interval.t_s as usize..a.interval.t_e as usize {
                    total += 1;
                    hit += (argmax(s.row(t)).0 == a.category) as usize;
                }
            }
        }
        hit as f64 / total as f64
    }

    #[test]
    fn counts_and_layout() {
        let c = generate_dataset(&small(0.1, 0)).unwrap();
        assert_eq!(c.videos.len(), 8);
        assert_eq!(c.videos.iter().filter(|v| v.subset == Subset::Test).count(), 2);
        let mut seen = vec![false; 5];
        for v in &c.videos {
            let a = &v.annotations;
            assert!((1..=3).contains(&a.instances.len()));
            a.validate(5).unwrap();
            assert_eq!(v.f_img.len() as f64, a.duration);
            assert_eq!(v.f_vid.len(), v.f_img.len());
            assert_eq!((v.f_vid.dim(), v.f_img.dim()), (8, 8));
            for w in a.instances.windows(2) {
                assert!(w[1].interval.t_s >= w[0].interval.t_e + 2.0);
            }
            for i in &a.instances {
                assert!(i.interval.length() >= 4.0 && i.interval.length() <= 12.0);
                seen[i.category] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn tight_packing_and_infeasible_config() {
        let mut cfg = small(0.0, 1);
        cfg.t_min = 3 * 4 + 2 * 2;
        cfg.t_max = cfg.t_min;
        cfg.instances_min = 3;
        for v in generate_dataset(&cfg).unwrap().videos {
            v.annotations.validate(5).unwrap();
            assert_eq!(v.annotations.instances.len(), 3);
        }
        cfg.t_min -= 1;
        assert!(matches!(generate_dataset(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn noiseless_frames_match_their_text() {
        let c = generate_dataset(&small(0.0, 3)).unwrap();
        assert_eq!(frame_accuracy(&c), 1.0);
        let bank = fuse_templates((0..5).collect(), c.templates.clone()).unwrap();
        for v in &c.videos {
            let s = image_text_similarity(&v.f_img.values, &bank).unwrap();
            for a in &v.annotations.instances {
                assert!(s.get(a.interval.t_s as usize, a.category) >= 0.99);
            }
        }
    }

    #[test]
    fn accuracy_does_not_rise_with_noise() {
        let acc: Vec<f64> = [0.0, 0.2, 0.5, 1.0]
            .iter()
            .map(|&n| (0..5).map(|s| frame_accuracy(&generate_dataset(&small(n, s)).unwrap())).sum::<f64>() / 5.0)
            .collect();
        for w in acc.windows(2) {
            assert!(w[1] <= w[0], "{acc:?}");
        }
    }

    #[test]
    fn same_seed_same_files() {
        let cfg = small(0.1, 5);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate_dataset(&cfg).unwrap().write(a.path()).unwrap();
        generate_dataset(&cfg).unwrap().write(b.path()).unwrap();
        let list = |d: &Path| {
            let mut files: Vec<_> = walk(d).into_iter().map(|p| p.strip_prefix(d).unwrap().to_path_buf()).collect();
            files.sort();
            files
        };
        let files = list(a.path());
        assert_eq!(files, list(b.path()));
        assert_eq!(files.len(), 3 + 2 * 8);
        for f in files {
            assert_eq!(std::fs::read(a.path().join(&f)).unwrap(), std::fs::read(b.path().join(&f)).unwrap());
        }
        let other = generate_dataset(&small(0.1, 6)).unwrap();
        assert_ne!(other, generate_dataset(&cfg).unwrap());
    }

    fn walk(d: &Path) -> Vec<std::path::PathBuf> {
        let mut out = Vec::new();
        for e in std::fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }
}
