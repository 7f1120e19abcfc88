//! Feature matrices, annotations and category vocabularies.

use crate::error::{Error, Result};
use crate::geometry::Interval;
use crate::numerics::Tensor2D;

/// `T x D` features sampled at `rate` rows per second.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub values: Tensor2D,
    pub rate: f64,
}

impl FeatureMatrix {
    pub fn new(values: Tensor2D, rate: f64) -> Result<Self> {
        if !(rate.is_finite() && rate > 0.0) {
            return Err(Error::Contract(format!("feature rate must be positive, got {rate}")));
        }
        Ok(Self { values, rate })
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    /// Seconds covered by one row.
    pub fn row_sec(&self) -> f64 {
        1.0 / self.rate
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 / self.rate
    }

    /// Copy with unit-norm rows.
    pub fn normalized(&self) -> FeatureMatrix {
        FeatureMatrix { values: self.values.normalized_rows(1e-12), rate: self.rate }
    }
}

/// One annotated action: interval plus index into the full vocabulary.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActionInstance {
    pub interval: Interval,
    pub category: usize,
}

/// Annotations of a single video.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnnotationSet {
    pub duration: f64,
    pub instances: Vec<ActionInstance>,
}

impl AnnotationSet {
    pub fn validate(&self, n_categories: usize) -> Result<()> {
        for inst in &self.instances {
            inst.interval.validate()?;
            if inst.interval.t_e > self.duration {
                return Err(Error::Contract(format!(
                    "annotation [{}, {}] exceeds video duration {}",
                    inst.interval.t_s, inst.interval.t_e, self.duration
                )));
            }
            if inst.category >= n_categories {
                return Err(Error::Vocabulary(format!("category id {} of {n_categories}", inst.category)));
            }
        }
        Ok(())
    }

    /// Keeps only instances whose category is in `keep`.
    pub fn restricted_to(&self, keep: &[usize]) -> AnnotationSet {
        AnnotationSet {
            duration: self.duration,
            instances: self.instances.iter().filter(|i| keep.contains(&i.category)).copied().collect(),
        }
    }
}

/// Ordered category names.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocabulary {
    names: Vec<String>,
}

impl Vocabulary {
    pub fn new(names: Vec<String>) -> Result<Self> {
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::Config(format!("duplicate category name {n:?}")));
            }
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.names.iter().position(|n| n == name).ok_or_else(|| Error::Vocabulary(name.to_string()))
    }
}
