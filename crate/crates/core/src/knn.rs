//! K-nearest-neighbour classifier over z-scored feature vectors.
//!
//! Neighbour search is an exhaustive linear scan. Distance ties go to the
//! training point inserted first, so predictions are reproducible even with
//! duplicated training rows.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::label::Label;

pub const DEFAULT_K: usize = 5;

#[derive(Debug, Error)]
pub enum KnnError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("k = {k} exceeds the {n} training points")]
    KTooLarge { k: usize, n: usize },
    #[error("k = {0} must be odd and positive")]
    InvalidK(usize),
    #[error("feature vector has {got} dimensions, model expects {want}")]
    DimensionMismatch { want: usize, got: usize },
    #[error("non-finite feature value")]
    NonFinite,
    #[error("malformed model: {0}")]
    Malformed(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, KnnError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnnPoint {
    pub x: Vec<f64>,
    pub label: Label,
}

/// Stored training set in standardized coordinates. A standard deviation of
/// zero marks a constant dimension that is left out of distances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnnModel {
    pub k: usize,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub points: Vec<KnnPoint>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KnnPrediction {
    pub label: Label,
    pub p_fake: f64,
}

impl KnnModel {
    pub fn fit<F: AsRef<[f64]>>(training: &[(F, Label)], k: usize) -> Result<Self> {
        if training.is_empty() {
            return Err(KnnError::EmptyTrainingSet);
        }
        if k == 0 || k % 2 == 0 {
            return Err(KnnError::InvalidK(k));
        }
        if k > training.len() {
            return Err(KnnError::KTooLarge {
                k,
                n: training.len(),
            });
        }
        let dim = training[0].0.as_ref().len();
        for (x, _) in training {
            let x = x.as_ref();
            if x.len() != dim {
                return Err(KnnError::DimensionMismatch {
                    want: dim,
                    got: x.len(),
                });
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(KnnError::NonFinite);
            }
        }

        let n = training.len() as f64;
        let mut means = vec![0.0; dim];
        let mut stds = vec![0.0; dim];
        for d in 0..dim {
            let first = training[0].0.as_ref()[d];
            let constant = training.iter().all(|(x, _)| x.as_ref()[d] == first);
            let mean = training.iter().map(|(x, _)| x.as_ref()[d]).sum::<f64>() / n;
            means[d] = mean;
            if !constant {
                let var = training
                    .iter()
                    .map(|(x, _)| (x.as_ref()[d] - mean).powi(2))
                    .sum::<f64>()
                    / n;
                stds[d] = var.sqrt();
            }
        }

        let mut model = KnnModel {
            k,
            means,
            stds,
            points: Vec::with_capacity(training.len()),
        };
        model.points = training
            .iter()
            .map(|(x, label)| KnnPoint {
                x: model.standardize(x.as_ref()),
                label: *label,
            })
            .collect();
        Ok(model)
    }

    pub fn dim(&self) -> usize {
        self.means.len()
    }

    /// Z-score a raw vector; constant dimensions map to 0.
    pub fn standardize(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(self.means.iter().zip(&self.stds))
            .map(|(&v, (&m, &s))| if s > 0.0 { (v - m) / s } else { 0.0 })
            .collect()
    }

    pub fn predict(&self, query: &[f64]) -> Result<KnnPrediction> {
        if query.len() != self.dim() {
            return Err(KnnError::DimensionMismatch {
                want: self.dim(),
                got: query.len(),
            });
        }
        let q = self.standardize(query);
        let active: Vec<usize> = (0..self.dim()).filter(|&d| self.stds[d] > 0.0).collect();

        // Running k-best list kept sorted by (distance, index).
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(self.k + 1);
        for (i, p) in self.points.iter().enumerate() {
            let d2: f64 = active.iter().map(|&d| (p.x[d] - q[d]).powi(2)).sum();
            if best.len() == self.k && d2 >= best[self.k - 1].0 {
                continue;
            }
            let pos = best.partition_point(|&(bd, _)| bd <= d2);
            best.insert(pos, (d2, i));
            best.truncate(self.k);
        }

        let fakes = best
            .iter()
            .filter(|&&(_, i)| self.points[i].label.is_fake())
            .count();
        let label = if 2 * fakes > self.k {
            Label::Fake
        } else {
            Label::Real
        };
        Ok(KnnPrediction {
            label,
            p_fake: fakes as f64 / self.k as f64,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.means.len();
        if self.stds.len() != dim {
            return Err(KnnError::Malformed("means and stds differ in length".into()));
        }
        if self.points.is_empty() {
            return Err(KnnError::EmptyTrainingSet);
        }
        if self.k == 0 || self.k % 2 == 0 {
            return Err(KnnError::InvalidK(self.k));
        }
        if self.k > self.points.len() {
            return Err(KnnError::KTooLarge {
                k: self.k,
                n: self.points.len(),
            });
        }
        if self.stds.iter().any(|&s| s < 0.0 || !s.is_finite()) {
            return Err(KnnError::Malformed("negative or non-finite std".into()));
        }
        for p in &self.points {
            if p.x.len() != dim {
                return Err(KnnError::DimensionMismatch {
                    want: dim,
                    got: p.x.len(),
                });
            }
        }
        Ok(())
    }

    pub fn to_writer<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    pub fn from_reader<R: Read>(r: R) -> Result<Self> {
        let model: KnnModel = serde_json::from_reader(r)?;
        model.validate()?;
        Ok(model)
    }
}
