//! Regression-based no-reference scoring over the natural-scene feature
//! vector. Models are plain JSON so externally trained regressors can be
//! dropped in.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::nss::{nss_features, NSS_FEATURE_LEN};
use crate::raster::RasterImage;

pub const BRISQUE_MODEL_SCHEMA_VERSION: u32 = 1;

/// Feature regressor plus the scaling ranges its inputs were trained with.
/// Features are mapped to [-1, 1] per component before evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrisqueModel {
    pub schema_version: u32,
    pub feature_min: Vec<f64>,
    pub feature_max: Vec<f64>,
    #[serde(flatten)]
    pub regressor: Regressor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Regressor {
    /// Kernel regression: sum of weighted Gaussian bumps around support
    /// vectors, plus a bias.
    RbfSvr {
        gamma: f64,
        bias: f64,
        support_vectors: Vec<Vec<f64>>,
        weights: Vec<f64>,
    },
    /// Distance from a single reference centroid in scaled feature space.
    /// A stand-in when no trained regressor is available; larger still means
    /// further from clean statistics.
    NearestMeanDistance { reference_mean: Vec<f64> },
}

impl BrisqueModel {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != BRISQUE_MODEL_SCHEMA_VERSION {
            return Err(Error::format(format!(
                "unsupported model schema {}",
                self.schema_version
            )));
        }
        if self.feature_min.len() != NSS_FEATURE_LEN
            || self.feature_max.len() != NSS_FEATURE_LEN
        {
            return Err(Error::format(format!(
                "scaling ranges must have {NSS_FEATURE_LEN} entries"
            )));
        }
        for (lo, hi) in self.feature_min.iter().zip(&self.feature_max) {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(Error::format("invalid feature scaling range".to_string()));
            }
        }
        match &self.regressor {
            Regressor::RbfSvr {
                gamma,
                bias,
                support_vectors,
                weights,
            } => {
                if !(gamma.is_finite() && *gamma > 0.0) {
                    return Err(Error::format("kernel width must be positive".to_string()));
                }
                if !bias.is_finite() {
                    return Err(Error::format("bias must be finite".to_string()));
                }
                if support_vectors.is_empty() || support_vectors.len() != weights.len() {
                    return Err(Error::format(
                        "support vectors and weights must pair up".to_string(),
                    ));
                }
                if support_vectors.iter().any(|sv| sv.len() != NSS_FEATURE_LEN) {
                    return Err(Error::format(format!(
                        "support vectors must have {NSS_FEATURE_LEN} entries"
                    )));
                }
            }
            Regressor::NearestMeanDistance { reference_mean } => {
                if reference_mean.len() != NSS_FEATURE_LEN {
                    return Err(Error::format(format!(
                        "reference mean must have {NSS_FEATURE_LEN} entries"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Build the centroid-distance fallback from a corpus of clean feature
    /// vectors, deriving the scaling ranges from the same corpus.
    pub fn fit_nearest_mean(corpus: &[Vec<f64>]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::param("empty feature corpus"));
        }
        if corpus.iter().any(|f| f.len() != NSS_FEATURE_LEN) {
            return Err(Error::dims(format!(
                "feature vectors must have {NSS_FEATURE_LEN} entries"
            )));
        }
        let mut lo = vec![f64::INFINITY; NSS_FEATURE_LEN];
        let mut hi = vec![f64::NEG_INFINITY; NSS_FEATURE_LEN];
        for row in corpus {
            for ((l, h), &v) in lo.iter_mut().zip(hi.iter_mut()).zip(row) {
                *l = l.min(v);
                *h = h.max(v);
            }
        }
        let model_shell = BrisqueModel {
            schema_version: BRISQUE_MODEL_SCHEMA_VERSION,
            feature_min: lo,
            feature_max: hi,
            regressor: Regressor::NearestMeanDistance {
                reference_mean: vec![0.0; NSS_FEATURE_LEN],
            },
        };
        let mut mean = vec![0.0; NSS_FEATURE_LEN];
        for row in corpus {
            for (m, v) in mean.iter_mut().zip(model_shell.scale(row)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= corpus.len() as f64;
        }
        let mut model = model_shell;
        model.regressor = Regressor::NearestMeanDistance {
            reference_mean: mean,
        };
        model.validate()?;
        Ok(model)
    }

    fn scale(&self, features: &[f64]) -> Vec<f64> {
        features
            .iter()
            .zip(self.feature_min.iter().zip(&self.feature_max))
            .map(|(&v, (&lo, &hi))| {
                if hi > lo {
                    -1.0 + 2.0 * (v - lo) / (hi - lo)
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Evaluate the regressor on a raw (unscaled) feature vector.
    pub fn evaluate(&self, features: &[f64]) -> Result<f64> {
        self.validate()?;
        if features.len() != NSS_FEATURE_LEN {
            return Err(Error::dims(format!(
                "expected {NSS_FEATURE_LEN} features, got {}",
                features.len()
            )));
        }
        let x = self.scale(features);
        match &self.regressor {
            Regressor::RbfSvr {
                gamma,
                bias,
                support_vectors,
                weights,
            } => {
                let mut acc = *bias;
                for (sv, w) in support_vectors.iter().zip(weights) {
                    let dist_sq: f64 =
                        sv.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum();
                    acc += w * (-gamma * dist_sq).exp();
                }
                Ok(acc)
            }
            Regressor::NearestMeanDistance { reference_mean } => Ok(reference_mean
                .iter()
                .zip(&x)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: BrisqueModel = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Score an image: extract its scene statistics and run the regressor.
    pub fn score(&self, img: &RasterImage) -> Result<f64> {
        self.evaluate(&nss_features(img)?)
    }
}

/// Score an image with a regressor model loaded from `model_path`.
pub fn brisque_score(img: &RasterImage, model_path: &Path) -> Result<f64> {
    BrisqueModel::load(model_path)?.score(img)
}
