use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::rng::{self, normals};
use crate::tensorgrad::{Tape, Tensor, Var};

/// How a feature map is configured.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FeatureSpec {
    Identity,
    /// `dim` output features (`dim / 2` frequencies).
    RandomFourier { dim: usize },
    FileBacked { path: PathBuf },
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec::RandomFourier { dim: 512 }
    }
}

impl std::str::FromStr for FeatureSpec {
    type Err = Error;

    /// `identity`, `rff`, `rff:DIM` or `file:PATH`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "identity" {
            Ok(FeatureSpec::Identity)
        } else if s == "rff" {
            Ok(FeatureSpec::default())
        } else if let Some(d) = s.strip_prefix("rff:") {
            let dim = d
                .parse()
                .map_err(|_| Error::Usage(format!("bad feature dimension in '{s}'")))?;
            Ok(FeatureSpec::RandomFourier { dim })
        } else if let Some(p) = s.strip_prefix("file:") {
            Ok(FeatureSpec::FileBacked { path: p.into() })
        } else {
            Err(Error::Usage(format!(
                "unknown features '{s}' (expected identity, rff, rff:DIM or file:PATH)"
            )))
        }
    }
}

/// A fixed map from samples to feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub enum FeatureMap {
    Identity {
        dim: usize,
    },
    /// `φ(x) = √(2/m) [cos(xW), sin(xW)]` with `W` entries `N(0, 1/ℓ²)`.
    RandomFourier {
        /// `[d, m/2]`.
        frequencies: Tensor,
        lengthscale: f64,
    },
    /// Precomputed features addressed by sample index.
    FileBacked {
        path: PathBuf,
        features: Tensor,
    },
}

/// Median Euclidean distance over all pairs of the first `limit` rows.
pub fn median_pairwise_distance(x: &Tensor, limit: usize) -> f64 {
    let n = x.rows().min(limit);
    let mut d = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
            d.push(s.sqrt());
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *m;
    if d.len() % 2 == 1 {
        upper
    } else {
        let lower = d[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

impl FeatureMap {
    /// Random Fourier features with lengthscale `ℓ` set to the median pairwise
    /// distance of (up to 1000 rows of) `data`.
    pub fn random_fourier(data: &Tensor, dim: usize, seed: u64) -> Result<Self> {
        let ell = median_pairwise_distance(data, 1000);
        Self::random_fourier_with(data.cols(), dim, ell, seed)
    }

    pub fn random_fourier_with(data_dim: usize, dim: usize, lengthscale: f64, seed: u64) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return Err(Error::Usage(format!("random Fourier dimension must be even, got {dim}")));
        }
        if !(lengthscale > 0.0 && lengthscale.is_finite()) {
            return Err(Error::Usage(format!("degenerate lengthscale {lengthscale}")));
        }
        let half = dim / 2;
        let w: Vec<f64> = normals(&mut rng::rng(seed), data_dim * half)
            .into_iter()
            .map(|v| v / lengthscale)
            .collect();
        Ok(FeatureMap::RandomFourier {
            frequencies: Tensor::new(vec![data_dim, half], w)?,
            lengthscale,
        })
    }

    pub fn file_backed(path: &Path, features: Tensor) -> Result<Self> {
        if features.ndim() != 2 {
            return Err(Error::Format(format!(
                "feature array must be 2-D, got {:?}",
                features.shape()
            )));
        }
        Ok(FeatureMap::FileBacked {
            path: path.to_path_buf(),
            features,
        })
    }

    /// Builds the map a [`FeatureSpec`] describes.
    pub fn from_spec(spec: &FeatureSpec, data: &Tensor, seed: u64) -> Result<Self> {
        match spec {
            FeatureSpec::Identity => Ok(FeatureMap::Identity { dim: data.cols() }),
            FeatureSpec::RandomFourier { dim } => Self::random_fourier(data, *dim, seed),
            FeatureSpec::FileBacked { path } => {
                let features = crate::checkpoint::load_features(path)?;
                Self::file_backed(path, features)
            }
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            FeatureMap::Identity { dim } => *dim,
            FeatureMap::RandomFourier { frequencies, .. } => 2 * frequencies.cols(),
            FeatureMap::FileBacked { features, .. } => features.cols(),
        }
    }

    fn input_dim(&self) -> Option<usize> {
        match self {
            FeatureMap::Identity { dim } => Some(*dim),
            FeatureMap::RandomFourier { frequencies, .. } => Some(frequencies.rows()),
            FeatureMap::FileBacked { .. } => None,
        }
    }

    /// Features of generated samples, differentiable in `x`.
    pub fn apply_on_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if let Some(d) = self.input_dim() {
            if shape.len() != 2 || shape[1] != d {
                return Err(shape_err(
                    "apply_features",
                    format!("samples {shape:?} for a map on dimension {d}"),
                ));
            }
        }
        match self {
            FeatureMap::Identity { .. } => Ok(x),
            FeatureMap::RandomFourier { frequencies, .. } => {
                let w = tape.constant(frequencies.clone());
                let z = tape.matmul(x, w)?;
                let c = tape.cos(z);
                let s = tape.sin(z);
                let both = tape.concat(&[c, s])?;
                Ok(tape.scale(both, (2.0 / self.output_dim() as f64).sqrt()))
            }
            FeatureMap::FileBacked { path, .. } => Err(Error::Usage(format!(
                "precomputed features from {} cannot embed generated samples; use identity or rff features",
                path.display()
            ))),
        }
    }

    /// Features of fixed samples.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let f = self.apply_on_tape(&mut tape, v)?;
        Ok(tape.value(f).clone())
    }

    /// Rows of a precomputed feature file.
    pub fn lookup(&self, indices: &[usize]) -> Result<Tensor> {
        match self {
            FeatureMap::FileBacked { features, .. } => {
                if let Some(&bad) = indices.iter().find(|&&i| i >= features.rows()) {
                    return Err(Error::Usage(format!(
                        "feature index {bad} out of range for {} rows",
                        features.rows()
                    )));
                }
                Ok(crate::diffusion::data::gather_rows(features, indices))
            }
            _ => Err(Error::Usage("only file-backed features are addressed by index".into())),
        }
    }
}
