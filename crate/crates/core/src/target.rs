//! Gaussian-mixture distributions over flattened frame sequences.
//!
//! A target over `F` frames of `d` dims lives in `R^{F*d}`; coordinate
//! `f * d + j` is dim `j` of frame `f`. Covariance blocks `(f, g)` are the
//! `d x d` sub-matrices coupling frames `f` and `g`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RandomSource;
use crate::tensor::FrameTensor;

/// Largest supported flattened dimension.
pub const MAX_DIM: usize = 64;

const EIGEN_MAX_ITER: usize = 10_000;

const WEIGHT_TOL: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Validated Gaussian mixture over `frames * dims_per_frame` coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TargetFile", into = "TargetFile")]
pub struct GaussianTarget {
    frames: usize,
    dims: usize,
    components: Vec<Component>,
    // lower Cholesky factor per component, for sampling
    chol: Vec<DMatrix<f64>>,
}

/// On-disk JSON layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetFile {
    pub frames: usize,
    pub dims_per_frame: usize,
    pub means: Vec<Vec<f64>>,
    /// One row-major covariance per component.
    pub covariances: Vec<Vec<Vec<f64>>>,
    pub weights: Vec<f64>,
}

impl TryFrom<TargetFile> for GaussianTarget {
    type Error = Error;

    fn try_from(file: TargetFile) -> Result<Self> {
        let n = file.frames.checked_mul(file.dims_per_frame).unwrap_or(0);
        if n == 0 || n > MAX_DIM {
            return Err(Error::InvalidTarget(format!(
                "flattened dimension must be in 1..={MAX_DIM}"
            )));
        }
        let k = file.weights.len();
        if k == 0 || file.means.len() != k || file.covariances.len() != k {
            return Err(Error::InvalidTarget(
                "means, covariances and weights must have one entry per component".into(),
            ));
        }
        let mut components = Vec::with_capacity(k);
        for ((w, mean), cov) in file.weights.iter().zip(file.means).zip(file.covariances) {
            if mean.len() != n || cov.len() != n || cov.iter().any(|row| row.len() != n) {
                return Err(Error::InvalidTarget(format!("component must be {n}-dimensional")));
            }
            components.push(Component {
                weight: *w,
                mean: DVector::from_vec(mean),
                cov: DMatrix::from_fn(n, n, |i, j| cov[i][j]),
            });
        }
        GaussianTarget::new(file.frames, file.dims_per_frame, components)
    }
}

impl From<GaussianTarget> for TargetFile {
    fn from(t: GaussianTarget) -> Self {
        let n = t.dim();
        TargetFile {
            frames: t.frames,
            dims_per_frame: t.dims,
            means: t.components.iter().map(|c| c.mean.iter().copied().collect()).collect(),
            covariances: t
                .components
                .iter()
                .map(|c| (0..n).map(|i| c.cov.row(i).iter().copied().collect()).collect())
                .collect(),
            weights: t.components.iter().map(|c| c.weight).collect(),
        }
    }
}

impl GaussianTarget {
    pub fn new(frames: usize, dims: usize, components: Vec<Component>) -> Result<Self> {
        let n = frames.checked_mul(dims).unwrap_or(0);
        if n == 0 || n > MAX_DIM {
            return Err(Error::InvalidTarget(format!(
                "flattened dimension must be in 1..={MAX_DIM}"
            )));
        }
        if components.is_empty() {
            return Err(Error::InvalidTarget("no components".into()));
        }
        let mut total = 0.0;
        for c in &components {
            if !(c.weight.is_finite() && c.weight >= 0.0) {
                return Err(Error::InvalidTarget("weights must be nonnegative".into()));
            }
            total += c.weight;
            if c.mean.len() != n || c.cov.shape() != (n, n) {
                return Err(Error::InvalidTarget(format!("component must be {n}-dimensional")));
            }
            if c.mean.iter().chain(c.cov.iter()).any(|v| !v.is_finite()) {
                return Err(Error::InvalidTarget("non-finite parameter".into()));
            }
            let scale = c.cov.amax().max(1.0);
            if (&c.cov - c.cov.transpose()).amax() > SYMMETRY_TOL * scale {
                return Err(Error::InvalidTarget("covariance is not symmetric".into()));
            }
            let min_eig = SymmetricEigen::try_new(c.cov.clone(), f64::EPSILON, EIGEN_MAX_ITER)
                .map_or(f64::NAN, |e| e.eigenvalues.min());
            if !(min_eig > 0.0) {
                return Err(Error::InvalidTarget(format!(
                    "covariance is not positive definite (min eigenvalue {min_eig:e})"
                )));
            }
        }
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::InvalidTarget(format!("weights sum to {total}, not 1")));
        }
        let chol = components
            .iter()
            .map(|c| {
                c.cov
                    .clone()
                    .cholesky()
                    .map(|ch| ch.l())
                    .ok_or(Error::SingularCovariance)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            frames,
            dims,
            components,
            chol,
        })
    }

    pub fn single(frames: usize, dims: usize, mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        Self::new(frames, dims, vec![Component { weight: 1.0, mean, cov }])
    }

    /// `N(0, I)` over `frames x dims`.
    pub fn standard_normal(frames: usize, dims: usize) -> Result<Self> {
        let n = frames * dims;
        Self::single(frames, dims, DVector::zeros(n), DMatrix::identity(n, n))
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dims_per_frame(&self) -> usize {
        self.dims
    }

    /// Flattened dimension `F * d`.
    pub fn dim(&self) -> usize {
        self.frames * self.dims
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn is_single(&self) -> bool {
        self.components.len() == 1
    }

    /// Overall mean and total covariance (within plus between components).
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.dim();
        let mut mean = DVector::zeros(n);
        for c in &self.components {
            mean += c.weight * &c.mean;
        }
        let mut cov = DMatrix::zeros(n, n);
        for c in &self.components {
            let diff = &c.mean - &mean;
            cov += c.weight * (&c.cov + &diff * diff.transpose());
        }
        (mean, symmetrize(cov))
    }

    /// Mean of frame `f` and the `(f, g)` block of the total covariance.
    pub fn frame_moments(&self, f: usize) -> (DVector<f64>, DMatrix<f64>) {
        let (mean, cov) = self.moments();
        let d = self.dims;
        (
            mean.rows(f * d, d).into_owned(),
            cov.view((f * d, f * d), (d, d)).into_owned(),
        )
    }

    /// `(f, g)` block of the total covariance.
    pub fn cov_block(&self, f: usize, g: usize) -> DMatrix<f64> {
        let (_, cov) = self.moments();
        let d = self.dims;
        cov.view((f * d, g * d), (d, d)).into_owned()
    }

    /// Marginal over frames `start..start + len`. Mixture weights are kept.
    pub fn marginal_frames(&self, start: usize, len: usize) -> Result<GaussianTarget> {
        if len == 0 || start + len > self.frames {
            return Err(Error::InvalidTarget(format!(
                "frame window {start}..{} outside 0..{}",
                start + len,
                self.frames
            )));
        }
        let d = self.dims;
        let (off, m) = (start * d, len * d);
        let components = self
            .components
            .iter()
            .map(|c| Component {
                weight: c.weight,
                mean: c.mean.rows(off, m).into_owned(),
                cov: c.cov.view((off, off), (m, m)).into_owned(),
            })
            .collect();
        GaussianTarget::new(len, d, components)
    }

    /// Replace every component covariance by `f(cov)`. The result is
    /// revalidated.
    pub(crate) fn map_covariances(
        &self,
        mut f: impl FnMut(&DMatrix<f64>) -> DMatrix<f64>,
    ) -> Result<GaussianTarget> {
        let components = self
            .components
            .iter()
            .map(|c| Component {
                weight: c.weight,
                mean: c.mean.clone(),
                cov: f(&c.cov),
            })
            .collect();
        GaussianTarget::new(self.frames, self.dims, components)
    }

    pub fn sample(&self, rng: &mut dyn RandomSource) -> FrameTensor {
        let k = self.pick_component(rng.uniform());
        let n = self.dim();
        let mut z = DVector::zeros(n);
        rng.fill_standard_normal(z.as_mut_slice());
        let x = &self.components[k].mean + &self.chol[k] * z;
        FrameTensor::from_raw(self.frames, self.dims, x.as_slice().to_vec())
    }

    pub fn sample_n(&self, count: usize, rng: &mut dyn RandomSource) -> Vec<FrameTensor> {
        (0..count).map(|_| self.sample(rng)).collect()
    }

    fn pick_component(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (i, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                return i;
            }
        }
        self.components.len() - 1
    }
}

pub(crate) fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}
