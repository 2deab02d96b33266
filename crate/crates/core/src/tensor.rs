//! Frame-sequence state: `frames` rows of `dims` reals, row-major.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RandomSource;

/// Optional annotations carried alongside a tensor. Not part of equality.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub segment: Option<usize>,
    pub timestep: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameTensor {
    frames: usize,
    dims: usize,
    values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<FrameMeta>,
}

impl PartialEq for FrameTensor {
    fn eq(&self, other: &Self) -> bool {
        self.frames == other.frames && self.dims == other.dims && self.values == other.values
    }
}

impl FrameTensor {
    pub fn new(frames: usize, dims: usize, values: Vec<f64>) -> Result<Self> {
        if frames == 0 || dims == 0 {
            return Err(Error::EmptyInput("frame tensor with zero frames or dims"));
        }
        if values.len() != frames * dims {
            return Err(Error::Decode(format!(
                "expected {} values for {frames}x{dims}, got {}",
                frames * dims,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self {
            frames,
            dims,
            values,
            meta: None,
        })
    }

    pub fn zeros(frames: usize, dims: usize) -> Self {
        Self {
            frames,
            dims,
            values: vec![0.0; frames * dims],
            meta: None,
        }
    }

    pub fn filled(frames: usize, dims: usize, value: f64) -> Self {
        Self {
            frames,
            dims,
            values: vec![value; frames * dims],
            meta: None,
        }
    }

    /// I.i.d. standard-normal entries.
    pub fn standard_normal(frames: usize, dims: usize, rng: &mut dyn RandomSource) -> Self {
        let mut t = Self::zeros(frames, dims);
        rng.fill_standard_normal(&mut t.values);
        t
    }

    pub(crate) fn from_raw(frames: usize, dims: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), frames * dims);
        Self {
            frames,
            dims,
            values,
            meta: None,
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.frames, self.dims)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn meta(&self) -> Option<FrameMeta> {
        self.meta
    }

    pub fn with_meta(mut self, meta: FrameMeta) -> Self {
        self.meta = Some(meta);
        self
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.values[i * self.dims..(i + 1) * self.dims]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn ensure_same_shape(&self, other: &FrameTensor) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.shape(),
                found: other.shape(),
            });
        }
        Ok(())
    }

    /// `a * x + b * y`, elementwise.
    pub fn lincomb(a: f64, x: &FrameTensor, b: f64, y: &FrameTensor) -> Result<FrameTensor> {
        x.ensure_same_shape(y)?;
        let values = x
            .values
            .iter()
            .zip(&y.values)
            .map(|(xv, yv)| a * xv + b * yv)
            .collect();
        Ok(Self::from_raw(x.frames, x.dims, values))
    }

    pub fn scaled(&self, a: f64) -> FrameTensor {
        Self::from_raw(
            self.frames,
            self.dims,
            self.values.iter().map(|v| a * v).collect(),
        )
    }

    /// Frames `start..start + len` as a new tensor.
    pub fn select_frames(&self, start: usize, len: usize) -> Result<FrameTensor> {
        if len == 0 || start + len > self.frames {
            return Err(Error::InvalidConfig(format!(
                "frame window {start}..{} outside 0..{}",
                start + len,
                self.frames
            )));
        }
        Ok(Self::from_raw(
            len,
            self.dims,
            self.values[start * self.dims..(start + len) * self.dims].to_vec(),
        ))
    }

    /// Frame-wise concatenation. All parts must share `dims`.
    pub fn concat_frames(parts: &[&FrameTensor]) -> Result<FrameTensor> {
        let first = parts.first().ok_or(Error::EmptyInput("no tensors to concatenate"))?;
        let dims = first.dims;
        let mut values = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        let mut frames = 0;
        for p in parts {
            if p.dims != dims {
                return Err(Error::ShapeMismatch {
                    expected: (p.frames, dims),
                    found: p.shape(),
                });
            }
            values.extend_from_slice(&p.values);
            frames += p.frames;
        }
        Ok(Self::from_raw(frames, dims, values))
    }

    /// Row `i` of the result is row `perm[i]` of `self`.
    pub fn permute_frames(&self, perm: &[usize]) -> Result<FrameTensor> {
        if perm.len() != self.frames {
            return Err(Error::InvalidConfig(format!(
                "permutation of length {} for {} frames",
                perm.len(),
                self.frames
            )));
        }
        let mut seen = vec![false; self.frames];
        let mut values = Vec::with_capacity(self.len());
        for &src in perm {
            if src >= self.frames || std::mem::replace(&mut seen[src], true) {
                return Err(Error::InvalidConfig("not a permutation".into()));
            }
            values.extend_from_slice(self.frame(src));
        }
        Ok(Self::from_raw(self.frames, self.dims, values))
    }

    pub fn squared_distance(&self, other: &FrameTensor) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}
