//! Moment- and projection-based quality measures against a known target.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RandomSource;
use crate::target::GaussianTarget;
use crate::tensor::FrameTensor;

/// Below this mean squared interior step a video counts as constant.
pub const JUMP_FLOOR: f64 = 1e-12;

fn check_sets(a: &[FrameTensor], b: &[FrameTensor]) -> Result<usize> {
    let first = a.first().ok_or(Error::EmptyInput("samples_a"))?;
    if b.is_empty() {
        return Err(Error::EmptyInput("samples_b"));
    }
    let dim = first.len();
    for s in a.iter().chain(b) {
        if s.len() != dim {
            return Err(Error::ShapeMismatch {
                expected: first.shape(),
                found: s.shape(),
            });
        }
    }
    Ok(dim)
}

/// Unit directions drawn uniformly from the sphere.
pub fn random_directions(dim: usize, count: usize, rng: &mut dyn RandomSource) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.standard_normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

/// Squared 1-D Wasserstein-2 distance between empirical samples, pairing
/// sorted values and truncating to the smaller count.
pub fn w2_squared_1d(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let n = a.len().min(b.len());
    if n == 0 {
        return 0.0;
    }
    // Truncation keeps the central order statistics of the larger set.
    let (oa, ob) = ((a.len() - n) / 2, (b.len() - n) / 2);
    (0..n).map(|i| (a[oa + i] - b[ob + i]).powi(2)).sum::<f64>() / n as f64
}

pub fn sliced_w2(
    samples_a: &[FrameTensor],
    samples_b: &[FrameTensor],
    n_projections: usize,
    rng: &mut dyn RandomSource,
) -> Result<f64> {
    let dim = check_sets(samples_a, samples_b)?;
    if n_projections == 0 {
        return Err(Error::InvalidConfig("n_projections must be >= 1".into()));
    }
    let dirs = random_directions(dim, n_projections, rng);
    sliced_w2_along(samples_a, samples_b, &dirs)
}

/// Sliced W2 over explicit projection directions.
pub fn sliced_w2_along(samples_a: &[FrameTensor], samples_b: &[FrameTensor], directions: &[Vec<f64>]) -> Result<f64> {
    let dim = check_sets(samples_a, samples_b)?;
    if directions.is_empty() {
        return Err(Error::EmptyInput("directions"));
    }
    let project = |set: &[FrameTensor], d: &[f64]| -> Vec<f64> {
        set.iter()
            .map(|s| s.values().iter().zip(d).map(|(x, w)| x * w).sum())
            .collect()
    };
    let mut total = 0.0;
    for d in directions {
        if d.len() != dim {
            return Err(Error::ShapeMismatch {
                expected: (1, dim),
                found: (1, d.len()),
            });
        }
        total += w2_squared_1d(project(samples_a, d), project(samples_b, d));
    }
    Ok(total / directions.len() as f64)
}

/// Largest sliced W2 among `repetitions` pairs of independent sample sets of
/// size `n` drawn from `target`.
pub fn null_threshold(
    target: &GaussianTarget,
    n: usize,
    n_projections: usize,
    repetitions: usize,
    rng: &mut dyn RandomSource,
) -> Result<f64> {
    if repetitions == 0 || n == 0 {
        return Err(Error::EmptyInput("null repetitions"));
    }
    let mut worst = 0.0f64;
    for _ in 0..repetitions {
        let a = target.sample_n(n, rng);
        let b = target.sample_n(n, rng);
        worst = worst.max(sliced_w2(&a, &b, n_projections, rng)?);
    }
    Ok(worst)
}

fn check_samples(samples: &[FrameTensor], target: &GaussianTarget) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("samples"));
    }
    let expected = (target.frames(), target.dims_per_frame());
    for s in samples {
        if s.shape() != expected {
            return Err(Error::ShapeMismatch { expected, found: s.shape() });
        }
    }
    Ok(())
}

/// Empirical mean and covariance (normalized by the sample count).
pub fn empirical_moments(samples: &[FrameTensor]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let first = samples.first().ok_or(Error::EmptyInput("samples"))?;
    let dim = first.len();
    let n = samples.len() as f64;
    let mut mean = DVector::zeros(dim);
    for s in samples {
        if s.len() != dim {
            return Err(Error::ShapeMismatch {
                expected: first.shape(),
                found: s.shape(),
            });
        }
        mean += DVector::from_column_slice(s.values());
    }
    mean /= n;
    let mut cov = DMatrix::zeros(dim, dim);
    for s in samples {
        let c = DVector::from_column_slice(s.values()) - &mean;
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov /= n;
    Ok((mean, cov))
}

/// Mean over frames of `|mean_f - mu_f| + |cov_f - Sigma_f|_F`.
pub fn spatial_fidelity_err(samples: &[FrameTensor], target: &GaussianTarget) -> Result<f64> {
    check_samples(samples, target)?;
    let (mean, cov) = empirical_moments(samples)?;
    let d = target.dims_per_frame();
    let mut total = 0.0;
    for f in 0..target.frames() {
        let (mu, sigma) = target.frame_moments(f);
        let m = mean.rows(f * d, d);
        let c = cov.view((f * d, f * d), (d, d));
        total += (m - mu).norm() + (c - sigma).norm();
    }
    Ok(total / target.frames() as f64)
}

/// Frobenius distance between the stacked empirical and target covariance
/// blocks of adjacent frame pairs. Zero for single-frame targets.
pub fn temporal_consistency_err(samples: &[FrameTensor], target: &GaussianTarget) -> Result<f64> {
    check_samples(samples, target)?;
    if target.frames() < 2 {
        return Ok(0.0);
    }
    let (_, cov) = empirical_moments(samples)?;
    let d = target.dims_per_frame();
    let mut sq = 0.0;
    for f in 0..target.frames() - 1 {
        let c = cov.view((f * d, (f + 1) * d), (d, d));
        sq += (c - target.cov_block(f, f + 1)).norm_squared();
    }
    Ok(sq.sqrt())
}

fn frame_step_sq(video: &FrameTensor, f: usize) -> f64 {
    video
        .frame(f)
        .iter()
        .zip(video.frame(f + 1))
        .map(|(a, b)| (a - b).powi(2))
        .sum()
}

fn check_segments(video: &FrameTensor, segment_len: usize) -> Result<usize> {
    if segment_len < 2 || !video.frames().is_multiple_of(segment_len) {
        return Err(Error::InvalidConfig(format!(
            "{} frames do not split into segments of {segment_len}",
            video.frames()
        )));
    }
    let n = video.frames() / segment_len;
    if n < 2 {
        return Err(Error::InvalidConfig("a single segment has no junctions".into()));
    }
    Ok(n)
}

/// Mean squared step across segment junctions over the mean squared step
/// inside segments. A constant video scores 1.
pub fn junction_jump(video: &FrameTensor, segment_len: usize) -> Result<f64> {
    let n = check_segments(video, segment_len)?;
    let (mut junction, mut interior) = (0.0, 0.0);
    let mut interior_count = 0usize;
    for f in 0..video.frames() - 1 {
        let step = frame_step_sq(video, f);
        if (f + 1) % segment_len == 0 {
            junction += step;
        } else {
            interior += step;
            interior_count += 1;
        }
    }
    let junction = junction / (n - 1) as f64;
    let interior = interior / interior_count as f64;
    if interior < JUMP_FLOOR {
        return Ok(1.0);
    }
    Ok(junction / interior)
}

/// Pearson correlation between the last frame of each segment and the first
/// frame of the next, pooled over videos, junctions and coordinates.
pub fn junction_correlation(videos: &[FrameTensor], segment_len: usize) -> Result<f64> {
    let first = videos.first().ok_or(Error::EmptyInput("videos"))?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for v in videos {
        v.ensure_same_shape(first)?;
        let n = check_segments(v, segment_len)?;
        for k in 1..n {
            xs.extend_from_slice(v.frame(k * segment_len - 1));
            ys.extend_from_slice(v.frame(k * segment_len));
        }
    }
    Ok(pearson(&xs, &ys))
}

/// Pearson correlation; 0 when either input is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len());
    if n == 0 {
        return 0.0;
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (a, b) = (x[i] - mx, y[i] - my);
        sxy += a * b;
        sxx += a * a;
        syy += b * b;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Ranks starting at 1; ties share their average rank.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch {
            expected: (x.len(), 1),
            found: (y.len(), 1),
        });
    }
    if x.len() < 2 {
        return Err(Error::EmptyInput("rank correlation needs two points"));
    }
    Ok(pearson(&ranks(x), &ranks(y)))
}

pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("median"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Mean and sample standard deviation.
pub fn mean_sd(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::EmptyInput("mean"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sliced_w2: f64,
    pub spatial_fidelity_err: f64,
    pub temporal_consistency_err: f64,
    pub junction_jump: Option<f64>,
    pub n_samples: usize,
    pub n_projections: usize,
    pub seed: u64,
}

impl MetricReport {
    /// Column order of [`MetricReport::csv_row`].
    pub const CSV_HEADER: &'static str =
        "sliced_w2,spatial_fidelity_err,temporal_consistency_err,junction_jump,n_samples,n_projections,seed";

    /// Sliced W2 against an equally sized fresh draw from `target`, plus the
    /// moment errors. Projections and the reference draw come from `rng`.
    pub fn evaluate(
        samples: &[FrameTensor],
        target: &GaussianTarget,
        n_projections: usize,
        seed: u64,
        rng: &mut dyn RandomSource,
    ) -> Result<Self> {
        check_samples(samples, target)?;
        let reference = target.sample_n(samples.len(), rng);
        let report = Self {
            sliced_w2: sliced_w2(samples, &reference, n_projections, rng)?,
            spatial_fidelity_err: spatial_fidelity_err(samples, target)?,
            temporal_consistency_err: temporal_consistency_err(samples, target)?,
            junction_jump: None,
            n_samples: samples.len(),
            n_projections,
            seed,
        };
        report.check()?;
        Ok(report)
    }

    pub fn check(&self) -> Result<()> {
        let values = [
            self.sliced_w2,
            self.spatial_fidelity_err,
            self.temporal_consistency_err,
            self.junction_jump.unwrap_or(0.0),
        ];
        if values.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(Error::NonFinite)
        }
    }

    /// One row in [`MetricReport::CSV_HEADER`] order; a missing junction
    /// jump is an empty cell.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.sliced_w2,
            self.spatial_fidelity_err,
            self.temporal_consistency_err,
            self.junction_jump.map(|v| v.to_string()).unwrap_or_default(),
            self.n_samples,
            self.n_projections,
            self.seed
        )
    }

    pub fn from_csv_row(row: &str) -> Result<Self> {
        let cells: Vec<&str> = row.trim_end_matches(['\r', '\n']).split(',').collect();
        if cells.len() != 7 {
            return Err(Error::Decode(format!("expected 7 cells, found {}", cells.len())));
        }
        let real = |s: &str| s.trim().parse::<f64>().map_err(|e| Error::Decode(format!("{s:?}: {e}")));
        let int = |s: &str| s.trim().parse::<u64>().map_err(|e| Error::Decode(format!("{s:?}: {e}")));
        let report = Self {
            sliced_w2: real(cells[0])?,
            spatial_fidelity_err: real(cells[1])?,
            temporal_consistency_err: real(cells[2])?,
            junction_jump: if cells[3].trim().is_empty() { None } else { Some(real(cells[3])?) },
            n_samples: int(cells[4])? as usize,
            n_projections: int(cells[5])? as usize,
            seed: int(cells[6])?,
        };
        report.check().map_err(|_| Error::Decode("metric out of range".into()))?;
        Ok(report)
    }
}
