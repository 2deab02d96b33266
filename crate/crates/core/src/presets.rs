//! Named reference targets shipped as JSON data files.
//!
//! Each file under `presets/` is generated by the matching function here; a
//! test keeps the two in sync (set `EXPERT_CHAIN_WRITE_PRESETS=1` to rewrite
//! the files).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::target::{Component, GaussianTarget};

pub const PRESET_IDS: [&str; 4] = ["moving-blob-2f", "two-mode-8f", "biased-4f", "long-16f"];

fn embedded(id: &str) -> Option<&'static str> {
    Some(match id {
        "moving-blob-2f" => include_str!("../presets/moving-blob-2f.json"),
        "two-mode-8f" => include_str!("../presets/two-mode-8f.json"),
        "biased-4f" => include_str!("../presets/biased-4f.json"),
        "long-16f" => include_str!("../presets/long-16f.json"),
        _ => return None,
    })
}

/// Loads a preset from its shipped data file.
pub fn preset(id: &str) -> Result<GaussianTarget> {
    let text = embedded(id).ok_or_else(|| Error::UnknownPreset(id.to_string()))?;
    Ok(serde_json::from_str(text)?)
}

/// Builds a preset from its parametric definition.
pub fn generate(id: &str) -> Result<GaussianTarget> {
    match id {
        "moving-blob-2f" => moving_blob(),
        "two-mode-8f" => two_mode(),
        "biased-4f" => biased(),
        "long-16f" => long(),
        _ => Err(Error::UnknownPreset(id.to_string())),
    }
}

fn symmetric(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Covariance `R (x) S` of frames with temporal correlation `R` and
/// within-frame covariance `S`.
fn kronecker(r: &DMatrix<f64>, s: &DMatrix<f64>) -> DMatrix<f64> {
    symmetric(r.kronecker(s))
}

fn ar1(frames: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(frames, frames, |i, j| rho.powi((i as i32 - j as i32).abs()))
}

/// A smooth bump over four pixels that shifts by one pixel between frames.
fn moving_blob() -> Result<GaussianTarget> {
    let d = 4;
    let k = DMatrix::from_fn(d, d, |i, j| {
        let gap = i as f64 - j as f64;
        (-gap * gap / 2.0).exp() + if i == j { 0.05 } else { 0.0 }
    });
    let shift = DMatrix::from_fn(d, d, |i, j| if j == (i + d - 1) % d { 1.0 } else { 0.0 });
    let c = 0.9;
    let second = symmetric(&shift * &k * shift.transpose() * (c * c) + &k * (1.0 - c * c));
    let cross = &shift * &k * c;
    let mut cov = DMatrix::zeros(2 * d, 2 * d);
    cov.view_mut((0, 0), (d, d)).copy_from(&k);
    cov.view_mut((d, d), (d, d)).copy_from(&second);
    cov.view_mut((d, 0), (d, d)).copy_from(&cross);
    cov.view_mut((0, d), (d, d)).copy_from(&cross.transpose());
    let bump = DVector::from_fn(d, |i, _| 2.0 * (-(i as f64 - 1.0).powi(2) / 2.0).exp());
    let mut mean = DVector::zeros(2 * d);
    mean.rows_mut(0, d).copy_from(&bump);
    mean.rows_mut(d, d).copy_from(&(&shift * &bump));
    GaussianTarget::single(2, d, mean, symmetric(cov))
}

/// Two equally likely trajectories moving in opposite directions.
fn two_mode() -> Result<GaussianTarget> {
    let (frames, d) = (8, 2);
    let s = DMatrix::from_diagonal(&DVector::from_vec(vec![0.25, 0.0625]));
    let cov = kronecker(&ar1(frames, 0.8), &s);
    let component = |sign: f64| {
        let mean = DVector::from_fn(frames * d, |i, _| {
            let f = (i / d) as f64;
            match i % d {
                0 => sign * 1.5 * (2.0 * f / (frames - 1) as f64 - 1.0),
                _ => 0.5 * sign,
            }
        });
        Component {
            weight: 0.5,
            mean,
            cov: cov.clone(),
        }
    };
    GaussianTarget::new(frames, d, vec![component(1.0), component(-1.0)])
}

/// Strong temporal correlation and anisotropic, rotated frames, so that
/// dropping either structure is measurable.
fn biased() -> Result<GaussianTarget> {
    let (frames, d) = (4, 4);
    let q = DMatrix::from_fn(d, d, |i, j| ((i * 7 + j * 3) as f64).sin()).qr().q();
    let spectrum = DMatrix::from_diagonal(&DVector::from_fn(d, |i, _| 4f64.powf(1.0 - i as f64)));
    let s = symmetric(&q * spectrum * q.transpose());
    GaussianTarget::single(frames, d, DVector::zeros(frames * d), kronecker(&ar1(frames, 0.9), &s))
}

/// Content shared by every frame plus a slowly varying part.
fn long() -> Result<GaussianTarget> {
    let (frames, d) = (16, 2);
    let (shared, varying, rho): (f64, f64, f64) = (4.0, 1.0, 0.98);
    let r = DMatrix::from_fn(frames, frames, |i, j| shared + varying * rho.powi((i as i32 - j as i32).abs()));
    let s = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.5]));
    GaussianTarget::single(frames, d, DVector::zeros(frames * d), kronecker(&r, &s))
}
