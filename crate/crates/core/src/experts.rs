//! Closed-form epsilon predictors.
//!
//! An expert is exact for its own bound target: for
//! `x_t = sqrt(abar) x0 + sqrt(1 - abar) eps` with `x0` drawn from the
//! target, it returns `(x_t - sqrt(abar) E[x0 | x_t]) / sqrt(1 - abar)`.
//! Specialization is modeled by binding an expert to a deliberately
//! altered copy of the reference target:
//!
//! * spatial: inter-frame covariance blocks zeroed, per-frame marginals kept;
//! * temporal: inter-frame blocks kept, within-frame blocks pulled toward
//!   their isotropic (trace-preserving) version by a `blur` weight;
//! * control: the mixture collapsed to its moment-matched Gaussian.
//!
//! Specialization thereby becomes a known, measurable bias.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::target::{symmetrize, Component, GaussianTarget};
use crate::tensor::FrameTensor;

/// Eigenvalue floor used when covariance surgery breaks definiteness.
pub const PD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertRole {
    Control,
    Spatial,
    Temporal,
    Exact,
}

impl ExpertRole {
    pub fn as_str(self) -> &'static str {
        match self {
            ExpertRole::Control => "control",
            ExpertRole::Spatial => "spatial",
            ExpertRole::Temporal => "temporal",
            ExpertRole::Exact => "exact",
        }
    }
}

// Component in the eigenbasis of its covariance.
#[derive(Debug, Clone)]
struct EigenComponent {
    log_weight: f64,
    mean: DVector<f64>,
    basis: DMatrix<f64>,
    basis_t: DMatrix<f64>,
    eigenvalues: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct ExpertSpec {
    role: ExpertRole,
    schedule: NoiseSchedule,
    target: GaussianTarget,
    label: String,
    eigen: Vec<EigenComponent>,
}

/// Posterior quantities at one evaluation.
#[derive(Debug, Clone)]
pub struct Posterior {
    pub mean: FrameTensor,
    pub responsibilities: Vec<f64>,
}

impl ExpertSpec {
    pub fn new(
        role: ExpertRole,
        schedule: NoiseSchedule,
        target: GaussianTarget,
        label: impl Into<String>,
    ) -> Self {
        let eigen = target
            .components()
            .iter()
            .map(|c| {
                let eig = SymmetricEigen::new(c.cov.clone());
                let basis_t = eig.eigenvectors.transpose();
                EigenComponent {
                    log_weight: c.weight.ln(),
                    mean: c.mean.clone(),
                    basis: eig.eigenvectors,
                    basis_t,
                    eigenvalues: eig.eigenvalues,
                }
            })
            .collect();
        Self {
            role,
            schedule,
            target,
            label: label.into(),
            eigen,
        }
    }

    /// Expert exact for `reference` itself.
    pub fn exact(reference: &GaussianTarget, schedule: NoiseSchedule) -> Self {
        let label = format!("exact@{}", schedule.id());
        Self::new(ExpertRole::Exact, schedule, reference.clone(), label)
    }

    pub fn role(&self) -> ExpertRole {
        self.role
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn target(&self) -> &GaussianTarget {
        &self.target
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    /// Same expert over frames `start..start + len` of its target.
    pub fn restrict_frames(&self, start: usize, len: usize) -> Result<ExpertSpec> {
        let target = self.target.marginal_frames(start, len)?;
        Ok(Self::new(self.role, self.schedule.clone(), target, self.label.clone()))
    }

    /// Exact posterior mean `E[x0 | x_t]` and mixture responsibilities.
    pub fn posterior(&self, x_t: &FrameTensor, t: usize) -> Result<Posterior> {
        self.schedule.check_step(t)?;
        let (frames, dims) = (self.target.frames(), self.target.dims_per_frame());
        if x_t.shape() != (frames, dims) {
            return Err(Error::ShapeMismatch {
                expected: (frames, dims),
                found: x_t.shape(),
            });
        }
        let ab = self.schedule.alpha_bar(t)?;
        let (a, s2) = (ab.sqrt(), 1.0 - ab);
        let x = DVector::from_column_slice(x_t.values());

        let mut log_liks = Vec::with_capacity(self.eigen.len());
        let mut means = Vec::with_capacity(self.eigen.len());
        for c in &self.eigen {
            let q = &c.basis_t * (&x - a * &c.mean);
            let mut log_lik = c.log_weight;
            let mut gain = DVector::zeros(q.len());
            for i in 0..q.len() {
                let lam = c.eigenvalues[i];
                // eigenvalue of abar * Sigma + (1 - abar) * I
                let denom = ab * lam + s2;
                if !(denom > 0.0) {
                    return Err(Error::SingularCovariance);
                }
                log_lik -= 0.5 * (denom.ln() + q[i] * q[i] / denom);
                gain[i] = a * lam / denom * q[i];
            }
            log_liks.push(log_lik);
            means.push(&c.mean + &c.basis * gain);
        }

        let responsibilities = softmax(&log_liks);
        let mut mean = DVector::zeros(x.len());
        for (r, m) in responsibilities.iter().zip(&means) {
            mean.axpy(*r, m, 1.0);
        }
        Ok(Posterior {
            mean: FrameTensor::from_raw(frames, dims, mean.as_slice().to_vec()),
            responsibilities,
        })
    }

    /// Predicted noise at `(x_t, t)` under this expert's own schedule.
    pub fn exact_epsilon(&self, x_t: &FrameTensor, t: usize) -> Result<FrameTensor> {
        let post = self.posterior(x_t, t)?;
        let ab = self.schedule.alpha_bar(t)?;
        let inv_s = 1.0 / (1.0 - ab).sqrt();
        FrameTensor::lincomb(inv_s, x_t, -ab.sqrt() * inv_s, &post.mean)
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Symmetrize and floor eigenvalues at [`PD_FLOOR`].
pub fn repair_pd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = symmetrize(m.clone());
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.min() >= PD_FLOOR {
        return sym;
    }
    let floored = eig.eigenvalues.map(|l| l.max(PD_FLOOR));
    symmetrize(&eig.eigenvectors * DMatrix::from_diagonal(&floored) * eig.eigenvectors.transpose())
}

/// Keep within-frame blocks, zero every inter-frame block.
pub fn make_spatial_expert(reference: &GaussianTarget, schedule: NoiseSchedule) -> Result<ExpertSpec> {
    let d = reference.dims_per_frame();
    let target = reference.map_covariances(|cov| {
        DMatrix::from_fn(cov.nrows(), cov.ncols(), |i, j| {
            if i / d == j / d {
                cov[(i, j)]
            } else {
                0.0
            }
        })
    })?;
    let label = format!("spatial@{}", schedule.id());
    Ok(ExpertSpec::new(ExpertRole::Spatial, schedule, target, label))
}

/// Keep inter-frame blocks; replace each within-frame block `B` by
/// `(1 - blur) B + blur tr(B) / d I`.
pub fn make_temporal_expert(
    reference: &GaussianTarget,
    schedule: NoiseSchedule,
    blur: f64,
) -> Result<ExpertSpec> {
    if !(0.0..=1.0).contains(&blur) {
        return Err(Error::InvalidConfig(format!("blur must be in [0, 1], got {blur}")));
    }
    let d = reference.dims_per_frame();
    let frames = reference.frames();
    let target = reference.map_covariances(|cov| {
        let mut out = cov.clone();
        for f in 0..frames {
            let block = cov.view((f * d, f * d), (d, d));
            let iso = block.trace() / d as f64;
            for i in 0..d {
                for j in 0..d {
                    let eye = if i == j { iso } else { 0.0 };
                    out[(f * d + i, f * d + j)] = (1.0 - blur) * block[(i, j)] + blur * eye;
                }
            }
        }
        repair_pd(&out)
    })?;
    let label = format!("temporal@{}", schedule.id());
    Ok(ExpertSpec::new(ExpertRole::Temporal, schedule, target, label))
}

/// Single Gaussian with the reference mixture's overall mean and covariance.
pub fn make_control_expert(reference: &GaussianTarget, schedule: NoiseSchedule) -> Result<ExpertSpec> {
    let (mean, cov) = reference.moments();
    let target = GaussianTarget::new(
        reference.frames(),
        reference.dims_per_frame(),
        vec![Component {
            weight: 1.0,
            mean,
            cov: repair_pd(&cov),
        }],
    )?;
    let label = format!("control@{}", schedule.id());
    Ok(ExpertSpec::new(ExpertRole::Control, schedule, target, label))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{RandomSource, SeededSource};
    use crate::schedule::forward_diffuse;

    fn half_schedule() -> NoiseSchedule {
        // abar_2 = 0.25
        NoiseSchedule::linear("half", 0.5, 0.5, 2).unwrap()
    }

    fn correlated(frames: usize, dims: usize, seed: u64) -> GaussianTarget {
        let n = frames * dims;
        let mut rng = SeededSource::new(seed);
        let a = DMatrix::from_fn(n, n, |_, _| rng.standard_normal());
        let cov = &a * a.transpose() / n as f64 + DMatrix::identity(n, n) * 0.1;
        let mean = DVector::from_fn(n, |_, _| rng.standard_normal());
        GaussianTarget::single(frames, dims, mean, symmetrize(cov)).unwrap()
    }

    #[test]
    fn standard_normal_target_closed_form() {
        let target = GaussianTarget::standard_normal(1, 1).unwrap();
        let e = ExpertSpec::exact(&target, half_schedule());
        let x = FrameTensor::new(1, 1, vec![2.0]).unwrap();
        let eps = e.exact_epsilon(&x, 2).unwrap();
        // sqrt(1 - 0.25) * 2
        assert!((eps.values()[0] - 1.732_050_807_568_877_2).abs() < 1e-12);
    }

    #[test]
    fn closed_form_agrees_with_binned_monte_carlo() {
        // E[eps | x_t ~= 2] estimated from joint draws of (x0, eps).
        let mut rng = SeededSource::new(99);
        let (a, s) = (0.5f64, 0.75f64.sqrt());
        let (mut sum, mut count) = (0.0, 0usize);
        for _ in 0..1_000_000 {
            let x0 = rng.standard_normal();
            let eps = rng.standard_normal();
            let xt = a * x0 + s * eps;
            if (xt - 2.0).abs() < 0.02 {
                sum += eps;
                count += 1;
            }
        }
        let mc = sum / count as f64;
        // conditional sd of eps is 0.5; allow 4 sigma plus bin width
        let band = 4.0 * 0.5 / (count as f64).sqrt() + 0.02;
        assert!((mc - 1.732_050_8).abs() < band, "mc={mc} count={count}");
    }

    #[test]
    fn point_mass_recovers_injected_noise() {
        let schedule = NoiseSchedule::standard("std");
        let n = 6;
        let mean = DVector::from_fn(n, |i, _| i as f64 * 0.3 - 0.5);
        let target = GaussianTarget::single(3, 2, mean.clone(), DMatrix::identity(n, n) * 1e-12).unwrap();
        let e = ExpertSpec::exact(&target, schedule.clone());
        let mut rng = SeededSource::new(1);
        let mu = FrameTensor::new(3, 2, mean.as_slice().to_vec()).unwrap();
        for t in [10, 300, 900] {
            let noise = FrameTensor::standard_normal(3, 2, &mut rng);
            let xt = forward_diffuse(&mu, t, &schedule, &noise).unwrap();
            let eps = e.exact_epsilon(&xt, t).unwrap();
            let err = eps.squared_distance(&noise).unwrap().sqrt();
            assert!(err < 1e-3, "t={t} err={err}");
        }
    }

    #[test]
    fn symmetric_mixture_at_origin() {
        let n = 2;
        let mu = DVector::from_vec(vec![1.5, -0.5]);
        let target = GaussianTarget::new(
            1,
            2,
            vec![
                Component { weight: 0.5, mean: mu.clone(), cov: DMatrix::identity(n, n) },
                Component { weight: 0.5, mean: -mu, cov: DMatrix::identity(n, n) },
            ],
        )
        .unwrap();
        let e = ExpertSpec::exact(&target, NoiseSchedule::standard("std"));
        let eps = e.exact_epsilon(&FrameTensor::zeros(1, 2), 400).unwrap();
        assert!(eps.norm() < 1e-14);
    }

    #[test]
    fn posterior_mean_matches_direct_solve() {
        // Oracle: mu + a Sigma (abar Sigma + (1 - abar) I)^{-1} (x - a mu) by LU.
        let target = correlated(3, 2, 4);
        let schedule = NoiseSchedule::standard("std");
        let e = ExpertSpec::exact(&target, schedule.clone());
        let c = &target.components()[0];
        let mut rng = SeededSource::new(8);
        for t in [1, 50, 400, 1000] {
            let x = FrameTensor::standard_normal(3, 2, &mut rng);
            let ab = schedule.alpha_bar(t).unwrap();
            let a = ab.sqrt();
            let n = target.dim();
            let m = &c.cov * ab + DMatrix::identity(n, n) * (1.0 - ab);
            let xv = DVector::from_column_slice(x.values());
            let rhs = &xv - a * &c.mean;
            let direct = &c.mean + a * &c.cov * m.lu().solve(&rhs).unwrap();
            // Tweedie: recover E[x0|x_t] from eps via the x0-prediction formula
            let eps = e.exact_epsilon(&x, t).unwrap();
            let from_eps: Vec<f64> = x
                .values()
                .iter()
                .zip(eps.values())
                .map(|(xv, ev)| (xv - (1.0 - ab).sqrt() * ev) / a)
                .collect();
            for (u, v) in from_eps.iter().zip(direct.iter()) {
                assert!((u - v).abs() < 1e-10 * (1.0 + v.abs()), "t={t}: {u} vs {v}");
            }
        }
    }

    #[test]
    fn mixture_responsibilities_sum_to_one() {
        let a = correlated(2, 2, 10);
        let b = correlated(2, 2, 11);
        let target = GaussianTarget::new(
            2,
            2,
            vec![
                Component { weight: 0.3, ..a.components()[0].clone() },
                Component { weight: 0.7, ..b.components()[0].clone() },
            ],
        )
        .unwrap();
        let e = ExpertSpec::exact(&target, NoiseSchedule::standard("std"));
        let mut rng = SeededSource::new(2);
        for t in [1, 20, 500, 1000] {
            let x = FrameTensor::standard_normal(2, 2, &mut rng).scaled(5.0);
            let p = e.posterior(&x, t).unwrap();
            assert!((p.responsibilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_timestep_and_shape() {
        let target = GaussianTarget::standard_normal(2, 1).unwrap();
        let e = ExpertSpec::exact(&target, half_schedule());
        let x = FrameTensor::zeros(2, 1);
        assert!(matches!(e.exact_epsilon(&x, 0), Err(Error::TimestepOutOfRange { .. })));
        assert!(matches!(e.exact_epsilon(&x, 3), Err(Error::TimestepOutOfRange { .. })));
        assert!(matches!(
            e.exact_epsilon(&FrameTensor::zeros(1, 2), 1),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn spatial_expert_zeroes_inter_frame_blocks() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.9, 0.9, 1.0]);
        let reference = GaussianTarget::single(2, 1, DVector::zeros(2), cov).unwrap();
        let e = make_spatial_expert(&reference, NoiseSchedule::standard("s")).unwrap();
        assert_eq!(e.target().components()[0].cov, DMatrix::identity(2, 2));
        assert_eq!(e.role(), ExpertRole::Spatial);

        // fixed point on already block-diagonal references
        let diag = GaussianTarget::standard_normal(2, 2).unwrap();
        let e = make_spatial_expert(&diag, NoiseSchedule::standard("s")).unwrap();
        assert_eq!(e.target(), &diag);
    }

    #[test]
    fn spatial_expert_preserves_frame_marginals() {
        let reference = correlated(4, 2, 21);
        let e = make_spatial_expert(&reference, NoiseSchedule::standard("s")).unwrap();
        for f in 0..4 {
            let (m_ref, c_ref) = reference.frame_moments(f);
            let (m, c) = e.target().frame_moments(f);
            assert!((m_ref - m).amax() < 1e-15);
            assert!((c_ref - c).amax() < 1e-15);
        }
    }

    #[test]
    fn temporal_expert_isotropizes_within_frame_blocks() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.5]);
        let reference = GaussianTarget::single(1, 2, DVector::zeros(2), cov).unwrap();
        let e = make_temporal_expert(&reference, NoiseSchedule::standard("t"), 1.0).unwrap();
        let got = &e.target().components()[0].cov;
        assert!((got - DMatrix::identity(2, 2) * 1.25).amax() < 1e-15);

        let identity = make_temporal_expert(&reference, NoiseSchedule::standard("t"), 0.0).unwrap();
        assert_eq!(identity.target(), &reference);
        assert!(make_temporal_expert(&reference, NoiseSchedule::standard("t"), 1.5).is_err());
        assert!(make_temporal_expert(&reference, NoiseSchedule::standard("t"), -0.1).is_err());
    }

    #[test]
    fn temporal_expert_keeps_inter_frame_blocks() {
        let reference = correlated(3, 2, 17);
        let e = make_temporal_expert(&reference, NoiseSchedule::standard("t"), 0.5).unwrap();
        for f in 0..3 {
            for g in 0..3 {
                if f == g {
                    continue;
                }
                let diff = reference.cov_block(f, g) - e.target().cov_block(f, g);
                assert!(diff.amax() < 1e-12, "block ({f},{g})");
            }
        }
        // correlation coefficients change only through the new marginal variances
        let (_, c_ref) = reference.moments();
        let (_, c_new) = e.target().moments();
        for i in 0..6 {
            for j in 0..6 {
                if i / 2 == j / 2 {
                    continue;
                }
                let rho_ref = c_ref[(i, j)] / (c_ref[(i, i)] * c_ref[(j, j)]).sqrt();
                let renorm = rho_ref * (c_ref[(i, i)] * c_ref[(j, j)]).sqrt()
                    / (c_new[(i, i)] * c_new[(j, j)]).sqrt();
                let rho_new = c_new[(i, j)] / (c_new[(i, i)] * c_new[(j, j)]).sqrt();
                assert!((renorm - rho_new).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn control_expert_moment_matches() {
        let n = 3;
        let mut e0 = DVector::zeros(n);
        e0[0] = 1.0;
        let reference = GaussianTarget::new(
            1,
            3,
            vec![
                Component { weight: 0.5, mean: e0.clone(), cov: DMatrix::identity(n, n) },
                Component { weight: 0.5, mean: -e0, cov: DMatrix::identity(n, n) },
            ],
        )
        .unwrap();
        let e = make_control_expert(&reference, NoiseSchedule::standard("c")).unwrap();
        let c = &e.target().components()[0];
        assert!(e.target().is_single());
        assert!(c.mean.amax() < 1e-15);
        let mut want = DMatrix::identity(n, n);
        want[(0, 0)] = 2.0;
        assert!((&c.cov - want).amax() < 1e-15);

        let single = correlated(2, 2, 3);
        let e = make_control_expert(&single, NoiseSchedule::standard("c")).unwrap();
        assert!((&e.target().components()[0].cov - &single.components()[0].cov).amax() < 1e-12);
    }

    #[test]
    fn control_expert_matches_mixture_sample_moments() {
        let a = correlated(2, 2, 30);
        let b = correlated(2, 2, 31);
        let reference = GaussianTarget::new(
            2,
            2,
            vec![
                Component { weight: 0.25, ..a.components()[0].clone() },
                Component { weight: 0.75, ..b.components()[0].clone() },
            ],
        )
        .unwrap();
        let e = make_control_expert(&reference, NoiseSchedule::standard("c")).unwrap();
        let matched = &e.target().components()[0];
        let mut rng = SeededSource::new(77);
        let n = 1_000_000;
        let d = reference.dim();
        let mut mean = DVector::zeros(d);
        let mut second = DMatrix::zeros(d, d);
        for _ in 0..n {
            let x = DVector::from_vec(reference.sample(&mut rng).into_values());
            mean += &x;
            second += &x * x.transpose();
        }
        mean /= n as f64;
        let cov = second / n as f64 - &mean * mean.transpose();
        for i in 0..d {
            let sd = matched.cov[(i, i)].sqrt();
            assert!((mean[i] - matched.mean[i]).abs() < 4.0 * sd / (n as f64).sqrt());
            for j in 0..d {
                // var of a product moment is at most ~ 3 var_i var_j
                let band = 4.0 * (3.0 * matched.cov[(i, i)] * matched.cov[(j, j)] / n as f64).sqrt();
                assert!((cov[(i, j)] - matched.cov[(i, j)]).abs() < band, "({i},{j})");
            }
        }
    }

    #[test]
    fn restricted_expert_uses_marginal_target() {
        let reference = correlated(4, 1, 9);
        let e = ExpertSpec::exact(&reference, NoiseSchedule::standard("s"));
        let r = e.restrict_frames(2, 2).unwrap();
        assert_eq!(r.target().frames(), 2);
        assert_eq!(r.target(), &reference.marginal_frames(2, 2).unwrap());
    }

    #[test]
    fn repair_floors_negative_eigenvalues() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let r = repair_pd(&m);
        let min = SymmetricEigen::new(r).eigenvalues.min();
        assert!((min - PD_FLOOR).abs() < 1e-12);
    }
}
