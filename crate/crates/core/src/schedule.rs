//! Noise schedules, the forward process and timestep grids.
//!
//! Timesteps are 1-based; `alpha_bar(0)` is defined as 1 so that the final
//! reverse step lands exactly on clean data.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RandomSource;
use crate::tensor::FrameTensor;

/// Longest accepted schedule.
pub const MAX_TOTAL_STEPS: usize = 100_000;

/// Serialized form of a schedule. Alpha tables are always recomputed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub schedule_id: String,
    pub beta_start: f64,
    pub beta_end: f64,
    pub total_steps: usize,
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(
            self.schedule_id.clone(),
            self.beta_start,
            self.beta_end,
            self.total_steps,
        )
    }
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            schedule_id: "linear".into(),
            beta_start: 1e-4,
            beta_end: 0.02,
            total_steps: 1000,
        }
    }
}

/// Linear-beta DDPM schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleSpec", into = "ScheduleSpec")]
pub struct NoiseSchedule {
    id: String,
    beta_start: f64,
    beta_end: f64,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    // alpha_bars[0] = 1, alpha_bars[t] = prod_{i<=t} alphas[i - 1]
    alpha_bars: Vec<f64>,
}

impl TryFrom<ScheduleSpec> for NoiseSchedule {
    type Error = Error;

    fn try_from(spec: ScheduleSpec) -> Result<Self> {
        spec.build()
    }
}

impl From<NoiseSchedule> for ScheduleSpec {
    fn from(s: NoiseSchedule) -> Self {
        s.spec()
    }
}

impl NoiseSchedule {
    pub fn linear(
        id: impl Into<String>,
        beta_start: f64,
        beta_end: f64,
        total_steps: usize,
    ) -> Result<Self> {
        if total_steps == 0 || total_steps > MAX_TOTAL_STEPS {
            return Err(Error::InvalidSchedule(format!(
                "total_steps must be in 1..={MAX_TOTAL_STEPS}, got {total_steps}"
            )));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas: Vec<f64> = if total_steps == 1 {
            vec![beta_start]
        } else {
            let span = (total_steps - 1) as f64;
            (0..total_steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / span)
                .collect()
        };
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(total_steps + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let last = alpha_bars[total_steps];
        if !(last > 0.0 && last.is_normal()) {
            return Err(Error::InvalidSchedule(
                "alpha_bar underflows before the final step".into(),
            ));
        }
        Ok(Self {
            id: id.into(),
            beta_start,
            beta_end,
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Linear 1e-4 .. 0.02 over 1000 steps.
    pub fn standard(id: impl Into<String>) -> Self {
        Self::linear(id, 1e-4, 0.02, 1000).expect("default schedule is valid")
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn total_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    /// `alpha_bar(t)` for `t = 0..=T`, index 0 being 1.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or(Error::TimestepOutOfRange {
                t,
                min: 0,
                max: self.total_steps(),
            })
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.total_steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                min: 1,
                max: self.total_steps(),
            });
        }
        Ok(())
    }

    pub fn spec(&self) -> ScheduleSpec {
        ScheduleSpec {
            schedule_id: self.id.clone(),
            beta_start: self.beta_start,
            beta_end: self.beta_end,
            total_steps: self.total_steps(),
        }
    }
}

/// `sqrt(abar_t) * x0 + sqrt(1 - abar_t) * noise`.
pub fn forward_diffuse(
    x0: &FrameTensor,
    t: usize,
    schedule: &NoiseSchedule,
    noise: &FrameTensor,
) -> Result<FrameTensor> {
    let ab = schedule.alpha_bar(t)?;
    FrameTensor::lincomb(ab.sqrt(), x0, (1.0 - ab).sqrt(), noise)
}

/// Forward-diffuse `x0_like` to `t_e` on `target` with a fresh standard
/// normal draw. Returns the noisy state and the draw.
pub fn renoise_to(
    x0_like: &FrameTensor,
    t_e: usize,
    target: &NoiseSchedule,
    rng: &mut dyn RandomSource,
) -> Result<(FrameTensor, FrameTensor)> {
    target.check_step(t_e)?;
    let noise = FrameTensor::standard_normal(x0_like.frames(), x0_like.dims(), rng);
    let noisy = forward_diffuse(x0_like, t_e, target, &noise)?;
    Ok((noisy, noise))
}

/// Increasing list of sampling timesteps ending at `t_max`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepGrid {
    steps: Vec<usize>,
    t_max: usize,
}

impl TimestepGrid {
    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `(t, t_prev)` pairs from the top of the grid down, the last pair
    /// ending at 0.
    pub fn descending_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.steps.len())
            .rev()
            .map(move |i| (self.steps[i], if i == 0 { 0 } else { self.steps[i - 1] }))
    }
}

/// `[round(i * t_max / k) for i in 1..=k]`, rounding halves up.
pub fn uniform_grid(k: usize, t_max: usize) -> Result<TimestepGrid> {
    if k == 0 || k > t_max {
        return Err(Error::InvalidGrid { k, t_max });
    }
    let steps: Vec<usize> = (1..=k)
        .map(|i| (2 * i * t_max + k) / (2 * k))
        .collect();
    if steps.windows(2).any(|w| w[0] >= w[1]) || steps[0] == 0 {
        return Err(Error::GridCollision { k, t_max });
    }
    Ok(TimestepGrid { steps, t_max })
}
