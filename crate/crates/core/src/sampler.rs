//! Deterministic DDIM stepping and the control -> refinement pipeline.
//!
//! The control stage samples a coarse structure with the control expert. It
//! is then re-noised to `t_e` on the refinement scheduler and denoised again
//! with the spatial and temporal experts. All DDIM steps use eta = 0; the
//! only randomness is the initial draw and explicit re-noising.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::ExpertSpec;
use crate::rng::RandomSource;
use crate::schedule::{renoise_to, uniform_grid, NoiseSchedule};
use crate::tensor::FrameTensor;

/// `(x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)`.
pub fn predict_x0(
    x_t: &FrameTensor,
    eps_hat: &FrameTensor,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<FrameTensor> {
    let ab = schedule.alpha_bar(t)?;
    if !(ab > 0.0) {
        return Err(Error::InvalidSchedule(format!("alpha_bar({t}) is zero")));
    }
    let inv_a = 1.0 / ab.sqrt();
    FrameTensor::lincomb(inv_a, x_t, -(1.0 - ab).sqrt() * inv_a, eps_hat)
}

/// `sqrt(abar_prev) x0_hat + sqrt(1 - abar_prev) eps`. Returns `x0_hat`
/// unchanged when `t_prev == 0`.
pub fn ddim_step(
    x0_hat: &FrameTensor,
    eps_hat: &FrameTensor,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<FrameTensor> {
    x0_hat.ensure_same_shape(eps_hat)?;
    if t_prev == 0 {
        return Ok(x0_hat.clone());
    }
    let ab = schedule.alpha_bar(t_prev)?;
    FrameTensor::lincomb(ab.sqrt(), x0_hat, (1.0 - ab).sqrt(), eps_hat)
}

/// Output of one denoising step.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoised {
    pub eps: FrameTensor,
    pub x0_hat: FrameTensor,
    pub x_prev: FrameTensor,
}

/// One step of `expert` from `t` to `t_prev` on its own schedule.
pub fn denoising(expert: &ExpertSpec, x_t: &FrameTensor, t: usize, t_prev: usize) -> Result<Denoised> {
    denoising_on(expert, x_t, t, t_prev, expert.schedule())
}

/// One step where the x0 prediction and DDIM update use `schedule`, which
/// may differ from the schedule the expert was built for.
pub fn denoising_on(
    expert: &ExpertSpec,
    x_t: &FrameTensor,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<Denoised> {
    let eps = expert.exact_epsilon(x_t, t)?;
    step_with_eps(x_t, eps, t, t_prev, schedule)
}

fn step_with_eps(
    x_t: &FrameTensor,
    eps: FrameTensor,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<Denoised> {
    if t_prev >= t {
        return Err(Error::TimestepOutOfRange {
            t: t_prev,
            min: 0,
            max: t.saturating_sub(1),
        });
    }
    let x0_hat = predict_x0(x_t, &eps, t, schedule)?;
    let x_prev = ddim_step(&x0_hat, &eps, t_prev, schedule)?;
    Ok(Denoised { eps, x0_hat, x_prev })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiseMode {
    /// Spatial expert on its own schedule.
    Standard,
    /// Spatial step, bridge to the temporal scheduler through x0, temporal
    /// prediction, bridge back, final spatial step.
    Coordinated,
    /// Experts alternate step by step, both driven on the spatial schedule.
    NaiveAlternate,
    TemporalOnly,
    SpatialOnly,
}

impl DenoiseMode {
    pub const ALL: [DenoiseMode; 5] = [
        DenoiseMode::Coordinated,
        DenoiseMode::TemporalOnly,
        DenoiseMode::SpatialOnly,
        DenoiseMode::Standard,
        DenoiseMode::NaiveAlternate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DenoiseMode::Standard => "standard",
            DenoiseMode::Coordinated => "coordinated",
            DenoiseMode::NaiveAlternate => "naive_alternate",
            DenoiseMode::TemporalOnly => "temporal_only",
            DenoiseMode::SpatialOnly => "spatial_only",
        }
    }

    /// Expert evaluations per refinement step.
    pub fn calls_per_step(self) -> usize {
        match self {
            DenoiseMode::Coordinated => 3,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlternationStart {
    #[default]
    SpatialFirst,
    TemporalFirst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub control_steps: usize,
    pub refine_steps: usize,
    pub t_e: usize,
    pub mode: DenoiseMode,
    #[serde(default)]
    pub alternation_start: AlternationStart,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub record_noises: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            control_steps: 8,
            refine_steps: 10,
            t_e: 100,
            mode: DenoiseMode::Coordinated,
            alternation_start: AlternationStart::SpatialFirst,
            seed: 0,
            record_noises: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self, control: &ExpertSpec, spatial: &ExpertSpec, temporal: &ExpertSpec) -> Result<()> {
        if self.control_steps == 0 || self.refine_steps == 0 {
            return Err(Error::InvalidConfig("control_steps and refine_steps must be >= 1".into()));
        }
        if self.control_steps > control.schedule().total_steps() {
            return Err(Error::InvalidConfig(format!(
                "control_steps {} exceeds control schedule length {}",
                self.control_steps,
                control.schedule().total_steps()
            )));
        }
        if self.t_e == 0 || self.refine_steps > self.t_e {
            return Err(Error::InvalidConfig(format!(
                "need 1 <= refine_steps <= t_e, got {} and {}",
                self.refine_steps, self.t_e
            )));
        }
        if self.t_e > spatial.schedule().total_steps() {
            return Err(Error::InvalidConfig(format!(
                "t_e {} exceeds spatial schedule length {}",
                self.t_e,
                spatial.schedule().total_steps()
            )));
        }
        if self.mode != DenoiseMode::Standard
            && self.mode != DenoiseMode::SpatialOnly
            && self.t_e > temporal.schedule().total_steps()
        {
            return Err(Error::InvalidConfig(format!(
                "t_e {} exceeds temporal schedule length {}",
                self.t_e,
                temporal.schedule().total_steps()
            )));
        }
        let shape = |e: &ExpertSpec| (e.target().frames(), e.target().dims_per_frame());
        if shape(control) != shape(spatial) || shape(spatial) != shape(temporal) {
            return Err(Error::InvalidConfig("experts disagree on frame shape".into()));
        }
        Ok(())
    }

    /// Total expert evaluations of one pipeline run.
    pub fn expected_expert_calls(&self) -> usize {
        self.control_steps + self.refine_steps * self.mode.calls_per_step()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Control,
    Refine,
}

/// One grid step. For coordinated steps, `eps` and `x0` come from the final
/// spatial evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub stage: Stage,
    pub timestep: usize,
    pub t_prev: usize,
    pub expert: String,
    pub state: FrameTensor,
    pub eps: FrameTensor,
    pub x0: FrameTensor,
}

/// A standard-normal draw consumed by the run.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRecord {
    pub stage: Stage,
    pub timestep: usize,
    pub schedule_id: String,
    pub noise: FrameTensor,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertCalls {
    pub control: usize,
    pub refine: usize,
}

impl ExpertCalls {
    pub fn total(&self) -> usize {
        self.control + self.refine
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub config: PipelineConfig,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub noises: Vec<NoiseRecord>,
    pub structure: Option<FrameTensor>,
    pub final_video: Option<FrameTensor>,
    pub calls: ExpertCalls,
}

impl RunRecord {
    pub fn new(config: PipelineConfig, seed: u64) -> Self {
        Self {
            config,
            seed,
            steps: Vec::new(),
            noises: Vec::new(),
            structure: None,
            final_video: None,
            calls: ExpertCalls::default(),
        }
    }

    pub fn steps_in(&self, stage: Stage) -> impl Iterator<Item = &StepRecord> {
        self.steps.iter().filter(move |s| s.stage == stage)
    }

    /// Epsilons of the control stage, top of the grid first.
    pub fn control_eps(&self) -> Vec<FrameTensor> {
        self.steps_in(Stage::Control).map(|s| s.eps.clone()).collect()
    }

    fn record_noise(&mut self, stage: Stage, timestep: usize, schedule: &NoiseSchedule, noise: &FrameTensor) {
        if self.config.record_noises {
            self.noises.push(NoiseRecord {
                stage,
                timestep,
                schedule_id: schedule.id().to_string(),
                noise: noise.clone(),
            });
        }
    }
}

/// Rewrites the predicted noise of control step `index` (0 = top of grid)
/// at timestep `t` before it drives the update.
pub type EpsHook<'a> = dyn Fn(usize, usize, &FrameTensor) -> Result<FrameTensor> + 'a;

/// Where a rewritten epsilon enters the DDIM update.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HookScope {
    /// Both the x0 prediction and the direction term.
    #[default]
    Step,
    /// Only the direction term; x0 comes from the expert's own epsilon.
    Direction,
}

#[derive(Default)]
pub struct ControlOptions<'a> {
    /// Initial state at the top of the grid instead of a fresh draw.
    pub init: Option<FrameTensor>,
    pub eps_hook: Option<&'a EpsHook<'a>>,
    pub hook_scope: HookScope,
}

pub fn control_stage(
    control: &ExpertSpec,
    cfg: &PipelineConfig,
    rng: &mut dyn RandomSource,
    record: &mut RunRecord,
) -> Result<FrameTensor> {
    control_stage_with(control, cfg, rng, record, ControlOptions::default())
}

pub fn control_stage_with(
    control: &ExpertSpec,
    cfg: &PipelineConfig,
    rng: &mut dyn RandomSource,
    record: &mut RunRecord,
    opts: ControlOptions<'_>,
) -> Result<FrameTensor> {
    if cfg.control_steps == 0 {
        return Err(Error::InvalidConfig("control_steps must be >= 1".into()));
    }
    let schedule = control.schedule();
    let grid = uniform_grid(cfg.control_steps, schedule.total_steps())?;
    let (frames, dims) = (control.target().frames(), control.target().dims_per_frame());
    let mut x = match opts.init {
        Some(init) => {
            if init.shape() != (frames, dims) {
                return Err(Error::ShapeMismatch {
                    expected: (frames, dims),
                    found: init.shape(),
                });
            }
            init
        }
        None => FrameTensor::standard_normal(frames, dims, rng),
    };
    record.record_noise(Stage::Control, grid.t_max(), schedule, &x);

    for (index, (t, t_prev)) in grid.descending_pairs().enumerate() {
        let raw = control.exact_epsilon(&x, t)?;
        record.calls.control += 1;
        let step = match opts.eps_hook {
            None => step_with_eps(&x, raw, t, t_prev, schedule)?,
            Some(hook) => {
                let eps = hook(index, t, &raw)?;
                match opts.hook_scope {
                    HookScope::Step => step_with_eps(&x, eps, t, t_prev, schedule)?,
                    HookScope::Direction => {
                        let x0_hat = predict_x0(&x, &raw, t, schedule)?;
                        let x_prev = ddim_step(&x0_hat, &eps, t_prev, schedule)?;
                        Denoised { eps, x0_hat, x_prev }
                    }
                }
            }
        };
        record.steps.push(StepRecord {
            stage: Stage::Control,
            timestep: t,
            t_prev,
            expert: control.label().to_string(),
            state: x,
            eps: step.eps,
            x0: step.x0_hat,
        });
        x = step.x_prev;
    }
    record.structure = Some(x.clone());
    Ok(x)
}

/// Intermediate states of one coordinated step.
#[derive(Debug, Clone)]
pub struct CoordinatedTrace {
    pub spatial_x0: FrameTensor,
    pub temporal_state: FrameTensor,
    pub temporal_noise: FrameTensor,
    pub temporal_x0: FrameTensor,
    pub refreshed_state: FrameTensor,
    pub spatial_noise: FrameTensor,
    pub last: Denoised,
}

/// Coordinated step from `t` to `t_prev`; `x_t` is on the spatial schedule.
pub fn coordinated_step(
    x_t: &FrameTensor,
    t: usize,
    t_prev: usize,
    spatial: &ExpertSpec,
    temporal: &ExpertSpec,
    rng: &mut dyn RandomSource,
) -> Result<FrameTensor> {
    Ok(coordinated_step_traced(x_t, t, t_prev, spatial, temporal, rng)?.last.x_prev)
}

pub fn coordinated_step_traced(
    x_t: &FrameTensor,
    t: usize,
    t_prev: usize,
    spatial: &ExpertSpec,
    temporal: &ExpertSpec,
    rng: &mut dyn RandomSource,
) -> Result<CoordinatedTrace> {
    let (s_sched, t_sched) = (spatial.schedule(), temporal.schedule());
    t_sched.check_step(t)?;
    // spatial prediction of x0 at t
    let first = denoising(spatial, x_t, t, t_prev)?;
    // bridge to the temporal scheduler through x0
    let (temporal_state, temporal_noise) = renoise_to(&first.x0_hat, t, t_sched, rng)?;
    let temporal_eps = temporal.exact_epsilon(&temporal_state, t)?;
    let temporal_x0 = predict_x0(&temporal_state, &temporal_eps, t, t_sched)?;
    // bridge back and take the actual step with the spatial expert
    let (refreshed_state, spatial_noise) = renoise_to(&temporal_x0, t, s_sched, rng)?;
    let last = denoising(spatial, &refreshed_state, t, t_prev)?;
    Ok(CoordinatedTrace {
        spatial_x0: first.x0_hat,
        temporal_state,
        temporal_noise,
        temporal_x0,
        refreshed_state,
        spatial_noise,
        last,
    })
}

pub fn refine_stage(
    v0: &FrameTensor,
    spatial: &ExpertSpec,
    temporal: &ExpertSpec,
    cfg: &PipelineConfig,
    rng: &mut dyn RandomSource,
    record: &mut RunRecord,
) -> Result<FrameTensor> {
    if cfg.t_e == 0 {
        return Err(Error::InvalidConfig("t_e must be >= 1".into()));
    }
    let base = match cfg.mode {
        DenoiseMode::TemporalOnly => temporal.schedule(),
        _ => spatial.schedule(),
    };
    let grid = uniform_grid(cfg.refine_steps, cfg.t_e)?;
    let (mut x, noise) = renoise_to(v0, cfg.t_e, base, rng)?;
    record.record_noise(Stage::Refine, cfg.t_e, base, &noise);

    for (index, (t, t_prev)) in grid.descending_pairs().enumerate() {
        let (label, step) = match cfg.mode {
            DenoiseMode::Standard | DenoiseMode::SpatialOnly => {
                record.calls.refine += 1;
                (spatial.label().to_string(), denoising(spatial, &x, t, t_prev)?)
            }
            DenoiseMode::TemporalOnly => {
                record.calls.refine += 1;
                (temporal.label().to_string(), denoising(temporal, &x, t, t_prev)?)
            }
            DenoiseMode::NaiveAlternate => {
                let spatial_turn = (index % 2 == 0) == (cfg.alternation_start == AlternationStart::SpatialFirst);
                let expert = if spatial_turn { spatial } else { temporal };
                record.calls.refine += 1;
                (expert.label().to_string(), denoising_on(expert, &x, t, t_prev, spatial.schedule())?)
            }
            DenoiseMode::Coordinated => {
                let trace = coordinated_step_traced(&x, t, t_prev, spatial, temporal, rng)?;
                record.calls.refine += 3;
                record.record_noise(Stage::Refine, t, temporal.schedule(), &trace.temporal_noise);
                record.record_noise(Stage::Refine, t, spatial.schedule(), &trace.spatial_noise);
                (format!("{}+{}", spatial.label(), temporal.label()), trace.last)
            }
        };
        record.steps.push(StepRecord {
            stage: Stage::Refine,
            timestep: t,
            t_prev,
            expert: label,
            state: x,
            eps: step.eps,
            x0: step.x0_hat,
        });
        x = step.x_prev;
    }
    record.final_video = Some(x.clone());
    Ok(x)
}

/// Control stage followed by refinement.
pub fn run_pipeline(
    control: &ExpertSpec,
    spatial: &ExpertSpec,
    temporal: &ExpertSpec,
    cfg: &PipelineConfig,
    rng: &mut dyn RandomSource,
) -> Result<RunRecord> {
    cfg.validate(control, spatial, temporal)?;
    let mut record = RunRecord::new(cfg.clone(), cfg.seed);
    let v0 = control_stage(control, cfg, rng, &mut record)?;
    refine_stage(&v0, spatial, temporal, cfg, rng, &mut record)?;
    Ok(record)
}
