//! Experiment configuration, seeded runs, persistence and ablation tables.
//!
//! A master seed expands to run seeds with [`derive_seed`]; run `r` uses
//! `derive_seed(master, r)`, its sample `k` uses `derive_seed(run_seed, k + 1)`
//! and its metric projections use `derive_seed(run_seed, 0)`. Every file
//! written here is a pure function of the config.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::experts::{make_control_expert, make_spatial_expert, make_temporal_expert, ExpertSpec};
use crate::longgen::{run_long_pipeline, LongConfig, LongRun};
use crate::metrics::{junction_correlation, junction_jump, mean_sd, median, spearman, MetricReport};
use crate::presets::preset;
use crate::record::{decode_stack, encode_stack, write_long_run, write_run_record};
use crate::rng::{derive_seed, SeededSource};
use crate::sampler::{run_pipeline, DenoiseMode, HookScope, PipelineConfig, RunRecord};
use crate::schedule::ScheduleSpec;
use crate::target::GaussianTarget;
use crate::tensor::FrameTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlKind {
    #[default]
    MomentMatched,
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialKind {
    #[default]
    Marginal,
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalKind {
    #[default]
    Blurred,
    Exact,
}

/// How the three experts are built from the preset target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertsConfig {
    #[serde(default)]
    pub control: ControlKind,
    #[serde(default)]
    pub spatial: SpatialKind,
    #[serde(default)]
    pub temporal: TemporalKind,
    #[serde(default = "default_blur")]
    pub temporal_blur: f64,
    #[serde(default = "control_schedule")]
    pub control_schedule: ScheduleSpec,
    #[serde(default = "spatial_schedule")]
    pub spatial_schedule: ScheduleSpec,
    #[serde(default = "temporal_schedule")]
    pub temporal_schedule: ScheduleSpec,
}

fn default_blur() -> f64 {
    0.5
}

fn control_schedule() -> ScheduleSpec {
    ScheduleSpec {
        schedule_id: "control".into(),
        beta_start: 1e-4,
        beta_end: 0.02,
        total_steps: 1000,
    }
}

fn spatial_schedule() -> ScheduleSpec {
    ScheduleSpec {
        schedule_id: "spatial".into(),
        beta_start: 8.5e-5,
        beta_end: 0.012,
        total_steps: 1000,
    }
}

fn temporal_schedule() -> ScheduleSpec {
    ScheduleSpec {
        schedule_id: "temporal".into(),
        beta_start: 1e-4,
        beta_end: 0.025,
        total_steps: 1000,
    }
}

impl Default for ExpertsConfig {
    fn default() -> Self {
        Self {
            control: ControlKind::default(),
            spatial: SpatialKind::default(),
            temporal: TemporalKind::default(),
            temporal_blur: default_blur(),
            control_schedule: control_schedule(),
            spatial_schedule: spatial_schedule(),
            temporal_schedule: temporal_schedule(),
        }
    }
}

/// Control, spatial and temporal experts for one target.
#[derive(Debug, Clone)]
pub struct Experts {
    pub control: ExpertSpec,
    pub spatial: ExpertSpec,
    pub temporal: ExpertSpec,
}

impl ExpertsConfig {
    pub fn build(&self, target: &GaussianTarget) -> Result<Experts> {
        let control_s = self.control_schedule.build()?;
        let spatial_s = self.spatial_schedule.build()?;
        let temporal_s = self.temporal_schedule.build()?;
        let control = match self.control {
            ControlKind::MomentMatched => make_control_expert(target, control_s)?,
            ControlKind::Exact => ExpertSpec::exact(target, control_s),
        };
        let spatial = match self.spatial {
            SpatialKind::Marginal => make_spatial_expert(target, spatial_s)?,
            SpatialKind::Exact => ExpertSpec::exact(target, spatial_s),
        };
        let temporal = match self.temporal {
            TemporalKind::Blurred => make_temporal_expert(target, temporal_s, self.temporal_blur)?,
            TemporalKind::Exact => ExpertSpec::exact(target, temporal_s),
        };
        Ok(Experts { control, spatial, temporal })
    }
}

/// Long-generation settings; the segment length is the preset's frame count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LongSettings {
    pub n_segments: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub guidance_scope: HookScope,
    #[serde(default = "enabled")]
    pub enable_consistency_init: bool,
    #[serde(default = "enabled")]
    pub enable_coherence_guidance: bool,
    #[serde(default = "enabled")]
    pub enable_staggered_refinement: bool,
}

fn default_gamma() -> f64 {
    0.1
}

fn enabled() -> bool {
    true
}

impl LongSettings {
    pub fn long_config(&self, segment_frames: usize, pipeline: &PipelineConfig) -> LongConfig {
        LongConfig {
            n_segments: self.n_segments,
            segment_frames,
            gamma: self.gamma,
            guidance_scope: self.guidance_scope,
            enable_consistency_init: self.enable_consistency_init,
            enable_coherence_guidance: self.enable_coherence_guidance,
            enable_staggered_refinement: self.enable_staggered_refinement,
            pipeline: pipeline.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricParams {
    #[serde(default = "default_projections")]
    pub n_projections: usize,
}

fn default_projections() -> usize {
    64
}

impl Default for MetricParams {
    fn default() -> Self {
        Self {
            n_projections: default_projections(),
        }
    }
}

/// One experiment, read from a single JSON document.
///
/// `pipeline.seed` is ignored: every sample gets a seed derived from `seed`.
/// `output_dir` is a default location only and takes no part in the config
/// hash or the echoed `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub preset: String,
    #[serde(default)]
    pub experts: ExpertsConfig,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub long: Option<LongSettings>,
    #[serde(default = "default_runs")]
    pub n_runs: usize,
    pub samples_per_run: usize,
    #[serde(default)]
    pub metrics: MetricParams,
    #[serde(default = "default_records")]
    pub records_per_run: usize,
    pub seed: u64,
    #[serde(default, skip_serializing)]
    pub output_dir: Option<PathBuf>,
}

fn default_runs() -> usize {
    5
}

fn default_records() -> usize {
    1
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn target(&self) -> Result<GaussianTarget> {
        preset(&self.preset)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return Err(Error::InvalidConfig(format!("bad experiment name {:?}", self.name)));
        }
        if self.n_runs == 0 || self.samples_per_run == 0 {
            return Err(Error::InvalidConfig("n_runs and samples_per_run must be >= 1".into()));
        }
        if self.metrics.n_projections == 0 {
            return Err(Error::InvalidConfig("n_projections must be >= 1".into()));
        }
        let target = self.target()?;
        let experts = self.experts.build(&target)?;
        self.pipeline.validate(&experts.control, &experts.spatial, &experts.temporal)?;
        if let Some(long) = &self.long {
            long.long_config(target.frames(), &self.pipeline).validate()?;
        }
        Ok(())
    }

    pub fn run_seeds(&self) -> Vec<u64> {
        (0..self.n_runs as u64).map(|r| derive_seed(self.seed, r)).collect()
    }

    /// Compact JSON of the config; the basis of the config hash.
    pub fn canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn sha256(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.canonical_json()?.as_bytes())))
    }

    /// `# config_sha256=<hex> seeds=<a;b;...>`
    pub fn provenance_line(&self) -> Result<String> {
        let seeds: Vec<String> = self.run_seeds().iter().map(u64::to_string).collect();
        Ok(format!("# config_sha256={} seeds={}", self.sha256()?, seeds.join(";")))
    }
}

/// Per-run values beyond the metric report, for long experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongStats {
    /// Pooled correlation between the two frames of every junction.
    pub junction_correlation: f64,
    /// Distance between consecutive segments' control epsilons, per control
    /// step, averaged over junctions and samples.
    pub eps_distance: Vec<f64>,
}

impl LongStats {
    pub fn mean_eps_distance(&self) -> f64 {
        self.eps_distance.iter().sum::<f64>() / self.eps_distance.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SampleRecord {
    Single(RunRecord),
    Long(LongRun),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub index: usize,
    pub seed: u64,
    pub report: MetricReport,
    pub long: Option<LongStats>,
    /// Final video of every sample, in sample order.
    pub finals: Vec<FrameTensor>,
    /// Full records of the first `records_per_run` samples.
    pub records: Vec<SampleRecord>,
    pub expert_calls_per_sample: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub runs: Vec<RunOutcome>,
}

/// Metric report for a set of final videos. Long videos (when
/// `segment_frames` is set) are scored per segment and their junction jump is
/// averaged over videos.
pub fn evaluate_finals(
    finals: &[FrameTensor],
    target: &GaussianTarget,
    segment_frames: Option<usize>,
    n_projections: usize,
    metric_seed: u64,
) -> Result<MetricReport> {
    let mut rng = SeededSource::new(metric_seed);
    match segment_frames {
        None => MetricReport::evaluate(finals, target, n_projections, metric_seed, &mut rng),
        Some(len) => {
            let mut slices = Vec::new();
            let mut jumps = Vec::with_capacity(finals.len());
            for video in finals {
                jumps.push(junction_jump(video, len)?);
                for s in 0..video.frames() / len {
                    slices.push(video.select_frames(s * len, len)?);
                }
            }
            let mut report = MetricReport::evaluate(&slices, target, n_projections, metric_seed, &mut rng)?;
            report.junction_jump = Some(jumps.iter().sum::<f64>() / jumps.len() as f64);
            Ok(report)
        }
    }
}

fn eps_distances(run: &LongRun) -> Result<Vec<f64>> {
    let eps: Vec<Vec<FrameTensor>> = run.segments.iter().map(RunRecord::control_eps).collect();
    let steps = eps[0].len();
    let mut out = vec![0.0; steps];
    for pair in eps.windows(2) {
        for (j, slot) in out.iter_mut().enumerate() {
            *slot += pair[1][j].squared_distance(&pair[0][j])?.sqrt();
        }
    }
    let junctions = (eps.len() - 1) as f64;
    Ok(out.into_iter().map(|v| v / junctions).collect())
}

fn run_one(
    cfg: &ExperimentConfig,
    target: &GaussianTarget,
    experts: &Experts,
    index: usize,
    seed: u64,
) -> Result<RunOutcome> {
    let Experts { control, spatial, temporal } = experts;
    let sample_seeds: Vec<u64> = (0..cfg.samples_per_run as u64).map(|k| derive_seed(seed, k + 1)).collect();
    let keep = cfg.records_per_run;
    let metric_seed = derive_seed(seed, 0);
    match &cfg.long {
        None => {
            let results: Vec<RunRecord> = sample_seeds
                .par_iter()
                .map(|&s| {
                    let pcfg = PipelineConfig { seed: s, ..cfg.pipeline.clone() };
                    run_pipeline(control, spatial, temporal, &pcfg, &mut SeededSource::new(s))
                })
                .collect::<Result<_>>()?;
            let finals: Vec<FrameTensor> = results
                .iter()
                .map(|r| r.final_video.clone().expect("pipeline sets the final video"))
                .collect();
            let calls = results[0].calls.total();
            let records = results.into_iter().take(keep).map(SampleRecord::Single).collect();
            let report = evaluate_finals(&finals, target, None, cfg.metrics.n_projections, metric_seed)?;
            Ok(RunOutcome {
                index,
                seed,
                report,
                long: None,
                finals,
                records,
                expert_calls_per_sample: calls,
            })
        }
        Some(settings) => {
            let len = target.frames();
            let long_cfg = settings.long_config(len, &cfg.pipeline);
            let results: Vec<LongRun> = sample_seeds
                .par_iter()
                .map(|&s| run_long_pipeline(control, spatial, temporal, &long_cfg, &mut SeededSource::new(s)))
                .collect::<Result<_>>()?;
            let finals: Vec<FrameTensor> = results.iter().map(|r| r.video.clone()).collect();
            let mut eps_distance = vec![0.0; cfg.pipeline.control_steps];
            for run in &results {
                for (acc, v) in eps_distance.iter_mut().zip(eps_distances(run)?) {
                    *acc += v / results.len() as f64;
                }
            }
            let long = LongStats {
                junction_correlation: junction_correlation(&finals, len)?,
                eps_distance,
            };
            let calls = results[0]
                .segments
                .iter()
                .chain(results[0].windows.iter().map(|(_, r)| r))
                .map(|r| r.calls.total())
                .sum();
            let records = results.into_iter().take(keep).map(SampleRecord::Long).collect();
            let report = evaluate_finals(&finals, target, Some(len), cfg.metrics.n_projections, metric_seed)?;
            Ok(RunOutcome {
                index,
                seed,
                report,
                long: Some(long),
                finals,
                records,
                expert_calls_per_sample: calls,
            })
        }
    }
}

/// Executes `n_runs` seeded runs in memory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Experiment> {
    cfg.validate()?;
    let target = cfg.target()?;
    let experts = cfg.experts.build(&target)?;
    let runs = cfg
        .run_seeds()
        .into_iter()
        .enumerate()
        .map(|(r, seed)| run_one(cfg, &target, &experts, r, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(Experiment { config: cfg.clone(), runs })
}

/// Describes one run directory; enough to recompute its metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunInfo {
    pub run: usize,
    pub seed: u64,
    pub metric_seed: u64,
    pub preset: String,
    pub samples: usize,
    pub n_projections: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segment_frames: Option<usize>,
    pub expert_calls_per_sample: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub long: Option<LongStats>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn fmt_mean_sd(values: &[f64]) -> Result<String> {
    let (m, s) = mean_sd(values)?;
    Ok(format!("{m}±{s}"))
}

/// Header of `aggregate.csv`, after the provenance line.
pub const AGGREGATE_HEADER: &str = "run,sliced_w2,spatial_fidelity_err,temporal_consistency_err,junction_jump,\
n_samples,n_projections,seed,junction_correlation,eps_distance";

impl Experiment {
    pub fn reports(&self) -> Vec<&MetricReport> {
        self.runs.iter().map(|r| &r.report).collect()
    }

    pub fn column(&self, f: impl Fn(&RunOutcome) -> f64) -> Vec<f64> {
        self.runs.iter().map(f).collect()
    }

    /// Mean of each metric across runs.
    pub fn mean_report(&self) -> MetricReport {
        let n = self.runs.len() as f64;
        let mean = |f: &dyn Fn(&MetricReport) -> f64| self.runs.iter().map(|r| f(&r.report)).sum::<f64>() / n;
        let first = &self.runs[0].report;
        MetricReport {
            sliced_w2: mean(&|r| r.sliced_w2),
            spatial_fidelity_err: mean(&|r| r.spatial_fidelity_err),
            temporal_consistency_err: mean(&|r| r.temporal_consistency_err),
            junction_jump: first.junction_jump.map(|_| mean(&|r| r.junction_jump.unwrap_or(0.0))),
            n_samples: first.n_samples,
            n_projections: first.n_projections,
            seed: self.config.seed,
        }
    }

    /// Per-run rows plus one `mean±sd` summary row.
    pub fn aggregate_csv(&self) -> Result<String> {
        let mut out = self.config.provenance_line()?;
        out.push('\n');
        out.push_str(AGGREGATE_HEADER);
        out.push('\n');
        for run in &self.runs {
            let (corr, eps) = match &run.long {
                Some(l) => (l.junction_correlation.to_string(), l.mean_eps_distance().to_string()),
                None => (String::new(), String::new()),
            };
            out.push_str(&format!("{},{},{},{}\n", run.index, run.report.csv_row(), corr, eps));
        }
        let col = |f: &dyn Fn(&RunOutcome) -> f64| fmt_mean_sd(&self.column(f));
        let long = self.config.long.is_some();
        let optional = |on: bool, f: &dyn Fn(&RunOutcome) -> f64| -> Result<String> {
            if on {
                col(f)
            } else {
                Ok(String::new())
            }
        };
        out.push_str(&format!(
            "summary,{},{},{},{},{},{},{},{},{}\n",
            col(&|r| r.report.sliced_w2)?,
            col(&|r| r.report.spatial_fidelity_err)?,
            col(&|r| r.report.temporal_consistency_err)?,
            optional(long, &|r| r.report.junction_jump.unwrap_or(0.0))?,
            self.runs[0].report.n_samples,
            self.runs[0].report.n_projections,
            self.config.seed,
            optional(long, &|r| r.long.as_ref().map_or(0.0, |l| l.junction_correlation))?,
            optional(long, &|r| r.long.as_ref().map_or(0.0, LongStats::mean_eps_distance))?,
        ));
        Ok(out)
    }

    /// Writes `config.json`, `aggregate.csv` and `runs/RRR/` with
    /// `metrics.csv`, `run.json`, `finals.json`/`finals.bin` and the kept
    /// sample records under `samples/KKKKK/`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("config.json"), &self.config)?;
        fs::write(dir.join("aggregate.csv"), self.aggregate_csv()?)?;
        let segment_frames = self.config.long.as_ref().map(|_| self.config.target()).transpose()?.map(|t| t.frames());
        for run in &self.runs {
            let rdir = dir.join("runs").join(format!("{:03}", run.index));
            fs::create_dir_all(&rdir)?;
            fs::write(
                rdir.join("metrics.csv"),
                format!("{}\n{}\n", MetricReport::CSV_HEADER, run.report.csv_row()),
            )?;
            write_json(
                &rdir.join("run.json"),
                &RunInfo {
                    run: run.index,
                    seed: run.seed,
                    metric_seed: derive_seed(run.seed, 0),
                    preset: self.config.preset.clone(),
                    samples: run.finals.len(),
                    n_projections: self.config.metrics.n_projections,
                    segment_frames,
                    expert_calls_per_sample: run.expert_calls_per_sample,
                    long: run.long.clone(),
                },
            )?;
            let (manifest, bytes) = encode_stack(&run.finals, segment_frames)?;
            write_json(&rdir.join("finals.json"), &manifest)?;
            fs::write(rdir.join("finals.bin"), bytes)?;
            for (k, record) in run.records.iter().enumerate() {
                let sdir = rdir.join("samples").join(format!("{k:05}"));
                match record {
                    SampleRecord::Single(r) => write_run_record(&sdir, r)?,
                    SampleRecord::Long(l) => write_long_run(&sdir, l, segment_frames.expect("long run"))?,
                }
            }
        }
        Ok(())
    }
}

/// Recomputes the metric report of a run directory from `run.json` and
/// `finals.bin`.
pub fn recompute_run_metrics(run_dir: &Path) -> Result<MetricReport> {
    let info: RunInfo = serde_json::from_slice(&fs::read(run_dir.join("run.json"))?)?;
    let (manifest, finals) = decode_stack(&fs::read(run_dir.join("finals.json"))?, &fs::read(run_dir.join("finals.bin"))?)?;
    if manifest.segment_frames != info.segment_frames || finals.len() != info.samples {
        return Err(Error::Decode("finals.json disagrees with run.json".into()));
    }
    let target = preset(&info.preset)?;
    evaluate_finals(&finals, &target, info.segment_frames, info.n_projections, info.metric_seed)
}

/// A CSV table with a leading provenance comment line.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub provenance: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(cfg: &ExperimentConfig, header: &[&str]) -> Result<Self> {
        Ok(Self {
            provenance: cfg.provenance_line()?,
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n{}\n", self.provenance, self.header.join(","));
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.header.iter().position(|h| h == name)?;
        self.rows.iter().map(|r| r[i].parse().ok()).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

fn med(values: Vec<f64>) -> Result<f64> {
    median(&values)
}

/// Result of a `t_e` sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct TeAblation {
    pub table: Table,
    /// Spearman correlations of the median errors against `t_e`; `None` for
    /// fewer than two values.
    pub spatial_trend: Option<f64>,
    pub temporal_trend: Option<f64>,
}

impl TeAblation {
    pub fn trend_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{}\nmetric,spearman_vs_t_e\nspatial_fidelity_err,{}\ntemporal_consistency_err,{}\n",
            self.table.provenance,
            cell(self.spatial_trend),
            cell(self.temporal_trend)
        )
    }
}

/// One experiment per `t_e`, all with the same seeds. Writes `te-NNNN/`
/// subdirectories, `te.csv` and `te_trend.csv` under `out` when given.
///
/// With very few control steps, large `t_e` hands most of the trajectory to
/// the refinement experts and the result can collapse toward their biased
/// targets.
pub fn ablate_te(cfg: &ExperimentConfig, te_values: &[usize], out: Option<&Path>) -> Result<TeAblation> {
    if te_values.is_empty() {
        return Err(Error::InvalidConfig("no t_e values".into()));
    }
    let mut table = Table::new(
        cfg,
        &["t_e", "spatial_fidelity_err", "temporal_consistency_err", "sliced_w2"],
    )?;
    let (mut spatial, mut temporal) = (Vec::new(), Vec::new());
    for &te in te_values {
        let mut sub = cfg.clone();
        sub.pipeline.t_e = te;
        sub.name = format!("{}-te-{te:04}", cfg.name);
        let exp = run_experiment(&sub)?;
        if let Some(dir) = out {
            exp.write(&dir.join(format!("te-{te:04}")))?;
        }
        let s = med(exp.column(|r| r.report.spatial_fidelity_err))?;
        let t = med(exp.column(|r| r.report.temporal_consistency_err))?;
        let w = med(exp.column(|r| r.report.sliced_w2))?;
        table.rows.push(vec![te.to_string(), s.to_string(), t.to_string(), w.to_string()]);
        spatial.push(s);
        temporal.push(t);
    }
    let x: Vec<f64> = te_values.iter().map(|&t| t as f64).collect();
    let trend = |y: &[f64]| if x.len() < 2 { None } else { spearman(&x, y).ok() };
    let result = TeAblation {
        spatial_trend: trend(&spatial),
        temporal_trend: trend(&temporal),
        table,
    };
    if let Some(dir) = out {
        result.table.write(&dir.join("te.csv"))?;
        fs::write(dir.join("te_trend.csv"), result.trend_csv())?;
    }
    Ok(result)
}

/// One experiment per denoising mode with shared seeds; medians over runs.
/// Writes `mode-<name>/` and `denoising.csv` under `out` when given.
pub fn ablate_denoising(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Table> {
    let mut table = Table::new(
        cfg,
        &[
            "mode",
            "spatial_fidelity_err",
            "temporal_consistency_err",
            "sliced_w2",
            "expert_calls",
        ],
    )?;
    for mode in DenoiseMode::ALL {
        let mut sub = cfg.clone();
        sub.pipeline.mode = mode;
        sub.name = format!("{}-{}", cfg.name, mode.as_str());
        let exp = run_experiment(&sub)?;
        if let Some(dir) = out {
            exp.write(&dir.join(format!("mode-{}", mode.as_str())))?;
        }
        table.rows.push(vec![
            mode.as_str().to_string(),
            med(exp.column(|r| r.report.spatial_fidelity_err))?.to_string(),
            med(exp.column(|r| r.report.temporal_consistency_err))?.to_string(),
            med(exp.column(|r| r.report.sliced_w2))?.to_string(),
            exp.runs[0].expert_calls_per_sample.to_string(),
        ]);
    }
    if let Some(dir) = out {
        table.write(&dir.join("denoising.csv"))?;
    }
    Ok(table)
}

/// Names of the long-generation variants, in table order.
pub const LONG_VARIANTS: [&str; 4] = ["all_on", "init_off", "guidance_off", "stagger_off"];

/// All strategies on, then each one off, with shared seeds. Writes
/// `variant-<name>/` and `long.csv` under `out` when given.
pub fn ablate_long(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Table> {
    let base = cfg
        .long
        .clone()
        .ok_or_else(|| Error::InvalidConfig("ablate-long needs a `long` section".into()))?;
    let mut table = Table::new(
        cfg,
        &[
            "variant",
            "junction_jump_median",
            "junction_jump_mean",
            "junction_correlation",
            "eps_distance",
            "spatial_fidelity_err",
            "temporal_consistency_err",
        ],
    )?;
    for name in LONG_VARIANTS {
        let mut long = LongSettings {
            enable_consistency_init: true,
            enable_coherence_guidance: true,
            enable_staggered_refinement: true,
            ..base.clone()
        };
        match name {
            "init_off" => long.enable_consistency_init = false,
            "guidance_off" => long.enable_coherence_guidance = false,
            "stagger_off" => long.enable_staggered_refinement = false,
            _ => {}
        }
        let mut sub = cfg.clone();
        sub.long = Some(long);
        sub.name = format!("{}-{name}", cfg.name);
        let exp = run_experiment(&sub)?;
        if let Some(dir) = out {
            exp.write(&dir.join(format!("variant-{name}")))?;
        }
        let jumps = exp.column(|r| r.report.junction_jump.unwrap_or(0.0));
        let stats = |f: fn(&LongStats) -> f64| exp.column(|r| r.long.as_ref().map_or(0.0, f));
        table.rows.push(vec![
            name.to_string(),
            median(&jumps)?.to_string(),
            mean_sd(&jumps)?.0.to_string(),
            median(&stats(|l| l.junction_correlation))?.to_string(),
            median(&stats(LongStats::mean_eps_distance))?.to_string(),
            med(exp.column(|r| r.report.spatial_fidelity_err))?.to_string(),
            med(exp.column(|r| r.report.temporal_consistency_err))?.to_string(),
        ]);
    }
    if let Some(dir) = out {
        table.write(&dir.join("long.csv"))?;
    }
    Ok(table)
}
