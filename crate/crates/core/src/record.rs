//! On-disk layout of run records and long runs, and their decoders.
//!
//! A run directory holds `config.json`, `trajectory.bin` with its manifest
//! `trajectory.json`, `noises.bin` with `noises.json` when noises were
//! recorded, and `final.csv`. Binary files are flat little-endian `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::longgen::LongRun;
use crate::metrics::junction_jump;
use crate::sampler::{ExpertCalls, NoiseRecord, PipelineConfig, RunRecord, Stage, StepRecord};
use crate::tensor::FrameTensor;

pub const BINARY_FORMAT: &str = "f64-le";
const STEP_ARRAYS: [&str; 3] = ["state", "eps", "x0"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordConfig {
    pub pipeline: PipelineConfig,
    pub seed: u64,
    pub expert_calls: ExpertCalls,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepEntry {
    pub stage: Stage,
    pub timestep: usize,
    pub t_prev: usize,
    pub expert: String,
}

/// Describes `trajectory.bin`: three arrays per step in `arrays_per_step`
/// order, then the structure and the final video when present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryManifest {
    pub format: String,
    pub frames: usize,
    pub dims: usize,
    pub arrays_per_step: Vec<String>,
    pub steps: Vec<StepEntry>,
    pub structure: bool,
    #[serde(rename = "final")]
    pub final_video: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseEntry {
    pub stage: Stage,
    pub timestep: usize,
    pub schedule_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseManifest {
    pub format: String,
    pub frames: usize,
    pub dims: usize,
    pub entries: Vec<NoiseEntry>,
}

/// Describes a flat stack of equally shaped tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackManifest {
    pub format: String,
    pub count: usize,
    pub frames: usize,
    pub dims: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segment_frames: Option<usize>,
}

pub fn encode_f64s<'a>(arrays: impl IntoIterator<Item = &'a [f64]>) -> Vec<u8> {
    let mut out = Vec::new();
    for a in arrays {
        for v in a {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_f64s(bytes: &[u8]) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(8) {
        return Err(Error::Decode(format!("{} bytes is not a whole number of f64", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

fn check_format(format: &str, frames: usize, dims: usize) -> Result<usize> {
    if format != BINARY_FORMAT {
        return Err(Error::Decode(format!("unsupported format {format:?}")));
    }
    if frames == 0 || dims == 0 {
        return Err(Error::Decode("empty tensor shape".into()));
    }
    frames
        .checked_mul(dims)
        .ok_or_else(|| Error::Decode("tensor shape overflows".into()))
}

fn split_tensors(values: Vec<f64>, frames: usize, dims: usize, expected: usize) -> Result<Vec<FrameTensor>> {
    let size = frames * dims;
    if values.len() != expected.checked_mul(size).ok_or_else(|| Error::Decode("length overflows".into()))? {
        return Err(Error::Decode(format!(
            "expected {expected} arrays of {size} values, found {} values",
            values.len()
        )));
    }
    values
        .chunks_exact(size)
        .map(|c| FrameTensor::new(frames, dims, c.to_vec()).map_err(|e| Error::Decode(e.to_string())))
        .collect()
}

/// Decoded contents of a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<StepRecord>,
    pub structure: Option<FrameTensor>,
    pub final_video: Option<FrameTensor>,
}

pub fn encode_trajectory(record: &RunRecord) -> Result<(TrajectoryManifest, Vec<u8>)> {
    let shape = record
        .steps
        .first()
        .map(|s| s.state.shape())
        .or_else(|| record.final_video.as_ref().map(|f| f.shape()))
        .ok_or(Error::EmptyInput("run record"))?;
    let mut arrays: Vec<&[f64]> = Vec::new();
    for s in &record.steps {
        for t in [&s.state, &s.eps, &s.x0] {
            if t.shape() != shape {
                return Err(Error::ShapeMismatch { expected: shape, found: t.shape() });
            }
            arrays.push(t.values());
        }
    }
    for t in [&record.structure, &record.final_video].into_iter().flatten() {
        if t.shape() != shape {
            return Err(Error::ShapeMismatch { expected: shape, found: t.shape() });
        }
        arrays.push(t.values());
    }
    let manifest = TrajectoryManifest {
        format: BINARY_FORMAT.into(),
        frames: shape.0,
        dims: shape.1,
        arrays_per_step: STEP_ARRAYS.iter().map(|s| s.to_string()).collect(),
        steps: record
            .steps
            .iter()
            .map(|s| StepEntry {
                stage: s.stage,
                timestep: s.timestep,
                t_prev: s.t_prev,
                expert: s.expert.clone(),
            })
            .collect(),
        structure: record.structure.is_some(),
        final_video: record.final_video.is_some(),
    };
    Ok((manifest, encode_f64s(arrays)))
}

pub fn decode_trajectory(manifest_json: &[u8], bytes: &[u8]) -> Result<Trajectory> {
    let m: TrajectoryManifest = serde_json::from_slice(manifest_json)?;
    check_format(&m.format, m.frames, m.dims)?;
    if m.arrays_per_step != STEP_ARRAYS {
        return Err(Error::Decode(format!("unexpected step arrays {:?}", m.arrays_per_step)));
    }
    let extra = usize::from(m.structure) + usize::from(m.final_video);
    let count = m
        .steps
        .len()
        .checked_mul(3)
        .and_then(|n| n.checked_add(extra))
        .ok_or_else(|| Error::Decode("step count overflows".into()))?;
    for stage in [Stage::Control, Stage::Refine] {
        let ts: Vec<&StepEntry> = m.steps.iter().filter(|s| s.stage == stage).collect();
        if ts.iter().any(|s| s.t_prev >= s.timestep) || ts.windows(2).any(|w| w[0].timestep <= w[1].timestep) {
            return Err(Error::Decode("timesteps must strictly decrease within a stage".into()));
        }
    }
    let mut tensors = split_tensors(decode_f64s(bytes)?, m.frames, m.dims, count)?.into_iter();
    let mut steps = Vec::with_capacity(m.steps.len());
    for entry in m.steps {
        let (state, eps, x0) = (
            tensors.next().expect("counted"),
            tensors.next().expect("counted"),
            tensors.next().expect("counted"),
        );
        steps.push(StepRecord {
            stage: entry.stage,
            timestep: entry.timestep,
            t_prev: entry.t_prev,
            expert: entry.expert,
            state,
            eps,
            x0,
        });
    }
    let structure = if m.structure { tensors.next() } else { None };
    let final_video = if m.final_video { tensors.next() } else { None };
    Ok(Trajectory { steps, structure, final_video })
}

pub fn encode_noises(noises: &[NoiseRecord]) -> Result<(NoiseManifest, Vec<u8>)> {
    let first = noises.first().ok_or(Error::EmptyInput("noises"))?;
    let shape = first.noise.shape();
    if let Some(bad) = noises.iter().find(|n| n.noise.shape() != shape) {
        return Err(Error::ShapeMismatch { expected: shape, found: bad.noise.shape() });
    }
    let manifest = NoiseManifest {
        format: BINARY_FORMAT.into(),
        frames: shape.0,
        dims: shape.1,
        entries: noises
            .iter()
            .map(|n| NoiseEntry {
                stage: n.stage,
                timestep: n.timestep,
                schedule_id: n.schedule_id.clone(),
            })
            .collect(),
    };
    Ok((manifest, encode_f64s(noises.iter().map(|n| n.noise.values()))))
}

pub fn decode_noises(manifest_json: &[u8], bytes: &[u8]) -> Result<Vec<NoiseRecord>> {
    let m: NoiseManifest = serde_json::from_slice(manifest_json)?;
    check_format(&m.format, m.frames, m.dims)?;
    let tensors = split_tensors(decode_f64s(bytes)?, m.frames, m.dims, m.entries.len())?;
    Ok(m.entries
        .into_iter()
        .zip(tensors)
        .map(|(e, noise)| NoiseRecord {
            stage: e.stage,
            timestep: e.timestep,
            schedule_id: e.schedule_id,
            noise,
        })
        .collect())
}

pub fn encode_stack(tensors: &[FrameTensor], segment_frames: Option<usize>) -> Result<(StackManifest, Vec<u8>)> {
    let first = tensors.first().ok_or(Error::EmptyInput("tensors"))?;
    for t in tensors {
        first.ensure_same_shape(t)?;
    }
    let manifest = StackManifest {
        format: BINARY_FORMAT.into(),
        count: tensors.len(),
        frames: first.frames(),
        dims: first.dims(),
        segment_frames,
    };
    Ok((manifest, encode_f64s(tensors.iter().map(|t| t.values()))))
}

pub fn decode_stack(manifest_json: &[u8], bytes: &[u8]) -> Result<(StackManifest, Vec<FrameTensor>)> {
    let m: StackManifest = serde_json::from_slice(manifest_json)?;
    check_format(&m.format, m.frames, m.dims)?;
    if let Some(l) = m.segment_frames {
        if l == 0 || !m.frames.is_multiple_of(l) {
            return Err(Error::Decode(format!("segment length {l} does not divide {} frames", m.frames)));
        }
    }
    let tensors = split_tensors(decode_f64s(bytes)?, m.frames, m.dims, m.count)?;
    Ok((m, tensors))
}

/// `frame,d0,d1,...` header, one row per frame.
pub fn tensor_to_csv(t: &FrameTensor) -> String {
    let mut out = String::from("frame");
    for j in 0..t.dims() {
        out.push_str(&format!(",d{j}"));
    }
    out.push('\n');
    for f in 0..t.frames() {
        out.push_str(&f.to_string());
        for v in t.frame(f) {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

pub fn tensor_from_csv(text: &str) -> Result<FrameTensor> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Decode("missing header".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"frame") || cols.len() < 2 {
        return Err(Error::Decode(format!("bad header {header:?}")));
    }
    for (j, c) in cols[1..].iter().enumerate() {
        if *c != format!("d{j}") {
            return Err(Error::Decode(format!("bad column {c:?}")));
        }
    }
    let dims = cols.len() - 1;
    let mut values = Vec::new();
    let mut frames = 0usize;
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != dims + 1 {
            return Err(Error::Decode(format!("row has {} cells, expected {}", cells.len(), dims + 1)));
        }
        let index: usize = cells[0].parse().map_err(|_| Error::Decode(format!("bad frame index {:?}", cells[0])))?;
        if index != frames {
            return Err(Error::Decode(format!("frame index {index}, expected {frames}")));
        }
        for c in &cells[1..] {
            values.push(c.parse::<f64>().map_err(|_| Error::Decode(format!("bad value {c:?}")))?);
        }
        frames += 1;
    }
    if frames == 0 {
        return Err(Error::Decode("no frames".into()));
    }
    FrameTensor::new(frames, dims, values).map_err(|e| Error::Decode(e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn write_run_record(dir: &Path, record: &RunRecord) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(
        &dir.join("config.json"),
        &RecordConfig {
            pipeline: record.config.clone(),
            seed: record.seed,
            expert_calls: record.calls,
        },
    )?;
    let (manifest, bytes) = encode_trajectory(record)?;
    write_json(&dir.join("trajectory.json"), &manifest)?;
    fs::write(dir.join("trajectory.bin"), bytes)?;
    if !record.noises.is_empty() {
        let (manifest, bytes) = encode_noises(&record.noises)?;
        write_json(&dir.join("noises.json"), &manifest)?;
        fs::write(dir.join("noises.bin"), bytes)?;
    }
    if let Some(f) = &record.final_video {
        fs::write(dir.join("final.csv"), tensor_to_csv(f))?;
    }
    Ok(())
}

pub fn read_run_record(dir: &Path) -> Result<RunRecord> {
    let config: RecordConfig = serde_json::from_slice(&fs::read(dir.join("config.json"))?)?;
    let trajectory = decode_trajectory(&fs::read(dir.join("trajectory.json"))?, &fs::read(dir.join("trajectory.bin"))?)?;
    let noises_manifest = dir.join("noises.json");
    let noises = if noises_manifest.exists() {
        decode_noises(&fs::read(noises_manifest)?, &fs::read(dir.join("noises.bin"))?)?
    } else {
        Vec::new()
    };
    let final_csv = dir.join("final.csv");
    if final_csv.exists() {
        let from_csv = tensor_from_csv(&fs::read_to_string(final_csv)?)?;
        if trajectory.final_video.as_ref() != Some(&from_csv) {
            return Err(Error::Decode("final.csv disagrees with trajectory.bin".into()));
        }
    }
    Ok(RunRecord {
        config: config.pipeline,
        seed: config.seed,
        steps: trajectory.steps,
        noises,
        structure: trajectory.structure,
        final_video: trajectory.final_video,
        calls: config.expert_calls,
    })
}

/// Per-junction discontinuity rows: squared step across the junction, mean
/// squared step inside segments and their ratio.
pub fn junctions_csv(video: &FrameTensor, segment_frames: usize) -> Result<String> {
    let ratio_all = junction_jump(video, segment_frames)?;
    let n = video.frames() / segment_frames;
    let step = |f: usize| -> f64 {
        video.frame(f).iter().zip(video.frame(f + 1)).map(|(a, b)| (a - b).powi(2)).sum()
    };
    let interior: Vec<f64> = (0..video.frames() - 1)
        .filter(|f| (f + 1) % segment_frames != 0)
        .map(step)
        .collect();
    let interior_mean = interior.iter().sum::<f64>() / interior.len() as f64;
    let mut out = String::from("junction,frame,step_sq,interior_mean_sq,ratio\n");
    for k in 1..n {
        let f = k * segment_frames - 1;
        let s = step(f);
        let ratio = if interior_mean < crate::metrics::JUMP_FLOOR { 1.0 } else { s / interior_mean };
        out.push_str(&format!("{},{},{},{},{}\n", k - 1, f, s, interior_mean, ratio));
    }
    out.push_str(&format!("all,,,{interior_mean},{ratio_all}\n"));
    Ok(out)
}

pub fn write_long_run(dir: &Path, run: &LongRun, segment_frames: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, seg) in run.segments.iter().enumerate() {
        write_run_record(&dir.join("segments").join(format!("{i:03}")), seg)?;
    }
    for (window, record) in &run.windows {
        write_run_record(&dir.join("windows").join(window.name()), record)?;
    }
    fs::write(dir.join("junctions.csv"), junctions_csv(&run.video, segment_frames)?)?;
    let (manifest, bytes) = encode_stack(std::slice::from_ref(&run.video), Some(segment_frames))?;
    write_json(&dir.join("video.json"), &manifest)?;
    fs::write(dir.join("video.bin"), bytes)?;
    Ok(())
}

/// Reads `video.bin` of a long-run directory.
pub fn read_long_video(dir: &Path) -> Result<(FrameTensor, usize)> {
    let (m, mut tensors) = decode_stack(&fs::read(dir.join("video.json"))?, &fs::read(dir.join("video.bin"))?)?;
    if m.count != 1 {
        return Err(Error::Decode(format!("expected one video, found {}", m.count)));
    }
    let segment_frames = m.segment_frames.ok_or_else(|| Error::Decode("missing segment_frames".into()))?;
    Ok((tensors.remove(0), segment_frames))
}
