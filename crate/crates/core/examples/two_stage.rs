//! Samples the biased preset in every denoising mode and prints the moment
//! errors of 2000 samples.

use expert_chain::harness::ExpertsConfig;
use expert_chain::metrics::{spatial_fidelity_err, temporal_consistency_err};
use expert_chain::presets::preset;
use expert_chain::rng::derive_seed;
use expert_chain::{run_pipeline, DenoiseMode, FrameTensor, PipelineConfig, SeededSource};

fn main() -> expert_chain::Result<()> {
    let target = preset("biased-4f")?;
    let experts = ExpertsConfig::default().build(&target)?;
    println!("{:16} {:>8} {:>8} {:>6}", "mode", "spatial", "temporal", "calls");
    for mode in DenoiseMode::ALL {
        let cfg = PipelineConfig { mode, ..PipelineConfig::default() };
        let finals: Vec<FrameTensor> = (0..2000)
            .map(|k| {
                let mut rng = SeededSource::new(derive_seed(1, k));
                run_pipeline(&experts.control, &experts.spatial, &experts.temporal, &cfg, &mut rng)
                    .map(|r| r.final_video.expect("refined"))
            })
            .collect::<expert_chain::Result<_>>()?;
        println!(
            "{:16} {:8.4} {:8.4} {:6}",
            mode.as_str(),
            spatial_fidelity_err(&finals, &target)?,
            temporal_consistency_err(&finals, &target)?,
            cfg.expected_expert_calls()
        );
    }
    Ok(())
}
