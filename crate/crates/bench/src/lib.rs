//! Fixtures shared by the benchmarks.

use phasewatt::sampler::Domain;
use phasewatt::synth::{generate, OverlapPattern, Scenario, ScenarioSpec, SourceProfile};

/// Staircase scenario with `gpus` GPUs plus one CPU, sampled every 10 ms.
pub fn scenario(requests: usize, duration_s: f64, gpus: usize) -> Scenario {
    let mut spec = ScenarioSpec::single_gpu(42, requests, OverlapPattern::Staircase);
    spec.run_id = format!("bench-{requests}x{gpus}");
    spec.run_duration_s = duration_s;
    spec.sample_interval_ms = 10;
    spec.sources = (0..gpus)
        .map(|i| SourceProfile::new(&format!("gpu{i}"), Domain::Gpu, 310.0, 240.0, 60.0))
        .chain([SourceProfile::new("cpu0", Domain::Cpu, 90.0, 75.0, 30.0)])
        .collect();
    generate(&spec).expect("bench scenario fits its run")
}
