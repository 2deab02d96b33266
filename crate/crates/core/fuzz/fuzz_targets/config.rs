#![no_main]

use expert_chain::harness::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = ExperimentConfig::from_json(text) {
            let again = ExperimentConfig::from_json(&cfg.canonical_json().unwrap()).unwrap();
            assert_eq!(again.sha256().unwrap(), cfg.sha256().unwrap());
        }
    }
});
