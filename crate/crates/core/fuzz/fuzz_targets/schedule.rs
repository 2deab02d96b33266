#![no_main]

use expert_chain::schedule::ScheduleSpec;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(spec) = serde_json::from_slice::<ScheduleSpec>(data) {
        if let Ok(s) = spec.build() {
            assert!(s.alpha_bars().windows(2).all(|w| w[1] <= w[0]));
        }
    }
});
