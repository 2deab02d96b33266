#![no_main]

use expert_chain::GaussianTarget;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = serde_json::from_slice::<GaussianTarget>(data) {
        let _ = t.moments();
    }
});
