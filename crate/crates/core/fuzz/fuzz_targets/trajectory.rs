#![no_main]

use libfuzzer_sys::fuzz_target;

// Input: manifest JSON, one NUL byte, then the little-endian payload.
fuzz_target!(|data: &[u8]| {
    let split = data.iter().position(|&b| b == 0).unwrap_or(data.len());
    let manifest = &data[..split];
    let payload = data.get(split + 1..).unwrap_or(&[]);
    let _ = expert_chain::record::decode_trajectory(manifest, payload);
});
