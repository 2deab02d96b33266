#![no_main]

use libfuzzer_sys::fuzz_target;

// Input: manifest JSON, one NUL byte, then the little-endian payload.
fuzz_target!(|data: &[u8]| {
    let split = data.iter().position(|&b| b == 0).unwrap_or(data.len());
    let manifest = &data[..split];
    let payload = data.get(split + 1..).unwrap_or(&[]);
    if let Ok((m, tensors)) = expert_chain::record::decode_stack(manifest, payload) {
        if let Ok((m2, bytes)) = expert_chain::record::encode_stack(&tensors, m.segment_frames) {
            assert_eq!(m2.count, m.count);
            assert_eq!(bytes, payload);
        }
    }
});
