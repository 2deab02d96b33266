#![no_main]

use expert_chain::record::{tensor_from_csv, tensor_to_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(t) = tensor_from_csv(text) {
            assert_eq!(tensor_from_csv(&tensor_to_csv(&t)).unwrap(), t);
        }
    }
});
