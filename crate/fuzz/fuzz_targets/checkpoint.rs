#![no_main]

use kd_core::model::checkpoint::{from_bytes, to_bytes};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = from_bytes(data) {
        let again = from_bytes(&to_bytes(&model)).expect("re-encoded checkpoint loads");
        assert_eq!(again, model);
    }
});
