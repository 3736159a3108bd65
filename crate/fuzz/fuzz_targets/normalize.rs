#![no_main]

use kd_core::textnorm::{normalize, NormalizationMode};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    for mode in NormalizationMode::ALL {
        let once = normalize(text, mode);
        assert_eq!(normalize(&once, mode), once);
        assert!(!once.starts_with(' ') && !once.ends_with(' ') && !once.contains("  "));
    }
});
