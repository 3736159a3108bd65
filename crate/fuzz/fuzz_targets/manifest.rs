#![no_main]

use kd_core::data::manifest::{manifest_text, parse_manifest, FramesStorage};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(data) = parse_manifest(text, None) {
        let again = parse_manifest(&manifest_text(&data, &FramesStorage::Inline), None).expect("re-encoded manifest parses");
        assert_eq!(again, data);
    }
});
