#![no_main]

use kd_core::data::manifest::{frames_archive_bytes, parse_frames_archive};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(frames) = parse_frames_archive(data) {
        let bytes = frames_archive_bytes(frames.iter().map(|(k, v)| (k.as_str(), v)));
        assert_eq!(parse_frames_archive(&bytes).expect("re-encoded archive parses"), frames);
    }
});
