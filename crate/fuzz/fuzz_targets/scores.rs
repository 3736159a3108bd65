#![no_main]

use kd_core::distill::eval::{pair_scores, parse_scored};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    let _ = parse_scored(&text);
    if let Some((refs, hyps)) = text.split_once("\n\n") {
        let _ = pair_scores(refs, hyps, "data");
    }
});
