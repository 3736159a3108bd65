#![no_main]

use kd_core::distill::DistillConfig;
use kd_core::kv::KvMap;
use kd_core::pipeline::PipelineConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(kv) = KvMap::parse(text) {
        if let Ok(cfg) = DistillConfig::from_kv(&kv) {
            assert_eq!(DistillConfig::from_kv(&cfg.to_kv()).expect("round trip"), cfg);
        }
        let _ = PipelineConfig::from_kv(&kv);
    }
});
