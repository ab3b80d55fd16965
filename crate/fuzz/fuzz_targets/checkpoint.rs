#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((cfg, tensors)) = blockrank_core::model::read_checkpoint(data) {
        // A structurally valid container may still not describe a model.
        let _ = blockrank_core::model::checkpoint::params_from_tensors(&cfg, &tensors);
    }
});
