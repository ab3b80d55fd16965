#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = blockrank_cli::config::run_config_from_bytes(data);
});
