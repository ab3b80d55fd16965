#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // Dataset files arrive from users; parsing must never panic.
    let _ = blockrank_core::corpus::parse_examples(std::io::BufReader::new(data));
});
