#![no_main]

use libfuzzer_sys::fuzz_target;
use mfg_fd::config::parse_bench_config;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(c) = parse_bench_config(text) {
        let again = parse_bench_config(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(again, c);
    }
});
