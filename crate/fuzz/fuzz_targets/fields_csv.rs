#![no_main]

use libfuzzer_sys::fuzz_target;
use mfg_fd::io::read_fields;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = read_fields(data) {
        let n = t.rows();
        assert!(t.x.len() == n && t.u.len() == n && t.m.len() == n);
        assert_eq!(t.y.len(), if t.dim == 2 { n } else { 0 });
    }
});
