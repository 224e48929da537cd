#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = introspect::data::parse_idx_labels(data, "fuzz");
});
