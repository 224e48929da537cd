#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = introspect::head::parse_bundle_manifest(data, "fuzz");
});
