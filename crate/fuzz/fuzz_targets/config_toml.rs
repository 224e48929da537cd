#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = introspect::config::RunConfig::parse(text, "fuzz.toml") {
        let _ = cfg.to_json();
    }
});
