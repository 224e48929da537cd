#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(net) = introspect::nn::NetworkFile::parse(data, "fuzz") {
        let json = introspect::nn::network_to_json(&net);
        let again = introspect::nn::NetworkFile::parse(json.as_bytes(), "fuzz").expect("re-parse");
        assert_eq!(net, again);
    }
});
