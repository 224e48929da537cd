#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(d) = introspect::data::parse_csv_dataset(text, "fuzz") {
        assert_eq!(d.samples.len(), d.labels.len());
        assert!(d.labels.iter().all(|&y| y < d.num_classes));
    }
});
