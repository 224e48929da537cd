#![no_main]

use libfuzzer_sys::fuzz_target;

// First byte picks the row width, the rest is the table text.
fuzz_target!(|data: &[u8]| {
    let Some((&w, rest)) = data.split_first() else { return };
    let Ok(text) = std::str::from_utf8(rest) else { return };
    let width = (w % 16) as usize + 1;
    if let Ok((rows, labels)) = introspect::introspection::parse_feature_table(text, width, "fuzz") {
        assert_eq!(rows.len(), labels.len());
        assert!(rows.iter().all(|r| r.len() == width));
    }
});
