#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = introspect::data::parse_idx_images(data, "fuzz") {
        assert!(img.images.iter().all(|i| i.len() == img.rows * img.cols));
    }
});
