#![no_main]

use std::path::Path;

use dida::data::{decode_label_png, decode_rgb_png};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let origin = Path::new("fuzz.png");
    if let Ok(image) = decode_rgb_png(data, origin) {
        assert!(image.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
    let _ = decode_label_png(data, origin);
});
