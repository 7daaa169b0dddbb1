#![no_main]

use dida::trainer::TrainConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(config) = TrainConfig::from_json_str(text) {
        let back = TrainConfig::from_json_str(&config.to_flat_json()).expect("resolved config parses");
        assert_eq!(back, config);
    }
});
