#![no_main]

use dida::data::DatasetManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(manifest) = DatasetManifest::from_json(text) {
        // Anything accepted must survive a round trip.
        let again = manifest.to_json().expect("valid manifest serializes");
        DatasetManifest::from_json(&again).expect("serialized manifest parses");
    }
});
