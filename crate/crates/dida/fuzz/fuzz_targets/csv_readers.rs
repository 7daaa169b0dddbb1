#![no_main]

use dida::evaluation::{read_metrics_csv, read_mmd_csv, read_sweep_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = read_sweep_csv(text);
    let _ = read_mmd_csv(text);
    let _ = read_metrics_csv(text);
});
