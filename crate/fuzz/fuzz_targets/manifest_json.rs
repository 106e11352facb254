#![no_main]

use eitlab::cli::Job;
use eitlab::io::parse_manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(manifest) = parse_manifest(text) {
        let _ = serde_json::from_value::<Job>(manifest.job);
    }
});
