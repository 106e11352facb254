#![no_main]

use eitlab::io::{parse_spectrum_csv, spectrum_table};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(spectrum) = parse_spectrum_csv(text) {
        assert!(spectrum.detunings().windows(2).all(|w| w[0] < w[1]));
        // Writing and re-reading keeps the sample count.
        let csv = spectrum_table(&spectrum).to_csv("fuzz");
        if let Ok(again) = parse_spectrum_csv(std::str::from_utf8(&csv).unwrap()) {
            assert_eq!(again.len(), spectrum.len());
        }
    }
});
