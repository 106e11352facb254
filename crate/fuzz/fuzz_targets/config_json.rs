#![no_main]

use eitlab::physics::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(config) = ExperimentConfig::from_json(text) {
        // Accepted configs are valid and survive a round trip.
        config.validate().expect("accepted config validates");
        let back = ExperimentConfig::from_json(&config.to_json()).expect("round trip parses");
        assert_eq!(back, config);
    }
});
