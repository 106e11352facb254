#![no_main]

use eitlab::io::parse_store_request;
use eitlab::storage::validate_schedule;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(request) = parse_store_request(text) {
        if request.validate().is_ok() {
            // A valid protocol always yields a valid control schedule.
            validate_schedule(&request.protocol.schedule()).expect("schedule of a valid protocol");
        }
    }
});
