#![no_main]

use eitlab::io::{parse_grid, parse_list};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(grid) = parse_grid(text) {
        let d = grid.detunings();
        assert_eq!(d.len(), grid.points);
        assert!(d.iter().all(|v| v.is_finite()));
    }
    if let Ok(list) = parse_list(text) {
        assert!(!list.is_empty() && list.iter().all(|v| v.is_finite()));
    }
});
