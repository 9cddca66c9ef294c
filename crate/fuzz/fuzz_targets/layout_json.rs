#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(layout) = decorstory::demb::parse_layout_json(data) {
        // Accepted layouts must satisfy the ordering invariants.
        assert!(layout.sot() < layout.identity().start);
        assert!(layout.n_frames() >= 1);
        assert!(layout.frames().last().unwrap().end < layout.eot());
    }
});
