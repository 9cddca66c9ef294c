#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = decorstory::demb::parse_matrix_bytes(data);
});
